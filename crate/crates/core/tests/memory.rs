use e3va::backbone::BackboneConfig;
use e3va::peft::{build_model, MethodConfig, MethodName};
use e3va::profile::{compare_methods, profile_structure, time_step, ProfileOptions};
use e3va::train::{gen_synthetic, loss_and_grads, HeadConfig, SyntheticDataset};

fn toy_data() -> SyntheticDataset {
    gen_synthetic(7, 8, BackboneConfig::toy1().img, 4).unwrap()
}

fn methods(embed: usize) -> Vec<MethodConfig> {
    MethodName::ALL
        .into_iter()
        .map(|n| MethodConfig::new(n).with_proportional_adapter_dim(embed))
        .collect()
}

#[test]
fn totals_are_sums_over_nodes() {
    let cfg = BackboneConfig::micro();
    let data = gen_synthetic(0, 2, cfg.img, 4).unwrap();
    for m in [MethodConfig::e3va(2), MethodConfig::new(MethodName::Lora)] {
        let model = build_model::<f64>(&cfg, &m, &HeadConfig::default(), 0).unwrap();
        let (_, _, tape) = loss_and_grads(&model, &data, &[0, 1]).unwrap();
        let s = tape.stats();
        assert_eq!(s.grad_bytes_total, tape.nodes().iter().map(|n| n.grad_bytes()).sum::<usize>());
        assert_eq!(s.saved_bytes_total, tape.nodes().iter().map(|n| n.saved_bytes()).sum::<usize>());
        assert_eq!(s.n_grad_nodes, tape.nodes().iter().filter(|n| n.needs_grad()).count());
    }
}

#[test]
fn full_tuning_needs_the_most_gradient_memory() {
    let cfg = BackboneConfig::toy1();
    let data = toy_data();
    let head = HeadConfig::default();
    let opts = ProfileOptions::default();
    let grad = |m: &MethodConfig| profile_structure::<f64>(&cfg, m, &head, &data, &opts).unwrap().stats.grad_bytes_total;
    let full = grad(&MethodConfig::new(MethodName::Full));
    for m in methods(cfg.embed_dim) {
        assert!(grad(&m) <= full, "{}", m.label());
    }
    let fixed = grad(&MethodConfig::new(MethodName::Fixed));
    assert!(grad(&MethodConfig::e3va(8)) > fixed);
}

#[test]
fn byte_counts_repeat_exactly() {
    let cfg = BackboneConfig::toy1();
    let data = toy_data();
    let m = MethodConfig::e3va(8);
    let opts = ProfileOptions::default();
    let a = profile_structure::<f64>(&cfg, &m, &HeadConfig::default(), &data, &opts).unwrap();
    let b = profile_structure::<f64>(&cfg, &m, &HeadConfig::default(), &data, &opts).unwrap();
    assert_eq!(a, b);
}

#[test]
fn highway_step_is_not_slower_than_full() {
    let cfg = BackboneConfig::toy1();
    let data = toy_data();
    let head = HeadConfig::default();
    let opts = ProfileOptions::default();
    let time = |m: MethodConfig| {
        let mut model = build_model::<f64>(&cfg, &m, &head, opts.seed).unwrap();
        time_step(&mut model, &data, &opts).unwrap()
    };
    let faster = || time(MethodConfig::e3va(8)) <= time(MethodConfig::new(MethodName::Full));
    assert!(faster() || faster(), "e3va step slower than full twice in a row");
}

#[test]
fn comparison_is_relative_to_full() {
    let cfg = BackboneConfig::micro();
    let data = gen_synthetic(1, 4, cfg.img, 4).unwrap();
    let opts = ProfileOptions { k: 5, batch: 2, ..Default::default() };
    let ms = [MethodConfig::new(MethodName::Fixed), MethodConfig::e3va(2)];
    let r = compare_methods::<f64>(&cfg, &ms, &HeadConfig::default(), &data, &opts, true).unwrap();
    assert_eq!(r.rows.len(), 2);
    assert_eq!(r.profiles.len(), 3);
    let full = r.profiles.iter().find(|p| p.method == "full").unwrap();
    assert_eq!(r.rows[0].grad_bytes, r.profiles[0].grad_bytes);
    assert!(r.rows[0].grad_bytes < full.grad_bytes);
    let e3va = r.rows.iter().find(|row| row.method == "e3va-a2").unwrap();
    assert!(e3va.delta_mem_pct < 0.0);
    assert_eq!(e3va.n_backbone_grad_nodes, 0);
}
