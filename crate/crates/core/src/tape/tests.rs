use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Nodes on a path from a trainable leaf to `loss`, computed from the public
/// edge lists alone.
fn reachability_oracle(tape: &Tape<f64>, loss: NodeId) -> BTreeSet<usize> {
    let nodes = tape.nodes();
    let mut forward = vec![false; nodes.len()];
    for (i, n) in nodes.iter().enumerate() {
        forward[i] = n.trainable() || n.inputs().iter().any(|p| forward[p.0]);
    }
    let mut backward = vec![false; nodes.len()];
    let mut stack = vec![loss.0];
    while let Some(i) = stack.pop() {
        if backward[i] {
            continue;
        }
        backward[i] = true;
        stack.extend(nodes[i].inputs().iter().map(|p| p.0));
    }
    (0..nodes.len()).filter(|&i| forward[i] && backward[i]).collect()
}

fn flagged(tape: &Tape<f64>) -> BTreeSet<usize> {
    (0..tape.len()).filter(|&i| tape.nodes()[i].needs_grad()).collect()
}

/// Contracts `out` with a fixed random vector so every output element gets a
/// distinct upstream gradient.
fn contract(tape: &mut Tape<f64>, out: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    let n = out.numel();
    let flat = tape.reshape(out, &[1, n]).unwrap();
    let r = tape.constant(&[n, 1], rand_vec(rng, n)).unwrap();
    let y = tape.matmul(&flat, &r).unwrap();
    tape.sum(&y).unwrap()
}

/// Compares backward against central differences for a graph built by `build`
/// over trainable leaves of the given shapes.
fn gradcheck<F>(shapes: &[Vec<usize>], seed: u64, build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Tensor]) -> Tensor,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values: Vec<Vec<f64>> = shapes
        .iter()
        .map(|s| rand_vec(&mut rng, s.iter().product()))
        .collect();
    let contract_seed = rng.random::<u64>();
    let eval = |vals: &[Vec<f64>], want_grad: bool| {
        let mut tape = Tape::<f64>::new();
        let leaves: Vec<Tensor> = shapes
            .iter()
            .zip(vals)
            .map(|(s, v)| tape.param(s, v.clone(), true).unwrap())
            .collect();
        let out = build(&mut tape, &leaves);
        let mut crng = ChaCha8Rng::seed_from_u64(contract_seed);
        let loss = contract(&mut tape, &out, &mut crng);
        let value = tape.value(&loss)[0];
        let grads = want_grad.then(|| {
            tape.mark_closure(&loss).unwrap();
            let g = tape.backward(&loss).unwrap();
            leaves
                .iter()
                .map(|l| g.get(l.id()).map(<[f64]>::to_vec).unwrap_or(vec![0.0; l.numel()]))
                .collect::<Vec<_>>()
        });
        (value, grads)
    };
    let analytic: Vec<f64> = eval(&values, true).1.unwrap().concat();
    let coords = all_coords(&values);
    let numeric = finite_diff_grad(
        |v| Ok(eval(v, false).0),
        &mut values,
        &coords,
        FiniteDiffOptions::default(),
    )
    .unwrap();
    max_relative_error(&analytic, &numeric)
}

#[test]
fn tensor_new_identity_matrix() {
    let mut tape = Tape::<f64>::new();
    let t = tape
        .tensor_new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0], TensorKind::Parameter, true)
        .unwrap();
    assert_eq!(t.numel(), 4);
    assert!(tape.node(t.id()).unwrap().trainable());
}

#[test]
fn trainable_constant_rejected() {
    let mut tape = Tape::<f64>::new();
    let err = tape.tensor_new(&[1], vec![1.0], TensorKind::Constant, true);
    assert!(matches!(err, Err(Error::TrainableConstant)));
}

#[test]
fn shape_data_mismatch() {
    let mut tape = Tape::<f64>::new();
    let err = tape.tensor_new(&[3], vec![0.0; 4], TensorKind::Constant, false);
    assert!(matches!(err, Err(Error::ShapeData { expected: 3, got: 4, .. })));
}

#[test]
fn matmul_shape_algebra_and_error() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(&[2, 3], vec![1.0; 6]).unwrap();
    let b = tape.constant(&[3, 4], vec![1.0; 12]).unwrap();
    let c = tape.matmul(&a, &b).unwrap();
    assert_eq!(c.shape(), &[2, 4]);
    assert!(tape.value(&c).iter().all(|&v| v == 3.0));
    let err = tape.matmul(&b, &b).unwrap_err();
    match err {
        Error::Shape { op, shapes } => {
            assert_eq!(op, "matmul");
            assert_eq!(shapes, vec![vec![3, 4], vec![3, 4]]);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn apply_dispatches_primitives() {
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(&[1], vec![0.0]).unwrap();
    let g = tape.apply(Primitive::Gelu, &[&z]).unwrap();
    assert_eq!(tape.value(&g), &[0.0]);
    assert!(tape.apply(Primitive::Add, &[&z]).is_err());
    assert!(tape.apply(Primitive::Softmax { axis: 0 }, &[&z]).is_ok());
    let m = tape.constant(&[2, 2], vec![0.0; 4]).unwrap();
    assert!(tape.apply(Primitive::Softmax { axis: 0 }, &[&m]).is_err());
}

#[test]
fn uniform_cross_entropy_is_ln4() {
    let mut tape = Tape::<f64>::new();
    let logits = tape.constant(&[3, 4], vec![0.25; 12]).unwrap();
    let loss = tape.cross_entropy(&logits, &[0, 3, 2]).unwrap();
    assert!((tape.value(&loss)[0] - 4f64.ln()).abs() < 1e-15);
    assert!((tape.value(&loss)[0] - 1.3863).abs() < 1e-4);
}

#[test]
fn closure_without_trainable_leaves_is_empty() {
    let mut tape = Tape::<f64>::new();
    let c = tape.constant(&[2], vec![1.0, 2.0]).unwrap();
    let y = tape.gelu(&c).unwrap();
    let loss = tape.sum(&y).unwrap();
    tape.mark_closure(&loss).unwrap();
    assert!(flagged(&tape).is_empty());
    let grads = tape.backward(&loss).unwrap();
    assert!(grads.is_empty());
    assert_eq!(tape.stats().grad_bytes_total, 0);
}

#[test]
fn direct_path_flags_op_and_loss() {
    let mut tape = Tape::<f64>::new();
    let p = tape.param(&[2], vec![1.0, 2.0], true).unwrap();
    let y = tape.gelu(&p).unwrap();
    let loss = tape.sum(&y).unwrap();
    tape.mark_closure(&loss).unwrap();
    assert!(tape.needs_grad(&p) && tape.needs_grad(&y) && tape.needs_grad(&loss));
}

#[test]
fn non_scalar_loss_rejected() {
    let mut tape = Tape::<f64>::new();
    let p = tape.param(&[2], vec![1.0, 2.0], true).unwrap();
    assert!(matches!(tape.mark_closure(&p), Err(Error::NonScalarLoss(_))));
}

#[test]
fn backward_requires_closure() {
    let mut tape = Tape::<f64>::new();
    let p = tape.param(&[1], vec![1.0], true).unwrap();
    let loss = tape.sum(&p).unwrap();
    assert!(matches!(tape.backward(&loss), Err(Error::ClosureNotMarked(_))));
    // a tensor from another tape is unknown here
    let mut other = Tape::<f64>::new();
    for _ in 0..5 {
        other.constant(&[1], vec![0.0]).unwrap();
    }
    let one = other.constant(&[1], vec![1.0]).unwrap();
    let foreign = other.sum(&one).unwrap();
    assert!(matches!(tape.mark_closure(&foreign), Err(Error::UnknownNode(_))));
}

#[test]
fn recording_after_closure_invalidates_it() {
    let mut tape = Tape::<f64>::new();
    let p = tape.param(&[1], vec![1.0], true).unwrap();
    let loss = tape.sum(&p).unwrap();
    tape.mark_closure(&loss).unwrap();
    tape.constant(&[1], vec![0.0]).unwrap();
    assert!(matches!(tape.backward(&loss), Err(Error::ClosureNotMarked(_))));
}

#[test]
fn sum_of_linear_map_gives_broadcast_input() {
    // loss = sum(x · W), x constant [1, 3], W [3, 2] -> dL/dW[i, j] = x[i]
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(&[1, 3], vec![1.0, -2.0, 0.5]).unwrap();
    let w = tape.param(&[3, 2], vec![0.3; 6], true).unwrap();
    let y = tape.matmul(&x, &w).unwrap();
    let loss = tape.sum(&y).unwrap();
    tape.mark_closure(&loss).unwrap();
    let grads = tape.backward(&loss).unwrap();
    assert_eq!(grads.len(), 1);
    assert_eq!(grads.get(w.id()).unwrap(), &[1.0, 1.0, -2.0, -2.0, 0.5, 0.5]);
    assert!(!tape.needs_grad(&x));
}

#[test]
fn mixed_edge_add_only_flows_to_trainable_side() {
    let mut tape = Tape::<f64>::new();
    let c = tape.constant(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    let cg = tape.gelu(&c).unwrap();
    let p = tape.param(&[3], vec![0.1, 0.2, 0.3], true).unwrap();
    let pg = tape.gelu(&p).unwrap();
    let s = tape.add(&cg, &pg).unwrap();
    let loss = tape.sum(&s).unwrap();
    tape.mark_closure(&loss).unwrap();
    tape.backward(&loss).unwrap();
    assert_eq!(tape.node(cg.id()).unwrap().grad_bytes(), 0);
    assert_eq!(tape.node(c.id()).unwrap().grad_bytes(), 0);
    assert_eq!(tape.node(pg.id()).unwrap().grad_bytes(), 3 * 8);
    // gelu(p) reads p; nothing reads c's branch
    assert_eq!(tape.node(p.id()).unwrap().saved_bytes(), 3 * 8);
    assert_eq!(tape.node(c.id()).unwrap().saved_bytes(), 0);
}

#[test]
fn frozen_parameters_get_no_gradient() {
    let mut tape = Tape::<f64>::new();
    let frozen = tape.param(&[2], vec![1.0, 1.0], false).unwrap();
    let p = tape.param(&[2], vec![0.5, 0.5], true).unwrap();
    let s = tape.add(&frozen, &p).unwrap();
    let loss = tape.sum(&s).unwrap();
    tape.mark_closure(&loss).unwrap();
    let grads = tape.backward(&loss).unwrap();
    assert!(!grads.contains(frozen.id()));
    assert!(grads.contains(p.id()));
}

#[test]
fn dangling_trainable_parameter_not_in_gradmap() {
    let mut tape = Tape::<f64>::new();
    let unused = tape.param(&[2], vec![1.0, 1.0], true).unwrap();
    let p = tape.param(&[1], vec![0.5], true).unwrap();
    let loss = tape.sum(&p).unwrap();
    tape.mark_closure(&loss).unwrap();
    let grads = tape.backward(&loss).unwrap();
    assert!(!grads.contains(unused.id()));
    assert_eq!(grads.len(), 1);
}

#[test]
fn non_finite_values_are_flagged_with_node() {
    let mut tape = Tape::<f64>::new();
    let p = tape.param(&[1], vec![f64::NAN], true).unwrap();
    let loss = tape.sum(&p).unwrap();
    tape.mark_closure(&loss).unwrap();
    match tape.backward(&loss) {
        Err(Error::NonFinite { node, .. }) => assert_eq!(node, p.id().0),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn grad_bytes_positive_iff_needs_grad_after_backward() {
    let mut tape = Tape::<f64>::new();
    let c = tape.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let w = tape.param(&[2, 2], vec![0.1, 0.2, 0.3, 0.4], true).unwrap();
    let frozen = tape.param(&[2, 2], vec![1.0; 4], false).unwrap();
    let h = tape.matmul(&c, &frozen).unwrap();
    let y = tape.matmul(&h, &w).unwrap();
    let n = tape.layer_norm(&y, None, 1e-5).unwrap();
    let loss = tape.mean(&n).unwrap();
    tape.mark_closure(&loss).unwrap();
    assert!(tape.nodes().iter().all(|n| n.grad_bytes() == 0));
    tape.backward(&loss).unwrap();
    for node in tape.nodes() {
        assert_eq!(node.grad_bytes() > 0, node.needs_grad());
    }
    let stats = tape.stats();
    assert_eq!(
        stats.grad_bytes_total,
        tape.nodes().iter().map(|n| n.grad_bytes()).sum::<usize>()
    );
    let const_bytes: usize = tape
        .nodes()
        .iter()
        .filter(|n| n.kind() == TensorKind::Constant)
        .map(|n| n.grad_bytes())
        .sum();
    assert_eq!(const_bytes, 0);
    assert!(stats.n_grad_nodes <= stats.n_nodes);
}

#[test]
fn primitive_gradients_match_central_differences() {
    let cases: Vec<(&str, Vec<Vec<usize>>, Box<dyn Fn(&mut Tape<f64>, &[Tensor]) -> Tensor>)> = vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], Box::new(|t, p| t.matmul(&p[0], &p[1]).unwrap())),
        (
            "batched matmul",
            vec![vec![2, 3, 4], vec![2, 4, 2]],
            Box::new(|t, p| t.matmul(&p[0], &p[1]).unwrap()),
        ),
        ("add broadcast", vec![vec![3, 4], vec![4]], Box::new(|t, p| t.add(&p[0], &p[1]).unwrap())),
        ("scale", vec![vec![5]], Box::new(|t, p| t.scale(&p[0], -1.7).unwrap())),
        ("scale_by", vec![vec![5], vec![1]], Box::new(|t, p| t.scale_by(&p[0], &p[1]).unwrap())),
        ("gelu", vec![vec![7]], Box::new(|t, p| t.gelu(&p[0]).unwrap())),
        ("softmax", vec![vec![3, 5]], Box::new(|t, p| t.softmax(&p[0]).unwrap())),
        (
            "layernorm",
            vec![vec![3, 6], vec![6], vec![6]],
            Box::new(|t, p| t.layer_norm(&p[0], Some((&p[1], &p[2])), 1e-5).unwrap()),
        ),
        ("layernorm plain", vec![vec![2, 5]], Box::new(|t, p| t.layer_norm(&p[0], None, 1e-5).unwrap())),
        ("transpose", vec![vec![2, 3, 4]], Box::new(|t, p| t.transpose(&p[0], &[2, 0, 1]).unwrap())),
        (
            "window partition",
            vec![vec![1, 16, 2]],
            Box::new(|t, p| t.window_partition(&p[0], 4, 2).unwrap()),
        ),
        (
            "window merge",
            vec![vec![4, 4, 2]],
            Box::new(|t, p| t.window_merge(&p[0], 4, 2).unwrap()),
        ),
        (
            "concat",
            vec![vec![2, 3], vec![2, 1]],
            Box::new(|t, p| t.concat(&[&p[0], &p[1]], 1).unwrap()),
        ),
        ("slice", vec![vec![3, 4]], Box::new(|t, p| t.slice(&p[0], 1, 1, 2).unwrap())),
        (
            "upsample",
            vec![vec![1, 4, 3]],
            Box::new(|t, p| t.upsample_nearest(&p[0], 2, 2).unwrap()),
        ),
        ("mean", vec![vec![6]], Box::new(|t, p| t.mean(&p[0]).unwrap())),
        (
            "cross entropy",
            vec![vec![4, 3]],
            Box::new(|t, p| t.cross_entropy(&p[0], &[0, 2, 1, 2]).unwrap()),
        ),
    ];
    for (seed, (name, shapes, build)) in cases.into_iter().enumerate() {
        let err = gradcheck(&shapes, seed as u64, |t, p| build(t, p));
        assert!(err < 1e-6, "{name}: max relative error {err}");
    }
}

#[test]
fn window_partition_round_trip() {
    let mut tape = Tape::<f64>::new();
    let data: Vec<f64> = (0..2 * 36 * 3).map(|v| v as f64).collect();
    let x = tape.constant(&[2, 36, 3], data.clone()).unwrap();
    let w = tape.window_partition(&x, 6, 3).unwrap();
    assert_eq!(w.shape(), &[8, 9, 3]);
    // first window of image 0 holds tokens 0,1,2,6,7,8,12,13,14
    let first_tokens: Vec<f64> = tape.value(&w)[..27].chunks(3).map(|c| c[0] / 3.0).collect();
    assert_eq!(first_tokens, vec![0.0, 1.0, 2.0, 6.0, 7.0, 8.0, 12.0, 13.0, 14.0]);
    let back = tape.window_merge(&w, 6, 3).unwrap();
    assert_eq!(tape.value(&back), &data[..]);
    assert!(tape.window_partition(&x, 6, 4).is_err());
}

#[test]
fn determinism_of_forward_and_backward() {
    let run = || {
        let mut tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = tape.constant(&[4, 3], rand_vec(&mut rng, 12)).unwrap();
        let w = tape.param(&[3, 3], rand_vec(&mut rng, 9), true).unwrap();
        let y = tape.matmul(&x, &w).unwrap();
        let y = tape.softmax(&y).unwrap();
        let loss = tape.cross_entropy(&y, &[0, 1, 2, 0]).unwrap();
        tape.mark_closure(&loss).unwrap();
        let g = tape.backward(&loss).unwrap();
        (g.get(w.id()).unwrap().to_vec(), tape.stats())
    };
    let (g1, s1) = run();
    let (g2, s2) = run();
    assert_eq!(
        g1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        g2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(s1, s2);
}

#[test]
fn f32_tape_accounts_four_bytes() {
    let mut tape = Tape::<f32>::new();
    let p = tape.param(&[3], vec![1.0, 2.0, 3.0], true).unwrap();
    let g = tape.gelu(&p).unwrap();
    let loss = tape.sum(&g).unwrap();
    tape.mark_closure(&loss).unwrap();
    tape.backward(&loss).unwrap();
    assert_eq!(tape.node(p.id()).unwrap().grad_bytes(), 12);
}

/// Random DAG: each step picks an op over earlier nodes.
fn build_random_graph(tape: &mut Tape<f64>, plan: &[(u8, usize, usize, bool)]) -> Tensor {
    let mut pool: Vec<Tensor> = vec![
        tape.param(&[3], vec![0.1, 0.2, 0.3], true).unwrap(),
        tape.constant(&[3], vec![1.0, 2.0, 3.0]).unwrap(),
        tape.param(&[3], vec![0.4, 0.5, 0.6], false).unwrap(),
    ];
    for &(op, a, b, leaf_trainable) in plan {
        let x = pool[a % pool.len()].clone();
        let y = pool[b % pool.len()].clone();
        let t = match op % 5 {
            0 => tape.add(&x, &y).unwrap(),
            1 => tape.gelu(&x).unwrap(),
            2 => tape.scale(&x, 0.5).unwrap(),
            3 => tape.param(&[3], vec![0.0; 3], leaf_trainable).unwrap(),
            _ => tape.softmax(&x).unwrap(),
        };
        pool.push(t);
    }
    let last = pool.last().unwrap().clone();
    tape.sum(&last).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn closure_equals_reachability(plan in proptest::collection::vec((0u8..5, 0usize..64, 0usize..64, any::<bool>()), 1..30)) {
        let mut tape = Tape::<f64>::new();
        let loss = build_random_graph(&mut tape, &plan);
        tape.mark_closure(&loss).unwrap();
        prop_assert_eq!(flagged(&tape), reachability_oracle(&tape, loss.id()));
        let grads = tape.backward(&loss).unwrap();
        let expected: BTreeSet<usize> = reachability_oracle(&tape, loss.id())
            .into_iter()
            .filter(|&i| tape.nodes()[i].trainable())
            .collect();
        prop_assert_eq!(grads.ids().map(|i| i.0).collect::<BTreeSet<_>>(), expected);
        for n in tape.nodes() {
            prop_assert_eq!(n.grad_bytes() > 0, n.needs_grad());
            if n.kind() == TensorKind::Constant {
                prop_assert_eq!(n.grad_bytes(), 0);
            }
        }
    }
}
