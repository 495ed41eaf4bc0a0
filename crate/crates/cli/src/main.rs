mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use e3va::accountant::{count_params, delta_pct};
use e3va::peft::{build_model, MethodConfig, MethodName};
use e3va::profile::{ablate, compare_methods, profile_step, ProfileOptions, Toggle};
use e3va::report::{ensure_free, report_path, train_report_paths, write_csv, write_json, write_train_report, Format};
use e3va::train::gradcheck::{gradcheck, GradcheckOptions};
use e3va::train::{gen_synthetic, train, SyntheticDataset};

use config::{method_list, CommonArgs, ExperimentConfig};

#[derive(Debug, Parser)]
#[command(name = "e3va", version, about = "Gradient-highway adapter tuning lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, clap::Args)]
struct TimingArgs {
    /// Timed repetitions (median reported).
    #[arg(long, default_value_t = 20)]
    k: usize,
    /// Untimed steps before timing.
    #[arg(long, default_value_t = 2)]
    warmup: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Symbolic parameter counts as CSV on stdout.
    CountParams {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated methods; defaults to the configured one.
        #[arg(long)]
        methods: Option<String>,
        /// Also write the CSV here.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train on the synthetic task and write the training report.
    Train {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Compare backward gradients with central differences per parameter group.
    Gradcheck {
        #[command(flatten)]
        common: CommonArgs,
        /// Coordinates sampled per group; 0 checks all of them.
        #[arg(long, default_value_t = 500)]
        coords: usize,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
    },
    /// Gradient bytes, grad-node counts and median step time of one method.
    Profile {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        timing: TimingArgs,
    },
    /// Profile several methods with deltas against full tuning.
    Compare {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        timing: TimingArgs,
        #[arg(long, default_value = "full,fixed,adapter,lora,e3va")]
        methods: String,
        /// Profile graph structure of all methods concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Train the trainable-reduction × FPN-norm toggle grid.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_delimiter = ',', default_value = "trainable_reduction,train_fpn_norm")]
        toggles: Vec<String>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::CountParams { common, methods, output } => cmd_count_params(&common, methods.as_deref(), output),
        Command::Train { common } => cmd_train(&common),
        Command::Gradcheck { common, coords, eps } => cmd_gradcheck(&common, coords, eps),
        Command::Profile { common, timing } => cmd_profile(&common, &timing),
        Command::Compare {
            common,
            timing,
            methods,
            parallel,
        } => cmd_compare(&common, &timing, &methods, parallel),
        Command::Ablate { common, toggles } => cmd_ablate(&common, &toggles),
    }
}

#[derive(Debug, Serialize)]
struct CountRow {
    method: String,
    backbone: String,
    alpha: Option<usize>,
    trainable: u64,
    total: u64,
    delta_vs_full_pct: f64,
}

fn cmd_count_params(common: &CommonArgs, methods: Option<&str>, output: Option<PathBuf>) -> Result<()> {
    let c = common.resolve()?;
    let cfg = c.model.resolve()?;
    let ms = match methods {
        Some(list) => method_list(list, &c.method)?,
        None => vec![c.method.clone()],
    };
    let full = count_params(&cfg, &MethodConfig::new(MethodName::Full))?.trainable;
    let mut rows = Vec::with_capacity(ms.len());
    for m in &ms {
        let n = count_params(&cfg, m)?;
        rows.push(CountRow {
            method: m.name.to_string(),
            backbone: c.model.label().to_string(),
            alpha: (m.name == MethodName::E3va).then_some(m.alpha),
            trainable: n.trainable,
            total: n.total,
            delta_vs_full_pct: delta_pct(n.trainable as f64, full as f64),
        });
    }
    let body = e3va::report::csv_string(&rows)?;
    print!("{body}");
    if let Some(p) = output {
        write_csv(&p, &rows, common.force)?;
    }
    Ok(())
}

fn dataset(c: &ExperimentConfig) -> Result<SyntheticDataset> {
    let cfg = c.model.resolve()?;
    Ok(gen_synthetic(c.train.seed, c.train.n_images, cfg.img, c.head.classes)?)
}

/// `{out_dir}/{stem}_{seed}_{steps}{suffix}.{ext}`, refused up front if it
/// exists and `force` is off.
fn output_path(c: &ExperimentConfig, force: bool, stem: &str, suffix: &str) -> Result<PathBuf> {
    let p = report_path(&c.report.out_dir, stem, c.train.seed, c.train.steps, suffix, c.report.format.ext());
    ensure_free(std::slice::from_ref(&p), force)?;
    Ok(p)
}

/// Writes `value` as JSON or `rows` as CSV.
fn write_report<V: Serialize, R: Serialize>(
    c: &ExperimentConfig,
    force: bool,
    p: &Path,
    value: &V,
    rows: &[R],
) -> Result<()> {
    match c.report.format {
        Format::Json => write_json(p, value, force)?,
        Format::Csv => write_csv(p, rows, force)?,
    }
    written(&[p]);
    Ok(())
}

fn written(paths: &[impl AsRef<Path>]) {
    for p in paths {
        println!("wrote {}", p.as_ref().display());
    }
}

fn ensure_finite(what: &str, vals: impl IntoIterator<Item = f64>) -> Result<()> {
    if vals.into_iter().any(|v| !v.is_finite()) {
        bail!("{what} contains non-finite values");
    }
    Ok(())
}

fn cmd_train(common: &CommonArgs) -> Result<()> {
    let c = common.resolve()?;
    c.model.require_materializable("train")?;
    let cfg = c.model.resolve()?;
    ensure_free(
        &train_report_paths(&c.report.out_dir, &c.method.label(), c.train.seed, c.train.steps, c.report.format),
        common.force,
    )?;
    let data = dataset(&c)?;
    let (_, r) = train::<f64>(&cfg, &c.method, &c.head, &data, &c.train)?;
    ensure_finite("loss curve", r.loss_curve.iter().copied().chain([r.final_loss, r.final_pixel_acc]))?;
    println!(
        "{}: final loss {:.4} (step 1: {:.4}), pixel accuracy {:.3}, {} trainable",
        r.method,
        r.final_loss,
        r.loss_curve.first().copied().unwrap_or(f64::NAN),
        r.final_pixel_acc,
        r.trainable_params
    );
    if r.frozen_checksum_before != r.frozen_checksum_after {
        bail!("frozen parameters changed during training");
    }
    written(&write_train_report(&c.report.out_dir, &r, c.report.format, common.force)?);
    Ok(())
}

fn cmd_gradcheck(common: &CommonArgs, coords: usize, eps: f64) -> Result<()> {
    let c = common.resolve()?;
    c.model.require_materializable("gradcheck")?;
    let cfg = c.model.resolve()?;
    let path = output_path(&c, common.force, &c.method.label(), "_gradcheck")?;
    let data = dataset(&c)?;
    let model = build_model::<f64>(&cfg, &c.method, &c.head, c.train.seed)?;
    let idx: Vec<usize> = (0..c.train.batch.min(data.n)).collect();
    let opts = GradcheckOptions {
        max_coords_per_group: (coords > 0).then_some(coords),
        eps,
        seed: c.train.seed,
        ..Default::default()
    };
    let r = gradcheck(&model, &data, &idx, opts)?;
    for g in &r.groups {
        println!(
            "{} {}: max_rel_err {:.3e} over {}/{} coords (worst {})",
            r.method, g.group, g.max_rel_err, g.n_coords, g.n_scalars, g.worst_param
        );
    }
    ensure_finite("gradient check", r.groups.iter().map(|g| g.max_rel_err))?;
    write_report(&c, common.force, &path, &r, &r.groups)
}

fn profile_options(c: &ExperimentConfig, t: &TimingArgs) -> ProfileOptions {
    ProfileOptions {
        k: t.k,
        warmup: t.warmup,
        batch: c.train.batch,
        seed: c.train.seed,
    }
}

fn cmd_profile(common: &CommonArgs, timing: &TimingArgs) -> Result<()> {
    let c = common.resolve()?;
    c.model.require_materializable("profile")?;
    let cfg = c.model.resolve()?;
    let path = output_path(&c, common.force, &c.method.label(), "_profile")?;
    let data = dataset(&c)?;
    let p = profile_step::<f64>(&cfg, &c.method, &c.head, &data, &profile_options(&c, timing))?;
    println!(
        "{}: grad_bytes {} act_saved_bytes {} grad nodes {} (backbone {}) step {:.2} ms",
        p.method, p.grad_bytes, p.act_saved_bytes, p.n_grad_nodes, p.n_backbone_grad_nodes, p.step_time_ms
    );
    ensure_finite("profile", [p.step_time_ms])?;
    write_report(&c, common.force, &path, &p, std::slice::from_ref(&p))
}

fn cmd_compare(common: &CommonArgs, timing: &TimingArgs, methods: &str, parallel: bool) -> Result<()> {
    let c = common.resolve()?;
    c.model.require_materializable("compare")?;
    let cfg = c.model.resolve()?;
    let path = output_path(&c, common.force, "compare", "")?;
    let data = dataset(&c)?;
    let ms = method_list(methods, &c.method)?;
    let r = compare_methods::<f64>(&cfg, &ms, &c.head, &data, &profile_options(&c, timing), parallel)?;
    print!("{}", e3va::report::csv_string(&r.rows)?);
    ensure_finite(
        "comparison",
        r.rows.iter().flat_map(|row| [row.delta_params_pct, row.delta_mem_pct, row.step_time_ms, row.delta_time_pct]),
    )?;
    write_report(&c, common.force, &path, &r.rows, &r.rows)
}

fn cmd_ablate(common: &CommonArgs, toggles: &[String]) -> Result<()> {
    let c = common.resolve()?;
    c.model.require_materializable("ablate")?;
    let cfg = c.model.resolve()?;
    let path = output_path(&c, common.force, &format!("ablate-{}", c.method.label()), "")?;
    let data = dataset(&c)?;
    let toggles: Vec<Toggle> = toggles
        .iter()
        .map(|t| serde_json::from_value(serde_json::Value::String(t.trim().to_string())))
        .collect::<std::result::Result<_, _>>()
        .context("toggles must be trainable_reduction and/or train_fpn_norm")?;
    let r = ablate::<f64>(&cfg, &c.method, &toggles, &c.head, &data, &c.train)?;
    print!("{}", e3va::report::csv_string(&r.rows)?);
    ensure_finite("ablation", r.rows.iter().flat_map(|row| [row.final_loss, row.final_pixel_acc]))?;
    write_report(&c, common.force, &path, &r, &r.rows)
}
