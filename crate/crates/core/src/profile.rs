//! Per-method gradient-memory, grad-node and step-time measurements, the
//! method comparison table and the highway ablation grid.
//!
//! Byte and node counts come from [`TapeStats`] of one backward pass and are
//! a pure function of config, method and batch shape. Times are the median of
//! `k` timed optimisation steps after `warmup` untimed ones.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accountant::{count_params, delta_pct};
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::peft::method::{MethodConfig, MethodName};
use crate::peft::model::{build_model, Model};
use crate::real::Real;
use crate::tape::TapeStats;
use crate::train::{loss_and_grads, train, AdamW, HeadConfig, SyntheticDataset, TrainConfig};

pub const MIN_REPS: usize = 5;
pub const MIN_WARMUP: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileOptions {
    pub k: usize,
    pub warmup: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        Self {
            k: 20,
            warmup: 2,
            batch: 4,
            seed: 7,
        }
    }
}

impl ProfileOptions {
    pub fn validate(&self) -> Result<()> {
        if self.k < MIN_REPS || self.warmup < MIN_WARMUP {
            return Err(Error::Config(format!(
                "profiling needs k ≥ {MIN_REPS} and warmup ≥ {MIN_WARMUP}, got k={} warmup={}",
                self.k, self.warmup
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepProfile {
    pub method: String,
    /// Table-scope trainable count.
    pub trainable_params: u64,
    pub grad_bytes: u64,
    pub act_saved_bytes: u64,
    pub n_grad_nodes: u64,
    pub n_backbone_grad_nodes: u64,
    pub step_time_ms: f64,
}

/// Byte and node counts of one structural step; timing left at zero.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuralProfile {
    pub method: String,
    pub trainable_params: u64,
    pub stats: TapeStats,
}

fn batch_indices(data: &SyntheticDataset, batch: usize) -> Vec<usize> {
    (0..batch).map(|i| i % data.n).collect()
}

/// Tape statistics of one forward and backward pass of a fresh model.
pub fn profile_structure<T: Real>(
    cfg: &BackboneConfig,
    m: &MethodConfig,
    head: &HeadConfig,
    data: &SyntheticDataset,
    opts: &ProfileOptions,
) -> Result<StructuralProfile> {
    let model = build_model::<T>(cfg, m, head, opts.seed)?;
    let (_, _, tape) = loss_and_grads(&model, data, &batch_indices(data, opts.batch))?;
    Ok(StructuralProfile {
        method: m.label(),
        trainable_params: count_params(cfg, m)?.trainable,
        stats: tape.stats(),
    })
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median wall time in milliseconds of one forward, backward and AdamW step.
pub fn time_step<T: Real>(
    model: &mut Model<T>,
    data: &SyntheticDataset,
    opts: &ProfileOptions,
) -> Result<f64> {
    opts.validate()?;
    let idx = batch_indices(data, opts.batch);
    let mut opt = AdamW::new(TrainConfig::default().adamw(), &model.store);
    let mut times = Vec::with_capacity(opts.k);
    for rep in 0..opts.warmup + opts.k {
        let start = Instant::now();
        let (_, grads, _) = loss_and_grads(model, data, &idx)?;
        opt.step(&mut model.store, &grads)?;
        if rep >= opts.warmup {
            times.push(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    Ok(median(times))
}

fn finish(s: StructuralProfile, step_time_ms: f64) -> StepProfile {
    StepProfile {
        method: s.method,
        trainable_params: s.trainable_params,
        grad_bytes: s.stats.grad_bytes_total as u64,
        act_saved_bytes: s.stats.saved_bytes_total as u64,
        n_grad_nodes: s.stats.n_grad_nodes as u64,
        n_backbone_grad_nodes: s.stats.n_backbone_grad_nodes as u64,
        step_time_ms,
    }
}

pub fn profile_step<T: Real>(
    cfg: &BackboneConfig,
    m: &MethodConfig,
    head: &HeadConfig,
    data: &SyntheticDataset,
    opts: &ProfileOptions,
) -> Result<StepProfile> {
    opts.validate()?;
    let s = profile_structure::<T>(cfg, m, head, data, opts)?;
    let mut model = build_model::<T>(cfg, m, head, opts.seed)?;
    let t = time_step(&mut model, data, opts)?;
    Ok(finish(s, t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub trainable_params: u64,
    pub delta_params_pct: f64,
    pub grad_bytes: u64,
    pub delta_mem_pct: f64,
    pub step_time_ms: f64,
    pub delta_time_pct: f64,
    pub n_backbone_grad_nodes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
    /// Every measured profile, including an unlisted full-tuning baseline.
    pub profiles: Vec<StepProfile>,
}

impl ComparisonReport {
    /// Deltas are relative to the `full` profile.
    pub fn from_profiles(profiles: Vec<StepProfile>, listed: usize) -> Result<Self> {
        let full_label = MethodConfig::new(MethodName::Full).label();
        let base = profiles
            .iter()
            .find(|p| p.method == full_label)
            .ok_or_else(|| Error::Config("comparison needs a full-tuning profile".into()))?;
        let rows = profiles[..listed]
            .iter()
            .map(|p| ComparisonRow {
                method: p.method.clone(),
                trainable_params: p.trainable_params,
                delta_params_pct: delta_pct(p.trainable_params as f64, base.trainable_params as f64),
                grad_bytes: p.grad_bytes,
                delta_mem_pct: delta_pct(p.grad_bytes as f64, base.grad_bytes as f64),
                step_time_ms: p.step_time_ms,
                delta_time_pct: delta_pct(p.step_time_ms, base.step_time_ms),
                n_backbone_grad_nodes: p.n_backbone_grad_nodes,
            })
            .collect();
        Ok(Self { rows, profiles })
    }
}

/// Profiles every method and reports deltas against full tuning, which is
/// profiled as well when not listed. With `parallel`, structural profiling
/// runs concurrently; timed steps always run one method at a time.
pub fn compare_methods<T: Real>(
    cfg: &BackboneConfig,
    methods: &[MethodConfig],
    head: &HeadConfig,
    data: &SyntheticDataset,
    opts: &ProfileOptions,
    parallel: bool,
) -> Result<ComparisonReport> {
    if methods.len() < 2 {
        return Err(Error::Config(format!("compare needs at least 2 methods, got {}", methods.len())));
    }
    opts.validate()?;
    let mut all = methods.to_vec();
    if !all.iter().any(|m| m.name == MethodName::Full) {
        all.push(MethodConfig::new(MethodName::Full));
    }
    let structure: Vec<StructuralProfile> = if parallel {
        all.par_iter()
            .map(|m| profile_structure::<T>(cfg, m, head, data, opts))
            .collect::<Result<_>>()?
    } else {
        all.iter()
            .map(|m| profile_structure::<T>(cfg, m, head, data, opts))
            .collect::<Result<_>>()?
    };
    let mut profiles = Vec::with_capacity(all.len());
    for (m, s) in all.iter().zip(structure) {
        let mut model = build_model::<T>(cfg, m, head, opts.seed)?;
        let t = time_step(&mut model, data, opts)?;
        profiles.push(finish(s, t));
    }
    ComparisonReport::from_profiles(profiles, methods.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Toggle {
    TrainableReduction,
    TrainFpnNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub trainable_reduction: bool,
    pub train_fpn_norm: bool,
    pub final_loss: f64,
    pub final_pixel_acc: f64,
    /// Table-scope trainable count.
    pub trainable_params: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub base: String,
    pub rows: Vec<AblationRow>,
}

/// The methods of the toggle grid over `base`, off before on, reduction
/// varying slowest. Untoggled settings keep their values in `base`.
pub fn ablation_grid(base: &MethodConfig, toggles: &[Toggle]) -> Vec<MethodConfig> {
    let mut grid = vec![MethodConfig {
        train_fpn_norm: Some(base.fpn_norm_training() != crate::peft::method::FpnNormTraining::None),
        ..base.clone()
    }];
    for t in [Toggle::TrainableReduction, Toggle::TrainFpnNorm] {
        if !toggles.contains(&t) {
            continue;
        }
        grid = grid
            .into_iter()
            .flat_map(|m| {
                [false, true].map(|on| {
                    let mut m = m.clone();
                    match t {
                        Toggle::TrainableReduction => m.trainable_reduction = on,
                        Toggle::TrainFpnNorm => m.train_fpn_norm = Some(on),
                    }
                    m
                })
            })
            .collect();
    }
    grid
}

/// Trains every cell of the toggle grid with identical data and budget.
pub fn ablate<T: Real>(
    cfg: &BackboneConfig,
    base: &MethodConfig,
    toggles: &[Toggle],
    head: &HeadConfig,
    data: &SyntheticDataset,
    tc: &TrainConfig,
) -> Result<AblationReport> {
    if base.name != MethodName::E3va {
        return Err(Error::Config(format!("ablation toggles apply to e3va, not {}", base.name)));
    }
    let mut rows = Vec::new();
    for m in ablation_grid(base, toggles) {
        let (_, r) = train::<T>(cfg, &m, head, data, tc)?;
        rows.push(AblationRow {
            trainable_reduction: m.trainable_reduction,
            train_fpn_norm: m.train_fpn_norm.unwrap_or(false),
            final_loss: r.final_loss,
            final_pixel_acc: r.final_pixel_acc,
            trainable_params: count_params(cfg, &m)?.trainable,
        });
    }
    Ok(AblationReport { base: base.label(), rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::gen_synthetic;

    fn micro() -> (BackboneConfig, HeadConfig, SyntheticDataset) {
        (
            BackboneConfig::micro(),
            HeadConfig { width: 8, classes: 4 },
            gen_synthetic(0, 4, 16, 4).unwrap(),
        )
    }

    fn quick() -> ProfileOptions {
        ProfileOptions {
            k: 5,
            warmup: 2,
            batch: 2,
            seed: 0,
        }
    }

    #[test]
    fn rejects_short_profiles() {
        let (cfg, head, data) = micro();
        for (k, warmup) in [(4, 2), (5, 1)] {
            let o = ProfileOptions { k, warmup, ..quick() };
            assert!(profile_step::<f32>(&cfg, &MethodConfig::e3va(2), &head, &data, &o).is_err());
        }
    }

    #[test]
    fn structure_is_reproducible() {
        let (cfg, head, data) = micro();
        let m = MethodConfig::new(MethodName::Lora);
        let a = profile_step::<f32>(&cfg, &m, &head, &data, &quick()).unwrap();
        let b = profile_step::<f32>(&cfg, &m, &head, &data, &quick()).unwrap();
        assert_eq!((a.grad_bytes, a.act_saved_bytes, a.n_grad_nodes), (b.grad_bytes, b.act_saved_bytes, b.n_grad_nodes));
        assert!(a.n_backbone_grad_nodes <= a.n_grad_nodes && a.n_backbone_grad_nodes > 0);
        assert!(a.step_time_ms > 0.0);
    }

    #[test]
    fn fixed_is_minus_hundred_percent() {
        let (cfg, head, data) = micro();
        let methods = [MethodConfig::new(MethodName::Fixed), MethodConfig::e3va(2)];
        let r = compare_methods::<f32>(&cfg, &methods, &head, &data, &quick(), true).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert_eq!(r.profiles.len(), 3);
        assert_eq!(r.rows[0].delta_params_pct, -100.0);
        assert_eq!(r.rows[1].n_backbone_grad_nodes, 0);
        assert!(r.rows.iter().all(|row| row.delta_mem_pct < 0.0));
    }

    #[test]
    fn single_method_comparison_refused() {
        let (cfg, head, data) = micro();
        assert!(compare_methods::<f32>(&cfg, &[MethodConfig::e3va(2)], &head, &data, &quick(), false).is_err());
    }

    #[test]
    fn grid_shapes() {
        let base = MethodConfig::e3va(2);
        let all = ablation_grid(&base, &[Toggle::TrainableReduction, Toggle::TrainFpnNorm]);
        let cells: Vec<(bool, Option<bool>)> = all.iter().map(|m| (m.trainable_reduction, m.train_fpn_norm)).collect();
        assert_eq!(
            cells,
            vec![(false, Some(false)), (false, Some(true)), (true, Some(false)), (true, Some(true))]
        );
        assert_eq!(ablation_grid(&base, &[Toggle::TrainFpnNorm]).len(), 2);
        let none = ablation_grid(&base, &[]);
        assert_eq!(none.len(), 1);
        assert_eq!(none[0].train_fpn_norm, Some(true));
    }

    #[test]
    fn ablation_refuses_other_methods() {
        let (cfg, head, data) = micro();
        let tc = TrainConfig { steps: 1, ..Default::default() };
        let m = MethodConfig::new(MethodName::Adapter);
        assert!(ablate::<f32>(&cfg, &m, &[Toggle::TrainFpnNorm], &head, &data, &tc).is_err());
    }
}
