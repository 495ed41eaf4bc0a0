//! Parameter counts computed from configs alone, without allocating weights.
//!
//! Two scopes exist. The *table* scope ([`count_params`]) covers the backbone,
//! everything a method inserts into it and the per-stage FPN norms; it leaves
//! out the lateral and classifier layers every method trains. The *model*
//! scope ([`count_model_params`]) adds those. [`verify_against_built`] checks
//! either count against a materialised registry.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::backbone::{rpb_rows, BackboneConfig};
use crate::error::{Error, Result};
use crate::peft::method::{FpnNormTraining, MethodConfig, MethodName};
use crate::peft::model::build_model;
use crate::peft::registry::{Group, ParamRegistry};
use crate::tape::Owner;
use crate::train::head::HeadConfig;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub trainable: u64,
    pub total: u64,
    pub by_group: BTreeMap<Group, u64>,
    /// Totals per owner tag, trainable or not.
    pub by_tag: BTreeMap<Owner, u64>,
}

impl ParamCount {
    pub fn group(&self, g: Group) -> u64 {
        self.by_group.get(&g).copied().unwrap_or(0)
    }

    pub fn tag(&self, o: Owner) -> u64 {
        self.by_tag.get(&o).copied().unwrap_or(0)
    }

    /// Count in millions.
    pub fn trainable_m(&self) -> f64 {
        self.trainable as f64 / 1e6
    }

    pub fn from_registry(reg: &ParamRegistry, in_scope: impl Fn(&crate::peft::ParamEntry) -> bool) -> Self {
        let mut by_group = BTreeMap::new();
        let mut by_tag = BTreeMap::new();
        for g in [Group::Frozen, Group::Adapter, Group::Outside] {
            by_group.insert(g, 0);
        }
        for o in Owner::ALL {
            by_tag.insert(o, 0);
        }
        let (mut trainable, mut total) = (0, 0);
        for e in reg.entries().iter().filter(|e| in_scope(e)) {
            let n = e.numel() as u64;
            *by_group.get_mut(&e.group()).unwrap() += n;
            *by_tag.get_mut(&e.owner).unwrap() += n;
            total += n;
            if e.trainable {
                trainable += n;
            }
        }
        Self {
            trainable,
            total,
            by_group,
            by_tag,
        }
    }
}

/// Parameter counts of one backbone region, split by kind.
#[derive(Debug, Clone, Copy, Default)]
struct Region {
    weights: u64,
    biases: u64,
    norm_weights: u64,
    norm_biases: u64,
    rel_pos: u64,
}

impl Region {
    fn total(&self) -> u64 {
        self.weights + self.biases + self.norm_weights + self.norm_biases + self.rel_pos
    }

    fn trainable(&self, name: MethodName) -> u64 {
        match name {
            MethodName::Full => self.total(),
            MethodName::Bitfit => self.biases + self.norm_biases + self.rel_pos,
            MethodName::Norm => self.norm_weights + self.norm_biases,
            _ => 0,
        }
    }
}

fn backbone_regions(cfg: &BackboneConfig) -> (Vec<Region>, Vec<Region>, Region) {
    let c = cfg.embed_dim as u64;
    let p = cfg.patch as u64;
    let embed = Region {
        weights: 3 * p * p * c,
        biases: c,
        norm_weights: c,
        norm_biases: c,
        rel_pos: 0,
    };
    let rows = rpb_rows(cfg.window) as u64;
    let mut blocks = Vec::new();
    let mut merges = Vec::new();
    for s in 0..cfg.n_stages() {
        let m = cfg.stage_dim(s) as u64;
        let h = m * cfg.mlp_ratio as u64;
        for _ in 0..cfg.depths[s] {
            blocks.push(Region {
                // q, k, v, proj and the two MLP layers
                weights: 4 * m * m + 2 * m * h,
                biases: 4 * m + h + m,
                norm_weights: 2 * m,
                norm_biases: 2 * m,
                rel_pos: rows * cfg.heads[s] as u64,
            });
        }
        if s + 1 < cfg.n_stages() {
            merges.push(Region {
                weights: 8 * m * m,
                norm_weights: 4 * m,
                norm_biases: 4 * m,
                ..Region::default()
            });
        }
    }
    (blocks, merges, embed)
}

/// Parameters a method inserts into one block of width `m`.
fn inserted_per_block(m: u64, cfg: &MethodConfig) -> u64 {
    let d = cfg.adapter_dim as u64;
    let a = cfg.alpha as u64;
    let dense = 2 * m * d + d + m;
    match cfg.name {
        MethodName::Adapter => 2 * dense,
        MethodName::Adaptformer => 2 * (dense + 1),
        // q and v, each [m, d] + [d, m]
        MethodName::Lora => 2 * 2 * m * d,
        // two adapters, each m → m/2 → m with two rank-α branches per projection
        MethodName::E3va => 12 * a * m + 3 * m,
        _ => 0,
    }
}

struct Tally {
    backbone_total: u64,
    backbone_trainable: u64,
    inserted: u64,
    fpn_total: u64,
    fpn_trainable: u64,
}

fn tally(cfg: &BackboneConfig, m: &MethodConfig) -> Result<Tally> {
    cfg.validate()?;
    m.validate()?;
    let (blocks, merges, embed) = backbone_regions(cfg);
    let all = || blocks.iter().chain(&merges).chain(std::iter::once(&embed));
    let backbone_total = all().map(Region::total).sum();
    let backbone_trainable = match m.name {
        MethodName::Partial1 => blocks.last().map(Region::total).unwrap_or(0),
        name => all().map(|r| r.trainable(name)).sum(),
    };
    let mut inserted: u64 = (0..cfg.n_stages())
        .map(|s| cfg.depths[s] as u64 * inserted_per_block(cfg.stage_dim(s) as u64, m))
        .sum();
    if m.name == MethodName::E3va && m.trainable_reduction {
        inserted += merges.iter().map(Region::total).sum::<u64>();
    }
    let dims: u64 = cfg.stage_dims().iter().map(|&d| d as u64).sum();
    let fpn_total = 2 * dims;
    let fpn_trainable = match m.fpn_norm_training() {
        FpnNormTraining::None => 0,
        FpnNormTraining::BiasOnly => dims,
        FpnNormTraining::All => 2 * dims,
    };
    Ok(Tally {
        backbone_total,
        backbone_trainable,
        inserted,
        fpn_total,
        fpn_trainable,
    })
}

fn assemble(t: &Tally, head_total: u64, head_tags: (u64, u64)) -> ParamCount {
    let phi_a = t.backbone_trainable + t.inserted;
    let phi_o = t.fpn_trainable + head_total;
    let total = t.backbone_total + t.inserted + t.fpn_total + head_total;
    let trainable = phi_a + phi_o;
    let by_group = BTreeMap::from([
        (Group::Frozen, total - trainable),
        (Group::Adapter, phi_a),
        (Group::Outside, phi_o),
    ]);
    let by_tag = BTreeMap::from([
        (Owner::Backbone, t.backbone_total),
        (Owner::Adapter, t.inserted),
        (Owner::Neck, t.fpn_total + head_tags.0),
        (Owner::Head, head_tags.1),
    ]);
    ParamCount {
        trainable,
        total,
        by_group,
        by_tag,
    }
}

/// Table-scope count: backbone, inserted modules and FPN norms.
pub fn count_params(cfg: &BackboneConfig, m: &MethodConfig) -> Result<ParamCount> {
    Ok(assemble(&tally(cfg, m)?, 0, (0, 0)))
}

/// Whole-model count, including laterals and classifier.
pub fn count_model_params(
    cfg: &BackboneConfig,
    m: &MethodConfig,
    head: &HeadConfig,
) -> Result<ParamCount> {
    head.validate()?;
    let w = head.width as u64;
    let k = head.classes as u64;
    let laterals: u64 = cfg.stage_dims().iter().map(|&d| d as u64 * w + w).sum();
    let classifier = w * k + k;
    Ok(assemble(&tally(cfg, m)?, laterals + classifier, (laterals, classifier)))
}

/// Percentage change of `x` relative to `base`.
pub fn delta_pct(x: f64, base: f64) -> f64 {
    if base == 0.0 {
        0.0
    } else {
        (x - base) / base * 100.0
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyRow {
    pub group: String,
    pub symbolic: u64,
    pub built: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub rows: Vec<VerifyRow>,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.rows.iter().all(|r| r.symbolic == r.built)
    }

    pub fn into_result(self) -> Result<Self> {
        if let Some(r) = self.rows.iter().find(|r| r.symbolic != r.built) {
            return Err(Error::CountMismatch {
                group: r.group.clone(),
                symbolic: r.symbolic,
                built: r.built,
            });
        }
        Ok(self)
    }
}

fn compare(rows: &mut Vec<VerifyRow>, scope: &str, sym: &ParamCount, built: &ParamCount) {
    let mut push = |name: String, a: u64, b: u64| rows.push(VerifyRow { group: name, symbolic: a, built: b });
    push(format!("{scope}/trainable"), sym.trainable, built.trainable);
    push(format!("{scope}/total"), sym.total, built.total);
    for (g, label) in [(Group::Frozen, "phi_F"), (Group::Adapter, "phi_A"), (Group::Outside, "phi_O")] {
        push(format!("{scope}/{label}"), sym.group(g), built.group(g));
    }
    for o in Owner::ALL {
        push(format!("{scope}/{}", o.as_str()), sym.tag(o), built.tag(o));
    }
}

/// Builds the model and compares symbolic and materialised counts in both scopes.
pub fn verify_against_built(
    cfg: &BackboneConfig,
    m: &MethodConfig,
    head: &HeadConfig,
) -> Result<VerifyReport> {
    let model = build_model::<f64>(cfg, m, head, 0)?;
    let reg = &model.store.registry;
    let mut rows = Vec::new();
    compare(
        &mut rows,
        "model",
        &count_model_params(cfg, m, head)?,
        &ParamCount::from_registry(reg, |_| true),
    );
    compare(
        &mut rows,
        "table",
        &count_params(cfg, m)?,
        &ParamCount::from_registry(reg, |e| e.in_table_scope()),
    );
    Ok(VerifyReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e3va(alpha: usize) -> MethodConfig {
        MethodConfig::e3va(alpha)
    }

    #[test]
    fn e3va_closed_form_is_linear_in_alpha() {
        let cfg = BackboneConfig::toy1();
        let sum_m: u64 = (0..4).map(|s| (cfg.depths[s] * cfg.stage_dim(s)) as u64).sum();
        let dims: u64 = cfg.stage_dims().iter().map(|&d| d as u64).sum();
        let mut prev = 0;
        for a in [2u64, 8, 16, 32] {
            let c = count_params(&cfg, &e3va(a as usize)).unwrap();
            assert_eq!(c.group(Group::Adapter), (12 * a + 3) * sum_m);
            assert_eq!(c.trainable, (12 * a + 3) * sum_m + 2 * dims);
            assert!(c.trainable > prev);
            prev = c.trainable;
        }
    }

    #[test]
    fn merge_region_matches_worked_count() {
        let (_, merges, _) = backbone_regions(&BackboneConfig::swin_b());
        assert_eq!(merges[0].norm_weights + merges[0].norm_biases, 1024);
        assert_eq!(merges[0].weights, 131072);
    }

    #[test]
    fn full_and_fixed() {
        let cfg = BackboneConfig::toy1();
        let full = count_params(&cfg, &MethodConfig::new(MethodName::Full)).unwrap();
        assert_eq!(full.trainable, full.total);
        let fixed = count_params(&cfg, &MethodConfig::new(MethodName::Fixed)).unwrap();
        assert_eq!(fixed.trainable, 0);
    }

    #[test]
    fn toy_counts_match_built_registry() {
        let head = HeadConfig::default();
        for name in MethodName::ALL {
            let m = MethodConfig {
                alpha: 2,
                ..MethodConfig::new(name)
            };
            verify_against_built(&BackboneConfig::toy1(), &m, &head)
                .unwrap()
                .into_result()
                .unwrap();
        }
        let m = MethodConfig {
            trainable_reduction: true,
            train_fpn_norm: Some(false),
            ..e3va(2)
        };
        verify_against_built(&BackboneConfig::toy1(), &m, &head).unwrap().into_result().unwrap();
    }

    #[test]
    fn large_models_are_not_built() {
        assert!(verify_against_built(&BackboneConfig::swin_b(), &e3va(8), &HeadConfig::default()).is_err());
    }
}
