//! Model assembly: backbone, method-specific modules, FPN norms and head.

use crate::accountant;
use crate::backbone::{
    backbone_forward, merge_params, norm, BackboneConfig, BackboneOutput, BackboneParams,
    BlockHook, MergeParams, NoHook,
};
use crate::error::{Error, Result};
use crate::init::{self, InitRng};
use crate::peft::adapters::{AdaptFormerAdapter, DenseAdapter, E3vaAdapter, LoraParams};
use crate::peft::highway::{stage_fuse, HighwayHook};
use crate::peft::hooks::{AdaptFormerHook, LoraHook, SerialAdapterHook};
use crate::peft::method::{MethodConfig, MethodName};
use crate::peft::policy::apply_tuning_policy;
use crate::peft::registry::{Bound, ParamId, ParamStore, Site};
use crate::real::Real;
use crate::tape::{Owner, Tape, Tensor};
use crate::train::head::{head_forward, HeadConfig, HeadParams};

/// Largest model (in parameters) [`build_model`] will allocate.
pub const DESK_SCALE_LIMIT: u64 = 5_000_000;

const STREAM_BACKBONE: u64 = 0;
const STREAM_INSERTED: u64 = 1;
const STREAM_HEAD: u64 = 2;

/// Parameters a method adds, indexed by global block index.
#[derive(Debug, Clone)]
pub enum Inserted {
    None,
    Serial(Vec<[DenseAdapter; 2]>),
    Lora(Vec<[LoraParams; 2]>),
    AdaptFormer(Vec<[AdaptFormerAdapter; 2]>),
    Highway {
        adapters: Vec<[E3vaAdapter; 2]>,
        /// Trainable merge copies, empty when the highway inherits the backbone merges.
        merges: Vec<MergeParams>,
    },
}

impl Inserted {
    pub fn ids(&self) -> Vec<ParamId> {
        fn flat<A>(v: &[[A; 2]], f: impl Fn(&A) -> Vec<ParamId>) -> Vec<ParamId> {
            v.iter().flat_map(|pair| pair.iter().flat_map(&f)).collect()
        }
        match self {
            Inserted::None => vec![],
            Inserted::Serial(v) => flat(v, DenseAdapter::ids),
            Inserted::Lora(v) => flat(v, LoraParams::ids),
            Inserted::AdaptFormer(v) => flat(v, AdaptFormerAdapter::ids),
            Inserted::Highway { adapters, merges } => {
                let mut ids = flat(adapters, E3vaAdapter::ids);
                ids.extend(merges.iter().flat_map(|m| [m.norm_w, m.norm_b, m.reduction]));
                ids
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub backbone_cfg: BackboneConfig,
    pub method: MethodConfig,
    pub head_cfg: HeadConfig,
    pub store: ParamStore<T>,
    pub backbone: BackboneParams,
    pub inserted: Inserted,
    pub fpn_norms: Vec<(ParamId, ParamId)>,
    pub head: HeadParams,
}

/// Highway tensors recorded during an E3VA forward pass.
#[derive(Debug, Clone)]
pub struct HighwayTrace {
    pub stage_e: Vec<Tensor>,
    /// `(e_i, e_{i+1})` for every block.
    pub steps: Vec<(Tensor, Tensor)>,
}

pub struct ForwardOutput {
    pub bound: Bound,
    pub backbone: BackboneOutput,
    pub highway: Option<HighwayTrace>,
    pub fused: Vec<Tensor>,
    pub logits: Tensor,
}

fn pairs<A>(
    cfg: &BackboneConfig,
    mut f: impl FnMut(usize, usize, usize) -> Result<[A; 2]>,
) -> Result<Vec<[A; 2]>> {
    let mut out = Vec::new();
    for s in 0..cfg.n_stages() {
        for b in 0..cfg.depths[s] {
            out.push(f(s, b, cfg.stage_dim(s))?);
        }
    }
    Ok(out)
}

fn insert<T: Real>(
    cfg: &BackboneConfig,
    m: &MethodConfig,
    store: &mut ParamStore<T>,
    rng: &mut InitRng,
) -> Result<Inserted> {
    let d = m.adapter_dim;
    let block = |s: usize, b: usize| (Site::Block { stage: s, block: b }, format!("stages.{s}.blocks.{b}"));
    Ok(match m.name {
        MethodName::Adapter => Inserted::Serial(pairs(cfg, |s, b, dim| {
            let (site, p) = block(s, b);
            Ok([
                DenseAdapter::add(store, rng, &format!("{p}.adapter_msa"), dim, d, site)?,
                DenseAdapter::add(store, rng, &format!("{p}.adapter_mlp"), dim, d, site)?,
            ])
        })?),
        MethodName::Lora => Inserted::Lora(pairs(cfg, |s, b, dim| {
            let (site, p) = block(s, b);
            Ok([
                LoraParams::add(store, rng, &format!("{p}.attn.q"), dim, dim, d, site)?,
                LoraParams::add(store, rng, &format!("{p}.attn.v"), dim, dim, d, site)?,
            ])
        })?),
        MethodName::Adaptformer => Inserted::AdaptFormer(pairs(cfg, |s, b, dim| {
            let (site, p) = block(s, b);
            Ok([
                AdaptFormerAdapter::add(store, rng, &format!("{p}.adaptformer_msa"), dim, d, site)?,
                AdaptFormerAdapter::add(store, rng, &format!("{p}.adaptformer_mlp"), dim, d, site)?,
            ])
        })?),
        MethodName::E3va => {
            let adapters = pairs(cfg, |s, b, dim| {
                let site = Site::Block { stage: s, block: b };
                let p = format!("highway.stages.{s}.blocks.{b}");
                Ok([
                    E3vaAdapter::add(store, rng, &format!("{p}.a1"), dim, m.alpha, site)?,
                    E3vaAdapter::add(store, rng, &format!("{p}.a2"), dim, m.alpha, site)?,
                ])
            })?;
            let mut merges = Vec::new();
            if m.trainable_reduction {
                for s in 0..cfg.n_stages() - 1 {
                    merges.push(merge_params(
                        store,
                        rng,
                        &format!("highway.stages.{s}.downsample"),
                        cfg.stage_dim(s),
                        Owner::Adapter,
                        Site::HighwayMerge { stage: s },
                    )?);
                }
            }
            Inserted::Highway { adapters, merges }
        }
        _ => Inserted::None,
    })
}

/// Builds and initialises a model, then applies the method's tuning policy.
///
/// Backbone, inserted modules and neck/head draw from separate streams of
/// `seed`, so models that differ only in method share backbone and head weights.
pub fn build_model<T: Real>(
    cfg: &BackboneConfig,
    m: &MethodConfig,
    head: &HeadConfig,
    seed: u64,
) -> Result<Model<T>> {
    cfg.validate()?;
    m.validate()?;
    head.validate()?;
    let total = accountant::count_model_params(cfg, m, head)?.total;
    if total > DESK_SCALE_LIMIT {
        return Err(Error::Config(format!(
            "model has {total} parameters, above the desk-scale limit of {DESK_SCALE_LIMIT}; \
             large presets are for symbolic counting only"
        )));
    }
    let mut store = ParamStore::default();
    let backbone = BackboneParams::init(cfg, &mut store, &mut init::rng_stream(seed, STREAM_BACKBONE))?;
    let inserted = insert(cfg, m, &mut store, &mut init::rng_stream(seed, STREAM_INSERTED))?;
    let mut fpn_norms = Vec::new();
    for s in 0..cfg.n_stages() {
        fpn_norms.push(norm(
            &mut store,
            &format!("neck.fpn_norm.{s}"),
            cfg.stage_dim(s),
            Owner::Neck,
            Site::FpnNorm { stage: s },
        )?);
    }
    let head_params = HeadParams::init(
        &mut store,
        &mut init::rng_stream(seed, STREAM_HEAD),
        &cfg.stage_dims(),
        head,
    )?;
    store.registry = apply_tuning_policy(std::mem::take(&mut store.registry), m)?;
    Ok(Model {
        backbone_cfg: cfg.clone(),
        method: m.clone(),
        head_cfg: *head,
        store,
        backbone,
        inserted,
        fpn_norms,
        head: head_params,
    })
}

impl<T: Real> Model<T> {
    /// Images `[B, img, img, 3]` → per-cell logits `[B·(img/patch)², classes]`.
    pub fn forward(&self, tape: &mut Tape<T>, images: &Tensor) -> Result<ForwardOutput> {
        let cfg = &self.backbone_cfg;
        let bound = self.store.bind(tape)?;
        let sides: Vec<usize> = (0..cfg.n_stages()).map(|s| cfg.stage_side(s)).collect();
        let mut highway = None;
        let backbone = {
            let run = |tape: &mut Tape<T>, hook: &mut dyn BlockHook<T>| {
                backbone_forward(tape, cfg, &self.backbone, &bound, images, hook)
            };
            match &self.inserted {
                Inserted::None => run(tape, &mut NoHook)?,
                Inserted::Serial(a) => run(tape, &mut SerialAdapterHook { adapters: a, bound: &bound })?,
                Inserted::Lora(l) => run(tape, &mut LoraHook { lora: l, bound: &bound })?,
                Inserted::AdaptFormer(a) => run(tape, &mut AdaptFormerHook { adapters: a, bound: &bound })?,
                Inserted::Highway { adapters, merges } => {
                    let mut hook = HighwayHook::new(adapters, merges, &bound, sides.clone());
                    let out = run(tape, &mut hook)?;
                    highway = Some(HighwayTrace {
                        stage_e: hook.stage_e,
                        steps: hook.steps,
                    });
                    out
                }
            }
        };
        let mut fused = Vec::with_capacity(cfg.n_stages());
        for (s, l) in backbone.stages.iter().enumerate() {
            let (w, b) = self.fpn_norms[s];
            let e = highway.as_ref().map(|h| &h.stage_e[s]);
            fused.push(stage_fuse(tape, l, e, (&bound[w], &bound[b]), self.method.fusion)?);
        }
        let logits = head_forward(tape, &self.head, &bound, &fused, sides[0])?;
        Ok(ForwardOutput {
            bound,
            backbone,
            highway,
            fused,
            logits,
        })
    }

    /// Forward pass plus mean per-cell cross-entropy.
    pub fn loss(
        &self,
        tape: &mut Tape<T>,
        images: &Tensor,
        labels: &[usize],
    ) -> Result<(Tensor, ForwardOutput)> {
        let out = self.forward(tape, images)?;
        let prev = tape.set_owner(Owner::Head);
        let loss = tape.cross_entropy(&out.logits, labels);
        tape.set_owner(prev);
        Ok((loss?, out))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.store.registry.ids().filter(|&id| self.store.registry.get(id).trainable).collect()
    }

    /// Checksum over the frozen parameters.
    pub fn frozen_checksum(&self) -> u64 {
        self.store.checksum(|e| !e.trainable)
    }
}
