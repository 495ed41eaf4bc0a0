//! Synthetic task, dense head, optimiser and the seeded training loop.

pub mod data;
pub mod gradcheck;
pub mod head;
pub mod optim;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::init;
use crate::peft::method::MethodConfig;
use crate::peft::model::{build_model, Model};
use crate::peft::registry::{Bound, ParamId};
use crate::real::Real;
use crate::tape::{GradMap, Tape, Tensor};

pub use data::{gen_synthetic, SyntheticDataset};
pub use head::{head_forward, HeadConfig, HeadParams};
pub use optim::{AdamW, AdamWConfig};

/// Loss-curve entries averaged into [`TrainReport::final_loss`].
pub const FINAL_LOSS_WINDOW: usize = 10;

const STREAM_ORDER: u64 = 3;

fn default_lr() -> f64 {
    1e-4
}
fn default_steps() -> usize {
    200
}
fn default_batch() -> usize {
    4
}
fn default_seed() -> u64 {
    7
}
fn default_wd() -> f64 {
    0.01
}
fn default_n() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    /// Number of synthetic images.
    #[serde(default = "default_n")]
    pub n_images: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            steps: default_steps(),
            batch: default_batch(),
            seed: default_seed(),
            weight_decay: default_wd(),
            n_images: default_n(),
        }
    }
}

impl TrainConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr and weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub method: String,
    pub seed: u64,
    pub steps: usize,
    pub loss_curve: Vec<f64>,
    /// Mean of the last [`FINAL_LOSS_WINDOW`] losses; `NaN` when no step ran.
    pub final_loss: f64,
    pub final_pixel_acc: f64,
    pub trainable_params: u64,
    pub frozen_checksum_before: u64,
    pub frozen_checksum_after: u64,
    /// Seconds.
    pub wall_time_total: f64,
}

/// Stacks normalised images `idx` into a `[B, img, img, 3]` constant and
/// returns the matching flattened labels.
pub fn batch_tensor<T: Real>(
    tape: &mut Tape<T>,
    data: &SyntheticDataset,
    idx: &[usize],
) -> Result<(Tensor, Vec<usize>)> {
    let mut px = Vec::with_capacity(idx.len() * data.img * data.img * 3);
    let mut labels = Vec::with_capacity(idx.len() * data.cells_per_image());
    for &i in idx {
        if i >= data.n {
            return Err(Error::Config(format!("image {i} out of range for {} images", data.n)));
        }
        px.extend(data.image(i).iter().map(|&v| T::from_f64(data::normalize_pixel(v))));
        labels.extend_from_slice(data.label_map(i));
    }
    let x = tape.constant(&[idx.len(), data.img, data.img, 3], px)?;
    Ok((x, labels))
}

/// Re-keys tape gradients by parameter.
pub fn grads_by_param<T: Real>(bound: &Bound, grads: &GradMap<T>) -> BTreeMap<ParamId, Vec<T>> {
    bound
        .tensors()
        .iter()
        .enumerate()
        .filter_map(|(i, t)| grads.get(t.id()).map(|g| (ParamId(i), g.to_vec())))
        .collect()
}

/// Loss and parameter gradients of one batch.
pub fn loss_and_grads<T: Real>(
    model: &Model<T>,
    data: &SyntheticDataset,
    idx: &[usize],
) -> Result<(f64, BTreeMap<ParamId, Vec<T>>, Tape<T>)> {
    let mut tape = Tape::new();
    let (x, labels) = batch_tensor(&mut tape, data, idx)?;
    let (loss, out) = model.loss(&mut tape, &x, &labels)?;
    tape.mark_closure(&loss)?;
    let grads = tape.backward(&loss)?;
    let value = tape.value(&loss)[0].as_f64();
    Ok((value, grads_by_param(&out.bound, &grads), tape))
}

/// Seeded epoch-wise shuffling of image indices.
pub struct BatchOrder {
    rng: init::InitRng,
    perm: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl BatchOrder {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        Self {
            rng: init::rng_stream(seed, STREAM_ORDER),
            perm: (0..n).collect(),
            pos: n,
            batch,
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let n = self.perm.len();
        (0..self.batch)
            .map(|_| {
                if self.pos == n {
                    self.perm.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.perm[self.pos - 1]
            })
            .collect()
    }
}

/// Trains `model` in place for `tc.steps` AdamW steps on `data`.
pub fn train_model<T: Real>(
    model: &mut Model<T>,
    data: &SyntheticDataset,
    tc: &TrainConfig,
) -> Result<TrainReport> {
    tc.validate()?;
    if data.classes != model.head.classes {
        return Err(Error::Config(format!(
            "data has {} classes, head has {}",
            data.classes, model.head.classes
        )));
    }
    let start = Instant::now();
    let before = model.frozen_checksum();
    let mut opt = AdamW::new(tc.adamw(), &model.store);
    let mut order = BatchOrder::new(data.n, tc.batch, tc.seed);
    let mut curve = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let idx = order.next_batch();
        let (loss, grads, _) = loss_and_grads(model, data, &idx).map_err(|e| match e {
            Error::NonFinite { .. } => Error::NonFiniteLoss { step },
            e => e,
        })?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        curve.push(loss);
        opt.step(&mut model.store, &grads)?;
    }
    let tail = &curve[curve.len().saturating_sub(FINAL_LOSS_WINDOW)..];
    let final_loss = if tail.is_empty() {
        f64::NAN
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    };
    let final_pixel_acc = evaluate(model, data)?;
    Ok(TrainReport {
        method: model.method.label(),
        seed: tc.seed,
        steps: tc.steps,
        loss_curve: curve,
        final_loss,
        final_pixel_acc,
        trainable_params: model.store.registry.trainable_count(),
        frozen_checksum_before: before,
        frozen_checksum_after: model.frozen_checksum(),
        wall_time_total: start.elapsed().as_secs_f64(),
    })
}

/// Builds a model seeded with `tc.seed` and trains it.
pub fn train<T: Real>(
    cfg: &BackboneConfig,
    m: &MethodConfig,
    head: &HeadConfig,
    data: &SyntheticDataset,
    tc: &TrainConfig,
) -> Result<(Model<T>, TrainReport)> {
    let mut model = build_model(cfg, m, head, tc.seed)?;
    let report = train_model(&mut model, data, tc)?;
    Ok((model, report))
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of cells whose argmax logit equals the label.
pub fn evaluate<T: Real>(model: &Model<T>, data: &SyntheticDataset) -> Result<f64> {
    const CHUNK: usize = 8;
    let mut correct = 0usize;
    let k = model.head.classes;
    for start in (0..data.n).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(data.n)).collect();
        let mut tape = Tape::new();
        let (x, labels) = batch_tensor(&mut tape, data, &idx)?;
        let out = model.forward(&mut tape, &x)?;
        let logits = tape.value(&out.logits);
        correct += logits
            .chunks(k)
            .zip(&labels)
            .filter(|(row, &l)| argmax(row) == l)
            .count();
    }
    Ok(correct as f64 / data.labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::peft::method::MethodName;

    fn micro_data() -> SyntheticDataset {
        gen_synthetic(1, 6, 16, 4).unwrap()
    }

    #[test]
    fn zero_steps_is_a_noop() {
        let cfg = BackboneConfig::micro();
        let data = micro_data();
        let tc = TrainConfig {
            steps: 0,
            ..Default::default()
        };
        let m = MethodConfig::e3va(2);
        let (model, report) = train::<f64>(&cfg, &m, &HeadConfig::default(), &data, &tc).unwrap();
        let fresh = build_model::<f64>(&cfg, &m, &HeadConfig::default(), tc.seed).unwrap();
        assert!(report.loss_curve.is_empty());
        assert_eq!(model.store.values(), fresh.store.values());
    }

    #[test]
    fn identical_seeds_identical_runs() {
        let cfg = BackboneConfig::micro();
        let data = micro_data();
        let tc = TrainConfig {
            steps: 3,
            batch: 2,
            ..Default::default()
        };
        let m = MethodConfig::new(MethodName::Adapter);
        let (_, a) = train::<f64>(&cfg, &m, &HeadConfig::default(), &data, &tc).unwrap();
        let (_, b) = train::<f64>(&cfg, &m, &HeadConfig::default(), &data, &tc).unwrap();
        assert_eq!(a.loss_curve, b.loss_curve);
        assert_eq!(a.final_pixel_acc, b.final_pixel_acc);
        assert_eq!(a.frozen_checksum_before, a.frozen_checksum_after);
    }

    #[test]
    fn optimizer_state_only_for_trainable() {
        let m = build_model::<f64>(&BackboneConfig::micro(), &MethodConfig::e3va(2), &HeadConfig::default(), 0)
            .unwrap();
        let opt = AdamW::<f64>::new(AdamWConfig::default(), &m.store);
        for id in m.store.registry.ids() {
            assert_eq!(opt.has_state(id), m.store.registry.get(id).trainable);
        }
    }

    #[test]
    fn batch_order_covers_each_epoch() {
        let mut o = BatchOrder::new(5, 2, 0);
        let mut seen: Vec<usize> = (0..5).flat_map(|_| o.next_batch()).collect();
        seen.truncate(10);
        let mut first: Vec<usize> = seen[..5].to_vec();
        first.sort();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn accuracy_in_unit_range() {
        let data = micro_data();
        let m = build_model::<f64>(&BackboneConfig::micro(), &MethodConfig::new(MethodName::Fixed), &HeadConfig::default(), 0)
            .unwrap();
        let acc = evaluate(&m, &data).unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}
