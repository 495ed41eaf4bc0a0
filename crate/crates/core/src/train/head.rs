//! FPN-style dense head: per-stage laterals to a common width, nearest
//! upsampling to the stage-1 grid, a sum and a per-cell classifier.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{self, InitRng};
use crate::peft::registry::{Bound, ParamId, ParamRole, ParamStore, Site};
use crate::real::Real;
use crate::tape::{Owner, Tape, Tensor};

fn default_width() -> usize {
    32
}

fn default_classes() -> usize {
    4
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            width: default_width(),
            classes: default_classes(),
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.classes < 2 {
            return Err(Error::Config(format!(
                "head needs width ≥ 1 and classes ≥ 2, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Lateral and classifier parameter count for the given stage widths.
    pub fn count(&self, stage_dims: &[usize]) -> u64 {
        let w = self.width as u64;
        let lat: u64 = stage_dims.iter().map(|&d| d as u64 * w + w).sum();
        lat + w * self.classes as u64 + self.classes as u64
    }
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub laterals: Vec<(ParamId, ParamId)>,
    pub cls_w: ParamId,
    pub cls_b: ParamId,
    pub classes: usize,
}

impl HeadParams {
    /// Uniform fan-in weights and zero biases.
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut InitRng,
        stage_dims: &[usize],
        cfg: &HeadConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let mut laterals = Vec::new();
        for (s, &d) in stage_dims.iter().enumerate() {
            let site = Site::Lateral { stage: s };
            let lw = store.add(
                format!("neck.lateral.{s}.weight"),
                &[d, w],
                Owner::Neck,
                ParamRole::Weight,
                site,
                init::fan_in_uniform(rng, d * w, d),
            )?;
            let lb = store.add(
                format!("neck.lateral.{s}.bias"),
                &[w],
                Owner::Neck,
                ParamRole::Bias,
                site,
                init::zeros(w),
            )?;
            laterals.push((lw, lb));
        }
        let c = cfg.classes;
        let cls_w = store.add(
            "head.classifier.weight",
            &[w, c],
            Owner::Head,
            ParamRole::Weight,
            Site::Classifier,
            init::fan_in_uniform(rng, w * c, w),
        )?;
        let cls_b = store.add(
            "head.classifier.bias",
            &[c],
            Owner::Head,
            ParamRole::Bias,
            Site::Classifier,
            init::zeros(c),
        )?;
        Ok(Self {
            laterals,
            cls_w,
            cls_b,
            classes: c,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.laterals.iter().flat_map(|&(w, b)| [w, b]).collect();
        v.extend([self.cls_w, self.cls_b]);
        v
    }
}

/// Fused stage features `[B, side_s², C_s]` → logits `[B·side_0², classes]`,
/// where stage `s` has grid side `side_0 >> s`.
pub fn head_forward<T: Real>(
    tape: &mut Tape<T>,
    p: &HeadParams,
    bound: &Bound,
    fused: &[Tensor],
    side0: usize,
) -> Result<Tensor> {
    if fused.len() != p.laterals.len() {
        return Err(Error::Config(format!(
            "head expects {} stage features, got {}",
            p.laterals.len(),
            fused.len()
        )));
    }
    let prev = tape.set_owner(Owner::Neck);
    let r = (|| {
        let mut acc: Option<Tensor> = None;
        for (s, (x, &(w, b))) in fused.iter().zip(&p.laterals).enumerate() {
            let side = side0 >> s;
            if x.rank() != 3 || x.shape()[1] != side * side {
                return Err(Error::Shape {
                    op: "head_forward",
                    shapes: vec![x.shape().to_vec()],
                });
            }
            let y = tape.matmul(x, &bound[w])?;
            let y = tape.add(&y, &bound[b])?;
            let y = if s == 0 {
                y
            } else {
                tape.upsample_nearest(&y, side, 1 << s)?
            };
            acc = Some(match acc {
                None => y,
                Some(a) => tape.add(&a, &y)?,
            });
        }
        let acc = acc.ok_or_else(|| Error::Config("head needs at least one stage".into()))?;
        tape.set_owner(Owner::Head);
        let logits = tape.matmul(&acc, &bound[p.cls_w])?;
        let logits = tape.add(&logits, &bound[p.cls_b])?;
        let rows = logits.numel() / p.classes;
        tape.reshape(&logits, &[rows, p.classes])
    })();
    tape.set_owner(prev);
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::peft::{build_model, MethodConfig, MethodName};
    use crate::train::{batch_tensor, gen_synthetic};

    #[test]
    fn zero_laterals_give_uniform_loss() {
        let cfg = BackboneConfig::micro();
        let head = HeadConfig { width: 8, classes: 5 };
        let mut model = build_model::<f64>(&cfg, &MethodConfig::new(MethodName::Fixed), &head, 1).unwrap();
        for &(w, _) in &model.head.laterals.clone() {
            model.store.value_mut(w).iter_mut().for_each(|v| *v = 0.0);
        }
        let data = gen_synthetic(1, 2, cfg.img, 5).unwrap();
        let mut tape = Tape::new();
        let (x, labels) = batch_tensor(&mut tape, &data, &[0, 1]).unwrap();
        let (loss, out) = model.loss(&mut tape, &x, &labels).unwrap();
        assert_eq!(tape.value(&out.logits).len(), 2 * 16 * 5);
        assert!((tape.value(&loss)[0] - 5f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn count_matches_registered_entries() {
        let dims = [8, 16, 32];
        let cfg = HeadConfig::default();
        let mut store = ParamStore::<f64>::default();
        HeadParams::init(&mut store, &mut init::rng_stream(0, 0), &dims, &cfg).unwrap();
        assert_eq!(store.registry.total_count(), cfg.count(&dims));
    }

    #[test]
    fn wrong_stage_count_rejected() {
        let mut store = ParamStore::<f64>::default();
        let p = HeadParams::init(&mut store, &mut init::rng_stream(0, 0), &[4, 8], &HeadConfig::default()).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape).unwrap();
        let x = tape.zeros(&[1, 4, 4]).unwrap();
        assert!(head_forward(&mut tape, &p, &bound, &[x], 2).is_err());
    }
}
