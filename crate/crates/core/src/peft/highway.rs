//! The E3VA gradient highway: a running sum `e` fed by adapters on the
//! backbone taps, merged alongside the backbone and fused before the head.

use crate::backbone::{patch_merge, BlockState, BlockHook, BoundMerge, MergeParams};
use crate::error::{Error, Result};
use crate::peft::adapters::{e3va_adapter_forward, E3vaAdapter};
use crate::peft::method::Fusion;
use crate::peft::registry::Bound;
use crate::real::Real;
use crate::tape::{Owner, Tape, Tensor};

/// Highway tensor at the current stage resolution.
#[derive(Debug, Clone)]
pub struct HighwayState {
    pub e: Tensor,
}

/// `e + f_A1(tap1) + f_A2(tap2)`, recorded as adapter-owned nodes.
pub fn e3va_highway_step<T: Real>(
    tape: &mut Tape<T>,
    e: &Tensor,
    tap1: &Tensor,
    tap2: &Tensor,
    a1: &E3vaAdapter,
    a2: &E3vaAdapter,
    bound: &Bound,
) -> Result<Tensor> {
    if e.shape() != tap1.shape() || e.shape() != tap2.shape() {
        return Err(Error::Shape {
            op: "highway_step",
            shapes: vec![e.shape().to_vec(), tap1.shape().to_vec(), tap2.shape().to_vec()],
        });
    }
    let prev = tape.set_owner(Owner::Adapter);
    let r = (|| {
        let d1 = e3va_adapter_forward(tape, a1, bound, tap1)?;
        let d2 = e3va_adapter_forward(tape, a2, bound, tap2)?;
        let d = tape.add(&d1, &d2)?;
        tape.add(e, &d)
    })();
    tape.set_owner(prev);
    r
}

/// Downsamples the highway with `merge`, which is either the backbone's own
/// bound merge (shared frozen nodes) or a trainable copy.
pub fn highway_merge<T: Real>(
    tape: &mut Tape<T>,
    e: &Tensor,
    side: usize,
    merge: &BoundMerge,
) -> Result<Tensor> {
    let prev = tape.set_owner(Owner::Adapter);
    let r = patch_merge(tape, e, side, merge);
    tape.set_owner(prev);
    r
}

/// Per-stage input to the head: `FpnNorm(l + e)`, `FpnNorm(e)` or, without a
/// highway, `FpnNorm(l)`.
pub fn stage_fuse<T: Real>(
    tape: &mut Tape<T>,
    l: &Tensor,
    e: Option<&Tensor>,
    norm: (&Tensor, &Tensor),
    fusion: Fusion,
) -> Result<Tensor> {
    if let Some(e) = e {
        if e.shape() != l.shape() {
            return Err(Error::Shape {
                op: "stage_fuse",
                shapes: vec![l.shape().to_vec(), e.shape().to_vec()],
            });
        }
    }
    let prev = tape.set_owner(Owner::Neck);
    let r = (|| {
        let x = match (e, fusion) {
            (None, _) => l.clone(),
            (Some(e), Fusion::Additive) => tape.add(l, e)?,
            (Some(e), Fusion::HighwayOnly) => e.clone(),
        };
        tape.layer_norm(&x, Some(norm), crate::backbone::LN_EPS)
    })();
    tape.set_owner(prev);
    r
}

/// Drives the highway from the backbone taps. Never alters the stream.
pub struct HighwayHook<'a> {
    pub adapters: &'a [[E3vaAdapter; 2]],
    /// Trainable merge copies; empty when merges are inherited.
    pub merges: &'a [MergeParams],
    pub bound: &'a Bound,
    pub sides: Vec<usize>,
    pub state: Option<HighwayState>,
    /// Highway value at the end of each stage.
    pub stage_e: Vec<Tensor>,
    /// `e` before and after each block.
    pub steps: Vec<(Tensor, Tensor)>,
}

impl<'a> HighwayHook<'a> {
    pub fn new(
        adapters: &'a [[E3vaAdapter; 2]],
        merges: &'a [MergeParams],
        bound: &'a Bound,
        sides: Vec<usize>,
    ) -> Self {
        Self {
            adapters,
            merges,
            bound,
            sides,
            state: None,
            stage_e: Vec::new(),
            steps: Vec::new(),
        }
    }
}

impl<T: Real> BlockHook<T> for HighwayHook<'_> {
    fn on_block(&mut self, tape: &mut Tape<T>, st: &BlockState) -> Result<()> {
        let e = match self.state.take() {
            Some(s) => s.e,
            None => {
                let prev = tape.set_owner(Owner::Adapter);
                let z = tape.zeros(st.l.shape());
                tape.set_owner(prev);
                z?
            }
        };
        let [a1, a2] = &self.adapters[st.site.index];
        let next = e3va_highway_step(tape, &e, &st.tap1, &st.tap2, a1, a2, self.bound)?;
        self.steps.push((e, next.clone()));
        self.state = Some(HighwayState { e: next });
        Ok(())
    }

    fn on_stage_end(
        &mut self,
        tape: &mut Tape<T>,
        stage: usize,
        _features: &Tensor,
        merge: Option<&BoundMerge>,
    ) -> Result<()> {
        let e = self
            .state
            .take()
            .ok_or_else(|| Error::Config(format!("stage {stage} has no blocks")))?
            .e;
        self.stage_e.push(e.clone());
        if let Some(inherited) = merge {
            let own = self.merges.get(stage).map(|m| BoundMerge::new(m, self.bound));
            let m = own.as_ref().unwrap_or(inherited);
            let merged = highway_merge(tape, &e, self.sides[stage], m)?;
            self.state = Some(HighwayState { e: merged });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (Tape<f64>, Tensor, Tensor, (Tensor, Tensor)) {
        let mut tape = Tape::new();
        let l = tape.constant(&[1, 2, 3], vec![0.1, -0.4, 0.9, 1.5, 0.2, -0.7]).unwrap();
        let e = tape.constant(&[1, 2, 3], vec![0.3, 0.3, -1.0, 0.0, 2.0, 0.5]).unwrap();
        let w = tape.constant(&[3], vec![1.0, 2.0, 0.5]).unwrap();
        let b = tape.constant(&[3], vec![0.0, -1.0, 0.25]).unwrap();
        (tape, l, e, (w, b))
    }

    fn normed(tape: &mut Tape<f64>, x: &Tensor, (w, b): &(Tensor, Tensor)) -> Vec<f64> {
        let y = tape.layer_norm(x, Some((w, b)), crate::backbone::LN_EPS).unwrap();
        tape.value(&y).to_vec()
    }

    #[test]
    fn fusion_variants() {
        let (mut tape, l, e, n) = setup();
        let norm = (&n.0, &n.1);
        let add = stage_fuse(&mut tape, &l, Some(&e), norm, Fusion::Additive).unwrap();
        let only = stage_fuse(&mut tape, &l, Some(&e), norm, Fusion::HighwayOnly).unwrap();
        let plain = stage_fuse(&mut tape, &l, None, norm, Fusion::HighwayOnly).unwrap();
        let (add, only, plain) = (tape.value(&add).to_vec(), tape.value(&only).to_vec(), tape.value(&plain).to_vec());
        let sum = tape.add(&l, &e).unwrap();
        assert_eq!(add, normed(&mut tape, &sum, &n));
        assert_eq!(only, normed(&mut tape, &e, &n));
        assert_eq!(plain, normed(&mut tape, &l, &n));
        let owners: Vec<Owner> = tape.nodes().iter().filter(|n| n.op_kind() == "layernorm").map(|n| n.owner()).collect();
        assert_eq!(&owners[..3], &[Owner::Neck; 3]);
        assert_eq!(tape.owner(), Owner::Backbone);
    }

    #[test]
    fn fuse_rejects_mismatched_highway() {
        let (mut tape, l, _, (w, b)) = setup();
        let e = tape.zeros(&[1, 3, 3]).unwrap();
        assert!(matches!(
            stage_fuse(&mut tape, &l, Some(&e), (&w, &b), Fusion::Additive),
            Err(Error::Shape { op: "stage_fuse", .. })
        ));
    }
}
