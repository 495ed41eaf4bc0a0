//! Projections whose weight is the sum of two rank-α products,
//! `W = s1·t1 + s2·t2`.

use crate::error::{Error, Result};
use crate::init::{self, InitRng};
use crate::peft::registry::{Bound, ParamId, ParamRole, ParamStore, Site};
use crate::real::Real;
use crate::tape::{Owner, Tape, Tensor};

#[derive(Debug, Clone)]
pub struct DualLowRank {
    pub s1: ParamId,
    pub t1: ParamId,
    pub s2: ParamId,
    pub t2: ParamId,
    pub bias: ParamId,
    pub m: usize,
    pub n: usize,
    pub alpha: usize,
}

impl DualLowRank {
    /// Factor weights only: `2α(m + n)`.
    pub fn weight_count(m: usize, n: usize, alpha: usize) -> usize {
        2 * alpha * (m + n)
    }

    /// Factor weights plus the bias.
    pub fn count(m: usize, n: usize, alpha: usize) -> usize {
        Self::weight_count(m, n, alpha) + n
    }

    /// Registers the factors with Kaiming-normal draws (`fan_in` = leading
    /// dimension of each factor) and a zero bias.
    pub fn add<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut InitRng,
        prefix: &str,
        m: usize,
        n: usize,
        alpha: usize,
        site: Site,
    ) -> Result<Self> {
        if m == 0 || n == 0 || alpha == 0 {
            return Err(Error::ZeroExtent(vec![m, n, alpha]));
        }
        let mut factor = |name: &str, rows: usize, cols: usize| {
            store.add(
                format!("{prefix}.{name}"),
                &[rows, cols],
                Owner::Adapter,
                ParamRole::Weight,
                site,
                init::kaiming_normal(rng, rows * cols, rows),
            )
        };
        let s1 = factor("s1", m, alpha)?;
        let t1 = factor("t1", alpha, n)?;
        let s2 = factor("s2", m, alpha)?;
        let t2 = factor("t2", alpha, n)?;
        let bias = store.add(
            format!("{prefix}.bias"),
            &[n],
            Owner::Adapter,
            ParamRole::Bias,
            site,
            init::zeros(n),
        )?;
        Ok(Self {
            s1,
            t1,
            s2,
            t2,
            bias,
            m,
            n,
            alpha,
        })
    }

    pub fn ids(&self) -> [ParamId; 5] {
        [self.s1, self.t1, self.s2, self.t2, self.bias]
    }

    /// `s1·t1 + s2·t2` as a dense row-major `[m, n]` matrix.
    pub fn materialize<T: Real>(&self, store: &ParamStore<T>) -> Vec<T> {
        let (m, n, a) = (self.m, self.n, self.alpha);
        let mut w = vec![T::zero(); m * n];
        for (s, t) in [(self.s1, self.t1), (self.s2, self.t2)] {
            let (s, t) = (store.value(s), store.value(t));
            for i in 0..m {
                for r in 0..a {
                    let sv = s[i * a + r];
                    for j in 0..n {
                        w[i * n + j] = w[i * n + j] + sv * t[r * n + j];
                    }
                }
            }
        }
        w
    }
}

/// `x·s1·t1 + x·s2·t2 + bias`, never forming the dense weight.
pub fn dual_lowrank_apply<T: Real>(
    tape: &mut Tape<T>,
    p: &DualLowRank,
    bound: &Bound,
    x: &Tensor,
) -> Result<Tensor> {
    if x.rank() == 0 || x.last_dim() != p.m {
        return Err(Error::Shape {
            op: "dual_lowrank",
            shapes: vec![x.shape().to_vec(), vec![p.m, p.n]],
        });
    }
    let a = tape.matmul(x, &bound[p.s1])?;
    let a = tape.matmul(&a, &bound[p.t1])?;
    let b = tape.matmul(x, &bound[p.s2])?;
    let b = tape.matmul(&b, &bound[p.t2])?;
    let y = tape.add(&a, &b)?;
    tape.add(&y, &bound[p.bias])
}
