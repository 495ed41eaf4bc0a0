//! Adapter families that attach to a block's sublayers or projections.

use crate::error::{Error, Result};
use crate::init::{self, InitRng};
use crate::peft::lowrank::{dual_lowrank_apply, DualLowRank};
use crate::peft::registry::{Bound, ParamId, ParamRole, ParamStore, Site};
use crate::real::Real;
use crate::tape::{Owner, Tape, Tensor};

fn dim_check(op: &'static str, x: &Tensor, m: usize) -> Result<()> {
    if x.rank() == 0 || x.last_dim() != m {
        return Err(Error::Shape {
            op,
            shapes: vec![x.shape().to_vec(), vec![m]],
        });
    }
    Ok(())
}

fn adapter_param<T: Real>(
    store: &mut ParamStore<T>,
    name: String,
    shape: &[usize],
    role: ParamRole,
    site: Site,
    value: Vec<T>,
) -> Result<ParamId> {
    store.add(name, shape, Owner::Adapter, role, site, value)
}

/// Dense bottleneck `m → d → m` with a zero-initialised up-projection.
#[derive(Debug, Clone)]
pub struct DenseAdapter {
    pub down_w: ParamId,
    pub down_b: ParamId,
    pub up_w: ParamId,
    pub up_b: ParamId,
    pub m: usize,
    pub d: usize,
}

impl DenseAdapter {
    pub fn count(m: usize, d: usize) -> usize {
        2 * m * d + m + d
    }

    pub fn add<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut InitRng,
        prefix: &str,
        m: usize,
        d: usize,
        site: Site,
    ) -> Result<Self> {
        let down_w = adapter_param(
            store,
            format!("{prefix}.down.weight"),
            &[m, d],
            ParamRole::Weight,
            site,
            init::fan_in_uniform(rng, m * d, m),
        )?;
        let down_b = adapter_param(store, format!("{prefix}.down.bias"), &[d], ParamRole::Bias, site, init::zeros(d))?;
        let up_w = adapter_param(
            store,
            format!("{prefix}.up.weight"),
            &[d, m],
            ParamRole::Weight,
            site,
            init::zeros(d * m),
        )?;
        let up_b = adapter_param(store, format!("{prefix}.up.bias"), &[m], ParamRole::Bias, site, init::zeros(m))?;
        Ok(Self {
            down_w,
            down_b,
            up_w,
            up_b,
            m,
            d,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.down_w, self.down_b, self.up_w, self.up_b]
    }
}

/// `U(GeLU(D(x)))`
pub fn dense_bottleneck<T: Real>(
    tape: &mut Tape<T>,
    p: &DenseAdapter,
    bound: &Bound,
    x: &Tensor,
) -> Result<Tensor> {
    dim_check("adapter", x, p.m)?;
    let h = tape.matmul(x, &bound[p.down_w])?;
    let h = tape.add(&h, &bound[p.down_b])?;
    let h = tape.gelu(&h)?;
    let y = tape.matmul(&h, &bound[p.up_w])?;
    tape.add(&y, &bound[p.up_b])
}

/// Serial adapter `U(GeLU(D(x))) + x`.
pub fn standard_adapter_forward<T: Real>(
    tape: &mut Tape<T>,
    p: &DenseAdapter,
    bound: &Bound,
    x: &Tensor,
) -> Result<Tensor> {
    let y = dense_bottleneck(tape, p, bound, x)?;
    tape.add(&y, x)
}

/// Dense bottleneck plus a learnable scalar gate, run parallel to a sublayer.
#[derive(Debug, Clone)]
pub struct AdaptFormerAdapter {
    pub branch: DenseAdapter,
    pub scale: ParamId,
}

pub const ADAPTFORMER_SCALE_INIT: f64 = 0.1;

impl AdaptFormerAdapter {
    pub fn count(m: usize, d: usize) -> usize {
        DenseAdapter::count(m, d) + 1
    }

    pub fn add<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut InitRng,
        prefix: &str,
        m: usize,
        d: usize,
        site: Site,
    ) -> Result<Self> {
        let branch = DenseAdapter::add(store, rng, prefix, m, d, site)?;
        let scale = adapter_param(
            store,
            format!("{prefix}.scale"),
            &[1],
            ParamRole::Scale,
            site,
            vec![T::from_f64(ADAPTFORMER_SCALE_INIT)],
        )?;
        Ok(Self { branch, scale })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.branch.ids();
        v.push(self.scale);
        v
    }
}

/// `out + s·U(GeLU(D(x)))` where `out` is the sublayer output computed from `x`.
pub fn adaptformer_forward<T: Real>(
    tape: &mut Tape<T>,
    p: &AdaptFormerAdapter,
    bound: &Bound,
    x: &Tensor,
    out: &Tensor,
) -> Result<Tensor> {
    let branch = dense_bottleneck(tape, &p.branch, bound, x)?;
    if branch.shape() != out.shape() {
        return Err(Error::Shape {
            op: "adaptformer",
            shapes: vec![branch.shape().to_vec(), out.shape().to_vec()],
        });
    }
    let branch = tape.scale_by(&branch, &bound[p.scale])?;
    tape.add(out, &branch)
}

/// Low-rank update `A·B` beside a frozen `[m, n]` weight; `B` starts at zero.
#[derive(Debug, Clone)]
pub struct LoraParams {
    pub a: ParamId,
    pub b: ParamId,
    pub m: usize,
    pub n: usize,
    pub rank: usize,
}

impl LoraParams {
    pub fn count(m: usize, n: usize, r: usize) -> usize {
        r * (m + n)
    }

    pub fn add<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut InitRng,
        prefix: &str,
        m: usize,
        n: usize,
        rank: usize,
        site: Site,
    ) -> Result<Self> {
        let a = adapter_param(
            store,
            format!("{prefix}.lora_a"),
            &[m, rank],
            ParamRole::Weight,
            site,
            init::fan_in_uniform(rng, m * rank, m),
        )?;
        let b = adapter_param(
            store,
            format!("{prefix}.lora_b"),
            &[rank, n],
            ParamRole::Weight,
            site,
            init::zeros(rank * n),
        )?;
        Ok(Self { a, b, m, n, rank })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.a, self.b]
    }
}

/// Adds `x·A·B` to an already computed frozen projection `base = x·W + bias`.
pub fn lora_update<T: Real>(
    tape: &mut Tape<T>,
    p: &LoraParams,
    bound: &Bound,
    x: &Tensor,
    base: &Tensor,
) -> Result<Tensor> {
    dim_check("lora", x, p.m)?;
    let h = tape.matmul(x, &bound[p.a])?;
    let d = tape.matmul(&h, &bound[p.b])?;
    tape.add(base, &d)
}

/// `x·W + x·A·B + bias`
pub fn lora_linear_forward<T: Real>(
    tape: &mut Tape<T>,
    x: &Tensor,
    w: &Tensor,
    bias: &Tensor,
    p: &LoraParams,
    bound: &Bound,
) -> Result<Tensor> {
    dim_check("lora", x, p.m)?;
    if w.shape() != [p.m, p.n] {
        return Err(Error::Shape {
            op: "lora",
            shapes: vec![w.shape().to_vec(), vec![p.m, p.n]],
        });
    }
    let y = tape.matmul(x, w)?;
    let y = tape.add(&y, bias)?;
    lora_update(tape, p, bound, x, &y)
}

/// `m → m/2 → m` through two dual low-rank projections.
#[derive(Debug, Clone)]
pub struct E3vaAdapter {
    pub down: DualLowRank,
    pub up: DualLowRank,
}

impl E3vaAdapter {
    pub fn count(m: usize, alpha: usize) -> usize {
        DualLowRank::count(m, m / 2, alpha) + DualLowRank::count(m / 2, m, alpha)
    }

    pub fn add<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut InitRng,
        prefix: &str,
        m: usize,
        alpha: usize,
        site: Site,
    ) -> Result<Self> {
        if m % 2 != 0 {
            return Err(Error::Config(format!("E3VA adapter needs an even width, got {m}")));
        }
        let n = m / 2;
        let down = DualLowRank::add(store, rng, &format!("{prefix}.down"), m, n, alpha, site)?;
        let up = DualLowRank::add(store, rng, &format!("{prefix}.up"), n, m, alpha, site)?;
        Ok(Self { down, up })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.down.ids().into_iter().chain(self.up.ids()).collect()
    }
}

/// `up(GeLU(down(x)))` with no residual.
pub fn e3va_adapter_forward<T: Real>(
    tape: &mut Tape<T>,
    a: &E3vaAdapter,
    bound: &Bound,
    x: &Tensor,
) -> Result<Tensor> {
    dim_check("e3va_adapter", x, a.down.m)?;
    let h = dual_lowrank_apply(tape, &a.down, bound, x)?;
    let h = tape.gelu(&h)?;
    dual_lowrank_apply(tape, &a.up, bound, &h)
}
