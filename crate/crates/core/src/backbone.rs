//! A scaled-down hierarchical windowed-attention backbone.
//!
//! Tokens are laid out `[B, side², C]` in row-major grid order. Each block is
//!
//! ```text
//! tap1   = W-MSA(LN1(l))
//! l_mid  = l + tap1
//! tap2   = MLP(LN2(l_mid))
//! l_next = l_mid + tap2
//! ```
//!
//! and a [`BlockHook`] can observe both taps or, when it declares itself
//! inserting, replace the sublayer outputs before they join the stream.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{self, InitRng};
use crate::peft::registry::{Bound, ParamId, ParamRole, ParamStore, Site};
use crate::real::Real;
use crate::tape::{Owner, Tape, Tensor};

pub const LN_EPS: f64 = 1e-5;
/// Truncated-normal std of every backbone weight and bias table.
pub const INIT_STD: f64 = 0.02;

fn default_mlp_ratio() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window: usize,
    pub patch: usize,
    pub img: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

impl BackboneConfig {
    pub fn toy1() -> Self {
        Self {
            embed_dim: 16,
            depths: vec![1, 1, 2, 1],
            heads: vec![1, 2, 4, 8],
            window: 4,
            patch: 4,
            img: 64,
            mlp_ratio: 4,
        }
    }

    /// Two single-block stages, small enough to check every gradient coordinate.
    pub fn micro() -> Self {
        Self {
            embed_dim: 8,
            depths: vec![1, 1],
            heads: vec![1, 1],
            window: 2,
            patch: 4,
            img: 16,
            mlp_ratio: 2,
        }
    }

    pub fn swin_b() -> Self {
        Self {
            embed_dim: 128,
            depths: vec![2, 2, 18, 2],
            heads: vec![4, 8, 16, 32],
            window: 7,
            patch: 4,
            img: 224,
            mlp_ratio: 4,
        }
    }

    pub fn swin_l() -> Self {
        Self {
            embed_dim: 192,
            depths: vec![2, 2, 18, 2],
            heads: vec![6, 12, 24, 48],
            window: 7,
            patch: 4,
            img: 224,
            mlp_ratio: 4,
        }
    }

    pub const PRESETS: [&'static str; 4] = ["toy-1", "micro", "swin-b", "swin-l"];

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy-1" | "toy1" => Ok(Self::toy1()),
            "micro" => Ok(Self::micro()),
            "swin-b" => Ok(Self::swin_b()),
            "swin-l" => Ok(Self::swin_l()),
            other => Err(Error::Config(format!(
                "unknown model preset `{other}` (expected one of {:?})",
                Self::PRESETS
            ))),
        }
    }

    pub fn n_stages(&self) -> usize {
        self.depths.len()
    }

    pub fn stage_dim(&self, s: usize) -> usize {
        self.embed_dim << s
    }

    pub fn stage_dims(&self) -> Vec<usize> {
        (0..self.n_stages()).map(|s| self.stage_dim(s)).collect()
    }

    /// Token grid side at stage `s`.
    pub fn stage_side(&self, s: usize) -> usize {
        (self.img / self.patch) >> s
    }

    /// Window actually used at stage `s`: the configured window, clamped to
    /// the grid once the grid is smaller than it.
    pub fn stage_window(&self, s: usize) -> usize {
        self.window.min(self.stage_side(s))
    }

    pub fn n_blocks(&self) -> usize {
        self.depths.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.embed_dim == 0 || self.window == 0 || self.patch == 0 || self.mlp_ratio == 0 {
            return bad("embed_dim, window, patch and mlp_ratio must be positive".into());
        }
        if self.depths.is_empty() || self.depths.contains(&0) {
            return bad(format!("depths must be non-empty and positive, got {:?}", self.depths));
        }
        if self.heads.len() != self.depths.len() {
            return bad(format!(
                "{} head counts for {} stages",
                self.heads.len(),
                self.depths.len()
            ));
        }
        if self.img % self.patch != 0 {
            return bad(format!(
                "image side {} is not divisible by patch {}",
                self.img, self.patch
            ));
        }
        let mut side = self.img / self.patch;
        for s in 0..self.n_stages() {
            let (dim, h) = (self.stage_dim(s), self.heads[s]);
            if h == 0 || dim % h != 0 {
                return bad(format!("stage {s}: {h} heads do not divide {dim} channels"));
            }
            if side == 0 || side % self.stage_window(s) != 0 {
                return bad(format!(
                    "stage {s}: grid side {side} is not divisible by window {}",
                    self.stage_window(s)
                ));
            }
            if s + 1 < self.n_stages() {
                if side % 2 != 0 {
                    return bad(format!("stage {s}: odd grid side {side} cannot be merged"));
                }
                side /= 2;
            }
        }
        Ok(())
    }
}

/// Relative position index for a `w × w` window into a table built for
/// window `table_w ≥ w`: entry `i·w² + j` is the table row for the offset
/// from token `j` to token `i`.
pub fn relative_position_index(w: usize, table_w: usize) -> Vec<usize> {
    let n = w * w;
    let span = 2 * table_w - 1;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        let (yi, xi) = (i / w, i % w);
        for j in 0..n {
            let (yj, xj) = (j / w, j % w);
            let dy = yi + table_w - 1 - yj;
            let dx = xi + table_w - 1 - xj;
            idx.push(dy * span + dx);
        }
    }
    idx
}

pub fn rpb_rows(window: usize) -> usize {
    (2 * window - 1) * (2 * window - 1)
}

#[derive(Debug, Clone)]
pub struct PatchEmbedParams {
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub norm_w: ParamId,
    pub norm_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub norm1_w: ParamId,
    pub norm1_b: ParamId,
    pub q_w: ParamId,
    pub q_b: ParamId,
    pub k_w: ParamId,
    pub k_b: ParamId,
    pub v_w: ParamId,
    pub v_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub rpb: ParamId,
    pub norm2_w: ParamId,
    pub norm2_b: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct MergeParams {
    pub norm_w: ParamId,
    pub norm_b: ParamId,
    pub reduction: ParamId,
}

#[derive(Debug, Clone)]
pub struct BackboneParams {
    pub patch_embed: PatchEmbedParams,
    /// `stages[s][b]`
    pub blocks: Vec<Vec<BlockParams>>,
    /// `merges[s]` maps stage `s` to stage `s + 1`.
    pub merges: Vec<MergeParams>,
}

/// Adds one linear layer `[fan_in, fan_out]` with trunc-normal weights.
fn linear<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut InitRng,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
    site: Site,
) -> Result<(ParamId, Option<ParamId>)> {
    let w = store.add(
        format!("{name}.weight"),
        &[fan_in, fan_out],
        Owner::Backbone,
        ParamRole::Weight,
        site,
        init::trunc_normal(rng, fan_in * fan_out, INIT_STD),
    )?;
    let b = if bias {
        Some(store.add(
            format!("{name}.bias"),
            &[fan_out],
            Owner::Backbone,
            ParamRole::Bias,
            site,
            init::zeros(fan_out),
        )?)
    } else {
        None
    };
    Ok((w, b))
}

pub(crate) fn norm<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    dim: usize,
    owner: Owner,
    site: Site,
) -> Result<(ParamId, ParamId)> {
    let w = store.add(
        format!("{name}.weight"),
        &[dim],
        owner,
        ParamRole::NormWeight,
        site,
        init::ones(dim),
    )?;
    let b = store.add(
        format!("{name}.bias"),
        &[dim],
        owner,
        ParamRole::NormBias,
        site,
        init::zeros(dim),
    )?;
    Ok((w, b))
}

/// Adds a patch-merge layer `4m → 2m` with the given owner and site.
pub(crate) fn merge_params<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut InitRng,
    prefix: &str,
    dim: usize,
    owner: Owner,
    site: Site,
) -> Result<MergeParams> {
    let (norm_w, norm_b) = norm(store, &format!("{prefix}.norm"), 4 * dim, owner, site)?;
    let reduction = store.add(
        format!("{prefix}.reduction.weight"),
        &[4 * dim, 2 * dim],
        owner,
        ParamRole::Weight,
        site,
        init::trunc_normal(rng, 8 * dim * dim, INIT_STD),
    )?;
    Ok(MergeParams {
        norm_w,
        norm_b,
        reduction,
    })
}

impl BackboneParams {
    /// Registers and initialises every backbone parameter.
    pub fn init<T: Real>(
        cfg: &BackboneConfig,
        store: &mut ParamStore<T>,
        rng: &mut InitRng,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.embed_dim;
        let pin = cfg.patch * cfg.patch * 3;
        let (proj_w, proj_b) = linear(store, rng, "patch_embed.proj", pin, c, true, Site::PatchEmbed)?;
        let (norm_w, norm_b) = norm(store, "patch_embed.norm", c, Owner::Backbone, Site::PatchEmbed)?;
        let patch_embed = PatchEmbedParams {
            proj_w,
            proj_b: proj_b.unwrap(),
            norm_w,
            norm_b,
        };
        let mut blocks = Vec::new();
        let mut merges = Vec::new();
        for s in 0..cfg.n_stages() {
            let dim = cfg.stage_dim(s);
            let hidden = dim * cfg.mlp_ratio;
            let mut stage = Vec::new();
            for b in 0..cfg.depths[s] {
                let site = Site::Block { stage: s, block: b };
                let p = format!("stages.{s}.blocks.{b}");
                let (norm1_w, norm1_b) = norm(store, &format!("{p}.norm1"), dim, Owner::Backbone, site)?;
                let (q_w, q_b) = linear(store, rng, &format!("{p}.attn.q"), dim, dim, true, site)?;
                let (k_w, k_b) = linear(store, rng, &format!("{p}.attn.k"), dim, dim, true, site)?;
                let (v_w, v_b) = linear(store, rng, &format!("{p}.attn.v"), dim, dim, true, site)?;
                let (proj_w, proj_b) =
                    linear(store, rng, &format!("{p}.attn.proj"), dim, dim, true, site)?;
                let rows = rpb_rows(cfg.window);
                let h = cfg.heads[s];
                let rpb = store.add(
                    format!("{p}.attn.relative_position_bias_table"),
                    &[rows, h],
                    Owner::Backbone,
                    ParamRole::RelPosBias,
                    site,
                    init::trunc_normal(rng, rows * h, INIT_STD),
                )?;
                let (norm2_w, norm2_b) = norm(store, &format!("{p}.norm2"), dim, Owner::Backbone, site)?;
                let (fc1_w, fc1_b) =
                    linear(store, rng, &format!("{p}.mlp.fc1"), dim, hidden, true, site)?;
                let (fc2_w, fc2_b) =
                    linear(store, rng, &format!("{p}.mlp.fc2"), hidden, dim, true, site)?;
                stage.push(BlockParams {
                    norm1_w,
                    norm1_b,
                    q_w,
                    q_b: q_b.unwrap(),
                    k_w,
                    k_b: k_b.unwrap(),
                    v_w,
                    v_b: v_b.unwrap(),
                    proj_w,
                    proj_b: proj_b.unwrap(),
                    rpb,
                    norm2_w,
                    norm2_b,
                    fc1_w,
                    fc1_b: fc1_b.unwrap(),
                    fc2_w,
                    fc2_b: fc2_b.unwrap(),
                });
            }
            blocks.push(stage);
            if s + 1 < cfg.n_stages() {
                merges.push(merge_params(
                    store,
                    rng,
                    &format!("stages.{s}.downsample"),
                    dim,
                    Owner::Backbone,
                    Site::Merge { stage: s },
                )?);
            }
        }
        Ok(Self {
            patch_embed,
            blocks,
            merges,
        })
    }

    pub fn block(&self, site: BlockSite) -> &BlockParams {
        &self.blocks[site.stage][site.block]
    }
}

/// Tape tensors of one patch-merge layer.
#[derive(Debug, Clone)]
pub struct BoundMerge {
    pub norm_w: Tensor,
    pub norm_b: Tensor,
    pub reduction: Tensor,
}

impl BoundMerge {
    pub fn new(p: &MergeParams, bound: &Bound) -> Self {
        Self {
            norm_w: bound[p.norm_w].clone(),
            norm_b: bound[p.norm_b].clone(),
            reduction: bound[p.reduction].clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockSite {
    pub stage: usize,
    pub block: usize,
    /// Position of the block over the whole network.
    pub index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Projection {
    Query,
    Key,
    Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sublayer {
    Msa,
    Mlp,
}

/// Every tensor a block produced. `tap1`/`tap2` are the raw sublayer outputs;
/// `msa_out`/`mlp_out` are what entered the stream after any hook replacement.
#[derive(Debug, Clone)]
pub struct BlockState {
    pub site: BlockSite,
    pub l: Tensor,
    pub tap1: Tensor,
    pub msa_out: Tensor,
    pub l_mid: Tensor,
    pub tap2: Tensor,
    pub mlp_out: Tensor,
    pub l_next: Tensor,
}

/// Attachment points inside the backbone. Returning `Some` replaces the
/// corresponding tensor and is only allowed when [`BlockHook::inserting`].
pub trait BlockHook<T: Real> {
    fn inserting(&self) -> bool {
        false
    }

    /// Called with the windowed normed input `x: [Bn, N, C]` and the
    /// projection output.
    fn on_projection(
        &mut self,
        _tape: &mut Tape<T>,
        _site: BlockSite,
        _which: Projection,
        _x: &Tensor,
        _out: &Tensor,
    ) -> Result<Option<Tensor>> {
        Ok(None)
    }

    /// Called with the sublayer's stream input (`l` for MSA, `l_mid` for MLP)
    /// and its raw output.
    fn on_sublayer(
        &mut self,
        _tape: &mut Tape<T>,
        _site: BlockSite,
        _which: Sublayer,
        _stream: &Tensor,
        _out: &Tensor,
    ) -> Result<Option<Tensor>> {
        Ok(None)
    }

    fn on_block(&mut self, _tape: &mut Tape<T>, _state: &BlockState) -> Result<()> {
        Ok(())
    }

    /// Called with the final stream of stage `stage` and, unless it is the
    /// last stage, the merge that follows it.
    fn on_stage_end(
        &mut self,
        _tape: &mut Tape<T>,
        _stage: usize,
        _features: &Tensor,
        _merge: Option<&BoundMerge>,
    ) -> Result<()> {
        Ok(())
    }
}

/// Observes nothing.
pub struct NoHook;

impl<T: Real> BlockHook<T> for NoHook {}

fn guarded<T: Real>(
    tape: &mut Tape<T>,
    inserting: bool,
    what: &str,
    site: BlockSite,
    r: Result<Option<Tensor>>,
    fallback: &Tensor,
) -> Result<Tensor> {
    tape.set_owner(Owner::Backbone);
    match r? {
        None => Ok(fallback.clone()),
        Some(_) if !inserting => Err(Error::StreamMutation(format!(
            "{what} of stage {} block {} replaced by a non-inserting hook",
            site.stage, site.block
        ))),
        Some(t) => {
            if t.shape() != fallback.shape() {
                return Err(Error::Shape {
                    op: "hook",
                    shapes: vec![fallback.shape().to_vec(), t.shape().to_vec()],
                });
            }
            Ok(t)
        }
    }
}

pub struct PatchEmbedOutput {
    /// Linear projection of the patches, before the norm.
    pub projected: Tensor,
    pub tokens: Tensor,
}

/// `[B, img, img, 3]` → `[B, (img/patch)², embed_dim]`.
pub fn patch_embed<T: Real>(
    tape: &mut Tape<T>,
    cfg: &BackboneConfig,
    p: &PatchEmbedParams,
    bound: &Bound,
    image: &Tensor,
) -> Result<PatchEmbedOutput> {
    let sh = image.shape();
    if sh.len() != 4 || sh[3] != 3 || sh[1] != sh[2] {
        return Err(Error::Shape {
            op: "patch_embed",
            shapes: vec![sh.to_vec()],
        });
    }
    let (b, img, ps) = (sh[0], sh[1], cfg.patch);
    if img != cfg.img || img % ps != 0 {
        return Err(Error::Config(format!(
            "image side {img} does not match config {} with patch {ps}",
            cfg.img
        )));
    }
    let g = img / ps;
    let pin = ps * ps * 3;
    let mut index = Vec::with_capacity(image.numel());
    for bi in 0..b {
        for gy in 0..g {
            for gx in 0..g {
                for py in 0..ps {
                    for px in 0..ps {
                        let base = ((bi * img + gy * ps + py) * img + gx * ps + px) * 3;
                        index.extend(base..base + 3);
                    }
                }
            }
        }
    }
    let patches = tape.gather(image, index, &[b, g * g, pin])?;
    let proj = tape.matmul(&patches, &bound[p.proj_w])?;
    let projected = tape.add(&proj, &bound[p.proj_b])?;
    let tokens = tape.layer_norm(&projected, Some((&bound[p.norm_w], &bound[p.norm_b])), LN_EPS)?;
    Ok(PatchEmbedOutput { projected, tokens })
}

fn linear_fwd<T: Real>(tape: &mut Tape<T>, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let y = tape.matmul(x, w)?;
    tape.add(&y, b)
}

/// Geometry of a block: grid side, window and head count.
#[derive(Debug, Clone, Copy)]
pub struct BlockGeom {
    pub side: usize,
    pub window: usize,
    pub table_window: usize,
    pub heads: usize,
}

impl BlockGeom {
    pub fn of(cfg: &BackboneConfig, stage: usize) -> Self {
        Self {
            side: cfg.stage_side(stage),
            window: cfg.stage_window(stage),
            table_window: cfg.window,
            heads: cfg.heads[stage],
        }
    }
}

/// Windowed multi-head self-attention over already-normed tokens `[B, L, C]`.
#[allow(clippy::too_many_arguments)]
pub fn window_attention<T: Real>(
    tape: &mut Tape<T>,
    geom: BlockGeom,
    p: &BlockParams,
    bound: &Bound,
    x: &Tensor,
    site: BlockSite,
    hook: &mut dyn BlockHook<T>,
) -> Result<Tensor> {
    let c = x.last_dim();
    let (side, w, h) = (geom.side, geom.window, geom.heads);
    if c % h != 0 {
        return Err(Error::Shape {
            op: "window_attention",
            shapes: vec![x.shape().to_vec()],
        });
    }
    let hd = c / h;
    let n = w * w;
    let inserting = hook.inserting();
    let xw = tape.window_partition(x, side, w)?;
    let bn = xw.shape()[0];
    let mut project = |tape: &mut Tape<T>, wt: ParamId, bt: ParamId, which: Projection| {
        let out = linear_fwd(tape, &xw, &bound[wt], &bound[bt])?;
        let r = hook.on_projection(tape, site, which, &xw, &out);
        guarded(tape, inserting, "projection", site, r, &out)
    };
    let q = project(tape, p.q_w, p.q_b, Projection::Query)?;
    let k = project(tape, p.k_w, p.k_b, Projection::Key)?;
    let v = project(tape, p.v_w, p.v_b, Projection::Value)?;
    let q = tape.reshape(&q, &[bn, n, h, hd])?;
    let q = tape.transpose(&q, &[0, 2, 1, 3])?;
    let k = tape.reshape(&k, &[bn, n, h, hd])?;
    let kt = tape.transpose(&k, &[0, 2, 3, 1])?;
    let v = tape.reshape(&v, &[bn, n, h, hd])?;
    let v = tape.transpose(&v, &[0, 2, 1, 3])?;
    let scores = tape.matmul(&q, &kt)?;
    let scores = tape.scale(&scores, 1.0 / (hd as f64).sqrt())?;
    // table [R, h] -> bias [h, N, N]
    let rel = relative_position_index(w, geom.table_window);
    let mut index = Vec::with_capacity(h * n * n);
    for head in 0..h {
        index.extend(rel.iter().map(|&r| r * h + head));
    }
    let bias = tape.gather(&bound[p.rpb], index, &[h, n, n])?;
    let scores = tape.add(&scores, &bias)?;
    let attn = tape.softmax(&scores)?;
    let o = tape.matmul(&attn, &v)?;
    let o = tape.transpose(&o, &[0, 2, 1, 3])?;
    let o = tape.reshape(&o, &[bn, n, c])?;
    let o = linear_fwd(tape, &o, &bound[p.proj_w], &bound[p.proj_b])?;
    tape.window_merge(&o, side, w)
}

/// One block on the stream `l: [B, side², C]`.
pub fn block_forward<T: Real>(
    tape: &mut Tape<T>,
    geom: BlockGeom,
    p: &BlockParams,
    bound: &Bound,
    l: &Tensor,
    site: BlockSite,
    hook: &mut dyn BlockHook<T>,
) -> Result<BlockState> {
    tape.set_owner(Owner::Backbone);
    let c = bound[p.norm1_w].numel();
    if l.rank() != 3 || l.last_dim() != c || l.shape()[1] != geom.side * geom.side {
        return Err(Error::Shape {
            op: "block_forward",
            shapes: vec![l.shape().to_vec()],
        });
    }
    let inserting = hook.inserting();
    let x = tape.layer_norm(l, Some((&bound[p.norm1_w], &bound[p.norm1_b])), LN_EPS)?;
    let tap1 = window_attention(tape, geom, p, bound, &x, site, hook)?;
    let r = hook.on_sublayer(tape, site, Sublayer::Msa, l, &tap1);
    let msa_out = guarded(tape, inserting, "attention output", site, r, &tap1)?;
    let l_mid = tape.add(l, &msa_out)?;
    let x2 = tape.layer_norm(&l_mid, Some((&bound[p.norm2_w], &bound[p.norm2_b])), LN_EPS)?;
    let hid = linear_fwd(tape, &x2, &bound[p.fc1_w], &bound[p.fc1_b])?;
    let hid = tape.gelu(&hid)?;
    let tap2 = linear_fwd(tape, &hid, &bound[p.fc2_w], &bound[p.fc2_b])?;
    let r = hook.on_sublayer(tape, site, Sublayer::Mlp, &l_mid, &tap2);
    let mlp_out = guarded(tape, inserting, "mlp output", site, r, &tap2)?;
    let l_next = tape.add(&l_mid, &mlp_out)?;
    let state = BlockState {
        site,
        l: l.clone(),
        tap1,
        msa_out,
        l_mid,
        tap2,
        mlp_out,
        l_next,
    };
    hook.on_block(tape, &state)?;
    tape.set_owner(Owner::Backbone);
    Ok(state)
}

/// 2×2 neighbourhood concat → norm → bias-free linear, `[B, side², m]` →
/// `[B, (side/2)², 2m]`. Neighbours are concatenated in the order
/// (0,0), (1,0), (0,1), (1,1) as (row, col) offsets.
pub fn patch_merge<T: Real>(
    tape: &mut Tape<T>,
    x: &Tensor,
    side: usize,
    p: &BoundMerge,
) -> Result<Tensor> {
    if x.rank() != 3 || x.shape()[1] != side * side {
        return Err(Error::Shape {
            op: "patch_merge",
            shapes: vec![x.shape().to_vec()],
        });
    }
    if side % 2 != 0 {
        return Err(Error::Attr {
            op: "patch_merge",
            msg: format!("odd grid side {side}"),
        });
    }
    let (b, c) = (x.shape()[0], x.shape()[2]);
    let half = side / 2;
    let mut index = Vec::with_capacity(x.numel());
    for bi in 0..b {
        for y in 0..half {
            for xx in 0..half {
                for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let tok = (2 * y + dy) * side + 2 * xx + dx;
                    let base = (bi * side * side + tok) * c;
                    index.extend(base..base + c);
                }
            }
        }
    }
    let cat = tape.gather(x, index, &[b, half * half, 4 * c])?;
    let normed = tape.layer_norm(&cat, Some((&p.norm_w, &p.norm_b)), LN_EPS)?;
    tape.matmul(&normed, &p.reduction)
}

pub struct BackboneOutput {
    pub embed: PatchEmbedOutput,
    /// Final stream of every stage, before any merge.
    pub stages: Vec<Tensor>,
    pub blocks: Vec<BlockState>,
}

pub fn backbone_forward<T: Real>(
    tape: &mut Tape<T>,
    cfg: &BackboneConfig,
    params: &BackboneParams,
    bound: &Bound,
    image: &Tensor,
    hook: &mut dyn BlockHook<T>,
) -> Result<BackboneOutput> {
    cfg.validate()?;
    let prev = tape.set_owner(Owner::Backbone);
    let embed = patch_embed(tape, cfg, &params.patch_embed, bound, image)?;
    let mut l = embed.tokens.clone();
    let mut stages = Vec::with_capacity(cfg.n_stages());
    let mut blocks = Vec::with_capacity(cfg.n_blocks());
    let mut index = 0;
    for s in 0..cfg.n_stages() {
        let geom = BlockGeom::of(cfg, s);
        for (b, p) in params.blocks[s].iter().enumerate() {
            let site = BlockSite {
                stage: s,
                block: b,
                index,
            };
            let state = block_forward(tape, geom, p, bound, &l, site, hook)?;
            l = state.l_next.clone();
            blocks.push(state);
            index += 1;
        }
        let merge = params.merges.get(s).map(|m| BoundMerge::new(m, bound));
        hook.on_stage_end(tape, s, &l, merge.as_ref())?;
        tape.set_owner(Owner::Backbone);
        stages.push(l.clone());
        if let Some(m) = merge {
            l = patch_merge(tape, &l, geom.side, &m)?;
        }
    }
    tape.set_owner(prev);
    Ok(BackboneOutput {
        embed,
        stages,
        blocks,
    })
}
