use std::sync::Arc;

use super::kernels;
use super::{Op, Tape, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;

/// Primitive operations with their attributes, for [`Tape::apply`].
///
/// Token tensors use the layout `[batch, side·side, channels]`; the window
/// primitives take the grid side explicitly.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Scale(f64),
    /// Multiply by a one-element tensor (second input).
    ScaleBy,
    Gelu,
    Softmax { axis: isize },
    /// Inputs `[x]` or `[x, weight, bias]`.
    LayerNorm { axis: isize, eps: f64 },
    Reshape(Vec<usize>),
    Transpose(Vec<usize>),
    WindowPartition { side: usize, window: usize },
    WindowMerge { side: usize, window: usize },
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    UpsampleNearest { side: usize, factor: usize },
    Sum,
    Mean,
    CrossEntropy(Vec<usize>),
}

fn last_axis(op: &'static str, axis: isize, rank: usize) -> Result<()> {
    let resolved = if axis < 0 { rank as isize + axis } else { axis };
    if resolved != rank as isize - 1 {
        return Err(Error::Attr {
            op,
            msg: format!("only the last axis is supported (got {axis} for rank {rank})"),
        });
    }
    Ok(())
}

fn shape_err(op: &'static str, ts: &[&Tensor]) -> Error {
    Error::Shape {
        op,
        shapes: ts.iter().map(|t| t.shape.clone()).collect(),
    }
}

impl<T: Real> Tape<T> {
    pub fn apply(&mut self, prim: Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
        let name = format!("{prim:?}");
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::Attr {
                    op: "apply",
                    msg: format!("{name} takes {n} inputs, got {}", inputs.len()),
                });
            }
            Ok(())
        };
        match prim {
            Primitive::MatMul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            Primitive::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            Primitive::Scale(c) => {
                arity(1)?;
                self.scale(inputs[0], c)
            }
            Primitive::ScaleBy => {
                arity(2)?;
                self.scale_by(inputs[0], inputs[1])
            }
            Primitive::Gelu => {
                arity(1)?;
                self.gelu(inputs[0])
            }
            Primitive::Softmax { axis } => {
                arity(1)?;
                last_axis("softmax", axis, inputs[0].rank())?;
                self.softmax(inputs[0])
            }
            Primitive::LayerNorm { axis, eps } => {
                last_axis("layernorm", axis, inputs[0].rank())?;
                match inputs.len() {
                    1 => self.layer_norm(inputs[0], None, eps),
                    3 => self.layer_norm(inputs[0], Some((inputs[1], inputs[2])), eps),
                    n => Err(Error::Attr {
                        op: "layernorm",
                        msg: format!("expects 1 or 3 inputs, got {n}"),
                    }),
                }
            }
            Primitive::Reshape(shape) => {
                arity(1)?;
                self.reshape(inputs[0], &shape)
            }
            Primitive::Transpose(axes) => {
                arity(1)?;
                self.transpose(inputs[0], &axes)
            }
            Primitive::WindowPartition { side, window } => {
                arity(1)?;
                self.window_partition(inputs[0], side, window)
            }
            Primitive::WindowMerge { side, window } => {
                arity(1)?;
                self.window_merge(inputs[0], side, window)
            }
            Primitive::Concat { axis } => self.concat(inputs, axis),
            Primitive::Slice { axis, start, len } => {
                arity(1)?;
                self.slice(inputs[0], axis, start, len)
            }
            Primitive::UpsampleNearest { side, factor } => {
                arity(1)?;
                self.upsample_nearest(inputs[0], side, factor)
            }
            Primitive::Sum => {
                arity(1)?;
                self.sum(inputs[0])
            }
            Primitive::Mean => {
                arity(1)?;
                self.mean(inputs[0])
            }
            Primitive::CrossEntropy(labels) => {
                arity(1)?;
                self.cross_entropy(inputs[0], &labels)
            }
        }
    }

    /// `[.., m, k] · [k, n]`, or batched `[b.., m, k] · [b.., k, n]`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.check(a)?;
        self.check(b)?;
        if a.rank() < 1 || b.rank() < 2 {
            return Err(shape_err("matmul", &[a, b]));
        }
        if b.rank() == 2 {
            let (k, n) = (b.shape[0], b.shape[1]);
            if a.last_dim() != k {
                return Err(shape_err("matmul", &[a, b]));
            }
            let rows = a.numel() / k;
            let mut out = vec![T::zero(); rows * n];
            kernels::mm_acc(self.value(a), self.value(b), &mut out, rows, k, n);
            let mut shape = a.shape[..a.rank() - 1].to_vec();
            shape.push(n);
            return Ok(self.record(Op::MatMul { batched: false }, &[a, b], shape, out, vec![]));
        }
        let r = a.rank();
        if b.rank() != r || a.shape[..r - 2] != b.shape[..r - 2] || a.shape[r - 1] != b.shape[r - 2] {
            return Err(shape_err("matmul", &[a, b]));
        }
        let (m, k, n) = (a.shape[r - 2], a.shape[r - 1], b.shape[r - 1]);
        let batch: usize = a.shape[..r - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            for bi in 0..batch {
                kernels::mm_acc(
                    &av[bi * m * k..(bi + 1) * m * k],
                    &bv[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = a.shape[..r - 2].to_vec();
        shape.extend([m, n]);
        Ok(self.record(Op::MatMul { batched: true }, &[a, b], shape, out, vec![]))
    }

    /// Elementwise sum. `b` may match `a` or a trailing suffix of its shape.
    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.check(a)?;
        self.check(b)?;
        if b.rank() > a.rank() || a.shape[a.rank() - b.rank()..] != b.shape[..] {
            return Err(shape_err("add", &[a, b]));
        }
        let bn = b.numel();
        let out: Vec<T> = {
            let bv = self.value(b);
            self.value(a)
                .iter()
                .enumerate()
                .map(|(i, &x)| x + bv[i % bn])
                .collect()
        };
        Ok(self.record(Op::Add, &[a, b], a.shape.clone(), out, vec![]))
    }

    pub fn scale(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        self.check(a)?;
        let cc = T::from_f64(c);
        let out = self.value(a).iter().map(|&x| x * cc).collect();
        Ok(self.record(Op::Scale(c), &[a], a.shape.clone(), out, vec![]))
    }

    /// `a · s` for a one-element tensor `s`.
    pub fn scale_by(&mut self, a: &Tensor, s: &Tensor) -> Result<Tensor> {
        self.check(a)?;
        self.check(s)?;
        if s.numel() != 1 {
            return Err(shape_err("scale_by", &[a, s]));
        }
        let sv = self.value(s)[0];
        let out = self.value(a).iter().map(|&x| x * sv).collect();
        Ok(self.record(Op::ScaleBy, &[a, s], a.shape.clone(), out, vec![]))
    }

    pub fn gelu(&mut self, a: &Tensor) -> Result<Tensor> {
        self.check(a)?;
        let out = self.value(a).iter().map(|&x| kernels::gelu(x)).collect();
        Ok(self.record(Op::Gelu, &[a], a.shape.clone(), out, vec![]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: &Tensor) -> Result<Tensor> {
        self.check(a)?;
        let out = kernels::softmax_rows(self.value(a), a.last_dim());
        Ok(self.record(Op::Softmax, &[a], a.shape.clone(), out, vec![]))
    }

    /// Layer norm over the last axis, optionally with `(weight, bias)`.
    pub fn layer_norm(
        &mut self,
        x: &Tensor,
        affine: Option<(&Tensor, &Tensor)>,
        eps: f64,
    ) -> Result<Tensor> {
        self.check(x)?;
        let d = x.last_dim();
        if !(eps > 0.0) {
            return Err(Error::Attr {
                op: "layernorm",
                msg: format!("eps must be positive, got {eps}"),
            });
        }
        let (xhat, rstd) = kernels::layer_norm_stats(self.value(x), d, eps);
        match affine {
            None => {
                let out = xhat.clone();
                Ok(self.record(
                    Op::LayerNorm { affine: false },
                    &[x],
                    x.shape.clone(),
                    out,
                    vec![xhat, rstd],
                ))
            }
            Some((w, b)) => {
                self.check(w)?;
                self.check(b)?;
                if w.shape != [d] || b.shape != [d] {
                    return Err(shape_err("layernorm", &[x, w, b]));
                }
                let out = {
                    let (wv, bv) = (self.value(w), self.value(b));
                    xhat.iter()
                        .enumerate()
                        .map(|(i, &h)| h * wv[i % d] + bv[i % d])
                        .collect()
                };
                Ok(self.record(
                    Op::LayerNorm { affine: true },
                    &[x, w, b],
                    x.shape.clone(),
                    out,
                    vec![xhat, rstd],
                ))
            }
        }
    }

    pub fn reshape(&mut self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        self.check(a)?;
        if shape.iter().product::<usize>() != a.numel() || shape.contains(&0) {
            return Err(Error::Attr {
                op: "reshape",
                msg: format!("cannot reshape {:?} to {shape:?}", a.shape),
            });
        }
        let out = self.value(a).to_vec();
        Ok(self.record(Op::Reshape, &[a], shape.to_vec(), out, vec![]))
    }

    /// Axis permutation.
    pub fn transpose(&mut self, a: &Tensor, axes: &[usize]) -> Result<Tensor> {
        self.check(a)?;
        let mut seen = axes.to_vec();
        seen.sort_unstable();
        if seen != (0..a.rank()).collect::<Vec<_>>() {
            return Err(Error::Attr {
                op: "transpose",
                msg: format!("{axes:?} is not a permutation of {} axes", a.rank()),
            });
        }
        let (index, shape) = kernels::permute_index(&a.shape, axes);
        self.gather_unchecked("transpose", a, index, shape)
    }

    /// Records `out[i] = a[index[i]]` with the given output shape.
    pub fn gather(&mut self, a: &Tensor, index: Vec<usize>, shape: &[usize]) -> Result<Tensor> {
        self.check(a)?;
        let n = a.numel();
        if index.len() != shape.iter().product::<usize>() || index.iter().any(|&i| i >= n) {
            return Err(Error::Attr {
                op: "gather",
                msg: format!("index of length {} invalid for {:?} -> {shape:?}", index.len(), a.shape),
            });
        }
        self.gather_unchecked("gather", a, index, shape.to_vec())
    }

    fn gather_unchecked(
        &mut self,
        name: &'static str,
        a: &Tensor,
        index: Vec<usize>,
        shape: Vec<usize>,
    ) -> Result<Tensor> {
        let out = {
            let av = self.value(a);
            index.iter().map(|&i| av[i]).collect()
        };
        let index: Arc<[usize]> = index.into();
        Ok(self.record(Op::Gather { name, index }, &[a], shape, out, vec![]))
    }

    /// `[B, side², C]` → `[B·nW, window², C]`, windows in row-major order.
    pub fn window_partition(&mut self, x: &Tensor, side: usize, window: usize) -> Result<Tensor> {
        self.check(x)?;
        if x.rank() != 3 || x.shape[1] != side * side {
            return Err(shape_err("window_partition", &[x]));
        }
        if window == 0 || side % window != 0 {
            return Err(Error::Attr {
                op: "window_partition",
                msg: format!("grid side {side} is not divisible by window {window}"),
            });
        }
        let (b, c) = (x.shape[0], x.shape[2]);
        let nw = side / window;
        let mut index = Vec::with_capacity(x.numel());
        for bi in 0..b {
            for wy in 0..nw {
                for wx in 0..nw {
                    for iy in 0..window {
                        for ix in 0..window {
                            let tok = (wy * window + iy) * side + wx * window + ix;
                            let base = (bi * side * side + tok) * c;
                            index.extend(base..base + c);
                        }
                    }
                }
            }
        }
        self.gather_unchecked(
            "window_partition",
            x,
            index,
            vec![b * nw * nw, window * window, c],
        )
    }

    /// Inverse of [`Tape::window_partition`].
    pub fn window_merge(&mut self, x: &Tensor, side: usize, window: usize) -> Result<Tensor> {
        self.check(x)?;
        if window == 0 || side % window != 0 {
            return Err(Error::Attr {
                op: "window_merge",
                msg: format!("grid side {side} is not divisible by window {window}"),
            });
        }
        let nw = side / window;
        if x.rank() != 3 || x.shape[1] != window * window || x.shape[0] % (nw * nw) != 0 {
            return Err(shape_err("window_merge", &[x]));
        }
        let c = x.shape[2];
        let b = x.shape[0] / (nw * nw);
        let mut index = Vec::with_capacity(x.numel());
        for bi in 0..b {
            for y in 0..side {
                for xx in 0..side {
                    let win = bi * nw * nw + (y / window) * nw + xx / window;
                    let tok = (y % window) * window + xx % window;
                    let base = (win * window * window + tok) * c;
                    index.extend(base..base + c);
                }
            }
        }
        self.gather_unchecked("window_merge", x, index, vec![b, side * side, c])
    }

    /// Nearest-neighbour upsampling of a `[B, side², C]` grid by `factor`.
    pub fn upsample_nearest(&mut self, x: &Tensor, side: usize, factor: usize) -> Result<Tensor> {
        self.check(x)?;
        if x.rank() != 3 || x.shape[1] != side * side || factor == 0 {
            return Err(shape_err("upsample_nearest", &[x]));
        }
        let (b, c) = (x.shape[0], x.shape[2]);
        let big = side * factor;
        let mut index = Vec::with_capacity(b * big * big * c);
        for bi in 0..b {
            for y in 0..big {
                for xx in 0..big {
                    let base = (bi * side * side + (y / factor) * side + xx / factor) * c;
                    index.extend(base..base + c);
                }
            }
        }
        self.gather_unchecked("upsample_nearest", x, index, vec![b, big * big, c])
    }

    pub fn slice(&mut self, x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        self.check(x)?;
        if axis >= x.rank() || len == 0 || start + len > x.shape[axis] {
            return Err(Error::Attr {
                op: "slice",
                msg: format!("[{start}, {}) on axis {axis} of {:?}", start + len, x.shape),
            });
        }
        let outer: usize = x.shape[..axis].iter().product();
        let inner: usize = x.shape[axis + 1..].iter().product();
        let dim = x.shape[axis];
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            index.extend(base..base + len * inner);
        }
        let mut shape = x.shape.clone();
        shape[axis] = len;
        self.gather_unchecked("slice", x, index, shape)
    }

    pub fn concat(&mut self, xs: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = xs.first().ok_or(Error::Attr {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        for x in xs {
            self.check(x)?;
        }
        let rank = first.rank();
        let compatible = axis < rank
            && xs.iter().all(|x| {
                x.rank() == rank
                    && (0..rank).all(|d| d == axis || x.shape[d] == first.shape[d])
            });
        if !compatible {
            return Err(shape_err("concat", xs));
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total: usize = xs.iter().map(|x| x.shape[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for x in xs {
                let run = x.shape[axis] * inner;
                out.extend_from_slice(&self.value(x)[o * run..(o + 1) * run]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(self.record(Op::Concat { axis }, xs, shape, out, vec![]))
    }

    pub fn sum(&mut self, a: &Tensor) -> Result<Tensor> {
        self.check(a)?;
        let s = self.value(a).iter().copied().sum::<T>();
        Ok(self.record(Op::Sum, &[a], vec![], vec![s], vec![]))
    }

    pub fn mean(&mut self, a: &Tensor) -> Result<Tensor> {
        self.check(a)?;
        let s = self.value(a).iter().copied().sum::<T>() / T::from_f64(a.numel() as f64);
        Ok(self.record(Op::Mean, &[a], vec![], vec![s], vec![]))
    }

    /// Mean cross-entropy of `[N, C]` logits against `N` class labels.
    pub fn cross_entropy(&mut self, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
        self.check(logits)?;
        if logits.rank() != 2 || logits.shape[0] != labels.len() {
            return Err(Error::Attr {
                op: "cross_entropy",
                msg: format!("{} labels for logits {:?}", labels.len(), logits.shape),
            });
        }
        let c = logits.shape[1];
        if let Some(bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Attr {
                op: "cross_entropy",
                msg: format!("label {bad} out of range for {c} classes"),
            });
        }
        let x = self.value(logits);
        let probs = kernels::softmax_rows(x, c);
        let n = T::from_f64(labels.len() as f64);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let row = &x[i * c..(i + 1) * c];
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
                lse - row[l]
            })
            .sum::<T>()
            / n;
        let labels: Arc<[usize]> = labels.into();
        Ok(self.record(
            Op::CrossEntropy { labels },
            &[logits],
            vec![],
            vec![loss],
            vec![probs],
        ))
    }
}
