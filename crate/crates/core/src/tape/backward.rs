use super::kernels;
use super::{GradMap, Op, Tape, TensorKind, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;

impl<T: Real> Tape<T> {
    /// Propagates `∂loss/∂·` through the marked closure.
    ///
    /// Gradient buffers are allocated only for closure nodes and the VJP of an
    /// edge is evaluated only when its source is in the closure. Returns the
    /// gradients of exactly the trainable parameters in the closure.
    pub fn backward(&mut self, loss: &Tensor) -> Result<GradMap<T>> {
        self.check(loss)?;
        if self.closure != Some(loss.id) {
            return Err(Error::ClosureNotMarked(loss.id.0));
        }
        let root = loss.id.0;
        for (i, n) in self.nodes[..=root].iter().enumerate() {
            if n.needs_grad && n.value.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    node: i,
                    op: n.op.name(),
                });
            }
        }
        let mut grads = GradMap::default();
        for n in &mut self.nodes {
            n.grad_bytes = 0;
        }
        if !self.nodes[root].needs_grad {
            self.backward_done = true;
            return Ok(grads);
        }
        let mut buffers: Vec<Option<Vec<T>>> = vec![None; root + 1];
        buffers[root] = Some(vec![T::one()]);
        for i in (0..=root).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = buffers[i]
                .take()
                .unwrap_or_else(|| vec![T::zero(); self.nodes[i].value.len()]);
            self.nodes[i].grad_bytes = g.len() * T::BYTES;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    node: i,
                    op: self.nodes[i].op.name(),
                });
            }
            let node = &self.nodes[i];
            if node.kind == TensorKind::Parameter {
                if node.trainable {
                    grads.insert(super::NodeId(i), g);
                }
                continue;
            }
            for (k, src) in node.inputs.iter().enumerate() {
                if !self.nodes[src.0].needs_grad {
                    continue;
                }
                let delta = self.vjp(i, k, &g);
                match &mut buffers[src.0] {
                    Some(acc) => {
                        for (a, d) in acc.iter_mut().zip(delta) {
                            *a = *a + d;
                        }
                    }
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        self.backward_done = true;
        Ok(grads)
    }

    /// Vector-Jacobian product of node `i` along its `edge`-th input.
    fn vjp(&self, i: usize, edge: usize, g: &[T]) -> Vec<T> {
        let node = &self.nodes[i];
        let input = |k: usize| &self.nodes[node.inputs[k].0];
        match &node.op {
            Op::Leaf => unreachable!("leaves have no inputs"),
            Op::MatMul { batched: false } => {
                let (a, b) = (input(0), input(1));
                let (k, n) = (b.shape[0], b.shape[1]);
                let rows = a.value.len() / k;
                if edge == 0 {
                    let mut out = vec![T::zero(); a.value.len()];
                    kernels::mm_nt_acc(g, &b.value, &mut out, rows, n, k);
                    out
                } else {
                    let mut out = vec![T::zero(); b.value.len()];
                    kernels::mm_tn_acc(&a.value, g, &mut out, rows, k, n);
                    out
                }
            }
            Op::MatMul { batched: true } => {
                let (a, b) = (input(0), input(1));
                let r = a.shape.len();
                let (m, k, n) = (a.shape[r - 2], a.shape[r - 1], b.shape[r - 1]);
                let batch = a.value.len() / (m * k);
                if edge == 0 {
                    let mut out = vec![T::zero(); a.value.len()];
                    for bi in 0..batch {
                        kernels::mm_nt_acc(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &b.value[bi * k * n..(bi + 1) * k * n],
                            &mut out[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    out
                } else {
                    let mut out = vec![T::zero(); b.value.len()];
                    for bi in 0..batch {
                        kernels::mm_tn_acc(
                            &a.value[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut out[bi * k * n..(bi + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    out
                }
            }
            Op::Add => {
                let len = input(edge).value.len();
                if len == g.len() {
                    g.to_vec()
                } else {
                    let mut out = vec![T::zero(); len];
                    for (j, &gv) in g.iter().enumerate() {
                        out[j % len] = out[j % len] + gv;
                    }
                    out
                }
            }
            Op::Scale(c) => {
                let c = T::from_f64(*c);
                g.iter().map(|&v| v * c).collect()
            }
            Op::ScaleBy => {
                let (x, s) = (input(0), input(1));
                if edge == 0 {
                    let sv = s.value[0];
                    g.iter().map(|&v| v * sv).collect()
                } else {
                    vec![g.iter().zip(&x.value).map(|(&a, &b)| a * b).sum::<T>()]
                }
            }
            Op::Gelu => g
                .iter()
                .zip(&input(0).value)
                .map(|(&gv, &x)| gv * kernels::gelu_grad(x))
                .collect(),
            Op::Softmax => {
                let d = node.shape.last().copied().unwrap_or(1);
                let mut out = vec![T::zero(); g.len()];
                for ((grow, yrow), orow) in g
                    .chunks_exact(d)
                    .zip(node.value.chunks_exact(d))
                    .zip(out.chunks_exact_mut(d))
                {
                    let dot = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>();
                    for ((o, &gv), &y) in orow.iter_mut().zip(grow).zip(yrow) {
                        *o = y * (gv - dot);
                    }
                }
                out
            }
            Op::LayerNorm { affine } => {
                let d = node.shape.last().copied().unwrap_or(1);
                let (xhat, rstd) = (&node.extras[0], &node.extras[1]);
                match edge {
                    0 => {
                        let w = affine.then(|| &input(1).value);
                        let dn = T::from_f64(d as f64);
                        let mut out = vec![T::zero(); g.len()];
                        for r in 0..g.len() / d {
                            let span = r * d..(r + 1) * d;
                            let dxhat: Vec<T> = g[span.clone()]
                                .iter()
                                .enumerate()
                                .map(|(j, &gv)| match w {
                                    Some(w) => gv * w[j],
                                    None => gv,
                                })
                                .collect();
                            let xh = &xhat[span.clone()];
                            let mean_d = dxhat.iter().copied().sum::<T>() / dn;
                            let mean_dx =
                                dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / dn;
                            for (j, o) in out[span].iter_mut().enumerate() {
                                *o = rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                            }
                        }
                        out
                    }
                    1 => {
                        let mut out = vec![T::zero(); d];
                        for (j, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
                            out[j % d] = out[j % d] + gv * h;
                        }
                        out
                    }
                    _ => {
                        let mut out = vec![T::zero(); d];
                        for (j, &gv) in g.iter().enumerate() {
                            out[j % d] = out[j % d] + gv;
                        }
                        out
                    }
                }
            }
            Op::Reshape => g.to_vec(),
            Op::Gather { index, .. } => {
                let mut out = vec![T::zero(); input(0).value.len()];
                for (&src, &gv) in index.iter().zip(g) {
                    out[src] = out[src] + gv;
                }
                out
            }
            Op::Concat { axis } => {
                let axis = *axis;
                let shapes: Vec<&[usize]> =
                    node.inputs.iter().map(|id| self.nodes[id.0].shape.as_slice()).collect();
                let outer: usize = node.shape[..axis].iter().product();
                let inner: usize = node.shape[axis + 1..].iter().product();
                let total = node.shape[axis] * inner;
                let offset: usize = shapes[..edge].iter().map(|s| s[axis] * inner).sum();
                let run = shapes[edge][axis] * inner;
                let mut out = Vec::with_capacity(outer * run);
                for o in 0..outer {
                    out.extend_from_slice(&g[o * total + offset..o * total + offset + run]);
                }
                out
            }
            Op::Sum => vec![g[0]; input(0).value.len()],
            Op::Mean => {
                let len = input(0).value.len();
                vec![g[0] / T::from_f64(len as f64); len]
            }
            Op::CrossEntropy { labels } => {
                let probs = &node.extras[0];
                let c = probs.len() / labels.len();
                let scale = g[0] / T::from_f64(labels.len() as f64);
                let mut out: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    out[r * c + l] = out[r * c + l] - scale;
                }
                out
            }
        }
    }
}
