//! Dense row-major kernels shared by the forward and backward passes.

use crate::real::Real;

/// `out[m, n] += a[m, k] · b[k, n]`
pub(crate) fn mm_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out[m, k] += g[m, n] · b[k, n]ᵀ`
pub(crate) fn mm_nt_acc<T: Real>(g: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc = acc + gv * bv;
            }
            *o = *o + acc;
        }
    }
}

/// `out[k, n] += a[m, k]ᵀ · g[m, n]`
pub(crate) fn mm_tn_acc<T: Real>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o = *o + av * gv;
            }
        }
    }
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GeLU, `x·Φ(x)`.
pub(crate) fn gelu<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * x * (T::one() + (x * T::from_f64(FRAC_1_SQRT_2)).erf())
}

/// `Φ(x) + x·φ(x)`
pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::one() + (x * T::from_f64(FRAC_1_SQRT_2)).erf());
    let pdf = T::from_f64(FRAC_1_SQRT_2PI) * (-(x * x) * half).exp();
    cdf + x * pdf
}

/// Numerically stable softmax of each contiguous row of length `d`.
pub(crate) fn softmax_rows<T: Real>(x: &[T], d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, orow) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            total = total + *o;
        }
        for o in orow.iter_mut() {
            *o = *o / total;
        }
    }
    out
}

/// Row statistics for layer norm: returns `(xhat, rstd)`.
pub(crate) fn layer_norm_stats<T: Real>(x: &[T], d: usize, eps: f64) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let dn = T::from_f64(d as f64);
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    for (r, row) in x.chunks_exact(d).enumerate() {
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let rs = T::one() / (var + T::from_f64(eps)).sqrt();
        rstd[r] = rs;
        for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
    }
    (xhat, rstd)
}

/// Row-major strides of `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Source offsets for `out = x.permute(axes)`; returns `(index, out_shape)`.
pub(crate) fn permute_index(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let n: usize = shape.iter().product();
    let mut index = Vec::with_capacity(n);
    let rank = shape.len();
    let mut counter = vec![0usize; rank];
    for _ in 0..n {
        let mut off = 0;
        for (d, &c) in counter.iter().enumerate() {
            off += c * in_strides[axes[d]];
        }
        index.push(off);
        for d in (0..rank).rev() {
            counter[d] += 1;
            if counter[d] < out_shape[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    (index, out_shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_matches_manual_transpose() {
        // [2,3] -> [3,2]
        let (idx, shape) = permute_index(&[2, 3], &[1, 0]);
        assert_eq!(shape, vec![3, 2]);
        assert_eq!(idx, vec![0, 3, 1, 4, 2, 5]);
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu_grad(0.0f64) - 0.5).abs() < 1e-15);
        // x·Φ(x) at x=1: Φ(1)=0.841344746068543
        assert!((gelu(1.0f64) - 0.841_344_746_068_543).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax_rows(&[1.0f64, 2.0, 3.0, -1.0, 0.0, 1000.0], 3);
        for row in p.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }
}
