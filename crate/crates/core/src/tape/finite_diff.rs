//! Central-difference gradients, the reference the tape's backward pass is
//! checked against. Always evaluated in 64-bit.

use crate::error::{Error, Result};

/// Magnitude below which the relative error falls back to an absolute one.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct FiniteDiffOptions {
    pub eps: f64,
    /// Evaluate the unperturbed point twice and fail on any difference.
    pub check_determinism: bool,
}

impl Default for FiniteDiffOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            check_determinism: true,
        }
    }
}

/// Central differences `(f(θ+ε) − f(θ−ε)) / 2ε` for the listed
/// `(tensor, element)` coordinates of `params`. Every coordinate is restored
/// bit-exactly after use.
pub fn finite_diff_grad<F>(
    mut f: F,
    params: &mut [Vec<f64>],
    coords: &[(usize, usize)],
    opts: FiniteDiffOptions,
) -> Result<Vec<f64>>
where
    F: FnMut(&[Vec<f64>]) -> Result<f64>,
{
    if !(opts.eps > 0.0) {
        return Err(Error::Config(format!("eps must be positive, got {}", opts.eps)));
    }
    if opts.check_determinism {
        let first = f(params)?;
        let second = f(params)?;
        if first.to_bits() != second.to_bits() {
            return Err(Error::NonDeterministic { first, second });
        }
    }
    let mut out = Vec::with_capacity(coords.len());
    for &(t, i) in coords {
        let orig = params[t][i];
        params[t][i] = orig + opts.eps;
        let plus = f(params);
        params[t][i] = orig - opts.eps;
        let minus = f(params);
        params[t][i] = orig;
        out.push((plus? - minus?) / (2.0 * opts.eps));
    }
    Ok(out)
}

/// Every coordinate of every tensor, in order.
pub fn all_coords(params: &[Vec<f64>]) -> Vec<(usize, usize)> {
    params
        .iter()
        .enumerate()
        .flat_map(|(t, p)| (0..p.len()).map(move |i| (t, i)))
        .collect()
}

/// `|a − b| / max(|a|, |b|, REL_ERR_FLOOR)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| relative_error(x, y))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::kernels::gelu;

    #[test]
    fn quadratic() {
        let mut p = vec![vec![3.0]];
        let g = finite_diff_grad(|p| Ok(p[0][0] * p[0][0]), &mut p, &[(0, 0)], Default::default())
            .unwrap();
        assert!((g[0] - 6.0).abs() < 1e-7);
        assert_eq!(p[0][0], 3.0);
    }

    #[test]
    fn gelu_slope_at_zero() {
        let mut p = vec![vec![0.0]];
        let g = finite_diff_grad(|p| Ok(gelu(p[0][0])), &mut p, &[(0, 0)], Default::default())
            .unwrap();
        assert!((g[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn detects_nondeterminism() {
        let mut calls = 0.0;
        let mut p = vec![vec![1.0]];
        let err = finite_diff_grad(
            |p| {
                calls += 1.0;
                Ok(p[0][0] + calls)
            },
            &mut p,
            &[(0, 0)],
            Default::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }

    #[test]
    fn rejects_nonpositive_eps() {
        let mut p = vec![vec![1.0]];
        let opts = FiniteDiffOptions {
            eps: 0.0,
            check_determinism: false,
        };
        assert!(finite_diff_grad(|p| Ok(p[0][0]), &mut p, &[(0, 0)], opts).is_err());
    }

    #[test]
    fn floor_keeps_tiny_gradients_comparable() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!(relative_error(1e-12, 2e-12) < 1e-5);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }
}
