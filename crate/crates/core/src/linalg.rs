//! Small dense linear-algebra helpers.

use ndarray::{Array1, Array2, ArrayView2};

/// Result of a power-iteration spectral-norm estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralNorm {
    pub value: f64,
    pub iterations: usize,
    /// False when the iteration cap was hit before the relative change
    /// dropped below tolerance; `value` is then the Frobenius norm, which is
    /// always an upper bound.
    pub converged: bool,
}

const MAX_ITERS: usize = 20_000;
const REL_TOL: f64 = 1e-13;

/// Largest singular value by power iteration on `MᵀM`.
///
/// The start vector is a fixed irrational-phase sequence so the result is
/// deterministic and generically not orthogonal to the top singular vector.
pub fn spectral_norm(m: ArrayView2<'_, f64>) -> SpectralNorm {
    let cols = m.ncols();
    if m.is_empty() || m.iter().all(|&v| v == 0.0) {
        return SpectralNorm {
            value: 0.0,
            iterations: 0,
            converged: true,
        };
    }
    let mut v = Array1::from_shape_fn(cols, |k| 1.0 + 0.5 * ((k as f64 + 1.0) * 0.618_033_988_75).fract());
    v /= v.dot(&v).sqrt();

    let mut sigma = 0.0_f64;
    for it in 1..=MAX_ITERS {
        let mv = m.dot(&v);
        let mut w = m.t().dot(&mv);
        let norm_w = w.dot(&w).sqrt();
        if norm_w == 0.0 {
            // start vector in the null space; restart from a basis vector
            v.fill(0.0);
            v[it % cols] = 1.0;
            continue;
        }
        let next = mv.dot(&mv).sqrt();
        w /= norm_w;
        v = w;
        if (next - sigma).abs() <= REL_TOL * next && it > 2 {
            // Rayleigh quotient on the refined vector
            let value = m.dot(&v).dot(&m.dot(&v)).sqrt().max(next);
            return SpectralNorm {
                value,
                iterations: it,
                converged: true,
            };
        }
        sigma = next;
    }
    tracing::warn!("spectral norm did not converge; falling back to the Frobenius bound");
    SpectralNorm {
        value: frobenius(m),
        iterations: MAX_ITERS,
        converged: false,
    }
}

pub fn frobenius(m: ArrayView2<'_, f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Scales `m` in place so that its spectral norm does not exceed `ceiling`.
pub fn cap_spectral_norm(m: &mut Array2<f64>, ceiling: f64) {
    let s = spectral_norm(m.view()).value;
    if s > ceiling {
        *m *= ceiling / s;
    }
}

pub fn euclidean(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
