//! Finite-difference verification of analytic gradients.

use super::{backward, Tensor};
use crate::error::Result;

/// Compares the analytic gradient of `f` at `x` against central finite
/// differences and returns the worst relative error over all
/// coordinates:
///
/// ```text
/// rel_i = |analytic_i - central_i| / max(|analytic_i|, |central_i|, 1e-8)
/// ```
///
/// The floor in the denominator keeps coordinates where both values
/// are essentially zero from reporting spurious failures; they surface
/// as small errors instead of being thrown out. `f` must reduce to a
/// single-element tensor. Evaluations run entirely in f64, so a step
/// of about 1e-3 keeps both truncation and cancellation error well
/// below typical thresholds (1e-4 for primitive ops).
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    grad_check_multi(f, x, &[step])
}

/// Like [`grad_check`], but each coordinate is probed at every step
/// size and keeps the best agreement. Deep compositions need this:
/// coordinates behind a saturating gate want a small step (truncation
/// grows with curvature), while coordinates with near-zero gradients
/// want a large one (f64 cancellation in the difference quotient is
/// divided by the step). No single step serves both, but for a
/// correct gradient every coordinate agrees at one of a few scales.
pub fn grad_check_multi<F>(f: F, x: &Tensor, steps: &[f64]) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let probe = Tensor::variable(x.shape(), x.data().to_vec())?;
    let loss = f(&probe)?;
    let grads = backward(&loss)?;
    let analytic = grads.grad(&probe);

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let a = analytic.data()[i];
        let mut best = f64::INFINITY;
        for &step in steps {
            let mut plus = x.data().to_vec();
            plus[i] += step;
            let mut minus = x.data().to_vec();
            minus[i] -= step;
            let f_plus = f(&Tensor::constant(x.shape(), plus)?)?.item()?;
            let f_minus = f(&Tensor::constant(x.shape(), minus)?)?.item()?;
            let central = (f_plus - f_minus) / (2.0 * step);
            let rel = (a - central).abs() / a.abs().max(central.abs()).max(1e-8);
            if rel < best {
                best = rel;
            }
        }
        if best > worst {
            worst = best;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_objective_checks_tightly() {
        // Central differences are exact for quadratics, so the only
        // error left is floating-point roundoff.
        let x = Tensor::constant(&[4], vec![0.3, -1.2, 2.0, 0.9]).unwrap();
        let worst = grad_check(|p| p.mul(p).map(|y| y.sum()), &x, 1e-3).unwrap();
        assert!(worst < 1e-9, "{worst}");
    }

    #[test]
    fn reports_relative_error_scale() {
        // sum() has unit gradients everywhere; any probe passes.
        let x = Tensor::constant(&[3], vec![100.0, -250.0, 0.001]).unwrap();
        let worst = grad_check(|p| Ok(p.sum()), &x, 1e-3).unwrap();
        assert!(worst < 1e-9, "{worst}");
    }
}
