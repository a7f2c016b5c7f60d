//! Shared helpers for the tensor test suites.
//!
//! Finite-difference checks are only meaningful away from the kinks of
//! piecewise ops (relu corners, clamp edges, pool argmax ties), so random
//! probe tensors are drawn from a shuffled linspace whose spacing keeps
//! every value a fixed margin from its neighbours and from the kinks.

use super::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// `count` distinct values spread evenly over `[lo, hi]`, shuffled with a
/// fixed seed. Distinctness keeps pool and set maxima unambiguous; the
/// even spacing keeps values away from 0 when the range excludes it.
pub(crate) fn spread_values(seed: u64, count: usize, lo: f64, hi: f64) -> Vec<f64> {
    assert!(count > 0 && hi > lo);
    let mut vals: Vec<f64> = (0..count)
        .map(|i| lo + (hi - lo) * (i as f64 + 0.5) / count as f64)
        .collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    vals.shuffle(&mut rng);
    vals
}

/// Variable tensor filled by [`spread_values`].
pub(crate) fn spread_tensor(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let count = shape.iter().product();
    Tensor::variable(shape, spread_values(seed, count, lo, hi)).unwrap()
}
