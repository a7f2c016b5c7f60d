//! Fixed random convolutional features for perceptual comparisons.
//!
//! The extractor is a small frozen pyramid: randomly initialised
//! convolutions that are never trained. Random features preserve
//! enough structure to compare images (their responses separate
//! distinct patches while staying stable under small noise), and a
//! seeded build keeps every run identical without external weight
//! files. Downsampling between levels is a 2x2 average rather than a
//! max so that losses built on these features stay smooth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Channel widths per level; the input is RGB.
const WIDTHS: [usize; 4] = [16, 32, 32, 32];
const SLOPE: f64 = 0.2;

pub struct FeatureExtractor {
    /// One (kernel, bias) pair per pyramid level, held as constants
    /// so no gradients ever reach them.
    layers: Vec<(Tensor, Tensor)>,
}

impl FeatureExtractor {
    /// Builds the frozen pyramid from a seed at full depth. Weights
    /// use a fan-in-scaled normal draw, biases are zero.
    pub fn new(seed: u64) -> FeatureExtractor {
        Self::with_levels(seed, WIDTHS.len()).expect("full depth is always valid")
    }

    /// Builds a pyramid truncated to `levels` stages. Shallower
    /// pyramids share their weights with deeper ones from the same
    /// seed because the draw order per level is fixed.
    pub fn with_levels(seed: u64, levels: usize) -> Result<FeatureExtractor> {
        if levels == 0 || levels > WIDTHS.len() {
            return Err(Error::config(format!(
                "feature pyramid depth must be between 1 and {}, got {levels}",
                WIDTHS.len()
            )));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(levels);
        let mut c_in = 3;
        for &c_out in &WIDTHS[..levels] {
            let fan_in = (c_in * 9) as f64;
            let std = (2.0 / fan_in).sqrt();
            let data: Vec<f64> = (0..c_out * c_in * 9)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    z * std
                })
                .collect();
            let kernel = Tensor::constant(&[c_out, c_in, 3, 3], data).unwrap();
            let bias = Tensor::zeros(&[c_out]).unwrap();
            layers.push((kernel, bias));
            c_in = c_out;
        }
        Ok(FeatureExtractor { layers })
    }

    /// Feature maps from shallow to deep. Level 0 keeps the input
    /// resolution; each further level halves it. Input extents must
    /// stay even deep enough for the halvings to apply.
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let (_, c, _, _) = x.dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("feature input must be RGB, got {c} channels")));
        }
        let mut maps = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for (i, (kernel, bias)) in self.layers.iter().enumerate() {
            if i > 0 {
                cur = cur.bilinear_resize(0.5)?;
            }
            cur = cur.conv2d(kernel, bias, 1, 1)?.leaky_relu(SLOPE);
            maps.push(cur.clone());
        }
        Ok(maps)
    }

    pub fn level_count(&self) -> usize {
        self.layers.len()
    }
}

/// Up to `max_count` distinct positions on an `height x width` grid,
/// drawn without replacement with a seeded shuffle. Asking for more
/// positions than exist returns them all, in shuffled order.
pub fn sample_positions(
    height: usize,
    width: usize,
    max_count: usize,
    seed: u64,
) -> Result<Vec<(usize, usize)>> {
    if max_count == 0 {
        return Err(Error::config("position sample budget must be positive"));
    }
    let mut all: Vec<(usize, usize)> = (0..height)
        .flat_map(|y| (0..width).map(move |x| (y, x)))
        .collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    use rand::seq::SliceRandom;
    all.shuffle(&mut rng);
    all.truncate(max_count);
    Ok(all)
}
