//! Synthetic sensor pipeline: renders clean scenes, mosaics them into
//! raw counts, and produces short-exposure bursts by attenuating the
//! signal and adding shot and read noise before requantisation.
//!
//! Everything is driven by explicit seeds through a counter-based RNG,
//! so identical inputs reproduce identical bursts on any platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::raw::{RawFrame, RgbImage};

/// Noise model for the darkened exposures. Shot variance is the
/// incident signal divided by `shot_gain`; read noise is additive
/// Gaussian with deviation `read_sigma`, both in normalised units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseParams {
    pub shot_gain: f64,
    pub read_sigma: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        NoiseParams {
            shot_gain: 200.0,
            read_sigma: 0.002,
        }
    }
}

/// Sensor calibration and the reference (long) exposure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SensorConfig {
    pub black_level: u16,
    pub white_level: u16,
    pub exposure_num: u32,
    pub exposure_den: u32,
}

impl Default for SensorConfig {
    fn default() -> Self {
        SensorConfig {
            black_level: 64,
            white_level: 1087,
            exposure_num: 10,
            exposure_den: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    /// Linear ramps per channel; always touches exact 0 and exact 1.
    Gradients,
    /// Random rectangles and discs over a flat background.
    Shapes,
    /// Sums of low-frequency sinusoids, kept strictly interior.
    Texture,
}

/// Stable per-purpose seed derivation: mixes a master seed, a purpose
/// tag and an index through the splitmix64 finaliser.
pub fn derive_seed(master: u64, tag: u64, index: u64) -> u64 {
    let mut z = master
        ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn synth_scene(kind: SceneKind, width: usize, height: usize, seed: u64) -> Result<RgbImage> {
    if width < 2 || height < 2 {
        return Err(Error::config(format!(
            "scene extents too small: {width}x{height}"
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut img = RgbImage::zeros(width, height);
    let plane = width * height;
    match kind {
        SceneKind::Gradients => {
            for c in 0..3 {
                let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let (dx, dy) = (angle.cos(), angle.sin());
                let raw: Vec<f64> = (0..plane)
                    .map(|i| dx * (i % width) as f64 + dy * (i / width) as f64)
                    .collect();
                normalise_to(&raw, 0.0, 1.0, &mut img.data[c * plane..(c + 1) * plane]);
            }
        }
        SceneKind::Shapes => {
            let background: [f64; 3] = [rng.random(), rng.random(), rng.random()];
            for c in 0..3 {
                img.data[c * plane..(c + 1) * plane].fill(background[c]);
            }
            let count = rng.random_range(4..9);
            for _ in 0..count {
                let colour: [f64; 3] = [rng.random(), rng.random(), rng.random()];
                if rng.random::<bool>() {
                    let x0 = rng.random_range(0..width);
                    let y0 = rng.random_range(0..height);
                    let x1 = rng.random_range(x0..width.min(x0 + width / 2) + 1);
                    let y1 = rng.random_range(y0..height.min(y0 + height / 2) + 1);
                    for y in y0..y1.min(height) {
                        for x in x0..x1.min(width) {
                            for c in 0..3 {
                                img.data[c * plane + y * width + x] = colour[c];
                            }
                        }
                    }
                } else {
                    let cx = rng.random_range(0..width) as f64;
                    let cy = rng.random_range(0..height) as f64;
                    let r = rng.random_range(2.0..(width.min(height) as f64 / 3.0).max(2.5));
                    for y in 0..height {
                        for x in 0..width {
                            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                            if d2 <= r * r {
                                for c in 0..3 {
                                    img.data[c * plane + y * width + x] = colour[c];
                                }
                            }
                        }
                    }
                }
            }
        }
        SceneKind::Texture => {
            for c in 0..3 {
                let mut raw = vec![0.0; plane];
                for _ in 0..4 {
                    let fx: f64 = rng.random_range(1.0..4.0);
                    let fy: f64 = rng.random_range(1.0..4.0);
                    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    let amp: f64 = rng.random_range(0.5..1.0);
                    for (i, v) in raw.iter_mut().enumerate() {
                        let x = (i % width) as f64 / width as f64;
                        let y = (i / width) as f64 / height as f64;
                        *v += amp
                            * (std::f64::consts::TAU * (fx * x + fy * y) + phase).sin();
                    }
                }
                normalise_to(&raw, 0.05, 0.95, &mut img.data[c * plane..(c + 1) * plane]);
            }
        }
    }
    Ok(img)
}

/// Affine map of `src` onto `[lo, hi]`; a constant input maps to the
/// interval midpoint.
fn normalise_to(src: &[f64], lo: f64, hi: f64, dst: &mut [f64]) {
    let min = src.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        dst.fill(0.5 * (lo + hi));
        return;
    }
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = lo + (hi - lo) * ((s - min) / (max - min));
    }
}

/// Samples the scene through an RGGB colour filter at the reference
/// exposure. Counts round half away from zero.
pub fn mosaic(scene: &RgbImage, sensor: &SensorConfig) -> Result<RawFrame> {
    let span = (sensor.white_level - sensor.black_level) as f64;
    let mut values = Vec::with_capacity(scene.width * scene.height);
    let plane = scene.width * scene.height;
    for y in 0..scene.height {
        for x in 0..scene.width {
            let channel = match (y % 2, x % 2) {
                (0, 0) => 0,
                (1, 1) => 2,
                _ => 1,
            };
            let v = scene.data[channel * plane + y * scene.width + x].clamp(0.0, 1.0);
            let count = (sensor.black_level as f64 + v * span).round();
            values.push(count.clamp(0.0, 65535.0) as u16);
        }
    }
    RawFrame::new(
        scene.width,
        scene.height,
        values,
        sensor.black_level,
        sensor.white_level,
        sensor.exposure_num,
        sensor.exposure_den,
    )
}

/// Simulates a short exposure: attenuates the normalised signal by
/// `ratio`, adds shot and read noise, requantises. The frame's
/// exposure shrinks by the same factor, kept as an exact rational.
pub fn darken(frame: &RawFrame, ratio: u32, noise: &NoiseParams, seed: u64) -> Result<RawFrame> {
    if ratio == 0 {
        return Err(Error::config("attenuation ratio must be positive"));
    }
    if !(noise.shot_gain > 0.0) || noise.read_sigma < 0.0 {
        return Err(Error::config(format!(
            "bad noise parameters: shot_gain {} read_sigma {}",
            noise.shot_gain, noise.read_sigma
        )));
    }
    let den = frame
        .exposure_den
        .checked_mul(ratio)
        .ok_or_else(|| Error::config("attenuated exposure denominator overflows"))?;
    let g = gcd(frame.exposure_num, den);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let span = (frame.white_level - frame.black_level) as f64;
    let black = frame.black_level as f64;
    let values = frame
        .values
        .iter()
        .map(|&count| {
            let signal = (count as f64 - black) / span;
            let dark = signal / ratio as f64;
            let shot_sigma = (dark.max(0.0) / noise.shot_gain).sqrt();
            let z_shot: f64 = rng.sample(StandardNormal);
            let z_read: f64 = rng.sample(StandardNormal);
            let noisy = dark + z_shot * shot_sigma + z_read * noise.read_sigma;
            (black + noisy * span).round().clamp(0.0, 65535.0) as u16
        })
        .collect();
    RawFrame::new(
        frame.width,
        frame.height,
        values,
        frame.black_level,
        frame.white_level,
        frame.exposure_num / g,
        den / g,
    )
}

fn gcd(a: u32, b: u32) -> u32 {
    let (mut a, mut b) = (a, b);
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Integer translation with edge replication; positive `dx` moves
/// content right.
pub fn translate_replicate(img: &RgbImage, dx: i64, dy: i64) -> RgbImage {
    let mut out = RgbImage::zeros(img.width, img.height);
    let plane = img.width * img.height;
    for c in 0..3 {
        for y in 0..img.height {
            let sy = (y as i64 - dy).clamp(0, img.height as i64 - 1) as usize;
            for x in 0..img.width {
                let sx = (x as i64 - dx).clamp(0, img.width as i64 - 1) as usize;
                out.data[c * plane + y * img.width + x] =
                    img.data[c * plane + sy * img.width + sx];
            }
        }
    }
    out
}

/// Burst of darkened frames with the shifts that were applied. Frame 0
/// is the unshifted reference; later frames jitter by up to
/// `max_shift` pixels per axis.
pub fn make_burst_with(
    scene: &RgbImage,
    sensor: &SensorConfig,
    noise: &NoiseParams,
    ratio: u32,
    frames: usize,
    max_shift: i64,
    seed: u64,
) -> Result<(Vec<RawFrame>, Vec<(i64, i64)>)> {
    if frames == 0 {
        return Err(Error::config("a burst needs at least one frame"));
    }
    if max_shift < 0 {
        return Err(Error::config("max_shift must be non-negative"));
    }
    let mut burst = Vec::with_capacity(frames);
    let mut shifts = Vec::with_capacity(frames);
    for k in 0..frames {
        let (dx, dy) = if k == 0 || max_shift == 0 {
            (0, 0)
        } else {
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 2, k as u64));
            (
                rng.random_range(-max_shift..=max_shift),
                rng.random_range(-max_shift..=max_shift),
            )
        };
        let view = if (dx, dy) == (0, 0) {
            scene.clone()
        } else {
            translate_replicate(scene, dx, dy)
        };
        let clean = mosaic(&view, sensor)?;
        burst.push(darken(&clean, ratio, noise, derive_seed(seed, 1, k as u64))?);
        shifts.push((dx, dy));
    }
    Ok((burst, shifts))
}

pub fn make_burst(
    scene: &RgbImage,
    sensor: &SensorConfig,
    noise: &NoiseParams,
    ratio: u32,
    frames: usize,
    max_shift: i64,
    seed: u64,
) -> Result<Vec<RawFrame>> {
    make_burst_with(scene, sensor, noise, ratio, frames, max_shift, seed).map(|(b, _)| b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_scene(level: f64) -> RgbImage {
        RgbImage::new(8, 8, vec![level; 192]).unwrap()
    }

    #[test]
    fn mosaic_rounds_half_away_from_zero() {
        // 0.5 of the default 1023-count span lands exactly on 575.5.
        let frame = mosaic(&flat_scene(0.5), &SensorConfig::default()).unwrap();
        assert!(frame.values.iter().all(|&v| v == 576));
    }

    #[test]
    fn mosaic_samples_rggb_positions() {
        let mut scene = RgbImage::zeros(4, 4);
        let plane = 16;
        scene.data[..plane].fill(1.0); // red
        scene.data[plane..2 * plane].fill(0.5); // green
        scene.data[2 * plane..].fill(0.25); // blue
        let sensor = SensorConfig {
            black_level: 0,
            white_level: 1024,
            ..SensorConfig::default()
        };
        let frame = mosaic(&scene, &sensor).unwrap();
        assert_eq!(&frame.values[..4], &[1024, 512, 1024, 512]);
        assert_eq!(&frame.values[4..8], &[512, 256, 512, 256]);
    }

    #[test]
    fn darkening_reduces_exposure_as_exact_rational() {
        let clean = mosaic(&flat_scene(0.5), &SensorConfig::default()).unwrap();
        let quiet = NoiseParams {
            shot_gain: 1e12,
            read_sigma: 0.0,
        };
        for (ratio, num, den) in [(100u32, 1u32, 10u32), (250, 1, 25), (300, 1, 30)] {
            let dark = darken(&clean, ratio, &quiet, 9).unwrap();
            assert_eq!((dark.exposure_num, dark.exposure_den), (num, den));
        }
        assert!(darken(&clean, 0, &quiet, 9).is_err());
    }

    #[test]
    fn darkening_is_deterministic_and_seed_sensitive() {
        let clean = mosaic(&flat_scene(0.7), &SensorConfig::default()).unwrap();
        let noise = NoiseParams::default();
        let a = darken(&clean, 100, &noise, 42).unwrap();
        let b = darken(&clean, 100, &noise, 42).unwrap();
        let c = darken(&clean, 100, &noise, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn noise_variance_tracks_the_model() {
        // One mid-grey pixel darkened many times; the sample variance
        // of the normalised counts should match shot + read variance.
        let sensor = SensorConfig::default();
        let clean = mosaic(&flat_scene(0.5), &sensor).unwrap();
        let noise = NoiseParams::default();
        let span = (sensor.white_level - sensor.black_level) as f64;
        let stored = (clean.values[0] as f64 - sensor.black_level as f64) / span;
        let want = stored / noise.shot_gain + noise.read_sigma * noise.read_sigma;
        let trials = 10_000;
        let mut samples = Vec::with_capacity(trials);
        for t in 0..trials {
            let dark = darken(&clean, 1, &noise, derive_seed(7, 4, t as u64)).unwrap();
            samples.push((dark.values[0] as f64 - sensor.black_level as f64) / span);
        }
        let mean = samples.iter().sum::<f64>() / trials as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>()
            / (trials - 1) as f64;
        assert!(
            (var - want).abs() / want < 0.05,
            "sample {var:.6} vs model {want:.6}"
        );
    }

    #[test]
    fn frame_averaging_beats_single_frames() {
        let sensor = SensorConfig::default();
        let noise = NoiseParams::default();
        let scene = synth_scene(SceneKind::Texture, 16, 16, 5).unwrap();
        let clean = mosaic(&scene, &sensor).unwrap();
        let span = (sensor.white_level - sensor.black_level) as f64;
        let ratio = 100u32;
        let target: Vec<f64> = clean
            .values
            .iter()
            .map(|&v| (v as f64 - sensor.black_level as f64) / span / ratio as f64)
            .collect();
        let mse = |values: &[f64]| -> f64 {
            values
                .iter()
                .zip(&target)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / values.len() as f64
        };
        let mut wins = 0;
        for s in 0..20u64 {
            let frames: Vec<Vec<f64>> = (0..8)
                .map(|k| {
                    let d = darken(&clean, ratio, &noise, derive_seed(s, 5, k)).unwrap();
                    d.values
                        .iter()
                        .map(|&v| (v as f64 - sensor.black_level as f64) / span)
                        .collect()
                })
                .collect();
            let mut avg = vec![0.0; target.len()];
            for f in &frames {
                for (a, v) in avg.iter_mut().zip(f) {
                    *a += v / 8.0;
                }
            }
            if mse(&avg) < mse(&frames[0]) {
                wins += 1;
            }
        }
        assert!(wins >= 18, "averaging won only {wins}/20 rounds");
    }

    #[test]
    fn scenes_are_deterministic_and_cover_their_ranges() {
        for kind in [SceneKind::Gradients, SceneKind::Shapes, SceneKind::Texture] {
            let a = synth_scene(kind, 16, 12, 3).unwrap();
            let b = synth_scene(kind, 16, 12, 3).unwrap();
            assert_eq!(a, b);
            let c = synth_scene(kind, 16, 12, 4).unwrap();
            assert_ne!(a.data, c.data, "{kind:?} ignores its seed");
            assert!(a.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        let g = synth_scene(SceneKind::Gradients, 16, 12, 3).unwrap();
        for c in 0..3 {
            let plane = g.plane(c);
            assert!(plane.contains(&0.0) && plane.contains(&1.0));
        }
        let t = synth_scene(SceneKind::Texture, 16, 12, 3).unwrap();
        assert!(t.data.iter().all(|&v| (0.05..=0.95).contains(&v)));
    }

    #[test]
    fn translation_replicates_edges() {
        let img = RgbImage::new(
            2,
            2,
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0],
        )
        .unwrap();
        let right = translate_replicate(&img, 1, 0);
        assert_eq!(&right.data[..4], &[1.0, 1.0, 3.0, 3.0]);
        let down = translate_replicate(&img, 0, 1);
        assert_eq!(&down.data[..4], &[1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn bursts_keep_frame_zero_unshifted() {
        let scene = synth_scene(SceneKind::Shapes, 16, 16, 11).unwrap();
        let sensor = SensorConfig::default();
        let quiet = NoiseParams {
            shot_gain: 1e12,
            read_sigma: 0.0,
        };
        let (burst, shifts) =
            make_burst_with(&scene, &sensor, &quiet, 1, 4, 2, 77).unwrap();
        assert_eq!(shifts[0], (0, 0));
        let clean = mosaic(&scene, &sensor).unwrap();
        assert_eq!(burst[0].values, clean.values);
        for (k, &(dx, dy)) in shifts.iter().enumerate().skip(1) {
            let expect = mosaic(&translate_replicate(&scene, dx, dy), &sensor).unwrap();
            assert_eq!(burst[k].values, expect.values, "frame {k} shift ({dx},{dy})");
        }
        assert!(shifts.iter().skip(1).any(|&s| s != (0, 0)));
        let again = make_burst(&scene, &sensor, &quiet, 1, 4, 2, 77).unwrap();
        assert_eq!(again, burst);
    }
}
