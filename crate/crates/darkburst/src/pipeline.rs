//! Composition of the full enhancement path: packed raw frames in,
//! RGB predictions out, with optional motion masking between.
//!
//! Training and inference share these helpers so the two paths cannot
//! drift apart. Inference callers pass fully frozen parameters, which
//! keeps every op untracked and allocation-light.

use std::time::Instant;

use crate::config::MotionSection;
use crate::error::{Error, Result};
use crate::motion::{estimate_flow, large_motion_mask, mask_large_motion};
use crate::nets::{build_fine_input, coarse_forward, set_forward, NetParams};
use crate::raw::{coarse_raw_to_rgb, pack_bayer, PackedRaw, RawFrame, RgbImage};
use crate::sim::{mosaic, SensorConfig};
use crate::tensor::Tensor;

/// Seconds spent in each stage of a burst enhancement.
#[derive(Debug, Clone, Copy, Default)]
pub struct StageTimings {
    pub coarse: f64,
    pub motion: f64,
    pub fusion: f64,
}

impl StageTimings {
    pub fn total(&self) -> f64 {
        self.coarse + self.motion + self.fusion
    }
}

#[derive(Debug)]
pub struct BurstOutcome {
    pub output: Tensor,
    /// Frames that reached the fusion network.
    pub kept: usize,
    /// Non-reference frames discarded because masking zeroed them
    /// entirely.
    pub dropped: usize,
    pub timings: StageTimings,
}

/// Amplifies and packs one raw frame.
pub fn amplified_packed(frame: &RawFrame, ratio: f64) -> Result<PackedRaw> {
    pack_bayer(frame, ratio)
}

/// Packed data as a network input tensor; amplification can push
/// values past 1, so they are clipped into the unit range here.
pub fn packed_tensor(packed: &PackedRaw) -> Result<Tensor> {
    let data: Vec<f64> = packed.data.iter().map(|&v| v.clamp(0.0, 1.0)).collect();
    Tensor::constant(&[1, 4, packed.height, packed.width], data)
}

pub fn rgb_tensor(img: &RgbImage) -> Result<Tensor> {
    Tensor::constant(&[1, 3, img.height, img.width], img.data.clone())
}

pub fn tensor_rgb(t: &Tensor) -> Result<RgbImage> {
    let (n, c, h, w) = t.dims4()?;
    if n != 1 || c != 3 {
        return Err(Error::shape(format!(
            "expected a [1,3,h,w] prediction, got {:?}",
            t.shape()
        )));
    }
    RgbImage::new(w, h, t.data().to_vec())
}

/// The no-network comparison image: amplified packed input naively
/// demosaiced and upsampled back to mosaic resolution.
pub fn input_baseline_rgb(packed: &PackedRaw) -> Result<RgbImage> {
    let clipped: Vec<f64> = packed.data.iter().map(|&v| v.clamp(0.0, 1.0)).collect();
    let half = coarse_raw_to_rgb(&clipped, packed.width, packed.height)?;
    Ok(half.upsample_double())
}

/// Packed-domain target for the coarse stage: the ground truth pushed
/// through a noise-free sensor at unit gain.
pub fn clean_packed_target(gt: &RgbImage, sensor: &SensorConfig) -> Result<Tensor> {
    let clean = mosaic(gt, sensor)?;
    let packed = pack_bayer(&clean, 1.0)?;
    packed_tensor(&packed)
}

/// Half-resolution view the coarse network consumes.
pub fn coarse_low_input(x: &Tensor) -> Result<Tensor> {
    x.bilinear_resize(0.5)
}

/// Single-frame path: coarse prediction and the fine RGB output.
pub fn single_forward(params: &NetParams, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let xc = coarse_forward(params, &coarse_low_input(x)?)?;
    let t = build_fine_input(x, &xc)?;
    let y = crate::nets::fine_forward(params, &t)?;
    Ok((xc, y))
}

/// Burst path: per-frame coarse guidance, optional motion masking
/// against the first frame, then set fusion. Fully masked frames are
/// dropped so a burst that disagrees everywhere degenerates exactly
/// to the reference frame alone; the reference itself is never
/// dropped.
pub fn burst_forward(
    params: &NetParams,
    xs: &[Tensor],
    motion: Option<&MotionSection>,
) -> Result<BurstOutcome> {
    if xs.is_empty() {
        return Err(Error::config("a burst needs at least one frame"));
    }
    let mut timings = StageTimings::default();

    let started = Instant::now();
    let mut coarse_outs = Vec::with_capacity(xs.len());
    for x in xs {
        coarse_outs.push(coarse_forward(params, &coarse_low_input(x)?)?);
    }
    let mut ts = Vec::with_capacity(xs.len());
    for (x, xc) in xs.iter().zip(coarse_outs.iter()) {
        ts.push(build_fine_input(x, xc)?);
    }
    timings.coarse = started.elapsed().as_secs_f64();

    let mut kept = vec![ts[0].clone()];
    let mut dropped = 0;
    let masking = motion.filter(|m| m.enabled && xs.len() > 1);
    if let Some(m) = masking {
        let started = Instant::now();
        let reference = coarse_rgb(&coarse_outs[0])?;
        for (xc, t) in coarse_outs[1..].iter().zip(ts[1..].iter()) {
            let rgb = coarse_rgb(xc)?;
            let flow = estimate_flow(&reference, &rgb, m.block, m.search_radius)?
                .upscale(2);
            let flags = large_motion_mask(&flow, m.threshold);
            if flags.iter().all(|&f| f) {
                dropped += 1;
                continue;
            }
            kept.push(mask_large_motion(t, &flow, m.threshold)?);
        }
        timings.motion = started.elapsed().as_secs_f64();
    } else {
        kept.extend(ts[1..].iter().cloned());
    }

    let started = Instant::now();
    let output = set_forward(params, &kept)?;
    timings.fusion = started.elapsed().as_secs_f64();
    Ok(BurstOutcome { output, kept: kept.len(), dropped, timings })
}

fn coarse_rgb(xc: &Tensor) -> Result<RgbImage> {
    let (_, _, h, w) = xc.dims4()?;
    coarse_raw_to_rgb(xc.data(), w, h)
}
