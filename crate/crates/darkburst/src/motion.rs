//! Block-matching motion estimation and the masking step that zeroes
//! badly aligned burst pixels before fusion.
//!
//! Flows are estimated between the coarse predictions of two frames,
//! then upscaled to the packed resolution where masking applies. The
//! search is exhaustive over integer displacements, so the field is
//! deterministic: ties prefer the smallest displacement magnitude and
//! then the earliest candidate in row-major scan order.

use crate::error::{Error, Result};
use crate::raw::RgbImage;
use crate::tensor::Tensor;

pub const DEFAULT_BLOCK: usize = 8;
pub const DEFAULT_RADIUS: usize = 4;
pub const DEFAULT_THRESHOLD: f64 = 1.0;

/// Dense per-pixel displacements; every pixel of a block shares the
/// block's best match.
#[derive(Debug, Clone)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
}

impl FlowField {
    pub fn magnitude(&self, x: usize, y: usize) -> f64 {
        let i = y * self.width + x;
        (self.dx[i] * self.dx[i] + self.dy[i] * self.dy[i]).sqrt()
    }

    /// Nearest-neighbour upscale by an integer factor; displacements
    /// are rescaled into the finer pixel grid.
    pub fn upscale(&self, factor: usize) -> FlowField {
        let width = self.width * factor;
        let height = self.height * factor;
        let mut dx = vec![0.0; width * height];
        let mut dy = vec![0.0; width * height];
        for y in 0..height {
            for x in 0..width {
                let src = (y / factor) * self.width + x / factor;
                dx[y * width + x] = self.dx[src] * factor as f64;
                dy[y * width + x] = self.dy[src] * factor as f64;
            }
        }
        FlowField { width, height, dx, dy }
    }
}

/// Estimates per-block integer displacements mapping content of
/// `reference` to where it sits in `target`, by minimising the sum of
/// absolute differences over all three channels. Blocks tile the
/// reference; a candidate is considered only when the displaced block
/// lies fully inside the target, and the null displacement is always
/// valid. Images smaller than the block size fall back to a single
/// block covering everything.
pub fn estimate_flow(
    reference: &RgbImage,
    target: &RgbImage,
    block: usize,
    radius: usize,
) -> Result<FlowField> {
    if reference.width != target.width || reference.height != target.height {
        return Err(Error::shape(format!(
            "flow inputs differ: {}x{} vs {}x{}",
            reference.width, reference.height, target.width, target.height
        )));
    }
    if block == 0 {
        return Err(Error::config("block size must be positive"));
    }
    let (w, h) = (reference.width, reference.height);
    let mut dx = vec![0.0; w * h];
    let mut dy = vec![0.0; w * h];
    let r = radius as isize;

    let mut by = 0;
    while by < h {
        let bh = block.min(h - by);
        let mut bx = 0;
        while bx < w {
            let bw = block.min(w - bx);
            let mut best_sad = f64::INFINITY;
            let mut best = (0isize, 0isize);
            let mut best_mag = 0isize;
            for cy in -r..=r {
                for cx in -r..=r {
                    let ox = bx as isize + cx;
                    let oy = by as isize + cy;
                    if ox < 0 || oy < 0 || ox + bw as isize > w as isize || oy + bh as isize > h as isize {
                        continue;
                    }
                    let sad = block_sad(reference, target, bx, by, ox as usize, oy as usize, bw, bh);
                    let mag = cx * cx + cy * cy;
                    if sad < best_sad || (sad == best_sad && mag < best_mag) {
                        best_sad = sad;
                        best = (cx, cy);
                        best_mag = mag;
                    }
                }
            }
            for y in by..by + bh {
                for x in bx..bx + bw {
                    dx[y * w + x] = best.0 as f64;
                    dy[y * w + x] = best.1 as f64;
                }
            }
            bx += block;
        }
        by += block;
    }
    Ok(FlowField { width: w, height: h, dx, dy })
}

fn block_sad(
    reference: &RgbImage,
    target: &RgbImage,
    bx: usize,
    by: usize,
    ox: usize,
    oy: usize,
    bw: usize,
    bh: usize,
) -> f64 {
    let w = reference.width;
    let mut acc = 0.0;
    for c in 0..3 {
        let rp = reference.plane(c);
        let tp = target.plane(c);
        for y in 0..bh {
            let r_row = (by + y) * w + bx;
            let t_row = (oy + y) * w + ox;
            for x in 0..bw {
                acc += (rp[r_row + x] - tp[t_row + x]).abs();
            }
        }
    }
    acc
}

/// Per-pixel flags marking displacements strictly beyond `threshold`
/// in Euclidean length.
pub fn large_motion_mask(flow: &FlowField, threshold: f64) -> Vec<bool> {
    let mut mask = vec![false; flow.width * flow.height];
    for y in 0..flow.height {
        for x in 0..flow.width {
            mask[y * flow.width + x] = flow.magnitude(x, y) > threshold;
        }
    }
    mask
}

/// Zeroes every channel of `t` wherever the flow moved further than
/// `threshold`. Implemented as a multiply with a 0/1 mask so any
/// gradient through `t` is blocked exactly at masked pixels.
pub fn mask_large_motion(t: &Tensor, flow: &FlowField, threshold: f64) -> Result<Tensor> {
    let (n, c, h, w) = t.dims4()?;
    if flow.width != w || flow.height != h {
        return Err(Error::shape(format!(
            "flow {}x{} does not match tensor {w}x{h}",
            flow.width, flow.height
        )));
    }
    let flags = large_motion_mask(flow, threshold);
    let mut mask = vec![0.0; t.numel()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * h * w;
            for i in 0..h * w {
                mask[off + i] = if flags[i] { 0.0 } else { 1.0 };
            }
        }
    }
    t.mul(&Tensor::constant(t.shape(), mask)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_rgb(seed: u64, width: usize, height: usize) -> RgbImage {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..3 * width * height).map(|_| rng.random::<f64>()).collect();
        RgbImage::new(width, height, data).unwrap()
    }

    /// View of `img` starting at (ox, oy); exact translations without
    /// border effects for shift tests.
    fn crop(img: &RgbImage, ox: usize, oy: usize, w: usize, h: usize) -> RgbImage {
        let mut data = Vec::with_capacity(3 * w * h);
        for c in 0..3 {
            let p = img.plane(c);
            for y in 0..h {
                for x in 0..w {
                    data.push(p[(oy + y) * img.width + ox + x]);
                }
            }
        }
        RgbImage::new(w, h, data).unwrap()
    }

    /// Independent re-derivation of the block search, written as the
    /// plainest possible loops.
    fn reference_flow(rf: &RgbImage, tg: &RgbImage, block: usize, radius: isize) -> (Vec<f64>, Vec<f64>) {
        let (w, h) = (rf.width, rf.height);
        let mut dx = vec![0.0; w * h];
        let mut dy = vec![0.0; w * h];
        for by in (0..h).step_by(block) {
            for bx in (0..w).step_by(block) {
                let bw = block.min(w - bx);
                let bh = block.min(h - by);
                let mut entries: Vec<(f64, i64, isize, isize)> = Vec::new();
                for cy in -radius..=radius {
                    for cx in -radius..=radius {
                        let (ox, oy) = (bx as isize + cx, by as isize + cy);
                        if ox < 0
                            || oy < 0
                            || ox as usize + bw > w
                            || oy as usize + bh > h
                        {
                            continue;
                        }
                        let mut sad = 0.0;
                        for c in 0..3 {
                            for y in 0..bh {
                                for x in 0..bw {
                                    let a = rf.plane(c)[(by + y) * w + bx + x];
                                    let b = tg.plane(c)
                                        [(oy as usize + y) * w + ox as usize + x];
                                    sad += (a - b).abs();
                                }
                            }
                        }
                        entries.push((sad, (cx * cx + cy * cy) as i64, cx, cy));
                    }
                }
                // Stable sort keeps row-major order among full ties.
                entries.sort_by(|a, b| {
                    a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1))
                });
                let best = entries[0];
                for y in by..by + bh {
                    for x in bx..bx + bw {
                        dx[y * w + x] = best.2 as f64;
                        dy[y * w + x] = best.3 as f64;
                    }
                }
            }
        }
        (dx, dy)
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let img = random_rgb(1, 24, 16);
        let flow = estimate_flow(&img, &img, DEFAULT_BLOCK, DEFAULT_RADIUS).unwrap();
        assert!(flow.dx.iter().all(|&v| v == 0.0));
        assert!(flow.dy.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flat_frames_resolve_ties_to_the_null_shift() {
        let a = RgbImage::new(16, 16, vec![0.25; 3 * 256]).unwrap();
        let b = RgbImage::new(16, 16, vec![0.75; 3 * 256]).unwrap();
        let flow = estimate_flow(&a, &b, DEFAULT_BLOCK, DEFAULT_RADIUS).unwrap();
        assert!(flow.dx.iter().all(|&v| v == 0.0));
        assert!(flow.dy.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pure_translation_is_recovered_where_the_search_window_allows() {
        let scene = random_rgb(2, 40, 32);
        let reference = crop(&scene, 6, 6, 24, 16);
        // Target content sits two pixels left and one up relative to
        // the reference crop.
        let target = crop(&scene, 8, 7, 24, 16);
        let flow = estimate_flow(&reference, &target, 8, 4).unwrap();
        // The matching window for the expected shift (-2, -1) is in
        // bounds for every block except the leftmost column and top
        // row of blocks.
        for by in (8..16).step_by(8) {
            for bx in (8..24).step_by(8) {
                let i = by * 24 + bx;
                assert_eq!(flow.dx[i], -2.0, "block at {bx},{by}");
                assert_eq!(flow.dy[i], -1.0, "block at {bx},{by}");
            }
        }
    }

    #[test]
    fn search_matches_the_reference_implementation() {
        for seed in 0..6 {
            let a = random_rgb(100 + seed, 20, 12);
            let b = random_rgb(200 + seed, 20, 12);
            let flow = estimate_flow(&a, &b, 8, 4).unwrap();
            let (dx, dy) = reference_flow(&a, &b, 8, 4);
            assert_eq!(flow.dx, dx, "seed {seed}");
            assert_eq!(flow.dy, dy, "seed {seed}");
        }
    }

    #[test]
    fn checkerboard_ambiguity_resolves_by_magnitude_then_scan_order() {
        // Shifting a checkerboard by any odd-sum displacement matches
        // exactly, so every block faces a tie among its in-bounds unit
        // shifts. Which one wins depends on the block's corner: the
        // magnitude rule narrows to the unit shifts and row-major
        // scanning picks the earliest, with negative rows first.
        fn board(phase: usize) -> RgbImage {
            let mut data = Vec::new();
            for _ in 0..3 {
                for y in 0..16 {
                    for x in 0..16 {
                        data.push(((x + y + phase) % 2) as f64);
                    }
                }
            }
            RgbImage::new(16, 16, data).unwrap()
        }
        let flow = estimate_flow(&board(0), &board(1), 8, 4).unwrap();
        let at = |x: usize, y: usize| (flow.dx[y * 16 + x], flow.dy[y * 16 + x]);
        // Top-left block can only shift right or down: (1, 0) scans first.
        assert_eq!(at(0, 0), (1.0, 0.0));
        // Top-right block: (0, 1) sits in a later row than (-1, 0).
        assert_eq!(at(8, 0), (-1.0, 0.0));
        // Bottom blocks can shift up, and the cy = -1 row scans before
        // any cy = 0 candidate.
        assert_eq!(at(0, 8), (0.0, -1.0));
        assert_eq!(at(8, 8), (0.0, -1.0));
    }

    #[test]
    fn images_smaller_than_a_block_fall_back_to_one_null_block() {
        // With the block covering the whole image, no nonzero shift
        // keeps the comparison window in bounds, so the null shift is
        // the only candidate and the flow is zero.
        let scene = random_rgb(3, 20, 20);
        let reference = crop(&scene, 4, 4, 6, 6);
        let target = crop(&scene, 5, 4, 6, 6);
        let flow = estimate_flow(&reference, &target, 8, 4).unwrap();
        assert_eq!(flow.width, 6);
        assert!(flow.dx.iter().all(|&v| v == 0.0));
        assert!(flow.dy.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_sizes_are_rejected() {
        let a = random_rgb(4, 16, 16);
        let b = random_rgb(5, 16, 8);
        assert!(estimate_flow(&a, &b, 8, 4).is_err());
    }

    #[test]
    fn upscale_replicates_blocks_and_rescales_displacements() {
        let flow = FlowField {
            width: 2,
            height: 1,
            dx: vec![1.0, -2.0],
            dy: vec![0.0, 3.0],
        };
        let up = flow.upscale(2);
        assert_eq!(up.width, 4);
        assert_eq!(up.height, 2);
        assert_eq!(up.dx, vec![2.0, 2.0, -4.0, -4.0, 2.0, 2.0, -4.0, -4.0]);
        assert_eq!(up.dy, vec![0.0, 0.0, 6.0, 6.0, 0.0, 0.0, 6.0, 6.0]);
    }

    #[test]
    fn masking_zeroes_every_channel_of_flagged_pixels_only() {
        let (h, w) = (4usize, 6usize);
        let mut dx = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w / 2 {
                dx[y * w + x] = 3.0;
            }
        }
        let flow = FlowField { width: w, height: h, dx, dy: vec![0.0; w * h] };
        let t = crate::tensor::testutil::spread_tensor(9, &[1, 12, h, w], 0.1, 1.0).detach();
        let masked = mask_large_motion(&t, &flow, DEFAULT_THRESHOLD).unwrap();
        for c in 0..12 {
            for y in 0..h {
                for x in 0..w {
                    let i = (c * h + y) * w + x;
                    if x < w / 2 {
                        assert_eq!(masked.data()[i], 0.0);
                    } else {
                        assert_eq!(masked.data()[i], t.data()[i]);
                    }
                }
            }
        }
        let flags = large_motion_mask(&flow, DEFAULT_THRESHOLD);
        assert_eq!(flags.iter().filter(|&&f| f).count(), w / 2 * h);
    }

    #[test]
    fn threshold_is_strict_and_euclidean() {
        let flow = FlowField {
            width: 3,
            height: 1,
            dx: vec![1.0, 0.8, 1.0001],
            dy: vec![0.0, 0.8, 0.0],
        };
        let flags = large_motion_mask(&flow, 1.0);
        assert_eq!(flags, vec![false, true, true]);
    }

    #[test]
    fn masking_blocks_gradients_at_flagged_pixels() {
        let (h, w) = (2usize, 2usize);
        let flow = FlowField {
            width: w,
            height: h,
            dx: vec![5.0, 0.0, 0.0, 0.0],
            dy: vec![0.0; 4],
        };
        let t = crate::tensor::testutil::spread_tensor(11, &[1, 12, h, w], 0.1, 1.0);
        let masked = mask_large_motion(&t, &flow, 1.0).unwrap();
        let loss = masked.sum();
        let grads = crate::tensor::backward(&loss).unwrap();
        let g = grads.grad(&t);
        for c in 0..12 {
            assert_eq!(g.data()[c * 4], 0.0);
            assert_eq!(g.data()[c * 4 + 1], 1.0);
        }
    }
}
