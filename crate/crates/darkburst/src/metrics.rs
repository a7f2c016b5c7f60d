//! Image quality metrics over planar RGB images in `[0, 1]`.
//!
//! PSNR uses a unit peak. The structural similarity index uses an
//! 11x11 Gaussian window (deviation 1.5), stabilisers C1 = 0.01^2 and
//! C2 = 0.03^2, valid windows only (no padding), and averages the per
//! channel means.

use crate::error::{Error, Result};
use crate::raw::RgbImage;

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Peak signal-to-noise ratio in decibels; identical images give
/// positive infinity.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_pair(a, b)?;
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_pair(a, b)?;
    if a.width < WINDOW || a.height < WINDOW {
        return Err(Error::data(format!(
            "structural similarity needs at least {WINDOW}x{WINDOW} images, got {}x{}",
            a.width, a.height
        )));
    }
    let mut total = 0.0;
    for c in 0..3 {
        total += ssim_plane(a.plane(c), b.plane(c), a.height, a.width);
    }
    Ok(total / 3.0)
}

fn check_pair(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::shape(format!(
            "image pair differs in size: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

fn gaussian_taps() -> [f64; WINDOW] {
    let mut taps = [0.0; WINDOW];
    let mid = (WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, t) in taps.iter_mut().enumerate() {
        *t = (-((i as f64 - mid).powi(2)) / (2.0 * SIGMA * SIGMA)).exp();
        sum += *t;
    }
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Valid-region separable Gaussian filter; output is
/// `(h - 10) x (w - 10)`.
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64; WINDOW]) -> Vec<f64> {
    let ow = w - WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * src[y * w + x + k];
            }
            rows[y * ow + x] = acc;
        }
    }
    let oh = h - WINDOW + 1;
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * rows[(y + k) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
    let taps = gaussian_taps();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mx = filter_valid(x, h, w, &taps);
    let my = filter_valid(y, h, w, &taps);
    let mxx = filter_valid(&xx, h, w, &taps);
    let myy = filter_valid(&yy, h, w, &taps);
    let mxy = filter_valid(&xy, h, w, &taps);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let vx = mxx[i] - mx[i] * mx[i];
        let vy = myy[i] - my[i] * my[i];
        let cov = mxy[i] - mx[i] * my[i];
        let num = (2.0 * mx[i] * my[i] + C1) * (2.0 * cov + C2);
        let den = (mx[i] * mx[i] + my[i] * my[i] + C1) * (vx + vy + C2);
        total += num / den;
    }
    total / mx.len() as f64
}
