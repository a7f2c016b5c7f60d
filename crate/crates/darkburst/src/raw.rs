//! Raw sensor data carriers and the packing step that turns a Bayer
//! mosaic into the four-channel planes the networks consume.
//!
//! The mosaic layout is RGGB: even rows alternate R G, odd rows G B.
//! Packing halves both extents and stacks the four quad positions as
//! channels in reading order R, G(top right), G(bottom left), B.

use crate::error::{Error, Result};
use crate::resample;

/// One exposure straight off the sensor: unnormalised counts plus the
/// calibration needed to interpret them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawFrame {
    pub width: usize,
    pub height: usize,
    /// Row-major mosaic counts, `width * height` of them.
    pub values: Vec<u16>,
    pub black_level: u16,
    pub white_level: u16,
    /// Exposure time as a rational number of seconds.
    pub exposure_num: u32,
    pub exposure_den: u32,
}

impl RawFrame {
    pub fn new(
        width: usize,
        height: usize,
        values: Vec<u16>,
        black_level: u16,
        white_level: u16,
        exposure_num: u32,
        exposure_den: u32,
    ) -> Result<RawFrame> {
        if width == 0 || height == 0 || width % 2 != 0 || height % 2 != 0 {
            return Err(Error::data(format!(
                "raw frame extents must be even and positive, got {width}x{height}"
            )));
        }
        if values.len() != width * height {
            return Err(Error::data(format!(
                "raw frame {}x{} needs {} values, got {}",
                width,
                height,
                width * height,
                values.len()
            )));
        }
        if white_level <= black_level {
            return Err(Error::data(format!(
                "white level {white_level} must exceed black level {black_level}"
            )));
        }
        if exposure_num == 0 || exposure_den == 0 {
            return Err(Error::data("exposure must be a positive rational"));
        }
        Ok(RawFrame {
            width,
            height,
            values,
            black_level,
            white_level,
            exposure_num,
            exposure_den,
        })
    }

    pub fn exposure_seconds(&self) -> f64 {
        self.exposure_num as f64 / self.exposure_den as f64
    }
}

/// Packed four-channel view of a mosaic at half spatial resolution,
/// black-level corrected, normalised and pre-amplified.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedRaw {
    /// Extents after packing, half the mosaic's.
    pub width: usize,
    pub height: usize,
    /// Planes in channel-major order, `4 * width * height` values.
    pub data: Vec<f64>,
    pub ratio: f64,
}

/// Planar RGB image, channel-major, values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<RgbImage> {
        if width == 0 || height == 0 {
            return Err(Error::data("image extents must be positive"));
        }
        if data.len() != 3 * width * height {
            return Err(Error::data(format!(
                "rgb image {}x{} needs {} values, got {}",
                width,
                height,
                3 * width * height,
                data.len()
            )));
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> RgbImage {
        RgbImage {
            width,
            height,
            data: vec![0.0; 3 * width * height],
        }
    }

    pub fn plane(&self, channel: usize) -> &[f64] {
        let size = self.width * self.height;
        &self.data[channel * size..(channel + 1) * size]
    }

    /// Averages each 2x2 block; extents must be even.
    pub fn downsample_half(&self) -> Result<RgbImage> {
        if self.width % 2 != 0 || self.height % 2 != 0 {
            return Err(Error::data(format!(
                "downsample needs even extents, got {}x{}",
                self.width, self.height
            )));
        }
        let (ow, oh) = (self.width / 2, self.height / 2);
        let mut out = RgbImage::zeros(ow, oh);
        for c in 0..3 {
            let src = self.plane(c);
            let dst = &mut out.data[c * ow * oh..(c + 1) * ow * oh];
            resample::half_plane_into(src, self.height, self.width, dst);
        }
        Ok(out)
    }

    /// Doubles both extents with edge-clamped bilinear interpolation;
    /// constant images come back bit-identical.
    pub fn upsample_double(&self) -> RgbImage {
        let (ow, oh) = (self.width * 2, self.height * 2);
        let mut out = RgbImage::zeros(ow, oh);
        for c in 0..3 {
            let src = self.plane(c);
            let dst = &mut out.data[c * ow * oh..(c + 1) * ow * oh];
            resample::double_plane_into(src, self.height, self.width, dst);
        }
        out
    }
}

/// Amplification that matches a frame's exposure to the reference
/// exposure: `ratio = reference / frame`.
pub fn compute_ratio(reference_num: u32, reference_den: u32, frame: &RawFrame) -> f64 {
    let reference = reference_num as f64 / reference_den as f64;
    reference / frame.exposure_seconds()
}

/// Black-level subtraction, normalisation to `[0, 1]`, amplification
/// by `ratio`, and the RGGB quad-to-channel rearrangement.
pub fn pack_bayer(frame: &RawFrame, ratio: f64) -> Result<PackedRaw> {
    if !(ratio.is_finite() && ratio > 0.0) {
        return Err(Error::config(format!("amplification ratio {ratio} must be positive")));
    }
    let (w, h) = (frame.width / 2, frame.height / 2);
    let span = (frame.white_level - frame.black_level) as f64;
    let black = frame.black_level as f64;
    let normalise = |v: u16| -> f64 { (((v as f64) - black) / span).clamp(0.0, 1.0) * ratio };
    let mut data = vec![0.0; 4 * w * h];
    let plane = w * h;
    for y in 0..h {
        for x in 0..w {
            let top = 2 * y * frame.width + 2 * x;
            let bottom = top + frame.width;
            let i = y * w + x;
            data[i] = normalise(frame.values[top]);
            data[plane + i] = normalise(frame.values[top + 1]);
            data[2 * plane + i] = normalise(frame.values[bottom]);
            data[3 * plane + i] = normalise(frame.values[bottom + 1]);
        }
    }
    Ok(PackedRaw {
        width: w,
        height: h,
        data,
        ratio,
    })
}

/// Collapses four packed planes to RGB at the packed resolution: the
/// two green positions average, everything clips to `[0, 1]`.
pub fn coarse_raw_to_rgb(data: &[f64], width: usize, height: usize) -> Result<RgbImage> {
    let plane = width * height;
    if data.len() != 4 * plane {
        return Err(Error::shape(format!(
            "expected 4 planes of {plane} values, got {}",
            data.len()
        )));
    }
    let mut out = RgbImage::zeros(width, height);
    for i in 0..plane {
        out.data[i] = data[i].clamp(0.0, 1.0);
        out.data[plane + i] = (0.5 * (data[plane + i] + data[2 * plane + i])).clamp(0.0, 1.0);
        out.data[2 * plane + i] = data[3 * plane + i].clamp(0.0, 1.0);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame_2x2(values: [u16; 4]) -> RawFrame {
        RawFrame::new(2, 2, values.to_vec(), 512, 16383, 1, 10).unwrap()
    }

    #[test]
    fn packing_normalises_against_levels() {
        let f = frame_2x2([9312, 512, 16383, 600]);
        let p = pack_bayer(&f, 1.0).unwrap();
        assert_eq!((p.width, p.height), (1, 1));
        assert_eq!(p.data[0], 8800.0 / 15871.0);
        assert_eq!(p.data[1], 0.0);
        assert_eq!(p.data[2], 1.0);
        assert_eq!(p.data[3], 88.0 / 15871.0);
    }

    #[test]
    fn packing_clips_below_black_and_scales_by_ratio() {
        let f = frame_2x2([100, 16383, 512, 9312]);
        let p = pack_bayer(&f, 100.0).unwrap();
        assert_eq!(p.data[0], 0.0);
        assert_eq!(p.data[1], 100.0);
        assert_eq!(p.data[3], 100.0 * 8800.0 / 15871.0);
        assert!(pack_bayer(&f, 0.0).is_err());
        assert!(pack_bayer(&f, f64::NAN).is_err());
    }

    #[test]
    fn quad_positions_map_to_channels_in_reading_order() {
        let f = RawFrame::new(
            4,
            2,
            vec![10, 11, 20, 21, 12, 13, 22, 23],
            0,
            128,
            1,
            1,
        )
        .unwrap();
        let p = pack_bayer(&f, 1.0).unwrap();
        assert_eq!((p.width, p.height), (2, 1));
        // The 128-count span is a power of two, so normalising and
        // rescaling are both exact.
        let vals: Vec<f64> = p.data.iter().map(|v| v * 128.0).collect();
        assert_eq!(vals, &[10.0, 20.0, 11.0, 21.0, 12.0, 22.0, 13.0, 23.0]);
    }

    #[test]
    fn ratio_comes_from_exposure_rationals() {
        let f = frame_2x2([0, 0, 0, 0]);
        assert_eq!(f.exposure_seconds(), 0.1);
        assert_eq!(compute_ratio(10, 1, &f), 100.0);
        let slow = RawFrame::new(2, 2, vec![0; 4], 0, 1, 1, 25).unwrap();
        assert_eq!(compute_ratio(10, 1, &slow), 250.0);
        let thirty = RawFrame::new(2, 2, vec![0; 4], 0, 1, 1, 30).unwrap();
        assert_eq!(compute_ratio(10, 1, &thirty), 300.0);
    }

    #[test]
    fn frame_construction_rejects_bad_geometry() {
        assert!(RawFrame::new(3, 2, vec![0; 6], 0, 1, 1, 1).is_err());
        assert!(RawFrame::new(2, 2, vec![0; 3], 0, 1, 1, 1).is_err());
        assert!(RawFrame::new(2, 2, vec![0; 4], 5, 5, 1, 1).is_err());
        assert!(RawFrame::new(2, 2, vec![0; 4], 0, 1, 0, 1).is_err());
    }

    #[test]
    fn rgb_collapse_averages_greens_and_clips() {
        let data = vec![1.3, 0.4, 0.6, -0.2];
        let img = coarse_raw_to_rgb(&data, 1, 1).unwrap();
        assert_eq!(img.data, &[1.0, 0.5, 0.0]);
    }

    #[test]
    fn resample_round_trip_preserves_constants() {
        let img = RgbImage::new(4, 4, vec![0.25; 48]).unwrap();
        let up = img.upsample_double();
        assert!(up.data.iter().all(|&v| v == 0.25));
        let down = up.downsample_half().unwrap();
        assert_eq!(down.data, img.data);
        assert!(RgbImage::new(3, 3, vec![0.0; 27])
            .unwrap()
            .downsample_half()
            .is_err());
    }
}
