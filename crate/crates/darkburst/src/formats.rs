//! On-disk formats: the `.drb` burst container, binary PPM for RGB
//! output, and 16-bit PGM for inspecting individual mosaics.
//!
//! `.drb` layout, all integers little-endian:
//!
//! ```text
//! "DRB1"                       magic
//! u16 width, u16 height        mosaic extents
//! u16 black, u16 white         calibration levels
//! u32 exposure_num, u32 exposure_den
//! u16 frame_count
//! frame_count * width * height * u16   counts, frame-major
//! ```
//!
//! Every frame in a burst shares geometry, calibration and exposure,
//! so those live in the header once.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::raw::{RawFrame, RgbImage};

const DRB_MAGIC: &[u8; 4] = b"DRB1";

pub fn write_drb(path: &Path, frames: &[RawFrame]) -> Result<()> {
    let first = frames
        .first()
        .ok_or_else(|| Error::data("refusing to write an empty burst"))?;
    if frames.len() > u16::MAX as usize {
        return Err(Error::data("burst too long for the container"));
    }
    for f in frames {
        let consistent = f.width == first.width
            && f.height == first.height
            && f.black_level == first.black_level
            && f.white_level == first.white_level
            && f.exposure_num == first.exposure_num
            && f.exposure_den == first.exposure_den;
        if !consistent {
            return Err(Error::data(
                "all frames in a burst must share extents, levels and exposure",
            ));
        }
    }
    if first.width > u16::MAX as usize || first.height > u16::MAX as usize {
        return Err(Error::data("frame extents exceed the container's u16 fields"));
    }
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(DRB_MAGIC)?;
    out.write_all(&(first.width as u16).to_le_bytes())?;
    out.write_all(&(first.height as u16).to_le_bytes())?;
    out.write_all(&first.black_level.to_le_bytes())?;
    out.write_all(&first.white_level.to_le_bytes())?;
    out.write_all(&first.exposure_num.to_le_bytes())?;
    out.write_all(&first.exposure_den.to_le_bytes())?;
    out.write_all(&(frames.len() as u16).to_le_bytes())?;
    for f in frames {
        for v in &f.values {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_drb(path: &Path) -> Result<Vec<RawFrame>> {
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut input, &mut magic, path)?;
    if &magic != DRB_MAGIC {
        return Err(Error::data(format!(
            "{} is not a burst container (bad magic)",
            path.display()
        )));
    }
    let width = read_u16(&mut input, path)? as usize;
    let height = read_u16(&mut input, path)? as usize;
    let black = read_u16(&mut input, path)?;
    let white = read_u16(&mut input, path)?;
    let exposure_num = read_u32(&mut input, path)?;
    let exposure_den = read_u32(&mut input, path)?;
    let frame_count = read_u16(&mut input, path)? as usize;
    if frame_count == 0 {
        return Err(Error::data(format!("{}: empty burst", path.display())));
    }
    let mut frames = Vec::with_capacity(frame_count);
    let mut payload = vec![0u8; width * height * 2];
    for _ in 0..frame_count {
        read_exact(&mut input, &mut payload, path)?;
        let values = payload
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .collect();
        frames.push(RawFrame::new(
            width,
            height,
            values,
            black,
            white,
            exposure_num,
            exposure_den,
        )?);
    }
    let mut excess = [0u8; 1];
    if input.read(&mut excess)? != 0 {
        return Err(Error::data(format!(
            "{}: trailing bytes after the last frame",
            path.display()
        )));
    }
    Ok(frames)
}

/// Binary PPM, maxval 255. Values clip to `[0, 1]` before scaling.
pub fn write_ppm(path: &Path, image: &RgbImage) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P6\n{} {}\n255\n", image.width, image.height)?;
    let plane = image.width * image.height;
    let mut row = Vec::with_capacity(3 * image.width);
    for i in 0..plane {
        for c in 0..3 {
            let v = image.data[c * plane + i].clamp(0.0, 1.0);
            row.push((v * 255.0).round() as u8);
        }
        if row.len() == 3 * image.width {
            out.write_all(&row)?;
            row.clear();
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let mut input = BufReader::new(File::open(path)?);
    let magic = pnm_token(&mut input, path)?;
    if magic != "P6" {
        return Err(Error::data(format!(
            "{}: expected binary PPM, got {magic:?}",
            path.display()
        )));
    }
    let width = pnm_usize(&mut input, path)?;
    let height = pnm_usize(&mut input, path)?;
    let maxval = pnm_usize(&mut input, path)?;
    if maxval != 255 {
        return Err(Error::data(format!(
            "{}: only maxval 255 is supported, got {maxval}",
            path.display()
        )));
    }
    let mut payload = vec![0u8; 3 * width * height];
    read_exact(&mut input, &mut payload, path)?;
    let plane = width * height;
    let mut data = vec![0.0; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            data[c * plane + i] = payload[3 * i + c] as f64 / 255.0;
        }
    }
    RgbImage::new(width, height, data)
}

/// Binary 16-bit PGM, maxval 65535, sample bytes most significant
/// first as the format requires.
pub fn write_pgm16(path: &Path, width: usize, height: usize, values: &[u16]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::data(format!(
            "pgm {width}x{height} needs {} values, got {}",
            width * height,
            values.len()
        )));
    }
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{width} {height}\n65535\n")?;
    for v in values {
        out.write_all(&v.to_be_bytes())?;
    }
    out.flush()?;
    Ok(())
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8], path: &Path) -> Result<()> {
    input.read_exact(buf).map_err(|_| {
        Error::data(format!("{}: file truncated", path.display()))
    })
}

fn read_u16<R: Read>(input: &mut R, path: &Path) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(input, &mut b, path)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(input: &mut R, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(input, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

/// Next whitespace-delimited token, skipping `#` comments to end of
/// line, as the PNM grammar allows anywhere in the header.
fn pnm_token<R: BufRead>(input: &mut R, path: &Path) -> Result<String> {
    let mut token = String::new();
    let mut byte = [0u8; 1];
    loop {
        if input.read(&mut byte)? == 0 {
            if token.is_empty() {
                return Err(Error::data(format!("{}: header truncated", path.display())));
            }
            return Ok(token);
        }
        match byte[0] {
            b'#' if token.is_empty() => {
                let mut skipped = Vec::new();
                input.read_until(b'\n', &mut skipped)?;
            }
            c if c.is_ascii_whitespace() => {
                if !token.is_empty() {
                    return Ok(token);
                }
            }
            c => token.push(c as char),
        }
    }
}

fn pnm_usize<R: BufRead>(input: &mut R, path: &Path) -> Result<usize> {
    let token = pnm_token(input, path)?;
    token.parse().map_err(|_| {
        Error::data(format!(
            "{}: bad header field {token:?}",
            path.display()
        ))
    })
}
