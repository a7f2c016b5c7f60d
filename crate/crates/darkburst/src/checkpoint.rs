//! Checkpoint files: parameters, optimizer state and architecture in
//! one self-describing container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DBCK"  magic
//! u16     format version, currently 1
//! u32     header length in bytes
//! []u8    UTF-8 header text (see below)
//! []f32   parameter payloads, one block per `param` line in order
//! []f32   first-moment buffers, same order and lengths
//! []f32   second-moment buffers, same order and lengths
//! ```
//!
//! The header is line-oriented text: `stage`, `adam.step`, the seven
//! `arch.*` fields, then one `param = name d0,d1,...` line per tensor
//! in store order. A file must end exactly where the last buffer
//! ends; trailing bytes are as fatal as missing ones. Values are
//! stored as f32, which is lossless here because training snaps
//! parameters and moments to the f32 grid after every step.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::Stage;
use crate::error::{Error, Result};
use crate::nets::{init_params, ArchConfig, NetParams};
use crate::optim::AdamState;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DBCK";
const VERSION: u16 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: NetParams,
    pub adam: AdamState,
    /// Highest completed training stage.
    pub stage: Stage,
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let bytes = encode(checkpoint)?;
    std::fs::write(path, bytes)
        .map_err(|e| Error::data(format!("cannot write {}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    decode(&bytes).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

fn encode(checkpoint: &Checkpoint) -> Result<Vec<u8>> {
    let params = &checkpoint.params;
    let arch = params.config();
    let mut header = String::new();
    let _ = writeln!(header, "stage = {}", checkpoint.stage);
    let _ = writeln!(header, "adam.step = {}", checkpoint.adam.step_count());
    let _ = writeln!(header, "arch.base_filters = {}", arch.base_filters);
    let _ = writeln!(header, "arch.encoder_levels = {}", arch.encoder_levels);
    let _ = writeln!(header, "arch.residual_blocks = {}", arch.residual_blocks);
    let _ = writeln!(header, "arch.use_coarse_to_fine = {}", arch.use_coarse_to_fine);
    let _ = writeln!(header, "arch.use_residual = {}", arch.use_residual);
    let _ = writeln!(header, "arch.use_se = {}", arch.use_se);
    let _ = writeln!(header, "arch.se_reduction = {}", arch.se_reduction);
    for (name, tensor) in params.iter() {
        let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
        let _ = writeln!(header, "param = {name} {}", dims.join(","));
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for (_, tensor) in params.iter() {
        for &v in tensor.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let (ms, vs) = checkpoint.adam.moments();
    for buffer in ms.iter().chain(vs.iter()) {
        for &v in buffer {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 10 {
        return Err(Error::data("file too short for a checkpoint header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::data("bad magic; not a checkpoint file"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::data(format!("unsupported checkpoint version {version}")));
    }
    let header_len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let body_start = 10 + header_len;
    if bytes.len() < body_start {
        return Err(Error::data("truncated checkpoint header"));
    }
    let header = std::str::from_utf8(&bytes[10..body_start])
        .map_err(|_| Error::data("checkpoint header is not UTF-8"))?;

    let mut stage = None;
    let mut step = None;
    let mut arch_fields: std::collections::HashMap<&str, String> = Default::default();
    let mut entries: Vec<(String, Vec<usize>)> = Vec::new();
    for line in header.lines() {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::data(format!("malformed header line {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "stage" => stage = Some(value.parse::<Stage>()?),
            "adam.step" => {
                step = Some(value.parse::<u64>().map_err(|_| {
                    Error::data(format!("bad adam.step value {value:?}"))
                })?)
            }
            "param" => {
                let (name, dims) = value
                    .split_once(' ')
                    .ok_or_else(|| Error::data(format!("malformed param line {line:?}")))?;
                let shape: Vec<usize> = dims
                    .split(',')
                    .map(|d| {
                        d.parse().map_err(|_| Error::data(format!("bad dimension in {line:?}")))
                    })
                    .collect::<Result<_>>()?;
                entries.push((name.to_string(), shape));
            }
            k if k.starts_with("arch.") => {
                arch_fields.insert(k.strip_prefix("arch.").unwrap(), value.to_string());
            }
            other => return Err(Error::data(format!("unknown header key {other}"))),
        }
    }
    let stage = stage.ok_or_else(|| Error::data("header is missing the stage"))?;
    let step = step.ok_or_else(|| Error::data("header is missing adam.step"))?;
    let arch = arch_from_fields(&arch_fields)?;

    // The skeleton from a fresh init pins the exact set, order and
    // shapes of parameters this architecture owns.
    let mut params = init_params(&arch, 0)?;
    if entries.len() != params.len() {
        return Err(Error::data(format!(
            "architecture expects {} parameters, file lists {}",
            params.len(),
            entries.len()
        )));
    }
    for ((name, shape), (want_name, want)) in entries.iter().zip(params.iter()) {
        if name != want_name || shape != want.shape() {
            return Err(Error::data(format!(
                "parameter mismatch: file has {name} {shape:?}, architecture expects {want_name} {:?}",
                want.shape()
            )));
        }
    }

    let mut cursor = body_start;
    let mut read_block = |len: usize| -> Result<Vec<f64>> {
        let bytes_needed = len * 4;
        if bytes.len() < cursor + bytes_needed {
            return Err(Error::data("truncated checkpoint payload"));
        }
        let mut out = Vec::with_capacity(len);
        for i in 0..len {
            let o = cursor + i * 4;
            let v = f32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
            if !v.is_finite() {
                return Err(Error::data("non-finite value in checkpoint"));
            }
            out.push(v as f64);
        }
        cursor += bytes_needed;
        Ok(out)
    };

    let mut loaded: Vec<(String, Vec<f64>)> = Vec::new();
    for (name, shape) in &entries {
        let numel: usize = shape.iter().product();
        loaded.push((name.clone(), read_block(numel)?));
    }
    let mut ms = Vec::with_capacity(entries.len());
    for (_, shape) in &entries {
        ms.push(read_block(shape.iter().product())?);
    }
    let mut vs = Vec::with_capacity(entries.len());
    for (_, shape) in &entries {
        vs.push(read_block(shape.iter().product())?);
    }
    if cursor != bytes.len() {
        return Err(Error::data(format!(
            "{} trailing bytes after the last buffer",
            bytes.len() - cursor
        )));
    }

    for ((name, data), (_, shape)) in loaded.into_iter().zip(entries.iter()) {
        params.set(&name, Tensor::variable(shape, data)?)?;
    }
    let adam = AdamState::from_parts(&params, step, ms, vs)?;
    Ok(Checkpoint { params, adam, stage })
}

fn arch_from_fields(fields: &std::collections::HashMap<&str, String>) -> Result<ArchConfig> {
    fn take<T: std::str::FromStr>(
        fields: &std::collections::HashMap<&str, String>,
        key: &str,
    ) -> Result<T> {
        let raw = fields
            .get(key)
            .ok_or_else(|| Error::data(format!("header is missing arch.{key}")))?;
        raw.parse()
            .map_err(|_| Error::data(format!("bad value for arch.{key}: {raw:?}")))
    }
    let arch = ArchConfig {
        base_filters: take(fields, "base_filters")?,
        encoder_levels: take(fields, "encoder_levels")?,
        residual_blocks: take(fields, "residual_blocks")?,
        use_coarse_to_fine: take(fields, "use_coarse_to_fine")?,
        use_residual: take(fields, "use_residual")?,
        use_se: take(fields, "use_se")?,
        se_reduction: take(fields, "se_reduction")?,
    };
    arch.validate()?;
    Ok(arch)
}
