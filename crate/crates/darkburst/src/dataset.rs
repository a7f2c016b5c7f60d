//! On-disk dataset layout and its loader.
//!
//! A dataset directory holds one subdirectory per scene with the
//! ground-truth PPM and one burst container per amplification ratio,
//! plus a `manifest.tsv` tying them together:
//!
//! ```text
//! scene  kind       seed   gt                 ratio  burst
//! 0      gradients  1234   scene_0000/gt.ppm  100    scene_0000/burst_x100.drb
//! ```
//!
//! Everything derives from the master seed and the scene index, so a
//! regeneration with the same seed is byte-identical regardless of
//! the order scenes are produced in.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::formats::{read_drb, read_ppm, write_drb, write_ppm};
use crate::raw::{RawFrame, RgbImage};
use crate::sim::{derive_seed, make_burst, synth_scene, SceneKind};

const SCENE_SEED_TAG: u64 = 10;
const BURST_SEED_TAG: u64 = 11;

/// One scene with every burst loaded into memory.
#[derive(Debug, Clone)]
pub struct LoadedScene {
    pub index: usize,
    pub kind: SceneKind,
    pub seed: u64,
    pub gt: RgbImage,
    /// Ratio paired with its frames, in manifest order.
    pub bursts: Vec<(u32, Vec<RawFrame>)>,
}

impl LoadedScene {
    pub fn burst(&self, ratio: u32) -> Result<&[RawFrame]> {
        self.bursts
            .iter()
            .find(|(r, _)| *r == ratio)
            .map(|(_, frames)| frames.as_slice())
            .ok_or_else(|| {
                Error::data(format!("scene {} has no burst at ratio {ratio}", self.index))
            })
    }
}

fn kind_for(index: usize) -> SceneKind {
    match index % 3 {
        0 => SceneKind::Gradients,
        1 => SceneKind::Shapes,
        _ => SceneKind::Texture,
    }
}

fn kind_name(kind: SceneKind) -> &'static str {
    match kind {
        SceneKind::Gradients => "gradients",
        SceneKind::Shapes => "shapes",
        SceneKind::Texture => "texture",
    }
}

fn kind_from_name(name: &str) -> Result<SceneKind> {
    match name {
        "gradients" => Ok(SceneKind::Gradients),
        "shapes" => Ok(SceneKind::Shapes),
        "texture" => Ok(SceneKind::Texture),
        other => Err(Error::data(format!("unknown scene kind {other:?}"))),
    }
}

/// Generates `count` scenes with a burst per configured ratio and
/// writes the manifest. Returns the number of burst files written.
pub fn gen_dataset(
    config: &RunConfig,
    out_dir: &Path,
    count: usize,
    master_seed: u64,
) -> Result<usize> {
    if count == 0 {
        return Err(Error::config("cannot generate an empty dataset"));
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::data(format!("cannot create {}: {e}", out_dir.display())))?;
    let mut manifest = String::from("scene\tkind\tseed\tgt\tratio\tburst\n");
    let mut bursts_written = 0;
    for i in 0..count {
        let kind = kind_for(i);
        let scene_seed = derive_seed(master_seed, SCENE_SEED_TAG, i as u64);
        let scene = synth_scene(kind, config.data.width, config.data.height, scene_seed)?;
        let scene_dir = format!("scene_{i:04}");
        let abs_dir = out_dir.join(&scene_dir);
        std::fs::create_dir_all(&abs_dir)
            .map_err(|e| Error::data(format!("cannot create {}: {e}", abs_dir.display())))?;
        let gt_rel = format!("{scene_dir}/gt.ppm");
        write_ppm(&out_dir.join(&gt_rel), &scene)?;
        for (ri, &ratio) in config.data.ratios.iter().enumerate() {
            let burst_seed =
                derive_seed(master_seed, BURST_SEED_TAG, (i * 1000 + ri) as u64);
            let frames = make_burst(
                &scene,
                &config.sensor,
                &config.noise,
                ratio,
                config.data.frames_per_burst,
                config.data.max_shift as i64,
                burst_seed,
            )?;
            let burst_rel = format!("{scene_dir}/burst_x{ratio}.drb");
            write_drb(&out_dir.join(&burst_rel), &frames)?;
            bursts_written += 1;
            let _ = writeln_row(&mut manifest, i, kind, scene_seed, &gt_rel, ratio, &burst_rel);
        }
    }
    std::fs::write(out_dir.join("manifest.tsv"), manifest)
        .map_err(|e| Error::data(format!("cannot write manifest: {e}")))?;
    Ok(bursts_written)
}

fn writeln_row(
    out: &mut String,
    scene: usize,
    kind: SceneKind,
    seed: u64,
    gt: &str,
    ratio: u32,
    burst: &str,
) -> fmt::Result {
    use fmt::Write;
    writeln!(out, "{scene}\t{}\t{seed}\t{gt}\t{ratio}\t{burst}", kind_name(kind))
}

/// Reads a dataset directory fully into memory, in manifest order.
pub fn load_dataset(dir: &Path) -> Result<Vec<LoadedScene>> {
    let manifest_path = dir.join("manifest.tsv");
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", manifest_path.display())))?;
    let mut scenes: BTreeMap<usize, LoadedScene> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != "scene\tkind\tseed\tgt\tratio\tburst" {
                return Err(Error::data("manifest header does not match the schema"));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(Error::data(format!(
                "manifest line {} has {} fields, expected 6",
                i + 1,
                fields.len()
            )));
        }
        let index: usize = fields[0]
            .parse()
            .map_err(|_| Error::data(format!("bad scene index {:?}", fields[0])))?;
        let kind = kind_from_name(fields[1])?;
        let seed: u64 = fields[2]
            .parse()
            .map_err(|_| Error::data(format!("bad seed {:?}", fields[2])))?;
        let ratio: u32 = fields[4]
            .parse()
            .map_err(|_| Error::data(format!("bad ratio {:?}", fields[4])))?;
        let frames = read_drb(&dir.join(fields[5]))?;
        let entry = scenes.entry(index).or_insert_with(|| LoadedScene {
            index,
            kind,
            seed,
            gt: RgbImage::zeros(0, 0),
            bursts: Vec::new(),
        });
        if entry.gt.width == 0 {
            entry.gt = read_ppm(&dir.join(fields[3]))?;
        }
        if entry.bursts.iter().any(|(r, _)| *r == ratio) {
            return Err(Error::data(format!(
                "scene {index} lists ratio {ratio} twice"
            )));
        }
        entry.bursts.push((ratio, frames));
    }
    if scenes.is_empty() {
        return Err(Error::data("dataset manifest lists no scenes"));
    }
    Ok(scenes.into_values().collect())
}
