//! Line-oriented `key = value` run configuration with dotted keys.
//!
//! Every key is validated against the known schema; unknown and
//! duplicate keys are errors carrying the offending line number, so a
//! typo cannot silently fall back to a default. `#` starts a comment,
//! blank lines are ignored.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::loss::{CxParams, LossMode};
use crate::nets::ArchConfig;
use crate::sim::{NoiseParams, SensorConfig};
use crate::tensor::CxNorm;

/// Training stages in prerequisite order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Coarse,
    Fine,
    Set,
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Stage> {
        match s {
            "coarse" => Ok(Stage::Coarse),
            "fine" => Ok(Stage::Fine),
            "set" => Ok(Stage::Set),
            other => Err(Error::config(format!(
                "unknown stage {other:?}; expected coarse, fine or set"
            ))),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Coarse => "coarse",
            Stage::Fine => "fine",
            Stage::Set => "set",
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainSection {
    pub stage: Option<Stage>,
    /// Optimisation steps; stages default to 300/300/200 when unset.
    pub steps: Option<usize>,
    pub lr: f64,
    pub batch: usize,
    /// Square patch edge at packed resolution.
    pub patch: usize,
    pub burst_min: usize,
    pub burst_max: usize,
    /// Unset resolves per stage: joint coarse training while the fine
    /// stage runs, frozen coarse during the set stage.
    pub freeze_coarse: Option<bool>,
    pub seed: u64,
    /// Checkpoint that seeds this stage's parameters.
    pub init_from: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct LossSection {
    /// Unset resolves per stage: plain L1 for the coarse stage,
    /// L1 plus contextual for fine and set.
    pub mode: Option<LossMode>,
    pub l1_weight: f64,
    pub aux_weight: f64,
}

#[derive(Debug, Clone)]
pub struct DataSection {
    pub dir: Option<PathBuf>,
    pub scenes: usize,
    pub holdout: usize,
    /// Mosaic dimensions of generated scenes.
    pub width: usize,
    pub height: usize,
    pub ratios: Vec<u32>,
    pub frames_per_burst: usize,
    pub max_shift: i32,
}

#[derive(Debug, Clone)]
pub struct MotionSection {
    pub enabled: bool,
    pub block: usize,
    pub search_radius: usize,
    pub threshold: f64,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub arch: ArchConfig,
    pub train: TrainSection,
    pub loss: LossSection,
    pub cx: CxParams,
    /// Pyramid depth of the random feature extractor.
    pub features_levels: usize,
    pub data: DataSection,
    pub sensor: SensorConfig,
    pub noise: NoiseParams,
    pub motion: MotionSection,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            arch: ArchConfig::desk(),
            train: TrainSection {
                stage: None,
                steps: None,
                lr: 1e-4,
                batch: 4,
                patch: 32,
                burst_min: 1,
                burst_max: 8,
                freeze_coarse: None,
                seed: 0,
                init_from: None,
            },
            loss: LossSection { mode: None, l1_weight: 1.0, aux_weight: 1.0 },
            cx: CxParams::default(),
            features_levels: 4,
            data: DataSection {
                dir: None,
                scenes: 200,
                holdout: 40,
                width: 64,
                height: 64,
                ratios: vec![100, 250, 300],
                frames_per_burst: 8,
                max_shift: 2,
            },
            sensor: SensorConfig::default(),
            noise: NoiseParams::default(),
            motion: MotionSection {
                enabled: true,
                block: 8,
                search_radius: 4,
                threshold: 1.0,
            },
        }
    }
}

impl RunConfig {
    pub fn default_steps(stage: Stage) -> usize {
        match stage {
            Stage::Coarse => 300,
            Stage::Fine => 300,
            Stage::Set => 200,
        }
    }

    pub fn steps_for(&self, stage: Stage) -> usize {
        self.train.steps.unwrap_or_else(|| RunConfig::default_steps(stage))
    }

    pub fn freeze_coarse_for(&self, stage: Stage) -> bool {
        self.train.freeze_coarse.unwrap_or(stage == Stage::Set)
    }

    pub fn loss_mode_for(&self, stage: Stage) -> LossMode {
        self.loss.mode.unwrap_or(match stage {
            Stage::Coarse => LossMode::L1,
            Stage::Fine | Stage::Set => LossMode::L1Contextual,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let t = &self.train;
        if t.lr <= 0.0 || !t.lr.is_finite() {
            return Err(Error::config("train.lr must be positive"));
        }
        if t.batch == 0 || t.patch == 0 {
            return Err(Error::config("train.batch and train.patch must be positive"));
        }
        if t.burst_min == 0 || t.burst_min > t.burst_max {
            return Err(Error::config(
                "burst range needs 1 <= train.burst_min <= train.burst_max",
            ));
        }
        if self.loss.l1_weight < 0.0 || self.loss.aux_weight < 0.0 {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if self.features_levels < 3 || self.features_levels > 4 {
            return Err(Error::config(
                "features.levels must be 3 or 4 (contextual terms read levels 1 and 2)",
            ));
        }
        let d = &self.data;
        if d.scenes == 0 || d.width == 0 || d.height == 0 {
            return Err(Error::config("data.scenes and dimensions must be positive"));
        }
        if d.width % 2 != 0 || d.height % 2 != 0 {
            return Err(Error::config("data.width and data.height must be even"));
        }
        if d.ratios.is_empty() || d.ratios.iter().any(|&r| r == 0) {
            return Err(Error::config("data.ratios needs at least one positive ratio"));
        }
        if d.frames_per_burst == 0 {
            return Err(Error::config("data.frames_per_burst must be positive"));
        }
        if self.sensor.white_level <= self.sensor.black_level {
            return Err(Error::config("sensor.white must exceed sensor.black"));
        }
        if self.sensor.exposure_num == 0 || self.sensor.exposure_den == 0 {
            return Err(Error::config("sensor exposure must be a positive rational"));
        }
        if self.noise.shot_gain <= 0.0 || self.noise.read_sigma < 0.0 {
            return Err(Error::config(
                "noise.shot_gain must be positive and noise.read_sigma non-negative",
            ));
        }
        let m = &self.motion;
        if m.block == 0 {
            return Err(Error::config("motion.block must be positive"));
        }
        if m.threshold < 0.0 {
            return Err(Error::config("motion.threshold must be non-negative"));
        }
        if self.cx.h <= 0.0 || self.cx.epsilon <= 0.0 {
            return Err(Error::config("cx.h and cx.epsilon must be positive"));
        }
        if self.cx.max_positions == 0 {
            return Err(Error::config("cx.positions must be positive"));
        }
        Ok(())
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    let mut seen = std::collections::HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("line {line_no}: expected `key = value`, got {raw:?}"))
        })?;
        let key = key.trim();
        let value = value.trim();
        if !seen.insert(key.to_string()) {
            return Err(Error::config(format!("line {line_no}: duplicate key {key}")));
        }
        apply_key(&mut config, key, value)
            .map_err(|e| Error::config(format!("line {line_no}: {e}")))?;
    }
    config.validate()?;
    Ok(config)
}

fn apply_key(config: &mut RunConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "arch.base_filters" => config.arch.base_filters = num(key, value)?,
        "arch.encoder_levels" => config.arch.encoder_levels = num(key, value)?,
        "arch.residual_blocks" => config.arch.residual_blocks = num(key, value)?,
        "arch.use_coarse_to_fine" => config.arch.use_coarse_to_fine = flag(key, value)?,
        "arch.use_residual" => config.arch.use_residual = flag(key, value)?,
        "arch.use_se" => config.arch.use_se = flag(key, value)?,
        "arch.se_reduction" => config.arch.se_reduction = num(key, value)?,
        "train.stage" => config.train.stage = Some(value.parse()?),
        "train.steps" => config.train.steps = Some(num(key, value)?),
        "train.lr" => config.train.lr = num(key, value)?,
        "train.batch" => config.train.batch = num(key, value)?,
        "train.patch" => config.train.patch = num(key, value)?,
        "train.burst_min" => config.train.burst_min = num(key, value)?,
        "train.burst_max" => config.train.burst_max = num(key, value)?,
        "train.freeze_coarse" => config.train.freeze_coarse = Some(flag(key, value)?),
        "train.seed" => config.train.seed = num(key, value)?,
        "train.init_from" => config.train.init_from = Some(PathBuf::from(value)),
        "loss.mode" => config.loss.mode = Some(value.parse()?),
        "loss.l1_weight" => config.loss.l1_weight = num(key, value)?,
        "loss.aux_weight" => config.loss.aux_weight = num(key, value)?,
        "cx.h" => config.cx.h = num(key, value)?,
        "cx.epsilon" => config.cx.epsilon = num(key, value)?,
        "cx.normalization" => {
            config.cx.normalization = match value {
                "row" => CxNorm::RowWise,
                "column" => CxNorm::ColumnWise,
                other => {
                    return Err(Error::config(format!(
                        "cx.normalization must be row or column, got {other:?}"
                    )))
                }
            }
        }
        "cx.positions" => config.cx.max_positions = num(key, value)?,
        "features.levels" => config.features_levels = num(key, value)?,
        "data.dir" => config.data.dir = Some(PathBuf::from(value)),
        "data.scenes" => config.data.scenes = num(key, value)?,
        "data.holdout" => config.data.holdout = num(key, value)?,
        "data.width" => config.data.width = num(key, value)?,
        "data.height" => config.data.height = num(key, value)?,
        "data.ratios" => {
            let mut ratios = Vec::new();
            for part in value.split(',') {
                ratios.push(num("data.ratios", part.trim())?);
            }
            config.data.ratios = ratios;
        }
        "data.frames_per_burst" => config.data.frames_per_burst = num(key, value)?,
        "data.max_shift" => config.data.max_shift = num(key, value)?,
        "sensor.black" => config.sensor.black_level = num(key, value)?,
        "sensor.white" => config.sensor.white_level = num(key, value)?,
        "sensor.exposure_num" => config.sensor.exposure_num = num(key, value)?,
        "sensor.exposure_den" => config.sensor.exposure_den = num(key, value)?,
        "noise.shot_gain" => config.noise.shot_gain = num(key, value)?,
        "noise.read_sigma" => config.noise.read_sigma = num(key, value)?,
        "motion.enabled" => config.motion.enabled = flag(key, value)?,
        "motion.block" => config.motion.block = num(key, value)?,
        "motion.search_radius" => config.motion.search_radius = num(key, value)?,
        "motion.threshold" => config.motion.threshold = num(key, value)?,
        other => return Err(Error::config(format!("unknown key {other}"))),
    }
    Ok(())
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::config(format!("{key} must be true or false, got {other:?}"))),
    }
}
