//! Training objectives: pixel L1, feature-space L1, and a contextual
//! similarity loss over sampled feature sets.
//!
//! The contextual term compares unordered sets of feature vectors, so
//! it tolerates the small misalignments left over after burst
//! registration where a pixel loss would blur. Composite modes add one
//! feature term to the pixel term with unit weights.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::features::{sample_positions, FeatureExtractor};
use crate::sim::derive_seed;
use crate::tensor::{CxNorm, Tensor};

/// Pyramid levels the feature losses read; half and quarter
/// resolution carry enough context without quadratic blowup.
const CX_LEVELS: [usize; 2] = [1, 2];
const MAX_POSITION_BUDGET: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CxParams {
    /// Bandwidth of the similarity kernel.
    pub h: f64,
    /// Stabiliser added to the row minimum of the distance matrix.
    pub epsilon: f64,
    pub normalization: CxNorm,
    /// Feature vectors sampled per level, capped at 1024.
    pub max_positions: usize,
}

impl Default for CxParams {
    fn default() -> Self {
        CxParams {
            h: 0.5,
            epsilon: 1e-5,
            normalization: CxNorm::RowWise,
            max_positions: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// Pixel L1 only.
    L1,
    /// Pixel L1 plus feature-map L1.
    L1Perceptual,
    /// Pixel L1 plus contextual similarity.
    L1Contextual,
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<LossMode> {
        match s {
            "l1" => Ok(LossMode::L1),
            "l1+p" => Ok(LossMode::L1Perceptual),
            "l1+cx" => Ok(LossMode::L1Contextual),
            other => Err(Error::config(format!(
                "unknown loss mode {other:?} (expected l1, l1+p or l1+cx)"
            ))),
        }
    }
}

/// Mean absolute difference.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    Ok(pred.sub(target)?.abs().mean())
}

/// Mean absolute difference of frozen feature maps, averaged over all
/// pyramid levels. The target side never carries gradients.
pub fn perceptual_loss(
    extractor: &FeatureExtractor,
    pred: &Tensor,
    target: &Tensor,
) -> Result<Tensor> {
    let pred_maps = extractor.features(pred)?;
    let target_maps = extractor.features(&target.detach())?;
    let mut total: Option<Tensor> = None;
    for (p, t) in pred_maps.iter().zip(&target_maps) {
        let term = p.sub(t)?.abs().mean();
        total = Some(match total {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    Ok(total.expect("extractor has at least one level").scale(1.0 / pred_maps.len() as f64))
}

/// Negative log contextual similarity between sampled feature sets,
/// averaged over the chosen pyramid levels. `seed` fixes the position
/// sample; pass a fresh one per training step.
pub fn contextual_loss(
    extractor: &FeatureExtractor,
    pred: &Tensor,
    target: &Tensor,
    params: &CxParams,
    seed: u64,
) -> Result<Tensor> {
    if params.max_positions > MAX_POSITION_BUDGET {
        return Err(Error::config(format!(
            "max_positions {} exceeds the {MAX_POSITION_BUDGET} budget",
            params.max_positions
        )));
    }
    let pred_maps = extractor.features(pred)?;
    let target_maps = extractor.features(&target.detach())?;
    let mut total: Option<Tensor> = None;
    for &level in &CX_LEVELS {
        let (_, _, h, w) = pred_maps[level].dims4()?;
        let positions =
            sample_positions(h, w, params.max_positions, derive_seed(seed, 7, level as u64))?;
        let pred_set = pred_maps[level].gather_positions(&positions)?;
        let target_set = target_maps[level].gather_positions(&positions)?;
        let cx = target_set.cx_sim(&pred_set, params.h, params.epsilon, params.normalization)?;
        let term = cx.ln()?.scale(-1.0);
        total = Some(match total {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    Ok(total.expect("at least one level is configured").scale(1.0 / CX_LEVELS.len() as f64))
}

/// The configured objective: pixel L1 plus at most one feature term,
/// unit weights on both.
pub fn hybrid_loss(
    mode: LossMode,
    extractor: &FeatureExtractor,
    pred: &Tensor,
    target: &Tensor,
    cx: &CxParams,
    seed: u64,
) -> Result<Tensor> {
    weighted_loss(mode, extractor, pred, target, cx, seed, 1.0, 1.0)
}

/// Hybrid objective with explicit term weights, the form the training
/// loop uses. `aux_weight` scales whichever feature term the mode
/// selects and is ignored for plain L1.
#[allow(clippy::too_many_arguments)]
pub fn weighted_loss(
    mode: LossMode,
    extractor: &FeatureExtractor,
    pred: &Tensor,
    target: &Tensor,
    cx: &CxParams,
    seed: u64,
    l1_weight: f64,
    aux_weight: f64,
) -> Result<Tensor> {
    let base = l1_loss(pred, target)?.scale(l1_weight);
    let aux = match mode {
        LossMode::L1 => return Ok(base),
        LossMode::L1Perceptual => perceptual_loss(extractor, pred, target)?,
        LossMode::L1Contextual => contextual_loss(extractor, pred, target, cx, seed)?,
    };
    base.add(&aux.scale(aux_weight))
}
