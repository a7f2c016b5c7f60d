//! Drivers behind the command-line verbs: staged training, held-out
//! evaluation, burst enhancement and the smoke-test battery.
//!
//! Everything here is deterministic given the run configuration.
//! Per-item randomness (scene pick, crop, burst size, position
//! sampling) derives from the master seed and the item counter, so a
//! repeated run replays the identical sequence of updates.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::checkpoint::{load_checkpoint, Checkpoint};
use crate::config::{RunConfig, Stage};
use crate::dataset::{load_dataset, LoadedScene};
use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::formats::read_drb;
use crate::loss::{l1_loss, weighted_loss, LossMode};
use crate::metrics::{psnr, ssim};
use crate::nets::{init_params, NetParams};
use crate::optim::{adam_step_buffers, AdamState};
use crate::pipeline::{
    burst_forward, clean_packed_target, coarse_low_input, input_baseline_rgb, packed_tensor,
    rgb_tensor, single_forward, tensor_rgb, StageTimings,
};
use crate::raw::{compute_ratio, pack_bayer, PackedRaw, RgbImage};
use crate::sim::derive_seed;
use crate::tensor::{backward, Tensor};

/// Seed tags for the training stream; disjoint from the dataset tags.
const ITEM_SEED_TAG: u64 = 20;
const LOSS_SEED_TAG: u64 = 21;
/// The frozen feature pyramid is part of the objective, so its seed
/// is fixed rather than configurable.
const FEATURE_SEED: u64 = 90;

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Mean batch loss per optimisation step.
    pub losses: Vec<f64>,
}

fn stage_rank(stage: Stage) -> u8 {
    match stage {
        Stage::Coarse => 0,
        Stage::Fine => 1,
        Stage::Set => 2,
    }
}

/// Parameters a stage starts from. The first stage initialises
/// fresh; later stages continue from the previous stage's checkpoint
/// and refuse to skip ahead.
fn initial_params(config: &RunConfig, stage: Stage) -> Result<NetParams> {
    let path = match (&config.train.init_from, stage) {
        (None, Stage::Coarse) => return init_params(&config.arch, config.train.seed),
        (None, Stage::Fine) => {
            return Err(Error::config(
                "the fine stage continues from a coarse checkpoint; set train.init_from",
            ))
        }
        (None, Stage::Set) => {
            return Err(Error::config(
                "the set stage continues from a fine checkpoint; set train.init_from",
            ))
        }
        (Some(path), _) => path,
    };
    let loaded = load_checkpoint(path)?;
    if loaded.params.config() != &config.arch {
        return Err(Error::config(format!(
            "checkpoint {} was trained with a different architecture",
            path.display()
        )));
    }
    if stage == Stage::Set && stage_rank(loaded.stage) < stage_rank(Stage::Fine) {
        return Err(Error::config(format!(
            "the set stage needs a fine-stage checkpoint, but {} stopped at stage {}",
            path.display(),
            loaded.stage
        )));
    }
    Ok(loaded.params)
}

pub fn train(config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let stage = config
        .train
        .stage
        .ok_or_else(|| Error::config("train.stage must be set (coarse, fine or set)"))?;
    let dir = config
        .data
        .dir
        .as_ref()
        .ok_or_else(|| Error::config("data.dir must point at a generated dataset"))?;
    let freeze = config.freeze_coarse_for(stage);
    if stage == Stage::Coarse && freeze {
        return Err(Error::config(
            "freezing the coarse network during the coarse stage leaves nothing to train",
        ));
    }
    let scenes = load_dataset(dir)?;
    let train_count = scenes.len().saturating_sub(config.data.holdout);
    if train_count == 0 {
        return Err(Error::config(format!(
            "no scenes left to train on: {} in the dataset, {} held out",
            scenes.len(),
            config.data.holdout
        )));
    }
    let train_scenes = &scenes[..train_count];

    let mut params = initial_params(config, stage)?;
    // Optimiser moments restart with each stage: the loss surface
    // changes between stages, so stale momentum would misdirect the
    // first updates.
    let mut adam = AdamState::new(&params);
    let steps = config.steps_for(stage);
    let mode = config.loss_mode_for(stage);
    let extractor = FeatureExtractor::with_levels(FEATURE_SEED, config.features_levels)?;
    let master = config.train.seed;
    let mut losses = Vec::with_capacity(steps);

    for step in 0..steps {
        // Plateau schedule: full rate for the first half, a tenth
        // after.
        let lr = if step < steps / 2 { config.train.lr } else { config.train.lr / 10.0 };
        let view = if freeze { params.with_frozen_prefix("coarse.") } else { params.clone() };
        let mut grad_sum: Vec<Vec<f64>> =
            params.iter().map(|(_, t)| vec![0.0; t.data().len()]).collect();
        let mut loss_sum = 0.0;
        for b in 0..config.train.batch {
            let item = (step * config.train.batch + b) as u64;
            let item_seed = derive_seed(master, ITEM_SEED_TAG, item);
            let loss = item_loss(config, stage, mode, &view, &extractor, train_scenes, item_seed)?;
            loss_sum += loss.data()[0];
            let grads = backward(&loss)?;
            for ((_, t), acc) in params.iter().zip(grad_sum.iter_mut()) {
                let g = grads.grad(t);
                for (a, &gv) in acc.iter_mut().zip(g.data()) {
                    *a += gv;
                }
            }
        }
        let scale = 1.0 / config.train.batch as f64;
        for acc in &mut grad_sum {
            for a in acc.iter_mut() {
                *a *= scale;
            }
        }
        adam_step_buffers(&mut params, &grad_sum, &mut adam, lr)?;
        losses.push(loss_sum * scale);
    }
    Ok(TrainOutcome { checkpoint: Checkpoint { params, adam, stage }, losses })
}

/// One training item: pick a scene, ratio and crop from the item
/// seed, run the stage's forward path and return the scalar loss.
fn item_loss(
    config: &RunConfig,
    stage: Stage,
    mode: LossMode,
    view: &NetParams,
    extractor: &FeatureExtractor,
    scenes: &[LoadedScene],
    item_seed: u64,
) -> Result<Tensor> {
    let mut rng = ChaCha12Rng::seed_from_u64(item_seed);
    let scene = &scenes[rng.random_range(0..scenes.len())];
    let ratio = config.data.ratios[rng.random_range(0..config.data.ratios.len())];
    let frames = scene.burst(ratio)?;
    let packed0 = pack_bayer(&frames[0], ratio as f64)?;
    let patch = config.train.patch.min(packed0.width).min(packed0.height);
    let max_x = packed0.width - patch;
    let max_y = packed0.height - patch;
    let x0 = if max_x > 0 { rng.random_range(0..=max_x) } else { 0 };
    let y0 = if max_y > 0 { rng.random_range(0..=max_y) } else { 0 };
    let gt_crop = crop_rgb(&scene.gt, 2 * x0, 2 * y0, 2 * patch)?;
    match stage {
        Stage::Coarse => {
            // The coarse stage regresses packed-domain values, where
            // the feature losses (built for RGB) do not apply, so its
            // objective is always plain L1.
            let x = packed_tensor(&crop_packed(&packed0, x0, y0, patch))?;
            let out = crate::nets::coarse_forward(view, &coarse_low_input(&x)?)?;
            let target = clean_packed_target(&gt_crop, &config.sensor)?.bilinear_resize(0.5)?;
            Ok(l1_loss(&out, &target)?.scale(config.loss.l1_weight))
        }
        Stage::Fine => {
            let x = packed_tensor(&crop_packed(&packed0, x0, y0, patch))?;
            let (_, y) = single_forward(view, &x)?;
            let target = rgb_tensor(&gt_crop)?;
            weighted_loss(
                mode,
                extractor,
                &y,
                &target,
                &config.cx,
                derive_seed(item_seed, LOSS_SEED_TAG, 0),
                config.loss.l1_weight,
                config.loss.aux_weight,
            )
        }
        Stage::Set => {
            let cap = frames.len().min(config.train.burst_max).max(1);
            let floor = config.train.burst_min.clamp(1, cap);
            let m = rng.random_range(floor..=cap);
            let mut xs = Vec::with_capacity(m);
            for frame in &frames[..m] {
                let packed = pack_bayer(frame, ratio as f64)?;
                xs.push(packed_tensor(&crop_packed(&packed, x0, y0, patch))?);
            }
            // Training bursts are nearly aligned by construction, so
            // no motion masking runs here; masking is an inference
            // safeguard.
            let outcome = burst_forward(view, &xs, None)?;
            let target = rgb_tensor(&gt_crop)?;
            weighted_loss(
                mode,
                extractor,
                &outcome.output,
                &target,
                &config.cx,
                derive_seed(item_seed, LOSS_SEED_TAG, 0),
                config.loss.l1_weight,
                config.loss.aux_weight,
            )
        }
    }
}

fn crop_packed(p: &PackedRaw, x0: usize, y0: usize, size: usize) -> PackedRaw {
    let mut data = Vec::with_capacity(4 * size * size);
    for c in 0..4 {
        let plane = c * p.width * p.height;
        for y in 0..size {
            let row = plane + (y0 + y) * p.width + x0;
            data.extend_from_slice(&p.data[row..row + size]);
        }
    }
    PackedRaw { width: size, height: size, data, ratio: p.ratio }
}

fn crop_rgb(img: &RgbImage, x0: usize, y0: usize, size: usize) -> Result<RgbImage> {
    if x0 + size > img.width || y0 + size > img.height {
        return Err(Error::shape("crop window leaves the image"));
    }
    let mut data = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        let plane = c * img.width * img.height;
        for y in 0..size {
            let row = plane + (y0 + y) * img.width + x0;
            data.extend_from_slice(&img.data[row..row + size]);
        }
    }
    RgbImage::new(size, size, data)
}

#[derive(Debug, Clone, Copy)]
pub struct EvalRow {
    pub scene: usize,
    pub ratio: u32,
    pub psnr: f64,
    pub ssim: f64,
    pub l1: f64,
    /// Quality of the no-network baseline (amplified, naively
    /// demosaiced input) against the same ground truth.
    pub input_psnr: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Aggregate {
    pub count: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub l1: f64,
    pub input_psnr: f64,
}

impl Aggregate {
    fn of(rows: &[&EvalRow]) -> Aggregate {
        let n = rows.len() as f64;
        let mut agg = Aggregate { count: rows.len(), ..Default::default() };
        for r in rows {
            agg.psnr += r.psnr / n;
            agg.ssim += r.ssim / n;
            agg.l1 += r.l1 / n;
            agg.input_psnr += r.input_psnr / n;
        }
        agg
    }
}

#[derive(Debug)]
pub struct MetricsReport {
    pub rows: Vec<EvalRow>,
    /// One entry per amplification ratio, ascending.
    pub per_ratio: Vec<(u32, Aggregate)>,
    pub overall: Aggregate,
}

fn fmt_metric(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".to_string() } else { "-inf".to_string() }
    } else {
        format!("{v:.6}")
    }
}

impl MetricsReport {
    /// Tab-separated report: one row per image, one aggregate per
    /// ratio, one overall row. The float formatting is fixed so a
    /// repeated run renders byte-identical output.
    pub fn render(&self) -> String {
        let mut out = String::from("kind\tratio\tscene\tpsnr\tssim\tl1\tinput_psnr\n");
        let line = |out: &mut String, kind: &str, ratio: &str, scene: &str, p, s, l, ip| {
            out.push_str(&format!(
                "{kind}\t{ratio}\t{scene}\t{}\t{}\t{}\t{}\n",
                fmt_metric(p),
                fmt_metric(s),
                fmt_metric(l),
                fmt_metric(ip)
            ));
        };
        for r in &self.rows {
            line(
                &mut out,
                "image",
                &r.ratio.to_string(),
                &r.scene.to_string(),
                r.psnr,
                r.ssim,
                r.l1,
                r.input_psnr,
            );
        }
        for (ratio, agg) in &self.per_ratio {
            line(&mut out, "ratio", &ratio.to_string(), "-", agg.psnr, agg.ssim, agg.l1, agg.input_psnr);
        }
        let a = &self.overall;
        line(&mut out, "all", "All", "-", a.psnr, a.ssim, a.l1, a.input_psnr);
        out
    }
}

fn mean_abs(a: &RgbImage, b: &RgbImage) -> f64 {
    let n = a.data.len() as f64;
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / n
}

/// Runs the network over the held-out scenes of a generated dataset
/// and aggregates image metrics per ratio. With `holdout` 0 every
/// scene is evaluated. `burst_limit` caps the frames fed per burst.
pub fn evaluate(
    params: &NetParams,
    config: &RunConfig,
    dir: &Path,
    burst_limit: Option<usize>,
) -> Result<MetricsReport> {
    let scenes = load_dataset(dir)?;
    let start = scenes.len().saturating_sub(config.data.holdout);
    let eval = if config.data.holdout == 0 { &scenes[..] } else { &scenes[start..] };
    let frozen = params.with_frozen_prefix("");
    let mut rows = Vec::new();
    for scene in eval {
        for (ratio, frames) in &scene.bursts {
            let take = burst_limit.unwrap_or(frames.len()).clamp(1, frames.len());
            let mut xs = Vec::with_capacity(take);
            for frame in &frames[..take] {
                xs.push(packed_tensor(&pack_bayer(frame, *ratio as f64)?)?);
            }
            let outcome = burst_forward(&frozen, &xs, Some(&config.motion))?;
            let img = tensor_rgb(&outcome.output)?;
            let baseline = input_baseline_rgb(&pack_bayer(&frames[0], *ratio as f64)?)?;
            rows.push(EvalRow {
                scene: scene.index,
                ratio: *ratio,
                psnr: psnr(&img, &scene.gt)?,
                ssim: ssim(&img, &scene.gt)?,
                l1: mean_abs(&img, &scene.gt),
                input_psnr: psnr(&baseline, &scene.gt)?,
            });
        }
    }
    if rows.is_empty() {
        return Err(Error::data("the dataset holds no scenes to evaluate"));
    }
    let mut ratios: Vec<u32> = rows.iter().map(|r| r.ratio).collect();
    ratios.sort_unstable();
    ratios.dedup();
    let per_ratio = ratios
        .into_iter()
        .map(|ratio| {
            let group: Vec<&EvalRow> = rows.iter().filter(|r| r.ratio == ratio).collect();
            (ratio, Aggregate::of(&group))
        })
        .collect();
    let overall = Aggregate::of(&rows.iter().collect::<Vec<_>>());
    Ok(MetricsReport { rows, per_ratio, overall })
}

#[derive(Debug)]
pub struct EnhanceReport {
    pub output: RgbImage,
    pub frames_loaded: usize,
    pub kept: usize,
    pub dropped: usize,
    pub ratio: f64,
    pub timings: StageTimings,
}

/// Enhances a stored burst with a trained checkpoint. The ratio
/// defaults to the configured reference exposure over the first
/// frame's exposure; `motion_enabled` overrides the config switch.
pub fn enhance(
    config: &RunConfig,
    checkpoint: &Checkpoint,
    burst_path: &Path,
    ratio: Option<f64>,
    burst_limit: Option<usize>,
    motion_enabled: Option<bool>,
) -> Result<EnhanceReport> {
    let frames = read_drb(burst_path)?;
    let loaded = frames.len();
    let take = burst_limit.unwrap_or(loaded).clamp(1, loaded);
    let ratio = match ratio {
        Some(r) if r > 0.0 && r.is_finite() => r,
        Some(r) => return Err(Error::config(format!("ratio must be positive, got {r}"))),
        None => {
            compute_ratio(config.sensor.exposure_num, config.sensor.exposure_den, &frames[0])
        }
    };
    let frozen = checkpoint.params.with_frozen_prefix("");
    let mut xs = Vec::with_capacity(take);
    for frame in &frames[..take] {
        xs.push(packed_tensor(&pack_bayer(frame, ratio)?)?);
    }
    let mut motion = config.motion.clone();
    if let Some(on) = motion_enabled {
        motion.enabled = on;
    }
    let outcome = burst_forward(&frozen, &xs, Some(&motion))?;
    Ok(EnhanceReport {
        output: tensor_rgb(&outcome.output)?,
        frames_loaded: loaded,
        kept: outcome.kept,
        dropped: outcome.dropped,
        ratio,
        timings: outcome.timings,
    })
}

pub struct SelftestResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn run_check(
    results: &mut Vec<SelftestResult>,
    name: &'static str,
    check: impl FnOnce() -> Result<()>,
) {
    match check() {
        Ok(()) => results.push(SelftestResult { name, passed: true, detail: String::new() }),
        Err(e) => {
            results.push(SelftestResult { name, passed: false, detail: e.to_string() })
        }
    }
}

fn expect(cond: bool, detail: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::data(detail.to_string()))
    }
}

/// Fast invariant battery behind the `selftest` verb. Each check
/// reports independently; the caller turns any failure into a
/// non-zero exit.
pub fn selftest() -> Vec<SelftestResult> {
    use crate::nets::{set_forward, ArchConfig};
    use crate::sim::{make_burst, synth_scene, NoiseParams, SceneKind, SensorConfig};
    use crate::tensor::grad_check_multi;

    let mut results = Vec::new();

    run_check(&mut results, "autodiff matches finite differences", || {
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let x = Tensor::variable(
            &[1, 2, 4, 4],
            (0..32).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )?;
        let k = Tensor::constant(
            &[2, 2, 3, 3],
            (0..36).map(|_| rng.random_range(-0.5..0.5)).collect(),
        )?;
        let b = Tensor::constant(&[2], vec![0.1, -0.2])?;
        let worst = grad_check_multi(
            |t| Ok(t.conv2d(&k, &b, 1, 1)?.leaky_relu(0.2).sigmoid().mean()),
            &x,
            &[1e-5, 3e-5, 1e-4],
        )?;
        expect(worst < 1e-4, &format!("worst relative error {worst:.2e}"))
    });

    let params = match init_params(&ArchConfig::desk(), 33) {
        Ok(p) => p,
        Err(e) => {
            results.push(SelftestResult {
                name: "network initialisation",
                passed: false,
                detail: e.to_string(),
            });
            return results;
        }
    };
    let frozen = params.with_frozen_prefix("");

    let scene = synth_scene(SceneKind::Shapes, 32, 32, 3).unwrap();
    let burst = make_burst(
        &scene,
        &SensorConfig::default(),
        &NoiseParams::default(),
        100,
        3,
        1,
        9,
    )
    .unwrap();
    let xs: Vec<Tensor> = burst
        .iter()
        .map(|f| packed_tensor(&pack_bayer(f, 100.0).unwrap()).unwrap())
        .collect();

    run_check(&mut results, "set fusion is permutation invariant", || {
        let mut ts = Vec::new();
        for x in &xs {
            let xc = crate::nets::coarse_forward(&frozen, &coarse_low_input(x)?)?;
            ts.push(crate::nets::build_fine_input(x, &xc)?);
        }
        let a = set_forward(&frozen, &ts)?;
        let reordered: Vec<Tensor> = vec![ts[2].clone(), ts[0].clone(), ts[1].clone()];
        let b = set_forward(&frozen, &reordered)?;
        expect(a.data() == b.data(), "permuted burst changed the output")
    });

    run_check(&mut results, "one-frame burst equals the single pathway", || {
        let (_, single) = single_forward(&frozen, &xs[0])?;
        let outcome = burst_forward(&frozen, &xs[..1], None)?;
        expect(outcome.output.data() == single.data(), "outputs differ")
    });

    run_check(&mut results, "checkpoint round trip is bit exact", || {
        let dir = std::env::temp_dir().join(format!("darkburst-selftest-{}", std::process::id()));
        std::fs::create_dir_all(&dir)?;
        let path = dir.join("roundtrip.dbck");
        let ckpt = Checkpoint {
            params: params.clone(),
            adam: AdamState::new(&params),
            stage: Stage::Coarse,
        };
        crate::checkpoint::save_checkpoint(&path, &ckpt)?;
        let first = std::fs::read(&path)?;
        let loaded = load_checkpoint(&path)?;
        crate::checkpoint::save_checkpoint(&path, &loaded)?;
        let second = std::fs::read(&path)?;
        let _ = std::fs::remove_dir_all(&dir);
        expect(first == second, "re-saved checkpoint bytes differ")
    });

    run_check(&mut results, "burst container round trips", || {
        let dir = std::env::temp_dir().join(format!("darkburst-selftest-{}", std::process::id()));
        std::fs::create_dir_all(&dir)?;
        let path = dir.join("roundtrip.drb");
        crate::formats::write_drb(&path, &burst)?;
        let back = read_drb(&path)?;
        let _ = std::fs::remove_dir_all(&dir);
        expect(
            back.len() == burst.len() && back.iter().zip(&burst).all(|(a, b)| a.values == b.values),
            "frames changed across the round trip",
        )
    });

    run_check(&mut results, "optimizer follows the gradient sign", || {
        let mut p = init_params(&ArchConfig::desk(), 12)?;
        let mut adam = AdamState::new(&p);
        let before = p.get("fine.head.b")?.data().to_vec();
        let grads: Vec<Vec<f64>> = p
            .iter()
            .map(|(name, t)| {
                let fill = if name == "fine.head.b" { 1.0 } else { 0.0 };
                vec![fill; t.data().len()]
            })
            .collect();
        adam_step_buffers(&mut p, &grads, &mut adam, 1e-3)?;
        let after = p.get("fine.head.b")?.data().to_vec();
        let moved = before
            .iter()
            .zip(&after)
            .all(|(b, a)| (b - a - 1e-3).abs() < 1e-6);
        expect(moved, "first step did not move by lr against the gradient")
    });

    results
}
