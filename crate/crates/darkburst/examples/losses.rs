//! The training objectives and quality metrics on worked inputs,
//! including a two-feature contextual similarity small enough to
//! follow by hand.
//!
//! Run with: cargo run --example losses

use std::f64::consts::FRAC_1_SQRT_2;

use darkburst::features::FeatureExtractor;
use darkburst::loss::{contextual_loss, l1_loss, perceptual_loss, CxParams};
use darkburst::metrics::{psnr, ssim};
use darkburst::pipeline::rgb_tensor;
use darkburst::raw::RgbImage;
use darkburst::sim::{synth_scene, SceneKind};
use darkburst::tensor::CxNorm;
use darkburst::{Result, Tensor};

fn main() -> Result<()> {
    // PSNR against the unit peak: a uniform 0.1 offset has mean
    // squared error 0.01, so -10 log10(0.01) is exactly 20 dB.
    // Structural similarity of an image with itself is exactly 1.
    let base = synth_scene(SceneKind::Texture, 32, 32, 2)?;
    let offset = RgbImage::new(
        32,
        32,
        base.data.iter().map(|v| v * 0.8 + 0.1).collect(),
    )?;
    let shifted = RgbImage::new(
        32,
        32,
        offset.data.iter().map(|v| v - 0.1).collect(),
    )?;
    println!("psnr(x, x + 0.1)    {:.12} dB", psnr(&offset, &shifted)?);
    println!("psnr(x, x)          {:?} dB", psnr(&base, &base)?);
    println!("ssim(x, x)          {}", ssim(&base, &base)?);

    // Contextual similarity between two feature vectors per side,
    // small enough to follow every intermediate. Targets are the unit
    // axes; the first prediction matches r1 exactly, the second sits
    // at 45 degrees between the axes.
    println!();
    println!("contextual similarity by hand (h = 0.5, eps = 1e-5):");
    let s = FRAC_1_SQRT_2;
    let targets = [[1.0, 0.0], [0.0, 1.0]];
    let preds = [[1.0, 0.0], [s, s]];
    println!("  targets     r1 = (1, 0)          r2 = (0, 1)");
    println!("  predictions s1 = (1, 0)          s2 = ({s:.4}, {s:.4})");

    // Cosine distances d_ij = 1 - <r_i, s_j> / (|r_i| |s_j|).
    let mut d = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            let dot: f64 = (0..2).map(|k| targets[i][k] * preds[j][k]).sum();
            let nr = (targets[i][0].powi(2) + targets[i][1].powi(2)).sqrt();
            let ns = (preds[j][0].powi(2) + preds[j][1].powi(2)).sqrt();
            d[i][j] = 1.0 - dot / (nr * ns);
        }
    }
    print_matrix("d", &d);

    // Relative distances divide each row by its minimum plus eps, so
    // the best match in a row sits near 1 and everything else grows.
    let (h, eps) = (0.5, 1e-5);
    let mut dt = [[0.0; 2]; 2];
    for i in 0..2 {
        let row_min = d[i][0].min(d[i][1]);
        for j in 0..2 {
            dt[i][j] = d[i][j] / (row_min + eps);
        }
    }
    print_matrix("dt", &dt);

    // Kernel weights w_ij = exp((1 - dt_ij) / h). Row 1 holds an
    // exact match, so its far entry underflows to a clean zero.
    let mut w = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            w[i][j] = ((1.0 - dt[i][j]) / h).exp();
        }
    }
    print_matrix("w", &w);

    // Row normalisation CX_ij = w_ij / sum_k w_ik, then the column
    // maxima average into the similarity.
    let mut cx = [[0.0; 2]; 2];
    for i in 0..2 {
        let z = w[i][0] + w[i][1];
        for j in 0..2 {
            cx[i][j] = w[i][j] / z;
        }
    }
    print_matrix("CX", &cx);
    let col1 = cx[0][0].max(cx[1][0]);
    let col2 = cx[0][1].max(cx[1][1]);
    let by_hand = 0.5 * (col1 + col2);
    println!("  column maxima   {col1:.6}  {col2:.6}");
    println!("  CX by hand      {by_hand:.9}");

    let r = Tensor::constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0])?;
    let p = Tensor::constant(&[2, 2], vec![1.0, 0.0, s, s])?;
    let fused = r.cx_sim(&p, h, eps, CxNorm::RowWise)?.item()?;
    println!("  CX fused op     {fused:.9}");
    println!("  agreement       {:.1e}", (fused - by_hand).abs());

    // The image-level objectives on a clean texture against a noisily
    // perturbed copy, through a frozen random feature extractor. An
    // identical pair drives every term to (or towards) zero.
    println!();
    let extractor = FeatureExtractor::new(12);
    let clean = rgb_tensor(&base)?;
    let noise: Vec<f64> = clean
        .data()
        .iter()
        .enumerate()
        .map(|(i, _)| 0.08 * (((i * 37 + 11) % 41) as f64 / 20.0 - 1.0))
        .collect();
    let noisy = clean.add(&Tensor::constant(clean.shape(), noise)?)?.clamp01();
    let cx_params = CxParams::default();
    println!("losses, noisy prediction vs clean target:");
    println!("  l1              {:.6}", l1_loss(&noisy, &clean)?.item()?);
    println!(
        "  perceptual      {:.6}",
        perceptual_loss(&extractor, &noisy, &clean)?.item()?
    );
    println!(
        "  contextual      {:.6}",
        contextual_loss(&extractor, &noisy, &clean, &cx_params, 1)?.item()?
    );
    println!("losses, identical pair:");
    println!("  l1              {:.6}", l1_loss(&clean, &clean)?.item()?);
    println!(
        "  perceptual      {:.6}",
        perceptual_loss(&extractor, &clean, &clean)?.item()?
    );
    println!(
        "  contextual      {:.6}",
        contextual_loss(&extractor, &clean, &clean, &cx_params, 1)?.item()?
    );
    Ok(())
}

fn print_matrix(label: &str, m: &[[f64; 2]; 2]) {
    println!("  {label:<4} [{:>12.6} {:>12.6}]", m[0][0], m[0][1]);
    println!("       [{:>12.6} {:>12.6}]", m[1][0], m[1][1]);
}
