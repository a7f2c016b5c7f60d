//! Walks one frame through the raw processing path: render a scene,
//! mosaic it into sensor counts, darken it, then pack, amplify and
//! naively demosaic it back to RGB for comparison against the ground
//! truth.
//!
//! Run with: cargo run --example raw_pipeline

use darkburst::metrics::psnr;
use darkburst::pipeline::input_baseline_rgb;
use darkburst::raw::{compute_ratio, pack_bayer};
use darkburst::sim::{darken, mosaic, synth_scene, NoiseParams, SceneKind, SensorConfig};
use darkburst::Result;

fn main() -> Result<()> {
    let scene = synth_scene(SceneKind::Shapes, 64, 64, 21)?;
    let sensor = SensorConfig::default();
    println!(
        "scene               64x64 rgb, sensor black {} white {}, reference exposure {}/{} s",
        sensor.black_level, sensor.white_level, sensor.exposure_num, sensor.exposure_den
    );

    // The clean mosaic samples one colour per pixel in the RGGB
    // pattern at the long reference exposure.
    let clean = mosaic(&scene, &sensor)?;
    let (lo, hi) = count_range(&clean.values);
    println!("clean mosaic        counts {lo}..{hi}");

    // Darkening attenuates the signal 100x and adds shot and read
    // noise; the exposure shrinks by the same factor.
    let dark = darken(&clean, 100, &NoiseParams::default(), 3)?;
    let (lo, hi) = count_range(&dark.values);
    println!(
        "dark mosaic         counts {lo}..{hi}, exposure {}/{} s",
        dark.exposure_num, dark.exposure_den
    );

    // The amplification that matches the short exposure back to the
    // reference falls straight out of the exposure rationals.
    let ratio = compute_ratio(sensor.exposure_num, sensor.exposure_den, &dark);
    println!("amplification       x{ratio:.0}");

    // Packing halves both extents and stacks the RGGB quad positions
    // as four channels, black-corrected, normalised and amplified.
    let packed = pack_bayer(&dark, ratio)?;
    println!(
        "packed              {}x{}x4 planes, ratio {:.0}",
        packed.width, packed.height, packed.ratio
    );

    // The no-network baseline: average the greens, clip, upsample back
    // to mosaic resolution. This is what the networks must beat.
    let baseline = input_baseline_rgb(&packed)?;
    let bright = input_baseline_rgb(&pack_bayer(&clean, 1.0)?)?;
    println!("baseline psnr       {:.2} dB (amplified dark frame)", psnr(&baseline, &scene)?);
    println!("bright psnr         {:.2} dB (clean frame, demosaic cost only)", psnr(&bright, &scene)?);

    let dir = tempfile::tempdir()?;
    let gt_path = dir.path().join("gt.ppm");
    let out_path = dir.path().join("amplified.ppm");
    darkburst::formats::write_ppm(&gt_path, &scene)?;
    darkburst::formats::write_ppm(&out_path, &baseline)?;
    println!("wrote               {} and {}", gt_path.display(), out_path.display());
    Ok(())
}

fn count_range(values: &[u16]) -> (u16, u16) {
    let lo = values.iter().copied().min().unwrap_or(0);
    let hi = values.iter().copied().max().unwrap_or(0);
    (lo, hi)
}
