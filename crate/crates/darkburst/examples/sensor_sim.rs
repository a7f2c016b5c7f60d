//! Exercises the synthetic sensor: the three scene generators, the
//! noise model driving short exposures, and burst generation with
//! per-frame jitter.
//!
//! Run with: cargo run --example sensor_sim

use darkburst::raw::RgbImage;
use darkburst::sim::{
    darken, derive_seed, make_burst_with, mosaic, synth_scene, NoiseParams, SceneKind,
    SensorConfig,
};
use darkburst::Result;

fn main() -> Result<()> {
    for kind in [SceneKind::Gradients, SceneKind::Shapes, SceneKind::Texture] {
        let scene = synth_scene(kind, 32, 32, 5)?;
        let lo = scene.data.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = scene.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean = scene.data.iter().sum::<f64>() / scene.data.len() as f64;
        println!("{kind:?}: range [{lo:.3}, {hi:.3}], mean {mean:.3}");
    }

    // Darkening a mid-grey pixel at ratio 100 many times lets the
    // sample variance be compared against the model: shot variance is
    // signal / shot_gain, read variance is read_sigma squared.
    let sensor = SensorConfig::default();
    let noise = NoiseParams::default();
    let grey = RgbImage::new(8, 8, vec![0.5; 192])?;
    let clean = mosaic(&grey, &sensor)?;
    let span = (sensor.white_level - sensor.black_level) as f64;
    let stored = (clean.values[0] as f64 - sensor.black_level as f64) / span;
    let attenuated = stored / 100.0;
    let model = attenuated / noise.shot_gain + noise.read_sigma * noise.read_sigma;
    let trials = 4000;
    let mut samples = Vec::with_capacity(trials);
    for t in 0..trials {
        let dark = darken(&clean, 100, &noise, derive_seed(9, 4, t as u64))?;
        samples.push((dark.values[0] as f64 - sensor.black_level as f64) / span);
    }
    let mean = samples.iter().sum::<f64>() / trials as f64;
    let var =
        samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
    println!();
    println!("darkened mid-grey at ratio 100 over {trials} trials:");
    println!("  mean    {mean:.6} (signal {attenuated:.6})");
    println!("  var     {var:.3e} (model {model:.3e})");

    // Every burst keeps frame 0 unshifted; later frames jitter by up
    // to max_shift pixels per axis before mosaicing and darkening.
    let scene = synth_scene(SceneKind::Texture, 32, 32, 8)?;
    let (burst, shifts) = make_burst_with(&scene, &sensor, &noise, 100, 6, 2, 17)?;
    println!();
    println!("burst of {} frames at ratio 100, max shift 2:", burst.len());
    for (k, (frame, (dx, dy))) in burst.iter().zip(&shifts).enumerate() {
        println!(
            "  frame {k}: shift ({dx:+}, {dy:+}), exposure {}/{} s",
            frame.exposure_num, frame.exposure_den
        );
    }
    Ok(())
}
