//! Block-matching flow, the large-motion mask derived from it, and
//! the safeguard that drops fully masked frames before fusion.
//!
//! Run with: cargo run --example motion_masking

use darkburst::config::MotionSection;
use darkburst::motion::{estimate_flow, large_motion_mask, mask_large_motion};
use darkburst::nets::{init_params, ArchConfig};
use darkburst::pipeline::{amplified_packed, burst_forward, packed_tensor};
use darkburst::raw::RgbImage;
use darkburst::sim::{make_burst, synth_scene, translate_replicate, NoiseParams, SceneKind, SensorConfig};
use darkburst::{Result, Tensor};

fn main() -> Result<()> {
    // A whole-image translation: content moves right 2, down 1. Every
    // block whose displaced position stays inside the frame recovers
    // the shift exactly; border blocks settle for partial matches.
    let scene = synth_scene(SceneKind::Texture, 16, 16, 6)?;
    let moved = translate_replicate(&scene, 2, 1);
    let flow = estimate_flow(&scene, &moved, 4, 4)?;
    let mut exact = 0;
    for by in (0..16).step_by(4) {
        for bx in (0..16).step_by(4) {
            let i = by * 16 + bx;
            if (flow.dx[i], flow.dy[i]) == (2.0, 1.0) {
                exact += 1;
            }
        }
    }
    println!("global (+2,+1) shift: {exact}/16 blocks recover it exactly");

    // A split field: the top half of the reference agrees with the
    // target, the bottom half shows content from two rows higher, so
    // its blocks match at displacement (0, -2).
    let master = synth_scene(SceneKind::Texture, 16, 16, 13)?;
    let mut reference = RgbImage::zeros(16, 16);
    for c in 0..3 {
        let src = master.plane(c);
        for y in 0..16usize {
            let from = if y < 8 { y } else { y - 2 };
            let dst = c * 256 + y * 16;
            reference.data[dst..dst + 16].copy_from_slice(&src[from * 16..from * 16 + 16]);
        }
    }
    let flow = estimate_flow(&reference, &master, 4, 4)?;
    let mask = large_motion_mask(&flow, 1.0);
    let flagged = mask.iter().filter(|&&f| f).count();
    let bottom_only = mask
        .iter()
        .enumerate()
        .all(|(i, &f)| f == (i / 16 >= 8));
    println!("half-image shift:     {flagged}/256 pixels flagged, exactly the bottom half: {bottom_only}");

    // Flows estimated at coarse resolution upscale to the packed grid:
    // extents double and so do the displacements.
    let up = flow.upscale(2);
    println!(
        "upscaled flow:        {}x{}, bottom displacement {} -> {}",
        up.width,
        up.height,
        flow.dy[15 * 16],
        up.dy[31 * 32]
    );

    // Masking multiplies by a 0/1 field, so flagged pixels zero out in
    // every channel and unflagged ones pass through bit-identically.
    let t = Tensor::full(&[1, 3, 16, 16], 0.6)?;
    let masked = mask_large_motion(&t, &flow, 1.0)?;
    let zeroed = masked.data().iter().filter(|&&v| v == 0.0).count();
    println!("masked tensor:        {zeroed}/{} values zeroed", masked.data().len());

    // When every pixel of a frame is flagged the frame is dropped
    // entirely, so a burst that disagrees everywhere degenerates to
    // the reference frame alone. A negative threshold forces that
    // here; the outputs must agree bit for bit.
    let params = init_params(&ArchConfig::desk(), 5)?.with_frozen_prefix("");
    let burst = make_burst(
        &scene,
        &SensorConfig::default(),
        &NoiseParams::default(),
        100,
        4,
        1,
        23,
    )?;
    let xs: Vec<Tensor> = burst
        .iter()
        .map(|f| packed_tensor(&amplified_packed(f, 100.0)?))
        .collect::<Result<_>>()?;
    let paranoid = MotionSection { enabled: true, block: 2, search_radius: 1, threshold: -1.0 };
    let outcome = burst_forward(&params, &xs, Some(&paranoid))?;
    let alone = burst_forward(&params, &xs[..1], None)?;
    println!(
        "paranoid threshold:   kept {}, dropped {}, equals reference-only: {}",
        outcome.kept,
        outcome.dropped,
        outcome.output.bit_eq(&alone.output)
    );
    Ok(())
}
