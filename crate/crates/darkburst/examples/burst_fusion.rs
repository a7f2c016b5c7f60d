//! Shows that burst fusion treats its frames as an unordered set: any
//! permutation produces the bit-identical image, a singleton burst
//! collapses to the single-frame network, and duplicated frames add
//! nothing.
//!
//! Run with: cargo run --example burst_fusion

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use darkburst::nets::{build_fine_input, coarse_forward, fine_forward, init_params, set_forward, ArchConfig};
use darkburst::pipeline::{amplified_packed, coarse_low_input, packed_tensor};
use darkburst::sim::{make_burst, synth_scene, NoiseParams, SceneKind, SensorConfig};
use darkburst::{Result, Tensor};

fn main() -> Result<()> {
    let arch = ArchConfig::desk();
    let params = init_params(&arch, 3)?.with_frozen_prefix("");
    println!(
        "desk architecture   {} tensors, {} parameters",
        params.len(),
        params.total_values()
    );

    // A real burst: four short exposures of the same scene with small
    // jitters, packed and amplified back to the reference brightness.
    let scene = synth_scene(SceneKind::Shapes, 32, 32, 11)?;
    let burst = make_burst(
        &scene,
        &SensorConfig::default(),
        &NoiseParams::default(),
        100,
        4,
        2,
        7,
    )?;
    let mut ts = Vec::new();
    for frame in &burst {
        let x = packed_tensor(&amplified_packed(frame, 100.0)?)?;
        let xc = coarse_forward(&params, &coarse_low_input(&x)?)?;
        ts.push(build_fine_input(&x, &xc)?);
    }
    let fused = set_forward(&params, &ts)?;
    println!("fused output        {:?}", fused.shape());

    // Ten random orderings of the same four frames.
    let mut rng = ChaCha12Rng::seed_from_u64(41);
    let mut all_identical = true;
    for _ in 0..10 {
        let mut shuffled = ts.clone();
        shuffled.shuffle(&mut rng);
        all_identical &= set_forward(&params, &shuffled)?.bit_eq(&fused);
    }
    println!("10 permutations     bit-identical: {all_identical}");

    // A one-frame set must be exactly the single-frame network, and m
    // copies of one frame must be exactly one copy: the elementwise
    // maximum over identical feature maps is the map itself.
    let single = set_forward(&params, &ts[..1])?;
    println!(
        "singleton == fine   {}",
        single.bit_eq(&fine_forward(&params, &ts[0])?)
    );
    let copies: Vec<Tensor> = vec![ts[0].clone(); 4];
    println!(
        "4 copies == 1 copy  {}",
        set_forward(&params, &copies)?.bit_eq(&single)
    );
    Ok(())
}
