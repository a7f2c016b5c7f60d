//! Tour of the reverse-mode engine: builds small graphs, runs one
//! backward pass each, and checks the analytic gradients against
//! central finite differences.
//!
//! Run with: cargo run --example autodiff

use darkburst::tensor::{backward, grad_check_multi, set_max};
use darkburst::{Result, Tensor};

fn main() -> Result<()> {
    // A weighted sum sum(w * x) has gradient w with respect to x, so
    // the backward pass must hand back the weight data untouched.
    let x = Tensor::variable(&[2, 3], vec![0.5, -1.0, 2.0, 0.25, 1.5, -0.75])?;
    let w = Tensor::constant(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])?;
    let loss = w.mul(&x)?.sum();
    let grads = backward(&loss)?;
    let gx = grads.grad(&x);
    println!("weighted sum        loss = {:.4}", loss.item()?);
    println!("gradient wrt x      {:?}", gx.data());
    println!("matches weights     {}", gx.data() == w.data());

    // The same mechanics drive a convolution. grad_check_multi probes
    // every input coordinate with central differences and reports the
    // worst relative disagreement with the tape's gradient.
    let image = Tensor::variable(
        &[1, 2, 4, 4],
        (0..32).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0).collect(),
    )?;
    let kernel = Tensor::variable(
        &[3, 2, 3, 3],
        (0..54).map(|i| ((i * 5 + 1) % 13) as f64 / 13.0 - 0.5).collect(),
    )?;
    let bias = Tensor::variable(&[3], vec![0.1, -0.2, 0.3])?;
    let worst = grad_check_multi(
        |probe| Ok(probe.conv2d(&kernel, &bias, 1, 1)?.sigmoid().sum()),
        &image,
        &[1e-5, 1e-4],
    )?;
    println!("conv sigmoid sum    worst fd disagreement = {worst:.2e}");

    // set_max fuses a burst by taking the elementwise maximum across
    // frames, so each output element routes its gradient to exactly
    // one frame. Per-frame gradients must therefore sum to the
    // gradient of a single-frame pass: every element is owned once.
    let a = Tensor::variable(&[1, 1, 2, 2], vec![0.9, 0.1, 0.5, 0.3])?;
    let b = Tensor::variable(&[1, 1, 2, 2], vec![0.2, 0.8, 0.6, 0.1])?;
    let fused = set_max(&[a.clone(), b.clone()])?;
    let grads = backward(&fused.sum())?;
    let ga = grads.grad(&a);
    let gb = grads.grad(&b);
    println!("set_max fused       {:?}", fused.data());
    println!("gradient to a       {:?}", ga.data());
    println!("gradient to b       {:?}", gb.data());
    let disjoint = ga
        .data()
        .iter()
        .zip(gb.data())
        .all(|(&x, &y)| x + y == 1.0 && x * y == 0.0);
    println!("ownership disjoint  {disjoint}");
    Ok(())
}
