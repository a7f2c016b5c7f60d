//! The three enhancement networks: a coarse raw-domain U-Net, a fine
//! RGB network guided by the coarse output, and a set variant of the
//! fine network that fuses any number of frames.
//!
//! All three draw from one named parameter store. The set network adds
//! no parameters of its own: it reuses the fine network's weights,
//! running the first two encoder blocks once per frame and replacing
//! the per-frame features with their elementwise maximum from the
//! second block onward. Skip connections always read the pooled
//! features, so the decoder is frame-count-agnostic and a one-frame
//! set reproduces the fine network bit for bit.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::optim::snap_f32;
use crate::tensor::{concat, set_max, Tensor};

const SLOPE: f64 = 0.2;

/// Variance multiplier for the two output heads. Their activations
/// feed a hard clip (fine) or a sigmoid (coarse); at plain He scale
/// the pre-activation spread is several units wide, which pins most
/// pixels against the clip bounds and silences their gradients. A
/// small head keeps the initial predictions inside the representable
/// interior so every pixel trains from the first step.
const HEAD_INIT_SCALE: f64 = 0.05;

/// Width, depth and ablation toggles shared by all three networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchConfig {
    /// Filters at the first level; level k uses `base_filters << k`.
    pub base_filters: usize,
    pub encoder_levels: usize,
    pub residual_blocks: usize,
    /// When false the fine network runs standalone on 4 raw channels,
    /// with no coarse guidance and no noise map.
    pub use_coarse_to_fine: bool,
    pub use_residual: bool,
    pub use_se: bool,
    pub se_reduction: usize,
}

impl ArchConfig {
    /// Small configuration that trains in minutes on a CPU.
    pub fn desk() -> ArchConfig {
        ArchConfig {
            base_filters: 8,
            encoder_levels: 3,
            residual_blocks: 4,
            use_coarse_to_fine: true,
            use_residual: true,
            use_se: true,
            se_reduction: 4,
        }
    }

    /// Full-scale configuration; constructible but far too slow to
    /// train here.
    pub fn paper() -> ArchConfig {
        ArchConfig {
            base_filters: 32,
            encoder_levels: 5,
            residual_blocks: 16,
            use_coarse_to_fine: true,
            use_residual: true,
            use_se: true,
            se_reduction: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_levels < 2 {
            return Err(Error::config("encoder needs at least 2 levels"));
        }
        if self.base_filters == 0 {
            return Err(Error::config("base_filters must be positive"));
        }
        if self.use_se {
            if self.se_reduction == 0 {
                return Err(Error::config("se_reduction must be positive"));
            }
            let bottleneck = self.filters_at(self.encoder_levels - 1);
            if bottleneck % self.se_reduction != 0 {
                return Err(Error::config(format!(
                    "bottleneck width {bottleneck} is not divisible by se_reduction {}",
                    self.se_reduction
                )));
            }
        }
        Ok(())
    }

    pub fn filters_at(&self, level: usize) -> usize {
        self.base_filters << level
    }

    /// Both spatial extents of a network input must divide this.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.encoder_levels - 1)
    }

    pub fn fine_in_channels(&self) -> usize {
        if self.use_coarse_to_fine {
            12
        } else {
            4
        }
    }
}

/// Named parameter tensors in a stable insertion order; the order is
/// what checkpoint files serialise.
#[derive(Debug, Clone)]
pub struct NetParams {
    config: ArchConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl NetParams {
    fn new(config: ArchConfig) -> NetParams {
        NetParams {
            config,
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    fn add(&mut self, name: String, tensor: Tensor) -> Result<()> {
        if self.index.contains_key(&name) {
            return Err(Error::data(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::data(format!("missing parameter {name}")))
    }

    /// Replaces a parameter's tensor; the shape must not change.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::data(format!("missing parameter {name}")))?;
        if self.tensors[i].shape() != tensor.shape() {
            return Err(Error::shape(format!(
                "parameter {name} is {:?}, replacement is {:?}",
                self.tensors[i].shape(),
                tensor.shape()
            )));
        }
        self.tensors[i] = tensor;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar parameter count.
    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Copy in which parameters under `prefix` are detached, so no
    /// gradients flow to them and the optimizer leaves them exactly
    /// in place.
    pub fn with_frozen_prefix(&self, prefix: &str) -> NetParams {
        let mut out = self.clone();
        for (i, name) in out.names.iter().enumerate() {
            if name.starts_with(prefix) {
                out.tensors[i] = out.tensors[i].detach();
            }
        }
        out
    }
}

/// Deterministic fan-in-scaled initialisation; every value is snapped
/// to an f32-representable number so checkpoints round-trip exactly.
pub fn init_params(config: &ArchConfig, seed: u64) -> Result<NetParams> {
    config.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut params = NetParams::new(*config);
    if config.use_coarse_to_fine {
        add_encoder(&mut params, &mut rng, "coarse", 4)?;
        add_decoder(&mut params, &mut rng, "coarse")?;
        add_conv_scaled(&mut params, &mut rng, "coarse.head", 4, config.base_filters, 3, HEAD_INIT_SCALE)?;
    }
    add_encoder(&mut params, &mut rng, "fine", config.fine_in_channels())?;
    if config.use_residual {
        let width = config.filters_at(config.encoder_levels - 1);
        for i in 0..config.residual_blocks {
            add_conv(&mut params, &mut rng, &format!("fine.res{i}.c0"), width, width, 3)?;
            add_conv(&mut params, &mut rng, &format!("fine.res{i}.c1"), width, width, 3)?;
            if config.use_se {
                let hidden = width / config.se_reduction;
                add_conv(&mut params, &mut rng, &format!("fine.res{i}.se.r"), hidden, width, 1)?;
                add_conv(&mut params, &mut rng, &format!("fine.res{i}.se.e"), width, hidden, 1)?;
            }
        }
    }
    add_decoder(&mut params, &mut rng, "fine")?;
    add_conv_scaled(&mut params, &mut rng, "fine.head", 12, config.base_filters, 3, HEAD_INIT_SCALE)?;
    Ok(params)
}

fn add_encoder(
    params: &mut NetParams,
    rng: &mut ChaCha12Rng,
    prefix: &str,
    in_channels: usize,
) -> Result<()> {
    let config = params.config;
    for k in 0..config.encoder_levels {
        let cin = if k == 0 { in_channels } else { config.filters_at(k - 1) };
        let cout = config.filters_at(k);
        add_conv(params, rng, &format!("{prefix}.enc{k}.c0"), cout, cin, 3)?;
        add_conv(params, rng, &format!("{prefix}.enc{k}.c1"), cout, cout, 3)?;
    }
    Ok(())
}

fn add_decoder(params: &mut NetParams, rng: &mut ChaCha12Rng, prefix: &str) -> Result<()> {
    let config = params.config;
    for k in (0..config.encoder_levels - 1).rev() {
        let cin = config.filters_at(k + 1);
        let cout = config.filters_at(k);
        add_tconv(params, rng, &format!("{prefix}.dec{k}.up"), cin, cout)?;
        add_conv(params, rng, &format!("{prefix}.dec{k}.c0"), cout, 2 * cout, 3)?;
        add_conv(params, rng, &format!("{prefix}.dec{k}.c1"), cout, cout, 3)?;
    }
    Ok(())
}

fn add_conv(
    params: &mut NetParams,
    rng: &mut ChaCha12Rng,
    name: &str,
    f_out: usize,
    f_in: usize,
    k: usize,
) -> Result<()> {
    add_conv_scaled(params, rng, name, f_out, f_in, k, 1.0)
}

fn add_conv_scaled(
    params: &mut NetParams,
    rng: &mut ChaCha12Rng,
    name: &str,
    f_out: usize,
    f_in: usize,
    k: usize,
    scale: f64,
) -> Result<()> {
    let std = scale * (2.0 / (f_in * k * k) as f64).sqrt();
    let data: Vec<f64> = (0..f_out * f_in * k * k)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            snap_f32(z * std)
        })
        .collect();
    params.add(format!("{name}.w"), Tensor::variable(&[f_out, f_in, k, k], data)?)?;
    params.add(format!("{name}.b"), Tensor::variable(&[f_out], vec![0.0; f_out])?)
}

fn add_tconv(
    params: &mut NetParams,
    rng: &mut ChaCha12Rng,
    name: &str,
    c_in: usize,
    c_out: usize,
) -> Result<()> {
    // A 2x2 stride-2 kernel touches each output once per input
    // channel, so the effective fan-in is just c_in.
    let std = (2.0 / c_in as f64).sqrt();
    let data: Vec<f64> = (0..c_in * c_out * 4)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            snap_f32(z * std)
        })
        .collect();
    params.add(format!("{name}.w"), Tensor::variable(&[c_in, c_out, 2, 2], data)?)?;
    params.add(format!("{name}.b"), Tensor::variable(&[c_out], vec![0.0; c_out])?)
}

/// Two padded 3x3 convolutions, each followed by the leaky
/// activation.
fn conv_pair(params: &NetParams, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let h = x
        .conv2d(params.get(&format!("{prefix}.c0.w"))?, params.get(&format!("{prefix}.c0.b"))?, 1, 1)?
        .leaky_relu(SLOPE);
    Ok(h
        .conv2d(params.get(&format!("{prefix}.c1.w"))?, params.get(&format!("{prefix}.c1.b"))?, 1, 1)?
        .leaky_relu(SLOPE))
}

fn check_spatial(config: &ArchConfig, h: usize, w: usize) -> Result<()> {
    let d = config.spatial_divisor();
    if h % d != 0 || w % d != 0 {
        return Err(Error::shape(format!(
            "input {h}x{w} does not divide by {d}; pad the input to a multiple of {d}"
        )));
    }
    Ok(())
}

fn unet_encode(
    params: &NetParams,
    prefix: &str,
    x: &Tensor,
) -> Result<(Tensor, Vec<Tensor>)> {
    let levels = params.config.encoder_levels;
    let mut cur = conv_pair(params, &format!("{prefix}.enc0"), x)?;
    let mut skips = vec![cur.clone()];
    for k in 1..levels {
        cur = conv_pair(params, &format!("{prefix}.enc{k}"), &cur.max_pool2d()?)?;
        if k < levels - 1 {
            skips.push(cur.clone());
        }
    }
    Ok((cur, skips))
}

fn unet_decode(
    params: &NetParams,
    prefix: &str,
    bottom: Tensor,
    skips: &[Tensor],
) -> Result<Tensor> {
    let mut cur = bottom;
    for k in (0..params.config.encoder_levels - 1).rev() {
        let up = cur.transpose_conv2d(
            params.get(&format!("{prefix}.dec{k}.up.w"))?,
            params.get(&format!("{prefix}.dec{k}.up.b"))?,
            2,
        )?;
        let joined = concat(&[up, skips[k].clone()], 1)?;
        cur = conv_pair(params, &format!("{prefix}.dec{k}"), &joined)?;
    }
    Ok(cur)
}

/// Raw-domain half-resolution predictor; the bounded head keeps the
/// output inside [0, 1] without clipping.
pub fn coarse_forward(params: &NetParams, x: &Tensor) -> Result<Tensor> {
    let config = params.config;
    if !config.use_coarse_to_fine {
        return Err(Error::config(
            "this architecture disables the coarse network",
        ));
    }
    let (_, c, h, w) = x.dims4()?;
    if c != 4 {
        return Err(Error::shape(format!("coarse input must have 4 channels, got {c}")));
    }
    check_spatial(&config, h, w)?;
    let (bottom, skips) = unet_encode(params, "coarse", x)?;
    let decoded = unet_decode(params, "coarse", bottom, &skips)?;
    Ok(decoded
        .conv2d(params.get("coarse.head.w")?, params.get("coarse.head.b")?, 1, 1)?
        .sigmoid())
}

/// Stacks the fine network's input: the packed frames, the signed
/// residual against the upsampled coarse prediction, and that
/// upsampled prediction, in that channel order.
pub fn build_fine_input(x: &Tensor, x_coarse: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (cn, cc, ch, cw) = x_coarse.dims4()?;
    if c != 4 || cc != 4 {
        return Err(Error::shape(format!(
            "expected 4-channel raw tensors, got {c} and {cc}"
        )));
    }
    if cn != n || ch * 2 != h || cw * 2 != w {
        return Err(Error::shape(format!(
            "coarse prediction {ch}x{cw} does not match input {h}x{w} at half scale"
        )));
    }
    let up = x_coarse.bilinear_resize(2.0)?;
    let noise = x.sub(&up)?;
    concat(&[x.clone(), noise, up], 1)
}

/// Single-frame full-resolution predictor: U-Net with residual blocks
/// at the bottleneck and a subpixel RGB head at twice the packed
/// resolution.
pub fn fine_forward(params: &NetParams, t: &Tensor) -> Result<Tensor> {
    validate_fine_input(params, t)?;
    let (bottom, skips) = unet_encode(params, "fine", t)?;
    let refined = residual_stack(params, bottom)?;
    finish_fine(params, refined, &skips)
}

/// Any-size burst predictor sharing every parameter with
/// [`fine_forward`]. Each frame runs the first two encoder blocks;
/// fusion replaces the per-frame features with their elementwise
/// maximum after the second block and at every skip connection.
pub fn set_forward(params: &NetParams, ts: &[Tensor]) -> Result<Tensor> {
    let first = ts
        .first()
        .ok_or_else(|| Error::config("a burst needs at least one frame"))?;
    validate_fine_input(params, first)?;
    for t in &ts[1..] {
        if t.shape() != first.shape() {
            return Err(Error::shape("burst frames must share one shape"));
        }
    }
    let levels = params.config.encoder_levels;
    let mut streams: Vec<Tensor> = ts
        .iter()
        .map(|t| conv_pair(params, "fine.enc0", t))
        .collect::<Result<_>>()?;
    let mut skips = vec![set_max(&streams)?];
    let mut fused = skips[0].clone();
    for k in 1..levels {
        let outs: Vec<Tensor> = streams
            .iter()
            .map(|s| conv_pair(params, &format!("fine.enc{k}"), &s.max_pool2d()?))
            .collect::<Result<_>>()?;
        fused = set_max(&outs)?;
        if k < levels - 1 {
            skips.push(fused.clone());
        }
        // From here on every stream would carry identical features, so
        // the burst collapses to the one fused stream.
        streams = vec![fused.clone()];
    }
    let refined = residual_stack(params, fused)?;
    finish_fine(params, refined, &skips)
}

fn validate_fine_input(params: &NetParams, t: &Tensor) -> Result<()> {
    let config = params.config;
    let (_, c, h, w) = t.dims4()?;
    if c != config.fine_in_channels() {
        return Err(Error::shape(format!(
            "fine input must have {} channels, got {c}",
            config.fine_in_channels()
        )));
    }
    check_spatial(&config, h, w)
}

fn residual_stack(params: &NetParams, mut cur: Tensor) -> Result<Tensor> {
    let config = params.config;
    if !config.use_residual {
        return Ok(cur);
    }
    for i in 0..config.residual_blocks {
        let prefix = format!("fine.res{i}");
        let mut r = cur
            .conv2d(params.get(&format!("{prefix}.c0.w"))?, params.get(&format!("{prefix}.c0.b"))?, 1, 1)?
            .leaky_relu(SLOPE);
        r = r.conv2d(
            params.get(&format!("{prefix}.c1.w"))?,
            params.get(&format!("{prefix}.c1.b"))?,
            1,
            1,
        )?;
        if config.use_se {
            r = se_block(
                &r,
                params.get(&format!("{prefix}.se.r.w"))?,
                params.get(&format!("{prefix}.se.r.b"))?,
                params.get(&format!("{prefix}.se.e.w"))?,
                params.get(&format!("{prefix}.se.e.b"))?,
            )?;
        }
        cur = cur.add(&r)?;
    }
    Ok(cur)
}

fn finish_fine(params: &NetParams, bottom: Tensor, skips: &[Tensor]) -> Result<Tensor> {
    let decoded = unet_decode(params, "fine", bottom, skips)?;
    Ok(decoded
        .conv2d(params.get("fine.head.w")?, params.get("fine.head.b")?, 1, 1)?
        .depth_to_space()?
        .clamp01())
}

/// Channel attention: global average, a squeeze convolution down by
/// `reduction`, the leaky activation, an excite convolution back up,
/// a sigmoid gate, then channelwise rescaling of `x`.
pub fn se_block(
    x: &Tensor,
    reduce_w: &Tensor,
    reduce_b: &Tensor,
    expand_w: &Tensor,
    expand_b: &Tensor,
) -> Result<Tensor> {
    let pooled = x.global_avg_pool()?;
    let hidden = pooled.conv2d(reduce_w, reduce_b, 1, 0)?.leaky_relu(SLOPE);
    let gate = hidden.conv2d(expand_w, expand_b, 1, 0)?.sigmoid();
    x.scale_channels(&gate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::l1_loss;
    use crate::tensor::grad_check_multi;
    use crate::tensor::testutil::spread_tensor;
    use crate::tensor::backward;

    fn tiny_fine_only() -> ArchConfig {
        ArchConfig {
            base_filters: 4,
            encoder_levels: 2,
            residual_blocks: 1,
            use_coarse_to_fine: false,
            use_residual: true,
            use_se: true,
            se_reduction: 4,
        }
    }

    fn std_of(data: &[f64]) -> f64 {
        let mean = data.iter().sum::<f64>() / data.len() as f64;
        (data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / data.len() as f64).sqrt()
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let config = ArchConfig::desk();
        let a = init_params(&config, 7).unwrap();
        let b = init_params(&config, 7).unwrap();
        let c = init_params(&config, 8).unwrap();
        for ((na, ta), (nb, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
        let differs = a
            .iter()
            .zip(c.iter())
            .any(|((_, ta), (_, tc))| ta.data() != tc.data());
        assert!(differs);
    }

    #[test]
    fn parameter_shapes_follow_the_architecture() {
        let params = init_params(&ArchConfig::desk(), 1).unwrap();
        assert_eq!(params.get("coarse.enc0.c0.w").unwrap().shape(), &[8, 4, 3, 3]);
        assert_eq!(params.get("fine.enc0.c0.w").unwrap().shape(), &[8, 12, 3, 3]);
        assert_eq!(params.get("fine.enc2.c1.w").unwrap().shape(), &[32, 32, 3, 3]);
        assert_eq!(params.get("fine.res3.se.e.w").unwrap().shape(), &[32, 8, 1, 1]);
        assert_eq!(params.get("fine.res3.se.r.w").unwrap().shape(), &[8, 32, 1, 1]);
        assert_eq!(params.get("fine.dec1.up.w").unwrap().shape(), &[32, 16, 2, 2]);
        assert_eq!(params.get("fine.dec0.c0.w").unwrap().shape(), &[8, 16, 3, 3]);
        assert_eq!(params.get("fine.head.w").unwrap().shape(), &[12, 8, 3, 3]);
        assert_eq!(params.get("coarse.head.w").unwrap().shape(), &[4, 8, 3, 3]);
        assert!(params.get("fine.res4.c0.w").is_err());
        for (name, tensor) in params.iter() {
            assert!(
                name.starts_with("coarse.") || name.starts_with("fine."),
                "unexpected parameter family: {name}"
            );
            if name.ends_with(".b") {
                assert!(tensor.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn desk_parameter_count_is_frozen() {
        let params = init_params(&ArchConfig::desk(), 1).unwrap();
        assert_eq!(params.total_values(), 136_992);
    }

    #[test]
    fn ablation_toggles_remove_their_exact_parameter_share() {
        let desk = ArchConfig::desk();
        let full = init_params(&desk, 1).unwrap().total_values();

        let no_res = init_params(&ArchConfig { use_residual: false, ..desk }, 1)
            .unwrap()
            .total_values();
        // One block: two 32->32 3x3 convs plus the attention pair.
        let per_block = 2 * (32 * 32 * 9 + 32) + (8 * 32 + 8) + (32 * 8 + 32);
        assert_eq!(full - no_res, desk.residual_blocks * per_block);

        let no_se = init_params(&ArchConfig { use_se: false, ..desk }, 1)
            .unwrap()
            .total_values();
        let per_se = (8 * 32 + 8) + (32 * 8 + 32);
        assert_eq!(full - no_se, desk.residual_blocks * per_se);

        let no_coarse = init_params(&ArchConfig { use_coarse_to_fine: false, ..desk }, 1).unwrap();
        assert!(no_coarse.iter().all(|(n, _)| n.starts_with("fine.")));
        assert_eq!(no_coarse.get("fine.enc0.c0.w").unwrap().shape(), &[8, 4, 3, 3]);
    }

    #[test]
    fn coarse_forward_keeps_shape_and_stays_inside_unit_range() {
        let params = init_params(&ArchConfig::desk(), 3).unwrap();
        let x = spread_tensor(10, &[2, 4, 16, 16], 0.0, 1.0);
        let y = coarse_forward(&params, &x).unwrap();
        assert_eq!(y.shape(), &[2, 4, 16, 16]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let y2 = coarse_forward(&params, &x).unwrap();
        assert_eq!(y.data(), y2.data());
    }

    #[test]
    fn indivisible_input_is_rejected_with_a_padding_hint() {
        let params = init_params(&ArchConfig::desk(), 3).unwrap();
        let x = spread_tensor(10, &[1, 4, 10, 10], 0.0, 1.0);
        let err = coarse_forward(&params, &x).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("pad"), "message should suggest padding: {msg}");
        assert!(msg.contains('4'), "message should name the divisor: {msg}");
    }

    #[test]
    fn wrong_channel_counts_are_rejected() {
        let params = init_params(&ArchConfig::desk(), 3).unwrap();
        let x3 = spread_tensor(10, &[1, 3, 16, 16], 0.0, 1.0);
        assert!(coarse_forward(&params, &x3).is_err());
        let t4 = spread_tensor(10, &[1, 4, 8, 8], 0.0, 1.0);
        assert!(fine_forward(&params, &t4).is_err());
        let disabled = init_params(&ArchConfig { use_coarse_to_fine: false, ..ArchConfig::desk() }, 3)
            .unwrap();
        let x4 = spread_tensor(10, &[1, 4, 16, 16], 0.0, 1.0);
        assert!(coarse_forward(&disabled, &x4).is_err());
    }

    #[test]
    fn fine_input_stacks_frames_residual_and_guide_in_order() {
        let x = spread_tensor(21, &[1, 4, 8, 8], 0.0, 1.0);
        let xc = spread_tensor(22, &[1, 4, 4, 4], 0.0, 1.0);
        let t = build_fine_input(&x, &xc).unwrap();
        assert_eq!(t.shape(), &[1, 12, 8, 8]);
        let up = xc.bilinear_resize(2.0).unwrap();
        let plane = 64;
        for i in 0..4 * plane {
            assert_eq!(t.data()[i], x.data()[i]);
            assert_eq!(t.data()[4 * plane + i], x.data()[i] - up.data()[i]);
            assert_eq!(t.data()[8 * plane + i], up.data()[i]);
        }
    }

    #[test]
    fn fine_input_noise_channels_vanish_for_a_consistent_pair() {
        // A constant frame survives bilinear downsampling and
        // upsampling exactly, so the residual channels are all zero.
        let x = Tensor::full(&[1, 4, 8, 8], 0.375).unwrap();
        let xc = Tensor::full(&[1, 4, 4, 4], 0.375).unwrap();
        let t = build_fine_input(&x, &xc).unwrap();
        let plane = 64;
        for i in 0..4 * plane {
            assert_eq!(t.data()[4 * plane + i], 0.0);
        }
    }

    #[test]
    fn mismatched_coarse_scale_is_rejected() {
        let x = spread_tensor(21, &[1, 4, 8, 8], 0.0, 1.0);
        let xc = spread_tensor(22, &[1, 4, 8, 8], 0.0, 1.0);
        assert!(build_fine_input(&x, &xc).is_err());
    }

    #[test]
    fn fine_forward_doubles_resolution_into_rgb() {
        let params = init_params(&ArchConfig::desk(), 5).unwrap();
        let t = spread_tensor(30, &[1, 12, 8, 8], -0.5, 1.0);
        let y = fine_forward(&params, &t).unwrap();
        assert_eq!(y.shape(), &[1, 3, 16, 16]);
        assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn one_frame_set_matches_fine_exactly() {
        let params = init_params(&ArchConfig::desk(), 5).unwrap();
        let t = spread_tensor(31, &[1, 12, 8, 8], -0.5, 1.0);
        let fine = fine_forward(&params, &t).unwrap();
        let set = set_forward(&params, &[t]).unwrap();
        assert_eq!(fine.data(), set.data());
    }

    #[test]
    fn set_output_ignores_frame_order() {
        let params = init_params(&ArchConfig::desk(), 5).unwrap();
        let frames: Vec<Tensor> = (0..4)
            .map(|i| spread_tensor(40 + i, &[1, 12, 8, 8], -0.5, 1.0))
            .collect();
        let base = set_forward(&params, &frames).unwrap();
        let orders: [[usize; 4]; 4] = [[3, 2, 1, 0], [1, 0, 3, 2], [2, 3, 0, 1], [1, 3, 0, 2]];
        for order in orders {
            let shuffled: Vec<Tensor> = order.iter().map(|&i| frames[i].clone()).collect();
            let out = set_forward(&params, &shuffled).unwrap();
            assert_eq!(base.data(), out.data());
        }
    }

    #[test]
    fn duplicated_frames_leave_the_fusion_unchanged() {
        let params = init_params(&ArchConfig::desk(), 5).unwrap();
        let t = spread_tensor(50, &[1, 12, 8, 8], -0.5, 1.0);
        let single = set_forward(&params, std::slice::from_ref(&t)).unwrap();
        let tripled = set_forward(&params, &[t.clone(), t.clone(), t]).unwrap();
        assert_eq!(single.data(), tripled.data());
    }

    #[test]
    fn empty_burst_is_rejected() {
        let params = init_params(&ArchConfig::desk(), 5).unwrap();
        assert!(set_forward(&params, &[]).is_err());
    }

    #[test]
    fn se_gate_saturated_high_is_the_identity() {
        let x = spread_tensor(60, &[1, 4, 3, 3], -1.0, 1.0);
        let rw = Tensor::zeros(&[2, 4, 1, 1]).unwrap();
        let rb = Tensor::zeros(&[2]).unwrap();
        let ew = Tensor::zeros(&[4, 2, 1, 1]).unwrap();
        // sigmoid(100) rounds to exactly 1.0 in f64.
        let eb = Tensor::full(&[4], 100.0).unwrap();
        let y = se_block(&x, &rw, &rb, &ew, &eb).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn se_of_zero_input_is_zero() {
        let x = Tensor::zeros(&[2, 4, 3, 3]).unwrap();
        let rw = spread_tensor(61, &[2, 4, 1, 1], -1.0, 1.0);
        let rb = spread_tensor(62, &[2], -1.0, 1.0);
        let ew = spread_tensor(63, &[4, 2, 1, 1], -1.0, 1.0);
        let eb = spread_tensor(64, &[4], -1.0, 1.0);
        let y = se_block(&x, &rw, &rb, &ew, &eb).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn se_block_matches_a_straight_line_reference() {
        let (n, c, r, h, w) = (2usize, 6usize, 2usize, 4usize, 5usize);
        let x = spread_tensor(70, &[n, c, h, w], -1.0, 1.0);
        let rw = spread_tensor(71, &[r, c, 1, 1], -0.7, 0.7);
        let rb = spread_tensor(72, &[r], -0.2, 0.2);
        let ew = spread_tensor(73, &[c, r, 1, 1], -0.7, 0.7);
        let eb = spread_tensor(74, &[c], -0.2, 0.2);
        let y = se_block(&x, &rw, &rb, &ew, &eb).unwrap();

        let plane = h * w;
        for b in 0..n {
            let mut means = vec![0.0; c];
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                means[ch] = x.data()[off..off + plane].iter().sum::<f64>() / plane as f64;
            }
            let mut hidden = vec![0.0; r];
            for j in 0..r {
                let mut acc = rb.data()[j];
                for ch in 0..c {
                    acc += rw.data()[j * c + ch] * means[ch];
                }
                hidden[j] = if acc >= 0.0 { acc } else { 0.2 * acc };
            }
            for ch in 0..c {
                let mut acc = eb.data()[ch];
                for j in 0..r {
                    acc += ew.data()[ch * r + j] * hidden[j];
                }
                let gate = 1.0 / (1.0 + (-acc).exp());
                let off = (b * c + ch) * plane;
                for i in 0..plane {
                    let want = x.data()[off + i] * gate;
                    assert!((y.data()[off + i] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn attention_toggle_changes_the_output() {
        let desk = ArchConfig::desk();
        let with_se = init_params(&desk, 9).unwrap();
        let without = init_params(&ArchConfig { use_se: false, ..desk }, 9).unwrap();
        let t = spread_tensor(80, &[1, 12, 8, 8], -0.5, 1.0);
        let a = fine_forward(&with_se, &t).unwrap();
        let b = fine_forward(&without, &t).unwrap();
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn init_keeps_unit_variance_activations_in_range() {
        let params = init_params(&ArchConfig::desk(), 13).unwrap();
        let t = spread_tensor(81, &[1, 12, 16, 16], -2.0, 2.0);
        let (bottom, skips) = unet_encode(&params, "fine", &t).unwrap();
        for (level, feat) in skips.iter().chain(std::iter::once(&bottom)).enumerate() {
            let s = std_of(feat.data());
            assert!(
                (0.1..=10.0).contains(&s),
                "activation std {s} out of range at level {level}"
            );
        }
    }

    #[test]
    fn frozen_parameters_receive_no_gradient() {
        let params = init_params(&ArchConfig::desk(), 5).unwrap();
        let frozen = params.with_frozen_prefix("coarse.");
        let x = spread_tensor(82, &[1, 4, 16, 16], 0.0, 1.0);
        let coarse = coarse_forward(&frozen, &x).unwrap();
        let t = build_fine_input(&x.bilinear_resize(2.0).unwrap(), &coarse).unwrap();
        let out = fine_forward(&frozen, &t).unwrap();
        let target = Tensor::full(out.shape(), 0.5).unwrap();
        let loss = l1_loss(&out, &target).unwrap();
        let grads = backward(&loss).unwrap();
        let coarse_g = grads.grad(frozen.get("coarse.head.w").unwrap());
        assert!(coarse_g.data().iter().all(|&v| v == 0.0));
        let fine_g = grads.grad(frozen.get("fine.head.w").unwrap());
        assert!(fine_g.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn fully_frozen_parameters_make_inference_untracked() {
        let params = init_params(&ArchConfig::desk(), 5).unwrap();
        let frozen = params.with_frozen_prefix("");
        let t = spread_tensor(83, &[1, 12, 8, 8], -0.5, 1.0).detach();
        let out = fine_forward(&frozen, &t).unwrap();
        let target = Tensor::full(out.shape(), 0.5).unwrap();
        let loss = l1_loss(&out, &target).unwrap();
        assert!(backward(&loss).is_err());
    }

    // The network-level checks probe at several steps per coordinate;
    // see grad_check_multi for why one step cannot serve saturating
    // gates and near-zero gradients at the same time.
    #[test]
    fn every_parameter_passes_a_finite_difference_check() {
        let config = tiny_fine_only();
        let params = init_params(&config, 17).unwrap();
        let t = spread_tensor(90, &[1, 4, 8, 8], 0.0, 1.0);
        let target = spread_tensor(91, &[1, 3, 16, 16], 0.0, 1.0);
        let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let tensor = params.get(&name).unwrap().clone();
            let worst = grad_check_multi(
                |probe| {
                    let mut ps = params.clone();
                    ps.set(&name, probe.clone())?;
                    let out = fine_forward(&ps, &t)?;
                    l1_loss(&out, &target)
                },
                &tensor,
                &[1e-5, 3e-5, 1e-4],
            )
            .unwrap();
            assert!(worst <= 1e-4, "parameter {name}: worst rel error {worst}");
        }
    }

    #[test]
    fn desk_parameters_spot_check_against_finite_differences() {
        let params = init_params(&ArchConfig::desk(), 19).unwrap();
        let x = spread_tensor(92, &[1, 4, 8, 8], 0.0, 1.0);
        let coarse_target = spread_tensor(93, &[1, 4, 8, 8], 0.0, 1.0);
        let head = params.get("coarse.head.w").unwrap().clone();
        let worst = grad_check_multi(
            |probe| {
                let mut ps = params.clone();
                ps.set("coarse.head.w", probe.clone())?;
                let out = coarse_forward(&ps, &x)?;
                l1_loss(&out, &coarse_target)
            },
            &head,
            &[1e-5, 3e-5, 1e-4],
        )
        .unwrap();
        assert!(worst <= 1e-4, "coarse head: worst rel error {worst}");

        let t = spread_tensor(94, &[1, 12, 8, 8], -0.5, 1.0);
        let fine_target = spread_tensor(95, &[1, 3, 16, 16], 0.0, 1.0);
        for name in ["fine.res0.se.e.w", "fine.dec0.up.b"] {
            let tensor = params.get(name).unwrap().clone();
            // Gradients deep behind the small-scale head are around
            // 1e-9, where central differences at small steps drown in
            // cancellation; the larger steps exist for them.
            let worst = grad_check_multi(
                |probe| {
                    let mut ps = params.clone();
                    ps.set(name, probe.clone())?;
                    let out = fine_forward(&ps, &t)?;
                    l1_loss(&out, &fine_target)
                },
                &tensor,
                &[1e-5, 3e-5, 1e-4, 3e-4, 1e-3],
            )
            .unwrap();
            assert!(worst <= 1e-4, "parameter {name}: worst rel error {worst}");
        }
    }
}
