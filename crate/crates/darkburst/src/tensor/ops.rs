//! Forward operations and their reverse-mode rules.
//!
//! Each operation validates shapes, computes its result eagerly, and
//! attaches an [`Op`] record to the output when any input is tracked.
//! The matching gradient rule lives in [`backward_op`], keyed by the
//! same variant, so forward and backward read side by side.
//!
//! Subgradient conventions at the non-smooth points: `leaky_relu` uses
//! the negative-side slope at exactly zero, `abs` uses zero, `clamp01`
//! passes gradient only strictly inside `(0, 1)`, and max-style
//! reductions route the gradient to the first element attaining the
//! maximum.

use super::conv::{conv2d_bwd, conv2d_fwd, conv_t2d_bwd, conv_t2d_fwd, ConvDims, ConvTDims};
use super::cx::{self, CxAux, CxNorm};
use super::tape::Accum;
use super::Tensor;
use crate::error::{Error, Result};
use crate::resample;

pub(crate) enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    LeakyRelu(Tensor, f64),
    Sigmoid(Tensor),
    Clamp01(Tensor),
    Abs(Tensor),
    Ln(Tensor),
    Sum(Tensor),
    Mean(Tensor),
    Concat(Vec<Tensor>, usize),
    MaxPool2d(Tensor, Vec<u32>),
    GlobalAvgPool(Tensor),
    BilinearHalf(Tensor),
    BilinearDouble(Tensor),
    DepthToSpace(Tensor),
    SetMax(Vec<Tensor>, Vec<u32>),
    Conv2d {
        input: Tensor,
        kernel: Tensor,
        bias: Tensor,
        stride: usize,
        pad: usize,
    },
    ConvT2d {
        input: Tensor,
        kernel: Tensor,
        bias: Tensor,
    },
    ScaleChannels {
        input: Tensor,
        gate: Tensor,
    },
    GatherPositions {
        input: Tensor,
        positions: Vec<(usize, usize)>,
    },
    CxSim {
        pred: Tensor,
        aux: Box<CxAux>,
    },
}

fn any_tracked(ts: &[&Tensor]) -> bool {
    ts.iter().any(|t| t.is_tracked())
}

fn build(shape: Vec<usize>, data: Vec<f64>, tracked: bool, op: impl FnOnce() -> Op) -> Tensor {
    let t = if tracked {
        Tensor::computed(shape, data, op())
    } else {
        Tensor::constant(&shape, data)
    };
    t.expect("op produced a shape/data mismatch")
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "add")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        Ok(build(
            self.shape().to_vec(),
            data,
            any_tracked(&[self, other]),
            || Op::Add(self.clone(), other.clone()),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "sub")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        Ok(build(
            self.shape().to_vec(),
            data,
            any_tracked(&[self, other]),
            || Op::Sub(self.clone(), other.clone()),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "mul")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        Ok(build(
            self.shape().to_vec(),
            data,
            any_tracked(&[self, other]),
            || Op::Mul(self.clone(), other.clone()),
        ))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * factor).collect();
        build(self.shape().to_vec(), data, self.is_tracked(), || {
            Op::Scale(self.clone(), factor)
        })
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        let data = self
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        build(self.shape().to_vec(), data, self.is_tracked(), || {
            Op::LeakyRelu(self.clone(), slope)
        })
    }

    pub fn sigmoid(&self) -> Tensor {
        let data = self.data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        build(self.shape().to_vec(), data, self.is_tracked(), || {
            Op::Sigmoid(self.clone())
        })
    }

    pub fn clamp01(&self) -> Tensor {
        let data = self.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        build(self.shape().to_vec(), data, self.is_tracked(), || {
            Op::Clamp01(self.clone())
        })
    }

    pub fn abs(&self) -> Tensor {
        let data = self.data().iter().map(|v| v.abs()).collect();
        build(self.shape().to_vec(), data, self.is_tracked(), || {
            Op::Abs(self.clone())
        })
    }

    /// Natural log; rejects non-positive inputs rather than emitting
    /// NaN into the graph.
    pub fn ln(&self) -> Result<Tensor> {
        if let Some(v) = self.data().iter().find(|v| **v <= 0.0) {
            return Err(Error::numeric(format!("ln of non-positive value {v}")));
        }
        let data = self.data().iter().map(|v| v.ln()).collect();
        Ok(build(self.shape().to_vec(), data, self.is_tracked(), || {
            Op::Ln(self.clone())
        }))
    }

    /// Full reduction to a single-element tensor.
    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        build(vec![1], vec![s], self.is_tracked(), || Op::Sum(self.clone()))
    }

    /// Mean over all elements, as a single-element tensor.
    pub fn mean(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let m = s / self.numel() as f64;
        build(vec![1], vec![m], self.is_tracked(), || Op::Mean(self.clone()))
    }

    /// 2D correlation over `[n, c, h, w]` with kernel `[f, c, kh, kw]`
    /// and per-filter bias `[f]`. Stride 1 or 2; `pad` rows/columns of
    /// implicit zeros on every border.
    pub fn conv2d(&self, kernel: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        let (f, kc, kh, kw) = kernel.dims4()?;
        if kc != c {
            return Err(Error::shape(format!(
                "conv2d: input has {c} channels but kernel expects {kc}"
            )));
        }
        if bias.shape() != [f] {
            return Err(Error::shape(format!(
                "conv2d: bias shape {:?} does not match {f} filters",
                bias.shape()
            )));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::shape(format!("conv2d: unsupported stride {stride}")));
        }
        let oh = ConvDims::out_extent(h, kh, stride, pad);
        let ow = ConvDims::out_extent(w, kw, stride, pad);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::shape(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}"
            )));
        };
        let dims = ConvDims { n, c_in: c, h, w, c_out: f, kh, kw, stride, pad, oh, ow };
        let data = conv2d_fwd(self.data(), kernel.data(), bias.data(), &dims);
        Ok(build(
            vec![n, f, oh, ow],
            data,
            any_tracked(&[self, kernel, bias]),
            || Op::Conv2d {
                input: self.clone(),
                kernel: kernel.clone(),
                bias: bias.clone(),
                stride,
                pad,
            },
        ))
    }

    /// Stride-2 transposed convolution with kernel `[c_in, c_out, kh, kw]`
    /// and bias `[c_out]`; the adjoint of the matching stride-2 unpadded
    /// conv2d. Output is `[n, c_out, 2(h-1)+kh, 2(w-1)+kw]`.
    pub fn transpose_conv2d(&self, kernel: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
        if stride != 2 {
            return Err(Error::shape(format!(
                "transpose_conv2d: only stride 2 is supported, got {stride}"
            )));
        }
        let (n, ci, h, w) = self.dims4()?;
        let (kci, co, kh, kw) = kernel.dims4()?;
        if kci != ci {
            return Err(Error::shape(format!(
                "transpose_conv2d: input has {ci} channels but kernel expects {kci}"
            )));
        }
        if bias.shape() != [co] {
            return Err(Error::shape(format!(
                "transpose_conv2d: bias shape {:?} does not match {co} outputs",
                bias.shape()
            )));
        }
        let (oh, ow) = (2 * (h - 1) + kh, 2 * (w - 1) + kw);
        let dims = ConvTDims { n, c_in: ci, h, w, c_out: co, kh, kw, oh, ow };
        let data = conv_t2d_fwd(self.data(), kernel.data(), bias.data(), &dims);
        Ok(build(
            vec![n, co, oh, ow],
            data,
            any_tracked(&[self, kernel, bias]),
            || Op::ConvT2d {
                input: self.clone(),
                kernel: kernel.clone(),
                bias: bias.clone(),
            },
        ))
    }

    /// 2x2 stride-2 max pooling; requires even spatial dimensions.
    pub fn max_pool2d(&self) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!("max_pool2d: odd extent {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut data = vec![0.0; n * c * oh * ow];
        let mut arg = vec![0u32; data.len()];
        let src = self.data();
        for p in 0..n * c {
            let in_base = p * h * w;
            let out_base = p * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let i00 = in_base + 2 * oy * w + 2 * ox;
                    let cand = [i00, i00 + 1, i00 + w, i00 + w + 1];
                    let mut best = cand[0];
                    for &i in &cand[1..] {
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                    data[out_base + oy * ow + ox] = src[best];
                    arg[out_base + oy * ow + ox] = best as u32;
                }
            }
        }
        Ok(build(vec![n, c, oh, ow], data, self.is_tracked(), || {
            Op::MaxPool2d(self.clone(), arg)
        }))
    }

    /// Spatial mean per channel: `[n, c, h, w] -> [n, c, 1, 1]`.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        let plane = h * w;
        let mut data = vec![0.0; n * c];
        for p in 0..n * c {
            data[p] = self.data()[p * plane..(p + 1) * plane].iter().sum::<f64>() / plane as f64;
        }
        Ok(build(vec![n, c, 1, 1], data, self.is_tracked(), || {
            Op::GlobalAvgPool(self.clone())
        }))
    }

    /// Bilinear resampling by exactly 0.5 or 2.0 (half-pixel centres,
    /// clamped edges). Halving requires even spatial dimensions.
    pub fn bilinear_resize(&self, factor: f64) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        if factor == 0.5 {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::shape(format!("bilinear_resize 0.5: odd extent {h}x{w}")));
            }
            let (oh, ow) = (h / 2, w / 2);
            let mut data = vec![0.0; n * c * oh * ow];
            for p in 0..n * c {
                resample::half_plane_into(
                    &self.data()[p * h * w..][..h * w],
                    w,
                    h,
                    &mut data[p * oh * ow..][..oh * ow],
                );
            }
            Ok(build(vec![n, c, oh, ow], data, self.is_tracked(), || {
                Op::BilinearHalf(self.clone())
            }))
        } else if factor == 2.0 {
            let (oh, ow) = (2 * h, 2 * w);
            let mut data = vec![0.0; n * c * oh * ow];
            for p in 0..n * c {
                resample::double_plane_into(
                    &self.data()[p * h * w..][..h * w],
                    w,
                    h,
                    &mut data[p * oh * ow..][..oh * ow],
                );
            }
            Ok(build(vec![n, c, oh, ow], data, self.is_tracked(), || {
                Op::BilinearDouble(self.clone())
            }))
        } else {
            Err(Error::shape(format!(
                "bilinear_resize: factor must be 0.5 or 2, got {factor}"
            )))
        }
    }

    /// Block-2 rearrangement `[n, 4c, h, w] -> [n, c, 2h, 2w]`; input
    /// channel `c*4 + dy*2 + dx` lands at output offset `(dy, dx)`.
    pub fn depth_to_space(&self) -> Result<Tensor> {
        let (n, c4, h, w) = self.dims4()?;
        if c4 % 4 != 0 {
            return Err(Error::shape(format!(
                "depth_to_space: channel count {c4} not divisible by 4"
            )));
        }
        let c = c4 / 4;
        let (oh, ow) = (2 * h, 2 * w);
        let mut data = vec![0.0; n * c * oh * ow];
        let src = self.data();
        for nn in 0..n {
            for co in 0..c {
                for dy in 0..2 {
                    for dx in 0..2 {
                        let cin = co * 4 + dy * 2 + dx;
                        let in_base = (nn * c4 + cin) * h * w;
                        let out_base = (nn * c + co) * oh * ow;
                        for y in 0..h {
                            for x in 0..w {
                                data[out_base + (2 * y + dy) * ow + 2 * x + dx] =
                                    src[in_base + y * w + x];
                            }
                        }
                    }
                }
            }
        }
        Ok(build(vec![n, c, oh, ow], data, self.is_tracked(), || {
            Op::DepthToSpace(self.clone())
        }))
    }

    /// Per-channel rescaling: `x[n,c,h,w] * gate[n,c,1,1]`. This is the
    /// one broadcast the engine supports besides conv bias.
    pub fn scale_channels(&self, gate: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        let (gn, gc, gh, gw) = gate.dims4()?;
        if (gn, gc, gh, gw) != (n, c, 1, 1) {
            return Err(Error::shape(format!(
                "scale_channels: gate shape {:?} does not match [{n}, {c}, 1, 1]",
                gate.shape()
            )));
        }
        let plane = h * w;
        let mut data = vec![0.0; self.numel()];
        for p in 0..n * c {
            let g = gate.data()[p];
            for (o, v) in data[p * plane..][..plane]
                .iter_mut()
                .zip(&self.data()[p * plane..][..plane])
            {
                *o = g * v;
            }
        }
        Ok(build(
            self.shape().to_vec(),
            data,
            any_tracked(&[self, gate]),
            || Op::ScaleChannels {
                input: self.clone(),
                gate: gate.clone(),
            },
        ))
    }

    /// Collects the channel vector at each listed `(y, x)` position of
    /// a `[1, c, h, w]` map into a `[len, c]` matrix.
    pub fn gather_positions(&self, positions: &[(usize, usize)]) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        if n != 1 {
            return Err(Error::shape("gather_positions expects a single-image batch"));
        }
        if positions.is_empty() {
            return Err(Error::shape("gather_positions: empty position list"));
        }
        for &(y, x) in positions {
            if y >= h || x >= w {
                return Err(Error::shape(format!(
                    "gather_positions: ({y}, {x}) outside {h}x{w}"
                )));
            }
        }
        let mut data = vec![0.0; positions.len() * c];
        for (row, &(y, x)) in positions.iter().enumerate() {
            for ch in 0..c {
                data[row * c + ch] = self.data()[(ch * h + y) * w + x];
            }
        }
        Ok(build(
            vec![positions.len(), c],
            data,
            self.is_tracked(),
            || Op::GatherPositions {
                input: self.clone(),
                positions: positions.to_vec(),
            },
        ))
    }

    /// Contextual similarity against a fixed target feature set; see
    /// the loss module for the full definition. `self` is the target
    /// (treated as constant), `pred` receives gradients.
    pub fn cx_sim(&self, pred: &Tensor, h: f64, eps: f64, norm: CxNorm) -> Result<Tensor> {
        let (value, aux) = cx::forward(self, pred, h, eps, norm)?;
        Ok(build(vec![1], vec![value], pred.is_tracked(), || Op::CxSim {
            pred: pred.clone(),
            aux: Box::new(aux),
        }))
    }
}

/// Concatenates along `axis`; all other dimensions must agree.
pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat of an empty list"))?;
    let rank = first.shape().len();
    if axis >= rank {
        return Err(Error::shape(format!("concat: axis {axis} out of range for rank {rank}")));
    }
    let mut axis_total = 0;
    for p in parts {
        if p.shape().len() != rank {
            return Err(Error::shape("concat: rank mismatch"));
        }
        for d in 0..rank {
            if d != axis && p.shape()[d] != first.shape()[d] {
                return Err(Error::shape(format!(
                    "concat: shapes {:?} and {:?} differ off-axis",
                    first.shape(),
                    p.shape()
                )));
            }
        }
        axis_total += p.shape()[axis];
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = axis_total;
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let mut data = vec![0.0; outer * axis_total * inner];
    let row = axis_total * inner;
    let mut offset = 0;
    for p in parts {
        let p_axis = p.shape()[axis];
        let p_row = p_axis * inner;
        for o in 0..outer {
            let dst = o * row + offset;
            data[dst..dst + p_row].copy_from_slice(&p.data()[o * p_row..(o + 1) * p_row]);
        }
        offset += p_row;
    }
    let tracked = parts.iter().any(|p| p.is_tracked());
    Ok(build(shape, data, tracked, || {
        Op::Concat(parts.to_vec(), axis)
    }))
}

/// Elementwise maximum over a non-empty list of same-shaped tensors.
/// The result is invariant to the list order; gradients flow to the
/// first frame attaining each maximum.
pub fn set_max(frames: &[Tensor]) -> Result<Tensor> {
    let first = frames
        .first()
        .ok_or_else(|| Error::shape("set_max of an empty list"))?;
    for f in frames {
        same_shape(first, f, "set_max")?;
    }
    let mut data = first.data().to_vec();
    let mut arg = vec![0u32; data.len()];
    for (fi, f) in frames.iter().enumerate().skip(1) {
        for (i, &v) in f.data().iter().enumerate() {
            if v > data[i] {
                data[i] = v;
                arg[i] = fi as u32;
            }
        }
    }
    let tracked = frames.iter().any(|f| f.is_tracked());
    Ok(build(first.shape().to_vec(), data, tracked, || {
        Op::SetMax(frames.to_vec(), arg)
    }))
}

/// Routes `grad_out` through `out`'s producing operation into the
/// accumulator. `out.node()` must be `Computed`.
pub(crate) fn backward_op(out: &Tensor, grad_out: &[f64], acc: &mut Accum) {
    let super::Node::Computed(op) = out.node() else {
        return;
    };
    match op {
        Op::Add(a, b) => {
            acc.add_slice(a, grad_out);
            acc.add_slice(b, grad_out);
        }
        Op::Sub(a, b) => {
            acc.add_slice(a, grad_out);
            acc.with(b, |g| {
                for (g, &go) in g.iter_mut().zip(grad_out) {
                    *g -= go;
                }
            });
        }
        Op::Mul(a, b) => {
            acc.with(a, |g| {
                for ((g, &go), &bv) in g.iter_mut().zip(grad_out).zip(b.data()) {
                    *g += go * bv;
                }
            });
            acc.with(b, |g| {
                for ((g, &go), &av) in g.iter_mut().zip(grad_out).zip(a.data()) {
                    *g += go * av;
                }
            });
        }
        Op::Scale(a, f) => acc.with(a, |g| {
            for (g, &go) in g.iter_mut().zip(grad_out) {
                *g += go * f;
            }
        }),
        Op::LeakyRelu(a, slope) => acc.with(a, |g| {
            for ((g, &go), &x) in g.iter_mut().zip(grad_out).zip(a.data()) {
                *g += go * if x > 0.0 { 1.0 } else { *slope };
            }
        }),
        Op::Sigmoid(a) => acc.with(a, |g| {
            for ((g, &go), &y) in g.iter_mut().zip(grad_out).zip(out.data()) {
                *g += go * y * (1.0 - y);
            }
        }),
        Op::Clamp01(a) => acc.with(a, |g| {
            for ((g, &go), &x) in g.iter_mut().zip(grad_out).zip(a.data()) {
                if x > 0.0 && x < 1.0 {
                    *g += go;
                }
            }
        }),
        Op::Abs(a) => acc.with(a, |g| {
            for ((g, &go), &x) in g.iter_mut().zip(grad_out).zip(a.data()) {
                *g += go * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 };
            }
        }),
        Op::Ln(a) => acc.with(a, |g| {
            for ((g, &go), &x) in g.iter_mut().zip(grad_out).zip(a.data()) {
                *g += go / x;
            }
        }),
        Op::Sum(a) => acc.with(a, |g| {
            for g in g.iter_mut() {
                *g += grad_out[0];
            }
        }),
        Op::Mean(a) => acc.with(a, |g| {
            let s = grad_out[0] / a.numel() as f64;
            for g in g.iter_mut() {
                *g += s;
            }
        }),
        Op::Concat(parts, axis) => {
            let outer: usize = out.shape()[..*axis].iter().product();
            let inner: usize = out.shape()[*axis + 1..].iter().product();
            let row = out.shape()[*axis] * inner;
            let mut offset = 0;
            for p in parts {
                let p_row = p.shape()[*axis] * inner;
                acc.with(p, |g| {
                    for o in 0..outer {
                        let src = o * row + offset;
                        for (g, &go) in g[o * p_row..(o + 1) * p_row]
                            .iter_mut()
                            .zip(&grad_out[src..src + p_row])
                        {
                            *g += go;
                        }
                    }
                });
                offset += p_row;
            }
        }
        Op::MaxPool2d(a, arg) => acc.with(a, |g| {
            for (&idx, &go) in arg.iter().zip(grad_out) {
                g[idx as usize] += go;
            }
        }),
        Op::GlobalAvgPool(a) => acc.with(a, |g| {
            let (n, c, h, w) = a.dims4().expect("pooled input is rank 4");
            let plane = h * w;
            for p in 0..n * c {
                let s = grad_out[p] / plane as f64;
                for g in g[p * plane..(p + 1) * plane].iter_mut() {
                    *g += s;
                }
            }
        }),
        Op::BilinearHalf(a) => acc.with(a, |g| {
            let (n, c, h, w) = a.dims4().expect("resized input is rank 4");
            let plane = h * w;
            let out_plane = plane / 4;
            for p in 0..n * c {
                resample::half_plane_back_into(
                    &grad_out[p * out_plane..][..out_plane],
                    w,
                    h,
                    &mut g[p * plane..][..plane],
                );
            }
        }),
        Op::BilinearDouble(a) => acc.with(a, |g| {
            let (n, c, h, w) = a.dims4().expect("resized input is rank 4");
            let plane = h * w;
            let out_plane = plane * 4;
            for p in 0..n * c {
                resample::double_plane_back_into(
                    &grad_out[p * out_plane..][..out_plane],
                    w,
                    h,
                    &mut g[p * plane..][..plane],
                );
            }
        }),
        Op::DepthToSpace(a) => acc.with(a, |g| {
            let (n, c4, h, w) = a.dims4().expect("rearranged input is rank 4");
            let c = c4 / 4;
            let (oh, ow) = (2 * h, 2 * w);
            for nn in 0..n {
                for co in 0..c {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let cin = co * 4 + dy * 2 + dx;
                            let in_base = (nn * c4 + cin) * h * w;
                            let out_base = (nn * c + co) * oh * ow;
                            for y in 0..h {
                                for x in 0..w {
                                    g[in_base + y * w + x] +=
                                        grad_out[out_base + (2 * y + dy) * ow + 2 * x + dx];
                                }
                            }
                        }
                    }
                }
            }
        }),
        Op::SetMax(frames, arg) => {
            for (fi, f) in frames.iter().enumerate() {
                acc.with(f, |g| {
                    for (i, (&a, &go)) in arg.iter().zip(grad_out).enumerate() {
                        if a as usize == fi {
                            g[i] += go;
                        }
                    }
                });
            }
        }
        Op::Conv2d { input, kernel, bias, stride, pad } => {
            let (n, c, h, w) = input.dims4().expect("conv input is rank 4");
            let (f, _, kh, kw) = kernel.dims4().expect("conv kernel is rank 4");
            let (oh, ow) = {
                let s = out.shape();
                (s[2], s[3])
            };
            let dims = ConvDims { n, c_in: c, h, w, c_out: f, kh, kw, stride: *stride, pad: *pad, oh, ow };
            acc.with3(input, kernel, bias, |gi, gk, gb| {
                conv2d_bwd(input.data(), kernel.data(), grad_out, &dims, gi, gk, gb);
            });
        }
        Op::ConvT2d { input, kernel, bias } => {
            let (n, ci, h, w) = input.dims4().expect("deconv input is rank 4");
            let (_, co, kh, kw) = kernel.dims4().expect("deconv kernel is rank 4");
            let (oh, ow) = {
                let s = out.shape();
                (s[2], s[3])
            };
            let dims = ConvTDims { n, c_in: ci, h, w, c_out: co, kh, kw, oh, ow };
            acc.with3(input, kernel, bias, |gi, gk, gb| {
                conv_t2d_bwd(input.data(), kernel.data(), grad_out, &dims, gi, gk, gb);
            });
        }
        Op::ScaleChannels { input, gate } => {
            let (n, c, h, w) = input.dims4().expect("scaled input is rank 4");
            let plane = h * w;
            acc.with(input, |g| {
                for p in 0..n * c {
                    let gv = gate.data()[p];
                    for (g, &go) in g[p * plane..][..plane]
                        .iter_mut()
                        .zip(&grad_out[p * plane..][..plane])
                    {
                        *g += gv * go;
                    }
                }
            });
            acc.with(gate, |g| {
                for p in 0..n * c {
                    let mut s = 0.0;
                    for (&x, &go) in input.data()[p * plane..][..plane]
                        .iter()
                        .zip(&grad_out[p * plane..][..plane])
                    {
                        s += x * go;
                    }
                    g[p] += s;
                }
            });
        }
        Op::GatherPositions { input, positions } => acc.with(input, |g| {
            let (_, c, h, w) = input.dims4().expect("gathered input is rank 4");
            for (row, &(y, x)) in positions.iter().enumerate() {
                for ch in 0..c {
                    g[(ch * h + y) * w + x] += grad_out[row * c + ch];
                }
            }
        }),
        Op::CxSim { pred, aux } => acc.with(pred, |g| {
            cx::backward(aux, grad_out[0], g);
        }),
    }
}
