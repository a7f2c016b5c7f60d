//! Raw convolution kernels. Everything here works on flat `[n,c,h,w]`
//! buffers; shape validation lives in the op wrappers.
//!
//! The loops are arranged so the innermost dimension walks contiguous
//! rows: for each (channel, kernel-row) pair the kernel tap is applied
//! as a shifted multiply-accumulate over a whole output row. Execution
//! order is fixed, so results are reproducible to the bit.

pub(crate) struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    pub fn out_extent(in_len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = in_len + 2 * pad;
        if padded < k {
            return None;
        }
        Some((padded - k) / stride + 1)
    }
}

/// Direct correlation: `out[n,f,oy,ox] = bias[f] + sum in[n,c,oy*s+ky-p,ox*s+kx-p] * ker[f,c,ky,kx]`.
pub(crate) fn conv2d_fwd(inp: &[f64], ker: &[f64], bias: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut out = vec![0.0; d.n * d.c_out * d.oh * d.ow];
    let in_plane = d.h * d.w;
    let out_plane = d.oh * d.ow;
    for n in 0..d.n {
        for f in 0..d.c_out {
            let out_base = (n * d.c_out + f) * out_plane;
            out[out_base..out_base + out_plane].fill(bias[f]);
            for c in 0..d.c_in {
                let in_base = (n * d.c_in + c) * in_plane;
                for ky in 0..d.kh {
                    let ker_row = &ker[((f * d.c_in + c) * d.kh + ky) * d.kw..][..d.kw];
                    for oy in 0..d.oh {
                        let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let in_row = &inp[in_base + iy as usize * d.w..][..d.w];
                        let out_row = &mut out[out_base + oy * d.ow..][..d.ow];
                        accumulate_row(out_row, in_row, ker_row, d.stride, d.pad, d.w);
                    }
                }
            }
        }
    }
    out
}

/// For one kernel row: `out_row[ox] += ker[kx] * in_row[ox*s + kx - p]`
/// over the in-bounds range of each tap.
fn accumulate_row(
    out_row: &mut [f64],
    in_row: &[f64],
    ker_row: &[f64],
    stride: usize,
    pad: usize,
    w: usize,
) {
    let ow = out_row.len();
    for (kx, &wgt) in ker_row.iter().enumerate() {
        // ox*s + kx - p in [0, w)  =>  ox in [lo, hi). A tap with
        // kx >= w + p never lands in bounds on any plane this narrow.
        let lo = pad.saturating_sub(kx).div_ceil(stride);
        let hi = match (w + pad).checked_sub(kx + 1) {
            Some(span) => (span / stride + 1).min(ow),
            None => continue,
        };
        if lo >= hi {
            continue;
        }
        if stride == 1 {
            let off = lo + kx - pad;
            for (o, i) in out_row[lo..hi].iter_mut().zip(&in_row[off..off + (hi - lo)]) {
                *o += wgt * i;
            }
        } else {
            for ox in lo..hi {
                out_row[ox] += wgt * in_row[ox * stride + kx - pad];
            }
        }
    }
}

/// Gradients of `conv2d_fwd` with respect to input, kernel, and bias.
pub(crate) fn conv2d_bwd(
    inp: &[f64],
    ker: &[f64],
    grad_out: &[f64],
    d: &ConvDims,
    grad_in: Option<&mut [f64]>,
    grad_ker: Option<&mut [f64]>,
    grad_bias: Option<&mut [f64]>,
) {
    let in_plane = d.h * d.w;
    let out_plane = d.oh * d.ow;
    if let Some(gb) = grad_bias {
        for n in 0..d.n {
            for f in 0..d.c_out {
                let base = (n * d.c_out + f) * out_plane;
                gb[f] += grad_out[base..base + out_plane].iter().sum::<f64>();
            }
        }
    }
    if let Some(gk) = grad_ker {
        for n in 0..d.n {
            for f in 0..d.c_out {
                let out_base = (n * d.c_out + f) * out_plane;
                for c in 0..d.c_in {
                    let in_base = (n * d.c_in + c) * in_plane;
                    for ky in 0..d.kh {
                        let gk_row = &mut gk[((f * d.c_in + c) * d.kh + ky) * d.kw..][..d.kw];
                        for oy in 0..d.oh {
                            let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            let in_row = &inp[in_base + iy as usize * d.w..][..d.w];
                            let go_row = &grad_out[out_base + oy * d.ow..][..d.ow];
                            for kx in 0..d.kw {
                                let lo = d.pad.saturating_sub(kx).div_ceil(d.stride);
                                let hi = match (d.w + d.pad).checked_sub(kx + 1) {
                                    Some(span) => (span / d.stride + 1).min(d.ow),
                                    None => continue,
                                };
                                if lo >= hi {
                                    continue;
                                }
                                let mut acc = 0.0;
                                if d.stride == 1 {
                                    let off = lo + kx - d.pad;
                                    for (g, i) in
                                        go_row[lo..hi].iter().zip(&in_row[off..off + (hi - lo)])
                                    {
                                        acc += g * i;
                                    }
                                } else {
                                    for ox in lo..hi {
                                        acc += go_row[ox] * in_row[ox * d.stride + kx - d.pad];
                                    }
                                }
                                gk_row[kx] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(gi) = grad_in {
        for n in 0..d.n {
            for f in 0..d.c_out {
                let out_base = (n * d.c_out + f) * out_plane;
                for c in 0..d.c_in {
                    let in_base = (n * d.c_in + c) * in_plane;
                    for ky in 0..d.kh {
                        let ker_row = &ker[((f * d.c_in + c) * d.kh + ky) * d.kw..][..d.kw];
                        for oy in 0..d.oh {
                            let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            let gi_row = &mut gi[in_base + iy as usize * d.w..][..d.w];
                            let go_row = &grad_out[out_base + oy * d.ow..][..d.ow];
                            scatter_row(gi_row, go_row, ker_row, d.stride, d.pad, d.w);
                        }
                    }
                }
            }
        }
    }
}

/// Transpose of [`accumulate_row`]: `gi_row[ox*s + kx - p] += ker[kx] * go_row[ox]`.
fn scatter_row(
    gi_row: &mut [f64],
    go_row: &[f64],
    ker_row: &[f64],
    stride: usize,
    pad: usize,
    w: usize,
) {
    let ow = go_row.len();
    for (kx, &wgt) in ker_row.iter().enumerate() {
        let lo = pad.saturating_sub(kx).div_ceil(stride);
        let hi = match (w + pad).checked_sub(kx + 1) {
            Some(span) => (span / stride + 1).min(ow),
            None => continue,
        };
        if lo >= hi {
            continue;
        }
        if stride == 1 {
            let off = lo + kx - pad;
            for (i, g) in gi_row[off..off + (hi - lo)].iter_mut().zip(&go_row[lo..hi]) {
                *i += wgt * g;
            }
        } else {
            for ox in lo..hi {
                gi_row[ox * stride + kx - pad] += wgt * go_row[ox];
            }
        }
    }
}

/// Stride-2 transposed convolution, the exact adjoint of the stride-2
/// zero-padding correlation with the same kernel:
/// `out[n,co,iy*2+ky,ix*2+kx] += in[n,ci,iy,ix] * ker[ci,co,ky,kx]`.
/// The kernel layout is `[c_in, c_out, kh, kw]`, so a tensor used as a
/// conv kernel mapping `c_out -> c_in` transposes here unchanged.
pub(crate) struct ConvTDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn conv_t2d_fwd(inp: &[f64], ker: &[f64], bias: &[f64], d: &ConvTDims) -> Vec<f64> {
    let mut out = vec![0.0; d.n * d.c_out * d.oh * d.ow];
    let in_plane = d.h * d.w;
    let out_plane = d.oh * d.ow;
    for n in 0..d.n {
        for co in 0..d.c_out {
            let base = (n * d.c_out + co) * out_plane;
            out[base..base + out_plane].fill(bias[co]);
        }
        for ci in 0..d.c_in {
            let in_base = (n * d.c_in + ci) * in_plane;
            for co in 0..d.c_out {
                let out_base = (n * d.c_out + co) * out_plane;
                for ky in 0..d.kh {
                    let ker_row = &ker[((ci * d.c_out + co) * d.kh + ky) * d.kw..][..d.kw];
                    for iy in 0..d.h {
                        let oy = iy * 2 + ky;
                        let in_row = &inp[in_base + iy * d.w..][..d.w];
                        let out_row = &mut out[out_base + oy * d.ow..][..d.ow];
                        for (kx, &wgt) in ker_row.iter().enumerate() {
                            for (ix, &v) in in_row.iter().enumerate() {
                                out_row[ix * 2 + kx] += wgt * v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv_t2d_bwd(
    inp: &[f64],
    ker: &[f64],
    grad_out: &[f64],
    d: &ConvTDims,
    grad_in: Option<&mut [f64]>,
    grad_ker: Option<&mut [f64]>,
    grad_bias: Option<&mut [f64]>,
) {
    let in_plane = d.h * d.w;
    let out_plane = d.oh * d.ow;
    if let Some(gb) = grad_bias {
        for n in 0..d.n {
            for co in 0..d.c_out {
                let base = (n * d.c_out + co) * out_plane;
                gb[co] += grad_out[base..base + out_plane].iter().sum::<f64>();
            }
        }
    }
    if let Some(gk) = grad_ker {
        for n in 0..d.n {
            for ci in 0..d.c_in {
                let in_base = (n * d.c_in + ci) * in_plane;
                for co in 0..d.c_out {
                    let out_base = (n * d.c_out + co) * out_plane;
                    for ky in 0..d.kh {
                        let k_off = ((ci * d.c_out + co) * d.kh + ky) * d.kw;
                        for iy in 0..d.h {
                            let oy = iy * 2 + ky;
                            let go_row = &grad_out[out_base + oy * d.ow..][..d.ow];
                            let in_row = &inp[in_base + iy * d.w..][..d.w];
                            for kx in 0..d.kw {
                                let mut acc = 0.0;
                                for (ix, &v) in in_row.iter().enumerate() {
                                    acc += go_row[ix * 2 + kx] * v;
                                }
                                gk[k_off + kx] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(gi) = grad_in {
        for n in 0..d.n {
            for ci in 0..d.c_in {
                let in_base = (n * d.c_in + ci) * in_plane;
                for co in 0..d.c_out {
                    let out_base = (n * d.c_out + co) * out_plane;
                    for ky in 0..d.kh {
                        let k_off = ((ci * d.c_out + co) * d.kh + ky) * d.kw;
                        for iy in 0..d.h {
                            let oy = iy * 2 + ky;
                            let go_row = &grad_out[out_base + oy * d.ow..][..d.ow];
                            let gi_row = &mut gi[in_base + iy * d.w..][..d.w];
                            for kx in 0..d.kw {
                                let wgt = ker[k_off + kx];
                                for (ix, g) in gi_row.iter_mut().enumerate() {
                                    *g += wgt * go_row[ix * 2 + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    /// Independent reference: the convolution definition written as
    /// six nested loops with explicit bounds checks, no row tricks.
    fn conv_reference(inp: &[f64], ker: &[f64], bias: &[f64], d: &ConvDims) -> Vec<f64> {
        let mut out = vec![0.0; d.n * d.c_out * d.oh * d.ow];
        for n in 0..d.n {
            for f in 0..d.c_out {
                for oy in 0..d.oh {
                    for ox in 0..d.ow {
                        let mut acc = bias[f];
                        for c in 0..d.c_in {
                            for ky in 0..d.kh {
                                for kx in 0..d.kw {
                                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                                    let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                                    if iy < 0
                                        || iy >= d.h as isize
                                        || ix < 0
                                        || ix >= d.w as isize
                                    {
                                        continue;
                                    }
                                    let iv = inp
                                        [((n * d.c_in + c) * d.h + iy as usize) * d.w + ix as usize];
                                    let kv = ker[((f * d.c_in + c) * d.kh + ky) * d.kw + kx];
                                    acc += iv * kv;
                                }
                            }
                        }
                        out[((n * d.c_out + f) * d.oh + oy) * d.ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn dims(
        n: usize,
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> ConvDims {
        let oh = ConvDims::out_extent(h, kh, stride, pad).unwrap();
        let ow = ConvDims::out_extent(w, kw, stride, pad).unwrap();
        ConvDims { n, c_in, h, w, c_out, kh, kw, stride, pad, oh, ow }
    }

    fn randvec(rng: &mut ChaCha12Rng, len: usize) -> Vec<f64> {
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn forward_matches_nested_loop_reference() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 0), (2, 1)] {
            for &(kh, kw) in &[(1, 1), (3, 3), (2, 2), (3, 1)] {
                let d = dims(2, 3, 6, 7, 4, kh, kw, stride, pad);
                let inp = randvec(&mut rng, d.n * d.c_in * d.h * d.w);
                let ker = randvec(&mut rng, d.c_out * d.c_in * d.kh * d.kw);
                let bias = randvec(&mut rng, d.c_out);
                let got = conv2d_fwd(&inp, &ker, &bias, &d);
                let want = conv_reference(&inp, &ker, &bias, &d);
                for (g, w) in got.iter().zip(&want) {
                    assert!(
                        (g - w).abs() < 1e-6,
                        "stride {stride} pad {pad} kernel {kh}x{kw}: {g} vs {w}"
                    );
                }
            }
        }
    }

    #[test]
    fn degenerate_single_pixel_planes_match_reference() {
        // With padding 1 on a 1x1 plane the outermost taps never land
        // in bounds; the bound arithmetic must skip them rather than
        // underflow.
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let d = dims(1, 2, 1, 1, 3, 3, 3, 1, 1);
        let inp = randvec(&mut rng, 2);
        let ker = randvec(&mut rng, 3 * 2 * 9);
        let bias = randvec(&mut rng, 3);
        let got = conv2d_fwd(&inp, &ker, &bias, &d);
        let want = conv_reference(&inp, &ker, &bias, &d);
        assert_eq!(got.len(), 3);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
        let go = vec![1.0; 3];
        let mut gi = vec![0.0; 2];
        conv2d_bwd(&inp, &ker, &go, &d, Some(&mut gi), None, None);
        let step = 1e-4;
        for i in 0..inp.len() {
            let mut p = inp.clone();
            p[i] += step;
            let mut m = inp.clone();
            m[i] -= step;
            let fd: f64 = conv2d_fwd(&p, &ker, &bias, &d).iter().sum::<f64>()
                - conv2d_fwd(&m, &ker, &bias, &d).iter().sum::<f64>();
            assert!((fd / (2.0 * step) - gi[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn transpose_forward_matches_scatter_reference() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let d = ConvTDims { n: 2, c_in: 3, h: 4, w: 5, c_out: 2, kh: 2, kw: 2, oh: 8, ow: 10 };
        let inp = randvec(&mut rng, d.n * d.c_in * d.h * d.w);
        let ker = randvec(&mut rng, d.c_in * d.c_out * 4);
        let bias = randvec(&mut rng, d.c_out);
        let got = conv_t2d_fwd(&inp, &ker, &bias, &d);
        // Definition written directly: every input pixel scatters its
        // kernel-weighted value into the doubled grid.
        let mut want = vec![0.0; d.n * d.c_out * d.oh * d.ow];
        for n in 0..d.n {
            for co in 0..d.c_out {
                for oy in 0..d.oh {
                    for ox in 0..d.ow {
                        want[((n * d.c_out + co) * d.oh + oy) * d.ow + ox] = bias[co];
                    }
                }
            }
            for ci in 0..d.c_in {
                for iy in 0..d.h {
                    for ix in 0..d.w {
                        let v = inp[((n * d.c_in + ci) * d.h + iy) * d.w + ix];
                        for co in 0..d.c_out {
                            for ky in 0..d.kh {
                                for kx in 0..d.kw {
                                    let kv = ker[((ci * d.c_out + co) * d.kh + ky) * d.kw + kx];
                                    want[((n * d.c_out + co) * d.oh + iy * 2 + ky) * d.ow
                                        + ix * 2
                                        + kx] += v * kv;
                                }
                            }
                        }
                    }
                }
            }
        }
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-9);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        // Scalar objective sum(conv(x)) checked coordinate by
        // coordinate against central differences in f64.
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let d = dims(1, 2, 5, 5, 3, 3, 3, 1, 1);
        let inp = randvec(&mut rng, d.n * d.c_in * d.h * d.w);
        let ker = randvec(&mut rng, d.c_out * d.c_in * d.kh * d.kw);
        let bias = randvec(&mut rng, d.c_out);
        let objective = |inp: &[f64], ker: &[f64], bias: &[f64]| -> f64 {
            conv2d_fwd(inp, ker, bias, &d).iter().sum()
        };
        let go = vec![1.0; d.n * d.c_out * d.oh * d.ow];
        let mut gi = vec![0.0; inp.len()];
        let mut gk = vec![0.0; ker.len()];
        let mut gb = vec![0.0; bias.len()];
        conv2d_bwd(&inp, &ker, &go, &d, Some(&mut gi), Some(&mut gk), Some(&mut gb));
        let step = 1e-4;
        for i in 0..inp.len() {
            let mut p = inp.clone();
            p[i] += step;
            let mut m = inp.clone();
            m[i] -= step;
            let fd = (objective(&p, &ker, &bias) - objective(&m, &ker, &bias)) / (2.0 * step);
            assert!((fd - gi[i]).abs() < 1e-6, "input grad {i}: {fd} vs {}", gi[i]);
        }
        for i in 0..ker.len() {
            let mut p = ker.clone();
            p[i] += step;
            let mut m = ker.clone();
            m[i] -= step;
            let fd = (objective(&inp, &p, &bias) - objective(&inp, &m, &bias)) / (2.0 * step);
            assert!((fd - gk[i]).abs() < 1e-6, "kernel grad {i}: {fd} vs {}", gk[i]);
        }
        for i in 0..bias.len() {
            let mut p = bias.clone();
            p[i] += step;
            let mut m = bias.clone();
            m[i] -= step;
            let fd = (objective(&inp, &ker, &p) - objective(&inp, &ker, &m)) / (2.0 * step);
            assert!((fd - gb[i]).abs() < 1e-6, "bias grad {i}: {fd} vs {}", gb[i]);
        }
    }

    #[test]
    fn transpose_backward_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let d = ConvTDims { n: 1, c_in: 2, h: 3, w: 4, c_out: 2, kh: 2, kw: 2, oh: 6, ow: 8 };
        let inp = randvec(&mut rng, d.n * d.c_in * d.h * d.w);
        let ker = randvec(&mut rng, d.c_in * d.c_out * 4);
        let bias = randvec(&mut rng, d.c_out);
        let objective = |inp: &[f64], ker: &[f64], bias: &[f64]| -> f64 {
            conv_t2d_fwd(inp, ker, bias, &d).iter().sum()
        };
        let go = vec![1.0; d.n * d.c_out * d.oh * d.ow];
        let mut gi = vec![0.0; inp.len()];
        let mut gk = vec![0.0; ker.len()];
        let mut gb = vec![0.0; bias.len()];
        conv_t2d_bwd(&inp, &ker, &go, &d, Some(&mut gi), Some(&mut gk), Some(&mut gb));
        let step = 1e-4;
        for (buf, grad, name) in [(&inp, &gi, "input"), (&ker, &gk, "kernel"), (&bias, &gb, "bias")]
        {
            for i in 0..buf.len() {
                let mut p = buf.to_vec();
                p[i] += step;
                let mut m = buf.to_vec();
                m[i] -= step;
                let (fp, fm) = match name {
                    "input" => (objective(&p, &ker, &bias), objective(&m, &ker, &bias)),
                    "kernel" => (objective(&inp, &p, &bias), objective(&inp, &m, &bias)),
                    _ => (objective(&inp, &ker, &p), objective(&inp, &ker, &m)),
                };
                let fd = (fp - fm) / (2.0 * step);
                assert!((fd - grad[i]).abs() < 1e-6, "{name} grad {i}: {fd} vs {}", grad[i]);
            }
        }
    }
}
