//! Factor-2 bilinear resampling on single planes, shared by the raw
//! pipeline and the differentiable tensor op.
//!
//! Sampling uses the half-pixel-centre convention (align_corners =
//! false) with edge clamping. Two properties matter downstream and are
//! guaranteed here:
//!
//! * halving on even dimensions reduces exactly to 2x2 box averaging;
//! * interpolation is evaluated in the incremental form
//!   `v00 + wx*(v01-v00) + wy*(v10-v00) + wx*wy*(v00+v11-v01-v10)`,
//!   so a constant plane passes through both directions bit-exactly
//!   (every difference term is exactly zero). The noise-map identity
//!   for flat regions relies on this.

/// Downsamples an `w x h` plane (both even) to `w/2 x h/2` by 2x2 box
/// averaging, which is what factor-0.5 bilinear sampling degenerates to
/// on even dimensions.
pub(crate) fn half_plane_into(src: &[f64], w: usize, h: usize, dst: &mut [f64]) {
    let (ow, oh) = (w / 2, h / 2);
    debug_assert_eq!(src.len(), w * h);
    debug_assert_eq!(dst.len(), ow * oh);
    for oy in 0..oh {
        let r0 = 2 * oy * w;
        let r1 = r0 + w;
        for ox in 0..ow {
            let x = 2 * ox;
            let top = src[r0 + x] + src[r0 + x + 1];
            let bot = src[r1 + x] + src[r1 + x + 1];
            dst[oy * ow + ox] = (top + bot) * 0.25;
        }
    }
}

/// Transpose of [`half_plane_into`]: spreads each coarse gradient value
/// evenly over its 2x2 source window.
pub(crate) fn half_plane_back_into(grad_out: &[f64], w: usize, h: usize, grad_in: &mut [f64]) {
    let (ow, oh) = (w / 2, h / 2);
    for oy in 0..oh {
        let r0 = 2 * oy * w;
        let r1 = r0 + w;
        for ox in 0..ow {
            let g = grad_out[oy * ow + ox] * 0.25;
            let x = 2 * ox;
            grad_in[r0 + x] += g;
            grad_in[r0 + x + 1] += g;
            grad_in[r1 + x] += g;
            grad_in[r1 + x + 1] += g;
        }
    }
}

/// Source taps along one axis for 2x upsampling: output index `o` reads
/// clamped input indices `(i0, i1)` blended as `(1-w)*v[i0] + w*v[i1]`.
pub(crate) fn up_taps(o: usize, in_len: usize) -> (usize, usize, f64) {
    // Source coordinate (o + 0.5)/2 - 0.5 = o/2 - 0.25.
    let (i0, w) = if o % 2 == 0 {
        (o as isize / 2 - 1, 0.75)
    } else {
        (o as isize / 2, 0.25)
    };
    let clamp = |i: isize| i.clamp(0, in_len as isize - 1) as usize;
    (clamp(i0), clamp(i0 + 1), w)
}

/// Upsamples an `w x h` plane to `2w x 2h`.
pub(crate) fn double_plane_into(src: &[f64], w: usize, h: usize, dst: &mut [f64]) {
    let (ow, oh) = (2 * w, 2 * h);
    debug_assert_eq!(src.len(), w * h);
    debug_assert_eq!(dst.len(), ow * oh);
    for oy in 0..oh {
        let (y0, y1, wy) = up_taps(oy, h);
        for ox in 0..ow {
            let (x0, x1, wx) = up_taps(ox, w);
            let v00 = src[y0 * w + x0];
            let v01 = src[y0 * w + x1];
            let v10 = src[y1 * w + x0];
            let v11 = src[y1 * w + x1];
            dst[oy * ow + ox] =
                v00 + wx * (v01 - v00) + wy * (v10 - v00) + wx * wy * (v00 + v11 - v01 - v10);
        }
    }
}

/// Transpose of [`double_plane_into`] in its expanded-weight form,
/// which is the same linear map.
pub(crate) fn double_plane_back_into(grad_out: &[f64], w: usize, h: usize, grad_in: &mut [f64]) {
    let (ow, oh) = (2 * w, 2 * h);
    for oy in 0..oh {
        let (y0, y1, wy) = up_taps(oy, h);
        for ox in 0..ow {
            let (x0, x1, wx) = up_taps(ox, w);
            let g = grad_out[oy * ow + ox];
            grad_in[y0 * w + x0] += (1.0 - wx) * (1.0 - wy) * g;
            grad_in[y0 * w + x1] += wx * (1.0 - wy) * g;
            grad_in[y1 * w + x0] += (1.0 - wx) * wy * g;
            grad_in[y1 * w + x1] += wx * wy * g;
        }
    }
}
