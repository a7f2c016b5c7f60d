//! Contextual similarity between two feature sets, as a single fused
//! differentiable operation.
//!
//! Given target features R = {r_i} and predicted features S = {s_j},
//! both N vectors of dimension C:
//!
//! ```text
//! d_ij  = 1 - <r_i, s_j> / (|r_i| |s_j|)      cosine distance
//! dt_ij = d_ij / (min_k d_ik + eps)           relative distance
//! w_ij  = exp((1 - dt_ij) / h)                similarity kernel
//! CX_ij = w_ij / sum_k w_ik                   row normalisation
//! CX    = (1/N) sum_j max_i CX_ij
//! ```
//!
//! The row normalisation above sums over the second index; the
//! alternative that normalises each column (`sum_k w_kj`) is available
//! behind [`CxNorm::ColumnWise`]. If either vector of a pair has zero
//! norm its cosine distance is defined as 1 and no gradient flows
//! through that entry.
//!
//! CX lies in (0, 1]: every column maximum is a positive share of a
//! normalised row, and matching feature sets drive it towards 1. The
//! backward pass propagates into S only; R is a fixed target. Its
//! derivation chains the column argmax, the normalisation quotient,
//! the exponential, the row-minimum (through both the direct entry and
//! the argmin entry), and finally the cosine:
//! `d(d_ij)/d(s_j) = -(rhat_i - cos_ij * shat_j) / |s_j|`.

use super::Tensor;
use crate::error::{Error, Result};

/// Which index the similarity normalisation sums over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CxNorm {
    /// Normalise each row: `CX_ij = w_ij / sum_k w_ik`.
    RowWise,
    /// Normalise each column: `CX_ij = w_ij / sum_k w_kj`.
    ColumnWise,
}

/// Forward-pass intermediates kept for the backward pass.
pub(crate) struct CxAux {
    n: usize,
    c: usize,
    h: f64,
    eps: f64,
    norm: CxNorm,
    rhat: Vec<f64>,
    shat: Vec<f64>,
    s_norm: Vec<f64>,
    /// Cosine similarities, n x n, row index i over R.
    cos: Vec<f64>,
    /// Entry marked false when the zero-norm convention fixed d_ij = 1.
    live: Vec<bool>,
    w: Vec<f64>,
    z: Vec<f64>,
    row_min: Vec<f64>,
    row_argmin: Vec<usize>,
    col_argmax: Vec<usize>,
}

fn normalise_rows(data: &[f64], n: usize, c: usize) -> (Vec<f64>, Vec<f64>) {
    let mut unit = vec![0.0; n * c];
    let mut norms = vec![0.0; n];
    for i in 0..n {
        let row = &data[i * c..(i + 1) * c];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        norms[i] = norm;
        if norm > 0.0 {
            for (u, &v) in unit[i * c..(i + 1) * c].iter_mut().zip(row) {
                *u = v / norm;
            }
        }
    }
    (unit, norms)
}

pub(crate) fn forward(
    target: &Tensor,
    pred: &Tensor,
    h: f64,
    eps: f64,
    norm: CxNorm,
) -> Result<(f64, CxAux)> {
    let (rn, rc) = target.dims2()?;
    let (sn, sc) = pred.dims2()?;
    if (rn, rc) != (sn, sc) {
        return Err(Error::shape(format!(
            "contextual similarity: feature sets {rn}x{rc} and {sn}x{sc} differ"
        )));
    }
    if !(h > 0.0) || !(eps > 0.0) {
        return Err(Error::config(format!(
            "contextual similarity: bandwidth {h} and epsilon {eps} must be positive"
        )));
    }
    let (n, c) = (rn, rc);
    let (rhat, r_norm) = normalise_rows(target.data(), n, c);
    let (shat, s_norm) = normalise_rows(pred.data(), n, c);

    let mut cos = vec![0.0; n * n];
    let mut live = vec![true; n * n];
    for i in 0..n {
        let r = &rhat[i * c..(i + 1) * c];
        for j in 0..n {
            if r_norm[i] == 0.0 || s_norm[j] == 0.0 {
                // Convention: distance 1, i.e. cosine 0, held constant.
                live[i * n + j] = false;
                continue;
            }
            let s = &shat[j * c..(j + 1) * c];
            cos[i * n + j] = r.iter().zip(s).map(|(a, b)| a * b).sum();
        }
    }

    let mut row_min = vec![0.0; n];
    let mut row_argmin = vec![0usize; n];
    for i in 0..n {
        let (mut best, mut best_j) = (f64::INFINITY, 0);
        for j in 0..n {
            let d = 1.0 - cos[i * n + j];
            if d < best {
                best = d;
                best_j = j;
            }
        }
        row_min[i] = best;
        row_argmin[i] = best_j;
    }

    let mut w = vec![0.0; n * n];
    for i in 0..n {
        let denom = row_min[i] + eps;
        for j in 0..n {
            let d = 1.0 - cos[i * n + j];
            w[i * n + j] = ((1.0 - d / denom) / h).exp();
        }
    }

    let mut z = vec![0.0; n];
    match norm {
        CxNorm::RowWise => {
            for i in 0..n {
                z[i] = w[i * n..(i + 1) * n].iter().sum();
            }
        }
        CxNorm::ColumnWise => {
            for j in 0..n {
                z[j] = (0..n).map(|i| w[i * n + j]).sum();
            }
        }
    }

    let cxm = |i: usize, j: usize| -> f64 {
        let zi = match norm {
            CxNorm::RowWise => z[i],
            CxNorm::ColumnWise => z[j],
        };
        w[i * n + j] / zi
    };

    let mut col_argmax = vec![0usize; n];
    let mut total = 0.0;
    for j in 0..n {
        let (mut best, mut best_i) = (f64::NEG_INFINITY, 0);
        for i in 0..n {
            let v = cxm(i, j);
            if v > best {
                best = v;
                best_i = i;
            }
        }
        col_argmax[j] = best_i;
        total += best;
    }
    let value = total / n as f64;
    if !value.is_finite() {
        return Err(Error::numeric("contextual similarity produced a non-finite value"));
    }
    let aux = CxAux {
        n,
        c,
        h,
        eps,
        norm,
        rhat,
        shat,
        s_norm,
        cos,
        live,
        w,
        z,
        row_min,
        row_argmin,
        col_argmax,
    };
    Ok((value, aux))
}

/// Accumulates `go * dCX/dS` into `grad_s` (layout `[n, c]`).
pub(crate) fn backward(aux: &CxAux, go: f64, grad_s: &mut [f64]) {
    let n = aux.n;
    let c = aux.c;
    let scale = go / n as f64;

    // d(CX)/d(w) through the argmax picks and the quotient rule. Only
    // the winning rows of the sparse upstream matter:
    //   row-wise:    g_w[i][q] = g_cx[i][q]/Z_i - A_i/Z_i^2,
    //                A_i = sum over winning columns j of g * w_ij
    //   column-wise: g_w[p][j] = g_cx[p][j]/Z_j - B_j/Z_j^2,
    //                B_j = g * w[i*_j][j]
    let mut g_w = vec![0.0; n * n];
    match aux.norm {
        CxNorm::RowWise => {
            let mut a = vec![0.0; n];
            for j in 0..n {
                let i = aux.col_argmax[j];
                a[i] += scale * aux.w[i * n + j];
            }
            for i in 0..n {
                let zi = aux.z[i];
                let base = -a[i] / (zi * zi);
                for q in 0..n {
                    g_w[i * n + q] = base;
                }
            }
            for j in 0..n {
                let i = aux.col_argmax[j];
                g_w[i * n + j] += scale / aux.z[i];
            }
        }
        CxNorm::ColumnWise => {
            for j in 0..n {
                let zj = aux.z[j];
                let i_star = aux.col_argmax[j];
                let b = scale * aux.w[i_star * n + j];
                let base = -b / (zj * zj);
                for p in 0..n {
                    g_w[p * n + j] = base;
                }
                g_w[i_star * n + j] += scale / zj;
            }
        }
    }

    // Through w = exp((1 - dt)/h) and dt = d / (min + eps). The row
    // minimum contributes an extra term at its argmin entry.
    let mut g_d = vec![0.0; n * n];
    for i in 0..n {
        let denom = aux.row_min[i] + aux.eps;
        let mut min_acc = 0.0;
        for j in 0..n {
            let idx = i * n + j;
            let g_dt = g_w[idx] * aux.w[idx] * (-1.0 / aux.h);
            g_d[idx] += g_dt / denom;
            let d = 1.0 - aux.cos[idx];
            min_acc += g_dt * (-d / (denom * denom));
        }
        g_d[i * n + aux.row_argmin[i]] += min_acc;
    }

    // Through the cosine into s_j:
    //   d(cos_ij)/d(s_j) = (rhat_i - cos_ij * shat_j) / |s_j|
    for j in 0..n {
        let sn = aux.s_norm[j];
        if sn == 0.0 {
            continue;
        }
        let mut acc = vec![0.0; c];
        let mut cos_acc = 0.0;
        for i in 0..n {
            let idx = i * n + j;
            if !aux.live[idx] {
                continue;
            }
            let g_cos = -g_d[idx];
            if g_cos == 0.0 {
                continue;
            }
            for (a, &r) in acc.iter_mut().zip(&aux.rhat[i * c..(i + 1) * c]) {
                *a += g_cos * r;
            }
            cos_acc += g_cos * aux.cos[idx];
        }
        for (g, (a, &s)) in grad_s[j * c..(j + 1) * c]
            .iter_mut()
            .zip(acc.iter().zip(&aux.shat[j * c..(j + 1) * c]))
        {
            *g += (a - cos_acc * s) / sn;
        }
    }
}
