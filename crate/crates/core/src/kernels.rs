//! Raw numeric kernels behind the autodiff ops. Everything is f64, row-major,
//! with fixed accumulation order so repeated runs are bit-identical.
//!
//! Convolutions go through im2col + a register-blocked GEMM; that path carries
//! nearly all of the training cost, so it is written for the vectorizer.
//!
//! Large GEMMs split their output rows across the rayon pool. Every output
//! element is still accumulated by exactly one thread in the serial order, so
//! results do not depend on the thread count.

use std::cell::RefCell;

use rayon::prelude::*;

/// Batch-norm epsilon shared by forward and backward.
pub const BN_EPS: f64 = 1e-5;
/// Running-stat retention factor: running = BN_MOMENTUM * running + (1 - BN_MOMENTUM) * batch.
pub const BN_MOMENTUM: f64 = 0.9;

/// Below this many multiply-adds a GEMM stays single-threaded.
const PAR_MIN_OPS: usize = 1 << 20;

thread_local! {
    static COLS_SCRATCH: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

// ---------------------------------------------------------------------------
// GEMM
// ---------------------------------------------------------------------------

/// Rows per parallel chunk so that `m` rows spread evenly over the pool.
fn row_chunk(m: usize) -> usize {
    let threads = rayon::current_num_threads().max(1);
    m.div_ceil(threads).max(1)
}

fn use_par(ops: usize) -> bool {
    ops >= PAR_MIN_OPS && rayon::current_num_threads() > 1
}

/// c[m][n] += a[m][k] @ b[k][n]. Rows contiguous. The k-unrolled axpy keeps the
/// accumulator row streaming through L1 while four b rows are fused per pass.
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if use_par(m * k * n) && m > 1 {
        let rows = row_chunk(m);
        c.par_chunks_mut(rows * n)
            .zip(a.par_chunks(rows * k))
            .for_each(|(crows, arows)| gemm_nn_rows(crows.len() / n, k, n, arows, b, crows));
    } else {
        gemm_nn_rows(m, k, n, a, b, c);
    }
}

/// f64 slots in one cached slab of b (1 MiB, half a typical L2).
const PANEL_SLOTS: usize = 1 << 17;

/// Block extents so a kb x nt slab of b stays resident while every output row
/// sweeps it. kb is a multiple of 4 to keep the unrolled tail alignment fixed.
fn panel_tiles(k: usize, n: usize) -> (usize, usize) {
    let kb = k.clamp(1, 512);
    let nt = (PANEL_SLOTS / kb).max(64).min(n.max(1));
    (kb, nt)
}

fn gemm_nn_rows(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    let (kb, nt) = panel_tiles(k, n);
    let mut j0 = 0;
    while j0 < n {
        let jw = nt.min(n - j0);
        let mut k0 = 0;
        while k0 < k {
            let kw = kb.min(k - k0);
            for mi in 0..m {
                let crow = &mut c[mi * n + j0..][..jw];
                let arow = &a[mi * k..(mi + 1) * k];
                let mut kk = k0;
                while kk + 4 <= k0 + kw {
                    let a0 = arow[kk];
                    let a1 = arow[kk + 1];
                    let a2 = arow[kk + 2];
                    let a3 = arow[kk + 3];
                    let b0 = &b[kk * n + j0..][..jw];
                    let b1 = &b[(kk + 1) * n + j0..][..jw];
                    let b2 = &b[(kk + 2) * n + j0..][..jw];
                    let b3 = &b[(kk + 3) * n + j0..][..jw];
                    for j in 0..jw {
                        crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
                    }
                    kk += 4;
                }
                while kk < k0 + kw {
                    let av = arow[kk];
                    let brow = &b[kk * n + j0..][..jw];
                    for j in 0..jw {
                        crow[j] += av * brow[j];
                    }
                    kk += 1;
                }
            }
            k0 += kw;
        }
        j0 += jw;
    }
}

/// c[m][n] += a[m][l] @ b[n][l]^T — rows of both operands contiguous, so each
/// output element is a dot product of two rows.
pub fn gemm_abt(m: usize, l: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * l);
    debug_assert_eq!(b.len(), n * l);
    debug_assert_eq!(c.len(), m * n);
    if use_par(m * l * n) && m > 1 {
        let rows = row_chunk(m);
        c.par_chunks_mut(rows * n)
            .zip(a.par_chunks(rows * l))
            .for_each(|(crows, arows)| gemm_abt_rows(crows.len() / n, l, n, arows, b, crows));
    } else {
        gemm_abt_rows(m, l, n, a, b, c);
    }
}

fn gemm_abt_rows(m: usize, l: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    // Block the b rows so a slab of them is reused by every a row; each dot is
    // still one full-length stride-4 pass, so element values match the naive loop.
    let nb = (PANEL_SLOTS / l.max(1)).max(4).min(n.max(1));
    let mut n0 = 0;
    while n0 < n {
        let nw = nb.min(n - n0);
        for mi in 0..m {
            let arow = &a[mi * l..][..l];
            let crow = &mut c[mi * n..][..n];
            let mut ni = n0;
            while ni + 4 <= n0 + nw {
                let d = dot4(
                    arow,
                    &b[ni * l..][..l],
                    &b[(ni + 1) * l..][..l],
                    &b[(ni + 2) * l..][..l],
                    &b[(ni + 3) * l..][..l],
                );
                crow[ni] += d[0];
                crow[ni + 1] += d[1];
                crow[ni + 2] += d[2];
                crow[ni + 3] += d[3];
                ni += 4;
            }
            while ni < n0 + nw {
                let brow = &b[ni * l..][..l];
                crow[ni] += dot(arow, brow);
                ni += 1;
            }
        }
        n0 += nw;
    }
}

/// c[k][n] += a[m][k]^T @ b[m][n].
pub fn gemm_atb(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    if use_par(m * k * n) && k > 1 {
        let rows = row_chunk(k);
        c.par_chunks_mut(rows * n)
            .enumerate()
            .for_each(|(chunk, crows)| {
                gemm_atb_rows(m, k, n, a, b, crows, chunk * rows);
            });
    } else {
        gemm_atb_rows(m, k, n, a, b, c, 0);
    }
}

/// Fills `c` rows `[k0, k0 + c.len()/n)` of the full k x n product.
fn gemm_atb_rows(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], k0: usize) {
    let rows = c.len() / n;
    let (mb, nt) = panel_tiles(m, n);
    let mut j0 = 0;
    while j0 < n {
        let jw = nt.min(n - j0);
        let mut m0 = 0;
        while m0 < m {
            let mw = mb.min(m - m0);
            for r in 0..rows {
                let ki = k0 + r;
                let crow = &mut c[r * n + j0..][..jw];
                let mut mi = m0;
                while mi + 4 <= m0 + mw {
                    let a0 = a[mi * k + ki];
                    let a1 = a[(mi + 1) * k + ki];
                    let a2 = a[(mi + 2) * k + ki];
                    let a3 = a[(mi + 3) * k + ki];
                    let b0 = &b[mi * n + j0..][..jw];
                    let b1 = &b[(mi + 1) * n + j0..][..jw];
                    let b2 = &b[(mi + 2) * n + j0..][..jw];
                    let b3 = &b[(mi + 3) * n + j0..][..jw];
                    for j in 0..jw {
                        crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
                    }
                    mi += 4;
                }
                while mi < m0 + mw {
                    let av = a[mi * k + ki];
                    let brow = &b[mi * n + j0..][..jw];
                    for j in 0..jw {
                        crow[j] += av * brow[j];
                    }
                    mi += 1;
                }
            }
            m0 += mw;
        }
        j0 += jw;
    }
}

/// Four dot products sharing one pass over `a`. Each output accumulates in the
/// same four-lane order as `dot`, so the results match it bit for bit.
#[inline]
fn dot4(a: &[f64], b0: &[f64], b1: &[f64], b2: &[f64], b3: &[f64]) -> [f64; 4] {
    let n = a.len();
    let mut acc = [[0.0f64; 4]; 4];
    let mut i = 0;
    while i + 4 <= n {
        for j in 0..4 {
            acc[0][j] += a[i + j] * b0[i + j];
            acc[1][j] += a[i + j] * b1[i + j];
            acc[2][j] += a[i + j] * b2[i + j];
            acc[3][j] += a[i + j] * b3[i + j];
        }
        i += 4;
    }
    let mut out = [0.0f64; 4];
    for (o, lanes) in out.iter_mut().zip(acc.iter()) {
        *o = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    }
    while i < n {
        out[0] += a[i] * b0[i];
        out[1] += a[i] * b1[i];
        out[2] += a[i] * b2[i];
        out[3] += a[i] * b3[i];
        i += 1;
    }
    out
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let mut i = 0;
    while i + 4 <= n {
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
        i += 4;
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    while i < n {
        s += a[i] * b[i];
        i += 1;
    }
    s
}

// ---------------------------------------------------------------------------
// Convolution (stride 1, shape-preserving padding, k in {1, 3})
// ---------------------------------------------------------------------------

/// Lays out one image as a [c*k*k, h*w] patch matrix for a 3x3 kernel, pad 1.
/// Out-of-range taps are zero.
fn im2col_3x3(x: &[f64], c: usize, h: usize, w: usize, cols: &mut [f64]) {
    debug_assert_eq!(x.len(), c * h * w);
    debug_assert_eq!(cols.len(), c * 9 * h * w);
    let plane = h * w;
    if use_par(c * 9 * plane) && c > 1 {
        cols.par_chunks_mut(9 * plane)
            .zip(x.par_chunks(plane))
            .for_each(|(chunk, src)| im2col_3x3_plane(src, h, w, chunk));
        return;
    }
    for ci in 0..c {
        im2col_3x3_plane(&x[ci * plane..][..plane], h, w, &mut cols[ci * 9 * plane..][..9 * plane]);
    }
}

/// One input channel's nine shifted copies.
fn im2col_3x3_plane(src: &[f64], h: usize, w: usize, cols: &mut [f64]) {
    let plane = h * w;
    for ky in 0..3usize {
        for kx in 0..3usize {
            let row = &mut cols[(ky * 3 + kx) * plane..][..plane];
            for oy in 0..h {
                let iy = oy as isize + ky as isize - 1;
                let dst = &mut row[oy * w..][..w];
                if iy < 0 || iy >= h as isize {
                    dst.fill(0.0);
                    continue;
                }
                let srow = &src[iy as usize * w..][..w];
                match kx {
                    0 => {
                        dst[0] = 0.0;
                        dst[1..].copy_from_slice(&srow[..w - 1]);
                    }
                    1 => dst.copy_from_slice(srow),
                    _ => {
                        dst[..w - 1].copy_from_slice(&srow[1..]);
                        dst[w - 1] = 0.0;
                    }
                }
            }
        }
    }
}

/// Scatters gradient patch rows back onto the input image (adjoint of im2col).
fn col2im_3x3(dcols: &[f64], c: usize, h: usize, w: usize, dx: &mut [f64]) {
    let plane = h * w;
    if use_par(c * 9 * plane) && c > 1 {
        dx.par_chunks_mut(plane)
            .zip(dcols.par_chunks(9 * plane))
            .for_each(|(dst, rows)| col2im_3x3_plane(rows, h, w, dst));
        return;
    }
    for ci in 0..c {
        col2im_3x3_plane(&dcols[ci * 9 * plane..][..9 * plane], h, w, &mut dx[ci * plane..][..plane]);
    }
}

/// Adds one channel's nine shifted gradient rows back onto its input plane.
fn col2im_3x3_plane(dcols: &[f64], h: usize, w: usize, dst: &mut [f64]) {
    let plane = h * w;
    for ky in 0..3usize {
        for kx in 0..3usize {
            let row = &dcols[(ky * 3 + kx) * plane..][..plane];
            for oy in 0..h {
                let iy = oy as isize + ky as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let drow = &mut dst[iy as usize * w..][..w];
                let srow = &row[oy * w..][..w];
                match kx {
                    0 => {
                        for j in 1..w {
                            drow[j - 1] += srow[j];
                        }
                    }
                    1 => {
                        for j in 0..w {
                            drow[j] += srow[j];
                        }
                    }
                    _ => {
                        for j in 0..w - 1 {
                            drow[j + 1] += srow[j];
                        }
                    }
                }
            }
        }
    }
}

fn with_cols<R>(len: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    COLS_SCRATCH.with(|cell| {
        let mut buf = cell.borrow_mut();
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        f(&mut buf[..len])
    })
}

/// Forward convolution over an NCHW batch. `k` is 1 or 3; padding (k-1)/2.
pub fn conv2d_fwd(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    weight: &[f64],
    (oc, ic, k): (usize, usize, usize),
    bias: &[f64],
) -> Vec<f64> {
    debug_assert_eq!(c, ic);
    debug_assert!(k == 1 || k == 3);
    let plane = h * w;
    let mut out = vec![0.0; n * oc * plane];
    for ni in 0..n {
        let xin = &x[ni * c * plane..][..c * plane];
        let yout = &mut out[ni * oc * plane..][..oc * plane];
        if k == 1 {
            gemm_nn(oc, c, plane, weight, xin, yout);
        } else {
            with_cols(c * 9 * plane, |cols| {
                im2col_3x3(xin, c, h, w, cols);
                gemm_nn(oc, c * 9, plane, weight, cols, yout);
            });
        }
        for oci in 0..oc {
            let b = bias[oci];
            if b != 0.0 {
                for v in &mut yout[oci * plane..][..plane] {
                    *v += b;
                }
            }
        }
    }
    out
}

/// Backward convolution. Returns gradients for (input, weight, bias); the
/// input gradient is skipped when `need_dx` is false (first layer).
pub fn conv2d_bwd(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    weight: &[f64],
    (oc, _ic, k): (usize, usize, usize),
    dout: &[f64],
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let plane = h * w;
    let kk = c * k * k;
    let mut dw = vec![0.0; oc * kk];
    let mut db = vec![0.0; oc];
    let mut dx = if need_dx { Some(vec![0.0; n * c * plane]) } else { None };

    for ni in 0..n {
        let xin = &x[ni * c * plane..][..c * plane];
        let dy = &dout[ni * oc * plane..][..oc * plane];
        for oci in 0..oc {
            let mut s = 0.0;
            for &v in &dy[oci * plane..][..plane] {
                s += v;
            }
            db[oci] += s;
        }
        if k == 1 {
            gemm_abt(oc, plane, c, dy, xin, &mut dw);
            if let Some(dx) = dx.as_mut() {
                let dxi = &mut dx[ni * c * plane..][..c * plane];
                gemm_atb(oc, c, plane, weight, dy, dxi);
            }
        } else {
            with_cols(kk * plane, |cols| {
                im2col_3x3(xin, c, h, w, cols);
                gemm_abt(oc, plane, kk, dy, cols, &mut dw);
                if dx.is_some() {
                    cols.fill(0.0);
                    gemm_atb(oc, kk, plane, weight, dy, cols);
                }
                if let Some(dx) = dx.as_mut() {
                    let dxi = &mut dx[ni * c * plane..][..c * plane];
                    col2im_3x3(cols, c, h, w, dxi);
                }
            });
        }
    }
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// Pooling and upsampling
// ---------------------------------------------------------------------------

/// 2x2 max pool; ties go to the first index in window scan order. Returns the
/// pooled values and per-output argmax offsets within each (n, c) plane.
pub fn maxpool2x2_fwd(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
) -> (Vec<f64>, Vec<u32>) {
    debug_assert!(h % 2 == 0 && w % 2 == 0);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; n * c * oh * ow];
    let mut arg = vec![0u32; n * c * oh * ow];
    for p in 0..n * c {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        let am = &mut arg[p * oh * ow..][..oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0u32;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > best {
                            best = src[idx];
                            best_idx = idx as u32;
                        }
                    }
                }
                dst[oy * ow + ox] = best;
                am[oy * ow + ox] = best_idx;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2x2_bwd(
    dout: &[f64],
    arg: &[u32],
    (n, c, h, w): (usize, usize, usize, usize),
) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![0.0; n * c * h * w];
    for p in 0..n * c {
        let dsrc = &dout[p * oh * ow..][..oh * ow];
        let am = &arg[p * oh * ow..][..oh * ow];
        let ddst = &mut dx[p * h * w..][..h * w];
        for i in 0..oh * ow {
            ddst[am[i] as usize] += dsrc[i];
        }
    }
    dx
}

pub fn upsample2x_fwd(x: &[f64], (n, c, h, w): (usize, usize, usize, usize)) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * c * oh * ow];
    for p in 0..n * c {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for y in 0..h {
            let srow = &src[y * w..][..w];
            let (r0, r1) = dst[2 * y * ow..][..2 * ow].split_at_mut(ow);
            for x in 0..w {
                r0[2 * x] = srow[x];
                r0[2 * x + 1] = srow[x];
            }
            r1.copy_from_slice(r0);
        }
    }
    out
}

pub fn upsample2x_bwd(dout: &[f64], (n, c, h, w): (usize, usize, usize, usize)) -> Vec<f64> {
    let ow = 2 * w;
    let mut dx = vec![0.0; n * c * h * w];
    for p in 0..n * c {
        let dsrc = &dout[p * 4 * h * w..][..4 * h * w];
        let ddst = &mut dx[p * h * w..][..h * w];
        for y in 0..h {
            let drow = &mut ddst[y * w..][..w];
            let s0 = &dsrc[2 * y * ow..][..ow];
            let s1 = &dsrc[(2 * y + 1) * ow..][..ow];
            for x in 0..w {
                drow[x] = s0[2 * x] + s0[2 * x + 1] + s1[2 * x] + s1[2 * x + 1];
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Per-channel batch statistics saved by the forward pass for backward.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Training-mode batch norm over N x H x W per channel. Updates `running_mean`
/// and `running_var` in place with the biased batch variance.
pub fn batchnorm_train_fwd(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    gamma: &[f64],
    beta: &[f64],
    running_mean: &mut [f64],
    running_var: &mut [f64],
) -> (Vec<f64>, BnStats) {
    let plane = h * w;
    let count = (n * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut inv_std = vec![0.0; c];
    let mut out = vec![0.0; x.len()];
    for ci in 0..c {
        let mut s = 0.0;
        for ni in 0..n {
            for &v in &x[(ni * c + ci) * plane..][..plane] {
                s += v;
            }
        }
        let mu = s / count;
        let mut var = 0.0;
        for ni in 0..n {
            for &v in &x[(ni * c + ci) * plane..][..plane] {
                let d = v - mu;
                var += d * d;
            }
        }
        var /= count;
        mean[ci] = mu;
        inv_std[ci] = 1.0 / (var + BN_EPS).sqrt();
        running_mean[ci] = BN_MOMENTUM * running_mean[ci] + (1.0 - BN_MOMENTUM) * mu;
        running_var[ci] = BN_MOMENTUM * running_var[ci] + (1.0 - BN_MOMENTUM) * var;
        let (g, b, istd) = (gamma[ci], beta[ci], inv_std[ci]);
        for ni in 0..n {
            let src = &x[(ni * c + ci) * plane..][..plane];
            let dst = &mut out[(ni * c + ci) * plane..][..plane];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = g * (v - mu) * istd + b;
            }
        }
    }
    (out, BnStats { mean, inv_std })
}

/// Eval-mode batch norm using the provided running statistics.
pub fn batchnorm_eval_fwd(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
) -> (Vec<f64>, BnStats) {
    let plane = h * w;
    let mut out = vec![0.0; x.len()];
    let mean = running_mean.to_vec();
    let inv_std: Vec<f64> = running_var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
    for ci in 0..c {
        let (g, b, mu, istd) = (gamma[ci], beta[ci], mean[ci], inv_std[ci]);
        for ni in 0..n {
            let src = &x[(ni * c + ci) * plane..][..plane];
            let dst = &mut out[(ni * c + ci) * plane..][..plane];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = g * (v - mu) * istd + b;
            }
        }
    }
    (out, BnStats { mean, inv_std })
}

/// Full batch-norm backward (training mode). For eval mode pass
/// `batch_stats = false`: the saved mean/inv_std are treated as constants.
pub fn batchnorm_bwd(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    gamma: &[f64],
    stats: &BnStats,
    dout: &[f64],
    batch_stats: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let plane = h * w;
    let count = (n * plane) as f64;
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ci in 0..c {
        let (mu, istd, g) = (stats.mean[ci], stats.inv_std[ci], gamma[ci]);
        let mut s1 = 0.0; // sum dy
        let mut s2 = 0.0; // sum dy * xhat
        for ni in 0..n {
            let xs = &x[(ni * c + ci) * plane..][..plane];
            let dys = &dout[(ni * c + ci) * plane..][..plane];
            for (&xv, &dy) in xs.iter().zip(dys) {
                s1 += dy;
                s2 += dy * (xv - mu) * istd;
            }
        }
        dbeta[ci] = s1;
        dgamma[ci] = s2;
        for ni in 0..n {
            let xs = &x[(ni * c + ci) * plane..][..plane];
            let dys = &dout[(ni * c + ci) * plane..][..plane];
            let dxs = &mut dx[(ni * c + ci) * plane..][..plane];
            if batch_stats {
                for ((dxv, &xv), &dy) in dxs.iter_mut().zip(xs).zip(dys) {
                    let xhat = (xv - mu) * istd;
                    *dxv = g * istd * (dy - s1 / count - xhat * s2 / count);
                }
            } else {
                for (dxv, &dy) in dxs.iter_mut().zip(dys) {
                    *dxv = g * istd * dy;
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for mi in 0..m {
            for ki in 0..k {
                for ni in 0..n {
                    c[mi * n + ni] += a[mi * k + ki] * b[ki * n + ni];
                }
            }
        }
        c
    }

    /// Direct nested-loop convolution used as the oracle for the GEMM path.
    fn conv_reference(
        x: &[f64],
        (n, c, h, w): (usize, usize, usize, usize),
        weight: &[f64],
        (oc, _ic, k): (usize, usize, usize),
        bias: &[f64],
    ) -> Vec<f64> {
        let pad = (k as isize - 1) / 2;
        let mut out = vec![0.0; n * oc * h * w];
        for ni in 0..n {
            for oci in 0..oc {
                for oy in 0..h as isize {
                    for ox in 0..w as isize {
                        let mut acc = bias[oci];
                        for ci in 0..c {
                            for ky in 0..k as isize {
                                for kx in 0..k as isize {
                                    let iy = oy + ky - pad;
                                    let ix = ox + kx - pad;
                                    if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let xv = x[((ni * c + ci) * h + iy as usize) * w + ix as usize];
                                    let wv = weight
                                        [((oci * c + ci) * k + ky as usize) * k + kx as usize];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out[((ni * oc + oci) * h + oy as usize) * w + ox as usize] = acc;
                    }
                }
            }
        }
        out
    }

    fn rng_seq(len: usize, seed: u64) -> Vec<f64> {
        // simple LCG; good enough to fill test tensors
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        (0..len)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn gemm_variants_match_naive() {
        let (m, k, n) = (5, 7, 11);
        let a = rng_seq(m * k, 1);
        let b = rng_seq(k * n, 2);
        let expect = naive_gemm(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, &mut c);
        for (x, y) in c.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }

        // abt: c[m][n] = a[m][l] @ b[n][l]^T, check against naive on transposed b
        let bt: Vec<f64> = (0..n * k).map(|i| b[(i % k) * n + i / k]).collect();
        let mut c2 = vec![0.0; m * n];
        gemm_abt(m, k, n, &a, &bt, &mut c2);
        for (x, y) in c2.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }

        // atb: c[k][n] = a[m][k]^T @ b[m][n]
        let at: Vec<f64> = (0..k * m).map(|i| a[(i % m) * k + i / m]).collect();
        let b2 = rng_seq(m * n, 3);
        let expect2 = naive_gemm(k, m, n, &at, &b2);
        let mut c3 = vec![0.0; k * n];
        gemm_atb(m, k, n, &a, &b2, &mut c3);
        for (x, y) in c3.iter().zip(&expect2) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_identity_kernel_preserves_input() {
        let x = vec![1.0; 9];
        let mut w = vec![0.0; 9];
        w[4] = 1.0; // center tap
        let out = conv2d_fwd(&x, (1, 1, 3, 3), &w, (1, 1, 3), &[0.0]);
        assert_eq!(out, x);
    }

    #[test]
    fn conv_all_ones_kernel_counts_neighbors() {
        let x = vec![1.0; 9];
        let w = vec![1.0; 9];
        let out = conv2d_fwd(&x, (1, 1, 3, 3), &w, (1, 1, 3), &[0.0]);
        // corners see 4 taps, edge centers 6, center 9
        assert_eq!(out, vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv_1x1_is_pointwise_affine() {
        let x = rng_seq(2 * 3 * 4 * 4, 7);
        let out = conv2d_fwd(&x, (2, 3, 4, 4), &[2.0, 0.0, 0.0], (1, 3, 1), &[1.0]);
        for (i, &o) in out.iter().enumerate() {
            let n = i / 16;
            let px = i % 16;
            let expect = 2.0 * x[(n * 3) * 16 + px] + 1.0;
            assert!((o - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_gemm_path_matches_reference() {
        for &(n, c, oc, h, w, k) in
            &[(1, 1, 1, 3, 3, 3), (2, 3, 5, 6, 7, 3), (1, 4, 2, 5, 5, 1), (2, 2, 3, 8, 4, 3)]
        {
            let x = rng_seq(n * c * h * w, 11 + h as u64);
            let wt = rng_seq(oc * c * k * k, 13 + w as u64);
            let b = rng_seq(oc, 17);
            let fast = conv2d_fwd(&x, (n, c, h, w), &wt, (oc, c, k), &b);
            let slow = conv_reference(&x, (n, c, h, w), &wt, (oc, c, k), &b);
            for (f, s) in fast.iter().zip(&slow) {
                assert!((f - s).abs() < 1e-10, "conv mismatch {f} vs {s}");
            }
        }
    }

    #[test]
    fn maxpool_examples() {
        let (out, _) = maxpool2x2_fwd(&[1.0, 2.0, 3.0, 4.0], (1, 1, 2, 2));
        assert_eq!(out, vec![4.0]);

        let ramp: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let (out, _) = maxpool2x2_fwd(&ramp, (1, 1, 4, 4));
        assert_eq!(out, vec![5.0, 7.0, 13.0, 15.0]);

        // ties route the gradient to the first window position
        let (out, arg) = maxpool2x2_fwd(&[2.0; 4], (1, 1, 2, 2));
        assert_eq!(out, vec![2.0]);
        assert_eq!(arg, vec![0]);
        let dx = maxpool2x2_bwd(&[1.0], &arg, (1, 1, 2, 2));
        assert_eq!(dx, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_replicates_blocks_and_sums_gradient() {
        let out = upsample2x_fwd(&[1.0, 2.0, 3.0, 4.0], (1, 1, 2, 2));
        assert_eq!(
            out,
            vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        let dx = upsample2x_bwd(&[1.0; 16], (1, 1, 2, 2));
        assert_eq!(dx, vec![4.0; 4]);
    }

    #[test]
    fn maxpool_of_upsample_is_identity() {
        let x = rng_seq(2 * 3 * 4 * 4, 23);
        let up = upsample2x_fwd(&x, (2, 3, 4, 4));
        let (down, _) = maxpool2x2_fwd(&up, (2, 3, 8, 8));
        assert_eq!(down, x);
    }

    #[test]
    fn batchnorm_two_value_channel() {
        // values {1, 3}: mean 2, var 1 -> normalized to +-1/sqrt(1 + eps)
        let x = vec![1.0, 3.0];
        let mut rm = vec![0.0];
        let mut rv = vec![1.0];
        let (out, _) = batchnorm_train_fwd(&x, (1, 1, 1, 2), &[1.0], &[0.0], &mut rm, &mut rv);
        let expect = 1.0 / (1.0f64 + BN_EPS).sqrt();
        assert!((out[0] + expect).abs() < 1e-12);
        assert!((out[1] - expect).abs() < 1e-12);
        assert!((rm[0] - 0.2).abs() < 1e-12); // 0.9 * 0 + 0.1 * 2
        assert!((rv[0] - 1.0).abs() < 1e-12); // 0.9 * 1 + 0.1 * 1
    }

    #[test]
    fn batchnorm_eval_is_affine_in_running_stats() {
        let x = vec![0.5, -1.0, 2.0, 0.0];
        let (out, _) =
            batchnorm_eval_fwd(&x, (1, 1, 2, 2), &[1.0], &[5.0], &[0.0], &[1.0 - BN_EPS]);
        for (o, v) in out.iter().zip(&x) {
            assert!((o - (v + 5.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_shifts_mean_to_beta() {
        let x = vec![-1.0, 1.0, -2.0, 2.0];
        let mut rm = vec![0.0];
        let mut rv = vec![1.0];
        let (out, _) = batchnorm_train_fwd(&x, (1, 1, 2, 2), &[1.0], &[5.0], &mut rm, &mut rv);
        let mean: f64 = out.iter().sum::<f64>() / 4.0;
        assert!((mean - 5.0).abs() < 1e-12);
    }
}
