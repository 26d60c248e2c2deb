//! Raw array kernels behind the tape ops: im2col/col2im convolutions on
//! GEMM, batch-norm statistics, pooling, bilinear resize, Gaussian kernels.
//!
//! Conventions
//! - conv2d weight is [O, I, K, K]; conv_transpose2d weight is [I, O, K, K].
//! - The transposed convolution is the exact adjoint of conv2d, and
//!   conv2d's input gradient *is* a transposed convolution on the same
//!   weight buffer (reinterpreted [O,I,K,K] -> [I_t=O, O_t=I]), so the two
//!   share one kernel (`convt_core`).
//! - Reductions accumulate in f64 in a fixed order: deterministic and
//!   precise enough for f32 training.

use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

// ── im2col / col2im ─────────────────────────────────────────────────────

/// Gather one sample [C,H,W] into columns [C*K*K, GH*GW], where grid cell
/// (gh,gw) reads source pixel (gh*stride + ki - pad, gw*stride + kj - pad),
/// zero outside the image.
#[allow(clippy::too_many_arguments)]
pub fn im2col<S: Scalar>(
    x: &[S], c: usize, h: usize, w: usize,
    k: usize, stride: usize, pad: usize,
    gh: usize, gw: usize,
    cols: &mut [S],
) {
    debug_assert_eq!(x.len(), c * h * w);
    debug_assert_eq!(cols.len(), c * k * k * gh * gw);
    let grid = gh * gw;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst_base = row * grid;
                for g_h in 0..gh {
                    let ih = (g_h * stride + ki) as isize - pad as isize;
                    let dst = dst_base + g_h * gw;
                    if ih < 0 || ih >= h as isize {
                        cols[dst..dst + gw].fill(S::zero());
                        continue;
                    }
                    let src_row = (ci * h + ih as usize) * w;
                    if stride == 1 {
                        // iw = g_w + kj - pad: one contiguous run.
                        let shift = kj as isize - pad as isize;
                        let lo = (-shift).max(0).min(gw as isize) as usize;
                        let hi = (w as isize - shift).clamp(lo as isize, gw as isize) as usize;
                        cols[dst..dst + lo].fill(S::zero());
                        if hi > lo {
                            let s0 = (lo as isize + shift) as usize;
                            cols[dst + lo..dst + hi]
                                .copy_from_slice(&x[src_row + s0..src_row + s0 + (hi - lo)]);
                        }
                        cols[dst + hi..dst + gw].fill(S::zero());
                    } else {
                        for g_w in 0..gw {
                            let iw = (g_w * stride + kj) as isize - pad as isize;
                            cols[dst + g_w] = if iw >= 0 && iw < w as isize {
                                x[src_row + iw as usize]
                            } else {
                                S::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: scatter-add columns [C*K*K, GH*GW] into [C,TH,TW].
/// The target buffer is accumulated into, not cleared.
#[allow(clippy::too_many_arguments)]
pub fn col2im<S: Scalar>(
    cols: &[S], c: usize,
    gh: usize, gw: usize,
    k: usize, stride: usize, pad: usize,
    th: usize, tw: usize,
    out: &mut [S],
) {
    debug_assert_eq!(cols.len(), c * k * k * gh * gw);
    debug_assert_eq!(out.len(), c * th * tw);
    let grid = gh * gw;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src_base = row * grid;
                for g_h in 0..gh {
                    let ih = (g_h * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= th as isize {
                        continue;
                    }
                    let dst_row = (ci * th + ih as usize) * tw;
                    let src = src_base + g_h * gw;
                    if stride == 1 {
                        let shift = kj as isize - pad as isize;
                        let lo = (-shift).max(0).min(gw as isize) as usize;
                        let hi = (tw as isize - shift).clamp(lo as isize, gw as isize) as usize;
                        let d0 = (lo as isize + shift) as usize;
                        for i in 0..hi.saturating_sub(lo) {
                            out[dst_row + d0 + i] = out[dst_row + d0 + i] + cols[src + lo + i];
                        }
                    } else {
                        for g_w in 0..gw {
                            let iw = (g_w * stride + kj) as isize - pad as isize;
                            if iw >= 0 && iw < tw as isize {
                                out[dst_row + iw as usize] =
                                    out[dst_row + iw as usize] + cols[src + g_w];
                            }
                        }
                    }
                }
            }
        }
    }
}

// ── convolutions ────────────────────────────────────────────────────────

pub fn conv_out_size(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(h + 2 * pad >= k, "conv: kernel {k} larger than padded input {h}+2*{pad}");
    (h + 2 * pad - k) / stride + 1
}

/// Forward convolution: x [N,I,H,W] * w [O,I,K,K] (+ bias [O]) -> [N,O,OH,OW].
pub fn conv_fwd<S: Scalar>(
    x: &Tensor<S>, w: &Tensor<S>, bias: Option<&[S]>, stride: usize, pad: usize,
) -> Tensor<S> {
    let (n, ci, h, wd) = (x.n(), x.c(), x.h(), x.w());
    let ws = w.shape();
    assert_eq!(ws.len(), 4, "conv weight must be rank 4, got {ws:?}");
    let (o, wi, k) = (ws[0], ws[1], ws[2]);
    assert_eq!(ws[2], ws[3], "conv kernels are square, got {ws:?}");
    assert_eq!(
        wi, ci,
        "conv channel mismatch: input {:?} vs weight {:?}",
        x.shape(), ws
    );
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(wd, k, stride, pad);
    let mut y = Tensor::zeros(vec![n, o, oh, ow]);
    let mut cols = vec![S::zero(); ci * k * k * oh * ow];
    let xs = x.data();
    let ys = y.data_mut();
    for ni in 0..n {
        im2col(&xs[ni * ci * h * wd..(ni + 1) * ci * h * wd], ci, h, wd, k, stride, pad, oh, ow, &mut cols);
        gemm(
            o, ci * k * k, oh * ow,
            1.0, w.data(), false, &cols, false,
            0.0, &mut ys[ni * o * oh * ow..(ni + 1) * o * oh * ow],
        );
    }
    if let Some(b) = bias {
        assert_eq!(b.len(), o, "conv bias length {} vs {} output channels", b.len(), o);
        for ni in 0..n {
            for oc in 0..o {
                let base = (ni * o + oc) * oh * ow;
                let bv = b[oc];
                for v in &mut ys[base..base + oh * ow] {
                    *v = *v + bv;
                }
            }
        }
    }
    y
}

/// Transposed convolution core: x [N,I_t,H,W] with weight buffer read as
/// [I_t, O_t, K, K] -> scatter into [N, O_t, th, tw]. Used as conv_transpose2d
/// forward and as conv2d's input gradient (with th,tw = the original input
/// size, which floor-division output sizes may not reconstruct).
#[allow(clippy::too_many_arguments)]
pub fn convt_core<S: Scalar>(
    x: &Tensor<S>, wbuf: &[S], it: usize, ot: usize, k: usize,
    bias: Option<&[S]>, stride: usize, pad: usize, th: usize, tw: usize,
) -> Tensor<S> {
    let (n, ci, h, wd) = (x.n(), x.c(), x.h(), x.w());
    assert_eq!(
        ci, it,
        "conv_transpose channel mismatch: input has {ci} channels, weight expects {it}"
    );
    assert_eq!(wbuf.len(), it * ot * k * k);
    let mut y = Tensor::zeros(vec![n, ot, th, tw]);
    let mut cols = vec![S::zero(); ot * k * k * h * wd];
    let xs = x.data();
    let ys = y.data_mut();
    for ni in 0..n {
        gemm(
            ot * k * k, it, h * wd,
            1.0, wbuf, true, &xs[ni * ci * h * wd..(ni + 1) * ci * h * wd], false,
            0.0, &mut cols,
        );
        col2im(&cols, ot, h, wd, k, stride, pad, th, tw, &mut ys[ni * ot * th * tw..(ni + 1) * ot * th * tw]);
    }
    if let Some(b) = bias {
        assert_eq!(b.len(), ot);
        for ni in 0..n {
            for oc in 0..ot {
                let base = (ni * ot + oc) * th * tw;
                let bv = b[oc];
                for v in &mut ys[base..base + th * tw] {
                    *v = *v + bv;
                }
            }
        }
    }
    y
}

pub fn convt_out_size(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h - 1) * stride + k - 2 * pad
}

/// Weight gradient of conv2d: dW[o,i,ki,kj] = sum_n dY_n · im2col(x_n)^T.
pub fn conv_dw<S: Scalar>(
    x: &Tensor<S>, dy: &Tensor<S>, k: usize, stride: usize, pad: usize,
) -> Tensor<S> {
    let (n, ci, h, wd) = (x.n(), x.c(), x.h(), x.w());
    let (o, oh, ow) = (dy.c(), dy.h(), dy.w());
    let mut dw = Tensor::zeros(vec![o, ci, k, k]);
    let mut cols = vec![S::zero(); ci * k * k * oh * ow];
    for ni in 0..n {
        im2col(&x.data()[ni * ci * h * wd..(ni + 1) * ci * h * wd], ci, h, wd, k, stride, pad, oh, ow, &mut cols);
        gemm(
            o, oh * ow, ci * k * k,
            1.0, &dy.data()[ni * o * oh * ow..(ni + 1) * o * oh * ow], false, &cols, true,
            1.0, dw.data_mut(),
        );
    }
    dw
}

/// Weight gradient of conv_transpose2d: dW[i,o,ki,kj] = sum_n x_n · im2col(dy_n)^T,
/// where im2col runs on dy with x's positions as the grid.
pub fn convt_dw<S: Scalar>(
    x: &Tensor<S>, dy: &Tensor<S>, k: usize, stride: usize, pad: usize,
) -> Tensor<S> {
    let (n, it, h, wd) = (x.n(), x.c(), x.h(), x.w());
    let (ot, th, tw) = (dy.c(), dy.h(), dy.w());
    let mut dw = Tensor::zeros(vec![it, ot, k, k]);
    let mut cols = vec![S::zero(); ot * k * k * h * wd];
    for ni in 0..n {
        im2col(&dy.data()[ni * ot * th * tw..(ni + 1) * ot * th * tw], ot, th, tw, k, stride, pad, h, wd, &mut cols);
        gemm(
            it, h * wd, ot * k * k,
            1.0, &x.data()[ni * it * h * wd..(ni + 1) * it * h * wd], false, &cols, true,
            1.0, dw.data_mut(),
        );
    }
    dw
}

/// Bias gradient: per-channel sum of dy over batch and space.
pub fn bias_grad<S: Scalar>(dy: &Tensor<S>) -> Vec<S> {
    let (n, c, h, w) = (dy.n(), dy.c(), dy.h(), dy.w());
    let mut db = vec![0.0f64; c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            let mut s = 0.0f64;
            for &v in &dy.data()[base..base + h * w] {
                s += v.as_f64();
            }
            db[ci] += s;
        }
    }
    db.into_iter().map(S::fr).collect()
}

// ── batch norm ──────────────────────────────────────────────────────────

/// Per-channel mean and biased variance over (N,H,W), f64 accumulation.
pub fn bn_stats<S: Scalar>(x: &Tensor<S>) -> (Vec<S>, Vec<S>) {
    let (n, c, h, w) = (x.n(), x.c(), x.h(), x.w());
    let m = (n * h * w) as f64;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            let mut s = 0.0f64;
            for &v in &x.data()[base..base + h * w] {
                s += v.as_f64();
            }
            mean[ci] += s;
        }
    }
    for v in mean.iter_mut() {
        *v /= m;
    }
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            let mu = mean[ci];
            let mut s = 0.0f64;
            for &v in &x.data()[base..base + h * w] {
                let d = v.as_f64() - mu;
                s += d * d;
            }
            var[ci] += s;
        }
    }
    for v in var.iter_mut() {
        *v /= m;
    }
    (mean.into_iter().map(S::fr).collect(), var.into_iter().map(S::fr).collect())
}

/// Normalize with the given per-channel mean/invstd and affine params.
pub fn bn_apply<S: Scalar>(
    x: &Tensor<S>, mean: &[S], invstd: &[S], gamma: &[S], beta: &[S],
) -> Tensor<S> {
    let (n, c, h, w) = (x.n(), x.c(), x.h(), x.w());
    assert_eq!(gamma.len(), c, "batch_norm gamma length {} vs {} channels", gamma.len(), c);
    assert_eq!(beta.len(), c, "batch_norm beta length {} vs {} channels", beta.len(), c);
    let mut y = Tensor::zeros(vec![n, c, h, w]);
    let ys = y.data_mut();
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            let (mu, is, g, b) = (mean[ci], invstd[ci], gamma[ci], beta[ci]);
            let scale = g * is;
            for i in base..base + h * w {
                ys[i] = (x.data()[i] - mu) * scale + b;
            }
        }
    }
    y
}

/// Backward through batch statistics (training mode).
/// Returns (dx, dgamma, dbeta).
pub fn bn_bwd_train<S: Scalar>(
    x: &Tensor<S>, dy: &Tensor<S>, mean: &[S], invstd: &[S], gamma: &[S],
) -> (Tensor<S>, Vec<S>, Vec<S>) {
    let (n, c, h, w) = (x.n(), x.c(), x.h(), x.w());
    let m = (n * h * w) as f64;
    // s1 = sum(dy), s2 = sum(dy * xhat) per channel.
    let mut s1 = vec![0.0f64; c];
    let mut s2 = vec![0.0f64; c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            let (mu, is) = (mean[ci].as_f64(), invstd[ci].as_f64());
            let (mut a, mut b) = (0.0f64, 0.0f64);
            for i in base..base + h * w {
                let g = dy.data()[i].as_f64();
                let xh = (x.data()[i].as_f64() - mu) * is;
                a += g;
                b += g * xh;
            }
            s1[ci] += a;
            s2[ci] += b;
        }
    }
    let mut dx = Tensor::zeros(vec![n, c, h, w]);
    let dxs = dx.data_mut();
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            let (mu, is, g) = (mean[ci].as_f64(), invstd[ci].as_f64(), gamma[ci].as_f64());
            let k = g * is;
            let (a, b) = (s1[ci] / m, s2[ci] / m);
            for i in base..base + h * w {
                let gy = dy.data()[i].as_f64();
                let xh = (x.data()[i].as_f64() - mu) * is;
                dxs[i] = S::fr(k * (gy - a - xh * b));
            }
        }
    }
    let dgamma = s2.into_iter().map(S::fr).collect();
    let dbeta = s1.into_iter().map(S::fr).collect();
    (dx, dgamma, dbeta)
}

/// Backward with frozen statistics (eval mode): dx = dy * gamma * invstd.
pub fn bn_bwd_eval<S: Scalar>(
    x: &Tensor<S>, dy: &Tensor<S>, mean: &[S], invstd: &[S], gamma: &[S],
) -> (Tensor<S>, Vec<S>, Vec<S>) {
    let (n, c, h, w) = (x.n(), x.c(), x.h(), x.w());
    let mut s1 = vec![0.0f64; c];
    let mut s2 = vec![0.0f64; c];
    let mut dx = Tensor::zeros(vec![n, c, h, w]);
    let dxs = dx.data_mut();
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            let (mu, is, g) = (mean[ci].as_f64(), invstd[ci].as_f64(), gamma[ci].as_f64());
            for i in base..base + h * w {
                let gy = dy.data()[i].as_f64();
                let xh = (x.data()[i].as_f64() - mu) * is;
                s1[ci] += gy;
                s2[ci] += gy * xh;
                dxs[i] = S::fr(gy * g * is);
            }
        }
    }
    (dx, s2.into_iter().map(S::fr).collect(), s1.into_iter().map(S::fr).collect())
}

// ── pooling ─────────────────────────────────────────────────────────────

/// Non-overlapping k x k max pool. Ties go to the first occurrence in
/// row-major scan order; argmax stores flat indices into x for backward.
pub fn maxpool_fwd<S: Scalar>(x: &Tensor<S>, k: usize) -> (Tensor<S>, Vec<u32>) {
    let (n, c, h, w) = (x.n(), x.c(), x.h(), x.w());
    assert!(
        h % k == 0 && w % k == 0,
        "max_pool2d requires H,W divisible by {k}, got {}x{}",
        h, w
    );
    let (oh, ow) = (h / k, w / k);
    let mut y = Tensor::zeros(vec![n, c, oh, ow]);
    let mut arg = vec![0u32; n * c * oh * ow];
    let ys = y.data_mut();
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            let obase = (ni * c + ci) * oh * ow;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = x.data()[base + (i * k) * w + j * k];
                    let mut bidx = base + (i * k) * w + j * k;
                    for di in 0..k {
                        for dj in 0..k {
                            let idx = base + (i * k + di) * w + (j * k + dj);
                            let v = x.data()[idx];
                            if v > best {
                                best = v;
                                bidx = idx;
                            }
                        }
                    }
                    ys[obase + i * ow + j] = best;
                    arg[obase + i * ow + j] = bidx as u32;
                }
            }
        }
    }
    (y, arg)
}

pub fn maxpool_bwd<S: Scalar>(dy: &[S], argmax: &[u32], x_len: usize) -> Vec<S> {
    let mut dx = vec![S::zero(); x_len];
    for (g, &idx) in dy.iter().zip(argmax) {
        dx[idx as usize] = dx[idx as usize] + *g;
    }
    dx
}

// ── bilinear resize ─────────────────────────────────────────────────────

/// Per-axis sample table for align-corners-false with edge clamping:
/// source = (i + 0.5) * in/out - 0.5, clamped into [0, in-1].
fn resize_table(out: usize, inp: usize) -> Vec<(usize, usize, f64)> {
    let scale = inp as f64 / out as f64;
    (0..out)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(inp - 1);
            let i1 = (i0 + 1).min(inp - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

pub fn resize_fwd<S: Scalar>(x: &Tensor<S>, oh: usize, ow: usize) -> Tensor<S> {
    let (n, c, h, w) = (x.n(), x.c(), x.h(), x.w());
    let ti = resize_table(oh, h);
    let tj = resize_table(ow, w);
    let mut y = Tensor::zeros(vec![n, c, oh, ow]);
    let ys = y.data_mut();
    for nc in 0..n * c {
        let base = nc * h * w;
        let obase = nc * oh * ow;
        for (i, &(i0, i1, fi)) in ti.iter().enumerate() {
            for (j, &(j0, j1, fj)) in tj.iter().enumerate() {
                let v00 = x.data()[base + i0 * w + j0].as_f64();
                let v01 = x.data()[base + i0 * w + j1].as_f64();
                let v10 = x.data()[base + i1 * w + j0].as_f64();
                let v11 = x.data()[base + i1 * w + j1].as_f64();
                let top = v00 * (1.0 - fj) + v01 * fj;
                let bot = v10 * (1.0 - fj) + v11 * fj;
                ys[obase + i * ow + j] = S::fr(top * (1.0 - fi) + bot * fi);
            }
        }
    }
    y
}

/// Adjoint of `resize_fwd`: scatter output gradients back with the same weights.
pub fn resize_bwd<S: Scalar>(dy: &Tensor<S>, ih: usize, iw: usize) -> Tensor<S> {
    let (n, c, oh, ow) = (dy.n(), dy.c(), dy.h(), dy.w());
    let ti = resize_table(oh, ih);
    let tj = resize_table(ow, iw);
    let mut dx = Tensor::zeros(vec![n, c, ih, iw]);
    let ds = dx.data_mut();
    for nc in 0..n * c {
        let base = nc * ih * iw;
        let obase = nc * oh * ow;
        for (i, &(i0, i1, fi)) in ti.iter().enumerate() {
            for (j, &(j0, j1, fj)) in tj.iter().enumerate() {
                let g = dy.data()[obase + i * ow + j].as_f64();
                ds[base + i0 * iw + j0] = ds[base + i0 * iw + j0] + S::fr(g * (1.0 - fi) * (1.0 - fj));
                ds[base + i0 * iw + j1] = ds[base + i0 * iw + j1] + S::fr(g * (1.0 - fi) * fj);
                ds[base + i1 * iw + j0] = ds[base + i1 * iw + j0] + S::fr(g * fi * (1.0 - fj));
                ds[base + i1 * iw + j1] = ds[base + i1 * iw + j1] + S::fr(g * fi * fj);
            }
        }
    }
    dx
}

// ── misc ────────────────────────────────────────────────────────────────

/// Normalized k x k Gaussian as a [1,1,k,k] conv weight.
pub fn gaussian_kernel<S: Scalar>(k: usize, sigma: f64) -> Tensor<S> {
    let half = (k as f64 - 1.0) / 2.0;
    let mut vals = vec![0.0f64; k * k];
    let mut sum = 0.0;
    for i in 0..k {
        for j in 0..k {
            let (di, dj) = (i as f64 - half, j as f64 - half);
            let v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            vals[i * k + j] = v;
            sum += v;
        }
    }
    for v in vals.iter_mut() {
        *v /= sum;
    }
    Tensor::from_f64(vec![1, 1, k, k], &vals)
}

/// Sum of all elements, f64 accumulation in index order.
pub fn sum_all<S: Scalar>(x: &[S]) -> f64 {
    let mut s = 0.0f64;
    for &v in x {
        s += v.as_f64();
    }
    s
}
