//! Forward and backward kernels for the tape primitives.
//!
//! All kernels run fixed serial loop orders so results are bit-identical
//! across runs. The slice-wise inner loops are written to auto-vectorize.

// index-style loops are the house style in these kernels: most bodies
// address several arrays at related offsets
#![allow(clippy::needless_range_loop)]

use super::{Scalar, Shape, Tensor, TensorError};

// ---------------------------------------------------------------------------
// conv2d: stride 1, square odd kernel, zero padding dilation*(k-1)/2
// ---------------------------------------------------------------------------

pub(crate) fn conv2d_check<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    dilation: usize,
) -> Result<(usize, usize), TensorError> {
    // weight is (c_out, c_in, k, k) stored in the rank-4 shape
    let ws = weight.shape();
    let k = ws.h;
    if ws.w != k || k.is_multiple_of(2) {
        return Err(TensorError::UnsupportedKernel { op: "conv2d", k: ws.w.max(k) });
    }
    if input.shape().c != ws.c {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            detail: format!("input has {} channels, weight expects {}", input.shape().c, ws.c),
        });
    }
    if let Some(b) = bias {
        if b.shape() != Shape::vector(1, ws.n) {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("bias shape {} != (1, {}, 1, 1)", b.shape(), ws.n),
            });
        }
    }
    assert!(dilation >= 1, "dilation must be positive");
    let pad = dilation * (k - 1) / 2;
    Ok((k, pad))
}

pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    dilation: usize,
) -> Result<Tensor<T>, TensorError> {
    let (k, pad) = conv2d_check(input, weight, bias, dilation)?;
    let Shape { n, c: c_in, h, w } = input.shape();
    let c_out = weight.shape().n;
    let mut out = Tensor::zeros(Shape::new(n, c_out, h, w));

    let xd = input.data();
    let wd = weight.data();
    let od = out.data_mut();
    for b in 0..n {
        for co in 0..c_out {
            let o_base = (b * c_out + co) * h * w;
            if let Some(bt) = bias {
                let bv = bt.data()[co];
                od[o_base..o_base + h * w].iter_mut().for_each(|v| *v = bv);
            }
            for ci in 0..c_in {
                let i_base = (b * c_in + ci) * h * w;
                for ky in 0..k {
                    let dy = (ky * dilation) as isize - pad as isize;
                    let oy_lo = (-dy).max(0) as usize;
                    let oy_hi = ((h as isize - dy).min(h as isize)).max(0) as usize;
                    for kx in 0..k {
                        let wv = wd[((co * c_in + ci) * k + ky) * k + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        let dx = (kx * dilation) as isize - pad as isize;
                        let ox_lo = (-dx).max(0) as usize;
                        let ox_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = (oy as isize + dy) as usize;
                            let orow = o_base + oy * w;
                            let irow = (i_base + iy * w) as isize + dx;
                            let out_s = &mut od[orow + ox_lo..orow + ox_hi];
                            let in_s = &xd[(irow + ox_lo as isize) as usize
                                ..(irow + ox_hi as isize) as usize];
                            for (o, i) in out_s.iter_mut().zip(in_s.iter()) {
                                *o += wv * *i;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of conv2d w.r.t. (input, weight, bias).
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    dilation: usize,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Option<Tensor<T>>) {
    let Shape { n, c: c_in, h, w } = input.shape();
    let c_out = weight.shape().n;
    let k = weight.shape().h;
    let pad = dilation * (k - 1) / 2;

    let xd = input.data();
    let wd = weight.data();
    let gd = grad_out.data();

    // d/d input: gather each input row from the output-grad rows it fed.
    let mut gin = Tensor::zeros(input.shape());
    {
        let gi = gin.data_mut();
        for b in 0..n {
            for ci in 0..c_in {
                let i_base = (b * c_in + ci) * h * w;
                for co in 0..c_out {
                    let o_base = (b * c_out + co) * h * w;
                    for ky in 0..k {
                        let dy = (ky * dilation) as isize - pad as isize;
                        let iy_lo = dy.max(0) as usize;
                        let iy_hi = ((h as isize + dy).min(h as isize)).max(0) as usize;
                        for kx in 0..k {
                            let wv = wd[((co * c_in + ci) * k + ky) * k + kx];
                            if wv == T::zero() {
                                continue;
                            }
                            let dx = (kx * dilation) as isize - pad as isize;
                            let ix_lo = dx.max(0) as usize;
                            let ix_hi = ((w as isize + dx).min(w as isize)).max(0) as usize;
                            if ix_lo >= ix_hi {
                                continue;
                            }
                            for iy in iy_lo..iy_hi {
                                let oy = (iy as isize - dy) as usize;
                                let irow = i_base + iy * w;
                                let orow = (o_base + oy * w) as isize - dx;
                                let gin_s = &mut gi[irow + ix_lo..irow + ix_hi];
                                let gout_s = &gd[(orow + ix_lo as isize) as usize
                                    ..(orow + ix_hi as isize) as usize];
                                for (g, o) in gin_s.iter_mut().zip(gout_s.iter()) {
                                    *g += wv * *o;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    // d/d weight: each tap is a dot product of the output grad with the
    // shifted input.
    let mut gw = Tensor::zeros(weight.shape());
    {
        let gwd = gw.data_mut();
        for co in 0..c_out {
            for ci in 0..c_in {
                for ky in 0..k {
                    let dy = (ky * dilation) as isize - pad as isize;
                    let oy_lo = (-dy).max(0) as usize;
                    let oy_hi = ((h as isize - dy).min(h as isize)).max(0) as usize;
                    for kx in 0..k {
                        let dx = (kx * dilation) as isize - pad as isize;
                        let ox_lo = (-dx).max(0) as usize;
                        let ox_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                        let mut acc = T::zero();
                        if ox_lo < ox_hi {
                            for b in 0..n {
                                let o_base = (b * c_out + co) * h * w;
                                let i_base = (b * c_in + ci) * h * w;
                                for oy in oy_lo..oy_hi {
                                    let iy = (oy as isize + dy) as usize;
                                    let orow = o_base + oy * w;
                                    let irow = (i_base + iy * w) as isize + dx;
                                    let go_s = &gd[orow + ox_lo..orow + ox_hi];
                                    let in_s = &xd[(irow + ox_lo as isize) as usize
                                        ..(irow + ox_hi as isize) as usize];
                                    for (o, i) in go_s.iter().zip(in_s.iter()) {
                                        acc += *o * *i;
                                    }
                                }
                            }
                        }
                        gwd[((co * c_in + ci) * k + ky) * k + kx] = acc;
                    }
                }
            }
        }
    }

    let gb = if has_bias {
        let mut gb = Tensor::zeros(Shape::vector(1, c_out));
        let gbd = gb.data_mut();
        for b in 0..n {
            for co in 0..c_out {
                let o_base = (b * c_out + co) * h * w;
                let mut acc = T::zero();
                for g in &gd[o_base..o_base + h * w] {
                    acc += *g;
                }
                gbd[co] += acc;
            }
        }
        Some(gb)
    } else {
        None
    };

    (gin, gw, gb)
}

// ---------------------------------------------------------------------------
// 2x2 max pooling, stride 2
// ---------------------------------------------------------------------------

pub fn maxpool2<T: Scalar>(
    input: &Tensor<T>,
    ceil_mode: bool,
) -> Result<(Tensor<T>, Vec<usize>), TensorError> {
    let Shape { n, c, h, w } = input.shape();
    if h == 0 || w == 0 {
        return Err(TensorError::EmptyInput { op: "maxpool2", h, w });
    }
    let out_h = if ceil_mode { h.div_ceil(2) } else { h / 2 };
    let out_w = if ceil_mode { w.div_ceil(2) } else { w / 2 };
    if out_h == 0 || out_w == 0 {
        return Err(TensorError::EmptyInput { op: "maxpool2", h, w });
    }

    let mut out = Tensor::zeros(Shape::new(n, c, out_h, out_w));
    let mut argmax = vec![0usize; out.numel()];
    let xd = input.data();
    let od = out.data_mut();
    for bc in 0..n * c {
        let i_base = bc * h * w;
        let o_base = bc * out_h * out_w;
        for oy in 0..out_h {
            for ox in 0..out_w {
                // first occurrence in row-major scan wins ties
                let mut best = T::neg_infinity();
                let mut best_idx = 0usize;
                for wy in 0..2 {
                    let iy = oy * 2 + wy;
                    if iy >= h {
                        continue;
                    }
                    for wx in 0..2 {
                        let ix = ox * 2 + wx;
                        if ix >= w {
                            continue;
                        }
                        let idx = i_base + iy * w + ix;
                        if xd[idx] > best {
                            best = xd[idx];
                            best_idx = idx;
                        }
                    }
                }
                od[o_base + oy * out_w + ox] = best;
                argmax[o_base + oy * out_w + ox] = best_idx;
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool2_backward<T: Scalar>(
    in_shape: Shape,
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let mut gin = Tensor::zeros(in_shape);
    let gi = gin.data_mut();
    for (g, &src) in grad_out.data().iter().zip(argmax.iter()) {
        gi[src] += *g;
    }
    gin
}

// ---------------------------------------------------------------------------
// Bilinear resize, align-corners-false convention
// ---------------------------------------------------------------------------

/// Per-axis interpolation table: (lo index, hi index, hi weight).
fn bilinear_axis(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub fn upsample_bilinear<T: Scalar>(
    input: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>, TensorError> {
    let Shape { n, c, h, w } = input.shape();
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(TensorError::EmptyInput { op: "upsample_bilinear", h, w });
    }
    let ys = bilinear_axis(h, out_h);
    let xs = bilinear_axis(w, out_w);
    let mut out = Tensor::zeros(Shape::new(n, c, out_h, out_w));
    let xd = input.data();
    let od = out.data_mut();
    for bc in 0..n * c {
        let i_base = bc * h * w;
        let o_base = bc * out_h * out_w;
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let fy = T::from_f64(fy);
            let gy = T::one() - fy;
            let r0 = i_base + y0 * w;
            let r1 = i_base + y1 * w;
            let orow = o_base + oy * out_w;
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let fx = T::from_f64(fx);
                let gx = T::one() - fx;
                let top = gx * xd[r0 + x0] + fx * xd[r0 + x1];
                let bot = gx * xd[r1 + x0] + fx * xd[r1 + x1];
                od[orow + ox] = gy * top + fy * bot;
            }
        }
    }
    Ok(out)
}

pub fn upsample_bilinear_backward<T: Scalar>(
    in_shape: Shape,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let Shape { n, c, h, w } = in_shape;
    let os = grad_out.shape();
    let ys = bilinear_axis(h, os.h);
    let xs = bilinear_axis(w, os.w);
    let mut gin = Tensor::zeros(in_shape);
    let gi = gin.data_mut();
    let gd = grad_out.data();
    for bc in 0..n * c {
        let i_base = bc * h * w;
        let o_base = bc * os.h * os.w;
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let fy = T::from_f64(fy);
            let gy = T::one() - fy;
            let r0 = i_base + y0 * w;
            let r1 = i_base + y1 * w;
            let orow = o_base + oy * os.w;
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let fx = T::from_f64(fx);
                let gx = T::one() - fx;
                let g = gd[orow + ox];
                gi[r0 + x0] += gy * gx * g;
                gi[r0 + x1] += gy * fx * g;
                gi[r1 + x0] += fy * gx * g;
                gi[r1 + x1] += fy * fx * g;
            }
        }
    }
    gin
}

// ---------------------------------------------------------------------------
// Batch normalization over (n, h, w) per channel
// ---------------------------------------------------------------------------

/// Per-channel statistics saved by the forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct BnSaved<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
    pub train: bool,
}

/// Batch statistics reported to the caller in train mode so it can update
/// running buffers (biased variance, matching the normalization).
#[derive(Clone, Debug)]
pub struct BnBatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub fn batchnorm_check<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    train: bool,
) -> Result<(), TensorError> {
    let c = input.shape().c;
    for (name, t) in [("gamma", gamma), ("beta", beta)] {
        if t.shape() != Shape::vector(1, c) {
            return Err(TensorError::ShapeMismatch {
                op: "batchnorm2d",
                detail: format!("{} shape {} != (1, {}, 1, 1)", name, t.shape(), c),
            });
        }
    }
    let s = input.shape();
    if train && s.n * s.h * s.w == 1 {
        return Err(TensorError::DegenerateBatch);
    }
    Ok(())
}

/// Normalize with the given per-channel mean/var and apply the affine terms.
/// `reduce_count` is `n*h*w` for train mode. Returns output plus saved stats.
pub fn batchnorm_apply<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[T],
    var: &[T],
    eps: T,
    train: bool,
) -> (Tensor<T>, BnSaved<T>) {
    let Shape { n, c, h, w } = input.shape();
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut out = Tensor::zeros(input.shape());
    let xd = input.data();
    let od = out.data_mut();
    let gd = gamma.data();
    let bd = beta.data();
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * h * w;
            let scale = gd[ch] * inv_std[ch];
            let shift = bd[ch] - mean[ch] * scale;
            for i in base..base + h * w {
                od[i] = xd[i] * scale + shift;
            }
        }
    }
    (
        out,
        BnSaved { mean: mean.to_vec(), inv_std, train },
    )
}

/// Per-channel batch mean and biased variance over (n, h, w).
pub fn batch_stats<T: Scalar>(input: &Tensor<T>) -> BnBatchStats<T> {
    let Shape { n, c, h, w } = input.shape();
    let m = T::from_f64((n * h * w) as f64);
    let xd = input.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut sum = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * h * w;
            for &v in &xd[base..base + h * w] {
                sum += v;
            }
        }
        mean[ch] = sum / m;
    }
    for ch in 0..c {
        let mu = mean[ch];
        let mut acc = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * h * w;
            for &v in &xd[base..base + h * w] {
                let d = v - mu;
                acc += d * d;
            }
        }
        var[ch] = acc / m;
    }
    BnBatchStats { mean, var }
}

/// Gradients of batchnorm w.r.t. (input, gamma, beta).
pub fn batchnorm_backward<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    saved: &BnSaved<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let Shape { n, c, h, w } = input.shape();
    let m = T::from_f64((n * h * w) as f64);
    let xd = input.data();
    let gd = grad_out.data();
    let ga = gamma.data();

    let mut gin = Tensor::zeros(input.shape());
    let mut ggamma = Tensor::zeros(Shape::vector(1, c));
    let mut gbeta = Tensor::zeros(Shape::vector(1, c));

    for ch in 0..c {
        let mu = saved.mean[ch];
        let istd = saved.inv_std[ch];
        let g = ga[ch];
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * h * w;
            for i in base..base + h * w {
                let xhat = (xd[i] - mu) * istd;
                sum_dy += gd[i];
                sum_dy_xhat += gd[i] * xhat;
            }
        }
        ggamma.data_mut()[ch] = sum_dy_xhat;
        gbeta.data_mut()[ch] = sum_dy;

        let gi = gin.data_mut();
        if saved.train {
            // full chain rule through the batch statistics
            for b in 0..n {
                let base = (b * c + ch) * h * w;
                for i in base..base + h * w {
                    let xhat = (xd[i] - mu) * istd;
                    gi[i] = g * istd * (gd[i] - sum_dy / m - xhat * sum_dy_xhat / m);
                }
            }
        } else {
            // running statistics are constants
            for b in 0..n {
                let base = (b * c + ch) * h * w;
                for i in base..base + h * w {
                    gi[i] = g * istd * gd[i];
                }
            }
        }
    }
    (gin, ggamma, gbeta)
}

// ---------------------------------------------------------------------------
// Differentiable loss kernels (probabilities already in (0,1))
// ---------------------------------------------------------------------------

/// Clamp bound guarding `log` against saturated sigmoids.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Reduction {
    Sum,
    Mean,
}

/// Pixelwise binary cross-entropy against a {0,1} label map.
pub fn bce_value<T: Scalar>(probs: &Tensor<T>, labels: &Tensor<T>, reduction: Reduction) -> T {
    let lo = T::from_f64(PROB_CLAMP);
    let hi = T::one() - lo;
    let mut acc = T::zero();
    for (&p, &g) in probs.data().iter().zip(labels.data().iter()) {
        let p = p.max(lo).min(hi);
        acc -= g * p.ln() + (T::one() - g) * (T::one() - p).ln();
    }
    match reduction {
        Reduction::Sum => acc,
        Reduction::Mean => acc / T::from_f64(probs.numel() as f64),
    }
}

pub fn bce_grad<T: Scalar>(
    probs: &Tensor<T>,
    labels: &Tensor<T>,
    reduction: Reduction,
    upstream: T,
) -> Tensor<T> {
    let lo = T::from_f64(PROB_CLAMP);
    let hi = T::one() - lo;
    let scale = match reduction {
        Reduction::Sum => upstream,
        Reduction::Mean => upstream / T::from_f64(probs.numel() as f64),
    };
    let mut grad = Tensor::zeros(probs.shape());
    for ((gp, &p), &g) in grad
        .data_mut()
        .iter_mut()
        .zip(probs.data().iter())
        .zip(labels.data().iter())
    {
        // zero slope inside the clamped region
        if p < lo || p > hi {
            continue;
        }
        *gp = scale * (-(g / p) + (T::one() - g) / (T::one() - p));
    }
    grad
}

/// Soft-IoU loss per image, averaged over the batch:
/// `(1 - (inter+1)/(union_sum - inter + 1))`, optionally scaled by `1/(h*w)`.
pub fn iou_value<T: Scalar>(probs: &Tensor<T>, labels: &Tensor<T>, hw_scaling: bool) -> T {
    let Shape { n, c, h, w } = probs.shape();
    let plane = c * h * w;
    let area_scale = if hw_scaling {
        T::one() / T::from_f64((h * w) as f64)
    } else {
        T::one()
    };
    let mut total = T::zero();
    for b in 0..n {
        let ps = &probs.data()[b * plane..(b + 1) * plane];
        let gs = &labels.data()[b * plane..(b + 1) * plane];
        let mut inter = T::zero();
        let mut union_sum = T::zero();
        for (&p, &g) in ps.iter().zip(gs.iter()) {
            inter += p * g;
            union_sum += p + g;
        }
        let denom = union_sum - inter + T::one();
        total += (T::one() - (inter + T::one()) / denom) * area_scale;
    }
    total / T::from_f64(n as f64)
}

pub fn iou_grad<T: Scalar>(
    probs: &Tensor<T>,
    labels: &Tensor<T>,
    hw_scaling: bool,
    upstream: T,
) -> Tensor<T> {
    let Shape { n, c, h, w } = probs.shape();
    let plane = c * h * w;
    let area_scale = if hw_scaling {
        T::one() / T::from_f64((h * w) as f64)
    } else {
        T::one()
    };
    let batch_scale = upstream * area_scale / T::from_f64(n as f64);
    let mut grad = Tensor::zeros(probs.shape());
    for b in 0..n {
        let ps = &probs.data()[b * plane..(b + 1) * plane];
        let gs = &labels.data()[b * plane..(b + 1) * plane];
        let mut inter = T::zero();
        let mut union_sum = T::zero();
        for (&p, &g) in ps.iter().zip(gs.iter()) {
            inter += p * g;
            union_sum += p + g;
        }
        let denom = union_sum - inter + T::one();
        let d2 = denom * denom;
        // d/d inter of -(inter+1)/denom with denom = union - inter + 1
        let d_inter = -(denom + inter + T::one()) / d2;
        let d_union = (inter + T::one()) / d2;
        let gsl = &mut grad.data_mut()[b * plane..(b + 1) * plane];
        for ((gp, &p), &g) in gsl.iter_mut().zip(ps.iter()).zip(gs.iter()) {
            let _ = p;
            *gp = batch_scale * (d_inter * g + d_union);
        }
    }
    grad
}
