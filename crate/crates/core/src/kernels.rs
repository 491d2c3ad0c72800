//! Forward and vector-Jacobian kernels on raw tensors.
//!
//! All loops run in a fixed order so results are bitwise reproducible.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Output extent of a sliding window, or an error when it is not exact.
pub fn window_extent(
    op: &'static str,
    extent: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<usize> {
    let padded = extent + 2 * pad;
    if stride == 0 || padded < kernel || (padded - kernel) % stride != 0 {
        return Err(Error::InexactExtent {
            op,
            extent,
            pad,
            kernel,
            stride,
        });
    }
    Ok((padded - kernel) / stride + 1)
}

/// Range of output positions `o` whose input coordinate `o*stride + k - pad`
/// lands inside `[0, extent)`.
#[inline]
fn valid_range(out: usize, extent: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // o*stride + k - pad <= extent - 1
    let hi = if extent + pad < k + 1 {
        0
    } else {
        ((extent + pad - k - 1) / stride + 1).min(out)
    };
    (lo.min(hi), hi)
}

fn expect_ndim<T: Real>(op: &'static str, t: &Tensor<T>, ndim: usize) -> Result<()> {
    if t.ndim() != ndim {
        return Err(Error::ShapeMismatch {
            op,
            expected: vec![0; ndim],
            actual: t.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn conv2d_shape(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<[usize; 4]> {
    if x.len() != 4 || w.len() != 4 || x[1] != w[1] {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            expected: w.to_vec(),
            actual: x.to_vec(),
        });
    }
    let oh = window_extent("conv2d", x[2], w[2], stride, pad)?;
    let ow = window_extent("conv2d", x[3], w[3], stride, pad)?;
    Ok([x[0], w[0], oh, ow])
}

pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let [b, co, oh, ow] = conv2d_shape(x.shape(), w.shape(), stride, pad)?;
    if bias.shape() != [co] {
        return Err(Error::ShapeMismatch {
            op: "conv2d bias",
            expected: vec![co],
            actual: bias.shape().to_vec(),
        });
    }
    let (ci, h, wd) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw) = (w.shape()[2], w.shape()[3]);
    let (xd, wdat, bd) = (x.data(), w.data(), bias.data());
    let mut out = vec![T::zero(); b * co * oh * ow];
    for bi in 0..b {
        for o in 0..co {
            let plane = &mut out[(bi * co + o) * oh * ow..(bi * co + o + 1) * oh * ow];
            plane.iter_mut().for_each(|v| *v = bd[o]);
            for c in 0..ci {
                let inp = &xd[(bi * ci + c) * h * wd..(bi * ci + c + 1) * h * wd];
                for ky in 0..kh {
                    let (y0, y1) = valid_range(oh, h, ky, stride, pad);
                    for kx in 0..kw {
                        let (x0, x1) = valid_range(ow, wd, kx, stride, pad);
                        let wv = wdat[((o * ci + c) * kh + ky) * kw + kx];
                        for oy in y0..y1 {
                            let iy = oy * stride + ky - pad;
                            let row = &inp[iy * wd..(iy + 1) * wd];
                            let orow = &mut plane[oy * ow..(oy + 1) * ow];
                            for ox in x0..x1 {
                                orow[ox] = orow[ox] + wv * row[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, co, oh, ow], out)
}

/// Gradients of conv2d with respect to input (when requested), weight and bias.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_input_grad: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (b, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (gout.shape()[2], gout.shape()[3]);
    let (xd, wdat, gd) = (x.data(), w.data(), gout.data());
    let mut gx = if need_input_grad {
        Some(vec![T::zero(); xd.len()])
    } else {
        None
    };
    let mut gw = vec![T::zero(); wdat.len()];
    let mut gb = vec![T::zero(); co];
    for bi in 0..b {
        for o in 0..co {
            let gplane = &gd[(bi * co + o) * oh * ow..(bi * co + o + 1) * oh * ow];
            gb[o] = gb[o] + gplane.iter().copied().sum::<T>();
            for c in 0..ci {
                let inp = &xd[(bi * ci + c) * h * wd..(bi * ci + c + 1) * h * wd];
                for ky in 0..kh {
                    let (y0, y1) = valid_range(oh, h, ky, stride, pad);
                    for kx in 0..kw {
                        let (x0, x1) = valid_range(ow, wd, kx, stride, pad);
                        let widx = ((o * ci + c) * kh + ky) * kw + kx;
                        let wv = wdat[widx];
                        let mut acc = T::zero();
                        for oy in y0..y1 {
                            let iy = oy * stride + ky - pad;
                            let row = &inp[iy * wd..(iy + 1) * wd];
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            for ox in x0..x1 {
                                acc = acc + grow[ox] * row[ox * stride + kx - pad];
                            }
                        }
                        gw[widx] = gw[widx] + acc;
                        if let Some(gx) = gx.as_mut() {
                            let gin = &mut gx[(bi * ci + c) * h * wd..(bi * ci + c + 1) * h * wd];
                            for oy in y0..y1 {
                                let iy = oy * stride + ky - pad;
                                let grow = &gplane[oy * ow..(oy + 1) * ow];
                                let girow = &mut gin[iy * wd..(iy + 1) * wd];
                                for ox in x0..x1 {
                                    let ix = ox * stride + kx - pad;
                                    girow[ix] = girow[ix] + grow[ox] * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (
        gx.map(|g| Tensor::new(x.shape().to_vec(), g).expect("shape")),
        Tensor::new(w.shape().to_vec(), gw).expect("shape"),
        Tensor::new(vec![co], gb).expect("shape"),
    )
}

/// `y = x wᵀ + b` with `x: [b, in]`, `w: [out, in]`.
pub fn dense<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    expect_ndim("dense", x, 2)?;
    expect_ndim("dense", w, 2)?;
    let (b, inp) = (x.shape()[0], x.shape()[1]);
    let out = w.shape()[0];
    if w.shape()[1] != inp || bias.shape() != [out] {
        return Err(Error::ShapeMismatch {
            op: "dense",
            expected: w.shape().to_vec(),
            actual: x.shape().to_vec(),
        });
    }
    let (xd, wd, bd) = (x.data(), w.data(), bias.data());
    let mut y = vec![T::zero(); b * out];
    for bi in 0..b {
        let xr = &xd[bi * inp..(bi + 1) * inp];
        for o in 0..out {
            let wr = &wd[o * inp..(o + 1) * inp];
            let mut acc = bd[o];
            for (a, c) in xr.iter().zip(wr) {
                acc = acc + *a * *c;
            }
            y[bi * out + o] = acc;
        }
    }
    Tensor::new(vec![b, out], y)
}

pub fn dense_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    need_input_grad: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (b, inp) = (x.shape()[0], x.shape()[1]);
    let out = w.shape()[0];
    let (xd, wd, gd) = (x.data(), w.data(), gout.data());
    let mut gw = vec![T::zero(); out * inp];
    let mut gb = vec![T::zero(); out];
    let mut gx = need_input_grad.then(|| vec![T::zero(); b * inp]);
    for bi in 0..b {
        let xr = &xd[bi * inp..(bi + 1) * inp];
        for o in 0..out {
            let g = gd[bi * out + o];
            gb[o] = gb[o] + g;
            let gwr = &mut gw[o * inp..(o + 1) * inp];
            for (a, &xv) in gwr.iter_mut().zip(xr) {
                *a = *a + g * xv;
            }
            if let Some(gx) = gx.as_mut() {
                let wr = &wd[o * inp..(o + 1) * inp];
                for (a, &wv) in gx[bi * inp..(bi + 1) * inp].iter_mut().zip(wr) {
                    *a = *a + g * wv;
                }
            }
        }
    }
    (
        gx.map(|g| Tensor::new(x.shape().to_vec(), g).expect("shape")),
        Tensor::new(w.shape().to_vec(), gw).expect("shape"),
        Tensor::new(vec![out], gb).expect("shape"),
    )
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape")
}

pub fn relu_backward<T: Real>(x: &Tensor<T>, gout: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(gout.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Pooling forward. For max pooling also returns, per output element, the flat
/// index of the selected input element (`usize::MAX` for an all-padding window).
pub fn pool<T: Real>(x: &Tensor<T>, kind: PoolKind, win: Window) -> Result<(Tensor<T>, Vec<usize>)> {
    expect_ndim("pool", x, 4)?;
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let oh = window_extent("pool", h, win.kh, win.stride, win.pad)?;
    let ow = window_extent("pool", w, win.kw, win.stride, win.pad)?;
    let xd = x.data();
    let mut out = vec![T::zero(); b * c * oh * ow];
    let mut argmax = if kind == PoolKind::Max {
        vec![usize::MAX; out.len()]
    } else {
        Vec::new()
    };
    let inv = T::one() / T::from_f64((win.kh * win.kw) as f64);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let oi = (plane * oh + oy) * ow + ox;
                let mut best = T::neg_infinity();
                let mut arg = usize::MAX;
                let mut acc = T::zero();
                for ky in 0..win.kh {
                    let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..win.kw {
                        let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        let v = xd[idx];
                        acc = acc + v;
                        if v > best || arg == usize::MAX {
                            best = v;
                            arg = idx;
                        }
                    }
                }
                match kind {
                    PoolKind::Max => {
                        out[oi] = if arg == usize::MAX { T::zero() } else { best };
                        argmax[oi] = arg;
                    }
                    PoolKind::Avg => out[oi] = acc * inv,
                }
            }
        }
    }
    Ok((Tensor::new(vec![b, c, oh, ow], out)?, argmax))
}

pub fn pool_backward<T: Real>(
    x_shape: &[usize],
    kind: PoolKind,
    win: Window,
    argmax: &[usize],
    gout: &Tensor<T>,
) -> Tensor<T> {
    let (h, w) = (x_shape[2], x_shape[3]);
    let (oh, ow) = (gout.shape()[2], gout.shape()[3]);
    let planes = x_shape[0] * x_shape[1];
    let gd = gout.data();
    let mut gx = vec![T::zero(); planes * h * w];
    match kind {
        PoolKind::Max => {
            for (oi, &src) in argmax.iter().enumerate() {
                if src != usize::MAX {
                    gx[src] = gx[src] + gd[oi];
                }
            }
        }
        PoolKind::Avg => {
            let inv = T::one() / T::from_f64((win.kh * win.kw) as f64);
            for plane in 0..planes {
                let base = plane * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = gd[(plane * oh + oy) * ow + ox] * inv;
                        for ky in 0..win.kh {
                            let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..win.kw {
                                let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let idx = base + iy as usize * w + ix as usize;
                                gx[idx] = gx[idx] + g;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(x_shape.to_vec(), gx).expect("shape")
}

/// Mean softmax cross-entropy and the softmax probabilities.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Vec<T>)> {
    expect_ndim("cross_entropy", logits, 2)?;
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy labels",
            expected: vec![b],
            actual: vec![labels.len()],
        });
    }
    if k < 2 {
        return Err(Error::InvalidArgument("cross_entropy needs at least 2 classes".into()));
    }
    let ld = logits.data();
    let mut probs = vec![T::zero(); b * k];
    let mut total = T::zero();
    for (bi, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let row = &ld[bi * k..(bi + 1) * k];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for (p, &v) in probs[bi * k..(bi + 1) * k].iter_mut().zip(row) {
            *p = (v - max).exp();
            denom = denom + *p;
        }
        for p in &mut probs[bi * k..(bi + 1) * k] {
            *p = *p / denom;
        }
        total = total + (denom.ln() + max - row[label]);
    }
    Ok((total / T::from_f64(b as f64), probs))
}

/// `(1/F) Σ (y - ŷ)²` over every element, with `F` the channel extent (axis 1).
pub fn mse_stage<T: Real>(y: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if y.shape() != target.shape() || y.ndim() < 2 {
        return Err(Error::ShapeMismatch {
            op: "mse_stage_loss",
            expected: target.shape().to_vec(),
            actual: y.shape().to_vec(),
        });
    }
    let f = T::from_f64(y.shape()[1] as f64);
    let sum = y
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<T>();
    Ok(sum / f)
}
