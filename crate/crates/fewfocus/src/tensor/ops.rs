//! Forward operations and their recorded backward closures.
//!
//! Exactly the op set the three networks and the losses need: convolution
//! (plain and dilated), average/max pooling, x2 bilinear upsampling,
//! channel concatenation, the four activations, elementwise arithmetic,
//! scalar reductions and a fused two-class softmax cross-entropy.

use rayon::prelude::*;

use super::conv;
use super::{Shape, Tape, Tensor};
use crate::error::{Error, Result};

/// Clamp bound used by `log_clamped`, `sigmoid` and `tanh_unit` to keep
/// probability-like values strictly inside (0, 1).
pub const CLAMP_EPS: f32 = 1e-7;

/// Tensors at least this large run elementwise kernels on the rayon pool.
const PAR_THRESHOLD: usize = 1 << 16;

fn out_of(tape: &Tape, shape: Shape, data: Vec<f32>, any_input_grad: bool) -> Tensor {
    Tensor::new(shape, data, tape.is_recording() && any_input_grad)
}

fn map_unary(x: &[f32], f: impl Fn(f32) -> f32 + Sync + Send) -> Vec<f32> {
    if x.len() >= PAR_THRESHOLD {
        x.par_iter().map(|&v| f(v)).collect()
    } else {
        x.iter().map(|&v| f(v)).collect()
    }
}

fn zip_binary(a: &[f32], b: &[f32], f: impl Fn(f32, f32) -> f32 + Sync + Send) -> Vec<f32> {
    debug_assert_eq!(a.len(), b.len());
    if a.len() >= PAR_THRESHOLD {
        a.par_iter().zip(b.par_iter()).map(|(&x, &y)| f(x, y)).collect()
    } else {
        a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<Shape> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::shape(format!("{}: shapes {} and {} differ", what, sa, sb)));
    }
    Ok(sa)
}

// ---------------------------------------------------------------------------
// convolution

/// 2-D convolution with zero padding. `weight` is `[C_out, C_in, k, k]`,
/// `bias` holds one value per output channel.
pub fn conv2d(
    tape: &Tape,
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    conv2d_dilated(tape, x, weight, bias, stride, padding, 1)
}

/// Convolution with a dilated kernel; used by the segmenter's ASPP head.
pub fn conv2d_dilated(
    tape: &Tape,
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Result<Tensor> {
    let g = conv::geometry(x.shape(), weight.shape(), stride, padding as isize, dilation)?;
    if bias.numel() != g.c_out {
        return Err(Error::shape(format!(
            "conv bias has {} values but output has {} channels",
            bias.numel(),
            g.c_out
        )));
    }
    let mut y = {
        let xd = x.data();
        let wd = weight.data();
        conv::forward(&xd, &g, &wd)
    };
    {
        let bd = bias.data();
        let out_hw = g.out_hw();
        y.par_chunks_mut(out_hw).enumerate().for_each(|(i, plane)| {
            let b = bd[i % g.c_out];
            if b != 0.0 {
                for v in plane {
                    *v += b;
                }
            }
        });
    }
    let any = x.requires_grad() || weight.requires_grad() || bias.requires_grad();
    let out = out_of(tape, Shape([g.n, g.c_out, g.h_out, g.w_out]), y, any);
    if out.requires_grad() {
        let (x, weight, bias, out2) = (x.clone(), weight.clone(), bias.clone(), out.clone());
        tape.record("conv2d", move || {
            let Some(dy) = out2.grad() else { return };
            if bias.requires_grad() {
                let out_hw = g.out_hw();
                let mut db = vec![0.0f32; g.c_out];
                for img in 0..g.n {
                    for co in 0..g.c_out {
                        let plane = &dy[(img * g.c_out + co) * out_hw..][..out_hw];
                        db[co] += plane.iter().map(|&v| v as f64).sum::<f64>() as f32;
                    }
                }
                bias.accumulate_grad(&db);
            }
            if weight.requires_grad() {
                let dw = {
                    let xd = x.data();
                    conv::backward_weights(&xd, &dy, &g)
                };
                weight.accumulate_grad(&dw);
            }
            if x.requires_grad() {
                let dx = {
                    let wd = weight.data();
                    conv::backward_input(&dy, &g, &wd)
                };
                x.accumulate_grad(&dx);
            }
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// pooling and resampling

fn pool_geom(x: Shape, window: usize, stride: usize) -> Result<(usize, usize)> {
    if window < 1 || stride < 1 {
        return Err(Error::shape("pool window and stride must be >= 1".to_string()));
    }
    if window > x.h() || window > x.w() {
        return Err(Error::shape(format!(
            "pool window {} larger than input {}",
            window,
            x
        )));
    }
    Ok(((x.h() - window) / stride + 1, (x.w() - window) / stride + 1))
}

/// Mean over non-overlapping (or strided) square windows.
pub fn avg_pool2d(tape: &Tape, x: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    let xs = x.shape();
    let (h_out, w_out) = pool_geom(xs, window, stride)?;
    let planes = xs.n() * xs.c();
    let inv = 1.0 / (window * window) as f32;
    let y = {
        let xd = x.data();
        let mut y = vec![0.0f32; planes * h_out * w_out];
        y.par_chunks_mut(h_out * w_out).enumerate().for_each(|(p, out_plane)| {
            let plane = &xd[p * xs.hw()..(p + 1) * xs.hw()];
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut acc = 0.0f32;
                    for wy in 0..window {
                        let row = &plane[(oy * stride + wy) * xs.w() + ox * stride..][..window];
                        acc += row.iter().sum::<f32>();
                    }
                    out_plane[oy * w_out + ox] = acc * inv;
                }
            }
        });
        y
    };
    let out = out_of(tape, Shape([xs.n(), xs.c(), h_out, w_out]), y, x.requires_grad());
    if out.requires_grad() {
        let (x2, out2) = (x.clone(), out.clone());
        tape.record("avg_pool2d", move || {
            let Some(dy) = out2.grad() else { return };
            let mut dx = vec![0.0f32; xs.numel()];
            for p in 0..planes {
                let gplane = &dy[p * h_out * w_out..][..h_out * w_out];
                let dplane = &mut dx[p * xs.hw()..(p + 1) * xs.hw()];
                for oy in 0..h_out {
                    for ox in 0..w_out {
                        let gv = gplane[oy * w_out + ox] * inv;
                        for wy in 0..window {
                            let base = (oy * stride + wy) * xs.w() + ox * stride;
                            for wx in 0..window {
                                dplane[base + wx] += gv;
                            }
                        }
                    }
                }
            }
            x2.accumulate_grad(&dx);
        });
    }
    Ok(out)
}

/// Maximum over windows; backward routes the gradient to the first
/// occurrence (row-major) of each window maximum.
pub fn max_pool2d(tape: &Tape, x: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    let xs = x.shape();
    let (h_out, w_out) = pool_geom(xs, window, stride)?;
    let planes = xs.n() * xs.c();
    let (y, argmax) = {
        let xd = x.data();
        let mut y = vec![0.0f32; planes * h_out * w_out];
        let mut argmax = vec![0u32; planes * h_out * w_out];
        y.iter_mut().zip(argmax.iter_mut()).enumerate().for_each(|(i, (yv, am))| {
            let p = i / (h_out * w_out);
            let o = i % (h_out * w_out);
            let (oy, ox) = (o / w_out, o % w_out);
            let plane = &xd[p * xs.hw()..(p + 1) * xs.hw()];
            let mut best = f32::NEG_INFINITY;
            let mut best_at = 0usize;
            for wy in 0..window {
                for wx in 0..window {
                    let at = (oy * stride + wy) * xs.w() + ox * stride + wx;
                    if plane[at] > best {
                        best = plane[at];
                        best_at = at;
                    }
                }
            }
            *yv = best;
            *am = best_at as u32;
        });
        (y, argmax)
    };
    let out = out_of(tape, Shape([xs.n(), xs.c(), h_out, w_out]), y, x.requires_grad());
    if out.requires_grad() {
        let (x2, out2) = (x.clone(), out.clone());
        tape.record("max_pool2d", move || {
            let Some(dy) = out2.grad() else { return };
            let mut dx = vec![0.0f32; xs.numel()];
            for (i, (&g, &at)) in dy.iter().zip(argmax.iter()).enumerate() {
                let p = i / (h_out * w_out);
                dx[p * xs.hw() + at as usize] += g;
            }
            x2.accumulate_grad(&dx);
        });
    }
    Ok(out)
}

/// Index/weight pairs of the half-pixel-centered source sample for each
/// destination coordinate at scale 2.
fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f32)> {
    (0..out_len)
        .map(|o| {
            let src = (o as f32 + 0.5) / 2.0 - 0.5;
            let i0 = src.floor();
            let frac = src - i0;
            let a = (i0 as isize).clamp(0, in_len as isize - 1) as usize;
            let b = (i0 as isize + 1).clamp(0, in_len as isize - 1) as usize;
            (a, b, frac)
        })
        .collect()
}

/// Bilinear 2x upsampling with half-pixel center alignment.
pub fn upsample_bilinear_x2(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    let (h2, w2) = (xs.h() * 2, xs.w() * 2);
    let planes = xs.n() * xs.c();
    let ty = bilinear_taps(h2, xs.h());
    let tx = bilinear_taps(w2, xs.w());
    let y = {
        let xd = x.data();
        let mut y = vec![0.0f32; planes * h2 * w2];
        y.par_chunks_mut(h2 * w2).enumerate().for_each(|(p, out_plane)| {
            let plane = &xd[p * xs.hw()..(p + 1) * xs.hw()];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let r0 = &plane[y0 * xs.w()..(y0 + 1) * xs.w()];
                let r1 = &plane[y1 * xs.w()..(y1 + 1) * xs.w()];
                let dst = &mut out_plane[oy * w2..(oy + 1) * w2];
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = r0[x0] * (1.0 - fx) + r0[x1] * fx;
                    let bot = r1[x0] * (1.0 - fx) + r1[x1] * fx;
                    dst[ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        });
        y
    };
    let out = out_of(tape, Shape([xs.n(), xs.c(), h2, w2]), y, x.requires_grad());
    if out.requires_grad() {
        let (x2, out2) = (x.clone(), out.clone());
        let (ty2, tx2) = (ty, tx);
        tape.record("upsample_bilinear_x2", move || {
            let Some(dy) = out2.grad() else { return };
            let mut dx = vec![0.0f32; xs.numel()];
            for p in 0..planes {
                let gplane = &dy[p * h2 * w2..][..h2 * w2];
                let dplane = &mut dx[p * xs.hw()..(p + 1) * xs.hw()];
                for (oy, &(y0, y1, fy)) in ty2.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in tx2.iter().enumerate() {
                        let g = gplane[oy * w2 + ox];
                        dplane[y0 * xs.w() + x0] += g * (1.0 - fy) * (1.0 - fx);
                        dplane[y0 * xs.w() + x1] += g * (1.0 - fy) * fx;
                        dplane[y1 * xs.w() + x0] += g * fy * (1.0 - fx);
                        dplane[y1 * xs.w() + x1] += g * fy * fx;
                    }
                }
            }
            x2.accumulate_grad(&dx);
        });
    }
    Ok(out)
}

/// Concatenate along the channel axis; all inputs must share N, H, W.
pub fn concat_channels(tape: &Tape, xs: &[&Tensor]) -> Result<Tensor> {
    if xs.is_empty() {
        return Err(Error::shape("concat_channels needs at least one input".to_string()));
    }
    let first = xs[0].shape();
    let mut c_total = 0;
    for x in xs {
        let s = x.shape();
        if s.n() != first.n() || s.h() != first.h() || s.w() != first.w() {
            return Err(Error::shape(format!(
                "concat_channels: input {} does not match leading {}",
                s, first
            )));
        }
        c_total += s.c();
    }
    let out_shape = Shape([first.n(), c_total, first.h(), first.w()]);
    let hw = first.hw();
    let mut y = vec![0.0f32; out_shape.numel()];
    let mut c_off = 0;
    for x in xs {
        let s = x.shape();
        let xd = x.data();
        for img in 0..s.n() {
            let dst = &mut y[(img * c_total + c_off) * hw..][..s.c() * hw];
            dst.copy_from_slice(&xd[img * s.chw()..(img + 1) * s.chw()]);
        }
        c_off += s.c();
    }
    let any = xs.iter().any(|x| x.requires_grad());
    let out = out_of(tape, out_shape, y, any);
    if out.requires_grad() {
        let inputs: Vec<Tensor> = xs.iter().map(|x| (*x).clone()).collect();
        let out2 = out.clone();
        tape.record("concat_channels", move || {
            let Some(dy) = out2.grad() else { return };
            let mut c_off = 0;
            for x in &inputs {
                let s = x.shape();
                if x.requires_grad() {
                    let mut dx = vec![0.0f32; s.numel()];
                    for img in 0..s.n() {
                        dx[img * s.chw()..(img + 1) * s.chw()].copy_from_slice(
                            &dy[(img * c_total + c_off) * hw..][..s.c() * hw],
                        );
                    }
                    x.accumulate_grad(&dx);
                }
                c_off += s.c();
            }
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// activations

/// PReLU with one learnable slope per channel (`a` has C values).
pub fn prelu(tape: &Tape, x: &Tensor, a: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    if a.numel() != xs.c() {
        return Err(Error::shape(format!(
            "prelu slope has {} values but input {} has {} channels",
            a.numel(),
            xs,
            xs.c()
        )));
    }
    let hw = xs.hw();
    let y = {
        let xd = x.data();
        let ad = a.data();
        let mut y = vec![0.0f32; xs.numel()];
        y.par_chunks_mut(hw).enumerate().for_each(|(p, plane)| {
            let s = ad[p % xs.c()];
            let src = &xd[p * hw..(p + 1) * hw];
            for (o, &v) in plane.iter_mut().zip(src) {
                *o = if v >= 0.0 { v } else { s * v };
            }
        });
        y
    };
    let any = x.requires_grad() || a.requires_grad();
    let out = out_of(tape, xs, y, any);
    if out.requires_grad() {
        let (x2, a2, out2) = (x.clone(), a.clone(), out.clone());
        tape.record("prelu", move || {
            let Some(dy) = out2.grad() else { return };
            if a2.requires_grad() {
                let da: Vec<f32> = {
                    let xd = x2.data();
                    let mut da = vec![0.0f64; xs.c()];
                    for (p, chunk) in xd.chunks(hw).enumerate() {
                        let acc = &mut da[p % xs.c()];
                        let gs = &dy[p * hw..(p + 1) * hw];
                        for (&v, &g) in chunk.iter().zip(gs) {
                            if v < 0.0 {
                                *acc += (g * v) as f64;
                            }
                        }
                    }
                    da.iter().map(|&v| v as f32).collect()
                };
                a2.accumulate_grad(&da);
            }
            if x2.requires_grad() {
                let dx = {
                    let xd = x2.data();
                    let ad = a2.data();
                    let mut dx = vec![0.0f32; xs.numel()];
                    for (p, chunk) in dx.chunks_mut(hw).enumerate() {
                        let s = ad[p % xs.c()];
                        let vs = &xd[p * hw..(p + 1) * hw];
                        let gs = &dy[p * hw..(p + 1) * hw];
                        for ((o, &v), &g) in chunk.iter_mut().zip(vs).zip(gs) {
                            *o = if v >= 0.0 { g } else { s * g };
                        }
                    }
                    dx
                };
                x2.accumulate_grad(&dx);
            }
        });
    }
    Ok(out)
}

/// LeakyReLU with a fixed negative slope.
pub fn leaky_relu(tape: &Tape, x: &Tensor, slope: f32) -> Result<Tensor> {
    let xs = x.shape();
    let y = map_unary(&x.data(), move |v| if v >= 0.0 { v } else { slope * v });
    let out = out_of(tape, xs, y, x.requires_grad());
    if out.requires_grad() {
        let (x2, out2) = (x.clone(), out.clone());
        tape.record("leaky_relu", move || {
            let Some(dy) = out2.grad() else { return };
            let xd = x2.data();
            let dx: Vec<f32> = dy
                .iter()
                .zip(xd.iter())
                .map(|(&g, &v)| if v >= 0.0 { g } else { slope * g })
                .collect();
            drop(xd);
            x2.accumulate_grad(&dx);
        });
    }
    Ok(out)
}

/// Logistic sigmoid, output clamped strictly inside (0, 1).
pub fn sigmoid(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    let y = map_unary(&x.data(), |v| {
        (1.0 / (1.0 + (-v).exp())).clamp(CLAMP_EPS, 1.0 - CLAMP_EPS)
    });
    let out = out_of(tape, xs, y, x.requires_grad());
    if out.requires_grad() {
        let (x2, out2) = (x.clone(), out.clone());
        tape.record("sigmoid", move || {
            let Some(dy) = out2.grad() else { return };
            let yd = out2.data();
            let dx: Vec<f32> = dy.iter().zip(yd.iter()).map(|(&g, &y)| g * y * (1.0 - y)).collect();
            drop(yd);
            x2.accumulate_grad(&dx);
        });
    }
    Ok(out)
}

/// `(tanh(x) + 1) / 2`: a tanh squashed onto (0, 1), clamped strictly
/// inside the open interval.
pub fn tanh_unit(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    let y = map_unary(&x.data(), |v| {
        ((v.tanh() + 1.0) * 0.5).clamp(CLAMP_EPS, 1.0 - CLAMP_EPS)
    });
    let out = out_of(tape, xs, y, x.requires_grad());
    if out.requires_grad() {
        let (x2, out2) = (x.clone(), out.clone());
        tape.record("tanh_unit", move || {
            let Some(dy) = out2.grad() else { return };
            let yd = out2.data();
            // d/dx (tanh(x)+1)/2 = (1 - tanh^2)/2 = 2y(1-y)
            let dx: Vec<f32> =
                dy.iter().zip(yd.iter()).map(|(&g, &y)| g * 2.0 * y * (1.0 - y)).collect();
            drop(yd);
            x2.accumulate_grad(&dx);
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// elementwise arithmetic

pub fn add(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let shape = same_shape(a, b, "add")?;
    let y = zip_binary(&a.data(), &b.data(), |x, y| x + y);
    let out = out_of(tape, shape, y, a.requires_grad() || b.requires_grad());
    if out.requires_grad() {
        let (a2, b2, out2) = (a.clone(), b.clone(), out.clone());
        tape.record("add", move || {
            let Some(dy) = out2.grad() else { return };
            if a2.requires_grad() {
                a2.accumulate_grad(&dy);
            }
            if b2.requires_grad() {
                b2.accumulate_grad(&dy);
            }
        });
    }
    Ok(out)
}

pub fn sub(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let shape = same_shape(a, b, "sub")?;
    let y = zip_binary(&a.data(), &b.data(), |x, y| x - y);
    let out = out_of(tape, shape, y, a.requires_grad() || b.requires_grad());
    if out.requires_grad() {
        let (a2, b2, out2) = (a.clone(), b.clone(), out.clone());
        tape.record("sub", move || {
            let Some(dy) = out2.grad() else { return };
            if a2.requires_grad() {
                a2.accumulate_grad(&dy);
            }
            if b2.requires_grad() {
                let neg: Vec<f32> = dy.iter().map(|&g| -g).collect();
                b2.accumulate_grad(&neg);
            }
        });
    }
    Ok(out)
}

/// Elementwise (Hadamard) product.
pub fn mul(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let shape = same_shape(a, b, "mul")?;
    let y = zip_binary(&a.data(), &b.data(), |x, y| x * y);
    let out = out_of(tape, shape, y, a.requires_grad() || b.requires_grad());
    if out.requires_grad() {
        let (a2, b2, out2) = (a.clone(), b.clone(), out.clone());
        tape.record("mul", move || {
            let Some(dy) = out2.grad() else { return };
            if a2.requires_grad() {
                let bd = b2.data();
                let da: Vec<f32> = dy.iter().zip(bd.iter()).map(|(&g, &v)| g * v).collect();
                drop(bd);
                a2.accumulate_grad(&da);
            }
            if b2.requires_grad() {
                let ad = a2.data();
                let db: Vec<f32> = dy.iter().zip(ad.iter()).map(|(&g, &v)| g * v).collect();
                drop(ad);
                b2.accumulate_grad(&db);
            }
        });
    }
    Ok(out)
}

pub fn scale(tape: &Tape, x: &Tensor, c: f32) -> Result<Tensor> {
    let xs = x.shape();
    let y = map_unary(&x.data(), move |v| c * v);
    let out = out_of(tape, xs, y, x.requires_grad());
    if out.requires_grad() {
        let (x2, out2) = (x.clone(), out.clone());
        tape.record("scale", move || {
            let Some(dy) = out2.grad() else { return };
            let dx: Vec<f32> = dy.iter().map(|&g| c * g).collect();
            x2.accumulate_grad(&dx);
        });
    }
    Ok(out)
}

pub fn add_scalar(tape: &Tape, x: &Tensor, c: f32) -> Result<Tensor> {
    let xs = x.shape();
    let y = map_unary(&x.data(), move |v| v + c);
    let out = out_of(tape, xs, y, x.requires_grad());
    if out.requires_grad() {
        let (x2, out2) = (x.clone(), out.clone());
        tape.record("add_scalar", move || {
            let Some(dy) = out2.grad() else { return };
            x2.accumulate_grad(&dy);
        });
    }
    Ok(out)
}

/// `1 - x`, the complement used by the discriminator's fake-term.
pub fn one_minus(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    let neg = scale(tape, x, -1.0)?;
    add_scalar(tape, &neg, 1.0)
}

pub fn abs(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    let y = map_unary(&x.data(), f32::abs);
    let out = out_of(tape, xs, y, x.requires_grad());
    if out.requires_grad() {
        let (x2, out2) = (x.clone(), out.clone());
        tape.record("abs", move || {
            let Some(dy) = out2.grad() else { return };
            let xd = x2.data();
            let dx: Vec<f32> = dy
                .iter()
                .zip(xd.iter())
                .map(|(&g, &v)| {
                    if v > 0.0 {
                        g
                    } else if v < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                })
                .collect();
            drop(xd);
            x2.accumulate_grad(&dx);
        });
    }
    Ok(out)
}

/// `ln(clamp(x, eps, 1-eps))` with eps = 1e-7; the clamp zone passes no
/// gradient.
pub fn log_clamped(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    let y = map_unary(&x.data(), |v| v.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS).ln());
    let out = out_of(tape, xs, y, x.requires_grad());
    if out.requires_grad() {
        let (x2, out2) = (x.clone(), out.clone());
        tape.record("log_clamped", move || {
            let Some(dy) = out2.grad() else { return };
            let xd = x2.data();
            let dx: Vec<f32> = dy
                .iter()
                .zip(xd.iter())
                .map(|(&g, &v)| {
                    if v > CLAMP_EPS && v < 1.0 - CLAMP_EPS {
                        g / v
                    } else {
                        0.0
                    }
                })
                .collect();
            drop(xd);
            x2.accumulate_grad(&dx);
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// reductions

/// Sum of all elements as a `[1,1,1,1]` tensor.
pub fn sum(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    let total = x.data().iter().map(|&v| v as f64).sum::<f64>() as f32;
    let out = out_of(tape, Shape([1, 1, 1, 1]), vec![total], x.requires_grad());
    if out.requires_grad() {
        let (x2, out2) = (x.clone(), out.clone());
        tape.record("sum", move || {
            let Some(dy) = out2.grad() else { return };
            let dx = vec![dy[0]; x2.numel()];
            x2.accumulate_grad(&dx);
        });
    }
    Ok(out)
}

/// Mean of all elements as a `[1,1,1,1]` tensor.
pub fn mean(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    let n = x.numel();
    let total = (x.data().iter().map(|&v| v as f64).sum::<f64>() / n as f64) as f32;
    let out = out_of(tape, Shape([1, 1, 1, 1]), vec![total], x.requires_grad());
    if out.requires_grad() {
        let (x2, out2) = (x.clone(), out.clone());
        tape.record("mean", move || {
            let Some(dy) = out2.grad() else { return };
            let dx = vec![dy[0] / n as f32; n];
            x2.accumulate_grad(&dx);
        });
    }
    Ok(out)
}

/// Per-pixel two-class softmax cross-entropy against a {0,1} mask,
/// averaged over batch and pixels. `logits` is `[N,2,H,W]`, `target`
/// `[N,1,H,W]`.
pub fn softmax_cross_entropy2(tape: &Tape, logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    let ls = logits.shape();
    let ts = target.shape();
    if ls.c() != 2 {
        return Err(Error::shape(format!("softmax_cross_entropy2 needs 2 channels, got {}", ls)));
    }
    if ts.c() != 1 || ts.n() != ls.n() || ts.h() != ls.h() || ts.w() != ls.w() {
        return Err(Error::shape(format!(
            "softmax_cross_entropy2 target {} does not match logits {}",
            ts, ls
        )));
    }
    let hw = ls.hw();
    let count = ls.n() * hw;
    let loss = {
        let ld = logits.data();
        let td = target.data();
        if td.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::shape(
                "softmax_cross_entropy2 target must be strictly {0,1}".to_string(),
            ));
        }
        let mut acc = 0.0f64;
        for img in 0..ls.n() {
            let l0 = &ld[img * ls.chw()..][..hw];
            let l1 = &ld[img * ls.chw() + hw..][..hw];
            let t = &td[img * hw..][..hw];
            for i in 0..hw {
                let m = l0[i].max(l1[i]);
                let z = ((l0[i] - m).exp() + (l1[i] - m).exp()).ln() + m;
                let lt = if t[i] == 1.0 { l1[i] } else { l0[i] };
                acc += (z - lt) as f64;
            }
        }
        (acc / count as f64) as f32
    };
    let out = out_of(tape, Shape([1, 1, 1, 1]), vec![loss], logits.requires_grad());
    if out.requires_grad() {
        let (logits2, target2, out2) = (logits.clone(), target.clone(), out.clone());
        tape.record("softmax_cross_entropy2", move || {
            let Some(dy) = out2.grad() else { return };
            let g = dy[0] / count as f32;
            let ld = logits2.data();
            let td = target2.data();
            let mut dl = vec![0.0f32; ls.numel()];
            for img in 0..ls.n() {
                let l0 = &ld[img * ls.chw()..][..hw];
                let l1 = &ld[img * ls.chw() + hw..][..hw];
                let t = &td[img * hw..][..hw];
                let (d0, d1) = dl[img * ls.chw()..(img + 1) * ls.chw()].split_at_mut(hw);
                for i in 0..hw {
                    let m = l0[i].max(l1[i]);
                    let e0 = (l0[i] - m).exp();
                    let e1 = (l1[i] - m).exp();
                    let p1 = e1 / (e0 + e1);
                    let t1 = t[i];
                    d0[i] = g * ((1.0 - p1) - (1.0 - t1));
                    d1[i] = g * (p1 - t1);
                }
            }
            drop(ld);
            drop(td);
            logits2.accumulate_grad(&dl);
        });
    }
    Ok(out)
}
