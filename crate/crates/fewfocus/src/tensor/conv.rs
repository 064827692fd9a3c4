//! im2col + GEMM convolution kernels shared by the forward pass and both
//! backward passes (input grad via a transposed convolution of the
//! zero-stuffed output grad, weight grad via GEMM against the patch
//! matrix). All loops have a fixed reduction order, so results are
//! bit-identical regardless of worker count.

use rayon::prelude::*;

use super::Shape;
use crate::error::{Error, Result};

/// Geometry of one convolution, padding signed so the transposed pass can
/// reuse the same kernels with a negative effective padding.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Geom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: isize,
    pub dil: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl Geom {
    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }
    pub fn out_hw(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Output extent of one axis, or None when non-positive.
fn out_dim(input: usize, k: usize, stride: usize, pad: isize, dil: usize) -> Option<usize> {
    let ext = ((k - 1) * dil + 1) as isize;
    let span = input as isize + 2 * pad - ext;
    if span < 0 {
        return None;
    }
    Some((span / stride as isize) as usize + 1)
}

pub(crate) fn geometry(
    x: Shape,
    w: Shape,
    stride: usize,
    pad: isize,
    dil: usize,
) -> Result<Geom> {
    let [c_out, c_in, kh, kw] = w.0;
    if kh != kw {
        return Err(Error::shape(format!("conv kernel must be square, got {}", w)));
    }
    if x.c() != c_in {
        return Err(Error::shape(format!(
            "conv input has {} channels but weight expects {}",
            x.c(),
            c_in
        )));
    }
    if stride < 1 || dil < 1 {
        return Err(Error::shape("conv stride and dilation must be >= 1".to_string()));
    }
    let h_out = out_dim(x.h(), kh, stride, pad, dil);
    let w_out = out_dim(x.w(), kw, stride, pad, dil);
    match (h_out, w_out) {
        (Some(h_out), Some(w_out)) => Ok(Geom {
            n: x.n(),
            c_in,
            h: x.h(),
            w: x.w(),
            c_out,
            k: kh,
            stride,
            pad,
            dil,
            h_out,
            w_out,
        }),
        _ => Err(Error::shape(format!(
            "conv produces non-positive output dims for input {} kernel {} stride {} pad {} dilation {}",
            x, kh, stride, pad, dil
        ))),
    }
}

/// Column chunk target: bounds the im2col scratch buffer while keeping
/// GEMM panels large enough to run near peak.
const TARGET_COLS: usize = 2048;
/// Column-block width for the parallel GEMM split.
const GEMM_NSPLIT: usize = 512;

struct SendPtr(*mut f32);
unsafe impl Send for SendPtr {}
unsafe impl Sync for SendPtr {}

/// C[m, n] = A[m, k] * B[k, n] (+ beta * C), B row-major with row stride
/// `n_full`, C row stride `rsc`. Splits the column range across the rayon
/// pool; every output element is still one fixed-order dot product.
fn par_sgemm(
    m: usize,
    kk: usize,
    n: usize,
    a: &[f32],
    b: &[f32],
    n_full: usize,
    beta: f32,
    c: *mut f32,
    rsc: usize,
) {
    debug_assert!(a.len() >= m * kk);
    let c = SendPtr(c);
    let blocks: Vec<usize> = (0..n).step_by(GEMM_NSPLIT).collect();
    blocks.par_iter().for_each(|&j0| {
        let nb = GEMM_NSPLIT.min(n - j0);
        let c = &c;
        unsafe {
            matrixmultiply::sgemm(
                m,
                kk,
                nb,
                1.0,
                a.as_ptr(),
                kk as isize,
                1,
                b.as_ptr().add(j0),
                n_full as isize,
                1,
                beta,
                c.0.add(j0),
                rsc as isize,
                1,
            );
        }
    });
}

/// Fill the patch matrix for output rows `[oy0, oy0 + rows)` of one image:
/// col[(ci*k*k + ky*k + kx) * ncols + local_position] = x or 0 when padded.
fn fill_col(x_img: &[f32], g: &Geom, oy0: usize, rows: usize, col: &mut [f32]) {
    let ncols = rows * g.w_out;
    let kk_per_c = g.k * g.k;
    col.par_chunks_mut(kk_per_c * ncols)
        .enumerate()
        .for_each(|(ci, block)| {
            let plane = &x_img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let row = &mut block[(ky * g.k + kx) * ncols..(ky * g.k + kx + 1) * ncols];
                    for r in 0..rows {
                        let oy = oy0 + r;
                        let iy = (oy * g.stride) as isize - g.pad + (ky * g.dil) as isize;
                        let dst = &mut row[r * g.w_out..(r + 1) * g.w_out];
                        if iy < 0 || iy >= g.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let off = (kx * g.dil) as isize - g.pad;
                        if g.stride == 1 {
                            // ix = ox + off; valid ox range is a single run
                            let lo = (-off).clamp(0, g.w_out as isize) as usize;
                            let hi = (g.w as isize - off).clamp(0, g.w_out as isize) as usize;
                            dst[..lo].fill(0.0);
                            dst[hi..].fill(0.0);
                            if hi > lo {
                                let s0 = (lo as isize + off) as usize;
                                dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                            }
                        } else {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * g.stride) as isize + off;
                                *d = if ix >= 0 && ix < g.w as isize {
                                    src[ix as usize]
                                } else {
                                    0.0
                                };
                            }
                        }
                    }
                }
            }
        });
}

fn chunk_rows(g: &Geom) -> usize {
    (TARGET_COLS / g.w_out.max(1)).clamp(1, g.h_out.max(1))
}

/// y[n, c_out, h_out, w_out] = x (*) w, no bias.
pub(crate) fn forward(x: &[f32], g: &Geom, w: &[f32]) -> Vec<f32> {
    let kk = g.patch_len();
    let out_hw = g.out_hw();
    let mut y = vec![0.0f32; g.n * g.c_out * out_hw];
    let rows_per_chunk = chunk_rows(g);
    let mut col = vec![0.0f32; kk * rows_per_chunk * g.w_out];
    for img in 0..g.n {
        let x_img = &x[img * g.c_in * g.h * g.w..];
        let y_img = y[img * g.c_out * out_hw..].as_mut_ptr();
        let mut oy0 = 0;
        while oy0 < g.h_out {
            let rows = rows_per_chunk.min(g.h_out - oy0);
            let ncols = rows * g.w_out;
            fill_col(x_img, g, oy0, rows, &mut col[..kk * ncols]);
            let c_ptr = unsafe { y_img.add(oy0 * g.w_out) };
            par_sgemm(g.c_out, kk, ncols, w, &col[..kk * ncols], ncols, 0.0, c_ptr, out_hw);
            oy0 += rows;
        }
    }
    y
}

/// dW[c_out, c_in, k, k] = sum over images and positions of dy * patch.
pub(crate) fn backward_weights(x: &[f32], dy: &[f32], g: &Geom) -> Vec<f32> {
    let kk = g.patch_len();
    let out_hw = g.out_hw();
    let mut dw = vec![0.0f32; g.c_out * kk];
    let rows_per_chunk = chunk_rows(g);
    let mut col = vec![0.0f32; kk * rows_per_chunk * g.w_out];
    let dw_ptr = SendPtr(dw.as_mut_ptr());
    for img in 0..g.n {
        let x_img = &x[img * g.c_in * g.h * g.w..];
        let dy_img = &dy[img * g.c_out * out_hw..];
        let mut oy0 = 0;
        while oy0 < g.h_out {
            let rows = rows_per_chunk.min(g.h_out - oy0);
            let ncols = rows * g.w_out;
            fill_col(x_img, g, oy0, rows, &mut col[..kk * ncols]);
            // dW += dy_chunk [c_out, ncols] * col^T [ncols, kk]
            // parallel over kk column blocks, sequential over chunks.
            let col_ref = &col;
            let blocks: Vec<usize> = (0..kk).step_by(GEMM_NSPLIT).collect();
            blocks.par_iter().for_each(|&j0| {
                let nb = GEMM_NSPLIT.min(kk - j0);
                let dwp = &dw_ptr;
                unsafe {
                    matrixmultiply::sgemm(
                        g.c_out,
                        ncols,
                        nb,
                        1.0,
                        dy_img.as_ptr().add(oy0 * g.w_out),
                        out_hw as isize,
                        1,
                        col_ref.as_ptr().add(j0 * ncols),
                        1,
                        ncols as isize,
                        1.0,
                        dwp.0.add(j0),
                        kk as isize,
                        1,
                    );
                }
            });
            oy0 += rows;
        }
    }
    dw
}

/// dX via the transposed convolution: zero-stuff dy by the stride, pad by
/// (k-1)*dil - pad, and convolve with the channel-transposed, spatially
/// flipped kernel at the same dilation.
pub(crate) fn backward_input(dy: &[f32], g: &Geom, w: &[f32]) -> Vec<f32> {
    let k = g.k;
    let mut wf = vec![0.0f32; g.c_in * g.c_out * k * k];
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            for ky in 0..k {
                for kx in 0..k {
                    wf[((ci * g.c_out + co) * k + (k - 1 - ky)) * k + (k - 1 - kx)] =
                        w[((co * g.c_in + ci) * k + ky) * k + kx];
                }
            }
        }
    }
    let ext = ((k - 1) * g.dil) as isize;
    let eh = (g.h as isize + 2 * g.pad - ext - 1) as usize - (g.h_out - 1) * g.stride;
    let ew = (g.w as isize + 2 * g.pad - ext - 1) as usize - (g.w_out - 1) * g.stride;
    let hd = (g.h_out - 1) * g.stride + 1 + eh;
    let wd = (g.w_out - 1) * g.stride + 1 + ew;
    let dyd = if g.stride == 1 && eh == 0 && ew == 0 {
        dy.to_vec()
    } else {
        let mut dyd = vec![0.0f32; g.n * g.c_out * hd * wd];
        for img in 0..g.n {
            for co in 0..g.c_out {
                let src = &dy[(img * g.c_out + co) * g.out_hw()..];
                let dst = &mut dyd[(img * g.c_out + co) * hd * wd..];
                for oy in 0..g.h_out {
                    for ox in 0..g.w_out {
                        dst[oy * g.stride * wd + ox * g.stride] = src[oy * g.w_out + ox];
                    }
                }
            }
        }
        dyd
    };
    let g2 = Geom {
        n: g.n,
        c_in: g.c_out,
        h: hd,
        w: wd,
        c_out: g.c_in,
        k,
        stride: 1,
        pad: ext - g.pad,
        dil: g.dil,
        h_out: g.h,
        w_out: g.w,
    };
    forward(&dyd, &g2, &wf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(
        x: &[f32],
        g: &Geom,
        w: &[f32],
    ) -> Vec<f32> {
        let mut y = vec![0.0f32; g.n * g.c_out * g.out_hw()];
        for img in 0..g.n {
            for co in 0..g.c_out {
                for oy in 0..g.h_out {
                    for ox in 0..g.w_out {
                        let mut acc = 0.0f32;
                        for ci in 0..g.c_in {
                            for ky in 0..g.k {
                                for kx in 0..g.k {
                                    let iy = (oy * g.stride) as isize - g.pad
                                        + (ky * g.dil) as isize;
                                    let ix = (ox * g.stride) as isize - g.pad
                                        + (kx * g.dil) as isize;
                                    if iy >= 0
                                        && iy < g.h as isize
                                        && ix >= 0
                                        && ix < g.w as isize
                                    {
                                        acc += x[((img * g.c_in + ci) * g.h
                                            + iy as usize)
                                            * g.w
                                            + ix as usize]
                                            * w[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                                    }
                                }
                            }
                        }
                        y[((img * g.c_out + co) * g.h_out + oy) * g.w_out + ox] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn gemm_path_matches_naive_convolution() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for &(c_in, c_out, h, w, k, stride, pad, dil) in &[
            (2usize, 3usize, 7usize, 9usize, 3usize, 1usize, 1isize, 1usize),
            (3, 2, 8, 8, 3, 2, 1, 1),
            (1, 4, 10, 10, 1, 1, 0, 1),
            (2, 2, 12, 12, 3, 1, 2, 2),
            (1, 2, 9, 9, 3, 1, 6, 6),
            (2, 3, 11, 7, 5, 2, 2, 1),
        ] {
            let x_shape = Shape([2, c_in, h, w]);
            let w_shape = Shape([c_out, c_in, k, k]);
            let g = geometry(x_shape, w_shape, stride, pad, dil).unwrap();
            let x: Vec<f32> = (0..x_shape.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let wt: Vec<f32> = (0..w_shape.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fast = forward(&x, &g, &wt);
            let slow = naive_conv(&x, &g, &wt);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-4, "gemm {} vs naive {}", a, b);
            }
        }
    }
}
