//! 2-D cross-correlation via im2col and a single-precision GEMM.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(input: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Self> {
        let [_, cin, h, w] = input.dims4()?;
        let [cout, wcin, kh, kw] = weight.dims4()?;
        if wcin != cin {
            return Err(Error::Shape(format!(
                "conv2d: input has {cin} channels but weight expects {wcin}"
            )));
        }
        if kh != kw {
            return Err(Error::Shape(format!(
                "conv2d: only square kernels are supported, got {kh}x{kw}"
            )));
        }
        if stride == 0 {
            return Err(Error::Shape("conv2d: stride must be positive".into()));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::Shape(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        Ok(Self {
            cin,
            h,
            w,
            cout,
            k: kh,
            stride,
            padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    fn in_pixels(&self) -> usize {
        self.h * self.w
    }

    /// Range of output columns `ox` whose tap `kj` lands inside the input.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if kj >= self.padding {
            0
        } else {
            (self.padding - kj).div_ceil(s)
        };
        // ox*s + kj - pad < w  <=>  ox*s < w + pad - kj
        let bound = self.w + self.padding;
        let hi = if bound <= kj {
            0
        } else {
            (bound - kj).div_ceil(s).min(self.wo)
        };
        (lo, hi.max(lo))
    }
}

fn im2col(x: &[f32], g: &Geometry, col: &mut [f32]) {
    let p = g.out_pixels();
    for ci in 0..g.cin {
        let plane = &x[ci * g.in_pixels()..(ci + 1) * g.in_pixels()];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                let (lo, hi) = g.valid_cols(kj);
                for oy in 0..g.ho {
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out_row[..lo].fill(0.0);
                    out_row[hi..].fill(0.0);
                    if g.stride == 1 {
                        let start = lo + kj - g.padding;
                        out_row[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for ox in lo..hi {
                            out_row[ox] = src[ox * g.stride + kj - g.padding];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add(col: &[f32], g: &Geometry, dx: &mut [f32]) {
    let p = g.out_pixels();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.in_pixels()..(ci + 1) * g.in_pixels()];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &col[row * p..(row + 1) * p];
                let (lo, hi) = g.valid_cols(kj);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let in_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let col_row = &src[oy * g.wo..(oy + 1) * g.wo];
                    for ox in lo..hi {
                        in_row[ox * g.stride + kj - g.padding] += col_row[ox];
                    }
                }
            }
        }
    }
}

/// `c (m x n) = alpha * a (m x k, strides) * b (k x n, strides) + beta * c`,
/// with `c` row-major and contiguous.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (isize, isize),
    b: &[f32],
    b_strides: (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices sized for the stated dimensions and strides;
    // `c` is exclusively borrowed and does not alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Cross-correlation of `input [N,Cin,H,W]` with `weight [Cout,Cin,k,k]`.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &[f32],
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = Geometry::new(input, weight, stride, padding)?;
    if bias.len() != g.cout {
        return Err(Error::Shape(format!(
            "conv2d: bias has {} entries for {} output channels",
            bias.len(),
            g.cout
        )));
    }
    let n = input.shape()[0];
    let kdim = g.col_rows();
    let p = g.out_pixels();
    let mut out = vec![0.0f32; n * g.cout * p];
    let mut col = vec![0.0f32; kdim * p];
    let direct = g.k == 1 && g.stride == 1 && g.padding == 0;
    for b in 0..n {
        let x = &input.data()[b * g.cin * g.in_pixels()..(b + 1) * g.cin * g.in_pixels()];
        let dst = &mut out[b * g.cout * p..(b + 1) * g.cout * p];
        for (co, row) in dst.chunks_exact_mut(p).enumerate() {
            row.fill(bias[co]);
        }
        let cols: &[f32] = if direct {
            x
        } else {
            im2col(x, &g, &mut col);
            &col
        };
        gemm(
            g.cout,
            kdim,
            p,
            weight.data(),
            (kdim as isize, 1),
            cols,
            (p as isize, 1),
            1.0,
            dst,
        );
    }
    Tensor::new(vec![n, g.cout, g.ho, g.wo], out)
}

/// Gradients produced by [`conv2d_backward`].
#[derive(Debug)]
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Vec<f32>>,
}

/// Adjoint of [`conv2d`]. Input and parameter gradients are materialized
/// only when requested.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
    grad_out: &Tensor,
    want_input: bool,
    want_params: bool,
) -> Result<ConvGrads> {
    let g = Geometry::new(input, weight, stride, padding)?;
    let n = input.shape()[0];
    let expected = [n, g.cout, g.ho, g.wo];
    if grad_out.shape() != expected {
        return Err(Error::Shape(format!(
            "conv2d backward: gradient shape {:?} does not match output {expected:?}",
            grad_out.shape()
        )));
    }
    let kdim = g.col_rows();
    let p = g.out_pixels();
    let mut col = vec![0.0f32; kdim * p];
    let mut dcol = vec![0.0f32; kdim * p];
    let mut dx = want_input.then(|| vec![0.0f32; input.numel()]);
    let mut dw = want_params.then(|| vec![0.0f32; weight.numel()]);
    let mut db = want_params.then(|| vec![0.0f32; g.cout]);
    let direct = g.k == 1 && g.stride == 1 && g.padding == 0;

    for b in 0..n {
        let x = &input.data()[b * g.cin * g.in_pixels()..(b + 1) * g.cin * g.in_pixels()];
        let gy = &grad_out.data()[b * g.cout * p..(b + 1) * g.cout * p];
        if let (Some(dw), Some(db)) = (dw.as_mut(), db.as_mut()) {
            let cols: &[f32] = if direct {
                x
            } else {
                im2col(x, &g, &mut col);
                &col
            };
            // dW += dY (Cout x P) * col^T (P x K)
            gemm(
                g.cout,
                p,
                kdim,
                gy,
                (p as isize, 1),
                cols,
                (1, p as isize),
                1.0,
                dw,
            );
            for (co, row) in gy.chunks_exact(p).enumerate() {
                db[co] += row.iter().map(|&v| v as f64).sum::<f64>() as f32;
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * g.cin * g.in_pixels()..(b + 1) * g.cin * g.in_pixels()];
            // dcol = W^T (K x Cout) * dY (Cout x P)
            if direct {
                gemm(
                    kdim,
                    g.cout,
                    p,
                    weight.data(),
                    (1, kdim as isize),
                    gy,
                    (p as isize, 1),
                    1.0,
                    dxb,
                );
            } else {
                gemm(
                    kdim,
                    g.cout,
                    p,
                    weight.data(),
                    (1, kdim as isize),
                    gy,
                    (p as isize, 1),
                    0.0,
                    &mut dcol,
                );
                col2im_add(&dcol, &g, dxb);
            }
        }
    }

    Ok(ConvGrads {
        input: dx
            .map(|d| Tensor::new(input.shape().to_vec(), d))
            .transpose()?,
        weight: dw
            .map(|d| Tensor::new(weight.shape().to_vec(), d))
            .transpose()?,
        bias: db,
    })
}
