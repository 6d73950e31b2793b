//! 2-D cross-correlation and its adjoint (transposed convolution), via im2col.

use crate::error::{Error, Result};

use super::gemm::gemm;
use super::tape::{Backward, Grads, Tape, Var};
use super::Tensor;

/// Geometry of a forward convolution `[c_in, h, w] → [c_out, oh, ow]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
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

impl ConvGeometry {
    pub fn new(
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        (kh, kw): (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be positive"));
        }
        let span_h = (h + 2 * pad) as isize - kh as isize;
        let span_w = (w + 2 * pad) as isize - kw as isize;
        if span_h < 0 || span_w < 0 {
            return Err(Error::dim(
                "conv2d",
                format!("{h}x{w} input with pad {pad} is smaller than the {kh}x{kw} kernel"),
            ));
        }
        let oh = span_h as usize / stride + 1;
        let ow = span_w as usize / stride + 1;
        Ok(ConvGeometry {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        })
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Multiply-accumulates of one forward image.
    pub fn macs(&self) -> usize {
        self.positions() * self.c_out * self.col_rows()
    }
}

fn im2col(x: &[f32], g: &ConvGeometry, cols: &mut [f32]) {
    let p = g.positions();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: &ConvGeometry, x: &mut [f32]) {
    let p = g.positions();
    for c in 0..g.c_in {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `y[b] = K · im2col(x[b])` for every image of the batch.
fn conv_forward(x: &[f32], kernel: &[f32], g: &ConvGeometry, batch: usize) -> Vec<f32> {
    let (rows, p) = (g.col_rows(), g.positions());
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * p;
    let mut cols = vec![0.0; rows * p];
    let mut y = vec![0.0; batch * out_sz];
    for b in 0..batch {
        im2col(&x[b * in_sz..(b + 1) * in_sz], g, &mut cols);
        gemm(g.c_out, rows, p, kernel, false, &cols, false, &mut y[b * out_sz..(b + 1) * out_sz], false);
    }
    y
}

/// Adjoint of `conv_forward` w.r.t. its input: `col2im(Kᵀ · dy[b])`.
fn conv_input_adjoint(dy: &[f32], kernel: &[f32], g: &ConvGeometry, batch: usize) -> Vec<f32> {
    let (rows, p) = (g.col_rows(), g.positions());
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * p;
    let mut cols = vec![0.0; rows * p];
    let mut dx = vec![0.0; batch * in_sz];
    for b in 0..batch {
        gemm(rows, g.c_out, p, kernel, true, &dy[b * out_sz..(b + 1) * out_sz], false, &mut cols, false);
        col2im(&cols, g, &mut dx[b * in_sz..(b + 1) * in_sz]);
    }
    dx
}

/// `Σ_b dy[b] · im2col(x[b])ᵀ`, the kernel gradient of `conv_forward`.
fn conv_kernel_grad(x: &[f32], dy: &[f32], g: &ConvGeometry, batch: usize) -> Vec<f32> {
    let (rows, p) = (g.col_rows(), g.positions());
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * p;
    let mut cols = vec![0.0; rows * p];
    let mut dk = vec![0.0; g.c_out * rows];
    for b in 0..batch {
        im2col(&x[b * in_sz..(b + 1) * in_sz], g, &mut cols);
        gemm(g.c_out, p, rows, &dy[b * out_sz..(b + 1) * out_sz], false, &cols, true, &mut dk, true);
    }
    dk
}

struct ConvRule {
    x: Var,
    kernel: Var,
    geom: ConvGeometry,
    batch: usize,
}

impl Backward for ConvRule {
    fn backward(&self, _: &Tensor, grad: &Tensor, g: &mut Grads<'_>) {
        let geom = &self.geom;
        if g.needs(self.x) {
            let dx = conv_input_adjoint(grad.data(), g.value(self.kernel).data(), geom, self.batch);
            g.add(self.x, Tensor::new([self.batch, geom.c_in, geom.h, geom.w], dx).unwrap());
        }
        if g.needs(self.kernel) {
            let dk = conv_kernel_grad(g.value(self.x).data(), grad.data(), geom, self.batch);
            g.add(self.kernel, Tensor::new([geom.c_out, geom.c_in, geom.kh, geom.kw], dk).unwrap());
        }
    }
}

/// Transposed convolution: `geom` describes the forward convolution it is the
/// adjoint of, so its input has `geom.c_out` channels and its output `geom.c_in`.
struct ConvTransposeRule {
    x: Var,
    kernel: Var,
    geom: ConvGeometry,
    batch: usize,
}

impl Backward for ConvTransposeRule {
    fn backward(&self, _: &Tensor, grad: &Tensor, g: &mut Grads<'_>) {
        let geom = &self.geom;
        if g.needs(self.x) {
            let dx = conv_forward(grad.data(), g.value(self.kernel).data(), geom, self.batch);
            g.add(self.x, Tensor::new([self.batch, geom.c_out, geom.oh, geom.ow], dx).unwrap());
        }
        if g.needs(self.kernel) {
            let dk = conv_kernel_grad(grad.data(), g.value(self.x).data(), geom, self.batch);
            g.add(self.kernel, Tensor::new([geom.c_out, geom.c_in, geom.kh, geom.kw], dk).unwrap());
        }
    }
}

fn check_kernel(op: &'static str, xs: &[usize], ks: &[usize], channel_axis: usize) -> Result<()> {
    if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[channel_axis] {
        return Err(Error::shape(op, xs, ks));
    }
    Ok(())
}

impl Tape {
    /// Cross-correlation of `x [b×c_in×h×w]` with `kernel [c_out×c_in×kh×kw]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ks) = (self.shape(x), self.shape(kernel));
        check_kernel("conv2d", xs, ks, 1)?;
        let geom = ConvGeometry::new(xs[1], xs[2], xs[3], ks[0], (ks[2], ks[3]), stride, pad)?;
        let batch = xs[0];
        let y = conv_forward(self.value(x).data(), self.value(kernel).data(), &geom, batch);
        let out = Tensor::new([batch, geom.c_out, geom.oh, geom.ow], y).unwrap();
        Ok(self.push(out, &[x, kernel], ConvRule { x, kernel, geom, batch }))
    }

    /// Adjoint of [`Tape::conv2d`] with the same `kernel [c_a×c_b×kh×kw]`:
    /// maps `[b×c_a×h×w]` to `[b×c_b×H×W]` with
    /// `H = (h−1)·stride − 2·pad + kh + output_padding`.
    pub fn conv2d_transpose(
        &mut self,
        x: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let (xs, ks) = (self.shape(x), self.shape(kernel));
        check_kernel("conv2d_transpose", xs, ks, 0)?;
        if stride == 0 || output_padding >= stride {
            return Err(Error::dim(
                "conv2d_transpose",
                format!("output padding {output_padding} must be below stride {stride}"),
            ));
        }
        let full = |n: usize, k: usize| {
            (n as isize - 1) * stride as isize - 2 * pad as isize + k as isize + output_padding as isize
        };
        let (big_h, big_w) = (full(xs[2], ks[2]), full(xs[3], ks[3]));
        if big_h < 1 || big_w < 1 || xs[2] == 0 || xs[3] == 0 {
            return Err(Error::dim("conv2d_transpose", format!("nonpositive output size for input {xs:?}")));
        }
        let geom = ConvGeometry::new(ks[1], big_h as usize, big_w as usize, ks[0], (ks[2], ks[3]), stride, pad)?;
        if geom.oh != xs[2] || geom.ow != xs[3] {
            return Err(Error::dim("conv2d_transpose", format!("input {xs:?} is not a conv2d output size")));
        }
        let batch = xs[0];
        let y = conv_input_adjoint(self.value(x).data(), self.value(kernel).data(), &geom, batch);
        let out = Tensor::new([batch, geom.c_in, geom.h, geom.w], y).unwrap();
        Ok(self.push(out, &[x, kernel], ConvTransposeRule { x, kernel, geom, batch }))
    }
}
