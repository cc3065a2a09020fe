//! 2-D convolution and transposed convolution, lowered to im2col + GEMM.
//!
//! Weights are `(out, in, k, k)` for ordinary convolutions and
//! `(in, out, k, k)` for transposed ones. Cross-correlation convention:
//! `out[o][y][x] = b[o] + Σ w[o][c][ky][kx] · in[c][y·s + ky·d − p][x·s + kx·d − p]`.

use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::error::{check_dim, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub transposed: bool,
}

impl ConvSpec {
    /// Stride 1, no padding, no dilation.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: 0,
            dilation: 1,
            transposed: false,
        }
    }

    /// The 2× upsampling deconvolution: kernel 4, stride 2, padding 1.
    pub fn upsample2x(in_channels: usize, out_channels: usize) -> Self {
        ConvSpec {
            kernel: 4,
            stride: 2,
            padding: 1,
            transposed: true,
            ..ConvSpec::new(in_channels, out_channels, 4)
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }
    pub fn padding(mut self, p: usize) -> Self {
        self.padding = p;
        self
    }
    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = d;
        self
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        if self.transposed {
            [self.in_channels, self.out_channels, self.kernel, self.kernel]
        } else {
            [self.out_channels, self.in_channels, self.kernel, self.kernel]
        }
    }

    pub fn param_count(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel * self.kernel + self.out_channels
    }

    fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.out_channels == 0
            || self.kernel == 0
            || self.stride == 0
            || self.dilation == 0
        {
            return Err(Error::Geometry {
                op: "ConvSpec",
                msg: format!("channels, kernel, stride and dilation must be positive: {self:?}"),
            });
        }
        Ok(())
    }

    /// Spatial output size for a given input size.
    pub fn output_size(&self, input: usize) -> Result<usize> {
        self.validate()?;
        let (i, k, s, p, d) = (
            input as i64,
            self.kernel as i64,
            self.stride as i64,
            self.padding as i64,
            self.dilation as i64,
        );
        let out = if self.transposed {
            (i - 1) * s - 2 * p + d * (k - 1) + 1
        } else {
            let num = i + 2 * p - d * (k - 1) - 1;
            if num < 0 {
                -1
            } else {
                num / s + 1
            }
        };
        if input == 0 || out < 1 {
            return Err(Error::Geometry {
                op: "conv",
                msg: format!("input size {input} gives non-positive output size for {self:?}"),
            });
        }
        Ok(out as usize)
    }

    /// Geometry of the ordinary convolution that maps the "wide" side to the
    /// "narrow" side. For a transposed conv this is the adjoint direction.
    fn lowering(&self, in_h: usize, in_w: usize) -> Result<Lowering> {
        let (oh, ow) = (self.output_size(in_h)?, self.output_size(in_w)?);
        let (img_h, img_w, col_h, col_w, img_c) = if self.transposed {
            (oh, ow, in_h, in_w, self.out_channels)
        } else {
            (in_h, in_w, oh, ow, self.in_channels)
        };
        Ok(Lowering {
            c: img_c,
            h: img_h,
            w: img_w,
            oh: col_h,
            ow: col_w,
            k: self.kernel,
            s: self.stride,
            p: self.padding,
            d: self.dilation,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0 && !self.transposed
    }
}

/// Image ↔ column-matrix geometry for one ordinary convolution.
#[derive(Clone, Copy, Debug)]
struct Lowering {
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    k: usize,
    s: usize,
    p: usize,
    d: usize,
}

impl Lowering {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }
    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Source coordinate along one axis, or `None` when it falls in padding.
    #[inline]
    fn src(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let v = (o * self.s + k * self.d) as isize - self.p as isize;
        (v >= 0 && (v as usize) < limit).then_some(v as usize)
    }

    fn im2col<T: Real>(&self, img: &[T], cols: &mut [T]) {
        let n = self.cols();
        for c in 0..self.c {
            let plane = &img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..self.oh {
                        let drow = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        match self.src(oy, ky, self.h) {
                            None => drow.iter_mut().for_each(|v| *v = T::zero()),
                            Some(iy) => {
                                let srow = &plane[iy * self.w..(iy + 1) * self.w];
                                for (ox, v) in drow.iter_mut().enumerate() {
                                    *v = match self.src(ox, kx, self.w) {
                                        Some(ix) => srow[ix],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds a column matrix back into an image buffer.
    fn col2im<T: Real>(&self, cols: &[T], img: &mut [T]) {
        let n = self.cols();
        for c in 0..self.c {
            let plane = &mut img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in 0..self.oh {
                        let Some(iy) = self.src(oy, ky, self.h) else {
                            continue;
                        };
                        let srow = &src[oy * self.ow..(oy + 1) * self.ow];
                        let drow = &mut plane[iy * self.w..(iy + 1) * self.w];
                        for (ox, &v) in srow.iter().enumerate() {
                            if let Some(ix) = self.src(ox, kx, self.w) {
                                drow[ix] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

const COL_BLOCK: usize = 512;

/// `c (m×n) += a (m×k) · b (k×n)`.
fn gemm_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let mut j0 = 0;
    while j0 < n {
        let j1 = (j0 + COL_BLOCK).min(n);
        let mut i = 0;
        while i + 4 <= m {
            let (c0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
            let (c1, rest) = rest.split_at_mut(n);
            let (c2, c3) = rest.split_at_mut(n);
            let (c0, c1, c2, c3) = (&mut c0[j0..j1], &mut c1[j0..j1], &mut c2[j0..j1], &mut c3[j0..j1]);
            for r in 0..k {
                let (w0, w1, w2, w3) = (a[i * k + r], a[(i + 1) * k + r], a[(i + 2) * k + r], a[(i + 3) * k + r]);
                let brow = &b[r * n + j0..r * n + j1];
                for ((((&bv, x0), x1), x2), x3) in brow
                    .iter()
                    .zip(c0.iter_mut())
                    .zip(c1.iter_mut())
                    .zip(c2.iter_mut())
                    .zip(c3.iter_mut())
                {
                    *x0 += w0 * bv;
                    *x1 += w1 * bv;
                    *x2 += w2 * bv;
                    *x3 += w3 * bv;
                }
            }
            i += 4;
        }
        while i < m {
            let crow = &mut c[i * n + j0..i * n + j1];
            for r in 0..k {
                let w = a[i * k + r];
                let brow = &b[r * n + j0..r * n + j1];
                for (x, &bv) in crow.iter_mut().zip(brow) {
                    *x += w * bv;
                }
            }
            i += 1;
        }
        j0 = j1;
    }
}

/// `c (m×k) += a (m×n) · b (k×n)ᵀ`.
fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for r in 0..k {
            c[i * k + r] += dot(arow, &b[r * n..(r + 1) * n]);
        }
    }
}

/// `c (k×n) += a (m×k)ᵀ · b (m×n)`.
fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let mut i = 0;
    while i + 4 <= m {
        let (b0, b1, b2, b3) = (
            &b[i * n..(i + 1) * n],
            &b[(i + 1) * n..(i + 2) * n],
            &b[(i + 2) * n..(i + 3) * n],
            &b[(i + 3) * n..(i + 4) * n],
        );
        for r in 0..k {
            let (w0, w1, w2, w3) = (a[i * k + r], a[(i + 1) * k + r], a[(i + 2) * k + r], a[(i + 3) * k + r]);
            let crow = &mut c[r * n..(r + 1) * n];
            for ((((x, &v0), &v1), &v2), &v3) in crow.iter_mut().zip(b0).zip(b1).zip(b2).zip(b3) {
                *x += w0 * v0 + w1 * v1 + w2 * v2 + w3 * v3;
            }
        }
        i += 4;
    }
    while i < m {
        let brow = &b[i * n..(i + 1) * n];
        for r in 0..k {
            let w = a[i * k + r];
            let crow = &mut c[r * n..(r + 1) * n];
            for (x, &v) in crow.iter_mut().zip(brow) {
                *x += w * v;
            }
        }
        i += 1;
    }
}

/// Dot product with a fixed 16-lane accumulation order.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    const L: usize = 16;
    let mut acc = [T::zero(); L];
    let ca = a.chunks_exact(L);
    let cb = b.chunks_exact(L);
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for l in 0..L {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut width = L;
    while width > 1 {
        width /= 2;
        for l in 0..width {
            acc[l] = acc[l] + acc[l + width];
        }
    }
    let mut s = acc[0];
    for (&x, &y) in ta.iter().zip(tb) {
        s += x * y;
    }
    s
}

fn check_operands<T: Real>(op: &'static str, input: &Tensor<T>, weights: &Tensor<T>, bias_len: Option<usize>, spec: &ConvSpec) -> Result<()> {
    let ws = spec.weight_shape();
    check_dim(op, "input channels", spec.in_channels, input.c())?;
    check_dim(op, "weight dim 0", ws[0], weights.shape()[0])?;
    check_dim(op, "weight dim 1", ws[1], weights.shape()[1])?;
    check_dim(op, "weight kernel height", ws[2], weights.shape()[2])?;
    check_dim(op, "weight kernel width", ws[3], weights.shape()[3])?;
    if let Some(b) = bias_len {
        check_dim(op, "bias length", spec.out_channels, b)?;
    }
    Ok(())
}

pub fn conv_output_shape<T: Real>(input: &Tensor<T>, spec: &ConvSpec) -> Result<[usize; 4]> {
    Ok([
        input.n(),
        spec.out_channels,
        spec.output_size(input.h())?,
        spec.output_size(input.w())?,
    ])
}

pub fn conv_forward<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, bias: &[T], spec: &ConvSpec) -> Result<Tensor<T>> {
    check_operands("conv_forward", input, weights, Some(bias.len()), spec)?;
    let out_shape = conv_output_shape(input, spec)?;
    let mut out = Tensor::zeros(out_shape);
    let low = spec.lowering(input.h(), input.w())?;
    let out_plane = out_shape[2] * out_shape[3];
    let w = weights.data();

    if spec.transposed {
        // cols (Cout·k·k × Hin·Win) = Wᵀ x, then scatter into the output image.
        let mut cols = vec![T::zero(); low.rows() * low.cols()];
        for n in 0..input.n() {
            cols.iter_mut().for_each(|v| *v = T::zero());
            gemm_tn(spec.in_channels, low.rows(), low.cols(), w, input.item(n), &mut cols);
            let item = out.item_mut(n);
            low.col2im(&cols, item);
            for (o, &b) in bias.iter().enumerate() {
                item[o * out_plane..(o + 1) * out_plane].iter_mut().for_each(|v| *v += b);
            }
        }
        return Ok(out);
    }

    let mut cols = if spec.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); low.rows() * low.cols()]
    };
    for n in 0..input.n() {
        let src: &[T] = if spec.is_pointwise() {
            input.item(n)
        } else {
            low.im2col(input.item(n), &mut cols);
            &cols
        };
        let item = out.item_mut(n);
        for (o, &b) in bias.iter().enumerate() {
            item[o * out_plane..(o + 1) * out_plane].iter_mut().for_each(|v| *v = b);
        }
        gemm_nn(spec.out_channels, low.rows(), low.cols(), w, src, item);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T: Real> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
}

/// Gradients of `Σ grad_out ⊙ conv_forward(input, weights, b, spec)`.
pub fn conv_backward<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, spec: &ConvSpec, grad_out: &Tensor<T>) -> Result<ConvGrads<T>> {
    check_operands("conv_backward", input, weights, None, spec)?;
    let out_shape = conv_output_shape(input, spec)?;
    for (i, dim) in ["batch", "channels", "height", "width"].into_iter().enumerate() {
        check_dim("conv_backward", dim, out_shape[i], grad_out.shape()[i])?;
    }
    let low = spec.lowering(input.h(), input.w())?;
    let w = weights.data();
    let mut g_in = Tensor::zeros(input.shape());
    let mut g_w = Tensor::zeros(weights.shape());
    let mut g_b = vec![T::zero(); spec.out_channels];
    let out_plane = out_shape[2] * out_shape[3];
    let mut cols = vec![T::zero(); low.rows() * low.cols()];

    for n in 0..input.n() {
        let go = grad_out.item(n);
        for (o, gb) in g_b.iter_mut().enumerate() {
            *gb += go[o * out_plane..(o + 1) * out_plane].iter().copied().sum::<T>();
        }
        if spec.transposed {
            // The output side is the "image" side of the lowering.
            low.im2col(go, &mut cols);
            gemm_nt(spec.in_channels, low.rows(), low.cols(), input.item(n), &cols, g_w.data_mut());
            gemm_nn(spec.in_channels, low.rows(), low.cols(), w, &cols, g_in.item_mut(n));
        } else if spec.is_pointwise() {
            let x = input.item(n);
            gemm_nt(spec.out_channels, low.rows(), low.cols(), go, x, g_w.data_mut());
            gemm_tn(spec.out_channels, low.rows(), low.cols(), w, go, g_in.item_mut(n));
        } else {
            low.im2col(input.item(n), &mut cols);
            gemm_nt(spec.out_channels, low.rows(), low.cols(), go, &cols, g_w.data_mut());
            cols.iter_mut().for_each(|v| *v = T::zero());
            gemm_tn(spec.out_channels, low.rows(), low.cols(), w, go, &mut cols);
            low.col2im(&cols, g_in.item_mut(n));
        }
    }
    Ok(ConvGrads {
        input: g_in,
        weights: g_w,
        bias: g_b,
    })
}
