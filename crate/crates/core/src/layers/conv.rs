//! 2-D cross-correlation (what deep-learning frameworks call convolution)
//! and its depthwise-separable factorization.
//!
//! Layout is NCHW throughout. Full convolution goes through im2col so the
//! inner loops are plain matrix products.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// No padding.
    Valid,
    /// Zero padding so the output extent is `ceil(H / stride)`; odd totals
    /// put the extra row/column on the bottom/right.
    Same,
    /// The same number of zero rows/columns on every side.
    Explicit(usize),
}

/// Resolved padding and output extents for one spatial configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn same_pad(extent: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = extent.div_ceil(stride);
    let total = ((out.saturating_sub(1)) * stride + kernel).saturating_sub(extent);
    (total / 2, total - total / 2)
}

impl ConvGeometry {
    pub fn new(
        in_h: usize,
        in_w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("convolution stride must be at least 1"));
        }
        if kh == 0 || kw == 0 {
            return Err(Error::invalid("convolution kernel extents must be positive"));
        }
        let ((pt, pb), (pl, pr)) = match padding {
            Padding::Valid => ((0, 0), (0, 0)),
            Padding::Explicit(p) => ((p, p), (p, p)),
            Padding::Same => (same_pad(in_h, kh, stride), same_pad(in_w, kw, stride)),
        };
        let padded_h = in_h + pt + pb;
        let padded_w = in_w + pl + pr;
        if kh > padded_h || kw > padded_w {
            return Err(Error::shape(format!(
                "kernel {kh}x{kw} larger than padded input {padded_h}x{padded_w}"
            )));
        }
        Ok(ConvGeometry {
            in_h,
            in_w,
            kh,
            kw,
            stride,
            pad_top: pt,
            pad_left: pl,
            out_h: (padded_h - kh) / stride + 1,
            out_w: (padded_w - kw) / stride + 1,
        })
    }

    /// Input coordinate read by output `(oy, ox)` at kernel tap `(m, n)`,
    /// or `None` when it falls in the zero padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, m: usize, n: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + m).checked_sub(self.pad_top)?;
        let x = (ox * self.stride + n).checked_sub(self.pad_left)?;
        (y < self.in_h && x < self.in_w).then_some((y, x))
    }
}

fn dims4(x: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(Error::shape(format!("{what} expects NCHW input, got {s:?}"))),
    }
}

/// Unfolds one sample (C, H, W) into columns (C·kh·kw, OH·OW).
fn im2col(img: &[f64], channels: usize, g: &ConvGeometry, cols: &mut [f64]) {
    let plane = g.out_h * g.out_w;
    for c in 0..channels {
        let src = &img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for m in 0..g.kh {
            for n in 0..g.kw {
                let row = (c * g.kh + m) * g.kw + n;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        dst[oy * g.out_w + ox] = match g.source(oy, ox, m, n) {
                            Some((y, x)) => src[y * g.in_w + x],
                            None => 0.0,
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], channels: usize, g: &ConvGeometry, img: &mut [f64]) {
    let plane = g.out_h * g.out_w;
    for c in 0..channels {
        let dst = &mut img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for m in 0..g.kh {
            for n in 0..g.kw {
                let row = (c * g.kh + m) * g.kw + n;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        if let Some((y, x)) = g.source(oy, ox, m, n) {
                            dst[y * g.in_w + x] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_conv_params(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize)> {
    let (_, c, _, _) = dims4(x, "conv2d")?;
    let (f, wc, kh, kw) = match *weight.shape() {
        [f, wc, kh, kw] => (f, wc, kh, kw),
        ref s => return Err(Error::shape(format!("conv2d weight must be 4-D, got {s:?}"))),
    };
    if wc != c {
        return Err(Error::shape(format!(
            "conv2d weight expects {wc} input channels, input has {c}"
        )));
    }
    if bias.shape() != [f] {
        return Err(Error::shape(format!(
            "conv2d bias shape {:?}, expected [{f}]",
            bias.shape()
        )));
    }
    Ok((f, kh, kw))
}

/// Output `(N, F, OH, OW)` for input `(N, C, H, W)`, weight `(F, C, kh, kw)`
/// and bias `(F)`.
pub fn conv2d_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    let (n, c, h, w) = dims4(x, "conv2d")?;
    let (f, kh, kw) = check_conv_params(x, weight, bias)?;
    let g = ConvGeometry::new(h, w, kh, kw, stride, padding)?;
    let plane = g.out_h * g.out_w;
    let depth = c * kh * kw;
    let mut cols = vec![0.0; depth * plane];
    let mut out = vec![0.0; n * f * plane];
    let sample = c * h * w;
    for s in 0..n {
        im2col(&x.data()[s * sample..(s + 1) * sample], c, &g, &mut cols);
        let dst = &mut out[s * f * plane..(s + 1) * f * plane];
        for (fi, &b) in bias.data().iter().enumerate() {
            dst[fi * plane..(fi + 1) * plane].fill(b);
        }
        gemm_nn(f, depth, plane, weight.data(), &cols, dst);
    }
    Tensor::new(vec![n, f, g.out_h, g.out_w], out)
}

/// Gradients `(dx, dweight, dbias)` given `dL/d(output)`.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, h, w) = dims4(x, "conv2d")?;
    let [f, _, kh, kw] = *weight.shape() else {
        return Err(Error::shape("conv2d weight must be 4-D"));
    };
    let g = ConvGeometry::new(h, w, kh, kw, stride, padding)?;
    if grad_out.shape() != [n, f, g.out_h, g.out_w] {
        return Err(Error::shape(format!(
            "conv2d upstream gradient {:?}, expected {:?}",
            grad_out.shape(),
            [n, f, g.out_h, g.out_w]
        )));
    }
    let plane = g.out_h * g.out_w;
    let depth = c * kh * kw;
    let sample = c * h * w;
    let mut cols = vec![0.0; depth * plane];
    let mut dcols = vec![0.0; depth * plane];
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; weight.len()];
    let mut db = vec![0.0; f];
    for s in 0..n {
        let dy = &grad_out.data()[s * f * plane..(s + 1) * f * plane];
        for fi in 0..f {
            db[fi] += dy[fi * plane..(fi + 1) * plane].iter().sum::<f64>();
        }
        im2col(&x.data()[s * sample..(s + 1) * sample], c, &g, &mut cols);
        gemm_nt(f, plane, depth, dy, &cols, &mut dw);
        dcols.fill(0.0);
        gemm_tn(depth, f, plane, weight.data(), dy, &mut dcols);
        col2im(&dcols, c, &g, &mut dx[s * sample..(s + 1) * sample]);
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(weight.shape().to_vec(), dw)?,
        Tensor::new(vec![f], db)?,
    ))
}

/// Per-channel spatial convolution: input `(N, C, H, W)`, kernel `(C, kh, kw)`.
pub fn depthwise_forward(
    x: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    let (n, c, h, w) = dims4(x, "depthwise conv")?;
    let [kc, kh, kw] = *kernel.shape() else {
        return Err(Error::shape(format!(
            "depthwise kernel must be (C, kh, kw), got {:?}",
            kernel.shape()
        )));
    };
    if kc != c {
        return Err(Error::shape(format!(
            "depthwise kernel has {kc} channels, input has {c}"
        )));
    }
    let g = ConvGeometry::new(h, w, kh, kw, stride, padding)?;
    let plane = g.out_h * g.out_w;
    let mut out = vec![0.0; n * c * plane];
    for s in 0..n {
        for ch in 0..c {
            let src = &x.data()[(s * c + ch) * h * w..(s * c + ch + 1) * h * w];
            let k = &kernel.data()[ch * kh * kw..(ch + 1) * kh * kw];
            let dst = &mut out[(s * c + ch) * plane..(s * c + ch + 1) * plane];
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = 0.0;
                    for m in 0..kh {
                        for nn in 0..kw {
                            if let Some((y, xx)) = g.source(oy, ox, m, nn) {
                                acc += src[y * w + xx] * k[m * kw + nn];
                            }
                        }
                    }
                    dst[oy * g.out_w + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, c, g.out_h, g.out_w], out)
}

pub fn depthwise_backward(
    x: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor, Tensor)> {
    let (n, c, h, w) = dims4(x, "depthwise conv")?;
    let [_, kh, kw] = *kernel.shape() else {
        return Err(Error::shape("depthwise kernel must be 3-D"));
    };
    let g = ConvGeometry::new(h, w, kh, kw, stride, padding)?;
    if grad_out.shape() != [n, c, g.out_h, g.out_w] {
        return Err(Error::shape("depthwise upstream gradient has the wrong shape"));
    }
    let plane = g.out_h * g.out_w;
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; kernel.len()];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * h * w;
            let src = &x.data()[base..base + h * w];
            let k = &kernel.data()[ch * kh * kw..(ch + 1) * kh * kw];
            let dy = &grad_out.data()[(s * c + ch) * plane..(s * c + ch + 1) * plane];
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let gv = dy[oy * g.out_w + ox];
                    for m in 0..kh {
                        for nn in 0..kw {
                            if let Some((y, xx)) = g.source(oy, ox, m, nn) {
                                dk[ch * kh * kw + m * kw + nn] += gv * src[y * w + xx];
                                dx[base + y * w + xx] += gv * k[m * kw + nn];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(kernel.shape().to_vec(), dk)?,
    ))
}

/// 1×1 convolution: `(N, C, H, W)` with weight `(F, C)` and bias `(F)`.
pub fn pointwise_forward(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = dims4(x, "pointwise conv")?;
    let [f, wc] = *weight.shape() else {
        return Err(Error::shape("pointwise weight must be (F, C)"));
    };
    if wc != c || bias.shape() != [f] {
        return Err(Error::shape(format!(
            "pointwise weight {:?}/bias {:?} incompatible with {c} channels",
            weight.shape(),
            bias.shape()
        )));
    }
    let plane = h * w;
    let mut out = vec![0.0; n * f * plane];
    for s in 0..n {
        let dst = &mut out[s * f * plane..(s + 1) * f * plane];
        for (fi, &b) in bias.data().iter().enumerate() {
            dst[fi * plane..(fi + 1) * plane].fill(b);
        }
        gemm_nn(
            f,
            c,
            plane,
            weight.data(),
            &x.data()[s * c * plane..(s + 1) * c * plane],
            dst,
        );
    }
    Tensor::new(vec![n, f, h, w], out)
}

pub fn pointwise_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, h, w) = dims4(x, "pointwise conv")?;
    let [f, _] = *weight.shape() else {
        return Err(Error::shape("pointwise weight must be (F, C)"));
    };
    if grad_out.shape() != [n, f, h, w] {
        return Err(Error::shape("pointwise upstream gradient has the wrong shape"));
    }
    let plane = h * w;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; weight.len()];
    let mut db = vec![0.0; f];
    for s in 0..n {
        let dy = &grad_out.data()[s * f * plane..(s + 1) * f * plane];
        let xs = &x.data()[s * c * plane..(s + 1) * c * plane];
        for fi in 0..f {
            db[fi] += dy[fi * plane..(fi + 1) * plane].iter().sum::<f64>();
        }
        gemm_nt(f, plane, c, dy, xs, &mut dw);
        gemm_tn(c, f, plane, weight.data(), dy, &mut dx[s * c * plane..(s + 1) * c * plane]);
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(weight.shape().to_vec(), dw)?,
        Tensor::new(vec![f], db)?,
    ))
}
