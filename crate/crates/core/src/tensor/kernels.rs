//! Forward and backward kernels over plain tensors. The tape composes these;
//! they are also usable directly for gradient-free inference.

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding that preserves the spatial extent.
    Same,
    Valid,
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    Tensor::new([m, n], out)
}

/// Geometry of a stride-1 convolution.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new<T: Real>(x: &Tensor<T>, kernel: &Tensor<T>, padding: Padding) -> Result<Self> {
        let (batch, c_in, h, w) = x.dims4("conv2d")?;
        let (c_out, kc, kh, kw) = kernel.dims4("conv2d")?;
        if !matches!((kh, kw), (1, 1) | (3, 3)) {
            return Err(Error::UnsupportedKernel { kh, kw });
        }
        if kc != c_in {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x.shape().to_vec(),
                rhs: kernel.shape().to_vec(),
            });
        }
        let pad = match padding {
            Padding::Same => (kh - 1) / 2,
            Padding::Valid => 0,
        };
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::InvalidShape {
                op: "conv2d",
                msg: format!("input {h}x{w} smaller than kernel {kh}x{kw}"),
            });
        }
        Ok(Self {
            batch,
            c_in,
            c_out,
            h,
            w,
            kh,
            kw,
            pad,
            h_out: h + 2 * pad - kh + 1,
            w_out: w + 2 * pad - kw + 1,
        })
    }

    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn pixels_out(&self) -> usize {
        self.h_out * self.w_out
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad == 0
    }
}

/// Unfolds one sample `[c_in, h, w]` into `[c_in·kh·kw, h_out·w_out]`.
fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let hw_out = g.pixels_out();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.h_out {
                    let iy = (oy + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let hw_out = g.pixels_out();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.h_out {
                    let iy = (oy + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            line[ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation (no kernel flip), stride 1.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    padding: Padding,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x, kernel, padding)?;
    if let Some(b) = bias {
        if b.shape() != [g.c_out] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: vec![g.c_out],
                rhs: b.shape().to_vec(),
            });
        }
    }
    let hw_in = g.h * g.w;
    let hw_out = g.pixels_out();
    let mut out = vec![T::zero(); g.batch * g.c_out * hw_out];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch() * hw_out]
    };
    for n in 0..g.batch {
        let xs = &x.data()[n * g.c_in * hw_in..(n + 1) * g.c_in * hw_in];
        let os = &mut out[n * g.c_out * hw_out..(n + 1) * g.c_out * hw_out];
        if let Some(b) = bias {
            for (co, chunk) in os.chunks_mut(hw_out).enumerate() {
                chunk.fill(b.data()[co]);
            }
        }
        let src: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(&g, xs, &mut cols);
            &cols
        };
        T::gemm(
            g.c_out,
            g.patch(),
            hw_out,
            kernel.data(),
            false,
            src,
            false,
            os,
            bias.is_some(),
        );
    }
    Tensor::new([g.batch, g.c_out, g.h_out, g.w_out], out)
}

/// Gradients of [`conv2d`] with respect to input, kernel, and bias.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    padding: Padding,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = ConvGeom::new(x, kernel, padding)?;
    let hw_in = g.h * g.w;
    let hw_out = g.pixels_out();
    let mut dx = vec![T::zero(); x.len()];
    let mut dk = vec![T::zero(); kernel.len()];
    let mut db = vec![T::zero(); g.c_out];
    let mut cols = vec![T::zero(); g.patch() * hw_out];
    for n in 0..g.batch {
        let xs = &x.data()[n * g.c_in * hw_in..(n + 1) * g.c_in * hw_in];
        let gs = &grad_out.data()[n * g.c_out * hw_out..(n + 1) * g.c_out * hw_out];
        for (co, chunk) in gs.chunks(hw_out).enumerate() {
            db[co] += chunk.iter().copied().sum();
        }
        let dxs = &mut dx[n * g.c_in * hw_in..(n + 1) * g.c_in * hw_in];
        if g.is_pointwise() {
            T::gemm(g.c_out, hw_out, g.c_in, gs, false, xs, true, &mut dk, true);
            T::gemm(
                g.c_in,
                g.c_out,
                hw_out,
                kernel.data(),
                true,
                gs,
                false,
                dxs,
                true,
            );
        } else {
            im2col(&g, xs, &mut cols);
            T::gemm(
                g.c_out,
                hw_out,
                g.patch(),
                gs,
                false,
                &cols,
                true,
                &mut dk,
                true,
            );
            T::gemm(
                g.patch(),
                g.c_out,
                hw_out,
                kernel.data(),
                true,
                gs,
                false,
                &mut cols,
                false,
            );
            col2im(&g, &cols, dxs);
        }
    }
    Ok((
        Tensor::new(x.shape(), dx)?,
        Tensor::new(kernel.shape(), dk)?,
        Tensor::new([g.c_out], db)?,
    ))
}

/// Concatenates along axis 1; all other extents must agree.
pub fn concat_axis1<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mismatch = || Error::ShapeMismatch {
        op: "concat_channels",
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    };
    if a.rank() < 2 || a.rank() != b.rank() || a.shape()[0] != b.shape()[0] {
        return Err(mismatch());
    }
    if a.shape()[2..] != b.shape()[2..] {
        return Err(mismatch());
    }
    let batch = a.shape()[0];
    let inner: usize = a.shape()[2..].iter().product();
    let (ca, cb) = (a.shape()[1], b.shape()[1]);
    let mut out = Vec::with_capacity(a.len() + b.len());
    for n in 0..batch {
        out.extend_from_slice(&a.data()[n * ca * inner..(n + 1) * ca * inner]);
        out.extend_from_slice(&b.data()[n * cb * inner..(n + 1) * cb * inner]);
    }
    let mut shape = a.shape().to_vec();
    shape[1] = ca + cb;
    Tensor::new(shape, out)
}

/// Splits axis 1 at `first` channels; inverse of [`concat_axis1`].
pub fn split_axis1<T: Real>(t: &Tensor<T>, first: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    if t.rank() < 2 || first > t.shape()[1] {
        return Err(Error::InvalidShape {
            op: "split_channels",
            msg: format!("cannot split {first} channels from {:?}", t.shape()),
        });
    }
    let batch = t.shape()[0];
    let c = t.shape()[1];
    let inner: usize = t.shape()[2..].iter().product();
    let mut a = Vec::with_capacity(batch * first * inner);
    let mut b = Vec::with_capacity(batch * (c - first) * inner);
    for n in 0..batch {
        let s = &t.data()[n * c * inner..(n + 1) * c * inner];
        a.extend_from_slice(&s[..first * inner]);
        b.extend_from_slice(&s[first * inner..]);
    }
    let mut sa = t.shape().to_vec();
    sa[1] = first;
    let mut sb = t.shape().to_vec();
    sb[1] = c - first;
    Ok((Tensor::new(sa, a)?, Tensor::new(sb, b)?))
}

pub fn upsample_nearest2x<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4("upsample_nearest2x")?;
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); b * c * h2 * w2];
    for (plane, dst) in x.data().chunks(h * w).zip(out.chunks_mut(h2 * w2)) {
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = plane[(y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::new([b, c, h2, w2], out)
}

pub fn upsample_nearest2x_backward<T: Real>(grad: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h2, w2) = grad.dims4("upsample_nearest2x")?;
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = vec![T::zero(); b * c * h * w];
    for (src, plane) in grad.data().chunks(h2 * w2).zip(out.chunks_mut(h * w)) {
        for y in 0..h2 {
            for xx in 0..w2 {
                plane[(y / 2) * w + xx / 2] += src[y * w2 + xx];
            }
        }
    }
    Tensor::new([b, c, h, w], out)
}

pub fn avgpool2x<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4("avgpool2x")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::OddSpatial {
            op: "avgpool2x",
            h,
            w,
        });
    }
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut out = vec![T::zero(); b * c * ho * wo];
    for (plane, dst) in x.data().chunks(h * w).zip(out.chunks_mut(ho * wo)) {
        for y in 0..ho {
            for xx in 0..wo {
                let i = 2 * y * w + 2 * xx;
                dst[y * wo + xx] =
                    (plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]) * quarter;
            }
        }
    }
    Tensor::new([b, c, ho, wo], out)
}

pub fn avgpool2x_backward<T: Real>(grad: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, ho, wo) = grad.dims4("avgpool2x")?;
    let (h, w) = (2 * ho, 2 * wo);
    let quarter = T::of(0.25);
    let mut out = vec![T::zero(); b * c * h * w];
    for (src, plane) in grad.data().chunks(ho * wo).zip(out.chunks_mut(h * w)) {
        for y in 0..h {
            for xx in 0..w {
                plane[y * w + xx] = src[(y / 2) * wo + xx / 2] * quarter;
            }
        }
    }
    Tensor::new([b, c, h, w], out)
}

pub fn global_sum_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4("global_sum_pool")?;
    let out = x
        .data()
        .chunks(h * w)
        .map(|p| p.iter().copied().sum())
        .collect();
    Tensor::new([b, c], out)
}

pub fn global_sum_pool_backward<T: Real>(
    grad: &Tensor<T>,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    let (b, c) = grad.dims2("global_sum_pool")?;
    let mut out = Vec::with_capacity(b * c * h * w);
    for &g in grad.data() {
        out.extend(std::iter::repeat_n(g, h * w));
    }
    Tensor::new([b, c, h, w], out)
}

/// Per-channel (axis 1) mean and biased variance over all other axes.
pub fn channel_moments<T: Real>(x: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    if x.rank() < 2 {
        return Err(Error::InvalidShape {
            op: "batch_norm",
            msg: format!("expected [batch, channel, ...], got {:?}", x.shape()),
        });
    }
    let (b, c) = (x.shape()[0], x.shape()[1]);
    let inner: usize = x.shape()[2..].iter().product();
    let count = T::of((b * inner) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for n in 0..b {
        for (ch, m) in mean.iter_mut().enumerate() {
            let s = &x.data()[(n * c + ch) * inner..(n * c + ch + 1) * inner];
            *m += s.iter().copied().sum();
        }
    }
    for m in &mut mean {
        *m /= count;
    }
    for n in 0..b {
        for ch in 0..c {
            let s = &x.data()[(n * c + ch) * inner..(n * c + ch + 1) * inner];
            var[ch] += s.iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum();
        }
    }
    for v in &mut var {
        *v /= count;
    }
    Ok((mean, var))
}
