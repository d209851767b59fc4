//! Forward and backward kernels used by the autodiff graph.

use crate::error::{Error, Result};
use crate::gemm::gemm_acc;
use crate::tensor::{transpose_into, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub height: usize,
    pub width: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], filters: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 || filters.len() != 4 {
            return Err(Error::dim("conv2d", input, filters));
        }
        let (batch, c_in, height, width) = (input[0], input[1], input[2], input[3]);
        let (c_out, fc, kh, kw) = (filters[0], filters[1], filters[2], filters[3]);
        if fc != c_in || kh != kw {
            return Err(Error::dim("conv2d", input, filters));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be positive".into()));
        }
        if kh > height + 2 * pad || kw > width + 2 * pad {
            return Err(Error::dim("conv2d", input, filters));
        }
        let out_h = (height + 2 * pad - kh) / stride + 1;
        let out_w = (width + 2 * pad - kw) / stride + 1;
        Ok(ConvGeometry {
            batch,
            c_in,
            height,
            width,
            c_out,
            kernel: kh,
            stride,
            pad,
            out_h,
            out_w,
        })
    }

    /// Rows of the unfolded input: one per (input channel, ky, kx).
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one image `[c_in, H, W]` into `[c_in·k·k, out_h·out_w]`.
pub fn im2col<T: Scalar>(g: &ConvGeometry, image: &[T], cols: &mut [T]) {
    let k = g.kernel;
    let npix = g.out_pixels();
    for c in 0..g.c_in {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.width as isize {
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

/// Adjoint of [`im2col`]: scatter-adds columns back into an image gradient.
pub fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], image: &mut [T]) {
    let k = g.kernel;
    let npix = g.out_pixels();
    for c in 0..g.c_in {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * npix..(row + 1) * npix];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            plane[iy as usize * g.width + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation. Returns the output and, when requested, the unfolded
/// input of every image (needed for the filter gradient).
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    filters: &Tensor<T>,
    stride: usize,
    pad: usize,
    keep_cols: bool,
) -> Result<(Tensor<T>, ConvGeometry, Option<Vec<T>>)> {
    let g = ConvGeometry::new(input.shape(), filters.shape(), stride, pad)?;
    let plen = g.patch_len();
    let npix = g.out_pixels();
    let img_len = g.c_in * g.height * g.width;
    let mut out = vec![T::zero(); g.batch * g.c_out * npix];
    let mut saved = keep_cols.then(|| vec![T::zero(); g.batch * plen * npix]);
    let mut scratch = vec![T::zero(); plen * npix];
    for n in 0..g.batch {
        let cols: &mut [T] = match saved.as_mut() {
            Some(s) => &mut s[n * plen * npix..(n + 1) * plen * npix],
            None => &mut scratch,
        };
        im2col(&g, &input.data()[n * img_len..(n + 1) * img_len], cols);
        gemm_acc(
            g.c_out,
            plen,
            npix,
            filters.data(),
            cols,
            &mut out[n * g.c_out * npix..(n + 1) * g.c_out * npix],
        );
    }
    let out = Tensor::new(vec![g.batch, g.c_out, g.out_h, g.out_w], out)?;
    Ok((out, g, saved))
}

pub fn conv2d_filter_grad<T: Scalar>(g: &ConvGeometry, cols: &[T], upstream: &[T]) -> Vec<T> {
    let plen = g.patch_len();
    let npix = g.out_pixels();
    let mut grad = vec![T::zero(); g.c_out * plen];
    let mut cols_t = vec![T::zero(); npix * plen];
    for n in 0..g.batch {
        transpose_into(&cols[n * plen * npix..(n + 1) * plen * npix], plen, npix, &mut cols_t);
        gemm_acc(
            g.c_out,
            npix,
            plen,
            &upstream[n * g.c_out * npix..(n + 1) * g.c_out * npix],
            &cols_t,
            &mut grad,
        );
    }
    grad
}

pub fn conv2d_input_grad<T: Scalar>(g: &ConvGeometry, filters: &[T], upstream: &[T]) -> Vec<T> {
    let plen = g.patch_len();
    let npix = g.out_pixels();
    let img_len = g.c_in * g.height * g.width;
    let mut filters_t = vec![T::zero(); plen * g.c_out];
    transpose_into(filters, g.c_out, plen, &mut filters_t);
    let mut grad = vec![T::zero(); g.batch * img_len];
    let mut dcols = vec![T::zero(); plen * npix];
    for n in 0..g.batch {
        dcols.fill(T::zero());
        gemm_acc(
            plen,
            g.c_out,
            npix,
            &filters_t,
            &upstream[n * g.c_out * npix..(n + 1) * g.c_out * npix],
            &mut dcols,
        );
        col2im(g, &dcols, &mut grad[n * img_len..(n + 1) * img_len]);
    }
    grad
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BnMode<'a, T: Scalar> {
    /// Normalize with batch statistics.
    Train { eps: T },
    /// Normalize with stored running statistics.
    Eval { mean: &'a [T], var: &'a [T], eps: T },
}

/// Per-channel statistics of one training batch (biased variance).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T: Scalar> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Number of values per channel that produced the statistics.
    pub count: usize,
}

pub struct BnForward<T: Scalar> {
    pub out: Tensor<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub stats: Option<BatchStats<T>>,
}

pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    mode: BnMode<'_, T>,
) -> Result<BnForward<T>> {
    let (n, c, inner) = x.channel_layout()?;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::dim("batchnorm", x.shape(), &[gamma.len(), beta.len()]));
    }
    let count = n * inner;
    let data = x.data();
    let (mean, var, eps, stats) = match mode {
        BnMode::Train { eps } => {
            if count < 2 {
                return Err(Error::DegenerateBatch {
                    op: "batchnorm",
                    extent: count,
                });
            }
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            let inv_count = T::one() / T::of(count as f64);
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..n {
                    for &v in &data[(b * c + ch) * inner..(b * c + ch + 1) * inner] {
                        s += v;
                    }
                }
                let m = s * inv_count;
                let mut sq = T::zero();
                for b in 0..n {
                    for &v in &data[(b * c + ch) * inner..(b * c + ch + 1) * inner] {
                        let d = v - m;
                        sq += d * d;
                    }
                }
                mean[ch] = m;
                var[ch] = sq * inv_count;
            }
            let stats = BatchStats {
                mean: mean.clone(),
                var: var.clone(),
                count,
            };
            (mean, var, eps, Some(stats))
        }
        BnMode::Eval { mean, var, eps } => {
            if mean.len() != c || var.len() != c {
                return Err(Error::dim("batchnorm", x.shape(), &[mean.len(), var.len()]));
            }
            (mean.to_vec(), var.to_vec(), eps, None)
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); data.len()];
    let mut out = vec![T::zero(); data.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * inner;
            for i in off..off + inner {
                let h = (data[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                out[i] = gamma[ch] * h + beta[ch];
            }
        }
    }
    Ok(BnForward {
        out: Tensor::new(x.shape().to_vec(), out)?,
        xhat,
        inv_std,
        stats,
    })
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn batchnorm_backward<T: Scalar>(
    shape: &[usize],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    upstream: &[T],
    train: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, c) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    let count = T::of((n * inner) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * inner;
            for i in off..off + inner {
                dbeta[ch] += upstream[i];
                dgamma[ch] += upstream[i] * xhat[i];
            }
        }
    }
    let mut dx = vec![T::zero(); upstream.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * inner;
            let scale = gamma[ch] * inv_std[ch];
            for i in off..off + inner {
                dx[i] = if train {
                    scale / count * (count * upstream[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                } else {
                    scale * upstream[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Stride-subsample the spatial axes and zero-extend the channel axis.
pub fn shortcut_forward<T: Scalar>(x: &Tensor<T>, stride: usize, c_out: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 || c_out < s[1] || stride == 0 {
        return Err(Error::dim("shortcut", s, &[c_out, stride]));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
    let mut out = vec![T::zero(); n * c_out * oh * ow];
    let d = x.data();
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    out[((b * c_out + ch) * oh + oy) * ow + ox] =
                        d[((b * c + ch) * h + oy * stride) * w + ox * stride];
                }
            }
        }
    }
    Tensor::new(vec![n, c_out, oh, ow], out)
}

pub fn shortcut_backward<T: Scalar>(in_shape: &[usize], stride: usize, c_out: usize, upstream: &[T]) -> Vec<T> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
    let mut dx = vec![T::zero(); n * c * h * w];
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    dx[((b * c + ch) * h + oy * stride) * w + ox * stride] =
                        upstream[((b * c_out + ch) * oh + oy) * ow + ox];
                }
            }
        }
    }
    dx
}

/// Copies the listed channels (axis 1) into a narrower tensor.
pub fn gather_channels<T: Scalar>(x: &Tensor<T>, indices: &[usize]) -> Result<Tensor<T>> {
    let (n, c, inner) = x.channel_layout()?;
    if let Some(&bad) = indices.iter().find(|&&i| i >= c) {
        return Err(Error::Contract(format!("gather index {bad} out of range for {c} channels")));
    }
    let k = indices.len();
    let mut out = vec![T::zero(); n * k * inner];
    for b in 0..n {
        for (j, &i) in indices.iter().enumerate() {
            out[(b * k + j) * inner..(b * k + j + 1) * inner]
                .copy_from_slice(&x.data()[(b * c + i) * inner..(b * c + i + 1) * inner]);
        }
    }
    let mut shape = x.shape().to_vec();
    shape[1] = k;
    Tensor::new(shape, out)
}

/// Places channels of `x` at `indices` of a zero tensor with `width` channels.
pub fn scatter_channels<T: Scalar>(x: &Tensor<T>, indices: &[usize], width: usize) -> Result<Tensor<T>> {
    let (n, k, inner) = x.channel_layout()?;
    if k != indices.len() || indices.iter().any(|&i| i >= width) {
        return Err(Error::dim("scatter_channels", x.shape(), &[indices.len(), width]));
    }
    let mut out = vec![T::zero(); n * width * inner];
    for b in 0..n {
        for (j, &i) in indices.iter().enumerate() {
            out[(b * width + i) * inner..(b * width + i + 1) * inner]
                .copy_from_slice(&x.data()[(b * k + j) * inner..(b * k + j + 1) * inner]);
        }
    }
    let mut shape = x.shape().to_vec();
    shape[1] = width;
    Tensor::new(shape, out)
}
