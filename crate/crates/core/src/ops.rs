//! Differentiable tensor helpers shared by the models, the fusion modules and the losses.
//!
//! Everything here composes candle primitives that carry a backward pass, so
//! gradients flow through without custom ops. Bilinear resizing in particular
//! is written as two matrix products with fixed interpolation matrices.

use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};

/// `x @ weight^T + bias` over the last dimension. `weight` is `(out, in)`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    // Flatten to a single 2-D product: a broadcast batched matmul would make the
    // weight gradient a slow reduction over the broadcast copies.
    let dims = x.dims().to_vec();
    let d_in = *dims.last().ok_or_else(|| Error::Dimension("linear on a scalar".into()))?;
    let rows = x.elem_count() / d_in.max(1);
    let mut out_dims = dims;
    *out_dims.last_mut().expect("non-empty") = weight.dim(0)?;
    let y = x.reshape((rows, d_in))?.matmul(&weight.t()?)?.reshape(out_dims)?;
    Ok(match bias {
        Some(b) => y.broadcast_add(b)?,
        None => y,
    })
}

/// Dense 2-D convolution. `weight` is `(c_out, c_in, k, k)`, `bias` is `(c_out,)`.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (_, _, kh, kw) = weight.dims4()?;
    let y = if kh == stride && kw == stride && padding == 0 {
        patch_conv(x, weight)?
    } else if kh == kw && matches!(x.dtype(), DType::F32 | DType::F64) {
        im2col_conv(x, weight, stride, padding)?
    } else {
        x.conv2d(weight, padding, stride, 1, 1)?
    };
    Ok(match bias {
        Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?,
        None => y,
    })
}

/// Convolution whose kernel equals its stride: a patch reshape and one matmul.
fn patch_conv(x: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (c_out, _, k, _) = weight.dims4()?;
    let (ho, wo) = (h / k, w / k);
    let x = if ho * k != h || wo * k != w {
        x.narrow(2, 0, ho * k)?.narrow(3, 0, wo * k)?
    } else {
        x.clone()
    };
    let patches = x
        .reshape((b, c, ho, k, wo, k))?
        .permute((0, 2, 4, 1, 3, 5))?
        .contiguous()?
        .reshape((b * ho * wo, c * k * k))?;
    let y = patches.matmul(&weight.reshape((c_out, c * k * k))?.t()?)?;
    Ok(y.reshape((b, ho, wo, c_out))?.permute((0, 3, 1, 2))?.contiguous()?)
}

fn im2col_conv(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (c_out, _, k, _) = weight.dims4()?;
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(Error::Dimension(format!("{h}x{w} input is smaller than a {k}x{k} kernel")));
    }
    let op = Im2Col { k, stride, padding };
    let (ho, wo) = op.out_hw(h, w);
    let cols = x.contiguous()?.apply_op1(op)?;
    let y = cols.reshape((b * ho * wo, c * k * k))?.matmul(&weight.reshape((c_out, c * k * k))?.t()?)?;
    Ok(y.reshape((b, ho, wo, c_out))?.permute((0, 3, 1, 2))?.contiguous()?)
}

/// Unfolds `(b, c, h, w)` into `(b, ho * wo, c * k * k)` patch rows, zero padded.
struct Im2Col {
    k: usize,
    stride: usize,
    padding: usize,
}

impl Im2Col {
    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let o = |n: usize| (n + 2 * self.padding - self.k) / self.stride + 1;
        (o(h), o(w))
    }

    /// Calls `f(column entry, input entry)` for every in-bounds pair.
    fn visit(&self, (b, c, h, w): (usize, usize, usize, usize), mut f: impl FnMut(usize, usize)) {
        let k = self.k;
        let (ho, wo) = self.out_hw(h, w);
        let row = c * k * k;
        for n in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    let r = ((n * ho + oy) * wo + ox) * row;
                    for ci in 0..c {
                        let plane = (n * c + ci) * h * w;
                        for ky in 0..k {
                            let y = oy * self.stride + ky;
                            if y < self.padding || y - self.padding >= h {
                                continue;
                            }
                            let y = y - self.padding;
                            for kx in 0..k {
                                let x = ox * self.stride + kx;
                                if x < self.padding || x - self.padding >= w {
                                    continue;
                                }
                                f(r + (ci * k + ky) * k + kx, plane + y * w + x - self.padding);
                            }
                        }
                    }
                }
            }
        }
    }

    fn unfold<T: Scalar>(&self, x: &[T], dims: (usize, usize, usize, usize)) -> Vec<T> {
        let (b, c, h, w) = dims;
        let (ho, wo) = self.out_hw(h, w);
        let mut out = vec![T::default(); b * ho * wo * c * self.k * self.k];
        self.visit(dims, |o, i| out[o] = x[i]);
        out
    }

    fn fold<T: Scalar>(&self, g: &[T], dims: (usize, usize, usize, usize)) -> Vec<T> {
        let (b, c, h, w) = dims;
        let mut out = vec![T::default(); b * c * h * w];
        self.visit(dims, |o, i| out[i] += g[o]);
        out
    }
}

impl candle_core::CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(
        &self,
        s: &candle_core::CpuStorage,
        l: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage as S;
        let dims = l.shape().dims4()?;
        let (b, c, h, w) = dims;
        let (ho, wo) = self.out_hw(h, w);
        let out = match s {
            S::F32(x) => S::F32(self.unfold(contiguous_slice(x, l)?, dims)),
            S::F64(x) => S::F64(self.unfold(contiguous_slice(x, l)?, dims)),
            _ => candle_core::bail!("im2col supports f32 or f64"),
        };
        Ok((out, (b, ho * wo, c * self.k * self.k).into()))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let dims = x.dims4()?;
        let g = grad.flatten_all()?;
        let gx = match x.dtype() {
            DType::F32 => Tensor::from_vec(self.fold(&g.to_vec1::<f32>()?, dims), x.shape(), x.device())?,
            DType::F64 => Tensor::from_vec(self.fold(&g.to_vec1::<f64>()?, dims), x.shape(), x.device())?,
            other => candle_core::bail!("im2col backward does not support {other:?}"),
        };
        Ok(Some(gx))
    }
}

/// Depthwise 3x3 convolution with padding 1. `weight` is `(c, 3, 3)`.
///
/// A custom op with direct CPU loops for both passes. Composed from candle
/// primitives (shifted slices, grouped conv or gathers) it dominated the step time.
pub fn depthwise_conv3x3(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (_, c, _, _) = x.dims4()?;
    if weight.dims() != [c, 3, 3] {
        return Err(Error::Dimension(format!(
            "depthwise weight {:?} does not match {c} channels",
            weight.dims()
        )));
    }
    let y = x.contiguous()?.apply_op2(&weight.contiguous()?, DepthwiseConv3x3)?;
    Ok(match bias {
        Some(bb) => y.broadcast_add(&bb.reshape((1, c, 1, 1))?)?,
        None => y,
    })
}

struct DepthwiseConv3x3;

trait Scalar: Copy + Default + std::ops::Add<Output = Self> + std::ops::Mul<Output = Self> + std::ops::AddAssign {}
impl Scalar for f32 {}
impl Scalar for f64 {}

/// Visits every (output pixel, tap) pair that reads inside the image:
/// `f(flat output index, flat input index, tap index)`, per channel plane.
fn for_each_tap(h: usize, w: usize, mut f: impl FnMut(usize, usize, usize)) {
    for i in 0..h {
        for j in 0..w {
            for ky in 0..3 {
                let y = i + ky;
                if y == 0 || y > h {
                    continue;
                }
                for kx in 0..3 {
                    let x = j + kx;
                    if x == 0 || x > w {
                        continue;
                    }
                    f(i * w + j, (y - 1) * w + (x - 1), ky * 3 + kx);
                }
            }
        }
    }
}

fn dw_forward<T: Scalar>(x: &[T], wt: &[T], (b, c, h, w): (usize, usize, usize, usize)) -> Vec<T> {
    let plane = h * w;
    let mut out = vec![T::default(); b * c * plane];
    for n in 0..b * c {
        let ch = n % c;
        let (xs, os) = (&x[n * plane..(n + 1) * plane], n * plane);
        let k = &wt[ch * 9..ch * 9 + 9];
        for_each_tap(h, w, |o, i, t| out[os + o] += k[t] * xs[i]);
    }
    out
}

fn dw_backward<T: Scalar>(
    x: &[T],
    wt: &[T],
    gy: &[T],
    (b, c, h, w): (usize, usize, usize, usize),
) -> (Vec<T>, Vec<T>) {
    let plane = h * w;
    let mut gx = vec![T::default(); b * c * plane];
    let mut gw = vec![T::default(); c * 9];
    for n in 0..b * c {
        let ch = n % c;
        let base = n * plane;
        let k = &wt[ch * 9..ch * 9 + 9];
        let mut acc = [T::default(); 9];
        for_each_tap(h, w, |o, i, t| {
            let g = gy[base + o];
            gx[base + i] += k[t] * g;
            acc[t] += g * x[base + i];
        });
        for t in 0..9 {
            gw[ch * 9 + t] += acc[t];
        }
    }
    (gx, gw)
}

fn contiguous_slice<'a, T>(v: &'a [T], l: &candle_core::Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&v[start..end]),
        None => candle_core::bail!("custom op needs contiguous inputs"),
    }
}

impl candle_core::CustomOp2 for DepthwiseConv3x3 {
    fn name(&self) -> &'static str {
        "depthwise-conv3x3"
    }

    fn cpu_fwd(
        &self,
        s1: &candle_core::CpuStorage,
        l1: &candle_core::Layout,
        s2: &candle_core::CpuStorage,
        l2: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage as S;
        let dims = l1.shape().dims4()?;
        let out = match (s1, s2) {
            (S::F32(x), S::F32(w)) => S::F32(dw_forward(contiguous_slice(x, l1)?, contiguous_slice(w, l2)?, dims)),
            (S::F64(x), S::F64(w)) => S::F64(dw_forward(contiguous_slice(x, l1)?, contiguous_slice(w, l2)?, dims)),
            _ => candle_core::bail!("depthwise conv supports matching f32 or f64 inputs"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let dims = x.dims4()?;
        let dev = x.device();
        let (gx, gw) = match x.dtype() {
            DType::F32 => {
                let (gx, gw) = dw_backward(
                    &x.flatten_all()?.to_vec1::<f32>()?,
                    &w.flatten_all()?.to_vec1::<f32>()?,
                    &grad.flatten_all()?.to_vec1::<f32>()?,
                    dims,
                );
                (Tensor::from_vec(gx, x.shape(), dev)?, Tensor::from_vec(gw, w.shape(), dev)?)
            }
            DType::F64 => {
                let (gx, gw) = dw_backward(
                    &x.flatten_all()?.to_vec1::<f64>()?,
                    &w.flatten_all()?.to_vec1::<f64>()?,
                    &grad.flatten_all()?.to_vec1::<f64>()?,
                    dims,
                );
                (Tensor::from_vec(gx, x.shape(), dev)?, Tensor::from_vec(gw, w.shape(), dev)?)
            }
            other => candle_core::bail!("depthwise conv backward does not support {other:?}"),
        };
        Ok((Some(gx), Some(gw)))
    }
}

/// Layer normalization over the last dimension.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

/// Numerically stable softmax along `dim`. The max shift is detached: softmax is
/// invariant to it, so the gradient is unaffected.
pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(dim)?)?)
}

pub fn log_softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(dim)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Row-major `(out, in)` matrix of 1-D bilinear interpolation weights with
/// half-pixel centers (`align_corners = false`).
pub fn bilinear_weights(out: usize, input: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * input];
    let scale = input as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let frac = src - i0 as f64;
        m[o * input + i0] += 1.0 - frac;
        m[o * input + i1] += frac;
    }
    m
}

/// Bilinear resize of a `(B, C, H, W)` map to `(B, C, out_h, out_w)`.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    let dev = x.device();
    let dtype = x.dtype();
    let rh = Tensor::from_vec(bilinear_weights(out_h, h), (out_h, h), dev)?.to_dtype(dtype)?;
    let rw_t = Tensor::from_vec(bilinear_weights(out_w, w), (out_w, w), dev)?
        .to_dtype(dtype)?
        .t()?;
    let flat = x.reshape((b * c, h, w))?;
    let y = rh.broadcast_matmul(&flat)?.broadcast_matmul(&rw_t)?;
    Ok(y.reshape((b, c, out_h, out_w))?)
}

/// Non-overlapping average pooling with kernel = stride = `k` in ceiling mode:
/// trailing partial windows average over the pixels they actually cover.
pub fn avg_pool_ceil(x: &Tensor, k: usize) -> Result<Tensor> {
    if k == 0 {
        return Err(Error::Config("pool size must be at least 1".into()));
    }
    if k == 1 {
        return Ok(x.clone());
    }
    let (_, _, h, w) = x.dims4()?;
    if h % k == 0 && w % k == 0 {
        return Ok(x.avg_pool2d(k)?);
    }
    let oh = h.div_ceil(k);
    let ow = w.div_ceil(k);
    let padded = x
        .pad_with_zeros(2, 0, oh * k - h)?
        .pad_with_zeros(3, 0, ow * k - w)?;
    let mut scale = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        let rows = (h - i * k).min(k);
        for j in 0..ow {
            let cols = (w - j * k).min(k);
            scale.push((k * k) as f64 / (rows * cols) as f64);
        }
    }
    let scale = Tensor::from_vec(scale, (1, 1, oh, ow), x.device())?.to_dtype(x.dtype())?;
    Ok(padded.avg_pool2d(k)?.broadcast_mul(&scale)?)
}

/// `(B, N, C)` token sequence to a `(B, C, h, w)` map.
pub fn tokens_to_map(tokens: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, n, c) = tokens.dims3()?;
    if n != h * w {
        return Err(Error::Dimension(format!(
            "{n} tokens cannot form a {h}x{w} map"
        )));
    }
    Ok(tokens.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

/// `(B, C, h, w)` map to a `(B, h*w, C)` token sequence.
pub fn map_to_tokens(map: &Tensor) -> Result<Tensor> {
    Ok(map.flatten_from(2)?.transpose(1, 2)?.contiguous()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Errors with `what` in the message when any entry is NaN or infinite.
pub fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let v = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!(
            "{what} has a non-finite entry at flat index {i} ({})",
            v[i]
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(data.to_vec(), shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn bilinear_rows_sum_to_one() {
        for (o, i) in [(16, 2), (8, 4), (3, 7), (5, 5)] {
            let m = bilinear_weights(o, i);
            for r in 0..o {
                let s: f64 = m[r * i..(r + 1) * i].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_upsample_matches_half_pixel_reference() {
        // 1-D [0, 1] upsampled to 4 samples with half-pixel centers: src = -0.25, 0.25, 0.75, 1.25
        let x = t(&[0.0, 1.0], &[1, 1, 1, 2]);
        let y = resize_bilinear(&x, 1, 4).unwrap();
        let v = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(v, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn ceil_pool_averages_partial_windows() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0], &[1, 1, 3, 3]);
        let y = avg_pool_ceil(&x, 2).unwrap();
        let v = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(v, vec![3.0, 4.5, 7.5, 9.0]);
    }

    #[test]
    fn depthwise_matches_grouped_conv() {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f64, 1.0, (2, 3, 5, 4), &dev).unwrap();
        let w = Tensor::randn(0f64, 1.0, (3, 3, 3), &dev).unwrap();
        let ours = depthwise_conv3x3(&x, &w, None).unwrap();
        let reference = x.conv2d(&w.reshape((3, 1, 3, 3)).unwrap(), 1, 1, 1, 3).unwrap();
        let diff = (ours - reference).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);
    }

    #[test]
    fn patch_conv_matches_strided_conv() {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f64, 1.0, (2, 3, 9, 8), &dev).unwrap();
        let w = Tensor::randn(0f64, 1.0, (5, 3, 4, 4), &dev).unwrap();
        let ours = conv2d(&x, &w, None, 4, 0).unwrap();
        let reference = x.conv2d(&w, 0, 4, 1, 1).unwrap();
        assert_eq!(ours.dims(), reference.dims());
        let diff = (ours - reference).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);
    }

    #[test]
    fn im2col_conv_matches_candle_conv() {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f64, 1.0, (2, 3, 9, 8), &dev).unwrap();
        for (k, stride, pad) in [(7, 4, 3), (3, 2, 1), (3, 1, 0)] {
            let w = Tensor::randn(0f64, 1.0, (5, 3, k, k), &dev).unwrap();
            let ours = conv2d(&x, &w, None, stride, pad).unwrap();
            let reference = x.conv2d(&w, pad, stride, 1, 1).unwrap();
            assert_eq!(ours.dims(), reference.dims());
            let diff = (ours - reference).unwrap().abs().unwrap().max_all().unwrap();
            assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);
        }
    }

    #[test]
    fn token_map_round_trip() {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f32, 1.0, (2, 12, 5), &dev).unwrap();
        let back = map_to_tokens(&tokens_to_map(&x, 3, 4).unwrap()).unwrap();
        let a = x.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = back.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
        assert!(tokens_to_map(&x, 3, 3).is_err());
    }

    #[test]
    fn log_softmax_is_stable_for_large_logits() {
        let x = t(&[1e4, 0.0], &[1, 2]);
        let v = log_softmax(&x, 1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], -1e4);
    }
}
