//! Differentiable tensor helpers shared by the encoders, decoder and losses.

use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor, D};

use crate::error::{Error, Result};

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => Err(candle_core::Error::RequiresContiguous { op: "custom-op" }),
    }
}

fn map_storage(
    storage: &CpuStorage,
    layout: &Layout,
    f32_fn: impl Fn(f32) -> f32,
    f64_fn: impl Fn(f64) -> f64,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let shape = layout.shape().clone();
    let out = match storage {
        CpuStorage::F32(data) => {
            CpuStorage::F32(contiguous_slice(data, layout)?.iter().map(|&v| f32_fn(v)).collect())
        }
        CpuStorage::F64(data) => {
            CpuStorage::F64(contiguous_slice(data, layout)?.iter().map(|&v| f64_fn(v)).collect())
        }
        _ => {
            return Err(candle_core::Error::Msg("custom ops support f32 and f64 only".into()));
        }
    };
    Ok((out, shape))
}

/// Gradient reversal: identity forward, gradient scaled by `-alpha` backward.
struct GradientReversal {
    alpha: f64,
}

impl CustomOp1 for GradientReversal {
    fn name(&self) -> &'static str {
        "gradient-reversal"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        map_storage(storage, layout, |v| v, |v| v)
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.affine(-self.alpha, 0.0)?))
    }
}

/// Square root whose derivative is taken as zero at the origin, so that
/// Euclidean norms of exactly-zero residuals do not poison the backward pass.
struct SafeSqrt;

impl CustomOp1 for SafeSqrt {
    fn name(&self) -> &'static str {
        "safe-sqrt"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        map_storage(storage, layout, |v| v.max(0.0).sqrt(), |v| v.max(0.0).sqrt())
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let positive = res.gt(0.0)?;
        let denom = positive.where_cond(res, &res.ones_like()?)?;
        let scale = positive.where_cond(&denom.recip()?.affine(0.5, 0.0)?, &res.zeros_like()?)?;
        Ok(Some(grad_res.mul(&scale)?))
    }
}

/// Gradient reversal layer with strength `alpha`.
pub fn grl(x: &Tensor, alpha: f64) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(GradientReversal { alpha })?)
}

pub fn safe_sqrt(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(SafeSqrt)?)
}

/// Euclidean norm over the last dimension.
pub fn norm_last(x: &Tensor) -> Result<Tensor> {
    safe_sqrt(&x.sqr()?.sum(D::Minus1)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&x.affine(slope, 0.0)?)?)
}

/// Numerically stable softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Row-wise log-sum-exp over the last dimension, keeping the dimension.
pub fn logsumexp_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let lse = x.broadcast_sub(&max)?.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(lse.broadcast_add(&max)?)
}

/// Cosine similarity between matching rows of `u` and `v` (shape `(.., D)`).
/// The norm product is floored at `eps`.
pub fn cosine_rows(u: &Tensor, v: &Tensor, eps: f64) -> Result<Tensor> {
    let dot = (u * v)?.sum(D::Minus1)?;
    let denom = (norm_last(u)? * norm_last(v)?)?.maximum(eps)?;
    Ok((dot / denom)?)
}

/// All-pairs cosine similarity: `u` is `(B, D)`, `v` is `(B', D)`, result `(B, B')`.
pub fn cosine_matrix(u: &Tensor, v: &Tensor, eps: f64) -> Result<Tensor> {
    let dots = u.matmul(&v.t()?)?;
    let nu = norm_last(u)?.unsqueeze(1)?;
    let nv = norm_last(v)?.unsqueeze(0)?;
    let denom = nu.broadcast_mul(&nv)?.maximum(eps)?;
    Ok((dots / denom)?)
}

/// Pads `(B, C, T)` along time by repeating the first and last frames.
pub fn replicate_pad_time(x: &Tensor, left: usize, right: usize) -> Result<Tensor> {
    if left == 0 && right == 0 {
        return Ok(x.clone());
    }
    let t = x.dim(2)?;
    let mut parts = Vec::with_capacity(3);
    if left > 0 {
        parts.push(x.narrow(2, 0, 1)?.repeat((1, 1, left))?);
    }
    parts.push(x.clone());
    if right > 0 {
        parts.push(x.narrow(2, t - 1, 1)?.repeat((1, 1, right))?);
    }
    Ok(Tensor::cat(&parts, 2)?)
}

/// Unpadded stride-1 convolution of `(B, C_in, T)` with `(C_out, C_in, K)`
/// weights, giving `(B, C_out, T - K + 1)`. Built from slicing and a matrix
/// product; the backend's native `conv1d` backward is incorrect on CPU.
pub fn conv1d_valid(x: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (_, c_in, t) = x.dims3()?;
    let (c_out, wc, k) = weight.dims3()?;
    if wc != c_in {
        return Err(Error::Config(format!("convolution expects {wc} input channels, got {c_in}")));
    }
    if t < k {
        return Err(Error::Input(format!("{t} frames are shorter than the {k}-tap kernel")));
    }
    let out = t - k + 1;
    let taps = (0..k).map(|j| x.narrow(2, j, out)).collect::<candle_core::Result<Vec<_>>>()?;
    let columns = Tensor::stack(&taps, 2)?.reshape(((), c_in * k, out))?;
    Ok(weight.reshape((c_out, c_in * k))?.broadcast_matmul(&columns)?)
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Instance normalization of `(B, C, T)` over time, without affine parameters.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(2)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(2)?;
    Ok(centered.broadcast_div(&var.affine(1.0, INSTANCE_NORM_EPS)?.sqrt()?)?)
}

/// Builds a tensor of the given dtype from f64 values.
pub fn from_f64(values: Vec<f64>, shape: impl Into<Shape>, dtype: DType) -> Result<Tensor> {
    let t = Tensor::from_vec(values, shape, &candle_core::Device::Cpu)?;
    Ok(if dtype == DType::F64 { t } else { t.to_dtype(dtype)? })
}

/// Reads a scalar tensor as f64.
pub fn scalar(x: &Tensor) -> Result<f64> {
    Ok(x.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn to_vec_f64(x: &Tensor) -> Result<Vec<f64>> {
    Ok(x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

pub fn ensure_finite(x: &Tensor, what: &str) -> Result<()> {
    if to_vec_f64(x)?.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} contains non-finite values")))
    }
}

/// Linear interpolation matrix of shape `(src, dst)` mapping `src` samples
/// onto `dst` evenly spaced samples with aligned endpoints.
pub fn interpolation_matrix(src: usize, dst: usize) -> Vec<f64> {
    let mut m = vec![0.0; src * dst];
    for j in 0..dst {
        let pos = if dst == 1 || src == 1 {
            0.0
        } else {
            j as f64 * (src - 1) as f64 / (dst - 1) as f64
        };
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(src - 1);
        let frac = pos - lo as f64;
        m[lo * dst + j] += 1.0 - frac;
        if hi != lo {
            m[hi * dst + j] += frac;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn conv1d_valid_matches_loop() {
        let (b, ci, co, t, k) = (2, 3, 4, 7, 3);
        let xs: Vec<f64> = (0..b * ci * t).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
        let ws: Vec<f64> = (0..co * ci * k).map(|i| ((i * 17 % 7) as f64 - 3.0) / 2.0).collect();
        let x = from_f64(xs.clone(), (b, ci, t), DType::F64).unwrap();
        let w = from_f64(ws.clone(), (co, ci, k), DType::F64).unwrap();
        let y = to_vec_f64(&conv1d_valid(&x, &w).unwrap().flatten_all().unwrap()).unwrap();
        let out = t - k + 1;
        for bi in 0..b {
            for o in 0..co {
                for s in 0..out {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for j in 0..k {
                            acc += ws[(o * ci + c) * k + j] * xs[(bi * ci + c) * t + s + j];
                        }
                    }
                    assert!((y[(bi * co + o) * out + s] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn grl_forward_is_bit_exact_identity() {
        let x = Tensor::new(&[1.5f64, -2.25, 1e-300, 3.0e10], &Device::Cpu).unwrap();
        let y = grl(&x, 0.7).unwrap();
        assert_eq!(x.to_vec1::<f64>().unwrap(), y.to_vec1::<f64>().unwrap());
    }

    #[test]
    fn grl_backward_scales_by_negative_alpha() {
        let x = Var::new(&[1.0f64, 2.0, -3.0], &Device::Cpu).unwrap();
        let loss = grl(x.as_tensor(), 0.5).unwrap().sqr().unwrap().sum_all().unwrap();
        let g = loss.backward().unwrap();
        let gx = g.get(&x).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(gx, vec![-1.0, -2.0, 3.0]);
    }

    #[test]
    fn safe_sqrt_has_zero_gradient_at_origin() {
        let x = Var::new(&[0.0f64, 4.0], &Device::Cpu).unwrap();
        let loss = safe_sqrt(x.as_tensor()).unwrap().sum_all().unwrap();
        let g = loss.backward().unwrap();
        assert_eq!(g.get(&x).unwrap().to_vec1::<f64>().unwrap(), vec![0.0, 0.25]);
    }

    #[test]
    fn interpolation_preserves_constants_and_endpoints() {
        for (src, dst) in [(1, 5), (5, 1), (4, 9), (9, 4), (7, 7)] {
            let m = interpolation_matrix(src, dst);
            for j in 0..dst {
                let col: f64 = (0..src).map(|i| m[i * dst + j]).sum();
                assert!((col - 1.0).abs() < 1e-12);
            }
        }
        let m = interpolation_matrix(3, 3);
        for i in 0..3 {
            assert_eq!(m[i * 3 + i], 1.0);
        }
    }

    #[test]
    fn instance_norm_zero_mean_unit_variance() {
        let x = from_f64((0..24).map(|v| ((v * 7) % 11) as f64).collect(), (2, 3, 4), DType::F64).unwrap();
        let y = instance_norm(&x).unwrap();
        let mean = y.mean_keepdim(2).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let var = y.sqr().unwrap().mean_keepdim(2).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(mean.iter().all(|m| m.abs() < 1e-12));
        assert!(var.iter().all(|v| (v - 1.0).abs() < 1e-4));
    }
}
