//! Small neural-network building blocks on top of candle tensors.

use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};
use crate::ops;
use crate::params::{Init, ParamBuilder};

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = pb.tensor(
            "weight",
            (in_dim, out_dim),
            Init::Xavier {
                fan_in: in_dim,
                fan_out: out_dim,
            },
        )?;
        let bias = Some(pb.tensor("bias", out_dim, Init::Zeros)?);
        Ok(Self { weight, bias })
    }

    pub fn no_bias(pb: &mut ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = pb.tensor(
            "weight",
            (in_dim, out_dim),
            Init::Xavier {
                fan_in: in_dim,
                fan_out: out_dim,
            },
        )?;
        Ok(Self { weight, bias: None })
    }

    /// A linear map whose weights start at zero.
    pub fn zeroed(pb: &mut ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = pb.tensor("weight", (in_dim, out_dim), Init::Zeros)?;
        let bias = Some(pb.tensor("bias", out_dim, Init::Zeros)?);
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    const EPS: f64 = 1e-5;

    pub fn new(pb: &mut ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.tensor("gamma", dim, Init::Ones)?,
            beta: pb.tensor("beta", dim, Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&var.affine(1.0, Self::EPS)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Multi-head scaled dot-product attention with an optional additive bias.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(pb: &mut ParamBuilder, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "model width {dim} is not divisible by head count {heads}"
            )));
        }
        Ok(Self {
            q: Linear::new(&mut pb.pp("q"), dim, dim)?,
            k: Linear::new(&mut pb.pp("k"), dim, dim)?,
            v: Linear::new(&mut pb.pp("v"), dim, dim)?,
            o: Linear::new(&mut pb.pp("o"), dim, dim)?,
            heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        Ok(x.reshape((b, t, self.heads, d / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `query` is `(B, Tq, D)`, `memory` is `(B, Tk, D)`; `bias` broadcasts
    /// against `(Tq, Tk)`.
    pub fn forward(&self, query: &Tensor, memory: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (b, tq, d) = query.dims3()?;
        let q = self.split_heads(&self.q.forward(query)?)?;
        let k = self.split_heads(&self.k.forward(memory)?)?;
        let v = self.split_heads(&self.v.forward(memory)?)?;
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let mut scores = q.matmul(&k.t()?.contiguous()?)?.affine(scale, 0.0)?;
        if let Some(bias) = bias {
            scores = scores.broadcast_add(bias)?;
        }
        let attn = ops::softmax_last(&scores)?;
        let ctx = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, tq, d))?;
        self.o.forward(&ctx)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(pb: &mut ParamBuilder, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(&mut pb.pp("up"), dim, hidden)?,
            down: Linear::new(&mut pb.pp("down"), hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.gelu()?)
    }
}

/// Pre-norm transformer encoder layer.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    ff: FeedForward,
}

impl EncoderLayer {
    pub fn new(pb: &mut ParamBuilder, dim: usize, heads: usize, ff_mult: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&mut pb.pp("norm1"), dim)?,
            attn: MultiHeadAttention::new(&mut pb.pp("attn"), dim, heads)?,
            norm2: LayerNorm::new(&mut pb.pp("norm2"), dim)?,
            ff: FeedForward::new(&mut pb.pp("ff"), dim, dim * ff_mult)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h, None)?)?;
        let h = self.norm2.forward(&x)?;
        Ok((&x + self.ff.forward(&h)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    layers: Vec<EncoderLayer>,
    norm: LayerNorm,
}

impl TransformerEncoder {
    pub fn new(pb: &mut ParamBuilder, dim: usize, heads: usize, layers: usize, ff_mult: usize) -> Result<Self> {
        let layers = (0..layers)
            .map(|i| EncoderLayer::new(&mut pb.pp(&format!("layer{i}")), dim, heads, ff_mult))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            norm: LayerNorm::new(&mut pb.pp("norm"), dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h)?;
        }
        self.norm.forward(&h)
    }
}

/// 1D convolution over time with edge-replicating "same" padding.
///
/// Replicate padding keeps constant signals constant, which the pooling and
/// normalization contracts of the encoders depend on.
#[derive(Debug, Clone)]
pub struct TemporalConv {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
}

impl TemporalConv {
    pub fn new(pb: &mut ParamBuilder, in_ch: usize, out_ch: usize, kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("temporal kernel size must be odd, got {kernel}")));
        }
        let weight = pb.tensor(
            "weight",
            (out_ch, in_ch, kernel),
            Init::Xavier {
                fan_in: in_ch * kernel,
                fan_out: out_ch * kernel,
            },
        )?;
        let bias = pb.tensor("bias", out_ch, Init::Zeros)?;
        Ok(Self { weight, bias, kernel })
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    /// `x` is `(B, C_in, T)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let pad = self.kernel / 2;
        let padded = ops::replicate_pad_time(x, pad, pad)?;
        let y = ops::conv1d_valid(&padded, &self.weight)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1))?)?)
    }
}

/// Standard sinusoidal encoding of a single position.
pub fn sinusoid(position: f64, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let pair = (i / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * pair / dim as f64);
            if i % 2 == 0 {
                (position * freq).sin()
            } else {
                (position * freq).cos()
            }
        })
        .collect()
}

/// `(T, dim)` table of sinusoidal encodings for positions `0..T`.
pub fn sinusoidal_table(len: usize, dim: usize, dtype: DType) -> Result<Tensor> {
    let values = (0..len).flat_map(|t| sinusoid(t as f64, dim)).collect();
    ops::from_f64(values, (len, dim), dtype)
}
