use candle_core::Tensor;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_table, Linear, TemporalConv, TransformerEncoder};
use crate::ops;
use crate::params::ParamBuilder;

const CONV_SLOPE: f64 = 0.2;

/// Temporal convolutions over `(B, C, T)`, each followed by an optional
/// instance normalization and a leaky rectifier.
#[derive(Debug, Clone)]
pub struct ConvStack {
    convs: Vec<TemporalConv>,
    instance_norm: bool,
}

impl ConvStack {
    pub fn new(
        pb: &mut ParamBuilder,
        in_ch: usize,
        channels: usize,
        layers: usize,
        kernel: usize,
        instance_norm: bool,
    ) -> Result<Self> {
        let convs = (0..layers)
            .map(|i| {
                TemporalConv::new(
                    &mut pb.pp(&format!("conv{i}")),
                    if i == 0 { in_ch } else { channels },
                    channels,
                    kernel,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { convs, instance_norm })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_traced(x)?.0)
    }

    /// Also returns every instance-normalization output.
    pub fn forward_traced(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut h = x.clone();
        let mut normalized = Vec::new();
        for conv in &self.convs {
            h = conv.forward(&h)?;
            if self.instance_norm {
                h = ops::instance_norm(&h)?;
                normalized.push(h.clone());
            }
            h = ops::leaky_relu(&h, CONV_SLOPE)?;
        }
        Ok((h, normalized))
    }

    /// First convolution followed by its normalization, the unit whose
    /// output is invariant to constant input offsets.
    pub fn first_normalized_block(&self, x: &Tensor) -> Result<Tensor> {
        let conv = self
            .convs
            .first()
            .ok_or_else(|| Error::Config("empty convolution stack".into()))?;
        ops::instance_norm(&conv.forward(x)?)
    }
}

fn check_frames(g: &Tensor, min: usize) -> Result<(usize, usize, usize)> {
    let (b, t, d) = g.dims3()?;
    if t < min {
        return Err(Error::Input(format!(
            "motion window of {t} frames is shorter than the {min}-frame minimum"
        )));
    }
    Ok((b, t, d))
}

/// Motion style encoder: projection, temporal convolutions producing style
/// tokens, a transformer, then temporal mean pooling.
#[derive(Debug, Clone)]
pub struct MotionStyleEncoder {
    down: Linear,
    tcn: ConvStack,
    transformer: TransformerEncoder,
    out: Linear,
    min_frames: usize,
}

impl MotionStyleEncoder {
    pub fn new(pb: &mut ParamBuilder, in_dim: usize, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.model_dim;
        Ok(Self {
            down: Linear::new(&mut pb.pp("down"), in_dim, d)?,
            tcn: ConvStack::new(&mut pb.pp("tcn"), d, d, cfg.style_conv_layers, cfg.conv_kernel, false)?,
            transformer: TransformerEncoder::new(&mut pb.pp("transformer"), d, cfg.heads, cfg.encoder_layers, cfg.ff_mult)?,
            out: Linear::new(&mut pb.pp("out"), d, cfg.style_dim)?,
            min_frames: cfg.min_motion_frames(),
        })
    }

    /// `g` is `(B, T, N_v * D_g)`. Returns the per-frame style tokens
    /// `(B, T, D_s)` and the pooled code `(B, D_s)`.
    pub fn forward(&self, g: &Tensor) -> Result<(Tensor, Tensor)> {
        check_frames(g, self.min_frames)?;
        let h = self.down.forward(g)?.transpose(1, 2)?.contiguous()?;
        let h = self.tcn.forward(&h)?.transpose(1, 2)?.contiguous()?;
        let tokens = self.out.forward(&self.transformer.forward(&h)?)?;
        let pooled = tokens.mean(1)?;
        Ok((tokens, pooled))
    }
}

/// Intermediate values of the motion content encoder.
#[derive(Debug, Clone)]
pub struct MotionContentTrace {
    pub content: Tensor,
    pub normalized: Vec<Tensor>,
}

/// Motion content encoder: projection, instance-normalized convolutions,
/// positional encoding, transformer and a final linear map.
#[derive(Debug, Clone)]
pub struct MotionContentEncoder {
    down: Linear,
    convs: ConvStack,
    hidden: Linear,
    transformer: TransformerEncoder,
    out: Linear,
    min_frames: usize,
}

impl MotionContentEncoder {
    pub fn new(pb: &mut ParamBuilder, in_dim: usize, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.model_dim;
        Ok(Self {
            down: Linear::new(&mut pb.pp("down"), in_dim, d)?,
            convs: ConvStack::new(&mut pb.pp("convs"), d, d, cfg.content_conv_layers, cfg.conv_kernel, true)?,
            hidden: Linear::new(&mut pb.pp("hidden"), d, d)?,
            transformer: TransformerEncoder::new(&mut pb.pp("transformer"), d, cfg.heads, cfg.encoder_layers, cfg.ff_mult)?,
            out: Linear::new(&mut pb.pp("out"), d, cfg.motion_content_dim)?,
            min_frames: cfg.min_motion_frames(),
        })
    }

    /// `g` is `(B, T, N_v * D_g)`; returns `c` of shape `(B, T, D_m)`.
    pub fn forward(&self, g: &Tensor) -> Result<Tensor> {
        Ok(self.forward_traced(g)?.content)
    }

    pub fn forward_traced(&self, g: &Tensor) -> Result<MotionContentTrace> {
        let (_, t, _) = check_frames(g, self.min_frames)?;
        let h = self.down.forward(g)?.transpose(1, 2)?.contiguous()?;
        let (h, normalized) = self.convs.forward_traced(&h)?;
        let h = self.hidden.forward(&h.transpose(1, 2)?.contiguous()?)?;
        let pe = sinusoidal_table(t, h.dim(2)?, h.dtype())?;
        let h = h.broadcast_add(&pe)?;
        let content = self.out.forward(&self.transformer.forward(&h)?)?;
        Ok(MotionContentTrace { content, normalized })
    }

    /// The projection followed by the first conv + instance-norm block.
    pub fn normalization_block(&self, g: &Tensor) -> Result<Tensor> {
        let h = self.down.forward(g)?.transpose(1, 2)?.contiguous()?;
        self.convs.first_normalized_block(&h)
    }

    pub fn conv_stack(&self) -> &ConvStack {
        &self.convs
    }
}
