use std::sync::Arc;

use candle_core::Tensor;

use super::motion::ConvStack;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_table, Linear, TransformerEncoder};
use crate::ops;
use crate::params::ParamBuilder;

/// Learned speech feature extractor on top of log-mel frames.
///
/// Anything that maps `(B, F, n_mels)` log-mel frames to `(B, T, D_f)`
/// features can stand in for the shipped convolutional stack.
pub trait SpeechFrontend: std::fmt::Debug + Send + Sync {
    fn out_dim(&self) -> usize;

    /// With `target_frames`, the output is resampled to exactly that many
    /// frames; otherwise it keeps the mel frame rate.
    fn forward(&self, mel: &Tensor, target_frames: Option<usize>) -> Result<Tensor>;
}

/// Temporal convolutions over log-mel frames followed by linear
/// interpolation onto the motion frame grid.
#[derive(Debug, Clone)]
pub struct ConvFrontend {
    convs: ConvStack,
    channels: usize,
}

impl ConvFrontend {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            convs: ConvStack::new(
                &mut pb.pp("convs"),
                cfg.mel.n_mels,
                cfg.frontend_channels,
                cfg.frontend_layers,
                cfg.conv_kernel,
                false,
            )?,
            channels: cfg.frontend_channels,
        })
    }
}

impl SpeechFrontend for ConvFrontend {
    fn out_dim(&self) -> usize {
        self.channels
    }

    fn forward(&self, mel: &Tensor, target_frames: Option<usize>) -> Result<Tensor> {
        let (_, frames, _) = mel.dims3()?;
        if frames == 0 {
            return Err(Error::Input("no mel frames".into()));
        }
        let h = self.convs.forward(&mel.transpose(1, 2)?.contiguous()?)?;
        let h = match target_frames {
            Some(0) => return Err(Error::Input("target frame count must be positive".into())),
            Some(t) => {
                let interp = ops::from_f64(ops::interpolation_matrix(frames, t), (frames, t), h.dtype())?;
                h.broadcast_matmul(&interp)?
            }
            None => h,
        };
        Ok(h.transpose(1, 2)?.contiguous()?)
    }
}

/// Audio content encoder producing frame-aligned `a_{1:T}`.
#[derive(Debug, Clone)]
pub struct AudioContentEncoder {
    frontend: Arc<dyn SpeechFrontend>,
    proj_in: Linear,
    transformer: TransformerEncoder,
    out: Linear,
}

impl AudioContentEncoder {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let frontend: Arc<dyn SpeechFrontend> = Arc::new(ConvFrontend::new(&mut pb.pp("frontend"), cfg)?);
        Self::with_frontend(pb, cfg, frontend)
    }

    pub fn with_frontend(pb: &mut ParamBuilder, cfg: &ModelConfig, frontend: Arc<dyn SpeechFrontend>) -> Result<Self> {
        let d = cfg.model_dim;
        Ok(Self {
            proj_in: Linear::new(&mut pb.pp("proj_in"), frontend.out_dim(), d)?,
            transformer: TransformerEncoder::new(&mut pb.pp("transformer"), d, cfg.heads, cfg.encoder_layers, cfg.ff_mult)?,
            out: Linear::new(&mut pb.pp("out"), d, cfg.audio_content_dim)?,
            frontend,
        })
    }

    pub fn frontend(&self) -> &dyn SpeechFrontend {
        self.frontend.as_ref()
    }

    /// `mel` is `(B, F, n_mels)`; returns `(B, T, D_a)`.
    pub fn forward(&self, mel: &Tensor, target_frames: usize) -> Result<Tensor> {
        let h = self.proj_in.forward(&self.frontend.forward(mel, Some(target_frames))?)?;
        let pe = sinusoidal_table(target_frames, h.dim(2)?, h.dtype())?;
        let h = h.broadcast_add(&pe)?;
        self.out.forward(&self.transformer.forward(&h)?)
    }
}

/// Audio style encoder: a speaker branch and an affect branch, each
/// temporally pooled, concatenated and projected to `D_s`.
#[derive(Debug, Clone)]
pub struct AudioStyleEncoder {
    speaker: ConvFrontend,
    affect: ConvFrontend,
    proj: Linear,
}

impl AudioStyleEncoder {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let speaker = ConvFrontend::new(&mut pb.pp("speaker"), cfg)?;
        let affect = ConvFrontend::new(&mut pb.pp("affect"), cfg)?;
        let proj = Linear::new(&mut pb.pp("proj"), speaker.out_dim() + affect.out_dim(), cfg.style_dim)?;
        Ok(Self { speaker, affect, proj })
    }

    /// `mel` is `(B, F, n_mels)`. Returns per-frame style tokens `(B, F, D_s)`
    /// and `s_a` of shape `(B, D_s)`, the temporal mean of the tokens.
    pub fn forward(&self, mel: &Tensor) -> Result<(Tensor, Tensor)> {
        let speaker = self.speaker.forward(mel, None)?;
        let affect = self.affect.forward(mel, None)?;
        let tokens = self.proj.forward(&Tensor::cat(&[speaker, affect], 2)?)?;
        let pooled = tokens.mean(1)?;
        Ok((tokens, pooled))
    }
}
