//! Model dimensions and architectural switches.

use serde::{Deserialize, Serialize};

use crate::audio::MelConfig;
use crate::error::{Error, Result};

/// Stand-in for motion content before any frame has been generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstPassContent {
    /// Motion content encoded from the neutral template repeated over time.
    Template,
    /// Audio content, which the alignment losses pull towards motion content.
    Audio,
}

/// Inference schedule for re-encoding motion style and content.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionRefresh {
    /// One rollout with the first-pass style and content.
    Never,
    /// Re-encode from a full first rollout, then decode again.
    SecondPass,
    /// Re-encode from the generated prefix every this many frames.
    Every(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Width `D_g` of the graph attention features.
    pub gat_width: usize,
    pub gat_layers: usize,
    /// `D_s`, shared by audio, motion and identity style codes.
    pub style_dim: usize,
    /// `D_a`, audio content width.
    pub audio_content_dim: usize,
    /// `D_m`, motion content width.
    pub motion_content_dim: usize,
    /// Hidden width of the encoder transformers.
    pub model_dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub ff_mult: usize,
    pub decoder_dim: usize,
    pub decoder_heads: usize,
    pub decoder_layers: usize,
    pub mel: MelConfig,
    pub frontend_channels: usize,
    pub frontend_layers: usize,
    pub conv_kernel: usize,
    pub style_conv_layers: usize,
    pub content_conv_layers: usize,
    pub classifier_hidden: usize,
    /// Period of the decoder's positional encoding and biased mask.
    pub period: usize,
    /// Penalty per period of distance in the causal self-attention bias.
    pub self_bias_slope: f64,
    /// Linear penalty per frame of misalignment in cross-attention; 0 disables.
    pub align_slope: f64,
    /// When inference re-encodes motion style and content from generated frames.
    pub refresh: MotionRefresh,
    /// Motion content the first inference pass decodes from.
    pub first_pass_content: FirstPassContent,
    /// Multiplier applied to vertex displacements (mm) before they enter the
    /// networks; decoder outputs are divided by it.
    pub displacement_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            gat_width: 64,
            gat_layers: 2,
            style_dim: 64,
            audio_content_dim: 64,
            motion_content_dim: 64,
            model_dim: 64,
            heads: 4,
            encoder_layers: 2,
            ff_mult: 4,
            decoder_dim: 64,
            decoder_heads: 4,
            decoder_layers: 2,
            mel: MelConfig::default(),
            frontend_channels: 64,
            frontend_layers: 2,
            conv_kernel: 3,
            style_conv_layers: 2,
            content_conv_layers: 2,
            classifier_hidden: 64,
            period: 25,
            self_bias_slope: 1.0,
            align_slope: 0.1,
            refresh: MotionRefresh::SecondPass,
            first_pass_content: FirstPassContent::Audio,
            displacement_scale: 1.0,
        }
    }
}

fn positive(value: usize, field: &str) -> Result<()> {
    if value == 0 {
        Err(Error::Config(format!("model.{field} must be positive")))
    } else {
        Ok(())
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (v, f) in [
            (self.gat_width, "gat_width"),
            (self.gat_layers, "gat_layers"),
            (self.style_dim, "style_dim"),
            (self.audio_content_dim, "audio_content_dim"),
            (self.motion_content_dim, "motion_content_dim"),
            (self.model_dim, "model_dim"),
            (self.heads, "heads"),
            (self.ff_mult, "ff_mult"),
            (self.decoder_dim, "decoder_dim"),
            (self.decoder_heads, "decoder_heads"),
            (self.decoder_layers, "decoder_layers"),
            (self.frontend_channels, "frontend_channels"),
            (self.frontend_layers, "frontend_layers"),
            (self.conv_kernel, "conv_kernel"),
            (self.style_conv_layers, "style_conv_layers"),
            (self.content_conv_layers, "content_conv_layers"),
            (self.classifier_hidden, "classifier_hidden"),
            (self.period, "period"),
        ] {
            positive(v, f)?;
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::Config("model.conv_kernel must be odd".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config("model.model_dim must be divisible by model.heads".into()));
        }
        if self.decoder_dim % self.decoder_heads != 0 {
            return Err(Error::Config(
                "model.decoder_dim must be divisible by model.decoder_heads".into(),
            ));
        }
        // Contrastive, KL and cross-attention terms compare audio and motion
        // content directly; the cosine-based style/content terms compare
        // content with style codes.
        if self.audio_content_dim != self.motion_content_dim {
            return Err(Error::Config(
                "model.audio_content_dim must equal model.motion_content_dim".into(),
            ));
        }
        if self.style_dim != self.motion_content_dim {
            return Err(Error::Config("model.style_dim must equal the content width".into()));
        }
        if !(self.align_slope >= 0.0 && self.align_slope.is_finite()) {
            return Err(Error::Config("model.align_slope must be finite and >= 0".into()));
        }
        if !(self.self_bias_slope >= 0.0 && self.self_bias_slope.is_finite()) {
            return Err(Error::Config("model.self_bias_slope must be finite and >= 0".into()));
        }
        if !(self.displacement_scale > 0.0 && self.displacement_scale.is_finite()) {
            return Err(Error::Config("model.displacement_scale must be positive".into()));
        }
        if self.refresh == MotionRefresh::Every(0) {
            return Err(Error::Config("model.refresh.every must be positive".into()));
        }
        Ok(())
    }

    /// The configuration with inference-only settings reset, so they do not
    /// affect checkpoint compatibility.
    pub fn architecture(&self) -> Self {
        let d = Self::default();
        Self {
            refresh: d.refresh,
            first_pass_content: d.first_pass_content,
            ..self.clone()
        }
    }

    /// A reduced configuration with every width set to `width` and single
    /// transformer layers.
    pub fn small(width: usize) -> Self {
        Self {
            gat_width: width / 2,
            style_dim: width,
            audio_content_dim: width,
            motion_content_dim: width,
            model_dim: width,
            heads: 2,
            encoder_layers: 1,
            ff_mult: 2,
            decoder_dim: width,
            decoder_heads: 2,
            decoder_layers: 1,
            frontend_channels: width,
            classifier_hidden: width,
            ..Self::default()
        }
    }

    /// Shortest motion window the temporal convolution stacks accept.
    pub fn min_motion_frames(&self) -> usize {
        self.conv_kernel
    }
}

/// Which optional branches of the network exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelVariant {
    pub graph_encoder: bool,
    pub audio_style: bool,
    pub motion_style: bool,
}

impl Default for ModelVariant {
    fn default() -> Self {
        Self {
            graph_encoder: true,
            audio_style: true,
            motion_style: true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn mismatched_widths_are_rejected() {
        let cfg = ModelConfig {
            audio_content_dim: 32,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            heads: 3,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
