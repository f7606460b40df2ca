//! The full network: graph encoder, style and content encoders, style
//! classifier and decoder, with training-time and inference-time passes.

use candle_core::{DType, Tensor};

use crate::config::{FirstPassContent, ModelConfig, ModelVariant, MotionRefresh};
use crate::decoder::{displacements, DecoderState, MotionDecoder};
use crate::encoders::{
    fuse_style_tensors, AudioContentEncoder, AudioStyleEncoder, IdentityEncoder, IdentityLabel, MotionContentEncoder,
    MotionStyleEncoder,
};
use crate::error::{Error, Result};
use crate::losses::StyleClassifier;
use crate::mesh::{GraphEncoder, GraphIndex, MeshTopology, MotionSequence, Template};
use crate::params::{ParamBuilder, ParamStore};

/// Parameter-name prefixes of the style encoders, frozen in stage one.
pub const STYLE_PREFIX: &str = "style.";

/// One training batch of equally long windows.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `(B, T, N_v, 3)` vertex positions.
    pub motion: Tensor,
    /// `(B, N_v, 3)` per-item neutral templates.
    pub templates: Tensor,
    /// `(B, F, n_mels)` log-mel frames covering the same time span.
    pub mel: Tensor,
    pub labels: Vec<IdentityLabel>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn frames(&self) -> Result<usize> {
        Ok(self.motion.dim(1)?)
    }
}

/// Everything the losses need from one training pass.
#[derive(Debug, Clone)]
pub struct ForwardOutputs {
    /// `(B, T, N_v, 3)` predicted vertex positions.
    pub prediction: Tensor,
    pub audio_content: Tensor,
    pub motion_content: Tensor,
    pub audio_style_tokens: Option<Tensor>,
    pub audio_style: Option<Tensor>,
    pub motion_style_tokens: Option<Tensor>,
    pub motion_style: Option<Tensor>,
    pub identity_style: Tensor,
    pub style: Tensor,
}

#[derive(Debug, Clone)]
pub struct TalkingHeadModel {
    config: ModelConfig,
    variant: ModelVariant,
    graph: GraphIndex,
    vertex_count: usize,
    graph_encoder: Option<GraphEncoder>,
    audio_style: Option<AudioStyleEncoder>,
    audio_content: AudioContentEncoder,
    motion_style: Option<MotionStyleEncoder>,
    motion_content: MotionContentEncoder,
    identity: IdentityEncoder,
    classifier: StyleClassifier,
    decoder: MotionDecoder,
}

impl TalkingHeadModel {
    /// Builds the network and registers its parameters in `pb` under the
    /// `graph.`, `style.`, `content.`, `classifier.` and `decoder.` prefixes.
    pub fn new(
        pb: &mut ParamBuilder,
        config: &ModelConfig,
        variant: ModelVariant,
        topology: &MeshTopology,
        identities: usize,
    ) -> Result<Self> {
        config.validate()?;
        let n = topology.vertex_count();
        let graph = GraphIndex::new(topology)?;
        let graph_encoder = if variant.graph_encoder {
            Some(GraphEncoder::new(&mut pb.pp("graph"), 3, config.gat_width, config.gat_layers)?)
        } else {
            None
        };
        let motion_in = n * if variant.graph_encoder { config.gat_width } else { 3 };
        let audio_style = if variant.audio_style {
            Some(AudioStyleEncoder::new(&mut pb.pp("style.audio"), config)?)
        } else {
            None
        };
        let motion_style = if variant.motion_style {
            Some(MotionStyleEncoder::new(&mut pb.pp("style.motion"), motion_in, config)?)
        } else {
            None
        };
        let identity = IdentityEncoder::new(&mut pb.pp("style.identity"), identities, config.style_dim)?;
        let audio_content = AudioContentEncoder::new(&mut pb.pp("content.audio"), config)?;
        let motion_content = MotionContentEncoder::new(&mut pb.pp("content.motion"), motion_in, config)?;
        let classifier = StyleClassifier::new(
            &mut pb.pp("classifier"),
            config.motion_content_dim,
            config.classifier_hidden,
            identities,
        )?;
        let decoder = MotionDecoder::new(&mut pb.pp("decoder"), config, n)?;
        Ok(Self {
            config: config.clone(),
            variant,
            graph,
            vertex_count: n,
            graph_encoder,
            audio_style,
            audio_content,
            motion_style,
            motion_content,
            identity,
            classifier,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> ModelVariant {
        self.variant
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn identities(&self) -> usize {
        self.identity.classes()
    }

    pub fn classifier(&self) -> &StyleClassifier {
        &self.classifier
    }

    pub fn decoder(&self) -> &MotionDecoder {
        &self.decoder
    }

    /// Per-vertex motion features `(B, T, N_v * D)` from vertex positions
    /// `(B, T, N_v, 3)` relative to `templates` `(B, N_v, 3)`.
    pub fn motion_features(&self, motion: &Tensor, templates: &Tensor) -> Result<Tensor> {
        let (b, t, n, c) = motion.dims4()?;
        if n != self.vertex_count {
            return Err(Error::Config(format!(
                "motion has {n} vertices, model expects {}",
                self.vertex_count
            )));
        }
        let disp = motion
            .broadcast_sub(&templates.unsqueeze(1)?)?
            .affine(self.config.displacement_scale, 0.0)?;
        match &self.graph_encoder {
            Some(enc) => {
                let g = enc.encode(&disp.reshape((b * t, n, c))?, &self.graph)?;
                Ok(g.reshape((b, t, n * enc.out_dim()))?)
            }
            None => Ok(disp.reshape((b, t, n * c))?),
        }
    }

    /// Teacher-forced training pass.
    pub fn forward(&self, batch: &Batch) -> Result<ForwardOutputs> {
        let t = batch.frames()?;
        let features = self.motion_features(&batch.motion, &batch.templates)?;
        let audio_content = self.audio_content.forward(&batch.mel, t)?;
        let motion_content = self.motion_content.forward(&features)?;
        let (audio_style_tokens, audio_style) = match &self.audio_style {
            Some(enc) => {
                let (tok, s) = enc.forward(&batch.mel)?;
                (Some(tok), Some(s))
            }
            None => (None, None),
        };
        let (motion_style_tokens, motion_style) = match &self.motion_style {
            Some(enc) => {
                let (tok, s) = enc.forward(&features)?;
                (Some(tok), Some(s))
            }
            None => (None, None),
        };
        let identity_style = self.identity.forward(&batch.labels)?;
        let style = fuse_style_tensors(&[audio_style.as_ref(), motion_style.as_ref(), Some(&identity_style)])?;
        let target = displacements(&batch.motion, &batch.templates.unsqueeze(1)?)?;
        let disp = self
            .decoder
            .forward_teacher(&target, &audio_content, &motion_content, &style)?;
        let (b, _, n, c) = batch.motion.dims4()?;
        let prediction = disp
            .reshape((b, t, n, c))?
            .broadcast_add(&batch.templates.unsqueeze(1)?)?;
        Ok(ForwardOutputs {
            prediction,
            audio_content,
            motion_content,
            audio_style_tokens,
            audio_style,
            motion_style_tokens,
            motion_style,
            identity_style,
            style,
        })
    }

    fn sequence_tensor(seq: &MotionSequence, dtype: DType) -> Result<Tensor> {
        Ok(seq.to_tensor(dtype)?.unsqueeze(0)?)
    }

    /// Motion style and content of a single sequence.
    fn encode_motion(&self, seq: &MotionSequence, template: &Tensor) -> Result<(Option<Tensor>, Tensor)> {
        let dtype = template.dtype();
        let features = self.motion_features(&Self::sequence_tensor(seq, dtype)?, template)?;
        let style = match &self.motion_style {
            Some(enc) => Some(enc.forward(&features)?.1),
            None => None,
        };
        Ok((style, self.motion_content.forward(&features)?))
    }

    /// Style codes `(1, D_s)` from the audio and identity branches only.
    pub fn audio_identity_style(&self, mel: &Tensor, label: IdentityLabel) -> Result<Tensor> {
        let audio = match &self.audio_style {
            Some(enc) => Some(enc.forward(mel)?.1),
            None => None,
        };
        let identity = self.identity.forward(&[label])?;
        fuse_style_tensors(&[audio.as_ref(), Some(&identity)])
    }

    /// Inference: generates `frames` frames from log-mel features `(1, F,
    /// n_mels)`. The first pass uses a zero motion style and the content
    /// chosen by `first_pass_content`; `refresh` decides whether motion style
    /// and content are re-encoded from generated frames. A `style_reference`
    /// fixes the motion style throughout.
    pub fn generate(
        &self,
        mel: &Tensor,
        label: IdentityLabel,
        template: &Template,
        frames: usize,
        fps: f32,
        style_reference: Option<&MotionSequence>,
    ) -> Result<MotionSequence> {
        if template.vertex_count() != self.vertex_count {
            return Err(Error::Config("template vertex count does not match the model".into()));
        }
        let min = self.config.min_motion_frames();
        if frames < min {
            return Err(Error::Input(format!("cannot generate fewer than {min} frames")));
        }
        let dtype = mel.dtype();
        let tpl = template.to_tensor(dtype)?.unsqueeze(0)?;
        let audio = self.audio_content.forward(mel, frames)?;
        let base_style = self.audio_identity_style(mel, label)?;

        let reference_style = match style_reference {
            Some(seq) if self.motion_style.is_some() => {
                if seq.vertex_count() != self.vertex_count || seq.len() < min {
                    return Err(Error::Input("style reference has the wrong shape".into()));
                }
                self.encode_motion(seq, &tpl)?.0
            }
            _ => None,
        };
        let style_from = |motion_style: Option<Tensor>| -> Result<Tensor> {
            match reference_style.as_ref().or(motion_style.as_ref()) {
                Some(s) => Ok((&base_style + s)?),
                None => Ok(base_style.clone()),
            }
        };

        let mut content = match self.config.first_pass_content {
            FirstPassContent::Template => self.encode_motion(&template.repeat(frames, fps)?, &tpl)?.1,
            FirstPassContent::Audio => audio.clone(),
        };
        let mut style = style_from(None)?;

        match self.config.refresh {
            MotionRefresh::Never => self.decoder.rollout(template, &audio, &content, &style, frames, fps),
            MotionRefresh::SecondPass => {
                let first = self.decoder.rollout(template, &audio, &content, &style, frames, fps)?;
                let (s, c) = self.encode_motion(&first, &tpl)?;
                content = c;
                style = style_from(s)?;
                self.decoder.rollout(template, &audio, &content, &style, frames, fps)
            }
            MotionRefresh::Every(every) => {
                let mut state = DecoderState::new(template.clone());
                for step in 0..frames {
                    if step > 0 && step % every == 0 {
                        let prefix = padded_prefix(&state, template, frames)?;
                        let (s, c) = self.encode_motion(&prefix, &tpl)?;
                        content = c;
                        style = style_from(s)?;
                    }
                    let frame = self.decoder.decode_step(&state, &audio, &content, &style, frames)?;
                    state.push(frame)?;
                }
                state.into_sequence(fps)
            }
        }
    }

    /// Temporally pooled content `(B, D)` of a batch, for probing.
    pub fn pooled_content(&self, batch: &Batch) -> Result<(Tensor, Tensor)> {
        let t = batch.frames()?;
        let features = self.motion_features(&batch.motion, &batch.templates)?;
        let c = self.motion_content.forward(&features)?.mean(1)?;
        let a = self.audio_content.forward(&batch.mel, t)?.mean(1)?;
        Ok((a, c))
    }

    /// Fused style codes `(B, D_s)` of a batch.
    pub fn fused_style(&self, batch: &Batch) -> Result<Tensor> {
        let features = self.motion_features(&batch.motion, &batch.templates)?;
        let audio = match &self.audio_style {
            Some(enc) => Some(enc.forward(&batch.mel)?.1),
            None => None,
        };
        let motion = match &self.motion_style {
            Some(enc) => Some(enc.forward(&features)?.1),
            None => None,
        };
        let identity = self.identity.forward(&batch.labels)?;
        fuse_style_tensors(&[audio.as_ref(), motion.as_ref(), Some(&identity)])
    }
}

/// Generated frames followed by template frames up to `frames`.
fn padded_prefix(state: &DecoderState, template: &Template, frames: usize) -> Result<MotionSequence> {
    let mut values: Vec<f32> = state.frames().iter().flatten().copied().collect();
    for _ in state.step()..frames {
        values.extend_from_slice(template.values());
    }
    MotionSequence::new(template.vertex_count(), 1.0, values)
}

/// Names of style-encoder parameters in `store`.
pub fn style_parameter_names(store: &ParamStore) -> Vec<String> {
    store.with_prefix(STYLE_PREFIX).map(|(n, _)| n.clone()).collect()
}
