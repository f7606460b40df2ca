//! Autoregressive transformer decoder producing vertex displacements from
//! style, motion content and audio content.

use candle_core::Tensor;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::mesh::{MotionSequence, Template};
use crate::nn::{sinusoid, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::ops;
use crate::params::{Init, ParamBuilder};

/// Sinusoidal encoding of `step mod period`.
pub fn periodic_positional_encoding(step: usize, period: usize, dim: usize) -> Vec<f64> {
    sinusoid((step % period.max(1)) as f64, dim)
}

/// Causal self-attention bias: `-inf` above the diagonal, otherwise minus the
/// number of whole periods between query and key.
pub fn biased_causal_mask(rows: usize, cols: usize, period: usize) -> Vec<f64> {
    let period = period.max(1);
    let mut m = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            m[i * cols + j] = if j > i {
                f64::NEG_INFINITY
            } else {
                -(((i - j) / period) as f64)
            };
        }
    }
    m
}

/// Cross-attention bias favouring keys near the proportionally aligned index
/// `floor(i * keys / queries)`; zero there, falling by `slope` per frame.
pub fn alignment_bias(queries: usize, keys: usize, slope: f64) -> Vec<f64> {
    let mut m = vec![0.0; queries * keys];
    if slope == 0.0 {
        return m;
    }
    for i in 0..queries {
        let aligned = (i * keys / queries.max(1)) as f64;
        for j in 0..keys {
            m[i * keys + j] = -slope * (j as f64 - aligned).abs();
        }
    }
    m
}

/// Source of the motion history during decoding.
#[derive(Debug, Clone, Copy)]
pub enum DecodeMode<'a> {
    TeacherForced(&'a MotionSequence),
    Inference,
}

/// Frames generated so far in an autoregressive rollout.
#[derive(Debug, Clone)]
pub struct DecoderState {
    template: Template,
    frames: Vec<Vec<f32>>,
}

impl DecoderState {
    pub fn new(template: Template) -> Self {
        Self {
            template,
            frames: Vec::new(),
        }
    }

    pub fn step(&self) -> usize {
        self.frames.len()
    }

    pub fn template(&self) -> &Template {
        &self.template
    }

    pub fn frames(&self) -> &[Vec<f32>] {
        &self.frames
    }

    pub fn push(&mut self, frame: Vec<f32>) -> Result<()> {
        if frame.len() != self.template.values().len() {
            return Err(Error::Input("frame size does not match the template".into()));
        }
        if frame.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("decoded frame is not finite".into()));
        }
        self.frames.push(frame);
        Ok(())
    }

    pub fn into_sequence(self, fps: f32) -> Result<MotionSequence> {
        let n = self.template.vertex_count();
        MotionSequence::new(n, fps, self.frames.into_iter().flatten().collect())
    }
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    norm1: LayerNorm,
    self_attn: MultiHeadAttention,
    norm2: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm3: LayerNorm,
    ff: FeedForward,
}

impl DecoderLayer {
    fn new(pb: &mut ParamBuilder, dim: usize, heads: usize, ff_mult: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&mut pb.pp("norm1"), dim)?,
            self_attn: MultiHeadAttention::new(&mut pb.pp("self_attn"), dim, heads)?,
            norm2: LayerNorm::new(&mut pb.pp("norm2"), dim)?,
            cross_attn: MultiHeadAttention::new(&mut pb.pp("cross_attn"), dim, heads)?,
            norm3: LayerNorm::new(&mut pb.pp("norm3"), dim)?,
            ff: FeedForward::new(&mut pb.pp("ff"), dim, dim * ff_mult)?,
        })
    }

    fn forward(&self, x: &Tensor, memory: &Tensor, self_bias: &Tensor, cross_bias: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(x)?;
        let x = (x + self.self_attn.forward(&h, &h, Some(self_bias))?)?;
        let h = self.norm2.forward(&x)?;
        let x = (&x + self.cross_attn.forward(&h, memory, Some(cross_bias))?)?;
        let h = self.norm3.forward(&x)?;
        Ok((&x + self.ff.forward(&h)?)?)
    }
}

/// Transformer decoder over motion tokens with cross-attention on the
/// concatenated audio and motion content.
#[derive(Debug, Clone)]
pub struct MotionDecoder {
    motion_in: Linear,
    style_in: Linear,
    audio_in: Linear,
    content_in: Linear,
    source_embedding: Tensor,
    layers: Vec<DecoderLayer>,
    norm: LayerNorm,
    out: Linear,
    dim: usize,
    period: usize,
    self_bias_slope: f64,
    align_slope: f64,
    displacement_scale: f64,
    vertex_count: usize,
}

impl MotionDecoder {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig, vertex_count: usize) -> Result<Self> {
        let d = cfg.decoder_dim;
        let layers = (0..cfg.decoder_layers)
            .map(|i| DecoderLayer::new(&mut pb.pp(&format!("layer{i}")), d, cfg.decoder_heads, cfg.ff_mult))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            motion_in: Linear::new(&mut pb.pp("motion_in"), vertex_count * 3, d)?,
            style_in: Linear::new(&mut pb.pp("style_in"), cfg.style_dim, d)?,
            audio_in: Linear::new(&mut pb.pp("audio_in"), cfg.audio_content_dim, d)?,
            content_in: Linear::new(&mut pb.pp("content_in"), cfg.motion_content_dim, d)?,
            source_embedding: pb.tensor("source_embedding", (2, d), Init::Uniform(0.1))?,
            layers,
            norm: LayerNorm::new(&mut pb.pp("norm"), d)?,
            out: Linear::zeroed(&mut pb.pp("out"), d, vertex_count * 3)?,
            dim: d,
            period: cfg.period,
            self_bias_slope: cfg.self_bias_slope,
            align_slope: cfg.align_slope,
            displacement_scale: cfg.displacement_scale,
            vertex_count,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    fn memory(&self, audio: &Tensor, content: &Tensor) -> Result<Tensor> {
        let a = self.audio_in.forward(audio)?.broadcast_add(&self.source_embedding.get(0)?)?;
        let c = self.content_in.forward(content)?.broadcast_add(&self.source_embedding.get(1)?)?;
        Ok(Tensor::cat(&[a, c], 1)?)
    }

    /// Decodes displacements for token positions `0..L`, where token 0 is the
    /// neutral face and token `t > 0` carries the displacement of frame
    /// `t - 1`.
    ///
    /// * `history` – `(B, L, N_v * 3)` token displacements in millimetres;
    /// * `audio` – `(B, T_a, D_a)`; `content` – `(B, T_c, D_m)`;
    /// * `style` – `(B, D_s)`;
    /// * `horizon` – total sequence length `T >= L`, which fixes the
    ///   alignment of queries to memory positions.
    ///
    /// Returns `(B, L, N_v * 3)` displacements in millimetres.
    pub fn forward(&self, history: &Tensor, audio: &Tensor, content: &Tensor, style: &Tensor, horizon: usize) -> Result<Tensor> {
        let (_, len, width) = history.dims3()?;
        if width != self.vertex_count * 3 {
            return Err(Error::Config(format!(
                "decoder expects {} values per frame, got {width}",
                self.vertex_count * 3
            )));
        }
        if len == 0 || len > horizon {
            return Err(Error::SequenceLength {
                step: len,
                available: horizon,
            });
        }
        let t_a = audio.dim(1)?;
        let t_c = content.dim(1)?;
        if t_a < horizon || t_c < horizon {
            return Err(Error::SequenceLength {
                step: horizon,
                available: t_a.min(t_c),
            });
        }
        let dtype = history.dtype();
        let scaled = history.affine(self.displacement_scale, 0.0)?;
        let pe: Vec<f64> = (0..len)
            .flat_map(|t| periodic_positional_encoding(t, self.period, self.dim))
            .collect();
        let pe = ops::from_f64(pe, (len, self.dim), dtype)?;
        let style = self.style_in.forward(style)?.unsqueeze(1)?;
        let mut x = self.motion_in.forward(&scaled)?.broadcast_add(&style)?.broadcast_add(&pe)?;

        let self_bias: Vec<f64> = biased_causal_mask(len, len, self.period)
            .into_iter()
            .map(|v| if v.is_finite() { v * self.self_bias_slope } else { v })
            .collect();
        let self_bias = ops::from_f64(self_bias, (len, len), dtype)?;
        let audio_bias = alignment_bias(horizon, t_a, self.align_slope);
        let content_bias = alignment_bias(horizon, t_c, self.align_slope);
        let mut cross = Vec::with_capacity(len * (t_a + t_c));
        for i in 0..len {
            cross.extend_from_slice(&audio_bias[i * t_a..(i + 1) * t_a]);
            cross.extend_from_slice(&content_bias[i * t_c..(i + 1) * t_c]);
        }
        let cross_bias = ops::from_f64(cross, (len, t_a + t_c), dtype)?;

        let memory = self.memory(audio, content)?;
        for layer in &self.layers {
            x = layer.forward(&x, &memory, &self_bias, &cross_bias)?;
        }
        let out = self.out.forward(&self.norm.forward(&x)?)?;
        Ok(out.affine(1.0 / self.displacement_scale, 0.0)?)
    }

    /// Teacher-forced decoding: ground-truth displacements `(B, T, N_v * 3)`
    /// shifted right by one frame behind a neutral token.
    pub fn forward_teacher(&self, target: &Tensor, audio: &Tensor, content: &Tensor, style: &Tensor) -> Result<Tensor> {
        let (b, t, w) = target.dims3()?;
        let start = Tensor::zeros((b, 1, w), target.dtype(), target.device())?;
        let history = if t > 1 {
            Tensor::cat(&[&start, &target.narrow(1, 0, t - 1)?], 1)?
        } else {
            start
        };
        self.forward(&history, audio, content, style, t)
    }

    /// One autoregressive step for a single sequence: decodes the frame at
    /// position `state.step()` and returns it as absolute vertex positions.
    pub fn decode_step(&self, state: &DecoderState, audio: &Tensor, content: &Tensor, style: &Tensor, horizon: usize) -> Result<Vec<f32>> {
        let step = state.step();
        if step >= horizon {
            return Err(Error::SequenceLength {
                step: step + 1,
                available: horizon,
            });
        }
        let dtype = audio.dtype();
        let template = state.template().values();
        let width = template.len();
        let mut tokens = vec![0.0; width];
        for frame in state.frames() {
            tokens.extend(frame.iter().zip(template).map(|(v, t)| (*v - *t) as f64));
        }
        let history = ops::from_f64(tokens, (1, step + 1, width), dtype)?;
        let out = self.forward(&history, audio, content, style, horizon)?;
        let last = ops::to_vec_f64(&out.get(0)?.get(step)?)?;
        Ok(last
            .iter()
            .zip(template)
            .map(|(d, t)| (*t as f64 + d) as f32)
            .collect())
    }

    /// Autoregressive rollout of `horizon` frames for a single sequence.
    /// `audio`, `content` are `(1, T, D)`, `style` is `(1, D_s)`.
    pub fn rollout(&self, template: &Template, audio: &Tensor, content: &Tensor, style: &Tensor, horizon: usize, fps: f32) -> Result<MotionSequence> {
        let mut state = DecoderState::new(template.clone());
        for _ in 0..horizon {
            let frame = self.decode_step(&state, audio, content, style, horizon)?;
            state.push(frame)?;
        }
        state.into_sequence(fps)
    }

    /// Decodes a single sequence of `horizon` frames. Teacher forcing feeds
    /// the ground-truth frames as motion history; inference feeds back the
    /// model's own predictions.
    pub fn decode_sequence(
        &self,
        template: &Template,
        audio: &Tensor,
        content: &Tensor,
        style: &Tensor,
        horizon: usize,
        fps: f32,
        mode: DecodeMode<'_>,
    ) -> Result<MotionSequence> {
        match mode {
            DecodeMode::Inference => self.rollout(template, audio, content, style, horizon, fps),
            DecodeMode::TeacherForced(gt) => {
                if gt.len() != horizon || gt.vertex_count() != template.vertex_count() {
                    return Err(Error::Config("ground truth does not match the requested horizon or template".into()));
                }
                let dtype = audio.dtype();
                let frames = gt.to_tensor(dtype)?.unsqueeze(0)?;
                let target = displacements(&frames, &template.to_tensor(dtype)?)?;
                let out = self.forward_teacher(&target, audio, content, style)?;
                let base = template.to_tensor(dtype)?.flatten_all()?;
                let frames = out.get(0)?.broadcast_add(&base)?;
                let values: Vec<f32> = ops::to_vec_f64(&frames)?.into_iter().map(|v| v as f32).collect();
                MotionSequence::new(template.vertex_count(), fps, values)
            }
        }
    }

    /// Output projection, exposed for tests that zero it.
    pub fn output_layer(&self) -> &Linear {
        &self.out
    }
}

/// `(B, T, N_v * 3)` displacements of `frames` from `template`.
pub fn displacements(frames: &Tensor, template: &Tensor) -> Result<Tensor> {
    let (b, t, n, c) = frames.dims4()?;
    Ok(frames.broadcast_sub(template)?.reshape((b, t, n * c))?)
}
