//! Two-stage training: stage one freezes the style encoders, stage two
//! trains everything. Includes the optimizer, batch sampling, checkpoints
//! and the loss log.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Tensor};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::MelSpectrogram;
use crate::config::{ModelConfig, ModelVariant};
use crate::data::{Corpus, Example, Split};
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_loss, contrastive_total, motion_losses, mutual_info_loss, orthogonality_loss, style_similarity_loss,
    total_loss, LossTerms, LossWeights,
};
use crate::model::{Batch, ForwardOutputs, TalkingHeadModel, STYLE_PREFIX};
use crate::ops;
use crate::params::{seeded, ParamBuilder, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Switches that remove one loss term or one architectural component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    pub adversarial: bool,
    pub cosine: bool,
    pub orthogonality: bool,
    pub mutual_info: bool,
    pub contrastive: bool,
    pub graph_encoder: bool,
    pub audio_disentanglement: bool,
    pub motion_disentanglement: bool,
}

impl Ablations {
    pub fn variant(&self) -> ModelVariant {
        ModelVariant {
            graph_encoder: !self.graph_encoder,
            audio_style: !self.audio_disentanglement,
            motion_style: !self.motion_disentanglement,
        }
    }

    /// Names of the disabled components, for log headers.
    pub fn disabled(&self) -> Vec<&'static str> {
        [
            (self.adversarial, "adv"),
            (self.cosine, "cos"),
            (self.orthogonality, "orth"),
            (self.mutual_info, "info"),
            (self.contrastive, "cts"),
            (self.graph_encoder, "e_g"),
            (self.audio_disentanglement, "audio-disent"),
            (self.motion_disentanglement, "motion-disent"),
        ]
        .into_iter()
        .filter_map(|(on, name)| on.then_some(name))
        .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub batch_size: usize,
    /// Frames per training window.
    pub window: usize,
    pub seed: u64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
    pub precision: Precision,
    pub losses: LossWeights,
    pub ablations: Ablations,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            stage1_steps: 300,
            stage2_steps: 700,
            batch_size: 8,
            window: 32,
            seed: 0,
            grad_clip: 1.0,
            precision: Precision::F32,
            losses: LossWeights::default(),
            ablations: Ablations::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("train.learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("train.beta1 and train.beta2 must lie in [0, 1)".into()));
        }
        if self.stage1_steps == 0 || self.stage2_steps == 0 {
            return Err(Error::Config("train.stage1_steps and train.stage2_steps must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if self.batch_size < 2 && !self.ablations.contrastive {
            return Err(Error::Config(
                "train.batch_size must be at least 2 while the contrastive loss is enabled".into(),
            ));
        }
        if self.window < 2 {
            return Err(Error::Config("train.window must be at least 2".into()));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return Err(Error::Config("train.grad_clip must be finite and >= 0".into()));
        }
        self.losses.validate()
    }

    pub fn total_steps(&self) -> usize {
        self.stage1_steps + self.stage2_steps
    }
}

/// Gradient-reversal strength at `step`: a linear ramp from 0 to `max` over
/// the first `warmup` fraction of `total` steps.
pub fn grl_schedule(step: usize, total: usize, max: f64, warmup: f64) -> f64 {
    let ramp = warmup * total as f64;
    if ramp <= 0.0 {
        return max;
    }
    max * (step as f64 / ramp).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Style encoders frozen.
    One,
    /// All parameters trainable.
    Two,
}

/// Scalar values of every loss component at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub reconstruction: f64,
    pub mouth: f64,
    pub velocity: f64,
    pub motion: f64,
    pub adversarial: f64,
    pub cosine: f64,
    pub orthogonality: f64,
    pub mutual_info: f64,
    pub contrastive: f64,
    pub total: f64,
}

impl LossValues {
    pub const HEADER: &'static str = "step\tstage\trec\tmou\tvel\tmotion\tadv\tcos\torth\tinfo\tcts\ttotal";

    pub fn all_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }

    pub fn as_array(&self) -> [f64; 10] {
        [
            self.reconstruction,
            self.mouth,
            self.velocity,
            self.motion,
            self.adversarial,
            self.cosine,
            self.orthogonality,
            self.mutual_info,
            self.contrastive,
            self.total,
        ]
    }
}

/// The differentiable training objective and its parts.
#[derive(Debug, Clone)]
pub struct Objective {
    pub total: Tensor,
    pub values: LossValues,
}

fn sum_present(parts: Vec<Tensor>, like: &Tensor) -> Result<Tensor> {
    let mut acc = like.zeros_like()?;
    for p in parts {
        acc = (acc + p)?;
    }
    Ok(acc)
}

/// Builds the objective for one forward pass: the five weighted terms plus
/// the style similarity term, each honouring its ablation switch.
pub fn objective(
    model: &TalkingHeadModel,
    outputs: &ForwardOutputs,
    batch: &Batch,
    lip_vertices: &[usize],
    weights: &LossWeights,
    ablations: &Ablations,
    reversal: f64,
) -> Result<Objective> {
    let motion = motion_losses(&outputs.prediction, &batch.motion, lip_vertices, weights.motion)?;
    let zero = motion.total.zeros_like()?;
    let audio_side = !ablations.audio_disentanglement;
    let motion_side = !ablations.motion_disentanglement;

    let adversarial = if ablations.adversarial {
        zero.clone()
    } else {
        let mut parts = Vec::new();
        if audio_side {
            parts.push(adversarial_loss(&outputs.audio_content, &batch.labels, model.classifier(), reversal)?);
        }
        if motion_side {
            parts.push(adversarial_loss(&outputs.motion_content, &batch.labels, model.classifier(), reversal)?);
        }
        sum_present(parts, &zero)?
    };

    let orthogonality = if ablations.orthogonality {
        zero.clone()
    } else {
        let mut parts = Vec::new();
        if let (true, Some(tokens)) = (audio_side, &outputs.audio_style_tokens) {
            parts.push(orthogonality_loss(&outputs.audio_content, tokens)?);
        }
        if let (true, Some(tokens)) = (motion_side, &outputs.motion_style_tokens) {
            parts.push(orthogonality_loss(&outputs.motion_content, tokens)?);
        }
        sum_present(parts, &zero)?
    };

    let mutual_info = if ablations.mutual_info {
        zero.clone()
    } else {
        let mut parts = Vec::new();
        let (t, s) = (weights.temperature, weights.mutual_info_sign);
        if let (true, Some(style)) = (audio_side, &outputs.audio_style) {
            parts.push(mutual_info_loss(style, &outputs.audio_content.mean(1)?, t, s)?);
        }
        if let (true, Some(style)) = (motion_side, &outputs.motion_style) {
            parts.push(mutual_info_loss(style, &outputs.motion_content.mean(1)?, t, s)?);
        }
        sum_present(parts, &zero)?
    };

    let contrastive = if ablations.contrastive {
        zero.clone()
    } else {
        contrastive_total(&outputs.audio_content, &outputs.motion_content, weights)?.total
    };

    let cosine = match (&outputs.audio_style, &outputs.motion_style, ablations.cosine) {
        (Some(a), Some(m), false) => style_similarity_loss(a, m, &outputs.identity_style, weights.style_pairs)?,
        _ => zero.clone(),
    };

    let terms = LossTerms {
        motion: motion.total.clone(),
        adversarial,
        orthogonality,
        mutual_info,
        contrastive,
    };
    let total = (total_loss(&terms, weights.total)? + &cosine)?;
    let v = |t: &Tensor| ops::scalar(t);
    let values = LossValues {
        reconstruction: v(&motion.reconstruction)?,
        mouth: v(&motion.mouth)?,
        velocity: v(&motion.velocity)?,
        motion: v(&terms.motion)?,
        adversarial: v(&terms.adversarial)?,
        cosine: v(&cosine)?,
        orthogonality: v(&terms.orthogonality)?,
        mutual_info: v(&terms.mutual_info)?,
        contrastive: v(&terms.contrastive)?,
        total: v(&total)?,
    };
    Ok(Objective { total, values })
}

/// Adam moments of one parameter.
#[derive(Debug, Clone)]
struct Moment {
    m: Tensor,
    v: Tensor,
    count: u64,
}

/// Adam with optional global gradient-norm clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    clip: f64,
    state: BTreeMap<String, Moment>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            clip: cfg.grad_clip,
            state: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter in `names` that has a gradient.
    /// Returns the pre-clipping global gradient norm.
    pub fn step(&mut self, store: &ParamStore, grads: &candle_core::backprop::GradStore, names: &[String]) -> Result<f64> {
        let mut present = Vec::with_capacity(names.len());
        let mut sq = 0.0;
        for name in names {
            let var = store
                .get(name)
                .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += ops::scalar(&g.sqr()?.sum_all()?)?;
                present.push((name, var, g.detach()));
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric("gradient norm is not finite".into()));
        }
        let scale = if self.clip > 0.0 && norm > self.clip {
            self.clip / norm
        } else {
            1.0
        };
        for (name, var, g) in present {
            let g = if scale != 1.0 { g.affine(scale, 0.0)? } else { g };
            let entry = self.state.entry(name.clone()).or_insert_with(|| Moment {
                m: g.zeros_like().expect("zeros"),
                v: g.zeros_like().expect("zeros"),
                count: 0,
            });
            entry.count += 1;
            entry.m = (entry.m.affine(self.beta1, 0.0)? + g.affine(1.0 - self.beta1, 0.0)?)?.detach();
            entry.v = (entry.v.affine(self.beta2, 0.0)? + g.sqr()?.affine(1.0 - self.beta2, 0.0)?)?.detach();
            let c1 = 1.0 - self.beta1.powi(entry.count as i32);
            let c2 = 1.0 - self.beta2.powi(entry.count as i32);
            let m_hat = entry.m.affine(1.0 / c1, 0.0)?;
            let v_hat = entry.v.affine(1.0 / c2, 0.0)?;
            let update = (m_hat / v_hat.sqrt()?.affine(1.0, self.eps)?)?.affine(self.lr, 0.0)?;
            var.set(&(var.as_tensor() - update)?.detach())?;
        }
        Ok(norm)
    }
}

/// Precomputed features of one training example.
#[derive(Debug, Clone)]
struct Prepared {
    mel: Vec<Vec<f64>>,
    motion: Vec<f32>,
    frames: usize,
    template: Vec<f32>,
    label: crate::encoders::IdentityLabel,
}

/// Training examples with their log-mel features.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    items: Vec<Prepared>,
    vertex_count: usize,
    mel_rate: f64,
    fps: f32,
}

impl TrainingSet {
    pub fn new<'a>(examples: impl IntoIterator<Item = &'a Example>, mel: &MelSpectrogram) -> Result<Self> {
        let mut items = Vec::new();
        let mut fps = None;
        let mut vertex_count = None;
        for e in examples {
            if *fps.get_or_insert(e.motion.fps()) != e.motion.fps() {
                return Err(Error::Input("training sequences must share one frame rate".into()));
            }
            if *vertex_count.get_or_insert(e.motion.vertex_count()) != e.motion.vertex_count() {
                return Err(Error::Input("training sequences must share one vertex count".into()));
            }
            items.push(Prepared {
                mel: mel.compute(&e.audio)?,
                motion: e.motion.values().to_vec(),
                frames: e.motion.len(),
                template: e.template.values().to_vec(),
                label: e.label,
            });
        }
        if items.is_empty() {
            return Err(Error::Input("training set is empty".into()));
        }
        let cfg = mel.config();
        Ok(Self {
            items,
            vertex_count: vertex_count.unwrap_or(0),
            mel_rate: cfg.sample_rate as f64 / cfg.hop_length as f64,
            fps: fps.unwrap_or(25.0),
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn shortest(&self) -> usize {
        self.items.iter().map(|p| p.frames).min().unwrap_or(0)
    }

    /// Log-mel frames per motion frame.
    pub fn mel_per_frame(&self) -> f64 {
        self.mel_rate / self.fps as f64
    }

    /// Random windows of `window` frames from `batch` distinct examples.
    pub fn sample(&self, rng: &mut ChaCha8Rng, batch: usize, window: usize, dtype: DType) -> Result<Batch> {
        if window > self.shortest() {
            return Err(Error::Config(format!(
                "train.window = {window} exceeds the shortest sequence ({} frames)",
                self.shortest()
            )));
        }
        let chosen: Vec<usize> = if batch <= self.items.len() {
            sample(rng, self.items.len(), batch).into_vec()
        } else {
            (0..batch).map(|_| rng.gen_range(0..self.items.len())).collect()
        };
        let n3 = self.vertex_count * 3;
        let mel_len = ((window as f64 * self.mel_per_frame()).floor() as usize).max(1);
        let n_mels = self.items[0].mel.first().map(|r| r.len()).unwrap_or(0);
        let mut motion = Vec::with_capacity(batch * window * n3);
        let mut templates = Vec::with_capacity(batch * n3);
        let mut mel = Vec::with_capacity(batch * mel_len * n_mels);
        let mut labels = Vec::with_capacity(batch);
        for &i in &chosen {
            let item = &self.items[i];
            let start = rng.gen_range(0..=item.frames - window);
            motion.extend(item.motion[start * n3..(start + window) * n3].iter().map(|&v| v as f64));
            templates.extend(item.template.iter().map(|&v| v as f64));
            let available = item.mel.len();
            if available < mel_len {
                return Err(Error::Input("audio shorter than its motion window".into()));
            }
            let m0 = ((start as f64 * self.mel_per_frame()).floor() as usize).min(available - mel_len);
            for row in &item.mel[m0..m0 + mel_len] {
                mel.extend_from_slice(row);
            }
            labels.push(item.label);
        }
        Ok(Batch {
            motion: ops::from_f64(motion, (batch, window, self.vertex_count, 3), dtype)?,
            templates: ops::from_f64(templates, (batch, self.vertex_count, 3), dtype)?,
            mel: ops::from_f64(mel, (batch, mel_len, n_mels), dtype)?,
            labels,
        })
    }
}

/// Per-step generator derived from the seed and step index only, so that a
/// resumed run draws the same batches.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (step as u64).wrapping_mul(0xD1B5_4A32_D192_ED03).wrapping_add(0x5EED))
}

/// One logged training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub stage: Stage,
    pub losses: LossValues,
    pub grad_norm: f64,
}

impl StepRecord {
    pub fn log_line(&self) -> String {
        let l = &self.losses;
        let stage = match self.stage {
            Stage::One => 1,
            Stage::Two => 2,
        };
        let mut s = format!("{}\t{stage}", self.step);
        for v in l.as_array() {
            s += &format!("\t{v:.9e}");
        }
        s
    }
}

/// Owns the model parameters, optimizer state and training data.
pub struct Trainer {
    model_config: ModelConfig,
    config: TrainConfig,
    store: ParamStore,
    model: TalkingHeadModel,
    optimizer: Adam,
    data: TrainingSet,
    lip_vertices: Vec<usize>,
    step: usize,
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer").field("step", &self.step).field("config", &self.config).finish()
    }
}

impl Trainer {
    /// Validates both configurations and initializes parameters from the
    /// training seed.
    pub fn new(model_config: &ModelConfig, config: &TrainConfig, corpus: &Corpus) -> Result<Self> {
        model_config.validate()?;
        config.validate()?;
        let mel = MelSpectrogram::new(model_config.mel.clone())?;
        let data = TrainingSet::new(corpus.split(Split::Train), &mel)?;
        if config.window > data.shortest() {
            return Err(Error::Config(format!(
                "train.window = {} exceeds the shortest training sequence ({} frames)",
                config.window,
                data.shortest()
            )));
        }
        if config.window < model_config.min_motion_frames() {
            return Err(Error::Config("train.window is shorter than the convolution kernel".into()));
        }
        let (mut store, mut rng) = seeded(config.precision.dtype(), config.seed);
        let model = TalkingHeadModel::new(
            &mut ParamBuilder::new(&mut store, &mut rng),
            model_config,
            config.ablations.variant(),
            &corpus.topology,
            corpus.identities(),
        )?;
        let lips = corpus.topology.lip_vertices();
        Ok(Self {
            model_config: model_config.clone(),
            config: config.clone(),
            store,
            model,
            optimizer: Adam::new(config),
            data,
            lip_vertices: lips,
            step: 0,
        })
    }

    pub fn model(&self) -> &TalkingHeadModel {
        &self.model
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model_config
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn stage(&self) -> Stage {
        if self.step < self.config.stage1_steps {
            Stage::One
        } else {
            Stage::Two
        }
    }

    pub fn training_set(&self) -> &TrainingSet {
        &self.data
    }

    /// Names of parameters updated in `stage`.
    pub fn trainable(&self, stage: Stage) -> Vec<String> {
        self.store
            .names()
            .into_iter()
            .filter(|n| stage == Stage::Two || !n.starts_with(STYLE_PREFIX))
            .collect()
    }

    /// The batch drawn at `step`.
    pub fn batch_at(&self, step: usize) -> Result<Batch> {
        let mut rng = step_rng(self.config.seed, step);
        self.data
            .sample(&mut rng, self.config.batch_size, self.config.window, self.config.precision.dtype())
    }

    pub fn reversal_at(&self, step: usize) -> f64 {
        grl_schedule(
            step,
            self.config.total_steps(),
            self.config.losses.reversal_max,
            self.config.losses.reversal_warmup,
        )
    }

    /// Objective on `batch` with the current parameters, without updating.
    pub fn evaluate_objective(&self, batch: &Batch, ablations: &Ablations, reversal: f64) -> Result<Objective> {
        let outputs = self.model.forward(batch)?;
        objective(
            &self.model,
            &outputs,
            batch,
            &self.lip_vertices,
            &self.config.losses,
            ablations,
            reversal,
        )
    }

    /// Runs one optimization step.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let stage = self.stage();
        let batch = self.batch_at(self.step)?;
        let reversal = self.reversal_at(self.step);
        let obj = self.evaluate_objective(&batch, &self.config.ablations.clone(), reversal)?;
        if !obj.values.all_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {}", self.step)));
        }
        let grads = obj.total.backward()?;
        let names = self.trainable(stage);
        let grad_norm = self.optimizer.step(&self.store, &grads, &names)?;
        let record = StepRecord {
            step: self.step,
            stage,
            losses: obj.values,
            grad_norm,
        };
        self.step += 1;
        Ok(record)
    }

    /// Trains until `target` steps have been completed, logging each step.
    pub fn run_until(&mut self, target: usize, mut log: Option<&mut dyn Write>) -> Result<Vec<StepRecord>> {
        let mut records = Vec::new();
        while self.step < target {
            let r = self.train_step()?;
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", r.log_line())?;
            }
            records.push(r);
        }
        Ok(records)
    }

    pub fn log_header(&self) -> String {
        let disabled = self.config.ablations.disabled();
        format!(
            "# ablations: {}\n{}",
            if disabled.is_empty() { "none".to_string() } else { disabled.join(",") },
            LossValues::HEADER
        )
    }

    /// Hash of everything that determines the parameter layout.
    pub fn config_hash(&self) -> [u8; 32] {
        architecture_hash(&self.model_config, &self.config.ablations, self.model.identities(), self.model.vertex_count())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut arrays: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
        let to_f32 = |t: &Tensor| -> Result<Vec<f32>> { Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?) };
        for (name, var) in self.store.iter() {
            arrays.push((format!("param.{name}"), var.as_tensor().dims().to_vec(), to_f32(var.as_tensor())?));
        }
        for (name, moment) in &self.optimizer.state {
            arrays.push((format!("adam.m.{name}"), moment.m.dims().to_vec(), to_f32(&moment.m)?));
            arrays.push((format!("adam.v.{name}"), moment.v.dims().to_vec(), to_f32(&moment.v)?));
            arrays.push((format!("adam.count.{name}"), vec![1], vec![moment.count as f32]));
        }
        let ckpt = Checkpoint {
            step: self.step as u64,
            config_hash: self.config_hash(),
            arrays,
        };
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        ckpt.write_to(&mut file)?;
        file.flush()?;
        Ok(())
    }

    /// Rebuilds a trainer and restores parameters, optimizer state and step
    /// from a checkpoint.
    pub fn resume(model_config: &ModelConfig, config: &TrainConfig, corpus: &Corpus, path: &Path) -> Result<Self> {
        let mut trainer = Self::new(model_config, config, corpus)?;
        let ckpt = Checkpoint::load(path)?;
        if ckpt.config_hash != trainer.config_hash() {
            return Err(Error::Checkpoint(format!(
                "{} was written for a different model configuration",
                path.display()
            )));
        }
        trainer.load_arrays(&ckpt)?;
        trainer.step = ckpt.step as usize;
        Ok(trainer)
    }

    fn load_arrays(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let dtype = self.config.precision.dtype();
        let mut restored = 0;
        let mut state: BTreeMap<String, (Option<Tensor>, Option<Tensor>, u64)> = BTreeMap::new();
        for (name, shape, values) in &ckpt.arrays {
            let tensor = || -> Result<Tensor> {
                ops::from_f64(values.iter().map(|&v| v as f64).collect(), shape.as_slice(), dtype)
            };
            if let Some(p) = name.strip_prefix("param.") {
                self.store.assign(p, &tensor()?)?;
                restored += 1;
            } else if let Some(p) = name.strip_prefix("adam.m.") {
                state.entry(p.to_string()).or_default().0 = Some(tensor()?);
            } else if let Some(p) = name.strip_prefix("adam.v.") {
                state.entry(p.to_string()).or_default().1 = Some(tensor()?);
            } else if let Some(p) = name.strip_prefix("adam.count.") {
                state.entry(p.to_string()).or_default().2 = values.first().copied().unwrap_or(0.0) as u64;
            } else {
                return Err(Error::Checkpoint(format!("unknown array {name}")));
            }
        }
        if restored != self.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {restored} parameters, model has {}",
                self.store.len()
            )));
        }
        self.optimizer.state.clear();
        for (name, (m, v, count)) in state {
            match (m, v) {
                (Some(m), Some(v)) => {
                    self.optimizer.state.insert(name, Moment { m, v, count });
                }
                _ => return Err(Error::Checkpoint(format!("incomplete optimizer state for {name}"))),
            }
        }
        Ok(())
    }
}

/// Hash of the configuration fields that determine parameter shapes.
pub fn architecture_hash(model: &ModelConfig, ablations: &Ablations, identities: usize, vertices: usize) -> [u8; 32] {
    let doc = serde_json::json!({
        "model": model.architecture(),
        "variant": [ablations.graph_encoder, ablations.audio_disentanglement, ablations.motion_disentanglement],
        "identities": identities,
        "vertices": vertices,
    });
    Sha256::digest(doc.to_string().as_bytes()).into()
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PTKC";
pub const CHECKPOINT_VERSION: u8 = 1;

/// Named float32 arrays plus step counter and configuration hash.
///
/// Layout (little-endian): magic, version byte, step `u64`, 32-byte config
/// hash, array count `u32`, then per array: name length `u16`, name bytes,
/// rank `u8`, dims `u32` each, element offset `u64` into the payload; the
/// payload of concatenated `f32` values follows.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config_hash: [u8; 32],
    pub arrays: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.push(CHECKPOINT_VERSION);
        buf.extend_from_slice(&self.step.to_le_bytes());
        buf.extend_from_slice(&self.config_hash);
        buf.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, shape, values) in &self.arrays {
            let name_len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
            buf.extend_from_slice(&name_len.to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(shape.len() as u8);
            for &d in shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            buf.extend_from_slice(&offset.to_le_bytes());
            offset += values.len() as u64;
        }
        for (_, _, values) in &self.arrays {
            for v in values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(bytes: &[u8]) -> Result<Self> {
        let bad = |why: &str| Error::Checkpoint(why.to_string());
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated checkpoint"))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = take(1)?[0];
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let step = u64::from_le_bytes(take(8)?.try_into().map_err(|_| bad("step"))?);
        let config_hash: [u8; 32] = take(32)?.try_into().map_err(|_| bad("hash"))?;
        let count = u32::from_le_bytes(take(4)?.try_into().map_err(|_| bad("count"))?) as usize;
        let mut headers = Vec::with_capacity(count);
        for _ in 0..count {
            let len = u16::from_le_bytes(take(2)?.try_into().map_err(|_| bad("name"))?) as usize;
            let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| bad("name is not UTF-8"))?;
            let rank = take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(take(4)?.try_into().map_err(|_| bad("dim"))?) as usize);
            }
            let offset = u64::from_le_bytes(take(8)?.try_into().map_err(|_| bad("offset"))?) as usize;
            headers.push((name, shape, offset));
        }
        let payload = &bytes[pos..];
        let total = payload.len() / 4;
        if payload.len() % 4 != 0 {
            return Err(bad("payload is not a whole number of floats"));
        }
        let mut arrays = Vec::with_capacity(count);
        for (name, shape, offset) in headers {
            let n: usize = shape.iter().product();
            if offset + n > total {
                return Err(bad(&format!("array {name} runs past the payload")));
            }
            let values = payload[offset * 4..(offset + n) * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            arrays.push((name, shape, values));
        }
        Ok(Self {
            step,
            config_hash,
            arrays,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::read_from(&std::fs::read(path)?)
    }

    /// Parameter arrays only, keyed by parameter name.
    pub fn parameters(&self) -> impl Iterator<Item = (&str, &[usize], &[f32])> {
        self.arrays
            .iter()
            .filter_map(|(n, s, v)| n.strip_prefix("param.").map(|p| (p, s.as_slice(), v.as_slice())))
    }
}

/// Restores a model for inference from a checkpoint.
pub fn load_model(
    path: &Path,
    model_config: &ModelConfig,
    ablations: &Ablations,
    topology: &crate::mesh::MeshTopology,
    identities: usize,
    dtype: DType,
) -> Result<(TalkingHeadModel, ParamStore)> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.config_hash != architecture_hash(model_config, ablations, identities, topology.vertex_count()) {
        return Err(Error::Checkpoint(format!(
            "{} was written for a different model configuration",
            path.display()
        )));
    }
    let (mut store, mut rng) = seeded(dtype, 0);
    let model = TalkingHeadModel::new(
        &mut ParamBuilder::new(&mut store, &mut rng),
        model_config,
        ablations.variant(),
        topology,
        identities,
    )?;
    let mut restored = 0;
    for (name, shape, values) in ckpt.parameters() {
        store.assign(name, &ops::from_f64(values.iter().map(|&v| v as f64).collect(), shape, dtype)?)?;
        restored += 1;
    }
    if restored != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {restored} parameters, model has {}",
            store.len()
        )));
    }
    Ok((model, store))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grl_ramp() {
        assert_eq!(grl_schedule(0, 100, 1.0, 0.2), 0.0);
        assert_eq!(grl_schedule(10, 100, 1.0, 0.2), 0.5);
        assert_eq!(grl_schedule(20, 100, 1.0, 0.2), 1.0);
        assert_eq!(grl_schedule(90, 100, 2.0, 0.2), 2.0);
        assert_eq!(grl_schedule(0, 100, 1.0, 0.0), 1.0);
    }

    #[test]
    fn checkpoint_bytes_round_trip() {
        let c = Checkpoint {
            step: 17,
            config_hash: [7; 32],
            arrays: vec![
                ("param.a".into(), vec![2, 3], (0..6).map(|i| i as f32 * 0.5).collect()),
                ("adam.count.a".into(), vec![1], vec![3.0]),
            ],
        };
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"PTKC");
        assert_eq!(Checkpoint::read_from(&buf).unwrap(), c);
        assert!(Checkpoint::read_from(&buf[..buf.len() - 2]).is_err());
    }

    #[test]
    fn config_validation_names_fields() {
        let cfg = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        match cfg.validate() {
            Err(Error::Config(m)) => assert!(m.contains("train.batch_size")),
            other => panic!("{other:?}"),
        }
        let ok = TrainConfig {
            batch_size: 1,
            ablations: Ablations {
                contrastive: true,
                ..Ablations::default()
            },
            ..TrainConfig::default()
        };
        ok.validate().unwrap();
    }

    mod trainer {
        use super::super::*;
        use crate::data::{generate_corpus, CorpusSpec};

        fn corpus() -> Corpus {
            generate_corpus(&CorpusSpec {
                styles: 2,
                sequences_per_style: 4,
                seconds: 0.8,
                grid_rows: 6,
                grid_cols: 5,
                val_fraction: 0.0,
                test_fraction: 0.0,
                ..CorpusSpec::default()
            })
            .unwrap()
        }

        fn configs() -> (ModelConfig, TrainConfig) {
            let model = ModelConfig::small(8);
            let train = TrainConfig {
                stage1_steps: 2,
                stage2_steps: 2,
                batch_size: 4,
                window: 12,
                learning_rate: 1e-2,
                ..TrainConfig::default()
            };
            (model, train)
        }

        #[test]
        fn stage_one_leaves_style_parameters_untouched() {
            let (m, t) = configs();
            let mut trainer = Trainer::new(&m, &t, &corpus()).unwrap();
            let before = trainer.store().snapshot().unwrap();
            trainer.train_step().unwrap();
            let after = trainer.store().snapshot().unwrap();
            let mut moved_other = false;
            for (name, old) in &before {
                let same = old == &after[name];
                if name.starts_with(STYLE_PREFIX) {
                    assert!(same, "{name} changed in stage one");
                } else if !same {
                    moved_other = true;
                }
            }
            assert!(moved_other);
            trainer.run_until(t.stage1_steps + 1, None).unwrap();
            let late = trainer.store().snapshot().unwrap();
            assert!(before
                .iter()
                .any(|(n, v)| n.starts_with(STYLE_PREFIX) && v != &late[n]));
        }

        #[test]
        fn same_seed_gives_identical_trajectories() {
            let (m, t) = configs();
            let c = corpus();
            let mut a = Trainer::new(&m, &t, &c).unwrap();
            let mut b = Trainer::new(&m, &t, &c).unwrap();
            let ra = a.run_until(3, None).unwrap();
            let rb = b.run_until(3, None).unwrap();
            assert_eq!(ra, rb);
            assert_eq!(a.store().snapshot().unwrap(), b.store().snapshot().unwrap());
        }

        #[test]
        fn removing_contrastive_drops_exactly_its_weighted_term() {
            let (m, t) = configs();
            let t = TrainConfig {
                precision: Precision::F64,
                ..t
            };
            let trainer = Trainer::new(&m, &t, &corpus()).unwrap();
            let batch = trainer.batch_at(0).unwrap();
            let full = trainer.evaluate_objective(&batch, &Ablations::default(), 0.5).unwrap();
            let ablated = trainer
                .evaluate_objective(
                    &batch,
                    &Ablations {
                        contrastive: true,
                        ..Ablations::default()
                    },
                    0.5,
                )
                .unwrap();
            let beta5 = t.losses.total[4];
            let diff = full.values.total - ablated.values.total;
            assert!((diff - beta5 * full.values.contrastive).abs() < 1e-9 * full.values.total.abs());
            assert_eq!(ablated.values.contrastive, 0.0);
        }

        #[test]
        fn resumed_run_matches_uninterrupted_run() {
            let (m, t) = configs();
            let c = corpus();
            let dir = tempfile::tempdir().unwrap();
            let ckpt = dir.path().join("run.ptkc");
            let mut straight = Trainer::new(&m, &t, &c).unwrap();
            straight.run_until(4, None).unwrap();
            let mut first = Trainer::new(&m, &t, &c).unwrap();
            first.run_until(2, None).unwrap();
            first.save_checkpoint(&ckpt).unwrap();
            let mut resumed = Trainer::resume(&m, &t, &c, &ckpt).unwrap();
            assert_eq!(resumed.step(), 2);
            resumed.run_until(4, None).unwrap();
            assert_eq!(straight.store().snapshot().unwrap(), resumed.store().snapshot().unwrap());
        }

        #[test]
        fn checkpoint_rejects_other_architecture() {
            let (m, t) = configs();
            let c = corpus();
            let dir = tempfile::tempdir().unwrap();
            let ckpt = dir.path().join("run.ptkc");
            Trainer::new(&m, &t, &c).unwrap().save_checkpoint(&ckpt).unwrap();
            let other = TrainConfig {
                ablations: Ablations {
                    graph_encoder: true,
                    ..Ablations::default()
                },
                ..t
            };
            assert!(matches!(Trainer::resume(&m, &other, &c, &ckpt), Err(Error::Checkpoint(_))));
        }

        #[test]
        fn window_longer_than_data_is_a_config_error() {
            let (m, t) = configs();
            let t = TrainConfig { window: 500, ..t };
            match Trainer::new(&m, &t, &corpus()) {
                Err(Error::Config(msg)) => assert!(msg.contains("train.window")),
                other => panic!("{other:?}"),
            }
        }
    }
}
