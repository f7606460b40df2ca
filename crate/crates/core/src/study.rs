//! The synthetic disentanglement study: train on a planted-style corpus and
//! measure generation error, content leakage and style clustering.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::audio::MelSpectrogram;
use crate::config::{FirstPassContent, ModelConfig, MotionRefresh};
use crate::data::{Corpus, CorpusSpec, Split};
use crate::error::Result;
use crate::evaluation::{encode_examples, evaluate_generation, probe_report, ProbeReport};
use crate::training::{Ablations, TrainConfig, Trainer};

/// Corpus, model and schedule of one study run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Every this many training sequences feed the probes.
    pub probe_stride: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        let steps = 1500;
        let mut train = TrainConfig {
            stage1_steps: steps * 3 / 10,
            stage2_steps: steps - steps * 3 / 10,
            ..TrainConfig::default()
        };
        train.losses.total[1] = 1.0;
        train.losses.mutual_info_sign = -1.0;
        Self {
            corpus: CorpusSpec::default(),
            model: ModelConfig {
                first_pass_content: FirstPassContent::Audio,
                refresh: MotionRefresh::Never,
                ..ModelConfig::small(16)
            },
            train,
            probe_stride: 4,
        }
    }
}

impl StudyConfig {
    /// The same study with `ablations` and training seed `seed`.
    pub fn variant(&self, ablations: Ablations, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.train.ablations = ablations;
        cfg.train.seed = seed;
        cfg
    }
}

/// Measurements of one study run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyOutcome {
    /// Held-out LVE of the model before any update.
    pub untrained_lve: f64,
    pub trained_lve: f64,
    pub trained_fdd: f64,
    pub probes: ProbeReport,
    pub training_time: Duration,
}

impl StudyOutcome {
    pub fn lve_ratio(&self) -> f64 {
        self.trained_lve / self.untrained_lve
    }
}

/// Trains on the train split of `corpus` and evaluates on its test split.
pub fn run_study(cfg: &StudyConfig, corpus: &Corpus) -> Result<StudyOutcome> {
    let mut trainer = Trainer::new(&cfg.model, &cfg.train, corpus)?;
    let mel = MelSpectrogram::new(cfg.model.mel.clone())?;
    let dtype = cfg.train.precision.dtype();
    let test: Vec<_> = corpus.split(Split::Test).collect();
    let untrained = evaluate_generation(trainer.model(), test.iter().copied(), &corpus.topology, &mel, dtype)?;
    let start = Instant::now();
    trainer.run_until(cfg.train.total_steps(), None)?;
    let training_time = start.elapsed();
    let model = trainer.model();
    let trained = evaluate_generation(model, test.iter().copied(), &corpus.topology, &mel, dtype)?;
    let train_features = encode_examples(
        model,
        corpus.split(Split::Train).step_by(cfg.probe_stride.max(1)),
        &mel,
        dtype,
    )?;
    let test_features = encode_examples(model, test.iter().copied(), &mel, dtype)?;
    Ok(StudyOutcome {
        untrained_lve: untrained.lve,
        trained_lve: trained.lve,
        trained_fdd: trained.fdd,
        probes: probe_report(&train_features, &test_features, corpus.identities())?,
        training_time,
    })
}
