//! Held-out evaluation of a trained model: generated-motion metrics,
//! linear probes on pooled content and style codes, and style clustering.

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::audio::MelSpectrogram;
use crate::data::Example;
use crate::error::{Error, Result};
use crate::mesh::{MeshTopology, MotionSequence};
use crate::metrics::{linear_probe, sequence_fdd, sequence_lve, style_silhouette, EvalReport, SequenceRow};
use crate::model::{Batch, TalkingHeadModel};
use crate::ops;

/// Sequence-level encodings of one example.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceFeatures {
    /// Temporally pooled audio content.
    pub audio_content: Vec<f64>,
    /// Temporally pooled motion content.
    pub motion_content: Vec<f64>,
    /// Fused style code.
    pub style: Vec<f64>,
    pub label: usize,
}

/// A batch of one full-length example.
pub fn example_batch(example: &Example, mel: &MelSpectrogram, dtype: DType) -> Result<Batch> {
    let n = example.motion.vertex_count();
    let t = example.motion.len();
    Ok(Batch {
        motion: example.motion.to_tensor(dtype)?.reshape((1, t, n, 3))?,
        templates: example.template.to_tensor(dtype)?.reshape((1, n, 3))?,
        mel: mel.compute_tensor(&example.audio, dtype)?,
        labels: vec![example.label],
    })
}

pub fn encode_examples<'a>(
    model: &TalkingHeadModel,
    examples: impl IntoIterator<Item = &'a Example>,
    mel: &MelSpectrogram,
    dtype: DType,
) -> Result<Vec<SequenceFeatures>> {
    examples
        .into_iter()
        .map(|e| {
            let batch = example_batch(e, mel, dtype)?;
            let (a, c) = model.pooled_content(&batch)?;
            let s = model.fused_style(&batch)?;
            Ok(SequenceFeatures {
                audio_content: ops::to_vec_f64(&a.flatten_all()?)?,
                motion_content: ops::to_vec_f64(&c.flatten_all()?)?,
                style: ops::to_vec_f64(&s.flatten_all()?)?,
                label: e.label.index(),
            })
        })
        .collect()
}

/// Runs the inference path on an example's audio and identity, producing as
/// many frames as its ground truth.
pub fn generate_for(model: &TalkingHeadModel, example: &Example, mel: &MelSpectrogram, dtype: DType) -> Result<MotionSequence> {
    let features = mel.compute_tensor(&example.audio, dtype)?;
    model.generate(
        &features,
        example.label,
        &example.template,
        example.motion.len(),
        example.motion.fps(),
        None,
    )
}

/// LVE and FDD of generated motion against ground truth, plus the style
/// silhouette of the examples' fused style codes.
pub fn evaluate_generation<'a>(
    model: &TalkingHeadModel,
    examples: impl IntoIterator<Item = &'a Example>,
    topology: &MeshTopology,
    mel: &MelSpectrogram,
    dtype: DType,
) -> Result<EvalReport> {
    let lips = topology.lip_vertices();
    let upper = topology.upper_face_vertices();
    let mut rows = Vec::new();
    let mut codes = Vec::new();
    let mut labels = Vec::new();
    for (i, e) in examples.into_iter().enumerate() {
        let pred = generate_for(model, e, mel, dtype)?;
        rows.push(SequenceRow {
            name: format!("{i:05}"),
            lve: sequence_lve(&pred, &e.motion, &lips)?,
            fdd: sequence_fdd(&pred, &e.motion, &e.template, &upper)?,
        });
        let batch = example_batch(e, mel, dtype)?;
        codes.push(ops::to_vec_f64(&model.fused_style(&batch)?.flatten_all()?)?);
        labels.push(e.label.index());
    }
    EvalReport::from_rows(rows, Some(style_silhouette(&codes, &labels)?))
}

/// Accuracies of linear style probes trained on one set of encodings and
/// tested on another.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub chance: f64,
    pub audio_content: f64,
    pub motion_content: f64,
    pub style: f64,
    pub style_silhouette: f64,
}

pub fn probe_report(train: &[SequenceFeatures], test: &[SequenceFeatures], classes: usize) -> Result<ProbeReport> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Input("probes need train and test encodings".into()));
    }
    let ytrain: Vec<usize> = train.iter().map(|f| f.label).collect();
    let ytest: Vec<usize> = test.iter().map(|f| f.label).collect();
    let probe = |get: fn(&SequenceFeatures) -> &Vec<f64>| -> Result<f64> {
        let xtrain: Vec<Vec<f64>> = train.iter().map(|f| get(f).clone()).collect();
        let xtest: Vec<Vec<f64>> = test.iter().map(|f| get(f).clone()).collect();
        linear_probe(&xtrain, &ytrain, &xtest, &ytest, classes)
    };
    let codes: Vec<Vec<f64>> = test.iter().map(|f| f.style.clone()).collect();
    Ok(ProbeReport {
        chance: 1.0 / classes as f64,
        audio_content: probe(|f| &f.audio_content)?,
        motion_content: probe(|f| &f.motion_content)?,
        style: probe(|f| &f.style)?,
        style_silhouette: style_silhouette(&codes, &ytest)?,
    })
}
