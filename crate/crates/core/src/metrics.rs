//! Evaluation measures: lip vertex error, upper-face dynamics deviation,
//! style-cluster silhouette and a linear probe.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{MotionSequence, Template};

fn check_pair(pred: &MotionSequence, gt: &MotionSequence) -> Result<()> {
    if pred.len() != gt.len() || pred.vertex_count() != gt.vertex_count() {
        return Err(Error::Input(format!(
            "prediction has {} frames of {} vertices, ground truth {} of {}",
            pred.len(),
            pred.vertex_count(),
            gt.len(),
            gt.vertex_count()
        )));
    }
    Ok(())
}

fn distance(a: [f32; 3], b: [f32; 3]) -> f64 {
    a.iter()
        .zip(&b)
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Mean over frames of the largest lip-vertex error, for one sequence.
pub fn sequence_lve(pred: &MotionSequence, gt: &MotionSequence, lip_vertices: &[usize]) -> Result<f64> {
    check_pair(pred, gt)?;
    if lip_vertices.is_empty() {
        return Err(Error::Config("lip mask is empty".into()));
    }
    let total: f64 = (0..pred.len())
        .map(|t| {
            lip_vertices
                .iter()
                .map(|&v| distance(pred.vertex(t, v), gt.vertex(t, v)))
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(total / pred.len() as f64)
}

/// Lip vertex error averaged over sequences.
pub fn lip_vertex_error(preds: &[MotionSequence], gts: &[MotionSequence], lip_vertices: &[usize]) -> Result<f64> {
    let per = per_sequence(preds, gts, |p, g| sequence_lve(p, g, lip_vertices))?;
    Ok(mean(&per))
}

fn motion_std(seq: &MotionSequence, template: &Template, v: usize) -> f64 {
    let t0 = template.values();
    let base = [t0[v * 3], t0[v * 3 + 1], t0[v * 3 + 2]];
    let norms: Vec<f64> = (0..seq.len()).map(|t| distance(seq.vertex(t, v), base)).collect();
    let m = mean(&norms);
    (norms.iter().map(|x| (x - m).powi(2)).sum::<f64>() / norms.len() as f64).sqrt()
}

/// Mean over upper-face vertices of the absolute difference between
/// predicted and ground-truth standard deviations of displacement norm.
pub fn sequence_fdd(
    pred: &MotionSequence,
    gt: &MotionSequence,
    template: &Template,
    upper_face_vertices: &[usize],
) -> Result<f64> {
    check_pair(pred, gt)?;
    if template.vertex_count() != gt.vertex_count() {
        return Err(Error::Input("template vertex count differs from the sequence".into()));
    }
    if upper_face_vertices.is_empty() {
        return Err(Error::Config("upper-face mask is empty".into()));
    }
    let total: f64 = upper_face_vertices
        .iter()
        .map(|&v| (motion_std(pred, template, v) - motion_std(gt, template, v)).abs())
        .sum();
    Ok(total / upper_face_vertices.len() as f64)
}

/// Upper-face dynamics deviation averaged over sequences.
pub fn upper_face_dynamics_deviation(
    preds: &[MotionSequence],
    gts: &[MotionSequence],
    templates: &[Template],
    upper_face_vertices: &[usize],
) -> Result<f64> {
    if templates.len() != gts.len() {
        return Err(Error::Input("one template per sequence is required".into()));
    }
    let mut i = 0;
    let per = per_sequence(preds, gts, |p, g| {
        let r = sequence_fdd(p, g, &templates[i], upper_face_vertices);
        i += 1;
        r
    })?;
    Ok(mean(&per))
}

fn per_sequence(
    preds: &[MotionSequence],
    gts: &[MotionSequence],
    mut f: impl FnMut(&MotionSequence, &MotionSequence) -> Result<f64>,
) -> Result<Vec<f64>> {
    if preds.len() != gts.len() {
        return Err(Error::Input(format!("{} predictions for {} sequences", preds.len(), gts.len())));
    }
    if preds.is_empty() {
        return Err(Error::Input("no sequences to evaluate".into()));
    }
    preds.iter().zip(gts).map(|(p, g)| f(p, g)).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 0.0 } else { 1.0 };
    }
    (1.0 - dot / (na * nb)).max(0.0)
}

/// Mean silhouette coefficient under cosine distance. Points in singleton
/// clusters score 0, as does the whole set when fewer than two labels occur
/// or every distance vanishes.
pub fn style_silhouette(codes: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if codes.len() != labels.len() {
        return Err(Error::Input("one label per style code is required".into()));
    }
    let mut distinct: Vec<usize> = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Ok(0.0);
    }
    let n = codes.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; distinct.len()];
        let mut counts = vec![0usize; distinct.len()];
        for j in 0..n {
            if i == j {
                continue;
            }
            let c = distinct.binary_search(&labels[j]).unwrap_or(0);
            sums[c] += cosine_distance(&codes[i], &codes[j]);
            counts[c] += 1;
        }
        let own = distinct.binary_search(&labels[i]).unwrap_or(0);
        if counts[own] == 0 {
            continue;
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..distinct.len())
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

/// Multinomial logistic regression on standardized features, trained by
/// full-batch gradient descent; returns accuracy on the test set.
pub fn linear_probe(
    train: &[Vec<f64>],
    train_labels: &[usize],
    test: &[Vec<f64>],
    test_labels: &[usize],
    classes: usize,
) -> Result<f64> {
    if train.is_empty() || test.is_empty() || train.len() != train_labels.len() || test.len() != test_labels.len() {
        return Err(Error::Input("probe needs non-empty, labelled train and test sets".into()));
    }
    if train_labels.iter().chain(test_labels).any(|&l| l >= classes) {
        return Err(Error::Input("probe label out of range".into()));
    }
    let d = train[0].len();
    let n = train.len() as f64;
    let mu: Vec<f64> = (0..d).map(|k| train.iter().map(|x| x[k]).sum::<f64>() / n).collect();
    let sd: Vec<f64> = (0..d)
        .map(|k| {
            let v = train.iter().map(|x| (x[k] - mu[k]).powi(2)).sum::<f64>() / n;
            v.sqrt().max(1e-8)
        })
        .collect();
    let norm = |x: &[f64]| -> Vec<f64> { (0..d).map(|k| (x[k] - mu[k]) / sd[k]).collect() };
    let xs: Vec<Vec<f64>> = train.iter().map(|x| norm(x)).collect();
    let mut w = vec![vec![0.0; d + 1]; classes];
    let lr = 0.5;
    let l2 = 1e-3;
    let logits = |w: &[Vec<f64>], x: &[f64]| -> Vec<f64> {
        w.iter()
            .map(|wc| wc[d] + wc[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    };
    for _ in 0..500 {
        let mut grad = vec![vec![0.0; d + 1]; classes];
        for (x, &y) in xs.iter().zip(train_labels) {
            let z = logits(&w, x);
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..classes {
                let g = e[c] / s - if c == y { 1.0 } else { 0.0 };
                for k in 0..d {
                    grad[c][k] += g * x[k];
                }
                grad[c][d] += g;
            }
        }
        for c in 0..classes {
            for k in 0..=d {
                let reg = if k < d { l2 * w[c][k] } else { 0.0 };
                w[c][k] -= lr * (grad[c][k] / n + reg);
            }
        }
    }
    let correct = test
        .iter()
        .zip(test_labels)
        .filter(|(x, &y)| {
            let z = logits(&w, &norm(x));
            let best = (0..classes).max_by(|&a, &b| z[a].total_cmp(&z[b])).unwrap_or(0);
            best == y
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRow {
    pub name: String,
    pub lve: f64,
    pub fdd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub lve: f64,
    pub fdd: f64,
    pub style_silhouette: Option<f64>,
    pub sequences: Vec<SequenceRow>,
}

impl EvalReport {
    /// Builds the report from per-sequence rows; headline numbers are the
    /// row means.
    pub fn from_rows(sequences: Vec<SequenceRow>, style_silhouette: Option<f64>) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Input("no sequences to report".into()));
        }
        let lve = mean(&sequences.iter().map(|r| r.lve).collect::<Vec<_>>());
        let fdd = mean(&sequences.iter().map(|r| r.fdd).collect::<Vec<_>>());
        Ok(Self {
            lve,
            fdd,
            style_silhouette,
            sequences,
        })
    }

    pub fn to_table(&self) -> String {
        let width = self.sequences.iter().map(|r| r.name.len()).max().unwrap_or(8).max(8);
        let mut out = format!("{:<width$}  {:>12}  {:>12}\n", "sequence", "LVE (mm)", "FDD (mm)");
        for r in &self.sequences {
            out += &format!("{:<width$}  {:>12.6}  {:>12.6}\n", r.name, r.lve, r.fdd);
        }
        out += &format!("{:<width$}  {:>12.6}  {:>12.6}\n", "mean", self.lve, self.fdd);
        if let Some(s) = self.style_silhouette {
            out += &format!("style silhouette: {s:.4}\n");
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(frames: usize, n: usize, f: impl Fn(usize) -> f32) -> MotionSequence {
        MotionSequence::new(n, 25.0, (0..frames * n * 3).map(f).collect()).unwrap()
    }

    #[test]
    fn identical_sequences_score_zero() {
        let s = seq(4, 3, |i| i as f32 * 0.1);
        let tpl = Template::new(vec![0.0; 9]).unwrap();
        assert_eq!(sequence_lve(&s, &s, &[0, 2]).unwrap(), 0.0);
        assert_eq!(sequence_fdd(&s, &s, &tpl, &[1]).unwrap(), 0.0);
    }

    #[test]
    fn single_displaced_lip_vertex() {
        let gt = seq(1, 2, |_| 0.0);
        let pred = MotionSequence::new(2, 25.0, vec![0.0, 3.0, 4.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(sequence_lve(&pred, &gt, &[0, 1]).unwrap(), 5.0);
    }

    #[test]
    fn static_prediction_fdd_is_ground_truth_std() {
        let tpl = Template::new(vec![0.0; 3]).unwrap();
        let gt = MotionSequence::new(1, 25.0, vec![0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 4.0, 0.0]).unwrap();
        let pred = tpl.repeat(3, 25.0).unwrap();
        let norms = [0.0f64, 2.0, 4.0];
        let m = norms.iter().sum::<f64>() / 3.0;
        let std = (norms.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 3.0).sqrt();
        assert!((sequence_fdd(&pred, &gt, &tpl, &[0]).unwrap() - std).abs() < 1e-12);
    }

    #[test]
    fn silhouette_limits() {
        let codes = vec![vec![1.0, 0.0], vec![2.0, 0.0], vec![0.0, 1.0], vec![0.0, 3.0]];
        assert!((style_silhouette(&codes, &[0, 0, 1, 1]).unwrap() - 1.0).abs() < 1e-12);
        let same = vec![vec![1.0, 1.0]; 4];
        assert_eq!(style_silhouette(&same, &[0, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(style_silhouette(&codes, &[0, 0, 0, 0]).unwrap(), 0.0);
    }

    #[test]
    fn probe_separates_separable_classes() {
        let train: Vec<Vec<f64>> = (0..40).map(|i| vec![(i % 4) as f64 + 0.01 * i as f64, 1.0]).collect();
        let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let acc = linear_probe(&train, &labels, &train, &labels, 4).unwrap();
        assert!(acc > 0.95);
    }

    #[test]
    fn report_headlines_are_row_means() {
        let rows = vec![
            SequenceRow { name: "a".into(), lve: 1.0, fdd: 0.5 },
            SequenceRow { name: "b".into(), lve: 3.0, fdd: 1.5 },
        ];
        let r = EvalReport::from_rows(rows, Some(0.4)).unwrap();
        assert_eq!((r.lve, r.fdd), (2.0, 1.0));
        let json: EvalReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(json, r);
        assert!(r.to_table().contains("mean"));
    }
}
