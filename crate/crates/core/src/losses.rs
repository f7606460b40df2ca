//! Training objectives: adversarial style classification, style similarity,
//! orthogonality, mutual information, top-k contrastive alignment, KL
//! alignment and the motion reconstruction terms.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::encoders::IdentityLabel;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::ops;
use crate::params::ParamBuilder;

/// Floor on cosine denominators and additive variance floor for moments.
pub const STABILITY_EPS: f64 = 1e-6;

/// Names of the loss operations, in the order reported by gradient checks.
pub const LOSS_REGISTRY: [&str; 10] = [
    "grl",
    "adversarial",
    "style_similarity",
    "orthogonality",
    "mutual_info",
    "topk_contrastive",
    "kl_alignment",
    "contrastive_total",
    "motion",
    "total",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Style similarity weights for the (audio, motion), (audio, identity)
    /// and (motion, identity) pairs.
    pub style_pairs: [f64; 3],
    /// Reconstruction, mouth and velocity weights.
    pub motion: [f64; 3],
    /// Motion, adversarial, orthogonality, mutual-information and
    /// contrastive weights of the total objective.
    pub total: [f64; 5],
    pub temperature: f64,
    /// Top-k size; `None` uses `max(2, B / 2)`.
    pub top_k: Option<usize>,
    /// Mix between the audio-to-content and content-to-audio directions.
    pub direction_mix: f64,
    pub positive_weight: f64,
    pub negative_weight: f64,
    /// Peak gradient-reversal strength.
    pub reversal_max: f64,
    /// Fraction of training over which the reversal strength ramps up.
    pub reversal_warmup: f64,
    /// Sign applied to the mutual-information term; +1 minimizes it as an
    /// InfoNCE objective.
    pub mutual_info_sign: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            style_pairs: [1.0, 1.0, 1.0],
            motion: [1.0, 1.0, 0.5],
            total: [1.0, 0.1, 0.1, 0.1, 0.1],
            temperature: 0.1,
            top_k: None,
            direction_mix: 0.5,
            positive_weight: 1.0,
            negative_weight: 1.0,
            reversal_max: 1.0,
            reversal_warmup: 0.2,
            mutual_info_sign: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = self
            .style_pairs
            .iter()
            .map(|w| ("losses.style_pairs", *w))
            .chain(self.motion.iter().map(|w| ("losses.motion", *w)))
            .chain(self.total.iter().map(|w| ("losses.total", *w)))
            .chain([
                ("losses.positive_weight", self.positive_weight),
                ("losses.negative_weight", self.negative_weight),
                ("losses.reversal_max", self.reversal_max),
            ]);
        for (field, w) in named {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("{field} must be finite and >= 0, got {w}")));
            }
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config("losses.temperature must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.direction_mix) {
            return Err(Error::Config("losses.direction_mix must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.reversal_warmup) {
            return Err(Error::Config("losses.reversal_warmup must lie in [0, 1]".into()));
        }
        if self.top_k == Some(0) {
            return Err(Error::Config("losses.top_k must be at least 1".into()));
        }
        if self.mutual_info_sign != 1.0 && self.mutual_info_sign != -1.0 {
            return Err(Error::Config("losses.mutual_info_sign must be 1 or -1".into()));
        }
        Ok(())
    }

    /// Top-k size for a batch of `batch` items, clamped to `[1, batch]`.
    pub fn top_k_for(&self, batch: usize) -> usize {
        self.top_k.unwrap_or((batch / 2).max(2)).clamp(1, batch.max(1))
    }
}

/// MLP predicting the speaker from pooled content features.
#[derive(Debug, Clone)]
pub struct StyleClassifier {
    hidden: Linear,
    out: Linear,
    classes: usize,
}

impl StyleClassifier {
    pub fn new(pb: &mut ParamBuilder, in_dim: usize, hidden: usize, classes: usize) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(&mut pb.pp("hidden"), in_dim, hidden)?,
            out: Linear::new(&mut pb.pp("out"), hidden, classes)?,
            classes,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// `(B, D)` pooled features to `(B, K)` logits.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = ops::leaky_relu(&self.hidden.forward(x)?, 0.2)?;
        self.out.forward(&h)
    }
}

fn one_hot(labels: &[IdentityLabel], classes: usize, dtype: DType) -> Result<Tensor> {
    let mut v = vec![0.0; labels.len() * classes];
    for (b, l) in labels.iter().enumerate() {
        if l.index() >= classes {
            return Err(Error::Input(format!("label {} out of range for {classes} classes", l.index())));
        }
        v[b * classes + l.index()] = 1.0;
    }
    ops::from_f64(v, (labels.len(), classes), dtype)
}

/// Batch-mean softmax cross-entropy of `(B, K)` logits.
pub fn cross_entropy(logits: &Tensor, labels: &[IdentityLabel]) -> Result<Tensor> {
    let (b, k) = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::Input(format!("{} labels for a batch of {b}", labels.len())));
    }
    let targets = one_hot(labels, k, logits.dtype())?;
    let picked = (ops::log_softmax_last(logits)? * targets)?.sum_all()?;
    Ok(picked.affine(-1.0 / b as f64, 0.0)?)
}

/// Speaker classification from temporally pooled content `(B, T, D)` behind a
/// gradient reversal of strength `reversal`.
pub fn adversarial_loss(
    content: &Tensor,
    labels: &[IdentityLabel],
    classifier: &StyleClassifier,
    reversal: f64,
) -> Result<Tensor> {
    let pooled = content.mean(1)?;
    let reversed = ops::grl(&pooled, reversal)?;
    cross_entropy(&classifier.forward(&reversed)?, labels)
}

/// Weighted sum of `1 - cos` over the three style pairs, averaged over the
/// batch. Inputs are `(B, D_s)`.
pub fn style_similarity_loss(audio: &Tensor, motion: &Tensor, identity: &Tensor, w: [f64; 3]) -> Result<Tensor> {
    if audio.dims() != motion.dims() || audio.dims() != identity.dims() {
        return Err(Error::Config("style codes must share one shape".into()));
    }
    let term = |u: &Tensor, v: &Tensor, weight: f64| -> Result<Tensor> {
        let cos = ops::cosine_rows(u, v, STABILITY_EPS)?;
        Ok(cos.affine(-weight, weight)?)
    };
    let sum = ((term(audio, motion, w[0])? + term(audio, identity, w[1])?)? + term(motion, identity, w[2])?)?;
    Ok(sum.mean_all()?)
}

/// `(F_out, F_in)` averaging matrix with bins `[floor(i F / F'), floor((i+1) F / F'))`.
pub fn adaptive_pool_matrix(frames: usize, bins: usize) -> Vec<f64> {
    let mut m = vec![0.0; bins * frames];
    for i in 0..bins {
        let lo = i * frames / bins;
        let hi = ((i + 1) * frames / bins).max(lo + 1);
        for j in lo..hi {
            m[i * frames + j] = 1.0 / (hi - lo) as f64;
        }
    }
    m
}

/// Adaptive average pooling of `(B, F, D)` along time to `bins` frames.
pub fn adaptive_avg_pool(x: &Tensor, bins: usize) -> Result<Tensor> {
    let frames = x.dim(1)?;
    if bins == 0 || bins > frames {
        return Err(Error::Input(format!("cannot pool {frames} frames into {bins} bins")));
    }
    if bins == frames {
        return Ok(x.clone());
    }
    let pool = ops::from_f64(adaptive_pool_matrix(frames, bins), (bins, frames), x.dtype())?;
    Ok(pool.broadcast_matmul(x)?)
}

/// `(1/B) Σ_b ‖P_b P_bᵀ − I‖_F` for products `P` of shape `(B, D_c, D_s)`.
pub fn orthogonality_from_products(products: &Tensor) -> Result<Tensor> {
    let (b, dc, _) = products.dims3()?;
    let gram = products.matmul(&products.transpose(1, 2)?.contiguous()?)?;
    let eye = Tensor::eye(dc, products.dtype(), products.device())?;
    let residual = gram.broadcast_sub(&eye)?;
    let norms = ops::safe_sqrt(&residual.sqr()?.sum((1, 2))?)?;
    Ok(norms.sum_all()?.affine(1.0 / b as f64, 0.0)?)
}

/// Orthogonality between content `(B, F_c, D_c)` and style `(B, F_s, D_s)`
/// after pooling both to `min(F_c, F_s)` frames.
pub fn orthogonality_loss(content: &Tensor, style: &Tensor) -> Result<Tensor> {
    let (bc, fc, _) = content.dims3()?;
    let (bs, fs, _) = style.dims3()?;
    if bc != bs {
        return Err(Error::Config("content and style batches differ".into()));
    }
    let frames = fc.min(fs);
    let c = adaptive_avg_pool(content, frames)?;
    let s = adaptive_avg_pool(style, frames)?;
    orthogonality_from_products(&c.transpose(1, 2)?.contiguous()?.matmul(&s)?)
}

/// InfoNCE over cosine similarities of matched rows of `u` and `v` (both
/// `(B, D)`), scaled by `sign`.
pub fn mutual_info_loss(u: &Tensor, v: &Tensor, temperature: f64, sign: f64) -> Result<Tensor> {
    let b = u.dim(0)?;
    let logits = ops::cosine_matrix(u, v, STABILITY_EPS)?.affine(1.0 / temperature, 0.0)?;
    let log_probs = ops::log_softmax_last(&logits)?;
    let eye = Tensor::eye(b, u.dtype(), u.device())?;
    Ok((log_probs * eye)?.sum_all()?.affine(-sign / b as f64, 0.0)?)
}

/// Audio-to-content and content-to-audio similarity matrices.
#[derive(Debug, Clone)]
pub struct SimilarityMatrices {
    pub audio_to_content: Tensor,
    pub content_to_audio: Tensor,
}

impl SimilarityMatrices {
    pub fn new(audio_to_content: Tensor, content_to_audio: Tensor) -> Result<Self> {
        let (r, c) = audio_to_content.dims2()?;
        if r != c || content_to_audio.dims() != [r, c] {
            return Err(Error::Config("similarity matrices must be square and share a shape".into()));
        }
        Ok(Self {
            audio_to_content,
            content_to_audio,
        })
    }

    /// Cosine similarities of temporally pooled features divided by
    /// `temperature`; the reverse direction is the transpose.
    pub fn from_features(audio: &Tensor, content: &Tensor, temperature: f64) -> Result<Self> {
        let a = audio.mean(1)?;
        let c = content.mean(1)?;
        let ac = ops::cosine_matrix(&a, &c, STABILITY_EPS)?.affine(1.0 / temperature, 0.0)?;
        let ca = ac.t()?.contiguous()?;
        Self::new(ac, ca)
    }

    pub fn batch(&self) -> usize {
        self.audio_to_content.dims()[0]
    }
}

/// Additive mask keeping, per row, the `k` largest entries plus the
/// diagonal. Ties go to the lower column index.
pub fn topk_mask(values: &[f64], batch: usize, k: usize) -> Vec<f64> {
    let mut mask = vec![f64::NEG_INFINITY; batch * batch];
    for i in 0..batch {
        let row = &values[i * batch..(i + 1) * batch];
        let mut order: Vec<usize> = (0..batch).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        for &j in order.iter().take(k) {
            mask[i * batch + j] = 0.0;
        }
        mask[i * batch + i] = 0.0;
    }
    mask
}

fn directional_topk(sim: &Tensor, k: usize, positive: f64, negative: f64) -> Result<Tensor> {
    let b = sim.dim(0)?;
    let mask = topk_mask(&ops::to_vec_f64(sim)?, b, k);
    let mask = ops::from_f64(mask, (b, b), sim.dtype())?;
    let lse = ops::logsumexp_last(&sim.broadcast_add(&mask)?)?.squeeze(1)?;
    let eye = Tensor::eye(b, sim.dtype(), sim.device())?;
    let diag = (sim * eye)?.sum(1)?;
    // -α (E_ii - log β - lse_i)
    let row = (diag - lse)?.affine(-positive, positive * negative.ln())?;
    Ok(row.mean_all()?)
}

/// Weighted top-k contrastive loss mixed over both directions.
pub fn topk_contrastive_loss(
    sims: &SimilarityMatrices,
    k: usize,
    positive_weight: f64,
    negative_weight: f64,
    mix: f64,
) -> Result<Tensor> {
    let b = sims.batch();
    if k == 0 || k > b {
        return Err(Error::Config(format!("top-k size {k} outside [1, {b}]")));
    }
    if negative_weight <= 0.0 {
        return Err(Error::Config("negative weight must be positive".into()));
    }
    let ac = directional_topk(&sims.audio_to_content, k, positive_weight, negative_weight)?;
    let ca = directional_topk(&sims.content_to_audio, k, positive_weight, negative_weight)?;
    Ok((ac.affine(mix, 0.0)? + ca.affine(1.0 - mix, 0.0)?)?)
}

/// Per-dimension means and standard deviations of audio and motion content.
#[derive(Debug, Clone)]
pub struct Moments {
    pub audio_mean: Tensor,
    pub audio_std: Tensor,
    pub motion_mean: Tensor,
    pub motion_std: Tensor,
}

impl Moments {
    /// Empirical moments over batch and time of `(B, T, D)` features, with
    /// [`STABILITY_EPS`] added to each variance.
    pub fn from_features(audio: &Tensor, content: &Tensor) -> Result<Self> {
        let stats = |x: &Tensor| -> Result<(Tensor, Tensor)> {
            let d = x.dim(D::Minus1)?;
            let flat = x.reshape(((), d))?;
            let mean = flat.mean(0)?;
            let var = flat.broadcast_sub(&mean)?.sqr()?.mean(0)?;
            Ok((mean, var.affine(1.0, STABILITY_EPS)?.sqrt()?))
        };
        let (audio_mean, audio_std) = stats(audio)?;
        let (motion_mean, motion_std) = stats(content)?;
        Ok(Self {
            audio_mean,
            audio_std,
            motion_mean,
            motion_std,
        })
    }
}

/// Gaussian KL divergence from the audio moments to the motion moments,
/// summed over dimensions.
pub fn kl_alignment_loss(m: &Moments) -> Result<Tensor> {
    let va = m.audio_std.sqr()?;
    let vc = m.motion_std.sqr()?;
    let log_ratio = (vc.log()? - va.log()?)?;
    let spread = ((&va + (&m.audio_mean - &m.motion_mean)?.sqr()?)? / &vc)?;
    let per_dim = (log_ratio + spread)?.affine(1.0, -1.0)?;
    Ok(per_dim.sum_all()?.affine(0.5, 0.0)?)
}

/// Parts of the cross-modal contrastive objective.
#[derive(Debug, Clone)]
pub struct ContrastiveParts {
    pub topk: Tensor,
    pub kl: Tensor,
    pub total: Tensor,
}

/// Top-k contrastive plus KL alignment between audio content and motion
/// content, both `(B, T, D)`.
pub fn contrastive_total(audio: &Tensor, content: &Tensor, w: &LossWeights) -> Result<ContrastiveParts> {
    let sims = SimilarityMatrices::from_features(audio, content, w.temperature)?;
    let topk = topk_contrastive_loss(
        &sims,
        w.top_k_for(sims.batch()),
        w.positive_weight,
        w.negative_weight,
        w.direction_mix,
    )?;
    let kl = kl_alignment_loss(&Moments::from_features(audio, content)?)?;
    let total = (&topk + &kl)?;
    Ok(ContrastiveParts { topk, kl, total })
}

#[derive(Debug, Clone)]
pub struct MotionLosses {
    pub reconstruction: Tensor,
    pub mouth: Tensor,
    pub velocity: Tensor,
    pub total: Tensor,
}

fn mean_frame_error(diff: &Tensor, divisor: usize) -> Result<Tensor> {
    // diff is (B, T', values); per-frame norm, summed over time, / divisor.
    let norms = ops::norm_last(diff)?;
    let b = diff.dim(0)?;
    Ok(norms.sum_all()?.affine(1.0 / (b * divisor) as f64, 0.0)?)
}

/// Reconstruction, mouth and velocity losses over `(B, T, N_v, 3)` vertex
/// sequences. Each is the batch mean of `(1/T) Σ_t ‖frame difference‖₂`;
/// the velocity sum starts at the second frame.
pub fn motion_losses(pred: &Tensor, gt: &Tensor, lip_vertices: &[usize], alphas: [f64; 3]) -> Result<MotionLosses> {
    if pred.dims() != gt.dims() {
        return Err(Error::Config(format!(
            "prediction shape {:?} differs from ground truth {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let (b, t, n, c) = pred.dims4()?;
    if lip_vertices.is_empty() && alphas[1] > 0.0 {
        return Err(Error::Config("mouth loss weight is positive but the lip mask is empty".into()));
    }
    if lip_vertices.iter().any(|&v| v >= n) {
        return Err(Error::Config("lip mask index out of range".into()));
    }
    let diff = (pred - gt)?;
    let reconstruction = mean_frame_error(&diff.reshape((b, t, n * c))?, t)?;
    let mouth = if lip_vertices.is_empty() {
        reconstruction.zeros_like()?
    } else {
        let idx = Tensor::new(lip_vertices.iter().map(|&v| v as u32).collect::<Vec<_>>(), pred.device())?;
        let lips = diff.index_select(&idx, 2)?;
        mean_frame_error(&lips.reshape((b, t, lip_vertices.len() * c))?, t)?
    };
    let velocity = if t < 2 {
        reconstruction.zeros_like()?
    } else {
        let flat = diff.reshape((b, t, n * c))?;
        let step = (flat.narrow(1, 1, t - 1)? - flat.narrow(1, 0, t - 1)?)?;
        mean_frame_error(&step, t)?
    };
    let total = ((reconstruction.affine(alphas[0], 0.0)? + mouth.affine(alphas[1], 0.0)?)?
        + velocity.affine(alphas[2], 0.0)?)?;
    Ok(MotionLosses {
        reconstruction,
        mouth,
        velocity,
        total,
    })
}

/// The five weighted components of the total objective.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub motion: Tensor,
    pub adversarial: Tensor,
    pub orthogonality: Tensor,
    pub mutual_info: Tensor,
    pub contrastive: Tensor,
}

impl LossTerms {
    pub fn as_array(&self) -> [&Tensor; 5] {
        [
            &self.motion,
            &self.adversarial,
            &self.orthogonality,
            &self.mutual_info,
            &self.contrastive,
        ]
    }
}

/// `Σ_i β_i · term_i`.
pub fn total_loss(terms: &LossTerms, weights: [f64; 5]) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    for (term, w) in terms.as_array().into_iter().zip(weights) {
        let scaled = term.affine(w, 0.0)?;
        acc = Some(match acc {
            Some(a) => (a + scaled)?,
            None => scaled,
        });
    }
    acc.ok_or_else(|| Error::Config("no loss terms".into()))
}

#[cfg(test)]
mod tests {
    use candle_core::Var;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    use super::*;
    use crate::params::seeded;

    fn t(values: &[f64], shape: &[usize]) -> Tensor {
        ops::from_f64(values.to_vec(), shape, DType::F64).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> (Tensor, Vec<f64>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        (t(&v, shape), v)
    }

    fn val(x: &Tensor) -> f64 {
        ops::scalar(x).unwrap()
    }

    fn labels(idx: &[usize], k: usize) -> Vec<IdentityLabel> {
        idx.iter().map(|&i| IdentityLabel::new(i, k).unwrap()).collect()
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = t(&[0.3; 8], &[2, 4]);
        let ce = val(&cross_entropy(&logits, &labels(&[1, 3], 4)).unwrap());
        assert!((ce - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_hand_evaluation() {
        let logits = [0.5, -1.0, 2.0, 1.5, 0.0, -0.5];
        let ce = val(&cross_entropy(&t(&logits, &[2, 3]), &labels(&[2, 0], 3)).unwrap());
        let row = |r: &[f64], y: usize| -> f64 {
            let z: f64 = r.iter().map(|v| v.exp()).sum();
            -(r[y].exp() / z).ln()
        };
        let expected = (row(&logits[0..3], 2) + row(&logits[3..6], 0)) / 2.0;
        assert!((ce - expected).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_drive_loss_to_zero() {
        let ce = val(&cross_entropy(&t(&[60.0, 0.0, 0.0], &[1, 3]), &labels(&[0], 3)).unwrap());
        assert!(ce < 1e-20);
    }

    #[test]
    fn out_of_range_label_is_input_error() {
        let (mut store, mut rng) = seeded(DType::F64, 1);
        let clf = StyleClassifier::new(&mut ParamBuilder::new(&mut store, &mut rng), 4, 4, 2).unwrap();
        let (content, _) = random(&[1, 3, 4], 2);
        let bad = [IdentityLabel::new(2, 3).unwrap()];
        assert!(matches!(adversarial_loss(&content, &bad, &clf, 1.0), Err(Error::Input(_))));
    }

    #[test]
    fn style_similarity_cases() {
        let same = t(&[0.3, -2.0, 1.0], &[1, 3]);
        assert!(val(&style_similarity_loss(&same, &same, &same, [1.0; 3]).unwrap()).abs() < 1e-12);
        let a = t(&[1.0, 0.0], &[1, 2]);
        let m = t(&[0.0, 1.0], &[1, 2]);
        let loss = val(&style_similarity_loss(&a, &m, &a, [1.0; 3]).unwrap());
        assert!((loss - 2.0).abs() < 1e-12);
        let zero = t(&[0.0, 0.0], &[1, 2]);
        assert!(val(&style_similarity_loss(&zero, &m, &a, [1.0; 3]).unwrap()).is_finite());
    }

    #[test]
    fn style_similarity_matches_direct_cosines() {
        let w = [0.7, 1.3, 0.2];
        for seed in 0..5 {
            let (a, av) = random(&[1, 6], seed);
            let (m, mv) = random(&[1, 6], seed + 10);
            let (p, pv) = random(&[1, 6], seed + 20);
            let cos = |x: &[f64], y: &[f64]| {
                let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
                let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                dot / (nx * ny)
            };
            let expected = w[0] * (1.0 - cos(&av, &mv)) + w[1] * (1.0 - cos(&av, &pv)) + w[2] * (1.0 - cos(&mv, &pv));
            let got = val(&style_similarity_loss(&a, &m, &p, w).unwrap());
            assert!((got - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn orthogonality_reference_values() {
        let eye = Tensor::eye(3, DType::F64, &crate::params::device()).unwrap().unsqueeze(0).unwrap();
        assert!(val(&orthogonality_from_products(&eye).unwrap()).abs() < 1e-12);
        let zero = Tensor::zeros((1, 4, 5), DType::F64, &crate::params::device()).unwrap();
        assert!((val(&orthogonality_from_products(&zero).unwrap()) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonality_matches_loop_oracle() {
        let (b, fc, fs, dc, ds) = (2, 7, 3, 4, 5);
        let (c, cv) = random(&[b, fc, dc], 3);
        let (s, sv) = random(&[b, fs, ds], 4);
        let f = fc.min(fs);
        let pool = |v: &[f64], frames: usize, dim: usize, batch: usize| -> Vec<f64> {
            let mut out = vec![0.0; f * dim];
            for i in 0..f {
                let lo = i * frames / f;
                let hi = (i + 1) * frames / f;
                for j in lo..hi {
                    for d in 0..dim {
                        out[i * dim + d] += v[batch * frames * dim + j * dim + d] / (hi - lo) as f64;
                    }
                }
            }
            out
        };
        let mut expected = 0.0;
        for bi in 0..b {
            let pc = pool(&cv, fc, dc, bi);
            let ps = pool(&sv, fs, ds, bi);
            let mut p = vec![0.0; dc * ds];
            for x in 0..dc {
                for y in 0..ds {
                    p[x * ds + y] = (0..f).map(|i| pc[i * dc + x] * ps[i * ds + y]).sum();
                }
            }
            let mut fro = 0.0;
            for x in 0..dc {
                for y in 0..dc {
                    let g: f64 = (0..ds).map(|z| p[x * ds + z] * p[y * ds + z]).sum();
                    let r = g - if x == y { 1.0 } else { 0.0 };
                    fro += r * r;
                }
            }
            expected += fro.sqrt();
        }
        expected /= b as f64;
        let got = val(&orthogonality_loss(&c, &s).unwrap());
        assert!((got - expected).abs() < 1e-8, "{got} vs {expected}");
    }

    #[test]
    fn pool_bins_cover_every_frame() {
        for frames in 1..12 {
            for bins in 1..=frames {
                let m = adaptive_pool_matrix(frames, bins);
                for i in 0..bins {
                    let row: f64 = m[i * frames..(i + 1) * frames].iter().sum();
                    assert!((row - 1.0).abs() < 1e-12);
                }
                for j in 0..frames {
                    assert_eq!((0..bins).filter(|&i| m[i * frames + j] > 0.0).count(), 1);
                }
            }
        }
    }

    #[test]
    fn mutual_info_cases() {
        let (u, _) = random(&[1, 4], 1);
        let (v, _) = random(&[1, 4], 2);
        assert_eq!(val(&mutual_info_loss(&u, &v, 0.1, 1.0).unwrap()), 0.0);
        let uv = [1.0, 0.0, 0.6, 0.8];
        let vv = [0.0, 1.0, 1.0, 0.0];
        let got = val(&mutual_info_loss(&t(&uv, &[2, 2]), &t(&vv, &[2, 2]), 1.0, 1.0).unwrap());
        // cos rows: u0·v = (0, 1); u1·v = (0.8, 0.6)
        let l0 = -(0f64.exp() / (0f64.exp() + 1f64.exp())).ln();
        let l1 = -(0.6f64.exp() / (0.8f64.exp() + 0.6f64.exp())).ln();
        assert!((got - (l0 + l1) / 2.0).abs() < 1e-12);
        let flipped = val(&mutual_info_loss(&t(&uv, &[2, 2]), &t(&vv, &[2, 2]), 1.0, -1.0).unwrap());
        assert_eq!(flipped, -got);
    }

    fn infonce_oracle(m: &[f64], b: usize) -> f64 {
        (0..b)
            .map(|i| {
                let row = &m[i * b..(i + 1) * b];
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                -(row[i].exp() / z).ln()
            })
            .sum::<f64>()
            / b as f64
    }

    #[test]
    fn full_topk_reduces_to_symmetric_infonce() {
        let b = 4;
        let (ac, acv) = random(&[b, b], 8);
        let (ca, cav) = random(&[b, b], 9);
        let sims = SimilarityMatrices::new(ac, ca).unwrap();
        let got = val(&topk_contrastive_loss(&sims, b, 1.0, 1.0, 0.3).unwrap());
        let expected = 0.3 * infonce_oracle(&acv, b) + 0.7 * infonce_oracle(&cav, b);
        assert!((got - expected).abs() < 1e-9);
    }

    #[test]
    fn topk_matches_sort_and_sum_oracle() {
        let b = 3;
        let k = 2;
        let (alpha, beta, lambda) = (1.5, 2.0, 0.4);
        let ac = [0.9, 0.1, 0.5, 0.7, 0.2, 0.3, -0.1, 0.8, 0.6];
        let ca = [0.2, 0.4, 0.6, 0.3, 0.1, 0.9, 0.5, 0.0, 0.05];
        let oracle = |m: &[f64]| -> f64 {
            (0..b)
                .map(|i| {
                    let row = &m[i * b..(i + 1) * b];
                    let mut sorted: Vec<usize> = (0..b).collect();
                    sorted.sort_by(|&x, &y| row[y].partial_cmp(&row[x]).unwrap());
                    let mut keep: Vec<usize> = sorted[..k].to_vec();
                    if !keep.contains(&i) {
                        keep.push(i);
                    }
                    let denom: f64 = keep.iter().map(|&j| row[j].exp()).sum();
                    -alpha * (row[i].exp() / (beta * denom)).ln()
                })
                .sum::<f64>()
                / b as f64
        };
        let sims = SimilarityMatrices::new(t(&ac, &[3, 3]), t(&ca, &[3, 3])).unwrap();
        let got = val(&topk_contrastive_loss(&sims, k, alpha, beta, lambda).unwrap());
        let expected = lambda * oracle(&ac) + (1.0 - lambda) * oracle(&ca);
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn topk_mask_breaks_ties_by_index() {
        let mask = topk_mask(&[0.5, 0.5, 0.5, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0], 3, 1);
        assert_eq!(mask[0], 0.0);
        assert_eq!(mask[1], f64::NEG_INFINITY);
        // Row 1 keeps column 0 by tie-break and column 1 as the diagonal.
        assert_eq!(&mask[3..6], &[0.0, 0.0, f64::NEG_INFINITY]);
        assert_eq!(&mask[6..9], &[0.0, f64::NEG_INFINITY, 0.0]);
    }

    fn moments(am: f64, asd: f64, cm: f64, csd: f64) -> Moments {
        Moments {
            audio_mean: t(&[am], &[1]),
            audio_std: t(&[asd], &[1]),
            motion_mean: t(&[cm], &[1]),
            motion_std: t(&[csd], &[1]),
        }
    }

    #[test]
    fn kl_reference_values() {
        assert!(val(&kl_alignment_loss(&moments(0.3, 0.7, 0.3, 0.7)).unwrap()).abs() < 1e-12);
        assert!((val(&kl_alignment_loss(&moments(0.0, 1.0, 1.0, 1.0)).unwrap()) - 0.5).abs() < 1e-12);
        let degenerate = Tensor::ones((2, 3, 1), DType::F64, &crate::params::device()).unwrap();
        let m = Moments::from_features(&degenerate, &(&degenerate * 2.0).unwrap()).unwrap();
        let kl = val(&kl_alignment_loss(&m).unwrap());
        assert!(kl.is_finite() && kl > 1e3);
    }

    #[test]
    fn contrastive_total_is_the_sum_of_parts() {
        let (a, _) = random(&[4, 5, 3], 1);
        let (c, _) = random(&[4, 5, 3], 2);
        let w = LossWeights::default();
        let parts = contrastive_total(&a, &c, &w).unwrap();
        assert_eq!(val(&parts.total), val(&parts.topk) + val(&parts.kl));
        let same = contrastive_total(&a, &a, &w).unwrap();
        assert_eq!(val(&same.kl), 0.0);
    }

    #[test]
    fn motion_loss_cases() {
        let (gt, gv) = random(&[2, 4, 3, 3], 5);
        let zero = motion_losses(&gt, &gt, &[0, 1], [1.0, 1.0, 0.5]).unwrap();
        for l in [&zero.reconstruction, &zero.mouth, &zero.velocity, &zero.total] {
            assert_eq!(val(l), 0.0);
        }
        let offset: Vec<f64> = gv.iter().enumerate().map(|(i, v)| v + (i % 3) as f64 * 0.4 + 0.1).collect();
        let shifted = motion_losses(&t(&offset, &[2, 4, 3, 3]), &gt, &[0], [1.0, 1.0, 0.5]).unwrap();
        assert!(val(&shifted.velocity).abs() < 1e-12);
        assert!(val(&shifted.reconstruction) > 0.0);

        let p = t(&[3.0, 4.0, 0.0], &[1, 1, 1, 3]);
        let g = t(&[0.0, 0.0, 0.0], &[1, 1, 1, 3]);
        assert_eq!(val(&motion_losses(&p, &g, &[0], [1.0, 1.0, 1.0]).unwrap().reconstruction), 5.0);
    }

    #[test]
    fn motion_loss_configuration_errors() {
        let (gt, _) = random(&[1, 2, 3, 3], 5);
        let (other, _) = random(&[1, 3, 3, 3], 6);
        assert!(matches!(motion_losses(&gt, &other, &[0], [1.0; 3]), Err(Error::Config(_))));
        assert!(matches!(motion_losses(&gt, &gt, &[], [1.0; 3]), Err(Error::Config(_))));
        assert!(motion_losses(&gt, &gt, &[], [1.0, 0.0, 1.0]).is_ok());
    }

    #[test]
    fn total_loss_weighting() {
        let terms = LossTerms {
            motion: t(&[1.5], &[]),
            adversarial: t(&[0.7], &[]),
            orthogonality: t(&[2.0], &[]),
            mutual_info: t(&[0.3], &[]),
            contrastive: t(&[4.0], &[]),
        };
        assert_eq!(val(&total_loss(&terms, [0.0; 5]).unwrap()), 0.0);
        assert_eq!(val(&total_loss(&terms, [1.0, 0.0, 0.0, 0.0, 0.0]).unwrap()), 1.5);
        let w = [0.2, 0.4, 0.6, 0.8, 1.0];
        let expected = 0.2 * 1.5 + 0.4 * 0.7 + 0.6 * 2.0 + 0.8 * 0.3 + 1.0 * 4.0;
        assert!((val(&total_loss(&terms, w).unwrap()) - expected).abs() < 1e-12);
    }

    #[test]
    fn adversarial_gradient_is_reversed() {
        let (mut store, mut rng) = seeded(DType::F64, 4);
        let clf = StyleClassifier::new(&mut ParamBuilder::new(&mut store, &mut rng), 3, 5, 2).unwrap();
        let (x, _) = random(&[2, 4, 3], 7);
        let var = Var::from_tensor(&x).unwrap();
        let lab = labels(&[0, 1], 2);
        let plain = cross_entropy(&clf.forward(&var.as_tensor().mean(1).unwrap()).unwrap(), &lab).unwrap();
        let g_plain = ops::to_vec_f64(plain.backward().unwrap().get(var.as_tensor()).unwrap()).unwrap();
        let rev = adversarial_loss(var.as_tensor(), &lab, &clf, 0.5).unwrap();
        assert_eq!(val(&rev), val(&plain));
        let g_rev = ops::to_vec_f64(rev.backward().unwrap().get(var.as_tensor()).unwrap()).unwrap();
        for (a, b) in g_plain.iter().zip(&g_rev) {
            assert!((b + 0.5 * a).abs() < 1e-12);
        }
    }

    #[test]
    fn default_weights_validate() {
        LossWeights::default().validate().unwrap();
        assert_eq!(LossWeights::default().top_k_for(8), 4);
        assert_eq!(LossWeights::default().top_k_for(2), 2);
        let bad = LossWeights {
            temperature: 0.0,
            ..LossWeights::default()
        };
        assert!(bad.validate().is_err());
    }
}
