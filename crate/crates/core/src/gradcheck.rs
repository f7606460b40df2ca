//! Central finite-difference checks of analytic gradients for every loss
//! term and the trainable layers, in double precision.

use candle_core::{DType, Tensor, Var};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::decoder::MotionDecoder;
use crate::encoders::{
    AudioContentEncoder, AudioStyleEncoder, IdentityEncoder, IdentityLabel, MotionContentEncoder, MotionStyleEncoder,
};
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_loss, contrastive_total, kl_alignment_loss, motion_losses, mutual_info_loss, orthogonality_loss,
    style_similarity_loss, topk_contrastive_loss, total_loss, LossTerms, LossWeights, Moments, SimilarityMatrices,
    StyleClassifier, LOSS_REGISTRY,
};
use crate::mesh::{GatLayer, GraphEncoder, GraphIndex, MeshTopology};
use crate::ops;
use crate::params::{seeded, ParamBuilder, ParamStore};

pub const DEFAULT_RTOL: f64 = 1e-4;
const STEP: f64 = 1e-6;
/// Gradient magnitudes below this are compared absolutely.
const SCALE_FLOOR: f64 = 1e-2;
/// Elements probed per tensor.
const PROBES_PER_TENSOR: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckKind {
    Loss,
    Layer,
    Control,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub kind: CheckKind,
    pub elements: usize,
    pub max_error: f64,
    pub passed: bool,
}

/// A differentiable input together with the factor relating its analytic
/// gradient to the finite difference of the forward value.
pub struct Input {
    pub name: String,
    pub var: Var,
    pub fd_scale: f64,
}

impl Input {
    pub fn new(name: impl Into<String>, var: Var) -> Self {
        Self {
            name: name.into(),
            var,
            fd_scale: 1.0,
        }
    }

    pub fn scaled(mut self, fd_scale: f64) -> Self {
        self.fd_scale = fd_scale;
        self
    }
}

fn random_var(rng: &mut ChaCha8Rng, shape: &[usize]) -> Result<Var> {
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Ok(Var::from_tensor(&ops::from_f64(values, shape, DType::F64)?)?)
}

fn store_inputs(store: &ParamStore) -> Vec<Input> {
    store.iter().map(|(n, v)| Input::new(n.clone(), v.clone())).collect()
}

/// Replaces every parameter with uniform noise so that zero-initialized
/// layers carry gradient.
fn randomize(store: &ParamStore, rng: &mut ChaCha8Rng, scale: f64) -> Result<()> {
    for (name, var) in store.iter() {
        let n = var.as_tensor().elem_count();
        let values = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
        store.assign(name, &ops::from_f64(values, var.as_tensor().dims(), DType::F64)?)?;
    }
    Ok(())
}

fn set_element(var: &Var, index: usize, value: f64) -> Result<()> {
    let mut values = ops::to_vec_f64(&var.as_tensor().flatten_all()?)?;
    values[index] = value;
    var.set(&ops::from_f64(values, var.as_tensor().dims(), DType::F64)?)?;
    Ok(())
}

/// Compares analytic gradients of `f` against central differences on a
/// random subset of elements of each input. `corrupt` multiplies every
/// analytic gradient before comparison.
pub fn check_function(
    name: &str,
    kind: CheckKind,
    inputs: &[Input],
    f: &dyn Fn() -> Result<Tensor>,
    rtol: f64,
    corrupt: f64,
    rng: &mut ChaCha8Rng,
) -> Result<CheckResult> {
    let value = f()?;
    if value.elem_count() != 1 {
        return Err(Error::Input(format!("{name}: checked function must return a scalar")));
    }
    let grads = value.sum_all()?.backward()?;
    let mut max_error: f64 = 0.0;
    let mut elements = 0;
    for input in inputs {
        let t = input.var.as_tensor();
        let analytic = match grads.get(t) {
            Some(g) => ops::to_vec_f64(&g.flatten_all()?)?,
            None => vec![0.0; t.elem_count()],
        };
        let original = ops::to_vec_f64(&t.flatten_all()?)?;
        let n = original.len();
        let picks: Vec<usize> = if n <= PROBES_PER_TENSOR {
            (0..n).collect()
        } else {
            rand::seq::index::sample(rng, n, PROBES_PER_TENSOR).into_vec()
        };
        for i in picks {
            set_element(&input.var, i, original[i] + STEP)?;
            let plus = ops::scalar(&f()?)?;
            set_element(&input.var, i, original[i] - STEP)?;
            let minus = ops::scalar(&f()?)?;
            set_element(&input.var, i, original[i])?;
            let numeric = input.fd_scale * (plus - minus) / (2.0 * STEP);
            let a = analytic[i] * corrupt;
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(SCALE_FLOOR);
            if !err.is_finite() {
                return Err(Error::Numeric(format!("{name}: non-finite gradient for {}", input.name)));
            }
            max_error = max_error.max(err);
            elements += 1;
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        kind,
        elements,
        max_error,
        passed: max_error <= rtol,
    })
}

type Fixture = (Vec<Input>, Box<dyn Fn() -> Result<Tensor>>);

fn small_config() -> ModelConfig {
    let mut cfg = ModelConfig::small(8);
    cfg.mel.n_mels = 16;
    cfg
}

fn small_topology() -> Result<MeshTopology> {
    MeshTopology::from_edges(5, vec![(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (0, 2)], &[3, 4], &[0])
}

fn labels(indices: &[usize], classes: usize) -> Result<Vec<IdentityLabel>> {
    indices.iter().map(|&i| IdentityLabel::new(i, classes)).collect()
}

/// Builds the inputs and closure for the named check.
fn fixture(name: &str, rng: &mut ChaCha8Rng) -> Result<Fixture> {
    let weights = LossWeights::default();
    Ok(match name {
        "grl" => {
            let alpha = 0.7;
            let x = random_var(rng, &[2, 3])?;
            let w = ops::from_f64((0..6).map(|i| 0.3 * i as f64 - 0.8).collect(), (2, 3), DType::F64)?;
            let xt = x.as_tensor().clone();
            (
                vec![Input::new("x", x).scaled(-alpha)],
                Box::new(move || Ok((ops::grl(&xt, alpha)? * &w)?.sum_all()?)),
            )
        }
        "adversarial" => {
            let alpha = 0.5;
            let (mut store, mut prng) = seeded(DType::F64, 3);
            let classifier = StyleClassifier::new(&mut ParamBuilder::new(&mut store, &mut prng).pp("cls"), 6, 8, 3)?;
            randomize(&store, rng, 0.5)?;
            let content = random_var(rng, &[3, 4, 6])?;
            let ct = content.as_tensor().clone();
            let mut inputs = store_inputs(&store);
            inputs.push(Input::new("content", content).scaled(-alpha));
            let labels = labels(&[0, 2, 1], 3)?;
            (
                inputs,
                Box::new(move || adversarial_loss(&ct, &labels, &classifier, alpha)),
            )
        }
        "style_similarity" => {
            let (a, m, p) = (random_var(rng, &[3, 6])?, random_var(rng, &[3, 6])?, random_var(rng, &[3, 6])?);
            let (at, mt, pt) = (a.as_tensor().clone(), m.as_tensor().clone(), p.as_tensor().clone());
            let w = weights.style_pairs;
            (
                vec![Input::new("a", a), Input::new("m", m), Input::new("p", p)],
                Box::new(move || style_similarity_loss(&at, &mt, &pt, w)),
            )
        }
        "orthogonality" => {
            let (c, s) = (random_var(rng, &[2, 5, 4])?, random_var(rng, &[2, 3, 6])?);
            let (ct, st) = (c.as_tensor().clone(), s.as_tensor().clone());
            (
                vec![Input::new("content", c), Input::new("style", s)],
                Box::new(move || orthogonality_loss(&ct, &st)),
            )
        }
        "mutual_info" => {
            let (u, v) = (random_var(rng, &[4, 6])?, random_var(rng, &[4, 6])?);
            let (ut, vt) = (u.as_tensor().clone(), v.as_tensor().clone());
            (
                vec![Input::new("u", u), Input::new("v", v)],
                Box::new(move || mutual_info_loss(&ut, &vt, 0.5, 1.0)),
            )
        }
        "topk_contrastive" => {
            let (a, c) = (random_var(rng, &[4, 5, 6])?, random_var(rng, &[4, 5, 6])?);
            let (at, ct) = (a.as_tensor().clone(), c.as_tensor().clone());
            (
                vec![Input::new("audio", a), Input::new("content", c)],
                Box::new(move || {
                    let sims = SimilarityMatrices::from_features(&at, &ct, 0.5)?;
                    topk_contrastive_loss(&sims, 2, 1.5, 0.8, 0.5)
                }),
            )
        }
        "kl_alignment" => {
            let (a, c) = (random_var(rng, &[3, 5, 6])?, random_var(rng, &[3, 5, 6])?);
            let (at, ct) = (a.as_tensor().clone(), c.as_tensor().clone());
            (
                vec![Input::new("audio", a), Input::new("content", c)],
                Box::new(move || kl_alignment_loss(&Moments::from_features(&at, &ct)?)),
            )
        }
        "contrastive_total" => {
            let (a, c) = (random_var(rng, &[4, 5, 6])?, random_var(rng, &[4, 5, 6])?);
            let (at, ct) = (a.as_tensor().clone(), c.as_tensor().clone());
            (
                vec![Input::new("audio", a), Input::new("content", c)],
                Box::new(move || Ok(contrastive_total(&at, &ct, &weights)?.total)),
            )
        }
        "motion" => {
            let pred = random_var(rng, &[2, 5, 4, 3])?;
            let gt = random_var(rng, &[2, 5, 4, 3])?.as_tensor().detach();
            let pt = pred.as_tensor().clone();
            (
                vec![Input::new("pred", pred)],
                Box::new(move || Ok(motion_losses(&pt, &gt, &[0, 1], weights.motion)?.total)),
            )
        }
        "total" => {
            let vars: Vec<Var> = (0..5)
                .map(|_| Ok(Var::from_tensor(&Tensor::new(rng.gen_range(0.0..2.0), &candle_core::Device::Cpu)?)?))
                .collect::<Result<_>>()?;
            let ts: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
            let inputs = vars.into_iter().enumerate().map(|(i, v)| Input::new(format!("term{i}"), v)).collect();
            (
                inputs,
                Box::new(move || {
                    let terms = LossTerms {
                        motion: ts[0].clone(),
                        adversarial: ts[1].clone(),
                        orthogonality: ts[2].clone(),
                        mutual_info: ts[3].clone(),
                        contrastive: ts[4].clone(),
                    };
                    total_loss(&terms, [1.0, 0.3, 0.2, 0.1, 0.5])
                }),
            )
        }
        "gat_layer" | "graph_encoder" => {
            let graph = GraphIndex::new(&small_topology()?)?;
            let (mut store, mut prng) = seeded(DType::F64, 5);
            let mut pb = ParamBuilder::new(&mut store, &mut prng);
            let forward: Box<dyn Fn(&Tensor) -> Result<Tensor>> = if name == "gat_layer" {
                let layer = GatLayer::new(&mut pb.pp("gat"), 3, 6)?;
                let graph = graph.clone();
                Box::new(move |x| layer.forward(x, &graph))
            } else {
                let enc = GraphEncoder::new(&mut pb.pp("graph"), 3, 6, 2)?;
                let graph = graph.clone();
                Box::new(move |x| enc.encode(x, &graph))
            };
            randomize(&store, rng, 0.5)?;
            let x = random_var(rng, &[2, 5, 3])?;
            let xt = x.as_tensor().clone();
            let w = random_var(rng, &[2, 5, 6])?.as_tensor().detach();
            let mut inputs = store_inputs(&store);
            inputs.push(Input::new("x", x));
            (inputs, Box::new(move || Ok((forward(&xt)? * &w)?.sum_all()?)))
        }
        "motion_content_encoder" | "motion_style_encoder" | "audio_content_encoder" | "audio_style_encoder"
        | "identity_encoder" => {
            let cfg = small_config();
            let (mut store, mut prng) = seeded(DType::F64, 9);
            let mut pb = ParamBuilder::new(&mut store, &mut prng);
            let motion_in = random_var(rng, &[2, 8, 6])?;
            let mel_in = random_var(rng, &[2, 12, cfg.mel.n_mels])?;
            let (input, forward): (Option<Input>, Box<dyn Fn() -> Result<Tensor>>) = match name {
                "motion_content_encoder" => {
                    let enc = MotionContentEncoder::new(&mut pb.pp("enc"), 6, &cfg)?;
                    let g = motion_in.as_tensor().clone();
                    (Some(Input::new("g", motion_in)), Box::new(move || enc.forward(&g)))
                }
                "motion_style_encoder" => {
                    let enc = MotionStyleEncoder::new(&mut pb.pp("enc"), 6, &cfg)?;
                    let g = motion_in.as_tensor().clone();
                    (Some(Input::new("g", motion_in)), Box::new(move || Ok(enc.forward(&g)?.0)))
                }
                "audio_content_encoder" => {
                    let enc = AudioContentEncoder::new(&mut pb.pp("enc"), &cfg)?;
                    let mel = mel_in.as_tensor().clone();
                    (Some(Input::new("mel", mel_in)), Box::new(move || enc.forward(&mel, 6)))
                }
                "audio_style_encoder" => {
                    let enc = AudioStyleEncoder::new(&mut pb.pp("enc"), &cfg)?;
                    let mel = mel_in.as_tensor().clone();
                    (Some(Input::new("mel", mel_in)), Box::new(move || Ok(enc.forward(&mel)?.0)))
                }
                _ => {
                    let enc = IdentityEncoder::new(&mut pb.pp("enc"), 3, cfg.style_dim)?;
                    let labels = labels(&[2, 0], 3)?;
                    (None, Box::new(move || enc.forward(&labels)))
                }
            };
            randomize(&store, rng, 0.4)?;
            let mut inputs = store_inputs(&store);
            inputs.extend(input);
            let probe = forward()?;
            let w = random_var(rng, probe.dims())?.as_tensor().detach();
            (inputs, Box::new(move || Ok((forward()? * &w)?.sum_all()?)))
        }
        "decoder_step" => {
            let cfg = small_config();
            let (mut store, mut prng) = seeded(DType::F64, 11);
            let decoder = MotionDecoder::new(&mut ParamBuilder::new(&mut store, &mut prng).pp("dec"), &cfg, 4)?;
            randomize(&store, rng, 0.4)?;
            let history = random_var(rng, &[1, 3, 12])?;
            let audio = random_var(rng, &[1, 6, cfg.audio_content_dim])?;
            let content = random_var(rng, &[1, 6, cfg.motion_content_dim])?;
            let style = random_var(rng, &[1, cfg.style_dim])?;
            let w = random_var(rng, &[1, 3, 12])?.as_tensor().detach();
            let (h, a, c, s) = (
                history.as_tensor().clone(),
                audio.as_tensor().clone(),
                content.as_tensor().clone(),
                style.as_tensor().clone(),
            );
            let mut inputs = store_inputs(&store);
            inputs.extend([
                Input::new("history", history),
                Input::new("audio", audio),
                Input::new("content", content),
                Input::new("style", style),
            ]);
            (
                inputs,
                Box::new(move || Ok((decoder.forward(&h, &a, &c, &s, 6)? * &w)?.sum_all()?)),
            )
        }
        other => return Err(Error::Config(format!("unknown gradient check {other:?}"))),
    })
}

/// Layer checks run alongside the loss registry.
pub const LAYER_CHECKS: [&str; 8] = [
    "gat_layer",
    "graph_encoder",
    "motion_content_encoder",
    "motion_style_encoder",
    "audio_content_encoder",
    "audio_style_encoder",
    "identity_encoder",
    "decoder_step",
];

/// Every check name with its kind, losses first.
pub fn registry() -> Vec<(&'static str, CheckKind)> {
    LOSS_REGISTRY
        .iter()
        .map(|&n| (n, CheckKind::Loss))
        .chain(LAYER_CHECKS.iter().map(|&n| (n, CheckKind::Layer)))
        .collect()
}

/// Runs one named check.
pub fn run_check(name: &str, kind: CheckKind, seed: u64, rtol: f64, corrupt: f64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64)));
    let (inputs, f) = fixture(name, &mut rng)?;
    check_function(name, kind, &inputs, f.as_ref(), rtol, corrupt, &mut rng)
}

/// Runs the full registry plus a negative control whose analytic gradient
/// is deliberately scaled by `1 + 1e-2`; the control passes when the
/// corrupted check fails.
pub fn run_all(seed: u64, rtol: f64) -> Result<Vec<CheckResult>> {
    let mut results = registry()
        .into_iter()
        .map(|(name, kind)| run_check(name, kind, seed, rtol, 1.0))
        .collect::<Result<Vec<_>>>()?;
    let corrupted = run_check("decoder_step", CheckKind::Control, seed, rtol, 1.0 + 1e-2)?;
    results.push(CheckResult {
        name: "negative_control".into(),
        kind: CheckKind::Control,
        elements: corrupted.elements,
        max_error: corrupted.max_error,
        passed: !corrupted.passed,
    });
    Ok(results)
}

pub fn format_table(results: &[CheckResult]) -> String {
    let mut out = format!("{:<24} {:<8} {:>8} {:>12}  result\n", "check", "kind", "elements", "max error");
    for r in results {
        let kind = match r.kind {
            CheckKind::Loss => "loss",
            CheckKind::Layer => "layer",
            CheckKind::Control => "control",
        };
        out += &format!(
            "{:<24} {:<8} {:>8} {:>12.3e}  {}\n",
            r.name,
            kind,
            r.elements,
            r.max_error,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    out
}
