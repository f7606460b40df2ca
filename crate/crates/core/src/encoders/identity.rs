use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::ops;
use crate::params::{Init, ParamBuilder};

/// One-hot speaker identity over `K` training speakers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct IdentityLabel {
    index: usize,
    classes: usize,
}

impl IdentityLabel {
    pub fn new(index: usize, classes: usize) -> Result<Self> {
        if index >= classes {
            return Err(Error::Input(format!("identity {index} out of range for {classes} speakers")));
        }
        Ok(Self { index, classes })
    }

    /// Validates a one-hot vector: exactly one entry equal to 1, the rest 0.
    pub fn from_one_hot(one_hot: &[f64]) -> Result<Self> {
        let nonzero: Vec<usize> = (0..one_hot.len()).filter(|&i| one_hot[i] != 0.0).collect();
        match nonzero.as_slice() {
            [i] if one_hot[*i] == 1.0 => Self::new(*i, one_hot.len()),
            _ => Err(Error::Input(format!(
                "identity vector must have exactly one entry equal to 1, found {} nonzero",
                nonzero.len()
            ))),
        }
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn one_hot(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.classes];
        v[self.index] = 1.0;
        v
    }
}

/// Identity style encoder: a personalized embedding (linear map of the
/// one-hot) attends over itself and a common per-index embedding; the
/// attention context is added back onto the personalized embedding.
#[derive(Debug, Clone)]
pub struct IdentityEncoder {
    personalized: Linear,
    common: Tensor,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    classes: usize,
}

impl IdentityEncoder {
    pub fn new(pb: &mut ParamBuilder, classes: usize, style_dim: usize) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Config("identity encoder needs at least one speaker".into()));
        }
        Ok(Self {
            personalized: Linear::no_bias(&mut pb.pp("personalized"), classes, style_dim)?,
            common: pb.tensor("common", (classes, style_dim), Init::Uniform(1.0))?,
            query: Linear::no_bias(&mut pb.pp("query"), style_dim, style_dim)?,
            key: Linear::no_bias(&mut pb.pp("key"), style_dim, style_dim)?,
            value: Linear::no_bias(&mut pb.pp("value"), style_dim, style_dim)?,
            out: Linear::new(&mut pb.pp("out"), style_dim, style_dim)?,
            classes,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Returns `s_p` of shape `(B, D_s)`.
    pub fn forward(&self, labels: &[IdentityLabel]) -> Result<Tensor> {
        if labels.is_empty() {
            return Err(Error::Input("no identity labels".into()));
        }
        if let Some(l) = labels.iter().find(|l| l.classes() != self.classes) {
            return Err(Error::Input(format!(
                "identity label over {} speakers, encoder expects {}",
                l.classes(),
                self.classes
            )));
        }
        let dtype = self.common.dtype();
        let b = labels.len();
        let one_hot = ops::from_f64(labels.iter().flat_map(|l| l.one_hot()).collect(), (b, self.classes), dtype)?;
        let idx = Tensor::new(labels.iter().map(|l| l.index() as u32).collect::<Vec<_>>(), self.common.device())?;

        let personalized = self.personalized.forward(&one_hot)?;
        let common = self.common.index_select(&idx, 0)?;
        let pair = Tensor::stack(&[&personalized, &common], 1)?; // (B, 2, D)
        let d = personalized.dim(1)?;
        let q = self.query.forward(&personalized)?.unsqueeze(1)?; // (B, 1, D)
        let k = self.key.forward(&pair)?;
        let v = self.value.forward(&pair)?;
        let scores = q.matmul(&k.transpose(1, 2)?.contiguous()?)?.affine(1.0 / (d as f64).sqrt(), 0.0)?;
        let attn = ops::softmax_last(&scores)?; // (B, 1, 2)
        let context = attn.matmul(&v)?.squeeze(1)?;
        let context = self.out.forward(&context)?;
        Ok((personalized + context)?)
    }
}
