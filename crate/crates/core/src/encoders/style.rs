use candle_core::Tensor;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StyleSource {
    Audio,
    Motion,
    Identity,
    Fused,
}

/// Fixed-length style latent together with where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleCode {
    pub vector: Vec<f64>,
    pub source: StyleSource,
}

impl StyleCode {
    pub fn new(vector: Vec<f64>, source: StyleSource) -> Result<Self> {
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("style code contains non-finite values".into()));
        }
        Ok(Self { vector, source })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// `s = s_a + s_m + s_p`.
pub fn fuse_styles(audio: &StyleCode, motion: &StyleCode, identity: &StyleCode) -> Result<StyleCode> {
    let d = audio.dim();
    if motion.dim() != d || identity.dim() != d {
        return Err(Error::Config(format!(
            "style dimensions differ: audio {d}, motion {}, identity {}",
            motion.dim(),
            identity.dim()
        )));
    }
    let vector = (0..d)
        .map(|i| audio.vector[i] + motion.vector[i] + identity.vector[i])
        .collect();
    StyleCode::new(vector, StyleSource::Fused)
}

/// Tensor form of the fusion over `(B, D_s)` batches; absent branches are
/// skipped.
pub fn fuse_style_tensors(parts: &[Option<&Tensor>]) -> Result<Tensor> {
    let mut present = parts.iter().flatten();
    let first = present
        .next()
        .ok_or_else(|| Error::Config("at least one style branch is required".into()))?;
    let mut sum = (*first).clone();
    for t in present {
        if t.dims() != sum.dims() {
            return Err(Error::Config(format!(
                "style tensors differ in shape: {:?} vs {:?}",
                sum.dims(),
                t.dims()
            )));
        }
        sum = (sum + *t)?;
    }
    Ok(sum)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code(v: &[f64], s: StyleSource) -> StyleCode {
        StyleCode::new(v.to_vec(), s).unwrap()
    }

    #[test]
    fn zeros_fuse_to_zero() {
        let z = code(&[0.0; 4], StyleSource::Audio);
        let f = fuse_styles(&z, &z, &z).unwrap();
        assert_eq!(f.vector, vec![0.0; 4]);
        assert_eq!(f.source, StyleSource::Fused);
    }

    #[test]
    fn basis_vectors_sum() {
        let e1 = code(&[1.0, 0.0, 0.0], StyleSource::Audio);
        let e2 = code(&[0.0, 1.0, 0.0], StyleSource::Motion);
        let e3 = code(&[0.0, 0.0, 1.0], StyleSource::Identity);
        assert_eq!(fuse_styles(&e1, &e2, &e3).unwrap().vector, vec![1.0, 1.0, 1.0]);
        // Any argument order gives the same vector.
        assert_eq!(fuse_styles(&e3, &e1, &e2).unwrap().vector, vec![1.0, 1.0, 1.0]);
        assert_eq!(fuse_styles(&e2, &e3, &e1).unwrap().vector, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn mismatched_dims_are_config_errors() {
        let a = code(&[1.0, 2.0], StyleSource::Audio);
        let b = code(&[1.0], StyleSource::Motion);
        assert!(matches!(fuse_styles(&a, &b, &a), Err(Error::Config(_))));
    }
}
