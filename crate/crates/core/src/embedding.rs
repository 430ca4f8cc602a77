//! Speaker embeddings and the vector helpers the rest of the crate is built on.

use thiserror::Error;

/// Embedding dimension of the ECAPA-TDNN configuration the toolkit targets.
pub const DEFAULT_DIM: usize = 192;

/// Condition tag for embeddings of bona-fide (unaltered) speech.
pub const CONDITION_ORIG: &str = "orig";
/// Condition tag for embeddings of bona-fide speech tiled to 15 s.
pub const CONDITION_REPEAT15: &str = "rep15";
/// Prefix for embeddings of speech synthesized by a TTS backend.
pub const CONDITION_TTS_PREFIX: &str = "tts:";
/// Prefix for fused embeddings.
pub const CONDITION_FUSED_PREFIX: &str = "fused:";

/// Condition tag for a TTS backend, optionally qualified by a text round.
pub fn tts_condition(backend: &str, round: Option<usize>) -> String {
    match round {
        Some(r) => format!("{CONDITION_TTS_PREFIX}{backend}/r{r}"),
        None => format!("{CONDITION_TTS_PREFIX}{backend}"),
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VectorError {
    #[error("degenerate input: zero-norm vector")]
    ZeroVector,
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("empty embedding")]
    Empty,
    #[error("empty utterance id")]
    EmptyId,
}

/// A speaker embedding tied to one utterance under one condition.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub utt_id: String,
    pub condition: String,
    pub values: Vec<f32>,
}

impl Embedding {
    /// Builds an embedding, rejecting empty ids, empty vectors and non-finite values.
    pub fn new(
        utt_id: impl Into<String>,
        condition: impl Into<String>,
        values: Vec<f32>,
    ) -> Result<Self, VectorError> {
        let e = Embedding {
            utt_id: utt_id.into(),
            condition: condition.into(),
            values,
        };
        e.validate()?;
        Ok(e)
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn validate(&self) -> Result<(), VectorError> {
        if self.utt_id.is_empty() {
            return Err(VectorError::EmptyId);
        }
        if self.values.is_empty() {
            return Err(VectorError::Empty);
        }
        check_finite(&self.values)
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }

    /// Same utterance and condition with new values.
    pub fn with_values(&self, values: Vec<f32>) -> Embedding {
        Embedding {
            utt_id: self.utt_id.clone(),
            condition: self.condition.clone(),
            values,
        }
    }

    pub fn with_condition(mut self, condition: impl Into<String>) -> Embedding {
        self.condition = condition.into();
        self
    }
}

pub fn check_finite(v: &[f32]) -> Result<(), VectorError> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(VectorError::NonFinite(i)),
        None => Ok(()),
    }
}

pub fn check_same_dim(a: &[f32], b: &[f32]) -> Result<(), VectorError> {
    if a.len() != b.len() {
        return Err(VectorError::DimMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(())
}

/// Euclidean norm, accumulated in f64.
pub fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Scales `v` to unit Euclidean norm.
///
/// ```
/// let u = ttasv::l2_normalize(&[3.0, 4.0]).unwrap();
/// assert!((u[0] - 0.6).abs() < 1e-6 && (u[1] - 0.8).abs() < 1e-6);
/// assert!(ttasv::l2_normalize(&[0.0, 0.0]).is_err());
/// ```
pub fn l2_normalize(v: &[f32]) -> Result<Vec<f32>, VectorError> {
    check_finite(v)?;
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(VectorError::ZeroVector);
    }
    Ok(v.iter().map(|&x| (x as f64 / n) as f32).collect())
}

/// f64 variant used by the training code.
pub fn l2_normalize_f64(v: &[f64]) -> Result<Vec<f64>, VectorError> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(VectorError::ZeroVector);
    }
    Ok(v.iter().map(|x| x / n).collect())
}
