//! Dense embedding vectors and the arithmetic shared by every approach:
//! cosine similarity, stabilized softmax, and prototype averaging.
//!
//! All math runs in f64 regardless of what a backend emitted, so test
//! oracles hold at 1e-9 tolerances.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
        }
    }
}

/// A dense real vector tagged with the item and model that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub item_id: String,
    pub modality: Modality,
    pub model_id: String,
    pub dims: usize,
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(
        item_id: impl Into<String>,
        modality: Modality,
        model_id: impl Into<String>,
        values: Vec<f64>,
    ) -> Result<Self, EmbeddingError> {
        if values.is_empty() {
            return Err(EmbeddingError::EmptyInput);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        Ok(Self {
            item_id: item_id.into(),
            modality,
            model_id: model_id.into(),
            dims: values.len(),
            values,
        })
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// L2-normalized copy; errors on zero norm.
    pub fn normalized(&self) -> Result<EmbeddingVector, EmbeddingError> {
        let norm = self.norm();
        if norm == 0.0 {
            return Err(EmbeddingError::ZeroNormVector);
        }
        let mut out = self.clone();
        for v in &mut out.values {
            *v /= norm;
        }
        Ok(out)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EmbeddingError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("zero-norm vector")]
    ZeroNormVector,
    #[error("empty input")]
    EmptyInput,
    #[error("empty class")]
    EmptyClass,
    #[error("non-finite value")]
    NonFinite,
    #[error("members mix model or modality: {0}")]
    MixedMembers(String),
}

/// Cosine similarity, clamped to [-1, 1].
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    if a.dims != b.dims {
        return Err(EmbeddingError::DimensionMismatch {
            expected: a.dims,
            got: b.dims,
        });
    }
    let norm_a = a.norm();
    let norm_b = b.norm();
    if norm_a == 0.0 || norm_b == 0.0 {
        return Err(EmbeddingError::ZeroNormVector);
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((dot / (norm_a * norm_b)).clamp(-1.0, 1.0))
}

/// Max-subtraction stabilized softmax. Output sums to 1 and preserves argmax.
pub fn softmax(scores: &[f64]) -> Result<Vec<f64>, EmbeddingError> {
    if scores.is_empty() {
        return Err(EmbeddingError::EmptyInput);
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(EmbeddingError::NonFinite);
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Element-wise mean of a non-empty set of same-shape embeddings.
///
/// Members are summed in item_id order so that any permutation of the set
/// yields a bit-identical prototype. The synthetic id hashes the member ids.
pub fn class_prototype(members: &[EmbeddingVector]) -> Result<EmbeddingVector, EmbeddingError> {
    let first = members.first().ok_or(EmbeddingError::EmptyClass)?;
    for member in members {
        if member.dims != first.dims {
            return Err(EmbeddingError::DimensionMismatch {
                expected: first.dims,
                got: member.dims,
            });
        }
        if member.model_id != first.model_id || member.modality != first.modality {
            return Err(EmbeddingError::MixedMembers(format!(
                "{}:{} vs {}:{}",
                first.model_id,
                first.modality.as_str(),
                member.model_id,
                member.modality.as_str()
            )));
        }
    }
    let mut ordered: Vec<&EmbeddingVector> = members.iter().collect();
    ordered.sort_by(|a, b| a.item_id.cmp(&b.item_id));

    let mut sums = vec![0.0f64; first.dims];
    for member in &ordered {
        for (acc, v) in sums.iter_mut().zip(&member.values) {
            *acc += v;
        }
    }
    let n = members.len() as f64;
    for v in &mut sums {
        *v /= n;
    }

    let mut hasher = Sha256::new();
    for member in &ordered {
        hasher.update(member.item_id.as_bytes());
        hasher.update([0x1f]);
    }
    let digest = hasher.finalize();
    let id = format!("prototype:{}", hex::encode(&digest[..8]));
    EmbeddingVector::new(id, first.modality, first.model_id.clone(), sums)
}
