//! Linear classifier head trained on frozen embeddings with cross-entropy
//! loss. The backbone never changes: only the `C x D` weight matrix and
//! bias vector are learned.
//!
//! Training is deterministic given the config seed: fixed uniform(±1/sqrt(D))
//! init, fixed shuffle order, sequential gradient accumulation.

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::CesClass;
use crate::embedding::{softmax, EmbeddingVector};
use crate::metrics::{compute, MetricsReport, Prediction};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("class {0} has no training samples")]
    MissingClass(CesClass),
    #[error("label {0} unknown to this probe")]
    UnknownClass(CesClass),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    AdamDecoupledDecay,
}

/// Training hyperparameters. The two named presets carry the published
/// text-side and vision-side settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl TrainConfig {
    /// Caption-embedding probes: 5 epochs, batch 16, lr 2e-5, decay 0.01.
    pub fn text_probe() -> Self {
        Self {
            epochs: 5,
            batch_size: 16,
            learning_rate: 2e-5,
            weight_decay: 0.01,
            seed: 42,
            optimizer: Optimizer::AdamDecoupledDecay,
        }
    }

    /// Visual-embedding probes: 100 epochs, lr 2e-3.
    pub fn vision_probe() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            learning_rate: 2e-3,
            weight_decay: 0.0,
            seed: 42,
            optimizer: Optimizer::AdamDecoupledDecay,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "text-probe" => Some(Self::text_probe()),
            "vision-probe" => Some(Self::vision_probe()),
            _ => None,
        }
    }

    fn validate(&self) -> Result<(), ProbeError> {
        if self.epochs < 1 {
            return Err(ProbeError::InvalidConfig("epochs must be >= 1".to_string()));
        }
        if self.batch_size < 1 {
            return Err(ProbeError::InvalidConfig("batch_size must be >= 1".to_string()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(ProbeError::InvalidConfig("learning_rate must be > 0".to_string()));
        }
        if self.weight_decay < 0.0 {
            return Err(ProbeError::InvalidConfig("weight_decay must be >= 0".to_string()));
        }
        Ok(())
    }
}

/// The trained head: row-major `C x D` weights plus a length-C bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub classes: Vec<CesClass>,
    pub dims: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub trained_on: String,
}

impl ProbeModel {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    fn class_index(&self, class: CesClass) -> Result<usize, ProbeError> {
        self.classes
            .iter()
            .position(|c| *c == class)
            .ok_or(ProbeError::UnknownClass(class))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub final_train_accuracy: f64,
    pub config: TrainConfig,
    pub wall_time_ms: u64,
}

fn logits(model: &ProbeModel, values: &[f64]) -> Vec<f64> {
    let c = model.n_classes();
    let d = model.dims;
    let mut out = model.bias.clone();
    for (row, slot) in out.iter_mut().enumerate().take(c) {
        let weights = &model.weights[row * d..(row + 1) * d];
        let mut acc = 0.0;
        for (w, x) in weights.iter().zip(values) {
            acc += w * x;
        }
        *slot += acc;
    }
    out
}

/// Class probabilities for one embedding: softmax(Wx + b).
pub fn forward(model: &ProbeModel, x: &EmbeddingVector) -> Result<Vec<f64>, ProbeError> {
    if x.dims != model.dims {
        return Err(ProbeError::DimensionMismatch {
            expected: model.dims,
            got: x.dims,
        });
    }
    softmax(&logits(model, &x.values)).map_err(|_| ProbeError::NonFiniteLoss { epoch: 0 })
}

/// Gradients of the mean batch cross-entropy with respect to W and b.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Mean cross-entropy over the batch and its analytic gradient
/// (`softmax - onehot` propagated to W and b). Weight decay is decoupled:
/// it is applied at the update step, never inside this gradient.
pub fn loss_and_grad(
    model: &ProbeModel,
    batch: &[(&EmbeddingVector, CesClass)],
) -> Result<(f64, Gradients), ProbeError> {
    if batch.is_empty() {
        return Err(ProbeError::EmptyBatch);
    }
    let c = model.n_classes();
    let d = model.dims;
    let mut grad_w = vec![0.0f64; c * d];
    let mut grad_b = vec![0.0f64; c];
    let mut loss = 0.0f64;
    let inv_n = 1.0 / batch.len() as f64;

    for (x, label) in batch {
        if x.dims != d {
            return Err(ProbeError::DimensionMismatch {
                expected: d,
                got: x.dims,
            });
        }
        let target = model.class_index(*label)?;
        let probs = softmax(&logits(model, &x.values))
            .map_err(|_| ProbeError::NonFiniteLoss { epoch: 0 })?;
        loss -= probs[target].max(1e-300).ln() * inv_n;
        for (row, p) in probs.iter().enumerate() {
            let delta = (p - if row == target { 1.0 } else { 0.0 }) * inv_n;
            grad_b[row] += delta;
            let w_row = &mut grad_w[row * d..(row + 1) * d];
            for (g, v) in w_row.iter_mut().zip(&x.values) {
                *g += delta * v;
            }
        }
    }
    if !loss.is_finite() {
        return Err(ProbeError::NonFiniteLoss { epoch: 0 });
    }
    Ok((
        loss,
        Gradients {
            weights: grad_w,
            bias: grad_b,
        },
    ))
}

struct AdamState {
    m_w: Vec<f64>,
    v_w: Vec<f64>,
    m_b: Vec<f64>,
    v_b: Vec<f64>,
    step: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn adam_update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, step: u64) {
    let bias1 = 1.0 - ADAM_BETA1.powi(step as i32);
    let bias2 = 1.0 - ADAM_BETA2.powi(step as i32);
    for i in 0..param.len() {
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * grad[i];
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
        let m_hat = m[i] / bias1;
        let v_hat = v[i] / bias2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// Train a probe on labeled embeddings. Classes are the distinct labels in
/// taxonomy order; every class needs at least one sample.
pub fn train_probe(
    features: &[(EmbeddingVector, CesClass)],
    config: &TrainConfig,
) -> Result<(ProbeModel, TrainReport), ProbeError> {
    config.validate()?;
    let started = Instant::now();
    let (first, _) = features.first().ok_or(ProbeError::EmptyBatch)?;
    let d = first.dims;
    for (x, _) in features {
        if x.dims != d {
            return Err(ProbeError::DimensionMismatch {
                expected: d,
                got: x.dims,
            });
        }
    }
    let classes: Vec<CesClass> = CesClass::ALL
        .iter()
        .filter(|c| features.iter().any(|(_, label)| label == *c))
        .cloned()
        .collect();
    for class in &classes {
        if !features.iter().any(|(_, l)| l == class) {
            return Err(ProbeError::MissingClass(*class));
        }
    }
    let c = classes.len();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let bound = 1.0 / (d as f64).sqrt();
    let weights: Vec<f64> = (0..c * d).map(|_| rng.gen_range(-bound..bound)).collect();
    let mut model = ProbeModel {
        classes,
        dims: d,
        weights,
        bias: vec![0.0; c],
        trained_on: first.model_id.clone(),
    };

    let mut adam = AdamState {
        m_w: vec![0.0; c * d],
        v_w: vec![0.0; c * d],
        m_b: vec![0.0; c],
        v_b: vec![0.0; c],
        step: 0,
    };

    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(&EmbeddingVector, CesClass)> =
                chunk.iter().map(|&i| (&features[i].0, features[i].1)).collect();
            let (loss, grads) = loss_and_grad(&model, &batch)?;
            epoch_loss += loss * batch.len() as f64;
            match config.optimizer {
                Optimizer::Sgd => {
                    for (w, g) in model.weights.iter_mut().zip(&grads.weights) {
                        *w -= config.learning_rate * g;
                    }
                    for (b, g) in model.bias.iter_mut().zip(&grads.bias) {
                        *b -= config.learning_rate * g;
                    }
                }
                Optimizer::AdamDecoupledDecay => {
                    adam.step += 1;
                    adam_update(
                        &mut model.weights,
                        &grads.weights,
                        &mut adam.m_w,
                        &mut adam.v_w,
                        config.learning_rate,
                        adam.step,
                    );
                    adam_update(
                        &mut model.bias,
                        &grads.bias,
                        &mut adam.m_b,
                        &mut adam.v_b,
                        config.learning_rate,
                        adam.step,
                    );
                }
            }
            if config.weight_decay > 0.0 {
                let shrink = config.learning_rate * config.weight_decay;
                for w in &mut model.weights {
                    *w -= shrink * *w;
                }
            }
        }
        let mean = epoch_loss / features.len() as f64;
        if !mean.is_finite() {
            return Err(ProbeError::NonFiniteLoss { epoch });
        }
        epoch_losses.push(mean);
    }

    let mut correct = 0usize;
    for (x, label) in features {
        let probs = forward(&model, x)?;
        let arg = argmax(&probs);
        if model.classes[arg] == *label {
            correct += 1;
        }
    }
    let report = TrainReport {
        epoch_losses,
        final_train_accuracy: 100.0 * correct as f64 / features.len() as f64,
        config: config.clone(),
        wall_time_ms: started.elapsed().as_millis() as u64,
    };
    Ok((model, report))
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Classify a test set and delegate scoring to the metrics module.
pub fn evaluate_probe(
    model: &ProbeModel,
    test: &[(EmbeddingVector, CesClass)],
) -> Result<MetricsReport, ProbeError> {
    let mut preds = Vec::with_capacity(test.len());
    let mut truth = Vec::with_capacity(test.len());
    for (x, label) in test {
        model.class_index(*label)?;
        let probs = forward(model, x)?;
        let predicted = model.classes[argmax(&probs)];
        preds.push((x.item_id.clone(), Prediction::Class(predicted)));
        truth.push((x.item_id.clone(), *label));
    }
    Ok(compute(&preds, &truth, &model.classes)?)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"CESPROBE";
const CHECKPOINT_VERSION: u32 = 1;

/// Binary checkpoint: magic, version, C, D, model id, class names,
/// then little-endian f64 weights (row-major) and bias.
pub fn save_checkpoint(model: &ProbeModel, path: &Path) -> Result<(), ProbeError> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(CHECKPOINT_MAGIC)?;
    file.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    file.write_all(&(model.n_classes() as u32).to_le_bytes())?;
    file.write_all(&(model.dims as u32).to_le_bytes())?;
    let model_id = model.trained_on.as_bytes();
    file.write_all(&(model_id.len() as u32).to_le_bytes())?;
    file.write_all(model_id)?;
    for class in &model.classes {
        let name = class.canonical_name().as_bytes();
        file.write_all(&(name.len() as u32).to_le_bytes())?;
        file.write_all(name)?;
    }
    for w in &model.weights {
        file.write_all(&w.to_le_bytes())?;
    }
    for b in &model.bias {
        file.write_all(&b.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ProbeModel, ProbeError> {
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ProbeError::BadCheckpoint("bad magic".to_string()));
    }
    let mut u32_buf = [0u8; 4];
    let mut read_u32 = |file: &mut std::fs::File| -> Result<u32, ProbeError> {
        file.read_exact(&mut u32_buf)?;
        Ok(u32::from_le_bytes(u32_buf))
    };
    let version = read_u32(&mut file)?;
    if version != CHECKPOINT_VERSION {
        return Err(ProbeError::BadCheckpoint(format!("unsupported version {version}")));
    }
    let c = read_u32(&mut file)? as usize;
    let d = read_u32(&mut file)? as usize;
    let id_len = read_u32(&mut file)? as usize;
    let mut id_bytes = vec![0u8; id_len];
    file.read_exact(&mut id_bytes)?;
    let trained_on = String::from_utf8(id_bytes)
        .map_err(|_| ProbeError::BadCheckpoint("model id not utf-8".to_string()))?;
    let mut classes = Vec::with_capacity(c);
    for _ in 0..c {
        let len = read_u32(&mut file)? as usize;
        let mut bytes = vec![0u8; len];
        file.read_exact(&mut bytes)?;
        let name = String::from_utf8(bytes)
            .map_err(|_| ProbeError::BadCheckpoint("class name not utf-8".to_string()))?;
        let class = CesClass::parse(&name)
            .ok_or_else(|| ProbeError::BadCheckpoint(format!("unknown class `{name}`")))?;
        classes.push(class);
    }
    let mut f64_buf = [0u8; 8];
    let mut weights = Vec::with_capacity(c * d);
    for _ in 0..c * d {
        file.read_exact(&mut f64_buf)?;
        weights.push(f64::from_le_bytes(f64_buf));
    }
    let mut bias = Vec::with_capacity(c);
    for _ in 0..c {
        file.read_exact(&mut f64_buf)?;
        bias.push(f64::from_le_bytes(f64_buf));
    }
    Ok(ProbeModel {
        classes,
        dims: d,
        weights,
        bias,
        trained_on,
    })
}
