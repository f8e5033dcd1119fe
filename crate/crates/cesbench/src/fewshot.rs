//! Prototype-based few-shot classification over frozen embeddings.
//!
//! Each trial samples a support set, averages its embeddings per class into
//! prototypes, and assigns every query to the prototype with the highest
//! cosine similarity (softmax-normalized). Trials repeat over derived seeds
//! and summarize as mean ± standard deviation per shot count.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    sample_support_set, sample_support_unchecked, CesClass, DatasetError, DatasetManifest,
};
use crate::embedding::{
    class_prototype, cosine_similarity, softmax, EmbeddingError, EmbeddingVector,
};
use crate::metrics::{compute, MetricsError, MetricsReport, Prediction};

#[derive(Debug, Error)]
pub enum FewShotError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("no embedding available for item `{0}`")]
    MissingEmbedding(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// Few-shot experiment parameters. `shots` outside 1..=10 requires
/// `allow_wide_shots`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotConfig {
    pub shots: u32,
    pub trials: u32,
    pub base_seed: u64,
    pub model_id: String,
    #[serde(default)]
    pub normalize_before_average: bool,
    #[serde(default)]
    pub allow_wide_shots: bool,
}

impl FewShotConfig {
    pub fn new(shots: u32, model_id: &str) -> Self {
        Self {
            shots,
            trials: 30,
            base_seed: 42,
            model_id: model_id.to_string(),
            normalize_before_average: false,
            allow_wide_shots: false,
        }
    }

    fn validate(&self) -> Result<(), FewShotError> {
        if self.trials < 1 {
            return Err(FewShotError::InvalidConfig("trials must be >= 1".to_string()));
        }
        if !self.allow_wide_shots && !(1..=10).contains(&self.shots) {
            return Err(FewShotError::InvalidConfig(format!(
                "shots {} outside 1..=10 without allow_wide_shots",
                self.shots
            )));
        }
        Ok(())
    }
}

/// The verdict for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryDecision {
    pub class: CesClass,
    /// Softmax over prototype similarities, prototype-key order.
    pub probabilities: Vec<f64>,
    /// True when the top similarity was shared and taxonomy order decided.
    pub tie: bool,
}

/// Score a query against class prototypes: cosine similarity per prototype,
/// softmax-normalized; the class of the most similar prototype wins.
/// Exact similarity ties break by taxonomy order and are reported.
pub fn classify_query(
    prototypes: &BTreeMap<CesClass, EmbeddingVector>,
    query: &EmbeddingVector,
) -> Result<QueryDecision, FewShotError> {
    if prototypes.is_empty() {
        return Err(FewShotError::InvalidConfig("no prototypes".to_string()));
    }
    let mut scores = Vec::with_capacity(prototypes.len());
    let mut classes = Vec::with_capacity(prototypes.len());
    for (class, prototype) in prototypes {
        scores.push(cosine_similarity(prototype, query)?);
        classes.push(*class);
    }
    let probabilities = softmax(&scores)?;
    let mut best = 0usize;
    for (i, score) in scores.iter().enumerate() {
        if *score > scores[best] {
            best = i;
        }
    }
    let tie = scores
        .iter()
        .enumerate()
        .any(|(i, s)| i != best && *s == scores[best]);
    Ok(QueryDecision {
        class: classes[best],
        probabilities,
        tie,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FewShotTrialResult {
    pub seed: u64,
    pub metrics: MetricsReport,
    pub prototype_ids: BTreeMap<CesClass, String>,
    pub tie_count: u64,
}

/// Run one trial: sample support, build prototypes, classify the full query
/// complement, and score it.
pub fn run_trial(
    manifest: &DatasetManifest,
    embeddings: &BTreeMap<String, EmbeddingVector>,
    config: &FewShotConfig,
    seed: u64,
) -> Result<FewShotTrialResult, FewShotError> {
    config.validate()?;
    let partition = if config.allow_wide_shots {
        sample_support_unchecked(manifest, config.shots, seed)?
    } else {
        sample_support_set(manifest, config.shots, seed)?
    };

    let lookup = |id: &str| -> Result<&EmbeddingVector, FewShotError> {
        embeddings
            .get(id)
            .ok_or_else(|| FewShotError::MissingEmbedding(id.to_string()))
    };

    let mut prototypes = BTreeMap::new();
    let mut prototype_ids = BTreeMap::new();
    for (class, records) in &partition.support {
        let mut members = Vec::with_capacity(records.len());
        for record in records {
            let embedding = lookup(&record.id)?;
            if config.normalize_before_average {
                members.push(embedding.normalized()?);
            } else {
                members.push(embedding.clone());
            }
        }
        let prototype = class_prototype(&members)?;
        prototype_ids.insert(*class, prototype.item_id.clone());
        prototypes.insert(*class, prototype);
    }

    let mut preds = Vec::with_capacity(partition.query.len());
    let mut truth = Vec::with_capacity(partition.query.len());
    let mut tie_count = 0u64;
    for record in &partition.query {
        let decision = classify_query(&prototypes, lookup(&record.id)?)?;
        if decision.tie {
            tie_count += 1;
        }
        preds.push((record.id.clone(), Prediction::Class(decision.class)));
        truth.push((record.id.clone(), record.label.expect("query records are labeled")));
    }
    let metrics = compute(&preds, &truth, &manifest.taxonomy)?;
    Ok(FewShotTrialResult {
        seed,
        metrics,
        prototype_ids,
        tie_count,
    })
}

/// Mean and standard deviation for one metric across trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std_dev: f64,
}

fn summarize(values: &[f64]) -> MetricSummary {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let variance = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MetricSummary {
        mean,
        std_dev: variance.sqrt(),
    }
}

/// Averaged results for one shot count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShotSummary {
    pub shots: u32,
    pub trials: u32,
    pub precision: MetricSummary,
    pub recall: MetricSummary,
    pub accuracy: MetricSummary,
    /// Mean per-class accuracy over trials, percent.
    pub per_class_accuracy: BTreeMap<CesClass, f64>,
    pub trial_seeds: Vec<u64>,
    pub tie_count: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub model_id: String,
    pub base_seed: u64,
    pub per_shot: Vec<ShotSummary>,
}

impl ExperimentReport {
    /// Shots-vs-accuracy curve as CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "shots,trials,precision_mean,precision_std,recall_mean,recall_std,accuracy_mean,accuracy_std\n",
        );
        for row in &self.per_shot {
            out.push_str(&format!(
                "{},{},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2}\n",
                row.shots,
                row.trials,
                row.precision.mean,
                row.precision.std_dev,
                row.recall.mean,
                row.recall.std_dev,
                row.accuracy.mean,
                row.accuracy.std_dev,
            ));
        }
        out
    }
}

/// Run `config.trials` trials per requested shot count, seeds derived as
/// `base_seed + trial_index`, and average the metrics arithmetically.
pub fn run_experiment(
    manifest: &DatasetManifest,
    embeddings: &BTreeMap<String, EmbeddingVector>,
    shot_counts: &[u32],
    config: &FewShotConfig,
) -> Result<ExperimentReport, FewShotError> {
    if shot_counts.is_empty() {
        return Err(FewShotError::InvalidConfig("no shot counts requested".to_string()));
    }
    let mut per_shot = Vec::with_capacity(shot_counts.len());
    for &shots in shot_counts {
        let trial_config = FewShotConfig {
            shots,
            ..config.clone()
        };
        trial_config.validate()?;
        let mut precisions = Vec::with_capacity(config.trials as usize);
        let mut recalls = Vec::with_capacity(config.trials as usize);
        let mut accuracies = Vec::with_capacity(config.trials as usize);
        let mut trial_seeds = Vec::with_capacity(config.trials as usize);
        let mut per_class_sums: BTreeMap<CesClass, f64> = BTreeMap::new();
        let mut tie_count = 0u64;
        for trial in 0..config.trials {
            let seed = config.base_seed + trial as u64;
            let result = run_trial(manifest, embeddings, &trial_config, seed)?;
            precisions.push(result.metrics.macro_precision);
            recalls.push(result.metrics.macro_recall);
            accuracies.push(result.metrics.accuracy);
            for (class, pct) in crate::metrics::per_class_accuracy(&result.metrics)? {
                *per_class_sums.entry(class).or_insert(0.0) += pct;
            }
            trial_seeds.push(seed);
            tie_count += result.tie_count;
        }
        let per_class_accuracy = per_class_sums
            .into_iter()
            .map(|(class, sum)| (class, sum / config.trials as f64))
            .collect();
        per_shot.push(ShotSummary {
            shots,
            trials: config.trials,
            precision: summarize(&precisions),
            recall: summarize(&recalls),
            accuracy: summarize(&accuracies),
            per_class_accuracy,
            trial_seeds,
            tie_count,
        });
    }
    Ok(ExperimentReport {
        model_id: config.model_id.clone(),
        base_seed: config.base_seed,
        per_shot,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ImageRecord;
    use crate::embedding::Modality;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn embed(id: &str, values: Vec<f64>) -> EmbeddingVector {
        EmbeddingVector::new(id, Modality::Image, "mock-lvm", values).unwrap()
    }

    fn axis_prototypes(n: usize) -> BTreeMap<CesClass, EmbeddingVector> {
        CesClass::ALL[..n]
            .iter()
            .map(|class| {
                let mut values = vec![0.0; 6];
                values[class.index()] = 1.0;
                (*class, embed(&format!("proto{}", class.index()), values))
            })
            .collect()
    }

    /// Manifest with `per_class` records per class and embeddings equal to
    /// the class centroid plus seeded jitter.
    fn geometry(
        per_class: usize,
        jitter: f64,
        seed: u64,
    ) -> (DatasetManifest, BTreeMap<String, EmbeddingVector>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut records = Vec::new();
        let mut embeddings = BTreeMap::new();
        for class in CesClass::ALL {
            for i in 0..per_class {
                let id = format!("{}_{i}", class.index());
                records.push(ImageRecord {
                    id: id.clone(),
                    source: format!("mock://{id}"),
                    label: Some(class),
                    metadata: Default::default(),
                });
                let mut values = vec![0.0f64; 8];
                values[class.index()] = 4.0;
                if jitter > 0.0 {
                    for v in &mut values {
                        *v += rng.gen_range(-jitter..jitter);
                    }
                }
                embeddings.insert(id.clone(), embed(&id, values));
            }
        }
        (DatasetManifest::new("geo", "1", records), embeddings)
    }

    #[test]
    fn query_identical_to_prototype_wins_strictly() {
        let prototypes = axis_prototypes(6);
        let query = embed("q", prototypes[&CesClass::Gastronomy].values.clone());
        let decision = classify_query(&prototypes, &query).unwrap();
        assert_eq!(decision.class, CesClass::Gastronomy);
        assert!(!decision.tie);
        let own = decision.probabilities[CesClass::Gastronomy.index()];
        for (i, p) in decision.probabilities.iter().enumerate() {
            if i != CesClass::Gastronomy.index() {
                assert!(own > *p);
            }
        }
    }

    #[test]
    fn equidistant_tie_breaks_by_taxonomy_order_and_is_recorded() {
        let mut prototypes = BTreeMap::new();
        prototypes.insert(CesClass::FaunaFlora, embed("p1", vec![1.0, 0.0]));
        prototypes.insert(CesClass::Sports, embed("p2", vec![0.0, 1.0]));
        let query = embed("q", vec![1.0, 1.0]);
        let decision = classify_query(&prototypes, &query).unwrap();
        assert_eq!(decision.class, CesClass::FaunaFlora);
        assert!(decision.tie);
    }

    #[test]
    fn predictions_match_exhaustive_nearest_prototype_oracle() {
        let prototypes = axis_prototypes(6);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let values: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            if values.iter().map(|v| v * v).sum::<f64>() < 1e-9 {
                continue;
            }
            let query = embed("q", values);
            let decision = classify_query(&prototypes, &query).unwrap();
            // Oracle: brute-force the most similar prototype.
            let best = prototypes
                .iter()
                .map(|(c, p)| (*c, cosine_similarity(p, &query).unwrap()))
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(decision.class, best);
        }
    }

    #[test]
    fn prediction_invariant_under_query_rescaling() {
        let prototypes = axis_prototypes(6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let values: Vec<f64> = (0..6).map(|_| rng.gen_range(0.1..1.0)).collect();
            let query = embed("q", values.clone());
            let scaled = embed("q2", values.iter().map(|v| v * 250.0).collect());
            let a = classify_query(&prototypes, &query).unwrap();
            let b = classify_query(&prototypes, &scaled).unwrap();
            assert_eq!(a.class, b.class);
        }
    }

    #[test]
    fn trial_with_centroid_embeddings_is_perfect() {
        let (manifest, embeddings) = geometry(12, 0.0, 1);
        let config = FewShotConfig::new(1, "mock-lvm");
        let result = run_trial(&manifest, &embeddings, &config, 0).unwrap();
        assert_eq!(result.metrics.accuracy, 100.0);
        assert_eq!(result.metrics.item_count, 6 * 11);
    }

    #[test]
    fn same_seed_gives_identical_trials() {
        let (manifest, embeddings) = geometry(12, 0.2, 5);
        let config = FewShotConfig::new(3, "mock-lvm");
        let a = run_trial(&manifest, &embeddings, &config, 9).unwrap();
        let b = run_trial(&manifest, &embeddings, &config, 9).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.prototype_ids, b.prototype_ids);
    }

    #[test]
    fn single_trial_average_equals_the_trial() {
        let (manifest, embeddings) = geometry(12, 0.3, 2);
        let mut config = FewShotConfig::new(2, "mock-lvm");
        config.trials = 1;
        let report = run_experiment(&manifest, &embeddings, &[2], &config).unwrap();
        let trial = run_trial(&manifest, &embeddings, &config, config.base_seed).unwrap();
        assert_eq!(report.per_shot[0].accuracy.mean, trial.metrics.accuracy);
        assert_eq!(report.per_shot[0].accuracy.std_dev, 0.0);
    }

    #[test]
    fn accuracy_nondecreasing_in_class_separation() {
        // Sweep the centroid scale from zero (pure noise) to large; mean
        // accuracy must not decrease.
        let mut last = 0.0f64;
        for (step, scale) in [0.0f64, 1.0, 4.0].iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(33);
            let mut records = Vec::new();
            let mut embeddings = BTreeMap::new();
            for class in CesClass::ALL {
                for i in 0..10 {
                    let id = format!("s{step}_{}_{i}", class.index());
                    records.push(ImageRecord {
                        id: id.clone(),
                        source: format!("mock://{id}"),
                        label: Some(class),
                        metadata: Default::default(),
                    });
                    let mut values = vec![0.0f64; 8];
                    values[class.index()] = *scale;
                    for v in &mut values {
                        *v += rng.gen_range(-0.5..0.5);
                    }
                    embeddings.insert(id.clone(), embed(&id, values));
                }
            }
            let manifest = DatasetManifest::new("sweep", "1", records);
            let mut config = FewShotConfig::new(3, "mock-lvm");
            config.trials = 5;
            let report = run_experiment(&manifest, &embeddings, &[3], &config).unwrap();
            let mean = report.per_shot[0].accuracy.mean;
            assert!(
                mean >= last - 1e-9,
                "accuracy decreased: {last} -> {mean} at scale {scale}"
            );
            last = mean;
        }
        assert!(last > 95.0, "large separation should be near-perfect: {last}");
    }

    #[test]
    fn averaging_is_permutation_invariant() {
        // The mean over trials does not depend on trial order; recompute it
        // from individually collected trial metrics in reverse order.
        let (manifest, embeddings) = geometry(12, 0.4, 8);
        let mut config = FewShotConfig::new(2, "mock-lvm");
        config.trials = 6;
        let report = run_experiment(&manifest, &embeddings, &[2], &config).unwrap();
        let mut accs: Vec<f64> = (0..6)
            .map(|t| {
                run_trial(&manifest, &embeddings, &config, config.base_seed + t)
                    .unwrap()
                    .metrics
                    .accuracy
            })
            .collect();
        accs.reverse();
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((report.per_shot[0].accuracy.mean - mean).abs() < 1e-12);
    }

    #[test]
    fn experiment_is_reproducible_from_base_seed() {
        let (manifest, embeddings) = geometry(12, 0.3, 4);
        let mut config = FewShotConfig::new(2, "mock-lvm");
        config.trials = 10;
        let a = run_experiment(&manifest, &embeddings, &[1, 2], &config).unwrap();
        let b = run_experiment(&manifest, &embeddings, &[1, 2], &config).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn csv_curve_has_one_row_per_shot() {
        let (manifest, embeddings) = geometry(12, 0.3, 4);
        let mut config = FewShotConfig::new(1, "mock-lvm");
        config.trials = 2;
        let report = run_experiment(&manifest, &embeddings, &[1, 2, 3], &config).unwrap();
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("shots,"));
    }
}
