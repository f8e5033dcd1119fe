//! Cluster-discovery pipeline: caption embeddings → dimensionality
//! reduction → clustering → per-cluster TF-IDF bags of words → zero-shot
//! mapping of clusters onto classes → evaluation.

pub mod hdbscan;
pub mod kmeans;
pub mod reduce;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use hdbscan::{cluster_hdbscan, SelectionMethod};
pub use kmeans::{cluster_kmeans, KmeansResult};
pub use reduce::{reduce_dimensions, DistanceMetric, ReductionConfig};

use crate::client::{zero_shot_label, ClientError, ModelClient, TokenUsage};
use crate::dataset::CesClass;
use crate::metrics::{compute, MetricsError, MetricsReport, Prediction};
use crate::prompt::{extract_class, render_cluster_prompt, PromptError};

#[derive(Debug, Error)]
pub enum DiscoverError {
    #[error("too few points: have {have}, need at least {need}")]
    TooFewPoints { have: usize, need: usize },
    #[error("all points identical")]
    DegenerateInput,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("cluster {0} has no captions")]
    EmptyCluster(usize),
    #[error("cluster {label} could not be mapped to a class; backend said `{raw}`")]
    UnresolvedCluster { label: usize, raw: String },
    #[error("assignment references cluster {0} missing from the class map")]
    UnmappedCluster(usize),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// Cluster membership for one item; density clustering may emit NOISE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClusterLabel {
    Cluster(usize),
    Noise,
}

impl std::fmt::Display for ClusterLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ClusterLabel::Cluster(c) => write!(f, "{c}"),
            ClusterLabel::Noise => write!(f, "noise"),
        }
    }
}

/// Item-aligned cluster labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub item_ids: Vec<String>,
    pub labels: Vec<ClusterLabel>,
}

impl ClusterAssignment {
    pub fn new(item_ids: Vec<String>, labels: Vec<ClusterLabel>) -> Self {
        assert_eq!(item_ids.len(), labels.len());
        Self { item_ids, labels }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ClusterLabel)> {
        self.item_ids.iter().zip(self.labels.iter())
    }

    /// Distinct non-noise cluster labels, ascending.
    pub fn cluster_ids(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self
            .labels
            .iter()
            .filter_map(|l| match l {
                ClusterLabel::Cluster(c) => Some(*c),
                ClusterLabel::Noise => None,
            })
            .collect();
        set.into_iter().collect()
    }

    /// CSV rows `item_id,cluster,predicted_class`.
    pub fn to_csv(&self, mapping: &ClusterClassMap) -> String {
        let mut out = String::from("item_id,cluster,predicted_class\n");
        for (id, label) in self.iter() {
            let predicted = match label {
                ClusterLabel::Cluster(c) => mapping
                    .assignments
                    .get(c)
                    .map(|class| class.canonical_name())
                    .unwrap_or("unmapped"),
                ClusterLabel::Noise => "noise",
            };
            out.push_str(&format!("{id},{label},{predicted}\n"));
        }
        out
    }
}

/// Top TF-IDF words summarizing one cluster's captions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagOfWords {
    pub cluster: usize,
    /// Up to ten (word, score) pairs, score descending then word ascending.
    pub words: Vec<(String, f64)>,
    /// True when a single-cluster corpus forced plain TF ranking.
    pub tf_fallback: bool,
}

impl BagOfWords {
    pub fn word_list(&self) -> Vec<String> {
        self.words.iter().map(|(w, _)| w.clone()).collect()
    }
}

/// Zero-shot mapping of clusters onto classes, with raw responses kept for
/// the provenance log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterClassMap {
    pub assignments: BTreeMap<usize, CesClass>,
    pub provenance: BTreeMap<usize, String>,
    pub usage: TokenUsage,
}

/// Words ignored by the caption tokenizer.
pub const STOPWORDS: &[&str] = &[
    "about", "above", "after", "again", "against", "all", "and", "any", "are", "aren", "because",
    "been", "before", "being", "below", "between", "both", "but", "can", "cannot", "could",
    "did", "does", "doing", "down", "during", "each", "few", "for", "from", "further", "had",
    "has", "have", "having", "her", "here", "hers", "herself", "him", "himself", "his", "how",
    "into", "its", "itself", "just", "more", "most", "myself", "nor", "not", "now", "off",
    "once", "only", "other", "our", "ours", "ourselves", "out", "over", "own", "same", "she",
    "should", "some", "such", "than", "that", "the", "their", "theirs", "them", "themselves",
    "then", "there", "these", "they", "this", "those", "through", "too", "under", "until",
    "very", "was", "wasn", "were", "what", "when", "where", "which", "while", "who", "whom",
    "why", "will", "with", "you", "your", "yours", "yourself", "yourselves",
];

fn is_stopword(token: &str) -> bool {
    STOPWORDS.binary_search(&token).is_ok()
}

/// Lowercase, split on non-alphanumeric, drop tokens shorter than 3 chars
/// and stopwords.
pub fn tokenize_caption(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| t.len() >= 3 && !is_stopword(t))
        .map(|t| t.to_string())
        .collect()
}

/// Build the top-10 TF-IDF bag of words per cluster. One cluster is one
/// document: TF is the within-cluster token share, IDF is
/// `ln(n_clusters / clusters_containing_word)`. With a single cluster all
/// IDF values vanish; ranking falls back to TF and the bag is flagged.
pub fn build_bow(
    captions_by_cluster: &BTreeMap<usize, Vec<String>>,
) -> Result<Vec<BagOfWords>, DiscoverError> {
    let n_clusters = captions_by_cluster.len();
    if n_clusters == 0 {
        return Err(DiscoverError::InvalidConfig("no clusters".to_string()));
    }
    let mut token_counts: BTreeMap<usize, BTreeMap<String, usize>> = BTreeMap::new();
    let mut totals: BTreeMap<usize, usize> = BTreeMap::new();
    for (cluster, captions) in captions_by_cluster {
        if captions.is_empty() {
            return Err(DiscoverError::EmptyCluster(*cluster));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut total = 0usize;
        for caption in captions {
            for token in tokenize_caption(caption) {
                *counts.entry(token).or_insert(0) += 1;
                total += 1;
            }
        }
        if total == 0 {
            return Err(DiscoverError::EmptyCluster(*cluster));
        }
        token_counts.insert(*cluster, counts);
        totals.insert(*cluster, total);
    }
    let mut document_frequency: BTreeMap<&str, usize> = BTreeMap::new();
    for counts in token_counts.values() {
        for token in counts.keys() {
            *document_frequency.entry(token.as_str()).or_insert(0) += 1;
        }
    }

    let tf_fallback = n_clusters == 1;
    let mut bags = Vec::with_capacity(n_clusters);
    for (cluster, counts) in &token_counts {
        let total = totals[cluster] as f64;
        let mut scored: Vec<(String, f64)> = counts
            .iter()
            .map(|(token, count)| {
                let tf = *count as f64 / total;
                let score = if tf_fallback {
                    tf
                } else {
                    let df = document_frequency[token.as_str()] as f64;
                    tf * (n_clusters as f64 / df).ln()
                };
                (token.clone(), score)
            })
            .collect();
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap()
                .then_with(|| a.0.cmp(&b.0))
        });
        scored.truncate(10);
        bags.push(BagOfWords {
            cluster: *cluster,
            words: scored,
            tf_fallback,
        });
    }
    Ok(bags)
}

/// Map every bag of words to a class via a zero-shot prompt. Responses that
/// resolve to no class are per-cluster errors.
pub fn map_clusters(
    bows: &[BagOfWords],
    client: &ModelClient,
    taxonomy: &[CesClass],
) -> Result<ClusterClassMap, DiscoverError> {
    if bows.is_empty() {
        return Err(DiscoverError::InvalidConfig("no bags of words".to_string()));
    }
    let mut assignments = BTreeMap::new();
    let mut provenance = BTreeMap::new();
    let mut usage = TokenUsage::default();
    for bow in bows {
        let prompt = render_cluster_prompt(&bow.word_list(), taxonomy)?;
        let response = zero_shot_label(taxonomy, &prompt, client)?;
        usage += response.usage;
        let decision = extract_class(&format!("cluster:{}", bow.cluster), &response.text, taxonomy);
        provenance.insert(bow.cluster, response.text.clone());
        match decision.predicted {
            Prediction::Class(class) => {
                assignments.insert(bow.cluster, class);
            }
            Prediction::Unresolved => {
                return Err(DiscoverError::UnresolvedCluster {
                    label: bow.cluster,
                    raw: response.text,
                });
            }
        }
    }
    Ok(ClusterClassMap {
        assignments,
        provenance,
        usage,
    })
}

/// Score a clustering + mapping against ground truth. NOISE items count as
/// wrong for accuracy and macro recall but stay out of every precision
/// denominator (the same treatment as unresolved predictions).
pub fn evaluate_discovery(
    assignment: &ClusterAssignment,
    mapping: &ClusterClassMap,
    truth: &[(String, CesClass)],
    classes: &[CesClass],
) -> Result<MetricsReport, DiscoverError> {
    let mut preds = Vec::with_capacity(assignment.item_ids.len());
    for (id, label) in assignment.iter() {
        let prediction = match label {
            ClusterLabel::Cluster(c) => {
                let class = mapping
                    .assignments
                    .get(c)
                    .ok_or(DiscoverError::UnmappedCluster(*c))?;
                Prediction::Class(*class)
            }
            ClusterLabel::Noise => Prediction::Unresolved,
        };
        preds.push((id.clone(), prediction));
    }
    let mut report = compute(&preds, truth, classes)?;
    if assignment.labels.iter().any(|l| *l == ClusterLabel::Noise) {
        report
            .flags
            .push("noise_items_excluded_from_precision".to_string());
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::mock::MockBackend;
    use crate::client::EndpointConfig;
    use crate::dataset::{DatasetManifest, ImageRecord};
    use std::sync::Arc;

    #[test]
    fn stopword_table_is_sorted_for_binary_search() {
        let mut sorted = STOPWORDS.to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, STOPWORDS);
    }

    #[test]
    fn bow_matches_hand_computed_tfidf() {
        let mut captions = BTreeMap::new();
        captions.insert(0usize, vec!["red fox fox".to_string()]);
        captions.insert(1usize, vec!["blue lake".to_string()]);
        let bags = build_bow(&captions).unwrap();

        // Cluster 0: tokens {red:1, fox:2}, total 3, idf ln(2/1) for both.
        let bag0 = &bags[0];
        assert_eq!(bag0.cluster, 0);
        assert!(!bag0.tf_fallback);
        assert_eq!(bag0.words[0].0, "fox");
        let ln2 = 2.0f64.ln();
        assert!((bag0.words[0].1 - (2.0 / 3.0) * ln2).abs() < 1e-12);
        assert_eq!(bag0.words[1].0, "red");
        assert!((bag0.words[1].1 - (1.0 / 3.0) * ln2).abs() < 1e-12);
    }

    #[test]
    fn word_in_every_cluster_scores_zero() {
        let mut captions = BTreeMap::new();
        captions.insert(0usize, vec!["shared mountain peak".to_string()]);
        captions.insert(1usize, vec!["shared lake water".to_string()]);
        let bags = build_bow(&captions).unwrap();
        for bag in &bags {
            let shared = bag.words.iter().find(|(w, _)| w == "shared").unwrap();
            assert_eq!(shared.1, 0.0);
            // Zero-score words rank after every positive-score word.
            let last_positive = bag
                .words
                .iter()
                .rposition(|(_, s)| *s > 0.0)
                .unwrap();
            let shared_pos = bag.words.iter().position(|(w, _)| w == "shared").unwrap();
            assert!(shared_pos > last_positive);
        }
    }

    #[test]
    fn single_cluster_falls_back_to_tf() {
        let mut captions = BTreeMap::new();
        captions.insert(0usize, vec!["fox fox den".to_string()]);
        let bags = build_bow(&captions).unwrap();
        assert!(bags[0].tf_fallback);
        assert_eq!(bags[0].words[0].0, "fox");
        assert!((bags[0].words[0].1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn bow_is_invariant_to_caption_order() {
        let mut forward = BTreeMap::new();
        forward.insert(0usize, vec!["alpine lake".to_string(), "granite ridge".to_string()]);
        forward.insert(1usize, vec!["village square".to_string()]);
        let mut reversed = forward.clone();
        reversed.get_mut(&0).unwrap().reverse();
        assert_eq!(build_bow(&forward).unwrap(), build_bow(&reversed).unwrap());
    }

    #[test]
    fn empty_cluster_is_an_error() {
        let mut captions = BTreeMap::new();
        captions.insert(0usize, Vec::<String>::new());
        assert!(matches!(
            build_bow(&captions),
            Err(DiscoverError::EmptyCluster(0))
        ));
    }

    fn mock_client() -> ModelClient {
        let records: Vec<ImageRecord> = CesClass::ALL
            .iter()
            .enumerate()
            .map(|(i, class)| ImageRecord {
                id: format!("img{i}"),
                source: format!("mock://img{i}"),
                label: Some(*class),
                metadata: Default::default(),
            })
            .collect();
        let manifest = DatasetManifest::new("m", "1", records);
        ModelClient::new(
            EndpointConfig::mock("mock-llm"),
            Arc::new(MockBackend::echo(&manifest, 5)),
        )
    }

    #[test]
    fn map_clusters_resolves_keyword_bags() {
        let bags = vec![
            BagOfWords {
                cluster: 0,
                words: vec![
                    ("food".to_string(), 0.5),
                    ("wine".to_string(), 0.4),
                    ("dish".to_string(), 0.3),
                ],
                tf_fallback: false,
            },
            BagOfWords {
                cluster: 3,
                words: vec![("mountain".to_string(), 0.5), ("river".to_string(), 0.2)],
                tf_fallback: false,
            },
        ];
        let map = map_clusters(&bags, &mock_client(), &CesClass::ALL).unwrap();
        assert_eq!(map.assignments[&0], CesClass::Gastronomy);
        assert_eq!(map.assignments[&3], CesClass::LandscapeNature);
        assert_eq!(map.provenance[&0], "Gastronomy");
        assert!(map.usage.input_tokens > 0);
    }

    #[test]
    fn unmappable_bag_surfaces_cluster_error() {
        let bags = vec![BagOfWords {
            cluster: 2,
            words: vec![("xyzzy".to_string(), 0.9)],
            tf_fallback: false,
        }];
        match map_clusters(&bags, &mock_client(), &CesClass::ALL) {
            Err(DiscoverError::UnresolvedCluster { label: 2, raw }) => {
                assert_eq!(raw, "none of these");
            }
            other => panic!("expected UnresolvedCluster, got {other:?}"),
        }
    }

    #[test]
    fn many_to_one_mapping_is_allowed() {
        let bags = vec![
            BagOfWords {
                cluster: 0,
                words: vec![("food".to_string(), 0.5)],
                tf_fallback: false,
            },
            BagOfWords {
                cluster: 1,
                words: vec![("meal".to_string(), 0.5)],
                tf_fallback: false,
            },
        ];
        let map = map_clusters(&bags, &mock_client(), &CesClass::ALL).unwrap();
        assert_eq!(map.assignments[&0], CesClass::Gastronomy);
        assert_eq!(map.assignments[&1], CesClass::Gastronomy);
    }

    fn perfect_setup() -> (ClusterAssignment, ClusterClassMap, Vec<(String, CesClass)>) {
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        let mut truth = Vec::new();
        let mut assignments = BTreeMap::new();
        for (c, class) in CesClass::ALL.iter().enumerate() {
            assignments.insert(c, *class);
            for i in 0..5 {
                let id = format!("{c}_{i}");
                ids.push(id.clone());
                labels.push(ClusterLabel::Cluster(c));
                truth.push((id, *class));
            }
        }
        (
            ClusterAssignment::new(ids, labels),
            ClusterClassMap {
                assignments,
                provenance: BTreeMap::new(),
                usage: TokenUsage::default(),
            },
            truth,
        )
    }

    #[test]
    fn perfect_clustering_and_mapping_scores_100() {
        let (assignment, mapping, truth) = perfect_setup();
        let report = evaluate_discovery(&assignment, &mapping, &truth, &CesClass::ALL).unwrap();
        assert_eq!(report.accuracy, 100.0);
        assert_eq!(report.macro_precision, 100.0);
        assert_eq!(report.macro_recall, 100.0);
    }

    #[test]
    fn noise_lowers_accuracy_but_not_precision() {
        let (mut assignment, mapping, truth) = perfect_setup();
        // Turn 4 items into noise.
        for slot in [0usize, 7, 13, 21] {
            assignment.labels[slot] = ClusterLabel::Noise;
        }
        let report = evaluate_discovery(&assignment, &mapping, &truth, &CesClass::ALL).unwrap();
        assert!(report.accuracy < 100.0);
        assert_eq!(report.macro_precision, 100.0);
        assert!(report.macro_recall < 100.0);
        assert!(report
            .flags
            .contains(&"noise_items_excluded_from_precision".to_string()));
    }

    #[test]
    fn all_noise_scores_zero_with_flag() {
        let (mut assignment, mapping, truth) = perfect_setup();
        for label in assignment.labels.iter_mut() {
            *label = ClusterLabel::Noise;
        }
        let report = evaluate_discovery(&assignment, &mapping, &truth, &CesClass::ALL).unwrap();
        assert_eq!(report.accuracy, 0.0);
        assert_eq!(report.macro_precision, 0.0);
        assert!(report
            .flags
            .contains(&"zero_precision_for_unpredicted_class".to_string()));
    }

    #[test]
    fn unmapped_cluster_is_an_error() {
        let (assignment, mut mapping, truth) = perfect_setup();
        mapping.assignments.remove(&3);
        assert!(matches!(
            evaluate_discovery(&assignment, &mapping, &truth, &CesClass::ALL),
            Err(DiscoverError::UnmappedCluster(3))
        ));
    }

    #[test]
    fn identity_mapping_on_truth_clusters_reproduces_compute() {
        let (assignment, mapping, truth) = perfect_setup();
        let via_discovery =
            evaluate_discovery(&assignment, &mapping, &truth, &CesClass::ALL).unwrap();
        let preds: Vec<(String, Prediction)> = truth
            .iter()
            .map(|(id, class)| (id.clone(), Prediction::Class(*class)))
            .collect();
        let direct = compute(&preds, &truth, &CesClass::ALL).unwrap();
        assert_eq!(via_discovery, direct);
    }
}
