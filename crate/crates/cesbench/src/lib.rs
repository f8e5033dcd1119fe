//! Pipelines for categorizing social-media imagery into the six cultural
//! ecosystem service classes, built on pluggable model-serving backends.
//!
//! Five adaptation approaches are implemented end to end:
//!
//! 1. **prompt-zeroshot** — VQA-style prompting of a vision-language model.
//! 2. **caption-probe** — captions, text embeddings, and a linear probe.
//! 3. **discover** — caption embeddings reduced, clustered, summarized as
//!    TF-IDF bags of words, and zero-shot mapped to classes.
//! 4. **visual-probe** — frozen visual embeddings under a linear probe.
//! 5. **fewshot** — class prototypes over frozen embeddings with
//!    cosine/softmax scoring.
//!
//! See the `examples/` directory for one runnable program per capability,
//! and the `cesbench` binary for the command-line interface.

pub mod cache;
pub mod client;
pub mod cost;
pub mod dataset;
pub mod discover;
pub mod embedding;
pub mod fewshot;
pub mod metrics;
pub mod probe;
pub mod prompt;
pub mod runner;

pub use cache::{CacheError, CacheKey, EmbeddingCache};
pub use client::{
    BatchMode, Caption, ClientError, EndpointConfig, ModelClient, RawModelResponse, TokenUsage,
};
pub use dataset::{
    ingest_manifest, sample_support_set, stratified_split, CesClass, DatasetManifest,
    DatasetError, ImageRecord, ManifestFormat, SplitSpec, SupportQueryPartition,
};
pub use embedding::{
    class_prototype, cosine_similarity, softmax, EmbeddingError, EmbeddingVector, Modality,
};
pub use metrics::{
    compute, compute_indexed, per_class_accuracy, render_report, MetricsReport, Prediction,
    ReportFormat,
};
pub use probe::{
    evaluate_probe, forward, loss_and_grad, train_probe, Optimizer, ProbeModel, TrainConfig,
    TrainReport,
};
pub use prompt::{extract_class, render_prompt, ClassDecision, MatchKind, PromptId, PromptTemplate};
