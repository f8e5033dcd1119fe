//! End-to-end orchestration: a [`RunConfig`] names a manifest, an approach,
//! and a backend; [`run`] executes the approach, writes every artifact under
//! the output directory, and returns a replayable [`RunRecord`].
//!
//! Reports (`report.json`, `report.md`, `report.csv`) are pure functions of
//! the resolved config and backend responses: re-running a mock-backed
//! record reproduces them byte for byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cache::{CacheKey, EmbeddingCache, GetOrComputeError};
use crate::client::http::HttpTransport;
use crate::client::mock::MockBackend;
use crate::client::{
    run_batched, BatchMode, ChatRequest, ClientError, EndpointConfig, ModelClient, TokenUsage,
    Transport, CAPTION_INSTRUCTION,
};
use crate::cost::{cost_of, CostError, CostReport, PricingTable};
use crate::dataset::{
    ingest_manifest_named, stratified_split, CesClass, DatasetError, DatasetManifest,
    ImageRecord, ManifestFormat, SplitSpec,
};
use crate::discover::{
    build_bow, cluster_hdbscan, cluster_kmeans, evaluate_discovery, map_clusters,
    reduce_dimensions, ClusterAssignment, ClusterLabel, DiscoverError, ReductionConfig,
    SelectionMethod,
};
use crate::embedding::{EmbeddingVector, Modality};
use crate::fewshot::{run_experiment, FewShotConfig, FewShotError};
use crate::metrics::{
    compute, per_class_accuracy, MetricsError, MetricsReport, Prediction, ReportFormat,
};
use crate::probe::{evaluate_probe, save_checkpoint, train_probe, ProbeError, TrainConfig};
use crate::prompt::{extract_class, render_prompt, ClassDecision, PromptError, PromptId, PromptTemplate};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    FewShot(#[from] FewShotError),
    #[error(transparent)]
    Discover(#[from] DiscoverError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error("cache error: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl RunError {
    /// Process exit code: 2 config, 3 backend, 4 data.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Prompt(_) => 2,
            RunError::Client(_) => 3,
            RunError::Discover(DiscoverError::Client(_)) => 3,
            _ => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Approach {
    PromptZeroshot,
    CaptionProbe,
    Discover,
    VisualProbe,
    Fewshot,
}

impl Approach {
    pub fn as_str(&self) -> &'static str {
        match self {
            Approach::PromptZeroshot => "prompt-zeroshot",
            Approach::CaptionProbe => "caption-probe",
            Approach::Discover => "discover",
            Approach::VisualProbe => "visual-probe",
            Approach::Fewshot => "fewshot",
        }
    }
}

impl std::str::FromStr for Approach {
    type Err = RunError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "prompt-zeroshot" => Ok(Approach::PromptZeroshot),
            "caption-probe" => Ok(Approach::CaptionProbe),
            "discover" => Ok(Approach::Discover),
            "visual-probe" => Ok(Approach::VisualProbe),
            "fewshot" => Ok(Approach::Fewshot),
            other => Err(RunError::Config(format!("unknown approach `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ClustererChoice {
    Kmeans { k: usize },
    Hdbscan {
        min_cluster_size: usize,
        selection: SelectionMethod,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoverParams {
    pub reduction: ReductionConfig,
    pub clusterer: ClustererChoice,
}

impl Default for DiscoverParams {
    fn default() -> Self {
        Self {
            reduction: ReductionConfig::default(),
            clusterer: ClustererChoice::Kmeans { k: 6 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotParams {
    pub shots: Vec<u32>,
    pub trials: u32,
    pub base_seed: u64,
    #[serde(default)]
    pub normalize_before_average: bool,
}

impl Default for FewShotParams {
    fn default() -> Self {
        Self {
            shots: vec![10],
            trials: 30,
            base_seed: 42,
            normalize_before_average: false,
        }
    }
}

/// Everything one run needs; persisted inside the [`RunRecord`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub format: ManifestFormat,
    pub approach: Approach,
    /// `mock:echo` or the name of a declared endpoint.
    pub backend: String,
    #[serde(default)]
    pub endpoints: BTreeMap<String, EndpointConfig>,
    pub prompt: PromptId,
    #[serde(default)]
    pub mode_override: Option<BatchMode>,
    #[serde(default)]
    pub batch_size_override: Option<usize>,
    pub split: SplitSpec,
    /// `text-probe` or `vision-probe`.
    pub probe_preset: String,
    pub fewshot: FewShotParams,
    pub discover: DiscoverParams,
    #[serde(default)]
    pub pricing: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Minimal mock-backed config for an approach.
    pub fn mock(manifest: &Path, format: ManifestFormat, approach: Approach, out_dir: &Path) -> Self {
        Self {
            manifest: manifest.to_path_buf(),
            format,
            approach,
            backend: "mock:echo".to_string(),
            endpoints: BTreeMap::new(),
            prompt: PromptId::Simple,
            mode_override: None,
            batch_size_override: None,
            split: SplitSpec::default(),
            probe_preset: match approach {
                Approach::CaptionProbe => "text-probe".to_string(),
                _ => "vision-probe".to_string(),
            },
            fewshot: FewShotParams::default(),
            discover: DiscoverParams::default(),
            pricing: None,
            out_dir: out_dir.to_path_buf(),
            seed: 42,
            cache_dir: None,
        }
    }

    fn validate(&self) -> Result<(), RunError> {
        if self.backend.is_empty() {
            return Err(RunError::Config("backend not set".to_string()));
        }
        if !self.backend.starts_with("mock:") && !self.endpoints.contains_key(&self.backend) {
            return Err(RunError::Config(format!(
                "backend `{}` is not declared in the endpoint table",
                self.backend
            )));
        }
        if self.backend.starts_with("mock:") && self.backend != "mock:echo" {
            return Err(RunError::Config(format!(
                "unknown mock fixture `{}` (available: mock:echo)",
                self.backend
            )));
        }
        if TrainConfig::preset(&self.probe_preset).is_none() {
            return Err(RunError::Config(format!(
                "unknown probe preset `{}`",
                self.probe_preset
            )));
        }
        if self.fewshot.shots.is_empty() {
            return Err(RunError::Config("fewshot shots list is empty".to_string()));
        }
        Ok(())
    }
}

/// Snapshot of a finished run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub config: RunConfig,
    pub manifest_sha256: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub artifacts: Vec<String>,
}

/// The JSON body of `report.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub method: String,
    pub approach: Approach,
    pub model_id: String,
    pub manifest_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitSpec>,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_class_accuracy: Option<BTreeMap<CesClass, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsReport>,
    pub usage: TokenUsage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<CostReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

struct RunContext {
    manifest: DatasetManifest,
    client: ModelClient,
    cache: EmbeddingCache,
    out_dir: PathBuf,
    artifacts: Vec<String>,
}

impl RunContext {
    fn write_artifact(&mut self, name: &str, contents: &str) -> Result<(), RunError> {
        std::fs::write(self.out_dir.join(name), contents)?;
        self.artifacts.push(name.to_string());
        Ok(())
    }
}

/// Resolve the configured backend into a ready client with an audit log.
pub fn build_client(config: &RunConfig, manifest: &DatasetManifest, audit_path: &Path) -> Result<ModelClient, RunError> {
    config.validate()?;
    let audit = std::fs::File::create(audit_path)?;
    let (endpoint, transport): (EndpointConfig, Arc<dyn Transport>) =
        if config.backend == "mock:echo" {
            let endpoint = EndpointConfig::mock("mock-echo");
            (endpoint, Arc::new(MockBackend::echo(manifest, config.seed)))
        } else {
            let endpoint = config.endpoints[&config.backend].clone();
            let transport = HttpTransport::from_config(&endpoint)?;
            (endpoint, Arc::new(transport))
        };
    let mut endpoint = endpoint;
    if let Some(mode) = config.mode_override {
        endpoint.mode = mode;
    }
    if let Some(batch_size) = config.batch_size_override {
        endpoint.batch_size = batch_size;
    }
    endpoint.validate()?;
    Ok(ModelClient::new(endpoint, transport).with_audit(Box::new(audit)))
}

fn labeled_records(manifest: &DatasetManifest) -> Vec<ImageRecord> {
    manifest.labeled_records().cloned().collect()
}

fn truth_of(records: &[ImageRecord]) -> Vec<(String, CesClass)> {
    records
        .iter()
        .map(|r| (r.id.clone(), r.label.expect("labeled records")))
        .collect()
}

/// Fetch (or compute through the cache) image embeddings for records.
fn image_embeddings(
    context: &RunContext,
    records: &[ImageRecord],
) -> Result<BTreeMap<String, EmbeddingVector>, RunError> {
    let mut out = BTreeMap::new();
    for record in records {
        let key = CacheKey::new(
            &record.id,
            &context.client.config.model_id,
            Modality::Image,
            "raw",
        );
        let mut vector = context
            .cache
            .get_or_compute(&key, || crate::client::embed_image(record, &context.client))
            .map_err(flatten_cache_error)?;
        vector.item_id = record.id.clone();
        out.insert(record.id.clone(), vector);
    }
    Ok(out)
}

fn flatten_cache_error(e: GetOrComputeError<ClientError>) -> RunError {
    match e {
        GetOrComputeError::Cache(inner) => RunError::Cache(inner.to_string()),
        GetOrComputeError::Producer(inner) => RunError::Client(inner),
    }
}

/// Caption every record in one batched run, preserving order.
fn caption_all(
    context: &RunContext,
    records: &[ImageRecord],
) -> Result<(BTreeMap<String, String>, TokenUsage), RunError> {
    let requests: Vec<ChatRequest> = records
        .iter()
        .map(|record| {
            Ok(ChatRequest {
                item_id: record.id.clone(),
                prompt: CAPTION_INSTRUCTION.to_string(),
                image: Some(crate::client::load_image_payload(record)?),
            })
        })
        .collect::<Result<_, ClientError>>()?;
    let run = run_batched(requests, &context.client, true)?;
    let mut captions = BTreeMap::new();
    for (record, result) in records.iter().zip(run.results) {
        let response = result.map_err(|f| {
            RunError::Client(ClientError::Transport {
                status: 0,
                body_excerpt: f.reason,
            })
        })?;
        let text = response.text.trim().to_string();
        if text.is_empty() {
            return Err(RunError::Client(ClientError::EmptyResponse {
                item_id: record.id.clone(),
            }));
        }
        captions.insert(record.id.clone(), text);
    }
    Ok((captions, run.usage))
}

/// Embed caption texts through the cache, keyed by item id.
fn caption_embeddings(
    context: &RunContext,
    captions: &BTreeMap<String, String>,
) -> Result<BTreeMap<String, EmbeddingVector>, RunError> {
    let mut out = BTreeMap::new();
    for (item_id, text) in captions {
        let key = CacheKey::new(
            item_id,
            &context.client.config.model_id,
            Modality::Text,
            "caption",
        );
        let mut vector = context
            .cache
            .get_or_compute(&key, || crate::client::embed_text(text, &context.client))
            .map_err(flatten_cache_error)?;
        vector.item_id = item_id.clone();
        out.insert(item_id.clone(), vector);
    }
    Ok(out)
}

struct ApproachOutput {
    metrics: MetricsReport,
    usage: TokenUsage,
    per_class: Option<BTreeMap<CesClass, f64>>,
    precision: f64,
    recall: f64,
    accuracy: f64,
    split: Option<SplitSpec>,
    prompt_id: Option<String>,
}

fn run_prompt_zeroshot(context: &mut RunContext, config: &RunConfig) -> Result<ApproachOutput, RunError> {
    let records = labeled_records(&context.manifest);
    let template = PromptTemplate::of(config.prompt);
    let prompt = render_prompt(&template, &context.manifest.taxonomy)?;
    let requests: Vec<ChatRequest> = records
        .iter()
        .map(|record| {
            Ok(ChatRequest {
                item_id: record.id.clone(),
                prompt: prompt.clone(),
                image: Some(crate::client::load_image_payload(record)?),
            })
        })
        .collect::<Result<_, ClientError>>()?;
    let run = run_batched(requests, &context.client, false)?;

    let mut decisions: Vec<ClassDecision> = Vec::with_capacity(records.len());
    let mut preds = Vec::with_capacity(records.len());
    for (record, result) in records.iter().zip(&run.results) {
        let decision = match result {
            Ok(response) => extract_class(&record.id, &response.text, &context.manifest.taxonomy),
            // A failed item scores as unresolved rather than killing the run.
            Err(failure) => ClassDecision {
                item_id: record.id.clone(),
                predicted: Prediction::Unresolved,
                match_kind: crate::prompt::MatchKind::Unresolved,
                raw_text: format!("<error: {}>", failure.reason),
            },
        };
        preds.push((record.id.clone(), decision.predicted));
        decisions.push(decision);
    }
    let truth = truth_of(&records);
    let metrics = compute(&preds, &truth, &context.manifest.taxonomy)?;

    let mut decisions_csv = String::from("item_id,predicted,match_kind,raw_text\n");
    for decision in &decisions {
        let predicted = match decision.predicted {
            Prediction::Class(c) => c.canonical_name().to_string(),
            Prediction::Unresolved => "unresolved".to_string(),
        };
        decisions_csv.push_str(&format!(
            "{},{},{},{:?}\n",
            decision.item_id,
            predicted,
            serde_json::to_string(&decision.match_kind).unwrap().trim_matches('"'),
            decision.raw_text
        ));
    }
    context.write_artifact("decisions.csv", &decisions_csv)?;

    let per_class = per_class_accuracy(&metrics).ok();
    Ok(ApproachOutput {
        precision: metrics.macro_precision,
        recall: metrics.macro_recall,
        accuracy: metrics.accuracy,
        per_class,
        usage: run.usage,
        metrics,
        split: None,
        prompt_id: Some(match config.prompt {
            PromptId::Simple => "1".to_string(),
            PromptId::Extended => "2".to_string(),
        }),
    })
}

fn run_probe_approach(
    context: &mut RunContext,
    config: &RunConfig,
    visual: bool,
) -> Result<ApproachOutput, RunError> {
    let records = labeled_records(&context.manifest);
    let mut usage = TokenUsage::default();
    let embeddings = if visual {
        image_embeddings(context, &records)?
    } else {
        let (captions, caption_usage) = caption_all(context, &records)?;
        usage += caption_usage;
        let mut captions_log = String::from("item_id,caption\n");
        for (id, text) in &captions {
            captions_log.push_str(&format!("{id},{text:?}\n"));
        }
        context.write_artifact("captions.csv", &captions_log)?;
        caption_embeddings(context, &captions)?
    };

    let (train_records, test_records) = stratified_split(&context.manifest, &config.split)?;
    let features = |records: &[ImageRecord]| -> Vec<(EmbeddingVector, CesClass)> {
        records
            .iter()
            .map(|r| (embeddings[&r.id].clone(), r.label.unwrap()))
            .collect()
    };
    let train_set = features(&train_records);
    let test_set = features(&test_records);

    let preset = TrainConfig::preset(&config.probe_preset)
        .ok_or_else(|| RunError::Config(format!("unknown preset {}", config.probe_preset)))?;
    let mut train_config = preset;
    train_config.seed = config.seed;
    let (model, train_report) = train_probe(&train_set, &train_config)?;
    save_checkpoint(&model, &context.out_dir.join("probe.bin"))?;
    context.artifacts.push("probe.bin".to_string());
    context.write_artifact(
        "train_report.json",
        &serde_json::to_string_pretty(&train_report).expect("train report serializes"),
    )?;

    let metrics = evaluate_probe(&model, &test_set)?;
    let per_class = per_class_accuracy(&metrics).ok();
    Ok(ApproachOutput {
        precision: metrics.macro_precision,
        recall: metrics.macro_recall,
        accuracy: metrics.accuracy,
        per_class,
        usage,
        metrics,
        split: Some(config.split),
        prompt_id: None,
    })
}

fn run_fewshot(context: &mut RunContext, config: &RunConfig) -> Result<ApproachOutput, RunError> {
    let records = labeled_records(&context.manifest);
    let embeddings = image_embeddings(context, &records)?;
    let shots = &config.fewshot.shots;
    let max_shots = *shots.iter().max().expect("validated non-empty");
    let fewshot_config = FewShotConfig {
        shots: max_shots,
        trials: config.fewshot.trials,
        base_seed: config.fewshot.base_seed,
        model_id: context.client.config.model_id.clone(),
        normalize_before_average: config.fewshot.normalize_before_average,
        allow_wide_shots: false,
    };
    let report = run_experiment(&context.manifest, &embeddings, shots, &fewshot_config)?;
    context.write_artifact("shots_curve.csv", &report.to_csv())?;
    context.write_artifact(
        "fewshot_report.json",
        &serde_json::to_string_pretty(&report).expect("fewshot report serializes"),
    )?;

    let top = report
        .per_shot
        .iter()
        .find(|s| s.shots == max_shots)
        .expect("max shots row present");

    // The headline row is the mean at the highest requested shot count; a
    // synthetic single-trial confusion matrix would be misleading, so the
    // detailed MetricsReport is omitted for this approach.
    let placeholder = MetricsReport {
        macro_precision: top.precision.mean,
        macro_recall: top.recall.mean,
        accuracy: top.accuracy.mean,
        confusion: crate::metrics::ConfusionMatrix {
            classes: context.manifest.taxonomy.clone(),
            counts: vec![vec![0; context.manifest.taxonomy.len()]; context.manifest.taxonomy.len()],
            unresolved: None,
        },
        item_count: 0,
        flags: vec!["averaged_over_trials".to_string()],
    };
    Ok(ApproachOutput {
        precision: top.precision.mean,
        recall: top.recall.mean,
        accuracy: top.accuracy.mean,
        per_class: Some(top.per_class_accuracy.clone()),
        usage: TokenUsage::default(),
        metrics: placeholder,
        split: None,
        prompt_id: None,
    })
}

fn run_discover(context: &mut RunContext, config: &RunConfig) -> Result<ApproachOutput, RunError> {
    let records = labeled_records(&context.manifest);
    let mut usage = TokenUsage::default();

    let (captions, caption_usage) = caption_all(context, &records)?;
    usage += caption_usage;
    let embeddings = caption_embeddings(context, &captions)?;
    let ordered: Vec<EmbeddingVector> = records
        .iter()
        .map(|r| embeddings[&r.id].clone())
        .collect();

    let mut reduction = config.discover.reduction;
    reduction.seed = config.seed;
    let reduced = reduce_dimensions(&ordered, &reduction)?;

    let labels = match &config.discover.clusterer {
        ClustererChoice::Kmeans { k } => cluster_kmeans(&reduced, *k, config.seed)?.labels,
        ClustererChoice::Hdbscan {
            min_cluster_size,
            selection,
        } => cluster_hdbscan(&reduced, *min_cluster_size, *selection, None)?,
    };
    let assignment = ClusterAssignment::new(
        records.iter().map(|r| r.id.clone()).collect(),
        labels,
    );

    let mut captions_by_cluster: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (record, label) in records.iter().zip(&assignment.labels) {
        if let ClusterLabel::Cluster(c) = label {
            captions_by_cluster
                .entry(*c)
                .or_default()
                .push(captions[&record.id].clone());
        }
    }
    let bows = build_bow(&captions_by_cluster)?;
    context.write_artifact(
        "bow.json",
        &serde_json::to_string_pretty(&bows).expect("bows serialize"),
    )?;

    let mapping = map_clusters(&bows, &context.client, &context.manifest.taxonomy)?;
    usage += mapping.usage;
    let mut provenance_log = String::new();
    for (cluster, raw) in &mapping.provenance {
        let class = mapping
            .assignments
            .get(cluster)
            .map(|c| c.canonical_name())
            .unwrap_or("unresolved");
        provenance_log.push_str(&format!("cluster {cluster} -> {class} (raw: {raw:?})\n"));
    }
    context.write_artifact("mapping_provenance.log", &provenance_log)?;
    context.write_artifact("assignment.csv", &assignment.to_csv(&mapping))?;

    let truth = truth_of(&records);
    let metrics = evaluate_discovery(&assignment, &mapping, &truth, &context.manifest.taxonomy)?;
    let per_class = per_class_accuracy(&metrics).ok();
    Ok(ApproachOutput {
        precision: metrics.macro_precision,
        recall: metrics.macro_recall,
        accuracy: metrics.accuracy,
        per_class,
        usage,
        metrics,
        split: None,
        prompt_id: None,
    })
}

/// Execute a run end to end and persist its artifacts.
pub fn run(config: &RunConfig) -> Result<RunRecord, RunError> {
    config.validate()?;
    let started_unix = now_unix();
    let manifest_bytes = std::fs::read(&config.manifest).map_err(|e| {
        RunError::Dataset(DatasetError::MalformedRow {
            line: 0,
            reason: format!("cannot read manifest {}: {e}", config.manifest.display()),
        })
    })?;
    let manifest_sha256 = hex::encode(Sha256::digest(&manifest_bytes));
    let name = config
        .manifest
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "manifest".to_string());
    let manifest = ingest_manifest_named(&config.manifest, config.format, &name, "1.0")?;

    std::fs::create_dir_all(&config.out_dir)?;
    let cache_dir = config
        .cache_dir
        .clone()
        .or_else(|| std::env::var("CESBENCH_CACHE_DIR").ok().map(PathBuf::from))
        .unwrap_or_else(|| config.out_dir.join("cache"));
    let cache = EmbeddingCache::open(&cache_dir).map_err(|e| RunError::Cache(e.to_string()))?;
    let client = build_client(config, &manifest, &config.out_dir.join("requests.log"))?;

    let mut context = RunContext {
        manifest,
        client,
        cache,
        out_dir: config.out_dir.clone(),
        artifacts: vec!["requests.log".to_string()],
    };

    let output = match config.approach {
        Approach::PromptZeroshot => run_prompt_zeroshot(&mut context, config)?,
        Approach::CaptionProbe => run_probe_approach(&mut context, config, false)?,
        Approach::VisualProbe => run_probe_approach(&mut context, config, true)?,
        Approach::Fewshot => run_fewshot(&mut context, config)?,
        Approach::Discover => run_discover(&mut context, config)?,
    };

    let cost = match (&config.pricing, config.approach) {
        (Some(pricing_path), Approach::PromptZeroshot) => {
            let pricing = PricingTable::load_json(pricing_path)?;
            let endpoint = &context.client.config;
            let prompt_id = output.prompt_id.clone().unwrap_or_else(|| "1".to_string());
            Some(cost_of(
                &output.usage,
                &endpoint.model_id,
                endpoint.mode,
                &prompt_id,
                &pricing,
            )?)
        }
        _ => None,
    };

    let method = format!("{} ({})", config.approach.as_str(), context.client.config.model_id);
    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        method,
        approach: config.approach,
        model_id: context.client.config.model_id.clone(),
        manifest_sha256: manifest_sha256.clone(),
        prompt_id: output.prompt_id.clone(),
        split: output.split,
        precision: round2(output.precision),
        recall: round2(output.recall),
        accuracy: round2(output.accuracy),
        per_class_accuracy: output
            .per_class
            .map(|m| m.into_iter().map(|(k, v)| (k, round2(v))).collect()),
        metrics: Some(output.metrics.clone()),
        usage: output.usage,
        cost,
        flags: output.metrics.flags.clone(),
    };
    context.write_artifact(
        "report.json",
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    context.write_artifact("report.md", &render_run_report_md(&report))?;
    context.write_artifact(
        "report.csv",
        &crate::metrics::render_report(
            &[(report.method.clone(), output.metrics.clone())],
            ReportFormat::Csv,
        )?,
    )?;

    let record = RunRecord {
        schema_version: REPORT_SCHEMA_VERSION,
        config: config.clone(),
        manifest_sha256,
        started_unix,
        finished_unix: now_unix(),
        artifacts: context.artifacts.clone(),
    };
    std::fs::write(
        config.out_dir.join("run_record.json"),
        serde_json::to_string_pretty(&record).expect("record serializes"),
    )?;
    Ok(record)
}

fn render_run_report_md(report: &RunReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("# Run report: {}\n\n", report.method));
    out.push_str("| Method | Precision | Recall | Accuracy |\n");
    out.push_str("| --- | ---: | ---: | ---: |\n");
    out.push_str(&format!(
        "| {} | {:.2} | {:.2} | {:.2} |\n",
        report.method, report.precision, report.recall, report.accuracy
    ));
    if let Some(per_class) = &report.per_class_accuracy {
        out.push_str("\n## Class-specific accuracy\n\n");
        out.push_str("| ");
        for class in per_class.keys() {
            out.push_str(&format!("{} | ", class.canonical_name()));
        }
        out.push_str("\n|");
        for _ in per_class.keys() {
            out.push_str(" ---: |");
        }
        out.push('\n');
        out.push_str("| ");
        for value in per_class.values() {
            out.push_str(&format!("{value:.2} | "));
        }
        out.push('\n');
    }
    if let Some(split) = &report.split {
        out.push_str(&format!(
            "\nSplit: test fraction {}, seed {}, stratified {}\n",
            split.test_fraction, split.seed, split.stratified
        ));
    }
    if !report.flags.is_empty() {
        out.push_str(&format!("\nFlags: {}\n", report.flags.join(", ")));
    }
    if let Some(cost) = &report.cost {
        out.push_str(&format!(
            "\nCost: input ${} + output ${} = ${}\n",
            cost.input_cost.usd_4dp(),
            cost.output_cost.usd_4dp(),
            cost.total.usd_4dp()
        ));
    }
    out
}

/// Re-execute a stored run record (same config, same backend) into a new
/// output directory. Mock-backed records reproduce reports byte for byte.
pub fn replay(record_path: &Path, out_dir: &Path) -> Result<RunRecord, RunError> {
    let text = std::fs::read_to_string(record_path)?;
    let record: RunRecord =
        serde_json::from_str(&text).map_err(|e| RunError::Config(format!("bad run record: {e}")))?;
    let mut config = record.config;
    config.out_dir = out_dir.to_path_buf();
    // Cache state must not leak between original and replay.
    if config.cache_dir.is_none() {
        config.cache_dir = Some(out_dir.join("cache"));
    }
    run(&config)
}

/// Cross-run comparison document in the layout of the summary tables:
/// best-accuracy row bolded, plus a class-specific table, plus a warning
/// when runs evaluated different manifests.
pub fn comparison_report(reports: &[RunReport]) -> Result<String, RunError> {
    if reports.is_empty() {
        return Err(RunError::Config("no run reports given".to_string()));
    }
    let mut out = String::new();
    let mixed = reports
        .iter()
        .any(|r| r.manifest_sha256 != reports[0].manifest_sha256);
    if mixed {
        out.push_str(
            "> **Warning:** these runs evaluated different manifests; \
             the rows are not directly comparable.\n\n",
        );
    }
    let best = reports
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.accuracy.partial_cmp(&b.1.accuracy).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    out.push_str("| Method | Model | Precision | Recall | Accuracy |\n");
    out.push_str("| --- | --- | ---: | ---: | ---: |\n");
    for (i, report) in reports.iter().enumerate() {
        let (open, close) = if i == best && reports.len() > 1 {
            ("**", "**")
        } else {
            ("", "")
        };
        out.push_str(&format!(
            "| {open}{}{close} | {open}{}{close} | {open}{:.2}{close} | {open}{:.2}{close} | {open}{:.2}{close} |\n",
            report.approach.as_str(),
            report.model_id,
            report.precision,
            report.recall,
            report.accuracy
        ));
    }

    let with_class: Vec<&RunReport> = reports
        .iter()
        .filter(|r| r.per_class_accuracy.is_some())
        .collect();
    if !with_class.is_empty() {
        out.push_str("\n## Class-specific accuracy\n\n");
        out.push_str("| Method | Model |");
        for class in CesClass::ALL {
            out.push_str(&format!(" {} |", class.canonical_name()));
        }
        out.push_str("\n| --- | --- |");
        for _ in CesClass::ALL {
            out.push_str(" ---: |");
        }
        out.push('\n');
        for report in with_class {
            let per_class = report.per_class_accuracy.as_ref().unwrap();
            out.push_str(&format!("| {} | {} |", report.approach.as_str(), report.model_id));
            for class in CesClass::ALL {
                match per_class.get(&class) {
                    Some(value) => out.push_str(&format!(" {value:.2} |")),
                    None => out.push_str(" - |"),
                }
            }
            out.push('\n');
        }
    }
    Ok(out)
}

/// Load the `report.json` of a finished run.
pub fn load_run_report(out_dir: &Path) -> Result<RunReport, RunError> {
    let text = std::fs::read_to_string(out_dir.join("report.json"))?;
    serde_json::from_str(&text).map_err(|e| RunError::Config(format!("bad report.json: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::write_manifest;

    fn write_mock_manifest(dir: &Path, per_class: usize) -> PathBuf {
        let mut records = Vec::new();
        for class in CesClass::ALL {
            for i in 0..per_class {
                records.push(ImageRecord {
                    id: format!("img_{}_{i:03}", class.index()),
                    source: format!("mock://img_{}_{i:03}", class.index()),
                    label: Some(class),
                    metadata: BTreeMap::new(),
                });
            }
        }
        let manifest = DatasetManifest::new("mock", "1.0", records);
        let path = dir.join("manifest.csv");
        write_manifest(&manifest, &path, ManifestFormat::Csv).unwrap();
        path
    }

    #[test]
    fn unknown_approach_string_is_config_error() {
        let err = "prompt-zero-shot".parse::<Approach>().unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn unknown_mock_fixture_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let config = RunConfig {
            backend: "mock:oracle".to_string(),
            ..RunConfig::mock(
                &dir.path().join("m.csv"),
                ManifestFormat::Csv,
                Approach::Fewshot,
                &dir.path().join("out"),
            )
        };
        assert!(matches!(run(&config), Err(RunError::Config(_))));
    }

    #[test]
    fn unknown_backend_rejected_before_io() {
        let dir = tempfile::tempdir().unwrap();
        let config = RunConfig {
            backend: "gpt-nonexistent".to_string(),
            ..RunConfig::mock(
                &dir.path().join("missing.csv"),
                ManifestFormat::Csv,
                Approach::PromptZeroshot,
                &dir.path().join("out"),
            )
        };
        match run(&config) {
            Err(RunError::Config(_)) => {}
            other => panic!("expected Config error, got {other:?}"),
        }
        assert!(!dir.path().join("out").exists(), "no I/O before validation");
    }

    #[test]
    fn prompt_zeroshot_with_echo_mock_is_perfect() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_mock_manifest(dir.path(), 4);
        let out = dir.path().join("out");
        let config = RunConfig::mock(&manifest, ManifestFormat::Csv, Approach::PromptZeroshot, &out);
        let record = run(&config).unwrap();
        assert!(record.artifacts.contains(&"report.json".to_string()));
        let report = load_run_report(&out).unwrap();
        assert_eq!(report.accuracy, 100.0);
        assert!(out.join("decisions.csv").exists());
        assert!(out.join("run_record.json").exists());
    }

    #[test]
    fn replay_reproduces_reports_byte_identically() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_mock_manifest(dir.path(), 4);
        let out_a = dir.path().join("a");
        let config = RunConfig::mock(&manifest, ManifestFormat::Csv, Approach::PromptZeroshot, &out_a);
        run(&config).unwrap();

        let out_b = dir.path().join("b");
        replay(&out_a.join("run_record.json"), &out_b).unwrap();
        for name in ["report.json", "report.md", "report.csv"] {
            let a = std::fs::read(out_a.join(name)).unwrap();
            let b = std::fs::read(out_b.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between run and replay");
        }
    }

    #[test]
    fn comparison_report_bolds_best_and_warns_on_mixed_manifests() {
        let base = RunReport {
            schema_version: REPORT_SCHEMA_VERSION,
            method: "m".to_string(),
            approach: Approach::Fewshot,
            model_id: "mock".to_string(),
            manifest_sha256: "aaaa".to_string(),
            prompt_id: None,
            split: None,
            precision: 80.0,
            recall: 80.0,
            accuracy: 80.0,
            per_class_accuracy: None,
            metrics: None,
            usage: TokenUsage::default(),
            cost: None,
            flags: Vec::new(),
        };
        let better = RunReport {
            approach: Approach::VisualProbe,
            accuracy: 97.0,
            manifest_sha256: "bbbb".to_string(),
            ..base.clone()
        };
        let text = comparison_report(&[base, better]).unwrap();
        assert!(text.contains("**visual-probe**"));
        assert!(text.contains("Warning"));
    }
}
