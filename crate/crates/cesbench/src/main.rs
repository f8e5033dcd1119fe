//! Command-line front end. All pipeline logic lives in the library; this
//! binary parses flags, builds a `RunConfig`, and maps errors to exit codes
//! (0 success, 2 config, 3 backend, 4 data).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cesbench::cache::EmbeddingCache;
use cesbench::client::{BatchMode, EndpointConfig};
use cesbench::cost::{compare_models, cost_of, render_cost_table, CostReport, PricingTable};
use cesbench::dataset::{ingest_manifest, write_manifest, ManifestFormat};
use cesbench::discover::{DistanceMetric, ReductionConfig, SelectionMethod};
use cesbench::prompt::PromptId;
use cesbench::runner::{
    build_client, comparison_report, load_run_report, replay, run, Approach, ClustererChoice,
    DiscoverParams, FewShotParams, RunConfig, RunError,
};
use cesbench::{SplitSpec, TokenUsage};

#[derive(Parser)]
#[command(
    name = "cesbench",
    version,
    about = "Image categorization pipelines over model-serving backends"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ManifestArgs {
    /// Manifest file path.
    #[arg(long)]
    manifest: PathBuf,
    /// Manifest encoding: csv | jsonl.
    #[arg(long, default_value = "csv")]
    format: String,
}

#[derive(Args, Clone)]
struct RunArgs {
    #[command(flatten)]
    manifest: ManifestArgs,
    /// `mock:echo` or an endpoint name declared in --config.
    #[arg(long, default_value = "mock:echo")]
    backend: String,
    /// Endpoint declarations (TOML or JSON by extension).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; every artifact lands here.
    #[arg(long)]
    out: PathBuf,
    /// Global seed.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Embedding cache directory (default: <out>/cache, or CESBENCH_CACHE_DIR).
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Override the endpoint transport mode: batch | no-batch.
    #[arg(long)]
    mode: Option<String>,
    /// Override the batch size.
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a manifest and write a normalized copy plus a summary.
    Ingest {
        #[command(flatten)]
        manifest: ManifestArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute (and cache) image embeddings for every record.
    Embed {
        #[command(flatten)]
        run: RunArgs,
        /// Recompute records whose cached bytes fail their checksum.
        #[arg(long)]
        repair: bool,
    },
    /// Caption every record and store the texts.
    Caption {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Zero-shot prompting over a vision-language endpoint.
    Classify {
        #[command(flatten)]
        run: RunArgs,
        /// Prompt template: simple | extended.
        #[arg(long, default_value = "simple")]
        prompt: String,
        /// Pricing table for a cost block in the report.
        #[arg(long)]
        pricing: Option<PathBuf>,
    },
    /// Linear-probe training on frozen embeddings.
    TrainProbe {
        #[command(flatten)]
        run: RunArgs,
        /// `vision-probe` (image embeddings) or `text-probe` (captions).
        #[arg(long, default_value = "vision-probe")]
        preset: String,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
        #[arg(long, default_value_t = 42)]
        split_seed: u64,
    },
    /// Prototype-based few-shot evaluation.
    Fewshot {
        #[command(flatten)]
        run: RunArgs,
        /// Shot counts: `1-10`, `5`, or `1,5,10`.
        #[arg(long, default_value = "1-10")]
        shots: String,
        #[arg(long, default_value_t = 30)]
        trials: u32,
        /// L2-normalize support embeddings before averaging.
        #[arg(long)]
        normalize_before_average: bool,
    },
    /// Caption-embedding clustering with zero-shot cluster labeling.
    Discover {
        #[command(flatten)]
        run: RunArgs,
        /// kmeans | hdbscan
        #[arg(long, default_value = "kmeans")]
        clusterer: String,
        #[arg(long, default_value_t = 6)]
        k: usize,
        #[arg(long, default_value_t = 20)]
        min_cluster_size: usize,
        /// leaf | eom
        #[arg(long, default_value = "leaf")]
        selection: String,
        #[arg(long, default_value_t = 15)]
        n_neighbors: usize,
        #[arg(long, default_value_t = 20)]
        output_dims: usize,
        /// cosine | euclidean
        #[arg(long, default_value = "cosine")]
        metric: String,
    },
    /// Price usage records against a pricing table.
    CostReport {
        /// JSON array: {model_id, mode, prompt_id, input_tokens, output_tokens}.
        #[arg(long)]
        usage: PathBuf,
        #[arg(long)]
        pricing: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-run comparison tables from run directories.
    Report {
        /// Output directories of finished runs.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-execute a stored run record into a new directory.
    Replay {
        #[arg(long)]
        record: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_format(s: &str) -> Result<ManifestFormat, RunError> {
    s.parse::<ManifestFormat>()
        .map_err(|e| RunError::Config(e.to_string()))
}

/// `1-10`, `1..10`, `5`, or `1,5,10`.
fn parse_shots(spec: &str) -> Result<Vec<u32>, RunError> {
    let spec = spec.trim();
    let bad = |why: &str| RunError::Config(format!("bad --shots `{spec}`: {why}"));
    let range = spec
        .split_once("..")
        .or_else(|| spec.split_once('-'));
    if let Some((lo, hi)) = range {
        let lo: u32 = lo.trim().parse().map_err(|_| bad("not a number"))?;
        let hi: u32 = hi.trim().parse().map_err(|_| bad("not a number"))?;
        if lo == 0 || hi < lo {
            return Err(bad("range must be ascending and positive"));
        }
        return Ok((lo..=hi).collect());
    }
    spec.split(',')
        .map(|part| part.trim().parse::<u32>().map_err(|_| bad("not a number")))
        .collect()
}

fn load_endpoints(path: Option<&Path>) -> Result<BTreeMap<String, EndpointConfig>, RunError> {
    let Some(path) = path else {
        return Ok(BTreeMap::new());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| RunError::Config(format!("cannot read config {}: {e}", path.display())))?;

    #[derive(serde::Deserialize)]
    struct ConfigFile {
        #[serde(default)]
        endpoints: BTreeMap<String, EndpointBody>,
    }
    #[derive(serde::Deserialize)]
    struct EndpointBody {
        base_url: String,
        #[serde(default)]
        api_key_env: Option<String>,
        model_id: String,
        #[serde(default)]
        mode: Option<BatchMode>,
        #[serde(default)]
        batch_size: Option<usize>,
        #[serde(default)]
        timeout_secs: Option<u64>,
        #[serde(default)]
        max_retries: Option<u32>,
        #[serde(default)]
        requests_per_minute: Option<u32>,
        #[serde(default)]
        max_in_flight: Option<usize>,
    }

    let parsed: ConfigFile = if path.extension().and_then(|e| e.to_str()) == Some("json") {
        serde_json::from_str(&text).map_err(|e| RunError::Config(format!("bad JSON config: {e}")))?
    } else {
        toml::from_str(&text).map_err(|e| RunError::Config(format!("bad TOML config: {e}")))?
    };

    Ok(parsed
        .endpoints
        .into_iter()
        .map(|(name, body)| {
            let config = EndpointConfig {
                name: name.clone(),
                base_url: body.base_url,
                api_key_env: body
                    .api_key_env
                    .unwrap_or_else(|| format!("CESBENCH_API_KEY_{}", name.to_uppercase())),
                model_id: body.model_id,
                mode: body.mode.unwrap_or(BatchMode::NoBatch),
                batch_size: body.batch_size.unwrap_or(50),
                timeout_secs: body.timeout_secs.unwrap_or(60),
                max_retries: body.max_retries.unwrap_or(5),
                requests_per_minute: body.requests_per_minute,
                max_in_flight: body.max_in_flight.unwrap_or(1),
            };
            (name, config)
        })
        .collect())
}

fn base_run_config(args: &RunArgs, approach: Approach) -> Result<RunConfig, RunError> {
    let mut config = RunConfig::mock(
        &args.manifest.manifest,
        parse_format(&args.manifest.format)?,
        approach,
        &args.out,
    );
    config.backend = args.backend.clone();
    config.endpoints = load_endpoints(args.config.as_deref())?;
    config.seed = args.seed;
    config.cache_dir = args.cache_dir.clone();
    config.mode_override = match &args.mode {
        Some(mode) => Some(
            mode.parse::<BatchMode>()
                .map_err(|e| RunError::Config(e.to_string()))?,
        ),
        None => None,
    };
    config.batch_size_override = args.batch_size;
    Ok(config)
}

fn cmd_ingest(manifest: &ManifestArgs, out: &Path) -> Result<(), RunError> {
    let format = parse_format(&manifest.format)?;
    let loaded = ingest_manifest(&manifest.manifest, format)?;
    std::fs::create_dir_all(out)?;
    write_manifest(&loaded, &out.join("manifest.jsonl"), ManifestFormat::JsonLines)?;
    let summary = serde_json::json!({
        "name": loaded.name,
        "version": loaded.version,
        "records": loaded.len(),
        "balanced": loaded.balanced(),
        "class_counts": loaded
            .class_counts()
            .into_iter()
            .map(|(class, count)| (class.canonical_name().to_string(), count))
            .collect::<BTreeMap<String, usize>>(),
    });
    std::fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&summary).unwrap(),
    )?;
    println!(
        "ingested {} records ({}balanced) -> {}",
        loaded.len(),
        if loaded.balanced() { "" } else { "not " },
        out.display()
    );
    Ok(())
}

fn cmd_embed(args: &RunArgs, repair: bool) -> Result<(), RunError> {
    use cesbench::cache::{CacheKey, GetOrComputeError};
    use cesbench::client::embed_image;
    use cesbench::Modality;

    let format = parse_format(&args.manifest.format)?;
    let manifest = ingest_manifest(&args.manifest.manifest, format)?;
    std::fs::create_dir_all(&args.out)?;
    let cache_dir = args
        .cache_dir
        .clone()
        .or_else(|| std::env::var("CESBENCH_CACHE_DIR").ok().map(PathBuf::from))
        .unwrap_or_else(|| args.out.join("cache"));
    let cache = EmbeddingCache::open(&cache_dir).map_err(|e| RunError::Cache(e.to_string()))?;

    let config = base_run_config(args, Approach::VisualProbe)?;
    let client = build_client(&config, &manifest, &args.out.join("requests.log"))?;

    let mut computed = 0usize;
    let mut hits = 0usize;
    for record in &manifest.records {
        let key = CacheKey::new(&record.id, &client.config.model_id, Modality::Image, "raw");
        let had = cache.contains(&key);
        let result = if repair {
            cache.get_or_compute_repair(&key, || embed_image(record, &client))
        } else {
            cache.get_or_compute(&key, || embed_image(record, &client))
        };
        result.map_err(|e| match e {
            GetOrComputeError::Cache(inner) => RunError::Cache(inner.to_string()),
            GetOrComputeError::Producer(inner) => RunError::Client(inner),
        })?;
        if had {
            hits += 1;
        } else {
            computed += 1;
        }
    }
    let summary = serde_json::json!({
        "records": manifest.len(),
        "cache_hits": hits,
        "computed": computed,
        "cache_dir": cache_dir.display().to_string(),
    });
    std::fs::write(
        args.out.join("embed_summary.json"),
        serde_json::to_string_pretty(&summary).unwrap(),
    )?;
    println!(
        "embedded {} records ({hits} cached, {computed} computed)",
        manifest.len()
    );
    Ok(())
}

fn cmd_caption(args: &RunArgs) -> Result<(), RunError> {
    use cesbench::client::{caption_image, CAPTION_INSTRUCTION};

    let format = parse_format(&args.manifest.format)?;
    let manifest = ingest_manifest(&args.manifest.manifest, format)?;
    std::fs::create_dir_all(&args.out)?;
    let config = base_run_config(args, Approach::CaptionProbe)?;
    let client = build_client(&config, &manifest, &args.out.join("requests.log"))?;

    let mut lines = String::new();
    let mut usage = TokenUsage::default();
    for record in &manifest.records {
        let caption = caption_image(record, &client, CAPTION_INSTRUCTION)?;
        usage += caption.usage;
        lines.push_str(&serde_json::to_string(&caption).unwrap());
        lines.push('\n');
    }
    std::fs::write(args.out.join("captions.jsonl"), lines)?;
    std::fs::write(
        args.out.join("caption_usage.json"),
        serde_json::to_string_pretty(&usage).unwrap(),
    )?;
    println!(
        "captioned {} records ({} input tokens, {} output tokens)",
        manifest.len(),
        usage.input_tokens,
        usage.output_tokens
    );
    Ok(())
}

fn cmd_cost_report(usage_path: &Path, pricing_path: &Path, out: &Path) -> Result<(), RunError> {
    #[derive(serde::Deserialize)]
    struct UsageRow {
        model_id: String,
        mode: BatchMode,
        #[serde(default = "default_prompt_id")]
        prompt_id: String,
        input_tokens: u64,
        output_tokens: u64,
    }
    fn default_prompt_id() -> String {
        "1".to_string()
    }

    let pricing = PricingTable::load_json(pricing_path)?;
    let text = std::fs::read_to_string(usage_path)?;
    let rows: Vec<UsageRow> = serde_json::from_str(&text)
        .map_err(|e| RunError::Config(format!("bad usage file: {e}")))?;
    if rows.is_empty() {
        return Err(RunError::Config("usage file has no rows".to_string()));
    }
    let reports: Vec<CostReport> = rows
        .iter()
        .map(|row| {
            let usage = TokenUsage::new(row.input_tokens, row.output_tokens);
            cost_of(&usage, &row.model_id, row.mode, &row.prompt_id, &pricing)
        })
        .collect::<Result<_, _>>()?;

    std::fs::create_dir_all(out)?;
    std::fs::write(
        out.join("cost_report.json"),
        serde_json::to_string_pretty(&reports).unwrap(),
    )?;
    let mut md = render_cost_table(&reports);
    if reports.len() >= 2 {
        let comparison = compare_models(&reports)?;
        md.push('\n');
        for line in &comparison.commentary {
            md.push_str(&format!("- {line}\n"));
        }
        std::fs::write(
            out.join("cost_comparison.json"),
            serde_json::to_string_pretty(&comparison).unwrap(),
        )?;
    }
    std::fs::write(out.join("cost_report.md"), &md)?;
    print!("{md}");
    Ok(())
}

fn cmd_report(runs: &[PathBuf], out: &Path) -> Result<(), RunError> {
    let reports = runs
        .iter()
        .map(|dir| load_run_report(dir))
        .collect::<Result<Vec<_>, _>>()?;
    let text = comparison_report(&reports)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("comparison.md"), &text)?;
    print!("{text}");
    Ok(())
}

fn execute() -> Result<(), RunError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Ingest { manifest, out } => cmd_ingest(&manifest, &out),
        Command::Embed { run: args, repair } => cmd_embed(&args, repair),
        Command::Caption { run: args } => cmd_caption(&args),
        Command::Classify {
            run: args,
            prompt,
            pricing,
        } => {
            let mut config = base_run_config(&args, Approach::PromptZeroshot)?;
            config.prompt = prompt
                .parse::<PromptId>()
                .map_err(|e| RunError::Config(e.to_string()))?;
            config.pricing = pricing;
            let record = run(&config)?;
            println!("run complete -> {}", record.config.out_dir.display());
            Ok(())
        }
        Command::TrainProbe {
            run: args,
            preset,
            test_fraction,
            split_seed,
        } => {
            let approach = match preset.as_str() {
                "text-probe" => Approach::CaptionProbe,
                "vision-probe" => Approach::VisualProbe,
                other => return Err(RunError::Config(format!("unknown preset `{other}`"))),
            };
            let mut config = base_run_config(&args, approach)?;
            config.probe_preset = preset;
            config.split = SplitSpec::new(test_fraction, split_seed, true)?;
            let record = run(&config)?;
            println!("run complete -> {}", record.config.out_dir.display());
            Ok(())
        }
        Command::Fewshot {
            run: args,
            shots,
            trials,
            normalize_before_average,
        } => {
            let mut config = base_run_config(&args, Approach::Fewshot)?;
            config.fewshot = FewShotParams {
                shots: parse_shots(&shots)?,
                trials,
                base_seed: args.seed,
                normalize_before_average,
            };
            let record = run(&config)?;
            println!("run complete -> {}", record.config.out_dir.display());
            Ok(())
        }
        Command::Discover {
            run: args,
            clusterer,
            k,
            min_cluster_size,
            selection,
            n_neighbors,
            output_dims,
            metric,
        } => {
            let mut config = base_run_config(&args, Approach::Discover)?;
            let clusterer = match clusterer.as_str() {
                "kmeans" => ClustererChoice::Kmeans { k },
                "hdbscan" => ClustererChoice::Hdbscan {
                    min_cluster_size,
                    selection: selection
                        .parse::<SelectionMethod>()
                        .map_err(|e| RunError::Config(e.to_string()))?,
                },
                other => return Err(RunError::Config(format!("unknown clusterer `{other}`"))),
            };
            let metric = match metric.as_str() {
                "cosine" => DistanceMetric::Cosine,
                "euclidean" => DistanceMetric::Euclidean,
                other => return Err(RunError::Config(format!("unknown metric `{other}`"))),
            };
            config.discover = DiscoverParams {
                reduction: ReductionConfig {
                    n_neighbors,
                    output_dims,
                    metric,
                    seed: args.seed,
                    ..ReductionConfig::default()
                },
                clusterer,
            };
            let record = run(&config)?;
            println!("run complete -> {}", record.config.out_dir.display());
            Ok(())
        }
        Command::CostReport { usage, pricing, out } => cmd_cost_report(&usage, &pricing, &out),
        Command::Report { runs, out } => cmd_report(&runs, &out),
        Command::Replay { record, out } => {
            replay(&record, &out)?;
            println!("replay complete -> {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match execute() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
