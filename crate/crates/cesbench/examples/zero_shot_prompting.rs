//! The prompting pipeline end to end with the deterministic mock backend:
//! render a prompt, classify every image, score the predictions.
//!
//! ```bash
//! cargo run -p cesbench --example zero_shot_prompting
//! ```

use std::path::Path;

use cesbench::dataset::ManifestFormat;
use cesbench::runner::{load_run_report, run, Approach, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/manifest_small.csv");
    let out = tempfile::tempdir()?;

    let mut config = RunConfig::mock(
        &manifest,
        ManifestFormat::Csv,
        Approach::PromptZeroshot,
        out.path(),
    );
    config.prompt = cesbench::prompt::PromptId::Extended;
    let record = run(&config)?;

    let report = load_run_report(out.path())?;
    println!("method:    {}", report.method);
    println!("precision: {:.2}", report.precision);
    println!("recall:    {:.2}", report.recall);
    println!("accuracy:  {:.2}", report.accuracy);
    println!("\nartifacts:");
    for name in &record.artifacts {
        println!("  {}", out.path().join(name).display());
    }
    Ok(())
}
