//! Prototype few-shot classification: sweep the shot count from 1 to 10,
//! 10 random support sets each, and print the accuracy curve.
//!
//! ```bash
//! cargo run -p cesbench --example few_shot
//! ```

use std::path::Path;

use cesbench::dataset::ManifestFormat;
use cesbench::runner::{run, Approach, FewShotParams, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/manifest_small.csv");
    let out = tempfile::tempdir()?;

    let mut config = RunConfig::mock(&manifest, ManifestFormat::Csv, Approach::Fewshot, out.path());
    config.fewshot = FewShotParams {
        shots: (1..=10).collect(),
        trials: 10,
        base_seed: 42,
        normalize_before_average: false,
    };
    run(&config)?;

    println!("shots-vs-accuracy curve (mean over 10 trials):\n");
    print!("{}", std::fs::read_to_string(out.path().join("shots_curve.csv"))?);
    Ok(())
}
