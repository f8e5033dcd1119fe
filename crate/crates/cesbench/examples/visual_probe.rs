//! Train the linear head directly on frozen visual embeddings (100 epochs,
//! lr 2e-3) and inspect the trained checkpoint.
//!
//! ```bash
//! cargo run -p cesbench --example visual_probe
//! ```

use std::path::Path;

use cesbench::dataset::ManifestFormat;
use cesbench::probe::load_checkpoint;
use cesbench::runner::{load_run_report, run, Approach, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/manifest_small.csv");
    let out = tempfile::tempdir()?;

    let config = RunConfig::mock(
        &manifest,
        ManifestFormat::Csv,
        Approach::VisualProbe,
        out.path(),
    );
    run(&config)?;

    let report = load_run_report(out.path())?;
    println!("method:   {}", report.method);
    println!("accuracy: {:.2}", report.accuracy);
    if let Some(per_class) = &report.per_class_accuracy {
        println!("per-class accuracy:");
        for (class, pct) in per_class {
            println!("  {:<20} {pct:.2}", class.canonical_name());
        }
    }

    let model = load_checkpoint(&out.path().join("probe.bin"))?;
    println!(
        "\ncheckpoint: {} classes x {} dims, trained on `{}`",
        model.n_classes(),
        model.dims,
        model.trained_on
    );
    Ok(())
}
