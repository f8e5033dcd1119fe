//! The hybrid discovery pipeline: captions, text embeddings, neighbor-graph
//! reduction, clustering, TF-IDF bags of words, and zero-shot cluster
//! labeling. Runs both clusterers and prints their bags and scores.
//!
//! ```bash
//! cargo run -p cesbench --example cluster_discovery
//! ```

use std::path::Path;

use cesbench::dataset::ManifestFormat;
use cesbench::discover::{BagOfWords, SelectionMethod};
use cesbench::runner::{load_run_report, run, Approach, ClustererChoice, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/manifest_small.csv");

    for clusterer in [
        ClustererChoice::Kmeans { k: 6 },
        ClustererChoice::Hdbscan {
            min_cluster_size: 10,
            selection: SelectionMethod::Leaf,
        },
    ] {
        let out = tempfile::tempdir()?;
        let mut config =
            RunConfig::mock(&manifest, ManifestFormat::Csv, Approach::Discover, out.path());
        config.discover.clusterer = clusterer.clone();
        run(&config)?;

        let report = load_run_report(out.path())?;
        println!("=== {clusterer:?} ===");
        println!(
            "precision {:.2} / recall {:.2} / accuracy {:.2}",
            report.precision, report.recall, report.accuracy
        );

        let bows: Vec<BagOfWords> =
            serde_json::from_str(&std::fs::read_to_string(out.path().join("bow.json"))?)?;
        for bow in &bows {
            let words: Vec<&str> = bow.words.iter().take(5).map(|(w, _)| w.as_str()).collect();
            println!("  cluster {}: {}", bow.cluster, words.join(", "));
        }
        print!("{}", std::fs::read_to_string(out.path().join("mapping_provenance.log"))?);
        println!();
    }
    Ok(())
}
