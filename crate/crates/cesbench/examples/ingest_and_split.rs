//! Load a manifest, inspect the class balance, and carve deterministic
//! partitions out of it.
//!
//! ```bash
//! cargo run -p cesbench --example ingest_and_split
//! ```

use std::path::Path;

use cesbench::dataset::{ingest_manifest, sample_support_set, stratified_split, ManifestFormat, SplitSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let manifest_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/manifest_960.csv");
    let manifest = ingest_manifest(&manifest_path, ManifestFormat::Csv)?;

    println!("manifest `{}`: {} records", manifest.name, manifest.len());
    println!("balanced: {}", manifest.balanced());
    for (class, count) in manifest.class_counts() {
        println!("  {:<20} {count}", class.canonical_name());
    }

    // 80/20 stratified split, reproducible from the seed.
    let spec = SplitSpec::new(0.2, 42, true)?;
    let (train, test) = stratified_split(&manifest, &spec)?;
    println!("\nsplit at {:.0}%: {} train / {} test", spec.test_fraction * 100.0, train.len(), test.len());

    // A 5-shot support set; the query set is everything else.
    let partition = sample_support_set(&manifest, 5, 7)?;
    println!("\n5-shot support set (seed 7):");
    for (class, records) in &partition.support {
        let ids: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
        println!("  {:<20} {}", class.canonical_name(), ids.join(", "));
    }
    println!("query size: {}", partition.query.len());
    Ok(())
}
