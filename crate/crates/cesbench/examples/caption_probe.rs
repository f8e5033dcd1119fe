//! Caption images, embed the captions, and train a linear probe on the
//! frozen text embeddings.
//!
//! The `text-probe` preset carries the published text-side recipe
//! (5 epochs, batch 16, lr 2e-5, weight decay 0.01) tuned for transformer
//! embeddings; on the mock fixtures that learning rate barely moves the
//! head, so this example also trains a second head with a desk-scale
//! config to show the pipeline converging.
//!
//! ```bash
//! cargo run -p cesbench --example caption_probe
//! ```

use std::path::Path;
use std::sync::Arc;

use cesbench::client::mock::MockBackend;
use cesbench::client::{caption_image, embed_text, EndpointConfig, ModelClient, CAPTION_INSTRUCTION};
use cesbench::dataset::{ingest_manifest, stratified_split, ManifestFormat, SplitSpec};
use cesbench::embedding::EmbeddingVector;
use cesbench::probe::{evaluate_probe, train_probe, Optimizer, TrainConfig};
use cesbench::CesClass;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let manifest_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/manifest_small.csv");
    let manifest = ingest_manifest(&manifest_path, ManifestFormat::Csv)?;
    let client = ModelClient::new(
        EndpointConfig::mock("mock-lvlm"),
        Arc::new(MockBackend::echo(&manifest, 42)),
    );

    // Caption, then embed each caption.
    let mut features: Vec<(EmbeddingVector, CesClass)> = Vec::new();
    for record in &manifest.records {
        let caption = caption_image(record, &client, CAPTION_INSTRUCTION)?;
        let mut vector = embed_text(&caption.text, &client)?;
        vector.item_id = record.id.clone();
        features.push((vector, record.label.unwrap()));
    }
    println!("captioned and embedded {} records", features.len());

    let split = SplitSpec::new(0.2, 42, true)?;
    let (train_records, test_records) = stratified_split(&manifest, &split)?;
    let select = |records: &[cesbench::ImageRecord]| -> Vec<(EmbeddingVector, CesClass)> {
        records
            .iter()
            .map(|r| {
                features
                    .iter()
                    .find(|(v, _)| v.item_id == r.id)
                    .cloned()
                    .unwrap()
            })
            .collect()
    };
    let train_set = select(&train_records);
    let test_set = select(&test_records);

    // Published recipe: a whisper of learning at desk scale.
    let (paper_model, paper_report) = train_probe(&train_set, &TrainConfig::text_probe())?;
    let paper_metrics = evaluate_probe(&paper_model, &test_set)?;
    println!(
        "\ntext-probe preset: train accuracy {:.2}, test accuracy {:.2} (final loss {:.4})",
        paper_report.final_train_accuracy,
        paper_metrics.accuracy,
        paper_report.epoch_losses.last().unwrap()
    );

    // Desk-scale config: enough steps to separate the mock embeddings.
    let tuned = TrainConfig {
        epochs: 60,
        batch_size: 16,
        learning_rate: 5e-2,
        weight_decay: 0.01,
        seed: 42,
        optimizer: Optimizer::AdamDecoupledDecay,
    };
    let (model, report) = train_probe(&train_set, &tuned)?;
    let metrics = evaluate_probe(&model, &test_set)?;
    println!(
        "tuned config:      train accuracy {:.2}, test accuracy {:.2} (final loss {:.4})",
        report.final_train_accuracy,
        metrics.accuracy,
        report.epoch_losses.last().unwrap()
    );
    Ok(())
}
