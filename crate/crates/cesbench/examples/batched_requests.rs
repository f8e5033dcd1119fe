//! Client-side batching, retries, and usage accounting against the mock
//! backend: 101 items at batch size 50 cost exactly 3 transport calls, and
//! a scripted pair of 429s is absorbed by exponential backoff.
//!
//! ```bash
//! cargo run -p cesbench --example batched_requests
//! ```

use std::path::Path;
use std::sync::Arc;

use cesbench::client::mock::{MockBackend, MockFault};
use cesbench::client::{
    caption_image, run_batched, BatchMode, ChatRequest, Clock, EndpointConfig, MockClock,
    ModelClient, CAPTION_INSTRUCTION,
};
use cesbench::dataset::{ingest_manifest, ManifestFormat};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let manifest_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/manifest_960.csv");
    let manifest = ingest_manifest(&manifest_path, ManifestFormat::Csv)?;

    // --- batching ---
    let backend = Arc::new(MockBackend::echo(&manifest, 7));
    let config = EndpointConfig::mock("mock-lvlm").with_mode(BatchMode::Batch, 50);
    let client = ModelClient::new(config, backend.clone());
    let requests: Vec<ChatRequest> = manifest.records[..101]
        .iter()
        .map(|r| ChatRequest {
            item_id: r.id.clone(),
            prompt: "Classify the image into one of these categories: ...".to_string(),
            image: None,
        })
        .collect();
    let run = run_batched(requests, &client, false)?;
    println!(
        "101 items, batch size 50 -> {} transport calls, {} results",
        run.transport_calls,
        run.results.len()
    );
    println!(
        "aggregate usage: {} input / {} output tokens across {} requests",
        run.usage.input_tokens, run.usage.output_tokens, run.usage.request_count
    );

    // --- retries with a virtual clock ---
    let flaky = Arc::new(MockBackend::echo(&manifest, 7).with_faults(vec![
        MockFault::RateLimited { retry_after_secs: 1 },
        MockFault::RateLimited { retry_after_secs: 2 },
    ]));
    let clock = Arc::new(MockClock::default());
    let client = ModelClient::new(EndpointConfig::mock("mock-lvlm"), flaky).with_clock(clock.clone());
    let caption = caption_image(&manifest.records[0], &client, CAPTION_INSTRUCTION)?;
    println!(
        "\nafter two 429s: caption {:?} on attempt {}, {:.1}s of virtual backoff",
        caption.text,
        caption.usage.request_count,
        clock.now_millis() as f64 / 1000.0
    );
    Ok(())
}
