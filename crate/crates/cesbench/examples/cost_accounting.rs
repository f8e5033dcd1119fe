//! Token pricing arithmetic: reconstruct the published cost table from
//! per-row rates and watch the cheap-on-paper model lose on total cost.
//!
//! ```bash
//! cargo run -p cesbench --example cost_accounting
//! ```

use std::path::Path;

use cesbench::client::{BatchMode, TokenUsage};
use cesbench::cost::{compare_models, cost_of, render_cost_table, PricingTable};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let pricing_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/pricing_table8.json");
    let pricing = PricingTable::load_json(&pricing_path)?;

    // Token counts observed when classifying the 960-image collection with
    // prompt 1 under both models.
    let runs = [
        ("gpt-4o", BatchMode::Batch, 640_860u64, 13_331u64),
        ("gpt-4o", BatchMode::NoBatch, 640_860, 13_331),
        ("gpt-4o-mini", BatchMode::Batch, 20_195_532, 15_537),
        ("gpt-4o-mini", BatchMode::NoBatch, 20_195_532, 15_537),
    ];
    let reports: Vec<_> = runs
        .iter()
        .map(|(model, mode, input, output)| {
            cost_of(&TokenUsage::new(*input, *output), model, *mode, "1", &pricing)
        })
        .collect::<Result<_, _>>()?;

    print!("{}", render_cost_table(&reports));

    let comparison = compare_models(&reports)?;
    println!("\ncheapest first:");
    for idx in &comparison.ranking {
        let report = &reports[*idx];
        println!(
            "  {} ({}) total ${}",
            report.model_id,
            report.mode.as_str(),
            report.total.usd_4dp()
        );
    }
    println!();
    for line in &comparison.commentary {
        println!("note: {line}");
    }
    Ok(())
}
