//! Render the two classification prompts and parse model replies back into
//! class decisions.
//!
//! ```bash
//! cargo run -p cesbench --example prompt_rendering
//! ```

use cesbench::dataset::CesClass;
use cesbench::prompt::{extract_class, render_cluster_prompt, render_prompt, PromptTemplate};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let simple = render_prompt(&PromptTemplate::simple(), &CesClass::ALL)?;
    println!("--- simple prompt ---\n{simple}\n");

    let extended = render_prompt(&PromptTemplate::extended(), &CesClass::ALL)?;
    println!("--- extended prompt ---\n{extended}\n");

    let keywords: Vec<String> = ["food", "wine", "restaurant", "dish"]
        .iter()
        .map(|w| w.to_string())
        .collect();
    println!(
        "--- cluster mapping prompt ---\n{}\n",
        render_cluster_prompt(&keywords, &CesClass::ALL)?
    );

    // Post-processing: arbitrary text in, class decision out.
    println!("--- extraction ---");
    for reply in [
        "Landscape-Nature",
        "Sport",
        "The image shows gastronomy: a plate of local food.",
        "It mixes urban rural scenery with fauna-flora elements.",
        "I cannot classify this image.",
    ] {
        let decision = extract_class("demo", reply, &CesClass::ALL);
        println!("{reply:?}\n  -> {:?} ({:?})", decision.predicted, decision.match_kind);
    }
    Ok(())
}
