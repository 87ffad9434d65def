//! Evaluate all three variants on a synthetic suite and print the summary
//! table, writing the per-run records as JSONL.
//!
//! ```bash
//! cargo run --release --example evaluate_variants
//! ```

use cof::config::CofConfig;
use cof::geometry::PatchGrid;
use cof::harness::{evaluate, generate_suite, EvalOptions};
use cof::pipeline::{RunVariant, ToyBackend};
use cof::toy_model::{ModelArch, ModelWeights};

fn main() {
    let weights = ModelWeights::from_seed(42, ModelArch::default()).unwrap();
    let backend = ToyBackend::new(weights);
    let suite = generate_suite(7, 100, PatchGrid::new(4, 4).unwrap(), 3).unwrap();
    let config = CofConfig {
        alpha: 1.0,
        lambda: 4.5,
        ..CofConfig::preset_13b()
    };

    let mut jsonl: Vec<u8> = Vec::new();
    let output = evaluate(
        &suite,
        &backend,
        &RunVariant::ALL,
        &config,
        &EvalOptions::default(),
        Some(&mut jsonl),
    )
    .unwrap();

    println!(
        "{} tasks, alpha = {}, lambda = {}\n",
        suite.len(),
        config.alpha,
        config.lambda
    );
    print!("{}", output.summary.to_table());
    println!(
        "\n{} JSONL records produced ({} bytes); first record:",
        output.records.len(),
        jsonl.len()
    );
    println!(
        "{}",
        String::from_utf8_lossy(&jsonl).lines().next().unwrap()
    );
}
