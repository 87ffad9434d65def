//! One full two-stage run: the grounding call, the parsed box at each
//! post-processing step, the mask, and the reweighted answer — next to the
//! baseline and reweight-all variants for comparison.
//!
//! ```bash
//! cargo run --example cof_pipeline
//! ```

use cof::config::CofConfig;
use cof::geometry::PatchGrid;
use cof::harness::generate_suite;
use cof::pipeline::{run_variant, ImageInput, PipelineOptions, RunVariant, ToyBackend};
use cof::toy_model::{ModelArch, ModelWeights};

fn main() {
    let weights = ModelWeights::from_seed(42, ModelArch::default()).unwrap();
    let backend = ToyBackend::new(weights);
    let task = generate_suite(7, 1, PatchGrid::new(4, 4).unwrap(), 3)
        .unwrap()
        .remove(0);
    let image = ImageInput::Synthetic(task.image.clone());

    let config = CofConfig::preset_13b();
    let opts = PipelineOptions {
        measure: Some(task.image.target_mask()),
        ..PipelineOptions::default()
    };

    println!("question: {} (gold: {})", task.question, task.gold_answer);
    println!(
        "config  : alpha = {}, lambda = {}\n",
        config.alpha, config.lambda
    );

    for variant in RunVariant::ALL {
        let outcome = run_variant(&backend, &image, &task.question, variant, &config, &opts)
            .expect("toy backend never fails");
        println!("== {} ==", outcome.variant);
        if let Some(boxes) = &outcome.boxes {
            println!("  raw box  : {:?}", boxes.raw.corners());
            println!(
                "  expanded : [{:.4}, {:.4}, {:.4}, {:.4}]",
                boxes.expanded.x1, boxes.expanded.y1, boxes.expanded.x2, boxes.expanded.y2
            );
            println!("  clamped  : {:?}", boxes.clamped.corners());
        }
        if let Some(cardinality) = outcome.mask_cardinality {
            println!(
                "  mask     : {cardinality}/{} patches",
                task.image.grid().len()
            );
        }
        let mass: Vec<String> = outcome
            .attention_mass
            .iter()
            .map(|m| format!("{m:.4}"))
            .collect();
        println!("  mass     : [{}]", mass.join(", "));
        println!(
            "  answer   : {:?} ({})\n",
            outcome.answer,
            if outcome.answer == task.gold_answer {
                "correct"
            } else {
                "wrong"
            }
        );
    }
}
