//! Decode one synthetic task with the toy model at increasing boost levels:
//! the distractor wins at baseline, the target's color wins once its patch
//! is boosted, and per-layer attention mass shows why.
//!
//! ```bash
//! cargo run --example toy_decode
//! ```

use cof::config::LayerScope;
use cof::geometry::PatchGrid;
use cof::harness::generate_suite;
use cof::toy_model::{generate, ModelArch, ModelWeights, ReweightSpec, TokenSequence};

fn main() {
    let weights = ModelWeights::from_seed(42, ModelArch::default()).unwrap();
    let task = generate_suite(7, 1, PatchGrid::new(4, 4).unwrap(), 3)
        .unwrap()
        .remove(0);

    println!("question    : {}", task.question);
    println!("gold answer : {}", task.gold_answer);
    println!("target patch: {:?}", task.image.target_patch());
    println!("distractors : {:?}", task.image.distractor_patches());
    println!();

    let sequence = TokenSequence::build(&task.image, &task.question, &weights).unwrap();
    let target_mask = task.image.target_mask();

    for lambda in [1.0, 2.0, 4.5, 22.0] {
        let spec = ReweightSpec {
            lambda,
            mask: target_mask.clone(),
            layer_scope: LayerScope::All,
        };
        let reweight = if lambda > 1.0 { Some(&spec) } else { None };
        let output = generate(&sequence, &weights, reweight, 1, Some(&target_mask)).unwrap();
        let mass: Vec<String> = output
            .attention_mass
            .iter()
            .map(|m| format!("{m:.4}"))
            .collect();
        println!(
            "lambda = {lambda:<4} -> answer {:<8} ({}) mass on target per layer: [{}]",
            output.text,
            if output.text == task.gold_answer {
                "correct"
            } else {
                "wrong"
            },
            mass.join(", ")
        );
    }
}
