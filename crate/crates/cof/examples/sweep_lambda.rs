//! Hyperparameter sweep over the (alpha, lambda) grid; the CSV lands on
//! stdout. Within each alpha block the mean attention mass on the target is
//! non-decreasing in lambda.
//!
//! ```bash
//! cargo run --release --example sweep_lambda
//! ```

use cof::config::CofConfig;
use cof::geometry::PatchGrid;
use cof::harness::{generate_suite, sweep, EvalOptions};
use cof::pipeline::ToyBackend;
use cof::toy_model::{ModelArch, ModelWeights};

fn main() {
    let weights = ModelWeights::from_seed(42, ModelArch::default()).unwrap();
    let backend = ToyBackend::new(weights);
    let suite = generate_suite(7, 50, PatchGrid::new(4, 4).unwrap(), 3).unwrap();

    let table = sweep(
        &suite,
        &backend,
        &[1.0, 1.3],
        &[1.0, 2.0, 4.5, 22.0],
        &CofConfig::default(),
        &EvalOptions::default(),
    )
    .unwrap();

    let mut csv = Vec::new();
    table.write_csv(&mut csv).unwrap();
    print!("{}", String::from_utf8_lossy(&csv));
}
