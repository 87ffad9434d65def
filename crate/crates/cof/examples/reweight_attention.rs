//! The reweighting kernel in isolation: boost two visual columns of a
//! single attention row and watch the odds ratio against an unboosted
//! column scale by exactly lambda.
//!
//! ```bash
//! cargo run --example reweight_attention
//! ```

use cof::attention::{reweight_softmax, softmax, ReweightParams, ScoreMatrix};
use cof::matrix::Matrix;

fn main() {
    // One query row over 6 keys: 4 visual tokens then 2 text tokens.
    let scores = ScoreMatrix::new(
        Matrix::from_vec(1, 6, vec![0.4, -0.3, 0.9, 0.1, 1.2, 0.6]),
        16,
    )
    .unwrap();
    // Boost visual columns 1 and 2; text columns are never boosted.
    let mask = vec![false, true, true, false, false, false];

    let plain = softmax(&scores, None).unwrap();
    println!("baseline row : {:?}", rounded(plain.row(0)));

    for lambda in [2.0, 4.5, 22.0] {
        let params = ReweightParams::new(lambda, mask.clone()).unwrap();
        let boosted = reweight_softmax(&scores, &params, None).unwrap();
        let row = boosted.row(0);
        println!("lambda = {lambda:<4}: {:?}", rounded(row));

        let odds_before = plain.get(0, 1) / plain.get(0, 3);
        let odds_after = row[1] / row[3];
        println!(
            "              odds(col1 : col3) scaled by {:.12} (lambda = {lambda})",
            odds_after / odds_before
        );

        let masked_mass: f64 = row
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(p, _)| p)
            .sum();
        println!("              mass on boosted columns: {masked_mass:.4}");
    }
}

fn rounded(row: &[f64]) -> Vec<f64> {
    row.iter().map(|v| (v * 1e4).round() / 1e4).collect()
}
