//! Acceptance suite: one test per criterion, each asserting its stated
//! tolerance and printing one PASS line (visible with `--nocapture`).
//!
//! Run with `cargo test --test acceptance`.

use std::io::BufReader;
use std::time::{Duration, Instant};

use cof::attention::{reweight_softmax, softmax, ReweightParams, ScoreMatrix};
use cof::config::{CofConfig, LayerScope};
use cof::geometry::{
    box_to_mask, clamp_box, expand_box, NormBox, PatchGrid, TokenMask, UnclampedBox,
};
use cof::grounding::{parse_bbox_response, CoordConvention};
use cof::harness::{
    evaluate, generate_suite, read_jsonl, sweep, write_jsonl, EvalOptions, EvalRecord,
    RecordConfig, SweepTable,
};
use cof::matrix::{BoolMatrix, Matrix};
use cof::pipeline::{BackendError, RunVariant, ToyBackend};
use cof::remote::testing::TestServer;
use cof::remote::{remote_backend_call, RemoteRequest, RequestMode, RetryPolicy, TransportError};
use cof::toy_model::{
    decode_step, GroundingNoise, ModelArch, ModelWeights, ReweightSpec, SyntheticImage,
    TokenSequence, TEXT_VOCAB,
};

/// splitmix64: a self-contained deterministic stream for test inputs,
/// independent of the crate's own RNG plumbing.
struct Sm64(u64);

impl Sm64 {
    fn new(seed: u64) -> Self {
        Sm64(seed)
    }

    fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }

    fn uniform(&mut self) -> f64 {
        (self.next() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + self.uniform() * (hi - lo)
    }

    fn below(&mut self, n: usize) -> usize {
        (self.next() % n as u64) as usize
    }

    fn chance(&mut self, p: f64) -> bool {
        self.uniform() < p
    }
}

fn random_scores(
    rng: &mut Sm64,
    n_query: usize,
    n_key: usize,
    with_sentinels: bool,
) -> ScoreMatrix {
    let values = Matrix::from_fn(n_query, n_key, |_, _| {
        if with_sentinels && rng.chance(0.05) {
            f64::NEG_INFINITY
        } else {
            rng.range(-20.0, 20.0)
        }
    });
    ScoreMatrix::new(values, 16).unwrap()
}

fn random_mask(rng: &mut Sm64, n: usize) -> Vec<bool> {
    (0..n).map(|_| rng.chance(0.5)).collect()
}

/// Both mask classes populated, so odds ratios are well-defined.
fn random_split_mask(rng: &mut Sm64, n: usize) -> Vec<bool> {
    loop {
        let mask = random_mask(rng, n);
        let set = mask.iter().filter(|&&b| b).count();
        if set > 0 && set < n {
            return mask;
        }
    }
}

#[test]
fn criterion_01_lambda_one_identity() {
    let started = Instant::now();
    let mut rng = Sm64::new(0x01);
    for case in 0..1000 {
        let n_query = 1 + rng.below(12);
        let n_key = 1 + rng.below(48);
        let scores = random_scores(&mut rng, n_query, n_key, true);
        // Keep at least one finite entry per row so softmax is defined.
        let scores = {
            let mut values = scores.values().clone();
            for i in 0..n_query {
                if values.row(i).iter().all(|v| *v == f64::NEG_INFINITY) {
                    values.set(i, 0, 0.0);
                }
            }
            ScoreMatrix::new(values, 16).unwrap()
        };
        let params = ReweightParams::new(1.0, random_mask(&mut rng, n_key)).unwrap();
        let plain = softmax(&scores, None).unwrap();
        let reweighted = reweight_softmax(&scores, &params, None).unwrap();
        assert_eq!(
            plain, reweighted,
            "case {case}: lambda=1 must be bit-identical"
        );
    }
    let elapsed = started.elapsed();
    assert!(
        elapsed < Duration::from_secs(5),
        "1000 identity checks took {elapsed:?}, budget 5 s"
    );
    println!("criterion 01 PASS: lambda=1 equals plain softmax bit-for-bit on 1000 matrices ({elapsed:?})");
}

#[test]
#[allow(clippy::needless_range_loop)]
fn criterion_02_odds_ratio_law() {
    let started = Instant::now();
    let mut rng = Sm64::new(0x02);
    for case in 0..100 {
        let scores = random_scores(&mut rng, 1, 64, false);
        let mask = random_split_mask(&mut rng, 64);
        let baseline = softmax(&scores, None).unwrap();
        for &lambda in &[2.0, 4.5, 22.0] {
            let params = ReweightParams::new(lambda, mask.clone()).unwrap();
            let boosted = reweight_softmax(&scores, &params, None).unwrap();
            for i in 0..64 {
                if !mask[i] {
                    continue;
                }
                for j in 0..64 {
                    if mask[j] || baseline.get(0, j) == 0.0 {
                        continue;
                    }
                    let base_odds = baseline.get(0, i) / baseline.get(0, j);
                    if base_odds == 0.0 {
                        continue;
                    }
                    let new_odds = boosted.get(0, i) / boosted.get(0, j);
                    let ratio = new_odds / base_odds;
                    assert!(
                        (ratio - lambda).abs() <= 1e-9 * lambda,
                        "case {case}: odds ratio {ratio} != lambda {lambda} (cols {i},{j})"
                    );
                }
            }
        }
    }
    let elapsed = started.elapsed();
    assert!(
        elapsed < Duration::from_secs(5),
        "odds-ratio sweep took {elapsed:?}, budget 5 s"
    );
    println!("criterion 02 PASS: odds scale by exactly lambda for {{2, 4.5, 22}} ({elapsed:?})");
}

#[test]
fn criterion_03_row_stochasticity() {
    let mut rng = Sm64::new(0x03);
    for _ in 0..500 {
        let n = 2 + rng.below(24);
        let scores = random_scores(&mut rng, n, n, true);
        let scores = {
            let mut values = scores.values().clone();
            for i in 0..n {
                values.set(i, 0, rng.range(-20.0, 20.0));
            }
            ScoreMatrix::new(values, 16).unwrap()
        };
        let causal = BoolMatrix::causal(n);
        let params = ReweightParams::new(22.0, random_mask(&mut rng, n)).unwrap();
        let probs = reweight_softmax(&scores, &params, Some(&causal)).unwrap();
        for i in 0..n {
            let sum: f64 = probs.row(i).iter().sum();
            assert!(
                (sum - 1.0).abs() <= 1e-12,
                "row {i} sums to {sum} under causal mask and lambda=22"
            );
        }
    }
    println!(
        "criterion 03 PASS: reweighted rows sum to 1 within 1e-12 with causal masks and lambda=22"
    );
}

#[test]
fn criterion_04_geometry_suite() {
    let mut rng = Sm64::new(0x04);
    for case in 0..10_000 {
        let x1 = rng.range(0.0, 1.0);
        let x2 = rng.range(x1, 1.0);
        let y1 = rng.range(0.0, 1.0);
        let y2 = rng.range(y1, 1.0);
        let alpha = rng.range(0.5, 3.0);
        let box_ = NormBox::new(x1, y1, x2, y2).unwrap();
        let expanded = expand_box(&box_, alpha).unwrap();
        let clamped = clamp_box(&expanded);

        let [cx1, cy1, cx2, cy2] = clamped.corners();
        assert!(
            (0.0..=1.0).contains(&cx1)
                && (0.0..=1.0).contains(&cy1)
                && (0.0..=1.0).contains(&cx2)
                && (0.0..=1.0).contains(&cy2),
            "case {case}: clamped box escaped the unit square"
        );

        let unclamped_already =
            expanded.x1 >= 0.0 && expanded.y1 >= 0.0 && expanded.x2 <= 1.0 && expanded.y2 <= 1.0;
        if unclamped_already {
            let (ecx, ecy) = expanded.center();
            let (bcx, bcy) = box_.center();
            assert!(
                (ecx - bcx).abs() <= 1e-12 && (ecy - bcy).abs() <= 1e-12,
                "case {case}: center moved without clamping"
            );
            let expected_area = alpha * alpha * box_.area();
            let got_area = clamped.area();
            if expected_area > 0.0 {
                assert!(
                    (got_area - expected_area).abs() <= 1e-9 * expected_area,
                    "case {case}: area ratio violated: {got_area} vs {expected_area}"
                );
            }
        }
    }
    println!("criterion 04 PASS: 10k expand+clamp cases stay inside [0,1]^2 with exact centers and alpha^2 areas when unclamped");
}

/// Independently written rasterization: per-patch positive-overlap test plus
/// the center-patch rule for zero-area boxes.
fn brute_force_mask(box_: &NormBox, grid: &PatchGrid) -> Vec<bool> {
    let rows = grid.rows();
    let cols = grid.cols();
    let mut bits = vec![false; rows * cols];
    if box_.area() == 0.0 {
        let (cx, cy) = box_.center();
        let mut c = (cx * cols as f64).floor() as usize;
        let mut r = (cy * rows as f64).floor() as usize;
        if c >= cols {
            c = cols - 1;
        }
        if r >= rows {
            r = rows - 1;
        }
        bits[r * cols + c] = true;
        return bits;
    }
    for r in 0..rows {
        for c in 0..cols {
            let px1 = c as f64 / cols as f64;
            let px2 = (c + 1) as f64 / cols as f64;
            let py1 = r as f64 / rows as f64;
            let py2 = (r + 1) as f64 / rows as f64;
            let w = box_.x2().min(px2) - box_.x1().max(px1);
            let h = box_.y2().min(py2) - box_.y1().max(py1);
            if w > 0.0 && h > 0.0 {
                bits[r * cols + c] = true;
            }
        }
    }
    bits
}

#[test]
fn criterion_05_mask_oracle() {
    let mut rng = Sm64::new(0x05);
    let mut mismatches = 0usize;
    for _ in 0..1000 {
        let grid = PatchGrid::new(1 + rng.below(32), 1 + rng.below(32)).unwrap();
        let snap = |rng: &mut Sm64, v: f64, n: usize| -> f64 {
            if rng.chance(0.3) {
                // Snap onto a patch boundary to exercise half-open edges.
                (v * n as f64).round() / n as f64
            } else {
                v
            }
        };
        let raw_x1 = rng.range(0.0, 1.0);
        let x1 = snap(&mut rng, raw_x1, grid.cols());
        let raw_x2 = rng.range(x1, 1.0);
        let x2 = snap(&mut rng, raw_x2, grid.cols()).max(x1);
        let raw_y1 = rng.range(0.0, 1.0);
        let y1 = snap(&mut rng, raw_y1, grid.rows());
        let raw_y2 = rng.range(y1, 1.0);
        let y2 = snap(&mut rng, raw_y2, grid.rows()).max(y1);
        let box_ = if rng.chance(0.1) {
            let px = rng.range(0.0, 1.0);
            let py = rng.range(0.0, 1.0);
            NormBox::new(px, py, px, py).unwrap()
        } else {
            NormBox::new(x1, y1, x2, y2).unwrap()
        };
        let mask = box_to_mask(&box_, &grid);
        if mask.bits() != brute_force_mask(&box_, &grid) {
            mismatches += 1;
        }
        assert!(mask.cardinality() >= 1, "mask must never be empty");
    }
    assert_eq!(
        mismatches, 0,
        "rasterizer disagreed with the brute-force oracle"
    );
    println!("criterion 05 PASS: box_to_mask matches brute-force overlap on 1000 boxes, grids up to 32x32, zero mismatches");
}

/// Naive triple-loop forward pass: plain nested loops, no shared kernel
/// code, and the multiplicative (rather than log-additive) boost form.
#[allow(clippy::needless_range_loop)]
fn naive_forward(
    tokens: &[Vec<f64>],
    weights: &ModelWeights,
    reweight: Option<(f64, &[bool], LayerScope)>,
) -> Vec<f64> {
    let arch = *weights.arch();
    let n = tokens.len();
    let d = arch.d_model;
    let d_head = arch.head_dim();
    let mut x: Vec<Vec<f64>> = tokens.to_vec();

    let norm = |row: &[f64]| -> Vec<f64> {
        let ms: f64 = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
        let inv = 1.0 / (ms + 1e-6).sqrt();
        row.iter().map(|v| v * inv).collect()
    };

    for (layer_idx, layer) in weights.layers.iter().enumerate() {
        let normed: Vec<Vec<f64>> = x.iter().map(|r| norm(r)).collect();
        let project = |w: &Matrix, bias: Option<&[f64]>| -> Vec<Vec<f64>> {
            let mut out = vec![vec![0.0; d]; n];
            for i in 0..n {
                for j in 0..d {
                    let mut acc = 0.0;
                    for k in 0..d {
                        acc += normed[i][k] * w.get(k, j);
                    }
                    if let Some(bias) = bias {
                        acc += bias[j];
                    }
                    out[i][j] = acc;
                }
            }
            out
        };
        let queries = project(&layer.w_q, Some(&layer.q_bias));
        let keys = project(&layer.w_k, None);
        let values = project(&layer.w_v, None);

        let boosted = reweight
            .as_ref()
            .filter(|(_, _, scope)| scope.applies_to(layer_idx));

        let mut ctx = vec![vec![0.0; d]; n];
        for h in 0..arch.n_heads {
            let offset = h * d_head;
            for i in 0..n {
                let mut exps = vec![0.0; n];
                let mut sum = 0.0;
                for (j, exp_slot) in exps.iter_mut().enumerate() {
                    if j > i {
                        continue; // causal
                    }
                    let mut dot = 0.0;
                    for t in 0..d_head {
                        dot += queries[i][offset + t] * keys[j][offset + t];
                    }
                    let mut e = (dot / (d_head as f64).sqrt()).exp();
                    if let Some((lambda, cols, _)) = boosted {
                        if cols[j] {
                            e *= lambda;
                        }
                    }
                    *exp_slot = e;
                    sum += e;
                }
                for j in 0..=i {
                    let p = exps[j] / sum;
                    for t in 0..d_head {
                        ctx[i][offset + t] += p * values[j][offset + t];
                    }
                }
            }
        }

        for i in 0..n {
            for j in 0..d {
                let mut acc = 0.0;
                for k in 0..d {
                    acc += ctx[i][k] * layer.w_o.get(k, j);
                }
                x[i][j] += acc;
            }
        }

        let normed2: Vec<Vec<f64>> = x.iter().map(|r| norm(r)).collect();
        for i in 0..n {
            let mut hidden = vec![0.0; arch.d_ff];
            for (j, slot) in hidden.iter_mut().enumerate() {
                let mut acc = 0.0;
                for k in 0..d {
                    acc += normed2[i][k] * layer.ff_in.get(k, j);
                }
                *slot = (acc + layer.ff_in_bias[j]).max(0.0);
            }
            for j in 0..d {
                let mut acc = 0.0;
                for (k, h) in hidden.iter().enumerate() {
                    acc += h * layer.ff_out.get(k, j);
                }
                x[i][j] += acc + layer.ff_out_bias[j];
            }
        }
    }

    let last = &x[n - 1];
    (0..weights.answer_embed.rows())
        .map(|a| {
            let mut acc = 0.0;
            for (j, v) in last.iter().enumerate() {
                acc += weights.answer_embed.get(a, j) * v;
            }
            acc
        })
        .collect()
}

#[test]
fn criterion_06_toy_model_oracle_equivalence() {
    let mut rng = Sm64::new(0x06);
    let mut worst = 0.0f64;
    for case in 0..50 {
        let n_heads = [1usize, 2, 4][rng.below(3)];
        let d_model = [8usize, 16, 32, 64][rng.below(4)];
        let arch = ModelArch {
            n_layers: 1 + rng.below(2),
            n_heads,
            d_model,
            d_ff: 8 + rng.below(25),
            d_patch: 8 + rng.below(9),
            d_visual: 8 + rng.below(9),
        };
        let weights = ModelWeights::from_seed(rng.next(), arch).unwrap();

        let grid = PatchGrid::new(1 + rng.below(4), 1 + rng.below(4)).unwrap();
        let features: Vec<Vec<f64>> = (0..grid.len())
            .map(|_| (0..arch.d_patch).map(|_| rng.range(-1.5, 1.5)).collect())
            .collect();
        let target = (rng.below(grid.rows()), rng.below(grid.cols()));
        let image = SyntheticImage::new(grid, features, target, vec![]).unwrap();

        let n_words = 3 + rng.below(6);
        let prompt: Vec<&str> = (0..n_words)
            .map(|_| TEXT_VOCAB[1 + rng.below(TEXT_VOCAB.len() - 1)])
            .collect();
        let prompt = prompt.join(" ");
        let sequence = TokenSequence::build(&image, &prompt, &weights).unwrap();

        let reweight = if rng.chance(0.7) {
            let bits: Vec<bool> = (0..grid.len()).map(|_| rng.chance(0.4)).collect();
            let mask = TokenMask::new(grid, bits).unwrap();
            let lambda = [1.0, 2.0, 4.5, 22.0][rng.below(4)];
            let layer_scope = if rng.chance(0.5) {
                LayerScope::All
            } else {
                LayerScope::Range {
                    start: 0,
                    end: rng.below(arch.n_layers + 1),
                }
            };
            Some(ReweightSpec {
                lambda,
                mask,
                layer_scope,
            })
        } else {
            None
        };

        let (logits, _) = decode_step(&sequence, &weights, reweight.as_ref(), false).unwrap();

        let tokens: Vec<Vec<f64>> = sequence.tokens().iter_rows().map(|r| r.to_vec()).collect();
        let layout = sequence.layout();
        let columns: Vec<bool> = (0..layout.total())
            .map(|j| {
                reweight
                    .as_ref()
                    .is_some_and(|spec| j < layout.n_visual && spec.mask.bits()[j])
            })
            .collect();
        let naive = naive_forward(
            &tokens,
            &weights,
            reweight
                .as_ref()
                .map(|spec| (spec.lambda, columns.as_slice(), spec.layer_scope)),
        );

        assert_eq!(logits.len(), naive.len());
        for (a, b) in logits.iter().zip(&naive) {
            worst = worst.max((a - b).abs());
            assert!(
                (a - b).abs() <= 1e-10,
                "case {case}: production {a} vs naive {b}"
            );
        }
    }
    println!("criterion 06 PASS: naive triple-loop forward agrees with production within 1e-10 (worst {worst:.3e}) on 50 configs");
}

#[test]
fn criterion_07_end_to_end_direction() {
    let started = Instant::now();
    let weights = ModelWeights::from_seed(42, ModelArch::default()).unwrap();
    let backend = ToyBackend::new(weights);
    let suite = generate_suite(7, 200, PatchGrid::new(4, 4).unwrap(), 3).unwrap();
    let config = CofConfig {
        alpha: 1.0,
        lambda: 4.5,
        ..CofConfig::preset_13b()
    };
    let options = EvalOptions {
        workers: Some(1),
        ..EvalOptions::default()
    };
    let output = evaluate(&suite, &backend, &RunVariant::ALL, &config, &options, None).unwrap();

    let row = |v: RunVariant| output.summary.row(v).unwrap().clone();
    let baseline = row(RunVariant::Baseline);
    let global = row(RunVariant::ReweightGlobal);
    let cof = row(RunVariant::Cof);

    assert!(
        cof.accuracy >= baseline.accuracy,
        "accuracy direction violated: cof {} < baseline {}",
        cof.accuracy,
        baseline.accuracy
    );
    assert!(
        baseline.mean_mass < global.mean_mass && global.mean_mass < cof.mean_mass,
        "mass must strictly increase: {} -> {} -> {}",
        baseline.mean_mass,
        global.mean_mass,
        cof.mean_mass
    );
    let elapsed = started.elapsed();
    assert!(
        elapsed < Duration::from_secs(60),
        "200-task evaluation took {elapsed:?}, budget 60 s on one core"
    );
    println!(
        "criterion 07 PASS: accuracy {:.3} -> {:.3} -> {:.3}, mass {:.4} -> {:.4} -> {:.4} ({elapsed:?})",
        baseline.accuracy, global.accuracy, cof.accuracy,
        baseline.mean_mass, global.mean_mass, cof.mean_mass
    );
}

#[test]
fn criterion_08_fallback_soundness() {
    let weights = ModelWeights::from_seed(42, ModelArch::default()).unwrap();
    let backend = ToyBackend::with_noise(weights, GroundingNoise::refusal());
    let grid = PatchGrid::new(4, 4).unwrap();
    let suite = generate_suite(19, 50, grid, 3).unwrap();
    let config = CofConfig {
        alpha: 1.0,
        lambda: 4.5,
        ..CofConfig::preset_13b()
    };
    let output = evaluate(
        &suite,
        &backend,
        &[RunVariant::ReweightGlobal, RunVariant::Cof],
        &config,
        &EvalOptions::default(),
        None,
    )
    .unwrap();

    for pair in output.records.chunks(2) {
        let (global, cof) = (&pair[0], &pair[1]);
        assert_eq!(global.variant, RunVariant::ReweightGlobal);
        assert_eq!(cof.variant, RunVariant::Cof);
        assert_eq!(global.task_id, cof.task_id);
        assert!(cof.fallback, "refusal must be recorded as a fallback");
        assert_eq!(
            cof.mask_cardinality,
            Some(grid.len()),
            "mask must be all-ones"
        );
        assert_eq!(cof.answer, global.answer, "task {}", cof.task_id);
        assert_eq!(
            cof.attention_mass_on_target, global.attention_mass_on_target,
            "task {}",
            cof.task_id
        );
        assert_eq!(cof.correct, global.correct);
    }
    println!("criterion 08 PASS: 50 refusal tasks all fall back to the full-image mask and equal reweight_global exactly");
}

#[test]
fn criterion_09_parser_fuzz_and_round_trip() {
    let mut rng = Sm64::new(0x09);
    let structured = b"[]{},:0123456789.eE+-\"bbox ";
    for _ in 0..100_000 {
        let len = rng.below(120);
        let bytes: Vec<u8> = if rng.chance(0.5) {
            (0..len)
                .map(|_| structured[rng.below(structured.len())])
                .collect()
        } else {
            (0..len).map(|_| rng.next() as u8).collect()
        };
        let text = String::from_utf8_lossy(&bytes);
        // Must never panic, whatever the bytes were.
        let _ = parse_bbox_response(&text, 336, 336).unwrap();
    }

    for _ in 0..1000 {
        let x1 = rng.range(0.0, 1.0);
        let x2 = rng.range(x1, 1.0);
        let y1 = rng.range(0.0, 1.0);
        let y2 = rng.range(y1, 1.0);
        let original = NormBox::new(x1, y1, x2, y2).unwrap();
        let raw = format!(
            r#"{{"bbox": {}}}"#,
            serde_json::to_string(&original).unwrap()
        );
        let parsed = parse_bbox_response(&raw, 640, 480).unwrap();
        let got = parsed.parsed_box.expect("round trip must parse");
        assert_eq!(
            parsed.coord_convention,
            Some(CoordConvention::NormalizedUnit)
        );
        for (a, b) in got.corners().iter().zip(original.corners()) {
            assert!((a - b).abs() <= 1e-12, "round trip drifted: {a} vs {b}");
        }
    }
    println!("criterion 09 PASS: 100k fuzz strings without a crash; 1000 serialized boxes round-trip within 1e-12");
}

#[test]
fn criterion_10_persistence_and_sweep_monotonicity() {
    let mut rng = Sm64::new(0x10);
    let variants = RunVariant::ALL;
    let conventions = [
        None,
        Some(CoordConvention::NormalizedUnit),
        Some(CoordConvention::NormalizedThousand),
        Some(CoordConvention::Pixel),
    ];
    let words = ["red", "green", "blue", "yes", "no", ""];
    let mut records = Vec::with_capacity(1000);
    for i in 0..1000 {
        let boxes = if rng.chance(0.6) {
            let x1 = rng.range(0.0, 0.5);
            let y1 = rng.range(0.0, 0.5);
            let x2 = rng.range(x1, 1.0);
            let y2 = rng.range(y1, 1.0);
            Some(cof::pipeline::BoxTrace {
                raw: NormBox::new(x1, y1, x2, y2).unwrap(),
                expanded: UnclampedBox {
                    x1: x1 - rng.range(0.0, 0.2),
                    y1: y1 - rng.range(0.0, 0.2),
                    x2: x2 + rng.range(0.0, 0.2),
                    y2: y2 + rng.range(0.0, 0.2),
                },
                clamped: NormBox::new(x1, y1, x2, y2).unwrap(),
                convention: conventions[rng.below(conventions.len())],
            })
        } else {
            None
        };
        records.push(EvalRecord {
            schema: 1,
            task_id: format!("t{}-{:04}", rng.below(100), i),
            variant: variants[rng.below(3)],
            config: RecordConfig {
                alpha: rng.range(0.5, 3.0),
                lambda: rng.range(1.0, 22.0),
                seed: rng.next(),
            },
            boxes,
            mask_cardinality: rng.chance(0.7).then(|| rng.below(1024)),
            fallback: rng.chance(0.1),
            answer: words[rng.below(words.len())].to_string(),
            correct: rng.chance(0.5),
            attention_mass_on_target: (0..rng.below(4)).map(|_| rng.uniform()).collect(),
            wall_time_ms: rng.range(0.0, 50.0),
            error: rng.chance(0.05).then(|| "injected failure".to_string()),
        });
    }
    let mut buffer = Vec::new();
    write_jsonl(&mut buffer, &records).unwrap();
    let reread = read_jsonl(BufReader::new(&buffer[..])).unwrap();
    assert_eq!(reread, records, "JSONL round trip must be exact");

    // Sweep: mean mass non-decreasing in lambda within each alpha block.
    let weights = ModelWeights::from_seed(42, ModelArch::default()).unwrap();
    let backend = ToyBackend::new(weights);
    let suite = generate_suite(7, 40, PatchGrid::new(4, 4).unwrap(), 3).unwrap();
    let table = sweep(
        &suite,
        &backend,
        &[1.0, 1.3],
        &[1.0, 2.0, 4.5, 22.0],
        &CofConfig::preset_13b(),
        &EvalOptions::default(),
    )
    .unwrap();
    let mut csv = Vec::new();
    table.write_csv(&mut csv).unwrap();
    let parsed = SweepTable::read_csv(BufReader::new(&csv[..])).unwrap();
    assert_eq!(parsed, table, "sweep CSV must round-trip");
    for alpha in [1.0, 1.3] {
        let masses: Vec<f64> = parsed
            .rows
            .iter()
            .filter(|r| r.alpha == alpha)
            .map(|r| r.mean_mass)
            .collect();
        assert_eq!(masses.len(), 4);
        for pair in masses.windows(2) {
            assert!(
                pair[1] >= pair[0],
                "mean mass dropped within alpha={alpha}: {masses:?}"
            );
        }
    }
    println!("criterion 10 PASS: 1000-record JSONL round trip exact; sweep mean-mass non-decreasing in lambda per alpha");
}

#[test]
fn criterion_11_remote_protocol() {
    let suite = generate_suite(7, 1, PatchGrid::new(4, 4).unwrap(), 3).unwrap();
    let task = &suite[0];
    let policy = RetryPolicy {
        max_attempts: 3,
        initial_backoff: Duration::from_millis(10),
    };
    let agent = ureq::AgentBuilder::new()
        .timeout(Duration::from_secs(5))
        .build();

    // Two injected failures, then success: one result, exactly two retries.
    let server = TestServer::builder()
        .register_image(&task.task_id, task.image.clone())
        .fail_next(2)
        .spawn()
        .unwrap();
    let reply = remote_backend_call(
        &agent,
        server.url(),
        &RemoteRequest {
            mode: RequestMode::Ground,
            prompt: task.question.clone(),
            image_id: task.task_id.clone(),
            mask: None,
            lambda: None,
        },
        &policy,
    )
    .unwrap();
    assert_eq!(
        reply.retries, 2,
        "two failures then success must log 2 retries"
    );
    assert!(!reply.text.is_empty());
    drop(server);

    // Capability-missing: server rejects masked requests with the documented
    // error, no retry.
    let server = TestServer::builder()
        .register_image(&task.task_id, task.image.clone())
        .reject_mask(true)
        .spawn()
        .unwrap();
    let err = remote_backend_call(
        &agent,
        server.url(),
        &RemoteRequest {
            mode: RequestMode::Generate,
            prompt: task.question.clone(),
            image_id: task.task_id.clone(),
            mask: Some(TokenMask::full(*task.image.grid())),
            lambda: Some(2.0),
        },
        &policy,
    )
    .unwrap_err();
    assert!(
        matches!(err, TransportError::CapabilityMissing(_)),
        "expected CapabilityMissing, got {err:?}"
    );
    assert_eq!(
        server.requests_seen(),
        1,
        "capability errors must not retry"
    );

    // The same surface through the Backend trait maps to Capability.
    let backend =
        cof::remote::RemoteBackend::new(server.url(), Duration::from_secs(5)).with_policy(policy);
    let image = cof::pipeline::ImageInput::Remote {
        image_id: task.task_id.clone(),
        grid: *task.image.grid(),
        width: 336,
        height: 336,
    };
    let err = cof::pipeline::Backend::generate_with_mask(
        &backend,
        &image,
        &task.question,
        &TokenMask::full(*task.image.grid()),
        2.0,
        &Default::default(),
    )
    .unwrap_err();
    assert!(matches!(err, BackendError::Capability { .. }));
    println!("criterion 11 PASS: 2 failures then success yields 2 logged retries; mask rejection maps to the capability error");
}
