//! Synthetic benchmark harness: deterministic task suites, per-variant
//! metrics, hyperparameter sweeps over `(alpha, lambda)`, and JSONL/CSV
//! persistence.
//!
//! Attribute tasks place one answer-bearing patch on the grid plus a number
//! of salient distractor patches carrying conflicting colors — the
//! background noise the reweighting stage is meant to suppress. Existence
//! probes are polling-style yes/no questions about a color's presence.

use std::io::{self, BufRead, Write};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::CofConfig;
use crate::geometry::PatchGrid;
use crate::pipeline::{
    run_variant, Backend, BoxTrace, ImageInput, PipelineOptions, RunVariant, SYNTHETIC_PIXEL_DIMS,
};
use crate::toy_model::{ModelArch, Prng, SyntheticImage, COLOR_WORDS, CONTRAST_CHANNEL, N_COLORS};

/// Version tag written into every persisted record.
pub const RECORD_SCHEMA: u32 = 1;

/// Fixed header of the sweep CSV.
pub const SWEEP_CSV_HEADER: &str = "alpha,lambda,variant,accuracy,mean_mass,fallback_rate";

// Contrast levels steering the toy decoder's attention: distractors are
// salient, the target is not, so the baseline gets pulled off-target.
const TARGET_CONTRAST: f64 = 0.3;
const DISTRACTOR_CONTRAST: f64 = 2.5;
const TEXTURE_NOISE: f64 = 0.1;

const ATTRIBUTE_QUESTION: &str = "what color is the object at the marked location";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid harness configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("record (de)serialization failed: {0}")]
    Json(#[from] serde_json::Error),
    #[error("bad sweep csv: {0}")]
    Csv(String),
}

/// Kind of synthetic question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// "What color is the object …" — the gold answer is derivable from the
    /// target patch's features alone.
    AttributeQuery,
    /// "Is there a … object …" — a polling-style presence probe.
    ExistenceProbe,
}

/// One synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub task_id: String,
    pub seed: u64,
    pub image: SyntheticImage,
    pub question: String,
    pub gold_answer: String,
    pub task_kind: TaskKind,
}

/// Deterministic attribute-task suite: each task has exactly one patch whose
/// color is the gold answer and `distractor_count` salient patches carrying
/// conflicting colors.
pub fn generate_suite(
    seed: u64,
    n_tasks: usize,
    grid: PatchGrid,
    distractor_count: usize,
) -> Result<Vec<SyntheticTask>, HarnessError> {
    if n_tasks == 0 {
        return Err(HarnessError::Config("n_tasks must be >= 1".into()));
    }
    if grid.len() < 1 + distractor_count {
        return Err(HarnessError::Config(format!(
            "grid {}x{} cannot hold a target plus {distractor_count} distractors",
            grid.rows(),
            grid.cols()
        )));
    }
    let mut rng = Prng::new(seed);
    (0..n_tasks)
        .map(|index| {
            let (image, gold) = synth_image(&mut rng, grid, distractor_count);
            Ok(SyntheticTask {
                task_id: task_id(seed, index),
                seed,
                image,
                question: ATTRIBUTE_QUESTION.to_string(),
                gold_answer: COLOR_WORDS[gold].to_string(),
                task_kind: TaskKind::AttributeQuery,
            })
        })
        .collect()
}

/// Deterministic existence-probe suite. Even-indexed tasks ask about the
/// target's color (gold "yes"), odd-indexed ones about a color absent from
/// the whole image (gold "no").
pub fn generate_existence_suite(
    seed: u64,
    n_tasks: usize,
    grid: PatchGrid,
    distractor_count: usize,
) -> Result<Vec<SyntheticTask>, HarnessError> {
    if n_tasks == 0 {
        return Err(HarnessError::Config("n_tasks must be >= 1".into()));
    }
    if grid.len() < 1 + distractor_count {
        return Err(HarnessError::Config(format!(
            "grid {}x{} cannot hold a target plus {distractor_count} distractors",
            grid.rows(),
            grid.cols()
        )));
    }
    if 1 + distractor_count >= N_COLORS {
        return Err(HarnessError::Config(format!(
            "existence probes need an absent color: target plus {distractor_count} distractors \
             can exhaust the {N_COLORS}-color palette"
        )));
    }
    let mut rng = Prng::new(seed);
    (0..n_tasks)
        .map(|index| {
            let (image, gold_color) = synth_image(&mut rng, grid, distractor_count);
            let present = index % 2 == 0;
            let (asked, gold_answer) = if present {
                (gold_color, "yes")
            } else {
                let used: Vec<usize> = image
                    .patch_features()
                    .iter()
                    .flat_map(|f| (0..N_COLORS).filter(|&c| f[c] != 0.0).collect::<Vec<_>>())
                    .collect();
                let absent = (0..N_COLORS)
                    .find(|c| !used.contains(c))
                    .expect("palette headroom validated above");
                (absent, "no")
            };
            Ok(SyntheticTask {
                task_id: task_id(seed, index),
                seed,
                image,
                question: format!("is there a {} object in the image", COLOR_WORDS[asked]),
                gold_answer: gold_answer.to_string(),
                task_kind: TaskKind::ExistenceProbe,
            })
        })
        .collect()
}

fn task_id(seed: u64, index: usize) -> String {
    format!("t{seed}-{index:04}")
}

/// One image: textured background, a low-contrast colored target, and
/// high-contrast distractors with colors different from the gold one.
fn synth_image(
    rng: &mut Prng,
    grid: PatchGrid,
    distractor_count: usize,
) -> (SyntheticImage, usize) {
    let d_patch = ModelArch::default().d_patch;
    let n = grid.len();

    let target_cell = rng.below(n);
    let mut distractor_cells: Vec<usize> = Vec::with_capacity(distractor_count);
    while distractor_cells.len() < distractor_count {
        let cell = rng.below(n);
        if cell != target_cell && !distractor_cells.contains(&cell) {
            distractor_cells.push(cell);
        }
    }
    let gold = rng.below(N_COLORS);

    let mut features = vec![vec![0.0; d_patch]; n];
    for feature in features.iter_mut() {
        for value in feature.iter_mut().skip(CONTRAST_CHANNEL + 1) {
            *value = rng.symmetric(TEXTURE_NOISE);
        }
    }
    features[target_cell][gold] = 1.0;
    features[target_cell][CONTRAST_CHANNEL] = TARGET_CONTRAST;
    for &cell in &distractor_cells {
        let color = loop {
            let c = rng.below(N_COLORS);
            if c != gold {
                break c;
            }
        };
        features[cell][color] = 1.0;
        features[cell][CONTRAST_CHANNEL] = DISTRACTOR_CONTRAST;
    }

    let to_rc = |cell: usize| (cell / grid.cols(), cell % grid.cols());
    let image = SyntheticImage::new(
        grid,
        features,
        to_rc(target_cell),
        distractor_cells.into_iter().map(to_rc).collect(),
    )
    .expect("generated image is structurally valid");
    (image, gold)
}

// ---------------------------------------------------------------------------
// Records and metrics
// ---------------------------------------------------------------------------

/// Hyperparameters under which a record was produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecordConfig {
    pub alpha: f64,
    pub lambda: f64,
    pub seed: u64,
}

/// One task × variant result, as persisted to JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub schema: u32,
    pub task_id: String,
    pub variant: RunVariant,
    pub config: RecordConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<BoxTrace>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_cardinality: Option<usize>,
    pub fallback: bool,
    pub answer: String,
    pub correct: bool,
    /// Attention mass on the task's target patch at the final generated
    /// position, one value per layer (empty when the backend cannot report
    /// it).
    pub attention_mass_on_target: Vec<f64>,
    pub wall_time_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl EvalRecord {
    /// Scalar mass: layer average, `None` when the backend reported none.
    pub fn mean_mass(&self) -> Option<f64> {
        if self.attention_mass_on_target.is_empty() {
            None
        } else {
            Some(
                self.attention_mass_on_target.iter().sum::<f64>()
                    / self.attention_mass_on_target.len() as f64,
            )
        }
    }
}

/// Aggregated metrics of one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: RunVariant,
    pub n_records: usize,
    pub n_failed: usize,
    pub accuracy: f64,
    /// Mean of per-record scalar masses over records that reported mass.
    pub mean_mass: f64,
    pub fallback_rate: f64,
}

/// Per-variant summary table, row order following the evaluated variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub rows: Vec<VariantSummary>,
}

impl EvalSummary {
    pub fn row(&self, variant: RunVariant) -> Option<&VariantSummary> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Render as an aligned text table.
    pub fn to_table(&self) -> String {
        let mut out =
            String::from("variant          n    failed  accuracy  mean_mass  fallback_rate\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{:<15} {:>4}  {:>6}  {:>8.4}  {:>9.4}  {:>13.4}\n",
                row.variant.label(),
                row.n_records,
                row.n_failed,
                row.accuracy,
                row.mean_mass,
                row.fallback_rate
            ));
        }
        out
    }
}

/// Recompute the summary from records alone; `evaluate` uses this same
/// function, so metrics recomputed from persisted JSONL match exactly.
pub fn summarize(records: &[EvalRecord]) -> EvalSummary {
    let mut order: Vec<RunVariant> = Vec::new();
    for record in records {
        if !order.contains(&record.variant) {
            order.push(record.variant);
        }
    }
    let rows = order
        .into_iter()
        .map(|variant| {
            let of_variant: Vec<&EvalRecord> =
                records.iter().filter(|r| r.variant == variant).collect();
            let n = of_variant.len();
            let n_failed = of_variant.iter().filter(|r| r.error.is_some()).count();
            let n_correct = of_variant.iter().filter(|r| r.correct).count();
            let masses: Vec<f64> = of_variant.iter().filter_map(|r| r.mean_mass()).collect();
            let mean_mass = if masses.is_empty() {
                0.0
            } else {
                masses.iter().sum::<f64>() / masses.len() as f64
            };
            let fallbacks = of_variant.iter().filter(|r| r.fallback).count();
            VariantSummary {
                variant,
                n_records: n,
                n_failed,
                accuracy: n_correct as f64 / n as f64,
                mean_mass,
                fallback_rate: fallbacks as f64 / n as f64,
            }
        })
        .collect();
    EvalSummary { rows }
}

/// Evaluation knobs beyond the hyperparameters.
#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Template / stage-2 prompt / max-token settings; the per-task
    /// measurement mask is filled in automatically with the target patch.
    pub pipeline: PipelineOptions,
    /// Bounded worker count; `None` uses the global pool.
    pub workers: Option<usize>,
}

/// Records plus their summary.
#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub records: Vec<EvalRecord>,
    pub summary: EvalSummary,
}

/// Run every variant on every task, stream records to `sink` (JSONL, one
/// record per line, in deterministic task-then-variant order), and summarize.
///
/// A backend failure marks that record as failed and evaluation continues;
/// the failure count is reported per variant.
pub fn evaluate(
    suite: &[SyntheticTask],
    backend: &dyn Backend,
    variants: &[RunVariant],
    config: &CofConfig,
    options: &EvalOptions,
    mut sink: Option<&mut dyn Write>,
) -> Result<EvalOutput, HarnessError> {
    if suite.is_empty() {
        return Err(HarnessError::Config("task suite is empty".into()));
    }
    if variants.is_empty() {
        return Err(HarnessError::Config("variant list is empty".into()));
    }

    let run_all = || -> Vec<Vec<EvalRecord>> {
        suite
            .par_iter()
            .map(|task| {
                variants
                    .iter()
                    .map(|&variant| run_task(task, backend, variant, config, options))
                    .collect()
            })
            .collect()
    };

    let per_task: Vec<Vec<EvalRecord>> = match options.workers {
        Some(workers) => rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| HarnessError::Config(format!("worker pool: {e}")))?
            .install(run_all),
        None => run_all(),
    };

    let records: Vec<EvalRecord> = per_task.into_iter().flatten().collect();
    if let Some(sink) = sink.as_mut() {
        for record in &records {
            serde_json::to_writer(&mut *sink, record)?;
            sink.write_all(b"\n")?;
        }
        sink.flush()?;
    }
    let summary = summarize(&records);
    Ok(EvalOutput { records, summary })
}

fn run_task(
    task: &SyntheticTask,
    backend: &dyn Backend,
    variant: RunVariant,
    config: &CofConfig,
    options: &EvalOptions,
) -> EvalRecord {
    let image = if backend.wants_image_ids() {
        ImageInput::Remote {
            image_id: task.task_id.clone(),
            grid: *task.image.grid(),
            width: SYNTHETIC_PIXEL_DIMS.0,
            height: SYNTHETIC_PIXEL_DIMS.1,
        }
    } else {
        ImageInput::Synthetic(task.image.clone())
    };
    let mut pipeline_options = options.pipeline.clone();
    pipeline_options.measure = Some(task.image.target_mask());

    let record_config = RecordConfig {
        alpha: config.alpha,
        lambda: config.lambda,
        seed: task.seed,
    };
    let started = Instant::now();
    let outcome = run_variant(
        backend,
        &image,
        &task.question,
        variant,
        config,
        &pipeline_options,
    );
    let wall_time_ms = started.elapsed().as_secs_f64() * 1e3;

    match outcome {
        Ok(outcome) => EvalRecord {
            schema: RECORD_SCHEMA,
            task_id: task.task_id.clone(),
            variant,
            config: record_config,
            boxes: outcome.boxes,
            mask_cardinality: outcome.mask_cardinality,
            fallback: outcome.fallback,
            correct: outcome.answer == task.gold_answer,
            answer: outcome.answer,
            attention_mass_on_target: outcome.attention_mass,
            wall_time_ms,
            error: None,
        },
        Err(err) => EvalRecord {
            schema: RECORD_SCHEMA,
            task_id: task.task_id.clone(),
            variant,
            config: record_config,
            boxes: None,
            mask_cardinality: None,
            fallback: false,
            correct: false,
            answer: String::new(),
            attention_mass_on_target: Vec::new(),
            wall_time_ms,
            error: Some(err.to_string()),
        },
    }
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

/// One sweep cell: the two-stage procedure evaluated at `(alpha, lambda)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub lambda: f64,
    pub variant: RunVariant,
    pub accuracy: f64,
    pub mean_mass: f64,
    pub fallback_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Failed task runs across all cells; not part of the CSV (readers of a
    /// CSV see 0).
    pub failures: usize,
}

impl SweepTable {
    /// Write the fixed-header CSV.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{SWEEP_CSV_HEADER}")?;
        for row in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                row.alpha, row.lambda, row.variant, row.accuracy, row.mean_mass, row.fallback_rate
            )?;
        }
        Ok(())
    }

    /// Parse a CSV produced by [`SweepTable::write_csv`].
    pub fn read_csv<R: BufRead>(reader: R) -> Result<Self, HarnessError> {
        let mut lines = reader.lines();
        let header = lines
            .next()
            .transpose()?
            .ok_or_else(|| HarnessError::Csv("empty file".into()))?;
        if header.trim() != SWEEP_CSV_HEADER {
            return Err(HarnessError::Csv(format!("unexpected header {header:?}")));
        }
        let mut rows = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 6 {
                return Err(HarnessError::Csv(format!("expected 6 columns: {line:?}")));
            }
            let parse = |s: &str| -> Result<f64, HarnessError> {
                s.parse::<f64>()
                    .map_err(|e| HarnessError::Csv(format!("bad number {s:?}: {e}")))
            };
            rows.push(SweepRow {
                alpha: parse(parts[0])?,
                lambda: parse(parts[1])?,
                variant: parts[2].parse().map_err(|e: String| HarnessError::Csv(e))?,
                accuracy: parse(parts[3])?,
                mean_mass: parse(parts[4])?,
                fallback_rate: parse(parts[5])?,
            });
        }
        Ok(Self { rows, failures: 0 })
    }
}

/// Cross-product evaluation of the two-stage procedure over the grids.
/// Rows are emitted alpha-major, lambda-minor, so per-alpha blocks are
/// contiguous and ordered by lambda.
pub fn sweep(
    suite: &[SyntheticTask],
    backend: &dyn Backend,
    alpha_grid: &[f64],
    lambda_grid: &[f64],
    base: &CofConfig,
    options: &EvalOptions,
) -> Result<SweepTable, HarnessError> {
    if alpha_grid.is_empty() || lambda_grid.is_empty() {
        return Err(HarnessError::Config("sweep grids must be nonempty".into()));
    }
    let mut rows = Vec::with_capacity(alpha_grid.len() * lambda_grid.len());
    let mut failures = 0usize;
    for &alpha in alpha_grid {
        for &lambda in lambda_grid {
            let config = CofConfig {
                alpha,
                lambda,
                ..*base
            };
            let output = evaluate(suite, backend, &[RunVariant::Cof], &config, options, None)?;
            let summary = &output.summary.rows[0];
            failures += summary.n_failed;
            rows.push(SweepRow {
                alpha,
                lambda,
                variant: RunVariant::Cof,
                accuracy: summary.accuracy,
                mean_mass: summary.mean_mass,
                fallback_rate: summary.fallback_rate,
            });
        }
    }
    Ok(SweepTable { rows, failures })
}

// ---------------------------------------------------------------------------
// JSONL persistence
// ---------------------------------------------------------------------------

pub fn write_jsonl<W: Write>(mut w: W, records: &[EvalRecord]) -> Result<(), HarnessError> {
    for record in records {
        serde_json::to_writer(&mut w, record)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<EvalRecord>, HarnessError> {
    let mut records = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::ToyBackend;
    use crate::toy_model::ModelWeights;

    fn grid4() -> PatchGrid {
        PatchGrid::new(4, 4).unwrap()
    }

    fn toy_backend() -> ToyBackend {
        ToyBackend::new(ModelWeights::from_seed(42, ModelArch::default()).unwrap())
    }

    #[test]
    fn suite_generation_is_pure_in_seed() {
        let a = generate_suite(7, 5, grid4(), 3).unwrap();
        let b = generate_suite(7, 5, grid4(), 3).unwrap();
        assert_eq!(a, b);
        let c = generate_suite(8, 5, grid4(), 3).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn suite_structure() {
        let suite = generate_suite(7, 4, grid4(), 3).unwrap();
        assert_eq!(suite.len(), 4);
        for task in &suite {
            assert_eq!(task.image.distractor_patches().len(), 3);
            assert_eq!(task.task_kind, TaskKind::AttributeQuery);
            // Exactly one patch carries the gold color at full strength.
            let gold = COLOR_WORDS
                .iter()
                .position(|w| *w == task.gold_answer)
                .unwrap();
            let carriers = task
                .image
                .patch_features()
                .iter()
                .filter(|f| f[gold] == 1.0)
                .count();
            assert_eq!(carriers, 1, "task {}", task.task_id);
        }
        assert_eq!(suite[0].task_id, "t7-0000");
        assert_eq!(suite[3].task_id, "t7-0003");
    }

    #[test]
    fn suite_rejects_overfull_grid() {
        assert!(generate_suite(7, 1, PatchGrid::new(2, 2).unwrap(), 4).is_err());
        assert!(generate_suite(7, 0, grid4(), 3).is_err());
    }

    #[test]
    fn existence_suite_alternates_gold() {
        let suite = generate_existence_suite(7, 4, grid4(), 2).unwrap();
        assert_eq!(suite[0].gold_answer, "yes");
        assert_eq!(suite[1].gold_answer, "no");
        for task in &suite {
            assert_eq!(task.task_kind, TaskKind::ExistenceProbe);
            assert!(task.question.starts_with("is there a "));
        }
        assert!(generate_existence_suite(7, 2, grid4(), 5).is_err());
    }

    #[test]
    fn evaluate_rejects_empty_inputs() {
        let backend = toy_backend();
        let suite = generate_suite(7, 1, grid4(), 3).unwrap();
        let config = CofConfig::preset_13b();
        let options = EvalOptions::default();
        assert!(evaluate(&[], &backend, &[RunVariant::Cof], &config, &options, None).is_err());
        assert!(evaluate(&suite, &backend, &[], &config, &options, None).is_err());
    }

    #[test]
    fn records_share_task_ids_across_variants() {
        let backend = toy_backend();
        let suite = generate_suite(7, 2, grid4(), 3).unwrap();
        let config = CofConfig::preset_13b();
        let output = evaluate(
            &suite,
            &backend,
            &RunVariant::ALL,
            &config,
            &EvalOptions::default(),
            None,
        )
        .unwrap();
        assert_eq!(output.records.len(), 6);
        let first_three: Vec<_> = output.records[..3].iter().map(|r| &r.task_id).collect();
        assert!(first_three.iter().all(|id| **id == suite[0].task_id));
        let variants: Vec<_> = output.records[..3].iter().map(|r| r.variant).collect();
        assert_eq!(variants, RunVariant::ALL.to_vec());
    }

    #[test]
    fn lambda_one_gives_equal_accuracy_across_variants() {
        let backend = toy_backend();
        let suite = generate_suite(11, 6, grid4(), 3).unwrap();
        let config = CofConfig::new(1.0, 1.0).unwrap();
        let output = evaluate(
            &suite,
            &backend,
            &RunVariant::ALL,
            &config,
            &EvalOptions::default(),
            None,
        )
        .unwrap();
        let acc: Vec<f64> = output.summary.rows.iter().map(|r| r.accuracy).collect();
        assert!((acc[0] - acc[1]).abs() < 1e-15);
        assert!((acc[1] - acc[2]).abs() < 1e-15);
    }

    #[test]
    fn evaluation_is_deterministic_modulo_wall_time() {
        let backend = toy_backend();
        let suite = generate_suite(13, 4, grid4(), 3).unwrap();
        let config = CofConfig::preset_13b();
        let normalize = |mut records: Vec<EvalRecord>| {
            for r in &mut records {
                r.wall_time_ms = 0.0;
            }
            records
        };
        let a = evaluate(
            &suite,
            &backend,
            &RunVariant::ALL,
            &config,
            &EvalOptions::default(),
            None,
        )
        .unwrap();
        let b = evaluate(
            &suite,
            &backend,
            &RunVariant::ALL,
            &config,
            &EvalOptions {
                workers: Some(2),
                ..EvalOptions::default()
            },
            None,
        )
        .unwrap();
        assert_eq!(normalize(a.records), normalize(b.records));
    }

    #[test]
    fn summary_recomputed_from_jsonl_matches_exactly() {
        let backend = toy_backend();
        let suite = generate_suite(7, 3, grid4(), 3).unwrap();
        let config = CofConfig::preset_13b();
        let mut sink: Vec<u8> = Vec::new();
        let output = evaluate(
            &suite,
            &backend,
            &RunVariant::ALL,
            &config,
            &EvalOptions::default(),
            Some(&mut sink),
        )
        .unwrap();
        let reread = read_jsonl(io::BufReader::new(&sink[..])).unwrap();
        assert_eq!(reread, output.records);
        assert_eq!(summarize(&reread), output.summary);
    }

    #[test]
    fn sweep_degenerate_cell_equals_evaluate() {
        let backend = toy_backend();
        let suite = generate_suite(7, 3, grid4(), 3).unwrap();
        let base = CofConfig::preset_13b();
        let options = EvalOptions::default();
        let table = sweep(&suite, &backend, &[1.0], &[4.5], &base, &options).unwrap();
        assert_eq!(table.rows.len(), 1);
        let config = CofConfig {
            alpha: 1.0,
            lambda: 4.5,
            ..base
        };
        let direct = evaluate(
            &suite,
            &backend,
            &[RunVariant::Cof],
            &config,
            &options,
            None,
        )
        .unwrap();
        let row = &direct.summary.rows[0];
        assert_eq!(table.rows[0].accuracy, row.accuracy);
        assert_eq!(table.rows[0].mean_mass, row.mean_mass);
        assert_eq!(table.rows[0].fallback_rate, row.fallback_rate);
    }

    #[test]
    fn sweep_csv_round_trip() {
        let table = SweepTable {
            failures: 0,
            rows: vec![
                SweepRow {
                    alpha: 1.0,
                    lambda: 2.0,
                    variant: RunVariant::Cof,
                    accuracy: 0.875,
                    mean_mass: 0.123456789,
                    fallback_rate: 0.0,
                },
                SweepRow {
                    alpha: 1.3,
                    lambda: 22.0,
                    variant: RunVariant::Cof,
                    accuracy: 1.0,
                    mean_mass: 0.75,
                    fallback_rate: 0.25,
                },
            ],
        };
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(SWEEP_CSV_HEADER));
        let back = SweepTable::read_csv(io::BufReader::new(&buf[..])).unwrap();
        assert_eq!(back, table);
    }

    #[test]
    fn jsonl_skips_blank_lines() {
        let records = vec![EvalRecord {
            schema: RECORD_SCHEMA,
            task_id: "t1-0000".into(),
            variant: RunVariant::Baseline,
            config: RecordConfig {
                alpha: 1.0,
                lambda: 1.0,
                seed: 1,
            },
            boxes: None,
            mask_cardinality: None,
            fallback: false,
            answer: "red".into(),
            correct: true,
            attention_mass_on_target: vec![0.1, 0.2],
            wall_time_ms: 1.5,
            error: None,
        }];
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &records).unwrap();
        buf.extend_from_slice(b"\n\n");
        let back = read_jsonl(io::BufReader::new(&buf[..])).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn zero_distractors_is_the_accuracy_floor() {
        let backend = toy_backend();
        let suite = generate_suite(7, 30, grid4(), 0).unwrap();
        let config = CofConfig::new(1.0, 1.0).unwrap();
        let output = evaluate(
            &suite,
            &backend,
            &[RunVariant::Baseline],
            &config,
            &EvalOptions::default(),
            None,
        )
        .unwrap();
        assert_eq!(
            output.summary.rows[0].accuracy, 1.0,
            "without distractors the baseline must already answer correctly"
        );
    }

    /// Backend that fails deterministically on every even-row target, so
    /// some records carry errors while evaluation keeps going.
    struct FlakyBackend(ToyBackend);

    impl crate::pipeline::Backend for FlakyBackend {
        fn name(&self) -> &str {
            "flaky"
        }

        fn config_digest(&self) -> String {
            "flaky".into()
        }

        fn ground(
            &self,
            image: &ImageInput,
            prompt: &str,
        ) -> Result<String, crate::pipeline::BackendError> {
            self.0.ground(image, prompt)
        }

        fn generate(
            &self,
            image: &ImageInput,
            prompt: &str,
            opts: &crate::pipeline::GenerateOptions,
        ) -> Result<crate::pipeline::GenerateResult, crate::pipeline::BackendError> {
            if let ImageInput::Synthetic(img) = image {
                if img.target_patch().0 % 2 == 0 {
                    return Err(crate::pipeline::BackendError::InvalidInput(
                        "injected failure".into(),
                    ));
                }
            }
            self.0.generate(image, prompt, opts)
        }

        fn generate_with_mask(
            &self,
            image: &ImageInput,
            prompt: &str,
            mask: &crate::geometry::TokenMask,
            lambda: f64,
            opts: &crate::pipeline::GenerateOptions,
        ) -> Result<crate::pipeline::GenerateResult, crate::pipeline::BackendError> {
            if let ImageInput::Synthetic(img) = image {
                if img.target_patch().0 % 2 == 0 {
                    return Err(crate::pipeline::BackendError::InvalidInput(
                        "injected failure".into(),
                    ));
                }
            }
            self.0.generate_with_mask(image, prompt, mask, lambda, opts)
        }
    }

    #[test]
    fn backend_failures_are_recorded_and_counted() {
        let backend = FlakyBackend(toy_backend());
        let suite = generate_suite(7, 10, grid4(), 3).unwrap();
        let config = CofConfig::preset_13b();
        let output = evaluate(
            &suite,
            &backend,
            &[RunVariant::Baseline],
            &config,
            &EvalOptions::default(),
            None,
        )
        .unwrap();
        let summary = &output.summary.rows[0];
        assert_eq!(summary.n_records, 10);
        assert!(summary.n_failed > 0 && summary.n_failed < 10);
        let failed: Vec<_> = output
            .records
            .iter()
            .filter(|r| r.error.is_some())
            .collect();
        assert_eq!(failed.len(), summary.n_failed);
        for record in failed {
            assert!(!record.correct);
            assert!(record.answer.is_empty());
        }
    }

    /// Every recorded box trace must itself satisfy the geometry pipeline:
    /// expanded = expand(raw), clamped = clamp(expanded), cardinality from
    /// the clamped box, and masses inside [0, 1].
    #[test]
    fn recorded_box_traces_satisfy_geometry_invariants_pairwise() {
        use crate::geometry::{box_to_mask, clamp_box, expand_box};
        let backend = toy_backend();
        let suite = generate_suite(23, 8, grid4(), 3).unwrap();
        let config = CofConfig {
            alpha: 1.3,
            lambda: 2.0,
            ..CofConfig::default()
        };
        let output = evaluate(
            &suite,
            &backend,
            &[RunVariant::Cof],
            &config,
            &EvalOptions::default(),
            None,
        )
        .unwrap();
        for record in &output.records {
            let boxes = record.boxes.as_ref().expect("cof records carry boxes");
            let expanded = expand_box(&boxes.raw, config.alpha).unwrap();
            assert_eq!(expanded, boxes.expanded, "task {}", record.task_id);
            let clamped = clamp_box(&expanded);
            assert_eq!(clamped, boxes.clamped, "task {}", record.task_id);
            let mask = box_to_mask(&clamped, &grid4());
            assert_eq!(record.mask_cardinality, Some(mask.cardinality()));
            for &mass in &record.attention_mass_on_target {
                assert!((0.0..=1.0).contains(&mass));
            }
        }
    }
}
