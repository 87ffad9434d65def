//! Command-line binding: flag parsing, config-file layering, backend
//! construction, and the `run` / `eval` / `sweep` / `inspect` commands.
//!
//! Precedence is flags over config file over built-in defaults; the built-in
//! defaults are the 7B preset (alpha 1.3, lambda 2.0). Endpoint and timeout
//! additionally honor the `COF_ENDPOINT` / `COF_TIMEOUT_MS` environment
//! variables.

use std::ffi::OsString;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use thiserror::Error;

use crate::attention::write_attention_csv;
use crate::config::{CofConfig, LayerScope};
use crate::geometry::{PatchGrid, TokenMask};
use crate::harness::{
    evaluate, generate_existence_suite, generate_suite, sweep, EvalOptions, HarnessError,
    SyntheticTask,
};
use crate::pipeline::{
    ground_to_mask, Backend, GroundedMask, ImageInput, PipelineError, PipelineOptions, RunVariant,
    ToyBackend,
};
use crate::remote::{resolve_endpoint, resolve_timeout, RemoteBackend};
use crate::toy_model::{
    decode_step, GroundingNoise, ModelArch, ModelWeights, ReweightSpec, TokenSequence,
    ToyModelError,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Model(#[from] ToyModelError),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("refusing to overwrite {0} (pass --force to allow)")]
    RefuseOverwrite(PathBuf),
}

#[derive(Parser, Debug)]
#[command(
    name = "cof",
    version,
    about = "Two-stage coarse-to-fine inference: grounded box localization plus attention reweighting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one task and print its record(s) as JSON lines
    Run(RunArgs),
    /// Evaluate a task suite; print the summary and write JSONL records
    Eval(EvalArgs),
    /// Cross-product (alpha, lambda) sweep written as CSV
    Sweep(SweepArgs),
    /// Dump per-layer attention CSVs and the token mask for one task
    Inspect(InspectArgs),
}

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// Box expansion factor (> 0)
    #[arg(long)]
    alpha: Option<f64>,
    /// Attention boost factor (>= 1)
    #[arg(long)]
    lambda: Option<f64>,
    /// Layers the boost applies to: "all" or "START..END"
    #[arg(long)]
    layers: Option<String>,
    /// Suite seed
    #[arg(long)]
    seed: Option<u64>,
    /// Patch grid, e.g. 4x4
    #[arg(long)]
    grid: Option<String>,
    /// Salient distractor patches per task
    #[arg(long)]
    distractors: Option<usize>,
    /// Generate existence probes instead of attribute questions
    #[arg(long)]
    existence: bool,
    /// Backend: toy or remote
    #[arg(long)]
    backend: Option<String>,
    /// Remote endpoint URL (env COF_ENDPOINT overrides)
    #[arg(long)]
    endpoint: Option<String>,
    /// Remote request timeout in milliseconds (env COF_TIMEOUT_MS overrides)
    #[arg(long)]
    timeout_ms: Option<u64>,
    /// Toy model weight seed
    #[arg(long)]
    model_seed: Option<u64>,
    /// Maximum generated tokens per answer
    #[arg(long)]
    max_tokens: Option<usize>,
    /// Make the toy grounding stub refuse, exercising the fallback path
    #[arg(long)]
    refuse_grounding: bool,
    /// JSON config file (flags override its values)
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Variant(s) to run (repeatable): baseline, reweight_global, cof
    #[arg(long = "variant")]
    variants: Vec<String>,
    /// Which task of the generated suite to run
    #[arg(long, default_value_t = 0)]
    task_index: usize,
    /// Load the task from a JSON file instead of generating it
    #[arg(long)]
    task_file: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Variant(s) to evaluate (repeatable); default: all three
    #[arg(long = "variant")]
    variants: Vec<String>,
    /// Number of tasks in the suite
    #[arg(long, default_value_t = 200)]
    n_tasks: usize,
    /// JSONL output path
    #[arg(long, default_value = "cof_records.jsonl")]
    out: PathBuf,
    /// Overwrite the output file if it exists
    #[arg(long)]
    force: bool,
    /// Bounded worker count (default: rayon's global pool)
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated alpha grid (default: the resolved alpha)
    #[arg(long)]
    alpha_grid: Option<String>,
    /// Comma-separated lambda grid
    #[arg(long, default_value = "1,2,4.5,22")]
    lambda_grid: String,
    /// Number of tasks in the suite
    #[arg(long, default_value_t = 50)]
    n_tasks: usize,
    /// CSV output path ("-" for stdout)
    #[arg(long, default_value = "cof_sweep.csv")]
    out: PathBuf,
    /// Overwrite the output file if it exists
    #[arg(long)]
    force: bool,
    /// Bounded worker count
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Variant whose attention to dump: baseline, reweight_global, cof
    #[arg(long, default_value = "cof")]
    variant: String,
    /// Which task of the generated suite to inspect
    #[arg(long, default_value_t = 0)]
    task_index: usize,
    /// Output directory for the CSV dumps and mask grid
    #[arg(long, default_value = "cof_inspect")]
    out_dir: PathBuf,
}

/// Values a JSON config file may set; flags override each one.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    alpha: Option<f64>,
    lambda: Option<f64>,
    layer_scope: Option<LayerScope>,
    backend: Option<String>,
    endpoint: Option<String>,
    timeout_ms: Option<u64>,
    seed: Option<u64>,
    model_seed: Option<u64>,
    grid: Option<String>,
    distractors: Option<usize>,
    max_tokens: Option<usize>,
}

#[derive(Debug)]
enum BackendKind {
    Toy,
    Remote { endpoint: String, timeout_ms: u64 },
}

/// Everything resolved from defaults + config file + flags, validated.
#[derive(Debug)]
struct Resolved {
    config: CofConfig,
    backend_kind: BackendKind,
    seed: u64,
    model_seed: u64,
    grid: PatchGrid,
    distractors: usize,
    existence: bool,
    max_tokens: usize,
    refuse_grounding: bool,
}

impl Resolved {
    fn from(common: &CommonArgs) -> Result<Self, CliError> {
        let file: FileConfig = match &common.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|source| CliError::Io {
                    path: path.clone(),
                    source,
                })?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Usage(format!("bad config file {path:?}: {e}")))?
            }
            None => FileConfig::default(),
        };

        let defaults = CofConfig::default();
        let config = CofConfig {
            alpha: common.alpha.or(file.alpha).unwrap_or(defaults.alpha),
            lambda: common.lambda.or(file.lambda).unwrap_or(defaults.lambda),
            layer_scope: match &common.layers {
                Some(spec) => parse_layer_scope(spec)?,
                None => file.layer_scope.unwrap_or(defaults.layer_scope),
            },
            head_scope: defaults.head_scope,
        };
        config.validate()?;

        let backend_name = common
            .backend
            .clone()
            .or(file.backend)
            .unwrap_or_else(|| "toy".to_string());
        let backend_kind = match backend_name.as_str() {
            "toy" => BackendKind::Toy,
            "remote" => {
                let flag = common.endpoint.as_deref().or(file.endpoint.as_deref());
                let endpoint = resolve_endpoint(flag).ok_or_else(|| {
                    CliError::Usage("remote backend needs --endpoint (or COF_ENDPOINT)".to_string())
                })?;
                let timeout =
                    resolve_timeout(common.timeout_ms.or(file.timeout_ms)).as_millis() as u64;
                BackendKind::Remote {
                    endpoint,
                    timeout_ms: timeout,
                }
            }
            other => {
                return Err(CliError::Usage(format!(
                    "unknown backend {other:?} (expected toy or remote)"
                )))
            }
        };

        let grid_spec = common
            .grid
            .clone()
            .or(file.grid)
            .unwrap_or_else(|| "4x4".to_string());
        Ok(Self {
            config,
            backend_kind,
            seed: common.seed.or(file.seed).unwrap_or(7),
            model_seed: common.model_seed.or(file.model_seed).unwrap_or(42),
            grid: parse_grid(&grid_spec)?,
            distractors: common.distractors.or(file.distractors).unwrap_or(3),
            existence: common.existence,
            max_tokens: common.max_tokens.or(file.max_tokens).unwrap_or(1),
            refuse_grounding: common.refuse_grounding,
        })
    }

    fn backend(&self) -> Result<Box<dyn Backend>, CliError> {
        match &self.backend_kind {
            BackendKind::Toy => {
                let weights = ModelWeights::from_seed(self.model_seed, ModelArch::default())?;
                let noise = if self.refuse_grounding {
                    GroundingNoise::refusal()
                } else {
                    GroundingNoise::default()
                };
                Ok(Box::new(ToyBackend::with_noise(weights, noise)))
            }
            BackendKind::Remote {
                endpoint,
                timeout_ms,
            } => Ok(Box::new(RemoteBackend::new(
                endpoint.clone(),
                std::time::Duration::from_millis(*timeout_ms),
            ))),
        }
    }

    fn suite(&self, n_tasks: usize) -> Result<Vec<SyntheticTask>, HarnessError> {
        if self.existence {
            generate_existence_suite(self.seed, n_tasks, self.grid, self.distractors)
        } else {
            generate_suite(self.seed, n_tasks, self.grid, self.distractors)
        }
    }

    fn eval_options(&self, workers: Option<usize>) -> EvalOptions {
        EvalOptions {
            pipeline: PipelineOptions {
                max_tokens: self.max_tokens,
                ..PipelineOptions::default()
            },
            workers,
        }
    }
}

// Token counts above this are far past anything the toy decoder can chew
// through; refuse early instead of allocating.
const MAX_GRID_PATCHES: usize = 1 << 16;

fn parse_grid(spec: &str) -> Result<PatchGrid, CliError> {
    let parts: Vec<&str> = spec.split(['x', 'X']).collect();
    let err = || CliError::Usage(format!("bad grid {spec:?}, expected ROWSxCOLS like 4x4"));
    if parts.len() != 2 {
        return Err(err());
    }
    let rows: usize = parts[0].trim().parse().map_err(|_| err())?;
    let cols: usize = parts[1].trim().parse().map_err(|_| err())?;
    if rows.checked_mul(cols).is_none_or(|n| n > MAX_GRID_PATCHES) {
        return Err(CliError::Usage(format!(
            "grid {spec:?} has more than {MAX_GRID_PATCHES} patches"
        )));
    }
    PatchGrid::new(rows, cols).map_err(|e| CliError::Usage(e.to_string()))
}

fn parse_layer_scope(spec: &str) -> Result<LayerScope, CliError> {
    let trimmed = spec.trim();
    if trimmed.eq_ignore_ascii_case("all") {
        return Ok(LayerScope::All);
    }
    let err = || {
        CliError::Usage(format!(
            "bad layer range {spec:?}, expected \"all\" or START..END"
        ))
    };
    let (start, end) = trimmed.split_once("..").ok_or_else(err)?;
    Ok(LayerScope::Range {
        start: start.trim().parse().map_err(|_| err())?,
        end: end.trim().parse().map_err(|_| err())?,
    })
}

fn parse_variants(raw: &[String], default: &[RunVariant]) -> Result<Vec<RunVariant>, CliError> {
    if raw.is_empty() {
        return Ok(default.to_vec());
    }
    raw.iter()
        .map(|s| s.parse::<RunVariant>().map_err(CliError::Usage))
        .collect()
}

fn parse_f64_grid(spec: &str) -> Result<Vec<f64>, CliError> {
    spec.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|e| CliError::Usage(format!("bad grid value {s:?}: {e}")))
        })
        .collect()
}

fn guard_overwrite(path: &Path, force: bool) -> Result<(), CliError> {
    if path.exists() && !force {
        return Err(CliError::RefuseOverwrite(path.to_path_buf()));
    }
    Ok(())
}

/// Parse `args` and execute; returns the process exit code. Exit code 0
/// means flags were valid and no task failed.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return err.exit_code();
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            1
        }
    }
}

fn execute(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Inspect(args) => cmd_inspect(args),
    }
}

fn cmd_run(args: RunArgs) -> Result<i32, CliError> {
    let resolved = Resolved::from(&args.common)?;
    let variants = parse_variants(&args.variants, &[RunVariant::Cof])?;
    let backend = resolved.backend()?;
    let task = match &args.task_file {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|source| CliError::Io {
                path: path.clone(),
                source,
            })?;
            let task: SyntheticTask = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("bad task file {path:?}: {e}")))?;
            task.image.validate()?;
            task
        }
        None => resolved
            .suite(args.task_index + 1)?
            .into_iter()
            .nth(args.task_index)
            .expect("suite length covers task_index"),
    };

    let output = evaluate(
        std::slice::from_ref(&task),
        backend.as_ref(),
        &variants,
        &resolved.config,
        &resolved.eval_options(None),
        None,
    )?;

    let stdout = io::stdout();
    let mut out = stdout.lock();
    let mut failed = 0usize;
    for record in &output.records {
        serde_json::to_writer(&mut out, record).map_err(HarnessError::from)?;
        out.write_all(b"\n").map_err(HarnessError::from)?;
        if record.error.is_some() {
            failed += 1;
        }
        eprintln!("# task {} variant {}", record.task_id, record.variant);
        if let Some(boxes) = &record.boxes {
            let convention = boxes
                .convention
                .map(|c| format!("{c:?}"))
                .unwrap_or_else(|| "fallback".to_string());
            eprintln!("#   raw box   {:?} ({convention})", boxes.raw.corners());
            eprintln!(
                "#   expanded  [{}, {}, {}, {}] (alpha = {})",
                boxes.expanded.x1,
                boxes.expanded.y1,
                boxes.expanded.x2,
                boxes.expanded.y2,
                record.config.alpha
            );
            eprintln!("#   clamped   {:?}", boxes.clamped.corners());
        }
        if let Some(cardinality) = record.mask_cardinality {
            eprintln!(
                "#   mask      {cardinality}/{} patches, lambda = {}",
                task.image.grid().len(),
                record.config.lambda
            );
        }
        eprintln!(
            "#   answer    {:?} ({})",
            record.answer,
            if record.correct { "correct" } else { "wrong" }
        );
    }
    Ok(if failed == 0 { 0 } else { 1 })
}

fn cmd_eval(args: EvalArgs) -> Result<i32, CliError> {
    let resolved = Resolved::from(&args.common)?;
    let variants = parse_variants(&args.variants, &RunVariant::ALL)?;
    guard_overwrite(&args.out, args.force)?;
    let backend = resolved.backend()?;
    let suite = resolved.suite(args.n_tasks)?;

    let file = fs::File::create(&args.out).map_err(|source| CliError::Io {
        path: args.out.clone(),
        source,
    })?;
    let mut sink = BufWriter::new(file);
    let output = evaluate(
        &suite,
        backend.as_ref(),
        &variants,
        &resolved.config,
        &resolved.eval_options(args.workers),
        Some(&mut sink),
    )?;

    print!("{}", output.summary.to_table());
    println!(
        "wrote {} records to {}",
        output.records.len(),
        args.out.display()
    );
    let failures: usize = output.summary.rows.iter().map(|r| r.n_failed).sum();
    if failures > 0 {
        eprintln!("{failures} task runs failed");
        return Ok(1);
    }
    Ok(0)
}

fn cmd_sweep(args: SweepArgs) -> Result<i32, CliError> {
    let resolved = Resolved::from(&args.common)?;
    let alpha_grid = match &args.alpha_grid {
        Some(spec) => parse_f64_grid(spec)?,
        None => vec![resolved.config.alpha],
    };
    let lambda_grid = parse_f64_grid(&args.lambda_grid)?;
    let backend = resolved.backend()?;
    let suite = resolved.suite(args.n_tasks)?;
    let table = sweep(
        &suite,
        backend.as_ref(),
        &alpha_grid,
        &lambda_grid,
        &resolved.config,
        &resolved.eval_options(args.workers),
    )?;

    if args.out.as_os_str() == "-" {
        let stdout = io::stdout();
        table.write_csv(stdout.lock()).map_err(HarnessError::from)?;
    } else {
        guard_overwrite(&args.out, args.force)?;
        let file = fs::File::create(&args.out).map_err(|source| CliError::Io {
            path: args.out.clone(),
            source,
        })?;
        table
            .write_csv(BufWriter::new(file))
            .map_err(HarnessError::from)?;
        println!(
            "wrote {} sweep rows to {}",
            table.rows.len(),
            args.out.display()
        );
    }
    if table.failures > 0 {
        eprintln!("{} task runs failed during the sweep", table.failures);
        return Ok(1);
    }
    Ok(0)
}

fn cmd_inspect(args: InspectArgs) -> Result<i32, CliError> {
    let resolved = Resolved::from(&args.common)?;
    let variant = args
        .variant
        .parse::<RunVariant>()
        .map_err(CliError::Usage)?;
    if !matches!(resolved.backend_kind, BackendKind::Toy) {
        return Err(CliError::Usage(
            "inspect reads attention maps and requires the toy backend".to_string(),
        ));
    }
    let backend = resolved.backend()?;
    let suite = resolved.suite(args.task_index + 1)?;
    let task = suite
        .into_iter()
        .nth(args.task_index)
        .expect("suite length covers task_index");
    let image = ImageInput::Synthetic(task.image.clone());
    let pipeline_options = PipelineOptions {
        max_tokens: resolved.max_tokens,
        ..PipelineOptions::default()
    };

    // Resolve the mask the chosen variant would decode with.
    let mask: Option<TokenMask> = match variant {
        RunVariant::Baseline => None,
        RunVariant::ReweightGlobal => Some(TokenMask::full(resolved.grid)),
        RunVariant::Cof => {
            let GroundedMask {
                mask,
                boxes,
                fallback,
            } = ground_to_mask(
                backend.as_ref(),
                &image,
                &task.question,
                &resolved.config,
                &pipeline_options,
            )?;
            eprintln!(
                "# grounded box {:?} -> mask {}/{} patches{}",
                boxes.clamped.corners(),
                mask.cardinality(),
                resolved.grid.len(),
                if fallback { " (fallback)" } else { "" }
            );
            Some(mask)
        }
    };

    let weights = ModelWeights::from_seed(resolved.model_seed, ModelArch::default())?;
    let sequence = TokenSequence::build(&task.image, &task.question, &weights)?;
    let reweight = mask.as_ref().map(|mask| ReweightSpec {
        lambda: resolved.config.lambda,
        mask: mask.clone(),
        layer_scope: resolved.config.layer_scope,
    });
    let (_, trace) = decode_step(&sequence, &weights, reweight.as_ref(), true)?;
    let trace = trace.expect("capture was requested");

    fs::create_dir_all(&args.out_dir).map_err(|source| CliError::Io {
        path: args.out_dir.clone(),
        source,
    })?;

    let layout = sequence.layout();
    let labels: Vec<String> = (0..layout.total())
        .map(|j| {
            if j < layout.n_visual {
                format!("v{j}")
            } else {
                format!("t{}", j - layout.n_visual)
            }
        })
        .collect();

    let mut written = 0usize;
    for (l, heads) in trace.layers.iter().enumerate() {
        for (h, probs) in heads.iter().enumerate() {
            let path = args.out_dir.join(format!("attention_l{l}_h{h}.csv"));
            let file = fs::File::create(&path).map_err(|source| CliError::Io {
                path: path.clone(),
                source,
            })?;
            write_attention_csv(BufWriter::new(file), probs, &labels, &labels)
                .map_err(HarnessError::from)?;
            written += 1;
        }
    }

    let mask_path = args.out_dir.join("mask.txt");
    let mut grid_text = String::new();
    for r in 0..resolved.grid.rows() {
        for c in 0..resolved.grid.cols() {
            let bit = mask.as_ref().is_some_and(|m| m.bit(r, c));
            grid_text.push(if bit { '1' } else { '0' });
        }
        grid_text.push('\n');
    }
    fs::write(&mask_path, grid_text).map_err(|source| CliError::Io {
        path: mask_path.clone(),
        source,
    })?;
    written += 1;

    println!(
        "wrote {written} files to {} (variant {variant}, lambda = {})",
        args.out_dir.display(),
        resolved.config.lambda
    );
    Ok(0)
}
