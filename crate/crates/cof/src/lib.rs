//! Coarse-to-fine two-stage multimodal inference.
//!
//! Stage 1 (location grounding) asks the model where the answer lives in
//! the image and parses the reply into a normalized bounding box. The box is
//! expanded around its center, shifted back inside the image, and
//! rasterized onto the visual-token grid as a binary mask. Stage 2 decodes
//! the answer while multiplying the exponentiated attention scores of the
//! masked visual tokens by a boost factor `lambda` in every attention layer,
//! steering the decoder toward the grounded region without cropping the
//! image or touching any weights.
//!
//! The crate ships:
//!
//! - [`geometry`]: box expansion, shift-into-bounds clamping, patch-grid
//!   rasterization.
//! - [`grounding`]: the grounding prompt template and a tolerant parser for
//!   free-form bounding-box replies.
//! - [`attention`]: the numeric kernel — scaled dot-product scores,
//!   stabilized softmax, and the column reweighting transform.
//! - [`toy_model`]: a tiny deterministic decoder where the mechanism's
//!   effect is observable and brute-force checkable.
//! - [`pipeline`]: the two-stage flow over a pluggable backend, plus the
//!   baseline and reweight-all ablation variants.
//! - [`remote`]: a JSON-over-HTTP backend with retry/backoff and a bundled
//!   fault-injecting test server.
//! - [`harness`]: synthetic suite generation, evaluation metrics, and
//!   hyperparameter sweeps persisted as JSONL/CSV.
//!
//! Start with the runnable examples (`cargo run --example cof_pipeline`);
//! each major capability has one.

pub mod attention;
pub mod cli;
pub mod config;
pub mod geometry;
pub mod grounding;
pub mod harness;
pub mod matrix;
pub mod pipeline;
pub mod remote;
pub mod toy_model;

pub use attention::{
    mask_to_columns, reweight_softmax, scaled_scores, softmax, AttentionError, ReweightParams,
    ScoreMatrix, TokenLayout,
};
pub use config::{CofConfig, ConfigError, HeadScope, LayerScope};
pub use geometry::{
    box_to_mask, clamp_box, expand_box, GeometryError, NormBox, PatchGrid, TokenMask, UnclampedBox,
};
pub use grounding::{
    build_grounding_prompt, parse_bbox_response, CoordConvention, GroundingError,
    GroundingResponse, ParseFailure, PromptBundle, DEFAULT_GROUNDING_TEMPLATE,
};
pub use harness::{
    evaluate, generate_existence_suite, generate_suite, read_jsonl, summarize, sweep, write_jsonl,
    EvalOptions, EvalRecord, EvalSummary, HarnessError, SweepTable, SyntheticTask, TaskKind,
};
pub use matrix::{BoolMatrix, Matrix};
pub use pipeline::{
    run_cof, run_variant, Backend, BackendError, BoxTrace, GenerateOptions, GenerateResult,
    ImageInput, PipelineError, PipelineOptions, RunOutcome, RunVariant, ToyBackend,
};
pub use toy_model::{
    decode_step, encode_image, generate, project, tokenize, toy_ground, GenerateOutput,
    GroundingNoise, ModelArch, ModelWeights, ReweightSpec, SyntheticImage, TokenSequence,
    ToyModelError,
};
