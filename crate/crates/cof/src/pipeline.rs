//! The two-stage flow over a pluggable backend: grounding call → box parse →
//! expand/clamp → mask → reweighted decode. Also runs the baseline and the
//! reweight-all ablation so the three variants stay structurally comparable.

use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{CofConfig, ConfigError, LayerScope};
use crate::geometry::{
    box_to_mask, clamp_box, expand_box, GeometryError, NormBox, PatchGrid, TokenMask, UnclampedBox,
};
use crate::grounding::{
    build_grounding_prompt, parse_bbox_response, CoordConvention, GroundingError,
    DEFAULT_GROUNDING_TEMPLATE,
};
use crate::toy_model::{
    generate, toy_ground, GroundingNoise, ModelWeights, ReweightSpec, SyntheticImage,
    TokenSequence, ToyModelError,
};

/// Nominal pixel dimensions reported for synthetic images; the toy grounding
/// stub emits unit-normalized boxes, so these only anchor the parser's pixel
/// heuristic.
pub const SYNTHETIC_PIXEL_DIMS: (u32, u32) = (336, 336);

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend {backend} does not support {capability}")]
    Capability { backend: String, capability: String },
    #[error(transparent)]
    Transport(#[from] crate::remote::TransportError),
    #[error(transparent)]
    Model(#[from] ToyModelError),
    #[error("{0}")]
    InvalidInput(String),
}

/// Pipeline stage a backend error surfaced in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Grounding,
    Answer,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::Grounding => write!(f, "grounding"),
            Stage::Answer => write!(f, "answer"),
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{stage} stage failed: {source}")]
    Backend {
        stage: Stage,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Grounding(#[from] GroundingError),
}

/// An image as a backend sees it: the toy backend consumes synthetic images
/// directly; a remote server is handed an id into its own registry.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageInput {
    Synthetic(SyntheticImage),
    Remote {
        image_id: String,
        grid: PatchGrid,
        width: u32,
        height: u32,
    },
}

impl ImageInput {
    pub fn grid(&self) -> &PatchGrid {
        match self {
            ImageInput::Synthetic(image) => image.grid(),
            ImageInput::Remote { grid, .. } => grid,
        }
    }

    pub fn pixel_dims(&self) -> (u32, u32) {
        match self {
            ImageInput::Synthetic(_) => SYNTHETIC_PIXEL_DIMS,
            ImageInput::Remote { width, height, .. } => (*width, *height),
        }
    }
}

/// Decode settings shared by all generate calls.
#[derive(Debug, Clone)]
pub struct GenerateOptions {
    pub max_tokens: usize,
    /// Layers the boost applies to (ignored by plain `generate`).
    pub layer_scope: LayerScope,
    /// Patches whose attention mass should be reported, independent of the
    /// reweighting mask, so variants can be compared on the same columns.
    pub measure: Option<TokenMask>,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            max_tokens: 1,
            layer_scope: LayerScope::All,
            measure: None,
        }
    }
}

/// Text plus diagnostics from one generate call. `attention_mass` is one
/// value per layer (empty when the backend cannot report it).
#[derive(Debug, Clone, PartialEq)]
pub struct GenerateResult {
    pub text: String,
    pub attention_mass: Vec<f64>,
}

/// A model the pipeline can drive. Implementations must satisfy the
/// contract that `generate_with_mask` with `lambda = 1` equals `generate`.
pub trait Backend: Send + Sync {
    fn name(&self) -> &str;

    /// Stable digest of the backend configuration, for run provenance.
    fn config_digest(&self) -> String;

    /// True when the backend resolves images from a server-side registry and
    /// must be handed [`ImageInput::Remote`] ids instead of pixel payloads.
    fn wants_image_ids(&self) -> bool {
        false
    }

    /// Stage-1 call: free-form text reply to the grounding prompt.
    fn ground(&self, image: &ImageInput, prompt: &str) -> Result<String, BackendError>;

    /// Plain decode.
    fn generate(
        &self,
        image: &ImageInput,
        prompt: &str,
        opts: &GenerateOptions,
    ) -> Result<GenerateResult, BackendError>;

    /// Decode with the attention boost applied to masked visual tokens.
    fn generate_with_mask(
        &self,
        image: &ImageInput,
        prompt: &str,
        mask: &TokenMask,
        lambda: f64,
        opts: &GenerateOptions,
    ) -> Result<GenerateResult, BackendError>;
}

/// The three runs the harness compares: no intervention, boost on every
/// image token, and the full two-stage procedure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunVariant {
    Baseline,
    ReweightGlobal,
    Cof,
}

impl RunVariant {
    pub const ALL: [RunVariant; 3] = [
        RunVariant::Baseline,
        RunVariant::ReweightGlobal,
        RunVariant::Cof,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            RunVariant::Baseline => "baseline",
            RunVariant::ReweightGlobal => "reweight_global",
            RunVariant::Cof => "cof",
        }
    }
}

impl std::fmt::Display for RunVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for RunVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().replace('-', "_").as_str() {
            "baseline" => Ok(RunVariant::Baseline),
            "reweight_global" | "reweight" => Ok(RunVariant::ReweightGlobal),
            "cof" => Ok(RunVariant::Cof),
            other => Err(format!(
                "unknown variant {other:?} (expected baseline, reweight_global, or cof)"
            )),
        }
    }
}

/// Knobs of a pipeline invocation that are not hyperparameters.
#[derive(Debug, Clone)]
pub struct PipelineOptions {
    /// Stage-1 prompt template; must contain a question placeholder.
    pub template: String,
    /// When set, stage 2 re-sends the combined grounding prompt instead of
    /// the bare question.
    pub stage2_includes_grounding: bool,
    pub max_tokens: usize,
    /// Patches to report attention mass for (typically the task's target).
    pub measure: Option<TokenMask>,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            template: DEFAULT_GROUNDING_TEMPLATE.to_string(),
            stage2_includes_grounding: false,
            max_tokens: 1,
            measure: None,
        }
    }
}

/// The box at each stage-1 post-processing step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxTrace {
    pub raw: NormBox,
    pub expanded: UnclampedBox,
    pub clamped: NormBox,
    /// Coordinate convention the parser inferred (absent on fallback).
    pub convention: Option<CoordConvention>,
}

/// Result of running one variant on one task; the harness wraps this into a
/// persisted record.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub variant: RunVariant,
    pub answer: String,
    pub boxes: Option<BoxTrace>,
    pub mask_cardinality: Option<usize>,
    /// True when stage 1 yielded no box and the full-image mask was used.
    pub fallback: bool,
    pub attention_mass: Vec<f64>,
}

fn backend_err(stage: Stage) -> impl FnOnce(BackendError) -> PipelineError {
    move |source| PipelineError::Backend { stage, source }
}

fn stage2_prompt<'a>(
    question: &'a str,
    opts: &'a PipelineOptions,
) -> Result<String, PipelineError> {
    if opts.stage2_includes_grounding {
        Ok(build_grounding_prompt(question, &opts.template)?.combined)
    } else {
        Ok(question.to_string())
    }
}

fn generate_options(config: &CofConfig, opts: &PipelineOptions) -> GenerateOptions {
    GenerateOptions {
        max_tokens: opts.max_tokens,
        layer_scope: config.layer_scope,
        measure: opts.measure.clone(),
    }
}

/// Stage-1 result after post-processing: the mask stage 2 will boost, the
/// box at each transformation step, and whether the full-image fallback was
/// taken.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundedMask {
    pub mask: TokenMask,
    pub boxes: BoxTrace,
    pub fallback: bool,
}

/// Run stage 1 only: grounding call → parse → expand → clamp → rasterize.
pub fn ground_to_mask(
    backend: &dyn Backend,
    image: &ImageInput,
    question: &str,
    config: &CofConfig,
    opts: &PipelineOptions,
) -> Result<GroundedMask, PipelineError> {
    config.validate()?;
    let bundle = build_grounding_prompt(question, &opts.template)?;
    let reply = backend
        .ground(image, &bundle.combined)
        .map_err(backend_err(Stage::Grounding))?;
    let (width, height) = image.pixel_dims();
    let parsed = parse_bbox_response(&reply, width, height)?;

    let grid = image.grid();
    match parsed.parsed_box {
        Some(raw) => {
            let expanded = expand_box(&raw, config.alpha)?;
            let clamped = clamp_box(&expanded);
            let mask = box_to_mask(&clamped, grid);
            Ok(GroundedMask {
                mask,
                boxes: BoxTrace {
                    raw,
                    expanded,
                    clamped,
                    convention: parsed.coord_convention,
                },
                fallback: false,
            })
        }
        None => {
            // No grounded box: the whole image is the region. Expansion is
            // skipped so the mask is all-ones for every alpha, keeping the
            // run exactly equal to a reweight-all run.
            let full = NormBox::full();
            Ok(GroundedMask {
                mask: TokenMask::full(*grid),
                boxes: BoxTrace {
                    raw: full,
                    expanded: full.into(),
                    clamped: full,
                    convention: None,
                },
                fallback: true,
            })
        }
    }
}

/// Execute the full two-stage procedure on one task.
///
/// Stage 1 grounds, stage 2 decodes with the boost on the grounded region.
/// A reply with no parseable box falls back to the full-image mask (recorded
/// as a fallback, not an error), which makes the run identical to the
/// reweight-all ablation rather than aborting the batch.
pub fn run_cof(
    backend: &dyn Backend,
    image: &ImageInput,
    question: &str,
    config: &CofConfig,
    opts: &PipelineOptions,
) -> Result<RunOutcome, PipelineError> {
    let grounded = ground_to_mask(backend, image, question, config, opts)?;
    let prompt = stage2_prompt(question, opts)?;
    let result = backend
        .generate_with_mask(
            image,
            &prompt,
            &grounded.mask,
            config.lambda,
            &generate_options(config, opts),
        )
        .map_err(backend_err(Stage::Answer))?;

    Ok(RunOutcome {
        variant: RunVariant::Cof,
        answer: result.text,
        boxes: Some(grounded.boxes),
        mask_cardinality: Some(grounded.mask.cardinality()),
        fallback: grounded.fallback,
        attention_mass: result.attention_mass,
    })
}

/// Run one task under the requested variant.
pub fn run_variant(
    backend: &dyn Backend,
    image: &ImageInput,
    question: &str,
    variant: RunVariant,
    config: &CofConfig,
    opts: &PipelineOptions,
) -> Result<RunOutcome, PipelineError> {
    config.validate()?;
    match variant {
        RunVariant::Cof => run_cof(backend, image, question, config, opts),
        RunVariant::Baseline => {
            let prompt = stage2_prompt(question, opts)?;
            let result = backend
                .generate(image, &prompt, &generate_options(config, opts))
                .map_err(backend_err(Stage::Answer))?;
            Ok(RunOutcome {
                variant,
                answer: result.text,
                boxes: None,
                mask_cardinality: None,
                fallback: false,
                attention_mass: result.attention_mass,
            })
        }
        RunVariant::ReweightGlobal => {
            let mask = TokenMask::full(*image.grid());
            let prompt = stage2_prompt(question, opts)?;
            let result = backend
                .generate_with_mask(
                    image,
                    &prompt,
                    &mask,
                    config.lambda,
                    &generate_options(config, opts),
                )
                .map_err(backend_err(Stage::Answer))?;
            Ok(RunOutcome {
                variant,
                answer: result.text,
                boxes: None,
                mask_cardinality: Some(mask.cardinality()),
                fallback: false,
                attention_mass: result.attention_mass,
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Toy backend
// ---------------------------------------------------------------------------

/// The in-process backend: toy decoder plus the grounding stub.
#[derive(Debug, Clone)]
pub struct ToyBackend {
    weights: ModelWeights,
    noise: GroundingNoise,
}

impl ToyBackend {
    pub fn new(weights: ModelWeights) -> Self {
        Self {
            weights,
            noise: GroundingNoise::default(),
        }
    }

    pub fn with_noise(weights: ModelWeights, noise: GroundingNoise) -> Self {
        Self { weights, noise }
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn noise(&self) -> &GroundingNoise {
        &self.noise
    }

    fn synthetic<'a>(&self, image: &'a ImageInput) -> Result<&'a SyntheticImage, BackendError> {
        match image {
            ImageInput::Synthetic(image) => Ok(image),
            ImageInput::Remote { image_id, .. } => Err(BackendError::InvalidInput(format!(
                "toy backend cannot resolve remote image id {image_id:?}"
            ))),
        }
    }

    fn decode(
        &self,
        image: &ImageInput,
        prompt: &str,
        reweight: Option<ReweightSpec>,
        opts: &GenerateOptions,
    ) -> Result<GenerateResult, BackendError> {
        let image = self.synthetic(image)?;
        let sequence = TokenSequence::build(image, prompt, &self.weights)?;
        let output = generate(
            &sequence,
            &self.weights,
            reweight.as_ref(),
            opts.max_tokens,
            opts.measure.as_ref(),
        )?;
        Ok(GenerateResult {
            text: output.text,
            attention_mass: output.attention_mass,
        })
    }
}

impl Backend for ToyBackend {
    fn name(&self) -> &str {
        "toy"
    }

    fn config_digest(&self) -> String {
        let mut hasher = std::collections::hash_map::DefaultHasher::new();
        self.weights.seed().hash(&mut hasher);
        let arch = self.weights.arch();
        (arch.n_layers, arch.n_heads, arch.d_model, arch.d_ff).hash(&mut hasher);
        (arch.d_patch, arch.d_visual).hash(&mut hasher);
        self.noise.dx.to_bits().hash(&mut hasher);
        self.noise.dy.to_bits().hash(&mut hasher);
        self.noise.scale.to_bits().hash(&mut hasher);
        self.noise.refuse.hash(&mut hasher);
        format!("toy-{:016x}", hasher.finish())
    }

    fn ground(&self, image: &ImageInput, prompt: &str) -> Result<String, BackendError> {
        let image = self.synthetic(image)?;
        Ok(toy_ground(image, prompt, &self.noise))
    }

    fn generate(
        &self,
        image: &ImageInput,
        prompt: &str,
        opts: &GenerateOptions,
    ) -> Result<GenerateResult, BackendError> {
        self.decode(image, prompt, None, opts)
    }

    fn generate_with_mask(
        &self,
        image: &ImageInput,
        prompt: &str,
        mask: &TokenMask,
        lambda: f64,
        opts: &GenerateOptions,
    ) -> Result<GenerateResult, BackendError> {
        let spec = ReweightSpec {
            lambda,
            mask: mask.clone(),
            layer_scope: opts.layer_scope,
        };
        self.decode(image, prompt, Some(spec), opts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::generate_suite;
    use crate::toy_model::ModelArch;

    fn fixture() -> (ToyBackend, ImageInput, String, TokenMask) {
        let weights = ModelWeights::from_seed(42, ModelArch::default()).unwrap();
        let backend = ToyBackend::new(weights);
        let suite = generate_suite(7, 1, PatchGrid::new(4, 4).unwrap(), 3).unwrap();
        let task = suite.into_iter().next().unwrap();
        let measure = task.image.target_mask();
        (
            backend,
            ImageInput::Synthetic(task.image),
            task.question,
            measure,
        )
    }

    #[test]
    fn backend_contract_lambda_one_equals_generate() {
        let (backend, image, question, measure) = fixture();
        let opts = GenerateOptions {
            measure: Some(measure),
            ..GenerateOptions::default()
        };
        let plain = backend.generate(&image, &question, &opts).unwrap();
        let mask = TokenMask::full(*image.grid());
        let masked = backend
            .generate_with_mask(&image, &question, &mask, 1.0, &opts)
            .unwrap();
        assert_eq!(plain, masked);
    }

    #[test]
    fn cof_with_oracle_grounding_masks_exactly_the_target() {
        let (backend, image, question, measure) = fixture();
        let config = CofConfig {
            alpha: 1.0,
            ..CofConfig::preset_13b()
        };
        let opts = PipelineOptions {
            measure: Some(measure),
            ..PipelineOptions::default()
        };
        let outcome = run_cof(&backend, &image, &question, &config, &opts).unwrap();
        assert_eq!(outcome.mask_cardinality, Some(1));
        assert!(!outcome.fallback);
        let boxes = outcome.boxes.unwrap();
        let ImageInput::Synthetic(img) = &image else {
            unreachable!()
        };
        assert_eq!(boxes.raw, img.target_rect());
        assert_eq!(boxes.clamped, img.target_rect());
    }

    #[test]
    fn lambda_one_cof_equals_baseline_answer() {
        let (backend, image, question, _) = fixture();
        let config = CofConfig::new(1.0, 1.0).unwrap();
        let opts = PipelineOptions::default();
        let cof = run_cof(&backend, &image, &question, &config, &opts).unwrap();
        let baseline = run_variant(
            &backend,
            &image,
            &question,
            RunVariant::Baseline,
            &config,
            &opts,
        )
        .unwrap();
        assert_eq!(cof.answer, baseline.answer);
    }

    #[test]
    fn refusal_falls_back_to_full_mask_and_matches_reweight_global() {
        let (backend, image, question, measure) = fixture();
        let backend = ToyBackend::with_noise(backend.weights().clone(), GroundingNoise::refusal());
        let config = CofConfig::preset_13b();
        let opts = PipelineOptions {
            measure: Some(measure),
            ..PipelineOptions::default()
        };
        let cof = run_cof(&backend, &image, &question, &config, &opts).unwrap();
        assert!(cof.fallback);
        assert_eq!(cof.mask_cardinality, Some(image.grid().len()));
        let global = run_variant(
            &backend,
            &image,
            &question,
            RunVariant::ReweightGlobal,
            &config,
            &opts,
        )
        .unwrap();
        assert_eq!(cof.answer, global.answer);
        assert_eq!(cof.attention_mass, global.attention_mass);
        assert_eq!(cof.mask_cardinality, global.mask_cardinality);
    }

    #[test]
    fn invalid_config_is_rejected_before_any_call() {
        let (backend, image, question, _) = fixture();
        let config = CofConfig {
            lambda: 0.5,
            ..CofConfig::default()
        };
        let result = run_cof(
            &backend,
            &image,
            &question,
            &config,
            &PipelineOptions::default(),
        );
        assert!(matches!(result, Err(PipelineError::Config(_))));
    }

    #[test]
    fn toy_backend_rejects_remote_images() {
        let (backend, _, question, _) = fixture();
        let remote = ImageInput::Remote {
            image_id: "img-1".into(),
            grid: PatchGrid::new(4, 4).unwrap(),
            width: 336,
            height: 336,
        };
        assert!(backend.ground(&remote, &question).is_err());
    }

    #[test]
    fn variant_labels_round_trip() {
        for v in RunVariant::ALL {
            assert_eq!(v.label().parse::<RunVariant>().unwrap(), v);
        }
        assert!("nonsense".parse::<RunVariant>().is_err());
    }
}
