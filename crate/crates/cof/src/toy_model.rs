//! A tiny deterministic multi-head decoder with a stub visual encoder and
//! projector.
//!
//! The model is deliberately small enough (2 layers, 4 heads, dim 64 by
//! default) that a naive triple-loop reimplementation of the forward pass
//! can serve as an independent oracle in tests. Weights are fully determined
//! by a seed; two models built from the same seed are identical.
//!
//! The synthetic world it decodes is a patch grid where each patch carries a
//! color. Dimensions `0..N_COLORS` of every space are color channels, one
//! extra channel carries visual "contrast" that attracts attention (through
//! a query bias aligned with that channel's key direction), and the answer
//! head reads logits as a similarity between the final hidden state and
//! per-answer embeddings. Boosting attention on a patch therefore pushes the
//! answer toward that patch's color, which is what makes the reweighting
//! mechanism observable end to end.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{
    mask_to_columns, reweight_softmax, scaled_scores, softmax, AttentionError, ReweightParams,
    TokenLayout,
};
use crate::config::LayerScope;
use crate::geometry::{GeometryError, NormBox, PatchGrid, TokenMask};
use crate::matrix::{BoolMatrix, Matrix};

/// Colors a patch can carry; also the first answer-vocabulary entries.
pub const COLOR_WORDS: [&str; 6] = ["red", "green", "blue", "yellow", "purple", "orange"];

/// Number of color channels (= `COLOR_WORDS.len()`).
pub const N_COLORS: usize = 6;

/// Channel carrying visual contrast; salient patches attract attention.
pub const CONTRAST_CHANNEL: usize = N_COLORS;

/// Closed answer vocabulary: colors, the existence answers, and the stop
/// token.
pub const ANSWER_VOCAB: [&str; 9] = [
    "red", "green", "blue", "yellow", "purple", "orange", "yes", "no", "<end>",
];

/// Index of the stop token in [`ANSWER_VOCAB`].
pub const END_TOKEN: usize = 8;

/// Closed text vocabulary for question prompts; index 0 is `<unk>`.
pub const TEXT_VOCAB: [&str; 20] = [
    "<unk>", "what", "color", "is", "the", "object", "at", "marked", "location", "there", "a",
    "an", "in", "image", "red", "green", "blue", "yellow", "purple", "orange",
];

#[derive(Debug, Error, PartialEq)]
pub enum ToyModelError {
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("sequence must contain at least one token")]
    EmptySequence,
    #[error("{0}")]
    Shape(String),
}

/// Deterministic pseudorandom stream: uniform doubles derived directly from
/// ChaCha8 output words, so fixtures stay stable across dependency bumps.
pub(crate) struct Prng(ChaCha8Rng);

impl Prng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `(-scale, scale)`.
    pub fn symmetric(&mut self, scale: f64) -> f64 {
        (self.uniform() * 2.0 - 1.0) * scale
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.0.next_u64() % n as u64) as usize
    }
}

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// One synthetic image: a patch grid with per-patch feature vectors, the
/// answer-bearing patch, and the salient distractor patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticImage {
    grid: PatchGrid,
    patch_features: Vec<Vec<f64>>,
    target_patch: (usize, usize),
    distractor_patches: Vec<(usize, usize)>,
}

impl SyntheticImage {
    pub fn new(
        grid: PatchGrid,
        patch_features: Vec<Vec<f64>>,
        target_patch: (usize, usize),
        distractor_patches: Vec<(usize, usize)>,
    ) -> Result<Self, ToyModelError> {
        let image = Self {
            grid,
            patch_features,
            target_patch,
            distractor_patches,
        };
        image.validate()?;
        Ok(image)
    }

    /// Re-check structural invariants; deserialized images must be validated
    /// before use.
    pub fn validate(&self) -> Result<(), ToyModelError> {
        if self.patch_features.len() != self.grid.len() {
            return Err(ToyModelError::Shape(format!(
                "{} feature vectors for a {}x{} grid",
                self.patch_features.len(),
                self.grid.rows(),
                self.grid.cols()
            )));
        }
        let dim = self.patch_features.first().map_or(0, Vec::len);
        if self.patch_features.iter().any(|f| f.len() != dim) {
            return Err(ToyModelError::Shape("ragged patch features".into()));
        }
        let (tr, tc) = self.target_patch;
        if tr >= self.grid.rows() || tc >= self.grid.cols() {
            return Err(ToyModelError::Shape(format!(
                "target patch ({tr}, {tc}) outside {}x{} grid",
                self.grid.rows(),
                self.grid.cols()
            )));
        }
        if self.distractor_patches.contains(&self.target_patch) {
            return Err(ToyModelError::Shape(
                "target patch listed as a distractor".into(),
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    pub fn feature_dim(&self) -> usize {
        self.patch_features.first().map_or(0, Vec::len)
    }

    pub fn patch_features(&self) -> &[Vec<f64>] {
        &self.patch_features
    }

    pub fn target_patch(&self) -> (usize, usize) {
        self.target_patch
    }

    pub fn distractor_patches(&self) -> &[(usize, usize)] {
        &self.distractor_patches
    }

    /// Normalized rectangle of the target patch.
    pub fn target_rect(&self) -> NormBox {
        let (r, c) = self.target_patch;
        let (x1, y1, x2, y2) = self.grid.patch_rect(r, c);
        NormBox::new(x1, y1, x2, y2).expect("patch rects are inside the unit square")
    }

    /// Mask selecting exactly the target patch.
    pub fn target_mask(&self) -> TokenMask {
        crate::geometry::box_to_mask(&self.target_rect(), &self.grid)
    }
}

/// Model hyperparameters. `d_model` must be divisible by `n_heads`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelArch {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub d_patch: usize,
    pub d_visual: usize,
}

impl Default for ModelArch {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 64,
            d_patch: 16,
            d_visual: 16,
        }
    }
}

impl ModelArch {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    fn validate(&self) -> Result<(), ToyModelError> {
        if self.n_layers == 0
            || self.n_heads == 0
            || self.d_model == 0
            || self.d_ff == 0
            || self.d_patch == 0
            || self.d_visual == 0
        {
            return Err(ToyModelError::Shape(
                "all arch dimensions must be >= 1".into(),
            ));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ToyModelError::Shape(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model < CONTRAST_CHANNEL + 1 || self.d_visual < CONTRAST_CHANNEL + 1 {
            return Err(ToyModelError::Shape(format!(
                "model needs at least {} channels for colors + contrast",
                CONTRAST_CHANNEL + 1
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub w_q: Matrix,
    pub q_bias: Vec<f64>,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub ff_in: Matrix,
    pub ff_in_bias: Vec<f64>,
    pub ff_out: Matrix,
    pub ff_out_bias: Vec<f64>,
}

/// All parameters of the toy decoder, fully determined by `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    seed: u64,
    arch: ModelArch,
    /// Patch features -> patch embeddings (linear, no bias).
    pub encoder: Matrix,
    /// Patch embeddings -> decoder space (affine).
    pub projector_w: Matrix,
    pub projector_b: Vec<f64>,
    pub layers: Vec<LayerWeights>,
    pub text_embed: Matrix,
    pub answer_embed: Matrix,
}

// Weight-construction constants. Color content is preserved through the
// value/output paths with gain COLOR_GAIN, while the query bias aligned with
// the contrast channel's key direction makes salient patches attract
// attention from every query position.
const NOISE_ENC: f64 = 0.02;
const NOISE_PROJ: f64 = 0.02;
const SCALE_QK: f64 = 0.25;
const CONTRAST_PULL: f64 = 0.65;
const COLOR_GAIN: f64 = 1.0;
const NOISE_VO: f64 = 0.02;
const SCALE_FF: f64 = 0.08;
const SCALE_TEXT: f64 = 0.8;
const COLOR_WORD_GAIN: f64 = 0.8;
const ANSWER_COLOR_GAIN: f64 = 6.0;
const ANSWER_OTHER_SCALE: f64 = 0.05;

impl ModelWeights {
    pub fn from_seed(seed: u64, arch: ModelArch) -> Result<Self, ToyModelError> {
        arch.validate()?;
        let mut rng = Prng::new(seed);
        let d = arch.d_model;

        let encoder = rect_identity(arch.d_patch, arch.d_visual, 1.0, NOISE_ENC, &mut rng);
        let projector_w = rect_identity(arch.d_visual, d, 1.0, NOISE_PROJ, &mut rng);
        let projector_b: Vec<f64> = (0..d).map(|_| rng.symmetric(0.02)).collect();

        let mut layers = Vec::with_capacity(arch.n_layers);
        for _ in 0..arch.n_layers {
            let w_q = random_matrix(d, d, SCALE_QK, &mut rng);
            let w_k = random_matrix(d, d, SCALE_QK, &mut rng);
            // Bias every query toward the key direction of the contrast
            // channel, so patches with high contrast draw attention.
            let contrast_row: Vec<f64> = (0..d).map(|j| w_k.get(CONTRAST_CHANNEL, j)).collect();
            let rms = (contrast_row.iter().map(|v| v * v).sum::<f64>() / contrast_row.len() as f64)
                .sqrt()
                .max(1e-9);
            let q_bias: Vec<f64> = contrast_row
                .iter()
                .map(|v| CONTRAST_PULL * v / rms)
                .collect();
            let w_v = rect_identity(d, d, COLOR_GAIN, NOISE_VO, &mut rng);
            let w_o = rect_identity(d, d, COLOR_GAIN, NOISE_VO, &mut rng);
            let ff_in = random_matrix(d, arch.d_ff, SCALE_FF, &mut rng);
            let ff_in_bias = vec![0.0; arch.d_ff];
            let ff_out = random_matrix(arch.d_ff, d, SCALE_FF, &mut rng);
            let ff_out_bias = vec![0.0; d];
            layers.push(LayerWeights {
                w_q,
                q_bias,
                w_k,
                w_v,
                w_o,
                ff_in,
                ff_in_bias,
                ff_out,
                ff_out_bias,
            });
        }

        // Text embeddings avoid the color/contrast block except for color
        // words, which light up their own color channel.
        let mut text_embed = Matrix::zeros(TEXT_VOCAB.len(), d);
        for (t, word) in TEXT_VOCAB.iter().enumerate() {
            for j in (CONTRAST_CHANNEL + 1)..d {
                text_embed.set(t, j, rng.symmetric(SCALE_TEXT));
            }
            if let Some(c) = COLOR_WORDS.iter().position(|w| w == word) {
                text_embed.set(t, c, COLOR_WORD_GAIN);
            }
        }

        let mut answer_embed = Matrix::zeros(ANSWER_VOCAB.len(), d);
        for a in 0..ANSWER_VOCAB.len() {
            for j in (CONTRAST_CHANNEL + 1)..d {
                answer_embed.set(a, j, rng.symmetric(ANSWER_OTHER_SCALE));
            }
            if a < N_COLORS {
                answer_embed.set(a, a, ANSWER_COLOR_GAIN);
            }
        }

        Ok(Self {
            seed,
            arch,
            encoder,
            projector_w,
            projector_b,
            layers,
            text_embed,
            answer_embed,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn arch(&self) -> &ModelArch {
        &self.arch
    }
}

fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut Prng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.symmetric(scale))
}

/// Identity on the leading diagonal (scaled by `gain`) plus uniform noise.
fn rect_identity(rows: usize, cols: usize, gain: f64, noise: f64, rng: &mut Prng) -> Matrix {
    Matrix::from_fn(rows, cols, |r, c| {
        let base = if r == c && r < rows.min(cols) {
            gain
        } else {
            0.0
        };
        base + rng.symmetric(noise)
    })
}

// ---------------------------------------------------------------------------
// Encoder, projector, token sequence
// ---------------------------------------------------------------------------

/// `v`: one embedding per patch, a linear map of the patch features. Token
/// count equals the patch count; there is no pooling.
pub fn encode_image(
    image: &SyntheticImage,
    weights: &ModelWeights,
) -> Result<Matrix, ToyModelError> {
    if image.feature_dim() != weights.arch.d_patch {
        return Err(ToyModelError::Shape(format!(
            "patch feature dim {} != encoder input dim {}",
            image.feature_dim(),
            weights.arch.d_patch
        )));
    }
    let features = Matrix::from_fn(image.grid().len(), weights.arch.d_patch, |r, c| {
        image.patch_features[r][c]
    });
    Ok(features.matmul(&weights.encoder))
}

/// Affine map from patch embeddings into decoder space, yielding the visual
/// tokens.
pub fn project(embeddings: &Matrix, weights: &ModelWeights) -> Result<Matrix, ToyModelError> {
    if embeddings.cols() != weights.arch.d_visual {
        return Err(ToyModelError::Shape(format!(
            "embedding dim {} != projector input dim {}",
            embeddings.cols(),
            weights.arch.d_visual
        )));
    }
    let mut out = embeddings.matmul(&weights.projector_w);
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        for (v, b) in row.iter_mut().zip(&weights.projector_b) {
            *v += b;
        }
    }
    Ok(out)
}

/// Map a question onto text-token ids over the closed vocabulary.
pub fn tokenize(text: &str) -> Vec<usize> {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .map(|w| TEXT_VOCAB.iter().position(|v| *v == w).unwrap_or(0))
        .collect()
}

/// The decoder input: visual tokens followed by text tokens. Generated
/// answer tokens are appended to the text segment.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    tokens: Matrix,
    n_visual: usize,
}

impl TokenSequence {
    /// Assemble visual tokens for `image` and text tokens for `prompt`.
    pub fn build(
        image: &SyntheticImage,
        prompt: &str,
        weights: &ModelWeights,
    ) -> Result<Self, ToyModelError> {
        let visual = project(&encode_image(image, weights)?, weights)?;
        let ids = tokenize(prompt);
        if ids.is_empty() {
            return Err(ToyModelError::EmptySequence);
        }
        let mut tokens = visual;
        let n_visual = tokens.rows();
        for id in ids {
            tokens.push_row(weights.text_embed.row(id));
        }
        Ok(Self { tokens, n_visual })
    }

    pub fn from_parts(visual: Matrix, text: Matrix) -> Result<Self, ToyModelError> {
        if visual.cols() != text.cols() {
            return Err(ToyModelError::Shape(format!(
                "visual dim {} != text dim {}",
                visual.cols(),
                text.cols()
            )));
        }
        if visual.rows() + text.rows() == 0 {
            return Err(ToyModelError::EmptySequence);
        }
        let n_visual = visual.rows();
        Ok(Self {
            tokens: visual.vstack(&text),
            n_visual,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn layout(&self) -> TokenLayout {
        TokenLayout {
            n_visual: self.n_visual,
            n_text: self.tokens.rows() - self.n_visual,
        }
    }

    pub fn tokens(&self) -> &Matrix {
        &self.tokens
    }

    /// Append a generated answer token (embedded via the answer table).
    pub fn push_answer_token(&mut self, token: usize, weights: &ModelWeights) {
        self.tokens.push_row(weights.answer_embed.row(token));
    }
}

// ---------------------------------------------------------------------------
// Forward pass and generation
// ---------------------------------------------------------------------------

/// Reweighting request for a decode: boost masked visual tokens by `lambda`
/// in every layer the scope selects.
#[derive(Debug, Clone, PartialEq)]
pub struct ReweightSpec {
    pub lambda: f64,
    pub mask: TokenMask,
    pub layer_scope: LayerScope,
}

/// Post-softmax attention captured from one forward pass:
/// `layers[layer][head]` is the row-stochastic matrix of that head.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub layers: Vec<Vec<Matrix>>,
}

impl AttentionTrace {
    /// Sum of the final query row's probability over `columns`, averaged
    /// over heads, one value per layer.
    pub fn final_row_mass(&self, columns: &[bool]) -> Vec<f64> {
        self.layers
            .iter()
            .map(|heads| {
                let mut acc = 0.0;
                for probs in heads {
                    let last = probs.rows() - 1;
                    acc += probs
                        .row(last)
                        .iter()
                        .zip(columns)
                        .filter(|(_, &m)| m)
                        .map(|(p, _)| p)
                        .sum::<f64>();
                }
                acc / self.layers[0].len() as f64
            })
            .collect()
    }
}

/// Logits over the answer vocabulary for the next token, with the attention
/// maps of the pass when `capture` is set.
pub fn decode_step(
    sequence: &TokenSequence,
    weights: &ModelWeights,
    reweight: Option<&ReweightSpec>,
    capture: bool,
) -> Result<(Vec<f64>, Option<AttentionTrace>), ToyModelError> {
    if sequence.is_empty() {
        return Err(ToyModelError::EmptySequence);
    }
    let arch = &weights.arch;
    let n = sequence.len();
    let d_head = arch.head_dim();
    let causal = BoolMatrix::causal(n);

    let params = match reweight {
        Some(spec) => Some(ReweightParams::new(
            spec.lambda,
            mask_to_columns(&spec.mask, &sequence.layout())?,
        )?),
        None => None,
    };

    let mut trace = capture.then(|| AttentionTrace { layers: Vec::new() });
    let mut x = sequence.tokens.clone();
    for (layer_idx, layer) in weights.layers.iter().enumerate() {
        let normed = rmsnorm_rows(&x);
        let mut queries = normed.matmul(&layer.w_q);
        for r in 0..queries.rows() {
            let row = queries.row_mut(r);
            for (v, b) in row.iter_mut().zip(&layer.q_bias) {
                *v += b;
            }
        }
        let keys = normed.matmul(&layer.w_k);
        let values = normed.matmul(&layer.w_v);

        let in_scope = reweight.is_some_and(|spec| spec.layer_scope.applies_to(layer_idx));
        let mut ctx = Matrix::zeros(n, arch.d_model);
        let mut head_traces = capture.then(Vec::new);
        for h in 0..arch.n_heads {
            let q = queries.col_slice(h * d_head, d_head);
            let k = keys.col_slice(h * d_head, d_head);
            let v = values.col_slice(h * d_head, d_head);
            let scores = scaled_scores(&q, &k, d_head)?;
            let probs = match (&params, in_scope) {
                (Some(p), true) => reweight_softmax(&scores, p, Some(&causal))?,
                _ => softmax(&scores, Some(&causal))?,
            };
            let head_ctx = probs.matmul(&v);
            for r in 0..n {
                for c in 0..d_head {
                    ctx.set(r, h * d_head + c, head_ctx.get(r, c));
                }
            }
            if let Some(ts) = head_traces.as_mut() {
                ts.push(probs);
            }
        }
        if let (Some(t), Some(ts)) = (trace.as_mut(), head_traces) {
            t.layers.push(ts);
        }

        let attn_out = ctx.matmul(&layer.w_o);
        add_in_place(&mut x, &attn_out);

        let normed2 = rmsnorm_rows(&x);
        let mut hidden = normed2.matmul(&layer.ff_in);
        for r in 0..hidden.rows() {
            let row = hidden.row_mut(r);
            for (v, b) in row.iter_mut().zip(&layer.ff_in_bias) {
                *v = (*v + b).max(0.0);
            }
        }
        let mut ff_out = hidden.matmul(&layer.ff_out);
        for r in 0..ff_out.rows() {
            let row = ff_out.row_mut(r);
            for (v, b) in row.iter_mut().zip(&layer.ff_out_bias) {
                *v += b;
            }
        }
        add_in_place(&mut x, &ff_out);
    }

    let final_hidden = x.row(n - 1);
    let logits: Vec<f64> = (0..ANSWER_VOCAB.len())
        .map(|a| {
            weights
                .answer_embed
                .row(a)
                .iter()
                .zip(final_hidden)
                .map(|(w, h)| w * h)
                .sum()
        })
        .collect();
    Ok((logits, trace))
}

fn rmsnorm_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let ms: f64 = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
        let inv = 1.0 / (ms + 1e-6).sqrt();
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    out
}

fn add_in_place(x: &mut Matrix, delta: &Matrix) {
    debug_assert_eq!(x.rows(), delta.rows());
    for r in 0..x.rows() {
        let src = delta.row(r).to_vec();
        let dst = x.row_mut(r);
        for (d, s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    }
}

/// Output of greedy generation.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOutput {
    /// Generated answer-vocabulary ids, stop token excluded.
    pub tokens: Vec<usize>,
    /// Space-joined surface form of `tokens`.
    pub text: String,
    /// Per-layer attention mass on the measured columns at the final
    /// generated position (averaged over heads), when a measurement mask was
    /// supplied.
    pub attention_mass: Vec<f64>,
}

/// Greedy argmax decoding; stops at the stop token or after `max_tokens`.
///
/// `measure` selects patches whose attention mass is reported regardless of
/// whether reweighting is active, so baseline and reweighted runs are
/// directly comparable.
pub fn generate(
    sequence: &TokenSequence,
    weights: &ModelWeights,
    reweight: Option<&ReweightSpec>,
    max_tokens: usize,
    measure: Option<&TokenMask>,
) -> Result<GenerateOutput, ToyModelError> {
    if max_tokens == 0 {
        return Err(ToyModelError::Shape("max_tokens must be >= 1".into()));
    }
    let mut seq = sequence.clone();
    let mut tokens = Vec::new();
    let mut mass = Vec::new();
    loop {
        let capture = measure.is_some();
        let (logits, trace) = decode_step(&seq, weights, reweight, capture)?;
        if let (Some(mask), Some(trace)) = (measure, trace) {
            let columns = mask_to_columns(mask, &seq.layout())?;
            mass = trace.final_row_mass(&columns);
        }
        let next = argmax(&logits);
        if next == END_TOKEN {
            break;
        }
        tokens.push(next);
        if tokens.len() >= max_tokens {
            break;
        }
        seq.push_answer_token(next, weights);
    }
    let text = tokens
        .iter()
        .map(|&t| ANSWER_VOCAB[t])
        .collect::<Vec<_>>()
        .join(" ");
    Ok(GenerateOutput {
        tokens,
        text,
        attention_mass: mass,
    })
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Grounding stub
// ---------------------------------------------------------------------------

/// Noise applied by the grounding stub to the target rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundingNoise {
    /// Horizontal offset added to both x coordinates.
    pub dx: f64,
    /// Vertical offset added to both y coordinates.
    pub dy: f64,
    /// Scale applied around the rectangle center.
    pub scale: f64,
    /// When set, answer with prose containing no box at all.
    pub refuse: bool,
}

impl Default for GroundingNoise {
    fn default() -> Self {
        Self {
            dx: 0.0,
            dy: 0.0,
            scale: 1.0,
            refuse: false,
        }
    }
}

impl GroundingNoise {
    pub fn refusal() -> Self {
        Self {
            refuse: true,
            ..Self::default()
        }
    }
}

/// Stage-1 stand-in: the toy model has no learned grounding skill, so this
/// stub answers with the target patch's rectangle (optionally perturbed),
/// serialized as `{"bbox": [...]}` text. The reply still flows through the
/// real prompt/parse path, so parser behavior is exercised end to end.
pub fn toy_ground(image: &SyntheticImage, _prompt: &str, noise: &GroundingNoise) -> String {
    if noise.refuse {
        return "I cannot determine the location of the region in question.".to_string();
    }
    let rect = image.target_rect();
    let (cx, cy) = rect.center();
    let half_w = rect.width() / 2.0 * noise.scale;
    let half_h = rect.height() / 2.0 * noise.scale;
    let clamp = |v: f64| v.clamp(0.0, 1.0);
    let coords = [
        clamp(cx - half_w + noise.dx),
        clamp(cy - half_h + noise.dy),
        clamp(cx + half_w + noise.dx),
        clamp(cy + half_h + noise.dy),
    ];
    format!(
        r#"{{"bbox": [{}, {}, {}, {}]}}"#,
        coords[0], coords[1], coords[2], coords[3]
    )
}
