//! The attention kernel: scaled dot-product scores, stabilized row softmax,
//! and the reweighting transform that multiplies the exponentiated scores of
//! masked visual-token columns by `lambda` before renormalizing.
//!
//! The boost is applied additively in log space — masked columns receive
//! `ln(lambda)` on top of their scores — which is algebraically identical to
//! the multiplicative form and composes cleanly with `-inf` causal
//! sentinels. Its observable signature is the odds-ratio law: for any row,
//! masked column `i` and unmasked column `j`, the probability odds
//! `p_i / p_j` scale by exactly `lambda`.

use std::io::{self, Write};

use thiserror::Error;

use crate::geometry::TokenMask;
use crate::matrix::{BoolMatrix, Matrix};

#[derive(Debug, Error, PartialEq)]
pub enum AttentionError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("lambda must be finite and >= 1, got {0}")]
    InvalidLambda(f64),
    #[error("score matrix entries must be finite (-inf sentinel allowed), found {0}")]
    NonFiniteScore(f64),
    #[error("row {0} has every column excluded; softmax is undefined")]
    DegenerateRow(usize),
}

/// Pre-softmax attention scores, already divided by `sqrt(d_k)`.
///
/// `-inf` entries are legal and mark causally excluded positions; any other
/// non-finite entry is rejected at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    values: Matrix,
    d_k: usize,
}

impl ScoreMatrix {
    pub fn new(values: Matrix, d_k: usize) -> Result<Self, AttentionError> {
        for &v in values.as_slice() {
            if !v.is_finite() && v != f64::NEG_INFINITY {
                return Err(AttentionError::NonFiniteScore(v));
            }
        }
        Ok(Self { values, d_k })
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    /// Key dimension the scores were scaled by, kept for provenance.
    pub fn d_k(&self) -> usize {
        self.d_k
    }

    pub fn n_query(&self) -> usize {
        self.values.rows()
    }

    pub fn n_key(&self) -> usize {
        self.values.cols()
    }
}

/// Reweighting parameters: the boost factor and the key columns it applies
/// to. Text-token columns are always `false`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReweightParams {
    lambda: f64,
    column_mask: Vec<bool>,
}

impl ReweightParams {
    pub fn new(lambda: f64, column_mask: Vec<bool>) -> Result<Self, AttentionError> {
        if !lambda.is_finite() || lambda < 1.0 {
            return Err(AttentionError::InvalidLambda(lambda));
        }
        Ok(Self {
            lambda,
            column_mask,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn column_mask(&self) -> &[bool] {
        &self.column_mask
    }
}

/// Where the visual tokens sit in the key sequence: positions
/// `0..n_visual` are visual (row-major patch order), the rest are text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLayout {
    pub n_visual: usize,
    pub n_text: usize,
}

impl TokenLayout {
    pub fn total(&self) -> usize {
        self.n_visual + self.n_text
    }
}

/// `scores[i][j] = dot(q_i, k_j) / sqrt(d_k)`.
pub fn scaled_scores(
    queries: &Matrix,
    keys: &Matrix,
    d_k: usize,
) -> Result<ScoreMatrix, AttentionError> {
    if queries.cols() != keys.cols() {
        return Err(AttentionError::Shape(format!(
            "query dim {} != key dim {}",
            queries.cols(),
            keys.cols()
        )));
    }
    if d_k != keys.cols() || d_k == 0 {
        return Err(AttentionError::Shape(format!(
            "d_k {} does not match key dimension {}",
            d_k,
            keys.cols()
        )));
    }
    let scale = 1.0 / (d_k as f64).sqrt();
    let values = Matrix::from_fn(queries.rows(), keys.rows(), |i, j| {
        let dot: f64 = queries
            .row(i)
            .iter()
            .zip(keys.row(j))
            .map(|(a, b)| a * b)
            .sum();
        dot * scale
    });
    ScoreMatrix::new(values, d_k)
}

/// Plain row softmax with optional causal exclusion (the `lambda = 1` path).
///
/// `causal[i][j] = true` excludes key `j` from query `i`'s distribution.
pub fn softmax(
    scores: &ScoreMatrix,
    causal: Option<&BoolMatrix>,
) -> Result<Matrix, AttentionError> {
    softmax_with_boost(scores, 0.0, None, causal)
}

/// The reweighted softmax: masked columns' exponentiated scores are
/// multiplied by `lambda` before renormalization. With `lambda = 1` or an
/// all-false mask this is exactly [`softmax`].
pub fn reweight_softmax(
    scores: &ScoreMatrix,
    params: &ReweightParams,
    causal: Option<&BoolMatrix>,
) -> Result<Matrix, AttentionError> {
    if params.column_mask.len() != scores.n_key() {
        return Err(AttentionError::Shape(format!(
            "column mask length {} != key count {}",
            params.column_mask.len(),
            scores.n_key()
        )));
    }
    softmax_with_boost(
        scores,
        params.lambda.ln(),
        Some(&params.column_mask),
        causal,
    )
}

fn softmax_with_boost(
    scores: &ScoreMatrix,
    ln_boost: f64,
    mask: Option<&[bool]>,
    causal: Option<&BoolMatrix>,
) -> Result<Matrix, AttentionError> {
    let (n_query, n_key) = (scores.n_query(), scores.n_key());
    if let Some(c) = causal {
        if c.rows() != n_query || c.cols() != n_key {
            return Err(AttentionError::Shape(format!(
                "causal mask {}x{} != scores {}x{}",
                c.rows(),
                c.cols(),
                n_query,
                n_key
            )));
        }
    }

    let mut out = Matrix::zeros(n_query, n_key);
    let mut shifted = vec![0.0; n_key];
    for i in 0..n_query {
        let row = scores.values.row(i);
        let mut row_max = f64::NEG_INFINITY;
        for j in 0..n_key {
            let excluded = causal.is_some_and(|c| c.get(i, j));
            let x = if excluded {
                f64::NEG_INFINITY
            } else if mask.is_some_and(|m| m[j]) {
                row[j] + ln_boost
            } else {
                row[j]
            };
            shifted[j] = x;
            if x > row_max {
                row_max = x;
            }
        }
        if row_max == f64::NEG_INFINITY {
            return Err(AttentionError::DegenerateRow(i));
        }
        let mut sum = 0.0;
        for x in shifted.iter_mut() {
            *x = (*x - row_max).exp();
            sum += *x;
        }
        let dst = out.row_mut(i);
        for (d, &e) in dst.iter_mut().zip(shifted.iter()) {
            *d = e / sum;
        }
    }
    Ok(out)
}

/// Embed a patch-grid mask into key-column space: column `j` is `true`
/// exactly when `j` is a visual position whose patch bit is set.
pub fn mask_to_columns(
    mask: &TokenMask,
    layout: &TokenLayout,
) -> Result<Vec<bool>, AttentionError> {
    if mask.grid().len() != layout.n_visual {
        return Err(AttentionError::Shape(format!(
            "mask has {} patches but layout declares {} visual tokens",
            mask.grid().len(),
            layout.n_visual
        )));
    }
    let mut columns = Vec::with_capacity(layout.total());
    columns.extend_from_slice(mask.bits());
    columns.resize(layout.total(), false);
    Ok(columns)
}

/// Dump a row-stochastic attention matrix as CSV with row and column
/// headers, the format consumed by the `inspect` command.
pub fn write_attention_csv<W: Write>(
    mut w: W,
    probs: &Matrix,
    row_labels: &[String],
    col_labels: &[String],
) -> io::Result<()> {
    assert_eq!(row_labels.len(), probs.rows(), "row label count mismatch");
    assert_eq!(
        col_labels.len(),
        probs.cols(),
        "column label count mismatch"
    );
    write!(w, "query")?;
    for label in col_labels {
        write!(w, ",{label}")?;
    }
    writeln!(w)?;
    for (r, label) in row_labels.iter().enumerate() {
        write!(w, "{label}")?;
        for v in probs.row(r) {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}
