//! Hyperparameters for the two-stage procedure: box expansion factor
//! `alpha`, attention boost `lambda`, and the layer/head scope the boost
//! applies to.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("alpha must be a positive finite number, got {0}")]
    InvalidAlpha(f64),
    #[error("lambda must be finite and >= 1, got {0}")]
    InvalidLambda(f64),
}

/// Which decoder layers apply the attention boost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerScope {
    /// Every attention layer (the default).
    All,
    /// Layers in `start..end` (half-open); an empty range disables the
    /// boost entirely, reproducing the baseline.
    Range { start: usize, end: usize },
}

impl LayerScope {
    pub fn applies_to(&self, layer: usize) -> bool {
        match self {
            LayerScope::All => true,
            LayerScope::Range { start, end } => layer >= *start && layer < *end,
        }
    }

    pub fn is_empty_range(&self) -> bool {
        matches!(self, LayerScope::Range { start, end } if start >= end)
    }
}

/// Which heads within a boosted layer are affected. Only uniform boosting is
/// defined; the enum exists as the extension point for per-head scoping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadScope {
    #[default]
    All,
}

/// Hyperparameters of a coarse-to-fine run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CofConfig {
    /// Center-preserving expansion applied to the grounded box.
    pub alpha: f64,
    /// Multiplier on the exponentiated attention scores of masked visual
    /// tokens; 1 means no reweighting.
    pub lambda: f64,
    #[serde(default = "default_layer_scope")]
    pub layer_scope: LayerScope,
    #[serde(default)]
    pub head_scope: HeadScope,
}

fn default_layer_scope() -> LayerScope {
    LayerScope::All
}

impl CofConfig {
    pub fn new(alpha: f64, lambda: f64) -> Result<Self, ConfigError> {
        let config = Self {
            alpha,
            lambda,
            layer_scope: LayerScope::All,
            head_scope: HeadScope::All,
        };
        config.validate()?;
        Ok(config)
    }

    /// Check field invariants; call after deserializing untrusted input.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            return Err(ConfigError::InvalidAlpha(self.alpha));
        }
        if !self.lambda.is_finite() || self.lambda < 1.0 {
            return Err(ConfigError::InvalidLambda(self.lambda));
        }
        Ok(())
    }

    /// Setting tuned for 7B-scale decoders with an MLP projector:
    /// alpha 1.3, lambda 2.0. This is the crate-wide default.
    pub fn preset_7b() -> Self {
        Self {
            alpha: 1.3,
            lambda: 2.0,
            layer_scope: LayerScope::All,
            head_scope: HeadScope::All,
        }
    }

    /// Setting tuned for 13B-scale decoders: alpha 1.0, lambda 4.5.
    pub fn preset_13b() -> Self {
        Self {
            alpha: 1.0,
            lambda: 4.5,
            layer_scope: LayerScope::All,
            head_scope: HeadScope::All,
        }
    }

    /// Setting tuned for query-based (Q-former style) projectors:
    /// alpha 1.0, lambda 22.0.
    pub fn preset_qformer() -> Self {
        Self {
            alpha: 1.0,
            lambda: 22.0,
            layer_scope: LayerScope::All,
            head_scope: HeadScope::All,
        }
    }
}

impl Default for CofConfig {
    fn default() -> Self {
        Self::preset_7b()
    }
}
