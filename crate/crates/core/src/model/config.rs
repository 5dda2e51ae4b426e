use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeEncoding {
    /// Days since the first measurement (in years), one linear channel plus sinusoids.
    Time2vec,
    /// `log(1 + gap_days)`, one linear channel plus sinusoids.
    LogDeltaT,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateEncoding {
    /// Within or outside the population range.
    Binary,
    Ternary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueEncoding {
    Raw,
    WithinSequenceNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgeEncoding {
    RawLinear,
    DecadeBins,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextToken {
    MergedIntoFirst,
    Dedicated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Gaussian,
    Quantile,
}

pub const DEFAULT_QUANTILES: [f64; 5] = [0.025, 0.25, 0.5, 0.75, 0.975];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub time_encoding: TimeEncoding,
    pub state_encoding: StateEncoding,
    pub value_encoding: ValueEncoding,
    pub age_encoding: AgeEncoding,
    pub context_token: ContextToken,
    pub head: HeadKind,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    /// Width of the MLP hidden layer as a multiple of `d_model`.
    pub mlp_ratio: usize,
    /// Channels of each time encoder before projection to `d_model`.
    pub time_channels: usize,
    pub quantile_levels: Vec<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::eicu_default()
    }
}

impl ModelConfig {
    pub const PRESETS: [&'static str; 2] = ["chs-default", "eicu-default"];

    pub fn chs_default() -> Self {
        Self {
            time_encoding: TimeEncoding::Time2vec,
            state_encoding: StateEncoding::Ternary,
            value_encoding: ValueEncoding::Raw,
            age_encoding: AgeEncoding::RawLinear,
            context_token: ContextToken::Dedicated,
            head: HeadKind::Gaussian,
            d_model: 64,
            n_layers: 3,
            n_heads: 4,
            max_seq_len: 128,
            mlp_ratio: 4,
            time_channels: 8,
            quantile_levels: DEFAULT_QUANTILES.to_vec(),
        }
    }

    pub fn eicu_default() -> Self {
        Self {
            time_encoding: TimeEncoding::LogDeltaT,
            value_encoding: ValueEncoding::WithinSequenceNorm,
            age_encoding: AgeEncoding::DecadeBins,
            context_token: ContextToken::Dedicated,
            head: HeadKind::Quantile,
            ..Self::chs_default()
        }
    }

    pub fn preset(name: &str) -> Result<Self, ModelError> {
        match name {
            "chs-default" => Ok(Self::chs_default()),
            "eicu-default" => Ok(Self::eicu_default()),
            other => Err(ModelError::Config(format!("unknown preset {other:?}"))),
        }
    }

    /// Same encodings at a different size.
    pub fn with_dims(mut self, d_model: usize, n_layers: usize, n_heads: usize) -> Self {
        self.d_model = d_model;
        self.n_layers = n_layers;
        self.n_heads = n_heads;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.n_layers == 0 || self.max_seq_len == 0 || self.mlp_ratio == 0 {
            return bad("n_layers, max_seq_len and mlp_ratio must be positive".into());
        }
        if self.time_channels < 2 {
            return bad("time_channels must be at least 2".into());
        }
        if self.head == HeadKind::Quantile {
            let q = &self.quantile_levels;
            if q.len() < 2 || q.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
                return bad("quantile levels must lie in (0, 1)".into());
            }
            if q.windows(2).any(|w| w[0] >= w[1]) {
                return bad("quantile levels must be strictly increasing".into());
            }
            if self.interval_pair().is_none() {
                return bad("quantile levels need a symmetric pair for the interval".into());
            }
            if !q.iter().any(|&t| (t - 0.5).abs() < 1e-12) {
                return bad("quantile levels must include the median".into());
            }
        }
        Ok(())
    }

    /// Indices of the outermost symmetric pair `(tau, 1 - tau)`.
    pub fn interval_pair(&self) -> Option<(usize, usize)> {
        let q = &self.quantile_levels;
        for (i, &lo) in q.iter().enumerate() {
            if lo >= 0.5 {
                break;
            }
            if let Some(j) = q.iter().position(|&hi| (hi - (1.0 - lo)).abs() < 1e-12) {
                return Some((i, j));
            }
        }
        None
    }

    pub fn median_index(&self) -> Option<usize> {
        self.quantile_levels.iter().position(|&t| (t - 0.5).abs() < 1e-12)
    }

    pub fn n_states(&self) -> usize {
        match self.state_encoding {
            StateEncoding::Binary => 2,
            StateEncoding::Ternary => 3,
        }
    }

    pub fn head_width(&self) -> usize {
        match self.head {
            HeadKind::Gaussian => 2,
            HeadKind::Quantile => self.quantile_levels.len(),
        }
    }

    /// Token count for `t` history measurements.
    pub fn seq_len(&self, t: usize) -> usize {
        match self.context_token {
            ContextToken::Dedicated => t + 2,
            ContextToken::MergedIntoFirst => t + 1,
        }
    }
}
