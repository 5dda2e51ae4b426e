use serde::{Deserialize, Serialize};

use super::config::{HeadKind, ModelConfig};
use super::network::forward;
use super::params::ParamStore;
use super::tokens::{build_tokens, Denorm, TokenSequence};
use super::ModelError;
use crate::analytes::AnalyteTable;
use crate::cohort::LabSeries;
use crate::ri::{Framework, LabState, ReferenceInterval};

const Z_975: f64 = 1.96;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distribution {
    Gaussian { mu: f64, log_var: f64 },
    Quantiles { levels: Vec<f64>, values: Vec<f64> },
}

impl Distribution {
    /// Mean for the Gaussian head, median for the quantile head.
    pub fn point(&self) -> f64 {
        match self {
            Distribution::Gaussian { mu, .. } => *mu,
            Distribution::Quantiles { levels, values } => {
                let i = levels
                    .iter()
                    .position(|&t| (t - 0.5).abs() < 1e-12)
                    .unwrap_or(levels.len() / 2);
                values[i]
            }
        }
    }

    pub fn sd(&self) -> Option<f64> {
        match self {
            Distribution::Gaussian { log_var, .. } => Some((0.5 * log_var).exp()),
            Distribution::Quantiles { .. } => None,
        }
    }

    /// 95% band: `mu +- 1.96 sd` or the outermost symmetric quantile pair.
    pub fn band(&self) -> (f64, f64) {
        match self {
            Distribution::Gaussian { mu, log_var } => {
                let sd = (0.5 * log_var).exp();
                (mu - Z_975 * sd, mu + Z_975 * sd)
            }
            Distribution::Quantiles { levels, values } => {
                for (i, &lo) in levels.iter().enumerate() {
                    if let Some(j) = levels.iter().position(|&hi| (hi - (1.0 - lo)).abs() < 1e-12) {
                        if i < j {
                            return (values[i], values[j]);
                        }
                    }
                }
                (values[0], values[values.len() - 1])
            }
        }
    }
}

/// Next-value distribution in the canonical unit plus its model-space form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    pub dist: Distribution,
    pub normalized: Distribution,
    pub denorm: Denorm,
    pub query_state: LabState,
}

impl PredictiveDistribution {
    pub fn from_head(config: &ModelConfig, tokens: &TokenSequence, out: &[f64]) -> Self {
        let dn = tokens.denorm;
        let (dist, normalized) = match config.head {
            HeadKind::Gaussian => (
                Distribution::Gaussian {
                    mu: dn.denormalize(out[0]),
                    log_var: out[1] + 2.0 * dn.scale.ln(),
                },
                Distribution::Gaussian {
                    mu: out[0],
                    log_var: out[1],
                },
            ),
            HeadKind::Quantile => {
                let mut raw = out.to_vec();
                raw.sort_by(f64::total_cmp);
                let values = raw.iter().map(|&y| dn.denormalize(y)).collect();
                (
                    Distribution::Quantiles {
                        levels: config.quantile_levels.clone(),
                        values,
                    },
                    Distribution::Quantiles {
                        levels: config.quantile_levels.clone(),
                        values: raw,
                    },
                )
            }
        };
        Self {
            dist,
            normalized,
            denorm: dn,
            query_state: tokens.query_state,
        }
    }

    pub fn point(&self) -> f64 {
        self.dist.point()
    }
}

/// Model-based interval; only defined when the query asked for a normal
/// future state. A zero-width band is marked degenerate in the provenance.
pub fn norma_interval(pred: &PredictiveDistribution) -> Result<ReferenceInterval, ModelError> {
    if pred.query_state != LabState::Normal {
        return Err(ModelError::NotNormalQuery);
    }
    let (lo, hi) = pred.dist.band();
    let mut provenance = match &pred.dist {
        Distribution::Gaussian { .. } => "norma gaussian mu+-1.96sd".to_string(),
        Distribution::Quantiles { .. } => "norma quantile q0.025-q0.975".to_string(),
    };
    if hi - lo <= 1e-12 * pred.point().abs().max(1.0) {
        provenance.push_str(" degenerate");
    }
    Ok(ReferenceInterval::new(Some(lo), Some(hi), Framework::Norma, provenance))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub point: f64,
    pub interval: ReferenceInterval,
    pub distribution: PredictiveDistribution,
    pub degenerate: bool,
    pub truncated: usize,
}

/// Tokens, forward pass and interval for a normal-state query `horizon_days`
/// after the last measurement.
pub fn predict(
    table: &AnalyteTable,
    params: &ParamStore,
    config: &ModelConfig,
    series: &LabSeries,
    horizon_days: f64,
) -> Result<Prediction, ModelError> {
    let tokens = build_tokens(table, series, LabState::Normal, horizon_days, config)?;
    let distribution = forward(params, config, &tokens)?;
    let interval = norma_interval(&distribution)?;
    Ok(Prediction {
        point: distribution.point(),
        degenerate: interval.provenance.ends_with("degenerate"),
        interval,
        distribution,
        truncated: tokens.truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pd(dist: Distribution, state: LabState) -> PredictiveDistribution {
        PredictiveDistribution {
            normalized: dist.clone(),
            dist,
            denorm: Denorm { shift: 0.0, scale: 1.0 },
            query_state: state,
        }
    }

    #[test]
    fn gaussian_interval() {
        let p = pd(
            Distribution::Gaussian {
                mu: 100.0,
                log_var: (100.0f64).ln(),
            },
            LabState::Normal,
        );
        let ri = norma_interval(&p).unwrap();
        assert!((ri.lower.unwrap() - 80.4).abs() < 1e-10);
        assert!((ri.upper.unwrap() - 119.6).abs() < 1e-10);
    }

    #[test]
    fn quantile_interval_reads_outer_pair() {
        let p = pd(
            Distribution::Quantiles {
                levels: vec![0.025, 0.25, 0.5, 0.75, 0.975],
                values: vec![78.0, 90.0, 100.0, 110.0, 122.0],
            },
            LabState::Normal,
        );
        let ri = norma_interval(&p).unwrap();
        assert_eq!((ri.lower, ri.upper), (Some(78.0), Some(122.0)));
        assert_eq!(p.point(), 100.0);
    }

    #[test]
    fn zero_width_is_degenerate() {
        let p = pd(
            Distribution::Quantiles {
                levels: vec![0.025, 0.5, 0.975],
                values: vec![5.0, 5.0, 5.0],
            },
            LabState::Normal,
        );
        let ri = norma_interval(&p).unwrap();
        assert_eq!(ri.width(), Some(0.0));
        assert!(ri.provenance.ends_with("degenerate"));
    }

    #[test]
    fn abnormal_query_is_rejected() {
        let p = pd(Distribution::Gaussian { mu: 1.0, log_var: 0.0 }, LabState::High);
        assert_eq!(norma_interval(&p), Err(ModelError::NotNormalQuery));
    }
}
