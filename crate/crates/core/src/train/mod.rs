//! Training loop, patient-level splits, analyte-balanced sampling and the
//! non-neural forecasting baselines.

mod baselines;
mod optim;
mod split;

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use baselines::{baseline_predict, fit_ar, BaselineForecast, BaselineKind, DEFAULT_AR_ORDER};
pub use optim::Adam;
pub use split::{patient_split, PatientSplit};

use crate::analytes::AnalyteTable;
use crate::cohort::{days_between, LabSeries};
use crate::model::{
    build_tokens, forward_tape, gaussian_nll_tape, pinball_loss_tape, Bound, Checkpoint, CheckpointMeta, HeadKind,
    ModelConfig, ModelError, ParamStore, TokenSequence,
};
use crate::stats;
use crate::tensor::{Tape, TensorError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainPlan {
    pub fractions: [f64; 3],
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Exponent in `weight = count^-temperature`; 1 balances analytes exactly.
    pub sampling_temperature: f64,
    /// Sequences drawn per epoch; defaults to the training-set size.
    pub series_per_epoch: Option<usize>,
    /// Target positions used per drawn sequence; all when `None`.
    pub prefixes_per_series: Option<usize>,
    /// Global gradient-norm clip applied to each batch gradient.
    pub grad_clip: Option<f64>,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            fractions: [0.7, 0.1, 0.2],
            batch_size: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_epochs: 50,
            patience: 10,
            seed: 0,
            sampling_temperature: 1.0,
            series_per_epoch: None,
            prefixes_per_series: None,
            grad_clip: Some(5.0),
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyTrain,
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl TrainPlan {
    pub fn validate(&self) -> Result<(), TrainError> {
        let sum: f64 = self.fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.fractions.iter().any(|&f| f < 0.0) {
            return Err(TrainError::Plan(format!("fractions {:?} must be non-negative and sum to 1", self.fractions)));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(TrainError::Plan("batch_size and learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Per-sequence sampling weights `count(analyte)^-temperature`, normalized.
/// At temperature 1 every analyte receives the same total weight.
pub fn analyte_weights<S: AsRef<str>>(analytes: &[S], temperature: f64) -> Vec<f64> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for a in analytes {
        *counts.entry(a.as_ref()).or_default() += 1;
    }
    let raw: Vec<f64> = analytes
        .iter()
        .map(|a| (counts[a.as_ref()] as f64).powf(-temperature))
        .collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|w| w / total).collect()
}

/// One supervised example: predict position `target` of `series` from the
/// measurements before it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Example {
    pub series: usize,
    pub target: usize,
}

/// Tokens and model-space target for predicting `series[target]`.
pub fn example_tokens(
    table: &AnalyteTable,
    config: &ModelConfig,
    series: &LabSeries,
    target: usize,
) -> Result<(TokenSequence, f64), ModelError> {
    let history = series.slice(0..target);
    let m = &series.measurements[target];
    let horizon = days_between(series.measurements[target - 1].time, m.time).max(0.0);
    let tokens = build_tokens(table, &history, series.states[target], horizon, config)?;
    let y = tokens.denorm.normalize(m.value);
    Ok((tokens, y))
}

/// Records the loss of one example on `tape`.
pub fn example_loss(
    tape: &mut Tape,
    bound: &Bound,
    config: &ModelConfig,
    tokens: &TokenSequence,
    y: f64,
) -> Result<crate::tensor::Var, ModelError> {
    let head = forward_tape(tape, bound, config, tokens)?;
    Ok(match config.head {
        HeadKind::Gaussian => gaussian_nll_tape(tape, head, y)?,
        HeadKind::Quantile => pinball_loss_tape(tape, head, y, &config.quantile_levels)?,
    })
}

fn eval_loss(table: &AnalyteTable, config: &ModelConfig, params: &ParamStore, data: &[LabSeries]) -> Result<Option<f64>, ModelError> {
    let mut total = 0.0;
    let mut n = 0usize;
    for s in data.iter().filter(|s| s.len() >= 2) {
        let (tokens, y) = example_tokens(table, config, s, s.len() - 1)?;
        let mut tape = Tape::new();
        let b = Bound::new(&mut tape, params, false);
        let l = example_loss(&mut tape, &b, config, &tokens, y)?;
        total += tape.value(l).item();
        n += 1;
    }
    Ok((n > 0).then(|| total / n as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub split: String,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// Parameters with the lowest validation loss (or the last epoch when
    /// there is no validation data).
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    /// Training stopped on a non-finite loss; the checkpoint is the last finite one.
    pub diverged: bool,
}

pub fn write_log<W: Write>(mut w: W, log: &[LogRow]) -> std::io::Result<()> {
    writeln!(w, "step,split,loss")?;
    for r in log {
        writeln!(w, "{},{},{}", r.step, r.split, r.loss)?;
    }
    Ok(())
}

fn draw_index<R: Rng>(cdf: &[f64], rng: &mut R) -> usize {
    let u = rng.random::<f64>() * cdf[cdf.len() - 1];
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

fn epoch_examples<R: Rng>(train: &[LabSeries], cdf: &[f64], plan: &TrainPlan, rng: &mut R) -> Vec<Example> {
    let draws = plan.series_per_epoch.unwrap_or(train.len());
    let mut out = Vec::new();
    for _ in 0..draws {
        let s = draw_index(cdf, rng);
        let mut targets: Vec<usize> = (1..train[s].len()).collect();
        if let Some(cap) = plan.prefixes_per_series {
            targets.shuffle(rng);
            targets.truncate(cap);
        }
        out.extend(targets.into_iter().map(|target| Example { series: s, target }));
    }
    out.shuffle(rng);
    out
}

/// Mini-batch Adam on the configured loss with early stopping on the
/// validation loss of each sequence's last value.
pub fn train(
    table: &AnalyteTable,
    config: &ModelConfig,
    train: &[LabSeries],
    val: &[LabSeries],
    plan: &TrainPlan,
) -> Result<TrainOutput, TrainError> {
    plan.validate()?;
    config.validate()?;
    let train: Vec<LabSeries> = train.iter().filter(|s| s.len() >= 2).cloned().collect();
    if train.is_empty() {
        return Err(TrainError::EmptyTrain);
    }
    for s in train.iter().chain(val) {
        table.id(&s.analyte).map_err(ModelError::from)?;
    }
    let mut params = ParamStore::init(config, table.len(), stats::derive_seed(plan.seed, 1))?;
    let mut rng = stats::rng(stats::derive_seed(plan.seed, 2));
    let mut adam = Adam::new(&params, plan.learning_rate, plan.beta1, plan.beta2, plan.eps);

    let weights = analyte_weights(&train.iter().map(|s| s.analyte.as_str()).collect::<Vec<_>>(), plan.sampling_temperature);
    let cdf: Vec<f64> = weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w;
            Some(*acc)
        })
        .collect();

    let mut log = Vec::new();
    let mut best: Option<(f64, ParamStore, usize)> = None;
    let mut since_best = 0;
    let mut step = 0;
    let mut diverged = false;
    let mut epochs_run = 0;

    'epochs: for epoch in 1..=plan.max_epochs {
        epochs_run = epoch;
        let examples = epoch_examples(&train, &cdf, plan, &mut rng);
        for batch in examples.chunks(plan.batch_size) {
            let mut acc: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
            let mut batch_loss = 0.0;
            for ex in batch {
                let (tokens, y) = example_tokens(table, config, &train[ex.series], ex.target)?;
                let mut tape = Tape::new();
                let bound = Bound::new(&mut tape, &params, true);
                let loss = match example_loss(&mut tape, &bound, config, &tokens, y) {
                    Ok(l) => l,
                    Err(ModelError::NonFiniteLayer { .. }) | Err(ModelError::Tensor(TensorError::NonFinite { .. })) => {
                        diverged = true;
                        break 'epochs;
                    }
                    Err(e) => return Err(e.into()),
                };
                let lv = tape.value(loss).item();
                if !lv.is_finite() {
                    diverged = true;
                    break 'epochs;
                }
                batch_loss += lv;
                let vars = bound.vars().to_vec();
                let grads = tape.backward(loss)?;
                for (a, v) in acc.iter_mut().zip(vars) {
                    if let Some(g) = grads.get_slice(v) {
                        a.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            acc.iter_mut().flatten().for_each(|g| *g *= inv);
            if let Some(clip) = plan.grad_clip {
                let norm = acc.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
                if norm > clip {
                    let s = clip / norm;
                    acc.iter_mut().flatten().for_each(|g| *g *= s);
                }
            }
            adam.step(&mut params, &acc);
            if params.tensors().iter().any(|t| !t.all_finite()) {
                diverged = true;
                break 'epochs;
            }
            step += 1;
            log.push(LogRow {
                step,
                split: "train".into(),
                loss: batch_loss * inv,
            });
        }

        let val_loss = eval_loss(table, config, &params, val)?;
        if let Some(v) = val_loss {
            log.push(LogRow {
                step,
                split: "val".into(),
                loss: v,
            });
            log::info!("epoch {epoch} step {step} val {v:.6}");
        }
        let score = val_loss.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
            best = Some((score, params.clone(), epoch));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= plan.patience {
                break;
            }
        }
    }

    let (best_val, best_params, best_epoch) = match best {
        Some(b) => b,
        None => (f64::NAN, params, 0),
    };
    let checkpoint = Checkpoint {
        config: config.clone(),
        meta: CheckpointMeta {
            trained: true,
            seed: plan.seed,
            epochs: epochs_run,
            best_val_loss: best_val.is_finite().then_some(best_val),
            analytes: table.iter().map(|a| a.code.clone()).collect(),
            fractions: Some(plan.fractions),
        },
        params: best_params,
    };
    Ok(TrainOutput {
        checkpoint,
        log,
        best_epoch,
        epochs_run,
        diverged,
    })
}
