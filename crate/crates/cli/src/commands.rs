use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use thiserror::Error;

use norma_core::analytes::AnalyteTable;
use norma_core::cohort::io::{read_outcomes, write_rejections, write_series, IoError};
use norma_core::cohort::{split_baseline_index, LabSeries, OutcomeTable, SplitPolicy};
use norma_core::eval::{self, write_metric_rows, EvalError};
use norma_core::model::{Checkpoint, CheckpointError, ModelConfig, ModelError, CHECKPOINT_MAGIC};
use norma_core::pipeline::{self, PipelineError};
use norma_core::ri::{perri_setpoint_valid, popri_interval, select_perri};
use norma_core::synth::{generate, CohortSpec, SynthError};
use norma_core::train::{patient_split, write_log, TrainError, TrainPlan};
use norma_service::{AppState, ServeError};

use crate::{EvalArgs, RiFramework, Subset, Task};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    CohortIo(#[from] IoError),
    #[error(transparent)]
    Serve(#[from] ServeError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|source| CliError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| CliError::File {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    File::create(path).map(BufWriter::new).map_err(|source| CliError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    serde_json::from_reader(open(path)?).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// A cohort directory stands for its `measurements.csv`.
fn measurements_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("measurements.csv")
    } else {
        path.to_path_buf()
    }
}

fn load_series(table: &AnalyteTable, path: &Path) -> Result<Vec<LabSeries>, CliError> {
    let (ingested, cleaned) = pipeline::load_series(table, open(path)?)?;
    if !ingested.rejections.is_empty() {
        log::warn!("{}: {} row(s) rejected", path.display(), ingested.rejections.len());
    }
    for w in &cleaned.warnings {
        log::warn!("{w}");
    }
    Ok(cleaned.series)
}

fn policy(path: Option<&Path>) -> Result<SplitPolicy, CliError> {
    match path {
        Some(p) => read_json(p),
        None => Ok(serde_json::from_value(serde_json::json!({"kind": "fraction"})).expect("fraction policy has defaults")),
    }
}

pub fn synth(spec: &Path, out: &Path) -> Result<(), CliError> {
    let table = AnalyteTable::shipped();
    let spec: CohortSpec = read_json(spec)?;
    let cohort = generate(table, &spec)?;
    cohort.write_dir(table, out)?;
    log::info!(
        "{} patients, {} series, {} measurements written to {}",
        cohort.patients.len(),
        cohort.series.len(),
        cohort.series.iter().map(|s| s.len()).sum::<usize>(),
        out.display()
    );
    Ok(())
}

pub fn ingest(input: &Path, out: &Path, rejections: Option<&Path>) -> Result<(), CliError> {
    let table = AnalyteTable::shipped();
    let (ingested, cleaned) = pipeline::load_series(table, open(input)?)?;
    let mut w = create(out)?;
    write_series(&mut w, table, &cleaned.series)?;
    w.flush()?;
    if let Some(r) = rejections {
        let mut w = create(r)?;
        write_rejections(&mut w, &ingested.rejections)?;
        w.flush()?;
    }
    for w in &cleaned.warnings {
        log::warn!("{w}");
    }
    log::info!(
        "accepted {}, rejected {}, duplicates merged {}, outliers dropped {}",
        ingested.accepted(),
        ingested.rejections.len(),
        cleaned.n_duplicates_merged,
        cleaned.n_outliers
    );
    Ok(())
}

const RI_HEADER: [&str; 6] = ["patient_id", "analyte", "framework", "lower", "upper", "valid"];

/// Pop rows are always valid. Per rows are valid when the baseline is
/// eligible, the mixture fit succeeds and the setpoint lies inside Pop_RI.
pub fn ri_fit(framework: RiFramework, input: &Path, policy_path: Option<&Path>, out: Option<&Path>) -> Result<(), CliError> {
    let table = AnalyteTable::shipped();
    let series = load_series(table, &measurements_path(input))?;
    let policy = policy(policy_path)?;
    let sink: Box<dyn Write> = match out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(RI_HEADER)?;
    let (mut n_valid, mut reasons) = (0usize, BTreeMap::<String, usize>::new());
    for s in &series {
        let sex = s.patient.sex;
        let (interval, valid) = match framework {
            RiFramework::Pop => (Some(popri_interval(table, &s.analyte, sex).map_err(ModelError::from)?), true),
            RiFramework::Per => match split_baseline_index(s, &policy) {
                Err(reason) => {
                    *reasons.entry(reason.as_str().to_string()).or_default() += 1;
                    (None, false)
                }
                Ok(split) => match select_perri(&split.baseline) {
                    Err(e) => {
                        log::debug!("{} {}: {e}", s.patient.id, s.analyte);
                        *reasons.entry("fit-failed".into()).or_default() += 1;
                        (None, false)
                    }
                    Ok(per) => {
                        let ok = perri_setpoint_valid(table, &per, &s.analyte, sex).map_err(ModelError::from)?;
                        if !ok {
                            *reasons.entry("setpoint-outside-pop".into()).or_default() += 1;
                        }
                        (Some(per.interval), ok)
                    }
                },
            },
        };
        n_valid += usize::from(valid);
        let (lo, hi) = interval.map_or((None, None), |i| (i.lower, i.upper));
        w.write_record([
            s.patient.id.as_str(),
            s.analyte.as_str(),
            framework.as_str(),
            &eval::fmt_opt(lo),
            &eval::fmt_opt(hi),
            if valid { "1" } else { "0" },
        ])?;
    }
    w.flush()?;
    log::info!("{} series, {n_valid} valid; invalid by reason {reasons:?}", series.len());
    Ok(())
}

pub fn model_config(
    preset: &str,
    config: Option<&Path>,
    d_model: Option<usize>,
    layers: Option<usize>,
    heads: Option<usize>,
) -> Result<ModelConfig, CliError> {
    let mut cfg = match config {
        Some(p) => read_json(p)?,
        None => ModelConfig::preset(preset)?,
    };
    cfg = cfg.clone().with_dims(d_model.unwrap_or(cfg.d_model), layers.unwrap_or(cfg.n_layers), heads.unwrap_or(cfg.n_heads));
    cfg.validate()?;
    Ok(cfg)
}

pub fn train_plan(path: Option<&Path>, seed: Option<u64>, epochs: Option<usize>) -> Result<TrainPlan, CliError> {
    let mut plan: TrainPlan = match path {
        Some(p) => read_json(p)?,
        None => TrainPlan::default(),
    };
    if let Some(s) = seed {
        plan.seed = s;
    }
    if let Some(e) = epochs {
        plan.max_epochs = e;
    }
    plan.validate()?;
    Ok(plan)
}

fn pick(series: &[LabSeries], ids: &BTreeSet<String>) -> Vec<LabSeries> {
    series.iter().filter(|s| ids.contains(&s.patient.id)).cloned().collect()
}

pub fn train(data: &Path, cfg: ModelConfig, plan: TrainPlan, out: &Path, log_path: Option<&Path>) -> Result<(), CliError> {
    let table = AnalyteTable::shipped();
    let series = load_series(table, &measurements_path(data))?;
    let split = patient_split(series.iter().map(|s| s.patient.id.as_str()), plan.seed, plan.fractions);
    let (tr, va) = (pick(&series, &split.train), pick(&series, &split.val));
    log::info!(
        "patients: {} train, {} val, {} test",
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    let result = norma_core::train::train(table, &cfg, &tr, &va, &plan)?;
    if result.diverged {
        log::warn!("training diverged; keeping the last finite parameters");
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    result.checkpoint.save(out)?;
    if let Some(p) = log_path {
        let mut w = create(p)?;
        write_log(&mut w, &result.log)?;
        w.flush()?;
    }
    log::info!(
        "epochs run {}, best epoch {}, best val loss {:?}, checkpoint {} ({})",
        result.epochs_run,
        result.best_epoch,
        result.checkpoint.meta.best_val_loss,
        out.display(),
        result.checkpoint.hash()?
    );
    Ok(())
}

fn load_ckpt(path: Option<&Path>) -> Result<Option<Checkpoint>, CliError> {
    path.map(|p| {
        let c = Checkpoint::load(p)?;
        c.require_trained()?;
        Ok(c)
    })
    .transpose()
}

fn need<'a, T>(v: Option<&'a T>, what: &str, task: Task) -> Result<&'a T, CliError> {
    v.ok_or_else(|| CliError::Usage(format!("task {task:?} needs {what}")))
}

fn test_subset(series: Vec<LabSeries>, ckpt: Option<&Checkpoint>) -> Result<Vec<LabSeries>, CliError> {
    let c = ckpt.ok_or_else(|| CliError::Usage("--subset test needs --ckpt".into()))?;
    let fractions = c.meta.fractions.unwrap_or(TrainPlan::default().fractions);
    let split = patient_split(series.iter().map(|s| s.patient.id.as_str()), c.meta.seed, fractions);
    Ok(pick(&series, &split.test))
}

fn set_once(slot: &mut Option<PathBuf>, path: PathBuf, what: &str) -> Result<(), CliError> {
    if let Some(prev) = slot {
        if *prev != path {
            return Err(CliError::Usage(format!("two {what} inputs: {} and {}", prev.display(), path.display())));
        }
    }
    *slot = Some(path);
    Ok(())
}

/// Sorts `--in` paths into data, outcomes and checkpoint by content.
fn resolve_inputs(a: &mut EvalArgs) -> Result<(), CliError> {
    for p in std::mem::take(&mut a.inputs) {
        if p.is_dir() {
            set_once(&mut a.data, p.join("measurements.csv"), "measurement")?;
            let outcomes = p.join("outcomes.csv");
            if outcomes.exists() {
                set_once(&mut a.outcomes, outcomes, "outcome")?;
            }
            continue;
        }
        let mut head = Vec::new();
        std::io::Read::read_to_end(&mut std::io::Read::take(open(&p)?, 64), &mut head)?;
        if head.starts_with(CHECKPOINT_MAGIC) {
            set_once(&mut a.ckpt, p, "checkpoint")?;
        } else if head.starts_with(b"patient_id,outcome") {
            set_once(&mut a.outcomes, p, "outcome")?;
        } else {
            set_once(&mut a.data, p, "measurement")?;
        }
    }
    if let Some(d) = a.data.take() {
        a.data = Some(measurements_path(&d));
    }
    Ok(())
}

pub fn eval(mut a: EvalArgs) -> Result<(), CliError> {
    resolve_inputs(&mut a)?;
    let a = &a;
    let table = AnalyteTable::shipped();
    let ckpt = load_ckpt(a.ckpt.as_deref())?;
    let subset = a.subset.unwrap_or(if a.task == Task::Forecast { Subset::Test } else { Subset::All });

    if a.task == Task::Sweep {
        let c = need(ckpt.as_ref(), "--ckpt", a.task)?;
        let mut analytes = a.analyte.clone();
        if analytes.is_empty() {
            if let Some(d) = &a.data {
                let set: BTreeSet<String> = load_series(table, d)?.into_iter().map(|s| s.analyte).collect();
                analytes = set.into_iter().collect();
            }
        }
        if analytes.is_empty() {
            analytes.push("GLU".into());
        }
        let records = eval::sensitivity_sweep(table, c, &analytes, a.seed)?;
        let mut w = create(&a.out)?;
        eval::write_sweep(&mut w, &records)?;
        w.flush()?;
        return Ok(());
    }

    let data = need(a.data.as_ref(), "--data", a.task)?;
    let mut series = load_series(table, data)?;
    if subset == Subset::Test {
        series = test_subset(series, ckpt.as_ref())?;
    }
    log::info!("{} series in the evaluation set", series.len());
    let mut w = create(&a.out)?;

    match a.task {
        Task::Forecast => {
            let rows = pipeline::forecast_rows(table, ckpt.as_ref(), &series, a.resamples, a.seed)?;
            write_metric_rows(&mut w, &rows)?;
        }
        Task::Ii => write_metric_rows(&mut w, &pipeline::individuality_rows(&series, a.resamples, a.seed))?,
        Task::Prevalence | Task::Leadtime | Task::Deviation | Task::Confusion | Task::Cox => {
            let outcomes: OutcomeTable = match &a.outcomes {
                Some(p) => read_outcomes(open(p)?)?,
                None if matches!(a.task, Task::Deviation | Task::Confusion | Task::Cox) => {
                    return Err(CliError::Usage(format!("task {:?} needs --outcomes", a.task)));
                }
                None => OutcomeTable::new(),
            };
            let (frame, excluded) = pipeline::build_frame(&series, &outcomes, &policy(a.policy.as_deref())?)?;
            log::info!("{} index tests, {} series excluded", frame.rows.len(), excluded.len());
            let tests = pipeline::classify_frame(table, &frame, ckpt.as_ref())?;
            if let Some(p) = &a.classified {
                let mut cw = create(p)?;
                pipeline::write_classified(&mut cw, &tests)?;
                cw.flush()?;
            }
            match a.task {
                Task::Prevalence => write_metric_rows(&mut w, &pipeline::prevalence_rows(&tests)?)?,
                Task::Leadtime => write_metric_rows(&mut w, &pipeline::lead_time_rows(&tests))?,
                Task::Deviation => pipeline::write_bins(&mut w, &pipeline::deviation_rows(&tests, &a.outcome, a.raw))?,
                Task::Confusion => write_metric_rows(&mut w, &pipeline::confusion_rows(&tests, &a.outcome))?,
                Task::Cox => {
                    let results = pipeline::cox_results(&tests, &a.outcome, a.seed, a.resamples);
                    for (fw, r) in &results {
                        if let Err(e) = r {
                            log::warn!("cox {fw}: {e}");
                        }
                    }
                    pipeline::write_cox(&mut w, &results)?;
                }
                _ => unreachable!("outer match"),
            }
        }
        Task::Sweep => unreachable!("handled above"),
    }
    w.flush()?;
    Ok(())
}

pub fn serve(ckpt: Option<PathBuf>, port: Option<u16>, host: &str) -> Result<(), CliError> {
    let state = match ckpt {
        Some(p) => AppState::load(p)?,
        None => AppState::from_env()?,
    };
    let port = match port {
        Some(p) => p,
        None => norma_service::port_from_env()?,
    };
    let ip: IpAddr = host.parse().map_err(|_| CliError::Usage(format!("invalid host {host:?}")))?;
    norma_service::serve_blocking(state, SocketAddr::new(ip, port))?;
    Ok(())
}
