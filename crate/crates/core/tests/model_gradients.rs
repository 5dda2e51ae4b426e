use std::time::Instant;

use chrono::{Duration, TimeZone, Utc};
use norma_core::analytes::{AnalyteTable, Sex};
use norma_core::cohort::{LabSeries, Measurement, Patient};
use norma_core::model::{
    build_tokens, forward_tape, gaussian_nll_tape, pinball_loss_tape, Bound, HeadKind, ModelConfig, ModelError,
    ParamStore, TokenSequence,
};
use norma_core::ri::LabState;
use norma_core::tensor::{gradient_check, TensorError};

fn series(values: &[f64]) -> LabSeries {
    let t0 = Utc.with_ymd_and_hms(2015, 3, 1, 9, 0, 0).unwrap();
    let ms = values
        .iter()
        .enumerate()
        .map(|(i, &v)| Measurement {
            time: t0 + Duration::days(37 * i as i64 + (i * i) as i64),
            value: v,
            analyte: "GLU".into(),
        })
        .collect();
    let p = Patient {
        id: "g".into(),
        sex: Sex::Female,
        age: 63.0,
    };
    LabSeries::new(p, "GLU", ms)
}

fn tiny(mut cfg: ModelConfig) -> ModelConfig {
    cfg = cfg.with_dims(4, 1, 2);
    cfg.time_channels = 3;
    cfg.mlp_ratio = 2;
    cfg.max_seq_len = 8;
    cfg
}

fn model_err(e: ModelError) -> TensorError {
    match e {
        ModelError::Tensor(t) | ModelError::NonFiniteLayer { source: t, .. } => t,
        other => panic!("{other}"),
    }
}

fn check(cfg: &ModelConfig, tokens: &TokenSequence, target: f64) -> f64 {
    let table = AnalyteTable::shipped();
    let store = ParamStore::init(cfg, table.len(), 5).unwrap();
    let inputs: Vec<_> = store.tensors().to_vec();
    let report = gradient_check(
        |tape, vars| {
            let b = Bound::from_vars(&store, vars.to_vec()).map_err(model_err)?;
            let out = forward_tape(tape, &b, cfg, tokens).map_err(model_err)?;
            match cfg.head {
                HeadKind::Gaussian => gaussian_nll_tape(tape, out, target),
                HeadKind::Quantile => pinball_loss_tape(tape, out, target, &cfg.quantile_levels),
            }
        },
        &inputs,
        1e-6,
        |_, _, _| false,
    )
    .unwrap();
    assert!(!report.entries.is_empty());
    report.max_rel_err()
}

#[test]
fn tiny_model_gradients_match_finite_differences() {
    let start = Instant::now();
    let table = AnalyteTable::shipped();
    let s = series(&[88.0, 95.0, 91.0, 102.0, 97.0]);
    for cfg in [tiny(ModelConfig::chs_default()), tiny(ModelConfig::eicu_default())] {
        let tokens = build_tokens(table, &s, LabState::Normal, 45.0, &cfg).unwrap();
        let target = tokens.denorm.normalize(99.5);
        let err = check(&cfg, &tokens, target);
        assert!(err < 1e-4, "{:?} head: max rel err {err:e}", cfg.head);
    }
    assert!(start.elapsed().as_secs_f64() < 10.0, "took {:?}", start.elapsed());
}

#[test]
fn merged_context_and_binary_states_also_check() {
    use norma_core::model::{ContextToken, StateEncoding};
    let table = AnalyteTable::shipped();
    let mut cfg = tiny(ModelConfig::eicu_default());
    cfg.context_token = ContextToken::MergedIntoFirst;
    cfg.state_encoding = StateEncoding::Binary;
    let s = series(&[150.0, 64.0, 91.0]);
    let tokens = build_tokens(table, &s, LabState::Normal, 400.0, &cfg).unwrap();
    let err = check(&cfg, &tokens, tokens.denorm.normalize(80.0));
    assert!(err < 1e-4, "max rel err {err:e}");
}
