use std::sync::OnceLock;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use serde_json::{json, Value};
use tower::ServiceExt;

use norma_core::analytes::AnalyteTable;
use norma_core::cohort::{LabSeries, Measurement, Patient};
use norma_core::model::{predict, Checkpoint, ModelConfig};
use norma_core::ri::{perri_seed, select_perri_values, Flag};
use norma_core::synth::{generate, CohortSpec};
use norma_core::train::{train, TrainPlan};
use norma_service::api::{InterpretResponse, ANONYMOUS_PATIENT};
use norma_service::{interpret, router, AppState, ErrorBody, InterpretRequest};

/// A small quickly trained checkpoint; enough for plumbing, not accuracy.
fn checkpoint() -> &'static Checkpoint {
    static CKPT: OnceLock<Checkpoint> = OnceLock::new();
    CKPT.get_or_init(|| {
        let table = AnalyteTable::shipped();
        let spec: CohortSpec = serde_json::from_value(json!({
            "n_patients": 120, "seed": 2,
            "analytes": [{"code": "GLU", "pop_mean": 88.0, "between_sd": 6.0, "within_sd": 3.0}],
            "count": {"min": 5, "max": 12}, "spacing_days": {"min": 30, "max": 90}
        }))
        .unwrap();
        let c = generate(table, &spec).unwrap();
        let (tr, va) = c.series.split_at(100);
        let cfg = ModelConfig::eicu_default().with_dims(8, 1, 2);
        let plan = TrainPlan {
            max_epochs: 2,
            batch_size: 32,
            ..Default::default()
        };
        train(table, &cfg, tr, va, &plan).unwrap().checkpoint
    })
}

fn with_model() -> AppState {
    AppState::new(Some(checkpoint().clone()))
}

async fn call(state: AppState, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(serde_json::to_vec(&b).unwrap())))
        .unwrap();
    let resp = router(state).oneshot(req).await.unwrap();
    let status = resp.status();
    (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec())
}

fn history(values: &[f64]) -> Vec<Value> {
    values
        .iter()
        .enumerate()
        .map(|(i, v)| json!({"timestamp": format!("2021-0{}-01T08:00:00Z", i + 1), "value": v}))
        .collect()
}

fn error_code(body: &[u8]) -> String {
    serde_json::from_slice::<ErrorBody>(body).unwrap().error.code
}

#[tokio::test]
async fn analyte_table_is_served() {
    let (s, body) = call(AppState::new(None), "GET", "/v1/analytes", None).await;
    assert_eq!(s, StatusCode::OK);
    let list: Vec<Value> = serde_json::from_slice(&body).unwrap();
    assert_eq!(list.len(), 30);

    let (s, body) = call(AppState::new(None), "GET", "/v1/analytes/GLU", None).await;
    assert_eq!(s, StatusCode::OK);
    let glu: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(glu["unit"], "mg/dL");
    assert_eq!(glu["ri_male"], json!({"lower": 70.0, "upper": 99.0}));

    let (_, body) = call(AppState::new(None), "GET", "/v1/analytes/HGB", None).await;
    let hgb: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(hgb["sex_stratified"], true);
    assert_ne!(hgb["ri_female"], hgb["ri_male"]);

    let (s, body) = call(AppState::new(None), "GET", "/v1/analytes/XYZ", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(error_code(&body), "unknown_analyte");
}

#[tokio::test]
async fn per_interval_matches_the_library_fit() {
    let req = json!({
        "sex": "F", "age": 50, "analyte": "GLU",
        "history": history(&[85.0, 88.0, 90.0, 87.0, 86.0]),
        "value": {"timestamp": "2021-09-01T08:00:00Z", "value": 96.0},
        "frameworks": ["pop", "per"]
    });
    let (s, body) = call(AppState::new(None), "POST", "/v1/interpret", Some(req)).await;
    assert_eq!(s, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let r: InterpretResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(r.pop.unwrap().flag, Some(Flag::Normal));
    let want = select_perri_values(&[85.0, 88.0, 90.0, 87.0, 86.0], perri_seed(ANONYMOUS_PATIENT, "GLU")).unwrap();
    let per = r.per.unwrap();
    assert_eq!(per.interval, want.interval);
    assert_eq!(per.setpoint_valid, Some(true));
    assert_eq!(per.flag, Some(if want.interval.contains(96.0) { Flag::Normal } else { Flag::Abnormal }));
    assert!(r.norma.is_none());
}

#[tokio::test]
async fn population_abnormal_overrides_every_framework() {
    let req = json!({
        "sex": "M", "age": 61, "analyte": "GLU",
        "history": history(&[85.0, 88.0, 90.0, 87.0, 86.0, 120.0]),
        "horizon_days": 30
    });
    let (s, body) = call(with_model(), "POST", "/v1/interpret", Some(req)).await;
    assert_eq!(s, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let r: InterpretResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(r.value.unwrap().value, 120.0);
    assert_eq!(r.history.len(), 5);
    for f in [r.pop, r.per, r.norma] {
        assert_eq!(f.unwrap().flag, Some(Flag::Abnormal));
    }
}

#[tokio::test]
async fn empty_history_with_pop_only_is_valid() {
    let req = json!({"sex": "female", "age": 40, "analyte": "GLU", "frameworks": ["pop"]});
    let (s, body) = call(AppState::new(None), "POST", "/v1/interpret", Some(req)).await;
    assert_eq!(s, StatusCode::OK);
    let r: InterpretResponse = serde_json::from_slice(&body).unwrap();
    let pop = r.pop.unwrap();
    assert_eq!((pop.interval.lower, pop.interval.upper), (Some(70.0), Some(99.0)));
    assert_eq!(pop.flag, None);
    assert!(r.per.is_none() && r.norma.is_none());
}

#[tokio::test]
async fn error_statuses() {
    let base = json!({"sex": "F", "age": 50, "analyte": "GLU", "history": history(&[85.0, 88.0, 90.0])});
    let mut no_model = base.clone();
    no_model["frameworks"] = json!(["norma"]);
    let (s, body) = call(AppState::new(None), "POST", "/v1/interpret", Some(no_model)).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(error_code(&body), "no_checkpoint");

    let mut short = base.clone();
    short["frameworks"] = json!(["per"]);
    let (s, body) = call(AppState::new(None), "POST", "/v1/interpret", Some(short)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(error_code(&body), "history_too_short");

    let mut unit = base.clone();
    unit["history"][0]["unit"] = json!("furlongs");
    let (s, body) = call(AppState::new(None), "POST", "/v1/interpret", Some(unit)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(error_code(&body), "unit_unmapped");

    let (s, body) = call(AppState::new(None), "POST", "/v1/interpret", Some(json!({"sex": "F"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(error_code(&body), "invalid_request");

    let mut preset = base.clone();
    preset["frameworks"] = json!(["norma"]);
    preset["config"] = json!("chs-default");
    let (s, body) = call(with_model(), "POST", "/v1/interpret", Some(preset)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(error_code(&body), "preset_mismatch");

    let sweep = json!({"analyte": "GLU", "sex": "F", "age": 50, "history": history(&[85.0]), "horizon_days": 30, "feature": "shoe_size"});
    let (s, body) = call(with_model(), "POST", "/v1/sweep", Some(sweep)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(error_code(&body), "unknown_feature");
}

#[tokio::test]
async fn units_are_canonicalized() {
    let mg = json!({"sex": "F", "age": 50, "analyte": "GLU", "history": history(&[90.09]), "frameworks": ["pop"]});
    let mut mmol = mg.clone();
    mmol["history"][0]["value"] = json!(5.0);
    mmol["history"][0]["unit"] = json!("mmol/L");
    let (_, a) = call(AppState::new(None), "POST", "/v1/interpret", Some(mg)).await;
    let (_, b) = call(AppState::new(None), "POST", "/v1/interpret", Some(mmol)).await;
    let (a, b): (InterpretResponse, InterpretResponse) = (serde_json::from_slice(&a).unwrap(), serde_json::from_slice(&b).unwrap());
    assert!((a.value.unwrap().value - b.value.unwrap().value).abs() < 1e-9);
    assert_eq!(b.unit, "mg/dL");
}

#[tokio::test]
async fn responses_are_byte_identical_to_library_calls() {
    let table = AnalyteTable::shipped();
    let ckpt = checkpoint();
    let values = [92.0, 85.0, 97.0, 88.0, 90.0, 83.0];
    let req = json!({
        "sex": "M", "age": 47, "analyte": "GLU", "patient_id": "golden",
        "history": history(&values),
        "value": {"timestamp": "2021-08-15T08:00:00Z", "value": 94.0},
        "horizon_days": 45
    });
    let (s, body) = call(with_model(), "POST", "/v1/interpret", Some(req.clone())).await;
    assert_eq!(s, StatusCode::OK);
    let parsed: InterpretRequest = serde_json::from_value(req).unwrap();
    let direct = interpret(table, Some(ckpt), &parsed).unwrap();
    assert_eq!(body, serde_json::to_vec(&direct).unwrap());

    // the model interval is exactly the library prediction
    let patient = Patient {
        id: "golden".into(),
        sex: norma_core::analytes::Sex::Male,
        age: 47.0,
    };
    let ms = direct
        .history
        .iter()
        .map(|p| Measurement {
            time: p.timestamp,
            value: p.value,
            analyte: "GLU".into(),
        })
        .collect();
    let p = predict(table, &ckpt.params, &ckpt.config, &LabSeries::new(patient, "GLU", ms), 45.0).unwrap();
    let norma = direct.norma.unwrap();
    assert_eq!(norma.interval, p.interval);
    assert_eq!(norma.point, Some(p.point));
}

#[tokio::test]
async fn request_order_does_not_matter() {
    let a = json!({"sex": "F", "age": 30, "analyte": "GLU", "history": history(&[80.0, 84.0, 79.0, 83.0, 81.0, 86.0]), "horizon_days": 10});
    let b = json!({"sex": "M", "age": 70, "analyte": "GLU", "history": history(&[99.0, 104.0, 101.0, 97.0, 103.0, 100.0]), "horizon_days": 400});
    let first = (
        call(with_model(), "POST", "/v1/interpret", Some(a.clone())).await,
        call(with_model(), "POST", "/v1/interpret", Some(b.clone())).await,
    );
    let state = with_model();
    let b2 = call(state.clone(), "POST", "/v1/interpret", Some(b)).await;
    let a2 = call(state, "POST", "/v1/interpret", Some(a)).await;
    assert_eq!(first, (a2, b2));
}

#[tokio::test]
async fn one_point_sweep_at_the_base_has_zero_change() {
    let req = json!({
        "analyte": "GLU", "sex": "F", "age": 55,
        "history": history(&[85.0, 88.0, 90.0, 87.0]),
        "horizon_days": 30, "feature": "horizon", "grid": [30]
    });
    let (s, body) = call(with_model(), "POST", "/v1/sweep", Some(req)).await;
    assert_eq!(s, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let r: Value = serde_json::from_slice(&body).unwrap();
    let recs = r["records"].as_array().unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0]["pct_change"], json!(0.0));

    let (s, _) = call(AppState::new(None), "POST", "/v1/sweep", Some(json!({
        "analyte": "GLU", "sex": "F", "age": 55, "history": history(&[85.0]), "horizon_days": 30, "feature": "age"
    })))
    .await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
}
