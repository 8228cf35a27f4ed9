use std::sync::OnceLock;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tower::ServiceExt;

use evisurro_core::conformal::{build_table, calibrate, CalibrationOptions, CalibrationTable, MiscoverageLevel};
use evisurro_core::data::{generate_dataset, SimulatorSpec};
use evisurro_core::network::NetConfig;
use evisurro_core::predict::{predict, raw_intervals};
use evisurro_core::training::{fit, Checkpoint, TrainConfig};
use evisurro_server::{compute_interval, router, AppState, IntervalRequest, ModelBundle};

struct Fixture {
    ckpt: Checkpoint,
    table: CalibrationTable,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let spec = SimulatorSpec {
            grid_shape: vec![16, 16],
            ..SimulatorSpec::default()
        };
        let ds = generate_dataset(&spec, 24, 19, 0, 5, None).unwrap();
        let net = NetConfig {
            input_dim: 3,
            hidden_sizes: vec![16],
            grid_shape: vec![16, 16],
            seed: 2,
        };
        let ckpt = fit(
            &ds,
            net,
            TrainConfig {
                epochs: 20,
                batch_size: 8,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let table = build_table(&ckpt, &ds, 0.1, CalibrationOptions::default()).unwrap();
        Fixture { ckpt, table }
    })
}

fn app(with_table: bool) -> Router {
    let f = fixture();
    let table = with_table.then(|| f.table.clone());
    let bundle = ModelBundle::new(f.ckpt.clone(), table).unwrap();
    router(AppState::loaded(bundle), Some("*")).unwrap()
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or(Body::empty(), |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, bytes.to_vec())
}

fn as_json(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

#[tokio::test]
async fn meta_lists_parameters_and_attainable_bound() {
    let (status, body) = call(&app(true), "GET", "/meta", None).await;
    assert_eq!(status, StatusCode::OK);
    let v = as_json(&body);
    assert_eq!(v["params"].as_array().unwrap().len(), 3);
    assert_eq!(v["grid_shape"], json!([16, 16]));
    assert_eq!(v["calibration_size"], json!(19));
    assert_eq!(v["has_calibration"], json!(true));
    assert_eq!(v["max_attainable_confidence"].as_f64().unwrap(), 0.9);
}

#[tokio::test]
async fn meta_without_table_has_null_calibration_fields() {
    let (status, body) = call(&app(false), "GET", "/meta", None).await;
    assert_eq!(status, StatusCode::OK);
    let v = as_json(&body);
    assert_eq!(v["has_calibration"], json!(false));
    assert!(v["calibration_size"].is_null());
    assert!(v["max_attainable_confidence"].is_null());
}

#[tokio::test]
async fn unknown_route_is_404() {
    let (status, _) = call(&app(true), "GET", "/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn endpoints_answer_503_before_load() {
    let app = router(AppState::new(), None).unwrap();
    let (s, _) = call(&app, "GET", "/meta", None).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    let (s, _) = call(&app, "POST", "/predict", Some(json!({"params": [0.5, 0.5, 0.5]}))).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn predict_returns_three_grids_in_original_units() {
    let (status, body) = call(&app(true), "POST", "/predict", Some(json!({"params": [0.2, 0.4, 0.6]}))).await;
    assert_eq!(status, StatusCode::OK);
    let v = as_json(&body);
    let expected = predict(&fixture().ckpt, &[0.2, 0.4, 0.6]).unwrap();
    assert_eq!(floats(&v["mean"]), expected.mean);
    assert_eq!(floats(&v["aleatoric"]), expected.aleatoric);
    assert_eq!(floats(&v["epistemic"]), expected.epistemic);
    assert_eq!(v["grid_shape"], json!([16, 16]));
}

#[tokio::test]
async fn predict_accepts_range_boundaries() {
    let (status, _) = call(&app(true), "POST", "/predict", Some(json!({"params": [0.0, 1.0, 0.0]}))).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn predict_validation_errors_are_422() {
    let app = app(true);
    let (s, body) = call(&app, "POST", "/predict", Some(json!({"params": [0.1, 0.2]}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(as_json(&body)["error"].as_str().unwrap().contains("expected 3"));

    let (s, body) = call(&app, "POST", "/predict", Some(json!({"params": [0.1, 1.5, -2.0]}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let details = as_json(&body)["details"].as_array().unwrap().clone();
    let fields: Vec<&str> = details.iter().map(|d| d["field"].as_str().unwrap()).collect();
    assert_eq!(fields, ["params[1]", "params[2]"]);

    let (s, _) = call(&app, "POST", "/predict", Some(json!({"nope": 1}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn raw_interval_is_symmetric_about_the_mean() {
    let body = json!({"params": [0.3, 0.3, 0.9], "level": 0.95, "calibrated": false});
    let (s, bytes) = call(&app(true), "POST", "/interval", Some(body)).await;
    assert_eq!(s, StatusCode::OK);
    let v = as_json(&bytes);
    let (lo, hi, width) = (floats(&v["lo"]), floats(&v["hi"]), floats(&v["width"]));
    let mean = predict(&fixture().ckpt, &[0.3, 0.3, 0.9]).unwrap().mean;
    for i in 0..lo.len() {
        assert!(((lo[i] + hi[i]) / 2.0 - mean[i]).abs() < 1e-9 * (1.0 + mean[i].abs()));
        assert_eq!(width[i], hi[i] - lo[i]);
    }
    assert!(v["achieved_level_bound"].is_null());
}

#[tokio::test]
async fn calibrated_without_table_is_409() {
    let body = json!({"params": [0.3, 0.3, 0.3], "level": 0.8, "calibrated": true});
    let (s, _) = call(&app(false), "POST", "/interval", Some(body)).await;
    assert_eq!(s, StatusCode::CONFLICT);
}

#[tokio::test]
async fn unattainable_level_is_422_with_bound() {
    // n = 19 supports confidence up to 1 - 2/20 = 0.9.
    let body = json!({"params": [0.3, 0.3, 0.3], "level": 0.95, "calibrated": true});
    let (s, bytes) = call(&app(true), "POST", "/interval", Some(body)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(as_json(&bytes)["error"]
        .as_str()
        .unwrap()
        .contains("max attainable confidence is 0.9"));

    let ok = json!({"params": [0.3, 0.3, 0.3], "level": 0.9, "calibrated": true});
    let (s, _) = call(&app(true), "POST", "/interval", Some(ok)).await;
    assert_eq!(s, StatusCode::OK);

    for level in [0.0, 1.0, -0.5] {
        let bad = json!({"params": [0.3, 0.3, 0.3], "level": level, "calibrated": false});
        let (s, _) = call(&app(true), "POST", "/interval", Some(bad)).await;
        assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    }
}

#[tokio::test]
async fn calibrated_interval_matches_offline_recomputation_bit_exactly() {
    let params = [0.7, 0.1, 0.5];
    let body = json!({"params": params, "level": 0.9, "calibrated": true});
    let (s, bytes) = call(&app(true), "POST", "/interval", Some(body)).await;
    assert_eq!(s, StatusCode::OK);
    let v = as_json(&bytes);

    let f = fixture();
    let field = f.ckpt.forward(&params).unwrap();
    let raw = raw_intervals(&field, &f.ckpt.transform, f.table.delta()).unwrap();
    let level = MiscoverageLevel::new(1.0 - 0.9).unwrap();
    let q = f.table.quantiles(level);
    let (lo, hi) = (floats(&v["lo"]), floats(&v["hi"]));
    for (i, r) in raw.iter().enumerate() {
        let (ql, qh) = q.at(i);
        let c = calibrate(r, ql, qh, level);
        assert_eq!(lo[i], c.lo, "element {i}");
        assert_eq!(hi[i], c.hi, "element {i}");
    }
    let bound = &v["achieved_level_bound"];
    assert_eq!(bound["guaranteed"].as_f64().unwrap(), 1.0 - (1.0 - 0.9));
    assert!(bound["upper"].as_f64().unwrap() > 0.9);
}

#[tokio::test]
async fn responses_are_deterministic() {
    let app = app(true);
    let body = json!({"params": [0.25, 0.5, 0.75], "level": 0.8, "calibrated": true});
    let (_, a) = call(&app, "POST", "/interval", Some(body.clone())).await;
    let (_, b) = call(&app, "POST", "/interval", Some(body)).await;
    assert_eq!(a, b);

    let direct = compute_interval(
        &ModelBundle::new(fixture().ckpt.clone(), Some(fixture().table.clone())).unwrap(),
        &IntervalRequest {
            params: vec![0.25, 0.5, 0.75],
            level: 0.8,
            calibrated: true,
        },
    )
    .unwrap();
    assert_eq!(floats(&as_json(&a)["hi"]), direct.field.hi);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_identical_requests_agree() {
    let app = app(true);
    let body = json!({"params": [0.6, 0.6, 0.1], "level": 0.85, "calibrated": true});
    let handles: Vec<_> = (0..16)
        .map(|_| {
            let app = app.clone();
            let body = body.clone();
            tokio::spawn(async move { call(&app, "POST", "/interval", Some(body)).await })
        })
        .collect();
    let mut outs = Vec::new();
    for h in handles {
        outs.push(h.await.unwrap());
    }
    assert!(outs.iter().all(|(s, _)| *s == StatusCode::OK));
    assert!(outs.windows(2).all(|w| w[0].1 == w[1].1));
}

#[tokio::test]
async fn cors_header_is_sent_when_enabled() {
    let req = Request::builder()
        .method("GET")
        .uri("/meta")
        .header("origin", "http://localhost:5173")
        .body(Body::empty())
        .unwrap();
    let resp = app(true).oneshot(req).await.unwrap();
    assert_eq!(resp.headers()["access-control-allow-origin"], "*");
}
