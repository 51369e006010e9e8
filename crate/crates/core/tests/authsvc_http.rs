use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use biotouch::authsvc::{router, AuthService, ServiceConfig, TemplateStore, VerifyScorer};
use biotouch::capture::Dataset;
use biotouch::synth::{generate, SynthConfig};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn app(dir: &std::path::Path, threshold: f64) -> axum::Router {
    let svc = AuthService::new(TemplateStore::open(dir).unwrap(), VerifyScorer::default(), threshold);
    router(Arc::new(svc))
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(match body {
            Some(b) => Body::from(b.to_string()),
            None => Body::empty(),
        })
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::String(String::from_utf8_lossy(&bytes).into()));
    (status, value)
}

fn points(ds: &Dataset, user: &str, digit: u8, session: u8, rep: u8) -> Value {
    serde_json::to_value(ds.sample(user, digit, session, rep).unwrap().points()).unwrap()
}

fn corpus() -> Dataset {
    generate(&SynthConfig::new(3, 31))
}

/// Thirty single-drawing enrolment calls, three per digit.
async fn enroll_user(app: &axum::Router, ds: &Dataset, user: &str) {
    for digit in 0..10u8 {
        for rep in 1..=3u8 {
            let (status, body) = call(
                app,
                "POST",
                "/enroll",
                Some(json!({ "user": user, "digit": digit, "points": points(ds, user, digit, 1, rep) })),
            )
            .await;
            assert_eq!(status, StatusCode::OK, "{body}");
            assert_eq!(body["samples"], rep as u64);
        }
    }
}

#[tokio::test]
async fn enrolment_flow_takes_thirty_calls() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), 0.5);
    let ds = corpus();
    enroll_user(&app, &ds, "w000").await;
    let (status, body) = call(&app, "GET", "/users/w000", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["total_samples"], 30);
    assert_eq!(body["digits"].as_object().unwrap().len(), 10);
    assert_eq!(body["digits"]["7"], 3);
}

#[tokio::test]
async fn enrolment_errors_map_to_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), 0.5);
    let ds = corpus();
    let p = points(&ds, "w000", 1, 1, 1);
    for rep in 1..=4 {
        let (s, _) = call(&app, "POST", "/enroll", Some(json!({"user": "a", "digit": 1, "points": points(&ds, "w000", 1, 1, rep)}))).await;
        assert_eq!(s, StatusCode::OK);
    }
    let (s, body) = call(&app, "POST", "/enroll", Some(json!({"user": "a", "digit": 1, "points": p}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"], "too_many_samples");

    let (s, body) = call(&app, "POST", "/enroll", Some(json!({"user": "a", "digit": 1, "points": p, "replace": true}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body["samples"], 1);

    let five = json!([p, p, p, p, p]);
    let (s, body) = call(&app, "POST", "/enroll", Some(json!({"user": "a", "digit": 2, "samples": five}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"], "too_many_samples");

    let (s, body) = call(&app, "POST", "/enroll", Some(json!({"user": "a", "digit": 2, "samples": [p, p]}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body["samples"], 2);

    let short = json!([{"x": 0, "y": 0, "t": 0}, {"x": 1, "y": 1, "t": 5}]);
    let (s, body) = call(&app, "POST", "/enroll", Some(json!({"user": "a", "digit": 3, "points": short}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"], "invalid_sample");

    let (s, body) = call(&app, "POST", "/enroll", Some(json!({"user": "../x", "digit": 3, "points": p}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"], "invalid_user_id");

    let (s, _) = call(&app, "POST", "/enroll", Some(json!({"user": "a", "digit": 3}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let (s, _) = call(&app, "GET", "/users/nobody", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn password_endpoint() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), 0.5);
    let ds = corpus();
    let (s, _) = call(&app, "POST", "/password", Some(json!({"user": "w000", "policy": "pin"}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let p = points(&ds, "w000", 1, 1, 1);
    call(&app, "POST", "/enroll", Some(json!({"user": "w000", "digit": 1, "points": p}))).await;

    let (s, body) = call(&app, "POST", "/password", Some(json!({"user": "w000", "policy": "otp", "seed": 3}))).await;
    assert_eq!(s, StatusCode::OK, "{body}");
    assert_eq!(body["candidates"], 5040);
    assert_eq!(body["password"].as_array().unwrap().len(), 7);
    let again = call(&app, "POST", "/password", Some(json!({"user": "w000", "policy": "otp", "seed": 3}))).await.1;
    assert_eq!(body["password"], again["password"]);

    let (s, body) = call(&app, "POST", "/password", Some(json!({"user": "w000", "policy": "pin", "password": [1, 1, 9, 0]}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body["candidates"], 10_000);
    assert_eq!(body["user_chosen"], true);

    let (s, _) = call(&app, "POST", "/password", Some(json!({"user": "w000", "policy": "pin", "password": [1, 2]}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = call(&app, "POST", "/password", Some(json!({"user": "w000", "policy": "otp", "password": [1, 2, 3, 4, 5, 8, 9]}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let custom = json!({"kind": "otp", "length": 2, "allowed_digits": [5], "allow_repetition": false});
    let (s, body) = call(&app, "POST", "/password", Some(json!({"user": "w000", "policy": custom}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"], "empty_candidate_set");
}

#[tokio::test]
async fn verify_endpoint() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), 0.55);
    let ds = corpus();
    enroll_user(&app, &ds, "w000").await;
    let password = [3u8, 1, 4, 1];

    // Replaying enrolment drawings matches the templates exactly.
    let replay: Vec<Value> = password.iter().map(|&d| json!({"digit": d, "points": points(&ds, "w000", d, 1, 1)})).collect();
    let (s, body) = call(&app, "POST", "/verify", Some(json!({"user": "w000", "expected": password, "attempts": replay}))).await;
    assert_eq!(s, StatusCode::OK, "{body}");
    assert_eq!(body["stage1_ok"], true);
    assert_eq!(body["accepted"], true);
    assert_eq!(body["threshold_used"], 0.55);
    assert!(body["stage2_score"].as_f64().unwrap() > 0.55);

    // Bare point arrays take their label from the password.
    let bare: Vec<Value> = password.iter().map(|&d| points(&ds, "w000", d, 2, 1)).collect();
    let (s, body) = call(&app, "POST", "/verify", Some(json!({"user": "w000", "expected": password, "attempts": bare}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body["stage1_ok"], true);

    let mut wrong = replay.clone();
    wrong[2]["digit"] = json!(5);
    let (_, body) = call(&app, "POST", "/verify", Some(json!({"user": "w000", "expected": password, "attempts": wrong}))).await;
    assert_eq!(body["stage1_ok"], false);
    assert_eq!(body["accepted"], false);

    let (s, body) = call(&app, "POST", "/verify", Some(json!({"user": "w000", "expected": password, "attempts": &replay[..2]}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"], "length_mismatch");

    let (s, body) = call(&app, "POST", "/verify", Some(json!({"user": "w001", "expected": [1], "attempts": [points(&ds, "w001", 1, 2, 1)]}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(body["error"], "unknown_user");
}

#[tokio::test]
async fn service_from_config_serves_requests() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ServiceConfig::from_toml_str(&format!(
        "data_dir = {:?}\nscorer = \"dtw-adapted\"\nthreshold = 0.4\n",
        dir.path().join("store")
    ))
    .unwrap();
    cfg.apply_env([("BTP_OTP_LENGTH", "3")]).unwrap();
    let svc = cfg.build_service().unwrap();
    assert_eq!(svc.default_threshold(), 0.4);
    let app = router(Arc::new(svc));
    let ds = corpus();
    call(&app, "POST", "/enroll", Some(json!({"user": "w002", "digit": 0, "points": points(&ds, "w002", 0, 1, 1)}))).await;
    let (s, body) = call(&app, "POST", "/password", Some(json!({"user": "w002", "policy": "otp"}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body["password"].as_array().unwrap().len(), 3);
    assert_eq!(body["candidates"], 7 * 6 * 5);
}
