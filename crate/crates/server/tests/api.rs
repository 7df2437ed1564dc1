mod common;

use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::http::{header, Request, StatusCode};
use axum::Router;
use ccss_core::screening::{screen, PlanScenario, Perturbation, ScreeningCriteria};
use ccss_core::series::window_eligibility;
use ccss_server::api::{router, RolloutResponse, ScreenResponse, API_SCHEMA_VERSION, NDJSON};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

struct App {
    router: Router,
    session: Arc<ccss_server::api::ApiSession>,
}

fn app() -> App {
    let (series, _) = common::plant(3000, 31);
    let ck = common::fresh_checkpoint(&series, 2);
    let session = Arc::new(common::session(&series, ck));
    App { router: router(session.clone()), session }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Option<String>, Bytes) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let ctype = resp.headers().get(header::CONTENT_TYPE).map(|v| v.to_str().unwrap().to_string());
    (status, ctype, resp.into_body().collect().await.unwrap().to_bytes())
}

async fn call_raw(app: &Router, uri: &str, body: &str) -> (StatusCode, Value) {
    let req = Request::post(uri).header(header::CONTENT_TYPE, "application/json").body(Body::from(body.to_string())).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, serde_json::from_slice(&resp.into_body().collect().await.unwrap().to_bytes()).unwrap())
}

fn json(b: &Bytes) -> Value {
    serde_json::from_slice(b).unwrap()
}

fn first_window(app: &App) -> usize {
    app.session.catalog()[0].id
}

#[tokio::test]
async fn health_reports_versioned_status() {
    let a = app();
    let (st, _, body) = call(&a.router, "GET", "/health", None).await;
    assert_eq!(st, StatusCode::OK);
    let v = json(&body);
    assert_eq!(v["schema_version"], API_SCHEMA_VERSION);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["context_len"], common::CONTEXT);
    assert_eq!(v["variables"], json!(["nh4", "no3", "n2o"]));
}

#[tokio::test]
async fn window_listing_and_ordering() {
    let a = app();
    let (st, _, body) = call(&a.router, "GET", "/windows", None).await;
    assert_eq!(st, StatusCode::OK);
    let v = json(&body);
    let ws = v["windows"].as_array().unwrap();
    assert!(!ws.is_empty());
    for w in ws {
        assert_eq!(w["scores"].as_array().unwrap().len(), 4);
        let ranks: Vec<u64> = w["badges"].as_array().unwrap().iter().map(|b| b["rank"].as_u64().unwrap()).collect();
        assert!(ranks.windows(2).all(|r| r[0] <= r[1]));
    }
    let (_, _, body) = call(&a.router, "GET", "/windows?behavior=transient&limit=5", None).await;
    let v = json(&body);
    let scores: Vec<f64> = v["windows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|w| w["scores"].as_array().unwrap().iter().find(|s| s["behavior"] == "transient").unwrap()["score"].as_f64().unwrap())
        .collect();
    assert_eq!(scores.len(), 5);
    assert!(scores.windows(2).all(|p| p[0] >= p[1]));
    // the top-ranked transient badge sits on the highest transient score
    let all = a.session.catalog();
    let top = all.iter().find(|e| e.badges.iter().any(|b| b.behavior.label() == "transient" && b.rank == 1)).unwrap();
    assert_eq!(json(&body)["windows"][0]["id"], top.id);
    let (st, _, _) = call(&a.router, "GET", "/windows?behavior=sideways", None).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn window_detail_and_its_failures() {
    let a = app();
    let id = first_window(&a);
    let (st, _, body) = call(&a.router, "GET", &format!("/windows/{id}"), None).await;
    assert_eq!(st, StatusCode::OK);
    let v = json(&body);
    assert_eq!(v["values"].as_array().unwrap().len(), common::CONTEXT + common::HORIZON);
    assert_eq!(v["timestamps"][0].as_f64().unwrap(), a.session.series.timestamps()[id]);

    assert_eq!(call(&a.router, "GET", "/windows/abc", None).await.0, StatusCode::NOT_FOUND);
    let (st, _, body) = call(&a.router, "GET", "/windows/2999", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    assert_eq!(json(&body)["error"]["code"], "unknown_window");

    let s = &a.session.series;
    let bad = (0..s.len() - 80).find(|&i| !window_eligibility(s, i, common::CONTEXT, common::HORIZON).unwrap()).unwrap();
    let (st, _, body) = call(&a.router, "GET", &format!("/windows/{bad}"), None).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(json(&body)["schema_version"], API_SCHEMA_VERSION);
    let (st, _, _) = call(&a.router, "POST", "/rollout", Some(json!({ "window": bad }))).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn rollout_matches_library_and_echoes_plan() {
    let a = app();
    let id = first_window(&a);
    let (st, ctype, body) = call(&a.router, "POST", "/rollout", Some(json!({ "window": id }))).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(ctype.as_deref(), Some("application/json"));
    let r: RolloutResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(r.scenario.mean.len(), common::HORIZON);
    assert!(r.scenario.regimes.iter().all(|row| (row.iter().sum::<f64>() - 1.0).abs() < 1e-8));

    // same numbers as the library's what-if baseline, computed from scratch
    let sim = &a.session.sim;
    let w = ccss_core::series::Window::new(id, common::CONTEXT, common::HORIZON);
    let data = sim.prepare(&a.session.series, &w).unwrap();
    let rep = ccss_core::screening::what_if(sim, &data, &[], &[]).unwrap();
    assert_eq!(serde_json::to_string(&rep.baseline).unwrap(), serde_json::to_string(&r.scenario).unwrap());

    // the resolved plan round-trips byte for byte
    let plan = r.plan.perturbed("Setpoint +0.2", vec![Perturbation::Shift { control: "o2_setpoint".into(), delta: 0.2 }]).unwrap();
    let (_, _, body) = call(&a.router, "POST", "/rollout", Some(json!({ "window": id, "plan": plan }))).await;
    let echoed: RolloutResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(serde_json::to_string(&echoed.plan).unwrap(), serde_json::to_string(&plan).unwrap());
    assert_ne!(echoed.scenario.mean, r.scenario.mean);

    // edits give the same result as the equivalent full plan
    let edits = json!({ "window": id, "name": "Setpoint +0.2", "edits": [{ "kind": "shift", "control": "o2_setpoint", "delta": 0.2 }] });
    let (_, _, body2) = call(&a.router, "POST", "/rollout", Some(edits)).await;
    assert_eq!(body, body2);
}

#[tokio::test]
async fn malformed_requests_are_400_with_fields() {
    let a = app();
    let id = first_window(&a);
    let (_, _, body) = call(&a.router, "POST", "/rollout", Some(json!({ "window": id }))).await;
    let r: RolloutResponse = serde_json::from_slice(&body).unwrap();

    let mut short = r.plan.clone();
    short.controls[0].pop();
    let (st, _, body) = call(&a.router, "POST", "/rollout", Some(json!({ "window": id, "plan": short }))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    let v = json(&body);
    assert_eq!(v["error"]["code"], "bad_plan");
    assert!(v["error"]["message"].as_str().unwrap().contains("o2_setpoint"), "{v}");

    let mut typed = serde_json::to_value(&r.plan).unwrap();
    typed["controls"][1][3] = json!("high");
    let (st, _, body) = call(&a.router, "POST", "/rollout", Some(json!({ "window": id, "plan": typed }))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert_eq!(json(&body)["error"]["field"], "plan.controls[1][3]");

    let (st, v) = call_raw(&a.router, "/rollout", "{\"window\": 1, \"colour\": 2}").await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert!(v["error"]["message"].as_str().unwrap().contains("colour"));
    let (st, _) = call_raw(&a.router, "/rollout", "{not json").await;
    assert_eq!(st, StatusCode::BAD_REQUEST);

    let both = json!({ "window": id, "plan": r.plan, "edits": [] });
    assert_eq!(call(&a.router, "POST", "/rollout", Some(both)).await.0, StatusCode::BAD_REQUEST);
    let zero_h = json!({ "window": id, "horizon": 0 });
    assert_eq!(call(&a.router, "POST", "/rollout", Some(zero_h)).await.0, StatusCode::BAD_REQUEST);
    let unknown_ctrl = json!({ "window": id, "edits": [{ "kind": "shift", "control": "pump", "delta": 1.0 }] });
    assert_eq!(call(&a.router, "POST", "/rollout", Some(unknown_ctrl)).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn long_rollouts_stream_per_step() {
    let a = app();
    let id = first_window(&a);
    let req = json!({ "window": id, "horizon": 60 });
    let (st, ctype, body) = call(&a.router, "POST", "/rollout", Some(req.clone())).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(ctype.as_deref(), Some(NDJSON));
    let lines: Vec<Value> = std::str::from_utf8(&body).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 61);
    assert_eq!(lines[0]["schema_version"], API_SCHEMA_VERSION);
    let (_, ctype, full) = call(&a.router, "POST", "/rollout?stream=false", Some(req)).await;
    assert_eq!(ctype.as_deref(), Some("application/json"));
    let r: RolloutResponse = serde_json::from_slice(&full).unwrap();
    for t in 0..60 {
        assert_eq!(lines[t + 1]["step"], t);
        assert_eq!(lines[t + 1]["mean"], json!(r.scenario.mean[t]));
        assert_eq!(lines[t + 1]["upper"], json!(r.scenario.upper[t]));
    }
    let (_, ctype, _) = call(&a.router, "POST", "/rollout?stream=true", Some(json!({ "window": id }))).await;
    assert_eq!(ctype.as_deref(), Some(NDJSON));
}

#[tokio::test]
async fn screening_reranks_reported_criteria() {
    let a = app();
    let rows = [
        ("Smoothed setpoint", [0.176, 0.058, 0.006, 0.290]),
        ("Setpoint -0.1", [0.394, 0.083, 0.007, 0.048]),
        ("Front-load -0.2", [0.512, 0.092, 0.010, 0.033]),
        ("Valve -5", [0.666, 0.106, 0.010, 0.014]),
        ("Observed", [0.676, 0.108, 0.012, 0.000]),
        ("Valve +5", [0.690, 0.114, 0.015, 0.022]),
        ("Front-load +0.2", [0.991, 0.226, 0.019, 0.067]),
        ("Setpoint +0.1", [1.093, 0.174, 0.025, 0.100]),
    ];
    let raw: Vec<Value> = rows.iter().map(|(n, r)| json!({ "name": n, "raw": r })).collect();
    let (st, _, body) = call(&a.router, "POST", "/screen", Some(json!({ "raw": raw }))).await;
    assert_eq!(st, StatusCode::OK);
    let resp: ScreenResponse = serde_json::from_slice(&body).unwrap();
    let names: Vec<String> = rows.iter().map(|r| r.0.to_string()).collect();
    let local = screen(&names, &rows.map(|r| r.1), ScreeningCriteria::default().weights).unwrap();
    assert_eq!(resp.report, local);
    let pareto: Vec<usize> = resp.report.plans.iter().filter(|p| p.pareto).map(|p| p.rank).collect();
    assert_eq!(pareto, vec![1, 2, 3, 4, 5]);
    assert!(resp.rollouts.is_none());

    // single-criterion weights rank by mean target level
    let (_, _, body) = call(&a.router, "POST", "/screen", Some(json!({ "raw": raw, "weights": [1, 0, 0, 0] }))).await;
    let r: ScreenResponse = serde_json::from_slice(&body).unwrap();
    let order: Vec<&str> = r.report.ranked().iter().map(|p| p.name.as_str()).collect();
    assert_eq!(order, names.iter().map(String::as_str).collect::<Vec<_>>());

    let (st, _, _) = call(&a.router, "POST", "/screen", Some(json!({ "raw": raw, "weights": [-1, 0, 0, 0] }))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert_eq!(call(&a.router, "POST", "/screen", Some(json!({}))).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn screening_rolls_out_candidates() {
    let a = app();
    let id = first_window(&a);
    let (st, _, body) = call(&a.router, "POST", "/screen", Some(json!({ "window": id }))).await;
    assert_eq!(st, StatusCode::OK);
    let r: ScreenResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(r.report.plans.len(), 8);
    assert_eq!(r.rollouts.as_ref().unwrap().len(), 8);
    assert_eq!(r.window, Some(id));
    let observed: &PlanScenario = &serde_json::from_value::<RolloutResponse>(json(&call(&a.router, "POST", "/rollout", Some(json!({ "window": id }))).await.2)).unwrap().plan;
    assert_eq!(r.rollouts.as_ref().unwrap()[0].name, observed.name);
}

#[tokio::test]
async fn concurrent_identical_requests_agree() {
    let a = app();
    let id = first_window(&a);
    let req = json!({ "window": id, "edits": [{ "kind": "smooth", "control": "o2_setpoint", "width": 5 }] });
    let (x, y) = tokio::join!(
        call(&a.router, "POST", "/rollout", Some(req.clone())),
        call(&a.router, "POST", "/rollout", Some(req.clone()))
    );
    assert_eq!(x.0, StatusCode::OK);
    assert_eq!(x.2, y.2);
    assert_eq!(a.session.cached_beliefs(), 1);
    // a fresh session without a warm cache answers identically
    let b = app();
    assert_eq!(call(&b.router, "POST", "/rollout", Some(req)).await.2, x.2);
    let s1 = call(&a.router, "POST", "/screen", Some(json!({ "window": id }))).await.2;
    let s2 = call(&b.router, "POST", "/screen", Some(json!({ "window": id }))).await.2;
    assert_eq!(s1, s2);
}

#[tokio::test]
async fn numeric_failures_name_the_step() {
    let (series, _) = common::plant(3000, 31);
    let mut ck = common::fresh_checkpoint(&series, 2);
    let id = ck.params.find("emit.mu_su").unwrap();
    for x in &mut ck.params.get_mut(id).data {
        *x = f64::NAN;
    }
    let session = Arc::new(common::session(&series, ck));
    let id = session.catalog()[0].id;
    let (st, _, body) = call(&router(session), "POST", "/rollout", Some(json!({ "window": id }))).await;
    assert_eq!(st, StatusCode::INTERNAL_SERVER_ERROR);
    let v = json(&body);
    assert_eq!(v["error"]["code"], "numeric_failure");
    assert!(v["error"]["step"].is_u64(), "{v}");
}
