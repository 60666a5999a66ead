//! In-process HTTP helpers and the blinding schema walk shared by the
//! HTTP tests and the acceptance run.

use std::collections::BTreeSet;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use base64::Engine;
use crfgan_study::http::router;
use crfgan_study::{ManualClock, StudyService};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use super::*;

pub struct Api {
    pub app: Router,
    pub clock: Arc<ManualClock>,
    /// Every identifier that would reveal an image's origin.
    pub secrets: Vec<String>,
}

pub fn api(n1: usize, n2: usize) -> Api {
    let clock = Arc::new(ManualClock::new(0));
    let lib = library(n1, n2);
    let mut secrets: Vec<String> = lib.ids().map(String::from).collect();
    secrets.extend([MODEL_A, MODEL_B, "real", "synthetic", "model", "origin", "source"].map(String::from));
    let service = Arc::new(StudyService::in_memory(Arc::new(lib), clock.clone(), 3));
    Api {
        app: router(service),
        clock,
        secrets,
    }
}

pub async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| panic!("non-JSON body: {}", String::from_utf8_lossy(&bytes)))
    };
    (status, value)
}

/// Keys a rater-facing response may carry.
pub const RATER_KEYS: &[&str] = &[
    "status",
    "pair_token",
    "position",
    "total",
    "section",
    "likert_required",
    "likert_labels",
    "view",
    "plane",
    "slice",
    "expires_at_ms",
    "left",
    "right",
    "width",
    "height",
    "png_base64",
    "answered",
    "remaining",
    "completed",
    "session_id",
    "total_pairs",
    "error",
    "code",
    "message",
];

/// Walks a rater-facing response: only whitelisted keys, and no string
/// (other than image data, which is checked to be a PNG) mentions any
/// origin identifier.
pub fn assert_blind(v: &Value, secrets: &[String], seen_keys: &mut BTreeSet<String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                assert!(RATER_KEYS.contains(&k.as_str()), "unexpected key {k:?} in {v}");
                seen_keys.insert(k.clone());
                if k == "png_base64" {
                    let bytes = base64::engine::general_purpose::STANDARD
                        .decode(child.as_str().unwrap())
                        .unwrap();
                    assert_eq!(&bytes[..8], b"\x89PNG\r\n\x1a\n");
                    assert_png_has_no_text(&bytes);
                } else {
                    assert_blind(child, secrets, seen_keys);
                }
            }
        }
        Value::Array(items) => items.iter().for_each(|c| assert_blind(c, secrets, seen_keys)),
        Value::String(s) => {
            let lower = s.to_lowercase();
            for secret in secrets {
                assert!(!lower.contains(&secret.to_lowercase()), "{secret:?} leaked in {s:?}");
            }
        }
        _ => {}
    }
}

/// Only the critical chunks IHDR, IDAT and IEND are allowed.
fn assert_png_has_no_text(png: &[u8]) {
    let mut i = 8;
    while i < png.len() {
        let len = u32::from_be_bytes(png[i..i + 4].try_into().unwrap()) as usize;
        let kind = &png[i + 4..i + 8];
        assert!(
            [b"IHDR", b"IDAT", b"IEND"].iter().any(|k| k.as_slice() == kind),
            "chunk {:?}",
            String::from_utf8_lossy(kind)
        );
        i += 12 + len;
    }
}

pub async fn create_study(api: &Api, n1: usize, n2: usize) -> String {
    let (status, body) = call(
        &api.app,
        Method::POST,
        "/v1/studies",
        Some(serde_json::to_value(definition(n1, n2)).unwrap()),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    assert_eq!(body["total_pairs"], n1 + n2);
    body["study_id"].as_str().unwrap().to_string()
}

/// Three raters complete a 10 + 30 pair study over the router. Every
/// rater-facing body is checked for provenance, wrong Likert usage is
/// refused, and the report accounts for all votes.
pub async fn full_session_walk() {
    let api = api(10, 30);
    let study = create_study(&api, 10, 30).await;
    let mut keys = BTreeSet::new();
    let mut sessions = Vec::new();
    for r in 0..3 {
        let (status, body) = call(
            &api.app,
            Method::POST,
            &format!("/v1/studies/{study}/sessions"),
            Some(json!({ "rater_id": format!("rater-{r}") })),
        )
        .await;
        assert_eq!(status, StatusCode::CREATED);
        assert_blind(&body, &api.secrets, &mut keys);
        assert_eq!(body["total_pairs"], 40);
        sessions.push(body["session_id"].as_str().unwrap().to_string());
    }
    for (r, sid) in sessions.iter().enumerate() {
        let mut screens = 0;
        loop {
            let (status, next) = call(&api.app, Method::GET, &format!("/v1/sessions/{sid}/next"), None).await;
            assert_eq!(status, StatusCode::OK);
            assert_blind(&next, &api.secrets, &mut keys);
            if next["status"] == "completed" {
                assert_eq!(next["answered"], 40);
                break;
            }
            screens += 1;
            assert_eq!(next["position"], screens);
            let section1 = next["section"] == 1;
            assert_eq!(next["likert_required"], section1);
            let token = next["pair_token"].as_str().unwrap();
            let side = if (screens + r) % 2 == 0 { "left" } else { "right" };
            // Section 1 without a rating and section 2 with one are refused.
            let wrong = if section1 {
                json!({ "pair_token": token, "side": side })
            } else {
                json!({ "pair_token": token, "side": side, "likert": 3 })
            };
            let (status, err) = call(&api.app, Method::POST, &format!("/v1/sessions/{sid}/votes"), Some(wrong)).await;
            assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
            assert_blind(&err, &api.secrets, &mut keys);
            let good = if section1 {
                json!({ "pair_token": token, "side": side, "likert": 1 + screens % 5, "latency_ms": 1500 })
            } else {
                json!({ "pair_token": token, "side": side })
            };
            let (status, ack) = call(&api.app, Method::POST, &format!("/v1/sessions/{sid}/votes"), Some(good.clone())).await;
            assert_eq!(status, StatusCode::OK, "{ack}");
            assert_blind(&ack, &api.secrets, &mut keys);
            assert_eq!(ack["answered"], screens);
            assert_eq!(ack["remaining"], 40 - screens);
            let (status, dup) = call(&api.app, Method::POST, &format!("/v1/sessions/{sid}/votes"), Some(good)).await;
            assert_eq!(status, StatusCode::CONFLICT);
            assert_blind(&dup, &api.secrets, &mut keys);
        }
        assert_eq!(screens, 40);
    }
    for k in ["pair_token", "png_base64", "likert_labels", "remaining", "error"] {
        assert!(keys.contains(k), "schema walk never saw {k}");
    }

    let (status, report) = call(&api.app, Method::GET, &format!("/v1/studies/{study}/report"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(report["sessions_completed"], 3);
    assert_eq!(report["resolved_votes"], 120);
    assert_eq!(report["section2"]["votes"], 90);
    let totals = report["section2"]["totals"].as_object().unwrap();
    assert_eq!(totals.values().map(|v| v.as_u64().unwrap()).sum::<u64>(), 90);
    let hist: u64 = report["section1"]["likert_histogram"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .sum();
    assert_eq!(hist, 30);
    assert!(report["section2"]["chi_square"]["p_value"].is_number());
}
