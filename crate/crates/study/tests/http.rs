mod common;

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::sync::Arc;

use axum::http::{Method, StatusCode};
use common::api::*;
use common::*;
use crfgan_study::{ManualClock, StudyService};
use serde_json::{json, Value};

#[tokio::test]
async fn full_session_over_http_is_blind_and_accounted() {
    full_session_walk().await;
}

#[tokio::test]
async fn error_statuses_carry_machine_readable_bodies() {
    let api = api(1, 1);
    let study = create_study(&api, 1, 1).await;
    let mut keys = BTreeSet::new();
    let cases: Vec<(Method, String, Option<Value>, StatusCode, &str)> = vec![
        (Method::GET, "/v1/sessions/none/next".into(), None, StatusCode::NOT_FOUND, "not_found"),
        (Method::GET, "/v1/studies/none/report".into(), None, StatusCode::NOT_FOUND, "not_found"),
        (
            Method::POST,
            "/v1/studies/none/sessions".into(),
            Some(json!({"rater_id": "x"})),
            StatusCode::NOT_FOUND,
            "not_found",
        ),
        (Method::GET, "/v2/anything".into(), None, StatusCode::NOT_FOUND, "not_found"),
        (
            Method::POST,
            format!("/v1/studies/{study}/sessions"),
            Some(json!({"rater": "x"})),
            StatusCode::UNPROCESSABLE_ENTITY,
            "validation",
        ),
        (
            Method::POST,
            "/v1/studies".into(),
            Some(json!({"name": "x", "section1": [], "section2": []})),
            StatusCode::UNPROCESSABLE_ENTITY,
            "validation",
        ),
    ];
    for (method, uri, body, want, code) in cases {
        let (status, v) = call(&api.app, method, &uri, body).await;
        assert_eq!(status, want, "{uri}: {v}");
        assert_eq!(v["error"]["code"], code, "{uri}");
        assert!(v["error"]["message"].is_string());
        if !uri.starts_with("/v1/studies") || uri.ends_with("sessions") {
            assert_blind(&v, &api.secrets, &mut keys);
        }
    }

    let (_, s) = call(
        &api.app,
        Method::POST,
        &format!("/v1/studies/{study}/sessions"),
        Some(json!({"rater_id": "r"})),
    )
    .await;
    let sid = s["session_id"].as_str().unwrap().to_string();
    let (status, v) = call(
        &api.app,
        Method::POST,
        &format!("/v1/studies/{study}/sessions"),
        Some(json!({"rater_id": "r"})),
    )
    .await;
    assert_eq!((status, v["error"]["code"].as_str()), (StatusCode::CONFLICT, Some("conflict")));

    let (status, v) = call(
        &api.app,
        Method::POST,
        &format!("/v1/sessions/{sid}/votes"),
        Some(json!("not an object")),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_blind(&v, &api.secrets, &mut keys);
    let (status, _) = call(
        &api.app,
        Method::POST,
        &format!("/v1/sessions/{sid}/votes"),
        Some(json!({"pair_token": "x", "side": "middle"})),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let (_, next) = call(&api.app, Method::GET, &format!("/v1/sessions/{sid}/next"), None).await;
    let token = next["pair_token"].as_str().unwrap().to_string();
    api.clock.advance(60 * 60_000);
    let (status, v) = call(&api.app, Method::GET, &format!("/v1/sessions/{sid}/next"), None).await;
    assert_eq!((status, v["error"]["code"].as_str()), (StatusCode::GONE, Some("expired")));
    let (status, v) = call(
        &api.app,
        Method::POST,
        &format!("/v1/sessions/{sid}/votes"),
        Some(json!({"pair_token": token, "side": "left", "likert": 2})),
    )
    .await;
    assert_eq!((status, v["error"]["code"].as_str()), (StatusCode::GONE, Some("expired")));
}

#[test]
fn serves_over_tcp() {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(1)
        .enable_all()
        .build()
        .unwrap();
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let addr = listener.local_addr().unwrap();
    let service = Arc::new(StudyService::in_memory(
        Arc::new(library(1, 1)),
        Arc::new(ManualClock::new(0)),
        0,
    ));
    rt.spawn(crfgan_study::http::serve(listener, service));
    let body = serde_json::to_string(&definition(1, 1)).unwrap();
    let mut stream = std::net::TcpStream::connect(addr).unwrap();
    write!(
        stream,
        "POST /v1/studies HTTP/1.1\r\nHost: test\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut resp = String::new();
    stream.read_to_string(&mut resp).unwrap();
    assert!(resp.starts_with("HTTP/1.1 201"), "{resp}");
    assert!(resp.contains("\"study_id\":\"study-0001\""), "{resp}");
}
