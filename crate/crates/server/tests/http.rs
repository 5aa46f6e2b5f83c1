use std::sync::Arc;

use axum::http::StatusCode;
use dreamlab_core::modelzoo::{build_cnn, ArchConfig};
use dreamlab_core::probing::wire::{ErrorBody, QueryRequest, QueryResponse};
use dreamlab_core::probing::{BlackBox, LocalBlackBox};
use dreamlab_core::schema::{AttributeAssignment, AttributeSchema};
use dreamlab_server::{spawn, Faults};

fn model() -> LocalBlackBox {
    let schema = AttributeSchema::from_json(include_str!("../../../assets/schemas/desk24.json")).unwrap();
    let arch = ArchConfig {
        first_channels: 2,
        max_channels: 4,
        fc_hidden: 8,
        dropout: 0.0,
    };
    let graph = build_cnn(&schema, &AttributeAssignment(vec![0, 1, 0]), &[1, 8, 8], 3, &arch, 4).unwrap();
    LocalBlackBox::from_graph(graph)
}

fn images(n: usize) -> Vec<Vec<f32>> {
    (0..n)
        .map(|i| (0..64).map(|p| ((i * 64 + p) as f32 * 0.013).sin().abs()).collect())
        .collect()
}

fn post(url: &str, body: &serde_json::Value) -> (StatusCode, String) {
    let resp = reqwest::blocking::Client::new()
        .post(format!("{url}/v1/query"))
        .json(body)
        .send()
        .unwrap();
    (resp.status(), resp.text().unwrap())
}

#[test]
fn answers_match_the_local_model() {
    let local = model();
    let server = spawn(Arc::new(model()), Faults::none(), "127.0.0.1:0".parse().unwrap()).unwrap();
    let req = QueryRequest {
        queries: images(5),
        shape: [8, 8, 1],
    };
    let (status, text) = post(&server.url(), &serde_json::to_value(&req).unwrap());
    assert_eq!(status, StatusCode::OK);
    let resp: QueryResponse = serde_json::from_str(&text).unwrap();
    assert_eq!(resp.probs, local.query(&req.queries, req.shape).unwrap());
    for row in &resp.probs {
        assert_eq!(row.len(), 3);
        assert!((row.iter().map(|&p| p as f64).sum::<f64>() - 1.0).abs() < 1e-6);
    }
    server.shutdown().unwrap();
}

#[test]
fn bad_requests_get_400() {
    let server = spawn(Arc::new(model()), Faults::none(), "127.0.0.1:0".parse().unwrap()).unwrap();
    let wrong_len = serde_json::json!({"queries": [[0.5, 0.5]], "shape": [8, 8, 1]});
    let (status, text) = post(&server.url(), &wrong_len);
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(serde_json::from_str::<ErrorBody>(&text)
        .unwrap()
        .error
        .contains("query 0"));

    let wrong_shape = serde_json::json!({"queries": [vec![0.5; 16]], "shape": [4, 4, 1]});
    assert_eq!(post(&server.url(), &wrong_shape).0, StatusCode::BAD_REQUEST);

    let not_json = serde_json::json!({"images": []});
    assert_eq!(post(&server.url(), &not_json).0.as_u16() / 100, 4);
}

#[test]
fn injected_faults_fire_once_each() {
    let server = spawn(
        Arc::new(model()),
        Faults::fail_next(2, StatusCode::SERVICE_UNAVAILABLE),
        "127.0.0.1:0".parse().unwrap(),
    )
    .unwrap();
    let body = serde_json::to_value(QueryRequest {
        queries: images(1),
        shape: [8, 8, 1],
    })
    .unwrap();
    assert_eq!(post(&server.url(), &body).0, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(post(&server.url(), &body).0, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(post(&server.url(), &body).0, StatusCode::OK);
}
