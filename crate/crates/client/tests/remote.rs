use std::sync::Arc;
use std::time::Duration;

use dreamlab_client::{RemoteBlackBox, RetryPolicy};
use dreamlab_core::datasets::{make_synthetic_domains, SyntheticSpec};
use dreamlab_core::modelzoo::{build_cnn, ArchConfig};
use dreamlab_core::probing::{query_black_box, LocalBlackBox, QuerySet};
use dreamlab_core::schema::{AttributeAssignment, AttributeSchema};
use dreamlab_server::{spawn, Faults};
use reqwest::StatusCode;

fn graph() -> dreamlab_core::nn::LayerGraph {
    let schema = AttributeSchema::from_json(include_str!("../../../assets/schemas/desk24.json")).unwrap();
    let arch = ArchConfig {
        first_channels: 2,
        max_channels: 4,
        fc_hidden: 8,
        dropout: 0.0,
    };
    build_cnn(&schema, &AttributeAssignment(vec![2, 0, 1]), &[1, 8, 8], 3, &arch, 9).unwrap()
}

fn queries() -> QuerySet {
    let data = make_synthetic_domains(&SyntheticSpec {
        n_domains: 2,
        classes: 3,
        n_per_class: 4,
        image_size: 8,
        style_shift: 1.0,
        seed: 2,
    })
    .unwrap();
    QuerySet::build(&data.iter().collect::<Vec<_>>(), 6, 1).unwrap()
}

fn quick(retries: usize) -> RetryPolicy {
    RetryPolicy {
        retries,
        timeout: Duration::from_secs(10),
        backoff: Duration::from_millis(5),
    }
}

#[test]
fn remote_vector_equals_local_vector() {
    let q = queries();
    let local = query_black_box(&LocalBlackBox::from_graph(graph()), &q, &q.hash).unwrap();
    let server = spawn(
        Arc::new(LocalBlackBox::from_graph(graph())),
        Faults::none(),
        "127.0.0.1:0".parse().unwrap(),
    )
    .unwrap();
    let remote = RemoteBlackBox::new(&server.url(), quick(0)).unwrap();
    let v = query_black_box(&remote, &q, &q.hash).unwrap();
    assert_eq!(v.len(), local.len());
    assert!(v.iter().zip(&local).all(|(a, b)| (a - b).abs() <= 1e-6));
}

#[test]
fn one_transient_failure_is_retried() {
    let q = queries();
    let faults = Faults::fail_next(1, StatusCode::SERVICE_UNAVAILABLE);
    let server = spawn(
        Arc::new(LocalBlackBox::from_graph(graph())),
        faults,
        "127.0.0.1:0".parse().unwrap(),
    )
    .unwrap();
    let remote = RemoteBlackBox::new(&server.url(), quick(2)).unwrap();
    assert_eq!(query_black_box(&remote, &q, &q.hash).unwrap().len(), 6 * 3);
}

#[test]
fn retries_run_out() {
    let q = queries();
    let faults = Faults::fail_next(3, StatusCode::SERVICE_UNAVAILABLE);
    let server = spawn(
        Arc::new(LocalBlackBox::from_graph(graph())),
        faults,
        "127.0.0.1:0".parse().unwrap(),
    )
    .unwrap();
    let remote = RemoteBlackBox::new(&server.url(), quick(2)).unwrap();
    let err = query_black_box(&remote, &q, &q.hash).unwrap_err().to_string();
    assert!(err.contains("3 attempts"), "{err}");
}

#[test]
fn client_errors_are_not_retried() {
    let q = queries();
    let faults = Faults::fail_next(1, StatusCode::FORBIDDEN);
    let server = spawn(
        Arc::new(LocalBlackBox::from_graph(graph())),
        faults,
        "127.0.0.1:0".parse().unwrap(),
    )
    .unwrap();
    let remote = RemoteBlackBox::new(&server.url(), quick(2)).unwrap();
    assert!(query_black_box(&remote, &q, &q.hash)
        .unwrap_err()
        .to_string()
        .contains("403"));
}

#[test]
fn unreachable_server_fails_after_retries() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    let remote = RemoteBlackBox::new(&url, quick(1)).unwrap();
    assert!(query_black_box(&remote, &queries(), &queries().hash).is_err());
    assert!(RemoteBlackBox::new("ftp://x", quick(0)).is_err());
}
