use mirage_client::{Client, ClientError};
use mirage_core::harness::{ExperimentConfig, FrequencySetting};

async fn spawn() -> Client {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(mirage_service::serve(listener));
    Client::new(format!("http://{addr}/"))
}

fn disk() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset("disk").unwrap();
    cfg.gallery.modes = 1;
    cfg
}

#[tokio::test]
async fn health_and_modes_roundtrip() {
    let client = spawn().await;
    client.health().await.unwrap();
    let report = client.modes(&disk()).await.unwrap();
    assert_eq!(report.omega, 1.5e15);
    assert_eq!(report.provenance.config_hash, disk().hash());
    let local = mirage_core::harness::run_modes(&disk()).unwrap();
    assert_eq!(report.resonances.entries.len(), local.resonances.entries.len());
    for (a, b) in report.resonances.entries.iter().zip(&local.resonances.entries) {
        assert_eq!(a.mode, b.mode);
        assert!((a.omega - b.omega).abs() <= 1e-12 * b.omega);
    }
}

#[tokio::test]
async fn service_errors_carry_the_error_body() {
    let client = spawn().await;
    let mut cfg = disk();
    cfg.source.omega = FrequencySetting::Label("resonance:x".into());
    match client.mirage(&cfg).await {
        Err(ClientError::Service { status, body }) => {
            assert_eq!(status, 400);
            assert_eq!(body.error.kind, "config");
        }
        other => panic!("expected a service error, got {other:?}"),
    }
}

#[tokio::test]
async fn unreachable_service_is_a_transport_error() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let err = Client::new(format!("http://{addr}")).health().await.unwrap_err();
    assert!(matches!(err, ClientError::Transport(_)));
    assert_eq!(err.body().error.kind, "transport");
}

#[tokio::test]
async fn forward_then_image_through_the_service() {
    let client = spawn().await;
    let cfg = ExperimentConfig::preset("diamond").unwrap();
    let data = client.forward(&cfg).await.unwrap();
    assert_eq!(data.samples.len(), cfg.discretization.sensors);
    let img = client.image(&cfg, &data).await.unwrap();
    let local = mirage_core::harness::run_image(&cfg, &data).unwrap();
    assert_eq!(img.argmax(), local.argmax());
}
