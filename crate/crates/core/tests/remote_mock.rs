use std::time::Duration;

use sdfmesh::guidance::mock::{MockBehavior, MockMode, MockServer};
use sdfmesh::guidance::{Conditioning, GuidanceError, RemoteConfig, RemoteGuidanceClient, ScoreModel};
use sdfmesh::image::Image;
use sdfmesh::pipeline::{run_generate, Backend, PipelineConfig, RunOptions, Stage};

fn serve(mode: MockMode, delay_ms: u64, fail_first: usize) -> MockServer {
    MockServer::spawn(MockBehavior {
        mode,
        delay: Duration::from_millis(delay_ms),
        fail_first,
    })
    .unwrap()
}

fn client(server: &MockServer, timeout_ms: u64, retries: usize) -> RemoteGuidanceClient {
    RemoteGuidanceClient::new(RemoteConfig {
        endpoint: server.url(),
        timeout_ms,
        retries,
        backoff_ms: 5,
        ..RemoteConfig::default()
    })
    .unwrap()
}

fn ask(c: &RemoteGuidanceClient, w: usize, h: usize, depth: bool) -> Result<Image, GuidanceError> {
    let noisy = Image::filled(w, h, 3, 0.1);
    let d = Image::filled(w, h, 1, 2.0);
    c.predict_noise(&noisy, 0.3, &Conditioning::new("a lamp"), depth.then_some(&d))
}

#[test]
fn shapes_round_trip_with_and_without_depth() {
    let s = serve(MockMode::Zeros, 0, 0);
    let c = client(&s, 5000, 0);
    for (w, h) in [(1, 1), (9, 4), (32, 32)] {
        for depth in [false, true] {
            let eps = ask(&c, w, h, depth).unwrap();
            assert_eq!(eps.shape(), [h, w, 3]);
            assert!(eps.data.iter().all(|&v| v == 0.0));
        }
    }
    assert_eq!(s.requests(), 6);
}

#[test]
fn protocol_violations_are_typed() {
    let run = |mode| {
        let s = serve(mode, 0, 0);
        ask(&client(&s, 5000, 0), 4, 4, false)
    };
    let r = run(MockMode::WrongShape);
    assert!(matches!(r, Err(GuidanceError::Shape { expected: [4, 4, 3], got: [5, 4, 3] })), "{r:?}");
    let r = run(MockMode::Malformed);
    assert!(matches!(r, Err(GuidanceError::Malformed(_))), "{r:?}");
    let r = run(MockMode::WrongId);
    assert!(matches!(r, Err(GuidanceError::Malformed(_))), "{r:?}");
}

#[test]
fn slow_server_times_out_after_every_attempt() {
    let s = serve(MockMode::Zeros, 600, 0);
    let r = ask(&client(&s, 80, 1), 4, 4, false);
    assert!(matches!(r, Err(GuidanceError::Timeout { attempts: 2 })), "{r:?}");
}

#[test]
fn transient_failures_are_retried() {
    let s = serve(MockMode::Zeros, 0, 2);
    let c = client(&s, 5000, 3);
    assert!(ask(&c, 4, 4, false).is_ok());
    assert_eq!(c.retry_count(), 2);

    let s = serve(MockMode::Zeros, 0, 10);
    let r = ask(&client(&s, 5000, 1), 4, 4, false);
    assert!(matches!(r, Err(GuidanceError::Status { status: 503, attempts: 2 })), "{r:?}");
}

#[test]
fn pipeline_runs_its_field_stage_against_the_mock() {
    let s = serve(MockMode::Zeros, 0, 0);
    let dir = tempfile::tempdir().unwrap();
    let mut config = PipelineConfig::smoke();
    config.output = dir.path().to_path_buf();
    config.stage1.steps = 3;
    config.init.steps = 200;
    config.init.tolerance = 1.0;
    config.guidance.backend = Backend::Remote;
    config.guidance.remote.endpoint = s.url();
    let out = run_generate(&config, RunOptions { resume: false, stop_after: Some(Stage::Stage1) }).unwrap();
    assert_eq!(out.computed, vec![Stage::Init, Stage::Stage1]);
    // Conditional and unconditional query per step.
    assert_eq!(s.requests(), 6);
    assert_eq!(std::fs::read_to_string(dir.path().join("telemetry.log")).unwrap().lines().count(), 3);
}
