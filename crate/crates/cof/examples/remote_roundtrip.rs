//! Drive the pipeline through the HTTP protocol: spawn the bundled test
//! server (toy model behind the wire format), point the remote backend at
//! it, and run the two-stage procedure — including a retry storm and the
//! capability error for mask rejection.
//!
//! ```bash
//! cargo run --example remote_roundtrip
//! ```

use std::time::Duration;

use cof::config::CofConfig;
use cof::geometry::PatchGrid;
use cof::harness::generate_suite;
use cof::pipeline::{run_cof, ImageInput, PipelineOptions, RunVariant, SYNTHETIC_PIXEL_DIMS};
use cof::remote::testing::TestServer;
use cof::remote::{remote_backend_call, RemoteBackend, RemoteRequest, RequestMode, RetryPolicy};

fn main() {
    let task = generate_suite(7, 1, PatchGrid::new(4, 4).unwrap(), 3)
        .unwrap()
        .remove(0);

    // The server resolves images by id from its registry; fail_next injects
    // two 500s so the client's backoff path is visible.
    let server = TestServer::builder()
        .register_image(&task.task_id, task.image.clone())
        .fail_next(2)
        .spawn()
        .unwrap();
    println!("test server listening on {}", server.url());

    let policy = RetryPolicy {
        max_attempts: 3,
        initial_backoff: Duration::from_millis(50),
    };
    let agent = ureq::AgentBuilder::new()
        .timeout(Duration::from_secs(5))
        .build();
    let reply = remote_backend_call(
        &agent,
        server.url(),
        &RemoteRequest {
            mode: RequestMode::Ground,
            prompt: task.question.clone(),
            image_id: task.task_id.clone(),
            mask: None,
            lambda: None,
        },
        &policy,
    )
    .unwrap();
    println!(
        "grounding reply after {} retries: {}",
        reply.retries, reply.text
    );

    // Full two-stage run through the Backend trait.
    let backend = RemoteBackend::new(server.url(), Duration::from_secs(5)).with_policy(policy);
    let image = ImageInput::Remote {
        image_id: task.task_id.clone(),
        grid: *task.image.grid(),
        width: SYNTHETIC_PIXEL_DIMS.0,
        height: SYNTHETIC_PIXEL_DIMS.1,
    };
    let config = CofConfig {
        alpha: 1.0,
        lambda: 4.5,
        ..CofConfig::preset_13b()
    };
    let outcome = run_cof(
        &backend,
        &image,
        &task.question,
        &config,
        &PipelineOptions::default(),
    )
    .unwrap();
    assert_eq!(outcome.variant, RunVariant::Cof);
    println!(
        "two-stage answer over HTTP: {:?} (gold {:?}, mask {}/16 patches)",
        outcome.answer,
        task.gold_answer,
        outcome.mask_cardinality.unwrap()
    );
    drop(server);

    // A server without masked-generation support answers 422; the client
    // surfaces it as a capability error without retrying.
    let strict = TestServer::builder()
        .register_image(&task.task_id, task.image.clone())
        .reject_mask(true)
        .spawn()
        .unwrap();
    let backend = RemoteBackend::new(strict.url(), Duration::from_secs(5));
    let err = run_cof(
        &backend,
        &image,
        &task.question,
        &config,
        &PipelineOptions::default(),
    )
    .unwrap_err();
    println!("mask-rejecting server: {err}");
}
