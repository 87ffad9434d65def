//! JSON-over-HTTP model backend.
//!
//! One POST endpoint serves both stages. Requests carry
//! `{"mode": "ground"|"generate", "prompt", "image_id", "mask"?, "lambda"?}`
//! and the server answers `{"text": ...}`. Images travel by id against a
//! server-side registry, keeping the wire format small; decode options
//! (max tokens, layer scope) are server-side configuration and do not cross
//! the wire. Transient failures (connect errors, timeouts, 5xx) are retried
//! with exponential backoff; 4xx responses are not, and a 422 maps to a
//! capability error (the server does not support masked generation).
//!
//! [`testing::TestServer`] is a bundled in-process server backed by the toy
//! model, with injectable faults for exercising the retry path.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::TokenMask;
use crate::pipeline::{Backend, BackendError, GenerateOptions, GenerateResult, ImageInput};

/// Environment variable overriding the endpoint URL.
pub const ENV_ENDPOINT: &str = "COF_ENDPOINT";
/// Environment variable overriding the request timeout (milliseconds).
pub const ENV_TIMEOUT_MS: &str = "COF_TIMEOUT_MS";
/// Request timeout when nothing else is configured.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("transport failure: {0}")]
    Io(String),
    #[error("server returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("server rejected capability: {0}")]
    CapabilityMissing(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("giving up after {attempts} attempts: {last}")]
    Exhausted {
        attempts: u32,
        #[source]
        last: Box<TransportError>,
    },
}

impl TransportError {
    /// Transient errors worth another attempt: connection trouble, timeouts,
    /// and 5xx responses.
    pub fn retryable(&self) -> bool {
        match self {
            TransportError::Timeout(_) | TransportError::Io(_) => true,
            TransportError::Http { status, .. } => *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RequestMode {
    Ground,
    Generate,
}

/// One request document. `mask` and `lambda` are omitted from the wire when
/// absent; the server treats a missing `lambda` as 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteRequest {
    pub mode: RequestMode,
    pub prompt: String,
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<TokenMask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

/// Successful reply plus how many retries it took.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemoteReply {
    pub text: String,
    pub retries: u32,
}

/// Retry schedule: up to `max_attempts` tries, sleeping `initial_backoff`
/// before the first retry and doubling after each failure.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff: Duration::from_millis(250),
        }
    }
}

/// POST `request` to `endpoint`, retrying transient failures per `policy`.
pub fn remote_backend_call(
    agent: &ureq::Agent,
    endpoint: &str,
    request: &RemoteRequest,
    policy: &RetryPolicy,
) -> Result<RemoteReply, TransportError> {
    let mut backoff = policy.initial_backoff;
    let mut attempt = 0u32;
    loop {
        attempt += 1;
        match send_once(agent, endpoint, request) {
            Ok(text) => {
                return Ok(RemoteReply {
                    text,
                    retries: attempt - 1,
                })
            }
            Err(err) if err.retryable() && attempt < policy.max_attempts => {
                log::warn!(
                    "request to {endpoint} failed on attempt {attempt} ({err}); retrying in {backoff:?}"
                );
                std::thread::sleep(backoff);
                backoff *= 2;
            }
            Err(err) if err.retryable() => {
                return Err(TransportError::Exhausted {
                    attempts: attempt,
                    last: Box::new(err),
                })
            }
            Err(err) => return Err(err),
        }
    }
}

fn send_once(
    agent: &ureq::Agent,
    endpoint: &str,
    request: &RemoteRequest,
) -> Result<String, TransportError> {
    let payload = serde_json::to_value(request)
        .map_err(|e| TransportError::Io(format!("request serialization: {e}")))?;
    let response = match agent.post(endpoint).send_json(payload) {
        Ok(response) => response,
        Err(ureq::Error::Status(status, response)) => {
            let body = response.into_string().unwrap_or_default();
            return Err(if status == 422 {
                TransportError::CapabilityMissing(body)
            } else {
                TransportError::Http { status, body }
            });
        }
        Err(ureq::Error::Transport(transport)) => {
            let message = transport.to_string();
            return Err(if message.contains("timed out") {
                TransportError::Timeout(message)
            } else {
                TransportError::Io(message)
            });
        }
    };
    let value: serde_json::Value = response
        .into_json()
        .map_err(|e| TransportError::MalformedResponse(e.to_string()))?;
    value
        .get("text")
        .and_then(|t| t.as_str())
        .map(str::to_owned)
        .ok_or_else(|| {
            TransportError::MalformedResponse(format!("missing \"text\" field in {value}"))
        })
}

/// Endpoint resolution: `COF_ENDPOINT` wins over the supplied flag value.
pub fn resolve_endpoint(flag: Option<&str>) -> Option<String> {
    std::env::var(ENV_ENDPOINT)
        .ok()
        .filter(|v| !v.is_empty())
        .or_else(|| flag.map(str::to_owned))
}

/// Timeout resolution: `COF_TIMEOUT_MS` wins over the supplied flag value.
pub fn resolve_timeout(flag_ms: Option<u64>) -> Duration {
    let from_env = std::env::var(ENV_TIMEOUT_MS)
        .ok()
        .and_then(|v| v.parse::<u64>().ok());
    Duration::from_millis(
        from_env
            .or(flag_ms)
            .unwrap_or(DEFAULT_TIMEOUT.as_millis() as u64),
    )
}

/// Backend that forwards both stages to a remote model server.
pub struct RemoteBackend {
    agent: ureq::Agent,
    endpoint: String,
    policy: RetryPolicy,
}

impl RemoteBackend {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        Self {
            agent,
            endpoint: endpoint.into(),
            policy: RetryPolicy::default(),
        }
    }

    pub fn with_policy(mut self, policy: RetryPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn image_id<'a>(&self, image: &'a ImageInput) -> Result<&'a str, BackendError> {
        match image {
            ImageInput::Remote { image_id, .. } => Ok(image_id),
            ImageInput::Synthetic(_) => Err(BackendError::InvalidInput(
                "remote backend requires images registered by id".into(),
            )),
        }
    }

    fn call(&self, request: &RemoteRequest) -> Result<String, BackendError> {
        match remote_backend_call(&self.agent, &self.endpoint, request, &self.policy) {
            Ok(reply) => Ok(reply.text),
            Err(TransportError::CapabilityMissing(detail)) => Err(BackendError::Capability {
                backend: self.name().to_string(),
                capability: format!("mask ({detail})"),
            }),
            Err(err) => Err(BackendError::Transport(err)),
        }
    }
}

impl Backend for RemoteBackend {
    fn name(&self) -> &str {
        "remote"
    }

    fn config_digest(&self) -> String {
        format!("remote-{}", self.endpoint)
    }

    fn wants_image_ids(&self) -> bool {
        true
    }

    fn ground(&self, image: &ImageInput, prompt: &str) -> Result<String, BackendError> {
        self.call(&RemoteRequest {
            mode: RequestMode::Ground,
            prompt: prompt.to_string(),
            image_id: self.image_id(image)?.to_string(),
            mask: None,
            lambda: None,
        })
    }

    fn generate(
        &self,
        image: &ImageInput,
        prompt: &str,
        _opts: &GenerateOptions,
    ) -> Result<GenerateResult, BackendError> {
        let text = self.call(&RemoteRequest {
            mode: RequestMode::Generate,
            prompt: prompt.to_string(),
            image_id: self.image_id(image)?.to_string(),
            mask: None,
            lambda: None,
        })?;
        Ok(GenerateResult {
            text,
            attention_mass: Vec::new(),
        })
    }

    fn generate_with_mask(
        &self,
        image: &ImageInput,
        prompt: &str,
        mask: &TokenMask,
        lambda: f64,
        _opts: &GenerateOptions,
    ) -> Result<GenerateResult, BackendError> {
        let text = self.call(&RemoteRequest {
            mode: RequestMode::Generate,
            prompt: prompt.to_string(),
            image_id: self.image_id(image)?.to_string(),
            mask: Some(mask.clone()),
            lambda: Some(lambda),
        })?;
        Ok(GenerateResult {
            text,
            attention_mass: Vec::new(),
        })
    }
}

pub mod testing {
    //! In-process model server for integration tests and the `remote`
    //! backend examples: serves the toy model over the wire protocol and
    //! injects faults on demand.

    use std::collections::HashMap;
    use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
    use std::sync::Arc;
    use std::thread::JoinHandle;
    use std::time::Duration;

    use super::{RemoteRequest, RequestMode};
    use crate::config::LayerScope;
    use crate::toy_model::{
        generate, toy_ground, GroundingNoise, ModelArch, ModelWeights, ReweightSpec,
        SyntheticImage, TokenSequence,
    };

    /// Builder for [`TestServer`].
    pub struct TestServerBuilder {
        weights: ModelWeights,
        noise: GroundingNoise,
        images: HashMap<String, SyntheticImage>,
        fail_next: usize,
        reject_mask: bool,
        max_tokens: usize,
    }

    impl TestServerBuilder {
        pub fn new(weights: ModelWeights) -> Self {
            Self {
                weights,
                noise: GroundingNoise::default(),
                images: HashMap::new(),
                fail_next: 0,
                reject_mask: false,
                max_tokens: 1,
            }
        }

        pub fn register_image(mut self, id: impl Into<String>, image: SyntheticImage) -> Self {
            self.images.insert(id.into(), image);
            self
        }

        /// Respond HTTP 500 to the next `n` requests.
        pub fn fail_next(mut self, n: usize) -> Self {
            self.fail_next = n;
            self
        }

        /// Respond HTTP 422 to any request carrying a mask.
        pub fn reject_mask(mut self, reject: bool) -> Self {
            self.reject_mask = reject;
            self
        }

        pub fn grounding_noise(mut self, noise: GroundingNoise) -> Self {
            self.noise = noise;
            self
        }

        pub fn max_tokens(mut self, max_tokens: usize) -> Self {
            self.max_tokens = max_tokens;
            self
        }

        pub fn spawn(self) -> std::io::Result<TestServer> {
            TestServer::start(self)
        }
    }

    /// Handle to the running server; shuts down on drop.
    pub struct TestServer {
        url: String,
        stop: Arc<AtomicBool>,
        requests_seen: Arc<AtomicUsize>,
        handle: Option<JoinHandle<()>>,
    }

    impl TestServer {
        pub fn builder() -> TestServerBuilder {
            let weights =
                ModelWeights::from_seed(42, ModelArch::default()).expect("default arch is valid");
            TestServerBuilder::new(weights)
        }

        pub fn url(&self) -> &str {
            &self.url
        }

        /// Total requests handled, including fault-injected ones.
        pub fn requests_seen(&self) -> usize {
            self.requests_seen.load(Ordering::SeqCst)
        }

        fn start(builder: TestServerBuilder) -> std::io::Result<Self> {
            let server = tiny_http::Server::http("127.0.0.1:0")
                .map_err(|e| std::io::Error::other(e.to_string()))?;
            let url = format!("http://{}", server.server_addr());
            let stop = Arc::new(AtomicBool::new(false));
            let requests_seen = Arc::new(AtomicUsize::new(0));

            let stop_thread = Arc::clone(&stop);
            let seen_thread = Arc::clone(&requests_seen);
            let handle = std::thread::spawn(move || {
                let mut remaining_failures = builder.fail_next;
                loop {
                    match server.recv_timeout(Duration::from_millis(25)) {
                        Ok(Some(request)) => {
                            seen_thread.fetch_add(1, Ordering::SeqCst);
                            handle_request(request, &builder, &mut remaining_failures);
                        }
                        Ok(None) => {
                            if stop_thread.load(Ordering::SeqCst) {
                                break;
                            }
                        }
                        Err(_) => break,
                    }
                }
            });

            Ok(Self {
                url,
                stop,
                requests_seen,
                handle: Some(handle),
            })
        }
    }

    impl Drop for TestServer {
        fn drop(&mut self) {
            self.stop.store(true, Ordering::SeqCst);
            if let Some(handle) = self.handle.take() {
                let _ = handle.join();
            }
        }
    }

    fn respond(request: tiny_http::Request, status: u16, body: String) {
        let header = tiny_http::Header::from_bytes("Content-Type", "application/json")
            .expect("static header is valid");
        let response = tiny_http::Response::from_string(body)
            .with_status_code(status)
            .with_header(header);
        let _ = request.respond(response);
    }

    fn handle_request(
        mut request: tiny_http::Request,
        builder: &TestServerBuilder,
        remaining_failures: &mut usize,
    ) {
        if *remaining_failures > 0 {
            *remaining_failures -= 1;
            respond(request, 500, r#"{"error": "injected failure"}"#.to_string());
            return;
        }

        let mut body = String::new();
        if request.as_reader().read_to_string(&mut body).is_err() {
            respond(request, 400, r#"{"error": "unreadable body"}"#.to_string());
            return;
        }
        let parsed: RemoteRequest = match serde_json::from_str(&body) {
            Ok(parsed) => parsed,
            Err(err) => {
                respond(
                    request,
                    400,
                    format!(r#"{{"error": "bad request: {err}"}}"#),
                );
                return;
            }
        };

        if parsed.mask.is_some() && builder.reject_mask {
            respond(
                request,
                422,
                r#"{"error": "mask not supported"}"#.to_string(),
            );
            return;
        }

        let Some(image) = builder.images.get(&parsed.image_id) else {
            respond(
                request,
                400,
                format!(r#"{{"error": "unknown image_id {}"}}"#, parsed.image_id),
            );
            return;
        };

        let text = match parsed.mode {
            RequestMode::Ground => toy_ground(image, &parsed.prompt, &builder.noise),
            RequestMode::Generate => {
                let sequence = match TokenSequence::build(image, &parsed.prompt, &builder.weights) {
                    Ok(sequence) => sequence,
                    Err(err) => {
                        respond(request, 400, format!(r#"{{"error": "{err}"}}"#));
                        return;
                    }
                };
                let spec = parsed.mask.map(|mask| ReweightSpec {
                    lambda: parsed.lambda.unwrap_or(1.0),
                    mask,
                    layer_scope: LayerScope::All,
                });
                match generate(
                    &sequence,
                    &builder.weights,
                    spec.as_ref(),
                    builder.max_tokens,
                    None,
                ) {
                    Ok(output) => output.text,
                    Err(err) => {
                        respond(request, 500, format!(r#"{{"error": "{err}"}}"#));
                        return;
                    }
                }
            }
        };

        let reply = serde_json::json!({ "text": text });
        respond(request, 200, reply.to_string());
    }
}
