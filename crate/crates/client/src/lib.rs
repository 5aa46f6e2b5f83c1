//! Remote black box: posts query images to a `/v1/query` endpoint and
//! returns the probability rows.

use std::time::Duration;

use dreamlab_core::probing::wire::{ErrorBody, QueryRequest, QueryResponse, QUERY_PATH};
use dreamlab_core::probing::BlackBox;
use dreamlab_core::{Error, Result};
use reqwest::blocking::Client;
use reqwest::StatusCode;

#[derive(Clone, Debug)]
pub struct RetryPolicy {
    /// Extra attempts after the first one.
    pub retries: usize,
    /// Per-request timeout.
    pub timeout: Duration,
    /// Delay before the first retry; doubles after each attempt.
    pub backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 2,
            timeout: Duration::from_secs(60),
            backoff: Duration::from_millis(100),
        }
    }
}

pub struct RemoteBlackBox {
    endpoint: String,
    client: Client,
    policy: RetryPolicy,
}

impl std::fmt::Debug for RemoteBlackBox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteBlackBox")
            .field("endpoint", &self.endpoint)
            .finish()
    }
}

fn transient(status: StatusCode) -> bool {
    matches!(
        status,
        StatusCode::TOO_MANY_REQUESTS
            | StatusCode::BAD_GATEWAY
            | StatusCode::SERVICE_UNAVAILABLE
            | StatusCode::GATEWAY_TIMEOUT
    )
}

enum Attempt {
    Done(Vec<Vec<f32>>),
    Retry(String),
    Fail(String),
}

impl RemoteBlackBox {
    /// `base_url` is the server root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base_url: &str, policy: RetryPolicy) -> Result<Self> {
        let base = base_url.trim_end_matches('/');
        if !(base.starts_with("http://") || base.starts_with("https://")) {
            return Err(Error::Config(format!(
                "black-box URL must be http(s), got {base_url:?}"
            )));
        }
        let client = Client::builder()
            .timeout(policy.timeout)
            .build()
            .map_err(|e| Error::BlackBox(format!("HTTP client: {e}")))?;
        Ok(Self {
            endpoint: format!("{base}{QUERY_PATH}"),
            client,
            policy,
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn attempt(&self, body: &QueryRequest) -> Attempt {
        let resp = match self.client.post(&self.endpoint).json(body).send() {
            Ok(r) => r,
            Err(e) if e.is_timeout() || e.is_connect() || e.is_request() => return Attempt::Retry(e.to_string()),
            Err(e) => return Attempt::Fail(e.to_string()),
        };
        let status = resp.status();
        if status.is_success() {
            return match resp.json::<QueryResponse>() {
                Ok(r) => Attempt::Done(r.probs),
                Err(e) => Attempt::Fail(format!("malformed response: {e}")),
            };
        }
        let detail = resp
            .json::<ErrorBody>()
            .map(|b| b.error)
            .unwrap_or_else(|_| status.canonical_reason().unwrap_or("").to_string());
        let msg = format!("{status}: {detail}");
        if transient(status) {
            Attempt::Retry(msg)
        } else {
            Attempt::Fail(msg)
        }
    }
}

impl BlackBox for RemoteBlackBox {
    fn query(&self, images: &[Vec<f32>], shape: [usize; 3]) -> Result<Vec<Vec<f32>>> {
        let body = QueryRequest {
            queries: images.to_vec(),
            shape,
        };
        let mut delay = self.policy.backoff;
        let mut last = String::new();
        for attempt in 0..=self.policy.retries {
            if attempt > 0 {
                tracing::warn!(attempt, endpoint = %self.endpoint, "retrying after: {last}");
                std::thread::sleep(delay);
                delay *= 2;
            }
            match self.attempt(&body) {
                Attempt::Done(probs) => return Ok(probs),
                Attempt::Retry(msg) => last = msg,
                Attempt::Fail(msg) => return Err(Error::BlackBox(format!("{}: {msg}", self.endpoint))),
            }
        }
        Err(Error::BlackBox(format!(
            "{}: gave up after {} attempts, last error {last}",
            self.endpoint,
            self.policy.retries + 1
        )))
    }
}
