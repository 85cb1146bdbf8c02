//! Completion-provider contract shared by the generation, reconstruction
//! and judging stages, plus an offline stub and an HTTP client.

use std::collections::HashSet;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ENV_PROVIDER_URL: &str = "FOCUSRL_PROVIDER_URL";
pub const ENV_PROVIDER_KEY: &str = "FOCUSRL_PROVIDER_KEY";
pub const ENV_PROVIDER_MODEL: &str = "FOCUSRL_PROVIDER_MODEL";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: "system".into(), content: content.into(), image_ref: None }
    }

    pub fn user(content: impl Into<String>, image_ref: Option<String>) -> Self {
        Self { role: "user".into(), content: content.into(), image_ref }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderRequest {
    /// Caller-chosen id, `<record id>#<purpose>`; echoed in the call log.
    pub id: String,
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ProviderRequest {
    /// The record id the request was made for.
    pub fn record_id(&self) -> &str {
        self.id.rsplit_once('#').map_or(&self.id, |(r, _)| r)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderResponse {
    pub text: String,
    #[serde(default)]
    pub finish_reason: String,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    /// Worth retrying: timeouts, connection resets, 429 and 5xx.
    #[error("transient provider failure: {0}")]
    Transient(String),
    #[error("provider rejected request: {0}")]
    Rejected(String),
    #[error("provider not configured: {0}")]
    NotConfigured(String),
    #[error("malformed provider response: {0}")]
    BadResponse(String),
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ProviderError::Transient(_))
    }
}

pub trait Provider: Send + Sync {
    fn complete(&self, request: &ProviderRequest) -> Result<ProviderResponse, ProviderError>;

    /// Short name for logs and reports.
    fn name(&self) -> &str;
}

impl<P: Provider + ?Sized> Provider for &P {
    fn complete(&self, request: &ProviderRequest) -> Result<ProviderResponse, ProviderError> {
        (**self).complete(request)
    }

    fn name(&self) -> &str {
        (**self).name()
    }
}

impl<P: Provider + ?Sized> Provider for Box<P> {
    fn complete(&self, request: &ProviderRequest) -> Result<ProviderResponse, ProviderError> {
        (**self).complete(request)
    }

    fn name(&self) -> &str {
        (**self).name()
    }
}

/// 64-bit FNV-1a; stable across platforms and releases, unlike `DefaultHasher`.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Offline provider: picks one of its canned responses by a hash of the
/// serialized request, so equal requests always get equal answers.
/// Requests for records listed in `fail_ids` fail without retry.
#[derive(Debug, Clone)]
pub struct StubProvider {
    responses: Vec<String>,
    fail_ids: HashSet<String>,
}

impl Default for StubProvider {
    fn default() -> Self {
        Self::new(vec![
            "<think>Read the marked value. <focus><ocr>stub value 1</ocr></focus></think><answer>1</answer>".into(),
            "<think>Compare the bars.</think><answer>2</answer>".into(),
            "PASS".into(),
        ])
    }
}

impl StubProvider {
    pub fn new(responses: Vec<String>) -> Self {
        assert!(!responses.is_empty(), "stub provider needs at least one response");
        Self { responses, fail_ids: HashSet::new() }
    }

    pub fn failing_for<I, S>(mut self, ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.fail_ids.extend(ids.into_iter().map(Into::into));
        self
    }
}

impl Provider for StubProvider {
    fn complete(&self, request: &ProviderRequest) -> Result<ProviderResponse, ProviderError> {
        if self.fail_ids.contains(request.record_id()) {
            return Err(ProviderError::Rejected(format!("injected failure for `{}`", request.id)));
        }
        let wire = serde_json::to_vec(request).map_err(|e| ProviderError::BadResponse(e.to_string()))?;
        let pick = (fnv1a(&wire) % self.responses.len() as u64) as usize;
        Ok(ProviderResponse {
            text: self.responses[pick].clone(),
            finish_reason: "stop".into(),
        })
    }

    fn name(&self) -> &str {
        "stub"
    }
}

/// JSON-over-HTTP provider. POSTs the request object and expects
/// `{"text": .., "finish_reason": ..}` back.
#[derive(Debug, Clone)]
pub struct HttpProvider {
    url: String,
    key: Option<String>,
    agent: ureq::Agent,
}

impl HttpProvider {
    pub fn new(url: impl Into<String>, key: Option<String>, timeout: Duration) -> Self {
        Self {
            url: url.into(),
            key,
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }

    /// Endpoint and credential from `FOCUSRL_PROVIDER_URL` /
    /// `FOCUSRL_PROVIDER_KEY`.
    pub fn from_env(timeout: Duration) -> Result<Self, ProviderError> {
        let url = std::env::var(ENV_PROVIDER_URL)
            .map_err(|_| ProviderError::NotConfigured(format!("{ENV_PROVIDER_URL} is not set")))?;
        Ok(Self::new(url, std::env::var(ENV_PROVIDER_KEY).ok(), timeout))
    }
}

impl Provider for HttpProvider {
    fn complete(&self, request: &ProviderRequest) -> Result<ProviderResponse, ProviderError> {
        let mut call = self.agent.post(&self.url).set("Content-Type", "application/json");
        if let Some(key) = &self.key {
            call = call.set("Authorization", &format!("Bearer {key}"));
        }
        match call.send_json(request) {
            Ok(resp) => resp
                .into_json::<ProviderResponse>()
                .map_err(|e| ProviderError::BadResponse(e.to_string())),
            Err(ureq::Error::Status(code, resp)) => {
                let body = resp.into_string().unwrap_or_default();
                let msg = format!("HTTP {code}: {}", body.chars().take(200).collect::<String>());
                if code == 429 || code >= 500 {
                    Err(ProviderError::Transient(msg))
                } else {
                    Err(ProviderError::Rejected(msg))
                }
            }
            Err(e) => Err(ProviderError::Transient(e.to_string())),
        }
    }

    fn name(&self) -> &str {
        "http"
    }
}

/// Retries transient failures with exponential backoff:
/// `base_delay`, `2 * base_delay`, ... between attempts.
#[derive(Debug, Clone)]
pub struct RetryingProvider<P> {
    inner: P,
    attempts: u32,
    base_delay: Duration,
}

impl<P: Provider> RetryingProvider<P> {
    pub const DEFAULT_ATTEMPTS: u32 = 3;

    pub fn new(inner: P, attempts: u32, base_delay: Duration) -> Self {
        Self { inner, attempts: attempts.max(1), base_delay }
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }
}

impl<P: Provider> Provider for RetryingProvider<P> {
    fn complete(&self, request: &ProviderRequest) -> Result<ProviderResponse, ProviderError> {
        let mut delay = self.base_delay;
        let mut attempt = 1;
        loop {
            match self.inner.complete(request) {
                Err(e) if e.is_retryable() && attempt < self.attempts => {
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn name(&self) -> &str {
        self.inner.name()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    fn request(id: &str, content: &str) -> ProviderRequest {
        ProviderRequest {
            id: id.into(),
            model: "m".into(),
            messages: vec![Message::user(content, Some("charts/1.png".into()))],
            temperature: 1.0,
            max_tokens: 64,
        }
    }

    struct Flaky {
        failures: u32,
        calls: AtomicU32,
    }

    impl Provider for Flaky {
        fn complete(&self, _: &ProviderRequest) -> Result<ProviderResponse, ProviderError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.failures {
                Err(ProviderError::Transient("try again".into()))
            } else {
                Ok(ProviderResponse { text: "ok".into(), finish_reason: "stop".into() })
            }
        }

        fn name(&self) -> &str {
            "flaky"
        }
    }

    #[test]
    fn wire_format() {
        let v = serde_json::to_value(request("r1#gen0", "hi")).unwrap();
        assert_eq!(v["messages"][0]["role"], "user");
        assert_eq!(v["messages"][0]["image_ref"], "charts/1.png");
        assert_eq!(v["max_tokens"], 64);
        let resp: ProviderResponse = serde_json::from_str(r#"{"text":"x"}"#).unwrap();
        assert_eq!(resp.finish_reason, "");
        assert_eq!(request("a#b#gen3", "").record_id(), "a#b");
    }

    #[test]
    fn stub_is_deterministic_and_injects_faults() {
        let stub = StubProvider::new(vec!["a".into(), "b".into(), "c".into()]).failing_for(["bad"]);
        let r = request("ok#gen0", "question");
        assert_eq!(stub.complete(&r).unwrap(), stub.complete(&r).unwrap());
        let picks: HashSet<_> = (0..30)
            .map(|i| stub.complete(&request(&format!("ok#gen{i}"), "q")).unwrap().text)
            .collect();
        assert!(picks.len() > 1);
        assert!(matches!(stub.complete(&request("bad#gen0", "q")), Err(ProviderError::Rejected(_))));
    }

    #[test]
    fn retries_transient_errors_only() {
        let p = RetryingProvider::new(Flaky { failures: 2, calls: AtomicU32::new(0) }, 3, Duration::ZERO);
        assert_eq!(p.complete(&request("x", "")).unwrap().text, "ok");
        assert_eq!(p.inner().calls.load(Ordering::SeqCst), 3);

        let p = RetryingProvider::new(Flaky { failures: 3, calls: AtomicU32::new(0) }, 3, Duration::ZERO);
        assert!(p.complete(&request("x", "")).is_err());
        assert_eq!(p.inner().calls.load(Ordering::SeqCst), 3);

        let stub = RetryingProvider::new(StubProvider::default().failing_for(["x"]), 3, Duration::from_secs(60));
        // rejected requests come back at once
        assert!(stub.complete(&request("x#j", "")).is_err());
    }

    #[test]
    fn http_provider_reports_connection_failures() {
        let p = HttpProvider::new("http://127.0.0.1:9/", None, Duration::from_millis(200));
        assert!(p.complete(&request("x", "")).unwrap_err().is_retryable());
    }
}
