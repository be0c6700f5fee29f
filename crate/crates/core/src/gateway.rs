//! Client for text-completion services with deterministic scripted doubles.
//!
//! All model traffic goes through [`GatewayClient`]. Transports are
//! pluggable: [`ScriptedTransport`] replays canned responses for tests, and
//! [`HttpTransport`] speaks the common chat-completion JSON shape.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use base64::Engine as _;
use serde::{Deserialize, Serialize};

pub const ANNOTATION_TEMPERATURE: f64 = 0.7;
pub const RETARGET_TEMPERATURE: f64 = 0.2;

/// Opaque binary attachment forwarded verbatim to the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attachment {
    pub media_type: String,
    #[serde(skip)]
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout_ms: u64,
}

impl Default for CompletionParams {
    fn default() -> Self {
        CompletionParams {
            model: "default".into(),
            temperature: ANNOTATION_TEMPERATURE,
            max_tokens: 4096,
            timeout_ms: 120_000,
        }
    }
}

impl CompletionParams {
    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }
}

/// Everything a transport needs for one attempt.
#[derive(Debug, Clone)]
pub struct TransportRequest<'a> {
    pub session: u64,
    pub prompt: &'a str,
    pub attachments: &'a [Attachment],
    pub params: &'a CompletionParams,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransportError {
    #[error("transient transport failure: {0}")]
    Transient(String),
    #[error("request timed out")]
    Timeout,
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("request rejected: {0}")]
    Fatal(String),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GatewayError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("timed out after {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("request rejected: {0}")]
    Rejected(String),
    #[error("empty prompt")]
    EmptyPrompt,
}

pub trait Transport: Send + Sync {
    fn send(&self, req: &TransportRequest<'_>) -> Result<String, TransportError>;

    /// Model identifier recorded in the audit log.
    fn model_tag(&self, params: &CompletionParams) -> String {
        params.model.clone()
    }
}

type Responder = dyn Fn(&TransportRequest<'_>) -> Result<String, TransportError> + Send + Sync;

/// Deterministic transport: a queue of scripted results, a fixed response, or
/// a responder closure computing the reply from the request.
pub struct ScriptedTransport {
    queue: Mutex<VecDeque<Result<String, TransportError>>>,
    fallback: Option<Box<Responder>>,
    tag: String,
}

impl ScriptedTransport {
    pub fn queue<I>(script: I) -> Self
    where
        I: IntoIterator<Item = Result<String, TransportError>>,
    {
        ScriptedTransport { queue: Mutex::new(script.into_iter().collect()), fallback: None, tag: "scripted".into() }
    }

    /// Answers every request with the same text.
    pub fn always(text: impl Into<String>) -> Self {
        let text = text.into();
        Self::responder(move |_| Ok(text.clone()))
    }

    pub fn responder<F>(f: F) -> Self
    where
        F: Fn(&TransportRequest<'_>) -> Result<String, TransportError> + Send + Sync + 'static,
    {
        ScriptedTransport { queue: Mutex::new(VecDeque::new()), fallback: Some(Box::new(f)), tag: "scripted".into() }
    }

    /// Queued results are consumed first, then the responder (if any).
    pub fn then<F>(mut self, f: F) -> Self
    where
        F: Fn(&TransportRequest<'_>) -> Result<String, TransportError> + Send + Sync + 'static,
    {
        self.fallback = Some(Box::new(f));
        self
    }

    pub fn remaining(&self) -> usize {
        self.queue.lock().expect("script lock").len()
    }
}

impl Transport for ScriptedTransport {
    fn send(&self, req: &TransportRequest<'_>) -> Result<String, TransportError> {
        if let Some(next) = self.queue.lock().expect("script lock").pop_front() {
            return next;
        }
        match &self.fallback {
            Some(f) => f(req),
            None => Err(TransportError::Fatal("script exhausted".into())),
        }
    }

    fn model_tag(&self, params: &CompletionParams) -> String {
        format!("{}:{}", self.tag, params.model)
    }
}

/// Chat-completion HTTP transport.
#[derive(Debug, Clone)]
pub struct HttpTransport {
    pub endpoint: String,
    pub credential_env: String,
}

impl HttpTransport {
    pub fn new(endpoint: impl Into<String>, credential_env: impl Into<String>) -> Self {
        HttpTransport { endpoint: endpoint.into(), credential_env: credential_env.into() }
    }

    fn body(req: &TransportRequest<'_>) -> serde_json::Value {
        let engine = base64::engine::general_purpose::STANDARD;
        let mut content = vec![serde_json::json!({"type": "text", "text": req.prompt})];
        for a in req.attachments {
            let url = format!("data:{};base64,{}", a.media_type, engine.encode(&a.bytes));
            content.push(serde_json::json!({"type": "image_url", "image_url": {"url": url}}));
        }
        serde_json::json!({
            "model": req.params.model,
            "temperature": req.params.temperature,
            "max_tokens": req.params.max_tokens,
            "messages": [{"role": "user", "content": content}],
        })
    }
}

impl Transport for HttpTransport {
    fn send(&self, req: &TransportRequest<'_>) -> Result<String, TransportError> {
        let key = std::env::var(&self.credential_env)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| TransportError::Auth(format!("environment variable {} is not set", self.credential_env)))?;
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(req.params.timeout_ms)))
            .http_status_as_error(false)
            .build();
        let agent: ureq::Agent = config.into();
        let response =
            agent.post(&self.endpoint).header("Authorization", &format!("Bearer {key}")).send_json(Self::body(req));
        let mut response = match response {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Err(TransportError::Timeout),
            Err(e) => return Err(TransportError::Transient(e.to_string())),
        };
        let status = response.status().as_u16();
        match status {
            200..=299 => {}
            401 | 403 => return Err(TransportError::Auth(format!("HTTP {status}"))),
            408 | 429 | 500..=599 => return Err(TransportError::Transient(format!("HTTP {status}"))),
            _ => return Err(TransportError::Fatal(format!("HTTP {status}"))),
        }
        let json: serde_json::Value =
            response.body_mut().read_json().map_err(|e| TransportError::Fatal(format!("bad response body: {e}")))?;
        json.pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .map(str::to_owned)
            .ok_or_else(|| TransportError::Fatal("response has no choices[0].message.content".into()))
    }
}

/// One logged request/response pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptExchange {
    pub session: u64,
    pub request: String,
    #[serde(default)]
    pub attachments: Vec<Attachment>,
    /// Response text, or the final error message when the call failed.
    pub response: String,
    pub ok: bool,
    pub latency_ms: f64,
    pub model: String,
    pub retries: u32,
}

enum AuditSink {
    Memory(Vec<PromptExchange>),
    File(BufWriter<File>),
}

/// Append-only JSON-lines audit log, safe to share between threads.
pub struct AuditLog {
    sink: Mutex<AuditSink>,
}

impl AuditLog {
    pub fn in_memory() -> Self {
        AuditLog { sink: Mutex::new(AuditSink::Memory(Vec::new())) }
    }

    /// Appends to `path`, creating it if needed.
    pub fn append_to(path: &Path) -> std::io::Result<Self> {
        let f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(AuditLog { sink: Mutex::new(AuditSink::File(BufWriter::new(f))) })
    }

    pub fn record(&self, ex: PromptExchange) -> std::io::Result<()> {
        let mut sink = self.sink.lock().expect("audit lock");
        match &mut *sink {
            AuditSink::Memory(v) => v.push(ex),
            AuditSink::File(w) => {
                serde_json::to_writer(&mut *w, &ex)?;
                w.write_all(b"\n")?;
                w.flush()?;
            }
        }
        Ok(())
    }

    /// Entries held in memory (empty for file-backed logs).
    pub fn entries(&self) -> Vec<PromptExchange> {
        match &*self.sink.lock().expect("audit lock") {
            AuditSink::Memory(v) => v.clone(),
            AuditSink::File(_) => Vec::new(),
        }
    }
}

pub fn read_audit_log(path: &Path) -> std::io::Result<Vec<PromptExchange>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_retries: 3, base_backoff_ms: 500 }
    }
}

impl RetryPolicy {
    pub fn no_backoff() -> Self {
        RetryPolicy { base_backoff_ms: 0, ..Self::default() }
    }

    pub fn backoff(&self, retry: u32) -> Duration {
        Duration::from_millis(self.base_backoff_ms.saturating_mul(1 << retry.min(16)))
    }
}

/// Settings for a live gateway.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub endpoint: String,
    pub model: String,
    pub credential_env: String,
    pub timeout_ms: u64,
    pub retry: RetryPolicy,
    pub audit_log: Option<std::path::PathBuf>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o".into(),
            credential_env: "KEYAUG_API_KEY".into(),
            timeout_ms: 120_000,
            retry: RetryPolicy::default(),
            audit_log: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub retries: u32,
    pub latency: Duration,
}

pub struct GatewayClient {
    transport: Arc<dyn Transport>,
    retry: RetryPolicy,
    audit: Arc<AuditLog>,
    next_session: AtomicU64,
    pub defaults: CompletionParams,
}

impl GatewayClient {
    pub fn new(transport: impl Transport + 'static) -> Self {
        GatewayClient {
            transport: Arc::new(transport),
            retry: RetryPolicy::no_backoff(),
            audit: Arc::new(AuditLog::in_memory()),
            next_session: AtomicU64::new(1),
            defaults: CompletionParams::default(),
        }
    }

    pub fn from_config(cfg: &GatewayConfig) -> std::io::Result<Self> {
        let audit = match &cfg.audit_log {
            Some(p) => AuditLog::append_to(p)?,
            None => AuditLog::in_memory(),
        };
        Ok(GatewayClient::new(HttpTransport::new(&cfg.endpoint, &cfg.credential_env))
            .with_retry(cfg.retry.clone())
            .with_audit(audit)
            .with_defaults(CompletionParams {
                model: cfg.model.clone(),
                timeout_ms: cfg.timeout_ms,
                ..Default::default()
            }))
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_audit(mut self, audit: AuditLog) -> Self {
        self.audit = Arc::new(audit);
        self
    }

    pub fn with_defaults(mut self, params: CompletionParams) -> Self {
        self.defaults = params;
        self
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    /// New conversation context. Sessions share no state: every request is
    /// sent without history.
    pub fn fresh_session(&self) -> Session<'_> {
        Session { client: self, id: self.next_session.fetch_add(1, Ordering::Relaxed) }
    }

    fn complete_in(
        &self,
        session: u64,
        prompt: &str,
        attachments: &[Attachment],
        params: &CompletionParams,
    ) -> Result<Completion, GatewayError> {
        if prompt.trim().is_empty() {
            return Err(GatewayError::EmptyPrompt);
        }
        let start = Instant::now();
        let req = TransportRequest { session, prompt, attachments, params };
        let mut retries = 0;
        let result = loop {
            match self.transport.send(&req) {
                Ok(text) => break Ok(text),
                Err(TransportError::Auth(m)) => break Err(GatewayError::Auth(m)),
                Err(TransportError::Fatal(m)) => break Err(GatewayError::Rejected(m)),
                Err(e) if retries >= self.retry.max_retries => {
                    break Err(match e {
                        TransportError::Timeout => GatewayError::Timeout { attempts: retries + 1 },
                        other => GatewayError::RetriesExhausted { attempts: retries + 1, last: other.to_string() },
                    })
                }
                Err(_) => {
                    std::thread::sleep(self.retry.backoff(retries));
                    retries += 1;
                }
            }
        };
        let latency = start.elapsed();
        let exchange = PromptExchange {
            session,
            request: prompt.to_string(),
            attachments: attachments.to_vec(),
            response: match &result {
                Ok(t) => t.clone(),
                Err(e) => e.to_string(),
            },
            ok: result.is_ok(),
            latency_ms: latency.as_secs_f64() * 1e3,
            model: self.transport.model_tag(params),
            retries,
        };
        // audit failures must not mask the model response
        let _ = self.audit.record(exchange);
        result.map(|text| Completion { text, retries, latency })
    }
}

/// Handle for one independent conversation.
pub struct Session<'a> {
    client: &'a GatewayClient,
    id: u64,
}

impl Session<'_> {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn complete(
        &self,
        prompt: &str,
        attachments: &[Attachment],
        params: &CompletionParams,
    ) -> Result<Completion, GatewayError> {
        self.client.complete_in(self.id, prompt, attachments, params)
    }

    /// Completion with the client's default parameters at a given temperature.
    pub fn ask(&self, prompt: &str, temperature: f64) -> Result<Completion, GatewayError> {
        let params = self.client.defaults.clone().with_temperature(temperature);
        self.complete(prompt, &[], &params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn client(t: ScriptedTransport) -> GatewayClient {
        GatewayClient::new(t)
    }

    #[test]
    fn canned_response() {
        let c = client(ScriptedTransport::always("A"));
        let out = c.fresh_session().ask("hi", 0.7).unwrap();
        assert_eq!(out.text, "A");
        assert_eq!(out.retries, 0);
    }

    #[test]
    fn transient_failures_are_retried() {
        let t = ScriptedTransport::queue([
            Err(TransportError::Transient("x".into())),
            Err(TransportError::Timeout),
            Ok("answer".into()),
        ]);
        let c = client(t);
        let out = c.fresh_session().ask("q", 0.2).unwrap();
        assert_eq!((out.text.as_str(), out.retries), ("answer", 2));
        assert_eq!(c.audit().entries()[0].retries, 2);
    }

    #[test]
    fn retries_are_capped() {
        let c = client(ScriptedTransport::responder(|_| Err(TransportError::Timeout)));
        assert_eq!(c.fresh_session().ask("q", 0.2), Err(GatewayError::Timeout { attempts: 4 }));
        let c = client(ScriptedTransport::responder(|_| Err(TransportError::Transient("503".into()))));
        assert!(matches!(c.fresh_session().ask("q", 0.2), Err(GatewayError::RetriesExhausted { attempts: 4, .. })));
    }

    #[test]
    fn missing_credentials_fail_without_retry() {
        let t = HttpTransport::new("http://127.0.0.1:9/never", "KEYAUG_TEST_SURELY_UNSET_VAR");
        let c = GatewayClient::new(t).with_retry(RetryPolicy { max_retries: 3, base_backoff_ms: 10_000 });
        let start = Instant::now();
        let err = c.fresh_session().ask("q", 0.2).unwrap_err();
        assert!(matches!(err, GatewayError::Auth(_)), "{err:?}");
        assert!(start.elapsed() < Duration::from_secs(1));
        assert_eq!(c.audit().entries()[0].retries, 0);
    }

    #[test]
    fn sessions_are_stateless_and_logged() {
        let c = client(ScriptedTransport::responder(|r| Ok(format!("echo:{}", r.prompt))));
        let (a, b) = (c.fresh_session(), c.fresh_session());
        assert_ne!(a.id(), b.id());
        assert_eq!(a.ask("same", 0.7).unwrap().text, b.ask("same", 0.7).unwrap().text);
        let log = c.audit().entries();
        assert_eq!(log.iter().map(|e| e.session).collect::<Vec<_>>(), vec![a.id(), b.id()]);
    }

    #[test]
    fn file_audit_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.jsonl");
        let c = client(ScriptedTransport::always("{\"x\": 1}")).with_audit(AuditLog::append_to(&path).unwrap());
        let s = c.fresh_session();
        s.complete("p1", &[Attachment { media_type: "image/png".into(), bytes: vec![1, 2] }], &c.defaults).unwrap();
        s.ask("p2", 0.2).unwrap();
        let log = read_audit_log(&path).unwrap();
        assert_eq!(log.len(), 2);
        assert_eq!(log[0].request, "p1");
        assert_eq!(log[0].attachments[0].media_type, "image/png");
        assert_eq!(log[1].response, "{\"x\": 1}");
    }

    #[test]
    fn http_body_has_chat_shape() {
        let params = CompletionParams::default();
        let att = [Attachment { media_type: "image/png".into(), bytes: b"abc".to_vec() }];
        let req = TransportRequest { session: 1, prompt: "hello", attachments: &att, params: &params };
        let body = HttpTransport::body(&req);
        assert_eq!(body["messages"][0]["content"][0]["text"], "hello");
        assert_eq!(body["messages"][0]["content"][1]["image_url"]["url"], "data:image/png;base64,YWJj");
    }
}
