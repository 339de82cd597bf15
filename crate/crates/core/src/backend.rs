//! Chat-call abstraction over interchangeable model backends.
//!
//! A [`Backend`] takes one [`BackendRequest`] (rendered prompt text, an
//! optional image, generation caps) and returns one [`BackendResponse`].
//! Three implementations ship here or nearby: [`HttpBackend`] speaks the
//! OpenAI-compatible chat-completions wire format; [`ReplayBackend`] and
//! [`RecordingBackend`] wrap a JSONL cassette for deterministic offline
//! runs; the synthetic oracle lives in [`crate::synthworld`].
//!
//! Requests are identified by a stable fingerprint — a SHA-256 over the
//! request tag, temperature, token cap, image digest, and rendered text —
//! which is the cassette key and the seed material for the oracle's
//! deterministic noise.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use thiserror::Error;

/// Which stage of the protocol a request belongs to. Part of the
/// fingerprint, so the same text sent at different stages records
/// separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestTag {
    Step1,
    Step2,
    ZscotReason,
    ZscotExtract,
    Judge,
}

impl RequestTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            RequestTag::Step1 => "step1",
            RequestTag::Step2 => "step2",
            RequestTag::ZscotReason => "zscot_reason",
            RequestTag::ZscotExtract => "zscot_extract",
            RequestTag::Judge => "judge",
        }
    }
}

/// An image attachment: a filesystem path, an inline base64 payload, or an
/// opaque pseudo reference (`synth://...`) understood only by synthetic
/// backends.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageRef {
    Path(PathBuf),
    Base64 { media_type: String, data: String },
    Pseudo(String),
}

impl ImageRef {
    /// Build the appropriate variant from a task's image reference string.
    pub fn from_task_ref(s: &str) -> ImageRef {
        if s.contains("://") || s.starts_with("data:") {
            ImageRef::Pseudo(s.to_string())
        } else {
            ImageRef::Path(PathBuf::from(s))
        }
    }

    /// SHA-256 hex digest of the attachment: file bytes for paths, the
    /// base64 string for inline payloads, the reference string for pseudo
    /// references.
    pub fn digest(&self) -> Result<String, BackendError> {
        let bytes: Vec<u8> = match self {
            ImageRef::Path(p) => std::fs::read(p).map_err(|e| BackendError::Io {
                context: format!("reading image {}", p.display()),
                detail: e.to_string(),
            })?,
            ImageRef::Base64 { data, .. } => data.as_bytes().to_vec(),
            ImageRef::Pseudo(s) => s.as_bytes().to_vec(),
        };
        Ok(hex_sha256(&bytes))
    }
}

/// One chat call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendRequest {
    pub rendered_text: String,
    pub image_ref: Option<ImageRef>,
    pub max_new_tokens: u32,
    pub temperature: f64,
    pub stop: Option<Vec<String>>,
    pub request_tag: RequestTag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Usage {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_tokens: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendResponse {
    pub text: String,
    pub finish_reason: FinishReason,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
}

impl BackendResponse {
    /// A plain completed response with zero latency (synthetic backends).
    pub fn of_text(text: impl Into<String>) -> Self {
        BackendResponse {
            text: text.into(),
            finish_reason: FinishReason::Stop,
            latency_ms: 0,
            usage: None,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum BackendError {
    #[error("transport error (status {status}): {body}")]
    Transport { status: u16, body: String },
    #[error("request timed out after {seconds} s")]
    Timeout { seconds: u64 },
    #[error("no cassette entry for fingerprint {fingerprint}")]
    CassetteMiss { fingerprint: String },
    #[error("cassette line {line}: {detail}")]
    CassetteCorrupt { line: usize, detail: String },
    #[error("unknown scene: {0}")]
    UnknownScene(String),
    #[error("malformed backend response: {0}")]
    InvalidResponse(String),
    #[error("unsupported request: {0}")]
    Unsupported(String),
    #[error("{context}: {detail}")]
    Io { context: String, detail: String },
}

/// A synchronous chat backend. Implementations must tolerate concurrent
/// calls from the pipeline's worker pool.
pub trait Backend: Send + Sync {
    fn call(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError>;
    fn id(&self) -> &str;
}

fn hex_sha256(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Stable request fingerprint: SHA-256 over a newline-delimited header
/// (tag, temperature, token cap, image digest or `-`) followed by the
/// rendered text. Identical request fields give identical fingerprints on
/// every platform.
pub fn fingerprint(req: &BackendRequest) -> Result<String, BackendError> {
    let image_digest = match &req.image_ref {
        Some(r) => r.digest()?,
        None => "-".to_string(),
    };
    let header = format!(
        "{}\n{}\n{}\n{}\n",
        req.request_tag.as_str(),
        req.temperature,
        req.max_new_tokens,
        image_digest
    );
    let mut hasher = Sha256::new();
    hasher.update(header.as_bytes());
    hasher.update(req.rendered_text.as_bytes());
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// OpenAI-compatible HTTP backend
// ---------------------------------------------------------------------------

/// How images are put on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ImageWireMode {
    /// Read the file and inline it as a `data:` URL (works everywhere).
    #[default]
    DataUrl,
    /// Send a `file://` URL (local servers with filesystem access).
    FilePath,
}

/// Settings for [`HttpBackend`].
#[derive(Debug, Clone)]
pub struct HttpSettings {
    /// Base URL up to and including the API root, e.g. `http://host:8000/v1`.
    pub endpoint: String,
    pub model: String,
    /// Bearer token, already resolved from the environment.
    pub api_key: Option<String>,
    /// Total attempts per call (first try included).
    pub attempts: u32,
    /// Per-call timeout in seconds.
    pub timeout_s: u64,
    pub image_mode: ImageWireMode,
}

impl Default for HttpSettings {
    fn default() -> Self {
        HttpSettings {
            endpoint: "http://localhost:8000/v1".to_string(),
            model: "default".to_string(),
            api_key: None,
            attempts: 3,
            timeout_s: 120,
            image_mode: ImageWireMode::DataUrl,
        }
    }
}

/// Blocking OpenAI-compatible chat client with bounded exponential-backoff
/// retries on 429 and 5xx.
pub struct HttpBackend {
    settings: HttpSettings,
    client: reqwest::blocking::Client,
    id: String,
}

impl HttpBackend {
    pub fn new(settings: HttpSettings) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(settings.timeout_s))
            .build()
            .map_err(|e| BackendError::InvalidResponse(format!("http client: {e}")))?;
        let id = format!("http:{}", settings.model);
        Ok(HttpBackend {
            settings,
            client,
            id,
        })
    }

    fn build_body(&self, req: &BackendRequest) -> Result<serde_json::Value, BackendError> {
        let content = match &req.image_ref {
            None => serde_json::Value::String(req.rendered_text.clone()),
            Some(image) => {
                let url = image_to_wire_url(image, self.settings.image_mode)?;
                serde_json::json!([
                    {"type": "text", "text": req.rendered_text},
                    {"type": "image_url", "image_url": {"url": url}},
                ])
            }
        };
        let mut body = serde_json::json!({
            "model": self.settings.model,
            "messages": [{"role": "user", "content": content}],
            "max_tokens": req.max_new_tokens,
            "temperature": req.temperature,
        });
        if let Some(stop) = &req.stop {
            body["stop"] = serde_json::json!(stop);
        }
        Ok(body)
    }

    fn send_once(&self, body: &serde_json::Value) -> Result<BackendResponse, BackendError> {
        let url = format!(
            "{}/chat/completions",
            self.settings.endpoint.trim_end_matches('/')
        );
        let started = std::time::Instant::now();
        let mut request = self.client.post(&url).json(body);
        if let Some(key) = &self.settings.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout {
                    seconds: self.settings.timeout_s,
                }
            } else {
                BackendError::Transport {
                    status: 0,
                    body: e.to_string(),
                }
            }
        })?;
        let status = response.status().as_u16();
        let text = response.text().map_err(|e| BackendError::Transport {
            status,
            body: format!("reading body: {e}"),
        })?;
        if status != 200 {
            return Err(BackendError::Transport { status, body: text });
        }
        let latency_ms = started.elapsed().as_millis() as u64;
        parse_chat_completion(&text, latency_ms)
    }
}

fn image_to_wire_url(image: &ImageRef, mode: ImageWireMode) -> Result<String, BackendError> {
    match image {
        ImageRef::Base64 { media_type, data } => Ok(format!("data:{media_type};base64,{data}")),
        ImageRef::Pseudo(s)
            if s.starts_with("http://") || s.starts_with("https://") || s.starts_with("data:") =>
        {
            Ok(s.clone())
        }
        ImageRef::Pseudo(s) => Err(BackendError::Unsupported(format!(
            "pseudo image reference {s:?} cannot be sent over HTTP"
        ))),
        ImageRef::Path(p) => match mode {
            ImageWireMode::DataUrl => {
                let bytes = std::fs::read(p).map_err(|e| BackendError::Io {
                    context: format!("reading image {}", p.display()),
                    detail: e.to_string(),
                })?;
                use base64::Engine as _;
                let data = base64::engine::general_purpose::STANDARD.encode(bytes);
                Ok(format!("data:{};base64,{data}", media_type_for(p)))
            }
            ImageWireMode::FilePath => {
                let abs = std::fs::canonicalize(p).unwrap_or_else(|_| p.clone());
                Ok(format!("file://{}", abs.display()))
            }
        },
    }
}

fn media_type_for(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("png") => "image/png",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        Some("bmp") => "image/bmp",
        _ => "image/jpeg",
    }
}

#[derive(Deserialize)]
struct WireCompletion {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireMessage {
    content: serde_json::Value,
}

fn parse_chat_completion(text: &str, latency_ms: u64) -> Result<BackendResponse, BackendError> {
    let parsed: WireCompletion = serde_json::from_str(text)
        .map_err(|e| BackendError::InvalidResponse(format!("{e}; body: {}", truncate(text, 200))))?;
    let choice = parsed
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| BackendError::InvalidResponse("no choices in response".to_string()))?;
    let content = match choice.message.content {
        serde_json::Value::String(s) => s,
        other => {
            return Err(BackendError::InvalidResponse(format!(
                "expected string content, got {other}"
            )))
        }
    };
    let finish_reason = match choice.finish_reason.as_deref() {
        Some("length") => FinishReason::Length,
        Some("error") => FinishReason::Error,
        _ => FinishReason::Stop,
    };
    Ok(BackendResponse {
        text: content,
        finish_reason,
        latency_ms,
        usage: parsed.usage,
    })
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

impl Backend for HttpBackend {
    fn call(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let body = self.build_body(req)?;
        let attempts = self.settings.attempts.max(1);
        let mut last_err = None;
        for attempt in 0..attempts {
            if attempt > 0 {
                let backoff = std::time::Duration::from_millis(200u64 << (attempt - 1).min(4));
                std::thread::sleep(backoff);
            }
            match self.send_once(&body) {
                Ok(resp) => return Ok(resp),
                Err(err) => {
                    let retryable = matches!(
                        err,
                        BackendError::Transport { status, .. }
                            if status == 0 || status == 429 || status >= 500
                    );
                    if !retryable {
                        return Err(err);
                    }
                    last_err = Some(err);
                }
            }
        }
        Err(last_err.unwrap_or(BackendError::Transport {
            status: 0,
            body: "no attempts made".to_string(),
        }))
    }

    fn id(&self) -> &str {
        &self.id
    }
}

// ---------------------------------------------------------------------------
// Cassette (record / replay)
// ---------------------------------------------------------------------------

/// Cassette lifecycle selector used by configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CassetteMode {
    #[default]
    Off,
    Record,
    Replay,
}

#[derive(Debug, Serialize, Deserialize)]
struct CassetteLine {
    fp: String,
    response: BackendResponse,
}

/// An in-memory cassette: fingerprint → recorded response.
#[derive(Debug, Default)]
pub struct Cassette {
    entries: HashMap<String, BackendResponse>,
}

impl Cassette {
    /// Load a cassette from JSONL; parse failures name the 1-based line.
    pub fn load(path: &Path) -> Result<Cassette, BackendError> {
        let file = std::fs::File::open(path).map_err(|e| BackendError::Io {
            context: format!("opening cassette {}", path.display()),
            detail: e.to_string(),
        })?;
        let mut entries = HashMap::new();
        for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| BackendError::Io {
                context: format!("reading cassette {}", path.display()),
                detail: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: CassetteLine =
                serde_json::from_str(&line).map_err(|e| BackendError::CassetteCorrupt {
                    line: idx + 1,
                    detail: e.to_string(),
                })?;
            // First write wins; recording never overwrites a fingerprint.
            entries.entry(parsed.fp).or_insert(parsed.response);
        }
        Ok(Cassette { entries })
    }

    pub fn get(&self, fp: &str) -> Option<&BackendResponse> {
        self.entries.get(fp)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Strict replay: every request must hit a recorded fingerprint or the
/// call fails with `CassetteMiss`.
pub struct ReplayBackend {
    cassette: Cassette,
    id: String,
}

impl ReplayBackend {
    pub fn new(cassette: Cassette) -> Self {
        ReplayBackend {
            cassette,
            id: "replay".to_string(),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        Ok(ReplayBackend::new(Cassette::load(path)?))
    }
}

impl Backend for ReplayBackend {
    fn call(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let fp = fingerprint(req)?;
        self.cassette
            .get(&fp)
            .cloned()
            .ok_or(BackendError::CassetteMiss { fingerprint: fp })
    }

    fn id(&self) -> &str {
        &self.id
    }
}

/// Wraps a live backend, appending every new (fingerprint, response) pair
/// to a JSONL cassette. Repeated identical requests are served from the
/// recording (one upstream call), and an existing fingerprint is never
/// overwritten. Appends are serialized through a single writer; upstream
/// calls run outside the lock so concurrent distinct requests still
/// overlap.
pub struct RecordingBackend {
    inner: Arc<dyn Backend>,
    state: Mutex<RecordState>,
    upstream_calls: AtomicUsize,
}

struct RecordState {
    file: std::fs::File,
    entries: HashMap<String, BackendResponse>,
}

impl RecordingBackend {
    /// Open (or create) the cassette at `path` and wrap `inner`. An
    /// existing cassette is loaded so a resumed recording keeps memoizing.
    pub fn create(inner: Arc<dyn Backend>, path: &Path) -> Result<Self, BackendError> {
        let entries = if path.exists() {
            Cassette::load(path)?.entries
        } else {
            HashMap::new()
        };
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| BackendError::Io {
                context: format!("opening cassette {}", path.display()),
                detail: e.to_string(),
            })?;
        Ok(RecordingBackend {
            inner,
            state: Mutex::new(RecordState { file, entries }),
            upstream_calls: AtomicUsize::new(0),
        })
    }

    /// Number of calls that actually reached the wrapped backend.
    pub fn upstream_call_count(&self) -> usize {
        self.upstream_calls.load(Ordering::SeqCst)
    }
}

impl Backend for RecordingBackend {
    fn call(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let fp = fingerprint(req)?;
        {
            let state = self.state.lock().expect("cassette lock");
            if let Some(hit) = state.entries.get(&fp) {
                return Ok(hit.clone());
            }
        }
        let response = self.inner.call(req)?;
        self.upstream_calls.fetch_add(1, Ordering::SeqCst);
        let mut state = self.state.lock().expect("cassette lock");
        if let Some(existing) = state.entries.get(&fp) {
            // A concurrent caller recorded the same fingerprint first.
            return Ok(existing.clone());
        }
        let line = serde_json::to_string(&CassetteLine {
            fp: fp.clone(),
            response: response.clone(),
        })
        .expect("cassette line serialization cannot fail");
        state
            .file
            .write_all(line.as_bytes())
            .and_then(|_| state.file.write_all(b"\n"))
            .and_then(|_| state.file.flush())
            .map_err(|e| BackendError::Io {
                context: "appending cassette entry".to_string(),
                detail: e.to_string(),
            })?;
        state.entries.insert(fp, response.clone());
        Ok(response)
    }

    fn id(&self) -> &str {
        self.inner.id()
    }
}

/// Closure-driven backend for tests and wiring experiments.
pub struct FnBackend<F>
where
    F: Fn(&BackendRequest) -> Result<BackendResponse, BackendError> + Send + Sync,
{
    f: F,
    id: String,
}

impl<F> FnBackend<F>
where
    F: Fn(&BackendRequest) -> Result<BackendResponse, BackendError> + Send + Sync,
{
    pub fn new(id: impl Into<String>, f: F) -> Self {
        FnBackend { f, id: id.into() }
    }
}

impl<F> Backend for FnBackend<F>
where
    F: Fn(&BackendRequest) -> Result<BackendResponse, BackendError> + Send + Sync,
{
    fn call(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError> {
        (self.f)(req)
    }

    fn id(&self) -> &str {
        &self.id
    }
}
