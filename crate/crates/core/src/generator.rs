//! Prompt rendering, the LLM client contract, and batch generation with
//! record/replay.
//!
//! Live transport is deliberately not bundled: the pipeline runs against a
//! recorded response store (replay mode), and record mode wraps any client
//! that implements [`CompletionClient`], persisting every completion keyed
//! by a request hash so campaigns replay bit-identically offline.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::candidate::{CandidateDesign, CandidateKind, Provenance};

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("template invalid: {0}")]
    BadTemplate(String),
    #[error("batch size must be >= 1")]
    EmptyBatch,
    #[error("client error: {0}")]
    Client(#[from] ClientError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("no recorded response for request {0}")]
    MissingRecording(String),
    #[error("live mode requires an external client; none is bundled")]
    LiveUnavailable,
    #[error("record store io: {0}")]
    Io(#[from] std::io::Error),
}

/// How completions are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientMode {
    Live,
    Record,
    Replay,
}

// ---------------------------------------------------------------------------
// Prompt templates
// ---------------------------------------------------------------------------

/// Pieces of a generation prompt, assembled in a fixed order by
/// [`render_prompt`]. The normalization directive exists only for state
/// templates; network architectures have no feature scale to police.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub kind: CandidateKind,
    pub role_context: String,
    /// Annotated reference implementation the model should improve on.
    pub base_code: String,
    pub cot_directive: String,
    pub normalization_directive: Option<String>,
    pub output_format: String,
}

const ROLE_CONTEXT: &str = include_str!("../prompts/role_context.txt");
const COT_DIRECTIVE: &str = include_str!("../prompts/cot.txt");
const NORMALIZATION_DIRECTIVE: &str = include_str!("../prompts/normalization.txt");
const OUTPUT_FORMAT: &str = include_str!("../prompts/output_format.txt");

impl PromptTemplate {
    /// Shipped template for a candidate kind, built from the versioned
    /// prompt files and the reference implementation of that component.
    pub fn builtin(kind: CandidateKind) -> Self {
        let base = match kind {
            CandidateKind::State => crate::candidate::builtin("state_original"),
            CandidateKind::Network => crate::candidate::builtin("net_original"),
        }
        .expect("reference builtin exists");
        PromptTemplate {
            kind,
            role_context: ROLE_CONTEXT.to_string(),
            base_code: base.source_text,
            cot_directive: COT_DIRECTIVE.to_string(),
            normalization_directive: match kind {
                CandidateKind::State => Some(NORMALIZATION_DIRECTIVE.to_string()),
                CandidateKind::Network => None,
            },
            output_format: OUTPUT_FORMAT.to_string(),
        }
    }

    pub fn validate(&self) -> Result<(), GeneratorError> {
        match (self.kind, &self.normalization_directive) {
            (CandidateKind::State, None) => Err(GeneratorError::BadTemplate(
                "state templates need a normalization directive".into(),
            )),
            (CandidateKind::Network, Some(_)) => Err(GeneratorError::BadTemplate(
                "network templates must not carry a normalization directive".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Short stable identifier for provenance records.
    pub fn prompt_id(&self) -> String {
        let rendered = render_prompt(self).unwrap_or_default();
        sha256_hex(rendered.as_bytes())[..12].to_string()
    }
}

/// Assembles the prompt: role/context, annotated base code, chain-of-thought
/// directive, normalization directive (states only), output format.
pub fn render_prompt(template: &PromptTemplate) -> Result<String, GeneratorError> {
    template.validate()?;
    let component = match template.kind {
        CandidateKind::State => "state-construction function",
        CandidateKind::Network => "actor-critic network factory",
    };
    let mut out = String::new();
    out.push_str(template.role_context.trim_end());
    out.push_str("\n\nHere is the current ");
    out.push_str(component);
    out.push_str(":\n\n```rhai\n");
    out.push_str(template.base_code.trim_end());
    out.push_str("\n```\n\n");
    out.push_str(template.cot_directive.trim_end());
    if let Some(norm) = &template.normalization_directive {
        out.push_str("\n\n");
        out.push_str(norm.trim_end());
    }
    out.push_str("\n\n");
    out.push_str(template.output_format.trim_end());
    out.push('\n');
    Ok(out)
}

fn sha256_hex(data: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(data);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// Clients and the record store
// ---------------------------------------------------------------------------

/// One completion request's identity: model, prompt, temperature, and seed.
pub fn request_key(model: &str, prompt: &str, temperature: f64, seed: u64) -> String {
    let mut hasher = Sha256::new();
    hasher.update(model.as_bytes());
    hasher.update([0x1f]);
    hasher.update(prompt.as_bytes());
    hasher.update([0x1f]);
    hasher.update(temperature.to_bits().to_le_bytes());
    hasher.update(seed.to_le_bytes());
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RecordEntry {
    key: String,
    model: String,
    temperature: f64,
    seed: u64,
    response: String,
}

/// Append-only store of recorded completions, one JSON record per line.
#[derive(Debug, Default, Clone)]
pub struct RecordStore {
    entries: BTreeMap<String, String>,
}

impl RecordStore {
    pub fn load(path: &Path) -> Result<Self, GeneratorError> {
        let text = std::fs::read_to_string(path).map_err(|e| GeneratorError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut entries = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let entry: RecordEntry = serde_json::from_str(line).map_err(|e| {
                GeneratorError::BadTemplate(format!("record store corrupt: {e}"))
            })?;
            entries.insert(entry.key, entry.response);
        }
        Ok(RecordStore { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }
}

/// A completion backend. `complete` must be deterministic in replay mode.
pub trait CompletionClient: Send + Sync {
    fn complete(&self, prompt: &str, temperature: f64, seed: u64) -> Result<String, ClientError>;
    fn model_name(&self) -> &str;
}

/// Replays recorded responses; performs no network access.
pub struct ReplayClient {
    store: RecordStore,
    model: String,
}

impl ReplayClient {
    pub fn new(store: RecordStore, model: impl Into<String>) -> Self {
        ReplayClient {
            store,
            model: model.into(),
        }
    }

    pub fn from_path(path: &Path, model: impl Into<String>) -> Result<Self, GeneratorError> {
        Ok(ReplayClient::new(RecordStore::load(path)?, model))
    }
}

impl CompletionClient for ReplayClient {
    fn complete(&self, prompt: &str, temperature: f64, seed: u64) -> Result<String, ClientError> {
        let key = request_key(&self.model, prompt, temperature, seed);
        self.store
            .get(&key)
            .map(|s| s.to_string())
            .ok_or(ClientError::MissingRecording(key))
    }

    fn model_name(&self) -> &str {
        &self.model
    }
}

/// Wraps another client and persists every completion with atomic appends.
pub struct RecordingClient<C> {
    inner: C,
    path: PathBuf,
    file: Mutex<std::fs::File>,
}

impl<C: CompletionClient> RecordingClient<C> {
    pub fn create(inner: C, path: &Path) -> Result<Self, GeneratorError> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| GeneratorError::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
        Ok(RecordingClient {
            inner,
            path: path.to_path_buf(),
            file: Mutex::new(file),
        })
    }
}

impl<C: CompletionClient> CompletionClient for RecordingClient<C> {
    fn complete(&self, prompt: &str, temperature: f64, seed: u64) -> Result<String, ClientError> {
        let response = self.inner.complete(prompt, temperature, seed)?;
        let entry = RecordEntry {
            key: request_key(self.inner.model_name(), prompt, temperature, seed),
            model: self.inner.model_name().to_string(),
            temperature,
            seed,
            response: response.clone(),
        };
        let mut line = serde_json::to_string(&entry).expect("record serializes");
        line.push('\n');
        {
            let mut file = self.file.lock().unwrap();
            file.write_all(line.as_bytes())
                .and_then(|_| file.flush())
                .map_err(ClientError::Io)?;
        }
        let _ = &self.path;
        Ok(response)
    }

    fn model_name(&self) -> &str {
        self.inner.model_name()
    }
}

/// Bounded retry with exponential backoff for transient transport errors.
pub struct RetryClient<C> {
    inner: C,
    max_attempts: u32,
    base_backoff: std::time::Duration,
}

impl<C: CompletionClient> RetryClient<C> {
    pub fn new(inner: C, max_attempts: u32, base_backoff: std::time::Duration) -> Self {
        RetryClient {
            inner,
            max_attempts: max_attempts.max(1),
            base_backoff,
        }
    }
}

impl<C: CompletionClient> CompletionClient for RetryClient<C> {
    fn complete(&self, prompt: &str, temperature: f64, seed: u64) -> Result<String, ClientError> {
        let mut last = None;
        for attempt in 0..self.max_attempts {
            match self.inner.complete(prompt, temperature, seed) {
                Ok(r) => return Ok(r),
                Err(ClientError::Transport(msg)) => {
                    last = Some(ClientError::Transport(msg));
                    if attempt + 1 < self.max_attempts {
                        std::thread::sleep(self.base_backoff * 2u32.pow(attempt));
                    }
                }
                // Only transport errors are retryable.
                Err(other) => return Err(other),
            }
        }
        Err(last.unwrap_or(ClientError::Transport("exhausted retries".into())))
    }

    fn model_name(&self) -> &str {
        self.inner.model_name()
    }
}

/// Placeholder for live mode: always fails with a pointer to the contract.
pub struct LiveClientUnavailable {
    pub model: String,
}

impl CompletionClient for LiveClientUnavailable {
    fn complete(&self, _: &str, _: f64, _: u64) -> Result<String, ClientError> {
        Err(ClientError::LiveUnavailable)
    }

    fn model_name(&self) -> &str {
        &self.model
    }
}

// ---------------------------------------------------------------------------
// Code extraction and batch generation
// ---------------------------------------------------------------------------

/// Pulls the final fenced code block out of a model response. Reasoning text
/// precedes the code, so the *last* complete block wins; the language tag is
/// stripped.
pub fn extract_code(response: &str) -> Result<String, String> {
    let mut blocks = Vec::new();
    let mut rest = response;
    loop {
        let Some(open) = rest.find("```") else { break };
        let after_open = &rest[open + 3..];
        let Some(nl) = after_open.find('\n') else { break };
        let body = &after_open[nl + 1..];
        let Some(close) = body.find("```") else { break };
        blocks.push(&body[..close]);
        rest = &body[close + 3..];
    }
    match blocks.last() {
        Some(code) => Ok(code.trim_end().to_string()),
        None => Err("no fenced code block found".into()),
    }
}

/// One generation round: `n_requested` completions, each parsed into a
/// candidate; unparseable responses are counted, never dropped silently.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationBatch {
    pub batch_id: String,
    pub kind: CandidateKind,
    pub model_name: String,
    pub n_requested: usize,
    pub candidates: Vec<CandidateDesign>,
    pub failures: usize,
}

impl GenerationBatch {
    pub fn save(&self, path: &Path) -> Result<(), GeneratorError> {
        let text = serde_json::to_string_pretty(self).expect("batch serializes");
        std::fs::write(path, text).map_err(|e| GeneratorError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self, GeneratorError> {
        let text = std::fs::read_to_string(path).map_err(|e| GeneratorError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_str(&text)
            .map_err(|e| GeneratorError::BadTemplate(format!("batch corrupt: {e}")))
    }
}

/// Knobs for one batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub n: usize,
    pub temperature: f64,
    pub seed: u64,
    pub batch_id: String,
}

impl GenerationConfig {
    pub fn new(n: usize, seed: u64, batch_id: impl Into<String>) -> Self {
        GenerationConfig {
            n,
            // High default temperature for design diversity.
            temperature: 1.0,
            seed,
            batch_id: batch_id.into(),
        }
    }
}

/// Requests `cfg.n` independent completions and parses each into a
/// candidate. Request seeds are `cfg.seed + index`, so replay is exact and
/// order-independent.
pub fn generate_batch(
    client: &dyn CompletionClient,
    kind: CandidateKind,
    template: &PromptTemplate,
    cfg: &GenerationConfig,
) -> Result<GenerationBatch, GeneratorError> {
    if cfg.n == 0 {
        return Err(GeneratorError::EmptyBatch);
    }
    if template.kind != kind {
        return Err(GeneratorError::BadTemplate(format!(
            "template is for {} candidates, requested {}",
            template.kind, kind
        )));
    }
    let prompt = render_prompt(template)?;
    let prompt_id = template.prompt_id();
    let mut candidates = Vec::new();
    let mut failures = 0;
    for i in 0..cfg.n {
        let seed = cfg.seed.wrapping_add(i as u64);
        let response = match client.complete(&prompt, cfg.temperature, seed) {
            Ok(r) => r,
            Err(ClientError::MissingRecording(key)) => {
                return Err(ClientError::MissingRecording(key).into())
            }
            Err(ClientError::LiveUnavailable) => return Err(ClientError::LiveUnavailable.into()),
            Err(_) => {
                failures += 1;
                continue;
            }
        };
        match extract_code(&response) {
            Ok(source) => {
                candidates.push(CandidateDesign::new(
                    format!("{}-{i:04}", cfg.batch_id),
                    kind,
                    source,
                    Provenance::Llm {
                        model: client.model_name().to_string(),
                        prompt_id: prompt_id.clone(),
                        batch_id: cfg.batch_id.clone(),
                    },
                ));
            }
            Err(_) => failures += 1,
        }
    }
    debug_assert_eq!(candidates.len() + failures, cfg.n);
    Ok(GenerationBatch {
        batch_id: cfg.batch_id.clone(),
        kind,
        model_name: client.model_name().to_string(),
        n_requested: cfg.n,
        candidates,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    /// Deterministic stand-in model: response text derived from the seed.
    pub struct ScriptedClient {
        pub model: String,
        pub script: fn(u64) -> String,
    }

    impl CompletionClient for ScriptedClient {
        fn complete(&self, _: &str, _: f64, seed: u64) -> Result<String, ClientError> {
            Ok((self.script)(seed))
        }

        fn model_name(&self) -> &str {
            &self.model
        }
    }

    fn valid_response(seed: u64) -> String {
        format!(
            "Idea 1: widen the history. Idea 2: scale features. I pick idea 2.\n\n\
             ```rhai\nfn build_state(a, b, c, d, e, f) {{ [[{seed}.0 / 100.0]] }}\n```\n"
        )
    }

    #[test]
    fn state_prompt_carries_normalization_directive() {
        let t = PromptTemplate::builtin(CandidateKind::State);
        let p = render_prompt(&t).unwrap();
        assert!(p.contains("properly normalized"));
        let n = PromptTemplate::builtin(CandidateKind::Network);
        let pn = render_prompt(&n).unwrap();
        assert!(!pn.contains("properly normalized"));
        // Ordering: context, base code, reasoning directive, format.
        let code_at = p.find("fn build_state").unwrap();
        let cot_at = p.find("three\ndistinct ideas").or(p.find("distinct ideas")).unwrap();
        let fmt_at = p.find("exactly one fenced code block").unwrap();
        let norm_at = p.find("properly normalized").unwrap();
        assert!(code_at < cot_at && cot_at < norm_at && norm_at < fmt_at);
    }

    #[test]
    fn prompt_rendering_is_stable() {
        let t = PromptTemplate::builtin(CandidateKind::State);
        let a = render_prompt(&t).unwrap();
        let b = render_prompt(&t).unwrap();
        assert_eq!(a, b);
        let mut changed = t.clone();
        changed.cot_directive.push_str(" Extra.");
        assert_ne!(render_prompt(&changed).unwrap(), a);
    }

    #[test]
    fn template_invariants_enforced() {
        let mut t = PromptTemplate::builtin(CandidateKind::State);
        t.normalization_directive = None;
        assert!(render_prompt(&t).is_err());
        let mut n = PromptTemplate::builtin(CandidateKind::Network);
        n.normalization_directive = Some("x".into());
        assert!(render_prompt(&n).is_err());
    }

    #[test]
    fn extract_code_takes_last_block() {
        let resp = "Sketch:\n```rhai\nfn draft() {}\n```\nRefined:\n```rhai\nfn final_code() {}\n```\n";
        assert_eq!(extract_code(resp).unwrap(), "fn final_code() {}");
        let single = "prose\n```\nfn x() {}\n```";
        assert_eq!(extract_code(single).unwrap(), "fn x() {}");
        assert!(extract_code("pure prose, no code").is_err());
        assert!(extract_code("broken ```rhai\nfn x() {}").is_err());
    }

    #[test]
    fn batch_accounting_counts_failures() {
        let client = ScriptedClient {
            model: "scripted".into(),
            script: |seed| {
                if seed % 3 == 0 {
                    "no code here, sorry".to_string()
                } else {
                    valid_response(seed)
                }
            },
        };
        let t = PromptTemplate::builtin(CandidateKind::State);
        let cfg = GenerationConfig::new(30, 0, "b1");
        let batch = generate_batch(&client, CandidateKind::State, &t, &cfg).unwrap();
        assert_eq!(batch.n_requested, 30);
        assert_eq!(batch.candidates.len() + batch.failures, 30);
        assert_eq!(batch.failures, 10);
        assert!(batch.candidates.iter().all(|c| matches!(
            &c.provenance,
            Provenance::Llm { model, batch_id, .. } if model == "scripted" && batch_id == "b1"
        )));
        assert!(matches!(
            generate_batch(
                &client,
                CandidateKind::State,
                &t,
                &GenerationConfig::new(0, 0, "b0")
            ),
            Err(GeneratorError::EmptyBatch)
        ));
    }

    #[test]
    fn record_then_replay_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let store_path = dir.path().join("store.jsonl");
        let inner = ScriptedClient {
            model: "scripted".into(),
            script: valid_response,
        };
        let recorder = RecordingClient::create(inner, &store_path).unwrap();
        let t = PromptTemplate::builtin(CandidateKind::State);
        let cfg = GenerationConfig::new(8, 100, "rec");
        let recorded = generate_batch(&recorder, CandidateKind::State, &t, &cfg).unwrap();

        let replay = ReplayClient::from_path(&store_path, "scripted").unwrap();
        let replayed = generate_batch(&replay, CandidateKind::State, &t, &cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&recorded).unwrap(),
            serde_json::to_string(&replayed).unwrap()
        );
        // A request outside the store fails loudly.
        let missing = generate_batch(
            &replay,
            CandidateKind::State,
            &t,
            &GenerationConfig::new(9, 100, "rec"),
        );
        assert!(matches!(
            missing,
            Err(GeneratorError::Client(ClientError::MissingRecording(_)))
        ));
    }

    #[test]
    fn retry_recovers_from_transient_transport_errors() {
        static CALLS: AtomicU32 = AtomicU32::new(0);
        struct Flaky;
        impl CompletionClient for Flaky {
            fn complete(&self, _: &str, _: f64, seed: u64) -> Result<String, ClientError> {
                if CALLS.fetch_add(1, Ordering::SeqCst) < 2 {
                    Err(ClientError::Transport("connection reset".into()))
                } else {
                    Ok(valid_response(seed))
                }
            }
            fn model_name(&self) -> &str {
                "flaky"
            }
        }
        let client = RetryClient::new(Flaky, 3, std::time::Duration::from_millis(1));
        let out = client.complete("p", 1.0, 0).unwrap();
        assert!(out.contains("build_state"));
        assert_eq!(CALLS.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn live_mode_is_unavailable_by_contract() {
        let c = LiveClientUnavailable { model: "gpt-x".into() };
        assert!(matches!(
            c.complete("p", 1.0, 0),
            Err(ClientError::LiveUnavailable)
        ));
    }
}
