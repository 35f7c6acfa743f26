//! Candidate designs: the code-block contract, the sandbox that runs them,
//! and the builtin corpus of known-good variants.
//!
//! A candidate is either a *state* function (maps a stream observation to a
//! feature matrix) or a *network* factory (describes an actor-critic
//! architecture). Both are script text executed inside the sandbox; see
//! [`sandbox`] for the execution environment and the builtin `.rhai` sources
//! next to this crate for the contract by example.

mod sandbox;

use std::sync::Mutex;
use std::time::Duration;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::ActorCritic;
use crate::sim::{BitrateLadder, SimConfig, StreamObservation, DEFAULT_N_CHUNKS};

pub use sandbox::{
    evaluate_network_factory, NetworkDescription, StateProgram, NETWORK_ARGS, NETWORK_ENTRY,
    STATE_ARGS, STATE_ENTRY,
};

/// What a candidate code block implements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateKind {
    State,
    Network,
}

impl std::fmt::Display for CandidateKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CandidateKind::State => "state",
            CandidateKind::Network => "network",
        })
    }
}

/// Where a candidate came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source")]
pub enum Provenance {
    Llm {
        model: String,
        prompt_id: String,
        batch_id: String,
    },
    Builtin,
    Manual,
}

/// Pipeline position of a candidate. Transitions move only forward
/// (raw → compiled → normalized → trained → scored) or to `rejected`;
/// `normalized` is reachable only for state candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Raw,
    Compiled,
    Normalized,
    Rejected,
    Trained,
    Scored,
}

impl Status {
    fn rank(self) -> u8 {
        match self {
            Status::Raw => 0,
            Status::Compiled => 1,
            Status::Normalized => 2,
            Status::Trained => 3,
            Status::Scored => 4,
            Status::Rejected => u8::MAX,
        }
    }
}

#[derive(Debug, Error)]
pub enum CandidateError {
    #[error("invalid status transition {from:?} -> {to:?} for {id}")]
    InvalidTransition { id: String, from: Status, to: Status },
    #[error("normalized status applies only to state candidates ({0})")]
    NormalizedNetwork(String),
    #[error("corpus metadata: {0}")]
    Corpus(String),
}

/// One candidate design: code block text plus provenance and filter status.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateDesign {
    pub id: String,
    pub kind: CandidateKind,
    pub source_text: String,
    pub provenance: Provenance,
    pub status: Status,
    pub rejection_reason: Option<String>,
}

impl CandidateDesign {
    pub fn new(
        id: impl Into<String>,
        kind: CandidateKind,
        source_text: impl Into<String>,
        provenance: Provenance,
    ) -> Self {
        CandidateDesign {
            id: id.into(),
            kind,
            source_text: source_text.into(),
            provenance,
            status: Status::Raw,
            rejection_reason: None,
        }
    }

    /// Moves the candidate forward along the status pipeline.
    pub fn advance(&mut self, to: Status) -> Result<(), CandidateError> {
        if to == Status::Normalized && self.kind != CandidateKind::State {
            return Err(CandidateError::NormalizedNetwork(self.id.clone()));
        }
        let valid = self.status != Status::Rejected
            && to != Status::Rejected
            && to.rank() > self.status.rank()
            && to.rank() != u8::MAX;
        if !valid {
            return Err(CandidateError::InvalidTransition {
                id: self.id.clone(),
                from: self.status,
                to,
            });
        }
        self.status = to;
        Ok(())
    }

    /// Marks the candidate rejected with a reason. Idempotent.
    pub fn reject(&mut self, reason: impl Into<String>) {
        if self.status != Status::Rejected {
            self.status = Status::Rejected;
            self.rejection_reason = Some(reason.into());
        }
    }
}

/// Limits applied to every sandbox execution. Filesystem and network access
/// are structurally denied: the script environment has no such APIs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SandboxPolicy {
    pub time_limit: Duration,
    pub memory_limit_bytes: u64,
    /// Library names candidates may `import`.
    pub import_allowlist: Vec<String>,
    /// Interpreter operation budget per call.
    pub max_ops: u64,
}

impl Default for SandboxPolicy {
    fn default() -> Self {
        SandboxPolicy {
            time_limit: Duration::from_secs(5),
            memory_limit_bytes: 256 << 20,
            import_allowlist: vec!["stats".into(), "signal".into()],
            max_ops: 10_000_000,
        }
    }
}

/// Structured sandbox failures; these become rejection reasons.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum SandboxFailure {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("missing entry function {entry}({n_args} args)")]
    MissingEntry { entry: String, n_args: usize },
    #[error("execution error: {0}")]
    Execution(String),
    #[error("timeout: {0}")]
    Timeout(String),
    #[error("memory limit: {0}")]
    MemoryLimit(String),
    #[error("disallowed import: {0}")]
    DisallowedImport(String),
    #[error("non-numeric output: {0}")]
    NonNumeric(String),
    #[error("shape drift: expected {expected:?}, got {got:?}")]
    ShapeDrift {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("action-dimension mismatch: declared {declared}, expected {expected}")]
    ActionDimMismatch { declared: i64, expected: usize },
    #[error("invalid network description: {0}")]
    InvalidNetwork(String),
    #[error("invalid probe output: {0}")]
    InvalidProbe(String),
    #[error("candidate kind mismatch: expected {0}")]
    WrongKind(CandidateKind),
}

impl SandboxFailure {
    /// Short reason string used in reports and ledgers.
    pub fn reason(&self) -> String {
        match self {
            SandboxFailure::Syntax(_) => "syntax error".into(),
            SandboxFailure::MissingEntry { .. } => "missing entry function".into(),
            SandboxFailure::Execution(_) => "execution error".into(),
            SandboxFailure::Timeout(_) => "timeout".into(),
            SandboxFailure::MemoryLimit(_) => "memory limit".into(),
            SandboxFailure::DisallowedImport(m) => format!("disallowed import: {m}"),
            SandboxFailure::NonNumeric(_) => "non-numeric output".into(),
            SandboxFailure::ShapeDrift { .. } => "shape drift".into(),
            SandboxFailure::ActionDimMismatch { .. } => "action-dimension mismatch".into(),
            SandboxFailure::InvalidNetwork(_) => "invalid network description".into(),
            SandboxFailure::InvalidProbe(_) => "invalid probe output".into(),
            SandboxFailure::WrongKind(_) => "candidate kind mismatch".into(),
        }
    }
}

/// Streaming constants a state function may reference, matched to the
/// dataset the candidate will train on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExecContext {
    pub levels_kbps: Vec<f64>,
    pub chunk_duration_s: f64,
    pub buffer_cap_s: f64,
    pub total_chunks: usize,
    pub history_len: usize,
}

impl ExecContext {
    pub fn new(ladder: &BitrateLadder, sim: &SimConfig, total_chunks: usize) -> Self {
        ExecContext {
            levels_kbps: ladder.levels_kbps().iter().map(|&k| k as f64).collect(),
            chunk_duration_s: crate::sim::DEFAULT_CHUNK_SEC,
            buffer_cap_s: sim.buffer_cap_s,
            total_chunks,
            history_len: sim.history_len,
        }
    }

    pub fn with_chunk_duration(mut self, chunk_duration_s: f64) -> Self {
        self.chunk_duration_s = chunk_duration_s;
        self
    }

    /// Default probe context: low ladder, reference streaming constants.
    pub fn probe_low() -> Self {
        ExecContext::new(
            &BitrateLadder::low(),
            &SimConfig::default(),
            DEFAULT_N_CHUNKS,
        )
    }
}

/// Feature matrix produced by a state candidate: rows are channels, columns
/// are history positions (or singletons placed in a fixed-width row).
#[derive(Debug, Clone, PartialEq)]
pub struct StateTensor {
    values: Array2<f64>,
}

impl StateTensor {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, String> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err("matrix must be non-empty".into());
        }
        let width = rows[0].len();
        if let Some((r, row)) = rows.iter().enumerate().find(|(_, row)| row.len() != width) {
            return Err(format!(
                "ragged matrix: row {r} has {} entries, row 0 has {width}",
                row.len()
            ));
        }
        let channels = rows.len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Ok(StateTensor {
            values: Array2::from_shape_vec((channels, width), flat).expect("shape checked"),
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Largest absolute entry; NaN entries count as infinite.
    pub fn max_abs(&self) -> f64 {
        self.values
            .iter()
            .map(|v| if v.is_nan() { f64::INFINITY } else { v.abs() })
            .fold(0.0, f64::max)
    }
}

/// Instantiated actor-critic bound to one state shape.
#[derive(Debug)]
pub struct PolicyHandle {
    pub(crate) net: ActorCritic,
    shape_guard: Mutex<()>,
}

impl PolicyHandle {
    pub(crate) fn new(net: ActorCritic) -> Self {
        PolicyHandle {
            net,
            shape_guard: Mutex::new(()),
        }
    }

    pub fn state_shape(&self) -> (usize, usize) {
        self.net.state_shape()
    }

    pub fn n_actions(&self) -> usize {
        self.net.n_actions()
    }

    /// Action probabilities and value estimate for one state tensor.
    pub fn probs_value(&self, t: &StateTensor) -> Result<(Vec<f64>, f64), SandboxFailure> {
        let _guard = self.shape_guard.lock().unwrap();
        if t.shape() != self.net.state_shape() {
            return Err(SandboxFailure::ShapeDrift {
                expected: self.net.state_shape(),
                got: t.shape(),
            });
        }
        let cache = self.net.forward(t.values());
        Ok((cache.probs.to_vec(), cache.value))
    }

    /// Deterministic greedy action: argmax of the action probabilities,
    /// lowest index on ties.
    pub fn greedy_action(&self, t: &StateTensor) -> Result<usize, SandboxFailure> {
        let (probs, _) = self.probs_value(t)?;
        let mut best = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = i;
            }
        }
        Ok(best)
    }
}

/// Deterministic probe input for network validation.
pub fn probe_tensor(channels: usize, width: usize) -> StateTensor {
    let rows = (0..channels)
        .map(|c| {
            (0..width)
                .map(|w| ((c as f64 + 1.0) * 0.3 + w as f64 * 0.17).sin())
                .collect()
        })
        .collect();
    StateTensor::from_rows(rows).expect("probe tensor is well-formed")
}

/// Deterministic mid-stream probe observation for compile checks.
pub fn probe_observation(ctx: &ExecContext) -> StreamObservation {
    let h = ctx.history_len;
    StreamObservation {
        throughput_hist_mbps: (0..h).map(|i| 1.0 + 0.35 * i as f64).collect(),
        download_time_hist_s: (0..h).map(|i| 4.0 - 0.2 * i as f64).collect(),
        next_sizes_bytes: ctx
            .levels_kbps
            .iter()
            .map(|&k| k * ctx.chunk_duration_s * 125.0)
            .collect(),
        buffer_s: 30.0,
        chunks_remaining: ctx.total_chunks / 2,
        last_level: ctx.levels_kbps.len() / 2,
    }
}

/// Runs a state candidate on one observation inside the sandbox (one-shot;
/// pipelines keep a [`StateProgram`] instead to amortize compilation).
pub fn execute_state(
    candidate: &CandidateDesign,
    obs: &StreamObservation,
    policy: &SandboxPolicy,
) -> Result<StateTensor, SandboxFailure> {
    if candidate.kind != CandidateKind::State {
        return Err(SandboxFailure::WrongKind(CandidateKind::State));
    }
    let program = StateProgram::compile(&candidate.source_text, policy, &ExecContext::probe_low())?;
    program.execute(obs)
}

/// Builds an actor-critic from a network candidate: runs the factory in the
/// sandbox, validates the description, initializes parameters from `seed`,
/// and probe-checks the forward pass.
pub fn instantiate_network(
    candidate: &CandidateDesign,
    state_shape: (usize, usize),
    n_actions: usize,
    seed: u64,
    policy: &SandboxPolicy,
) -> Result<PolicyHandle, SandboxFailure> {
    if candidate.kind != CandidateKind::Network {
        return Err(SandboxFailure::WrongKind(CandidateKind::Network));
    }
    let desc = evaluate_network_factory(&candidate.source_text, policy, state_shape, n_actions)?;
    if let Some(declared) = desc.declared_actions {
        if declared != n_actions as i64 {
            return Err(SandboxFailure::ActionDimMismatch {
                declared,
                expected: n_actions,
            });
        }
    }
    let net = ActorCritic::init(desc.spec, state_shape.0, state_shape.1, n_actions, seed)
        .map_err(|e| SandboxFailure::InvalidNetwork(e.to_string()))?;
    let handle = PolicyHandle::new(net);
    let (probs, value) = handle.probs_value(&probe_tensor(state_shape.0, state_shape.1))?;
    let sum: f64 = probs.iter().sum();
    if probs.len() != n_actions
        || (sum - 1.0).abs() > 1e-6
        || probs.iter().any(|p| !p.is_finite() || *p < 0.0)
        || !value.is_finite()
    {
        return Err(SandboxFailure::InvalidProbe(format!(
            "probs sum {sum:.9}, value {value}"
        )));
    }
    Ok(handle)
}

// ---------------------------------------------------------------------------
// Builtin corpus
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct CorpusFile {
    candidates: Vec<CorpusEntry>,
}

#[derive(Debug, Deserialize)]
struct CorpusEntry {
    id: String,
    kind: CandidateKind,
    file: String,
    #[allow(dead_code)]
    summary: String,
}

const CORPUS_TOML: &str = include_str!("../../builtins/corpus.toml");

static BUILTIN_SOURCES: &[(&str, &str)] = &[
    ("state_original.rhai", include_str!("../../builtins/state_original.rhai")),
    ("state_remap_neg1_1.rhai", include_str!("../../builtins/state_remap_neg1_1.rhai")),
    ("state_reduced.rhai", include_str!("../../builtins/state_reduced.rhai")),
    (
        "state_strongnorm_smoothed.rhai",
        include_str!("../../builtins/state_strongnorm_smoothed.rhai"),
    ),
    ("state_linreg_trend.rhai", include_str!("../../builtins/state_linreg_trend.rhai")),
    ("state_buffer_trend.rhai", include_str!("../../builtins/state_buffer_trend.rhai")),
    ("state_buffer_diff.rhai", include_str!("../../builtins/state_buffer_diff.rhai")),
    (
        "state_pred_throughput.rhai",
        include_str!("../../builtins/state_pred_throughput.rhai"),
    ),
    ("net_original.rhai", include_str!("../../builtins/net_original.rhai")),
    ("net_wide_leaky.rhai", include_str!("../../builtins/net_wide_leaky.rhai")),
    ("net_rnn.rhai", include_str!("../../builtins/net_rnn.rhai")),
    ("net_lstm.rhai", include_str!("../../builtins/net_lstm.rhai")),
    ("net_shared_trunk.rhai", include_str!("../../builtins/net_shared_trunk.rhai")),
];

/// Loads the shipped corpus of known-good designs; each entry is a candidate
/// in `raw` status, exactly as if it had just been generated.
pub fn load_builtin_corpus() -> Vec<CandidateDesign> {
    let parsed: CorpusFile = toml::from_str(CORPUS_TOML).expect("builtin corpus metadata parses");
    parsed
        .candidates
        .into_iter()
        .map(|entry| {
            let source = BUILTIN_SOURCES
                .iter()
                .find(|(name, _)| *name == entry.file)
                .unwrap_or_else(|| panic!("missing builtin source {}", entry.file))
                .1;
            CandidateDesign::new(entry.id, entry.kind, source, Provenance::Builtin)
        })
        .collect()
}

/// Looks up one builtin candidate by id.
pub fn builtin(id: &str) -> Option<CandidateDesign> {
    load_builtin_corpus().into_iter().find(|c| c.id == id)
}
