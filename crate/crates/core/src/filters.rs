//! Pre-check stage: the compile (trial-run) check and the fuzzing
//! normalization check, plus batch accounting.
//!
//! The compile check executes a state candidate on one probe observation
//! (or instantiates and probes a network candidate); any sandbox failure
//! rejects the candidate. The normalization check then fuzzes surviving
//! *state* candidates with random observations and rejects any whose output
//! contains a feature with magnitude above the threshold or a non-finite
//! value.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::candidate::{
    instantiate_network, probe_observation, CandidateDesign, CandidateKind, ExecContext,
    SandboxPolicy, StateProgram, Status,
};
use crate::generator::GenerationBatch;
use crate::report;
use crate::sim::StreamObservation;

/// Observation sampler ranges; wide enough to cover every reference
/// environment including the elevated cellular ladder.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerRanges {
    pub throughput_mbps: (f64, f64),
    pub download_s: (f64, f64),
    pub buffer_s: (f64, f64),
    pub max_chunks: usize,
    /// Multiplicative jitter applied to nominal chunk sizes.
    pub size_jitter: f64,
    pub history_len: usize,
}

impl Default for SamplerRanges {
    fn default() -> Self {
        SamplerRanges {
            throughput_mbps: (0.1, 100.0),
            download_s: (0.05, 60.0),
            buffer_s: (0.0, 60.0),
            max_chunks: 48,
            size_jitter: 0.3,
            history_len: 8,
        }
    }
}

/// Fuzzing configuration for the normalization check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FuzzConfig {
    pub n_samples: usize,
    /// Reject any output feature with |value| above this.
    pub threshold: f64,
    pub seed: u64,
    pub ranges: SamplerRanges,
    #[serde(default)]
    pub sandbox: Option<SandboxPolicy>,
}

impl Default for FuzzConfig {
    fn default() -> Self {
        FuzzConfig {
            n_samples: 100,
            threshold: 100.0,
            seed: 0,
            ranges: SamplerRanges::default(),
            sandbox: None,
        }
    }
}

impl FuzzConfig {
    fn policy(&self) -> SandboxPolicy {
        self.sandbox.clone().unwrap_or_default()
    }
}

/// Draws one observation plus the execution context it is consistent with
/// (ladder choice, chunk sizes, streaming constants).
pub fn sample_observation(
    rng: &mut ChaCha20Rng,
    ranges: &SamplerRanges,
) -> (StreamObservation, ExecContext) {
    let low = crate::sim::BitrateLadder::low();
    let high = crate::sim::BitrateLadder::high();
    let ladder = if rng.gen_bool(0.5) { &low } else { &high };
    let chunk_s = crate::sim::DEFAULT_CHUNK_SEC;
    let h = ranges.history_len;
    let levels_kbps: Vec<f64> = ladder.levels_kbps().iter().map(|&k| k as f64).collect();
    let sizes: Vec<f64> = levels_kbps
        .iter()
        .map(|&k| {
            let jitter = rng.gen_range(-ranges.size_jitter..=ranges.size_jitter);
            k * chunk_s * 125.0 * (1.0 + jitter)
        })
        .collect();
    let obs = StreamObservation {
        throughput_hist_mbps: (0..h)
            .map(|_| rng.gen_range(ranges.throughput_mbps.0..=ranges.throughput_mbps.1))
            .collect(),
        download_time_hist_s: (0..h)
            .map(|_| rng.gen_range(ranges.download_s.0..=ranges.download_s.1))
            .collect(),
        next_sizes_bytes: sizes,
        buffer_s: rng.gen_range(ranges.buffer_s.0..=ranges.buffer_s.1),
        chunks_remaining: rng.gen_range(0..=ranges.max_chunks),
        last_level: rng.gen_range(0..levels_kbps.len()),
    };
    let ctx = ExecContext {
        levels_kbps,
        chunk_duration_s: chunk_s,
        buffer_cap_s: ranges.buffer_s.1,
        total_chunks: ranges.max_chunks,
        history_len: h,
    };
    (obs, ctx)
}

/// Outcome of one check on one candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "outcome")]
pub enum CheckOutcome {
    Pass,
    Fail { reason: String },
    /// Sandbox infrastructure fault, not the candidate's: excluded from
    /// accounting denominators only when the report is built with
    /// `exclude_infra`.
    Infra { reason: String },
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        matches!(self, CheckOutcome::Pass)
    }
}

fn probe_state(candidate: &CandidateDesign, policy: &SandboxPolicy) -> Result<(), String> {
    let ctx = ExecContext::probe_low();
    let program = StateProgram::compile(&candidate.source_text, policy, &ctx)
        .map_err(|e| e.reason())?;
    program
        .execute(&probe_observation(&ctx))
        .map(|_| ())
        .map_err(|e| e.reason())
}

fn probe_network(candidate: &CandidateDesign, policy: &SandboxPolicy) -> Result<(), String> {
    instantiate_network(candidate, (6, 8), 6, 0, policy)
        .map(|_| ())
        .map_err(|e| e.reason())
}

/// Trial-run check with an injectable probe, retried once on infrastructure
/// faults. The outer `Err` of `probe` marks an infrastructure failure.
pub fn compile_check_with<F>(candidate: &mut CandidateDesign, mut probe: F) -> CheckOutcome
where
    F: FnMut(&CandidateDesign) -> Result<Result<(), String>, String>,
{
    let mut attempts = 0;
    let outcome = loop {
        attempts += 1;
        match probe(candidate) {
            Ok(Ok(())) => break CheckOutcome::Pass,
            Ok(Err(reason)) => break CheckOutcome::Fail { reason },
            Err(infra) if attempts >= 2 => break CheckOutcome::Infra { reason: infra },
            Err(_) => continue,
        }
    };
    match &outcome {
        CheckOutcome::Pass => {
            let _ = candidate.advance(Status::Compiled);
        }
        CheckOutcome::Fail { reason } => candidate.reject(reason.clone()),
        CheckOutcome::Infra { .. } => {}
    }
    outcome
}

/// Trial run of the candidate: a single probe execution (states) or an
/// instantiate-and-probe (networks). Any sandbox failure rejects.
pub fn compile_check(candidate: &mut CandidateDesign, policy: &SandboxPolicy) -> CheckOutcome {
    let policy = policy.clone();
    compile_check_with(candidate, move |c| {
        Ok(match c.kind {
            CandidateKind::State => probe_state(c, &policy),
            CandidateKind::Network => probe_network(c, &policy),
        })
    })
}

fn normalization_check_with_samples(
    candidate: &mut CandidateDesign,
    cfg: &FuzzConfig,
    samples: &[(StreamObservation, ExecContext)],
) -> CheckOutcome {
    assert_eq!(candidate.kind, CandidateKind::State);
    let policy = cfg.policy();
    let outcome = (|| {
        for (i, (obs, ctx)) in samples.iter().enumerate() {
            // Contexts differ per sample (ladder choice), so each sample
            // gets a freshly bound program; shape drift across samples is
            // caught later by shape-stability checks, not here.
            let program = match StateProgram::compile(&candidate.source_text, &policy, ctx) {
                Ok(p) => p,
                Err(e) => {
                    return CheckOutcome::Fail {
                        reason: format!("execution error under fuzz: {} (sample {i})", e.reason()),
                    }
                }
            };
            let tensor = match program.execute(obs) {
                Ok(t) => t,
                Err(_) => {
                    return CheckOutcome::Fail {
                        reason: format!("execution error under fuzz (sample {i})"),
                    }
                }
            };
            if !tensor.all_finite() {
                return CheckOutcome::Fail {
                    reason: format!("non-finite feature value (sample {i})"),
                };
            }
            let max_abs = tensor.max_abs();
            if max_abs > cfg.threshold {
                return CheckOutcome::Fail {
                    reason: format!(
                        "feature value {max_abs:.3e} exceeds threshold {} (sample {i})",
                        cfg.threshold
                    ),
                };
            }
        }
        CheckOutcome::Pass
    })();
    match &outcome {
        CheckOutcome::Pass => {
            let _ = candidate.advance(Status::Normalized);
        }
        CheckOutcome::Fail { reason } => candidate.reject(reason.clone()),
        CheckOutcome::Infra { .. } => {}
    }
    outcome
}

fn draw_samples(cfg: &FuzzConfig) -> Vec<(StreamObservation, ExecContext)> {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    (0..cfg.n_samples)
        .map(|_| sample_observation(&mut rng, &cfg.ranges))
        .collect()
}

/// Fuzzes a compiled state candidate with `cfg.n_samples` random
/// observations; fails if any output feature exceeds the threshold in
/// magnitude or is non-finite. Deterministic per seed.
pub fn normalization_check(candidate: &mut CandidateDesign, cfg: &FuzzConfig) -> CheckOutcome {
    normalization_check_with_samples(candidate, cfg, &draw_samples(cfg))
}

/// Per-candidate record in a filter report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateOutcome {
    pub id: String,
    pub kind: CandidateKind,
    pub compile: CheckOutcome,
    /// Present only for state candidates that passed the compile check.
    pub normalization: Option<CheckOutcome>,
}

/// Batch accounting after both pre-checks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterReport {
    /// Requested generations (parse failures count against this total).
    pub total: usize,
    pub compilable: usize,
    /// `None` when the batch contains no state candidates.
    pub well_normalized: Option<usize>,
    pub infra_errors: usize,
    pub outcomes: Vec<CandidateOutcome>,
}

impl FilterReport {
    /// Reference-style accounting row: total, compilable, well-normalized.
    pub fn table_row(&self, label: &str) -> Vec<String> {
        vec![
            label.to_string(),
            report::thousands(self.total),
            report::count_pct(self.compilable, self.total),
            match self.well_normalized {
                Some(n) => report::count_pct(n, self.total),
                None => "n/a".to_string(),
            },
        ]
    }

    pub fn validate_subset_law(&self) -> bool {
        let norm_ok = match self.well_normalized {
            Some(n) => n <= self.compilable,
            None => true,
        };
        norm_ok && self.compilable <= self.total
    }
}

/// Renders one or more filter reports in the reference table layout.
pub fn render_filter_table(rows: &[(String, &FilterReport)]) -> String {
    report::render_table(
        &["Batch", "Total", "Compilable", "Well Normalized"],
        &rows
            .iter()
            .map(|(label, r)| r.table_row(label))
            .collect::<Vec<_>>(),
    )
}

/// Runs the compile check on every candidate and the normalization check on
/// surviving state candidates. Candidate statuses advance in place.
pub fn run_prefilter(batch: &mut GenerationBatch, cfg: &FuzzConfig) -> FilterReport {
    let policy = cfg.policy();
    let samples = draw_samples(cfg);
    let mut outcomes = Vec::with_capacity(batch.candidates.len());
    let mut compilable = 0;
    let mut normalized = 0;
    let mut infra = 0;
    let mut any_state = false;
    for candidate in &mut batch.candidates {
        let compile = compile_check(candidate, &policy);
        match &compile {
            CheckOutcome::Pass => compilable += 1,
            CheckOutcome::Infra { .. } => infra += 1,
            CheckOutcome::Fail { .. } => {}
        }
        let normalization = if candidate.kind == CandidateKind::State {
            any_state = true;
            if compile.passed() {
                let out = normalization_check_with_samples(candidate, cfg, &samples);
                if out.passed() {
                    normalized += 1;
                }
                Some(out)
            } else {
                None
            }
        } else {
            None
        };
        outcomes.push(CandidateOutcome {
            id: candidate.id.clone(),
            kind: candidate.kind,
            compile,
            normalization,
        });
    }
    FilterReport {
        total: batch.n_requested,
        compilable,
        well_normalized: if any_state { Some(normalized) } else { None },
        infra_errors: infra,
        outcomes,
    }
}
