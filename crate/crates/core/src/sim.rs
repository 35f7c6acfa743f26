//! Chunk-level trace-driven streaming simulator.
//!
//! A session downloads fixed-duration video chunks over a throughput trace.
//! Download times are the exact solution of integrating link capacity over
//! the piecewise-constant (cyclically extended) trace. Buffer dynamics per
//! chunk:
//!
//! ```text
//! rebuffer = max(download - buffer, 0)
//! buffer'  = max(buffer - download, 0) + chunk_duration
//! idle     = max(buffer' - buffer_cap, 0)      // wait until the chunk fits
//! ```
//!
//! The per-chunk reward is the linear QoE: bitrate utility in Mbps, minus a
//! rebuffering penalty, minus the magnitude of the bitrate switch.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::Trace;

/// Default rebuffering penalty (Mbps of quality per stalled second).
pub const DEFAULT_REBUF_PENALTY: f64 = 4.3;
/// Default chunk duration in seconds.
pub const DEFAULT_CHUNK_SEC: f64 = 4.0;
/// Default history window length H.
pub const DEFAULT_HISTORY_LEN: usize = 8;
/// Default playback buffer cap in seconds.
pub const DEFAULT_BUFFER_CAP_S: f64 = 60.0;
/// Default video length in chunks.
pub const DEFAULT_N_CHUNKS: usize = 48;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("bitrate ladder invalid: {0}")]
    BadLadder(String),
    #[error("manifest invalid: {0}")]
    BadManifest(String),
    #[error("chunk size must be > 0")]
    ZeroSize,
    #[error("link permanently dead: trace {0} has zero throughput over a full cycle")]
    DeadLink(String),
    #[error("session already finished")]
    SessionDone,
    #[error("level {level} out of range (ladder has {n_levels})")]
    BadLevel { level: usize, n_levels: usize },
    #[error("jitter must be in [0, 0.5), got {0}")]
    BadJitter(f64),
    #[error("policy failed at chunk {chunk}: {reason}")]
    Policy { chunk: usize, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest parse error: {0}")]
    Parse(String),
}

/// Ascending encoding bitrates a video is available in.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitrateLadder {
    levels_kbps: Vec<u32>,
}

impl BitrateLadder {
    pub fn new(levels_kbps: Vec<u32>) -> Result<Self, SimError> {
        if levels_kbps.len() < 2 {
            return Err(SimError::BadLadder("need at least 2 levels".into()));
        }
        if !levels_kbps.windows(2).all(|w| w[1] > w[0]) {
            return Err(SimError::BadLadder("levels must be strictly ascending".into()));
        }
        Ok(BitrateLadder { levels_kbps })
    }

    /// Broadband/satellite ladder.
    pub fn low() -> Self {
        BitrateLadder::new(vec![300, 750, 1200, 1850, 2850, 4300]).unwrap()
    }

    /// Elevated ladder for high-bandwidth cellular environments.
    pub fn high() -> Self {
        BitrateLadder::new(vec![1850, 2850, 4300, 12_000, 24_000, 53_000]).unwrap()
    }

    pub fn by_id(id: &str) -> Option<Self> {
        match id {
            "low" => Some(Self::low()),
            "high" => Some(Self::high()),
            _ => None,
        }
    }

    pub fn levels_kbps(&self) -> &[u32] {
        &self.levels_kbps
    }

    pub fn n_levels(&self) -> usize {
        self.levels_kbps.len()
    }

    pub fn kbps(&self, level: usize) -> u32 {
        self.levels_kbps[level]
    }

    pub fn mbps(&self, level: usize) -> f64 {
        self.levels_kbps[level] as f64 / 1000.0
    }
}

/// Per-level, per-chunk sizes of one encoded video.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VideoManifest {
    pub n_chunks: usize,
    pub chunk_duration_s: f64,
    /// `sizes_bytes[level][chunk]`, strictly increasing across levels.
    pub sizes_bytes: Vec<Vec<u64>>,
}

impl VideoManifest {
    pub fn validate(&self, ladder: &BitrateLadder) -> Result<(), SimError> {
        if self.sizes_bytes.len() != ladder.n_levels() {
            return Err(SimError::BadManifest(format!(
                "size matrix has {} levels, ladder has {}",
                self.sizes_bytes.len(),
                ladder.n_levels()
            )));
        }
        for (l, row) in self.sizes_bytes.iter().enumerate() {
            if row.len() != self.n_chunks {
                return Err(SimError::BadManifest(format!(
                    "level {l} has {} chunks, expected {}",
                    row.len(),
                    self.n_chunks
                )));
            }
            if row.iter().any(|&s| s == 0) {
                return Err(SimError::BadManifest(format!("level {l} has a zero-size chunk")));
            }
        }
        for c in 0..self.n_chunks {
            for l in 1..self.sizes_bytes.len() {
                if self.sizes_bytes[l][c] <= self.sizes_bytes[l - 1][c] {
                    return Err(SimError::BadManifest(format!(
                        "chunk {c}: size not increasing from level {} to {}",
                        l - 1,
                        l
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), SimError> {
        let text = toml::to_string(self).map_err(|e| SimError::Parse(e.to_string()))?;
        Ok(std::fs::write(path, text)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| SimError::Parse(e.to_string()))
    }
}

/// Generates a manifest for an arbitrary ladder: nominal size
/// `kbps * duration * 125` bytes per chunk, with optional per-chunk
/// multiplicative jitter. Per-chunk monotonicity across levels is enforced
/// by resampling.
pub fn synth_manifest(
    ladder: &BitrateLadder,
    n_chunks: usize,
    chunk_duration_s: f64,
    jitter: f64,
    seed: u64,
) -> Result<VideoManifest, SimError> {
    if !(0.0..0.5).contains(&jitter) {
        return Err(SimError::BadJitter(jitter));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut sizes: Vec<Vec<u64>> = vec![vec![0; n_chunks]; ladder.n_levels()];
    for c in 0..n_chunks {
        for l in 0..ladder.n_levels() {
            let nominal = ladder.kbps(l) as f64 * chunk_duration_s * 125.0;
            let mut size;
            loop {
                let u = if jitter == 0.0 {
                    0.0
                } else {
                    rng.gen_range(-jitter..=jitter)
                };
                size = (nominal * (1.0 + u)).round().max(1.0) as u64;
                if l == 0 || size > sizes[l - 1][c] {
                    break;
                }
            }
            sizes[l][c] = size;
        }
    }
    let m = VideoManifest {
        n_chunks,
        chunk_duration_s,
        sizes_bytes: sizes,
    };
    m.validate(ladder)?;
    Ok(m)
}

/// Everything a state function may see after a chunk finishes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamObservation {
    /// Last H measured mean download throughputs, oldest first, zero-padded.
    pub throughput_hist_mbps: Vec<f64>,
    /// Last H chunk download times, oldest first, zero-padded.
    pub download_time_hist_s: Vec<f64>,
    /// Sizes of the next chunk at each ladder level (zeros once done).
    pub next_sizes_bytes: Vec<f64>,
    pub buffer_s: f64,
    pub chunks_remaining: usize,
    pub last_level: usize,
}

/// Outcome of downloading one chunk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub download_time_s: f64,
    pub rebuffer_s: f64,
    pub idle_wait_s: f64,
    pub reward: f64,
    pub done: bool,
}

/// Simulator knobs shared across sessions.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SimConfig {
    pub history_len: usize,
    pub buffer_cap_s: f64,
    /// Rebuffering penalty coefficient in the QoE.
    pub rebuf_penalty: f64,
    /// Ladder index assumed "previous" for the very first chunk.
    pub initial_level: usize,
    /// Seconds of video pre-buffered before the first chunk.
    pub initial_buffer_s: f64,
    /// Offset into the trace at which the session starts.
    pub trace_start_s: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            history_len: DEFAULT_HISTORY_LEN,
            buffer_cap_s: DEFAULT_BUFFER_CAP_S,
            rebuf_penalty: DEFAULT_REBUF_PENALTY,
            initial_level: 0,
            initial_buffer_s: 0.0,
            trace_start_s: 0.0,
        }
    }
}

/// Exact download of `size_bytes` starting at `start_time_s`: walks the
/// piecewise-constant trace (cyclically extended) until the integral of
/// capacity equals the chunk size. Returns `(duration_s, mean_mbps)`.
pub fn download_chunk(
    trace: &Trace,
    size_bytes: u64,
    start_time_s: f64,
) -> Result<(f64, f64), SimError> {
    if size_bytes == 0 {
        return Err(SimError::ZeroSize);
    }
    let megabits_needed = size_bytes as f64 * 8.0 / 1e6;
    let cycle = trace.duration_s();

    // Degenerate single-sample trace: constant rate forever.
    if cycle <= 0.0 {
        let rate = trace.samples[0].1;
        if rate <= 0.0 {
            return Err(SimError::DeadLink(trace.id.clone()));
        }
        let d = megabits_needed / rate;
        return Ok((d, size_bytes as f64 * 8.0 / 1e6 / d));
    }

    if trace.megabits_per_cycle() <= 0.0 {
        return Err(SimError::DeadLink(trace.id.clone()));
    }

    let first = trace.samples[0].0;
    let mut remaining = megabits_needed;
    let mut elapsed = 0.0;

    // Current position on the trace's own axis.
    let mut phase = trace.wrap_time(start_time_s);
    // Index of the segment containing `phase`.
    let mut seg = trace.samples.partition_point(|&(t, _)| t <= phase) - 1;

    loop {
        let rate = trace.samples[seg].1;
        let seg_end = if seg + 1 < trace.samples.len() {
            trace.samples[seg + 1].0
        } else {
            // Last sample extends to the end of the cycle (zero length);
            // wraps immediately.
            trace.samples[seg].0
        };
        let span = (seg_end - phase).max(0.0);
        if rate > 0.0 {
            let finish = remaining / rate;
            if finish <= span {
                elapsed += finish;
                let dur = elapsed;
                return Ok((dur, megabits_needed / dur));
            }
            remaining -= rate * span;
        }
        elapsed += span;
        // Advance to the next segment, wrapping at the end of the cycle.
        seg += 1;
        if seg + 1 >= trace.samples.len() {
            seg = 0;
            phase = first;
        } else {
            phase = trace.samples[seg].0;
        }
    }
}

/// Linear QoE reward for one chunk: bitrate utility minus rebuffer penalty
/// minus switch magnitude, all in Mbps units.
pub fn qoe_lin(level_kbps: u32, prev_level_kbps: u32, rebuffer_s: f64, rebuf_penalty: f64) -> f64 {
    let level_mbps = level_kbps as f64 / 1000.0;
    let prev_mbps = prev_level_kbps as f64 / 1000.0;
    level_mbps - rebuf_penalty * rebuffer_s - (level_mbps - prev_mbps).abs()
}

/// One streaming session: a state machine over (clock, buffer, histories).
#[derive(Debug, Clone)]
pub struct Session<'a> {
    trace: &'a Trace,
    manifest: &'a VideoManifest,
    ladder: &'a BitrateLadder,
    cfg: SimConfig,
    clock_s: f64,
    buffer_s: f64,
    chunk_index: usize,
    last_level: usize,
    thr_hist: Vec<f64>,
    dl_hist: Vec<f64>,
    total_download_s: f64,
    total_idle_s: f64,
    total_rebuffer_s: f64,
}

impl<'a> Session<'a> {
    pub fn new(
        trace: &'a Trace,
        manifest: &'a VideoManifest,
        ladder: &'a BitrateLadder,
        cfg: SimConfig,
    ) -> Result<Self, SimError> {
        manifest.validate(ladder)?;
        if cfg.initial_level >= ladder.n_levels() {
            return Err(SimError::BadLevel {
                level: cfg.initial_level,
                n_levels: ladder.n_levels(),
            });
        }
        if !(0.0..=cfg.buffer_cap_s).contains(&cfg.initial_buffer_s) {
            return Err(SimError::BadManifest(format!(
                "initial buffer {} outside [0, {}]",
                cfg.initial_buffer_s, cfg.buffer_cap_s
            )));
        }
        Ok(Session {
            trace,
            manifest,
            ladder,
            cfg,
            clock_s: 0.0,
            buffer_s: cfg.initial_buffer_s,
            chunk_index: 0,
            last_level: cfg.initial_level,
            thr_hist: vec![0.0; cfg.history_len],
            dl_hist: vec![0.0; cfg.history_len],
            total_download_s: 0.0,
            total_idle_s: 0.0,
            total_rebuffer_s: 0.0,
        })
    }

    pub fn done(&self) -> bool {
        self.chunk_index >= self.manifest.n_chunks
    }

    pub fn clock_s(&self) -> f64 {
        self.clock_s
    }

    pub fn buffer_s(&self) -> f64 {
        self.buffer_s
    }

    pub fn chunk_index(&self) -> usize {
        self.chunk_index
    }

    pub fn totals(&self) -> (f64, f64, f64) {
        (self.total_download_s, self.total_idle_s, self.total_rebuffer_s)
    }

    /// Snapshot visible to state functions.
    pub fn observation(&self) -> StreamObservation {
        let next_sizes = if self.done() {
            vec![0.0; self.ladder.n_levels()]
        } else {
            (0..self.ladder.n_levels())
                .map(|l| self.manifest.sizes_bytes[l][self.chunk_index] as f64)
                .collect()
        };
        StreamObservation {
            throughput_hist_mbps: self.thr_hist.clone(),
            download_time_hist_s: self.dl_hist.clone(),
            next_sizes_bytes: next_sizes,
            buffer_s: self.buffer_s,
            chunks_remaining: self.manifest.n_chunks - self.chunk_index,
            last_level: self.last_level,
        }
    }

    /// Downloads the next chunk at `level` and advances the session.
    pub fn step(&mut self, level: usize) -> Result<(StepResult, StreamObservation), SimError> {
        if self.done() {
            return Err(SimError::SessionDone);
        }
        if level >= self.ladder.n_levels() {
            return Err(SimError::BadLevel {
                level,
                n_levels: self.ladder.n_levels(),
            });
        }
        let size = self.manifest.sizes_bytes[level][self.chunk_index];
        let (download_time_s, mean_mbps) =
            download_chunk(self.trace, size, self.cfg.trace_start_s + self.clock_s)?;

        let rebuffer_s = (download_time_s - self.buffer_s).max(0.0);
        let after = (self.buffer_s - download_time_s).max(0.0) + self.manifest.chunk_duration_s;
        let idle_wait_s = (after - self.cfg.buffer_cap_s).max(0.0);
        self.buffer_s = after.min(self.cfg.buffer_cap_s);
        self.clock_s += download_time_s + idle_wait_s;

        let reward = qoe_lin(
            self.ladder.kbps(level),
            self.ladder.kbps(self.last_level),
            rebuffer_s,
            self.cfg.rebuf_penalty,
        );

        self.thr_hist.rotate_left(1);
        *self.thr_hist.last_mut().unwrap() = mean_mbps;
        self.dl_hist.rotate_left(1);
        *self.dl_hist.last_mut().unwrap() = download_time_s;

        self.last_level = level;
        self.chunk_index += 1;
        self.total_download_s += download_time_s;
        self.total_idle_s += idle_wait_s;
        self.total_rebuffer_s += rebuffer_s;

        let result = StepResult {
            download_time_s,
            rebuffer_s,
            idle_wait_s,
            reward,
            done: self.done(),
        };
        Ok((result, self.observation()))
    }
}

/// One line of a rollout log.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepRecord {
    pub chunk: usize,
    pub level: usize,
    pub download_time_s: f64,
    pub rebuffer_s: f64,
    pub reward: f64,
}

#[derive(Debug, Clone)]
pub struct RolloutSummary {
    pub total_reward: f64,
    pub mean_reward: f64,
    pub steps: Vec<StepRecord>,
}

/// Streams a fresh session to completion under `policy`. Policy errors are
/// surfaced with the failing chunk index attached.
pub fn rollout<F>(mut policy: F, mut session: Session<'_>) -> Result<RolloutSummary, SimError>
where
    F: FnMut(&StreamObservation) -> Result<usize, String>,
{
    let mut steps = Vec::with_capacity(session.manifest.n_chunks);
    let mut obs = session.observation();
    while !session.done() {
        let chunk = session.chunk_index();
        let level = policy(&obs).map_err(|reason| SimError::Policy { chunk, reason })?;
        let (res, next_obs) = session.step(level)?;
        steps.push(StepRecord {
            chunk,
            level,
            download_time_s: res.download_time_s,
            rebuffer_s: res.rebuffer_s,
            reward: res.reward,
        });
        obs = next_obs;
    }
    let total_reward: f64 = steps.iter().map(|s| s.reward).sum();
    Ok(RolloutSummary {
        total_reward,
        mean_reward: total_reward / steps.len().max(1) as f64,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::SourceTag;

    /// Time-stepped integration of the download. Rates are sampled at step
    /// midpoints so grid-aligned trace breakpoints never fall inside the
    /// sampling ambiguity; the final partial step is solved exactly.
    pub fn download_oracle(trace: &Trace, size_bytes: u64, start: f64, dt: f64) -> f64 {
        let megabits = size_bytes as f64 * 8.0 / 1e6;
        let mut remaining = megabits;
        let mut k: u64 = 0;
        loop {
            let rate = trace.throughput_at(start + (k as f64 + 0.5) * dt);
            let step_megabits = rate * dt;
            if rate > 0.0 && step_megabits >= remaining {
                return k as f64 * dt + remaining / rate;
            }
            remaining -= step_megabits;
            k += 1;
            assert!(k < 100_000_000, "oracle ran away");
        }
    }

    fn low_ladder_manifest() -> (BitrateLadder, VideoManifest) {
        let ladder = BitrateLadder::low();
        let m = synth_manifest(&ladder, 48, 4.0, 0.0, 0).unwrap();
        (ladder, m)
    }

    #[test]
    fn constant_rate_download() {
        let trace = Trace::constant("c2", 1000.0, 2.0);
        let (d, thr) = download_chunk(&trace, 1_000_000, 0.0).unwrap();
        assert!((d - 4.0).abs() < 1e-12); // 8 Mbit over 2 Mbps
        assert!((thr - 2.0).abs() < 1e-12);
    }

    #[test]
    fn stall_and_resume_download() {
        // 8 Mbit in [0,1), stall in [1,2), 8 Mbit in [2,3): 16 Mbit in 3 s.
        let trace = Trace::new(
            "burst",
            vec![(0.0, 8.0), (1.0, 0.0), (2.0, 8.0), (3.0, 8.0)],
            SourceTag::Custom,
        )
        .unwrap();
        let (d, _) = download_chunk(&trace, 2_000_000, 0.0).unwrap();
        assert!((d - 3.0).abs() < 1e-9, "got {d}");
        let oracle = download_oracle(&trace, 2_000_000, 0.0, 0.001);
        assert!((d - oracle).abs() < 1e-6);
    }

    #[test]
    fn zero_size_rejected() {
        let trace = Trace::constant("c", 10.0, 1.0);
        assert!(matches!(download_chunk(&trace, 0, 0.0), Err(SimError::ZeroSize)));
    }

    #[test]
    fn dead_link_detected() {
        let trace = Trace::new("dead", vec![(0.0, 0.0), (10.0, 0.0)], SourceTag::Custom).unwrap();
        assert!(matches!(
            download_chunk(&trace, 1000, 0.0),
            Err(SimError::DeadLink(_))
        ));
    }

    #[test]
    fn download_wraps_cyclically() {
        // 1 Mbps for 10 s then 9 Mbps for 10 s; cycle carries 100 Mbit.
        let trace = Trace::new(
            "cyc",
            vec![(0.0, 1.0), (10.0, 9.0), (20.0, 1.0)],
            SourceTag::Custom,
        )
        .unwrap();
        // 150 Mbit starting at t=0: one full cycle (20 s) + 10 s at 1 Mbps
        // + 40/9 s at 9 Mbps.
        let (d, _) = download_chunk(&trace, 150_000_000 / 8, 0.0).unwrap();
        let expect = 20.0 + 10.0 + 40.0 / 9.0;
        assert!((d - expect).abs() < 1e-9, "got {d}, want {expect}");
    }

    #[test]
    fn qoe_lin_worked_examples() {
        let mu = DEFAULT_REBUF_PENALTY;
        assert!((qoe_lin(4300, 2850, 0.0, mu) - 2.85).abs() < 1e-12);
        assert!((qoe_lin(300, 300, 0.0, mu) - 0.3).abs() < 1e-12);
        assert!((qoe_lin(300, 750, 2.0, mu) - (-8.75)).abs() < 1e-12);
    }

    #[test]
    fn buffer_recursion_fixtures() {
        // Hand-computed cases for the buffer/rebuffer/idle rules.
        let ladder = BitrateLadder::low();
        let m = synth_manifest(&ladder, 4, 4.0, 0.0, 0).unwrap();
        // Level 0 chunk is 150,000 bytes = 1.2 Mbit.
        // Case 1: buffer 10, download 4 (rate 0.3 Mbps) -> rebuffer 0, buffer stays 10.
        let trace = Trace::constant("r1", 1000.0, 0.3);
        let mut s = Session::new(&trace, &m, &ladder, SimConfig::default()).unwrap();
        s.buffer_s = 10.0;
        let (r, _) = s.step(0).unwrap();
        assert!((r.download_time_s - 4.0).abs() < 1e-12);
        assert_eq!(r.rebuffer_s, 0.0);
        assert!((s.buffer_s() - 10.0).abs() < 1e-12);

        // Case 2: buffer 1, download 4 -> rebuffer 3, buffer = chunk duration.
        let mut s = Session::new(&trace, &m, &ladder, SimConfig::default()).unwrap();
        s.buffer_s = 1.0;
        let (r, _) = s.step(0).unwrap();
        assert!((r.rebuffer_s - 3.0).abs() < 1e-12);
        assert!((s.buffer_s() - 4.0).abs() < 1e-12);

        // Case 3: buffer at cap 60, download 1 (rate 1.2 Mbps), chunk 4 ->
        // idle 3 so the buffer stays at the cap.
        let trace = Trace::constant("r3", 1000.0, 1.2);
        let mut s = Session::new(&trace, &m, &ladder, SimConfig::default()).unwrap();
        s.buffer_s = 60.0;
        let (r, _) = s.step(0).unwrap();
        assert!((r.download_time_s - 1.0).abs() < 1e-12);
        assert!((r.idle_wait_s - 3.0).abs() < 1e-12);
        assert!((s.buffer_s() - 60.0).abs() < 1e-12);
    }

    #[test]
    fn step_after_done_errors() {
        let ladder = BitrateLadder::low();
        let m = synth_manifest(&ladder, 1, 4.0, 0.0, 0).unwrap();
        let trace = Trace::constant("c", 100.0, 10.0);
        let mut s = Session::new(&trace, &m, &ladder, SimConfig::default()).unwrap();
        let (r, _) = s.step(0).unwrap();
        assert!(r.done);
        assert!(matches!(s.step(0), Err(SimError::SessionDone)));
    }

    #[test]
    fn synth_manifest_nominal_and_deterministic() {
        let ladder = BitrateLadder::low();
        let m = synth_manifest(&ladder, 10, 4.0, 0.0, 0).unwrap();
        // 300 kbps * 4 s * 125 = 150,000 bytes.
        assert_eq!(m.sizes_bytes[0][0], 150_000);
        let a = synth_manifest(&ladder, 10, 4.0, 0.1, 42).unwrap();
        let b = synth_manifest(&ladder, 10, 4.0, 0.1, 42).unwrap();
        assert_eq!(a.sizes_bytes, b.sizes_bytes);
    }

    #[test]
    fn synth_manifest_monotone_under_heavy_jitter() {
        let low = BitrateLadder::low();
        let high = BitrateLadder::high();
        for seed in 0..500u64 {
            for ladder in [&low, &high] {
                let m = synth_manifest(ladder, 4, 4.0, 0.49, seed).unwrap();
                m.validate(ladder).unwrap();
            }
        }
    }

    #[test]
    fn rollout_lowest_level_has_no_smoothness_penalty() {
        let (ladder, m) = low_ladder_manifest();
        let trace = Trace::constant("c", 1000.0, 5.0);
        let s = Session::new(&trace, &m, &ladder, SimConfig::default()).unwrap();
        let out = rollout(|_| Ok(0), s).unwrap();
        // After chunk 1 every reward is exactly the level utility.
        for rec in &out.steps[1..] {
            assert!((rec.reward - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn rollout_top_level_on_fast_link_never_rebuffers() {
        let (ladder, m) = low_ladder_manifest();
        let trace = Trace::constant("fast", 1000.0, 5.0);
        let cfg = SimConfig {
            initial_level: 5,
            initial_buffer_s: 4.0,
            ..SimConfig::default()
        };
        let s = Session::new(&trace, &m, &ladder, cfg).unwrap();
        let out = rollout(|_| Ok(5), s).unwrap();
        // 4.3 Mbps * 4 s / 5 Mbps = 3.44 s download < 4 s playback per chunk.
        assert!(out.steps.iter().all(|r| r.rebuffer_s == 0.0));
        assert!((out.mean_reward - 4.3).abs() < 1e-12);
    }

    #[test]
    fn rollout_policy_failure_names_chunk() {
        let (ladder, m) = low_ladder_manifest();
        let trace = Trace::constant("c", 1000.0, 5.0);
        let s = Session::new(&trace, &m, &ladder, SimConfig::default()).unwrap();
        let mut n = 0;
        let err = rollout(
            |_| {
                if n == 3 {
                    Err("boom".to_string())
                } else {
                    n += 1;
                    Ok(0)
                }
            },
            s,
        )
        .unwrap_err();
        match err {
            SimError::Policy { chunk, reason } => {
                assert_eq!(chunk, 3);
                assert_eq!(reason, "boom");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn session_conservation_and_buffer_bounds() {
        let ladder = BitrateLadder::low();
        let m = synth_manifest(&ladder, 48, 4.0, 0.2, 9).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for case in 0..30 {
            let samples: Vec<(f64, f64)> = (0..20)
                .map(|i| (i as f64 * 2.0, rng.gen_range(0.2..8.0)))
                .collect();
            let trace = Trace::new(format!("t{case}"), samples, SourceTag::Custom).unwrap();
            let mut s = Session::new(&trace, &m, &ladder, SimConfig::default()).unwrap();
            let mut sum_dl = 0.0;
            let mut sum_idle = 0.0;
            let mut sum_rebuf = 0.0;
            let mut expected_rebuf = 0.0;
            while !s.done() {
                let before = s.buffer_s();
                let level = rng.gen_range(0..ladder.n_levels());
                let (r, _) = s.step(level).unwrap();
                expected_rebuf += (r.download_time_s - before).max(0.0);
                sum_dl += r.download_time_s;
                sum_idle += r.idle_wait_s;
                sum_rebuf += r.rebuffer_s;
                assert!(s.buffer_s() >= 0.0 && s.buffer_s() <= 60.0 + 1e-12);
            }
            assert!((s.clock_s() - (sum_dl + sum_idle)).abs() < 1e-9);
            assert!((sum_rebuf - expected_rebuf).abs() < 1e-9);
            let (td, ti, tr) = s.totals();
            assert!((td - sum_dl).abs() < 1e-12);
            assert!((ti - sum_idle).abs() < 1e-12);
            assert!((tr - sum_rebuf).abs() < 1e-12);
        }
    }

    #[test]
    fn download_monotone_in_capacity() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..50 {
            let samples: Vec<(f64, f64)> = (0..10)
                .map(|i| (i as f64, rng.gen_range(0.1..10.0)))
                .collect();
            let base = Trace::new("b", samples.clone(), SourceTag::Custom).unwrap();
            let scaled = Trace::new(
                "s",
                samples.iter().map(|&(t, v)| (t, v * 1.5)).collect(),
                SourceTag::Custom,
            )
            .unwrap();
            let size = rng.gen_range(10_000..5_000_000);
            let start = rng.gen_range(0.0..20.0);
            let (d1, _) = download_chunk(&base, size, start).unwrap();
            let (d2, _) = download_chunk(&scaled, size, start).unwrap();
            assert!(d2 <= d1 + 1e-12);
        }
    }

    #[test]
    fn qoe_decomposition_over_random_rollouts() {
        let ladder = BitrateLadder::low();
        let m = synth_manifest(&ladder, 24, 4.0, 0.1, 3).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        for case in 0..20 {
            let samples: Vec<(f64, f64)> = (0..15)
                .map(|i| (i as f64 * 3.0, rng.gen_range(0.1..9.0)))
                .collect();
            let trace = Trace::new(format!("q{case}"), samples, SourceTag::Custom).unwrap();
            let cfg = SimConfig::default();
            let s = Session::new(&trace, &m, &ladder, cfg).unwrap();
            let mut levels = vec![cfg.initial_level];
            let mut rng2 = ChaCha20Rng::seed_from_u64(case);
            let out = rollout(
                |_| {
                    let l = rng2.gen_range(0..6);
                    levels.push(l);
                    Ok(l)
                },
                s,
            )
            .unwrap();
            let utility: f64 = out.steps.iter().map(|r| ladder.mbps(r.level)).sum();
            let rebuf: f64 = out.steps.iter().map(|r| r.rebuffer_s).sum();
            let switches: f64 = levels
                .windows(2)
                .map(|w| (ladder.mbps(w[1]) - ladder.mbps(w[0])).abs())
                .sum();
            let decomposed = utility - DEFAULT_REBUF_PENALTY * rebuf - switches;
            assert!((out.total_reward - decomposed).abs() < 1e-9);
        }
    }
}
