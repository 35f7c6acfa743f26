//! Network throughput traces: ingestion, scaling, splits, and statistics.
//!
//! A trace file is two whitespace-separated columns, one sample per line:
//!
//! ```text
//! <time_s> <throughput_mbps>
//! ```
//!
//! Traces are extended cyclically when a streaming session outlasts them, so
//! the simulator can replay short recordings indefinitely.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace {id}: {reason}")]
    Invalid { id: String, reason: String },
    #[error("trace directory not found: {0}")]
    MissingDirectory(PathBuf),
    #[error("no traces found in {dir} ({rejected} file(s) rejected)")]
    NoTraces { dir: PathBuf, rejected: usize },
    #[error("dataset split is empty")]
    EmptySplit,
    #[error("need at least 2 traces to split, got {0}")]
    TooFewTraces(usize),
    #[error("test fraction must be in (0, 1), got {0}")]
    BadFraction(f64),
    #[error("scale factor must be > 0, got {0}")]
    BadScale(f64),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
}

/// Which network environment a trace was recorded in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    Fcc,
    Starlink,
    Cellular4g,
    Cellular5g,
    Custom,
}

impl fmt::Display for SourceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SourceTag::Fcc => "fcc",
            SourceTag::Starlink => "starlink",
            SourceTag::Cellular4g => "cellular_4g",
            SourceTag::Cellular5g => "cellular_5g",
            SourceTag::Custom => "custom",
        };
        f.write_str(s)
    }
}

/// One network condition recording: throughput over time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trace {
    pub id: String,
    /// `(time_s, throughput_mbps)`, times strictly increasing.
    pub samples: Vec<(f64, f64)>,
    pub source_tag: SourceTag,
}

impl Trace {
    pub fn new(
        id: impl Into<String>,
        samples: Vec<(f64, f64)>,
        source_tag: SourceTag,
    ) -> Result<Self, TraceError> {
        let id = id.into();
        let invalid = |reason: &str| TraceError::Invalid {
            id: id.clone(),
            reason: reason.to_string(),
        };
        if samples.is_empty() {
            return Err(invalid("no samples"));
        }
        if samples[0].0 < 0.0 {
            return Err(invalid("first sample time is negative"));
        }
        for w in samples.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(invalid(&format!(
                    "timestamps not strictly increasing at t={}",
                    w[1].0
                )));
            }
        }
        for &(t, thr) in &samples {
            if !thr.is_finite() || thr < 0.0 {
                return Err(invalid(&format!("negative throughput at t={t}")));
            }
        }
        Ok(Trace {
            id,
            samples,
            source_tag,
        })
    }

    /// Constant-rate trace, convenient for fixtures.
    pub fn constant(id: impl Into<String>, duration_s: f64, mbps: f64) -> Self {
        Trace::new(id, vec![(0.0, mbps), (duration_s, mbps)], SourceTag::Custom)
            .expect("constant trace is valid")
    }

    /// Last timestamp minus first.
    pub fn duration_s(&self) -> f64 {
        self.samples.last().unwrap().0 - self.samples[0].0
    }

    /// Time-integral of throughput over one cycle, in megabits.
    pub fn megabits_per_cycle(&self) -> f64 {
        self.samples
            .windows(2)
            .map(|w| w[0].1 * (w[1].0 - w[0].0))
            .sum()
    }

    /// Duration-weighted mean throughput over one cycle. Zero-duration
    /// (single-sample) traces report their constant rate.
    pub fn mean_throughput_mbps(&self) -> f64 {
        let d = self.duration_s();
        if d <= 0.0 {
            self.samples[0].1
        } else {
            self.megabits_per_cycle() / d
        }
    }

    /// Maps an absolute time onto the trace's own time axis. Times within
    /// `[first, last]` map to themselves; anything outside wraps cyclically
    /// with period `last - first` onto `[first, last)`.
    pub fn wrap_time(&self, t: f64) -> f64 {
        let first = self.samples[0].0;
        let last = self.samples.last().unwrap().0;
        if (first..=last).contains(&t) {
            return t;
        }
        let cycle = last - first;
        if cycle <= 0.0 {
            return first;
        }
        let mut phase = (t - first) % cycle;
        if phase < 0.0 {
            phase += cycle;
        }
        first + phase
    }

    /// Throughput at time `t`: the value of the most recent sample at or
    /// before `t`, piecewise constant and right-continuous, with the trace
    /// repeated cyclically beyond its duration.
    pub fn throughput_at(&self, t: f64) -> f64 {
        let phase = self.wrap_time(t);
        // Index of the last sample with time <= phase.
        let idx = self.samples.partition_point(|&(st, _)| st <= phase);
        self.samples[idx.saturating_sub(1)].1
    }

    fn scale(&mut self, factor: f64) {
        for s in &mut self.samples {
            s.1 *= factor;
        }
    }
}

/// Trace file formats understood by [`ingest_directory`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceFormat {
    /// Canonical two-column "time_s throughput_mbps" layout.
    TimeMbps,
}

/// Result of ingesting a directory: parsed traces plus the per-file
/// diagnostics for everything that was rejected.
#[derive(Debug, Clone)]
pub struct IngestReport {
    /// Valid traces, sorted by id.
    pub traces: Vec<Trace>,
    /// `(file name, reason)` for files that failed to parse or validate.
    pub rejected: Vec<(String, String)>,
}

fn parse_trace_file(
    path: &Path,
    id: &str,
    format: TraceFormat,
    source_tag: SourceTag,
) -> Result<Trace, String> {
    let TraceFormat::TimeMbps = format;
    let text = std::fs::read_to_string(path).map_err(|e| format!("read failed: {e}"))?;
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (t, thr) = match (parts.next(), parts.next()) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(format!("line {}: expected two columns", lineno + 1)),
        };
        let t: f64 = t
            .parse()
            .map_err(|_| format!("line {}: bad time {t:?}", lineno + 1))?;
        let thr: f64 = thr
            .parse()
            .map_err(|_| format!("line {}: bad throughput {thr:?}", lineno + 1))?;
        samples.push((t, thr));
    }
    Trace::new(id, samples, source_tag).map_err(|e| e.to_string())
}

/// Reads every regular file in `path` as a trace, applying `scale_factor`
/// to all throughputs at ingestion (e.g. 1/8 for peak-hour satellite
/// capacity). Malformed files are reported per-file, never silently skipped.
pub fn ingest_directory(
    path: &Path,
    format: TraceFormat,
    scale_factor: f64,
    source_tag: SourceTag,
) -> Result<IngestReport, TraceError> {
    if scale_factor <= 0.0 || !scale_factor.is_finite() {
        return Err(TraceError::BadScale(scale_factor));
    }
    if !path.is_dir() {
        return Err(TraceError::MissingDirectory(path.to_path_buf()));
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| TraceError::Io {
            path: path.to_path_buf(),
            source: e,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    entries.sort();

    let mut traces = Vec::new();
    let mut rejected = Vec::new();
    for file in entries {
        let id = file
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        match parse_trace_file(&file, &id, format, source_tag) {
            Ok(mut t) => {
                t.scale(scale_factor);
                traces.push(t);
            }
            Err(reason) => rejected.push((id, reason)),
        }
    }
    traces.sort_by(|a, b| a.id.cmp(&b.id));
    if traces.is_empty() {
        return Err(TraceError::NoTraces {
            dir: path.to_path_buf(),
            rejected: rejected.len(),
        });
    }
    Ok(IngestReport { traces, rejected })
}

/// Deterministically drops whole traces (seeded shuffle) until the total
/// duration fits within `max_hours`. At least one trace is always kept.
pub fn subsample_to_hours(traces: Vec<Trace>, max_hours: f64, seed: u64) -> Vec<Trace> {
    let mut order: Vec<usize> = (0..traces.len()).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5b5a);
    order.shuffle(&mut rng);
    let budget_s = max_hours * 3600.0;
    let mut kept = Vec::new();
    let mut used = 0.0;
    for i in order {
        let d = traces[i].duration_s();
        if kept.is_empty() || used + d <= budget_s {
            used += d;
            kept.push(traces[i].clone());
        }
    }
    kept.sort_by(|a, b| a.id.cmp(&b.id));
    kept
}

/// A named train/test corpus with its ingestion scale and bitrate ladder.
#[derive(Debug, Clone)]
pub struct TraceDataset {
    pub name: String,
    pub train: Vec<Trace>,
    pub test: Vec<Trace>,
    /// Scale applied to throughputs at ingestion.
    pub scale_factor: f64,
    /// Which bitrate ladder this corpus is streamed against ("low"/"high").
    pub bitrate_ladder_id: String,
}

impl TraceDataset {
    pub fn validate(&self) -> Result<(), TraceError> {
        if self.scale_factor <= 0.0 {
            return Err(TraceError::BadScale(self.scale_factor));
        }
        let train_ids: BTreeSet<&str> = self.train.iter().map(|t| t.id.as_str()).collect();
        if let Some(t) = self.test.iter().find(|t| train_ids.contains(t.id.as_str())) {
            return Err(TraceError::Invalid {
                id: t.id.clone(),
                reason: "trace appears in both train and test splits".into(),
            });
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> &[Trace] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Aggregate statistics of one dataset split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_traces: usize,
    pub total_hours: f64,
    /// Duration-weighted mean throughput across the split.
    pub mean_throughput_mbps: f64,
}

/// Counts, summed hours, and duration-weighted mean throughput of a split.
pub fn dataset_stats(ds: &TraceDataset, split: Split) -> Result<DatasetStats, TraceError> {
    let traces = ds.split(split);
    if traces.is_empty() {
        return Err(TraceError::EmptySplit);
    }
    let total_s: f64 = traces.iter().map(|t| t.duration_s()).sum();
    let total_megabits: f64 = traces.iter().map(|t| t.megabits_per_cycle()).sum();
    let mean = if total_s > 0.0 {
        total_megabits / total_s
    } else {
        traces.iter().map(|t| t.mean_throughput_mbps()).sum::<f64>() / traces.len() as f64
    };
    Ok(DatasetStats {
        n_traces: traces.len(),
        total_hours: total_s / 3600.0,
        mean_throughput_mbps: mean,
    })
}

/// Seeded shuffle split into disjoint train/test sets; proportions within
/// one trace of `test_fraction`, both sides non-empty.
pub fn split_dataset(
    traces: Vec<Trace>,
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<Trace>, Vec<Trace>), TraceError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(TraceError::BadFraction(test_fraction));
    }
    if traces.len() < 2 {
        return Err(TraceError::TooFewTraces(traces.len()));
    }
    let n = traces.len();
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let test_idx: BTreeSet<usize> = order[..n_test].iter().copied().collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, t) in traces.into_iter().enumerate() {
        if test_idx.contains(&i) {
            test.push(t);
        } else {
            train.push(t);
        }
    }
    Ok((train, test))
}

/// On-disk dataset description: trace file lists plus ingestion parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub source_tag: SourceTag,
    pub format: TraceFormat,
    pub scale_factor: f64,
    pub bitrate_ladder_id: String,
    /// Paths relative to the manifest file's directory.
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self, TraceError> {
        let text = std::fs::read_to_string(path).map_err(|e| TraceError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        toml::from_str(&text).map_err(|e| TraceError::Manifest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TraceError> {
        let text = toml::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text).map_err(|e| TraceError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    /// Loads every referenced trace file, applying the manifest's scale.
    pub fn resolve(&self, base_dir: &Path) -> Result<TraceDataset, TraceError> {
        let load = |files: &[String]| -> Result<Vec<Trace>, TraceError> {
            let mut out = Vec::new();
            for f in files {
                let p = base_dir.join(f);
                let mut t = parse_trace_file(&p, f, self.format, self.source_tag).map_err(
                    |reason| TraceError::Invalid {
                        id: f.clone(),
                        reason,
                    },
                )?;
                t.scale(self.scale_factor);
                out.push(t);
            }
            Ok(out)
        };
        let ds = TraceDataset {
            name: self.name.clone(),
            train: load(&self.train)?,
            test: load(&self.test)?,
            scale_factor: self.scale_factor,
            bitrate_ladder_id: self.bitrate_ladder_id.clone(),
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Synthetic corpora shaped like the four reference environments.
///
/// The published corpora are not redistributable here, so these generators
/// produce seeded random-walk traces whose aggregate statistics (trace
/// counts, total hours, duration-weighted mean throughput) match the
/// reference table for each environment.
pub mod synth {
    use super::*;
    use rand::Rng;

    /// Aggregate targets for one environment.
    #[derive(Debug, Clone, Copy)]
    pub struct EnvProfile {
        pub tag: SourceTag,
        pub name: &'static str,
        pub n_train: usize,
        pub train_hours: f64,
        pub n_test: usize,
        pub test_hours: f64,
        pub mean_mbps: f64,
        pub ladder_id: &'static str,
        /// Full-scale training budget for this environment.
        pub train_epochs: usize,
        /// Epochs between checkpoint evaluations at full scale.
        pub test_interval: usize,
    }

    pub const FCC: EnvProfile = EnvProfile {
        tag: SourceTag::Fcc,
        name: "fcc",
        n_train: 85,
        train_hours: 10.0,
        n_test: 290,
        test_hours: 25.7,
        mean_mbps: 1.3,
        ladder_id: "low",
        train_epochs: 40_000,
        test_interval: 500,
    };
    pub const STARLINK: EnvProfile = EnvProfile {
        tag: SourceTag::Starlink,
        name: "starlink",
        n_train: 13,
        train_hours: 0.9,
        n_test: 12,
        test_hours: 0.8,
        mean_mbps: 1.6,
        ladder_id: "low",
        train_epochs: 4_000,
        test_interval: 100,
    };
    pub const CELLULAR_4G: EnvProfile = EnvProfile {
        tag: SourceTag::Cellular4g,
        name: "cellular_4g",
        n_train: 119,
        train_hours: 10.0,
        n_test: 121,
        test_hours: 10.0,
        mean_mbps: 19.8,
        ladder_id: "high",
        train_epochs: 40_000,
        test_interval: 500,
    };
    pub const CELLULAR_5G: EnvProfile = EnvProfile {
        tag: SourceTag::Cellular5g,
        name: "cellular_5g",
        n_train: 117,
        train_hours: 10.0,
        n_test: 119,
        test_hours: 10.0,
        mean_mbps: 30.2,
        ladder_id: "high",
        train_epochs: 40_000,
        test_interval: 500,
    };

    pub const ALL: [EnvProfile; 4] = [FCC, STARLINK, CELLULAR_4G, CELLULAR_5G];

    pub fn profile(name: &str) -> Option<EnvProfile> {
        ALL.iter().find(|p| p.name == name).copied()
    }

    fn walk_trace(
        id: String,
        tag: SourceTag,
        duration_s: f64,
        target_mean: f64,
        rng: &mut ChaCha20Rng,
    ) -> Trace {
        let step_s = 1.0;
        let n = (duration_s / step_s).round().max(2.0) as usize;
        let mut level = target_mean;
        let mut samples = Vec::with_capacity(n + 1);
        for i in 0..=n {
            samples.push(((i as f64) * step_s, level.max(0.01)));
            // Mean-reverting multiplicative walk keeps the signal positive and
            // loosely centred on the target.
            let noise: f64 = rng.gen_range(-0.25..0.25);
            level = (level * (1.0 + noise)) * 0.9 + target_mean * 0.1;
        }
        Trace::new(id, samples, tag).expect("synthetic trace is valid")
    }

    fn make_split(
        prefix: &str,
        profile: &EnvProfile,
        n: usize,
        hours: f64,
        seed: u64,
    ) -> Vec<Trace> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let total_s = hours * 3600.0;
        // Durations jittered around the mean, then renormalized so the split
        // total is exact.
        let mut durations: Vec<f64> = (0..n)
            .map(|_| 1.0 + rng.gen_range(-0.2..0.2))
            .collect();
        let sum: f64 = durations.iter().sum();
        for d in &mut durations {
            *d *= total_s / sum;
        }
        let mut traces: Vec<Trace> = durations
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                walk_trace(
                    format!("{}-{prefix}-{i:04}", profile.name),
                    profile.tag,
                    d,
                    profile.mean_mbps,
                    &mut rng,
                )
            })
            .collect();
        // Rescale throughputs so the duration-weighted mean is exact.
        let total_megabits: f64 = traces.iter().map(|t| t.megabits_per_cycle()).sum();
        let actual_total_s: f64 = traces.iter().map(|t| t.duration_s()).sum();
        let factor = profile.mean_mbps * actual_total_s / total_megabits;
        for t in &mut traces {
            t.scale(factor);
        }
        traces
    }

    /// Builds the full synthetic dataset for one environment.
    pub fn dataset(profile: &EnvProfile, seed: u64) -> TraceDataset {
        TraceDataset {
            name: profile.name.to_string(),
            train: make_split("train", profile, profile.n_train, profile.train_hours, seed),
            test: make_split(
                "test",
                profile,
                profile.n_test,
                profile.test_hours,
                seed ^ 0x7e57,
            ),
            scale_factor: 1.0,
            bitrate_ladder_id: profile.ladder_id.to_string(),
        }
    }

    /// Small seeded dataset for fast pipeline runs: `n_train`/`n_test`
    /// random-walk traces of `trace_seconds` each around `mean_mbps`.
    pub fn micro_dataset(
        name: &str,
        tag: SourceTag,
        ladder_id: &str,
        n_train: usize,
        n_test: usize,
        trace_seconds: f64,
        mean_mbps: f64,
        seed: u64,
    ) -> TraceDataset {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mk = |prefix: &str, n: usize, rng: &mut ChaCha20Rng| {
            (0..n)
                .map(|i| {
                    walk_trace(
                        format!("{name}-{prefix}-{i:03}"),
                        tag,
                        trace_seconds,
                        mean_mbps,
                        rng,
                    )
                })
                .collect::<Vec<_>>()
        };
        TraceDataset {
            name: name.to_string(),
            train: mk("train", n_train, &mut rng),
            test: mk("test", n_test, &mut rng),
            scale_factor: 1.0,
            bitrate_ladder_id: ladder_id.to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn ingest_applies_scale() {
        let dir = tmpdir();
        fs::write(dir.path().join("a.txt"), "0.0 8.0\n10.0 16.0\n").unwrap();
        let report = ingest_directory(
            dir.path(),
            TraceFormat::TimeMbps,
            1.0 / 8.0,
            SourceTag::Starlink,
        )
        .unwrap();
        assert_eq!(report.traces.len(), 1);
        assert_eq!(report.traces[0].samples[0], (0.0, 1.0));
        assert_eq!(report.traces[0].samples[1], (10.0, 2.0));
    }

    #[test]
    fn ingest_empty_dir_errors() {
        let dir = tmpdir();
        let err = ingest_directory(dir.path(), TraceFormat::TimeMbps, 1.0, SourceTag::Custom)
            .unwrap_err();
        assert!(matches!(err, TraceError::NoTraces { .. }));
    }

    #[test]
    fn ingest_missing_dir_is_fatal() {
        let err = ingest_directory(
            Path::new("/definitely/not/here"),
            TraceFormat::TimeMbps,
            1.0,
            SourceTag::Custom,
        )
        .unwrap_err();
        assert!(matches!(err, TraceError::MissingDirectory(_)));
    }

    #[test]
    fn ingest_rejects_bad_files_with_diagnostics() {
        let dir = tmpdir();
        fs::write(dir.path().join("good.txt"), "0 1.0\n5 2.0\n").unwrap();
        fs::write(dir.path().join("negative.txt"), "5.0 -1.0\n").unwrap();
        fs::write(dir.path().join("nonmono.txt"), "0 1.0\n0 2.0\n").unwrap();
        let report =
            ingest_directory(dir.path(), TraceFormat::TimeMbps, 1.0, SourceTag::Custom).unwrap();
        assert_eq!(report.traces.len(), 1);
        assert_eq!(report.rejected.len(), 2);
        let negative = report.rejected.iter().find(|r| r.0 == "negative.txt").unwrap();
        assert!(negative.1.contains("negative throughput"));
        let nonmono = report.rejected.iter().find(|r| r.0 == "nonmono.txt").unwrap();
        assert!(nonmono.1.contains("strictly increasing"));
    }

    #[test]
    fn scale_round_trip_recovers_throughputs() {
        let dir = tmpdir();
        fs::write(dir.path().join("a.txt"), "0 1.37\n3 2.91\n7 0.08\n").unwrap();
        let s = 0.125;
        let once = ingest_directory(dir.path(), TraceFormat::TimeMbps, s, SourceTag::Custom)
            .unwrap()
            .traces;
        let back: Vec<f64> = once[0].samples.iter().map(|x| x.1 / s).collect();
        let orig = ingest_directory(dir.path(), TraceFormat::TimeMbps, 1.0, SourceTag::Custom)
            .unwrap()
            .traces;
        for (a, b) in back.iter().zip(orig[0].samples.iter().map(|x| x.1)) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn throughput_at_is_a_cyclic_step_function() {
        let t = Trace::new("t", vec![(0.0, 2.0), (10.0, 4.0), (20.0, 6.0)], SourceTag::Custom)
            .unwrap();
        assert_eq!(t.throughput_at(0.0), 2.0);
        assert_eq!(t.throughput_at(5.0), 2.0);
        assert_eq!(t.throughput_at(10.0), 4.0); // right-continuous at sample
        assert_eq!(t.throughput_at(19.99), 4.0);
        // duration 20, so t=25 wraps to t=5
        assert_eq!(t.throughput_at(25.0), 2.0);
        assert_eq!(t.throughput_at(45.0), 2.0);
    }

    #[test]
    fn single_trace_stats() {
        let ds = TraceDataset {
            name: "x".into(),
            train: vec![Trace::constant("a", 3600.0, 2.0)],
            test: vec![],
            scale_factor: 1.0,
            bitrate_ladder_id: "low".into(),
        };
        let s = dataset_stats(&ds, Split::Train).unwrap();
        assert_eq!(s.n_traces, 1);
        assert!((s.total_hours - 1.0).abs() < 1e-12);
        assert!((s.mean_throughput_mbps - 2.0).abs() < 1e-12);
        assert!(matches!(
            dataset_stats(&ds, Split::Test),
            Err(TraceError::EmptySplit)
        ));
    }

    #[test]
    fn stats_permutation_invariant() {
        let mk = |id: &str, d: f64, m: f64| Trace::constant(id, d, m);
        let a = vec![mk("a", 100.0, 1.0), mk("b", 200.0, 3.0), mk("c", 50.0, 0.5)];
        let mut b = a.clone();
        b.reverse();
        let ds_a = TraceDataset {
            name: "x".into(),
            train: a,
            test: vec![],
            scale_factor: 1.0,
            bitrate_ladder_id: "low".into(),
        };
        let ds_b = TraceDataset { train: b, ..ds_a.clone() };
        let sa = dataset_stats(&ds_a, Split::Train).unwrap();
        let sb = dataset_stats(&ds_b, Split::Train).unwrap();
        assert_eq!(sa.n_traces, sb.n_traces);
        assert!((sa.total_hours - sb.total_hours).abs() < 1e-12);
        assert!((sa.mean_throughput_mbps - sb.mean_throughput_mbps).abs() < 1e-12);
    }

    #[test]
    fn split_is_deterministic_and_balanced() {
        let traces: Vec<Trace> = (0..10)
            .map(|i| Trace::constant(format!("t{i}"), 10.0, 1.0))
            .collect();
        let (tr1, te1) = split_dataset(traces.clone(), 0.5, 7).unwrap();
        let (tr2, te2) = split_dataset(traces.clone(), 0.5, 7).unwrap();
        assert_eq!(
            tr1.iter().map(|t| &t.id).collect::<Vec<_>>(),
            tr2.iter().map(|t| &t.id).collect::<Vec<_>>()
        );
        assert_eq!(
            te1.iter().map(|t| &t.id).collect::<Vec<_>>(),
            te2.iter().map(|t| &t.id).collect::<Vec<_>>()
        );
        assert_eq!(tr1.len(), 5);
        assert_eq!(te1.len(), 5);
        let train_ids: BTreeSet<_> = tr1.iter().map(|t| t.id.clone()).collect();
        assert!(te1.iter().all(|t| !train_ids.contains(&t.id)));

        let one = vec![Trace::constant("only", 10.0, 1.0)];
        assert!(matches!(
            split_dataset(one, 0.5, 0),
            Err(TraceError::TooFewTraces(1))
        ));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tmpdir();
        fs::write(dir.path().join("a.txt"), "0 1.0\n5 2.0\n").unwrap();
        fs::write(dir.path().join("b.txt"), "0 3.0\n5 4.0\n").unwrap();
        let m = DatasetManifest {
            name: "demo".into(),
            source_tag: SourceTag::Custom,
            format: TraceFormat::TimeMbps,
            scale_factor: 0.5,
            bitrate_ladder_id: "low".into(),
            train: vec!["a.txt".into()],
            test: vec!["b.txt".into()],
        };
        let mpath = dir.path().join("dataset.toml");
        m.save(&mpath).unwrap();
        let loaded = DatasetManifest::load(&mpath).unwrap();
        let ds = loaded.resolve(dir.path()).unwrap();
        assert_eq!(ds.train.len(), 1);
        assert_eq!(ds.test.len(), 1);
        assert_eq!(ds.train[0].samples[0].1, 0.5);
    }

    #[test]
    fn synthetic_corpora_match_reference_aggregates() {
        for profile in synth::ALL {
            let ds = synth::dataset(&profile, 1);
            let train = dataset_stats(&ds, Split::Train).unwrap();
            let test = dataset_stats(&ds, Split::Test).unwrap();
            assert_eq!(train.n_traces, profile.n_train, "{}", profile.name);
            assert_eq!(test.n_traces, profile.n_test, "{}", profile.name);
            assert!((train.total_hours - profile.train_hours).abs() < 0.01);
            assert!((test.total_hours - profile.test_hours).abs() < 0.01);
            // Whole-corpus mean is pinned by construction.
            let total_mb: f64 = ds
                .train
                .iter()
                .chain(&ds.test)
                .map(|t| t.megabits_per_cycle())
                .sum();
            let total_s: f64 = ds
                .train
                .iter()
                .chain(&ds.test)
                .map(|t| t.duration_s())
                .sum();
            assert!((total_mb / total_s - profile.mean_mbps).abs() < 0.05);
        }
    }

    #[test]
    fn fcc_test_split_reports_reference_numbers() {
        let ds = synth::dataset(&synth::FCC, 1);
        let s = dataset_stats(&ds, Split::Test).unwrap();
        assert_eq!(s.n_traces, 290);
        assert!((s.total_hours - 25.7).abs() < 0.05);
        assert!((s.mean_throughput_mbps - 1.3).abs() < 0.05);
        let starlink = synth::dataset(&synth::STARLINK, 1);
        let st = dataset_stats(&starlink, Split::Train).unwrap();
        assert_eq!(st.n_traces, 13);
        assert!((st.total_hours - 0.9).abs() < 0.05);
    }

    #[test]
    fn subsample_respects_budget() {
        let traces: Vec<Trace> = (0..20)
            .map(|i| Trace::constant(format!("t{i:02}"), 3600.0, 1.0))
            .collect();
        let kept = subsample_to_hours(traces, 5.0, 3);
        assert_eq!(kept.len(), 5);
        let again = subsample_to_hours(
            (0..20)
                .map(|i| Trace::constant(format!("t{i:02}"), 3600.0, 1.0))
                .collect(),
            5.0,
            3,
        );
        assert_eq!(
            kept.iter().map(|t| &t.id).collect::<Vec<_>>(),
            again.iter().map(|t| &t.id).collect::<Vec<_>>()
        );
    }
}
