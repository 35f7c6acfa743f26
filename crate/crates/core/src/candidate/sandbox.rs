//! Script sandbox for candidate code blocks.
//!
//! Candidates are Rhai scripts. The execution environment is built from a
//! restricted package set (no clocks, no filesystem, no network, no
//! randomness), enforces operation/time/collection limits, and exposes a
//! small curated library of numeric helpers behind an import allowlist:
//!
//! - `import "stats"`: mean, stdev, median, ema, linreg, linreg_predict
//! - `import "signal"`: movavg, savgol, diff
//!
//! Observation components are passed by value, so a candidate can never
//! mutate the caller's data. Environment constants (`LEVELS_KBPS`,
//! `CHUNK_SEC`, `BUFFER_CAP_SEC`, `TOTAL_CHUNKS`, `HISTORY_LEN`) are
//! registered as a global module so script functions can read them.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use rhai::module_resolvers::StaticModuleResolver;
use rhai::packages::Package;
use rhai::{Array, Dynamic, Engine, EvalAltResult, Map, Module, Position, Scope, AST};

use super::{ExecContext, SandboxFailure, SandboxPolicy, StateTensor};
use crate::sim::StreamObservation;

static CLOCK_ANCHOR: OnceLock<Instant> = OnceLock::new();

fn now_micros() -> u64 {
    CLOCK_ANCHOR.get_or_init(Instant::now).elapsed().as_micros() as u64
}

// ---------------------------------------------------------------------------
// Curated numeric helpers
// ---------------------------------------------------------------------------

fn runtime_err(msg: impl Into<String>) -> Box<EvalAltResult> {
    Box::new(EvalAltResult::ErrorRuntime(
        Dynamic::from(msg.into()),
        Position::NONE,
    ))
}

fn to_f64_vec(xs: &Array) -> Result<Vec<f64>, Box<EvalAltResult>> {
    xs.iter()
        .map(|d| {
            d.as_float()
                .or_else(|_| d.as_int().map(|i| i as f64))
                .map_err(|_| runtime_err("expected a numeric array"))
        })
        .collect()
}

fn to_dyn_array(xs: Vec<f64>) -> Array {
    xs.into_iter().map(Dynamic::from_float).collect()
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn stdev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn ema(xs: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = None;
    for &x in xs {
        let next = match acc {
            None => x,
            Some(prev) => alpha * x + (1.0 - alpha) * prev,
        };
        out.push(next);
        acc = Some(next);
    }
    out
}

/// Least-squares line over x = 0..n-1; returns (slope, intercept).
fn linreg(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n < 2 {
        return (0.0, xs.first().copied().unwrap_or(0.0));
    }
    let nf = n as f64;
    let x_mean = (nf - 1.0) / 2.0;
    let y_mean = mean(xs);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (i, &y) in xs.iter().enumerate() {
        let dx = i as f64 - x_mean;
        sxy += dx * (y - y_mean);
        sxx += dx * dx;
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (slope, y_mean - slope * x_mean)
}

fn movavg(xs: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..xs.len())
        .map(|i| {
            let lo = i.saturating_sub(w - 1);
            mean(&xs[lo..=i])
        })
        .collect()
}

fn diff(xs: &[f64]) -> Vec<f64> {
    xs.windows(2).map(|w| w[1] - w[0]).collect()
}

/// Solves the small linear system `a * x = b` in place (partial pivoting).
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| {
            a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap()
        })?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut acc = b[col];
        for k in col + 1..n {
            acc -= a[col][k] * x[k];
        }
        x[col] = acc / a[col][col];
    }
    Some(x)
}

/// Savitzky-Golay smoothing: per-point local polynomial fit of the given
/// order over a centered window (shrunk at the edges).
fn savgol(xs: &[f64], window: usize, poly: usize) -> Result<Vec<f64>, String> {
    if !(3..=51).contains(&window) || window % 2 == 0 {
        return Err(format!("savgol window must be odd and in [3, 51], got {window}"));
    }
    if !(1..=6).contains(&poly) {
        return Err(format!("savgol polynomial order must be in [1, 6], got {poly}"));
    }
    let half = window / 2;
    let n = xs.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let lo = i.saturating_sub(half);
        let hi = (i + half).min(n.saturating_sub(1));
        let count = hi + 1 - lo;
        let order = poly.min(count.saturating_sub(1));
        if order == 0 {
            out.push(xs[i]);
            continue;
        }
        // Normal equations for sum_j (p(x_j) - y_j)^2 with x centered at i.
        let dim = order + 1;
        let mut ata = vec![vec![0.0; dim]; dim];
        let mut atb = vec![0.0; dim];
        for j in lo..=hi {
            let x = j as f64 - i as f64;
            let mut powers = vec![1.0; dim];
            for p in 1..dim {
                powers[p] = powers[p - 1] * x;
            }
            for r in 0..dim {
                atb[r] += powers[r] * xs[j];
                for c in 0..dim {
                    ata[r][c] += powers[r] * powers[c];
                }
            }
        }
        match solve_linear(ata, atb) {
            Some(coef) => out.push(coef[0]),
            None => out.push(xs[i]),
        }
    }
    Ok(out)
}

fn stats_module() -> Module {
    static CACHE: OnceLock<Module> = OnceLock::new();
    CACHE
        .get_or_init(|| {
            let mut m = Module::new();
            m.set_native_fn("mean", |xs: Array| Ok(mean(&to_f64_vec(&xs)?)));
            m.set_native_fn("stdev", |xs: Array| Ok(stdev(&to_f64_vec(&xs)?)));
            m.set_native_fn("median", |xs: Array| Ok(median(&to_f64_vec(&xs)?)));
            m.set_native_fn("ema", |xs: Array, alpha: f64| {
                Ok(to_dyn_array(ema(&to_f64_vec(&xs)?, alpha)))
            });
            m.set_native_fn("linreg", |xs: Array| {
                let (slope, intercept) = linreg(&to_f64_vec(&xs)?);
                let mut map = Map::new();
                map.insert("slope".into(), Dynamic::from_float(slope));
                map.insert("intercept".into(), Dynamic::from_float(intercept));
                Ok(map)
            });
            m.set_native_fn("linreg_predict", |xs: Array, steps: i64| {
                let v = to_f64_vec(&xs)?;
                let (slope, intercept) = linreg(&v);
                Ok(intercept + slope * (v.len() as f64 - 1.0 + steps as f64))
            });
            m
        })
        .clone()
}

fn signal_module() -> Module {
    static CACHE: OnceLock<Module> = OnceLock::new();
    CACHE
        .get_or_init(|| {
            let mut m = Module::new();
            m.set_native_fn("movavg", |xs: Array, w: i64| {
                if !(1..=1024).contains(&w) {
                    return Err(runtime_err("movavg window must be in [1, 1024]"));
                }
                Ok(to_dyn_array(movavg(&to_f64_vec(&xs)?, w as usize)))
            });
            m.set_native_fn("savgol", |xs: Array, window: i64, poly: i64| {
                if window < 0 || poly < 0 {
                    return Err(runtime_err("savgol arguments must be positive"));
                }
                savgol(&to_f64_vec(&xs)?, window as usize, poly as usize)
                    .map(to_dyn_array)
                    .map_err(runtime_err)
            });
            m.set_native_fn("diff", |xs: Array| Ok(to_dyn_array(diff(&to_f64_vec(&xs)?))));
            m
        })
        .clone()
}

// ---------------------------------------------------------------------------
// Engine construction
// ---------------------------------------------------------------------------

struct SandboxEngine {
    engine: Engine,
    deadline_micros: Arc<AtomicU64>,
}

fn build_engine(policy: &SandboxPolicy, ctx: &ExecContext) -> SandboxEngine {
    let mut engine = Engine::new_raw();
    // Deterministic package set: no clock, io, or randomness.
    engine.register_global_module(rhai::packages::CorePackage::new().as_shared_module());
    engine.register_global_module(rhai::packages::BasicArrayPackage::new().as_shared_module());
    engine.register_global_module(rhai::packages::BasicMapPackage::new().as_shared_module());
    engine.register_global_module(rhai::packages::BasicMathPackage::new().as_shared_module());
    engine.register_global_module(rhai::packages::BasicStringPackage::new().as_shared_module());

    engine.set_max_call_levels(64);
    engine.set_max_expr_depths(128, 64);
    engine.set_max_operations(policy.max_ops);
    // The interpreter has no direct RSS metering; the memory budget is
    // enforced through collection-size caps.
    let max_entries = (policy.memory_limit_bytes / 64).min(usize::MAX as u64) as usize;
    engine.set_max_array_size(max_entries);
    engine.set_max_map_size(65_536);
    engine.set_max_string_size(1 << 20);
    engine.set_max_modules(8);

    let deadline_micros = Arc::new(AtomicU64::new(u64::MAX));
    let watch = deadline_micros.clone();
    engine.on_progress(move |ops| {
        if ops & 0x3ff == 0 && now_micros() > watch.load(Ordering::Relaxed) {
            Some(Dynamic::from("time limit"))
        } else {
            None
        }
    });

    // Import allowlist: only listed libraries resolve.
    let mut resolver = StaticModuleResolver::new();
    for name in &policy.import_allowlist {
        match name.as_str() {
            "stats" => resolver.insert("stats", stats_module()),
            "signal" => resolver.insert("signal", signal_module()),
            _ => {}
        }
    }
    engine.set_module_resolver(resolver);

    // Environment constants visible inside script functions.
    let mut env = Module::new();
    env.set_var(
        "LEVELS_KBPS",
        ctx.levels_kbps
            .iter()
            .map(|&k| Dynamic::from_float(k))
            .collect::<Array>(),
    );
    env.set_var("CHUNK_SEC", ctx.chunk_duration_s);
    env.set_var("BUFFER_CAP_SEC", ctx.buffer_cap_s);
    env.set_var("TOTAL_CHUNKS", ctx.total_chunks as f64);
    env.set_var("HISTORY_LEN", ctx.history_len as i64);
    engine.register_global_module(env.into());

    engine.register_fn("zeros", |n: i64| -> Result<Array, Box<EvalAltResult>> {
        if !(0..=1_000_000).contains(&n) {
            return Err(runtime_err("zeros: length outside [0, 1000000]"));
        }
        Ok(vec![Dynamic::from_float(0.0); n as usize])
    });

    SandboxEngine { engine, deadline_micros }
}

fn classify(err: Box<EvalAltResult>) -> SandboxFailure {
    match *err {
        EvalAltResult::ErrorModuleNotFound(name, _) => SandboxFailure::DisallowedImport(name),
        EvalAltResult::ErrorTerminated(..) => SandboxFailure::Timeout("wall clock".into()),
        EvalAltResult::ErrorTooManyOperations(_) => {
            SandboxFailure::Timeout("operation budget".into())
        }
        EvalAltResult::ErrorDataTooLarge(what, _) => SandboxFailure::MemoryLimit(what),
        other => SandboxFailure::Execution(other.to_string()),
    }
}

fn compile_source(
    engine: &Engine,
    source: &str,
    entry: &str,
    n_args: usize,
) -> Result<AST, SandboxFailure> {
    let ast = engine
        .compile(source)
        .map_err(|e| SandboxFailure::Syntax(e.to_string()))?;
    let found = ast
        .iter_functions()
        .any(|f| f.name == entry && f.params.len() == n_args);
    if !found {
        return Err(SandboxFailure::MissingEntry {
            entry: entry.to_string(),
            n_args,
        });
    }
    Ok(ast)
}

fn obs_args(obs: &StreamObservation) -> (Array, Array, Array, f64, i64, i64) {
    let to_arr = |v: &[f64]| -> Array { v.iter().map(|&x| Dynamic::from_float(x)).collect() };
    (
        to_arr(&obs.throughput_hist_mbps),
        to_arr(&obs.download_time_hist_s),
        to_arr(&obs.next_sizes_bytes),
        obs.buffer_s,
        obs.chunks_remaining as i64,
        obs.last_level as i64,
    )
}

fn dynamic_to_tensor(out: Dynamic) -> Result<StateTensor, SandboxFailure> {
    let type_name = out.type_name();
    let rows: Array = out
        .try_cast()
        .ok_or_else(|| SandboxFailure::NonNumeric(format!("returned {type_name}, expected a matrix")))?;
    if rows.is_empty() {
        return Err(SandboxFailure::NonNumeric("returned an empty matrix".into()));
    }
    let mut values: Vec<Vec<f64>> = Vec::with_capacity(rows.len());
    for (r, row) in rows.into_iter().enumerate() {
        let row_type = row.type_name();
        let row: Array = row.try_cast().ok_or_else(|| {
            SandboxFailure::NonNumeric(format!("row {r} is {row_type}, expected an array"))
        })?;
        let mut vals = Vec::with_capacity(row.len());
        for (c, cell) in row.iter().enumerate() {
            let v = cell
                .as_float()
                .or_else(|_| cell.as_int().map(|i| i as f64))
                .map_err(|_| {
                    SandboxFailure::NonNumeric(format!(
                        "entry ({r}, {c}) is {}, expected a number",
                        cell.type_name()
                    ))
                })?;
            vals.push(v);
        }
        values.push(vals);
    }
    StateTensor::from_rows(values).map_err(SandboxFailure::NonNumeric)
}

/// A compiled state candidate bound to one execution context. Records the
/// output shape on first call and enforces it afterwards.
pub struct StateProgram {
    sandbox: SandboxEngine,
    ast: AST,
    policy: SandboxPolicy,
    shape: Mutex<Option<(usize, usize)>>,
}

pub const STATE_ENTRY: &str = "build_state";
pub const STATE_ARGS: usize = 6;
pub const NETWORK_ENTRY: &str = "build_network";
pub const NETWORK_ARGS: usize = 3;

impl StateProgram {
    pub fn compile(
        source: &str,
        policy: &SandboxPolicy,
        ctx: &ExecContext,
    ) -> Result<Self, SandboxFailure> {
        let sandbox = build_engine(policy, ctx);
        let ast = compile_source(&sandbox.engine, source, STATE_ENTRY, STATE_ARGS)?;
        Ok(StateProgram {
            sandbox,
            ast,
            policy: policy.clone(),
            shape: Mutex::new(None),
        })
    }

    pub fn execute(&self, obs: &StreamObservation) -> Result<StateTensor, SandboxFailure> {
        let deadline = now_micros() + self.policy.time_limit.as_micros() as u64;
        self.sandbox
            .deadline_micros
            .store(deadline, Ordering::Relaxed);
        let result: Result<Dynamic, _> = self.sandbox.engine.call_fn(
            &mut Scope::new(),
            &self.ast,
            STATE_ENTRY,
            obs_args(obs),
        );
        self.sandbox
            .deadline_micros
            .store(u64::MAX, Ordering::Relaxed);
        let tensor = dynamic_to_tensor(result.map_err(classify)?)?;

        let mut recorded = self.shape.lock().unwrap();
        match *recorded {
            None => *recorded = Some(tensor.shape()),
            Some(expected) if expected != tensor.shape() => {
                return Err(SandboxFailure::ShapeDrift {
                    expected,
                    got: tensor.shape(),
                });
            }
            _ => {}
        }
        Ok(tensor)
    }

    /// Shape recorded by the first successful execution.
    pub fn recorded_shape(&self) -> Option<(usize, usize)> {
        *self.shape.lock().unwrap()
    }
}

/// Raw architecture description returned by a network candidate.
#[derive(Debug, Clone)]
pub struct NetworkDescription {
    pub spec: crate::nn::NetSpec,
    /// Output width the candidate claims to produce, when it says.
    pub declared_actions: Option<i64>,
}

/// Runs a network candidate's factory function and parses the description.
pub fn evaluate_network_factory(
    source: &str,
    policy: &SandboxPolicy,
    state_shape: (usize, usize),
    n_actions: usize,
) -> Result<NetworkDescription, SandboxFailure> {
    use crate::nn::{Activation, NetSpec, TemporalKind};

    let ctx = ExecContext::probe_low();
    let sandbox = build_engine(policy, &ctx);
    let ast = compile_source(&sandbox.engine, source, NETWORK_ENTRY, NETWORK_ARGS)?;
    let deadline = now_micros() + policy.time_limit.as_micros() as u64;
    sandbox.deadline_micros.store(deadline, Ordering::Relaxed);
    let result: Result<Dynamic, _> = sandbox.engine.call_fn(
        &mut Scope::new(),
        &ast,
        NETWORK_ENTRY,
        (
            state_shape.0 as i64,
            state_shape.1 as i64,
            n_actions as i64,
        ),
    );
    sandbox.deadline_micros.store(u64::MAX, Ordering::Relaxed);
    let out = result.map_err(classify)?;

    let bad = |msg: String| SandboxFailure::InvalidNetwork(msg);
    let map: Map = out
        .try_cast()
        .ok_or_else(|| bad("factory must return a map".into()))?;
    let get_int = |map: &Map, key: &str| -> Result<Option<i64>, SandboxFailure> {
        match map.get(key) {
            None => Ok(None),
            Some(d) => d
                .as_int()
                .map(Some)
                .map_err(|_| bad(format!("{key} must be an integer"))),
        }
    };
    let get_str = |map: &Map, key: &str| -> Result<Option<String>, SandboxFailure> {
        match map.get(key) {
            None => Ok(None),
            Some(d) => Ok(Some(
                d.clone()
                    .try_cast::<rhai::ImmutableString>()
                    .ok_or_else(|| bad(format!("{key} must be a string")))?
                    .to_string(),
            )),
        }
    };

    let temporal_kind = get_str(&map, "temporal")?
        .ok_or_else(|| bad("missing \"temporal\"".into()))?;
    let temporal = match temporal_kind.as_str() {
        "conv" => TemporalKind::Conv {
            filters: get_int(&map, "filters")?
                .ok_or_else(|| bad("conv needs \"filters\"".into()))? as usize,
            kernel: get_int(&map, "kernel")?
                .ok_or_else(|| bad("conv needs \"kernel\"".into()))? as usize,
        },
        "rnn" => TemporalKind::Rnn {
            units: get_int(&map, "units")?
                .ok_or_else(|| bad("rnn needs \"units\"".into()))? as usize,
        },
        "lstm" => TemporalKind::Lstm {
            units: get_int(&map, "units")?
                .ok_or_else(|| bad("lstm needs \"units\"".into()))? as usize,
        },
        other => return Err(bad(format!("unknown temporal kind {other:?}"))),
    };
    let activation = match get_str(&map, "activation")?.as_deref() {
        None | Some("relu") => Activation::Relu,
        Some("leaky_relu") => {
            let slope = match map.get("leaky_slope") {
                None => 0.01,
                Some(d) => d
                    .as_float()
                    .map_err(|_| bad("leaky_slope must be a float".into()))?,
            };
            Activation::LeakyRelu { slope }
        }
        Some("tanh") => Activation::Tanh,
        Some(other) => return Err(bad(format!("unknown activation {other:?}"))),
    };
    let hidden_units = get_int(&map, "hidden_units")?
        .ok_or_else(|| bad("missing \"hidden_units\"".into()))? as usize;
    let shared_trunk = match map.get("shared_trunk") {
        None => false,
        Some(d) => d
            .as_bool()
            .map_err(|_| bad("shared_trunk must be a bool".into()))?,
    };
    let spec = NetSpec {
        temporal,
        hidden_units,
        activation,
        shared_trunk,
    };
    spec.validate()
        .map_err(|e| bad(e.to_string()))?;
    Ok(NetworkDescription {
        spec,
        declared_actions: get_int(&map, "actions")?,
    })
}
