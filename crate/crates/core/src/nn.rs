//! Small neural-network library with hand-written gradients.
//!
//! Everything is `f64` and seeded, so identical (architecture, seed) pairs
//! produce identical parameters and identical training trajectories. Layers
//! implement explicit forward caches and backward accumulation; no autodiff.
//!
//! The actor-critic model applies one temporal encoder per input row of the
//! state tensor (convolutional or recurrent), concatenates the per-row
//! features into a dense trunk, and attaches a softmax policy head and a
//! scalar value head, either on separate towers or a shared trunk.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid network description: {0}")]
    BadSpec(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint corrupt: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Activation {
    Relu,
    LeakyRelu { slope: f64 },
    Tanh,
}

impl Activation {
    fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu { slope } => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed via the pre-activation input.
    fn grad(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    1.0
                } else {
                    *slope
                }
            }
            Activation::Tanh => 1.0 - x.tanh().powi(2),
        }
    }
}

/// Temporal feature extractor applied to each row of the state tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TemporalKind {
    Conv { filters: usize, kernel: usize },
    Rnn { units: usize },
    Lstm { units: usize },
}

/// Architecture description produced by network candidates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub temporal: TemporalKind,
    pub hidden_units: usize,
    pub activation: Activation,
    pub shared_trunk: bool,
}

pub const MAX_CONV_FILTERS: usize = 512;
pub const MAX_RECURRENT_UNITS: usize = 1024;
pub const MAX_HIDDEN_UNITS: usize = 4096;

impl NetSpec {
    /// Reference architecture: per-row 1-D convolutions into a dense trunk.
    pub fn original() -> Self {
        NetSpec {
            temporal: TemporalKind::Conv { filters: 128, kernel: 4 },
            hidden_units: 128,
            activation: Activation::Relu,
            shared_trunk: false,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        match self.temporal {
            TemporalKind::Conv { filters, kernel } => {
                if filters == 0 || filters > MAX_CONV_FILTERS {
                    return Err(NnError::BadSpec(format!(
                        "conv filters {filters} outside [1, {MAX_CONV_FILTERS}]"
                    )));
                }
                if kernel == 0 {
                    return Err(NnError::BadSpec("conv kernel must be >= 1".into()));
                }
            }
            TemporalKind::Rnn { units } | TemporalKind::Lstm { units } => {
                if units == 0 || units > MAX_RECURRENT_UNITS {
                    return Err(NnError::BadSpec(format!(
                        "recurrent units {units} outside [1, {MAX_RECURRENT_UNITS}]"
                    )));
                }
            }
        }
        if self.hidden_units == 0 || self.hidden_units > MAX_HIDDEN_UNITS {
            return Err(NnError::BadSpec(format!(
                "hidden units {} outside [1, {MAX_HIDDEN_UNITS}]",
                self.hidden_units
            )));
        }
        Ok(())
    }
}

fn xavier(rng: &mut ChaCha20Rng, fan_in: usize, fan_out: usize) -> f64 {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    rng.gen_range(-a..a)
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Dense {
    pub w: Array2<f64>, // out x in
    pub b: Array1<f64>,
}

impl Dense {
    pub(crate) fn init(rng: &mut ChaCha20Rng, n_in: usize, n_out: usize) -> Self {
        let w = Array2::from_shape_fn((n_out, n_in), |_| xavier(rng, n_in, n_out));
        Dense { w, b: Array1::zeros(n_out) }
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Dense {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }

    pub(crate) fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        self.w.dot(x) + &self.b
    }

    /// Accumulates parameter grads into `g`; returns grad w.r.t. the input.
    pub(crate) fn backward(&self, x: &Array1<f64>, d_out: &Array1<f64>, g: &mut Dense) -> Array1<f64> {
        for (i, &d) in d_out.iter().enumerate() {
            g.b[i] += d;
            let mut row = g.w.row_mut(i);
            for (j, &xv) in x.iter().enumerate() {
                row[j] += d * xv;
            }
        }
        self.w.t().dot(d_out)
    }
}

/// 1-D convolution over a single row (scalar channel), stride 1, valid.
#[derive(Debug, Clone)]
struct ConvRow {
    w: Array2<f64>, // filters x kernel
    b: Array1<f64>,
}

impl ConvRow {
    fn init(rng: &mut ChaCha20Rng, filters: usize, kernel: usize) -> Self {
        let w = Array2::from_shape_fn((filters, kernel), |_| xavier(rng, kernel, filters));
        ConvRow { w, b: Array1::zeros(filters) }
    }

    fn zeros_like(&self) -> Self {
        ConvRow {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }

    fn out_len(&self, width: usize) -> usize {
        width - self.w.ncols() + 1
    }

    /// Pre-activation outputs, flattened filter-major.
    fn forward(&self, x: &[f64]) -> Array1<f64> {
        let k = self.w.ncols();
        let out_w = x.len() - k + 1;
        let mut out = Array1::zeros(self.w.nrows() * out_w);
        for f in 0..self.w.nrows() {
            for j in 0..out_w {
                let mut acc = self.b[f];
                for t in 0..k {
                    acc += self.w[(f, t)] * x[j + t];
                }
                out[f * out_w + j] = acc;
            }
        }
        out
    }

    fn backward(&self, x: &[f64], d_pre: &Array1<f64>, g: &mut ConvRow) {
        let k = self.w.ncols();
        let out_w = x.len() - k + 1;
        for f in 0..self.w.nrows() {
            for j in 0..out_w {
                let d = d_pre[f * out_w + j];
                g.b[f] += d;
                for t in 0..k {
                    g.w[(f, t)] += d * x[j + t];
                }
            }
        }
    }
}

/// Vanilla RNN cell with scalar inputs; the row feature is the final hidden
/// state after scanning the row left to right.
#[derive(Debug, Clone)]
struct RnnRow {
    wx: Array1<f64>,    // units
    wh: Array2<f64>,    // units x units
    b: Array1<f64>,     // units
}

impl RnnRow {
    fn init(rng: &mut ChaCha20Rng, units: usize) -> Self {
        RnnRow {
            wx: Array1::from_shape_fn(units, |_| xavier(rng, 1, units)),
            wh: Array2::from_shape_fn((units, units), |_| xavier(rng, units, units)),
            b: Array1::zeros(units),
        }
    }

    fn zeros_like(&self) -> Self {
        RnnRow {
            wx: Array1::zeros(self.wx.raw_dim()),
            wh: Array2::zeros(self.wh.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }

    /// Returns hidden states for every step (h[0] is after the first input).
    fn forward(&self, x: &[f64]) -> Vec<Array1<f64>> {
        let units = self.wx.len();
        let mut hs = Vec::with_capacity(x.len());
        let mut h = Array1::zeros(units);
        for &xv in x {
            let pre = &self.wx * xv + self.wh.dot(&h) + &self.b;
            h = pre.mapv(f64::tanh);
            hs.push(h.clone());
        }
        hs
    }

    fn backward(&self, x: &[f64], hs: &[Array1<f64>], d_final: &Array1<f64>, g: &mut RnnRow) {
        let units = self.wx.len();
        let mut d_h = d_final.clone();
        for t in (0..x.len()).rev() {
            // d through tanh: h_t = tanh(pre_t)
            let d_pre: Array1<f64> = (0..units)
                .map(|u| d_h[u] * (1.0 - hs[t][u] * hs[t][u]))
                .collect();
            let h_prev = if t == 0 {
                Array1::zeros(units)
            } else {
                hs[t - 1].clone()
            };
            for u in 0..units {
                g.wx[u] += d_pre[u] * x[t];
                g.b[u] += d_pre[u];
                let mut row = g.wh.row_mut(u);
                for v in 0..units {
                    row[v] += d_pre[u] * h_prev[v];
                }
            }
            d_h = self.wh.t().dot(&d_pre);
        }
    }
}

/// LSTM cell with scalar inputs; gate order `[input, forget, cell, output]`.
#[derive(Debug, Clone)]
struct LstmRow {
    wx: Array1<f64>, // 4*units
    wh: Array2<f64>, // 4*units x units
    b: Array1<f64>,  // 4*units
}

#[derive(Debug, Clone)]
struct LstmStep {
    i: Array1<f64>,
    f: Array1<f64>,
    gc: Array1<f64>,
    o: Array1<f64>,
    c: Array1<f64>,
    h: Array1<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl LstmRow {
    fn init(rng: &mut ChaCha20Rng, units: usize) -> Self {
        let mut b = Array1::zeros(4 * units);
        // Forget-gate bias starts at 1 so early training does not wipe state.
        for u in 0..units {
            b[units + u] = 1.0;
        }
        LstmRow {
            wx: Array1::from_shape_fn(4 * units, |_| xavier(rng, 1, units)),
            wh: Array2::from_shape_fn((4 * units, units), |_| xavier(rng, units, units)),
            b,
        }
    }

    fn zeros_like(&self) -> Self {
        LstmRow {
            wx: Array1::zeros(self.wx.raw_dim()),
            wh: Array2::zeros(self.wh.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }

    fn units(&self) -> usize {
        self.wx.len() / 4
    }

    fn forward(&self, x: &[f64]) -> Vec<LstmStep> {
        let units = self.units();
        let mut steps: Vec<LstmStep> = Vec::with_capacity(x.len());
        let mut h = Array1::zeros(units);
        let mut c = Array1::zeros(units);
        for &xv in x {
            let z = &self.wx * xv + self.wh.dot(&h) + &self.b;
            let i: Array1<f64> = (0..units).map(|u| sigmoid(z[u])).collect();
            let f: Array1<f64> = (0..units).map(|u| sigmoid(z[units + u])).collect();
            let gc: Array1<f64> = (0..units).map(|u| z[2 * units + u].tanh()).collect();
            let o: Array1<f64> = (0..units).map(|u| sigmoid(z[3 * units + u])).collect();
            c = &f * &c + &i * &gc;
            h = &o * &c.mapv(f64::tanh);
            steps.push(LstmStep {
                i,
                f,
                gc,
                o,
                c: c.clone(),
                h: h.clone(),
            });
        }
        steps
    }

    fn backward(&self, x: &[f64], steps: &[LstmStep], d_final: &Array1<f64>, g: &mut LstmRow) {
        let units = self.units();
        let mut d_h = d_final.clone();
        let mut d_c = Array1::zeros(units);
        for t in (0..x.len()).rev() {
            let s = &steps[t];
            let c_prev = if t == 0 {
                Array1::zeros(units)
            } else {
                steps[t - 1].c.clone()
            };
            let h_prev = if t == 0 {
                Array1::zeros(units)
            } else {
                steps[t - 1].h.clone()
            };
            let tanh_c = s.c.mapv(f64::tanh);
            // h = o * tanh(c)
            let d_o = &d_h * &tanh_c;
            let d_c_total: Array1<f64> = (0..units)
                .map(|u| d_c[u] + d_h[u] * s.o[u] * (1.0 - tanh_c[u] * tanh_c[u]))
                .collect();
            let d_i = &d_c_total * &s.gc;
            let d_f = &d_c_total * &c_prev;
            let d_g = &d_c_total * &s.i;
            // Through the gate nonlinearities.
            let mut d_z = Array1::zeros(4 * units);
            for u in 0..units {
                d_z[u] = d_i[u] * s.i[u] * (1.0 - s.i[u]);
                d_z[units + u] = d_f[u] * s.f[u] * (1.0 - s.f[u]);
                d_z[2 * units + u] = d_g[u] * (1.0 - s.gc[u] * s.gc[u]);
                d_z[3 * units + u] = d_o[u] * s.o[u] * (1.0 - s.o[u]);
            }
            for r in 0..4 * units {
                g.wx[r] += d_z[r] * x[t];
                g.b[r] += d_z[r];
                let mut row = g.wh.row_mut(r);
                for v in 0..units {
                    row[v] += d_z[r] * h_prev[v];
                }
            }
            d_h = self.wh.t().dot(&d_z);
            d_c = &d_c_total * &s.f;
        }
    }
}

#[derive(Debug, Clone)]
enum Encoder {
    Conv(ConvRow),
    Rnn(RnnRow),
    Lstm(LstmRow),
}

enum EncoderCache {
    Conv { pre: Array1<f64> },
    Rnn { hs: Vec<Array1<f64>> },
    Lstm { steps: Vec<LstmStep> },
}

impl Encoder {
    fn init(rng: &mut ChaCha20Rng, kind: TemporalKind, width: usize) -> Encoder {
        match kind {
            TemporalKind::Conv { filters, kernel } => {
                // Kernels wider than the row are clamped to the row width.
                Encoder::Conv(ConvRow::init(rng, filters, kernel.min(width)))
            }
            TemporalKind::Rnn { units } => Encoder::Rnn(RnnRow::init(rng, units)),
            TemporalKind::Lstm { units } => Encoder::Lstm(LstmRow::init(rng, units)),
        }
    }

    fn zeros_like(&self) -> Encoder {
        match self {
            Encoder::Conv(c) => Encoder::Conv(c.zeros_like()),
            Encoder::Rnn(r) => Encoder::Rnn(r.zeros_like()),
            Encoder::Lstm(l) => Encoder::Lstm(l.zeros_like()),
        }
    }

    fn out_dim(&self, width: usize, activation: Activation) -> usize {
        let _ = activation;
        match self {
            Encoder::Conv(c) => c.w.nrows() * c.out_len(width),
            Encoder::Rnn(r) => r.wx.len(),
            Encoder::Lstm(l) => l.units(),
        }
    }

    /// Post-activation features for one row. Conv features pass through the
    /// tower activation; recurrent features are already bounded by tanh.
    fn forward(&self, x: &[f64], activation: Activation) -> (Array1<f64>, EncoderCache) {
        match self {
            Encoder::Conv(c) => {
                let pre = c.forward(x);
                let out = pre.mapv(|v| activation.apply(v));
                (out, EncoderCache::Conv { pre })
            }
            Encoder::Rnn(r) => {
                let hs = r.forward(x);
                (hs.last().unwrap().clone(), EncoderCache::Rnn { hs })
            }
            Encoder::Lstm(l) => {
                let steps = l.forward(x);
                (steps.last().unwrap().h.clone(), EncoderCache::Lstm { steps })
            }
        }
    }

    fn backward(
        &self,
        x: &[f64],
        cache: &EncoderCache,
        d_out: &Array1<f64>,
        activation: Activation,
        g: &mut Encoder,
    ) {
        match (self, cache, g) {
            (Encoder::Conv(c), EncoderCache::Conv { pre }, Encoder::Conv(gc)) => {
                let d_pre: Array1<f64> = pre
                    .iter()
                    .zip(d_out.iter())
                    .map(|(&p, &d)| d * activation.grad(p))
                    .collect();
                c.backward(x, &d_pre, gc);
            }
            (Encoder::Rnn(r), EncoderCache::Rnn { hs }, Encoder::Rnn(gr)) => {
                r.backward(x, hs, d_out, gr);
            }
            (Encoder::Lstm(l), EncoderCache::Lstm { steps }, Encoder::Lstm(gl)) => {
                l.backward(x, steps, d_out, gl);
            }
            _ => unreachable!("encoder/cache/grad kinds always match"),
        }
    }
}

// ---------------------------------------------------------------------------
// Trunk and actor-critic assembly
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct Trunk {
    encoders: Vec<Encoder>,
    fc: Dense,
}

struct TrunkCache {
    enc_caches: Vec<EncoderCache>,
    phi: Array1<f64>,
    z1: Array1<f64>,
    h: Array1<f64>,
}

impl Trunk {
    fn init(
        rng: &mut ChaCha20Rng,
        spec: &NetSpec,
        channels: usize,
        width: usize,
    ) -> Trunk {
        let encoders: Vec<Encoder> = (0..channels)
            .map(|_| Encoder::init(rng, spec.temporal, width))
            .collect();
        let phi_dim: usize = encoders
            .iter()
            .map(|e| e.out_dim(width, spec.activation))
            .sum();
        Trunk {
            fc: Dense::init(rng, phi_dim, spec.hidden_units),
            encoders,
        }
    }

    fn zeros_like(&self) -> Trunk {
        Trunk {
            encoders: self.encoders.iter().map(|e| e.zeros_like()).collect(),
            fc: self.fc.zeros_like(),
        }
    }

    fn forward(&self, x: &Array2<f64>, activation: Activation) -> TrunkCache {
        let width = x.ncols();
        let mut phi_parts = Vec::with_capacity(self.encoders.len());
        let mut enc_caches = Vec::with_capacity(self.encoders.len());
        for (c, enc) in self.encoders.iter().enumerate() {
            let row = x.row(c);
            let (f, cache) = enc.forward(row.as_slice().unwrap(), activation);
            phi_parts.push(f);
            enc_caches.push(cache);
        }
        let phi = ndarray::concatenate(
            Axis(0),
            &phi_parts.iter().map(|p| p.view()).collect::<Vec<_>>(),
        )
        .unwrap();
        let z1 = self.fc.forward(&phi);
        let h = z1.mapv(|v| activation.apply(v));
        let _ = width;
        TrunkCache { enc_caches, phi, z1, h }
    }

    fn backward(
        &self,
        x: &Array2<f64>,
        cache: &TrunkCache,
        d_h: &Array1<f64>,
        activation: Activation,
        g: &mut Trunk,
    ) {
        let d_z1: Array1<f64> = cache
            .z1
            .iter()
            .zip(d_h.iter())
            .map(|(&z, &d)| d * activation.grad(z))
            .collect();
        let d_phi = self.fc.backward(&cache.phi, &d_z1, &mut g.fc);
        let mut offset = 0;
        for (c, enc) in self.encoders.iter().enumerate() {
            let dim = enc.out_dim(x.ncols(), activation);
            let d_slice = d_phi.slice(ndarray::s![offset..offset + dim]).to_owned();
            let row = x.row(c);
            enc.backward(
                row.as_slice().unwrap(),
                &cache.enc_caches[c],
                &d_slice,
                activation,
                &mut g.encoders[c],
            );
            offset += dim;
        }
    }
}

#[derive(Debug, Clone)]
enum Body {
    Separate { actor: Trunk, critic: Trunk },
    Shared(Trunk),
}

/// Actor-critic network over `(channels, width)` state tensors.
#[derive(Debug, Clone)]
pub struct ActorCritic {
    spec: NetSpec,
    channels: usize,
    width: usize,
    n_actions: usize,
    body: Body,
    actor_head: Dense,
    critic_head: Dense,
}

pub struct ForwardCache {
    actor_trunk: TrunkCache,
    critic_trunk: Option<TrunkCache>,
    pub probs: Array1<f64>,
    pub value: f64,
}

/// Gradient buffer with the same structure as the network parameters.
pub struct Grads {
    body: Body,
    actor_head: Dense,
    critic_head: Dense,
}

impl ActorCritic {
    pub fn init(
        spec: NetSpec,
        channels: usize,
        width: usize,
        n_actions: usize,
        seed: u64,
    ) -> Result<Self, NnError> {
        spec.validate()?;
        if channels == 0 || width == 0 {
            return Err(NnError::BadSpec(format!(
                "state shape ({channels}, {width}) must be positive"
            )));
        }
        if n_actions < 2 {
            return Err(NnError::BadSpec(format!("need >= 2 actions, got {n_actions}")));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let body = if spec.shared_trunk {
            Body::Shared(Trunk::init(&mut rng, &spec, channels, width))
        } else {
            Body::Separate {
                actor: Trunk::init(&mut rng, &spec, channels, width),
                critic: Trunk::init(&mut rng, &spec, channels, width),
            }
        };
        let actor_head = Dense::init(&mut rng, spec.hidden_units, n_actions);
        let critic_head = Dense::init(&mut rng, spec.hidden_units, 1);
        Ok(ActorCritic {
            spec,
            channels,
            width,
            n_actions,
            body,
            actor_head,
            critic_head,
        })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn state_shape(&self) -> (usize, usize) {
        (self.channels, self.width)
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn forward(&self, x: &Array2<f64>) -> ForwardCache {
        debug_assert_eq!(x.dim(), (self.channels, self.width));
        let act = self.spec.activation;
        let (actor_trunk, critic_trunk) = match &self.body {
            Body::Separate { actor, critic } => {
                (actor.forward(x, act), Some(critic.forward(x, act)))
            }
            Body::Shared(trunk) => (trunk.forward(x, act), None),
        };
        let logits = self.actor_head.forward(&actor_trunk.h);
        let critic_h = critic_trunk.as_ref().map(|c| &c.h).unwrap_or(&actor_trunk.h);
        let value = self.critic_head.forward(critic_h)[0];
        let probs = softmax(&logits);
        ForwardCache {
            actor_trunk,
            critic_trunk,
            probs,
            value,
        }
    }

    /// Accumulates gradients for one sample given upstream grads w.r.t. the
    /// policy logits and the value output.
    pub fn backward(
        &self,
        x: &Array2<f64>,
        cache: &ForwardCache,
        d_logits: &Array1<f64>,
        d_value: f64,
        g: &mut Grads,
    ) {
        let act = self.spec.activation;
        let critic_h = cache
            .critic_trunk
            .as_ref()
            .map(|c| &c.h)
            .unwrap_or(&cache.actor_trunk.h);
        let d_actor_h = self
            .actor_head
            .backward(&cache.actor_trunk.h, d_logits, &mut g.actor_head);
        let d_critic_h = self.critic_head.backward(
            critic_h,
            &ndarray::arr1(&[d_value]),
            &mut g.critic_head,
        );
        match (&self.body, &mut g.body) {
            (Body::Separate { actor, critic }, Body::Separate { actor: ga, critic: gc }) => {
                actor.backward(x, &cache.actor_trunk, &d_actor_h, act, ga);
                critic.backward(
                    x,
                    cache.critic_trunk.as_ref().unwrap(),
                    &d_critic_h,
                    act,
                    gc,
                );
            }
            (Body::Shared(trunk), Body::Shared(gt)) => {
                let d_h = &d_actor_h + &d_critic_h;
                trunk.backward(x, &cache.actor_trunk, &d_h, act, gt);
            }
            _ => unreachable!("grads mirror the body layout"),
        }
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            body: match &self.body {
                Body::Separate { actor, critic } => Body::Separate {
                    actor: actor.zeros_like(),
                    critic: critic.zeros_like(),
                },
                Body::Shared(t) => Body::Shared(t.zeros_like()),
            },
            actor_head: self.actor_head.zeros_like(),
            critic_head: self.critic_head.zeros_like(),
        }
    }

    fn visit<F: FnMut(&f64)>(&self, f: &mut F) {
        visit_body(&self.body, &mut |v| f(v));
        visit_dense(&self.actor_head, &mut |v| f(v));
        visit_dense(&self.critic_head, &mut |v| f(v));
    }

    fn visit_mut<F: FnMut(&mut f64)>(&mut self, f: &mut F) {
        visit_body_mut(&mut self.body, f);
        visit_dense_mut(&mut self.actor_head, f);
        visit_dense_mut(&mut self.critic_head, f);
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_| n += 1);
        n
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        self.visit(&mut |&v| out.push(v));
        out
    }

    pub fn load_flat(&mut self, params: &[f64]) -> Result<(), NnError> {
        if params.len() != self.n_params() {
            return Err(NnError::Corrupt(format!(
                "parameter count mismatch: {} vs {}",
                params.len(),
                self.n_params()
            )));
        }
        let mut it = params.iter();
        self.visit_mut(&mut |v| *v = *it.next().unwrap());
        Ok(())
    }

    /// Per-parameter learning rates: actor-owned parameters get `actor_lr`,
    /// critic-owned get `critic_lr`. A shared trunk counts as actor-owned.
    pub fn lr_vector(&self, actor_lr: f64, critic_lr: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        match &self.body {
            Body::Separate { actor, critic } => {
                visit_trunk(actor, &mut |_| out.push(actor_lr));
                visit_trunk(critic, &mut |_| out.push(critic_lr));
            }
            Body::Shared(t) => visit_trunk(t, &mut |_| out.push(actor_lr)),
        }
        visit_dense(&self.actor_head, &mut |_| out.push(actor_lr));
        visit_dense(&self.critic_head, &mut |_| out.push(critic_lr));
        out
    }

    pub fn grads_flatten(g: &Grads) -> Vec<f64> {
        let mut out = Vec::new();
        visit_body(&g.body, &mut |&v| out.push(v));
        visit_dense(&g.actor_head, &mut |&v| out.push(v));
        visit_dense(&g.critic_head, &mut |&v| out.push(v));
        out
    }
}

fn visit_dense<F: FnMut(&f64)>(d: &Dense, f: &mut F) {
    d.w.iter().for_each(&mut *f);
    d.b.iter().for_each(&mut *f);
}

fn visit_dense_mut<F: FnMut(&mut f64)>(d: &mut Dense, f: &mut F) {
    d.w.iter_mut().for_each(&mut *f);
    d.b.iter_mut().for_each(&mut *f);
}

fn visit_encoder<F: FnMut(&f64)>(e: &Encoder, f: &mut F) {
    match e {
        Encoder::Conv(c) => {
            c.w.iter().for_each(&mut *f);
            c.b.iter().for_each(&mut *f);
        }
        Encoder::Rnn(r) => {
            r.wx.iter().for_each(&mut *f);
            r.wh.iter().for_each(&mut *f);
            r.b.iter().for_each(&mut *f);
        }
        Encoder::Lstm(l) => {
            l.wx.iter().for_each(&mut *f);
            l.wh.iter().for_each(&mut *f);
            l.b.iter().for_each(&mut *f);
        }
    }
}

fn visit_encoder_mut<F: FnMut(&mut f64)>(e: &mut Encoder, f: &mut F) {
    match e {
        Encoder::Conv(c) => {
            c.w.iter_mut().for_each(&mut *f);
            c.b.iter_mut().for_each(&mut *f);
        }
        Encoder::Rnn(r) => {
            r.wx.iter_mut().for_each(&mut *f);
            r.wh.iter_mut().for_each(&mut *f);
            r.b.iter_mut().for_each(&mut *f);
        }
        Encoder::Lstm(l) => {
            l.wx.iter_mut().for_each(&mut *f);
            l.wh.iter_mut().for_each(&mut *f);
            l.b.iter_mut().for_each(&mut *f);
        }
    }
}

fn visit_trunk<F: FnMut(&f64)>(t: &Trunk, f: &mut F) {
    for e in &t.encoders {
        visit_encoder(e, f);
    }
    visit_dense(&t.fc, f);
}

fn visit_trunk_mut<F: FnMut(&mut f64)>(t: &mut Trunk, f: &mut F) {
    for e in &mut t.encoders {
        visit_encoder_mut(e, f);
    }
    visit_dense_mut(&mut t.fc, f);
}

fn visit_body<F: FnMut(&f64)>(b: &Body, f: &mut F) {
    match b {
        Body::Separate { actor, critic } => {
            visit_trunk(actor, f);
            visit_trunk(critic, f);
        }
        Body::Shared(t) => visit_trunk(t, f),
    }
}

fn visit_body_mut<F: FnMut(&mut f64)>(b: &mut Body, f: &mut F) {
    match b {
        Body::Separate { actor, critic } => {
            visit_trunk_mut(actor, f);
            visit_trunk_mut(critic, f);
        }
        Body::Shared(t) => visit_trunk_mut(t, f),
    }
}

// ---------------------------------------------------------------------------
// Loss helpers shared by the trainer and its gradient checks
// ---------------------------------------------------------------------------

pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps = logits.mapv(|v| (v - max).exp());
    let sum = exps.sum();
    exps / sum
}

pub fn entropy(probs: &Array1<f64>) -> f64 {
    -probs
        .iter()
        .map(|&p| if p > 1e-300 { p * p.ln() } else { 0.0 })
        .sum::<f64>()
}

/// Per-sample actor loss with a frozen advantage:
/// `-advantage * ln p[action] - entropy_weight * H(p)`.
pub fn actor_sample_loss(
    probs: &Array1<f64>,
    action: usize,
    advantage: f64,
    entropy_weight: f64,
) -> f64 {
    -advantage * probs[action].max(1e-300).ln() - entropy_weight * entropy(probs)
}

/// Gradient of [`actor_sample_loss`] w.r.t. the policy logits.
pub fn actor_logit_grad(
    probs: &Array1<f64>,
    action: usize,
    advantage: f64,
    entropy_weight: f64,
) -> Array1<f64> {
    let h = entropy(probs);
    let mut d = Array1::zeros(probs.len());
    for k in 0..probs.len() {
        let onehot = if k == action { 1.0 } else { 0.0 };
        let pg = -advantage * (onehot - probs[k]);
        let ent = entropy_weight * probs[k] * (probs[k].max(1e-300).ln() + h);
        d[k] = pg + ent;
    }
    d
}

/// Per-sample critic loss `(value - ret)^2` and its gradient `2(value - ret)`.
pub fn critic_sample_loss(value: f64, ret: f64) -> f64 {
    (value - ret) * (value - ret)
}

pub fn critic_value_grad(value: f64, ret: f64) -> f64 {
    2.0 * (value - ret)
}

// ---------------------------------------------------------------------------
// Multi-channel 1-D convolution (early-stopping classifier)
// ---------------------------------------------------------------------------

/// Strided multi-channel 1-D convolution for sequence classifiers.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub w: Array3<f64>, // out_ch x in_ch x kernel
    pub b: Array1<f64>,
    pub stride: usize,
}

impl Conv1d {
    pub fn init(
        rng: &mut ChaCha20Rng,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let fan_in = in_ch * kernel;
        let w = Array3::from_shape_fn((out_ch, in_ch, kernel), |_| xavier(rng, fan_in, out_ch));
        Conv1d {
            w,
            b: Array1::zeros(out_ch),
            stride,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Conv1d {
            w: Array3::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
            stride: self.stride,
        }
    }

    pub fn out_width(&self, in_width: usize) -> usize {
        (in_width - self.w.dim().2) / self.stride + 1
    }

    /// Pre-activation feature map `out_ch x out_width`.
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let (out_ch, in_ch, k) = self.w.dim();
        let out_w = self.out_width(x.ncols());
        let mut out = Array2::zeros((out_ch, out_w));
        for oc in 0..out_ch {
            for j in 0..out_w {
                let start = j * self.stride;
                let mut acc = self.b[oc];
                for ic in 0..in_ch {
                    for t in 0..k {
                        acc += self.w[(oc, ic, t)] * x[(ic, start + t)];
                    }
                }
                out[(oc, j)] = acc;
            }
        }
        out
    }

    /// Accumulates grads and returns grad w.r.t. the input.
    pub fn backward(
        &self,
        x: &Array2<f64>,
        d_pre: &Array2<f64>,
        g: &mut Conv1d,
    ) -> Array2<f64> {
        let (out_ch, in_ch, k) = self.w.dim();
        let out_w = d_pre.ncols();
        let mut dx = Array2::zeros(x.raw_dim());
        for oc in 0..out_ch {
            for j in 0..out_w {
                let d = d_pre[(oc, j)];
                if d == 0.0 {
                    continue;
                }
                g.b[oc] += d;
                let start = j * self.stride;
                for ic in 0..in_ch {
                    for t in 0..k {
                        g.w[(oc, ic, t)] += d * x[(ic, start + t)];
                        dx[(ic, start + t)] += d * self.w[(oc, ic, t)];
                    }
                }
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam over a flat parameter vector with per-parameter learning rates.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Adam {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: &[f64]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), lr.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= lr[i] * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"ABCK";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub spec: NetSpec,
    pub channels: usize,
    pub width: usize,
    pub n_actions: usize,
    pub epoch: usize,
}

/// Writes a parameter snapshot: magic, version, JSON header, f64 LE payload.
pub fn save_checkpoint(
    path: &std::path::Path,
    header: &CheckpointHeader,
    params: &[f64],
) -> Result<(), NnError> {
    let header_json = serde_json::to_vec(header).expect("header serializes");
    let mut buf =
        Vec::with_capacity(4 + 4 + 4 + header_json.len() + 8 + params.len() * 8);
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_json);
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    Ok(std::fs::write(path, buf)?)
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<(CheckpointHeader, Vec<f64>), NnError> {
    let data = std::fs::read(path)?;
    let corrupt = |m: &str| NnError::Corrupt(m.to_string());
    if data.len() < 12 || &data[0..4] != CKPT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(data[4..8].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(data[8..12].try_into().unwrap()) as usize;
    if data.len() < 12 + hlen + 8 {
        return Err(corrupt("truncated header"));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&data[12..12 + hlen]).map_err(|e| corrupt(&e.to_string()))?;
    let n = u64::from_le_bytes(data[12 + hlen..20 + hlen].try_into().unwrap()) as usize;
    let payload = &data[20 + hlen..];
    if payload.len() != n * 8 {
        return Err(corrupt("truncated payload"));
    }
    let params = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, params))
}
