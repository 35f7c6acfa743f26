//! Early-stopping predictors over training-curve prefixes.
//!
//! Labeling ranks finished runs by final score: the top fraction is
//! positive (worth full training). Classifiers are fit on an expanded
//! positive set (top 20% by default) to fight class imbalance, then the
//! decision threshold is re-tuned on the *true* labels (top 1%) to the
//! largest value that keeps every tuning positive — zero false negatives by
//! construction, maximal true-negative rate subject to that.
//!
//! Five methods: a 1-D CNN over the curve prefix, a classifier over code
//! embeddings, their combination, and two fit-free heuristics (max/last
//! prefix reward against the threshold).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::nn::{Adam, Conv1d, Dense};
use crate::trainer::{TrainingRun, SCORE_WINDOW};

#[derive(Debug, Error)]
pub enum EarlyStopError {
    #[error("run {0} has no final score (needs {SCORE_WINDOW} test evaluations)")]
    UnscoredRun(String),
    #[error("positive fraction must be in (0, 1), got {0}")]
    BadFraction(f64),
    #[error("training set must contain both classes")]
    SingleClass,
    #[error("tuning set has no positives")]
    NoPositives,
    #[error("method {0:?} needs a code embedding")]
    MissingEmbedding(Method),
    #[error("embedding dimension mismatch: got {got}, model expects {expected}")]
    EmbeddingDim { got: usize, expected: usize },
    #[error("need at least 2 folds, got {0}")]
    BadFolds(usize),
    #[error("classifier config: {0}")]
    BadConfig(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("store corrupt: {0}")]
    Corrupt(String),
}

/// Prefix featurization: pool the first `k` epoch rewards down to `l` bins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrefixConfig {
    /// Epochs of reward curve the predictor may see.
    pub k: usize,
    /// Downsampled prefix length (mean pooling).
    pub l: usize,
}

impl Default for PrefixConfig {
    fn default() -> Self {
        PrefixConfig { k: 10_000, l: 1_000 }
    }
}

/// Downsampled prefix plus the exact max/last of the raw prefix, kept as
/// explicit features so the heuristic methods stay exact under pooling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixFeatures {
    pub values: Vec<f64>,
    pub max: f64,
    pub last: f64,
}

/// Mean-pools the first `cfg.k` entries of `curve` into `cfg.l` bins.
pub fn downsample_prefix(curve: &[f64], cfg: &PrefixConfig) -> PrefixFeatures {
    let raw = &curve[..curve.len().min(cfg.k)];
    let n = raw.len().max(1);
    let values = (0..cfg.l)
        .map(|i| {
            let lo = i * n / cfg.l;
            let hi = (((i + 1) * n / cfg.l).max(lo + 1)).min(n);
            let lo = lo.min(n - 1);
            raw[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect();
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let last = raw.last().copied().unwrap_or(0.0);
    PrefixFeatures {
        values,
        max: if raw.is_empty() { 0.0 } else { max },
        last,
    }
}

/// One run prepared for predictor training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledRun {
    pub run_id: String,
    pub prefix: PrefixFeatures,
    pub embedding: Option<Vec<f64>>,
    pub final_score: f64,
    /// Rank position as a ratio in [0, 1]; 0 is the best run.
    pub final_rank_percentile: f64,
    /// Label under the fraction in force when the run was labeled.
    pub label: bool,
}

fn rank_order(scored: &mut [(usize, f64, &str)]) {
    // Descending score; ties go to the lexicographically smaller run id.
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.2.cmp(b.2))
    });
}

/// Number of positives for `fraction` of `n`: `ceil(fraction * n)`.
pub fn positive_count(n: usize, fraction: f64) -> usize {
    (fraction * n as f64).ceil() as usize
}

/// Ranks runs by final score and labels the top `positive_fraction`.
pub fn label_runs(
    runs: &[TrainingRun],
    positive_fraction: f64,
    prefix_cfg: &PrefixConfig,
) -> Result<Vec<LabeledRun>, EarlyStopError> {
    if !(positive_fraction > 0.0 && positive_fraction < 1.0) {
        return Err(EarlyStopError::BadFraction(positive_fraction));
    }
    let mut scored: Vec<(usize, f64, &str)> = Vec::with_capacity(runs.len());
    for (i, run) in runs.iter().enumerate() {
        let score = run
            .smoothed_score(SCORE_WINDOW)
            .ok_or_else(|| EarlyStopError::UnscoredRun(run.run_id.clone()))?;
        scored.push((i, score, &run.run_id));
    }
    rank_order(&mut scored);
    let n = runs.len();
    let n_pos = positive_count(n, positive_fraction);
    let denom = (n - 1).max(1) as f64;
    let mut out: Vec<Option<LabeledRun>> = vec![None; n];
    for (rank, &(idx, score, _)) in scored.iter().enumerate() {
        out[idx] = Some(LabeledRun {
            run_id: runs[idx].run_id.clone(),
            prefix: downsample_prefix(&runs[idx].reward_curve, prefix_cfg),
            embedding: None,
            final_score: score,
            final_rank_percentile: rank as f64 / denom,
            label: rank < n_pos,
        });
    }
    Ok(out.into_iter().map(|o| o.unwrap()).collect())
}

// ---------------------------------------------------------------------------
// Predictors
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    RewardOnly,
    TextOnly,
    TextReward,
    HeuristicMax,
    HeuristicLast,
}

impl Method {
    pub fn learned(&self) -> bool {
        matches!(self, Method::RewardOnly | Method::TextOnly | Method::TextReward)
    }

    pub fn uses_text(&self) -> bool {
        matches!(self, Method::TextOnly | Method::TextReward)
    }

    pub fn uses_reward(&self) -> bool {
        matches!(
            self,
            Method::RewardOnly | Method::TextReward | Method::HeuristicMax | Method::HeuristicLast
        )
    }

    pub const ALL: [Method; 5] = [
        Method::RewardOnly,
        Method::TextOnly,
        Method::TextReward,
        Method::HeuristicMax,
        Method::HeuristicLast,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::RewardOnly => "reward_only",
            Method::TextOnly => "text_only",
            Method::TextReward => "text_reward",
            Method::HeuristicMax => "heuristic_max",
            Method::HeuristicLast => "heuristic_last",
        }
    }
}

/// Classifier hyperparameters; the convolutional widths are deliberately
/// exposed rather than hard-coded.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub prefix: PrefixConfig,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub c1_filters: usize,
    pub c1_kernel: usize,
    pub c1_stride: usize,
    pub c2_filters: usize,
    pub c2_kernel: usize,
    pub c2_stride: usize,
    pub emb_hidden: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            prefix: PrefixConfig::default(),
            epochs: 40,
            lr: 1e-3,
            batch_size: 32,
            c1_filters: 8,
            c1_kernel: 8,
            c1_stride: 4,
            c2_filters: 16,
            c2_kernel: 4,
            c2_stride: 2,
            emb_hidden: 32,
        }
    }
}

/// Learned scorer: two convolution stages with pooling over the curve
/// prefix, a dense stage over the code embedding, and a single logistic
/// output over the concatenated features.
#[derive(Debug, Clone)]
struct Classifier {
    conv: Option<(Conv1d, Conv1d)>,
    emb_fc: Option<Dense>,
    head: Dense,
    l: usize,
    emb_dim: usize,
}

struct ClassifierCache {
    pre1: Option<Array2<f64>>,
    pre2: Option<Array2<f64>>,
    reward_features: Option<Array1<f64>>,
    emb_pre: Option<Array1<f64>>,
    features: Array1<f64>,
    logit: f64,
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

fn relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

impl Classifier {
    fn init(
        method: Method,
        cfg: &PredictorConfig,
        emb_dim: usize,
        rng: &mut ChaCha20Rng,
    ) -> Result<Self, EarlyStopError> {
        let mut feature_dim = 0;
        let conv = if method.uses_reward() {
            let w1 = cfg
                .prefix
                .l
                .checked_sub(cfg.c1_kernel)
                .map(|d| d / cfg.c1_stride + 1)
                .filter(|&w| w > 0)
                .ok_or_else(|| EarlyStopError::BadConfig("conv1 wider than prefix".into()))?;
            let w2 = w1
                .checked_sub(cfg.c2_kernel)
                .map(|d| d / cfg.c2_stride + 1)
                .filter(|&w| w > 0)
                .ok_or_else(|| EarlyStopError::BadConfig("conv2 wider than conv1 output".into()))?;
            let _ = w2;
            let c1 = Conv1d::init(rng, 1, cfg.c1_filters, cfg.c1_kernel, cfg.c1_stride);
            let c2 = Conv1d::init(rng, cfg.c1_filters, cfg.c2_filters, cfg.c2_kernel, cfg.c2_stride);
            // Mean + max pool per channel, plus the exact (max, last) pair.
            feature_dim += 2 * cfg.c2_filters + 2;
            Some((c1, c2))
        } else {
            None
        };
        let emb_fc = if method.uses_text() {
            feature_dim += cfg.emb_hidden;
            Some(Dense::init(rng, emb_dim, cfg.emb_hidden))
        } else {
            None
        };
        Ok(Classifier {
            conv,
            emb_fc,
            head: Dense::init(rng, feature_dim, 1),
            l: cfg.prefix.l,
            emb_dim,
        })
    }

    fn forward(
        &self,
        prefix: &PrefixFeatures,
        embedding: Option<&[f64]>,
    ) -> Result<ClassifierCache, EarlyStopError> {
        let mut parts: Vec<f64> = Vec::new();
        let (pre1, pre2, reward_features) = if let Some((c1, c2)) = &self.conv {
            let x = Array2::from_shape_vec((1, self.l), prefix.values.clone())
                .expect("prefix length fixed");
            let pre1 = c1.forward(&x);
            let act1 = pre1.mapv(relu);
            let pre2 = c2.forward(&act1);
            let act2 = pre2.mapv(relu);
            let ch = act2.nrows();
            let mut feats = Vec::with_capacity(2 * ch + 2);
            for c in 0..ch {
                let row = act2.row(c);
                feats.push(row.mean().unwrap_or(0.0));
                feats.push(row.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            }
            feats.push(prefix.max);
            feats.push(prefix.last);
            parts.extend_from_slice(&feats);
            (Some(pre1), Some(pre2), Some(Array1::from(feats)))
        } else {
            (None, None, None)
        };
        let emb_pre = if let Some(fc) = &self.emb_fc {
            let emb = embedding.ok_or(EarlyStopError::MissingEmbedding(Method::TextOnly))?;
            if emb.len() != self.emb_dim {
                return Err(EarlyStopError::EmbeddingDim {
                    got: emb.len(),
                    expected: self.emb_dim,
                });
            }
            let pre = fc.forward(&Array1::from(emb.to_vec()));
            parts.extend(pre.iter().map(|&v| relu(v)));
            Some(pre)
        } else {
            None
        };
        let features = Array1::from(parts);
        let logit = self.head.forward(&features)[0];
        Ok(ClassifierCache {
            pre1,
            pre2,
            reward_features,
            emb_pre,
            features,
            logit,
        })
    }

    /// Accumulates gradients for `d_logit` into `g`.
    fn backward(
        &self,
        prefix: &PrefixFeatures,
        embedding: Option<&[f64]>,
        cache: &ClassifierCache,
        d_logit: f64,
        g: &mut Classifier,
    ) {
        let d_features = self.head.backward(
            &cache.features,
            &ndarray::arr1(&[d_logit]),
            &mut g.head,
        );
        let mut offset = 0;
        if let (Some((c1, c2)), Some((gc1, gc2))) = (&self.conv, &mut g.conv.as_mut()) {
            let pre1 = cache.pre1.as_ref().unwrap();
            let pre2 = cache.pre2.as_ref().unwrap();
            let ch = pre2.nrows();
            let w2 = pre2.ncols();
            // Through the pooled features: mean spreads evenly, max routes
            // to the (first) argmax; the explicit (max, last) entries are
            // constants w.r.t. the parameters.
            let mut d_act2: Array2<f64> = Array2::zeros((ch, w2));
            for c in 0..ch {
                let d_mean = d_features[offset + 2 * c];
                let d_max = d_features[offset + 2 * c + 1];
                let row: Vec<f64> = pre2.row(c).iter().map(|&v| relu(v)).collect();
                let mut arg = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[arg] {
                        arg = j;
                    }
                    d_act2[(c, j)] += d_mean / w2 as f64;
                }
                d_act2[(c, arg)] += d_max;
            }
            offset += 2 * ch + 2;
            let d_pre2 = ndarray::Zip::from(&d_act2)
                .and(pre2)
                .map_collect(|&d, &p| d * relu_grad(p));
            let x = Array2::from_shape_vec((1, self.l), prefix.values.clone()).unwrap();
            let act1 = pre1.mapv(relu);
            let d_act1 = c2.backward(&act1, &d_pre2, gc2);
            let d_pre1 = ndarray::Zip::from(&d_act1)
                .and(pre1)
                .map_collect(|&d, &p| d * relu_grad(p));
            c1.backward(&x, &d_pre1, gc1);
        }
        if let (Some(fc), Some(gfc)) = (&self.emb_fc, &mut g.emb_fc.as_mut()) {
            let pre = cache.emb_pre.as_ref().unwrap();
            let d_hidden: Array1<f64> = pre
                .iter()
                .enumerate()
                .map(|(i, &p)| d_features[offset + i] * relu_grad(p))
                .collect();
            let emb = Array1::from(embedding.unwrap().to_vec());
            fc.backward(&emb, &d_hidden, gfc);
        }
    }

    fn zeros_like(&self) -> Classifier {
        Classifier {
            conv: self
                .conv
                .as_ref()
                .map(|(a, b)| (a.zeros_like(), b.zeros_like())),
            emb_fc: self.emb_fc.as_ref().map(|d| d.zeros_like()),
            head: self.head.zeros_like(),
            l: self.l,
            emb_dim: self.emb_dim,
        }
    }

    fn visit<F: FnMut(&f64)>(&self, f: &mut F) {
        if let Some((a, b)) = &self.conv {
            a.w.iter().for_each(&mut *f);
            a.b.iter().for_each(&mut *f);
            b.w.iter().for_each(&mut *f);
            b.b.iter().for_each(&mut *f);
        }
        if let Some(d) = &self.emb_fc {
            d.w.iter().for_each(&mut *f);
            d.b.iter().for_each(&mut *f);
        }
        self.head.w.iter().for_each(&mut *f);
        self.head.b.iter().for_each(&mut *f);
    }

    fn visit_mut<F: FnMut(&mut f64)>(&mut self, f: &mut F) {
        if let Some((a, b)) = &mut self.conv {
            a.w.iter_mut().for_each(&mut *f);
            a.b.iter_mut().for_each(&mut *f);
            b.w.iter_mut().for_each(&mut *f);
            b.b.iter_mut().for_each(&mut *f);
        }
        if let Some(d) = &mut self.emb_fc {
            d.w.iter_mut().for_each(&mut *f);
            d.b.iter_mut().for_each(&mut *f);
        }
        self.head.w.iter_mut().for_each(&mut *f);
        self.head.b.iter_mut().for_each(&mut *f);
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |&v| out.push(v));
        out
    }

    fn load_flat(&mut self, params: &[f64]) {
        let mut it = params.iter();
        self.visit_mut(&mut |v| *v = *it.next().unwrap());
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// A fitted (or heuristic) early-stopping predictor with its decision
/// threshold. `predict_stop` continues iff `score >= threshold`, so the
/// untuned default threshold of -inf never stops anything.
pub struct StopPredictor {
    pub method: Method,
    pub prefix_cfg: PrefixConfig,
    model: Option<Classifier>,
    pub threshold: f64,
}

impl StopPredictor {
    /// Predictor score for one run: classifier output in [0, 1] for learned
    /// methods, max/last raw-prefix reward for the heuristics.
    pub fn score(
        &self,
        prefix: &PrefixFeatures,
        embedding: Option<&[f64]>,
    ) -> Result<f64, EarlyStopError> {
        match self.method {
            Method::HeuristicMax => Ok(prefix.max),
            Method::HeuristicLast => Ok(prefix.last),
            _ => {
                let model = self.model.as_ref().expect("learned predictor has a model");
                if self.method.uses_text() && embedding.is_none() {
                    return Err(EarlyStopError::MissingEmbedding(self.method));
                }
                let cache = model.forward(prefix, embedding)?;
                Ok(sigmoid(cache.logit))
            }
        }
    }

    /// Testing aid: stops every run regardless of its prefix.
    pub fn always_stop() -> Self {
        StopPredictor {
            method: Method::HeuristicMax,
            prefix_cfg: PrefixConfig::default(),
            model: None,
            threshold: f64::INFINITY,
        }
    }
}

/// Fits a predictor on smoothed-label runs. Heuristic methods have nothing
/// to fit; learned methods train with class-weighted logistic loss, seeded
/// shuffling, and deterministic initialization.
pub fn train_predictor(
    method: Method,
    train_set: &[LabeledRun],
    seed: u64,
    cfg: &PredictorConfig,
) -> Result<StopPredictor, EarlyStopError> {
    if !method.learned() {
        return Ok(StopPredictor {
            method,
            prefix_cfg: cfg.prefix,
            model: None,
            threshold: f64::NEG_INFINITY,
        });
    }
    let n_pos = train_set.iter().filter(|r| r.label).count();
    let n_neg = train_set.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EarlyStopError::SingleClass);
    }
    let emb_dim = if method.uses_text() {
        train_set
            .iter()
            .find_map(|r| r.embedding.as_ref().map(|e| e.len()))
            .ok_or(EarlyStopError::MissingEmbedding(method))?
    } else {
        0
    };
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut model = Classifier::init(method, cfg, emb_dim, &mut rng)?;
    // Class weighting on top of the smoothed-label expansion.
    let n = train_set.len() as f64;
    let w_pos = n / (2.0 * n_pos as f64);
    let w_neg = n / (2.0 * n_neg as f64);

    let mut params = model.flatten();
    let mut adam = Adam::new(params.len());
    let lr = vec![cfg.lr; params.len()];
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut grads = model.zeros_like();
            for &i in chunk {
                let run = &train_set[i];
                let cache = model.forward(&run.prefix, run.embedding.as_deref())?;
                let y = if run.label { 1.0 } else { 0.0 };
                let w = if run.label { w_pos } else { w_neg };
                // d/dz of weighted BCE-with-logits.
                let d_logit = w * (sigmoid(cache.logit) - y) / chunk.len() as f64;
                model.backward(
                    &run.prefix,
                    run.embedding.as_deref(),
                    &cache,
                    d_logit,
                    &mut grads,
                );
            }
            let flat = grads.flatten();
            adam.step(&mut params, &flat, &lr);
            model.load_flat(&params);
        }
    }
    Ok(StopPredictor {
        method,
        prefix_cfg: cfg.prefix,
        model: Some(model),
        threshold: f64::NEG_INFINITY,
    })
}

/// Sets the threshold to the largest value that keeps every positive in the
/// tuning set: the minimum positive score. False-negative rate on the
/// tuning set is zero by construction; the true-negative rate is maximal
/// subject to that.
pub fn tune_threshold(
    predictor: &mut StopPredictor,
    tuning_set: &[LabeledRun],
) -> Result<f64, EarlyStopError> {
    let mut min_positive: Option<f64> = None;
    for run in tuning_set.iter().filter(|r| r.label) {
        let s = predictor.score(&run.prefix, run.embedding.as_deref())?;
        min_positive = Some(match min_positive {
            None => s,
            Some(m) => m.min(s),
        });
    }
    let threshold = min_positive.ok_or(EarlyStopError::NoPositives)?;
    predictor.threshold = threshold;
    Ok(threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopDecision {
    Stop,
    Continue,
}

/// Pure decision function: continue iff the predictor score is at or above
/// the threshold (ties never stop a run).
pub fn predict_stop(
    predictor: &StopPredictor,
    raw_prefix: &[f64],
    embedding: Option<&[f64]>,
) -> Result<StopDecision, EarlyStopError> {
    let prefix = downsample_prefix(raw_prefix, &predictor.prefix_cfg);
    let score = predictor.score(&prefix, embedding)?;
    Ok(if score >= predictor.threshold {
        StopDecision::Continue
    } else {
        StopDecision::Stop
    })
}

// ---------------------------------------------------------------------------
// Cross validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvConfig {
    /// Expanded positive fraction used to fit the classifier.
    pub smooth_fraction: f64,
    /// True positive fraction used for threshold tuning and evaluation.
    pub true_fraction: f64,
    pub predictor: PredictorConfig,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            smooth_fraction: 0.20,
            true_fraction: 0.01,
            predictor: PredictorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub fold: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub false_negative_rate: f64,
    pub true_negative_rate: f64,
    /// Fold skipped (no true positives in its training share).
    pub skipped: bool,
}

/// Cross-validation outcome for one method.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CVReport {
    pub method: Method,
    pub folds: Vec<FoldOutcome>,
    /// Unweighted mean over non-skipped folds.
    pub mean_fnr: f64,
    pub mean_tnr: f64,
    /// Rates pooled over all non-skipped folds' evaluation sets.
    pub pooled_fnr: f64,
    pub pooled_tnr: f64,
    /// Fold index per run, for reproducibility audits.
    pub fold_assignment: Vec<(String, usize)>,
}

/// K-fold protocol with the inverted train share: each fold's 1/k of the
/// runs is the *training* set (smoothed labels for fitting, true labels for
/// threshold tuning) and the remaining runs are evaluated with true labels.
pub fn cross_validate(
    runs: &[LabeledRun],
    method: Method,
    k_folds: usize,
    seed: u64,
    cfg: &CvConfig,
) -> Result<CVReport, EarlyStopError> {
    if k_folds < 2 {
        return Err(EarlyStopError::BadFolds(k_folds));
    }
    let n = runs.len();
    // Re-rank to derive both label sets from final scores.
    let mut scored: Vec<(usize, f64, &str)> = runs
        .iter()
        .enumerate()
        .map(|(i, r)| (i, r.final_score, r.run_id.as_str()))
        .collect();
    rank_order(&mut scored);
    let n_true = positive_count(n, cfg.true_fraction);
    let n_smooth = positive_count(n, cfg.smooth_fraction);
    let mut label_true = vec![false; n];
    let mut label_smooth = vec![false; n];
    for (rank, &(idx, _, _)) in scored.iter().enumerate() {
        label_true[idx] = rank < n_true;
        label_smooth[idx] = rank < n_smooth;
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut fold_of = vec![0usize; n];
    for (pos, &idx) in order.iter().enumerate() {
        fold_of[idx] = pos % k_folds;
    }

    let mut folds = Vec::with_capacity(k_folds);
    let mut pooled_fn = 0usize;
    let mut pooled_pos = 0usize;
    let mut pooled_tn = 0usize;
    let mut pooled_neg = 0usize;
    for fold in 0..k_folds {
        let train_idx: Vec<usize> = (0..n).filter(|&i| fold_of[i] == fold).collect();
        let eval_idx: Vec<usize> = (0..n).filter(|&i| fold_of[i] != fold).collect();
        let n_train = train_idx.len();
        let n_eval = eval_idx.len();
        let fold_has_true_positive = train_idx.iter().any(|&i| label_true[i]);
        let fold_has_both_smooth = train_idx.iter().any(|&i| label_smooth[i])
            && train_idx.iter().any(|&i| !label_smooth[i]);
        if !fold_has_true_positive || (method.learned() && !fold_has_both_smooth) {
            folds.push(FoldOutcome {
                fold,
                n_train,
                n_eval,
                false_negative_rate: 0.0,
                true_negative_rate: 0.0,
                skipped: true,
            });
            continue;
        }

        let fit_set: Vec<LabeledRun> = train_idx
            .iter()
            .map(|&i| LabeledRun {
                label: label_smooth[i],
                ..runs[i].clone()
            })
            .collect();
        let tune_set: Vec<LabeledRun> = train_idx
            .iter()
            .map(|&i| LabeledRun {
                label: label_true[i],
                ..runs[i].clone()
            })
            .collect();
        let mut predictor = train_predictor(method, &fit_set, seed ^ (fold as u64 + 1), &cfg.predictor)?;
        tune_threshold(&mut predictor, &tune_set)?;

        let mut fn_count = 0usize;
        let mut tp_total = 0usize;
        let mut tn_count = 0usize;
        let mut neg_total = 0usize;
        for &i in &eval_idx {
            let run = &runs[i];
            let score = predictor.score(&run.prefix, run.embedding.as_deref())?;
            let stopped = score < predictor.threshold;
            if label_true[i] {
                tp_total += 1;
                if stopped {
                    fn_count += 1;
                }
            } else {
                neg_total += 1;
                if stopped {
                    tn_count += 1;
                }
            }
        }
        pooled_fn += fn_count;
        pooled_pos += tp_total;
        pooled_tn += tn_count;
        pooled_neg += neg_total;
        folds.push(FoldOutcome {
            fold,
            n_train,
            n_eval,
            false_negative_rate: if tp_total > 0 {
                fn_count as f64 / tp_total as f64
            } else {
                0.0
            },
            true_negative_rate: if neg_total > 0 {
                tn_count as f64 / neg_total as f64
            } else {
                0.0
            },
            skipped: false,
        })
    }
    let active: Vec<&FoldOutcome> = folds.iter().filter(|f| !f.skipped).collect();
    let mean = |f: &dyn Fn(&FoldOutcome) -> f64| -> f64 {
        if active.is_empty() {
            0.0
        } else {
            active.iter().map(|o| f(o)).sum::<f64>() / active.len() as f64
        }
    };
    Ok(CVReport {
        method,
        mean_fnr: mean(&|o| o.false_negative_rate),
        mean_tnr: mean(&|o| o.true_negative_rate),
        pooled_fnr: if pooled_pos > 0 {
            pooled_fn as f64 / pooled_pos as f64
        } else {
            0.0
        },
        pooled_tnr: if pooled_neg > 0 {
            pooled_tn as f64 / pooled_neg as f64
        } else {
            0.0
        },
        fold_assignment: (0..n).map(|i| (runs[i].run_id.clone(), fold_of[i])).collect(),
        folds,
    })
}

/// Two-panel text table over methods: FNR and TNR, per fold mean and pooled.
pub fn render_cv_table(reports: &[CVReport]) -> String {
    crate::report::render_table(
        &["Method", "FNR (mean)", "TNR (mean)", "FNR (pooled)", "TNR (pooled)"],
        &reports
            .iter()
            .map(|r| {
                vec![
                    r.method.name().to_string(),
                    crate::report::pct_1dp(r.mean_fnr),
                    crate::report::pct_1dp(r.mean_tnr),
                    crate::report::pct_1dp(r.pooled_fnr),
                    crate::report::pct_1dp(r.pooled_tnr),
                ]
            })
            .collect::<Vec<_>>(),
    )
}

// ---------------------------------------------------------------------------
// Embeddings and stores
// ---------------------------------------------------------------------------

/// Code-embedding provider behind the same record/replay discipline as the
/// completion client.
pub trait EmbeddingProvider: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f64>, String>;
    fn dim(&self) -> usize;
}

/// Deterministic offline embedder: hashes the text into a seeded random
/// unit vector. Carries no semantics; it exists so text-method plumbing
/// runs without a live embedding service.
pub struct HashEmbedder {
    pub dim: usize,
}

impl EmbeddingProvider for HashEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>, String> {
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        let digest = hasher.finalize();
        let seed = u64::from_le_bytes(digest[..8].try_into().unwrap());
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut v: Vec<f64> = (0..self.dim)
            .map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0))
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

/// Replay store of recorded embeddings keyed by sha256(text).
pub struct RecordedEmbeddings {
    entries: BTreeMap<String, Vec<f64>>,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingEntry {
    key: String,
    vector: Vec<f64>,
}

fn text_key(text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl RecordedEmbeddings {
    pub fn load(path: &Path) -> Result<Self, EarlyStopError> {
        let text = std::fs::read_to_string(path).map_err(|e| EarlyStopError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut entries = BTreeMap::new();
        let mut dim = 0;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let e: EmbeddingEntry = serde_json::from_str(line)
                .map_err(|err| EarlyStopError::Corrupt(err.to_string()))?;
            dim = e.vector.len();
            entries.insert(e.key, e.vector);
        }
        Ok(RecordedEmbeddings { entries, dim })
    }

    /// Records every embedding the inner provider produces.
    pub fn record_through(
        inner: &dyn EmbeddingProvider,
        texts: &[&str],
        path: &Path,
    ) -> Result<(), EarlyStopError> {
        let mut file = std::fs::File::create(path).map_err(|e| EarlyStopError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        for text in texts {
            let vector = inner.embed(text).map_err(EarlyStopError::Corrupt)?;
            let entry = EmbeddingEntry { key: text_key(text), vector };
            let line = serde_json::to_string(&entry).expect("entry serializes");
            writeln!(file, "{line}").map_err(|e| EarlyStopError::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
        }
        Ok(())
    }
}

impl EmbeddingProvider for RecordedEmbeddings {
    fn embed(&self, text: &str) -> Result<Vec<f64>, String> {
        self.entries
            .get(&text_key(text))
            .cloned()
            .ok_or_else(|| format!("no recorded embedding for text key {}", text_key(text)))
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

/// Audit log of labeled runs: run id, digest of the prefix, score,
/// percentile, label. One JSON record per line.
pub fn save_labeled_store(path: &Path, runs: &[LabeledRun]) -> Result<(), EarlyStopError> {
    let mut file = std::fs::File::create(path).map_err(|e| EarlyStopError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    for run in runs {
        let mut hasher = Sha256::new();
        for v in &run.prefix.values {
            hasher.update(v.to_le_bytes());
        }
        let digest: String = hasher
            .finalize()
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect();
        let line = serde_json::json!({
            "run_id": run.run_id,
            "prefix_digest": digest,
            "final_score": run.final_score,
            "percentile": run.final_rank_percentile,
            "label": run.label,
        });
        writeln!(file, "{line}").map_err(|e| EarlyStopError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synth_run(id: &str, curve: Vec<f64>, final_level: f64) -> TrainingRun {
        TrainingRun {
            run_id: id.to_string(),
            dataset: "synthetic".into(),
            state_id: "s".into(),
            net_id: "n".into(),
            seed: 0,
            reward_curve: curve,
            checkpoints: vec![],
            test_evals: (1..=12).map(|i| (i, final_level)).collect(),
            stopped_early: None,
            rejected: None,
        }
    }

    /// Separable family: rise rate controls both the prefix and the final
    /// score.
    fn separable_runs(n: usize, seed: u64) -> Vec<LabeledRun> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let prefix_cfg = PrefixConfig { k: 200, l: 50 };
        let runs: Vec<TrainingRun> = (0..n)
            .map(|i| {
                let rate: f64 = rand::Rng::gen_range(&mut rng, 0.05..1.0);
                let noise: f64 = rand::Rng::gen_range(&mut rng, -0.01..0.01);
                let curve: Vec<f64> = (0..200)
                    .map(|t| rate * (1.0 - (-(t as f64) / 50.0).exp()))
                    .collect();
                synth_run(&format!("run-{i:04}"), curve, rate + noise)
            })
            .collect();
        label_runs(&runs, 0.01, &prefix_cfg).unwrap()
    }

    #[test]
    fn label_arithmetic_is_exact() {
        let runs: Vec<TrainingRun> = (0..2000)
            .map(|i| synth_run(&format!("r{i:05}"), vec![0.0; 10], i as f64 * 0.001))
            .collect();
        let labeled = label_runs(&runs, 0.01, &PrefixConfig { k: 10, l: 5 }).unwrap();
        assert_eq!(labeled.iter().filter(|r| r.label).count(), 20);
        let labeled20 = label_runs(&runs, 0.20, &PrefixConfig { k: 10, l: 5 }).unwrap();
        assert_eq!(labeled20.iter().filter(|r| r.label).count(), 400);
        // Arbitrary n and fraction: always ceil(f * n).
        for (n, f) in [(7usize, 0.5f64), (100, 0.013), (3, 0.9)] {
            let runs: Vec<TrainingRun> = (0..n)
                .map(|i| synth_run(&format!("q{i}"), vec![0.0; 4], i as f64))
                .collect();
            let labeled = label_runs(&runs, f, &PrefixConfig { k: 4, l: 2 }).unwrap();
            assert_eq!(
                labeled.iter().filter(|r| r.label).count(),
                positive_count(n, f)
            );
        }
    }

    #[test]
    fn ties_at_cutoff_resolve_by_run_id() {
        let mut runs = vec![
            synth_run("b", vec![0.0; 4], 1.0),
            synth_run("a", vec![0.0; 4], 1.0),
            synth_run("c", vec![0.0; 4], 0.5),
        ];
        // fraction 1/3 -> exactly one positive; "a" and "b" tie on score.
        let labeled = label_runs(&runs, 0.34, &PrefixConfig { k: 4, l: 2 }).unwrap();
        let a = labeled.iter().find(|r| r.run_id == "a").unwrap();
        let b = labeled.iter().find(|r| r.run_id == "b").unwrap();
        assert!(a.label && !b.label);
        runs.swap(0, 1);
        let labeled = label_runs(&runs, 0.34, &PrefixConfig { k: 4, l: 2 }).unwrap();
        assert!(labeled.iter().find(|r| r.run_id == "a").unwrap().label);
    }

    #[test]
    fn unscored_runs_are_an_error() {
        let mut run = synth_run("r", vec![0.0; 4], 1.0);
        run.test_evals.truncate(3);
        assert!(matches!(
            label_runs(&[run], 0.5, &PrefixConfig { k: 4, l: 2 }),
            Err(EarlyStopError::UnscoredRun(_))
        ));
    }

    #[test]
    fn downsample_preserves_max_and_last_exactly() {
        let cfg = PrefixConfig { k: 100, l: 10 };
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for _ in 0..50 {
            let n = rand::Rng::gen_range(&mut rng, 1..150);
            let curve: Vec<f64> = (0..n)
                .map(|_| rand::Rng::gen_range(&mut rng, -5.0..5.0))
                .collect();
            let feats = downsample_prefix(&curve, &cfg);
            assert_eq!(feats.values.len(), 10);
            let raw = &curve[..curve.len().min(cfg.k)];
            let oracle_max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let oracle_last = *raw.last().unwrap();
            assert_eq!(feats.max, oracle_max);
            assert_eq!(feats.last, oracle_last);
        }
    }

    #[test]
    fn heuristic_scores_match_brute_force() {
        let cfg = PrefixConfig { k: 50, l: 10 };
        let curve: Vec<f64> = vec![0.1, 0.9, 0.4];
        let feats = downsample_prefix(&curve, &cfg);
        let max_pred = StopPredictor {
            method: Method::HeuristicMax,
            prefix_cfg: cfg,
            model: None,
            threshold: f64::NEG_INFINITY,
        };
        let last_pred = StopPredictor {
            method: Method::HeuristicLast,
            ..StopPredictor::always_stop()
        };
        assert_eq!(max_pred.score(&feats, None).unwrap(), 0.9);
        let last_feats = downsample_prefix(&curve, &last_pred.prefix_cfg);
        assert_eq!(last_pred.score(&last_feats, None).unwrap(), 0.4);
    }

    #[test]
    fn tune_threshold_matches_exhaustive_sweep() {
        // positives {0.8, 0.9}, negatives {0.1, 0.85}: threshold 0.8, TNR 1/2.
        let mk = |id: &str, score: f64, label: bool| LabeledRun {
            run_id: id.into(),
            prefix: PrefixFeatures {
                values: vec![score; 4],
                max: score,
                last: score,
            },
            embedding: None,
            final_score: score,
            final_rank_percentile: 0.0,
            label,
        };
        let tuning = vec![
            mk("p1", 0.8, true),
            mk("p2", 0.9, true),
            mk("n1", 0.1, false),
            mk("n2", 0.85, false),
        ];
        let mut pred = StopPredictor {
            method: Method::HeuristicMax,
            prefix_cfg: PrefixConfig { k: 4, l: 4 },
            model: None,
            threshold: f64::NEG_INFINITY,
        };
        let threshold = tune_threshold(&mut pred, &tuning).unwrap();
        assert_eq!(threshold, 0.8);

        // Exhaustive sweep oracle over candidate thresholds: the best TNR
        // subject to zero FNR.
        let scores: Vec<(f64, bool)> = tuning.iter().map(|r| (r.prefix.max, r.label)).collect();
        let mut best = (f64::NEG_INFINITY, -1.0);
        for &(cand, _) in &scores {
            let fnr = scores
                .iter()
                .filter(|(s, l)| *l && *s < cand)
                .count();
            if fnr == 0 {
                let tnr = scores.iter().filter(|(s, l)| !*l && *s < cand).count() as f64
                    / scores.iter().filter(|(_, l)| !*l).count() as f64;
                if tnr > best.1 {
                    best = (cand, tnr);
                }
            }
        }
        assert_eq!(best.0, threshold);
        assert_eq!(best.1, 0.5);

        // Zero FNR on the tuning set by construction.
        for r in tuning.iter().filter(|r| r.label) {
            let s = pred.score(&r.prefix, None).unwrap();
            assert!(s >= pred.threshold);
        }
        // A negative tied with the minimum positive is not stopped.
        let tied = mk("tie", 0.8, false);
        let s = pred.score(&tied.prefix, None).unwrap();
        assert_eq!(
            predict_stop(&pred, &vec![0.8; 4], None).unwrap(),
            StopDecision::Continue
        );
        assert!(s >= pred.threshold);
    }

    #[test]
    fn predict_stop_decisions() {
        let mut pred = StopPredictor {
            method: Method::HeuristicMax,
            prefix_cfg: PrefixConfig { k: 10, l: 5 },
            model: None,
            threshold: 0.8,
        };
        assert_eq!(
            predict_stop(&pred, &[0.1, 0.79, 0.3], None).unwrap(),
            StopDecision::Stop
        );
        assert_eq!(
            predict_stop(&pred, &[0.1, 0.8, 0.3], None).unwrap(),
            StopDecision::Continue
        );
        // Degenerate all-zero prefix still yields a decision.
        pred.threshold = f64::NEG_INFINITY;
        assert_eq!(
            predict_stop(&pred, &[0.0; 10], None).unwrap(),
            StopDecision::Continue
        );
    }

    #[test]
    fn learned_predictor_is_seed_deterministic() {
        let runs = separable_runs(120, 3);
        // Use the smoothed 20% labels for fitting.
        let mut fit: Vec<LabeledRun> = runs.clone();
        let mut scored: Vec<(usize, f64, &str)> = runs
            .iter()
            .enumerate()
            .map(|(i, r)| (i, r.final_score, r.run_id.as_str()))
            .collect();
        rank_order(&mut scored);
        let n_smooth = positive_count(runs.len(), 0.2);
        for (rank, &(idx, _, _)) in scored.iter().enumerate() {
            fit[idx].label = rank < n_smooth;
        }
        let cfg = PredictorConfig {
            prefix: PrefixConfig { k: 200, l: 50 },
            epochs: 5,
            ..PredictorConfig::default()
        };
        let a = train_predictor(Method::RewardOnly, &fit, 1, &cfg).unwrap();
        let b = train_predictor(Method::RewardOnly, &fit, 1, &cfg).unwrap();
        let feats = &runs[0].prefix;
        assert_eq!(
            a.score(feats, None).unwrap(),
            b.score(feats, None).unwrap()
        );
        // Single-class fit errors.
        let all_neg: Vec<LabeledRun> = runs
            .iter()
            .map(|r| LabeledRun { label: false, ..r.clone() })
            .collect();
        assert!(matches!(
            train_predictor(Method::RewardOnly, &all_neg, 0, &cfg),
            Err(EarlyStopError::SingleClass)
        ));
    }


    #[test]
    fn gradcheck_bisect() {
        for method in [Method::RewardOnly, Method::TextOnly] {
            let cfg = PredictorConfig {
                prefix: PrefixConfig { k: 40, l: 20 },
                c1_filters: 2, c1_kernel: 4, c1_stride: 2,
                c2_filters: 3, c2_kernel: 3, c2_stride: 2,
                emb_hidden: 4,
                ..PredictorConfig::default()
            };
            let mut rng = ChaCha20Rng::seed_from_u64(5);
            let model = Classifier::init(method, &cfg, 6, &mut rng).unwrap();
            let prefix = PrefixFeatures {
                values: (0..20).map(|i| (i as f64 * 0.3).sin()).collect(),
                max: 0.9, last: 0.2,
            };
            let emb: Vec<f64> = (0..6).map(|i| (i as f64 * 0.7).cos()).collect();
            let y = 1.0;
            let loss = |m: &Classifier| {
                let c = m.forward(&prefix, Some(&emb)).unwrap();
                let z = c.logit;
                z.max(0.0) - z * y + (1.0 + (-z.abs()).exp()).ln()
            };
            let mut grads = model.zeros_like();
            let cache = model.forward(&prefix, Some(&emb)).unwrap();
            let d_logit = sigmoid(cache.logit) - y;
            model.backward(&prefix, Some(&emb), &cache, d_logit, &mut grads);
            let analytic = grads.flatten();
            let mut probe = model.clone();
            let mut params = probe.flatten();
            let eps = 1e-6;
            let mut worst = (0.0f64, 0usize);
            for i in 0..params.len() {
                let orig = params[i];
                params[i] = orig + eps;
                probe.load_flat(&params);
                let lp = loss(&probe);
                params[i] = orig - eps;
                probe.load_flat(&params);
                let lm = loss(&probe);
                params[i] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                let denom = analytic[i].abs().max(fd.abs()).max(1e-6);
                let rel = (analytic[i] - fd).abs() / denom;
                if rel > worst.0 { worst = (rel, i); }
            }
            println!("{method:?}: n_params={} worst rel {:.2e} at coord {} (analytic {:.4e})",
                params.len(), worst.0, worst.1, analytic[worst.1]);
        }
        panic!("bisect report done");
    }

    #[test]
    fn classifier_gradcheck() {
        let cfg = PredictorConfig {
            prefix: PrefixConfig { k: 40, l: 20 },
            c1_filters: 2,
            c1_kernel: 4,
            c1_stride: 2,
            c2_filters: 3,
            c2_kernel: 3,
            c2_stride: 2,
            emb_hidden: 4,
            ..PredictorConfig::default()
        };
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let model = Classifier::init(Method::TextReward, &cfg, 6, &mut rng).unwrap();
        let prefix = PrefixFeatures {
            values: (0..20).map(|i| (i as f64 * 0.3).sin()).collect(),
            max: 0.9,
            last: 0.2,
        };
        let emb: Vec<f64> = (0..6).map(|i| (i as f64 * 0.7).cos()).collect();
        let y = 1.0;
        let loss = |m: &Classifier| {
            let c = m.forward(&prefix, Some(&emb)).unwrap();
            let z = c.logit;
            // BCE with logits.
            z.max(0.0) - z * y + (1.0 + (-z.abs()).exp()).ln()
        };
        let mut grads = model.zeros_like();
        let cache = model.forward(&prefix, Some(&emb)).unwrap();
        let d_logit = sigmoid(cache.logit) - y;
        model.backward(&prefix, Some(&emb), &cache, d_logit, &mut grads);
        let analytic = grads.flatten();
        let mut probe = model.clone();
        let mut params = probe.flatten();
        let eps = 1e-6;
        let mut worst = 0.0f64;
        for i in 0..params.len() {
            let orig = params[i];
            params[i] = orig + eps;
            probe.load_flat(&params);
            let lp = loss(&probe);
            params[i] = orig - eps;
            probe.load_flat(&params);
            let lm = loss(&probe);
            params[i] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-6);
            worst = worst.max((analytic[i] - fd).abs() / denom);
        }
        assert!(worst < 1e-4, "max relative error {worst:.2e}");
    }

    #[test]
    fn cross_validate_separable_family() {
        let runs = separable_runs(400, 7);
        let cfg = CvConfig {
            predictor: PredictorConfig {
                prefix: PrefixConfig { k: 200, l: 50 },
                epochs: 15,
                ..PredictorConfig::default()
            },
            ..CvConfig::default()
        };
        let report = cross_validate(&runs, Method::HeuristicLast, 5, 11, &cfg).unwrap();
        for fold in report.folds.iter().filter(|f| !f.skipped) {
            assert_eq!(fold.n_train, 80);
            assert_eq!(fold.n_eval, 320);
        }
        // Separable: a rising curve's last value orders runs perfectly, so
        // held-out FNR stays 0 with a high TNR.
        assert_eq!(report.pooled_fnr, 0.0);
        assert!(report.pooled_tnr > 0.8, "tnr {}", report.pooled_tnr);
        // Determinism.
        let again = cross_validate(&runs, Method::HeuristicLast, 5, 11, &cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&report).unwrap(),
            serde_json::to_string(&again).unwrap()
        );
        assert!(matches!(
            cross_validate(&runs, Method::HeuristicLast, 1, 0, &cfg),
            Err(EarlyStopError::BadFolds(1))
        ));
    }

    #[test]
    fn text_methods_require_embeddings() {
        let runs = separable_runs(50, 9);
        let pred = StopPredictor {
            method: Method::TextOnly,
            prefix_cfg: PrefixConfig { k: 200, l: 50 },
            model: None,
            threshold: 0.0,
        };
        // Score path catches the missing embedding before touching the
        // (absent) model.
        let err = pred.score(&runs[0].prefix, None);
        assert!(matches!(err, Err(EarlyStopError::MissingEmbedding(_))));
    }

    #[test]
    fn hash_embedder_is_deterministic_and_recorded_store_replays() {
        let dir = tempfile::tempdir().unwrap();
        let embedder = HashEmbedder { dim: 16 };
        let a = embedder.embed("fn build_state() {}").unwrap();
        let b = embedder.embed("fn build_state() {}").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 16);
        let c = embedder.embed("different text").unwrap();
        assert_ne!(a, c);

        let path = dir.path().join("emb.jsonl");
        RecordedEmbeddings::record_through(&embedder, &["x", "y"], &path).unwrap();
        let store = RecordedEmbeddings::load(&path).unwrap();
        assert_eq!(store.embed("x").unwrap(), embedder.embed("x").unwrap());
        assert!(store.embed("unrecorded").is_err());
    }

    #[test]
    fn labeled_store_round_trip_shape() {
        let dir = tempfile::tempdir().unwrap();
        let runs = separable_runs(10, 1);
        let path = dir.path().join("labeled.jsonl");
        save_labeled_store(&path, &runs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 10);
        assert!(text.contains("prefix_digest"));
    }
}
