//! Batch pipeline for searching over RL-based adaptive-bitrate (ABR) algorithm
//! designs.
//!
//! The pipeline solicits alternative state-representation and policy-network
//! code blocks from an LLM client (or a recorded corpus), filters them through
//! compile and normalization checks, trains survivors with an actor-critic
//! learner inside a trace-driven streaming simulator, optionally early-stops
//! unpromising runs from their reward-curve prefix, and ranks the rest under a
//! fixed scoring protocol.
//!
//! Module map:
//! - [`trace`]: throughput trace ingestion, scaling, splits, statistics.
//! - [`sim`]: chunk-level streaming simulator and the linear QoE reward.
//! - [`nn`]: small dense/conv/recurrent network library with manual gradients.
//! - [`candidate`]: candidate-design contract, script sandbox, builtin corpus.
//! - [`generator`]: prompt rendering, LLM client contract, record/replay.
//! - [`filters`]: compile check, fuzzing normalization check, batch accounting.
//! - [`trainer`]: seeded actor-critic training, checkpointing, scoring.
//! - [`early_stop`]: curve-prefix predictors, threshold tuning, k-fold CV.
//! - [`campaign`]: end-to-end orchestration, ledger, combination study.
//! - [`report`]: table rendering shared by the reporting surfaces.

pub mod campaign;
pub mod candidate;
pub mod early_stop;
pub mod filters;
pub mod generator;
pub mod nn;
pub mod report;
pub mod sim;
pub mod trace;
pub mod trainer;
