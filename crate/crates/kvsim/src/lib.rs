//! Desk-scale simulator and tool suite for studying KV-cache compression in
//! LLM serving.
//!
//! The crate models the serving-side behavior of KV-cache compression without
//! touching a GPU: exact numeric quantization and eviction policies at toy
//! scale, a profiled-throughput cost model with grid interpolation, a
//! pluggable response-length predictor, a deterministic iteration-level
//! multi-replica simulator, latency-predicting request routing, and an
//! offline evaluator for negative samples and length-distribution shift.
//!
//! Modules map one-to-one onto those concerns:
//!
//! * [`quantkv`] — group-wise quantization, low-rank + sparse error
//!   correction, and KV memory footprint accounting.
//! * [`evict`] — toy causal attention and the sink/recent and heavy-hitter
//!   eviction policies.
//! * [`costmodel`] — profiled iteration times with log-space bilinear
//!   interpolation.
//! * [`lengthmodel`] — trace-backed oracle and bucket-mean response-length
//!   predictors.
//! * [`sim`] — Poisson arrivals, continuous batching, paged memory
//!   accounting, TTFT/E2E measurement.
//! * [`router`] — the four routing policies and their latency estimator.
//! * [`evaluator`] — negative-sample collection, benign filtering, and
//!   length-difference bucketing.
//! * [`cli`] — subcommand implementations behind the `kvsim` binary.
//!
//! Batch-level entry points (fuzz sweeps, per-policy simulations, record
//! scans) run data-parallel on rayon when the default `parallel` feature is
//! enabled, and fall back to sequential iteration without it. See
//! `benches/parallel_vs_serial.rs` for the comparison suite.

pub mod cli;
pub mod config;
pub mod costmodel;
pub mod error;
pub mod evaluator;
pub mod evict;
pub mod fixtures;
pub mod lengthmodel;
pub mod par;
pub mod quantkv;
pub mod router;
pub mod sim;

pub use error::{Error, Result};
pub use quantkv::{CompressionPolicy, FootprintModel, GearSpec, Matrix, QuantAxis, QuantSpec};
