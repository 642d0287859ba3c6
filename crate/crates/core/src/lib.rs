//! Trace, attribute, and edit demographic signals inside small decoder
//! transformers.
//!
//! The crate bundles a self-contained inference engine for SwiGLU decoder
//! models with the analysis pipeline built on top of it:
//!
//! - [`model`] — weight bundles (JSON manifest + raw blob), vocabulary and
//!   tokenizer, and synthetic "planted-neuron" model generation for
//!   ground-truth experiments.
//! - [`engine`] — forward passes and greedy generation with residual /
//!   activation capture and in-flight neuron intervention.
//! - [`corpus`] — dataset ingestion, group-label consolidation, prompt
//!   rendering, and stratified splits.
//! - [`probe`] — multinomial logistic probes over pooled residual states;
//!   probe columns double as class directions in residual space.
//! - [`attribution`] — logit-lens token projections and cosine-based neuron
//!   ranking with keyword alignment filtering.
//! - [`analysis`] — group-conditioned activation matrices, label parsing,
//!   error-pattern tables, outcome buckets, and intervention sweeps.
//! - [`pipeline`] / [`config`] / [`report`] — the declarative run
//!   configuration and the deterministic report bundle the CLI emits.
//!
//! Everything is deterministic: a fixed config and seed produce byte-identical
//! artifacts on every run. Numeric kernels are plain `f64` loops over
//! row-major buffers — small models only, no BLAS, no threads inside a single
//! forward pass (parallelism happens across records).

pub mod analysis;
pub mod attribution;
pub mod config;
pub mod corpus;
pub mod engine;
pub mod fixture;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod probe;
pub mod report;
pub mod rng;

pub use engine::{CapturePlan, ForwardTrace, InterventionPolicy, Pooling};
pub use model::{ModelBundle, SyntheticSpec, TokenId, TokenSequence, Vocab};
pub use probe::{ProbeMetrics, ProbeModel};
