//! Retrieval-then-reasoning price suggestion for second-hand marketplace listings.
//!
//! The crate is organised along the pipeline:
//!
//! - [`catalog`]: ingest listings and build the filtered candidate pool.
//! - [`vecindex`]: embed listings, build immutable index snapshots, and run
//!   exact or graph-based top-k cosine retrieval.
//! - [`gateway`]: chat-completion targets (OpenAI-compatible HTTP or mocks)
//!   returning per-token log-probabilities.
//! - [`prompting`]: prompt assembly and strict parsing of tagged model output.
//! - [`confidence`]: token-entropy confidence over the generated price and the
//!   abstention gate, plus precision/coverage sweeps.
//! - [`datagen`]: bidirectional-reasoning fine-tuning data with rejection sampling.
//! - [`alignment`]: reward, group-relative advantages and the clipped surrogate.
//! - [`metrics`]: RMSLE, MALE, SAR, DAR and segmented reports.
//! - [`pricer`]: end-to-end orchestration and batch evaluation.
//! - [`synth`]: a seeded synthetic marketplace used by tests and demos.
//!
//! Data-parallel loops go through [`exec`], which uses rayon when the
//! `parallel` feature is enabled and falls back to sequential iteration otherwise.

pub mod alignment;
pub mod catalog;
pub mod confidence;
pub mod datagen;
pub mod exec;
pub mod gateway;
pub mod metrics;
pub mod prompting;
pub mod pricer;
pub mod synth;
pub mod vecindex;

mod fmt;

pub use fmt::render_price;
