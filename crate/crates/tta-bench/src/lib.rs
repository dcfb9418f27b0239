//! Test-time adaptation over precomputed vision-language embeddings.
//!
//! This crate implements a desk-scale engine for studying test-time
//! adaptation (TTA) of embedding-space classifiers. Images and class
//! prompts are represented by precomputed unit-norm feature vectors
//! packaged into [`bundle::EmbeddingBundle`]s; adaptation methods then
//! operate purely in feature space:
//!
//! - eight episodic methods that adapt to one sample at a time
//!   ([`episodic`]),
//! - seven online methods that thread mutable state through a fixed-order
//!   test stream ([`online`]),
//! - evaluation metrics: accuracy, calibration error, OOD detection AUROC
//!   and mixed-stream stability ([`metrics`]),
//! - an experiment harness with deterministic seeding and CSV prediction
//!   logs ([`harness`]).
//!
//! Start with the runnable programs under `examples/`; each one covers a
//! major capability end to end. The `tta-bench` binary exposes the same
//! functionality as `generate` / `run` / `mix` / `report` subcommands.

pub mod bundle;
pub mod episodic;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod online;
pub mod optim;
pub mod report;
pub mod scoring;

pub use bundle::{EmbeddingBundle, SampleFlag, SampleRecord, ScoringKind, ScoringRule, SynthSpec};
pub use episodic::{EpisodicConfig, EpisodicMethod, Prediction};
pub use error::{Result, TtaError};
pub use harness::{ExperimentSpec, Mode, PredictionLog, RunConfig, TemplateMode};
pub use metrics::MetricReport;
pub use online::OnlineMethod;
pub use optim::{LossKind, LossSpec, OptimConfig, ShiftParameters};
