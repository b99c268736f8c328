//! Evaluation toolkit for early-event-prediction models on irregular,
//! multi-modal clinical event streams.
//!
//! A model under evaluation produces a risk score in `[0, 1]` from the
//! prefix of an episode's observations up to a query time. This crate
//! covers everything around that model call:
//!
//! * an event-stream data model with validation and prefix queries
//!   ([`event`]),
//! * task labelers that turn raw streams into event onset times,
//!   including a rule-based sepsis engine ([`label`]),
//! * horizon truncation, history-matched reference-time sampling, and
//!   stratified fold assignment ([`sample`]),
//! * discrimination metrics plus trajectory-level stability metrics:
//!   local Lipschitz estimates and alert flip counts ([`metrics`]),
//! * a synthetic cohort generator with built-in scorers for calibrating
//!   the harness itself ([`synth`]),
//! * line-delimited file formats and an end-to-end pipeline behind the
//!   `eepeval` binary ([`io`], [`pipeline`]).
//!
//! Everything downstream of a fixed seed is deterministic: two runs over
//! the same inputs produce byte-identical artifacts.

pub mod event;
pub mod io;
pub mod label;
pub mod metrics;
pub mod pipeline;
pub mod sample;
pub mod synth;

#[cfg(doctest)]
mod book;

pub use event::{Episode, Modality, Observation, ObservationValue, TaskConfig, Timestamp};
pub use label::{LabelOutcome, Labeler, TaskPreset};
pub use metrics::{FoldRow, MetricReport, RiskTrajectory};
pub use sample::EvalInstance;
pub use synth::{ScorerSpec, SynthConfig};
