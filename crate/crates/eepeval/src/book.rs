//! Compiles every code block in the guide as a doctest, so the book
//! cannot drift from the library. Chapters live in `book/src/`.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/event-streams.md")]
pub mod event_streams {}

#[doc = include_str!("../../../book/src/labeling.md")]
pub mod labeling {}

#[doc = include_str!("../../../book/src/sampling.md")]
pub mod sampling {}

#[doc = include_str!("../../../book/src/accuracy-metrics.md")]
pub mod accuracy_metrics {}

#[doc = include_str!("../../../book/src/stability.md")]
pub mod stability {}

#[doc = include_str!("../../../book/src/synthetic-cohorts.md")]
pub mod synthetic_cohorts {}

#[doc = include_str!("../../../book/src/pipeline-cli.md")]
pub mod pipeline_cli {}
