//! Co-simulator for pipeline-parallel LLM training across datacenters joined
//! by an elastic optical network.
//!
//! The crate is organised bottom-up:
//!
//! ```text
//!  topology ──▶ rsa ──▶ latency
//!      │         │         │
//!      └────▶ engine ◀─────┘ ◀── workload
//!                │
//!                ▼
//!               cba  (labeling + multi-iteration orchestration)
//! ```
//!
//! * [`topology`] owns the network graph, per-link slot occupancy and the
//!   background traffic process.
//! * [`rsa`] enumerates candidate paths and slot blocks and implements the
//!   fitness-based selector plus the two first-fit baselines.
//! * [`latency`] is the alpha-beta transfer model and FS demand sizing.
//! * [`workload`] builds model profiles, stage partitions and GPipe / 1F1B
//!   task DAGs.
//! * [`engine`] executes one iteration as a discrete-event simulation and
//!   records a [`engine::Timeline`].
//! * [`cba`] labels communication-bound tasks and drives the training loop.

pub mod cba;
pub mod engine;
pub mod error;
pub mod latency;
pub mod rsa;
pub mod topology;
pub mod workload;

pub use error::{Error, Result};
