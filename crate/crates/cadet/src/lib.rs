//! Decoder-only transformer for ads CTR prediction, desk scale.
//!
//! The crate trains and serves a causal transformer over interleaved user
//! event sequences: impression tokens followed by contextualized action
//! tokens. The pieces:
//!
//! - [`tensor`] / [`optim`]: dense math with hand-written backward passes,
//!   Adam, and a finite-difference gradient oracle.
//! - [`events`]: the domain model, a synthetic position-biased click
//!   generator, and event-log I/O.
//! - [`rope`]: rotary query/key encoding driven by Unix timestamps instead of
//!   sequence positions.
//! - [`masking`]: declarative attention predicates for session-aware training
//!   masks and single-pass multi-candidate inference masks.
//! - [`attention`]: self-gated multi-head attention with a naive reference
//!   engine and a tiled engine that skips fully-masked tiles.
//! - [`heads`]: context-conditioned prediction towers, auxiliary heads, and
//!   the combined loss with a pairwise ranking term.
//! - [`batching`]: sequence packing into fixed token budgets and
//!   recency-anchored chunking.
//! - [`model`] / [`trainer`]: the assembled network, the training loop, and
//!   evaluation metrics.
//! - [`serving`]: a producer-consumer inference service simulator.
//! - [`config`]: layered key=value run configuration.

pub mod attention;
pub mod batching;
pub mod config;
pub mod error;
pub mod events;
pub mod heads;
pub mod masking;
pub mod model;
pub mod optim;
pub(crate) mod parallel;
pub mod rope;
pub mod serving;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
