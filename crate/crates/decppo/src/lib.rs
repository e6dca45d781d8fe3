//! Exact tabular analysis of trust regions for decentralized PPO in
//! cooperative multi-agent RL.
//!
//! The crate is organized around three layers:
//!
//! * [`decmdp`] / [`policy`] — finite cooperative Dec-MDPs with
//!   per-agent local state/action spaces, and tabular softmax joint
//!   policies (optionally parameter-shared).
//! * [`oracle`] — exact dynamic-programming oracles (direct linear
//!   solves plus enumeration) for values, occupancies, staged marginal
//!   kernels, transition shifts, decentralized surrogates, and both the
//!   joint-level and decentralized trust-region lower bounds.
//! * [`train`] / [`diagnostics`] — seeded clipped-ratio optimizers
//!   (independent-ratio and joint-ratio PPO, plus an unclipped
//!   surrogate baseline) and the measurement suite that tracks ratio
//!   ranges, TV divergences, and bound slack over training runs.
//!
//! Everything is deterministic given explicit seeds. With the default
//! `parallel` feature, independent instances in verification sweeps are
//! evaluated on a rayon thread pool; disabling the feature falls back
//! to sequential loops with identical results.

// dense tabular kernels index several tables in lockstep; plain index
// loops read better than zip chains there
#![allow(clippy::needless_range_loop)]

pub mod decmdp;
pub mod diagnostics;
pub mod error;
pub mod index;
pub mod oracle;
pub mod par;
pub mod policy;
pub mod train;
pub mod verify;

pub use decmdp::TabularDecMdp;
pub use error::{Error, Result};
pub use policy::JointPolicy;
