//! Aircraft localization on crowdsourced, unsynchronised receiver networks.
//!
//! The crate covers the whole chain: reading the three-file subset format
//! ([`dataset`]), opportunistic pairwise clock synchronisation from
//! transponder-reported positions ([`sync`]), hyperbolic positioning over the
//! synchronised pairs ([`locate`]), scoring ([`eval`]), and a synthetic world
//! generator that serves as the exact reference for all of it ([`synth`]).
//! [`pipeline`] wires the stages together in time epochs.

// Range checks are written `!(x > 0.0)` on purpose so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod eval;
pub mod exec;
pub mod geo;
pub mod locate;
pub mod pipeline;
pub mod sync;
pub mod synth;

pub use exec::Exec;
