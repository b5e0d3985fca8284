//! Scalable user-centric AP-UE association for cell-free massive MIMO.
//!
//! The crate covers the whole pipeline: network drops and large-scale fading
//! ([`geometry`]), master/pilot selection and heuristic clusterings
//! ([`association`]), the closed-form MR performance model and its relaxed
//! gradient ([`metrics`]), the BiLSTM association policy ([`neural`]), its
//! sampled-activation training loop ([`training`]), the neighborhood-restricted
//! distributed variant ([`scalable`]) and the experiment harness ([`harness`]).

pub mod association;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod metrics;
pub mod neural;
pub mod rng;
pub mod scalable;
pub mod strategy;
pub mod training;
pub mod validation;

pub use error::{Error, Result};
