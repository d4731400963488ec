//! Simulation of leader-follower mobile robot formations and local
//! inference of their interaction topology from an observer's noisy,
//! range-limited position measurements.
//!
//! The pipeline is:
//!
//! 1. [`network`] and [`sim`]: ground-truth formation dynamics, obstacle
//!    response, and the observer's view.
//! 2. [`steady`]: formation velocity, steady time, steady offsets and the
//!    leader guess from a passive trace.
//! 3. [`excitation`]: active probing of the nearest robots to bound the
//!    interaction range from below.
//! 4. [`estimator`]: least-squares topology estimates, range search and the
//!    range-constrained / row-wise refinements.
//! 5. [`experiment`]: configuration files, end-to-end runs and sweeps.

// `!(x > 0.0)` is used on purpose: it rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimator;
pub mod excitation;
pub mod experiment;
pub mod linalg;
pub mod netfile;
pub mod network;
pub mod sim;
pub mod steady;

pub use error::{Error, Result, Stage, StageContext, StageError};
pub use network::{NetworkSpec, PerronMatrix, Vec2};
