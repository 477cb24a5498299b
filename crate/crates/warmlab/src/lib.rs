//! A desk-scale laboratory for learning-rate warmup policies.
//!
//! The crate wires four pieces together: analytic warmup/decay schedules
//! ([`schedule`]), a small reverse-mode autodiff engine ([`autodiff`]), an
//! Adam optimizer with global-norm clipping ([`optim`]), and a toy residual
//! stack ([`model`]) that the training harness ([`harness`]) drives so
//! schedule choices can be compared on observable training dynamics rather
//! than argued about. [`sweep`] runs small grids of schedule variants from
//! shared initial parameters.
//!
//! Everything is deterministic given the configured seeds: same config, same
//! metrics, bit for bit (wallclock columns aside).

pub mod autodiff;
pub mod harness;
pub mod model;
pub mod optim;
pub mod schedule;
pub mod sweep;
