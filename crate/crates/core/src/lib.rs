//! Variational flow matching over mixed continuous/categorical product spaces.
//!
//! The crate is organised around the posterior-mean view of flow matching:
//! a variational head predicts per-dimension endpoint distributions
//! `q_t(x1 | x)`, the expected endpoint is turned into a velocity through the
//! linear optimal-transport interpolation, and generation integrates that
//! velocity field. On top of the unconditional pipeline sit two control
//! mechanisms (end-to-end label conditioning and post-hoc fixed-point
//! guidance against an analytic likelihood) and a numeric audit harness for
//! the group-equivariance conditions that make the generated distribution
//! invariant under permutations, rotations and translations.
//!
//! The crate is `no_std` (with `alloc`); everything here is pure computation.
//! File formats, configuration files, timing and the command-line surface
//! live in the companion `vfm-cli` crate.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod diff;
pub mod guidance;
pub mod heads;
pub mod metrics;
pub mod path;
pub mod sampling;
pub mod symmetry;
pub mod training;

pub use path::{Coupling, SpaceSpec, State, VelocitySpec};
