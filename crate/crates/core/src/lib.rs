//! Simulation and post-processing core for high-dimensional energy-time
//! entanglement distribution.
//!
//! The crate is `no_std` (it needs `alloc`) and contains every algorithmic
//! stage of the chain:
//!
//! - [`timetag`]: the detection-event data model and sorted stream containers.
//! - [`simulator`]: Monte Carlo generation of Alice/Bob tag streams from an
//!   energy-time entangled pair source under loss, background, jitter and
//!   clock drift.
//! - [`sync`]: recovery of Bob's clock offset/drift from photon-pair
//!   cross-correlation peaks.
//! - [`discretize`]: time-frame / time-bin discretization into the TOA and
//!   TSUP correlation matrices.
//! - [`analysis`]: qubit-subspace entanglement witness, asymptotic key
//!   fraction and key rate, and per-block dimension optimization.
//!
//! File formats, configuration and the command line live in the `timebin`
//! companion crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod analysis;
pub mod discretize;
mod error;
pub mod rng;
pub mod simulator;
pub mod sync;
pub mod timetag;

pub use error::{Error, Result};
pub use timetag::{Basis, Channel, Party, Sign, TagStream, TimeTag, PS_PER_S};
