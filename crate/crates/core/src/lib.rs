//! Learning and formally verifying compositional incremental-ISS Lyapunov
//! certificates for large interconnected discrete-time systems.
//!
//! The crate is organised bottom-up:
//!
//! * [`topology`] – the interconnection graph, its shift operator and the
//!   node-equivalence classes used to verify one representative per class.
//! * [`system`] – black-box system oracles, local (neighbourhood) views and
//!   the two built-in ring systems.
//! * [`gnn`] – the graph-filter network that embeds node states, the pairwise
//!   local Lyapunov value `V_i = |g_i(x) - g_i(x̂)|^κ`, reverse-mode gradients
//!   and spectral-norm Lipschitz bounds.
//! * [`training`] – dataset sampling, the three hinge losses and the
//!   optimiser loop, plus transfer to larger graphs.
//! * [`checkpoint`] – bit-exact text checkpoints with an integrity digest.
//! * [`verifier`] – covering grids, exhaustive residual evaluation, certified
//!   condition Lipschitz constants, the sampling-verification test and the
//!   composition of local certificates into a global one.

pub mod checkpoint;
pub mod error;
pub mod gnn;
pub mod linalg;
pub mod rng;
pub mod system;
pub mod topology;
pub mod training;
pub mod verifier;

pub use error::{Error, Result};
pub use gnn::{GnnConfig, GnnParams, LyapunovCandidate};
pub use system::{ClosureMode, SystemOracle};
pub use topology::{InterconnectionGraph, NodeClassPartition};
pub use training::CertificateHyper;
