//! Vertex-walking minimization of layer-wise L1 losses of ReLU networks.
//!
//! [`oracle::LossOracle`] evaluates the piecewise-affine loss over one
//! layer's parameters, [`solver::minimize`] walks from a start point to a
//! vertex and then along descending edges to a local minimum, and
//! [`analysis`] splits the recorded trajectory into its decay and
//! fine-tuning phases. [`harness`] ties these into seeded, reproducible
//! experiments and [`verify`] holds brute-force reference checks.

pub mod analysis;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod network;
pub mod oracle;
pub mod rng;
pub mod solver;
pub mod verify;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/landscape.md")]
    mod landscape {}
    #[doc = include_str!("../../../book/src/vertex-walk.md")]
    mod vertex_walk {}
    #[doc = include_str!("../../../book/src/degeneracy.md")]
    mod degeneracy {}
    #[doc = include_str!("../../../book/src/analysis.md")]
    mod analysis {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
