//! Decentralized projected Riemannian gradient methods over compact matrix
//! submanifolds (Stiefel and generalized Stiefel), with a gossip-network
//! simulator and the experiment harness behind the `mcopt` command.

pub mod algorithm;
pub mod error;
pub mod harness;
pub mod manifold;
pub mod metrics;
pub mod network;
pub mod numerics;
pub mod problem;

pub use error::{Error, Result};

/// The guide's code samples, compiled and run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/manifolds.md")]
    mod manifolds {}
    #[doc = include_str!("../../../book/src/networks.md")]
    mod networks {}
    #[doc = include_str!("../../../book/src/problems.md")]
    mod problems {}
    #[doc = include_str!("../../../book/src/algorithms.md")]
    mod algorithms {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
