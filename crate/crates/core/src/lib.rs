//! Higher-order networks from path data, and deep graph ensembles of
//! neighborhood-sampling GNNs trained over their conditional nodes.
//!
//! The pipeline: parse a [`corpus`], build a graph with [`hon`], draw
//! relatives and bootstraps with [`sampler`], train an [`ensemble`] of
//! [`nn`] networks, then score it with [`evaluation`]. [`synth`] makes
//! corpora with planted dependencies and [`verify`] checks a built graph.
//! The guide under `book/` walks through each step.

pub mod corpus;
pub mod ensemble;
pub mod evaluation;
pub mod graphstore;
pub mod hon;
pub mod nn;
pub mod rng;
pub mod sampler;
pub mod synth;
pub mod verify;

// The guide's code blocks run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/higher-order-networks.md")]
    mod higher_order_networks {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    mod sampling {}
    #[doc = include_str!("../../../book/src/ensembles.md")]
    mod ensembles {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
