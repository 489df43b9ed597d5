//! Numerical laboratory for the fractional stochastic heat equation and the
//! local behaviour of its spatial increments.

pub mod constants;
pub mod error;
pub mod farm;
pub mod fields;
pub mod grid;
pub mod kernels;
pub mod kpz;
pub mod noise;
pub mod oracle;
pub mod model;
pub mod quadrature;
pub mod runner;
pub mod solver;
pub mod special;
pub mod spectral;
pub mod stats;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/constants.md")]
    mod constants {}
    #[doc = include_str!("../../../book/src/kernels.md")]
    mod kernels {}
    #[doc = include_str!("../../../book/src/oracles.md")]
    mod oracles {}
    #[doc = include_str!("../../../book/src/fields.md")]
    mod fields {}
    #[doc = include_str!("../../../book/src/solver.md")]
    mod solver {}
    #[doc = include_str!("../../../book/src/statistics.md")]
    mod statistics {}
    #[doc = include_str!("../../../book/src/kpz.md")]
    mod kpz {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
