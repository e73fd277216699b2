//! Continuous-time longitudinal item response theory.
//!
//! A latent process `Λ_i(t) = X_i(t)ᵀβ + Z_i(t)ᵀb_i`, `b_i ~ N(0, B)`, drives
//! ordinal item responses through a cumulative-probit graded response model.
//! The crate covers the likelihood (quasi Monte-Carlo over the random
//! effects), Marquardt–Levenberg estimation, posterior predictions, item
//! curves and information, and invariance tests. It is `no_std` with `alloc`;
//! file formats and parallel execution live in the companion `lirt` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod cardinal;
pub mod dataset;
pub mod error;
pub mod exec;
pub mod fitting;
pub mod inference;
pub mod likelihood;
pub mod measurement;
pub mod model;
pub mod normal;
pub mod optimizer;
pub mod parameters;
pub mod posterior;
pub mod qmc;
pub mod simulate;
pub mod special;
pub mod timebasis;

pub use dataset::{ItemDef, LongDataset, Observation};
pub use error::{Error, Result};
pub use exec::{Executor, Serial};
pub use fitting::{fit, fit_model, FitResult};
pub use likelihood::LikelihoodModel;
pub use measurement::ItemParams;
pub use model::ModelSpec;
pub use optimizer::FitOptions;
pub use parameters::{Layout, NaturalParams};
pub use qmc::QmcNodes;
pub use timebasis::{DesignSpec, Term, TimeBasis};
