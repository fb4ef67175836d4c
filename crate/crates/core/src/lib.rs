//! Chained Markov melding: pooled priors over the quantities shared by a chain
//! of Bayesian submodels, the melded posterior, and multi-stage samplers for it.

pub mod builtin;
pub mod chain;
pub mod config;
pub mod csvfmt;
pub mod diagnostics;
pub mod error;
pub mod gaussian;
pub mod normal_approx;
pub mod oracle;
pub mod pooling;
pub mod run;
pub mod samplers;

pub use chain::{ChainModel, PhiBlock, PhiVector, PsiVector, SubmodelSpec, Support};
pub use error::{MeldError, Result};
