//! Ready-made example chains used by the CLI and the test suites.

mod discrete_chain;
mod gaussian_chain;

pub use discrete_chain::{builtin_discrete_chain, discrete_chain_from_tables, DiscreteChainParams, DiscreteTables, EndTables, MiddleTables};
pub use gaussian_chain::{builtin_gaussian_chain, GaussianChainParams};

use crate::chain::{ChainModel, LogDensityFn};
use crate::pooling::{PoolMethod, PooledPriorBuilder, PooledPrior};

/// A chain together with the one-block marginals of its middle submodel,
/// which linear and dictatorial pooling may need.
pub struct BuiltinModel {
    pub model: ChainModel,
    pub block_marginals: Vec<(usize, usize, LogDensityFn)>,
}

impl std::fmt::Debug for BuiltinModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BuiltinModel").field("model", &self.model).finish()
    }
}

impl BuiltinModel {
    /// A pooled-prior builder with every available one-block marginal attached.
    pub fn pool_builder(&self, method: PoolMethod) -> PooledPriorBuilder {
        self.block_marginals
            .iter()
            .fold(PooledPrior::builder(&self.model, method), |b, (m, blk, f)| {
                b.block_marginal_fn(*m, *blk, f.clone())
            })
    }
}

pub(crate) fn normal_log_pdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((x - mean).powi(2) / var + (2.0 * std::f64::consts::PI * var).ln())
}
