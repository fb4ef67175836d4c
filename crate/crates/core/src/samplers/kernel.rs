//! Metropolis-Hastings proposals and the single accept/reject step.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::chain::Support;
use crate::error::{MeldError, Result};
use crate::gaussian::GaussianDensity;

/// Default random-walk scale when no prior summary is available.
pub const DEFAULT_SCALE: f64 = 0.1;

/// Proposal for one coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CoordinateProposal {
    /// `x* = x + scale * z`.
    RandomWalk { scale: f64 },
    /// `x* = x * exp(scale * z)`, for positive coordinates.
    LogRandomWalk { scale: f64 },
    /// Uniform over all `cardinality` codes (the current one included).
    DiscreteUniform { cardinality: usize },
}

/// Joint proposal over a state vector: every coordinate moves at once under
/// its own rule.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MHKernelConfig {
    pub proposals: Vec<CoordinateProposal>,
}

impl MHKernelConfig {
    pub fn new(proposals: Vec<CoordinateProposal>) -> Result<Self> {
        let k = Self { proposals };
        k.validate()?;
        Ok(k)
    }

    /// Random-walk scales for real coordinates, log-scale random walks for
    /// positive ones and uniform resampling for discrete ones. `scales` gives
    /// one scale per coordinate (ignored for discrete coordinates).
    pub fn for_supports(supports: &[Support], scales: &[f64]) -> Result<Self> {
        if scales.len() != supports.len() {
            return Err(MeldError::DimensionMismatch {
                what: "kernel scales".into(),
                expected: supports.len(),
                got: scales.len(),
            });
        }
        let proposals = supports
            .iter()
            .zip(scales)
            .map(|(s, &scale)| match s {
                Support::Real => CoordinateProposal::RandomWalk { scale },
                Support::Positive => CoordinateProposal::LogRandomWalk { scale },
                Support::Discrete(k) => CoordinateProposal::DiscreteUniform { cardinality: *k },
            })
            .collect();
        Self::new(proposals)
    }

    /// Scales of `0.1 x` the prior standard deviation where a Gaussian summary
    /// covers the leading coordinates, else [`DEFAULT_SCALE`].
    pub fn default_for(supports: &[Support], summary: Option<&GaussianDensity>) -> Result<Self> {
        let scales: Vec<f64> = (0..supports.len())
            .map(|i| match summary {
                Some(g) if i < g.dim() => 0.1 * g.cov()[(i, i)].sqrt(),
                _ => DEFAULT_SCALE,
            })
            .collect();
        Self::for_supports(supports, &scales)
    }

    pub fn dim(&self) -> usize {
        self.proposals.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.proposals.iter().enumerate() {
            match *p {
                CoordinateProposal::RandomWalk { scale } | CoordinateProposal::LogRandomWalk { scale } => {
                    if !(scale > 0.0 && scale.is_finite()) {
                        return Err(MeldError::Configuration(format!(
                            "proposal scale for coordinate {i} must be positive and finite, got {scale}"
                        )));
                    }
                }
                CoordinateProposal::DiscreteUniform { cardinality } => {
                    if cardinality < 2 {
                        return Err(MeldError::Configuration(format!(
                            "discrete proposal for coordinate {i} needs cardinality >= 2"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Draws `x*` into `out` and returns `log q(x | x*) - log q(x* | x)`.
    pub fn propose<R: Rng + ?Sized>(&self, x: &[f64], out: &mut [f64], rng: &mut R) -> f64 {
        let mut log_q = 0.0;
        for ((p, &xi), o) in self.proposals.iter().zip(x).zip(out.iter_mut()) {
            let (y, lq) = propose_one(p, xi, rng);
            *o = y;
            log_q += lq;
        }
        log_q
    }

    /// Like [`Self::propose`] but only moves the coordinates in `coords`;
    /// `out` must start as a copy of `x`.
    pub fn propose_coords<R: Rng + ?Sized>(&self, x: &[f64], coords: &[usize], out: &mut [f64], rng: &mut R) -> f64 {
        let mut log_q = 0.0;
        for &i in coords {
            let (y, lq) = propose_one(&self.proposals[i], x[i], rng);
            out[i] = y;
            log_q += lq;
        }
        log_q
    }
}

fn propose_one<R: Rng + ?Sized>(p: &CoordinateProposal, x: f64, rng: &mut R) -> (f64, f64) {
    match *p {
        CoordinateProposal::RandomWalk { scale } => {
            let z: f64 = rng.sample(StandardNormal);
            (x + scale * z, 0.0)
        }
        CoordinateProposal::LogRandomWalk { scale } => {
            let z: f64 = rng.sample(StandardNormal);
            let y = x * (scale * z).exp();
            (y, y.ln() - x.ln())
        }
        CoordinateProposal::DiscreteUniform { cardinality } => (rng.random_range(0..cardinality) as f64, 0.0),
    }
}

/// Current point of a Metropolis-Hastings chain with its cached log target.
#[derive(Debug, Clone, PartialEq)]
pub struct MhState {
    pub x: Vec<f64>,
    pub log_target: f64,
}

/// Accepts a move with log ratio `log_alpha`; `-inf` is always rejected.
pub fn accept<R: Rng + ?Sized>(log_alpha: f64, rng: &mut R) -> bool {
    if log_alpha.is_nan() || log_alpha == f64::NEG_INFINITY {
        return false;
    }
    let u: f64 = rng.random();
    u.ln() < log_alpha
}

/// One Metropolis-Hastings step. Returns whether the proposal was accepted.
pub fn mh_step<R, F>(state: &mut MhState, log_target: F, kernel: &MHKernelConfig, rng: &mut R) -> Result<bool>
where
    R: Rng + ?Sized,
    F: FnOnce(&[f64]) -> Result<f64>,
{
    let mut proposal = vec![0.0; state.x.len()];
    let log_q = kernel.propose(&state.x, &mut proposal, rng);
    let lp = log_target(&proposal)?;
    if lp.is_nan() || lp == f64::INFINITY {
        return Err(MeldError::Numerical(format!("log target evaluated to {lp}")));
    }
    let log_alpha = if lp == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else {
        lp - state.log_target + log_q
    };
    if accept(log_alpha, rng) {
        state.x = proposal;
        state.log_target = lp;
        Ok(true)
    } else {
        Ok(false)
    }
}
