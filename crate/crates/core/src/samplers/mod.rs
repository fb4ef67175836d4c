//! Multi-stage Metropolis-within-Gibbs samplers for the melded posterior.

mod kernel;
mod output;
mod parallel;
mod sequential;
mod stage_one;
mod store;

pub use kernel::{accept, mh_step, CoordinateProposal, MHKernelConfig, MhState, DEFAULT_SCALE};
pub use output::{ChainDraws, IndexTrace, MeldedChainOutput, UpdateStats};
pub use parallel::{run_parallel, run_parallel_stage_two, run_parallel_stage_two_unitwise, ParallelRun};
pub use sequential::{run_sequential, SequentialRun};
pub use stage_one::{run_stage_one, stage_one_log_target, EndSubmodel};
pub use store::SampleStore;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::chain::Support;
use crate::error::{MeldError, Result};

/// Attempts made to find a finite-density starting point.
pub const MAX_INIT_ATTEMPTS: usize = 100;

/// RNG stream bases; chain `c` of a stage uses `base + c`.
pub(crate) mod streams {
    pub const STAGE_TWO: u64 = 10;
    pub const STAGE_ONE_FIRST: u64 = 100;
    pub const STAGE_ONE_LAST: u64 = 200;
    pub const SEQUENTIAL: [u64; 3] = [300, 400, 500];
    pub const TARGET: u64 = 600;
}

pub(crate) fn call_delta(before: &[u64], after: &[u64]) -> Vec<u64> {
    before.iter().zip(after).map(|(b, a)| a - b).collect()
}

/// Independent generator for one chain, derived from the master seed.
pub fn chain_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Iteration budget of one chain: `warmup` discarded iterations, then
/// `iterations` more of which every `thin`-th is kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChainSchedule {
    pub warmup: usize,
    pub iterations: usize,
    pub thin: usize,
}

impl ChainSchedule {
    pub fn new(warmup: usize, iterations: usize) -> Self {
        Self {
            warmup,
            iterations,
            thin: 1,
        }
    }

    /// `total` iterations of which the first 10% are warmup.
    pub fn with_default_warmup(total: usize) -> Self {
        let warmup = total / 10;
        Self::new(warmup, total - warmup)
    }

    pub fn thinned(mut self, thin: usize) -> Self {
        self.thin = thin;
        self
    }

    pub fn kept(&self) -> usize {
        self.iterations.div_ceil(self.thin.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.thin == 0 {
            return Err(MeldError::Configuration(
                "chain schedule needs at least one iteration and thin >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Whether post-warmup iteration `i` is kept.
    pub fn keeps(&self, i: usize) -> bool {
        i.is_multiple_of(self.thin)
    }
}

/// Kernel, iteration budget and chain count for one sampler stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSettings {
    pub kernel: MHKernelConfig,
    pub schedule: ChainSchedule,
    pub chains: usize,
}

impl StageSettings {
    pub fn new(kernel: MHKernelConfig, schedule: ChainSchedule, chains: usize) -> Self {
        Self { kernel, schedule, chains }
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        self.schedule.validate()?;
        if self.chains == 0 {
            return Err(MeldError::Configuration("at least one chain is required".into()));
        }
        Ok(())
    }
}

fn default_point(support: &Support) -> f64 {
    match support {
        Support::Positive => 1.0,
        _ => 0.0,
    }
}

pub(crate) fn default_start(supports: &[Support]) -> Vec<f64> {
    supports.iter().map(default_point).collect()
}

/// A random starting point near `center` (or the support's default point).
pub(crate) fn random_point<R: Rng + ?Sized>(supports: &[Support], center: Option<&[f64]>, rng: &mut R) -> Vec<f64> {
    supports
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let c = center.map_or_else(|| default_point(s), |c| c[i]);
            let z: f64 = rng.sample(StandardNormal);
            match s {
                Support::Real => c + z,
                Support::Positive => c.max(f64::MIN_POSITIVE) * z.exp(),
                Support::Discrete(k) => rng.random_range(0..*k) as f64,
            }
        })
        .collect()
}

/// Finds a starting point with finite log target: `center` (or the default
/// point) first, then random perturbations.
pub(crate) fn initialize<R, F>(supports: &[Support], center: Option<&[f64]>, rng: &mut R, mut log_target: F) -> Result<MhState>
where
    R: Rng + ?Sized,
    F: FnMut(&[f64]) -> Result<f64>,
{
    let first: Vec<f64> = match center {
        Some(c) => c.to_vec(),
        None => default_start(supports),
    };
    let mut x = first;
    let mut last = f64::NEG_INFINITY;
    for attempt in 0..MAX_INIT_ATTEMPTS {
        if attempt > 0 {
            x = random_point(supports, center, rng);
        }
        last = log_target(&x)?;
        if last.is_finite() {
            return Ok(MhState { x, log_target: last });
        }
    }
    Err(MeldError::Initialization {
        attempts: MAX_INIT_ATTEMPTS,
        reason: format!("no starting point with finite log density (last value {last})"),
    })
}

/// Runs `count` chains concurrently, returning results in chain order.
pub(crate) fn run_chains<T, F>(count: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    if count == 1 {
        return Ok(vec![f(0)?]);
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..count).map(|c| scope.spawn({
            let f = &f;
            move || f(c)
        })).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sampler chain panicked"))
            .collect()
    })
}

/// Samples an arbitrary log target over named columns with a fixed kernel.
pub fn run_target<F>(
    columns: Vec<String>,
    supports: &[Support],
    center: Option<&[f64]>,
    log_target: F,
    settings: &StageSettings,
    seed: u64,
) -> Result<MeldedChainOutput>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    settings.validate()?;
    if settings.kernel.dim() != columns.len() || supports.len() != columns.len() {
        return Err(MeldError::DimensionMismatch {
            what: "kernel dimension".into(),
            expected: columns.len(),
            got: settings.kernel.dim(),
        });
    }
    let runs = run_chains(settings.chains, |c| {
        let mut rng = chain_rng(seed, streams::TARGET + c as u64);
        let mut state = initialize(supports, center, &mut rng, &log_target)?;
        let mut stats = UpdateStats::new("target");
        let mut draws = ChainDraws::new();
        let sched = settings.schedule;
        for i in 0..sched.warmup + sched.iterations {
            let acc = mh_step(&mut state, &log_target, &settings.kernel, &mut rng)?;
            if i >= sched.warmup {
                stats.record(acc);
                let k = i - sched.warmup;
                if sched.keeps(k) {
                    draws.iterations.push(k as u64);
                    draws.values.extend_from_slice(&state.x);
                }
            }
        }
        Ok((draws, stats))
    })?;
    let mut out = MeldedChainOutput::new(columns, seed);
    for (draws, stats) in runs {
        out.chains.push(draws);
        out.merge_updates(&[stats]);
    }
    Ok(out)
}
