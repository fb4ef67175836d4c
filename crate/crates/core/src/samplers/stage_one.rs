//! Stage one: independent MH chains for the two end submodels.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{chain_rng, initialize, run_chains, streams, ChainSchedule, MhState, SampleStore, StageSettings, UpdateStats};
use crate::chain::{coordinate_names, ChainModel, Support};
use crate::error::{MeldError, Result};
use crate::pooling::PoolFactorization;
use crate::samplers::accept;

/// Which end of a three-submodel chain a stage-one run targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EndSubmodel {
    First,
    Last,
}

impl EndSubmodel {
    pub(crate) fn submodel(self, model: &ChainModel) -> usize {
        match self {
            EndSubmodel::First => 0,
            EndSubmodel::Last => model.len() - 1,
        }
    }

    pub(crate) fn block(self, model: &ChainModel) -> usize {
        match self {
            EndSubmodel::First => 0,
            EndSubmodel::Last => model.len() - 2,
        }
    }

    fn stream(self) -> u64 {
        match self {
            EndSubmodel::First => streams::STAGE_ONE_FIRST,
            EndSubmodel::Last => streams::STAGE_ONE_LAST,
        }
    }
}

pub(crate) fn require_three(model: &ChainModel) -> Result<()> {
    if model.len() != 3 {
        return Err(MeldError::Unsupported(format!(
            "multi-stage samplers need M = 3 submodels, got {}",
            model.len()
        )));
    }
    Ok(())
}

/// `pool_k(phi) + log p_k(phi, psi, Y_k) - log p_k(phi)` for an end submodel.
pub fn stage_one_log_target(
    model: &ChainModel,
    end: EndSubmodel,
    factorization: &PoolFactorization,
    phi: &[f64],
    psi: &[f64],
) -> Result<f64> {
    let pool = match end {
        EndSubmodel::First => factorization.log_pool1(phi)?,
        EndSubmodel::Last => factorization.log_pool3(phi)?,
    };
    if pool == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(pool + model.log_replaced(end.submodel(model), phi, psi)?)
}

/// Draws from an end submodel's stage-one target. Chains run concurrently and
/// their kept draws are concatenated in chain order.
pub fn run_stage_one(
    model: &ChainModel,
    end: EndSubmodel,
    factorization: &PoolFactorization,
    settings: &StageSettings,
    seed: u64,
) -> Result<SampleStore> {
    require_three(model)?;
    let target = |phi: &[f64], psi: &[f64]| stage_one_log_target(model, end, factorization, phi, psi);
    run_single_block(model, end.submodel(model), end.block(model), target, settings, seed, end.stream())
}

/// MH sampling of `(phi block, psi_m)` for a submodel touching one block.
/// Submodels with a unit factorization are swept one unit at a time in a
/// fresh random order; others move all coordinates at once.
pub(crate) fn run_single_block<F>(
    model: &ChainModel,
    m: usize,
    block: usize,
    target: F,
    settings: &StageSettings,
    seed: u64,
    stream: u64,
) -> Result<SampleStore>
where
    F: Fn(&[f64], &[f64]) -> Result<f64> + Sync,
{
    settings.validate()?;
    let sub = model.submodel(m);
    let phi_block = &model.phi_blocks()[block];
    let d_phi = phi_block.dim();
    let mut supports: Vec<Support> = phi_block.support.clone();
    supports.extend_from_slice(sub.psi_support());
    if settings.kernel.dim() != supports.len() {
        return Err(MeldError::DimensionMismatch {
            what: format!("stage kernel for submodel {}", m + 1),
            expected: supports.len(),
            got: settings.kernel.dim(),
        });
    }
    let center: Option<Vec<f64>> = sub.summary().filter(|g| g.dim() == d_phi).map(|g| {
        let mut c: Vec<f64> = g.mean().iter().copied().collect();
        c.extend(sub.psi_support().iter().map(|s| if *s == Support::Positive { 1.0 } else { 0.0 }));
        c
    });
    let unit_coords: Vec<Vec<usize>> = match sub.unit_factorization() {
        Some(uf) if uf.units > 1 => (0..uf.units)
            .map(|u| uf.phi_range(u).chain(uf.psi_range(u).map(|j| d_phi + j)).collect())
            .collect(),
        _ => Vec::new(),
    };
    let joint = |x: &[f64]| target(&x[..d_phi], &x[d_phi..]);
    let phi_names = phi_block.coordinate_names();
    let psi_names = coordinate_names(sub.psi_label(), sub.psi_dim());
    let runs = run_chains(settings.chains, |c| {
        let mut rng = chain_rng(seed, stream + c as u64);
        let mut state = initialize(&supports, center.as_deref(), &mut rng, joint)?;
        let mut store = SampleStore::new(phi_names.clone(), psi_names.clone());
        let mut stats = UpdateStats::new(format!("stage_one_{}", m + 1));
        let sched: ChainSchedule = settings.schedule;
        let mut order: Vec<usize> = (0..unit_coords.len()).collect();
        for i in 0..sched.warmup + sched.iterations {
            let post = i >= sched.warmup;
            if unit_coords.is_empty() {
                let acc = super::mh_step(&mut state, joint, &settings.kernel, &mut rng)?;
                if post {
                    stats.record(acc);
                }
            } else {
                order.shuffle(&mut rng);
                for &u in &order {
                    let acc = unit_step(&mut state, &unit_coords[u], &joint, settings, &mut rng)?;
                    if post {
                        stats.record(acc);
                    }
                }
            }
            if post && sched.keeps(i - sched.warmup) {
                store.push(&state.x, state.log_target, c as u32, (i - sched.warmup) as u64);
            }
        }
        Ok((store, stats))
    })?;
    let mut iter = runs.into_iter();
    let (mut store, _) = iter.next().expect("at least one chain");
    for (s, _) in iter {
        store.extend(&s)?;
    }
    Ok(store)
}

fn unit_step<R: Rng + ?Sized>(
    state: &mut MhState,
    coords: &[usize],
    joint: &impl Fn(&[f64]) -> Result<f64>,
    settings: &StageSettings,
    rng: &mut R,
) -> Result<bool> {
    let mut proposal = state.x.clone();
    let log_q = settings.kernel.propose_coords(&state.x, coords, &mut proposal, rng);
    let lp = joint(&proposal)?;
    if lp.is_nan() || lp == f64::INFINITY {
        return Err(MeldError::Numerical(format!("log target evaluated to {lp}")));
    }
    let log_alpha = if lp == f64::NEG_INFINITY {
        lp
    } else {
        lp - state.log_target + log_q
    };
    if accept(log_alpha, rng) {
        state.x = proposal;
        state.log_target = lp;
        return Ok(true);
    }
    Ok(false)
}
