//! Parallel two-stage sampler: both end submodels are sampled independently,
//! then their draws serve as proposals in a Metropolis-within-Gibbs sweep that
//! evaluates only the middle submodel and `pool2`.

use rand::seq::SliceRandom;
use rand::Rng;

use super::stage_one::require_three;
use super::{
    accept, call_delta, chain_rng, default_start, mh_step, random_point, run_chains, run_stage_one, streams, ChainDraws,
    EndSubmodel, IndexTrace, MeldedChainOutput, MhState, SampleStore, StageSettings, UpdateStats, MAX_INIT_ATTEMPTS,
};
use crate::chain::{ChainModel, PhiVector, PsiVector};
use crate::error::{MeldError, Result};
use crate::pooling::PoolFactorization;

/// Stage-one stores and the melded stage-two output of a parallel run.
#[derive(Debug, Clone, PartialEq)]
pub struct ParallelRun {
    pub store1: SampleStore,
    pub store3: SampleStore,
    pub output: MeldedChainOutput,
    /// Joint evaluations per submodel during stage one (both ends) and stage two.
    pub stage_joint_calls: [Vec<u64>; 2],
}

/// Runs both stage-one samplers concurrently, then stage two.
pub fn run_parallel(
    model: &ChainModel,
    factorization: &PoolFactorization,
    stage_one: [&StageSettings; 2],
    stage_two: &StageSettings,
    seed: u64,
    unitwise: bool,
) -> Result<ParallelRun> {
    require_three(model)?;
    let c0 = model.joint_calls();
    let (s1, s3) = std::thread::scope(|scope| {
        let h1 = scope.spawn(|| run_stage_one(model, EndSubmodel::First, factorization, stage_one[0], seed));
        let h3 = scope.spawn(|| run_stage_one(model, EndSubmodel::Last, factorization, stage_one[1], seed));
        (h1.join().expect("stage one panicked"), h3.join().expect("stage one panicked"))
    });
    let (store1, store3) = (s1?, s3?);
    let c1 = model.joint_calls();
    let output = if unitwise {
        run_parallel_stage_two_unitwise(model, factorization, &store1, &store3, stage_two, seed)?
    } else {
        run_parallel_stage_two(model, factorization, &store1, &store3, stage_two, seed)?
    };
    let c2 = model.joint_calls();
    Ok(ParallelRun {
        store1,
        store3,
        output,
        stage_joint_calls: [call_delta(&c0, &c1), call_delta(&c1, &c2)],
    })
}

/// Stage two with whole-block proposals `(phi, psi)` drawn from each store.
pub fn run_parallel_stage_two(
    model: &ChainModel,
    factorization: &PoolFactorization,
    store1: &SampleStore,
    store3: &SampleStore,
    settings: &StageSettings,
    seed: u64,
) -> Result<MeldedChainOutput> {
    let layouts = [
        UnitLayout::whole(store1.phi_dim(), store1.psi_dim()),
        UnitLayout::whole(store3.phi_dim(), store3.psi_dim()),
    ];
    stage_two(model, factorization, [store1, store3], layouts, settings, seed)
}

/// Stage two with one proposal per unit of each end submodel, units visited
/// in a fresh random order every iteration. Each unit's slice is taken from an
/// independently drawn store row.
pub fn run_parallel_stage_two_unitwise(
    model: &ChainModel,
    factorization: &PoolFactorization,
    store1: &SampleStore,
    store3: &SampleStore,
    settings: &StageSettings,
    seed: u64,
) -> Result<MeldedChainOutput> {
    require_three(model)?;
    let layout = |m: usize| -> Result<UnitLayout> {
        let uf = model.submodel(m).unit_factorization().ok_or_else(|| {
            MeldError::Configuration(format!(
                "unitwise stage two needs a unit factorization on submodel {}",
                m + 1
            ))
        })?;
        Ok(UnitLayout {
            units: uf.units,
            phi_per_unit: uf.phi_per_unit,
            psi_per_unit: uf.psi_per_unit,
        })
    };
    let layouts = [layout(0)?, layout(2)?];
    stage_two(model, factorization, [store1, store3], layouts, settings, seed)
}

#[derive(Debug, Clone, Copy)]
struct UnitLayout {
    units: usize,
    phi_per_unit: usize,
    psi_per_unit: usize,
}

impl UnitLayout {
    fn whole(phi: usize, psi: usize) -> Self {
        Self {
            units: 1,
            phi_per_unit: phi,
            psi_per_unit: psi,
        }
    }
}

/// One end of the stage-two state: the block and psi copied from store rows.
struct EndState {
    phi: Vec<f64>,
    psi: Vec<f64>,
    index: Vec<u32>,
}

impl EndState {
    fn from_row(store: &SampleStore, n: usize, units: usize) -> Self {
        Self {
            phi: store.phi(n).to_vec(),
            psi: store.psi(n).to_vec(),
            index: vec![n as u32; units],
        }
    }
}

struct StageTwo<'a> {
    model: &'a ChainModel,
    factorization: &'a PoolFactorization,
}

impl StageTwo<'_> {
    /// `pool2(phi12, phi23) + log p_2(phi12, phi23, psi2, Y_2) - log p_2(phi12, phi23)`.
    fn log_target(&self, phi12: &[f64], phi23: &[f64], psi2: &[f64]) -> Result<f64> {
        let pool = self.factorization.log_pool2(phi12, phi23)?;
        if pool == f64::NEG_INFINITY {
            return Ok(f64::NEG_INFINITY);
        }
        let phi: Vec<f64> = phi12.iter().chain(phi23).copied().collect();
        Ok(pool + self.model.log_replaced(1, &phi, psi2)?)
    }
}

fn check_store(model: &ChainModel, store: &SampleStore, m: usize, block: usize, name: &str) -> Result<()> {
    store.require_nonempty(name)?;
    let d_phi = model.phi_blocks()[block].dim();
    let d_psi = model.submodel(m).psi_dim();
    if store.phi_dim() != d_phi || store.psi_dim() != d_psi {
        return Err(MeldError::DimensionMismatch {
            what: format!("{name} width"),
            expected: d_phi + d_psi,
            got: store.width(),
        });
    }
    Ok(())
}

fn stage_two(
    model: &ChainModel,
    factorization: &PoolFactorization,
    stores: [&SampleStore; 2],
    layouts: [UnitLayout; 2],
    settings: &StageSettings,
    seed: u64,
) -> Result<MeldedChainOutput> {
    require_three(model)?;
    settings.validate()?;
    check_store(model, stores[0], 0, 0, "store1")?;
    check_store(model, stores[1], 2, 1, "store3")?;
    if !model.submodel(1).has_prior_marginal() {
        return Err(MeldError::Configuration(
            "stage two needs the prior marginal of submodel 2".into(),
        ));
    }
    for (l, s) in layouts.iter().zip(stores) {
        if l.units * l.phi_per_unit != s.phi_dim() || l.units * l.psi_per_unit != s.psi_dim() {
            return Err(MeldError::Structure(
                "unit factorization does not tile the stored draws".into(),
            ));
        }
    }
    let psi2_supports = model.submodel(1).psi_support().to_vec();
    if settings.kernel.dim() != psi2_supports.len() {
        return Err(MeldError::DimensionMismatch {
            what: "stage-two psi kernel".into(),
            expected: psi2_supports.len(),
            got: settings.kernel.dim(),
        });
    }
    let s2 = StageTwo { model, factorization };
    let names = ["store1", "store3"];

    let runs = run_chains(settings.chains, |c| {
        let mut rng = chain_rng(seed, streams::STAGE_TWO + c as u64);
        let mut ends: [EndState; 2];
        let mut psi2: Vec<f64>;
        let mut current;
        let mut attempt = 0;
        loop {
            let n1 = rng.random_range(0..stores[0].len());
            let n3 = rng.random_range(0..stores[1].len());
            ends = [
                EndState::from_row(stores[0], n1, layouts[0].units),
                EndState::from_row(stores[1], n3, layouts[1].units),
            ];
            psi2 = if attempt == 0 {
                default_start(&psi2_supports)
            } else {
                random_point(&psi2_supports, None, &mut rng)
            };
            current = s2.log_target(&ends[0].phi, &ends[1].phi, &psi2)?;
            if current.is_finite() {
                break;
            }
            attempt += 1;
            if attempt == MAX_INIT_ATTEMPTS {
                return Err(MeldError::Initialization {
                    attempts: MAX_INIT_ATTEMPTS,
                    reason: "no stage-two starting point with finite density".into(),
                });
            }
        }

        let mut stats = [UpdateStats::new(names[0]), UpdateStats::new(names[1]), UpdateStats::new("psi2")];
        let mut traces = [
            IndexTrace::new(names[0], c, layouts[0].units),
            IndexTrace::new(names[1], c, layouts[1].units),
        ];
        let mut draws = ChainDraws::new();
        let mut orders: [Vec<usize>; 2] = [(0..layouts[0].units).collect(), (0..layouts[1].units).collect()];
        let sched = settings.schedule;
        for i in 0..sched.warmup + sched.iterations {
            let post = i >= sched.warmup;
            for side in 0..2 {
                let layout = layouts[side];
                if layout.units > 1 {
                    orders[side].shuffle(&mut rng);
                }
                for &u in &orders[side][..layout.units] {
                    let n = rng.random_range(0..stores[side].len());
                    let row_phi = stores[side].phi(n);
                    let row_psi = stores[side].psi(n);
                    let phi_range = u * layout.phi_per_unit..(u + 1) * layout.phi_per_unit;
                    let psi_range = u * layout.psi_per_unit..(u + 1) * layout.psi_per_unit;
                    let mut phi_star = ends[side].phi.clone();
                    phi_star[phi_range.clone()].copy_from_slice(&row_phi[phi_range]);
                    let proposed = if side == 0 {
                        s2.log_target(&phi_star, &ends[1].phi, &psi2)?
                    } else {
                        s2.log_target(&ends[0].phi, &phi_star, &psi2)?
                    };
                    let acc = accept(proposed - current, &mut rng);
                    if acc {
                        ends[side].phi = phi_star;
                        ends[side].psi[psi_range.clone()].copy_from_slice(&row_psi[psi_range]);
                        ends[side].index[u] = n as u32;
                        current = proposed;
                    }
                    if post {
                        stats[side].record(acc);
                    }
                }
            }
            if !psi2.is_empty() {
                let mut state = MhState {
                    x: std::mem::take(&mut psi2),
                    log_target: current,
                };
                let acc = mh_step(
                    &mut state,
                    |p| s2.log_target(&ends[0].phi, &ends[1].phi, p),
                    &settings.kernel,
                    &mut rng,
                )?;
                psi2 = state.x;
                current = state.log_target;
                if post {
                    stats[2].record(acc);
                }
            }
            if post && sched.keeps(i - sched.warmup) {
                let phi = PhiVector(vec![ends[0].phi.clone(), ends[1].phi.clone()]);
                let psi = PsiVector(vec![ends[0].psi.clone(), psi2.clone(), ends[1].psi.clone()]);
                draws.iterations.push((i - sched.warmup) as u64);
                draws.values.extend(model.flatten(&phi, &psi));
                traces[0].indices.extend_from_slice(&ends[0].index);
                traces[1].indices.extend_from_slice(&ends[1].index);
            }
        }
        let stats: Vec<UpdateStats> = stats.into_iter().filter(|s| s.proposed > 0).collect();
        Ok((draws, stats, traces))
    })?;

    let mut out = MeldedChainOutput::new(model.column_names(), seed);
    for (draws, stats, traces) in runs {
        out.chains.push(draws);
        out.merge_updates(&stats);
        out.index_traces.extend(traces);
    }
    Ok(out)
}
