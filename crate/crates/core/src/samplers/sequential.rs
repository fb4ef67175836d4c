//! Sequential three-stage sampler: submodels are folded in one at a time, each
//! stage proposing from the draws of the stage before it.

use rand::Rng;

use super::stage_one::{require_three, run_single_block};
use super::{
    accept, call_delta, chain_rng, default_start, mh_step, random_point, run_chains, streams, ChainDraws, IndexTrace,
    MeldedChainOutput, MhState, SampleStore, StageSettings, UpdateStats, MAX_INIT_ATTEMPTS,
};
use crate::chain::{coordinate_names, ChainModel, PhiVector, PsiVector, Support};
use crate::error::{MeldError, Result};
use crate::pooling::SequentialFactorization;

/// Stores of the first two stages and the final melded draws.
#[derive(Debug, Clone, PartialEq)]
pub struct SequentialRun {
    pub store1: SampleStore,
    pub store2: SampleStore,
    pub output: MeldedChainOutput,
    /// Joint evaluations per submodel made during each of the three stages.
    pub stage_joint_calls: [Vec<u64>; 3],
}

/// Runs the three stages in order with the given per-stage settings. The
/// stage-two kernel moves `(phi23, psi2)`; the stage-three kernel moves `psi3`.
pub fn run_sequential(
    model: &ChainModel,
    factorization: &SequentialFactorization,
    stages: [&StageSettings; 3],
    seed: u64,
) -> Result<SequentialRun> {
    require_three(model)?;
    for s in stages {
        s.validate()?;
    }
    let stage1_target = |phi: &[f64], psi: &[f64]| -> Result<f64> {
        let pool = factorization.log_pool1(phi)?;
        if pool == f64::NEG_INFINITY {
            return Ok(f64::NEG_INFINITY);
        }
        Ok(pool + model.log_replaced(0, phi, psi)?)
    };
    let c0 = model.joint_calls();
    let store1 = run_single_block(model, 0, 0, stage1_target, stages[0], seed, streams::SEQUENTIAL[0])?;
    let c1 = model.joint_calls();
    let (store2, stats2) = stage_two(model, factorization, &store1, stages[1], seed)?;
    let c2 = model.joint_calls();
    let mut output = stage_three(model, factorization, &store2, stages[2], seed)?;
    let c3 = model.joint_calls();
    output.merge_updates(&stats2);
    Ok(SequentialRun {
        store1,
        store2,
        output,
        stage_joint_calls: [call_delta(&c0, &c1), call_delta(&c1, &c2), call_delta(&c2, &c3)],
    })
}

fn log_target2(model: &ChainModel, f: &SequentialFactorization, phi12: &[f64], phi23: &[f64], psi2: &[f64]) -> Result<f64> {
    let pool = f.log_pool2(phi12, phi23)?;
    if pool == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let phi: Vec<f64> = phi12.iter().chain(phi23).copied().collect();
    Ok(pool + model.log_replaced(1, &phi, psi2)?)
}

fn log_target3(model: &ChainModel, f: &SequentialFactorization, phi12: &[f64], phi23: &[f64], psi3: &[f64]) -> Result<f64> {
    let pool = f.log_pool3(phi12, phi23)?;
    if pool == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(pool + model.log_replaced(2, phi23, psi3)?)
}

fn init_failure(stage: &str) -> MeldError {
    MeldError::Initialization {
        attempts: MAX_INIT_ATTEMPTS,
        reason: format!("no {stage} starting point with finite density"),
    }
}

/// Stage two: state `(phi12, psi1, phi23, psi2)`. `(phi12, psi1)` is proposed
/// from the stage-one store, `(phi23, psi2)` by the generic kernel.
fn stage_two(
    model: &ChainModel,
    f: &SequentialFactorization,
    store1: &SampleStore,
    settings: &StageSettings,
    seed: u64,
) -> Result<(SampleStore, Vec<UpdateStats>)> {
    store1.require_nonempty("store1")?;
    let d12 = store1.phi_dim();
    let d23 = model.phi_blocks()[1].dim();
    let sub2 = model.submodel(1);
    let mut supports: Vec<Support> = model.phi_blocks()[1].support.clone();
    supports.extend_from_slice(sub2.psi_support());
    if settings.kernel.dim() != supports.len() {
        return Err(MeldError::DimensionMismatch {
            what: "stage-two kernel over (phi23, psi2)".into(),
            expected: supports.len(),
            got: settings.kernel.dim(),
        });
    }
    let center: Option<Vec<f64>> = sub2.summary().filter(|g| g.dim() == d12 + d23).map(|g| {
        let mut c: Vec<f64> = g.mean().iter().skip(d12).copied().collect();
        c.extend(default_start(sub2.psi_support()));
        c
    });
    let mut phi_names = store1.phi_names().to_vec();
    phi_names.extend(model.phi_blocks()[1].coordinate_names());
    let mut psi_names = store1.psi_names().to_vec();
    psi_names.extend(coordinate_names(sub2.psi_label(), sub2.psi_dim()));

    let runs = run_chains(settings.chains, |c| {
        let mut rng = chain_rng(seed, streams::SEQUENTIAL[1] + c as u64);
        let mut n1 = 0;
        let mut moving = Vec::new();
        let mut current = f64::NEG_INFINITY;
        for attempt in 0..MAX_INIT_ATTEMPTS {
            n1 = rng.random_range(0..store1.len());
            moving = match (attempt, &center) {
                (0, Some(c)) => c.clone(),
                (0, None) => default_start(&supports),
                _ => random_point(&supports, center.as_deref(), &mut rng),
            };
            current = log_target2(model, f, store1.phi(n1), &moving[..d23], &moving[d23..])?;
            if current.is_finite() {
                break;
            }
        }
        if !current.is_finite() {
            return Err(init_failure("stage-two"));
        }
        let mut stats = [UpdateStats::new("stage_two_store1"), UpdateStats::new("stage_two_kernel")];
        let mut trace = IndexTrace::new("store1", c, 1);
        let mut store = SampleStore::new(phi_names.clone(), psi_names.clone());
        let sched = settings.schedule;
        for i in 0..sched.warmup + sched.iterations {
            let post = i >= sched.warmup;
            let n = rng.random_range(0..store1.len());
            let proposed = log_target2(model, f, store1.phi(n), &moving[..d23], &moving[d23..])?;
            let acc = accept(proposed - current, &mut rng);
            if acc {
                n1 = n;
                current = proposed;
            }
            if post {
                stats[0].record(acc);
            }
            let mut state = MhState {
                x: std::mem::take(&mut moving),
                log_target: current,
            };
            let phi12 = store1.phi(n1);
            let acc = mh_step(&mut state, |x| log_target2(model, f, phi12, &x[..d23], &x[d23..]), &settings.kernel, &mut rng)?;
            moving = state.x;
            current = state.log_target;
            if post {
                stats[1].record(acc);
            }
            if post && sched.keeps(i - sched.warmup) {
                let mut row: Vec<f64> = store1.phi(n1).to_vec();
                row.extend_from_slice(&moving[..d23]);
                row.extend_from_slice(store1.psi(n1));
                row.extend_from_slice(&moving[d23..]);
                store.push(&row, store1.log_density(n1) + current, c as u32, (i - sched.warmup) as u64);
                trace.indices.push(n1 as u32);
            }
        }
        Ok((store, stats, trace))
    })?;
    let mut iter = runs.into_iter();
    let (mut store, stats, _) = iter.next().expect("at least one chain");
    let mut all_stats = stats.to_vec();
    for (s, st, _) in iter {
        store.extend(&s)?;
        for (a, b) in all_stats.iter_mut().zip(st) {
            a.accepted += b.accepted;
            a.proposed += b.proposed;
        }
    }
    Ok((store, all_stats))
}

/// Stage three: state `(phi12, phi23, psi1, psi2, psi3)`. Everything but
/// `psi3` is proposed from the stage-two store; `psi3` moves by the kernel.
fn stage_three(
    model: &ChainModel,
    f: &SequentialFactorization,
    store2: &SampleStore,
    settings: &StageSettings,
    seed: u64,
) -> Result<MeldedChainOutput> {
    store2.require_nonempty("store2")?;
    let d12 = model.phi_blocks()[0].dim();
    let d_psi1 = model.submodel(0).psi_dim();
    let psi3_supports = model.submodel(2).psi_support().to_vec();
    if settings.kernel.dim() != psi3_supports.len() {
        return Err(MeldError::DimensionMismatch {
            what: "stage-three kernel over psi3".into(),
            expected: psi3_supports.len(),
            got: settings.kernel.dim(),
        });
    }
    let split = |n: usize| {
        let phi = store2.phi(n);
        (&phi[..d12], &phi[d12..])
    };
    let runs = run_chains(settings.chains, |c| {
        let mut rng = chain_rng(seed, streams::SEQUENTIAL[2] + c as u64);
        let mut n2 = 0;
        let mut psi3 = Vec::new();
        let mut current = f64::NEG_INFINITY;
        for attempt in 0..MAX_INIT_ATTEMPTS {
            n2 = rng.random_range(0..store2.len());
            psi3 = if attempt == 0 {
                default_start(&psi3_supports)
            } else {
                random_point(&psi3_supports, None, &mut rng)
            };
            let (a, b) = split(n2);
            current = log_target3(model, f, a, b, &psi3)?;
            if current.is_finite() {
                break;
            }
        }
        if !current.is_finite() {
            return Err(init_failure("stage-three"));
        }
        let mut stats = [UpdateStats::new("stage_three_store2"), UpdateStats::new("stage_three_psi3")];
        let mut trace = IndexTrace::new("store2", c, 1);
        let mut draws = ChainDraws::new();
        let sched = settings.schedule;
        for i in 0..sched.warmup + sched.iterations {
            let post = i >= sched.warmup;
            let n = rng.random_range(0..store2.len());
            let (a, b) = split(n);
            let proposed = log_target3(model, f, a, b, &psi3)?;
            let acc = accept(proposed - current, &mut rng);
            if acc {
                n2 = n;
                current = proposed;
            }
            if post {
                stats[0].record(acc);
            }
            if !psi3.is_empty() {
                let (a, b) = split(n2);
                let mut state = MhState {
                    x: std::mem::take(&mut psi3),
                    log_target: current,
                };
                let acc = mh_step(&mut state, |x| log_target3(model, f, a, b, x), &settings.kernel, &mut rng)?;
                psi3 = state.x;
                current = state.log_target;
                if post {
                    stats[1].record(acc);
                }
            }
            if post && sched.keeps(i - sched.warmup) {
                let (a, b) = split(n2);
                let psi = store2.psi(n2);
                let phi = PhiVector(vec![a.to_vec(), b.to_vec()]);
                let psi = PsiVector(vec![psi[..d_psi1].to_vec(), psi[d_psi1..].to_vec(), psi3.clone()]);
                draws.iterations.push((i - sched.warmup) as u64);
                draws.values.extend(model.flatten(&phi, &psi));
                trace.indices.push(n2 as u32);
            }
        }
        let stats: Vec<UpdateStats> = stats.into_iter().filter(|s| s.proposed > 0).collect();
        Ok((draws, stats, trace))
    })?;
    let mut out = MeldedChainOutput::new(model.column_names(), seed);
    for (draws, stats, trace) in runs {
        out.chains.push(draws);
        out.merge_updates(&stats);
        out.index_traces.push(trace);
    }
    Ok(out)
}
