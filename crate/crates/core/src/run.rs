//! Config-driven pipeline: grids, samplers, oracle comparison, diagnostics and the run manifest.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::builtin::BuiltinModel;
use crate::chain::Support;
use crate::config::{build_pool, kernel_for, stage, ModelRegistry, PoolingConfig, RunConfig, SamplerConfig, SamplerKind};
use crate::diagnostics::{summarize, write_summary_csv, ParameterSummary};
use crate::error::{MeldError, Result};
use crate::normal_approx::{build_normal_approx_target, fit_store_phi, ApproxMode};
use crate::oracle::{enumerate_melded_posterior, sampler_tv};
use crate::pooling::{
    factorize_for_sampler, factorize_sequential, grid_normalize, BoundaryChoice, FactorizationMode, GridAxis, PoolMethod,
    PooledPrior,
};
use crate::samplers::{run_parallel, run_sequential, run_stage_one, EndSubmodel, MeldedChainOutput, SampleStore};

pub const MELDED_SAMPLES: &str = "melded_samples.csv";
pub const DIAGNOSTICS: &str = "diagnostics.csv";
pub const ORACLE_POSTERIOR: &str = "oracle_posterior.csv";
pub const MANIFEST: &str = "manifest.txt";

/// Which part of the pipeline to execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Validate,
    PoolGrid,
    Sample,
    Oracle,
    Diag,
}

/// What a run produced, for callers that want more than the files.
#[derive(Debug, Default)]
pub struct RunReport {
    pub files: Vec<PathBuf>,
    pub output: Option<MeldedChainOutput>,
    pub diagnostics: Vec<ParameterSummary>,
    pub oracle_tv: Option<f64>,
    /// `(lambda1, correlation, mass)` for each exported logarithmic grid.
    pub grid_correlations: Vec<(f64, f64, f64)>,
}

fn io_err(path: &Path, e: std::io::Error) -> MeldError {
    MeldError::Io(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<PathBuf> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| io_err(path, e))?;
    Ok(path.to_path_buf())
}

pub fn run_from_config(config: &RunConfig, command: Command, out_dir: &Path) -> Result<RunReport> {
    run_from_config_with_registry(config, command, out_dir, &ModelRegistry::new())
}

/// Builds the model and pool, then runs `command`, writing artifacts under `out_dir`.
pub fn run_from_config_with_registry(
    config: &RunConfig,
    command: Command,
    out_dir: &Path,
    registry: &ModelRegistry,
) -> Result<RunReport> {
    config.validate()?;
    let built = config.model.build(registry)?;
    let pool = build_pool(config, &built)?;
    let mut report = RunReport::default();
    if command == Command::Validate {
        let v = crate::chain::validate_chain(&built.model);
        if !v.is_ok() {
            return Err(MeldError::Structure(v.to_string()));
        }
        if let Some(s) = &config.sampler {
            check_sampler_pooling(s, &config.pooling)?;
        }
        return Ok(report);
    }
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    match command {
        Command::PoolGrid => pool_grids(config, &built, &pool, out_dir, &mut report)?,
        Command::Sample => {
            sample(config, &built, &pool, out_dir, &mut report)?;
        }
        Command::Oracle => {
            let table = enumerate_melded_posterior(&built.model, &pool)?;
            report.files.push(write_file(&out_dir.join(ORACLE_POSTERIOR), |w| table.write_csv(w))?);
            if config.sampler.is_some() {
                sample(config, &built, &pool, out_dir, &mut report)?;
                let output = report.output.as_ref().expect("sample sets output");
                report.oracle_tv = Some(sampler_tv(output, &table)?);
            }
        }
        Command::Diag => {
            let path = out_dir.join(MELDED_SAMPLES);
            let file = File::open(&path).map_err(|e| io_err(&path, e))?;
            let output = MeldedChainOutput::read_csv(file)?;
            report.diagnostics = summarize(&output);
            report.files.push(write_file(&out_dir.join(DIAGNOSTICS), |w| write_summary_csv(&report.diagnostics, w))?);
            report.output = Some(output);
        }
        Command::Validate => unreachable!(),
    }
    Ok(report)
}

fn pool_grids(config: &RunConfig, built: &BuiltinModel, pool: &PooledPrior, out_dir: &Path, report: &mut RunReport) -> Result<()> {
    let grid = config
        .grid
        .as_ref()
        .ok_or_else(|| MeldError::Configuration("at `grid`: the pool-grid command needs a grid section".into()))?;
    let dims: usize = built.model.phi_blocks().iter().map(|b| b.dim()).sum();
    let axes = vec![GridAxis::new(grid.lower, grid.upper, grid.points); dims];
    let table = grid_normalize(&built.model, pool, &axes)?;
    report.files.push(write_file(&out_dir.join("pool_grid.csv"), |w| table.write_csv(w))?);
    if let Some(sweep) = &grid.lambda1_sweep {
        if dims != 2 {
            return Err(MeldError::Unsupported(format!("lambda1 sweeps need two scalar blocks, got {dims} coordinates")));
        }
        for &l in sweep {
            let swept = built.pool_builder(PoolMethod::Logarithmic(vec![l, 1.0 - 2.0 * l, l])).build()?;
            let t = grid_normalize(&built.model, &swept, &axes)?;
            let path = out_dir.join(format!("pool_grid_lambda1_{}.csv", crate::csvfmt::fmt_f64(l)));
            report.files.push(write_file(&path, |w| t.write_csv(w))?);
            report.grid_correlations.push((l, t.correlation(0, 1), t.total_mass()));
        }
        let rows = report.grid_correlations.clone();
        report.files.push(write_file(&out_dir.join("pool_grid_summary.csv"), |w| {
            writeln!(w, "lambda1,correlation,mass")?;
            for (l, r, m) in &rows {
                use crate::csvfmt::fmt_f64;
                writeln!(w, "{},{},{}", fmt_f64(*l), fmt_f64(*r), fmt_f64(*m))?;
            }
            Ok(())
        })?);
    }
    Ok(())
}

/// The normal approximation assumes a specific pool: complete dictatorship of
/// the middle submodel in ratio mode, product of experts otherwise.
fn check_sampler_pooling(s: &SamplerConfig, pooling: &PoolingConfig) -> Result<()> {
    if s.kind != SamplerKind::NormalApprox {
        return Ok(());
    }
    let ok = match (s.approx_mode(), pooling.method()?) {
        (ApproxMode::Ratio, PoolMethod::DictatorialComplete(c)) => c == [BoundaryChoice::Right, BoundaryChoice::Left],
        (ApproxMode::PoeFlatPrior, PoolMethod::ProductOfExperts) => true,
        _ => false,
    };
    if !ok {
        return Err(MeldError::Configuration(
            "at `pooling`: normal-approx ratio mode needs dictatorial-complete choices [right, left]; poe-flat-prior mode needs poe".into(),
        ));
    }
    Ok(())
}

fn end_supports(built: &BuiltinModel, m: usize, block: usize) -> Vec<Support> {
    let mut s = built.model.phi_blocks()[block].support.clone();
    s.extend_from_slice(built.model.submodel(m).psi_support());
    s
}

fn store_file(out_dir: &Path, name: &str, store: &SampleStore, report: &mut RunReport) -> Result<()> {
    report.files.push(write_file(&out_dir.join(name), |w| store.write_csv(w))?);
    Ok(())
}

fn sample(config: &RunConfig, built: &BuiltinModel, pool: &PooledPrior, out_dir: &Path, report: &mut RunReport) -> Result<()> {
    let s = config.sampler()?;
    check_sampler_pooling(s, &config.pooling)?;
    let seed = s.seed_value();
    let model = &built.model;
    let subs = model.submodels();
    let early = s.early_schedule();
    let fin = s.final_schedule();
    let output = match s.kind {
        SamplerKind::Parallel | SamplerKind::ParallelUnitwise => {
            let fact = factorize_for_sampler(pool, s.parallel_mode())?;
            let k1 = kernel_for(&end_supports(built, 0, 0), s.scales.stage_one_first.as_ref(), subs[0].summary(), "sampler.scales.stage_one_first")?;
            let k3 = kernel_for(&end_supports(built, 2, 1), s.scales.stage_one_last.as_ref(), subs[2].summary(), "sampler.scales.stage_one_last")?;
            let k2 = kernel_for(subs[1].psi_support(), s.scales.stage_two.as_ref(), None, "sampler.scales.stage_two")?;
            let (s1, s3) = (stage(k1, early, s.early_chains()), stage(k3, early, s.early_chains()));
            let run = run_parallel(model, &fact, [&s1, &s3], &stage(k2, fin, s.chains), seed, s.kind == SamplerKind::ParallelUnitwise)?;
            store_file(out_dir, "stage_one_1.csv", &run.store1, report)?;
            store_file(out_dir, "stage_one_3.csv", &run.store3, report)?;
            run.output
        }
        SamplerKind::Sequential => {
            let fact = factorize_sequential(pool, s.sequential_mode())?;
            let k1 = kernel_for(&end_supports(built, 0, 0), s.scales.stage_one_first.as_ref(), subs[0].summary(), "sampler.scales.stage_one_first")?;
            let mut sup2 = model.phi_blocks()[1].support.clone();
            sup2.extend_from_slice(subs[1].psi_support());
            let k2 = kernel_for(&sup2, s.scales.stage_two.as_ref(), None, "sampler.scales.stage_two")?;
            let k3 = kernel_for(subs[2].psi_support(), s.scales.stage_three.as_ref(), None, "sampler.scales.stage_three")?;
            let stages = [stage(k1, early, s.early_chains()), stage(k2, early, s.early_chains()), stage(k3, fin, s.chains)];
            let run = run_sequential(model, &fact, [&stages[0], &stages[1], &stages[2]], seed)?;
            store_file(out_dir, "stage_one_1.csv", &run.store1, report)?;
            store_file(out_dir, "stage_two.csv", &run.store2, report)?;
            run.output
        }
        SamplerKind::NormalApprox => {
            let fact = factorize_for_sampler(pool, FactorizationMode::SubpriorEnds)?;
            let k1 = kernel_for(&end_supports(built, 0, 0), s.scales.stage_one_first.as_ref(), subs[0].summary(), "sampler.scales.stage_one_first")?;
            let k3 = kernel_for(&end_supports(built, 2, 1), s.scales.stage_one_last.as_ref(), subs[2].summary(), "sampler.scales.stage_one_last")?;
            let store1 = run_stage_one(model, EndSubmodel::First, &fact, &stage(k1, early, s.early_chains()), seed)?;
            let store3 = run_stage_one(model, EndSubmodel::Last, &fact, &stage(k3, early, s.early_chains()), seed)?;
            store_file(out_dir, "stage_one_1.csv", &store1, report)?;
            store_file(out_dir, "stage_one_3.csv", &store3, report)?;
            let g1 = fit_store_phi(&store1, &model.phi_blocks()[0].support)?;
            let g3 = fit_store_phi(&store3, &model.phi_blocks()[1].support)?;
            let target = build_normal_approx_target(model, &g1, subs[0].summary(), &g3, subs[2].summary(), s.approx_mode())?;
            let k = kernel_for(&target.supports(), s.scales.stage_two.as_ref(), Some(target.factor()), "sampler.scales.stage_two")?;
            target.sample(&stage(k, fin, s.chains), seed)?
        }
    };
    report.files.push(write_file(&out_dir.join(MELDED_SAMPLES), |w| output.write_csv(w))?);
    report.diagnostics = summarize(&output);
    report.files.push(write_file(&out_dir.join(DIAGNOSTICS), |w| write_summary_csv(&report.diagnostics, w))?);
    report.files.push(write_file(&out_dir.join(MANIFEST), |w| write_manifest(w, config, s, &output))?);
    report.output = Some(output);
    Ok(())
}

fn write_manifest<W: Write>(w: &mut W, config: &RunConfig, s: &SamplerConfig, output: &MeldedChainOutput) -> std::io::Result<()> {
    writeln!(w, "seed: {}", s.seed_value())?;
    writeln!(w, "config_sha256: {}", config.digest())?;
    writeln!(w, "version: {} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))?;
    writeln!(w, "sampler: {}", s.kind.name())?;
    writeln!(w, "chains: {}", output.num_chains())?;
    writeln!(w, "draws_per_chain: {}", output.draws_per_chain())?;
    for u in &output.updates {
        writeln!(w, "acceptance_rate.{}: {}", u.name, crate::csvfmt::fmt_f64(u.rate()))?;
    }
    Ok(())
}
