use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use chained_melding::config::RunConfig;
use chained_melding::run::{run_from_config, Command, RunReport};
use chained_melding::MeldError;

#[derive(Parser)]
#[command(name = "chained-meld", version, about = "Chained Markov melding: pooling grids, multi-stage samplers and exact oracles")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `sampler.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `outputs.dir`.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Check the config and the chain structure.
    Validate,
    /// Grid-normalize the pooled prior (and any lambda1 sweep).
    PoolGrid,
    /// Run the configured sampler.
    Sample,
    /// Enumerate the exact melded posterior of a discrete chain, then compare the sampler against it.
    Oracle,
    /// Recompute diagnostics from melded_samples.csv in the output directory.
    Diag,
}

enum Failure {
    Config(MeldError),
    Runtime(MeldError),
}

fn is_config_error(e: &MeldError) -> bool {
    matches!(e, MeldError::Configuration(_) | MeldError::Domain(_) | MeldError::Structure(_))
}

fn load(cli: &Cli) -> Result<RunConfig, Failure> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Failure::Config(MeldError::Configuration("--config is required".into())))?;
    let mut config = RunConfig::from_path(path).map_err(Failure::Config)?;
    if let (Some(seed), Some(s)) = (cli.seed, config.sampler.as_mut()) {
        s.seed = Some(seed);
    }
    if let Some(dir) = &cli.out_dir {
        config.outputs.dir = dir.clone();
    }
    config.validate().map_err(Failure::Config)?;
    Ok(config)
}

fn print_report(report: &RunReport) {
    for f in &report.files {
        println!("wrote {}", f.display());
    }
    for (l, r, m) in &report.grid_correlations {
        println!("lambda1 {l}: grid correlation {r:.6}, mass {m:.6}");
    }
    if let Some(out) = &report.output {
        for u in &out.updates {
            println!("acceptance {}: {:.4}", u.name, u.rate());
        }
    }
    for d in &report.diagnostics {
        println!(
            "{}: rhat {:.4} ess_bulk {:.1} ess_tail {:.1} moves {:.3}",
            d.parameter, d.rhat, d.ess_bulk, d.ess_tail, d.acceptance_rate
        );
    }
    if let Some(tv) = report.oracle_tv {
        println!("sampler TV vs oracle: {tv:.6}");
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = match cli.command {
        Cmd::Validate => Command::Validate,
        Cmd::PoolGrid => Command::PoolGrid,
        Cmd::Sample => Command::Sample,
        Cmd::Oracle => Command::Oracle,
        Cmd::Diag => Command::Diag,
    };
    let result = load(&cli).and_then(|config| {
        run_from_config(&config, command, &config.outputs.dir).map_err(|e| {
            if is_config_error(&e) {
                Failure::Config(e)
            } else {
                Failure::Runtime(e)
            }
        })
    });
    match result {
        Ok(report) => {
            if command == Command::Validate {
                println!("config ok");
            }
            print_report(&report);
            ExitCode::SUCCESS
        }
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
