use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use simgap::config::{preset, preset_names, RunConfig};
use simgap::pipeline::Pipeline;
use simgap::SimGapError;

/// Certified simulation-gap quantification and symbolic controller synthesis.
#[derive(Parser)]
#[command(name = "simgap", version, about)]
struct Cli {
    /// config file path, or the name of a bundled preset
    #[arg(long, global = true)]
    config: Option<String>,

    /// output directory, overrides the config's out_dir
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// rayon worker threads (default: all cores)
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// seed override for every stage
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the epsilon-net covers and write their centers
    Cover,
    /// Generate the paired-transition gap dataset
    Collect,
    /// Train the certified gap networks with eta bisection
    Train,
    /// Estimate the gap map's Lipschitz constants
    Estimate,
    /// Assemble and validate the continuum gap certificate
    Certify,
    /// Synthesize the symbolic controllers
    Synthesize,
    /// Run the bundled closed-loop rollouts
    Rollout,
    /// Emit the run summary report
    Report,
    /// Run every stage in order
    All,
    /// List the bundled presets
    Presets,
}

fn load_config(cli: &Cli) -> Result<RunConfig, SimGapError> {
    let Some(spec) = &cli.config else {
        return Err(SimGapError::Config(
            "--config <path or preset> is required".into(),
        ));
    };
    let mut cfg = if let Some(p) = preset(spec) {
        p
    } else if std::path::Path::new(spec).exists() {
        RunConfig::load(std::path::Path::new(spec))?
    } else {
        return Err(SimGapError::Config(format!(
            "`{spec}` is neither a file nor a bundled preset (presets: {})",
            preset_names().join(", ")
        )));
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), SimGapError> {
    if let Command::Presets = cli.command {
        for name in preset_names() {
            let p = preset(name).unwrap();
            let tag = if p.long_running { " (long-running)" } else { "" };
            println!("{name}{tag}");
        }
        return Ok(());
    }
    let cfg = load_config(cli)?;
    if let Some(workers) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .map_err(|e| SimGapError::Config(format!("worker pool: {e}")))?;
    }
    if cfg.long_running {
        eprintln!(
            "note: preset `{}` is full-scale and may run for hours",
            cfg.name
        );
    }
    let pipeline = Pipeline::new(cfg)?;
    match cli.command {
        Command::Cover => pipeline.run_stage("cover")?,
        Command::Collect => pipeline.run_stage("collect")?,
        Command::Train => pipeline.run_stage("train")?,
        Command::Estimate => pipeline.run_stage("estimate")?,
        Command::Certify => pipeline.run_stage("certify")?,
        Command::Synthesize => pipeline.run_stage("synthesize")?,
        Command::Rollout => pipeline.run_stage("rollout")?,
        Command::Report => pipeline.run_stage("report")?,
        Command::All => {
            let report = pipeline.run_all()?;
            println!(
                "run `{}` complete: {} validation violations over {} probes, {} winning cells",
                report.scenario,
                report.validation_violations,
                report.validation_probes,
                report.winning_cells
            );
        }
        Command::Presets => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ SimGapError::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
