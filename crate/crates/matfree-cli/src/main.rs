//! Command-line entry point: bench | simulate | invert | verify.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use matfree::operator::Strategy;
use matfree_cli::bench::{self, SweepConfig};
use matfree_cli::config::{parse_precision, parse_strategy, Precision, RunConfig};
use matfree_cli::error::CliError;
use matfree_cli::{run, verify};

#[derive(Parser)]
#[command(
    name = "matfree",
    about = "Matrix-free transient heat solver harness",
    long_about = "Matrix-free transient heat solver harness.\n\
                  MATFREE_THREADS caps the worker pool (default: all cores)."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sweep mesh sizes, strategies, and partition counts; write timing CSVs.
    Bench(CommonArgs),
    /// Run one transient simulation and export the final field.
    Simulate(CommonArgs),
    /// Recover the corrosion depth from synthetic camera data.
    Invert(CommonArgs),
    /// Run the built-in correctness suites; nonzero exit on any failure.
    Verify(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// JSON run configuration (defaults to a built-in preset).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for data synthesis and the sampling chain.
    #[arg(long)]
    seed: Option<u64>,
    /// Solver partition count: 1 or 2.
    #[arg(long)]
    partitions: Option<usize>,
    /// Fraction of layers owned by the first partition.
    #[arg(long)]
    split_fraction: Option<f64>,
    /// flexible | singlepass | coalesced.
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
    /// f64 | f32.
    #[arg(long, value_parser = parse_precision)]
    precision: Option<Precision>,
    /// Output directory (default "out").
    #[arg(long)]
    out: Option<PathBuf>,
}

impl CommonArgs {
    fn load(&self, preset: fn() -> RunConfig) -> Result<RunConfig, CliError> {
        let mut config = match &self.config {
            Some(path) => RunConfig::from_path(path)?,
            None => preset(),
        };
        config.apply_overrides(
            self.seed,
            self.partitions,
            self.split_fraction,
            self.strategy,
            self.precision,
        );
        config.validate()?;
        Ok(config)
    }
}

fn bench_cmd(args: &CommonArgs) -> Result<(), CliError> {
    let config = args.load(RunConfig::laminate)?;
    let mut sweep = SweepConfig {
        precision: config.solver.precision,
        dt: config.time.dt,
        n_steps: config.time.n_steps,
        tol: config.solver.tol,
        split_fraction: config.solver.split_fraction,
        ..SweepConfig::default()
    };
    if let Some(strategy) = args.strategy {
        sweep.strategies = vec![strategy];
    }
    if let Some(p) = args.partitions {
        sweep.partitions = vec![p];
    }
    let (records, phases) = bench::run_sweep(&sweep)?;
    let out = config.output.resolve(args.out.as_deref());
    bench::write_bench_csv(&out.bench_csv, &records)?;
    bench::write_phase_csv(&out.phase_csv, &phases)?;
    println!("wrote {} ({} records)", out.bench_csv.display(), records.len());
    println!("wrote {}", out.phase_csv.display());
    for &strategy in &sweep.strategies {
        if sweep.partitions.contains(&1) && sweep.sizes.len() >= 3 {
            let slope = bench::strategy_slope(&records, strategy, 3);
            println!("{}: time/iteration vs unknowns slope {slope:.3}", strategy.name());
        }
    }
    Ok(())
}

fn simulate_cmd(args: &CommonArgs) -> Result<(), CliError> {
    let config = args.load(RunConfig::laminate)?;
    let out = config.output.resolve(args.out.as_deref());
    let summary = run::simulate_cmd(&config, &out)?;
    println!(
        "{} unknowns, {} steps, {} PCG iterations in {:.2}s",
        summary.dof, summary.n_steps, summary.total_iterations, summary.total_seconds
    );
    println!("wrote {}", out.field_vtk.display());
    println!("wrote {}", out.records_csv.display());
    println!("wrote {}", out.summary_json.display());
    Ok(())
}

fn invert_cmd(args: &CommonArgs) -> Result<(), CliError> {
    let config = args.load(RunConfig::corrosion)?;
    let out = config.output.resolve(args.out.as_deref());
    let summary = run::invert_cmd(&config, &out)?;
    println!(
        "true depth {:.3} mm, posterior {:.3} +- {:.3} mm, acceptance {:.2}",
        summary.true_depth, summary.posterior_mean, summary.posterior_std,
        summary.acceptance_rate
    );
    println!("wrote {}", out.chain_csv.display());
    println!("wrote {}", out.summary_json.display());
    Ok(())
}

fn verify_cmd() -> Result<(), CliError> {
    let results = verify::run_all();
    if verify::report(&results) {
        Ok(())
    } else {
        Err(CliError::VerifyFailed {
            failed: results.iter().filter(|r| !r.passed).count(),
            total: results.len(),
        })
    }
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.cmd {
        Cmd::Bench(args) => bench_cmd(args),
        Cmd::Simulate(args) => simulate_cmd(args),
        Cmd::Invert(args) => invert_cmd(args),
        Cmd::Verify(_) => verify_cmd(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
