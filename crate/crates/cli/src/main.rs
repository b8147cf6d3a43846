use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tada_cli::commands::{
    cmd_dump_coeffs, cmd_fm_baseline, cmd_sample, cmd_sweep_k, cmd_sweep_nfe, cmd_verify,
    default_grid, DEFAULT_GRID_POINTS,
};
use tada_cli::config::ExperimentConfig;
use tada_cli::{CliError, EXIT_CONFIG, EXIT_OK};
use tada_core::dynamics::DEFAULT_DELTA;

#[derive(Parser, Debug)]
#[command(
    name = "tada",
    version,
    about = "Training-free augmented-dynamics sampler experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the registered property checks and write verify_report.json.
    Verify {
        /// Only run checks whose name contains this pattern.
        #[arg(long)]
        filter: Option<String>,
        /// Test hook: perturb the closed-form transition by 1e-3 so the
        /// oracle check must fail.
        #[arg(long)]
        inject_fault: bool,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Draw one batch with the augmented sampler.
    Sample(RunArgs),
    /// Draw one batch with the plain flow-matching sampler.
    FmBaseline(RunArgs),
    /// Repeat `sample` per NFE budget and score against the dataset.
    SweepNfe {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated NFE budgets.
        #[arg(long, value_delimiter = ',', required = true)]
        nfe: Vec<usize>,
    },
    /// Repeat `sample` per prior scale with the initial y noise held fixed.
    SweepK {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated prior scales.
        #[arg(
            long,
            value_delimiter = ',',
            required = true,
            allow_negative_numbers = true
        )]
        k: Vec<f64>,
    },
    /// Write the closed-form coefficients on a time grid to coeffs.csv.
    DumpCoeffs {
        #[arg(long)]
        n_vars: usize,
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        k: f64,
        #[arg(long, default_value_t = DEFAULT_DELTA)]
        delta: f64,
        /// Comma-separated times; defaults to a uniform grid on [0, 1 - delta].
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        times: Option<Vec<f64>>,
        /// Number of points of the default grid.
        #[arg(long, default_value_t = DEFAULT_GRID_POINTS)]
        points: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides sampler.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides output.dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.sampler.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output.dir = out.clone();
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Verify {
            filter,
            inject_fault,
            out,
        } => {
            let records = cmd_verify(filter.as_deref(), inject_fault, &out)?;
            for r in &records {
                let status = if r.passed { "PASS" } else { "FAIL" };
                match &r.error {
                    Some(e) => println!("{status} {} error: {e}", r.name),
                    None => println!(
                        "{status} {} observed {:.3e} tolerance {:.1e}",
                        r.name, r.observed, r.tolerance
                    ),
                }
            }
            let failed = records.iter().filter(|r| !r.passed).count();
            println!("{} checks, {failed} failed", records.len());
            if failed > 0 {
                return Err(CliError::Failed(format!("{failed} check(s) failed")));
            }
        }
        Command::Sample(args) => {
            let run = cmd_sample(&args.load()?)?;
            println!("{} samples, NFE {}", run.samples.len(), run.nfe);
        }
        Command::FmBaseline(args) => {
            let run = cmd_fm_baseline(&args.load()?)?;
            println!("{} samples, NFE {}", run.samples.len(), run.nfe);
        }
        Command::SweepNfe { run, nfe } => {
            for row in cmd_sweep_nfe(&run.load()?, &nfe)? {
                println!("nfe {} {} {:.6}", row.nfe, row.metric, row.value);
            }
        }
        Command::SweepK { run, k } => {
            for (k, spread) in k.iter().zip(cmd_sweep_k(&run.load()?, &k)?) {
                println!("k {k} spread {spread:.6}");
            }
        }
        Command::DumpCoeffs {
            n_vars,
            k,
            delta,
            times,
            points,
            out,
        } => {
            let grid = times.unwrap_or_else(|| default_grid(delta, points));
            cmd_dump_coeffs(n_vars, k, delta, &grid, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
