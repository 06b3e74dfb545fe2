use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use binq::harness::{
    analyze_named_pair, gap_audit_quadratic, print_memory_report, report_memory_files,
    run_experiment, sweep, ExperimentConfig,
};
use binq::nn::TaskMode;
use binq::Error;

#[derive(Parser)]
#[command(name = "binq", about = "Binarization-aware training toolkit", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one training experiment from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        algorithm: Option<String>,
        #[arg(long)]
        task_mode: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decompose a quantizer pair and report whether it admits F = T∘P.
    Analyze {
        /// Pair name, e.g. bc, bnn, bnn+, bnn++, poly+, ede, react.
        pair: String,
        #[arg(long, default_value_t = 2001)]
        grid: usize,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        /// Directory for the P-curve CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-layer memory table for a packed model.
    ReportMem {
        model: PathBuf,
        /// FP checkpoint whose non-packed layers join the table.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Run several configs on a worker pool.
    Sweep {
        configs: Vec<PathBuf>,
        #[arg(long, default_value_t = 2)]
        jobs: usize,
    },
    /// Audit the telescoped regret bound on a synthetic quadratic.
    GapAudit {
        #[arg(long, default_value_t = 10)]
        dim: usize,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 0.05)]
        eta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        windows: usize,
    },
}

fn run(cmd: Cmd) -> Result<(), Error> {
    match cmd {
        Cmd::Train { config, algorithm, task_mode, seed, epochs, out } => {
            let mut cfg = ExperimentConfig::from_toml_path(&config)?;
            if let Some(a) = algorithm {
                cfg.algorithm = a;
            }
            if let Some(m) = task_mode {
                cfg.task_mode = m.parse::<TaskMode>()?;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(o) = out {
                cfg.out = o;
            }
            let summary = run_experiment(&cfg)?;
            println!(
                "{}: test accuracy {:.4} after {} epochs (artifacts in {})",
                cfg.name,
                summary.final_test_acc,
                summary.epochs_run,
                summary.out.display()
            );
            if summary.max_overflow > 0.0 {
                println!("max accumulator overflow rate {:.4}", summary.max_overflow);
            }
            Ok(())
        }
        Cmd::Analyze { pair, grid, tol, out } => {
            let verdict = analyze_named_pair(&pair, grid, tol, out.as_deref())?;
            match verdict.reason {
                Some(reason) => println!("{pair}: fails ({reason})"),
                None => println!("{pair}: admits"),
            }
            Ok(())
        }
        Cmd::ReportMem { model, ckpt } => {
            let report = report_memory_files(&model, ckpt.as_deref())?;
            print_memory_report(&report, std::io::stdout().lock())
        }
        Cmd::Sweep { configs, jobs } => {
            if configs.is_empty() {
                return Err(Error::Config("sweep needs at least one config".into()));
            }
            let results = sweep(&configs, jobs);
            let mut first_err = None;
            for (path, outcome) in results {
                match outcome {
                    Ok(s) => println!("{}: ok, test accuracy {:.4}", path.display(), s.final_test_acc),
                    Err(e) => {
                        println!("{}: failed ({e})", path.display());
                        first_err.get_or_insert(e);
                    }
                }
            }
            match first_err {
                Some(e) => Err(e),
                None => Ok(()),
            }
        }
        Cmd::GapAudit { dim, steps, eta, seed, windows } => {
            let outcome = gap_audit_quadratic(dim, steps, eta, seed, windows);
            for w in &outcome.windows {
                println!(
                    "window [{}, {}]: slack {:+.3e}, averaged-bound slack {:+.3e}",
                    w.s, w.t, w.slack, w.pcc3_slack
                );
            }
            println!(
                "min slack {:+.3e}, min averaged-bound slack {:+.3e}",
                outcome.min_slack, outcome.min_pcc3
            );
            if outcome.min_slack < -1e-9 || outcome.min_pcc3 < -1e-9 {
                return Err(Error::Format("regret bound violated beyond tolerance".into()));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Divergence { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
