use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use xva_core::oracle::OracleConfig;
use xva_core::pipeline::{oracle_check, run, whatif, RunConfig};
use xva_core::state::Adjustment;
use xva_core::Error;

#[derive(Parser)]
#[command(name = "xva", version, about = "Trade-level regression xVA engine")]
struct Cli {
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute a portfolio and write its reports.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        save_state: Option<PathBuf>,
        /// Overrides the output directory of the config.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Add trades to a saved portfolio without revaluing it.
    Whatif {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        delta: PathBuf,
        /// Comma-separated list, e.g. cva,fva,mva. All computed measures when omitted.
        #[arg(long, value_delimiter = ',')]
        measures: Vec<String>,
        #[arg(long, default_value = "whatif")]
        output: PathBuf,
        #[arg(long)]
        save_state: Option<PathBuf>,
    },
    /// Compare a run against brute-force references.
    OracleCheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        oracle_dump: Option<PathBuf>,
        /// Bump size of the finite-difference references.
        #[arg(long)]
        h: Option<f64>,
        /// Refit the regressions on every bumped cube.
        #[arg(long)]
        refit: bool,
        /// Price refit targets with the bumped model.
        #[arg(long)]
        reprice: bool,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_)
        | Error::Parse { .. }
        | Error::Input(_)
        | Error::Lookup { .. }
        | Error::Unsupported(_)
        | Error::NonFiniteTarget { .. } => 2,
        Error::Numerical(_) | Error::Audit(_) | Error::Nondeterministic { .. } => 3,
        Error::StateMismatch(_) => 4,
        Error::Io(_) => 1,
    }
}

fn print_totals(totals: &std::collections::BTreeMap<String, f64>) {
    for (name, value) in totals {
        println!("{name:<24} {value:>24.12e}");
    }
}

fn execute(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Run {
            config,
            seed,
            save_state,
            output,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if seed.is_some() {
                cfg.seed = seed;
            }
            if save_state.is_some() {
                cfg.state = save_state;
            }
            if let Some(o) = output {
                cfg.output = o;
            }
            let outcome = run(&cfg)?;
            print_totals(&outcome.book.totals());
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Whatif {
            state,
            delta,
            measures,
            output,
            save_state,
        } => {
            let measures = measures
                .iter()
                .filter(|m| !m.trim().is_empty())
                .map(|m| Adjustment::parse(m))
                .collect::<Result<Vec<_>, _>>()?;
            let outcome = whatif(&state, &delta, &measures, &output, save_state.as_deref())?;
            let r = &outcome.report;
            for (name, after) in &r.after {
                let before = r.before.get(name).copied().unwrap_or(0.0);
                println!("{name:<24} {before:>24.12e} -> {after:>24.12e}");
            }
            println!(
                "flips {} (predicted {}), original-trade evaluations {}",
                r.flips.len(),
                r.predicted_flips,
                r.work.existing_trades.trade_evaluations()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::OracleCheck {
            config,
            oracle_dump,
            h,
            refit,
            reprice,
        } => {
            let cfg = RunConfig::load(&config)?;
            let mut oracle = OracleConfig::default();
            if let Some(h) = h {
                oracle.h = h;
            }
            oracle.refit = refit;
            oracle.reprice_targets = reprice;
            let report = oracle_check(&cfg, &oracle)?;
            for c in &report.checks {
                println!(
                    "{} {:<32} computed {:>22.14e} reference {:>22.14e} tolerance {:.3e}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.computed,
                    c.reference,
                    c.tolerance
                );
            }
            if let Some(path) = oracle_dump {
                let text = serde_json::to_string_pretty(&report).expect("report");
                std::fs::write(Path::new(&path), text + "\n")?;
            }
            Ok(if report.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(3)
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
