use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sbdg::autodiff::Fault;
use sbdg::experiment::{self, ExperimentConfig, ExperimentError};
use sbdg::gradcheck::run_gradchecks;
use sbdg::trainer::Arm;

const USAGE: u8 = 1;
const NUMERIC: u8 = 2;

/// Self-balanced domain generalization experiments.
///
/// Exit status: 0 on success, 1 on usage or configuration errors, 2 when a
/// run diverges or a gradient check fails.
#[derive(Parser)]
#[command(name = "sbdg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic multi-domain dataset into a CSV plus manifest JSON.
    Generate {
        /// Generator spec (TOML, or JSON with a .json extension).
        #[arg(long)]
        spec: PathBuf,
        /// Output CSV; the manifest goes next to it as <name>.manifest.json.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run every arm × seed (× target) of an experiment config.
    ///
    /// Flags override the matching config values.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides run.out).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seeds (overrides run.seeds).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Comma-separated arms: sbdg, erm, sbdg-no-domain-vector.
        #[arg(long, value_delimiter = ',', value_parser = parse_arm)]
        arms: Option<Vec<Arm>>,
        /// Parallel runs (overrides run.jobs).
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Aggregate completed runs into a seed-mean table and JSON.
    Report {
        #[arg(long)]
        runs: PathBuf,
        /// Text table; the JSON goes next to it with a .json extension.
        #[arg(long)]
        out: PathBuf,
    },
    /// Check every backward rule and the meta-gradient against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: Option<FaultArg>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    Sigmoid,
}

fn parse_arm(s: &str) -> Result<Arm, String> {
    Arm::parse(s).ok_or_else(|| format!("unknown arm `{s}` (expected sbdg, erm or sbdg-no-domain-vector)"))
}

fn fail(e: &ExperimentError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(if e.is_numeric() { NUMERIC } else { USAGE })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match cli.command {
        Command::Generate { spec, out, seed } => {
            let result = experiment::load_generator_spec(&spec)
                .and_then(|spec| experiment::generate_dataset(&spec, seed, &out));
            match result {
                Ok(m) => {
                    println!(
                        "wrote {} and {} ({} domains, {} classes, sigma2_class {:.4}, sigma2_domain {:.4})",
                        out.display(),
                        experiment::manifest_path(&out).display(),
                        m.num_domains,
                        m.num_classes,
                        m.sigma2_class,
                        m.sigma2_domain
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
        Command::Train { config, out, seeds, arms, jobs, iterations, alpha, beta } => {
            let mut cfg = match ExperimentConfig::load(&config) {
                Ok(c) => c,
                Err(e) => return fail(&e),
            };
            if let Some(v) = out {
                cfg.run.out = v;
            }
            if let Some(v) = seeds {
                cfg.run.seeds = v;
            }
            if let Some(v) = arms {
                cfg.run.arms = v;
            }
            if let Some(v) = jobs {
                cfg.run.jobs = v;
            }
            if let Some(v) = iterations {
                cfg.train.iterations = v;
            }
            if let Some(v) = alpha {
                cfg.train.alpha = v;
            }
            if let Some(v) = beta {
                cfg.train.beta = v;
            }
            let outcome = match experiment::execute(&cfg) {
                Ok(o) => o,
                Err(e) => return fail(&e),
            };
            for r in &outcome.runs {
                match (&r.metrics, &r.error) {
                    (Some(m), _) => println!(
                        "target {} {:<22} seed {:<4} accuracy {:.4}",
                        r.spec.target,
                        r.spec.arm.name(),
                        r.spec.seed,
                        m.overall_accuracy
                    ),
                    (None, Some(err)) => eprintln!(
                        "FAILED target {} {} seed {}: {err}",
                        r.spec.target,
                        r.spec.arm.name(),
                        r.spec.seed
                    ),
                    (None, None) => {}
                }
            }
            match outcome.failed().count() {
                0 => ExitCode::SUCCESS,
                n => {
                    eprintln!("{n} of {} runs failed", outcome.runs.len());
                    ExitCode::from(if outcome.any_numeric_failure() { NUMERIC } else { USAGE })
                }
            }
        }
        Command::Report { runs, out } => match experiment::write_report(&runs, &out) {
            Ok(table) => {
                print!("{table}");
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e),
        },
        Command::Gradcheck { seed, inject_fault } => {
            let fault = inject_fault.map(|FaultArg::Sigmoid| Fault::SigmoidGradient);
            match run_gradchecks(seed, fault) {
                Ok(report) => {
                    for r in &report.results {
                        println!("{r}");
                    }
                    if report.passed() {
                        ExitCode::SUCCESS
                    } else {
                        eprintln!("{} gradient checks failed", report.failures().count());
                        ExitCode::from(NUMERIC)
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(NUMERIC)
                }
            }
        }
    }
}
