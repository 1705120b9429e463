use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedcd_core::harness::report::report;
use fedcd_core::harness::sweep::{format_table, run_file_name};
use fedcd_core::harness::{run_experiment_with, run_sweep, ExperimentConfig, Method, RunOptions};
use fedcd_core::Error;

#[derive(Parser)]
#[command(name = "fedcd", version, about = "Federated domain generalisation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment; JSONL records go to stdout.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Also write the JSONL into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        pool: PoolArgs,
    },
    /// Run every (method, seed) pair and print the comparison table.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        /// Comma-separated methods.
        #[arg(long, value_delimiter = ',', default_value = "fedavg,fedcd_sci,fedcd_sci_rea")]
        methods: Vec<Method>,
        #[command(flatten)]
        pool: PoolArgs,
    },
    /// Summarise the runs in a directory (CSV series plus a text report).
    Report {
        #[arg(long)]
        out: PathBuf,
        /// Combine runs whose configs differ beyond seed and method.
        #[arg(long)]
        allow_mixed: bool,
    },
    /// Check a config without running anything.
    Validate {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config; the built-in benchmark when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// KEY=VALUE override with a dotted key, e.g. model.hidden_dims=[16,16]. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct PoolArgs {
    /// Client training threads. Outputs do not depend on it.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

/// Failure with the exit status it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_usage() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Error::from(e).into()
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn load_raw(args: &ConfigArgs) -> Result<ExperimentConfig, Failure> {
    let base = match &args.config {
        Some(path) => {
            ExperimentConfig::load(path).map_err(|e| usage(format!("cannot load config {}: {e}", path.display())))?
        }
        None => ExperimentConfig::benchmark(),
    };
    base.with_overrides(&args.overrides).map_err(|e| usage(e.to_string()))
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig, Failure> {
    let config = load_raw(args)?;
    let violations = config.violations();
    if violations.is_empty() {
        Ok(config)
    } else {
        Err(usage(format!("invalid config:\n  {}", violations.join("\n  "))))
    }
}

fn pool(args: &PoolArgs) -> Result<RunOptions, Failure> {
    if args.workers == 0 {
        return Err(usage("--workers must be at least 1"));
    }
    Ok(RunOptions { workers: args.workers })
}

fn run(config: &ConfigArgs, out: Option<&Path>, pool_args: &PoolArgs) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let options = pool(pool_args)?;
    let mut buf = Vec::new();
    let result = run_experiment_with(&cfg, options, Some(&mut buf))?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(run_file_name(cfg.method, cfg.seed)), &buf)?;
    }
    let mut stdout = io::stdout().lock();
    stdout.write_all(&buf)?;
    stdout.flush()?;
    eprintln!(
        "{} seed {} digest {}: final accuracy {:.4}, worst-domain {:.4}",
        cfg.method, cfg.seed, result.config_digest, result.final_test_accuracy, result.worst_domain_accuracy
    );
    Ok(())
}

fn sweep(
    config: &ConfigArgs,
    out: &Path,
    seeds: &[u64],
    methods: &[Method],
    pool_args: &PoolArgs,
) -> Result<(), Failure> {
    if seeds.is_empty() || methods.is_empty() {
        return Err(usage("a sweep needs at least one seed and one method"));
    }
    let cfg = load_config(config)?;
    let options = pool(pool_args)?;
    let outcome = run_sweep(&cfg, seeds, methods, out, options)?;
    let mut stdout = BufWriter::new(io::stdout().lock());
    write!(stdout, "{}", format_table(&outcome.summaries, &outcome.comparisons))?;
    stdout.flush()?;
    Ok(())
}

fn report_cmd(out: &Path, allow_mixed: bool) -> Result<(), Failure> {
    if !out.is_dir() {
        return Err(usage(format!("{} is not a directory", out.display())));
    }
    let rep = report(out, allow_mixed)?;
    print!("{}", rep.text);
    Ok(())
}

fn validate(config: &ConfigArgs) -> Result<(), Failure> {
    let cfg = load_raw(config)?;
    let violations = cfg.violations();
    if violations.is_empty() {
        println!("ok: {}", cfg.digest());
        Ok(())
    } else {
        for v in &violations {
            println!("{v}");
        }
        Err(usage(format!("{} violation(s)", violations.len())))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run { config, out, pool } => run(config, out.as_deref(), pool),
        Command::Sweep {
            config,
            out,
            seeds,
            methods,
            pool,
        } => sweep(config, out, seeds, methods, pool),
        Command::Report { out, allow_mixed } => report_cmd(out, *allow_mixed),
        Command::Validate { config } => validate(config),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
