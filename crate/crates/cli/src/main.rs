use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cba_core::rsa::Policy;
use cba_sim::config::{parse_override, RunConfig};
use cba_sim::harness::{cmd_compare, cmd_run, digest_rows, HarnessError, Instrumentation};
use cba_sim::output::{write_csv, ResultRow, RowKind};
use cba_sim::validate;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cba-sim", version, about = "Pipeline-parallel training over an elastic optical network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON configuration with dotted keys; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set rsa.k=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory for CSV files and event logs.
    #[arg(long, default_value = "results")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// One policy over the configured micro-batch counts and seeds.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: Option<Policy>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Every policy, model, schedule, micro-batch count and seed of the grid.
    Compare {
        #[command(flatten)]
        common: Common,
    },
    /// Run the built-in oracle checks.
    Validate,
}

fn load(common: &Common) -> Result<RunConfig, HarnessError> {
    let overrides = common
        .set
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(match &common.config {
        Some(path) => RunConfig::from_file(path, &overrides)?,
        None => RunConfig::from_json("{}", &overrides)?,
    })
}

fn instrumentation(cfg: &RunConfig, out: &Path) -> Instrumentation {
    Instrumentation {
        digest: true,
        log_dir: cfg.event_logs.then(|| out.join("logs")),
        ..Instrumentation::default()
    }
}

fn write_file<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<(), HarnessError> {
    write_csv(BufWriter::new(File::create(path)?), rows)?;
    Ok(())
}

fn print_summaries<'a>(rows: impl Iterator<Item = &'a ResultRow>) {
    for r in rows.filter(|r| r.kind == RowKind::Summary) {
        println!(
            "{:<7} {:<16} {:<6} m={:<4} runtime {:.6} s  bubble {:.4}  blocking {:.4}",
            r.policy.as_str(),
            r.model,
            r.schedule.as_str(),
            r.microbatches,
            r.runtime_s,
            r.bubble_ratio,
            r.blocking_prob
        );
    }
}

fn run(cli: Cli) -> Result<ExitCode, HarnessError> {
    match cli.command {
        Command::Run { common, policy, seed } => {
            let mut cfg = load(&common)?;
            if let Some(p) = policy {
                cfg.policy = p;
            }
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            std::fs::create_dir_all(&common.out)?;
            let out = cmd_run(&cfg, &instrumentation(&cfg, &common.out))?;
            write_file(&common.out.join("run.csv"), &out.rows)?;
            write_file(&common.out.join("event_logs.csv"), &digest_rows(&out.runs))?;
            print_summaries(out.rows.iter());
        }
        Command::Compare { common } => {
            let cfg = load(&common)?;
            std::fs::create_dir_all(&common.out)?;
            let out = cmd_compare(&cfg, &instrumentation(&cfg, &common.out))?;
            write_file(&common.out.join("compare.csv"), &out.rows)?;
            write_file(&common.out.join("event_logs.csv"), &digest_rows(&out.runs))?;
            let results: Vec<ResultRow> = out.rows.iter().map(|r| r.result()).collect();
            print_summaries(results.iter());
        }
        Command::Validate => {
            let checks = validate::run_all();
            for c in &checks {
                println!("{c}");
            }
            if checks.iter().any(|c| !c.passed) {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
