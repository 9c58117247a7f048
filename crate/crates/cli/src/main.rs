//! `errcalc`: batch runner for the registered error-calculus experiments.
//!
//! Exit codes: 0 when every criterion passes, 1 on a criterion failure,
//! 2 on configuration errors.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use error_calculus::experiments::{run_experiment, RunOptions, EXPERIMENTS};
use error_calculus::law::LawSpec;
use error_calculus::report::ExperimentReport;
use error_calculus::schemes::SchemeSpec;

#[derive(Parser)]
#[command(name = "errcalc", version, about = "Error-calculus experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write CSV + JSON reports.
    Run(RunArgs),
    /// List the registered experiments.
    List {
        /// Emit the registry as JSON.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment id (see `errcalc list`).
    #[arg(long)]
    experiment: Option<String>,
    /// JSON config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed; all substreams derive from it and reports echo it.
    #[arg(long)]
    seed: Option<u64>,
    /// Monte Carlo sample budget (paths for path schemes).
    #[arg(long)]
    samples: Option<usize>,
    /// Level n, or a comma-separated list for multi-level experiments.
    #[arg(long, value_name = "INT_OR_LIST")]
    n: Option<String>,
    /// Law kind override (`normal` | `uniform`) for experiments that accept
    /// one; experiments whose reference values pin the law reject this.
    #[arg(long)]
    law: Option<String>,
    /// Worker threads for sample generation (results do not depend on it).
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory for reports.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the JSON summary to stdout instead of the human lines.
    #[arg(long)]
    json: bool,
}

/// JSON config file schema; every field optional, flags win.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    experiment: Option<String>,
    seed: Option<u64>,
    samples: Option<usize>,
    levels: Option<Vec<u32>>,
    workers: Option<usize>,
    out: Option<PathBuf>,
    #[serde(default)]
    tolerances: HashMap<String, f64>,
    scheme: Option<SchemeSpec>,
    battery: Option<Vec<String>>,
}

struct ResolvedConfig {
    experiment: String,
    options: RunOptions,
    workers: Option<usize>,
    out: PathBuf,
    json: bool,
}

fn parse_levels(text: &str) -> anyhow::Result<Vec<u32>> {
    let levels = text
        .split(',')
        .map(|part| part.trim().parse::<u32>())
        .collect::<Result<Vec<u32>, _>>()
        .with_context(|| format!("cannot parse level list `{text}`"))?;
    if levels.is_empty() {
        return Err(anyhow!("level list is empty"));
    }
    Ok(levels)
}

fn resolve(args: RunArgs) -> anyhow::Result<ResolvedConfig> {
    let file: FileConfig = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("cannot read config {}", path.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("invalid config {}", path.display()))?
        }
        None => FileConfig::default(),
    };

    let experiment = args.experiment.or(file.experiment).ok_or_else(|| {
        anyhow!("no experiment selected; pass --experiment or set it in the config")
    })?;
    if !EXPERIMENTS.iter().any(|e| e.id == experiment) {
        let ids: Vec<&str> = EXPERIMENTS.iter().map(|e| e.id).collect();
        return Err(anyhow!(
            "unknown experiment `{experiment}`; registered: {}",
            ids.join(", ")
        ));
    }

    let levels = match &args.n {
        Some(text) => Some(parse_levels(text)?),
        None => file.levels,
    };
    if let Some(levels) = &levels {
        if levels.is_empty() {
            return Err(anyhow!("levels must be nonempty"));
        }
    }
    let samples = args.samples.or(file.samples);
    if let Some(samples) = samples {
        if samples < 1000 {
            return Err(anyhow!(
                "sample budget must be at least 1000, got {samples}"
            ));
        }
    }
    let workers = args.workers.or(file.workers);
    if workers == Some(0) {
        return Err(anyhow!("workers must be at least 1"));
    }

    let law = args.law.map(|kind| LawSpec { kind, maps: None });

    Ok(ResolvedConfig {
        experiment,
        options: RunOptions {
            seed: args.seed.or(file.seed),
            samples,
            levels,
            tolerances: file.tolerances,
            scheme: file.scheme,
            law,
            battery: file.battery,
        },
        workers,
        out: args
            .out
            .or(file.out)
            .unwrap_or_else(|| PathBuf::from("reports")),
        json: args.json,
    })
}

fn write_reports(dir: &Path, report: &ExperimentReport) -> anyhow::Result<()> {
    fs::create_dir_all(dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))?;

    let results = dir.join(format!("{}_results.csv", report.experiment));
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(&results)
        .with_context(|| format!("cannot write {}", results.display()))?;
    writer.write_record([
        "scheme",
        "kind",
        "phi",
        "chi",
        "n",
        "N",
        "estimate",
        "stderr",
        "reference",
        "z_score",
    ])?;
    for row in &report.records {
        writer.serialize(row)?;
    }
    writer.flush()?;

    let diagnostics = dir.join(format!("{}_diagnostics.csv", report.experiment));
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(&diagnostics)
        .with_context(|| format!("cannot write {}", diagnostics.display()))?;
    writer.write_record(["test_name", "statistic", "threshold", "pass"])?;
    for row in &report.diagnostics {
        writer.serialize(row)?;
    }
    writer.flush()?;

    let summary = dir.join(format!("{}_summary.json", report.experiment));
    fs::write(&summary, report.summary_json())
        .with_context(|| format!("cannot write {}", summary.display()))?;
    Ok(())
}

fn run(args: RunArgs) -> anyhow::Result<ExitCode> {
    let config = resolve(args)?;
    let report = match config.workers {
        Some(workers) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .context("cannot build worker pool")?;
            pool.install(|| run_experiment(&config.experiment, &config.options))?
        }
        None => run_experiment(&config.experiment, &config.options)?,
    };

    write_reports(&config.out, &report)?;

    if config.json {
        println!("{}", report.summary_json());
    } else {
        println!("experiment: {} (seed {})", report.experiment, report.seed);
        for c in &report.criteria {
            println!(
                "  {:<28} statistic {:>14.6e}  threshold {:>14.6e}  {}",
                c.name,
                c.statistic,
                c.threshold,
                if c.pass { "PASS" } else { "FAIL" }
            );
        }
        println!(
            "reports written to {} ({:.2}s)",
            config.out.display(),
            report.wall_time_secs
        );
    }
    Ok(if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn list(json: bool) -> ExitCode {
    if json {
        let entries: Vec<serde_json::Value> = EXPERIMENTS
            .iter()
            .map(|e| serde_json::json!({"id": e.id, "summary": e.summary}))
            .collect();
        println!(
            "{}",
            serde_json::to_string_pretty(&entries).expect("registry serialization")
        );
    } else {
        let width = EXPERIMENTS.iter().map(|e| e.id.len()).max().unwrap_or(0);
        for e in EXPERIMENTS {
            println!("{:width$}  {}", e.id, e.summary);
        }
    }
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run(args) => match run(args) {
            Ok(code) => code,
            Err(err) => {
                eprintln!("error: {err:#}");
                ExitCode::from(2)
            }
        },
        Command::List { json } => list(json),
    }
}
