//! `scaleforge` command-line entry points.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use commands::{Failure, GenerateArgs, PrepareArgs, RewardArgs, EXIT_CHECK, EXIT_EMPTY, EXIT_INPUT};
use config::Config;
use scaleforge::eval::Weighting;
use scaleforge::formats;
use scaleforge::fusion::CheckConfig;
use scaleforge::qagen::QaConfig;

#[derive(Debug, Parser)]
#[command(name = "scaleforge", version, about = "All-scale spatial QA construction, rewards and evaluation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Flat key=value file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Scenes processed in parallel.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Temporally smooth depth and write prepared/ with scene statistics.
    Prepare {
        #[arg(required = true)]
        scenes: Vec<PathBuf>,
        #[arg(long)]
        lambda: Option<f64>,
        /// Rescale so the median depth equals this many meters.
        #[arg(long)]
        scale_hint: Option<f64>,
    },
    /// Generate qa.jsonl (and skipped.jsonl) for prepared scenes.
    Generate {
        #[arg(required = true)]
        scenes: Vec<PathBuf>,
        /// Comma-separated task names, or "all".
        #[arg(long)]
        tasks: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated answer modes: mc, regression, free.
        #[arg(long)]
        modes: Option<String>,
        /// Replace object names by a point, bbox or mask.
        #[arg(long)]
        referring: Option<String>,
        #[arg(long)]
        per_task: Option<usize>,
        #[arg(long)]
        max_records: Option<usize>,
        /// Also write all scenes' records to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score anchored responses and compute group-relative advantages.
    Reward {
        qa: PathBuf,
        predictions: PathBuf,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Score predictions into report.json.
    Score {
        qa: PathBuf,
        predictions: PathBuf,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
        /// Overall as the mean of all items instead of bucket means.
        #[arg(long)]
        item_weighted: bool,
    },
    /// Run the expert and fusion kernel equivalence and gradient checks.
    DemoFusion {
        #[arg(long)]
        dims: Option<usize>,
        #[arg(long)]
        experts: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Corrupt one analytic gradient; the run must then fail.
        #[arg(long)]
        inject_fault: bool,
    },
    /// Write a synthetic scene directory (indoor_room or tabletop).
    Synth { kind: String, out: PathBuf },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = Config::load(cli.global.config.as_deref()).map_err(|e| commands::fail(EXIT_INPUT, "config", format!("{e:#}")))?;
    let jobs = cfg.pick(cli.global.jobs, "jobs")?.unwrap_or(1);
    match cli.command {
        Command::Prepare { scenes, lambda, scale_hint } => {
            let args = PrepareArgs {
                lambda: cfg.pick(lambda, "lambda")?.unwrap_or(PrepareArgs::default().lambda),
                scale_hint: cfg.pick(scale_hint, "scale_hint")?,
            };
            let stats = commands::par_map(jobs, &scenes, |d| commands::prepare(d, &args))?;
            for (dir, s) in scenes.iter().zip(stats) {
                println!("{}: p95 depth {} m, bucket {}", dir.display(), s["p95_depth"], s["scale_bucket"]);
            }
        }
        Command::Generate { scenes, tasks, seed, modes, referring, per_task, max_records, out } => {
            let d = QaConfig::default();
            let mut qa = QaConfig {
                seed: cfg.seed(seed)?,
                per_task: cfg.pick(per_task, "per_task")?.unwrap_or(d.per_task),
                max_records: cfg.pick(max_records, "max_records")?.unwrap_or(d.max_records),
                ..d
            };
            if let Some(t) = cfg.pick(tasks, "tasks")? {
                qa.tasks = commands::parse_tasks(&t)?;
            }
            if let Some(m) = cfg.pick(modes, "modes")? {
                qa.modes = commands::parse_modes(&m)?;
            }
            if let Some(r) = cfg.pick(referring, "referring")? {
                qa.referring = commands::parse_referring(&r)?;
            }
            let args = GenerateArgs { qa };
            let results = commands::par_map(jobs, &scenes, |d| commands::generate(d, &args))?;
            let mut all = Vec::new();
            for g in results {
                println!("{}: {} records, {} tasks skipped", g.scene_id, g.records.len(), g.skipped.len());
                for s in &g.skipped {
                    log::info!("{} skipped {}: {}", g.scene_id, s.task, s.reason);
                }
                all.extend(g.records);
            }
            if let Some(path) = out {
                formats::write_jsonl(&path, &all)?;
            }
            if all.is_empty() {
                return Err(commands::fail(EXIT_EMPTY, "empty", "no QA records were produced"));
            }
        }
        Command::Reward { qa, predictions, epsilon, beta, out_dir } => {
            let d = RewardArgs::default();
            let args = RewardArgs {
                epsilon: cfg.pick(epsilon, "epsilon")?.unwrap_or(d.epsilon),
                beta: cfg.pick(beta, "beta")?.unwrap_or(d.beta),
            };
            let (rows, groups) = commands::reward(&qa, &predictions, &out_dir, &args)?;
            println!("{} reward rows, {} groups", rows.len(), groups.len());
        }
        Command::Score { qa, predictions, out, item_weighted } => {
            let weighting = if item_weighted || cfg.raw("weighting") == Some("item") { Weighting::Item } else { Weighting::Bucket };
            let report = commands::score(&qa, &predictions, &out, weighting)?;
            println!("{} items, overall {:.6}", report.items, report.overall.0);
        }
        Command::DemoFusion { dims, experts, seed, inject_fault } => {
            let d = CheckConfig::default();
            let check = CheckConfig {
                dim: cfg.pick(dims, "dims")?.unwrap_or(d.dim),
                experts: cfg.pick(experts, "experts")?.unwrap_or(d.experts),
                seed: cfg.seed(seed)?,
                inject_fault: inject_fault || cfg.get::<bool>("inject_fault")?.unwrap_or(false),
                ..d
            };
            let outcomes = commands::demo_fusion(&check)?;
            for o in &outcomes {
                println!("{:<5} {:<36} error {:.3e} (tolerance {:.0e})", if o.passed() { "ok" } else { "FAIL" }, o.name, o.error, o.tolerance);
            }
            let failed = outcomes.iter().filter(|o| !o.passed()).count();
            if failed > 0 {
                return Err(commands::fail(EXIT_CHECK, "check", format!("{failed} of {} checks failed", outcomes.len())));
            }
        }
        Command::Synth { kind, out } => {
            let dir = commands::synth(&kind, &out).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = match e.downcast_ref::<Failure>() {
                Some(f) => (f.code, f.kind),
                None => (EXIT_INPUT, "error"),
            };
            let body = json!({ "error": kind, "exit_code": code, "message": format!("{e:#}") });
            eprintln!("{}", formats::to_sorted_json(&body));
            ExitCode::from(code)
        }
    }
}
