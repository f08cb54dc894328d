use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ida_core::harness::verify::{grad_check, oracle_check, GRAD_TOLERANCE, ORACLE_TOLERANCE};
use ida_core::harness::{
    checkpoint_path, dump_maps, run_experiment_with, summarize, ExperimentConfig, ExperimentOutput, RunRecord,
};
use ida_core::model::{load_checkpoint, EnsembleModel};
use ida_core::policy::StrategyRegistry;
use ida_core::scene::generate_scene;

#[derive(Parser)]
#[command(name = "ida", version, about = "Information-driven affordance discovery on synthetic tabletop tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every (method, task, seed) and write results.csv.
    Run(ExperimentArgs),
    /// Like `run`, comparing all methods by default, then print bootstrap summaries.
    Bench(ExperimentArgs),
    /// Write scene, affordance and information maps for one scene as PGM.
    DumpMaps(DumpArgs),
    /// Compare the divergence map with explicit Bayes updates.
    OracleCheck(OracleArgs),
    /// Finite-difference check of the full model gradient.
    GradCheck(GradArgs),
}

#[derive(Args, Clone)]
struct ExperimentArgs {
    /// Comma-separated task names.
    #[arg(long)]
    task: Option<String>,
    /// ida|jsd|greedy|random|where2act|random-ens|ida-no-ens, comma-separated.
    #[arg(long)]
    method: Option<String>,
    /// Seed list such as `0,1,2` or `0..5`.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    budget: Option<usize>,
    /// Flat `key = value` file; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// desk or paper defaults.
    #[arg(long)]
    mode: Option<String>,
    /// Any other config key, e.g. `--set grid=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ExperimentArgs {
    fn load(&self, all_methods_by_default: bool) -> Result<ExperimentConfig, String> {
        let mut pairs = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                pairs.push((k.to_string(), v));
            }
        };
        push("mode", self.mode.clone());
        push("tasks", self.task.clone());
        push("methods", self.method.clone());
        push("seeds", self.seeds.clone());
        push("budget", self.budget.map(|b| b.to_string()));
        push("out", self.out.as_ref().map(|p| p.display().to_string()));
        for s in &self.sets {
            let (k, v) = s.split_once('=').ok_or_else(|| format!("--set expects KEY=VALUE, got `{s}`"))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        if all_methods_by_default && self.method.is_none() && !self.sets.iter().any(|s| s.starts_with("method")) {
            let file_has_methods = match &self.config {
                Some(path) => std::fs::read_to_string(path)
                    .map_err(|e| format!("{}: {e}", path.display()))?
                    .lines()
                    .any(|l| l.trim_start().starts_with("method")),
                None => false,
            };
            if !file_has_methods {
                let all = StrategyRegistry::default().names().join(",");
                pairs.insert(0, ("methods".to_string(), all));
            }
        }
        ExperimentConfig::load(self.config.as_deref(), &pairs).map_err(|e| e.to_string())
    }
}

#[derive(Args)]
struct DumpArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Model checkpoint; defaults to the one `run` saved for the first
    /// method, task and seed, or a freshly initialised model if absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    count: usize,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    instances: usize,
    /// Parameter coordinates checked per instance.
    #[arg(long, default_value_t = 20)]
    coords: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => experiment(&args, false),
        Command::Bench(args) => experiment(&args, true),
        Command::DumpMaps(args) => dump(&args),
        Command::OracleCheck(args) => oracle(&args),
        Command::GradCheck(args) => grad(&args),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn experiment(args: &ExperimentArgs, bench: bool) -> Result<bool, String> {
    let config = args.load(bench)?;
    let ExperimentOutput { records, csv_path } = run_experiment_with(&config, |rows: &[RunRecord]| {
        if let Some(last) = rows.last() {
            eprintln!(
                "{} {} seed {}: {} after {} interactions ({:.1}s)",
                last.method, last.task, last.seed, last.success_rate, last.checkpoint, last.wall_time_seconds
            );
        }
    })
    .map_err(|e| e.to_string())?;
    if bench {
        println!("method checkpoint runs mean [95% CI] median [95% CI]");
        for s in summarize(&records, config.bootstrap_reps, 0).map_err(|e| e.to_string())? {
            println!(
                "{} {} {} {:.3} [{:.3}, {:.3}] {:.3} [{:.3}, {:.3}]",
                s.method,
                s.checkpoint,
                s.runs,
                s.mean.point,
                s.mean.low,
                s.mean.high,
                s.median.point,
                s.median.low,
                s.median.high
            );
        }
    }
    println!("wrote {}", csv_path.display());
    Ok(true)
}

fn dump(args: &DumpArgs) -> Result<bool, String> {
    let config = args.experiment.load(false)?;
    let (method, task, seed) = (&config.methods[0], config.tasks[0], config.seeds[0]);
    let model = match &args.checkpoint {
        Some(path) => load(path)?,
        None => {
            let saved = checkpoint_path(&config.out, method, task, seed);
            if saved.exists() {
                load(&saved)?
            } else {
                eprintln!("no checkpoint at {}, using an untrained model", saved.display());
                let model_config = config.training_config(task).map_err(|e| e.to_string())?.model;
                EnsembleModel::new(model_config, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(|e| e.to_string())?
            }
        }
    };
    let scene_config = config.training_config(task).map_err(|e| e.to_string())?.scene;
    let scene = generate_scene(task, &scene_config, &mut ChaCha8Rng::seed_from_u64(seed));
    let dir = config.out.join("maps").join(format!("{method}-{task}-seed{seed}"));
    let files = dump_maps(&model, &scene.render(), &dir).map_err(|e| e.to_string())?;
    println!("wrote {} maps to {}", files.len(), dir.display());
    Ok(true)
}

fn load(path: &Path) -> Result<EnsembleModel, String> {
    load_checkpoint(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn oracle(args: &OracleArgs) -> Result<bool, String> {
    let report = oracle_check(args.seed, args.count).map_err(|e| e.to_string())?;
    println!(
        "oracle-check: {} instances, max |jsd - expected kl| = {:.3e} (tolerance {ORACLE_TOLERANCE:e})",
        report.instances, report.max_error
    );
    if !report.passed() {
        println!("worst instance: {:?}", report.worst);
    }
    Ok(report.passed())
}

fn grad(args: &GradArgs) -> Result<bool, String> {
    let report = grad_check(args.seed, args.instances, args.coords).map_err(|e| e.to_string())?;
    println!(
        "grad-check: {} coordinates checked, {} skipped at relu kinks, max relative error = {:.3e} (tolerance {GRAD_TOLERANCE:e})",
        report.checked, report.skipped, report.max_rel_error
    );
    if !report.passed() {
        println!("worst coordinate: {:?}", report.worst);
    }
    Ok(report.passed())
}
