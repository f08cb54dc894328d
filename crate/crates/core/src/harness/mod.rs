//! Experiment orchestration: runs every (method, task, seed), persists the
//! curves as CSV, and aggregates them with bootstrap intervals.

pub mod config;
pub mod pgm;
pub mod records;
pub mod stats;
pub mod verify;

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::acquisition::{info_gain_map, normalize01};
use crate::bandit::{run_training, RunResult};
use crate::error::Result;
use crate::model::{save_checkpoint, EnsembleModel};
use crate::policy::StrategyRegistry;
use crate::scene::{SceneObservation, TaskKind};

pub use config::{ExperimentConfig, Mode};
pub use pgm::{dump_pgm, read_pgm};
pub use records::{read_csv, sort_records, write_csv, RunRecord, CSV_HEADER};
pub use stats::{bootstrap_ci, BootstrapResult, Statistic};

pub const RESULTS_FILE: &str = "results.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Creates `dir` if needed and proves a file can be written inside it.
pub fn ensure_writable(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let probe = dir.join(".write-probe");
    fs::write(&probe, b"")?;
    fs::remove_file(&probe)?;
    Ok(())
}

pub fn checkpoint_path(out: &Path, method: &str, task: TaskKind, seed: u64) -> PathBuf {
    out.join(CHECKPOINT_DIR).join(format!("{method}-{task}-seed{seed}.ckpt"))
}

/// Curve of one run as CSV records.
pub fn run_records(method: &str, task: TaskKind, seed: u64, result: &RunResult) -> Vec<RunRecord> {
    result
        .curve
        .iter()
        .map(|p| RunRecord {
            method: method.to_string(),
            task: task.name().to_string(),
            seed,
            checkpoint: p.checkpoint,
            success_rate: p.success_rate,
            wall_time_seconds: p.wall_time_seconds,
        })
        .collect()
}

pub struct ExperimentOutput {
    pub records: Vec<RunRecord>,
    pub csv_path: PathBuf,
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    run_experiment_with(config, |_| {})
}

/// Runs sequentially, calling `progress` with each finished run's records,
/// then writes the sorted CSV and one checkpoint per run under `config.out`.
pub fn run_experiment_with(config: &ExperimentConfig, mut progress: impl FnMut(&[RunRecord])) -> Result<ExperimentOutput> {
    config.validate()?;
    ensure_writable(&config.out)?;
    ensure_writable(&config.out.join(CHECKPOINT_DIR))?;
    let registry = StrategyRegistry::default();
    let mut records = Vec::new();
    for method in &config.methods {
        let strategy = registry.get(method)?;
        for &task in &config.tasks {
            let training = config.training_config(task)?;
            for &seed in &config.seeds {
                let result = run_training(strategy, task, &training, seed)?;
                let rows = run_records(method, task, seed, &result);
                progress(&rows);
                save_checkpoint(&result.model, &checkpoint_path(&config.out, method, task, seed))?;
                records.extend(rows);
            }
        }
    }
    sort_records(&mut records);
    let csv_path = config.out.join(RESULTS_FILE);
    write_csv(BufWriter::new(File::create(&csv_path)?), &records)?;
    Ok(ExperimentOutput { records, csv_path })
}

/// Success rates of `method` at `checkpoint`, one per (task, seed) run so
/// every run carries equal weight regardless of task.
pub fn checkpoint_values(records: &[RunRecord], method: &str, checkpoint: usize) -> Vec<f64> {
    records
        .iter()
        .filter(|r| r.method == method && r.checkpoint == checkpoint)
        .map(|r| r.success_rate)
        .collect()
}

/// Each run's last checkpoint for `method`.
pub fn final_values(records: &[RunRecord], method: &str) -> Vec<f64> {
    let mut last: Vec<&RunRecord> = Vec::new();
    for r in records.iter().filter(|r| r.method == method) {
        match last.iter_mut().find(|l| l.task == r.task && l.seed == r.seed) {
            Some(l) if l.checkpoint < r.checkpoint => *l = r,
            Some(_) => {}
            None => last.push(r),
        }
    }
    last.iter().map(|r| r.success_rate).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub method: String,
    pub checkpoint: usize,
    pub runs: usize,
    pub mean: BootstrapResult,
    pub median: BootstrapResult,
}

/// Mean and median with bootstrap intervals for every (method, checkpoint)
/// present in `records`, in method order of first appearance. The bootstrap
/// stream is seeded so summaries are reproducible from the CSV alone.
pub fn summarize(records: &[RunRecord], repetitions: usize, seed: u64) -> Result<Vec<Summary>> {
    let mut keys: Vec<(String, usize)> = Vec::new();
    for r in records {
        if !keys.iter().any(|(m, c)| *m == r.method && *c == r.checkpoint) {
            keys.push((r.method.clone(), r.checkpoint));
        }
    }
    keys.sort_by(|a, b| {
        let pos = |m: &str| records.iter().position(|r| r.method == m);
        pos(&a.0).cmp(&pos(&b.0)).then(a.1.cmp(&b.1))
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    keys.into_iter()
        .map(|(method, checkpoint)| {
            let values = checkpoint_values(records, &method, checkpoint);
            Ok(Summary {
                runs: values.len(),
                mean: bootstrap_ci(&values, Statistic::Mean, repetitions, &mut rng)?,
                median: bootstrap_ci(&values, Statistic::Median, repetitions, &mut rng)?,
                method,
                checkpoint,
            })
        })
        .collect()
}

/// Writes the scene, each orientation's mean success map and each
/// orientation's normalized information map as PGM files in `dir`.
pub fn dump_maps(model: &EnsembleModel, obs: &SceneObservation, dir: &Path) -> Result<Vec<PathBuf>> {
    ensure_writable(dir)?;
    let (h, w) = (obs.height, obs.width);
    let maps = model.affordance_maps(obs)?;
    let plane = h * w;
    let mut written = Vec::new();

    let peak = obs.heightmap.iter().cloned().fold(0.0, f64::max);
    let scene: Vec<f64> = obs.heightmap.iter().map(|&v| if peak > 0.0 { v / peak } else { 0.0 }).collect();
    let path = dir.join("scene.pgm");
    dump_pgm(&scene, h, w, &path)?;
    written.push(path);

    let info = if maps.members.len() >= 2 {
        normalize01(&info_gain_map(&maps.members)?, &obs.valid_mask)?
    } else {
        vec![0.0; maps.mean.len()]
    };
    for q in 0..maps.orientation_count {
        let range = q * plane..(q + 1) * plane;
        let mean: Vec<f64> = maps.mean[range.clone()].iter().map(|v| v.clamp(0.0, 1.0)).collect();
        for (name, values) in [("affordance", &mean[..]), ("info", &info[range])] {
            let path = dir.join(format!("{name}-q{q}.pgm"));
            dump_pgm(values, h, w, &path)?;
            written.push(path);
        }
    }
    Ok(written)
}
