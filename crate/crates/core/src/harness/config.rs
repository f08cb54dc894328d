//! Experiment configuration: defaults per mode, overridden by a flat
//! `key = value` file, overridden in turn by command-line values.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::acquisition::AcquisitionConfig;
use crate::bandit::{EvalProtocol, EvalSchedule, TrainingConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::policy::StrategyRegistry;
use crate::scene::{SceneConfig, TaskKind};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Mode {
    #[default]
    Desk,
    Paper,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Mode::Desk),
            "paper" => Ok(Mode::Paper),
            _ => Err(Error::UnknownName {
                kind: "mode",
                name: s.to_string(),
            }),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Desk => "desk",
            Mode::Paper => "paper",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub tasks: Vec<TaskKind>,
    pub methods: Vec<String>,
    pub seeds: Vec<u64>,
    pub budget: usize,
    /// Explicit checkpoints; `None` scales the mode's schedule to the budget.
    pub schedule: Option<Vec<usize>>,
    pub grid_size: usize,
    pub ensemble_size: usize,
    pub c_expl: f64,
    pub c_eval: f64,
    pub noise: f64,
    pub batch_size: usize,
    pub update_steps: usize,
    pub warmup: usize,
    /// Episodes for single-distribution tasks.
    pub eval_episodes: usize,
    /// Episodes per shape or cabinet variant.
    pub eval_per_variant: usize,
    pub bootstrap_reps: usize,
    pub out: PathBuf,
}

impl ExperimentConfig {
    pub fn defaults(mode: Mode) -> Self {
        let desk = mode == Mode::Desk;
        let acq = AcquisitionConfig::default();
        Self {
            mode,
            tasks: vec![TaskKind::GraspCube],
            methods: vec!["ida".into()],
            seeds: (0..5).collect(),
            budget: if desk { 2000 } else { 10_000 },
            schedule: None,
            grid_size: if desk { 64 } else { 128 },
            ensemble_size: 5,
            c_expl: acq.c_expl,
            c_eval: acq.c_eval,
            noise: 0.05,
            batch_size: if desk { 64 } else { 256 },
            update_steps: 5,
            warmup: 10,
            eval_episodes: 100,
            eval_per_variant: 5,
            bootstrap_reps: if desk { 10_000 } else { 50_000 },
            out: PathBuf::from("results"),
        }
    }

    /// Builds a config from `(key, value)` pairs applied in order over the
    /// defaults of the last `mode` given (desk if none).
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mode = match pairs.iter().rev().find(|(k, _)| k == "mode") {
            Some((_, v)) => v.parse()?,
            None => Mode::Desk,
        };
        let mut config = Self::defaults(mode);
        for (key, value) in pairs {
            config.set(key, value)?;
        }
        config.validate()?;
        Ok(config)
    }

    /// File pairs first, then command-line pairs, so the latter win.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = match file {
            Some(path) => parse_pairs(&fs::read_to_string(path)?)?,
            None => Vec::new(),
        };
        pairs.extend_from_slice(overrides);
        Self::from_pairs(&pairs)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "mode" => self.mode = value.parse()?,
            "task" | "tasks" => self.tasks = list(value, |s| s.parse())?,
            "method" | "methods" => self.methods = list(value, |s| Ok(s.to_string()))?,
            "seeds" => self.seeds = parse_seeds(value)?,
            "budget" => self.budget = number(key, value)?,
            "schedule" => self.schedule = Some(list(value, |s| number("schedule", s))?),
            "grid" | "grid_size" => self.grid_size = number(key, value)?,
            "ensemble" | "ensemble_size" => self.ensemble_size = number(key, value)?,
            "c_expl" => self.c_expl = number(key, value)?,
            "c_eval" => self.c_eval = number(key, value)?,
            "noise" | "eta" => self.noise = number(key, value)?,
            "batch" | "batch_size" => self.batch_size = number(key, value)?,
            "update_steps" => self.update_steps = number(key, value)?,
            "warmup" => self.warmup = number(key, value)?,
            "eval_episodes" => self.eval_episodes = number(key, value)?,
            "eval_per_variant" => self.eval_per_variant = number(key, value)?,
            "bootstrap_reps" => self.bootstrap_reps = number(key, value)?,
            "out" => self.out = PathBuf::from(value),
            _ => {
                return Err(Error::UnknownName {
                    kind: "config key",
                    name: key.to_string(),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let registry = StrategyRegistry::default();
        if self.methods.is_empty() || self.tasks.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("methods, tasks and seeds must be non-empty".into()));
        }
        for m in &self.methods {
            registry.get(m)?;
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        if seeds.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("seeds must be distinct: {:?}", self.seeds)));
        }
        if self.ensemble_size < 2 {
            return Err(Error::Config("ensemble size must be at least 2".into()));
        }
        if self.bootstrap_reps == 0 {
            return Err(Error::Config("bootstrap repetitions must be positive".into()));
        }
        if let Some(s) = &self.schedule {
            let schedule = EvalSchedule::from_checkpoints(s.clone())?;
            if schedule.budget() != self.budget {
                return Err(Error::Config(format!(
                    "last checkpoint {} differs from budget {}",
                    schedule.budget(),
                    self.budget
                )));
            }
        }
        for task in &self.tasks {
            self.training_config(*task)?.validate()?;
        }
        Ok(())
    }

    pub fn eval_schedule(&self) -> Result<EvalSchedule> {
        match &self.schedule {
            Some(s) => EvalSchedule::from_checkpoints(s.clone()),
            None => Ok(match self.mode {
                Mode::Desk => EvalSchedule::desk(self.budget),
                Mode::Paper => EvalSchedule::paper(self.budget),
            }),
        }
    }

    pub fn training_config(&self, task: TaskKind) -> Result<TrainingConfig> {
        let acquisition = AcquisitionConfig::new(self.c_expl, self.c_eval)?;
        Ok(TrainingConfig {
            scene: SceneConfig::new(self.grid_size, self.grid_size).with_noise(self.noise),
            model: ModelConfig::new(self.grid_size, self.grid_size).with_ensemble_size(self.ensemble_size),
            acquisition,
            warmup: self.warmup,
            update_steps: self.update_steps,
            batch_size: self.batch_size,
            schedule: self.eval_schedule()?,
            protocol: EvalProtocol::with_counts(task, self.eval_episodes, self.eval_per_variant),
        })
    }
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            what: "config line",
            detail: format!("line {}: `{raw}` has no `=`", n + 1),
        })?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

fn number<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Parse {
        what: "config value",
        detail: format!("{key} = {value}"),
    })
}

fn list<T>(value: &str, item: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(item)
        .collect()
}

/// Seeds as a comma list, a half-open range `a..b`, or a mix of both.
pub fn parse_seeds(value: &str) -> Result<Vec<u64>> {
    let mut seeds = Vec::new();
    for part in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let (a, b): (u64, u64) = (number("seeds", a)?, number("seeds", b)?);
            seeds.extend(a..b);
        } else {
            seeds.push(number("seeds", part)?);
        }
    }
    Ok(seeds)
}
