//! Reporting and training helpers for the acceptance suite.

use std::time::Instant;

use ida_core::bandit::{run_training, EvalProtocol, EvalSchedule, TrainingConfig};
use ida_core::policy::StrategyRegistry;
use ida_core::scene::TaskKind;

struct Outcome {
    gated: bool,
    passed: bool,
}

/// Collects criterion outcomes and prints one line per criterion.
#[derive(Default)]
pub struct Suite {
    outcomes: Vec<Outcome>,
}

impl Suite {
    pub fn report(&mut self, id: &str, gated: bool, passed: bool, start: Instant, detail: String) {
        let verdict = match (gated, passed) {
            (true, true) => "PASS",
            (true, false) => "FAIL",
            (false, true) => "PASS (report-only)",
            (false, false) => "FAIL (report-only)",
        };
        println!("{verdict} criterion {id} [{:.1}s]: {detail}", start.elapsed().as_secs_f64());
        self.outcomes.push(Outcome { gated, passed });
    }

    /// (passed, total) over gated criteria.
    pub fn gated(&self) -> (usize, usize) {
        let gated = self.outcomes.iter().filter(|o| o.gated);
        let total = gated.clone().count();
        (gated.filter(|o| o.passed).count(), total)
    }
}

/// Size of a GraspCube training experiment.
pub struct Scale {
    pub size: usize,
    pub budget: usize,
    pub batch: usize,
    pub seeds: u64,
    pub episodes: usize,
}

/// Success rate at the end of training for seeds `0..scale.seeds`.
pub fn final_rates(method: &str, scale: &Scale) -> Vec<f64> {
    let registry = StrategyRegistry::default();
    let strategy = registry.get(method).unwrap();
    let task = TaskKind::GraspCube;
    let mut config = TrainingConfig::new(task, scale.size, scale.budget);
    config.batch_size = scale.batch;
    config.schedule = EvalSchedule::from_checkpoints(vec![scale.budget]).unwrap();
    config.protocol = EvalProtocol::with_counts(task, scale.episodes, 5);
    (0..scale.seeds)
        .map(|seed| run_training(strategy, task, &config, seed).unwrap().curve[0].success_rate)
        .collect()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
