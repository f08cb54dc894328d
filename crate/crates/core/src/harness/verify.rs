//! Self-checks run from the command line: the information-gain identity and
//! a finite-difference check of the full model gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::acquisition::{expected_kl_oracle, info_gain_map};
use crate::bandit::ReplayBuffer;
use crate::error::{Error, Result};
use crate::model::{EnsembleModel, ModelConfig};
use crate::scene::{generate_scene, Action, SceneConfig, TaskKind};

pub const ORACLE_TOLERANCE: f64 = 1e-9;
pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Denominator floor for the relative error, so near-zero gradients are
/// compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub instances: usize,
    pub max_error: f64,
    pub worst: Vec<f64>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.max_error <= ORACLE_TOLERANCE
    }
}

/// Compares the divergence map with explicit Bayes updates on `instances`
/// random ensembles of 2 to 8 members with uniform probabilities.
pub fn oracle_check(seed: u64, instances: usize) -> Result<OracleReport> {
    if instances == 0 {
        return Err(Error::EmptyInput);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = OracleReport {
        instances,
        max_error: 0.0,
        worst: Vec::new(),
    };
    for _ in 0..instances {
        let n = rng.gen_range(2..=8);
        let probs: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let members: Vec<Vec<f64>> = probs.iter().map(|&p| vec![p]).collect();
        let jsd = info_gain_map(&members)?[0];
        let err = (jsd - expected_kl_oracle(&probs)).abs();
        if report.worst.is_empty() || err > report.max_error {
            report.max_error = err;
            report.worst = probs;
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    /// Coordinates whose perturbation flipped a ReLU.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error <= GRAD_TOLERANCE
    }
}

/// Central differences on `coords_per_instance` random coordinates of each of
/// `instances` freshly initialised 32x32 ensembles, each scored on its own
/// small batch of labelled interactions.
pub fn grad_check(seed: u64, instances: usize, coords_per_instance: usize) -> Result<GradReport> {
    let size = 32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene_config = SceneConfig::new(size, size);
    let mut report = GradReport {
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for _ in 0..instances {
        let config = ModelConfig::new(size, size).with_ensemble_size(2);
        let mut model = EnsembleModel::new(config.clone(), &mut rng)?;
        let mut buffer = ReplayBuffer::new();
        for _ in 0..4 {
            let scene = generate_scene(TaskKind::GraspCube, &scene_config, &mut rng);
            let action = Action::new(
                rng.gen_range(0..size),
                rng.gen_range(0..size),
                rng.gen_range(0..config.orientation_count),
            );
            let outcome = scene.execute(&action, TaskKind::GraspCube.primitive(), &mut rng);
            buffer.push(scene.render(), action, outcome);
        }
        let batch: Vec<_> = buffer.as_slice().iter().collect();
        let (graph, loss) = model.loss_graph(&batch)?;
        let signature = graph.relu_signature();
        graph.backward(loss, model.params_mut())?;

        let sizes: Vec<usize> = model.params().iter().map(|p| p.value.len()).collect();
        let total: usize = sizes.iter().sum();
        for _ in 0..coords_per_instance {
            let mut flat = rng.gen_range(0..total);
            let mut pi = 0;
            while flat >= sizes[pi] {
                flat -= sizes[pi];
                pi += 1;
            }
            let eval = |delta: f64| -> Result<(f64, Vec<bool>)> {
                let mut probe = model.clone();
                let p = probe.params_mut().iter_mut().nth(pi).expect("parameter index");
                p.value.data_mut()[flat] += delta;
                let (g, l) = probe.loss_graph(&batch)?;
                Ok((g.value(l).item(), g.relu_signature()))
            };
            let (fp, sp) = eval(GRAD_STEP)?;
            let (fm, sm) = eval(-GRAD_STEP)?;
            if sp != signature || sm != signature {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * GRAD_STEP);
            let param = model.params().iter().nth(pi).expect("parameter index");
            let analytic = param.grad.data()[flat];
            let rel = (numeric - analytic).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
            if rel >= report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((param.name().to_string(), flat));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
