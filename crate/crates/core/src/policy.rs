//! Action-selection strategies behind one trait, looked up by name.
//!
//! Every strategy fixes its model variant (ensemble size), its training-time
//! rule and its evaluation-time rule. The loop in [`crate::bandit`] is the
//! same for all of them.

use std::fmt;

use rand::{Rng, RngCore};

use crate::acquisition::{
    mask_invalid, normalized_info, pessimistic_map, ucb_map, AcquisitionConfig, ActionScoreMap, Provenance,
};
use crate::error::{Error, Result};
use crate::model::{AffordanceMaps, EnsembleModel};
use crate::scene::{Action, SceneObservation};

/// Everything a strategy may look at when picking a training action.
pub struct SelectionContext<'a> {
    pub model: &'a EnsembleModel,
    pub obs: &'a SceneObservation,
    pub config: &'a AcquisitionConfig,
    /// Zero-based index of the interaction after warmup.
    pub interaction: usize,
    pub budget: usize,
}

pub trait SelectionStrategy: Send + Sync {
    /// Name accepted on the command line.
    fn name(&self) -> &'static str;

    /// Decoders to train, given the configured ensemble size.
    fn ensemble_size(&self, configured: usize) -> usize {
        configured
    }

    fn select_training(&self, ctx: &SelectionContext<'_>, rng: &mut dyn RngCore) -> Result<Action>;

    fn select_eval(&self, model: &EnsembleModel, obs: &SceneObservation, config: &AcquisitionConfig) -> Result<Action> {
        pessimistic_map(&model.affordance_maps(obs)?, &obs.valid_mask, config)?.argmax()
    }
}

impl fmt::Debug for dyn SelectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SelectionStrategy({})", self.name())
    }
}

/// Uniform over valid (cell, orientation) pairs.
pub fn uniform_valid_action(obs: &SceneObservation, orientation_count: usize, rng: &mut dyn RngCore) -> Result<Action> {
    let cells = obs.valid_cells();
    if cells.is_empty() {
        return Err(Error::NoValidCells);
    }
    let pick = rng.gen_range(0..cells.len() * orientation_count);
    let (row, col) = cells[pick / orientation_count];
    Ok(Action::new(row, col, pick % orientation_count))
}

/// Plain argmax of the mean map over valid cells.
pub fn greedy_map(maps: &AffordanceMaps, mask: &[bool]) -> Result<ActionScoreMap> {
    mask_invalid(maps.mean.clone(), maps.height, maps.width, mask, Provenance::Greedy)
}

/// Draws a valid action with probability proportional to `exp(score / t)`.
pub fn boltzmann_sample(scores: &ActionScoreMap, temperature: f64, rng: &mut dyn RngCore) -> Result<Action> {
    let valid: Vec<(usize, f64)> = scores
        .values
        .iter()
        .enumerate()
        .filter(|(i, _)| scores.is_selectable(*i))
        .map(|(i, &v)| (i, v))
        .collect();
    let top = valid.iter().map(|&(_, v)| v).fold(f64::NEG_INFINITY, f64::max);
    if valid.is_empty() || !top.is_finite() {
        return Err(Error::NoValidCells);
    }
    let weights: Vec<f64> = valid.iter().map(|&(_, v)| ((v - top) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (&(i, _), w) in valid.iter().zip(&weights) {
        if u < *w {
            return Ok(Action::from_flat_index(i, scores.height, scores.width));
        }
        u -= w;
    }
    let last = valid.last().unwrap().0;
    Ok(Action::from_flat_index(last, scores.height, scores.width))
}

fn orientation_count(model: &EnsembleModel) -> usize {
    model.config().orientation_count
}

/// Optimistic selection with a Thompson-sampled member.
pub struct Ida;

impl SelectionStrategy for Ida {
    fn name(&self) -> &'static str {
        "ida"
    }

    fn select_training(&self, ctx: &SelectionContext<'_>, rng: &mut dyn RngCore) -> Result<Action> {
        let maps = ctx.model.affordance_maps(ctx.obs)?;
        let member = rng.gen_range(0..maps.members.len());
        ucb_map(&maps, &maps.members[member], &ctx.obs.valid_mask, ctx.config)?.argmax()
    }
}

/// Optimistic selection around the ensemble mean instead of a sampled member.
pub struct IdaNoEnsembleSampling;

impl SelectionStrategy for IdaNoEnsembleSampling {
    fn name(&self) -> &'static str {
        "ida-no-ens"
    }

    fn select_training(&self, ctx: &SelectionContext<'_>, _rng: &mut dyn RngCore) -> Result<Action> {
        let maps = ctx.model.affordance_maps(ctx.obs)?;
        ucb_map(&maps, &maps.mean, &ctx.obs.valid_mask, ctx.config)?.argmax()
    }
}

/// Trains on the most informative action only.
pub struct JsdOnly;

impl SelectionStrategy for JsdOnly {
    fn name(&self) -> &'static str {
        "jsd"
    }

    fn select_training(&self, ctx: &SelectionContext<'_>, _rng: &mut dyn RngCore) -> Result<Action> {
        let maps = ctx.model.affordance_maps(ctx.obs)?;
        let info = normalized_info(&maps, &ctx.obs.valid_mask)?;
        mask_invalid(info, maps.height, maps.width, &ctx.obs.valid_mask, Provenance::Ucb)?.argmax()
    }
}

/// Single network, always exploiting.
pub struct Greedy;

impl SelectionStrategy for Greedy {
    fn name(&self) -> &'static str {
        "greedy"
    }

    fn ensemble_size(&self, _configured: usize) -> usize {
        1
    }

    fn select_training(&self, ctx: &SelectionContext<'_>, _rng: &mut dyn RngCore) -> Result<Action> {
        greedy_map(&ctx.model.affordance_maps(ctx.obs)?, &ctx.obs.valid_mask)?.argmax()
    }

    fn select_eval(&self, model: &EnsembleModel, obs: &SceneObservation, _config: &AcquisitionConfig) -> Result<Action> {
        greedy_map(&model.affordance_maps(obs)?, &obs.valid_mask)?.argmax()
    }
}

/// Single network trained on uniformly random actions.
pub struct RandomPolicy;

impl SelectionStrategy for RandomPolicy {
    fn name(&self) -> &'static str {
        "random"
    }

    fn ensemble_size(&self, _configured: usize) -> usize {
        1
    }

    fn select_training(&self, ctx: &SelectionContext<'_>, rng: &mut dyn RngCore) -> Result<Action> {
        uniform_valid_action(ctx.obs, orientation_count(ctx.model), rng)
    }

    fn select_eval(&self, model: &EnsembleModel, obs: &SceneObservation, _config: &AcquisitionConfig) -> Result<Action> {
        greedy_map(&model.affordance_maps(obs)?, &obs.valid_mask)?.argmax()
    }
}

/// Random training actions, ensemble evaluation.
pub struct RandomEnsemble;

impl SelectionStrategy for RandomEnsemble {
    fn name(&self) -> &'static str {
        "random-ens"
    }

    fn select_training(&self, ctx: &SelectionContext<'_>, rng: &mut dyn RngCore) -> Result<Action> {
        uniform_valid_action(ctx.obs, orientation_count(ctx.model), rng)
    }
}

/// Random actions for the first half of the budget, then Boltzmann
/// exploration over the predicted probabilities.
pub struct Where2Act {
    pub temperature: f64,
}

impl Default for Where2Act {
    fn default() -> Self {
        Self { temperature: 1.0 }
    }
}

impl SelectionStrategy for Where2Act {
    fn name(&self) -> &'static str {
        "where2act"
    }

    fn ensemble_size(&self, _configured: usize) -> usize {
        1
    }

    fn select_training(&self, ctx: &SelectionContext<'_>, rng: &mut dyn RngCore) -> Result<Action> {
        if ctx.interaction < ctx.budget / 2 {
            return uniform_valid_action(ctx.obs, orientation_count(ctx.model), rng);
        }
        let maps = ctx.model.affordance_maps(ctx.obs)?;
        let scores = mask_invalid(maps.mean, maps.height, maps.width, &ctx.obs.valid_mask, Provenance::Boltzmann)?;
        boltzmann_sample(&scores, self.temperature, rng)
    }

    fn select_eval(&self, model: &EnsembleModel, obs: &SceneObservation, _config: &AcquisitionConfig) -> Result<Action> {
        greedy_map(&model.affordance_maps(obs)?, &obs.valid_mask)?.argmax()
    }
}

/// Strategies keyed by name, in registration order.
pub struct StrategyRegistry {
    entries: Vec<Box<dyn SelectionStrategy>>,
}

impl Default for StrategyRegistry {
    fn default() -> Self {
        let mut registry = Self::empty();
        registry.register(Box::new(Ida));
        registry.register(Box::new(JsdOnly));
        registry.register(Box::new(Greedy));
        registry.register(Box::new(RandomPolicy));
        registry.register(Box::new(Where2Act::default()));
        registry.register(Box::new(RandomEnsemble));
        registry.register(Box::new(IdaNoEnsembleSampling));
        registry
    }
}

impl StrategyRegistry {
    pub fn empty() -> Self {
        Self { entries: Vec::new() }
    }

    /// Adds a strategy, replacing any earlier one with the same name.
    pub fn register(&mut self, strategy: Box<dyn SelectionStrategy>) {
        self.entries.retain(|s| s.name() != strategy.name());
        self.entries.push(strategy);
    }

    pub fn get(&self, name: &str) -> Result<&dyn SelectionStrategy> {
        self.entries
            .iter()
            .find(|s| s.name() == name)
            .map(|s| s.as_ref())
            .ok_or_else(|| Error::UnknownName {
                kind: "method",
                name: name.to_string(),
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|s| s.name()).collect()
    }
}
