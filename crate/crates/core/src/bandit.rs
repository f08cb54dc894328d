//! The online interaction-update loop with scheduled evaluations.

use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::acquisition::AcquisitionConfig;
use crate::error::{Error, Result};
use crate::model::{EnsembleModel, LabeledAction, ModelConfig};
use crate::policy::{uniform_valid_action, SelectionContext, SelectionStrategy};
use crate::scene::{
    generate_scene, generate_variant_scene, Action, Outcome, Scene, SceneConfig, SceneObservation, TaskKind,
    CABINET_VARIANTS, GRASP_SHAPE_VARIANTS,
};

/// Scenes regenerated before an unusable task is reported.
const MAX_SCENE_ATTEMPTS: usize = 100;

#[derive(Clone, Debug)]
pub struct Transition {
    pub observation: SceneObservation,
    pub action: Action,
    pub outcome: Outcome,
    pub index: usize,
}

impl LabeledAction for Transition {
    fn observation(&self) -> &SceneObservation {
        &self.observation
    }
    fn action(&self) -> Action {
        self.action
    }
    fn label(&self) -> f64 {
        self.outcome.label()
    }
}

/// Append-only record of every interaction.
#[derive(Clone, Debug, Default)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
}

impl ReplayBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores a transition under the next dense index and returns it.
    pub fn push(&mut self, observation: SceneObservation, action: Action, outcome: Outcome) -> &Transition {
        let index = self.items.len();
        self.items.push(Transition {
            observation,
            action,
            outcome,
            index,
        });
        &self.items[index]
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn as_slice(&self) -> &[Transition] {
        &self.items
    }
}

/// Interaction counts at which the model is evaluated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalSchedule {
    checkpoints: Vec<usize>,
}

impl EvalSchedule {
    pub const DESK: [usize; 5] = [50, 250, 500, 1000, 2000];
    pub const PAPER: [usize; 5] = [50, 250, 500, 2500, 10_000];

    /// Rescales `base` (whose last entry is its budget) to `budget`; entries
    /// that collapse onto each other are merged. A zero budget evaluates once
    /// at zero.
    pub fn scaled(base: &[usize], budget: usize) -> Self {
        if budget == 0 || base.is_empty() {
            return Self { checkpoints: vec![budget] };
        }
        let base_budget = *base.last().unwrap() as f64;
        let mut checkpoints: Vec<usize> = base
            .iter()
            .map(|&c| ((c as f64 * budget as f64 / base_budget).round() as usize).clamp(1, budget))
            .collect();
        checkpoints.dedup();
        *checkpoints.last_mut().unwrap() = budget;
        Self { checkpoints }
    }

    pub fn desk(budget: usize) -> Self {
        Self::scaled(&Self::DESK, budget)
    }

    pub fn paper(budget: usize) -> Self {
        Self::scaled(&Self::PAPER, budget)
    }

    pub fn from_checkpoints(checkpoints: Vec<usize>) -> Result<Self> {
        if checkpoints.is_empty() || checkpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "checkpoints must be non-empty and strictly increasing: {checkpoints:?}"
            )));
        }
        Ok(Self { checkpoints })
    }

    pub fn checkpoints(&self) -> &[usize] {
        &self.checkpoints
    }

    pub fn budget(&self) -> usize {
        *self.checkpoints.last().unwrap()
    }
}

/// Evaluation episodes: `(variant, count)` pairs; `None` draws ordinary
/// task scenes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalProtocol {
    pub episodes: Vec<(Option<usize>, usize)>,
}

impl EvalProtocol {
    pub fn for_task(task: TaskKind) -> Self {
        Self::with_counts(task, 100, 5)
    }

    /// `plain` episodes for single-distribution tasks, `per_variant` for
    /// each shape or cabinet variant otherwise.
    pub fn with_counts(task: TaskKind, plain: usize, per_variant: usize) -> Self {
        let episodes = match task {
            TaskKind::GraspCube | TaskKind::StackCube => vec![(None, plain)],
            TaskKind::GraspShapes => (0..GRASP_SHAPE_VARIANTS.len()).map(|v| (Some(v), per_variant)).collect(),
            TaskKind::OpenDrawer => (0..CABINET_VARIANTS).map(|v| (Some(v), per_variant)).collect(),
        };
        Self { episodes }
    }

    pub fn episode_count(&self) -> usize {
        self.episodes.iter().map(|&(_, n)| n).sum()
    }
}

/// Independent random streams of one run, all derived from the seed.
#[derive(Clone, Debug)]
pub struct RunStreams {
    pub init: ChaCha8Rng,
    pub scenes: ChaCha8Rng,
    pub outcomes: ChaCha8Rng,
    pub policy: ChaCha8Rng,
    pub batches: ChaCha8Rng,
    eval_seed: u64,
}

impl RunStreams {
    pub fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k);
            rng
        };
        Self {
            init: stream(1),
            scenes: stream(2),
            outcomes: stream(3),
            policy: stream(4),
            batches: stream(5),
            eval_seed: stream(6).next_u64(),
        }
    }

    /// A fresh evaluation stream; every call yields the same sequence, so
    /// each checkpoint is scored on the same scenes.
    pub fn eval(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.eval_seed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub acquisition: AcquisitionConfig,
    pub warmup: usize,
    pub update_steps: usize,
    pub batch_size: usize,
    pub schedule: EvalSchedule,
    pub protocol: EvalProtocol,
}

impl TrainingConfig {
    /// Defaults at the given grid size and budget, with the desk schedule.
    pub fn new(task: TaskKind, size: usize, budget: usize) -> Self {
        Self {
            scene: SceneConfig::new(size, size),
            model: ModelConfig::new(size, size),
            acquisition: AcquisitionConfig::default(),
            warmup: 10,
            update_steps: 5,
            batch_size: 64,
            schedule: EvalSchedule::desk(budget),
            protocol: EvalProtocol::for_task(task),
        }
    }

    pub fn budget(&self) -> usize {
        self.schedule.budget()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.acquisition.validate()?;
        if (self.scene.height, self.scene.width) != (self.model.height, self.model.width) {
            return Err(Error::Config("scene and model grid sizes differ".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.scene.noise) {
            return Err(Error::Config(format!("noise {} outside [0, 1]", self.scene.noise)));
        }
        Ok(())
    }
}

/// Generates scenes until one has a valid cell.
fn usable_scene<R: RngCore + ?Sized>(task: TaskKind, config: &SceneConfig, rng: &mut R) -> Result<(Scene, SceneObservation)> {
    for _ in 0..MAX_SCENE_ATTEMPTS {
        let scene = generate_scene(task, config, rng);
        let obs = scene.render();
        if obs.valid_mask.iter().any(|&v| v) {
            return Ok((scene, obs));
        }
    }
    Err(Error::NoValidCells)
}

/// Executes `count` uniformly random valid actions on fresh scenes.
pub fn warmup(
    task: TaskKind,
    config: &SceneConfig,
    orientation_count: usize,
    buffer: &mut ReplayBuffer,
    streams: &mut RunStreams,
    count: usize,
) -> Result<()> {
    for _ in 0..count {
        let (scene, obs) = usable_scene(task, config, &mut streams.scenes)?;
        let action = uniform_valid_action(&obs, orientation_count, &mut streams.policy)?;
        let outcome = scene.execute(&action, task.primitive(), &mut streams.outcomes);
        buffer.push(obs, action, outcome);
    }
    Ok(())
}

/// One interaction: new scene, selection, execution, storage, model update.
pub fn interact_once(
    strategy: &dyn SelectionStrategy,
    task: TaskKind,
    config: &TrainingConfig,
    model: &mut EnsembleModel,
    buffer: &mut ReplayBuffer,
    streams: &mut RunStreams,
    interaction: usize,
) -> Result<Transition> {
    let (scene, obs) = usable_scene(task, &config.scene, &mut streams.scenes)?;
    let ctx = SelectionContext {
        model,
        obs: &obs,
        config: &config.acquisition,
        interaction,
        budget: config.budget(),
    };
    let action = strategy.select_training(&ctx, &mut streams.policy)?;
    let outcome = scene.execute(&action, task.primitive(), &mut streams.outcomes);
    let transition = buffer.push(obs, action, outcome).clone();
    model.update(buffer.as_slice(), config.update_steps, config.batch_size, &mut streams.batches)?;
    Ok(transition)
}

/// Success rate of `select` over the protocol's scenes. Scenes and outcome
/// noise come from `rng` alone.
pub fn evaluate_with<R, F>(task: TaskKind, protocol: &EvalProtocol, config: &SceneConfig, rng: &mut R, mut select: F) -> Result<f64>
where
    R: RngCore + ?Sized,
    F: FnMut(&Scene, &SceneObservation) -> Result<Action>,
{
    let total = protocol.episode_count();
    if total == 0 {
        return Err(Error::Config("evaluation protocol has no episodes".into()));
    }
    let mut successes = 0usize;
    for &(variant, count) in &protocol.episodes {
        for _ in 0..count {
            let scene = match variant {
                Some(v) => generate_variant_scene(task, v, config, rng),
                None => generate_scene(task, config, rng),
            };
            let obs = scene.render();
            let action = select(&scene, &obs)?;
            if scene.execute(&action, task.primitive(), rng).success {
                successes += 1;
            }
        }
    }
    Ok(successes as f64 / total as f64)
}

/// Success rate of the strategy's evaluation rule; the model is read only.
pub fn evaluate<R: RngCore + ?Sized>(
    strategy: &dyn SelectionStrategy,
    model: &EnsembleModel,
    task: TaskKind,
    config: &TrainingConfig,
    rng: &mut R,
) -> Result<f64> {
    evaluate_with(task, &config.protocol, &config.scene, rng, |_, obs| {
        strategy.select_eval(model, obs, &config.acquisition)
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub checkpoint: usize,
    pub success_rate: f64,
    /// Training time up to this checkpoint, evaluations excluded.
    pub wall_time_seconds: f64,
}

pub struct RunResult {
    pub curve: Vec<CurvePoint>,
    pub model: EnsembleModel,
    pub buffer: ReplayBuffer,
}

/// Builds the strategy's model variant from the configured architecture.
pub fn build_model(strategy: &dyn SelectionStrategy, config: &TrainingConfig, streams: &mut RunStreams) -> Result<EnsembleModel> {
    let n = strategy.ensemble_size(config.model.ensemble_size);
    EnsembleModel::new(config.model.clone().with_ensemble_size(n), &mut streams.init)
}

/// Full run: warmup, `budget` interactions, evaluation at every checkpoint.
pub fn run_training(strategy: &dyn SelectionStrategy, task: TaskKind, config: &TrainingConfig, seed: u64) -> Result<RunResult> {
    config.validate()?;
    let mut streams = RunStreams::new(seed);
    let mut model = build_model(strategy, config, &mut streams)?;
    let mut buffer = ReplayBuffer::new();
    let mut curve = Vec::new();
    let mut train_time = 0.0;
    let schedule = config.schedule.checkpoints();
    let mut next = 0;

    if config.budget() == 0 {
        let rate = evaluate(strategy, &model, task, config, &mut streams.eval())?;
        curve.push(CurvePoint {
            checkpoint: 0,
            success_rate: rate,
            wall_time_seconds: 0.0,
        });
        return Ok(RunResult { curve, model, buffer });
    }

    let start = Instant::now();
    warmup(
        task,
        &config.scene,
        config.model.orientation_count,
        &mut buffer,
        &mut streams,
        config.warmup,
    )?;
    train_time += start.elapsed().as_secs_f64();

    for interaction in 0..config.budget() {
        let start = Instant::now();
        interact_once(strategy, task, config, &mut model, &mut buffer, &mut streams, interaction)?;
        train_time += start.elapsed().as_secs_f64();
        if next < schedule.len() && interaction + 1 == schedule[next] {
            let rate = evaluate(strategy, &model, task, config, &mut streams.eval())?;
            curve.push(CurvePoint {
                checkpoint: schedule[next],
                success_rate: rate,
                wall_time_seconds: train_time,
            });
            next += 1;
        }
    }
    Ok(RunResult { curve, model, buffer })
}
