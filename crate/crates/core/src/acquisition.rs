//! Ensemble disagreement and the two action-selection objectives.
//!
//! Score volumes are flat `[orientation, H, W]` vectors; the valid mask is a
//! flat `[H, W]` plane shared by every orientation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{AffordanceMaps, EnsembleModel};
use crate::scene::{Action, SceneObservation};

/// Clamp applied to probabilities inside the entropy.
pub const ENTROPY_CLAMP: f64 = 1e-7;

/// Maps whose valid range is narrower than this normalize to zero.
pub const DEGENERATE_RANGE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AcquisitionConfig {
    pub c_expl: f64,
    pub c_eval: f64,
    pub entropy_clamp: f64,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        Self {
            c_expl: 0.3,
            c_eval: 0.1,
            entropy_clamp: ENTROPY_CLAMP,
        }
    }
}

impl AcquisitionConfig {
    pub fn new(c_expl: f64, c_eval: f64) -> Result<Self> {
        let config = Self {
            c_expl,
            c_eval,
            ..Self::default()
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.c_expl) || !ok(self.c_eval) {
            return Err(Error::Config(format!(
                "acquisition coefficients must be finite and non-negative (c_expl={}, c_eval={})",
                self.c_expl, self.c_eval
            )));
        }
        if !(self.entropy_clamp > 0.0 && self.entropy_clamp < 0.5) {
            return Err(Error::Config("entropy clamp must lie in (0, 0.5)".into()));
        }
        Ok(())
    }
}

/// Which objective produced a score map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Ucb,
    Pessimistic,
    Greedy,
    Boltzmann,
}

/// Scores over `[orientation, H, W]`; masked cells hold `-inf`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionScoreMap {
    pub orientation_count: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub provenance: Provenance,
}

impl ActionScoreMap {
    /// Highest-scoring selectable action; ties go to the smallest flat index.
    pub fn argmax(&self) -> Result<Action> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &v) in self.values.iter().enumerate() {
            if v == f64::NEG_INFINITY || v.is_nan() {
                continue;
            }
            if best.map_or(true, |(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        let (i, _) = best.ok_or(Error::NoValidCells)?;
        Ok(Action::from_flat_index(i, self.height, self.width))
    }

    pub fn is_selectable(&self, flat: usize) -> bool {
        self.values[flat] != f64::NEG_INFINITY
    }
}

pub fn bernoulli_entropy(p: f64) -> f64 {
    bernoulli_entropy_with(p, ENTROPY_CLAMP)
}

pub fn bernoulli_entropy_with(p: f64, eps: f64) -> f64 {
    let p = p.clamp(eps, 1.0 - eps);
    -p * p.ln() - (1.0 - p) * (1.0 - p).ln()
}

/// Per-cell Jensen-Shannon divergence across ensemble members, in nats.
pub fn info_gain_map(members: &[Vec<f64>]) -> Result<Vec<f64>> {
    info_gain_map_with(members, ENTROPY_CLAMP)
}

pub fn info_gain_map_with(members: &[Vec<f64>], eps: f64) -> Result<Vec<f64>> {
    if members.len() < 2 {
        return Err(Error::Config(format!(
            "information gain needs at least two members, got {}",
            members.len()
        )));
    }
    let len = members[0].len();
    if members.iter().any(|m| m.len() != len) {
        return Err(Error::Shape("ensemble member maps differ in size".into()));
    }
    let n = members.len() as f64;
    Ok((0..len)
        .map(|i| {
            let mut mean = 0.0;
            let mut mean_h = 0.0;
            for m in members {
                mean += m[i];
                mean_h += bernoulli_entropy_with(m[i], eps);
            }
            (bernoulli_entropy_with(mean / n, eps) - mean_h / n).max(0.0)
        })
        .collect())
}

/// Expected information gain about which member is correct, by explicit Bayes
/// updates under a uniform prior: `sum_b p(b) KL(posterior_b || prior)`.
pub fn expected_kl_oracle(probs: &[f64]) -> f64 {
    let n = probs.len() as f64;
    let prior = 1.0 / n;
    let mut total = 0.0;
    for outcome in [true, false] {
        let likelihood: Vec<f64> = probs
            .iter()
            .map(|&p| {
                let p = p.clamp(ENTROPY_CLAMP, 1.0 - ENTROPY_CLAMP);
                if outcome {
                    p
                } else {
                    1.0 - p
                }
            })
            .collect();
        let evidence: f64 = likelihood.iter().map(|l| l * prior).sum();
        let kl: f64 = likelihood
            .iter()
            .map(|l| {
                let post = l * prior / evidence;
                if post > 0.0 {
                    post * (post / prior).ln()
                } else {
                    0.0
                }
            })
            .sum();
        total += evidence * kl;
    }
    total
}

fn check_volume(len: usize, mask: &[bool]) -> Result<()> {
    if mask.is_empty() || len % mask.len() != 0 {
        return Err(Error::Shape(format!(
            "volume of {len} cells is not a whole number of {}-cell planes",
            mask.len()
        )));
    }
    Ok(())
}

/// Min-max rescale to `[0, 1]` over valid cells of the whole volume. Invalid
/// cells and degenerate maps come out as zero.
pub fn normalize01(map: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    check_volume(map.len(), mask)?;
    let plane = mask.len();
    let valid = |i: usize| mask[i % plane];
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (i, &v) in map.iter().enumerate() {
        if valid(i) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let range = hi - lo;
    if !(range >= DEGENERATE_RANGE) {
        return Ok(vec![0.0; map.len()]);
    }
    Ok(map
        .iter()
        .enumerate()
        .map(|(i, &v)| if valid(i) { (v - lo) / range } else { 0.0 })
        .collect())
}

/// Marks every orientation of each invalid cell as unselectable.
pub fn mask_invalid(
    mut values: Vec<f64>,
    height: usize,
    width: usize,
    mask: &[bool],
    provenance: Provenance,
) -> Result<ActionScoreMap> {
    if mask.len() != height * width {
        return Err(Error::Shape(format!(
            "mask has {} cells, expected {height}x{width}",
            mask.len()
        )));
    }
    check_volume(values.len(), mask)?;
    if !mask.iter().any(|&m| m) {
        return Err(Error::NoValidCells);
    }
    let plane = mask.len();
    for (i, v) in values.iter_mut().enumerate() {
        if !mask[i % plane] {
            *v = f64::NEG_INFINITY;
        }
    }
    Ok(ActionScoreMap {
        orientation_count: values.len() / plane,
        height,
        width,
        values,
        provenance,
    })
}

/// `reward + c * info` cell by cell.
pub fn ucb_scores(reward: &[f64], info: &[f64], c_expl: f64) -> Vec<f64> {
    reward.iter().zip(info).map(|(r, i)| r + c_expl * i).collect()
}

/// `reward - c * info` cell by cell.
pub fn pessimistic_scores(reward: &[f64], info: &[f64], c_eval: f64) -> Vec<f64> {
    reward.iter().zip(info).map(|(r, i)| r - c_eval * i).collect()
}

/// Normalized information gain of the ensemble, or zeros for a single member
/// (nothing to disagree with).
pub fn normalized_info(maps: &AffordanceMaps, mask: &[bool]) -> Result<Vec<f64>> {
    if maps.members.len() < 2 {
        return Ok(vec![0.0; maps.mean.len()]);
    }
    normalize01(&info_gain_map(&maps.members)?, mask)
}

/// Optimistic score map using `reward` as the exploitation term.
pub fn ucb_map(maps: &AffordanceMaps, reward: &[f64], mask: &[bool], config: &AcquisitionConfig) -> Result<ActionScoreMap> {
    let scores = if config.c_expl == 0.0 {
        reward.to_vec()
    } else {
        ucb_scores(reward, &normalized_info(maps, mask)?, config.c_expl)
    };
    mask_invalid(scores, maps.height, maps.width, mask, Provenance::Ucb)
}

/// Pessimistic score map around the ensemble mean.
pub fn pessimistic_map(maps: &AffordanceMaps, mask: &[bool], config: &AcquisitionConfig) -> Result<ActionScoreMap> {
    let scores = if config.c_eval == 0.0 {
        maps.mean.clone()
    } else {
        pessimistic_scores(&maps.mean, &normalized_info(maps, mask)?, config.c_eval)
    };
    mask_invalid(scores, maps.height, maps.width, mask, Provenance::Pessimistic)
}

/// Training-time selection: a uniformly drawn member supplies the reward.
pub fn ucb_select<R: Rng + ?Sized>(
    model: &EnsembleModel,
    obs: &SceneObservation,
    config: &AcquisitionConfig,
    rng: &mut R,
) -> Result<Action> {
    let maps = model.affordance_maps(obs)?;
    ucb_select_from_maps(&maps, &obs.valid_mask, config, rng)
}

pub fn ucb_select_from_maps<R: Rng + ?Sized>(
    maps: &AffordanceMaps,
    mask: &[bool],
    config: &AcquisitionConfig,
    rng: &mut R,
) -> Result<Action> {
    let member = rng.gen_range(0..maps.members.len());
    ucb_map(maps, &maps.members[member], mask, config)?.argmax()
}

/// Evaluation-time selection; deterministic given the model.
pub fn pessimistic_select(model: &EnsembleModel, obs: &SceneObservation, config: &AcquisitionConfig) -> Result<Action> {
    let maps = model.affordance_maps(obs)?;
    pessimistic_map(&maps, &obs.valid_mask, config)?.argmax()
}
