use ida_core::autodiff::sigmoid;
use ida_core::model::{
    bce_loss, load_checkpoint, sample_batch, save_checkpoint, EnsembleModel, LabeledAction, ModelConfig,
};
use ida_core::scene::{generate_scene, Action, SceneConfig, SceneObservation, TaskKind};
use ida_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Sample {
    obs: SceneObservation,
    action: Action,
    label: f64,
}

impl LabeledAction for Sample {
    fn observation(&self) -> &SceneObservation {
        &self.obs
    }
    fn action(&self) -> Action {
        self.action
    }
    fn label(&self) -> f64 {
        self.label
    }
}

fn model(size: usize, n: usize, seed: u64) -> EnsembleModel {
    let config = ModelConfig::new(size, size).with_ensemble_size(n);
    EnsembleModel::new(config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn observation(size: usize, seed: u64) -> SceneObservation {
    let config = SceneConfig::new(size, size);
    generate_scene(TaskKind::GraspShapes, &config, &mut ChaCha8Rng::seed_from_u64(seed)).render()
}

/// Labeled interactions whose outcome is the oracle rule, half of them on
/// successful cells.
fn samples(size: usize, count: usize, seed: u64) -> Vec<Sample> {
    let config = SceneConfig::new(size, size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    while out.len() < count {
        let scene = generate_scene(TaskKind::GraspCube, &config, &mut rng);
        let map = scene.oracle_map(TaskKind::GraspCube.primitive());
        let good: Vec<usize> = (0..map.len()).filter(|&i| map[i] > 0.0).collect();
        let flat = if rng.gen_bool(0.5) && !good.is_empty() {
            good[rng.gen_range(0..good.len())]
        } else {
            rng.gen_range(0..map.len())
        };
        let action = Action::from_flat_index(flat, size, size);
        out.push(Sample {
            obs: scene.render(),
            action,
            label: if map[flat] > 0.0 { 1.0 } else { 0.0 },
        });
    }
    out
}

#[test]
fn outputs_are_probabilities_and_deterministic() {
    let obs = observation(32, 1);
    let a = model(32, 3, 7).affordance_maps(&obs).unwrap();
    let b = model(32, 3, 7).affordance_maps(&obs).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.mean.len(), 8 * 32 * 32);
    for m in &a.members {
        assert!(m.iter().all(|&p| p > 0.0 && p < 1.0));
    }
}

#[test]
fn members_are_distinct() {
    let obs = observation(32, 2);
    let maps = model(32, 5, 3).affordance_maps(&obs).unwrap();
    for i in 0..5 {
        for j in i + 1..5 {
            let diff = maps.members[i]
                .iter()
                .zip(&maps.members[j])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff > 1e-6, "members {i} and {j} coincide");
        }
    }
}

#[test]
fn mean_map_averages_members_and_paths_agree() {
    let obs = observation(32, 3);
    let m = model(32, 4, 11);
    let maps = m.affordance_maps(&obs).unwrap();
    let plane = 32 * 32;
    for q in [0, 3, 7] {
        let all = m.forward_all(&obs, q).unwrap();
        for (k, member) in all.members.iter().enumerate() {
            let single = m.forward_member(&obs, q, k).unwrap();
            assert_eq!(member, &single);
            let from_volume = &maps.members[k][q * plane..(q + 1) * plane];
            for (x, y) in member.iter().zip(from_volume) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        for i in 0..plane {
            let avg = all.members.iter().map(|v| v[i]).sum::<f64>() / 4.0;
            assert!((all.mean[i] - avg).abs() < 1e-15);
        }
    }
}

#[test]
fn encoder_runs_once_per_forward() {
    let obs = observation(32, 4);
    let m = model(32, 5, 1);
    let before = m.encoder_evaluations();
    m.forward_all(&obs, 2).unwrap();
    assert_eq!(m.encoder_evaluations(), before + 1);
    m.affordance_maps(&obs).unwrap();
    assert_eq!(m.encoder_evaluations(), before + 2);
}

#[test]
fn single_pixel_prediction_matches_full_map() {
    for size in [32, 64] {
        let obs = observation(size, 5);
        let m = model(size, 2, 9);
        let maps = m.affordance_maps(&obs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut pixels = vec![(0, 0), (0, size - 1), (size - 1, 0), (size - 1, size - 1), (1, 2)];
        for _ in 0..20 {
            pixels.push((rng.gen_range(0..size), rng.gen_range(0..size)));
        }
        for (r, c) in pixels {
            let q = rng.gen_range(0..8);
            let got = m.predict_at(&obs, &Action::new(r, c, q)).unwrap();
            let idx = (q * size + r) * size + c;
            for (k, p) in got.iter().enumerate() {
                assert!((p - maps.members[k][idx]).abs() < 1e-12, "({r}, {c}, {q})");
            }
        }
    }
}

#[test]
fn rejects_bad_orientation_and_shape() {
    let m = model(32, 2, 0);
    let obs = observation(32, 0);
    assert!(matches!(m.forward_all(&obs, 8), Err(Error::Orientation { index: 8, count: 8 })));
    assert!(m.predict_at(&obs, &Action::new(0, 0, 9)).is_err());
    assert!(m.forward_member(&obs, 0, 2).is_err());
    let other = observation(64, 0);
    assert!(matches!(m.affordance_maps(&other), Err(Error::Shape(_))));
    assert!(ModelConfig::new(30, 32).validate().is_err());
}

#[test]
fn bce_reference_values() {
    let l = bce_loss(&[vec![0.5]], &[1.0]).unwrap();
    assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    let outputs = vec![vec![1.0, 0.0, 1.0], vec![1.0, 0.0, 1.0]];
    let labels = [1.0, 0.0, 1.0];
    assert!(bce_loss(&outputs, &labels).unwrap() <= 2.0 * 3.0 * 1e-6);
    assert!(bce_loss(&outputs, &[]).is_err());
    assert!(bce_loss(&outputs, &[1.0]).is_err());
}

#[test]
fn bce_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let (n, b) = (rng.gen_range(1..6), rng.gen_range(1..20));
        let outputs: Vec<Vec<f64>> = (0..n).map(|_| (0..b).map(|_| rng.gen::<f64>()).collect()).collect();
        let labels: Vec<f64> = (0..b).map(|_| f64::from(rng.gen_range(0..2u8))).collect();
        let mut expected = 0.0;
        for j in 0..b {
            let mut per_sample = 0.0;
            for member in &outputs {
                let p = member[j].max(1e-7).min(1.0 - 1e-7);
                per_sample -= if labels[j] == 1.0 { p.ln() } else { (1.0 - p).ln() };
            }
            expected += per_sample;
        }
        expected /= b as f64;
        assert!((bce_loss(&outputs, &labels).unwrap() - expected).abs() < 1e-12);
    }
}

#[test]
fn loss_graph_agrees_with_plain_loss() {
    let m = model(32, 3, 4);
    let data = samples(32, 6, 1);
    let batch: Vec<&Sample> = data.iter().collect();
    let (g, loss) = m.loss_graph(&batch).unwrap();
    let mut outputs = vec![Vec::new(); 3];
    for s in &data {
        for (k, p) in m.predict_at(&s.obs, &s.action).unwrap().into_iter().enumerate() {
            outputs[k].push(p);
        }
    }
    let labels: Vec<f64> = data.iter().map(|s| s.label).collect();
    assert!((g.value(loss).item() - bce_loss(&outputs, &labels).unwrap()).abs() < 1e-12);
    assert!(matches!(m.loss_graph::<Sample>(&[]), Err(Error::EmptyBatch)));
}

#[test]
fn every_parameter_receives_gradient() {
    let mut m = model(32, 3, 5);
    let data = samples(32, 16, 2);
    let batch: Vec<&Sample> = data.iter().collect();
    let (g, loss) = m.loss_graph(&batch).unwrap();
    g.backward(loss, m.params_mut()).unwrap();
    for p in m.params().iter() {
        assert!(p.grad.all_finite());
        assert!(p.grad.data().iter().any(|&v| v != 0.0), "{} has zero gradient", p.name());
    }
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    let mut m = model(32, 2, 6);
    let data = samples(32, 4, 3);
    let batch: Vec<&Sample> = data.iter().collect();
    let (g, loss) = m.loss_graph(&batch).unwrap();
    let signature = g.relu_signature();
    g.backward(loss, m.params_mut()).unwrap();
    let analytic: Vec<Vec<f64>> = m.params().iter().map(|p| p.grad.data().to_vec()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let h = 1e-5;
    let (mut checked, mut skipped) = (0, 0);
    for pi in 0..analytic.len() {
        let len = analytic[pi].len();
        for _ in 0..12 {
            let i = rng.gen_range(0..len);
            let eval = |delta: f64| {
                let mut probe = m.clone();
                let p = probe.params_mut().iter_mut().nth(pi).unwrap();
                p.value.data_mut()[i] += delta;
                let (g, l) = probe.loss_graph(&batch).unwrap();
                (g.value(l).item(), g.relu_signature())
            };
            let (fp, sp) = eval(h);
            let (fm, sm) = eval(-h);
            if sp != signature || sm != signature {
                skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[pi][i];
            let rel = (numeric - a).abs() / a.abs().max(numeric.abs()).max(1e-7);
            assert!(rel <= 1e-4, "param {pi}[{i}]: analytic {a}, numeric {numeric}");
            checked += 1;
        }
    }
    assert!(checked > skipped, "{checked} checked, {skipped} skipped");
}

#[test]
fn zero_update_steps_leave_parameters_unchanged() {
    let mut m = model(32, 2, 1);
    let before = m.clone();
    let data = samples(32, 4, 4);
    let stats = m.update(&data, 0, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(stats.steps, 0);
    for (a, b) in m.params().iter().zip(before.params().iter()) {
        assert_eq!(a.value, b.value);
    }
    assert_eq!(m.optimizer().step_count(), 0);
}

#[test]
fn repeated_updates_move_prediction_toward_label() {
    for label in [0.0, 1.0] {
        let mut m = model(32, 3, 2);
        let mut data = samples(32, 1, 5);
        data[0].label = label;
        let s = &data[0];
        let mean = |m: &EnsembleModel| m.predict_at(&s.obs, &s.action).unwrap().iter().sum::<f64>() / 3.0;
        let mut prev = mean(&m);
        let start = prev;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            m.update(&data, 1, 1, &mut rng).unwrap();
            let now = mean(&m);
            if label == 1.0 {
                assert!(now >= prev, "{now} < {prev}");
            } else {
                assert!(now <= prev, "{now} > {prev}");
            }
            prev = now;
        }
        assert!((prev - label).abs() < (start - label).abs() - 0.05);
    }
}

#[test]
fn training_reduces_held_out_loss() {
    let mut m = model(32, 2, 8);
    let train = samples(32, 200, 10);
    let test = samples(32, 60, 11);
    let held_out = |m: &EnsembleModel| {
        let batch: Vec<&Sample> = test.iter().collect();
        let (g, l) = m.loss_graph(&batch).unwrap();
        g.value(l).item()
    };
    let before = held_out(&m);
    let stats = m.update(&train, 100, 16, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(stats.steps, 100);
    let after = held_out(&m);
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn batches_are_distinct_when_possible() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut b = sample_batch(100, 64, &mut rng);
    b.sort_unstable();
    b.dedup();
    assert_eq!(b.len(), 64);
    let small = sample_batch(3, 10, &mut rng);
    assert_eq!(small.len(), 10);
    assert!(small.iter().all(|&i| i < 3));
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let mut m = model(32, 3, 13);
    let data = samples(32, 8, 6);
    m.update(&data, 3, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    save_checkpoint(&m, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.config(), m.config());
    let obs = observation(32, 7);
    assert_eq!(loaded.affordance_maps(&obs).unwrap(), m.affordance_maps(&obs).unwrap());

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
}

#[test]
fn sigmoid_saturates_inside_unit_interval() {
    assert!(sigmoid(800.0) < 1.0);
    assert!(sigmoid(-800.0) > 0.0);
}
