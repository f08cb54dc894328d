use ida_core::acquisition::{mask_invalid, pessimistic_map, ucb_map, AcquisitionConfig, Provenance};
use ida_core::model::{EnsembleModel, ModelConfig};
use ida_core::policy::{
    boltzmann_sample, uniform_valid_action, Greedy, Ida, RandomPolicy, SelectionContext, SelectionStrategy,
    StrategyRegistry, Where2Act,
};
use ida_core::scene::{generate_scene, Action, SceneConfig, SceneObservation, TaskKind};
use ida_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SIZE: usize = 32;

fn observation(seed: u64) -> SceneObservation {
    let config = SceneConfig::new(SIZE, SIZE);
    generate_scene(TaskKind::GraspShapes, &config, &mut ChaCha8Rng::seed_from_u64(seed)).render()
}

fn model(n: usize, seed: u64) -> EnsembleModel {
    let config = ModelConfig::new(SIZE, SIZE).with_ensemble_size(n);
    EnsembleModel::new(config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Copies decoder 0 into every other decoder.
fn cloned_members(n: usize, seed: u64) -> EnsembleModel {
    let mut m = model(n, seed);
    let first = m.decoder_param_ids(0);
    for k in 1..n {
        for (src, dst) in first.iter().zip(m.decoder_param_ids(k)) {
            let value = m.params().get(*src).value.clone();
            m.params_mut().get_mut(dst).value = value;
        }
    }
    m
}

fn ctx<'a>(
    model: &'a EnsembleModel,
    obs: &'a SceneObservation,
    config: &'a AcquisitionConfig,
    interaction: usize,
    budget: usize,
) -> SelectionContext<'a> {
    SelectionContext {
        model,
        obs,
        config,
        interaction,
        budget,
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn registry_knows_every_method() {
    let registry = StrategyRegistry::default();
    assert_eq!(
        registry.names(),
        ["ida", "jsd", "greedy", "random", "where2act", "random-ens", "ida-no-ens"]
    );
    for name in registry.names() {
        assert_eq!(registry.get(name).unwrap().name(), name);
    }
    assert!(matches!(registry.get("thompson"), Err(Error::UnknownName { .. })));
}

#[test]
fn registering_a_name_again_replaces_it() {
    let mut registry = StrategyRegistry::empty();
    registry.register(Box::new(Where2Act { temperature: 0.5 }));
    registry.register(Box::new(Where2Act::default()));
    assert_eq!(registry.names(), ["where2act"]);
}

#[test]
fn single_network_methods_use_one_decoder() {
    let registry = StrategyRegistry::default();
    for (name, size) in [
        ("ida", 5),
        ("jsd", 5),
        ("greedy", 1),
        ("random", 1),
        ("where2act", 1),
        ("random-ens", 5),
        ("ida-no-ens", 5),
    ] {
        assert_eq!(registry.get(name).unwrap().ensemble_size(5), size, "{name}");
    }
}

#[test]
fn where2act_explores_uniformly_in_the_first_half() {
    let m = model(1, 1);
    let obs = observation(2);
    let config = AcquisitionConfig::default();
    for interaction in [0, 10, 49] {
        let a = Where2Act::default().select_training(&ctx(&m, &obs, &config, interaction, 100), &mut rng(interaction as u64));
        let b = RandomPolicy.select_training(&ctx(&m, &obs, &config, interaction, 100), &mut rng(interaction as u64));
        assert_eq!(a.unwrap(), b.unwrap());
    }
    // second half follows the Boltzmann draw instead
    let maps = m.affordance_maps(&obs).unwrap();
    let scores = mask_invalid(maps.mean, SIZE, SIZE, &obs.valid_mask, Provenance::Boltzmann).unwrap();
    let expected = boltzmann_sample(&scores, 1.0, &mut rng(7)).unwrap();
    let got = Where2Act::default().select_training(&ctx(&m, &obs, &config, 50, 100), &mut rng(7));
    assert_eq!(got.unwrap(), expected);
}

#[test]
fn boltzmann_frequencies_match_softmax() {
    let values = vec![0.2, 0.9, 0.5];
    let scores = mask_invalid(values.clone(), 1, 1, &[true], Provenance::Boltzmann).unwrap();
    let z: f64 = values.iter().map(|v| v.exp()).sum();
    let mut counts = [0usize; 3];
    let mut r = rng(11);
    let draws = 100_000;
    for _ in 0..draws {
        counts[boltzmann_sample(&scores, 1.0, &mut r).unwrap().orientation] += 1;
    }
    for k in 0..3 {
        let freq = counts[k] as f64 / draws as f64;
        assert!((freq - values[k].exp() / z).abs() < 0.01, "{k}: {freq}");
    }
}

#[test]
fn boltzmann_never_picks_masked_cells() {
    let scores = mask_invalid(vec![5.0, 0.0, 5.0, 0.0], 2, 2, &[false, true, false, true], Provenance::Boltzmann).unwrap();
    let mut r = rng(0);
    for _ in 0..1000 {
        let a = boltzmann_sample(&scores, 1.0, &mut r).unwrap();
        assert_eq!(a.col, 1);
    }
}

#[test]
fn jsd_without_disagreement_takes_first_valid_action() {
    let m = cloned_members(3, 4);
    let obs = observation(5);
    let config = AcquisitionConfig::default();
    let registry = StrategyRegistry::default();
    let got = registry
        .get("jsd")
        .unwrap()
        .select_training(&ctx(&m, &obs, &config, 0, 10), &mut rng(0))
        .unwrap();
    let first = obs.valid_mask.iter().position(|&v| v).unwrap();
    assert_eq!(got, Action::new(first / SIZE, first % SIZE, 0));
}

#[test]
fn ida_without_exploration_on_one_network_is_greedy() {
    let m = model(1, 6);
    let config = AcquisitionConfig::new(0.0, 0.1).unwrap();
    for seed in 0..5 {
        let obs = observation(seed);
        let ida = Ida.select_training(&ctx(&m, &obs, &config, 0, 10), &mut rng(seed)).unwrap();
        let greedy = Greedy.select_training(&ctx(&m, &obs, &config, 0, 10), &mut rng(seed)).unwrap();
        assert_eq!(ida, greedy);
    }
}

#[test]
fn ida_variants_differ_only_in_reward_source() {
    let registry = StrategyRegistry::default();
    let config = AcquisitionConfig::default();
    let obs = observation(8);

    // identical members make the sampled member equal to the mean
    let same = cloned_members(4, 9);
    let a = registry.get("ida").unwrap().select_training(&ctx(&same, &obs, &config, 0, 10), &mut rng(1));
    let b = registry.get("ida-no-ens").unwrap().select_training(&ctx(&same, &obs, &config, 0, 10), &mut rng(1));
    assert_eq!(a.unwrap(), b.unwrap());

    let m = model(4, 10);
    let maps = m.affordance_maps(&obs).unwrap();
    let expected = ucb_map(&maps, &maps.mean, &obs.valid_mask, &config).unwrap().argmax().unwrap();
    let got = registry.get("ida-no-ens").unwrap().select_training(&ctx(&m, &obs, &config, 0, 10), &mut rng(2));
    assert_eq!(got.unwrap(), expected);
}

#[test]
fn evaluation_rules_follow_the_model_variant() {
    let registry = StrategyRegistry::default();
    let config = AcquisitionConfig::default();
    let obs = observation(12);
    let ensemble = model(5, 13);
    let maps = ensemble.affordance_maps(&obs).unwrap();
    let pessimistic = pessimistic_map(&maps, &obs.valid_mask, &config).unwrap().argmax().unwrap();
    for name in ["ida", "jsd", "random-ens", "ida-no-ens"] {
        let got = registry.get(name).unwrap().select_eval(&ensemble, &obs, &config).unwrap();
        assert_eq!(got, pessimistic, "{name}");
    }

    let no_penalty = AcquisitionConfig::new(0.3, 0.0).unwrap();
    let mean_argmax = mask_invalid(maps.mean.clone(), SIZE, SIZE, &obs.valid_mask, Provenance::Greedy)
        .unwrap()
        .argmax()
        .unwrap();
    assert_eq!(registry.get("ida").unwrap().select_eval(&ensemble, &obs, &no_penalty).unwrap(), mean_argmax);

    let single = model(1, 14);
    let greedy = registry.get("greedy").unwrap();
    let train = greedy.select_training(&ctx(&single, &obs, &config, 0, 10), &mut rng(0)).unwrap();
    for name in ["greedy", "random", "where2act"] {
        assert_eq!(registry.get(name).unwrap().select_eval(&single, &obs, &config).unwrap(), train, "{name}");
    }
}

#[test]
fn uniform_actions_stay_valid() {
    let obs = observation(15);
    let mut r = rng(3);
    for _ in 0..2000 {
        let a = uniform_valid_action(&obs, 8, &mut r).unwrap();
        assert!(obs.valid_mask[a.row * SIZE + a.col]);
        assert!(a.orientation < 8);
    }
    let blocked = SceneObservation {
        valid_mask: vec![false; SIZE * SIZE],
        ..obs
    };
    assert!(matches!(uniform_valid_action(&blocked, 8, &mut r), Err(Error::NoValidCells)));
}
