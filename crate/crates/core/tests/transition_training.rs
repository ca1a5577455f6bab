use commdecode::planner::{value_iteration, TemperedQ};
use commdecode::rng::seeded;
use commdecode::transition::{
    factor_accuracy, generate_transitions, rollout_accuracy, rollout_accuracy_from, train_transition,
    TransitionTrainConfig,
};
use commdecode::{Cell, GridConfig, State};

#[test]
fn trained_model_matches_env_and_rolls_out_exactly() {
    let g = GridConfig::default();
    let q = value_iteration(&g).unwrap();
    let demo = TemperedQ { q: &q, temperature: 0.0 };
    let cfg = TransitionTrainConfig::default();
    let data = generate_transitions(&demo, &g, cfg.dataset_size, 11).unwrap();
    let trained = train_transition(&g, &data, &cfg, &mut seeded(12)).unwrap();
    let first = trained.first_step_below(1e-3);
    assert!(first.is_some_and(|k| k <= 1000), "loss never fell below 1e-3: {first:?}");

    let held_out = generate_transitions(&demo, &g, 5000, 99).unwrap();
    assert_eq!(factor_accuracy(&trained.model, &held_out).unwrap(), [1.0; 4]);
    assert_eq!(rollout_accuracy(&trained.model, &demo, 1000, 5).unwrap(), 1.0);
}

#[test]
fn narrow_training_data_does_not_transfer() {
    let g = GridConfig::default();
    let q = value_iteration(&g).unwrap();
    let demo = TemperedQ { q: &q, temperature: 0.0 };
    let corner = Cell::new(0, 0);
    let data: Vec<_> = generate_transitions(&demo, &g, 20_000, 3)
        .unwrap()
        .into_iter()
        .filter(|s| s.next[0] == corner.x && s.next[1] == corner.y)
        .collect();
    assert!(!data.is_empty());
    let cfg = TransitionTrainConfig {
        steps: 300,
        ..TransitionTrainConfig::default()
    };
    let trained = train_transition(&g, &data, &cfg, &mut seeded(4)).unwrap();

    let seen: Vec<State> = g.start_states().filter(|s| s.goal == corner).collect();
    let far = Cell::new(4, 4);
    let unseen: Vec<State> = g.start_states().filter(|s| s.goal == far).collect();
    let on_seen = rollout_accuracy_from(&trained.model, &demo, &seen, 1).unwrap();
    let on_unseen = rollout_accuracy_from(&trained.model, &demo, &unseen, 1).unwrap();
    assert!(on_unseen < 1.0, "unseen goal rolled out perfectly");
    assert!(on_unseen < on_seen, "seen {on_seen} unseen {on_unseen}");
}
