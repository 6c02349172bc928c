use super::*;
use crate::data::SyntheticSpec;

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.train.iter_max = 6;
    cfg.train.pretrain_steps = 2;
    cfg.train.classes_per_batch = 4;
    cfg.train.samples_per_class = 2;
    cfg.train.seed = 3;
    cfg.train.lr_init = 1e-3;
    cfg.model.metric_hidden = vec![16];
    cfg.synthetic = SyntheticSpec {
        num_classes: 5,
        sketches_per_class: 6,
        shapes_per_class: 3,
        input_dim: 10,
        latent_dim: 4,
        n_views: 3,
        ..SyntheticSpec::default()
    };
    cfg
}

fn setup(cfg: &RunConfig) -> (Dataset, TrainState, Trainer) {
    let ds = cfg.dataset().unwrap();
    let state = TrainState::new(cfg, ds.input_dim).unwrap();
    let trainer = Trainer::new(&ds, &state).unwrap();
    (ds, state, trainer)
}

fn snapshot(net: &crate::networks::Network) -> Vec<Tensor> {
    net.trainable().into_iter().cloned().collect()
}

#[test]
fn learning_rate_schedule() {
    let cfg = TrainConfig {
        lr_init: 0.5,
        decay_start_step: 10,
        decay_rate: 0.5,
        ..TrainConfig::default()
    };
    assert_eq!(learning_rate(0, &cfg), 0.5);
    assert_eq!(learning_rate(10, &cfg), 0.5);
    assert_eq!(learning_rate(11, &cfg), 0.25);
    assert_eq!(learning_rate(13, &cfg), 0.0625);
    let mut prev = f64::INFINITY;
    for k in 0..40 {
        let lr = learning_rate(k, &cfg);
        assert!(lr <= prev);
        prev = lr;
    }
}

#[test]
fn sub_updates_touch_only_their_group() {
    let cfg = small_config();
    let (_, mut state, trainer) = setup(&cfg);
    let all = |s: &TrainState| {
        [
            snapshot(&s.model.sketch_net),
            snapshot(&s.model.shape_net),
            snapshot(&s.model.discriminator),
            snapshot(&s.model.transform_net),
        ]
    };
    type Update = fn(&Trainer, &mut TrainState) -> Result<()>;
    let updates: [Update; 4] = [
        |t, s| t.update_sketch_encoder(s, 1e-2).map(drop),
        |t, s| t.update_shape_encoder(s, 1e-2).map(drop),
        |t, s| t.update_discriminator(s, 1e-2).map(drop),
        |t, s| t.update_transform(s, 1e-2).map(drop),
    ];
    for (group, update) in updates.iter().enumerate() {
        let before = all(&state);
        update(&trainer, &mut state).unwrap();
        let after = all(&state);
        for g in 0..4 {
            if g == group {
                assert_ne!(before[g], after[g], "group {g} did not move");
            } else {
                assert_eq!(before[g], after[g], "group {g} changed during update {group}");
            }
        }
    }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let cfg = small_config();
    let (_, mut state, trainer) = setup(&cfg);
    let before = (
        snapshot(&state.model.sketch_net),
        snapshot(&state.model.shape_net),
        snapshot(&state.model.discriminator),
        snapshot(&state.model.transform_net),
    );
    trainer.update_sketch_encoder(&mut state, 0.0).unwrap();
    trainer.update_shape_encoder(&mut state, 0.0).unwrap();
    trainer.update_discriminator(&mut state, 0.0).unwrap();
    trainer.update_transform(&mut state, 0.0).unwrap();
    let after = (
        snapshot(&state.model.sketch_net),
        snapshot(&state.model.shape_net),
        snapshot(&state.model.discriminator),
        snapshot(&state.model.transform_net),
    );
    assert_eq!(before, after);
}

#[test]
fn train_step_reports_every_loss() {
    let cfg = small_config();
    let (_, mut state, trainer) = setup(&cfg);
    trainer.pretrain(&mut state).unwrap();
    assert_eq!(state.history.len(), 8);
    let report = trainer.train_step(&mut state).unwrap();
    assert_eq!(state.step, 1);
    assert!(report.entries().iter().all(|(_, v)| v.is_some_and(f64::is_finite)));
    assert!(report.transform_identity_holds());
    let row = loss_csv_row(state.history.last().unwrap());
    assert_eq!(row.split(',').count(), LOSS_CSV_HEADER.split(',').count());
    assert!(row.starts_with("1,"));
}

#[test]
fn encoders_only_leaves_adversarial_columns_empty() {
    let mut cfg = small_config();
    cfg.train.encoders_only = true;
    let (_, mut state, trainer) = setup(&cfg);
    let tr = snapshot(&state.model.transform_net);
    trainer.run(&mut state, |_| Ok(())).unwrap();
    assert_eq!(state.step, cfg.train.iter_max);
    assert_eq!(snapshot(&state.model.transform_net), tr);
    let row = loss_csv_row(state.train_records().next().unwrap());
    assert!(row.contains(",,,,,"), "{row}");
}

#[test]
fn iter_max_is_enforced() {
    let mut cfg = small_config();
    cfg.train.iter_max = 1;
    let (_, mut state, trainer) = setup(&cfg);
    trainer.train_step(&mut state).unwrap();
    assert!(matches!(trainer.train_step(&mut state), Err(DcaError::Contract(_))));
}

#[test]
fn non_finite_loss_aborts() {
    let cfg = small_config();
    let (_, mut state, trainer) = setup(&cfg);
    state.model.sketch_net.params.layers[1].bias.data_mut()[0] = f64::NAN;
    let err = trainer.train_step(&mut state).unwrap_err();
    assert!(matches!(err, DcaError::NonFiniteLoss { step: 0, loss: "L1_iaml" }), "{err}");
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let cfg = small_config();
    let (_, mut state, trainer) = setup(&cfg);
    trainer.pretrain(&mut state).unwrap();
    trainer.train_step(&mut state).unwrap();
    let bytes = write_checkpoint(&state);
    let loaded = read_checkpoint(&bytes).unwrap();
    assert_eq!(write_checkpoint(&loaded), bytes);
    assert_eq!(loaded.model, state.model);
    assert_eq!(loaded.optim, state.optim);
    assert_eq!(loaded.history, state.history);

    let mut corrupt = bytes.clone();
    let mid = corrupt.len() / 2;
    corrupt[mid] ^= 0xff;
    assert!(matches!(read_checkpoint(&corrupt), Err(DcaError::Integrity(_))));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let cfg = small_config();
    let (ds, mut a, trainer) = setup(&cfg);
    trainer.pretrain(&mut a).unwrap();
    for _ in 0..2 {
        trainer.train_step(&mut a).unwrap();
    }
    let mut b = read_checkpoint(&write_checkpoint(&a)).unwrap();
    let trainer_b = Trainer::new(&ds, &b).unwrap();
    for _ in 0..3 {
        let ra = trainer.train_step(&mut a).unwrap();
        let rb = trainer_b.train_step(&mut b).unwrap();
        assert_eq!(ra, rb);
    }
    assert_eq!(a.model, b.model);
}
