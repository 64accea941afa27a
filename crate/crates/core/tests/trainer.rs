mod common;

use common::{gradient_fixture, rng, small_config, small_stream};
use contlab::dynamics::{dynamics_loss, predict_distribution};
use contlab::encoder::{contrastive_loss, project};
use contlab::moe::gen_score;
use contlab::numerics::cross_entropy;
use contlab::numerics::gradcheck::{max_relative_error, numerical_gradient, STEP};
use contlab::stream::{Batch, Split};
use contlab::trainer::{
    ablation_table, run_ablations, train_continual, train_event, Checkpoint, EvalLog, Model,
    Objective, TrainConfig, Variant,
};
use contlab::Error;

#[test]
fn loss_components_recompose() {
    let (model, inputs) = gradient_fixture(1);
    let ids = model.trainable();
    let l = model
        .loss_at(&inputs, &ids, &model.param_values(&ids))
        .unwrap();
    let c = &model.config;

    // every term recomputed through the value-level functions
    let b = &inputs.batch;
    let (zt, zv) = project(&b.xt, &b.xv, &model.encoder).unwrap();
    let cl = contrastive_loss(&zt, &zv, c.xi).unwrap();
    let z = model.features(b).unwrap();
    let e = model.train_features(&z).unwrap();
    let vp = cross_entropy(&model.classifier.logits(&e, &inputs.env).unwrap(), &b.y).unwrap();
    let latest = model.dpm.experts.last().unwrap();
    assert_eq!(inputs.z, z);
    let vg =
        gen_score(latest, &inputs.z).unwrap() + gen_score(&model.shared.expert, &inputs.z).unwrap();
    let pred = predict_distribution(
        b.t,
        inputs.init.as_ref().unwrap(),
        &model.dynamics,
        &c.solver,
    )
    .unwrap();
    let dm = dynamics_loss(&pred, inputs.target.as_ref().unwrap()).unwrap();

    for (got, want) in [(l.vp, vp), (l.cl, cl), (l.vg, vg), (l.dm, dm)] {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
    assert!(dm > 0.0 && vg > 0.0);
    let total = vp + c.alpha * cl + c.beta * vg + c.gamma * dm;
    assert!((l.total - total).abs() < 1e-12);
    assert!((l.total - l.recompose(0.1, 0.1, 1.0)).abs() < 1e-12);
}

#[test]
fn zero_weights_leave_only_the_veracity_loss() {
    let (mut model, inputs) = gradient_fixture(2);
    model.config.alpha = 0.0;
    model.config.beta = 0.0;
    model.config.gamma = 0.0;
    let ids = model.trainable();
    let l = model
        .loss_at(&inputs, &ids, &model.param_values(&ids))
        .unwrap();
    assert_eq!(l.total, l.vp);
    assert!(l.cl != 0.0 && l.dm != 0.0);
}

#[test]
fn total_gradient_matches_finite_differences() {
    let (model, inputs) = gradient_fixture(3);
    let ids = model.trainable();
    let params = model.param_values(&ids);
    let (_, grads) = model
        .loss_and_grads(&inputs, &ids, &params, Objective::Total)
        .unwrap();
    let numeric = numerical_gradient(&params, STEP, |p| {
        Ok(model.loss_at(&inputs, &ids, p)?.total)
    })
    .unwrap();
    let err = max_relative_error(&grads, &numeric);
    assert!(err < 1e-4, "{err}");
}

fn event_samples(seed: u64) -> contlab::stream::Stream {
    small_stream(seed, 2, 200, 0.0, 0.0)
}

#[test]
fn constant_model_stops_after_patience_plus_one_epochs() {
    let s = event_samples(4);
    let config = TrainConfig {
        learning_rate: 1e-300,
        use_env_feature: false,
        patience: 3,
        max_epochs: 20,
        ..small_config(4)
    };
    let mut model = Model::new(config).unwrap();
    let h = train_event(
        &mut model,
        &s.samples_of(1, Split::Train),
        1,
        &mut Vec::new(),
    )
    .unwrap();
    assert_eq!(h.epochs.len(), 4);
    assert!(h.stopped_early);
    assert_eq!(h.best_epoch, 0);
}

#[test]
fn patience_beyond_budget_runs_every_epoch() {
    let s = event_samples(5);
    let config = TrainConfig {
        patience: 50,
        max_epochs: 3,
        ..small_config(5)
    };
    let mut model = Model::new(config).unwrap();
    let h = train_event(
        &mut model,
        &s.samples_of(1, Split::Train),
        1,
        &mut Vec::new(),
    )
    .unwrap();
    assert_eq!(h.epochs.len(), 3);
    assert!(!h.stopped_early);
}

#[test]
fn separable_event_is_learned() {
    let s = contlab::stream::generate(&contlab::stream::GenConfig {
        num_events: 1,
        samples_per_event: 400,
        d_t: 4,
        d_v: 4,
        fake_shift: 8.0,
        include_future: false,
        seed: 6,
        ..Default::default()
    })
    .unwrap();
    let config = TrainConfig {
        learning_rate: 1e-2,
        max_epochs: 20,
        ..small_config(6)
    };
    let mut model = Model::new(config).unwrap();
    let train = s.samples_of(1, Split::Train);
    train_event(&mut model, &train, 1, &mut Vec::new()).unwrap();
    let acc = model
        .evaluate(&Batch::from_samples(&train).unwrap(), 1.0, &mut rng(0))
        .unwrap()
        .accuracy;
    assert!(acc >= 0.95, "{acc}");
}

#[test]
fn event_preconditions() {
    let s = event_samples(7);
    let train = s.samples_of(1, Split::Train);
    let mut model = Model::new(small_config(7)).unwrap();
    assert!(matches!(
        train_event(&mut model, &train[..9], 1, &mut Vec::new()),
        Err(Error::Input(_))
    ));
    let mut tiny = Model::new(TrainConfig {
        val_fraction: 0.01,
        ..small_config(7)
    })
    .unwrap();
    assert!(matches!(
        train_event(&mut tiny, &train[..20], 1, &mut Vec::new()),
        Err(Error::Config(_))
    ));
    let mut model = Model::new(small_config(7)).unwrap();
    model.begin_event(1).unwrap();
    let one = Batch::from_samples(&train[..1]).unwrap();
    assert!(model.train_step(&one).is_err());
}

#[test]
fn identical_runs_give_identical_logs() {
    let s = small_stream(8, 3, 120, 1.0, 1.0);
    let a = train_continual(&s, &small_config(8)).unwrap();
    let b = train_continual(&s, &small_config(8)).unwrap();
    assert_eq!(a.log.to_json().unwrap(), b.log.to_json().unwrap());
    assert_eq!(
        EvalLog::from_json(&a.log.to_json().unwrap()).unwrap(),
        a.log
    );
    let m = &a.log.accuracy;
    assert_eq!((m.num_rows(), m.num_cols()), (3, 4));
    assert!(m.rows.iter().flatten().all(Option::is_some));
    assert_eq!(a.log.future.len(), 3);
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let s = small_stream(9, 2, 100, 1.0, 1.0);
    let out = train_continual(&s, &small_config(9)).unwrap();
    let ck = Checkpoint::new(out.model);
    let text = ck.to_json().unwrap();
    let back = Checkpoint::from_json(&text).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_json().unwrap(), text);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    let bad = text.replacen("contlab-checkpoint", "other", 1);
    assert!(Checkpoint::from_json(&bad).is_err());
}

#[test]
fn frozen_expert_is_untouched_by_later_events() {
    let s = small_stream(10, 2, 150, 3.0, 0.0);
    let config = TrainConfig {
        use_dpm: false,
        ..small_config(10)
    };
    let mut model = Model::new(config).unwrap();
    let mut exp = Vec::new();
    train_event(&mut model, &s.samples_of(1, Split::Train), 1, &mut exp).unwrap();
    let first = model.dpm.experts[0].clone();
    train_event(&mut model, &s.samples_of(2, Split::Train), 2, &mut exp).unwrap();
    assert_eq!(model.dpm.num_experts(), 2);
    let after = &model.dpm.experts[0];
    assert!(after.frozen);
    for (a, b) in [
        (&first.disc_a, &after.disc_a),
        (&first.disc_b, &after.disc_b),
        (&first.gen_enc, &after.gen_enc),
    ] {
        let bits = |t: &contlab::numerics::Tensor| {
            t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(bits(a), bits(b));
    }
    assert_ne!(model.dpm.experts[1], first);
}

#[test]
fn unit_epsilon_keeps_the_shadow_for_a_thousand_steps() {
    let s = small_stream(11, 1, 300, 0.0, 0.0);
    let config = TrainConfig {
        epsilon: 1.0,
        ..small_config(11)
    };
    let mut model = Model::new(config).unwrap();
    model.begin_event(1).unwrap();
    let (a0, b0) = (model.shared.shadow_a.clone(), model.shared.shadow_b.clone());
    let train = s.samples_of(1, Split::Train);
    let batches = contlab::stream::batch_iter(train.len(), 8, 11, 1, 0).unwrap();
    for step in 0..1000 {
        let idx = &batches[step % batches.len()];
        let rows: Vec<_> = idx.iter().map(|&i| train[i]).collect();
        model
            .train_step(&Batch::from_samples(&rows).unwrap())
            .unwrap();
    }
    assert_eq!(model.steps, 1000);
    assert_eq!(model.shared.shadow_a, a0);
    assert_eq!(model.shared.shadow_b, b0);
    assert_ne!(model.shared.expert.disc_a, a0);
}

#[test]
fn fixed_roster_without_expansion() {
    let s = small_stream(12, 5, 80, 0.0, 0.0);
    let config = TrainConfig {
        use_dpm: false,
        max_epochs: 1,
        ..small_config(12)
    };
    let out = train_continual(&s, &config).unwrap();
    assert_eq!(out.log.expert_count, 4);
    assert!(out.log.expansions.is_empty());
}

#[test]
fn disabled_environment_feature_is_zero() {
    let s = small_stream(13, 2, 80, 0.0, 1.0);
    let config = Variant::NoEnvFeature.apply(&TrainConfig {
        max_epochs: 2,
        ..small_config(13)
    });
    let out = train_continual(&s, &config).unwrap();
    let env = out.model.env_features(5, 3.0, &mut rng(0)).unwrap();
    assert_eq!(env.shape(), &[5, 4]);
    assert!(env.data().iter().all(|&v| v == 0.0));
    assert_eq!(out.model.classifier.w.rows(), 8);
    assert!(out.model.init_state.gaussian().is_none());
}

#[test]
fn identical_events_forget_little() {
    let mut gaps: Vec<f64> = (1..=5)
        .map(|seed| {
            let s = small_stream(seed, 2, 2000, 0.0, 0.0);
            // event 1 must be trained to convergence, or event 2 just keeps improving it
            let config = TrainConfig {
                learning_rate: 3e-3,
                patience: 15,
                val_fraction: 0.2,
                max_epochs: 100,
                ..small_config(seed)
            };
            let out = train_continual(&s, &config).unwrap();
            let m = &out.log.accuracy;
            (m.get(1, 0).unwrap() - m.get(0, 0).unwrap()).abs()
        })
        .collect();
    gaps.sort_by(f64::total_cmp);
    assert!(gaps[2] <= 0.02, "{gaps:?}");
}

#[test]
fn ablation_bookkeeping() {
    let s = small_stream(14, 2, 80, 1.0, 1.0);
    let config = TrainConfig {
        max_epochs: 1,
        ..small_config(14)
    };
    let runs = run_ablations(&s, &config, &[1, 2]).unwrap();
    assert_eq!(runs.len(), 8);
    for v in Variant::ALL {
        assert_eq!(runs.iter().filter(|r| r.variant == v).count(), 2);
    }
    assert!(run_ablations(&s, &config, &[]).is_err());
    let pairs: Vec<_> = runs
        .iter()
        .map(|r| (r.variant, r.output.log.headline()))
        .collect();
    let table = ablation_table(&pairs).unwrap();
    assert_eq!(table.len(), 4);
    assert_eq!(table[0].variant, Variant::Full);
    assert_eq!(table[0].avg_delta, 0.0);
    for row in &table {
        let mine: Vec<[f64; 5]> = pairs
            .iter()
            .filter(|(v, _)| *v == row.variant)
            .map(|(_, m)| m.as_array())
            .collect();
        for (i, mean) in row.mean.iter().enumerate() {
            assert!((mean - (mine[0][i] + mine[1][i]) / 2.0).abs() < 1e-12);
        }
    }
}

#[test]
fn config_validation_names_the_field() {
    for (text, field) in [
        ("alpha = -1.0", "alpha"),
        ("batch_size = 1", "batch_size"),
        ("patience = 0", "patience"),
        ("[dims]\nr = 8", "dims.r"),
    ] {
        match TrainConfig::from_toml(text) {
            Err(Error::Config(m)) => assert!(m.contains(field), "{m}"),
            other => panic!("{text}: {other:?}"),
        }
    }
    assert!(TrainConfig::from_toml("bogus = 1").is_err());
    let mut c = TrainConfig::default();
    assert!(c.set_param("gamma", 10.0).is_ok());
    assert!(c.set_param("nope", 1.0).is_err());
}
