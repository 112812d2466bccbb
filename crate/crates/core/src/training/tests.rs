use super::*;
use crate::ingestion::{generate_synthetic, SyntheticConfig, YearMonth};
use crate::models::Predictor;
use rand::Rng;

fn toy_scenario(months: u32, stride: usize) -> PreparedScenario {
    let mut cfg = SyntheticConfig::uniform(3, months, 20.0);
    cfg.noise_scale = 0.1;
    cfg.slope = vec![0.02, 0.0, -0.01];
    cfg.seed = 4;
    let cube = generate_synthetic(&cfg).unwrap();
    let test_month = cfg.start.add_months(months as i64 - 1);
    let mut spec = ScenarioSpec::new(test_month, months - 1);
    spec.train_stride = stride;
    PreparedScenario::build(&cube, &spec, 1.0).unwrap()
}

fn quick_cfg() -> TrainConfig {
    TrainConfig {
        hidden: 4,
        max_epochs: 3,
        batch_size: 16,
        classifier: ClassifierConfig {
            hidden: 4,
            epochs: 2,
            ..Default::default()
        },
        ..Default::default()
    }
}

#[test]
fn data_loss_examples() {
    let y = vec![
        Array2::from_elem((2, 2), 1.0),
        Array2::from_elem((2, 2), 3.0),
    ];
    assert_eq!(weighted_data_loss(&y, &y, &[1.0, 1.0]).unwrap(), 0.0);
    let p = vec![
        Array2::from_elem((2, 2), 3.0),
        Array2::from_elem((2, 2), 7.0),
    ];
    // per-sample MAEs 2 and 4
    assert_eq!(weighted_data_loss(&p, &y, &[1.0, 0.5]).unwrap(), 2.0);
    assert_eq!(weighted_data_loss(&p, &y, &[1.0, 1.0]).unwrap(), 3.0);
    assert!(weighted_data_loss(&p, &y, &[1.0]).is_err());
}

#[test]
fn total_loss_examples() {
    assert_eq!(total_loss(0.7, 2.0, 3.0, 0.0).total, 0.7);
    assert!((total_loss(1.0, 2.0, 3.0, 0.1).total - 1.5).abs() < 1e-15);
    assert_eq!(total_loss(0.7, 0.0, 0.0, 10.0).total, 0.7);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    let bad = TrainConfig {
        stop_patience: 3,
        ..Default::default()
    };
    assert!(bad.validate().is_err());
    let odd = TrainConfig {
        env_dim: 3,
        ..Default::default()
    };
    assert!(odd.validate().is_err());
}

#[test]
fn grid_tie_breaks_to_smallest() {
    let (points, best) = grid_search(&HYPER_GRID, &HYPER_GRID, |_, _| Ok(1.0)).unwrap();
    assert_eq!(points.len(), 9);
    assert_eq!((best.alpha, best.beta), (0.1, 0.1));
    let (_, only) = grid_search(&[1.0], &[10.0], |_, _| Ok(3.0)).unwrap();
    assert_eq!((only.alpha, only.beta), (1.0, 10.0));
    let (_, best) = grid_search(&HYPER_GRID, &HYPER_GRID, |a, b| {
        Ok(if a == 10.0 { 0.5 } else { 1.0 } + b)
    })
    .unwrap();
    assert_eq!((best.alpha, best.beta), (10.0, 0.1));
}

fn fd_check<F: Forecaster>(model: F) {
    let data = toy_scenario(4, 97);
    let cfg = quick_cfg();
    let mut opts = FitOptions::shift_aware(0.3);
    opts.vrex_coef = 0.5;
    let mut t = Trainer::new(model, data.geo.clone(), data.n_months(), opts, &cfg).unwrap();
    // spread the pools so every month-to-month difference is far from the kink
    let mut rng = stream_rng(9, 0);
    if let Some(env) = t.env.as_mut() {
        for v in env.params_mut().groups_mut()[0].data.iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    if let Some(nodes) = t.nodes.as_mut() {
        for v in nodes.params_mut().groups_mut()[0].data.iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    let batch: Vec<&PreparedSample> = data.train.iter().take(12).collect();
    let w: Vec<f64> = (0..batch.len()).map(|i| 0.5 + i as f64 * 0.1).collect();
    let (lb, g) = t.loss_and_grad(&batch, &w).unwrap();
    assert!(lb.penalty > 0.0);
    let h = 1e-6;
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-7);
    for _ in 0..20 {
        let which = rng.gen_range(0..3);
        let (an, num) = match which {
            0 => {
                let k = rng.gen_range(0..t.model.params().len());
                let v = t.model.params().get_flat(k);
                t.model.params_mut().set_flat(k, v + h);
                let up = t.loss(&batch, &w).unwrap().total;
                t.model.params_mut().set_flat(k, v - h);
                let dn = t.loss(&batch, &w).unwrap().total;
                t.model.params_mut().set_flat(k, v);
                (g.model.get_flat(k), (up - dn) / (2.0 * h))
            }
            1 => {
                let k = rng.gen_range(0..t.env.as_ref().unwrap().params().len());
                let v = t.env.as_ref().unwrap().params().get_flat(k);
                t.env.as_mut().unwrap().params_mut().set_flat(k, v + h);
                let up = t.loss(&batch, &w).unwrap().total;
                t.env.as_mut().unwrap().params_mut().set_flat(k, v - h);
                let dn = t.loss(&batch, &w).unwrap().total;
                t.env.as_mut().unwrap().params_mut().set_flat(k, v);
                (g.env.as_ref().unwrap().get_flat(k), (up - dn) / (2.0 * h))
            }
            _ => {
                let Some(nodes) = t.nodes.as_ref() else {
                    continue;
                };
                let k = rng.gen_range(0..nodes.params().len());
                let v = nodes.params().get_flat(k);
                t.nodes.as_mut().unwrap().params_mut().set_flat(k, v + h);
                let up = t.loss(&batch, &w).unwrap().total;
                t.nodes.as_mut().unwrap().params_mut().set_flat(k, v - h);
                let dn = t.loss(&batch, &w).unwrap().total;
                t.nodes.as_mut().unwrap().params_mut().set_flat(k, v);
                (g.nodes.as_ref().unwrap().get_flat(k), (up - dn) / (2.0 * h))
            }
        };
        assert!(
            rel(an, num) <= 1e-3,
            "param set {which}: analytic {an} numeric {num}"
        );
    }
}

#[test]
fn total_loss_gradients_match_finite_differences() {
    fd_check(Predictor::gru(5, 1));
    fd_check(Predictor::tconv(5, 1));
}

#[test]
fn tconv_ignores_learned_adjacency() {
    let data = toy_scenario(4, 97);
    let t = Trainer::new(
        Predictor::tconv(4, 0),
        data.geo.clone(),
        3,
        FitOptions::shift_aware(1.0),
        &quick_cfg(),
    )
    .unwrap();
    assert!(t.nodes.is_none());
    assert!(t.env.is_some());
    assert_eq!(t.adjacency(2).unwrap(), data.geo);
}

fn logs(env: EnvMode, w: f64) -> Vec<EpochLog> {
    let data = toy_scenario(4, 24);
    let cfg = quick_cfg();
    let opts = FitOptions {
        env,
        alpha: 0.0,
        ..FitOptions::plain()
    };
    let mut t = Trainer::new(
        Predictor::gru(4, cfg.seed),
        data.geo.clone(),
        data.n_months(),
        opts,
        &cfg,
    )
    .unwrap();
    let train: Vec<&PreparedSample> = data.train.iter().collect();
    t.fit(
        &train,
        &vec![w; train.len()],
        &data.validation,
        &data.normalizer,
        &cfg,
    )
    .unwrap()
    .log
}

#[test]
fn zero_env_and_unit_weights_match_plain_training() {
    let plain = logs(EnvMode::Off, 1.0);
    assert_eq!(plain.len(), 3);
    assert_eq!(plain, logs(EnvMode::Zero, 1.0));
    assert_eq!(plain, logs(EnvMode::Off, 1.0));
}

#[test]
fn pipeline_degenerate_span_and_artifacts() {
    // 12-month span: every training sample is recent
    let data = toy_scenario(13, 200);
    let cfg = TrainConfig {
        max_epochs: 1,
        ..quick_cfg()
    };
    let opts = PipelineOptions {
        fit: FitOptions::shift_aware(0.1),
        reweight: true,
    };
    let run = two_stage_pipeline(Predictor::gru(4, 0), &data, &opts, &cfg, None).unwrap();
    assert!(run.degenerate_classifier);
    assert!(run.weights.iter().all(|r| r.p == 1.0));
    // recency decay alone orders the weights
    let w_of = |d: u32| run.weights.iter().find(|r| r.delta == d).unwrap().w;
    assert!(w_of(2) > w_of(12));

    let dir = tempfile::tempdir().unwrap();
    run.save(dir.path(), &data.normalizer, &cfg).unwrap();
    for f in ["weights.csv", "train_log.csv", "checkpoint/manifest.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn checkpoint_round_trip_reproduces_validation_mae() {
    let data = toy_scenario(4, 24);
    let cfg = TrainConfig {
        max_epochs: 2,
        ..quick_cfg()
    };
    let opts = PipelineOptions {
        fit: FitOptions::shift_aware(0.1),
        reweight: true,
    };
    let run = two_stage_pipeline(Predictor::gru(4, 0), &data, &opts, &cfg, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ck = Checkpoint::capture(&run.trainer, &data.normalizer, &run.report, &cfg).unwrap();
    ck.save(&dir.path().join("ck")).unwrap();
    let loaded = Checkpoint::load(&dir.path().join("ck")).unwrap();
    assert_eq!(loaded.manifest, ck.manifest);
    assert_eq!(loaded.manifest.config_hash, config_hash(&cfg).unwrap());
    let restored = loaded
        .restore(Predictor::gru(4, 99), data.geo.clone())
        .unwrap();
    let mae = restored
        .validation_mae(&data.validation, &loaded.manifest.normalizer)
        .unwrap();
    assert_eq!(mae.to_bits(), run.report.best_val_mae.to_bits());
    assert!(loaded
        .restore(Predictor::tconv(4, 0), data.geo.clone())
        .is_err());
}

#[test]
fn deployment_uses_last_training_month() {
    let data = toy_scenario(4, 48);
    let cfg = quick_cfg();
    let mut t = Trainer::new(
        Predictor::gru(4, 0),
        data.geo.clone(),
        data.n_months(),
        FitOptions::shift_aware(0.1),
        &cfg,
    )
    .unwrap();
    let mut rng = stream_rng(1, 0);
    for v in t.env.as_mut().unwrap().params_mut().groups_mut()[0]
        .data
        .iter_mut()
    {
        *v = rng.gen_range(-1.0..1.0);
    }
    let preds = t.deploy_predict(&data.test, &data.normalizer).unwrap();
    assert_eq!(preds.len(), data.test.len());
    let last = data.n_months() - 1;
    assert_eq!(t.last_month(), last);
    let env = t.env.as_ref().unwrap();
    assert_eq!(
        env.lookup(data.test[0].pool_month as i64).unwrap(),
        env.lookup(last as i64).unwrap()
    );
    for (p, s) in preds.iter().zip(&data.test).take(5) {
        assert_eq!(p.dim(), (3, 2));
        assert!(p.iter().all(|v| v.is_finite()));
        let direct = data
            .normalizer
            .invert(t.predict_at(&s.x, last).unwrap().view());
        assert_eq!(p, &direct);
        // a different month gives a different answer
        assert_ne!(
            p,
            &data
                .normalizer
                .invert(t.predict_at(&s.x, 0).unwrap().view())
        );
    }
    let y = &data.test[0];
    let back = data.normalizer.invert(y.y.view());
    assert!(back
        .iter()
        .zip(y.y_raw.iter())
        .all(|(a, b)| (a - b).abs() <= 1e-10 * b.abs().max(1.0)));
}

#[test]
fn fixed_schedule_runs_every_epoch() {
    let data = toy_scenario(4, 48);
    let cfg = TrainConfig {
        max_epochs: 4,
        learning_rate: 1e-9,
        ..quick_cfg()
    };
    let opts = FitOptions {
        early_stopping: false,
        ..FitOptions::plain()
    };
    let mut t = Trainer::new(
        Predictor::tconv(4, 0),
        data.geo.clone(),
        data.n_months(),
        opts,
        &cfg,
    )
    .unwrap();
    let train: Vec<&PreparedSample> = data.train.iter().collect();
    let rep = t
        .fit(
            &train,
            &vec![1.0; train.len()],
            &data.validation,
            &data.normalizer,
            &cfg,
        )
        .unwrap();
    assert_eq!(rep.log.len(), 4);
    assert_eq!(rep.best_epoch, 4);
    assert!(rep.log.iter().all(|l| l.lr == 1e-9));
}

#[test]
fn scenario_months_line_up() {
    let data = toy_scenario(4, 48);
    assert_eq!(data.spec.test_month, YearMonth::new(2020, 4).unwrap());
    assert!(data
        .train
        .iter()
        .all(|s| (2..=3).contains(&s.delta) && s.pool_month == 3 - s.delta as usize));
    assert!(data.validation.iter().all(|s| s.pool_month == 2));
    assert!(data.test.iter().all(|s| s.pool_month == 3 && s.delta == 0));
}

#[test]
fn alpha_scaling_modes() {
    let mut cfg = TrainConfig::default();
    assert_eq!(cfg.alpha_scale, AlphaScale::PerSample);
    assert_eq!(cfg.step_alpha(10.0, 400), 0.025);
    assert_eq!(cfg.step_alpha(1.0, 0), 1.0);
    cfg.alpha_scale = AlphaScale::Absolute;
    assert_eq!(cfg.step_alpha(10.0, 400), 10.0);
    let parsed: TrainConfig = serde_json::from_str(r#"{"alpha_scale": "absolute"}"#).unwrap();
    assert_eq!(parsed.alpha_scale, AlphaScale::Absolute);
}

#[test]
fn pipeline_applies_scaled_alpha() {
    let data = toy_scenario(4, 3);
    let cfg = TrainConfig {
        alpha: 2.0,
        ..quick_cfg()
    };
    let opts = PipelineOptions {
        fit: FitOptions::shift_aware(2.0),
        reweight: false,
    };
    let run = two_stage_pipeline(Predictor::gru(4, 0), &data, &opts, &cfg, None).unwrap();
    assert_eq!(run.trainer.options().alpha, 2.0 / data.train.len() as f64);
}
