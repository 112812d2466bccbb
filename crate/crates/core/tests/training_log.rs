//! The epoch log of a real fit follows the plateau rules: the learning rate
//! halves 5 epochs after the last improvement and training stops after 10.

use envshift::dataset::ScenarioSpec;
use envshift::ingestion::{generate_synthetic, SyntheticConfig};
use envshift::models::Predictor;
use envshift::training::{FitOptions, PreparedSample, PreparedScenario, TrainConfig, Trainer};

fn replay(vals: &[f64], lr0: f64) -> (usize, Vec<f64>) {
    let (mut best, mut last) = (f64::INFINITY, 0usize);
    let mut lr = lr0;
    let mut lrs = Vec::new();
    for (i, &v) in vals.iter().enumerate() {
        lrs.push(lr);
        if v < best - 1e-6 {
            best = v;
            last = i + 1;
        }
        match i + 1 - last {
            10 => return (i + 1, lrs),
            5 => lr /= 2.0,
            _ => {}
        }
    }
    (vals.len(), lrs)
}

#[test]
fn fit_log_follows_plateau_rules() {
    let mut synth = SyntheticConfig::uniform(3, 4, 20.0);
    synth.noise_scale = 0.1;
    synth.seed = 4;
    let cube = generate_synthetic(&synth).unwrap();
    let mut spec = ScenarioSpec::new(synth.start.add_months(3), 3);
    spec.train_stride = 97;
    let data = PreparedScenario::build(&cube, &spec, 1.0).unwrap();
    let cfg = TrainConfig {
        hidden: 4,
        max_epochs: 60,
        batch_size: 16,
        learning_rate: 0.05,
        ..Default::default()
    };
    let mut t = Trainer::new(
        Predictor::gru(4, 0),
        data.geo.clone(),
        data.n_months(),
        FitOptions::plain(),
        &cfg,
    )
    .unwrap();
    let train: Vec<&PreparedSample> = data.train.iter().collect();
    let report = t
        .fit(
            &train,
            &vec![1.0; train.len()],
            &data.validation,
            &data.normalizer,
            &cfg,
        )
        .unwrap();
    let vals: Vec<f64> = report.log.iter().map(|l| l.val_mae).collect();
    let (stop, lrs) = replay(&vals, cfg.learning_rate);
    assert!(report.stopped_early, "expected a plateau within 60 epochs");
    assert_eq!(stop, report.log.len());
    assert_eq!(lrs, report.log.iter().map(|l| l.lr).collect::<Vec<_>>());
    let best = vals.iter().copied().fold(f64::INFINITY, f64::min);
    assert_eq!(report.best_val_mae, best);
}
