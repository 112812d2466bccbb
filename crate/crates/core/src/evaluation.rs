//! Metrics, baselines, ablation variants and results tables.

use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{bail_input, Error, Result};
use crate::models::{Forecaster, InputGrad, ModelKind};
use crate::nn::ParamSet;
use crate::training::{
    two_stage_pipeline, EnvMode, FitOptions, FitReport, PipelineOptions, PipelineRun,
    PreparedSample, PreparedScenario, RecencyStage, TrainConfig, Trainer,
};
use crate::with_predictor;

/// Smallest per-window std used by the RevIN wrapper.
pub const REVIN_MIN_STD: f64 = 1e-5;

fn check_pair(pred: &[f64], actual: &[f64]) -> Result<()> {
    if pred.is_empty() {
        bail_input!("cannot score an empty prediction set");
    }
    if pred.len() != actual.len() {
        bail_input!(
            "{} predictions vs {} actual values",
            pred.len(),
            actual.len()
        );
    }
    Ok(())
}

pub fn mae(pred: &[f64], actual: &[f64]) -> Result<f64> {
    check_pair(pred, actual)?;
    Ok(pred
        .iter()
        .zip(actual)
        .map(|(p, a)| (p - a).abs())
        .sum::<f64>()
        / pred.len() as f64)
}

pub fn rmse(pred: &[f64], actual: &[f64]) -> Result<f64> {
    check_pair(pred, actual)?;
    let mse = pred
        .iter()
        .zip(actual)
        .map(|(p, a)| (p - a) * (p - a))
        .sum::<f64>()
        / pred.len() as f64;
    Ok(mse.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMetric {
    pub region: usize,
    pub mae: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scenario: String,
    pub train_months: u32,
    pub model: String,
    pub variant: String,
    pub seed: u64,
    pub mae: f64,
    pub rmse: f64,
    pub runtime_s: f64,
    pub per_region: Vec<RegionMetric>,
}

/// Overall and per-region errors of `[regions, 2]` predictions in counts.
pub fn score(
    preds: &[Array2<f64>],
    actual: &[Array2<f64>],
) -> Result<(f64, f64, Vec<RegionMetric>)> {
    if preds.len() != actual.len() || preds.is_empty() {
        bail_input!("{} predictions vs {} targets", preds.len(), actual.len());
    }
    let flat = |v: &[Array2<f64>]| v.iter().flat_map(|a| a.iter().copied()).collect::<Vec<_>>();
    let (p, a) = (flat(preds), flat(actual));
    let n = preds[0].nrows();
    let per_region = (0..n)
        .map(|r| {
            let pick =
                |v: &[Array2<f64>]| v.iter().flat_map(|x| x.row(r).to_vec()).collect::<Vec<_>>();
            let (pr, ar) = (pick(preds), pick(actual));
            Ok(RegionMetric {
                region: r,
                mae: mae(&pr, &ar)?,
                rmse: rmse(&pr, &ar)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok((mae(&p, &a)?, rmse(&p, &a)?, per_region))
}

/// Population variance of per-month mean losses (0 for fewer than two months).
pub fn vrex_penalty(month_losses: &[f64]) -> f64 {
    if month_losses.len() < 2 {
        return 0.0;
    }
    let k = month_losses.len() as f64;
    let mean = month_losses.iter().sum::<f64>() / k;
    month_losses
        .iter()
        .map(|l| (l - mean) * (l - mean))
        .sum::<f64>()
        / k
}

/// Wraps a forecaster with reversible instance normalization: each window is
/// standardized per (region, channel) over time before the base model, and
/// the output is mapped back with the same statistics.
#[derive(Debug, Clone)]
pub struct RevIn<F> {
    base: F,
}

pub struct RevInCache<C> {
    base: C,
    u: Array3<f64>,
    g: Array2<f64>,
    std: Array2<f64>,
    clamped: Array2<bool>,
}

impl<F: Forecaster> RevIn<F> {
    pub fn new(base: F) -> Self {
        RevIn { base }
    }

    pub fn base(&self) -> &F {
        &self.base
    }
}

fn window_stats(x: ArrayView3<f64>) -> (Array2<f64>, Array2<f64>, Array2<bool>) {
    let mean = x.mean_axis(Axis(1)).expect("non-empty window");
    let var = x.var_axis(Axis(1), 0.0);
    let raw = var.mapv(f64::sqrt);
    let clamped = raw.mapv(|s| s < REVIN_MIN_STD);
    (mean, raw.mapv(|s| s.max(REVIN_MIN_STD)), clamped)
}

impl<F: Forecaster> Forecaster for RevIn<F> {
    type Cache = RevInCache<F::Cache>;

    fn kind(&self) -> ModelKind {
        self.base.kind()
    }

    fn params(&self) -> &ParamSet {
        self.base.params()
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        self.base.params_mut()
    }

    fn uses_dynamic_adjacency(&self) -> bool {
        self.base.uses_dynamic_adjacency()
    }

    fn forward(
        &self,
        x: ArrayView3<f64>,
        a: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Self::Cache)> {
        let (mean, std, clamped) = window_stats(x);
        let mut u = x.to_owned();
        for mut slice in u.axis_iter_mut(Axis(1)) {
            slice -= &mean;
            slice /= &std;
        }
        let (g, base) = self.base.forward(u.view(), a)?;
        let out = &g * &std + &mean;
        Ok((
            out,
            RevInCache {
                base,
                u,
                g,
                std,
                clamped,
            },
        ))
    }

    fn backward(
        &self,
        cache: &Self::Cache,
        d_out: ArrayView2<f64>,
        grads: &mut ParamSet,
    ) -> InputGrad {
        let d_g = &d_out * &cache.std;
        let inner = self.base.backward(&cache.base, d_g.view(), grads);
        let (n, t, c) = cache.u.dim();
        let tf = t as f64;
        let mut dx = Array3::<f64>::zeros((n, t, c));
        for r in 0..n {
            for ch in 0..c {
                let s = cache.std[[r, ch]];
                let du = inner.dx.slice(ndarray::s![r, .., ch]);
                let u = cache.u.slice(ndarray::s![r, .., ch]);
                let du_mean = du.sum() / tf;
                let du_u = du.dot(&u);
                let live = !cache.clamped[[r, ch]];
                let d_o = d_out[[r, ch]];
                for k in 0..t {
                    // out = g(u) * s + mean, u = (x - mean) / s, ds/dx_k = u_k / t
                    let ds = if live { u[k] / tf } else { 0.0 };
                    let mut v = (du[k] - du_mean) / s + d_o * (cache.g[[r, ch]] * ds + 1.0 / tf);
                    if live {
                        v -= du_u * ds / s;
                    }
                    dx[[r, k, ch]] = v;
                }
            }
        }
        InputGrad {
            dx,
            d_adj: inner.d_adj,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoConcept,
    NoCovariate,
    NoRegularizer,
    Original,
    Revin,
    Finetune,
    Vrex,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Full,
        Variant::NoConcept,
        Variant::NoCovariate,
        Variant::NoRegularizer,
        Variant::Original,
        Variant::Revin,
        Variant::Finetune,
        Variant::Vrex,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoConcept => "no_concept",
            Variant::NoCovariate => "no_covariate",
            Variant::NoRegularizer => "no_regularizer",
            Variant::Original => "original",
            Variant::Revin => "revin",
            Variant::Finetune => "finetune",
            Variant::Vrex => "vrex",
        }
    }

    pub fn spec(self) -> VariantSpec {
        let base = VariantSpec {
            concept: true,
            covariate: true,
            regularizer: true,
            revin: false,
            finetune: false,
            vrex: false,
        };
        let original = VariantSpec {
            concept: false,
            covariate: false,
            regularizer: false,
            ..base
        };
        match self {
            Variant::Full => base,
            Variant::NoConcept => VariantSpec {
                concept: false,
                ..base
            },
            Variant::NoCovariate => VariantSpec {
                covariate: false,
                ..base
            },
            Variant::NoRegularizer => VariantSpec {
                regularizer: false,
                ..base
            },
            Variant::Original => original,
            Variant::Revin => VariantSpec {
                revin: true,
                ..original
            },
            Variant::Finetune => VariantSpec {
                finetune: true,
                ..original
            },
            Variant::Vrex => VariantSpec {
                vrex: true,
                ..original
            },
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown variant {s:?}")))
    }
}

/// Module toggles behind a [`Variant`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantSpec {
    /// Environment pool plus learned adjacency.
    pub concept: bool,
    /// Classifier-and-recency sample weights.
    pub covariate: bool,
    /// Total-variation penalties (only meaningful with `concept`).
    pub regularizer: bool,
    pub revin: bool,
    pub finetune: bool,
    /// Across-month loss variance penalty, scaled by alpha.
    pub vrex: bool,
}

impl VariantSpec {
    pub fn pipeline_options(&self, alpha: f64) -> PipelineOptions {
        let fit = FitOptions {
            env: if self.concept {
                EnvMode::Learned
            } else {
                EnvMode::Off
            },
            dynamic_adjacency: self.concept,
            alpha: if self.concept && self.regularizer {
                alpha
            } else {
                0.0
            },
            vrex_coef: if self.vrex { alpha } else { 0.0 },
            early_stopping: true,
        };
        PipelineOptions {
            fit,
            reweight: self.covariate,
        }
    }
}

/// Continue training on the recent (`delta <= 12`) training windows for a
/// fixed number of epochs, without weights or penalties.
pub fn run_finetune<F: Forecaster>(
    trainer: &mut Trainer<F>,
    data: &PreparedScenario,
    cfg: &TrainConfig,
) -> Result<FitReport> {
    let recent: Vec<&PreparedSample> = data
        .train
        .iter()
        .filter(|s| s.delta <= crate::reweight::RECENT_WINDOW)
        .collect();
    if recent.is_empty() {
        return Err(Error::Data(
            "no recent training windows to finetune on".into(),
        ));
    }
    let saved = *trainer.options();
    trainer.set_options(FitOptions {
        alpha: 0.0,
        vrex_coef: 0.0,
        early_stopping: false,
        ..saved
    });
    let ft_cfg = TrainConfig {
        learning_rate: cfg.finetune.learning_rate,
        max_epochs: cfg.finetune.epochs,
        ..cfg.clone()
    };
    let ones = vec![1.0; recent.len()];
    let report = trainer.fit(&recent, &ones, &data.validation, &data.normalizer, &ft_cfg);
    trainer.set_options(saved);
    report
}

/// Result of one variant run.
#[derive(Debug, Clone)]
pub struct VariantOutcome {
    pub report: MetricReport,
    pub fit: FitReport,
    /// Per-month summed absolute change of the environment features.
    pub env_jumps: Option<Vec<f64>>,
    pub weights: Vec<crate::reweight::WeightRow>,
}

/// Where a run writes its artifacts, and the config recorded with them.
#[derive(Debug, Clone, Copy)]
pub struct RunOutput<'a> {
    pub dir: &'a Path,
    pub config: &'a serde_json::Value,
}

/// Identifiers copied into every report row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLabel {
    pub scenario: String,
    pub seed: u64,
}

fn finish<F: Forecaster>(
    mut run: PipelineRun<F>,
    variant: Variant,
    data: &PreparedScenario,
    cfg: &TrainConfig,
    label: &RunLabel,
    started: Instant,
    out: Option<RunOutput<'_>>,
) -> Result<VariantOutcome> {
    if variant.spec().finetune {
        let ft = run_finetune(&mut run.trainer, data, cfg)?;
        run.report.log.extend(ft.log);
    }
    if let Some(out) = out {
        run.save(out.dir, &data.normalizer, out.config)?;
    }
    let preds = run.trainer.deploy_predict(&data.test, &data.normalizer)?;
    let actual: Vec<Array2<f64>> = data.test.iter().map(|s| s.y_raw.clone()).collect();
    let (m, r, per_region) = score(&preds, &actual)?;
    Ok(VariantOutcome {
        report: MetricReport {
            scenario: label.scenario.clone(),
            train_months: data.spec.train_months,
            model: run.trainer.model.kind().name().to_string(),
            variant: variant.name().to_string(),
            seed: label.seed,
            mae: m,
            rmse: r,
            runtime_s: started.elapsed().as_secs_f64(),
            per_region,
        },
        env_jumps: run.trainer.env.as_ref().map(|e| e.month_jumps()),
        fit: run.report,
        weights: run.weights,
    })
}

/// Train and test one variant of `model` under `cfg` (its seed initializes
/// the model, pools and batch order). A precomputed recency stage is reused.
/// With `out`, the run's weights, log and checkpoint are written there.
pub fn run_variant(
    model: ModelKind,
    variant: Variant,
    data: &PreparedScenario,
    cfg: &TrainConfig,
    stage: Option<&RecencyStage>,
    label: &RunLabel,
    out: Option<RunOutput<'_>>,
) -> Result<VariantOutcome> {
    let started = Instant::now();
    let spec = variant.spec();
    let opts = spec.pipeline_options(cfg.alpha);
    with_predictor!(model, cfg.hidden, cfg.seed, |p| {
        if spec.revin {
            let run = two_stage_pipeline(RevIn::new(p), data, &opts, cfg, stage)?;
            finish(run, variant, data, cfg, label, started, out)
        } else {
            let run = two_stage_pipeline(p, data, &opts, cfg, stage)?;
            finish(run, variant, data, cfg, label, started, out)
        }
    })
}

/// One report row per variant, all under the same seed. The recency
/// classifier is trained once and shared by the variants that use weights.
/// With `out`, each variant writes its artifacts to a subdirectory named
/// after it.
pub fn run_ablation(
    model: ModelKind,
    variants: &[Variant],
    data: &PreparedScenario,
    cfg: &TrainConfig,
    label: &RunLabel,
    out: Option<RunOutput<'_>>,
) -> Result<Vec<MetricReport>> {
    let stage = if variants.iter().any(|v| v.spec().covariate) {
        let mut ccfg = cfg.classifier.clone();
        ccfg.seed = cfg.seed;
        Some(crate::training::recency_stage(data, &ccfg)?)
    } else {
        None
    };
    variants
        .iter()
        .map(|&v| {
            let dir = out.map(|o| o.dir.join(v.name()));
            let cell = out.zip(dir.as_deref()).map(|(o, dir)| RunOutput {
                dir,
                config: o.config,
            });
            Ok(run_variant(model, v, data, cfg, stage.as_ref(), label, cell)?.report)
        })
        .collect()
}

/// CSV row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub scenario: String,
    pub train_months: u32,
    pub model: String,
    pub variant: String,
    pub seed: u64,
    pub mae: f64,
    pub rmse: f64,
    pub runtime_s: f64,
}

impl From<&MetricReport> for ResultRow {
    fn from(r: &MetricReport) -> Self {
        ResultRow {
            scenario: r.scenario.clone(),
            train_months: r.train_months,
            model: r.model.clone(),
            variant: r.variant.clone(),
            seed: r.seed,
            mae: r.mae,
            rmse: r.rmse,
            runtime_s: r.runtime_s,
        }
    }
}

pub fn results_csv(reports: &[MetricReport]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in reports {
        w.serialize(ResultRow::from(r))?;
    }
    w.into_inner().map_err(|e| Error::Data(e.to_string()))
}

#[derive(Serialize)]
struct ResultsJson<'a> {
    config_hash: &'a str,
    rows: &'a [MetricReport],
}

/// Write `results.csv` and its JSON mirror `results.json` (which also
/// carries `config_hash` and per-region metrics) into `dir`.
pub fn write_results(dir: &Path, reports: &[MetricReport], config_hash: &str) -> Result<()> {
    use crate::fsutil::write_file_atomically;
    write_file_atomically(&dir.join("results.csv"), &results_csv(reports)?)?;
    let json = ResultsJson {
        config_hash,
        rows: reports,
    };
    write_file_atomically(
        &dir.join("results.json"),
        &serde_json::to_vec_pretty(&json)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Predictor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(pred: &[f64], actual: &[f64]) -> (f64, f64) {
        let mut abs = 0.0;
        let mut sq = 0.0;
        for i in 0..pred.len() {
            let d = pred[i] - actual[i];
            abs += if d < 0.0 { -d } else { d };
            sq += d * d;
        }
        (abs / pred.len() as f64, (sq / pred.len() as f64).sqrt())
    }

    #[test]
    fn metric_examples() {
        assert_eq!(mae(&[1.0, 3.0], &[2.0, 5.0]).unwrap(), 1.5);
        assert!((rmse(&[1.0, 3.0], &[2.0, 5.0]).unwrap() - 1.5811).abs() < 1e-4);
        assert_eq!(mae(&[4.0; 3], &[4.0; 3]).unwrap(), 0.0);
        assert_eq!(rmse(&[1.5, 2.5], &[0.0, 1.0]).unwrap(), 1.5);
        assert!(mae(&[], &[]).is_err());
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn metrics_match_brute_force(v in proptest::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..200)) {
            let (p, a): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let (bm, br) = brute(&p, &a);
            let (m, r) = (mae(&p, &a).unwrap(), rmse(&p, &a).unwrap());
            prop_assert!((m - bm).abs() <= 1e-10 * bm.max(1e-300));
            prop_assert!((r - br).abs() <= 1e-10 * br.max(1e-300));
            prop_assert!(r >= m);
        }
    }

    #[test]
    fn vrex_examples() {
        assert_eq!(vrex_penalty(&[2.0, 2.0, 2.0]), 0.0);
        assert_eq!(vrex_penalty(&[1.0, 3.0]), 1.0);
        assert_eq!(vrex_penalty(&[5.0]), 0.0);
    }

    #[test]
    fn variant_toggles() {
        let o = Variant::Original.spec();
        assert!(!o.concept && !o.covariate && !o.regularizer);
        assert_eq!(
            Variant::NoConcept.spec().pipeline_options(1.0).fit.env,
            EnvMode::Off
        );
        let nr = Variant::NoRegularizer.spec().pipeline_options(10.0);
        assert_eq!(nr.fit.env, EnvMode::Learned);
        assert_eq!(nr.fit.alpha, 0.0);
        let full = Variant::Full.spec().pipeline_options(10.0);
        assert_eq!(
            FitOptions {
                alpha: 0.0,
                ..full.fit
            },
            nr.fit
        );
        assert_eq!(
            Variant::Vrex.spec().pipeline_options(0.3).fit.vrex_coef,
            0.3
        );
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("irm".parse::<Variant>().is_err());
    }

    /// Returns the last input slice: lets the wrap be checked in isolation.
    #[derive(Debug, Clone)]
    struct LastSlice(ParamSet);

    impl Forecaster for LastSlice {
        type Cache = usize;
        fn kind(&self) -> ModelKind {
            ModelKind::TconvGraph
        }
        fn params(&self) -> &ParamSet {
            &self.0
        }
        fn params_mut(&mut self) -> &mut ParamSet {
            &mut self.0
        }
        fn forward(&self, x: ArrayView3<f64>, _a: ArrayView2<f64>) -> Result<(Array2<f64>, usize)> {
            let t = x.dim().1;
            Ok((x.index_axis(Axis(1), t - 1).to_owned(), t))
        }
        fn backward(&self, t: &usize, d_out: ArrayView2<f64>, _g: &mut ParamSet) -> InputGrad {
            let n = d_out.nrows();
            let mut dx = Array3::zeros((n, *t, 2));
            dx.index_axis_mut(Axis(1), t - 1).assign(&d_out);
            InputGrad {
                dx,
                d_adj: Array2::zeros((n, n)),
            }
        }
    }

    #[test]
    fn revin_round_trip_and_constant_windows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array3::from_shape_fn((3, 6, 2), |_| rng.gen_range(0.0..50.0));
        let a = Array2::eye(3);
        let out = RevIn::new(LastSlice(ParamSet::new()))
            .predict(x.view(), a.view())
            .unwrap();
        let last = x.index_axis(Axis(1), 5);
        for (o, l) in out.iter().zip(last.iter()) {
            assert!((o - l).abs() <= 1e-12 * l.abs().max(1.0));
        }
        // constant window: base output is 0 in normalized space, so the mean comes back
        let flat = Array3::from_elem((2, 6, 2), 7.0);
        let zero_model = Predictor::tconv(4, 0);
        let out = RevIn::new(zero_model)
            .predict(flat.view(), Array2::eye(2).view())
            .unwrap();
        assert!(out.iter().all(|&v| v == 7.0));
    }

    #[test]
    fn revin_scale_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array3::from_shape_fn((4, 6, 2), |_| rng.gen_range(1.0..9.0));
        let a = Array2::from_elem((4, 4), 0.25);
        let f = RevIn::new(Predictor::gru(5, 3));
        let base = f.predict(x.view(), a.view()).unwrap();
        let scaled = f.predict((&x * 3.5).view(), a.view()).unwrap();
        for (s, b) in scaled.iter().zip(base.iter()) {
            assert!((s - 3.5 * b).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }

    #[test]
    fn revin_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut f = RevIn::new(Predictor::gru(4, 1));
        let x = Array3::from_shape_fn((3, 6, 2), |_| rng.gen_range(0.0..5.0));
        let a = Array2::from_elem((3, 3), 1.0 / 3.0);
        let proj = Array2::from_shape_fn((3, 2), |_| rng.gen_range(-1.0..1.0));
        let loss =
            |f: &RevIn<_>, x: &Array3<f64>| (f.predict(x.view(), a.view()).unwrap() * &proj).sum();
        let (_, cache) = f.forward(x.view(), a.view()).unwrap();
        let mut g = f.params().zeros_like();
        let ig = f.backward(&cache, proj.view(), &mut g);
        let h = 1e-6;
        let rel = |p: f64, q: f64| (p - q).abs() / p.abs().max(q.abs()).max(1e-7);
        for idx in [[0, 0, 0], [1, 5, 1], [2, 3, 0]] {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[idx] += h;
            xm[idx] -= h;
            let num = (loss(&f, &xp) - loss(&f, &xm)) / (2.0 * h);
            assert!(
                rel(ig.dx[idx], num) <= 1e-3,
                "dx{idx:?} {} vs {num}",
                ig.dx[idx]
            );
        }
        for _ in 0..10 {
            let k = rng.gen_range(0..f.params().len());
            let v = f.params().get_flat(k);
            f.params_mut().set_flat(k, v + h);
            let up = loss(&f, &x);
            f.params_mut().set_flat(k, v - h);
            let dn = loss(&f, &x);
            f.params_mut().set_flat(k, v);
            assert!(rel(g.get_flat(k), (up - dn) / (2.0 * h)) <= 1e-3);
        }
    }

    #[test]
    fn results_table_columns() {
        let r = MetricReport {
            scenario: "s".into(),
            train_months: 24,
            model: "gru_graph".into(),
            variant: "full".into(),
            seed: 3,
            mae: 1.5,
            rmse: 2.0,
            runtime_s: 0.25,
            per_region: vec![],
        };
        let text = String::from_utf8(results_csv(&[r.clone(), r]).unwrap()).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "scenario,train_months,model,variant,seed,mae,rmse,runtime_s"
        );
        assert_eq!(lines.count(), 2);
    }
}
