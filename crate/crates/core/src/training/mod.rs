//! Weighted, regularized training with environment features.
//!
//! The objective for one mini-batch of `B` windows is
//!
//! ```text
//! total = (1/B) * sum_b w_b * mean|y_hat_b - y_b|  +  alpha * (tv(env) + tv(nodes))
//! ```
//!
//! computed in normalized space. Model, environment pool and node embeddings
//! are optimized jointly by one Adam instance. Validation MAE (original units,
//! unweighted) drives lr halving, early stopping and best-checkpoint selection.

mod checkpoint;
mod schedule;

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use chrono::NaiveDateTime;
use ndarray::{Array2, Array3, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{config_hash, BlobEntry, Checkpoint, CheckpointManifest};
pub use schedule::{PlateauSchedule, ScheduleStep, IMPROVEMENT_EPS};

use crate::dataset::{
    make_windows, split_scenario, Normalizer, ScenarioSpec, ScenarioSplit, WindowSample,
};
use crate::envpool::{
    inject_env, inject_env_backward, AdjacencyMatrix, EnvFeaturePool, NodeEmbeddingPool,
};
use crate::error::{bail_config, bail_input, Error, Result};
use crate::evaluation::vrex_penalty;
use crate::ingestion::TrafficCube;
use crate::models::{build_geo_adjacency, Forecaster, DEFAULT_HIDDEN};
use crate::nn::{sign, Adam, AdamConfig, ParamSet};
use crate::reweight::{
    compute_weight, label_recency, normalize_weights, train_classifier, ClassifierConfig,
    ClassifierTrace, RecencyClassifier, SampleWeights, WeightConfig, WeightRow,
};

/// Values searched for both `alpha` and `beta`.
pub const HYPER_GRID: [f64; 3] = [0.1, 1.0, 10.0];

const STREAM_POOLS: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;

/// Independent random stream `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn d_alpha() -> f64 {
    0.1
}
fn d_beta() -> f64 {
    0.1
}
fn d_lr() -> f64 {
    0.005
}
fn d_max_epochs() -> usize {
    100
}
fn d_halve() -> usize {
    5
}
fn d_stop() -> usize {
    10
}
fn d_batch() -> usize {
    32
}
fn d_hidden() -> usize {
    DEFAULT_HIDDEN
}
fn d_pool_dim() -> usize {
    4
}
fn d_ft_epochs() -> usize {
    20
}
fn d_ft_lr() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    #[serde(default = "d_ft_epochs")]
    pub epochs: usize,
    #[serde(default = "d_ft_lr")]
    pub learning_rate: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: d_ft_epochs(),
            learning_rate: d_ft_lr(),
        }
    }
}

/// How the configured `alpha` becomes the per-step coefficient of the
/// total-variation terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaScale {
    /// `alpha / n_train`: the penalty is weighed against the data loss summed
    /// over training samples, so its pull does not depend on the number of
    /// samples per month.
    #[default]
    PerSample,
    /// `alpha` as given, against the batch-mean data loss.
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Coefficient of both total-variation penalties.
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub alpha_scale: AlphaScale,
    /// Recency-decay exponent of the sample weights.
    #[serde(default = "d_beta")]
    pub beta: f64,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "d_halve")]
    pub halve_patience: usize,
    #[serde(default = "d_stop")]
    pub stop_patience: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_hidden")]
    pub hidden: usize,
    #[serde(default = "d_pool_dim")]
    pub env_dim: usize,
    #[serde(default = "d_pool_dim")]
    pub node_dim: usize,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub classifier: ClassifierConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: d_alpha(),
            alpha_scale: AlphaScale::default(),
            beta: d_beta(),
            learning_rate: d_lr(),
            max_epochs: d_max_epochs(),
            halve_patience: d_halve(),
            stop_patience: d_stop(),
            batch_size: d_batch(),
            seed: 0,
            hidden: d_hidden(),
            env_dim: d_pool_dim(),
            node_dim: d_pool_dim(),
            finetune: FinetuneConfig::default(),
            classifier: ClassifierConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Per-step regularizer coefficient for a training set of `n_train` samples.
    pub fn step_alpha(&self, alpha: f64, n_train: usize) -> f64 {
        match self.alpha_scale {
            AlphaScale::PerSample => alpha / n_train.max(1) as f64,
            AlphaScale::Absolute => alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0
            && self.beta >= 0.0
            && self.alpha.is_finite()
            && self.beta.is_finite())
        {
            bail_config!("alpha and beta must be finite and non-negative");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            bail_config!("learning_rate must be finite and non-negative");
        }
        if self.max_epochs == 0 || self.batch_size == 0 || self.hidden == 0 {
            bail_config!("max_epochs, batch_size and hidden must be positive");
        }
        if self.halve_patience == 0 || self.stop_patience < self.halve_patience {
            bail_config!("need 0 < halve_patience <= stop_patience");
        }
        if self.env_dim == 0 || !self.env_dim.is_multiple_of(2) || self.node_dim == 0 {
            bail_config!("env_dim must be even and positive; node_dim positive");
        }
        if self.finetune.learning_rate < 0.0 {
            bail_config!("finetune learning rate must be non-negative");
        }
        Ok(())
    }
}

/// Scalar pieces of one batch objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub weighted_data_loss: f64,
    pub l1: f64,
    pub l2: f64,
    pub alpha: f64,
    /// Extra penalty (variance across months) when enabled; otherwise zero.
    pub penalty: f64,
    pub total: f64,
}

/// `total = data + alpha * (l1 + l2)`.
pub fn total_loss(data_loss: f64, l1: f64, l2: f64, alpha: f64) -> LossBreakdown {
    LossBreakdown {
        weighted_data_loss: data_loss,
        l1,
        l2,
        alpha,
        penalty: 0.0,
        total: data_loss + alpha * (l1 + l2),
    }
}

fn sample_mae(pred: ArrayView2<f64>, y: ArrayView2<f64>) -> f64 {
    let n = pred.len() as f64;
    pred.iter()
        .zip(y.iter())
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / n
}

/// Mean over the batch of `w_b * mean|pred_b - y_b|`.
pub fn weighted_data_loss(
    preds: &[Array2<f64>],
    targets: &[Array2<f64>],
    w: &[f64],
) -> Result<f64> {
    if preds.len() != targets.len() || preds.len() != w.len() || preds.is_empty() {
        bail_input!(
            "batch sizes disagree: {} predictions, {} targets, {} weights",
            preds.len(),
            targets.len(),
            w.len()
        );
    }
    let mut sum = 0.0;
    for ((p, y), wb) in preds.iter().zip(targets).zip(w) {
        if p.dim() != y.dim() {
            bail_input!("prediction {:?} vs target {:?}", p.dim(), y.dim());
        }
        if *wb < 0.0 {
            bail_input!("negative sample weight {wb}");
        }
        sum += wb * sample_mae(p.view(), y.view());
    }
    Ok(sum / preds.len() as f64)
}

/// A window in model space plus what the loop needs to score it.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    /// Normalized `[regions, t_in, 2]`.
    pub x: Array3<f64>,
    /// Normalized target.
    pub y: Array2<f64>,
    /// Target in counts.
    pub y_raw: Array2<f64>,
    /// Pool month index (0 = first training month; the test month is `train_months`).
    pub pool_month: usize,
    /// Months before the test month (0 for test samples).
    pub delta: u32,
    pub target_time: NaiveDateTime,
}

/// Normalized train/validation/test windows of one scenario.
#[derive(Debug, Clone)]
pub struct PreparedScenario {
    pub spec: ScenarioSpec,
    pub normalizer: Normalizer,
    /// Static adjacency for models without a learned one.
    pub geo: Array2<f64>,
    pub train: Vec<PreparedSample>,
    pub validation: Vec<PreparedSample>,
    pub test: Vec<PreparedSample>,
}

impl PreparedScenario {
    pub fn build(cube: &TrafficCube, spec: &ScenarioSpec, geo_threshold_km: f64) -> Result<Self> {
        let samples = make_windows(cube, spec.t_in, spec.t_out)?;
        let split = split_scenario(samples, spec)?;
        let geo = build_geo_adjacency(cube.n_regions(), cube.geometry(), geo_threshold_km);
        Self::from_split(split, spec, geo.values().clone())
    }

    pub fn from_split(split: ScenarioSplit, spec: &ScenarioSpec, geo: Array2<f64>) -> Result<Self> {
        let normalizer = Normalizer::fit(&split.train)?;
        let prep = |s: WindowSample| -> Result<PreparedSample> {
            let pool_month = spec.pool_month(s.env_month).ok_or_else(|| {
                Error::Data(format!("month {} outside the scenario", s.env_month))
            })?;
            Ok(PreparedSample {
                x: normalizer.apply_window(s.x.view()),
                y: normalizer.apply(s.y.view()),
                y_raw: s.y,
                pool_month,
                delta: s.delta_months.unwrap_or(0),
                target_time: s.target_time,
            })
        };
        let convert = |v: Vec<WindowSample>| v.into_iter().map(prep).collect::<Result<Vec<_>>>();
        Ok(PreparedScenario {
            spec: spec.clone(),
            geo,
            train: convert(split.train)?,
            validation: convert(split.validation)?,
            test: convert(split.test)?,
            normalizer,
        })
    }

    pub fn n_regions(&self) -> usize {
        self.geo.nrows()
    }

    /// Number of pool months (the training span including validation).
    pub fn n_months(&self) -> usize {
        self.spec.train_months as usize
    }
}

/// How environment features enter the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvMode {
    /// No extra slices.
    Off,
    /// Learned per-month features.
    Learned,
    /// All-zero slices that are never updated.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub env: EnvMode,
    /// Use the learned per-month adjacency for models that support it.
    pub dynamic_adjacency: bool,
    pub alpha: f64,
    /// Coefficient of the across-month loss variance (0 disables).
    pub vrex_coef: f64,
    /// Plateau halving, early stopping and best-epoch restore. When off,
    /// runs exactly `max_epochs` and keeps the final parameters.
    pub early_stopping: bool,
}

impl FitOptions {
    pub fn plain() -> Self {
        FitOptions {
            env: EnvMode::Off,
            dynamic_adjacency: false,
            alpha: 0.0,
            vrex_coef: 0.0,
            early_stopping: true,
        }
    }

    pub fn shift_aware(alpha: f64) -> Self {
        FitOptions {
            env: EnvMode::Learned,
            dynamic_adjacency: true,
            alpha,
            vrex_coef: 0.0,
            early_stopping: true,
        }
    }
}

/// Gradient buffers matching a [`Trainer`]'s parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub model: ParamSet,
    pub env: Option<ParamSet>,
    pub nodes: Option<ParamSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub weighted_data_loss: f64,
    pub l1: f64,
    pub l2: f64,
    pub penalty: f64,
    pub total: f64,
    pub val_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub log: Vec<EpochLog>,
    pub best_val_mae: f64,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub runtime_s: f64,
}

impl FitReport {
    pub fn write_log_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.log {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// A forecaster together with the pools it is trained with.
#[derive(Debug, Clone)]
pub struct Trainer<F: Forecaster> {
    pub model: F,
    pub env: Option<EnvFeaturePool>,
    pub nodes: Option<NodeEmbeddingPool>,
    opts: FitOptions,
    geo: Array2<f64>,
}

struct Forward<C> {
    cache: C,
    diff: Array2<f64>,
    mae: f64,
}

impl<F: Forecaster> Trainer<F> {
    /// Pools are drawn from their own random stream, so the model's
    /// initialization and batch order do not depend on which are enabled.
    pub fn new(
        model: F,
        geo: Array2<f64>,
        n_months: usize,
        opts: FitOptions,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        let n = geo.nrows();
        if geo.dim() != (n, n) || n == 0 {
            bail_input!("static adjacency must be square and non-empty");
        }
        let mut rng = stream_rng(cfg.seed, STREAM_POOLS);
        let env = match opts.env {
            EnvMode::Off => None,
            EnvMode::Learned => Some(EnvFeaturePool::new(n, n_months, cfg.env_dim, &mut rng)?),
            EnvMode::Zero => Some(EnvFeaturePool::zeros(n, n_months, cfg.env_dim)?),
        };
        let nodes = if opts.dynamic_adjacency && model.uses_dynamic_adjacency() {
            Some(NodeEmbeddingPool::new(n, n_months, cfg.node_dim, &mut rng)?)
        } else {
            None
        };
        Ok(Trainer {
            model,
            env,
            nodes,
            opts,
            geo,
        })
    }

    pub fn from_parts(
        model: F,
        env: Option<EnvFeaturePool>,
        nodes: Option<NodeEmbeddingPool>,
        geo: Array2<f64>,
        opts: FitOptions,
    ) -> Self {
        Trainer {
            model,
            env,
            nodes,
            opts,
            geo,
        }
    }

    pub fn options(&self) -> &FitOptions {
        &self.opts
    }

    pub fn set_options(&mut self, opts: FitOptions) {
        self.opts = opts;
    }

    pub fn geo(&self) -> &Array2<f64> {
        &self.geo
    }

    fn env_trainable(&self) -> bool {
        self.opts.env == EnvMode::Learned && self.env.is_some()
    }

    /// Adjacency the model sees for windows of pool month `month`.
    pub fn adjacency(&self, month: usize) -> Result<Array2<f64>> {
        match &self.nodes {
            Some(nodes) => Ok(nodes.adjacency(month as i64)?.into_inner()),
            None => Ok(self.geo.clone()),
        }
    }

    /// Model input for a normalized window of pool month `month`.
    pub fn model_input<'a>(
        &self,
        x: &'a Array3<f64>,
        month: usize,
    ) -> Result<Cow<'a, Array3<f64>>> {
        match &self.env {
            Some(env) => Ok(Cow::Owned(inject_env(
                x.view(),
                env.lookup(month as i64)?.view(),
            )?)),
            None => Ok(Cow::Borrowed(x)),
        }
    }

    /// Normalized prediction for `x` as if it came from pool month `month`.
    pub fn predict_at(&self, x: &Array3<f64>, month: usize) -> Result<Array2<f64>> {
        let a = self.adjacency(month)?;
        let x2 = self.model_input(x, month)?;
        self.model.predict(x2.view(), a.view())
    }

    fn month_adjacencies(
        &self,
        batch: &[&PreparedSample],
    ) -> Result<BTreeMap<usize, AdjacencyMatrix>> {
        let mut out = BTreeMap::new();
        if let Some(nodes) = &self.nodes {
            for s in batch {
                if let std::collections::btree_map::Entry::Vacant(e) = out.entry(s.pool_month) {
                    e.insert(nodes.adjacency(s.pool_month as i64)?);
                }
            }
        }
        Ok(out)
    }

    fn forward_batch(
        &self,
        batch: &[&PreparedSample],
        w: &[f64],
        adjs: &BTreeMap<usize, AdjacencyMatrix>,
    ) -> Result<(LossBreakdown, Vec<Forward<F::Cache>>, Vec<f64>)> {
        if batch.is_empty() || batch.len() != w.len() {
            bail_input!("batch of {} samples with {} weights", batch.len(), w.len());
        }
        let mut fwd = Vec::with_capacity(batch.len());
        let mut data = 0.0;
        for (s, wb) in batch.iter().zip(w) {
            let a = adjs
                .get(&s.pool_month)
                .map(|a| a.view())
                .unwrap_or(self.geo.view());
            let x2 = self.model_input(&s.x, s.pool_month)?;
            let (out, cache) = self.model.forward(x2.view(), a)?;
            let diff = &out - &s.y;
            let mae = sample_mae(out.view(), s.y.view());
            data += wb * mae;
            fwd.push(Forward { cache, diff, mae });
        }
        let b = batch.len() as f64;
        let data = data / b;
        let l1 = if self.env_trainable() {
            self.env.as_ref().map_or(0.0, |e| e.tv())
        } else {
            0.0
        };
        let l2 = self.nodes.as_ref().map_or(0.0, |n| n.tv());
        let mut lb = total_loss(data, l1, l2, self.opts.alpha);

        // d(total)/d(per-sample weighted loss)
        let mut coef = vec![1.0 / b; batch.len()];
        if self.opts.vrex_coef > 0.0 {
            let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, s) in batch.iter().enumerate() {
                groups.entry(s.pool_month).or_default().push(i);
            }
            let means: Vec<f64> = groups
                .values()
                .map(|idx| idx.iter().map(|&i| w[i] * fwd[i].mae).sum::<f64>() / idx.len() as f64)
                .collect();
            lb.penalty = self.opts.vrex_coef * vrex_penalty(&means);
            lb.total += lb.penalty;
            let k = means.len() as f64;
            let grand = means.iter().sum::<f64>() / k;
            for (idx, m) in groups.values().zip(&means) {
                let g = self.opts.vrex_coef * 2.0 * (m - grand) / k / idx.len() as f64;
                for &i in idx {
                    coef[i] += g;
                }
            }
        }
        Ok((lb, fwd, coef))
    }

    /// Batch objective without gradients.
    pub fn loss(&self, batch: &[&PreparedSample], w: &[f64]) -> Result<LossBreakdown> {
        let adjs = self.month_adjacencies(batch)?;
        Ok(self.forward_batch(batch, w, &adjs)?.0)
    }

    /// Batch objective and its gradient w.r.t. every trainable parameter.
    pub fn loss_and_grad(
        &self,
        batch: &[&PreparedSample],
        w: &[f64],
    ) -> Result<(LossBreakdown, Gradients)> {
        let adjs = self.month_adjacencies(batch)?;
        let (lb, fwd, coef) = self.forward_batch(batch, w, &adjs)?;
        let mut grads = Gradients {
            model: self.model.params().zeros_like(),
            env: self
                .env
                .as_ref()
                .filter(|_| self.env_trainable())
                .map(|e| e.params().zeros_like()),
            nodes: self.nodes.as_ref().map(|n| n.params().zeros_like()),
        };
        let mut d_adj: BTreeMap<usize, Array2<f64>> = BTreeMap::new();
        for (i, (s, f)) in batch.iter().zip(&fwd).enumerate() {
            let scale = coef[i] * w[i] / f.diff.len() as f64;
            let d_out = f.diff.mapv(|v| scale * sign(v));
            let ig = self
                .model
                .backward(&f.cache, d_out.view(), &mut grads.model);
            if let (Some(env), Some(g)) = (&self.env, grads.env.as_mut()) {
                env.accumulate_grad(
                    g,
                    s.pool_month,
                    inject_env_backward(ig.dx.view(), env.dim()).view(),
                );
            }
            if self.nodes.is_some() {
                match d_adj.get_mut(&s.pool_month) {
                    Some(acc) => *acc += &ig.d_adj,
                    None => {
                        d_adj.insert(s.pool_month, ig.d_adj);
                    }
                }
            }
        }
        if let (Some(nodes), Some(g)) = (&self.nodes, grads.nodes.as_mut()) {
            for (month, d) in &d_adj {
                nodes.accumulate_adjacency_grad(g, *month, &adjs[month], d.view());
            }
            nodes.add_tv_grad(g, self.opts.alpha);
        }
        if let (Some(env), Some(g)) = (&self.env, grads.env.as_mut()) {
            env.add_tv_grad(g, self.opts.alpha);
        }
        Ok((lb, grads))
    }

    fn step(&mut self, adam: &mut Adam, grads: &Gradients) {
        let trainable_env = self.env_trainable();
        let mut params: Vec<&mut ParamSet> = vec![self.model.params_mut()];
        let mut g: Vec<&ParamSet> = vec![&grads.model];
        if let (true, Some(env), Some(ge)) = (trainable_env, self.env.as_mut(), grads.env.as_ref())
        {
            params.push(env.params_mut());
            g.push(ge);
        }
        if let (Some(nodes), Some(gn)) = (self.nodes.as_mut(), grads.nodes.as_ref()) {
            params.push(nodes.params_mut());
            g.push(gn);
        }
        adam.step(&mut params, &g);
    }

    /// Unweighted MAE in counts over `samples`, each at its own month.
    pub fn validation_mae(
        &self,
        samples: &[PreparedSample],
        normalizer: &Normalizer,
    ) -> Result<f64> {
        if samples.is_empty() {
            bail_input!("no validation samples");
        }
        let mut adj_cache: BTreeMap<usize, Array2<f64>> = BTreeMap::new();
        let mut sum = 0.0;
        let mut count = 0usize;
        for s in samples {
            if let std::collections::btree_map::Entry::Vacant(e) = adj_cache.entry(s.pool_month) {
                e.insert(self.adjacency(s.pool_month)?);
            }
            let x2 = self.model_input(&s.x, s.pool_month)?;
            let pred = normalizer.invert(
                self.model
                    .predict(x2.view(), adj_cache[&s.pool_month].view())?
                    .view(),
            );
            sum += pred
                .iter()
                .zip(s.y_raw.iter())
                .map(|(p, t)| (p - t).abs())
                .sum::<f64>();
            count += pred.len();
        }
        Ok(sum / count as f64)
    }

    fn snapshot(&self) -> (ParamSet, Option<EnvFeaturePool>, Option<NodeEmbeddingPool>) {
        (
            self.model.params().clone(),
            self.env.clone(),
            self.nodes.clone(),
        )
    }

    fn restore(&mut self, snap: (ParamSet, Option<EnvFeaturePool>, Option<NodeEmbeddingPool>)) {
        *self.model.params_mut() = snap.0;
        self.env = snap.1;
        self.nodes = snap.2;
    }

    /// Optimize on `train` with per-sample `weights`, monitoring `validation`.
    pub fn fit(
        &mut self,
        train: &[&PreparedSample],
        weights: &[f64],
        validation: &[PreparedSample],
        normalizer: &Normalizer,
        cfg: &TrainConfig,
    ) -> Result<FitReport> {
        cfg.validate()?;
        if train.is_empty() || train.len() != weights.len() {
            bail_input!(
                "{} training samples with {} weights",
                train.len(),
                weights.len()
            );
        }
        let started = Instant::now();
        let mut rng = stream_rng(cfg.seed, STREAM_SHUFFLE);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut adam = Adam::new(cfg.learning_rate, AdamConfig::default());
        let mut schedule = PlateauSchedule::new(cfg.halve_patience, cfg.stop_patience);
        let mut best = None;
        let mut best_epoch = 0;
        let mut best_val = f64::INFINITY;
        let mut log = Vec::new();
        let mut stopped_early = false;

        for epoch in 1..=cfg.max_epochs {
            order.shuffle(&mut rng);
            let lr = adam.lr();
            let mut acc = LossBreakdown::default();
            let mut n_batches = 0usize;
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| train[i]).collect();
                let w: Vec<f64> = chunk.iter().map(|&i| weights[i]).collect();
                let (lb, grads) = self.loss_and_grad(&batch, &w)?;
                if !lb.total.is_finite() {
                    return Err(Error::Numeric(format!(
                        "training diverged at epoch {epoch}, batch {n_batches}: {lb:?}"
                    )));
                }
                self.step(&mut adam, &grads);
                acc.weighted_data_loss += lb.weighted_data_loss;
                acc.l1 += lb.l1;
                acc.l2 += lb.l2;
                acc.penalty += lb.penalty;
                acc.total += lb.total;
                n_batches += 1;
            }
            let nb = n_batches as f64;
            let val_mae = self.validation_mae(validation, normalizer)?;
            if !val_mae.is_finite() {
                return Err(Error::Numeric(format!(
                    "validation MAE is {val_mae} at epoch {epoch}"
                )));
            }
            log.push(EpochLog {
                epoch,
                lr,
                weighted_data_loss: acc.weighted_data_loss / nb,
                l1: acc.l1 / nb,
                l2: acc.l2 / nb,
                penalty: acc.penalty / nb,
                total: acc.total / nb,
                val_mae,
            });
            if !self.opts.early_stopping {
                best_val = val_mae;
                best_epoch = epoch;
                continue;
            }
            let step = schedule.observe(val_mae);
            if step.improved {
                best = Some(self.snapshot());
                best_val = val_mae;
                best_epoch = epoch;
            }
            if step.stop {
                stopped_early = epoch < cfg.max_epochs;
                break;
            }
            if step.halve {
                adam.set_lr(adam.lr() / 2.0);
            }
        }
        if let Some(snap) = best {
            self.restore(snap);
        }
        Ok(FitReport {
            log,
            best_val_mae: best_val,
            best_epoch,
            stopped_early,
            runtime_s: started.elapsed().as_secs_f64(),
        })
    }

    /// Predictions in counts for deployment: every sample uses the
    /// environment features and adjacency of the last training month.
    pub fn deploy_predict(
        &self,
        samples: &[PreparedSample],
        normalizer: &Normalizer,
    ) -> Result<Vec<Array2<f64>>> {
        let last = self.last_month();
        let a = self.adjacency(last)?;
        samples
            .iter()
            .map(|s| {
                let x2 = self.model_input(&s.x, last)?;
                Ok(normalizer.invert(self.model.predict(x2.view(), a.view())?.view()))
            })
            .collect()
    }

    /// Last pool month (the validation month), or 0 without pools.
    pub fn last_month(&self) -> usize {
        self.env
            .as_ref()
            .map(|e| e.n_months() - 1)
            .or_else(|| self.nodes.as_ref().map(|n| n.n_months() - 1))
            .unwrap_or(0)
    }
}

/// Output of the recency classifier over the training windows.
#[derive(Debug, Clone)]
pub struct RecencyStage {
    /// `p` for each training sample, in `PreparedScenario::train` order.
    pub probabilities: Vec<f64>,
    pub degenerate: bool,
    pub trace: ClassifierTrace,
}

/// Stage one: fit the recency classifier on the training windows and score them.
pub fn recency_stage(data: &PreparedScenario, cfg: &ClassifierConfig) -> Result<RecencyStage> {
    let windows: Vec<Array3<f64>> = data.train.iter().map(|s| s.x.clone()).collect();
    let labels: Vec<bool> = data
        .train
        .iter()
        .map(|s| label_recency(s.delta, crate::reweight::RECENT_WINDOW).is_recent)
        .collect();
    let (cls, trace) = train_classifier(&windows, &labels, data.geo.view(), cfg)?;
    let probabilities = match &cls {
        RecencyClassifier::Degenerate => vec![1.0; windows.len()],
        _ => windows
            .iter()
            .map(|x| cls.probability(x.view(), data.geo.view()))
            .collect::<Result<_>>()?,
    };
    Ok(RecencyStage {
        probabilities,
        degenerate: cls.is_degenerate(),
        trace,
    })
}

/// Mean-one weights of every training sample for exponent `beta`.
pub fn sample_weights(
    data: &PreparedScenario,
    stage: &RecencyStage,
    beta: f64,
) -> Result<(SampleWeights, Vec<WeightRow>)> {
    let wc = WeightConfig::new(beta, data.spec.train_months);
    let raw = data
        .train
        .iter()
        .zip(&stage.probabilities)
        .map(|(s, &p)| compute_weight(p, s.delta, &wc))
        .collect::<Result<Vec<_>>>()?;
    let sw = normalize_weights(&raw)?;
    let rows = data
        .train
        .iter()
        .enumerate()
        .map(|(i, s)| WeightRow {
            sample_index: i,
            delta: s.delta,
            p: stage.probabilities[i],
            w: sw.w[i],
        })
        .collect();
    Ok((sw, rows))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineOptions {
    pub fit: FitOptions,
    /// Use classifier-times-recency sample weights.
    pub reweight: bool,
}

#[derive(Debug, Clone)]
pub struct PipelineRun<F: Forecaster> {
    pub trainer: Trainer<F>,
    pub report: FitReport,
    pub weights: Vec<WeightRow>,
    pub degenerate_classifier: bool,
}

/// Stage one (weights, optional) followed by stage two (fit). A precomputed
/// `stage` is reused instead of retraining the classifier.
pub fn two_stage_pipeline<F: Forecaster>(
    model: F,
    data: &PreparedScenario,
    opts: &PipelineOptions,
    cfg: &TrainConfig,
    stage: Option<&RecencyStage>,
) -> Result<PipelineRun<F>> {
    cfg.validate()?;
    let (weights, rows, degenerate) = if opts.reweight {
        let owned;
        let stage = match stage {
            Some(s) => s,
            None => {
                let mut ccfg = cfg.classifier.clone();
                ccfg.seed = cfg.seed;
                owned = recency_stage(data, &ccfg)?;
                &owned
            }
        };
        let (sw, rows) = sample_weights(data, stage, cfg.beta)?;
        (sw, rows, stage.degenerate)
    } else {
        (SampleWeights::uniform(data.train.len()), Vec::new(), false)
    };
    let mut fit = opts.fit;
    fit.alpha = cfg.step_alpha(fit.alpha, data.train.len());
    let mut trainer = Trainer::new(model, data.geo.clone(), data.n_months(), fit, cfg)?;
    let train: Vec<&PreparedSample> = data.train.iter().collect();
    let report = trainer.fit(&train, &weights.w, &data.validation, &data.normalizer, cfg)?;
    Ok(PipelineRun {
        trainer,
        report,
        weights: rows,
        degenerate_classifier: degenerate,
    })
}

impl<F: Forecaster> PipelineRun<F> {
    /// Write `weights.csv`, `train_log.csv` and `checkpoint/` under `dir`.
    pub fn save(&self, dir: &Path, normalizer: &Normalizer, config: &impl Serialize) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        crate::reweight::write_weights_csv(&dir.join("weights.csv"), &self.weights)?;
        self.report.write_log_csv(&dir.join("train_log.csv"))?;
        Checkpoint::capture(&self.trainer, normalizer, &self.report, config)?
            .save(&dir.join("checkpoint"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub alpha: f64,
    pub beta: f64,
    pub val_mae: f64,
}

/// Lowest validation MAE; ties go to the smaller alpha, then the smaller beta.
pub fn best_grid_point(points: &[GridPoint]) -> Option<GridPoint> {
    points.iter().copied().min_by(|a, b| {
        a.val_mae
            .total_cmp(&b.val_mae)
            .then(a.alpha.total_cmp(&b.alpha))
            .then(a.beta.total_cmp(&b.beta))
    })
}

/// Evaluate every `(alpha, beta)` pair with `eval` and pick the best.
pub fn grid_search(
    alphas: &[f64],
    betas: &[f64],
    mut eval: impl FnMut(f64, f64) -> Result<f64>,
) -> Result<(Vec<GridPoint>, GridPoint)> {
    let mut points = Vec::with_capacity(alphas.len() * betas.len());
    for &alpha in alphas {
        for &beta in betas {
            points.push(GridPoint {
                alpha,
                beta,
                val_mae: eval(alpha, beta)?,
            });
        }
    }
    let best = best_grid_point(&points)
        .ok_or_else(|| Error::Config("empty hyperparameter grid".into()))?;
    Ok((points, best))
}

#[cfg(test)]
mod tests;
