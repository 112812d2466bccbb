//! Covariate-shift weighting.
//!
//! A classifier learns to tell windows from the most recent 12 months apart
//! from older ones; its probability `p` measures how much a window looks like
//! the present. The weight of a sample `delta` months before the test month is
//! `p * (1 - (delta - 1) / span)^beta`, then rescaled to mean one.

use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail_input, Error, Result};
use crate::models::{Encoder, TConvCache, TemporalConvGraph};
use crate::nn::{glorot, sigmoid, Adam, AdamConfig, GroupId, ParamSet};
use crate::training::PlateauSchedule;

pub const RECENT_WINDOW: u32 = 12;

/// Distance kept between classifier probabilities and 0 or 1.
pub const P_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecencyLabel {
    pub is_recent: bool,
}

pub fn label_recency(delta_months: u32, recent_window: u32) -> RecencyLabel {
    RecencyLabel {
        is_recent: delta_months <= recent_window,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightConfig {
    pub beta: f64,
    /// Months in the training span.
    pub train_months: u32,
    pub recent_window: u32,
}

impl WeightConfig {
    pub fn new(beta: f64, train_months: u32) -> Self {
        WeightConfig {
            beta,
            train_months,
            recent_window: RECENT_WINDOW,
        }
    }
}

/// `p * (1 - (delta - 1) / span)^beta`.
pub fn compute_weight(p: f64, delta_months: u32, cfg: &WeightConfig) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        bail_input!("probability {p} outside [0, 1]");
    }
    if cfg.beta < 0.0 || cfg.train_months == 0 {
        bail_input!("weight config needs beta >= 0 and a positive span");
    }
    if delta_months == 0 || delta_months > cfg.train_months {
        bail_input!("delta {delta_months} outside 1..={}", cfg.train_months);
    }
    let recency = 1.0 - (delta_months as f64 - 1.0) / cfg.train_months as f64;
    Ok(p * recency.powf(cfg.beta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleWeights {
    /// Mean-one weights.
    pub w: Vec<f64>,
    /// Factor applied to the raw weights.
    pub scale: f64,
}

impl SampleWeights {
    pub fn uniform(len: usize) -> Self {
        SampleWeights {
            w: vec![1.0; len],
            scale: 1.0,
        }
    }
}

pub fn normalize_weights(raw: &[f64]) -> Result<SampleWeights> {
    if raw.is_empty() {
        return Err(Error::Numeric("no weights to normalize".into()));
    }
    if raw.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::Numeric(
            "weights must be finite and non-negative".into(),
        ));
    }
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    if raw.iter().all(|w| *w == raw[0]) && raw[0] > 0.0 {
        return Ok(SampleWeights {
            w: vec![1.0; raw.len()],
            scale: 1.0 / raw[0],
        });
    }
    if mean <= 0.0 {
        return Err(Error::Numeric(format!(
            "all {} raw weights are zero; the classifier assigns no mass to any training sample",
            raw.len()
        )));
    }
    let scale = 1.0 / mean;
    Ok(SampleWeights {
        w: raw.iter().map(|w| w * scale).collect(),
        scale,
    })
}

fn default_cls_hidden() -> usize {
    16
}
fn default_cls_epochs() -> usize {
    10
}
fn default_cls_lr() -> f64 {
    1e-3
}
fn default_cls_batch() -> usize {
    64
}
fn default_cls_patience() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    #[serde(default = "default_cls_hidden")]
    pub hidden: usize,
    #[serde(default = "default_cls_epochs")]
    pub epochs: usize,
    #[serde(default = "default_cls_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_cls_batch")]
    pub batch_size: usize,
    /// Halve the rate after this many epochs without a lower training loss.
    #[serde(default = "default_cls_patience")]
    pub halve_patience: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden: default_cls_hidden(),
            epochs: default_cls_epochs(),
            learning_rate: default_cls_lr(),
            batch_size: default_cls_batch(),
            halve_patience: default_cls_patience(),
            seed: 0,
        }
    }
}

/// Temporal-conv encoder, mean-pooled over regions, then a logistic unit.
#[derive(Debug, Clone)]
pub struct ClassifierNet {
    params: ParamSet,
    encoder: TemporalConvGraph,
    w: GroupId,
    b: GroupId,
}

impl ClassifierNet {
    pub fn new(hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let encoder = TemporalConvGraph::register(&mut params, "cls", hidden, &mut rng);
        let w = params.register("cls.head.w", vec![hidden, 1], glorot(&mut rng, hidden, 1));
        let b = params.register("cls.head.b", vec![1], vec![0.0]);
        ClassifierNet {
            params,
            encoder,
            w,
            b,
        }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn logit(
        &self,
        x: ArrayView3<f64>,
        a: ArrayView2<f64>,
    ) -> Result<(f64, Array2<f64>, TConvCache)> {
        let (hidden, cache) = self.encoder.forward(&self.params, x, a)?;
        let pooled = hidden.mean_axis(Axis(0)).expect("at least one region");
        let z = pooled.dot(&self.params.matrix(self.w).column(0)) + self.params.data(self.b)[0];
        if !z.is_finite() {
            return Err(Error::Numeric("classifier logit is not finite".into()));
        }
        Ok((z, hidden, cache))
    }

    /// Logistic output kept strictly inside (0, 1).
    pub fn probability(&self, x: ArrayView3<f64>, a: ArrayView2<f64>) -> Result<f64> {
        Ok(sigmoid(self.logit(x, a)?.0).clamp(P_EPS, 1.0 - P_EPS))
    }

    /// Binary cross-entropy of one window and its gradient accumulated into `grads`.
    pub fn loss_and_grad(
        &self,
        x: ArrayView3<f64>,
        a: ArrayView2<f64>,
        label: bool,
        scale: f64,
        grads: &mut ParamSet,
    ) -> Result<f64> {
        let (z, hidden, cache) = self.logit(x, a)?;
        let y = if label { 1.0 } else { 0.0 };
        // log(1 + e^z) - y z, stable in both tails
        let loss = z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z;
        let dz = (sigmoid(z) - y) * scale;
        let n = hidden.nrows() as f64;
        let pooled = hidden.mean_axis(Axis(0)).expect("at least one region");
        for (g, p) in grads.data_mut(self.w).iter_mut().zip(pooled.iter()) {
            *g += dz * p;
        }
        grads.data_mut(self.b)[0] += dz;
        let w = self.params.matrix(self.w).column(0).to_owned();
        let d_hidden = Array2::from_shape_fn(hidden.dim(), |(_, k)| dz * w[k] / n);
        self.encoder
            .backward(&self.params, &cache, a, d_hidden.view(), grads);
        Ok(loss)
    }
}

/// Either a trained network or the constant `p = 1` fallback used when only
/// one class is present.
#[derive(Debug, Clone)]
pub enum RecencyClassifier {
    Trained(ClassifierNet),
    Degenerate,
}

impl RecencyClassifier {
    pub fn is_degenerate(&self) -> bool {
        matches!(self, RecencyClassifier::Degenerate)
    }

    pub fn probability(&self, x: ArrayView3<f64>, a: ArrayView2<f64>) -> Result<f64> {
        match self {
            RecencyClassifier::Trained(net) => net.probability(x, a),
            RecencyClassifier::Degenerate => Ok(1.0),
        }
    }
}

/// Per-epoch mean training loss of the classifier.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassifierTrace {
    pub epoch_loss: Vec<f64>,
    pub lr: Vec<f64>,
}

/// Train on normalized windows with class-balanced mini-batches: each batch
/// draws half its samples (with replacement) from each class.
pub fn train_classifier(
    windows: &[Array3<f64>],
    labels: &[bool],
    adjacency: ArrayView2<f64>,
    cfg: &ClassifierConfig,
) -> Result<(RecencyClassifier, ClassifierTrace)> {
    if windows.len() != labels.len() {
        bail_input!("{} windows but {} labels", windows.len(), labels.len());
    }
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    if pos.is_empty() || neg.is_empty() {
        return Ok((RecencyClassifier::Degenerate, ClassifierTrace::default()));
    }
    if cfg.batch_size < 2 {
        bail_input!("classifier batch size must be at least 2");
    }

    let mut net = ClassifierNet::new(cfg.hidden, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_c1a5);
    let mut adam = Adam::new(cfg.learning_rate, AdamConfig::default());
    let mut schedule = PlateauSchedule::new(cfg.halve_patience, usize::MAX);
    let half = cfg.batch_size / 2;
    let batches = windows.len().div_ceil(cfg.batch_size);
    let mut trace = ClassifierTrace::default();
    let mut grads = net.params.zeros_like();
    for _ in 0..cfg.epochs {
        let mut total = 0.0;
        for _ in 0..batches {
            grads.fill_zero();
            let mut picks: Vec<usize> = Vec::with_capacity(2 * half);
            for class in [&pos, &neg] {
                picks.extend((0..half).map(|_| class[rng.gen_range(0..class.len())]));
            }
            picks.shuffle(&mut rng);
            let scale = 1.0 / picks.len() as f64;
            let mut batch_loss = 0.0;
            for &i in &picks {
                batch_loss +=
                    net.loss_and_grad(windows[i].view(), adjacency, labels[i], scale, &mut grads)?;
            }
            adam.step(&mut [&mut net.params], &[&grads]);
            total += batch_loss * scale;
        }
        let epoch_loss = total / batches as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::Numeric("classifier loss diverged".into()));
        }
        trace.epoch_loss.push(epoch_loss);
        trace.lr.push(adam.lr());
        if schedule.observe(epoch_loss).halve {
            adam.set_lr(adam.lr() / 2.0);
        }
    }
    Ok((RecencyClassifier::Trained(net), trace))
}

/// One row of the cached weight table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub sample_index: usize,
    pub delta: u32,
    pub p: f64,
    pub w: f64,
}

pub fn write_weights_csv(path: &Path, rows: &[WeightRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_weights_csv(path: &Path) -> Result<Vec<WeightRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}
