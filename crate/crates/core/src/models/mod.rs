//! Predictor interface and the two reference spatiotemporal models.
//!
//! A predictor maps a normalized window `[regions, t', 2]` and a row-stochastic
//! adjacency to a one-hour prediction `[regions, 2]`. `t'` may include
//! prepended environment slices; the output shape never depends on it.
//! Models are an [`Encoder`] (window -> per-region hidden state) plus a shared
//! linear readout, so the recency classifier can reuse the same encoders.

mod geo;
mod graph_conv;
mod gru;
mod tconv;

pub use geo::{build_geo_adjacency, GeoAdjacency};
pub use graph_conv::{GraphConv, GraphConvCache};
pub use gru::{GraphConvGru, GruCache};
pub use tconv::{TConvCache, TemporalConvGraph};

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail_input, Error, Result};
use crate::nn::{at_b, glorot, GroupId, ParamSet};

pub const DEFAULT_HIDDEN: usize = 32;

/// Window -> `[regions, hidden]` representation.
pub trait Encoder: Clone {
    type Cache;

    fn hidden_dim(&self) -> usize;

    fn forward(
        &self,
        p: &ParamSet,
        x: ArrayView3<f64>,
        a: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Self::Cache)>;

    /// Accumulates parameter gradients into `grads`; returns the window and
    /// adjacency gradients.
    fn backward(
        &self,
        p: &ParamSet,
        cache: &Self::Cache,
        a: ArrayView2<f64>,
        d_hidden: ArrayView2<f64>,
        grads: &mut ParamSet,
    ) -> (Array3<f64>, Array2<f64>);
}

/// Gradients a forecaster hands back to whoever built its inputs.
#[derive(Debug, Clone)]
pub struct InputGrad {
    pub dx: Array3<f64>,
    pub d_adj: Array2<f64>,
}

/// What the training loop needs from a predictor.
pub trait Forecaster: Clone {
    type Cache;

    fn kind(&self) -> ModelKind;
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;

    /// Whether the model consumes the learned per-month adjacency; models
    /// that do not always receive the static geographic matrix.
    fn uses_dynamic_adjacency(&self) -> bool {
        self.kind().uses_dynamic_adjacency()
    }

    /// `x`: `[regions, t', 2]`, `a`: `[regions, regions]` -> `[regions, 2]`.
    fn forward(&self, x: ArrayView3<f64>, a: ArrayView2<f64>)
        -> Result<(Array2<f64>, Self::Cache)>;

    fn backward(
        &self,
        cache: &Self::Cache,
        d_out: ArrayView2<f64>,
        grads: &mut ParamSet,
    ) -> InputGrad;

    fn predict(&self, x: ArrayView3<f64>, a: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(x, a)?.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Temporal-convolution style (no adaptive adjacency).
    TconvGraph,
    /// Recurrent style with adaptive adjacency.
    GruGraph,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::TconvGraph => "tconv_graph",
            ModelKind::GruGraph => "gru_graph",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "tconv_graph" => Ok(ModelKind::TconvGraph),
            "gru_graph" => Ok(ModelKind::GruGraph),
            other => bail_input!("unknown model {other:?} (expected tconv_graph or gru_graph)"),
        }
    }

    pub fn uses_dynamic_adjacency(self) -> bool {
        matches!(self, ModelKind::GruGraph)
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Encoder followed by a linear readout to the two channels.
#[derive(Debug, Clone)]
pub struct Predictor<E: Encoder> {
    kind: ModelKind,
    params: ParamSet,
    encoder: E,
    head_w: GroupId,
    head_b: GroupId,
}

pub struct PredictorCache<C> {
    hidden: Array2<f64>,
    encoder: C,
    adj: Array2<f64>,
}

impl Predictor<TemporalConvGraph> {
    pub fn tconv(hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let encoder = TemporalConvGraph::register(&mut params, "tconv", hidden, &mut rng);
        Self::with_head(ModelKind::TconvGraph, params, encoder, &mut rng)
    }
}

impl Predictor<GraphConvGru> {
    pub fn gru(hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let encoder = GraphConvGru::register(&mut params, "gru", hidden, &mut rng);
        Self::with_head(ModelKind::GruGraph, params, encoder, &mut rng)
    }
}

impl<E: Encoder> Predictor<E> {
    fn with_head(kind: ModelKind, mut params: ParamSet, encoder: E, rng: &mut ChaCha8Rng) -> Self {
        let h = encoder.hidden_dim();
        let head_w = params.register("head.w", vec![h, 2], glorot(rng, h, 2));
        let head_b = params.register("head.b", vec![2], vec![0.0; 2]);
        Predictor {
            kind,
            params,
            encoder,
            head_w,
            head_b,
        }
    }

    pub fn encoder(&self) -> &E {
        &self.encoder
    }
}

impl<E: Encoder> Forecaster for Predictor<E> {
    type Cache = PredictorCache<E::Cache>;

    fn kind(&self) -> ModelKind {
        self.kind
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward(
        &self,
        x: ArrayView3<f64>,
        a: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Self::Cache)> {
        let n = x.dim().0;
        if x.dim().2 != 2 || a.dim() != (n, n) {
            bail_input!(
                "window {:?} does not match adjacency {:?}",
                x.dim(),
                a.dim()
            );
        }
        let (hidden, enc) = self.encoder.forward(&self.params, x, a)?;
        let mut out = hidden.dot(&self.params.matrix(self.head_w));
        out += &self.params.vector(self.head_b);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "{} produced a non-finite prediction",
                self.kind
            )));
        }
        Ok((
            out,
            PredictorCache {
                hidden,
                encoder: enc,
                adj: a.to_owned(),
            },
        ))
    }

    fn backward(
        &self,
        cache: &Self::Cache,
        d_out: ArrayView2<f64>,
        grads: &mut ParamSet,
    ) -> InputGrad {
        grads
            .matrix_mut(self.head_w)
            .scaled_add(1.0, &at_b(cache.hidden.view(), d_out));
        for (g, v) in grads
            .data_mut(self.head_b)
            .iter_mut()
            .zip(d_out.sum_axis(Axis(0)))
        {
            *g += v;
        }
        let d_hidden = d_out.dot(&self.params.matrix(self.head_w).t());
        let (dx, d_adj) = self.encoder.backward(
            &self.params,
            &cache.encoder,
            cache.adj.view(),
            d_hidden.view(),
            grads,
        );
        InputGrad { dx, d_adj }
    }
}

/// Run `$body` with `$p` bound to a freshly built predictor of `$kind`.
#[macro_export]
macro_rules! with_predictor {
    ($kind:expr, $hidden:expr, $seed:expr, |$p:ident| $body:expr) => {
        match $kind {
            $crate::models::ModelKind::TconvGraph => {
                #[allow(unused_mut)]
                let mut $p = $crate::models::Predictor::tconv($hidden, $seed);
                $body
            }
            $crate::models::ModelKind::GruGraph => {
                #[allow(unused_mut)]
                let mut $p = $crate::models::Predictor::gru($hidden, $seed);
                $body
            }
        }
    };
}
