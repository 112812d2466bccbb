use ndarray::{concatenate, s, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;

use super::graph_conv::{GraphConv, GraphConvCache};
use super::Encoder;
use crate::error::Result;
use crate::nn::{Activation, ParamSet};

/// Gated recurrent cell whose input and hidden transforms are graph
/// convolutions over `[x_t | h]`, iterated over every time slice (leading
/// environment slices first) from a zero hidden state.
///
/// ```text
/// z, r = sigmoid(A [x_t | h] W_g + [x_t | h] S_g + b_g)
/// c    = tanh(A [x_t | r*h] W_c + [x_t | r*h] S_c)
/// h'   = z*h + (1-z)*c
/// ```
///
/// The candidate transform has no bias, so an all-zero slice leaves a zero
/// hidden state at zero.
#[derive(Debug, Clone)]
pub struct GraphConvGru {
    hidden: usize,
    gates: GraphConv,
    candidate: GraphConv,
}

#[derive(Debug, Clone)]
struct StepCache {
    h_prev: Array2<f64>,
    gates: GraphConvCache,
    candidate: GraphConvCache,
}

#[derive(Debug, Clone)]
pub struct GruCache {
    steps: Vec<StepCache>,
    x_shape: (usize, usize, usize),
}

impl GraphConvGru {
    pub fn register<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let f_in = 2 + hidden;
        let gates = GraphConv::register_with_skip(
            params,
            &format!("{prefix}.gates"),
            f_in,
            2 * hidden,
            true,
            Activation::Sigmoid,
            rng,
        );
        let candidate = GraphConv::register_with_skip(
            params,
            &format!("{prefix}.candidate"),
            f_in,
            hidden,
            false,
            Activation::Tanh,
            rng,
        );
        GraphConvGru {
            hidden,
            gates,
            candidate,
        }
    }
}

impl Encoder for GraphConvGru {
    type Cache = GruCache;

    fn hidden_dim(&self) -> usize {
        self.hidden
    }

    fn forward(
        &self,
        p: &ParamSet,
        x: ArrayView3<f64>,
        a: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, GruCache)> {
        let (n, t_len, _) = x.dim();
        let hd = self.hidden;
        let mut h = Array2::<f64>::zeros((n, hd));
        let mut steps = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let xt = x.slice(s![.., t, ..]);
            let u = concatenate![Axis(1), xt, h.view()];
            let (g, gates) = self.gates.forward(p, u.view(), a);
            let z = g.slice(s![.., ..hd]);
            let r = g.slice(s![.., hd..]);
            let rh = &r * &h;
            let u2 = concatenate![Axis(1), xt, rh.view()];
            let (c, candidate) = self.candidate.forward(p, u2.view(), a);
            let h_next = &z * &h + &(1.0 - &z) * &c;
            steps.push(StepCache {
                h_prev: std::mem::replace(&mut h, h_next),
                gates,
                candidate,
            });
        }
        Ok((
            h,
            GruCache {
                steps,
                x_shape: x.dim(),
            },
        ))
    }

    fn backward(
        &self,
        p: &ParamSet,
        cache: &GruCache,
        a: ArrayView2<f64>,
        d_hidden: ArrayView2<f64>,
        grads: &mut ParamSet,
    ) -> (Array3<f64>, Array2<f64>) {
        let hd = self.hidden;
        let n = cache.x_shape.0;
        let mut dx = Array3::<f64>::zeros(cache.x_shape);
        let mut d_a = Array2::<f64>::zeros((n, n));
        let mut dh = d_hidden.to_owned();
        for (t, step) in cache.steps.iter().enumerate().rev() {
            let g = step.gates.output();
            let z = g.slice(s![.., ..hd]);
            let r = g.slice(s![.., hd..]);
            let c = step.candidate.output();
            let h = &step.h_prev;

            let dz = &dh * &(h - c);
            let dc = &dh * &(1.0 - &z);
            let mut dh_prev = &dh * &z;

            let (du2, da_c) = self
                .candidate
                .backward(p, &step.candidate, a, dc.view(), grads);
            d_a += &da_c;
            let d_rh = du2.slice(s![.., 2..]);
            let dr = &d_rh * h;
            dh_prev += &(&d_rh * &r);

            let dg = concatenate![Axis(1), dz.view(), dr.view()];
            let (du, da_g) = self.gates.backward(p, &step.gates, a, dg.view(), grads);
            d_a += &da_g;
            dh_prev += &du.slice(s![.., 2..]);

            let mut dxt = dx.slice_mut(s![.., t, ..]);
            dxt += &du2.slice(s![.., ..2]);
            dxt += &du.slice(s![.., ..2]);
            dh = dh_prev;
        }
        (dx, d_a)
    }
}
