use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3};
use rand::Rng;

use super::graph_conv::{GraphConv, GraphConvCache};
use super::Encoder;
use crate::error::Result;
use crate::nn::{at_b, glorot, Activation, GroupId, ParamSet};

const KERNEL: usize = 3;
const DILATIONS: [usize; 2] = [1, 3];

/// Two (causal temporal convolution -> graph convolution with a per-region
/// skip -> ReLU) blocks, read out at the final time slice.
///
/// Kernel 3 with dilations 1 and 3 gives the final slice a receptive field
/// of 9 steps, enough to see every slice of a 6-hour window plus 4
/// environment features. No layer carries a bias, so all-zero leading slices
/// behave exactly like the causal zero padding.
#[derive(Debug, Clone)]
pub struct TemporalConvGraph {
    hidden: usize,
    temporal: [GroupId; 2],
    graph: [GraphConv; 2],
}

#[derive(Debug, Clone)]
pub struct TConvCache {
    x: Array3<f64>,
    /// Block-1 graph convolutions at the slices feeding the final readout.
    block1: Vec<GraphConvCache>,
    g2: GraphConvCache,
}

impl TemporalConvGraph {
    pub fn register<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let t1 = params.register(
            format!("{prefix}.temporal1"),
            vec![KERNEL * 2, hidden],
            glorot(rng, KERNEL * 2, hidden),
        );
        let g1 = GraphConv::register_with_skip(
            params,
            &format!("{prefix}.graph1"),
            hidden,
            hidden,
            false,
            Activation::Relu,
            rng,
        );
        let t2 = params.register(
            format!("{prefix}.temporal2"),
            vec![KERNEL * hidden, hidden],
            glorot(rng, KERNEL * hidden, hidden),
        );
        let g2 = GraphConv::register_with_skip(
            params,
            &format!("{prefix}.graph2"),
            hidden,
            hidden,
            false,
            Activation::Relu,
            rng,
        );
        TemporalConvGraph {
            hidden,
            temporal: [t1, t2],
            graph: [g1, g2],
        }
    }

    /// Weight block of tap `k` for a `[K * c_in, c_out]` kernel.
    fn tap(w: ArrayView2<'_, f64>, k: usize, c_in: usize) -> ArrayView2<'_, f64> {
        w.slice_move(s![k * c_in..(k + 1) * c_in, ..])
    }

    fn taps(t: usize, dilation: usize) -> impl Iterator<Item = (usize, usize)> {
        (0..KERNEL).filter_map(move |k| t.checked_sub(k * dilation).map(|s| (k, s)))
    }
}

impl Encoder for TemporalConvGraph {
    type Cache = TConvCache;

    fn hidden_dim(&self) -> usize {
        self.hidden
    }

    fn forward(
        &self,
        p: &ParamSet,
        x: ArrayView3<f64>,
        a: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, TConvCache)> {
        let (n, t_len, c_in) = x.dim();
        let last = t_len - 1;
        let w1 = p.matrix(self.temporal[0]);
        let w2 = p.matrix(self.temporal[1]);

        let mut block1 = Vec::with_capacity(KERNEL);
        let mut c2 = Array2::<f64>::zeros((n, self.hidden));
        for (k2, s2) in Self::taps(last, DILATIONS[1]) {
            let mut c1 = Array2::<f64>::zeros((n, self.hidden));
            for (k1, s1) in Self::taps(s2, DILATIONS[0]) {
                c1 += &x.slice(s![.., s1, ..]).dot(&Self::tap(w1, k1, c_in));
            }
            let (g1, cache) = self.graph[0].forward(p, c1.view(), a);
            c2 += &g1.dot(&Self::tap(w2, k2, self.hidden));
            block1.push(cache);
        }
        let (out, g2) = self.graph[1].forward(p, c2.view(), a);
        Ok((
            out,
            TConvCache {
                x: x.to_owned(),
                block1,
                g2,
            },
        ))
    }

    fn backward(
        &self,
        p: &ParamSet,
        cache: &TConvCache,
        a: ArrayView2<f64>,
        d_hidden: ArrayView2<f64>,
        grads: &mut ParamSet,
    ) -> (Array3<f64>, Array2<f64>) {
        let (_, t_len, c_in) = cache.x.dim();
        let last = t_len - 1;
        let w1 = p.matrix(self.temporal[0]);
        let w2 = p.matrix(self.temporal[1]);
        let mut dx = Array3::<f64>::zeros(cache.x.dim());

        let (d_c2, mut d_a) = self.graph[1].backward(p, &cache.g2, a, d_hidden, grads);
        for ((k2, s2), g1_cache) in Self::taps(last, DILATIONS[1]).zip(&cache.block1) {
            let g1 = g1_cache.output();
            let dw2 = at_b(g1.view(), d_c2.view());
            grads
                .matrix_mut(self.temporal[1])
                .slice_mut(s![k2 * self.hidden..(k2 + 1) * self.hidden, ..])
                .scaled_add(1.0, &dw2);
            let d_g1 = d_c2.dot(&Self::tap(w2, k2, self.hidden).t());
            let (d_c1, d_a1) = self.graph[0].backward(p, g1_cache, a, d_g1.view(), grads);
            d_a += &d_a1;
            for (k1, s1) in Self::taps(s2, DILATIONS[0]) {
                let xs = cache.x.slice(s![.., s1, ..]);
                let dw1 = at_b(xs, d_c1.view());
                grads
                    .matrix_mut(self.temporal[0])
                    .slice_mut(s![k1 * c_in..(k1 + 1) * c_in, ..])
                    .scaled_add(1.0, &dw1);
                let d_xs = d_c1.dot(&Self::tap(w1, k1, c_in).t());
                let mut dst = dx.slice_mut(s![.., s1, ..]);
                dst += &d_xs;
            }
        }
        (dx, d_a)
    }
}
