use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::nn::{at_b, glorot, Activation, GroupId, ParamSet};

/// `act(A h W + b)`: neighbourhood averaging followed by a shared linear map.
/// With a skip weight the layer computes `act(A h W + h W_self + b)`, which
/// keeps each region's own features separable from its neighbours'.
#[derive(Debug, Clone)]
pub struct GraphConv {
    pub w: GroupId,
    pub w_self: Option<GroupId>,
    pub b: Option<GroupId>,
    pub act: Activation,
}

#[derive(Debug, Clone)]
pub struct GraphConvCache {
    h: Array2<f64>,
    ah: Array2<f64>,
    out: Array2<f64>,
}

impl GraphConvCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.out
    }
}

impl GraphConv {
    pub fn register<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        f_in: usize,
        f_out: usize,
        bias: bool,
        act: Activation,
        rng: &mut R,
    ) -> Self {
        let w = params.register(
            format!("{name}.w"),
            vec![f_in, f_out],
            glorot(rng, f_in, f_out),
        );
        let b = bias.then(|| params.register(format!("{name}.b"), vec![f_out], vec![0.0; f_out]));
        GraphConv {
            w,
            w_self: None,
            b,
            act,
        }
    }

    /// Same as [`GraphConv::register`] plus a per-region skip weight `{name}.w_self`.
    pub fn register_with_skip<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        f_in: usize,
        f_out: usize,
        bias: bool,
        act: Activation,
        rng: &mut R,
    ) -> Self {
        let mut conv = Self::register(params, name, f_in, f_out, bias, act, rng);
        conv.w_self = Some(params.register(
            format!("{name}.w_self"),
            vec![f_in, f_out],
            glorot(rng, f_in, f_out),
        ));
        conv
    }

    pub fn forward(
        &self,
        p: &ParamSet,
        h: ArrayView2<f64>,
        a: ArrayView2<f64>,
    ) -> (Array2<f64>, GraphConvCache) {
        let ah = a.dot(&h);
        let mut pre = ah.dot(&p.matrix(self.w));
        if let Some(ws) = self.w_self {
            pre += &h.dot(&p.matrix(ws));
        }
        if let Some(b) = self.b {
            pre += &p.vector(b);
        }
        let act = self.act;
        pre.mapv_inplace(|v| act.apply(v));
        let cache = GraphConvCache {
            h: h.to_owned(),
            ah,
            out: pre.clone(),
        };
        (pre, cache)
    }

    /// Returns `(dL/dh, dL/dA)` and accumulates parameter gradients.
    pub fn backward(
        &self,
        p: &ParamSet,
        cache: &GraphConvCache,
        a: ArrayView2<f64>,
        d_out: ArrayView2<f64>,
        grads: &mut ParamSet,
    ) -> (Array2<f64>, Array2<f64>) {
        let act = self.act;
        let mut d_pre = d_out.to_owned();
        ndarray::Zip::from(&mut d_pre)
            .and(&cache.out)
            .for_each(|d, &o| *d *= act.derivative_from_output(o));
        let dw = at_b(cache.ah.view(), d_pre.view());
        grads.matrix_mut(self.w).scaled_add(1.0, &dw);
        if let Some(b) = self.b {
            let db: Array1<f64> = d_pre.sum_axis(Axis(0));
            for (g, v) in grads.data_mut(b).iter_mut().zip(db.iter()) {
                *g += v;
            }
        }
        let d_ah = d_pre.dot(&p.matrix(self.w).t());
        let d_a = d_ah.dot(&cache.h.t());
        let mut d_h = at_b(a, d_ah.view());
        if let Some(ws) = self.w_self {
            let dws = at_b(cache.h.view(), d_pre.view());
            grads.matrix_mut(ws).scaled_add(1.0, &dws);
            d_h += &d_pre.dot(&p.matrix(ws).t());
        }
        (d_h, d_a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn conv_with(w: Array2<f64>, act: Activation) -> (ParamSet, GraphConv) {
        let mut p = ParamSet::new();
        let (r, c) = w.dim();
        let id = p.register("w", vec![r, c], w.into_raw_vec_and_offset().0);
        (
            p,
            GraphConv {
                w: id,
                w_self: None,
                b: None,
                act,
            },
        )
    }

    #[test]
    fn identity_everything_is_identity() {
        let (p, gc) = conv_with(Array2::eye(2), Activation::Identity);
        let h = array![[1.0, -2.0], [3.0, 0.5]];
        let (out, _) = gc.forward(&p, h.view(), Array2::eye(2).view());
        assert_eq!(out, h);
    }

    #[test]
    fn uniform_adjacency_averages() {
        let (p, gc) = conv_with(Array2::eye(1), Activation::Identity);
        let h = array![[1.0], [2.0], [6.0]];
        let a = Array2::from_elem((3, 3), 1.0 / 3.0);
        let (out, _) = gc.forward(&p, h.view(), a.view());
        for v in out.iter() {
            assert!((v - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn skip_term_adds_own_features() {
        let mut p = ParamSet::new();
        let w = p.register("w", vec![1, 1], vec![1.0]);
        let ws = p.register("ws", vec![1, 1], vec![2.0]);
        let gc = GraphConv {
            w,
            w_self: Some(ws),
            b: None,
            act: Activation::Identity,
        };
        let a = Array2::from_elem((2, 2), 0.5);
        let (out, _) = gc.forward(&p, array![[2.0], [4.0]].view(), a.view());
        assert_eq!(out, array![[7.0], [11.0]]);
    }

    #[test]
    fn hand_product() {
        let (p, gc) = conv_with(Array2::eye(1), Activation::Identity);
        let a = array![[0.5, 0.5], [1.0, 0.0]];
        let (out, _) = gc.forward(&p, array![[2.0], [4.0]].view(), a.view());
        assert_eq!(out, array![[3.0], [2.0]]);
    }
}
