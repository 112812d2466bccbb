//! Per-month environment features and node embeddings.
//!
//! The environment feature pool holds one `d`-vector per region per month.
//! A window from month `e` gets its month's features reshaped to
//! `[regions, d/2, 2]` and prepended as extra time slices. The node embedding
//! pool holds one `d2`-vector per region per month; `softmax(M M^T)` row-wise
//! turns a month's embeddings into that month's adjacency. Both pools are
//! regularized by the total variation of every (region, dim) series across
//! months, which favours few, sharp environment changes.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;

use crate::error::{bail_input, Error, Result};
use crate::nn::{gaussian, sign, GroupId, ParamSet};

/// Std of the Gaussian used to initialize both pools.
pub const POOL_INIT_SCALE: f64 = 0.01;
pub const DEFAULT_ENV_DIM: usize = 4;
pub const DEFAULT_NODE_DIM: usize = 4;

/// Learnable `[regions, months, d]` environment features.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvFeaturePool {
    params: ParamSet,
    id: GroupId,
    n_regions: usize,
    n_months: usize,
    dim: usize,
}

impl EnvFeaturePool {
    pub const GROUP: &'static str = "env_pool";

    pub fn new<R: Rng + ?Sized>(
        n_regions: usize,
        n_months: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let data = gaussian(rng, n_regions * n_months * dim, POOL_INIT_SCALE);
        Self::from_data(n_regions, n_months, dim, data)
    }

    pub fn zeros(n_regions: usize, n_months: usize, dim: usize) -> Result<Self> {
        Self::from_data(
            n_regions,
            n_months,
            dim,
            vec![0.0; n_regions * n_months * dim],
        )
    }

    pub fn from_data(
        n_regions: usize,
        n_months: usize,
        dim: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if dim == 0 || !dim.is_multiple_of(2) {
            bail_input!("environment feature dimension must be even and positive, got {dim}");
        }
        if n_regions == 0 || n_months == 0 {
            bail_input!("environment pool needs at least one region and one month");
        }
        if data.len() != n_regions * n_months * dim {
            bail_input!("environment pool data has wrong length");
        }
        let mut params = ParamSet::new();
        let id = params.register(Self::GROUP, vec![n_regions, n_months, dim], data);
        Ok(EnvFeaturePool {
            params,
            id,
            n_regions,
            n_months,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_months(&self) -> usize {
        self.n_months
    }

    pub fn n_regions(&self) -> usize {
        self.n_regions
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn view(&self) -> ArrayView3<'_, f64> {
        ArrayView3::from_shape(
            (self.n_regions, self.n_months, self.dim),
            self.params.data(self.id),
        )
        .expect("pool layout")
    }

    /// Month index used for a lookup: months past the pool (test time) use
    /// the last pool month.
    pub fn resolve_month(&self, month: i64) -> Result<usize> {
        if month < 0 {
            bail_input!("negative environment month {month}");
        }
        Ok((month as usize).min(self.n_months - 1))
    }

    /// `[regions, d]` features of `month`.
    pub fn lookup(&self, month: i64) -> Result<Array2<f64>> {
        let m = self.resolve_month(month)?;
        Ok(self.view().slice(s![.., m, ..]).to_owned())
    }

    /// Add `d_feat` (`[regions, d]`) into the gradient slot of `month`.
    pub fn accumulate_grad(&self, grad: &mut ParamSet, month: usize, d_feat: ArrayView2<f64>) {
        let (n, m, d) = (self.n_regions, self.n_months, self.dim);
        let g = grad.data_mut(self.id);
        for r in 0..n {
            for k in 0..d {
                g[(r * m + month) * d + k] += d_feat[[r, k]];
            }
        }
    }

    pub fn tv(&self) -> f64 {
        tv_regularizer(self.view(), 1)
    }

    /// Add `coef * d tv / d params` into `grad`.
    pub fn add_tv_grad(&self, grad: &mut ParamSet, coef: f64) {
        add_tv_grad(self.view(), 1, coef, grad.data_mut(self.id));
    }

    /// `out[m]` is the summed absolute change from month `m - 1` to `m`
    /// (`out[0]` is zero).
    pub fn month_jumps(&self) -> Vec<f64> {
        month_jumps(self.view(), 1)
    }
}

/// Learnable `[months, regions, d2]` node embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeEmbeddingPool {
    params: ParamSet,
    id: GroupId,
    n_regions: usize,
    n_months: usize,
    dim: usize,
}

impl NodeEmbeddingPool {
    pub const GROUP: &'static str = "node_pool";

    pub fn new<R: Rng + ?Sized>(
        n_regions: usize,
        n_months: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let data = gaussian(rng, n_regions * n_months * dim, POOL_INIT_SCALE);
        Self::from_data(n_regions, n_months, dim, data)
    }

    pub fn from_data(
        n_regions: usize,
        n_months: usize,
        dim: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if dim == 0 || n_regions == 0 || n_months == 0 {
            bail_input!("node embedding pool dimensions must be positive");
        }
        if data.len() != n_regions * n_months * dim {
            bail_input!("node embedding data has wrong length");
        }
        let mut params = ParamSet::new();
        let id = params.register(Self::GROUP, vec![n_months, n_regions, dim], data);
        Ok(NodeEmbeddingPool {
            params,
            id,
            n_regions,
            n_months,
            dim,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn n_months(&self) -> usize {
        self.n_months
    }

    pub fn view(&self) -> ArrayView3<'_, f64> {
        ArrayView3::from_shape(
            (self.n_months, self.n_regions, self.dim),
            self.params.data(self.id),
        )
        .expect("pool layout")
    }

    pub fn resolve_month(&self, month: i64) -> Result<usize> {
        if month < 0 {
            bail_input!("negative environment month {month}");
        }
        Ok((month as usize).min(self.n_months - 1))
    }

    pub fn embeddings(&self, month: usize) -> ArrayView2<'_, f64> {
        self.view().index_axis_move(Axis(0), month)
    }

    pub fn adjacency(&self, month: i64) -> Result<AdjacencyMatrix> {
        let m = self.resolve_month(month)?;
        adjacency_from_embeddings(self.embeddings(m))
    }

    /// Back-propagate `d_adj` through month `month`'s adjacency into `grad`.
    pub fn accumulate_adjacency_grad(
        &self,
        grad: &mut ParamSet,
        month: usize,
        adj: &AdjacencyMatrix,
        d_adj: ArrayView2<f64>,
    ) {
        let d_m = adjacency_backward(self.embeddings(month), adj.view(), d_adj);
        let (n, d) = (self.n_regions, self.dim);
        let g = grad.data_mut(self.id);
        let base = month * n * d;
        for (k, v) in d_m.iter().enumerate() {
            g[base + k] += v;
        }
    }

    pub fn tv(&self) -> f64 {
        tv_regularizer(self.view(), 0)
    }

    pub fn add_tv_grad(&self, grad: &mut ParamSet, coef: f64) {
        add_tv_grad(self.view(), 0, coef, grad.data_mut(self.id));
    }
}

/// Row-stochastic `n x n` matrix with entries in (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMatrix(Array2<f64>);

impl AdjacencyMatrix {
    /// Wrap a matrix whose rows already sum to one.
    pub fn from_row_stochastic(a: Array2<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            bail_input!("adjacency must be square");
        }
        for row in a.rows() {
            if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) || (row.sum() - 1.0).abs() > 1e-6 {
                bail_input!("adjacency rows must be probability vectors");
            }
        }
        Ok(AdjacencyMatrix(a))
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }
}

/// `A = row_softmax(M M^T)` for embeddings `M` of shape `[n, d2]`.
pub fn adjacency_from_embeddings(m: ArrayView2<f64>) -> Result<AdjacencyMatrix> {
    if m.nrows() == 0 {
        bail_input!("need at least one region");
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite node embedding".into()));
    }
    // Explicit dot products and a sorted normalizer keep the result exactly
    // equivariant under region permutations.
    let n = m.nrows();
    let mut a = Array2::<f64>::zeros((n, n));
    let mut scratch = Vec::with_capacity(n);
    for i in 0..n {
        for j in 0..n {
            a[[i, j]] = m.row(i).iter().zip(m.row(j)).map(|(x, y)| x * y).sum();
        }
        let mut row = a.row_mut(i);
        let max = row.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        scratch.clear();
        scratch.extend(row.iter().copied());
        scratch.sort_by(f64::total_cmp);
        let z: f64 = scratch.iter().sum();
        row /= z;
    }
    Ok(AdjacencyMatrix(a))
}

/// Gradient of a scalar w.r.t. `M` given its gradient w.r.t. `A`.
pub fn adjacency_backward(
    m: ArrayView2<f64>,
    a: ArrayView2<f64>,
    d_a: ArrayView2<f64>,
) -> Array2<f64> {
    let n = a.nrows();
    let mut d_logits = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let dot: f64 = (0..n).map(|j| a[[i, j]] * d_a[[i, j]]).sum();
        for j in 0..n {
            d_logits[[i, j]] = a[[i, j]] * (d_a[[i, j]] - dot);
        }
    }
    // L = M M^T  =>  dM = (dL + dL^T) M
    let sym = &d_logits + &d_logits.t();
    sym.dot(&m)
}

/// Prepend `feat` (`[n, d]`, reshaped row-major to `[n, d/2, 2]`) to the
/// window `x` (`[n, t, 2]`) along time.
pub fn inject_env(x: ArrayView3<f64>, feat: ArrayView2<f64>) -> Result<Array3<f64>> {
    let (n, t, c) = x.dim();
    let (fn_, d) = feat.dim();
    if c != 2 || fn_ != n || d % 2 != 0 {
        bail_input!(
            "cannot inject features of shape {:?} into window {:?}",
            feat.dim(),
            x.dim()
        );
    }
    let lead = d / 2;
    let mut out = Array3::<f64>::zeros((n, t + lead, 2));
    for r in 0..n {
        for f in 0..d {
            out[[r, f / 2, f % 2]] = feat[[r, f]];
        }
    }
    out.slice_mut(s![.., lead.., ..]).assign(&x);
    Ok(out)
}

/// Gradient of the injected features, read back from the window gradient.
pub fn inject_env_backward(d_x2: ArrayView3<f64>, dim: usize) -> Array2<f64> {
    let n = d_x2.dim().0;
    Array2::from_shape_fn((n, dim), |(r, f)| d_x2[[r, f / 2, f % 2]])
}

/// Sum over every series along `month_axis` of `sum_m |v[m+1] - v[m]|`.
pub fn tv_regularizer(pool: ArrayView3<f64>, month_axis: usize) -> f64 {
    let months = pool.len_of(Axis(month_axis));
    if months < 2 {
        return 0.0;
    }
    let later = pool.slice_axis(Axis(month_axis), (1..).into());
    let earlier = pool.slice_axis(Axis(month_axis), (..months - 1).into());
    ndarray::Zip::from(&later)
        .and(&earlier)
        .fold(0.0, |acc, a, b| acc + (a - b).abs())
}

fn add_tv_grad(pool: ArrayView3<f64>, month_axis: usize, coef: f64, out: &mut [f64]) {
    let months = pool.len_of(Axis(month_axis));
    if months < 2 {
        return;
    }
    let shape = pool.dim();
    let mut grad = ndarray::ArrayViewMut3::from_shape(shape, out).expect("pool layout");
    for m in 0..months - 1 {
        let a = pool.index_axis(Axis(month_axis), m + 1);
        let b = pool.index_axis(Axis(month_axis), m);
        let diff = (&a - &b).mapv(sign) * coef;
        let mut g_hi = grad.index_axis_mut(Axis(month_axis), m + 1);
        g_hi += &diff;
        let mut g_lo = grad.index_axis_mut(Axis(month_axis), m);
        g_lo -= &diff;
    }
}

fn month_jumps(pool: ArrayView3<f64>, month_axis: usize) -> Vec<f64> {
    let months = pool.len_of(Axis(month_axis));
    let mut out = vec![0.0; months];
    for m in 1..months {
        let a = pool.index_axis(Axis(month_axis), m);
        let b = pool.index_axis(Axis(month_axis), m - 1);
        out[m] = ndarray::Zip::from(&a)
            .and(&b)
            .fold(0.0, |acc, x, y| acc + (x - y).abs());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lookup_clamps_to_last_month() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pool = EnvFeaturePool::new(3, 5, 4, &mut rng).unwrap();
        assert_eq!(pool.lookup(4).unwrap(), pool.lookup(5).unwrap());
        assert_eq!(pool.lookup(0).unwrap().dim(), (3, 4));
        assert_ne!(pool.lookup(0).unwrap(), pool.lookup(4).unwrap());
        assert!(pool.lookup(-1).is_err());
    }

    #[test]
    fn odd_env_dim_rejected() {
        assert!(EnvFeaturePool::zeros(2, 2, 3).is_err());
    }

    #[test]
    fn inject_prepends_reshaped_features() {
        let x = Array3::from_shape_fn((1, 6, 2), |(_, t, c)| (10 * t + c) as f64);
        let feat = array![[1.0, 2.0, 3.0, 4.0]];
        let out = inject_env(x.view(), feat.view()).unwrap();
        assert_eq!(out.dim(), (1, 8, 2));
        assert_eq!(out.slice(s![0, 0..2, ..]), array![[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(out.slice(s![.., 2.., ..]), x);
        let zeros = inject_env(x.view(), Array2::zeros((1, 4)).view()).unwrap();
        assert!(zeros.slice(s![.., ..2, ..]).iter().all(|&v| v == 0.0));
        assert!(inject_env(x.view(), Array2::zeros((2, 4)).view()).is_err());
        let back = inject_env_backward(out.view(), 4);
        assert_eq!(back, feat);
    }

    #[test]
    fn adjacency_examples() {
        let same = adjacency_from_embeddings(array![[0.3, -1.0], [0.3, -1.0]].view()).unwrap();
        for v in same.view() {
            assert!((v - 0.5).abs() < 1e-15);
        }
        let eye = adjacency_from_embeddings(Array2::eye(2).view()).unwrap();
        let hi = std::f64::consts::E / (std::f64::consts::E + 1.0);
        assert!((eye.view()[[0, 0]] - hi).abs() < 1e-12);
        assert!((eye.view()[[0, 1]] - (1.0 - hi)).abs() < 1e-12);
        assert!((eye.view()[[0, 0]] - 0.7311).abs() < 1e-4);
        assert!(adjacency_from_embeddings(array![[f64::NAN]].view()).is_err());
    }

    #[test]
    fn adjacency_permutes_exactly() {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let m = Array2::from_shape_fn((7, 3), |_| rng.gen_range(-2.0..2.0));
            let mut perm: Vec<usize> = (0..7).collect();
            perm.shuffle(&mut rng);
            let pm = m.select(Axis(0), &perm);
            let a = adjacency_from_embeddings(m.view()).unwrap();
            let pa = adjacency_from_embeddings(pm.view()).unwrap();
            for i in 0..7 {
                for j in 0..7 {
                    assert_eq!(pa.view()[[i, j]], a.view()[[perm[i], perm[j]]]);
                }
            }
        }
    }

    #[test]
    fn tv_examples() {
        let series = Array3::from_shape_vec((1, 3, 1), vec![0.0, 1.0, 3.0]).unwrap();
        assert_eq!(tv_regularizer(series.view(), 1), 3.0);
        let scaled = series.mapv(|v| -2.5 * v);
        assert_eq!(tv_regularizer(scaled.view(), 1), 7.5);
        let constant = Array3::from_elem((2, 4, 3), 1.7);
        assert_eq!(tv_regularizer(constant.view(), 1), 0.0);
        let single = Array3::from_elem((2, 1, 3), 1.7);
        assert_eq!(tv_regularizer(single.view(), 1), 0.0);
    }

    #[test]
    fn tv_ignores_month_constant_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pool = EnvFeaturePool::new(2, 6, 4, &mut rng).unwrap();
        let shifted: Vec<f64> = {
            let v = pool.view();
            let mut s = v.to_owned();
            for r in 0..2 {
                for k in 0..4 {
                    let off = (r * 4 + k) as f64 * 0.37;
                    s.slice_mut(s![r, .., k]).mapv_inplace(|x| x + off);
                }
            }
            s.into_raw_vec_and_offset().0
        };
        let other = EnvFeaturePool::from_data(2, 6, 4, shifted).unwrap();
        assert!((pool.tv() - other.tv()).abs() < 1e-12);
    }

    #[test]
    fn month_jumps_locate_step() {
        let mut data = vec![0.0; 5 * 2];
        for m in 3..5 {
            data[m * 2] = 1.0;
        }
        let pool = EnvFeaturePool::from_data(1, 5, 2, data).unwrap();
        assert_eq!(pool.month_jumps(), vec![0.0, 0.0, 0.0, 1.0, 0.0]);
    }
}
