//! Dense tensors stored first-index-fastest, with unfolding, n-mode products,
//! HOSVD and streaming Gram accumulation.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseTensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(dims.len());
    let mut acc = 1;
    for &d in dims {
        s.push(acc);
        acc *= d;
    }
    s
}

/// Advances a first-index-fastest multi-index; returns false after the last one.
fn advance(idx: &mut [usize], dims: &[usize]) -> bool {
    for (i, d) in idx.iter_mut().zip(dims) {
        *i += 1;
        if *i < *d {
            return true;
        }
        *i = 0;
    }
    false
}

impl DenseTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "dims {dims:?} need {} entries, got {}",
                dims.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(DenseTensor { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let len = dims.iter().product();
        DenseTensor {
            dims,
            data: vec![0.0; len],
        }
    }

    pub fn from_fn(dims: Vec<usize>, mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        if len > 0 {
            let mut idx = vec![0; dims.len()];
            loop {
                data.push(f(&idx));
                if !advance(&mut idx, &dims) {
                    break;
                }
            }
        }
        DenseTensor { dims, data }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.dims.len());
        let mut off = 0;
        let mut stride = 1;
        for (&i, &d) in idx.iter().zip(&self.dims) {
            debug_assert!(i < d);
            off += i * stride;
            stride *= d;
        }
        off
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Mode-`mode` unfolding: rows index `mode`, columns enumerate the other
    /// modes in increasing order with earlier modes varying fastest.
    pub fn unfold(&self, mode: usize) -> Result<DMatrix<f64>> {
        self.check_mode(mode)?;
        let rows = self.dims[mode];
        let cols = self.data.len().checked_div(rows).unwrap_or(0);
        let col_strides = self.column_strides(mode);
        let mut m = DMatrix::zeros(rows, cols);
        if self.data.is_empty() {
            return Ok(m);
        }
        let mut idx = vec![0; self.order()];
        for &v in &self.data {
            let col: usize = idx.iter().zip(&col_strides).map(|(i, s)| i * s).sum();
            m[(idx[mode], col)] = v;
            advance(&mut idx, &self.dims);
        }
        Ok(m)
    }

    /// Inverse of [`unfold`](Self::unfold) for a tensor of shape `dims`.
    pub fn refold(m: &DMatrix<f64>, mode: usize, dims: &[usize]) -> Result<Self> {
        if mode >= dims.len() {
            return Err(invalid(format!("mode {mode} out of range for order {}", dims.len())));
        }
        let len: usize = dims.iter().product();
        if m.nrows() != dims[mode] || m.nrows() * m.ncols() != len {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} matrix cannot refold to {dims:?} along mode {mode}",
                m.nrows(),
                m.ncols()
            )));
        }
        let mut t = DenseTensor::zeros(dims.to_vec());
        let col_strides = t.column_strides(mode);
        if len == 0 {
            return Ok(t);
        }
        let mut idx = vec![0; dims.len()];
        for v in t.data.iter_mut() {
            let col: usize = idx.iter().zip(&col_strides).map(|(i, s)| i * s).sum();
            *v = m[(idx[mode], col)];
            advance(&mut idx, dims);
        }
        Ok(t)
    }

    /// `self x_mode m`: every mode-`mode` fiber is premultiplied by `m`.
    pub fn nmode_product(&self, m: &DMatrix<f64>, mode: usize) -> Result<Self> {
        self.check_mode(mode)?;
        if m.ncols() != self.dims[mode] {
            return Err(Error::ShapeMismatch(format!(
                "matrix has {} columns, mode {mode} has size {}",
                m.ncols(),
                self.dims[mode]
            )));
        }
        let mut dims = self.dims.clone();
        dims[mode] = m.nrows();
        let prod = m * self.unfold(mode)?;
        DenseTensor::refold(&prod, mode, &dims)
    }

    fn check_mode(&self, mode: usize) -> Result<()> {
        if mode >= self.order() {
            return Err(invalid(format!("mode {mode} out of range for order {}", self.order())));
        }
        Ok(())
    }

    fn column_strides(&self, mode: usize) -> Vec<usize> {
        let mut others: Vec<usize> = self.dims.clone();
        others[mode] = 1;
        let mut s = strides(&others);
        s[mode] = 0;
        s
    }
}

/// Truncated higher-order SVD: `t ~ core x_1 U_1 x_2 U_2 ...`.
#[derive(Clone, Debug, PartialEq)]
pub struct HosvdResult {
    pub factors: Vec<DMatrix<f64>>,
    pub core: DenseTensor,
}

impl HosvdResult {
    pub fn reconstruct(&self) -> Result<DenseTensor> {
        let mut t = self.core.clone();
        for (mode, u) in self.factors.iter().enumerate() {
            t = t.nmode_product(u, mode)?;
        }
        Ok(t)
    }
}

pub fn hosvd(t: &DenseTensor, ranks: &[usize]) -> Result<HosvdResult> {
    if ranks.len() != t.order() {
        return Err(invalid(format!(
            "{} ranks for an order-{} tensor",
            ranks.len(),
            t.order()
        )));
    }
    let mut factors = Vec::with_capacity(t.order());
    for (mode, &r) in ranks.iter().enumerate() {
        let mut g = GramAccumulator::new(t.dims()[mode]);
        g.accumulate(&t.unfold(mode)?)?;
        factors.push(g.top_eigenvectors(r)?);
    }
    let mut core = t.clone();
    for (mode, u) in factors.iter().enumerate() {
        core = core.nmode_product(&u.transpose(), mode)?;
    }
    Ok(HosvdResult { factors, core })
}

/// Running `sum slab * slab'` over column blocks of a `d`-row matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct GramAccumulator {
    pub matrix: DMatrix<f64>,
    pub count: usize,
}

impl GramAccumulator {
    pub fn new(d: usize) -> Self {
        GramAccumulator {
            matrix: DMatrix::zeros(d, d),
            count: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn accumulate(&mut self, slab: &DMatrix<f64>) -> Result<()> {
        if slab.nrows() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "slab has {} rows, accumulator is {}x{}",
                slab.nrows(),
                self.dim(),
                self.dim()
            )));
        }
        self.matrix.gemm(1.0, slab, &slab.transpose(), 1.0);
        self.count += 1;
        Ok(())
    }

    pub fn merge(mut self, other: GramAccumulator) -> Self {
        self.matrix += other.matrix;
        self.count += other.count;
        self
    }

    /// Eigenpairs in descending eigenvalue order, each vector signed so its
    /// first nonzero entry is positive.
    pub fn eigen(&self) -> (DVector<f64>, DMatrix<f64>) {
        let sym = (&self.matrix + self.matrix.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let d = self.dim();
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let values = DVector::from_iterator(d, order.iter().map(|&i| eig.eigenvalues[i]));
        let mut vectors = DMatrix::zeros(d, d);
        for (c, &i) in order.iter().enumerate() {
            let mut v = eig.eigenvectors.column(i).into_owned();
            if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
                if *first < 0.0 {
                    v.neg_mut();
                }
            }
            vectors.set_column(c, &v);
        }
        (values, vectors)
    }

    pub fn top_eigenvectors(&self, r: usize) -> Result<DMatrix<f64>> {
        if r > self.dim() {
            return Err(invalid(format!("rank {r} exceeds dimension {}", self.dim())));
        }
        Ok(self.eigen().1.columns(0, r).into_owned())
    }
}

/// Streaming sum, sum of squares and count of every entry seen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub sum: f64,
    pub sum_sq: f64,
    pub count: usize,
}

impl NormStats {
    pub fn push_all<'a>(&mut self, values: impl IntoIterator<Item = &'a f64>) {
        for v in values {
            self.sum += v;
            self.sum_sq += v * v;
            self.count += 1;
        }
    }

    pub fn merge(mut self, other: NormStats) -> Self {
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
        self.count += other.count;
        self
    }

    /// `||U - mean(U)||_F^2`.
    pub fn centered_sum_sq(&self) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        (self.sum_sq - self.sum * self.sum / self.count as f64).max(0.0)
    }
}

/// `1 - ||U - U_hat||^2 / ||U - mean(U)||^2` from streamed statistics.
pub fn variance_explained(stats: &NormStats, residual_sum_sq: f64) -> Result<f64> {
    let denom = stats.centered_sum_sq();
    if !(denom > 1e-300) || denom <= 1e-14 * stats.sum_sq {
        return Err(Error::UndefinedStatistic(
            "variance explained of a constant tensor".into(),
        ));
    }
    Ok(1.0 - residual_sum_sq.max(0.0) / denom)
}
