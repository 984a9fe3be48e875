//! Second-order statistics: sample batches, covariance estimation, a cyclic
//! Jacobi eigensolver for small symmetric matrices, and whitening transforms.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Whitening refuses covariances whose eigenvalue ratio falls below this.
pub const DEFAULT_COND_LIMIT: f64 = 1e-10;

/// Off-diagonal Frobenius norm (relative to the full norm) at which the
/// Jacobi sweeps stop.
pub const JACOBI_TOLERANCE: f64 = 1e-12;

pub const JACOBI_MAX_SWEEPS: usize = 100;

/// A contiguous run of columns owned by one network node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelBlock {
    pub node: usize,
    pub channels: usize,
}

/// `N x C` samples (rows are time instants) together with the node layout
/// of the columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    data: Array2<f64>,
    layout: Vec<ChannelBlock>,
}

impl SampleBatch {
    pub fn new(data: Array2<f64>, layout: Vec<ChannelBlock>) -> Result<Self> {
        let (n, c) = data.dim();
        if n == 0 || c == 0 {
            return Err(Error::invalid(format!("empty batch {n}x{c}")));
        }
        let total: usize = layout.iter().map(|b| b.channels).sum();
        if total != c {
            return Err(Error::invalid(format!(
                "layout covers {total} channels, batch has {c}"
            )));
        }
        if layout.iter().any(|b| b.channels == 0) {
            return Err(Error::invalid("layout contains an empty block"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("batch contains non-finite samples"));
        }
        Ok(Self { data, layout })
    }

    /// Batch with all columns attributed to node 0.
    pub fn from_matrix(data: Array2<f64>) -> Result<Self> {
        let c = data.ncols();
        Self::new(
            data,
            vec![ChannelBlock {
                node: 0,
                channels: c,
            }],
        )
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn layout(&self) -> &[ChannelBlock] {
        &self.layout
    }

    pub fn samples(&self) -> usize {
        self.data.nrows()
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    pub fn with_layout(self, layout: Vec<ChannelBlock>) -> Result<Self> {
        Self::new(self.data, layout)
    }

    /// Columns belonging to `node`, if the node owns a block.
    pub fn block(&self, node: usize) -> Option<ArrayView2<'_, f64>> {
        let mut start = 0;
        for b in &self.layout {
            if b.node == node {
                return Some(self.data.slice(s![.., start..start + b.channels]));
            }
            start += b.channels;
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Covariance {
    values: Array2<f64>,
    sample_count: usize,
}

impl Covariance {
    /// Wraps a matrix, symmetrizing it.
    pub fn new(values: Array2<f64>, sample_count: usize) -> Result<Self> {
        if !values.is_square() {
            return Err(Error::invalid("covariance must be square"));
        }
        Ok(Self {
            values: symmetrize(values),
            sample_count,
        })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }
}

fn symmetrize(m: Array2<f64>) -> Array2<f64> {
    let t = m.t().to_owned();
    (m + t) * 0.5
}

/// Subtracts the per-column mean, returning the centered copy and the means.
pub fn center_columns(data: ArrayView2<'_, f64>) -> (Array2<f64>, Array1<f64>) {
    let mean = data
        .mean_axis(Axis(0))
        .unwrap_or_else(|| Array1::zeros(data.ncols()));
    let centered = &data - &mean.view().insert_axis(Axis(0));
    (centered, mean)
}

/// `(1/N) * sum_t x(t) x(t)^T` over the rows of `data`.
pub fn covariance_of(data: ArrayView2<'_, f64>, center: bool) -> Result<Covariance> {
    let n = data.nrows();
    if n < 2 {
        return Err(Error::invalid(format!(
            "covariance needs at least 2 samples, got {n}"
        )));
    }
    let gram = if center {
        let (c, _) = center_columns(data);
        c.t().dot(&c)
    } else {
        data.t().dot(&data)
    };
    Covariance::new(gram / n as f64, n)
}

pub fn sample_covariance(batch: &SampleBatch, center: bool) -> Result<Covariance> {
    covariance_of(batch.data().view(), center)
}

/// Eigenvalues sorted non-increasing, eigenvectors as columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricEigen {
    pub vectors: Array2<f64>,
    pub values: Array1<f64>,
}

impl SymmetricEigen {
    pub fn reconstruct(&self) -> Array2<f64> {
        let scaled = &self.vectors * &self.values.view().insert_axis(Axis(0));
        scaled.dot(&self.vectors.t())
    }
}

/// Full eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Each eigenvector is signed so that its entry of largest magnitude is
/// positive (first such entry on ties), which makes the output a
/// deterministic function of the input.
pub fn sym_eig(matrix: ArrayView2<'_, f64>) -> Result<SymmetricEigen> {
    if !matrix.is_square() {
        return Err(Error::invalid("eigendecomposition needs a square matrix"));
    }
    let n = matrix.nrows();
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("matrix contains non-finite entries"));
    }
    let mut a = symmetrize(matrix.to_owned());
    let mut v = Array2::<f64>::eye(n);
    let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();

    let mut converged = n < 2 || norm == 0.0;
    // One extra sweep after reaching tolerance drives the residual to
    // rounding level thanks to quadratic convergence.
    let mut polished = false;
    let mut sweep = 0;
    while !converged {
        if sweep == JACOBI_MAX_SWEEPS {
            return Err(Error::NumericalFailure(format!(
                "Jacobi eigensolver did not converge in {JACOBI_MAX_SWEEPS} sweeps"
            )));
        }
        sweep += 1;
        for p in 0..n - 1 {
            for q in p + 1..n {
                rotate(&mut a, &mut v, p, q);
            }
        }
        let off = off_diagonal_norm(&a);
        if off <= JACOBI_TOLERANCE * norm {
            if polished || off == 0.0 {
                converged = true;
            }
            polished = true;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[j, j]].total_cmp(&a[[i, i]]));
    let values = Array1::from_iter(order.iter().map(|&i| a[[i, i]]));
    let mut vectors = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        let mut col = v.column(src).to_owned();
        if dominant_sign(col.view()) < 0.0 {
            col.mapv_inplace(|x| -x);
        }
        vectors.column_mut(dst).assign(&col);
    }
    Ok(SymmetricEigen { vectors, values })
}

/// Sign of the entry with the largest magnitude (first one on ties); +1 for
/// an all-zero vector.
pub(crate) fn dominant_sign(col: ArrayView1<'_, f64>) -> f64 {
    let mut best = 0.0f64;
    let mut sign = 1.0;
    for &x in col {
        if x.abs() > best {
            best = x.abs();
            sign = x.signum();
        }
    }
    sign
}

fn off_diagonal_norm(a: &Array2<f64>) -> f64 {
    let mut acc = 0.0;
    for ((i, j), x) in a.indexed_iter() {
        if i != j {
            acc += x * x;
        }
    }
    acc.sqrt()
}

fn rotate(a: &mut Array2<f64>, v: &mut Array2<f64>, p: usize, q: usize) {
    let apq = a[[p, q]];
    if apq == 0.0 {
        return;
    }
    let app = a[[p, p]];
    let aqq = a[[q, q]];
    let theta = (aqq - app) / (2.0 * apq);
    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
    let t = if theta == 0.0 { 1.0 } else { t };
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;
    let n = a.nrows();
    for k in 0..n {
        let akp = a[[k, p]];
        let akq = a[[k, q]];
        a[[k, p]] = c * akp - s * akq;
        a[[k, q]] = s * akp + c * akq;
    }
    for k in 0..n {
        let apk = a[[p, k]];
        let aqk = a[[q, k]];
        a[[p, k]] = c * apk - s * aqk;
        a[[q, k]] = s * apk + c * aqk;
    }
    a[[p, q]] = 0.0;
    a[[q, p]] = 0.0;
    for k in 0..n {
        let vkp = v[[k, p]];
        let vkq = v[[k, q]];
        v[[k, p]] = c * vkp - s * vkq;
        v[[k, q]] = s * vkp + c * vkq;
    }
}

/// `T = E D^{-1/2} E^T` together with its inverse `E D^{1/2} E^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningTransform {
    matrix: Array2<f64>,
    inverse: Array2<f64>,
}

impl WhiteningTransform {
    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    /// Maps whitened-domain directions back to raw-domain filters' duals:
    /// if `x = T w` then `w = T^{-1} x`.
    pub fn inverse(&self) -> &Array2<f64> {
        &self.inverse
    }

    /// Whitens row-sample data: `z(t)^T = y(t)^T T`.
    pub fn apply(&self, data: ArrayView2<'_, f64>) -> Array2<f64> {
        data.dot(&self.matrix)
    }
}

pub fn whitening_transform(cov: &Covariance, cond_limit: f64) -> Result<WhiteningTransform> {
    let eig = sym_eig(cov.values().view())?;
    let largest = eig.values[0];
    let smallest = eig.values[eig.values.len() - 1];
    if largest <= 0.0 || smallest <= cond_limit * largest {
        return Err(Error::RankDeficient {
            smallest,
            largest,
            limit: cond_limit,
        });
    }
    let e = &eig.vectors;
    let inv_sqrt = eig.values.mapv(|d| 1.0 / d.sqrt());
    let sqrt = eig.values.mapv(f64::sqrt);
    let matrix = (e * &inv_sqrt.view().insert_axis(Axis(0))).dot(&e.t());
    let inverse = (e * &sqrt.view().insert_axis(Axis(0))).dot(&e.t());
    Ok(WhiteningTransform {
        matrix: symmetrize(matrix),
        inverse: symmetrize(inverse),
    })
}
