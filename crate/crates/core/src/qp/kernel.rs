use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    /// exp(-|x - x'|_2^2 / (2 sigma^2))
    Gaussian,
    /// exp(-gamma |x - x'|_1)
    Laplacian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub scale: f64,
}

impl KernelSpec {
    pub fn gaussian(sigma: f64) -> Self {
        KernelSpec {
            family: KernelFamily::Gaussian,
            scale: sigma,
        }
    }

    pub fn laplacian(gamma: f64) -> Self {
        KernelSpec {
            family: KernelFamily::Laplacian,
            scale: gamma,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::Domain(format!("kernel scale must be positive, got {}", self.scale)));
        }
        Ok(())
    }

    #[inline]
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match self.family {
            KernelFamily::Gaussian => {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                (-d2 / (2.0 * self.scale * self.scale)).exp()
            }
            KernelFamily::Laplacian => {
                let d1: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
                (-self.scale * d1).exp()
            }
        }
    }
}

/// Symmetric kernel matrix over one sample.
#[derive(Debug, Clone)]
pub struct GramMatrix {
    pub values: DMatrix<f64>,
    pub kernel: KernelSpec,
}

fn rows_of(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..x.nrows()).map(|i| x.row(i).iter().copied().collect()).collect()
}

pub fn gram(kernel: KernelSpec, x: &DMatrix<f64>) -> Result<GramMatrix> {
    kernel.validate()?;
    if x.nrows() == 0 {
        return Err(Error::Domain("gram matrix of an empty sample".into()));
    }
    let rows = rows_of(x);
    let n = rows.len();
    let mut values = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        values[(i, i)] = 1.0;
        for j in 0..i {
            let k = kernel.eval(&rows[i], &rows[j]);
            values[(i, j)] = k;
            values[(j, i)] = k;
        }
    }
    Ok(GramMatrix { values, kernel })
}

/// Kernel evaluations between the rows of `a` (rows of the output) and `b`.
pub fn cross_gram(kernel: KernelSpec, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    kernel.validate()?;
    if a.ncols() != b.ncols() {
        return Err(Error::shape(a.ncols(), b.ncols()));
    }
    let ra = rows_of(a);
    let rb = rows_of(b);
    Ok(DMatrix::from_fn(ra.len(), rb.len(), |i, j| kernel.eval(&ra[i], &rb[j])))
}

/// Pairwise Euclidean distances.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    pub values: DMatrix<f64>,
}

pub fn distance_matrix(x: &DMatrix<f64>) -> DistanceMatrix {
    let rows = rows_of(x);
    let n = rows.len();
    let mut values = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            let d = euclidean(&rows[i], &rows[j]);
            values[(i, j)] = d;
            values[(j, i)] = d;
        }
    }
    DistanceMatrix { values }
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Median of the strictly positive pairwise Euclidean distances (lower middle
/// element for an even count is averaged with the upper one).
pub fn median_heuristic(x: &DMatrix<f64>) -> Result<f64> {
    let rows = rows_of(x);
    let mut dists = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
    for i in 0..rows.len() {
        for j in 0..i {
            let d = euclidean(&rows[i], &rows[j]);
            if d > 0.0 {
                dists.push(d);
            }
        }
    }
    if dists.is_empty() {
        return Err(Error::Domain("median heuristic needs at least two distinct rows".into()));
    }
    let m = dists.len();
    let upper_idx = m / 2;
    let (_, upper, _) = dists.select_nth_unstable_by(upper_idx, |a, b| a.total_cmp(b));
    let upper = *upper;
    if m % 2 == 1 {
        return Ok(upper);
    }
    let lower = dists[..upper_idx].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(0.5 * (lower + upper))
}
