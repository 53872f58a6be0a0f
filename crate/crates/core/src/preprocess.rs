//! Centering, optional whitening and length normalization.
//!
//! Vectors flow through `x -> W (x - mean) -> unit length`. The whitener is
//! the symmetric inverse square root of the covariance, so re-fitting it on
//! another domain keeps the output axes aligned with the original ones.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::io::{check_dims, IVector};

/// Norms below this are treated as a failed upstream extraction.
pub const MIN_NORM: f64 = 1e-12;

/// Largest accepted whitener condition number.
pub const MAX_CONDITION: f64 = 1e12;

/// Relative ridge added to a covariance that cannot be inverted as is.
pub const RIDGE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessor {
    mean: DVector<f64>,
    whitener: Option<DMatrix<f64>>,
}

impl Preprocessor {
    pub fn new(mean: DVector<f64>, whitener: Option<DMatrix<f64>>) -> Result<Self> {
        if mean.iter().any(|x| !x.is_finite()) {
            return Err(Error::Precondition("preprocess mean is not finite".into()));
        }
        if let Some(w) = &whitener {
            if w.nrows() != mean.len() || w.ncols() != mean.len() {
                return Err(Error::Dimension {
                    expected: mean.len(),
                    got: w.nrows(),
                });
            }
            if w.iter().any(|x| !x.is_finite()) {
                return Err(Error::Precondition("whitener is not finite".into()));
            }
            let cond = condition_number(w);
            if cond.is_nan() || cond >= MAX_CONDITION {
                return Err(Error::Precondition(format!(
                    "whitener condition number {cond:e} exceeds {MAX_CONDITION:e}"
                )));
            }
        }
        Ok(Self { mean, whitener })
    }

    /// Centering only.
    pub fn centering(vectors: &[IVector]) -> Result<Self> {
        Self::new(fit_mean(vectors)?, None)
    }

    /// Centering followed by whitening, both fitted on `vectors`.
    pub fn whitening(vectors: &[IVector]) -> Result<Self> {
        let mean = fit_mean(vectors)?;
        let w = fit_whitener(vectors)?;
        Self::new(mean, Some(w.matrix))
    }

    pub fn fit(vectors: &[IVector], whiten: bool) -> Result<Self> {
        if whiten {
            Self::whitening(vectors)
        } else {
            Self::centering(vectors)
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn whitener(&self) -> Option<&DMatrix<f64>> {
        self.whitener.as_ref()
    }

    /// Center, whiten if configured, then scale to unit length.
    pub fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: v.len(),
            });
        }
        let centered = v - &self.mean;
        let x = match &self.whitener {
            Some(w) => w * centered,
            None => centered,
        };
        length_normalize(&x)
    }

    pub fn apply_all(&self, vectors: &[IVector]) -> Result<Vec<IVector>> {
        vectors
            .iter()
            .map(|v| {
                self.apply(&v.values)
                    .map(|x| IVector::new(v.utt_id.clone(), x))
                    .map_err(|e| match e {
                        Error::DegenerateVector(n) => Error::Precondition(format!(
                            "utterance {} has degenerate norm {n:e} after preprocessing",
                            v.utt_id
                        )),
                        e => e,
                    })
            })
            .collect()
    }
}

/// Per-dimension arithmetic mean.
pub fn fit_mean(vectors: &[IVector]) -> Result<DVector<f64>> {
    if vectors.is_empty() {
        return Err(Error::Precondition(
            "cannot fit a mean on zero vectors".into(),
        ));
    }
    let dim = check_dims(vectors)?;
    let mut sum = DVector::zeros(dim);
    for v in vectors {
        sum += &v.values;
    }
    Ok(sum / vectors.len() as f64)
}

pub fn length_normalize(v: &DVector<f64>) -> Result<DVector<f64>> {
    let n = v.norm();
    if n.is_nan() || n < MIN_NORM {
        return Err(Error::DegenerateVector(n));
    }
    Ok(v / n)
}

/// A fitted whitening transform.
#[derive(Debug, Clone)]
pub struct Whitener {
    pub matrix: DMatrix<f64>,
    /// The covariance `matrix` whitens (after any ridge).
    pub covariance: DMatrix<f64>,
    pub regularized: bool,
    pub condition_number: f64,
}

/// Sample covariance (divisor N) about the sample mean.
pub fn covariance(vectors: &[IVector]) -> Result<DMatrix<f64>> {
    let mean = fit_mean(vectors)?;
    let dim = mean.len();
    let mut x = DMatrix::zeros(dim, vectors.len());
    for (j, v) in vectors.iter().enumerate() {
        x.set_column(j, &(&v.values - &mean));
    }
    Ok((&x * x.transpose()) / vectors.len() as f64)
}

/// Fits `W = C^{-1/2}` so that `W C W^T = I`.
///
/// When there are no more vectors than dimensions, or the covariance is
/// numerically singular, `C` is replaced by `C + λI` with
/// `λ = 1e-4 · trace(C) / D`.
pub fn fit_whitener(vectors: &[IVector]) -> Result<Whitener> {
    let mut c = covariance(vectors)?;
    let dim = c.nrows();
    let eig = SymmetricEigen::new(c.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let regularized = vectors.len() <= dim
        || min.partial_cmp(&(1e-10 * max)) != Some(std::cmp::Ordering::Greater);
    if regularized {
        let lambda = RIDGE * c.trace() / dim as f64;
        let lambda = if lambda > 0.0 { lambda } else { RIDGE };
        for i in 0..dim {
            c[(i, i)] += lambda;
        }
    }
    let eig = SymmetricEigen::new(c.clone());
    let inv_sqrt = eig.eigenvalues.map(|l| 1.0 / l.sqrt());
    let q = &eig.eigenvectors;
    let matrix = q * DMatrix::from_diagonal(&inv_sqrt) * q.transpose();
    let condition_number = (eig.eigenvalues.max() / eig.eigenvalues.min()).sqrt();
    Ok(Whitener {
        matrix,
        covariance: c,
        regularized,
        condition_number,
    })
}

/// Ratio of the largest to smallest singular value.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        sv.max() / min
    }
}
