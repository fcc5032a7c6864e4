//! Evaluation: Fréchet distance between feature statistics, Inception Score,
//! a pinned desk-scale feature extractor, image manipulations for the FID
//! robustness audit and the inference latency benchmark.

pub mod audit;
pub mod extractor;
pub mod manipulate;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Running mean and co-moment matrix of feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    /// Sum of outer products of deviations from the running mean.
    comoment: DMatrix<f64>,
    pub count: usize,
}

impl FeatureStats {
    pub fn new(dim: usize) -> Self {
        Self { mean: DVector::zeros(dim), comoment: DMatrix::zeros(dim, dim), count: 0 }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Welford update with one feature vector.
    pub fn push(&mut self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Shape(format!("feature of length {} for {}-dim stats", x.len(), self.dim())));
        }
        let x = DVector::from_column_slice(x);
        self.count += 1;
        let delta = &x - &self.mean;
        self.mean += &delta / self.count as f64;
        let delta2 = &x - &self.mean;
        self.comoment += &delta * delta2.transpose();
        Ok(())
    }

    /// Combines two partial accumulations (Chan et al. parallel update).
    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::Shape("merging stats of different dimension".into()));
        }
        if self.count == 0 {
            return Ok(other.clone());
        }
        if other.count == 0 {
            return Ok(self.clone());
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta = &other.mean - &self.mean;
        let mean = &self.mean + &delta * (nb / n);
        let comoment = &self.comoment + &other.comoment + &delta * delta.transpose() * (na * nb / n);
        Ok(Self { mean, comoment, count: self.count + other.count })
    }

    pub fn from_rows(rows: &[Vec<f64>], dim: usize) -> Result<Self> {
        let mut s = Self::new(dim);
        for r in rows {
            s.push(r)?;
        }
        Ok(s)
    }

    /// Unbiased covariance estimate.
    pub fn covariance(&self) -> DMatrix<f64> {
        if self.count < 2 {
            return DMatrix::zeros(self.dim(), self.dim());
        }
        let c = &self.comoment / (self.count - 1) as f64;
        (&c + c.transpose()) * 0.5
    }

    /// Builds stats directly from a mean and covariance (count is nominal).
    pub fn from_moments(mean: DVector<f64>, cov: DMatrix<f64>, count: usize) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() || count < 2 {
            return Err(Error::Shape("moments of mismatched dimension".into()));
        }
        Ok(Self { comoment: cov * (count - 1) as f64, mean, count })
    }

    fn check_finite(&self) -> Result<()> {
        if self.mean.iter().chain(self.comoment.iter()).all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Domain("feature statistics contain non-finite values".into()))
        }
    }
}

/// Eigenvalues below this are treated as rounding noise and clamped to zero.
pub const EIGEN_CLAMP: f64 = -1e-8;

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let vals = eig.eigenvalues.map(|v| {
        if v < EIGEN_CLAMP * scale {
            log::warn!("covariance eigenvalue {v:e} below clamp tolerance");
        }
        v.max(0.0).sqrt()
    });
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `|μ1-μ2|² + Tr(Σ1 + Σ2 - 2(Σ1Σ2)^{1/2})`, with the trace of the matrix
/// square root taken through the symmetric form `Σ1^{1/2} Σ2 Σ1^{1/2}`.
pub fn fid(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("fid of {}-dim and {}-dim stats", a.dim(), b.dim())));
    }
    a.check_finite()?;
    b.check_finite()?;
    let (s1, s2) = (a.covariance(), b.covariance());
    let r1 = sqrt_psd(&s1);
    let mid = &r1 * &s2 * &r1;
    let mid = (&mid + mid.transpose()) * 0.5;
    let eig = SymmetricEigen::new(mid);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    let tr_sqrt: f64 = eig
        .eigenvalues
        .iter()
        .map(|&v| {
            if v < EIGEN_CLAMP * scale {
                log::warn!("product eigenvalue {v:e} below clamp tolerance");
            }
            v.max(0.0).sqrt()
        })
        .sum();
    let d = (&a.mean - &b.mean).norm_squared();
    let value = d + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
    Ok(value.max(0.0))
}

/// `exp(mean_x KL(p(y|x) || p(y)))` over rows of class probabilities.
pub fn inception_score(probs: &[Vec<f64>]) -> Result<f64> {
    let Some(k) = probs.first().map(|r| r.len()) else {
        return Err(Error::Domain("inception score of an empty set".into()));
    };
    for (i, row) in probs.iter().enumerate() {
        let sum: f64 = row.iter().sum();
        if row.len() != k || row.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Domain(format!("row {i} is not a probability vector")));
        }
    }
    let n = probs.len() as f64;
    let marginal: Vec<f64> = (0..k).map(|j| probs.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let mut kl = 0.0;
    for row in probs {
        for (p, m) in row.iter().zip(&marginal) {
            if *p > 0.0 {
                kl += p * (p / m).ln();
            }
        }
    }
    let score = (kl / n).exp();
    Ok(score.clamp(1.0, k as f64))
}

/// One row of a FID table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidRow {
    pub spec: String,
    pub fid: f64,
    pub n: usize,
    pub extractor_version: String,
}
