//! Stationary exponential covariance kernels.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::LocationSet;

/// Relative diagonal jitter applied to every neighbor block before factoring.
pub const JITTER: f64 = 1e-10;

/// A stationary covariance function of the coordinate lags.
pub trait Kernel {
    fn cov(&self, a: &[f64], b: &[f64]) -> f64;

    /// Value at zero lag.
    fn variance(&self) -> f64;
}

/// `σ² exp(−κ‖d‖)` when `decay` has one entry, `σ² exp(−Σ κ_j |d_j|)` otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceParams {
    pub sigma2: f64,
    pub decay: Vec<f64>,
}

impl CovarianceParams {
    pub fn isotropic(sigma2: f64, kappa: f64) -> Result<Self> {
        let p = Self { sigma2, decay: vec![kappa] };
        p.validate()?;
        Ok(p)
    }

    pub fn anisotropic(sigma2: f64, decay: Vec<f64>) -> Result<Self> {
        let p = Self { sigma2, decay };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(Error::InvalidParameter(format!("sigma2 must be positive, got {}", self.sigma2)));
        }
        if self.decay.is_empty() {
            return Err(Error::InvalidParameter("decay vector is empty".into()));
        }
        if let Some(k) = self.decay.iter().find(|k| !(**k > 0.0 && k.is_finite())) {
            return Err(Error::InvalidParameter(format!("decay must be positive, got {k}")));
        }
        Ok(())
    }

    pub fn is_isotropic(&self) -> bool {
        self.decay.len() == 1
    }

    /// Reciprocal decay per dimension.
    pub fn range(&self) -> Vec<f64> {
        self.decay.iter().map(|k| 1.0 / k).collect()
    }

    /// Same decay with a different marginal variance.
    pub fn with_sigma2(&self, sigma2: f64) -> Self {
        Self { sigma2, decay: self.decay.clone() }
    }

    /// Correlation `R(a, b)`; assumes matching dimensions.
    #[inline]
    pub fn correlation(&self, a: &[f64], b: &[f64]) -> f64 {
        if let [k] = self.decay[..] {
            let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            (-k * d2.sqrt()).exp()
        } else {
            let s: f64 = a.iter().zip(b).zip(&self.decay).map(|((x, y), k)| k * (x - y).abs()).sum();
            (-s).exp()
        }
    }

    pub fn check_dim(&self, dim: usize) -> Result<()> {
        if self.decay.len() != 1 && self.decay.len() != dim {
            return Err(Error::DimensionMismatch { expected: self.decay.len(), found: dim });
        }
        Ok(())
    }
}

impl Kernel for CovarianceParams {
    #[inline]
    fn cov(&self, a: &[f64], b: &[f64]) -> f64 {
        self.sigma2 * self.correlation(a, b)
    }

    fn variance(&self) -> f64 {
        self.sigma2
    }
}

/// Nugget variance together with its ratio to the process variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub tau2: f64,
    pub tau2_rel: f64,
}

impl NoiseParams {
    pub fn from_absolute(tau2: f64, sigma2: f64) -> Result<Self> {
        if !(tau2 >= 0.0 && tau2.is_finite()) {
            return Err(Error::InvalidParameter(format!("tau2 must be non-negative, got {tau2}")));
        }
        Ok(Self { tau2, tau2_rel: tau2 / sigma2 })
    }

    pub fn from_relative(tau2_rel: f64, sigma2: f64) -> Result<Self> {
        if !(tau2_rel >= 0.0 && tau2_rel.is_finite()) {
            return Err(Error::InvalidParameter(format!("relative nugget must be non-negative, got {tau2_rel}")));
        }
        Ok(Self { tau2: tau2_rel * sigma2, tau2_rel })
    }
}

pub fn kernel(s: &[f64], s2: &[f64], p: &CovarianceParams) -> Result<f64> {
    if s.len() != s2.len() {
        return Err(Error::DimensionMismatch { expected: s.len(), found: s2.len() });
    }
    p.check_dim(s.len())?;
    Ok(p.cov(s, s2))
}

pub fn cov_block(a: &LocationSet, b: &LocationSet, p: &CovarianceParams) -> Result<DMatrix<f64>> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch { expected: a.dim(), found: b.dim() });
    }
    p.check_dim(a.dim())?;
    Ok(DMatrix::from_fn(a.len(), b.len(), |i, j| p.cov(a.point(i), b.point(j))))
}
