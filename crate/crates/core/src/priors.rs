//! Prior distributions shared by the conjugate fit and the sampler.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `N(mean, cov)`. In the conjugate fit the covariance is additionally
/// scaled by `σ²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalPrior {
    pub mean: Vec<f64>,
    /// Row-major `p × p`.
    pub cov: Vec<f64>,
}

impl NormalPrior {
    pub fn new(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let p = mean.len();
        if cov.shape() != (p, p) {
            return Err(Error::Shape(format!("prior covariance {:?} for mean of length {p}", cov.shape())));
        }
        let prior = Self { mean, cov: cov.transpose().as_slice().to_vec() };
        prior.validate()?;
        Ok(prior)
    }

    /// `N(mean·1, var·I)` in `p` dimensions.
    pub fn isotropic(p: usize, mean: f64, var: f64) -> Self {
        Self::new(vec![mean; p], DMatrix::identity(p, p) * var).expect("valid isotropic prior")
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.mean)
    }

    pub fn cov_matrix(&self) -> DMatrix<f64> {
        let p = self.dim();
        DMatrix::from_row_slice(p, p, &self.cov)
    }

    pub fn precision(&self) -> Result<DMatrix<f64>> {
        self.cov_matrix()
            .cholesky()
            .map(|c| c.inverse())
            .ok_or_else(|| Error::NotPositiveDefinite("prior covariance".into()))
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.dim();
        if self.cov.len() != p * p {
            return Err(Error::Shape("prior covariance is not square".into()));
        }
        let c = self.cov_matrix();
        if (c.clone() - c.transpose()).abs().max() > 1e-12 * c.abs().max().max(1.0) {
            return Err(Error::InvalidParameter("prior covariance is not symmetric".into()));
        }
        if p > 0 && c.symmetric_eigenvalues().min() <= 0.0 {
            return Err(Error::NotPositiveDefinite("prior covariance".into()));
        }
        Ok(())
    }
}

/// `IG(a, b)` with density `∝ x^{−a−1} e^{−b/x}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InverseGammaPrior {
    pub a: f64,
    pub b: f64,
}

impl Default for InverseGammaPrior {
    fn default() -> Self {
        Self { a: 2.0, b: 1.0 }
    }
}

impl InverseGammaPrior {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
            return Err(Error::InvalidParameter(format!("inverse-gamma parameters must be positive, got ({a}, {b})")));
        }
        Ok(Self { a, b })
    }

    /// Log density up to the normalizing constant.
    pub fn log_kernel(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return f64::NEG_INFINITY;
        }
        -(self.a + 1.0) * x.ln() - self.b / x
    }

    pub fn mean(&self) -> Option<f64> {
        (self.a > 1.0).then(|| self.b / (self.a - 1.0))
    }
}

/// Priors of one level. `gamma` is ignored at level 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelPriors {
    pub beta: NormalPrior,
    pub gamma: Option<NormalPrior>,
    pub sigma2: InverseGammaPrior,
}

impl LevelPriors {
    /// `β ~ N(0, var·I)`, `γ ~ N(0, var·I)`, `σ² ~ IG(2, 1)`.
    pub fn vague(p: usize, q: Option<usize>, var: f64) -> Self {
        Self {
            beta: NormalPrior::isotropic(p, 0.0, var),
            gamma: q.map(|q| NormalPrior::isotropic(q, 0.0, var)),
            sigma2: InverseGammaPrior::default(),
        }
    }
}
