//! Recursive co-kriging structure: per-level trend and scale assembly, knot
//! imputation and recursive prediction.
//!
//! Level `t` is modelled as `y_t(s) = ζ_{t−1}(s) ŷ_{t−1}(s) + h_t(s)ᵀβ_t + w_t(s)`
//! with `ζ_{t−1}(s) = g(s)ᵀγ_{t−1}` and `z_t = y_t + ε_t`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::covariance::CovarianceParams;
use crate::error::{Error, Result};
use crate::geometry::{LocationSet, NeighborSearcher};
use crate::linalg;
use crate::nngp::{conditional_from_neighbors, ConditioningMode};

/// Basis functions for the trend `h` and the scale discrepancy `g`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Basis {
    /// `[1]`
    #[default]
    Constant,
    /// `[1, s_1, …, s_d]`
    Linear,
}

impl Basis {
    pub fn ncols(self, dim: usize) -> usize {
        match self {
            Basis::Constant => 1,
            Basis::Linear => 1 + dim,
        }
    }

    pub fn row(self, s: &[f64]) -> Vec<f64> {
        match self {
            Basis::Constant => vec![1.0],
            Basis::Linear => std::iter::once(1.0).chain(s.iter().copied()).collect(),
        }
    }

    pub fn matrix(self, locs: &LocationSet) -> DMatrix<f64> {
        let p = self.ncols(locs.dim());
        DMatrix::from_fn(locs.len(), p, |i, j| match (self, j) {
            (_, 0) => 1.0,
            (Basis::Linear, j) => locs.point(i)[j - 1],
            (Basis::Constant, _) => unreachable!(),
        })
    }
}

/// Observations of one fidelity level.
#[derive(Debug, Clone)]
pub struct FidelityDataset {
    /// 1-based fidelity level.
    pub level: usize,
    pub locs: LocationSet,
    pub z: Vec<f64>,
    pub trend_basis: Basis,
    /// `None` at level 1.
    pub scale_basis: Option<Basis>,
    h: DMatrix<f64>,
    g: Option<DMatrix<f64>>,
}

impl FidelityDataset {
    pub fn new(
        level: usize,
        locs: LocationSet,
        z: Vec<f64>,
        trend_basis: Basis,
        scale_basis: Option<Basis>,
    ) -> Result<Self> {
        if level == 0 {
            return Err(Error::InvalidParameter("levels are numbered from 1".into()));
        }
        if z.len() != locs.len() {
            return Err(Error::Shape(format!("{} observations for {} locations", z.len(), locs.len())));
        }
        if let Some(i) = z.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("non-finite observation at row {i}")));
        }
        let scale_basis = if level == 1 { None } else { Some(scale_basis.unwrap_or_default()) };
        let h = trend_basis.matrix(&locs);
        let g = scale_basis.map(|b| b.matrix(&locs));
        Ok(Self { level, locs, z, trend_basis, scale_basis, h, g })
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn g(&self) -> Option<&DMatrix<f64>> {
        self.g.as_ref()
    }

    /// Rows `idx` as a new dataset of the same level.
    pub fn subset(&self, idx: &[usize]) -> FidelityDataset {
        let locs = self.locs.select(idx);
        let z = idx.iter().map(|&i| self.z[i]).collect();
        FidelityDataset::new(self.level, locs, z, self.trend_basis, self.scale_basis)
            .expect("subset of a valid dataset")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleDiscrepancy {
    pub gamma: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendSpec {
    pub beta: Vec<f64>,
}

/// Mean and variance of `ŷ_t` at a set of locations.
#[derive(Debug, Clone)]
pub struct ImputedField {
    pub at: LocationSet,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl ImputedField {
    pub fn empty(dim: usize) -> Self {
        Self { at: LocationSet::empty(dim), mean: Vec::new(), var: Vec::new() }
    }

    pub fn get(&self, s: &[f64]) -> Option<(f64, f64)> {
        self.at.index_of(s).map(|i| (self.mean[i], self.var[i]))
    }

    /// Means at every point of `locs`, in order.
    pub fn means_at(&self, locs: &LocationSet, level: usize) -> Result<Vec<f64>> {
        locs.points()
            .map(|s| self.get(s).map(|v| v.0).ok_or(Error::MissingPreviousLevel { level, prev: level - 1 }))
            .collect()
    }
}

fn check_len(v: &[f64], n: usize, what: &str) -> Result<()> {
    if v.len() != n {
        return Err(Error::Shape(format!("{what} has length {}, expected {n}", v.len())));
    }
    Ok(())
}

/// `ζ_{t−1}(S_t) ∘ ŷ_{t−1}(S_t) + H β_t`; just `H β_1` at level 1.
pub fn level_mean(
    ds: &FidelityDataset,
    trend: &TrendSpec,
    scale: Option<&ScaleDiscrepancy>,
    yprev: Option<&[f64]>,
) -> Result<Vec<f64>> {
    check_len(&trend.beta, ds.h.ncols(), "beta")?;
    let mut mean: Vec<f64> = (0..ds.len())
        .map(|i| (0..ds.h.ncols()).map(|j| ds.h[(i, j)] * trend.beta[j]).sum())
        .collect();
    if ds.level >= 2 {
        let err = Error::MissingPreviousLevel { level: ds.level, prev: ds.level - 1 };
        let scale = scale.ok_or(err.clone())?;
        let yprev = yprev.ok_or(err)?;
        let g = ds.g.as_ref().expect("scale basis above level 1");
        check_len(&scale.gamma, g.ncols(), "gamma")?;
        check_len(yprev, ds.len(), "previous-level field")?;
        for (i, m) in mean.iter_mut().enumerate() {
            let zeta: f64 = (0..g.ncols()).map(|j| g[(i, j)] * scale.gamma[j]).sum();
            *m += zeta * yprev[i];
        }
    }
    Ok(mean)
}

/// `S_t^* = ⋃_{i>t} S_i \ S_t` for 1-based `t`, in level then storage order.
pub fn knot_set(datasets: &[FidelityDataset], t: usize) -> LocationSet {
    union_above(datasets, t, Some(&datasets[t - 1].locs))
}

/// `⋃_{i>t} S_i` for 1-based `t`, in level then storage order.
pub fn upper_locations(datasets: &[FidelityDataset], t: usize) -> LocationSet {
    union_above(datasets, t, None)
}

fn union_above(datasets: &[FidelityDataset], t: usize, exclude: Option<&LocationSet>) -> LocationSet {
    let dim = datasets.first().map(|d| d.locs.dim()).unwrap_or(2);
    let mut seen = std::collections::HashSet::new();
    let mut coords = Vec::new();
    for ds in &datasets[t..] {
        for s in ds.locs.points() {
            if exclude.is_some_and(|e| e.contains(s)) {
                continue;
            }
            let key: Vec<u64> = s.iter().map(|v| if *v == 0.0 { 0 } else { v.to_bits() }).collect();
            if seen.insert(key) {
                coords.extend_from_slice(s);
            }
        }
    }
    LocationSet::new(dim, coords).expect("deduplicated points")
}

/// Everything needed to predict from one fitted level.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(into = "FittedLevelData", try_from = "FittedLevelData")]
pub struct FittedLevel {
    pub data: FidelityDataset,
    pub beta: Vec<f64>,
    /// Empty at level 1.
    pub gamma: Vec<f64>,
    pub cov: CovarianceParams,
    pub tau2: f64,
    pub m: usize,
    pub mode: ConditioningMode,
    /// `ŷ_{t−1}(S_t)`; empty at level 1.
    pub yprev: Vec<f64>,
    resid: Vec<f64>,
    searcher: NeighborSearcher,
}

impl FittedLevel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        data: FidelityDataset,
        beta: Vec<f64>,
        gamma: Vec<f64>,
        cov: CovarianceParams,
        tau2: f64,
        m: usize,
        mode: ConditioningMode,
        yprev: Vec<f64>,
    ) -> Result<Self> {
        cov.validate()?;
        cov.check_dim(data.locs.dim())?;
        if !(tau2 >= 0.0 && tau2.is_finite()) {
            return Err(Error::InvalidParameter(format!("tau2 must be non-negative, got {tau2}")));
        }
        let mean = if data.level == 1 {
            level_mean(&data, &TrendSpec { beta: beta.clone() }, None, None)?
        } else {
            level_mean(&data, &TrendSpec { beta: beta.clone() }, Some(&ScaleDiscrepancy { gamma: gamma.clone() }), Some(&yprev))?
        };
        let resid = data.z.iter().zip(&mean).map(|(z, m)| z - m).collect();
        let searcher = NeighborSearcher::new(&data.locs);
        Ok(Self { data, beta, gamma, cov, tau2, m, mode, yprev, resid, searcher })
    }

    pub fn level(&self) -> usize {
        self.data.level
    }

    pub fn resid(&self) -> &[f64] {
        &self.resid
    }

    pub fn searcher(&self) -> &NeighborSearcher {
        &self.searcher
    }

    /// `ζ_{t−1}(s)`; zero at level 1.
    pub fn zeta(&self, s: &[f64]) -> f64 {
        match self.data.scale_basis {
            Some(b) => linalg::dot(&b.row(s), &self.gamma),
            None => 0.0,
        }
    }

    pub fn trend(&self, s: &[f64]) -> f64 {
        linalg::dot(&self.data.trend_basis.row(s), &self.beta)
    }

    /// Level conditional at `s` given `ŷ_{t−1}(s) = yprev`: returns
    /// `(ζ ŷ + hᵀβ + B·resid, V)`.
    pub fn conditional(&self, s: &[f64], yprev: f64) -> Result<(f64, f64)> {
        if s.len() != self.data.locs.dim() {
            return Err(Error::DimensionMismatch { expected: self.data.locs.dim(), found: s.len() });
        }
        let nbrs: Vec<usize> = self.searcher.query(s, self.m, false)?.into_iter().map(|n| n.index).collect();
        let c = conditional_from_neighbors(s, &self.data.locs, &nbrs, &self.resid, &self.cov, self.tau2, self.mode)?;
        Ok((self.zeta(s) * yprev + self.trend(s) + c.mean, c.var))
    }
}

#[derive(Serialize, Deserialize)]
struct FittedLevelData {
    level: usize,
    dim: usize,
    coords: Vec<f64>,
    ids: Vec<u64>,
    z: Vec<f64>,
    trend_basis: Basis,
    scale_basis: Option<Basis>,
    beta: Vec<f64>,
    gamma: Vec<f64>,
    cov: CovarianceParams,
    tau2: f64,
    m: usize,
    mode: ConditioningMode,
    yprev: Vec<f64>,
}

impl From<FittedLevel> for FittedLevelData {
    fn from(f: FittedLevel) -> Self {
        Self {
            level: f.data.level,
            dim: f.data.locs.dim(),
            coords: f.data.locs.coords().to_vec(),
            ids: f.data.locs.ids().to_vec(),
            z: f.data.z,
            trend_basis: f.data.trend_basis,
            scale_basis: f.data.scale_basis,
            beta: f.beta,
            gamma: f.gamma,
            cov: f.cov,
            tau2: f.tau2,
            m: f.m,
            mode: f.mode,
            yprev: f.yprev,
        }
    }
}

impl TryFrom<FittedLevelData> for FittedLevel {
    type Error = Error;

    fn try_from(d: FittedLevelData) -> Result<Self> {
        let locs = LocationSet::with_ids(d.dim, d.coords, d.ids)?;
        let data = FidelityDataset::new(d.level, locs, d.z, d.trend_basis, d.scale_basis)?;
        FittedLevel::new(data, d.beta, d.gamma, d.cov, d.tau2, d.m, d.mode, d.yprev)
    }
}

/// `ŷ_t` at `targets` from fitted level `t`. Targets observed at level `t`
/// take the nested shortcut `(z_t(s), τ_t²)` when `shortcut` is set; others
/// use the level conditional with `ŷ_{t−1}` looked up in `below`.
pub fn impute_knots(
    level: &FittedLevel,
    below: Option<&ImputedField>,
    targets: &LocationSet,
    shortcut: bool,
) -> Result<ImputedField> {
    let t = level.level();
    let out: Vec<(f64, f64)> = (0..targets.len())
        .into_par_iter()
        .with_min_len(64)
        .map(|i| {
            let s = targets.point(i);
            if shortcut {
                if let Some(j) = level.data.locs.index_of(s) {
                    return Ok((level.data.z[j], level.tau2));
                }
            }
            let yprev = if t >= 2 {
                below
                    .and_then(|f| f.get(s))
                    .map(|v| v.0)
                    .ok_or(Error::MissingPreviousLevel { level: t, prev: t - 1 })?
            } else {
                0.0
            };
            level.conditional(s, yprev)
        })
        .collect::<Result<_>>()?;
    let (mean, var) = out.into_iter().unzip();
    Ok(ImputedField { at: targets.clone(), mean, var })
}

/// Recursive prediction at one location.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `(mean, var)` of `y_t(s)` for each level up to the requested one.
    pub levels: Vec<(f64, f64)>,
    pub mean: f64,
    pub var: f64,
    pub lo95: f64,
    pub hi95: f64,
}

pub const Z975: f64 = 1.959_963_984_540_054;

/// Iterates the level conditionals from level 1 to `upto` at `target`.
/// Variance at level `t` is `V_t(s) + ζ_{t−1}(s)² var_{t−1}(s)`. With
/// `nugget` the final variance also carries `τ²` of the top level, giving an
/// interval for a new observation instead of the latent value.
pub fn predict_recursive(levels: &[FittedLevel], target: &[f64], upto: usize, nugget: bool) -> Result<Prediction> {
    if upto == 0 || upto > levels.len() {
        return Err(Error::InvalidParameter(format!("level {upto} is not fitted")));
    }
    let mut out = Vec::with_capacity(upto);
    let (mut mean, mut var) = (0.0, 0.0);
    for lv in &levels[..upto] {
        let (m, v) = lv.conditional(target, mean)?;
        let z = lv.zeta(target);
        var = v + z * z * var;
        mean = m;
        out.push((mean, var));
    }
    if nugget {
        var += levels[upto - 1].tau2;
    }
    let sd = var.sqrt();
    Ok(Prediction { levels: out, mean, var, lo95: mean - Z975 * sd, hi95: mean + Z975 * sd })
}

/// Parallel `predict_recursive` over many targets.
pub fn predict_many(levels: &[FittedLevel], targets: &LocationSet, upto: usize, nugget: bool) -> Result<Vec<Prediction>> {
    (0..targets.len())
        .into_par_iter()
        .with_min_len(64)
        .map(|i| predict_recursive(levels, targets.point(i), upto, nugget))
        .collect()
}

/// Equal-tail interval of a Gaussian at level `1 − alpha`.
pub fn gaussian_interval(mean: f64, var: f64, alpha: f64) -> (f64, f64) {
    let q = Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(1.0 - alpha / 2.0);
    let sd = var.max(0.0).sqrt();
    (mean - q * sd, mean + q * sd)
}
