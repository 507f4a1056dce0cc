//! MCMC-free conjugate fit: closed-form posteriors of `(β_t, γ_{t−1}, σ_t²)`
//! given `(κ_t, τ̃_t²)`, K-fold grid selection of the latter, and sequential
//! fitting of all levels.
//!
//! With `Σ̃ = R̃ + τ̃²I` (correlation scale), priors `β ~ N(μ_β, σ²V_β)`,
//! `γ ~ N(μ_γ, σ²V_γ)`, `σ² ~ IG(a, b)` and `X = G ∘ ŷ_{t−1}`:
//!
//! ```text
//! Ṽ_γ = (V_γ⁻¹ + XᵀΣ̃⁻¹X)⁻¹
//! Ṽ_β = (V_β⁻¹ + HᵀΣ̃⁻¹H − HᵀΣ̃⁻¹X Ṽ_γ XᵀΣ̃⁻¹H)⁻¹
//! μ̃_β = V_β⁻¹μ_β + HᵀΣ̃⁻¹z − HᵀΣ̃⁻¹X Ṽ_γ (V_γ⁻¹μ_γ + XᵀΣ̃⁻¹z)
//! a* = a + n/2
//! b* = b + ½(zᵀΣ̃⁻¹z + μ_βᵀV_β⁻¹μ_β + μ_γᵀV_γ⁻¹μ_γ − μ̃_βᵀṼ_βμ̃_β − m_γᵀṼ_γm_γ)
//! ```
//!
//! where `m_γ = V_γ⁻¹μ_γ + XᵀΣ̃⁻¹z`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::CovarianceParams;
use crate::error::{Error, Result};
use crate::geometry::{
    build_neighbor_index, order_locations, LocationOrder, LocationSet, NeighborIndex, NeighborSearcher,
    OrderingStrategy,
};
use crate::nngp::{
    compute_factors_ordered, conditional_from_neighbors, CollapsedFactor, ConditioningMode, CovarianceSolve,
    PrecisionPattern,
};
use crate::priors::{LevelPriors, NormalPrior};
use crate::rnnc::{impute_knots, upper_locations, FidelityDataset, FittedLevel, ImputedField};

/// Generalized cross products `WᵀΣ⁻¹W` for `W = [H X z]`.
#[derive(Debug, Clone)]
pub struct CrossProducts {
    pub n: usize,
    pub hh: DMatrix<f64>,
    pub hz: DVector<f64>,
    pub zz: f64,
    /// `(XᵀΣ⁻¹X, XᵀΣ⁻¹H, XᵀΣ⁻¹z)` when a scale design is present.
    pub x: Option<(DMatrix<f64>, DMatrix<f64>, DVector<f64>)>,
}

pub fn cross_products<S: CovarianceSolve + ?Sized>(
    solver: &S,
    h: &DMatrix<f64>,
    x: Option<&DMatrix<f64>>,
    z: &[f64],
) -> CrossProducts {
    let n = z.len();
    let p = h.ncols();
    let q = x.map_or(0, |x| x.ncols());
    let k = p + q + 1;
    let mut w = DMatrix::zeros(n, k);
    w.columns_mut(0, p).copy_from(h);
    if let Some(x) = x {
        w.columns_mut(p, q).copy_from(x);
    }
    w.column_mut(k - 1).copy_from_slice(z);
    let solved = if n == 0 { DMatrix::zeros(0, k) } else { DMatrix::from_column_slice(n, k, &solver.solve_columns(w.as_slice(), k)) };
    let g = w.transpose() * solved;
    let g = (&g + g.transpose()) * 0.5;
    let hh = g.view((0, 0), (p, p)).into_owned();
    let hz = g.view((0, k - 1), (p, 1)).column(0).into_owned();
    let zz = g[(k - 1, k - 1)];
    let x = x.map(|_| {
        (
            g.view((p, p), (q, q)).into_owned(),
            g.view((p, 0), (q, p)).into_owned(),
            g.view((p, k - 1), (q, 1)).column(0).into_owned(),
        )
    });
    CrossProducts { n, hh, hz, zz, x }
}

fn spd_inverse(m: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sym = (&m + m.transpose()) * 0.5;
    match sym.clone().cholesky() {
        Some(c) => Ok(c.inverse()),
        None => {
            let eig = sym.symmetric_eigenvalues();
            Err(Error::NotPositiveDefinite(format!(
                "{what}: eigenvalues in [{:.3e}, {:.3e}]",
                eig.min(),
                eig.max()
            )))
        }
    }
}

fn gamma_parts(cp: &CrossProducts, prior: Option<&NormalPrior>) -> Result<Option<GammaParts>> {
    let Some((xx, xh, xz)) = &cp.x else { return Ok(None) };
    let prior = prior.ok_or_else(|| Error::InvalidParameter("scale design without a gamma prior".into()))?;
    if prior.dim() != xx.nrows() {
        return Err(Error::Shape(format!("gamma prior of dimension {} for {} scale columns", prior.dim(), xx.nrows())));
    }
    let prec = prior.precision()?;
    let mu = prior.mean_vec();
    let v_tilde = spd_inverse(&prec + xx, "gamma posterior precision")?;
    let prec_mu = &prec * &mu;
    Ok(Some(GammaParts { prec, mu, v_tilde, prec_mu, xh: xh.clone(), xz: xz.clone() }))
}

struct GammaParts {
    prec: DMatrix<f64>,
    mu: DVector<f64>,
    v_tilde: DMatrix<f64>,
    prec_mu: DVector<f64>,
    xh: DMatrix<f64>,
    xz: DVector<f64>,
}

/// `(μ̃_γ, Ṽ_γ)` of `γ | β, σ²` (posterior mean `Ṽ_γ μ̃_γ`, covariance `σ²Ṽ_γ`).
pub fn posterior_gamma(cp: &CrossProducts, beta: &[f64], prior: &NormalPrior) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let g = gamma_parts(cp, Some(prior))?
        .ok_or_else(|| Error::InvalidParameter("no scale design at level 1".into()))?;
    let beta = DVector::from_column_slice(beta);
    let mu_tilde = &g.prec_mu + &g.xz - &g.xh * beta;
    Ok((mu_tilde, g.v_tilde))
}

/// `(μ̃_β, Ṽ_β)` with `γ` integrated out (posterior mean `Ṽ_β μ̃_β`,
/// covariance `σ²Ṽ_β`).
pub fn posterior_beta(cp: &CrossProducts, priors: &LevelPriors) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let p = cp.hh.nrows();
    if priors.beta.dim() != p {
        return Err(Error::Shape(format!("beta prior of dimension {} for {p} trend columns", priors.beta.dim())));
    }
    let prec = priors.beta.precision()?;
    let mut info = &prec + &cp.hh;
    let mut mu = &prec * priors.beta.mean_vec() + &cp.hz;
    if let Some(g) = gamma_parts(cp, priors.gamma.as_ref())? {
        let hx_v = g.xh.transpose() * &g.v_tilde;
        info -= &hx_v * &g.xh;
        mu -= hx_v * (&g.prec_mu + &g.xz);
    }
    let v = spd_inverse(info, "beta posterior precision")?;
    Ok((mu, v))
}

/// `(a*, b*)` of the marginal inverse-gamma posterior of `σ²`.
pub fn posterior_sigma2(cp: &CrossProducts, priors: &LevelPriors) -> Result<(f64, f64)> {
    let a_star = priors.sigma2.a + cp.n as f64 / 2.0;
    let (mu_b, v_b) = posterior_beta(cp, priors)?;
    let prec_b = priors.beta.precision()?;
    let m0 = priors.beta.mean_vec();
    let mut quad = cp.zz + m0.dot(&(&prec_b * &m0)) - mu_b.dot(&(&v_b * &mu_b));
    if let Some(g) = gamma_parts(cp, priors.gamma.as_ref())? {
        let m_g = &g.prec_mu + &g.xz;
        quad += g.mu.dot(&(&g.prec * &g.mu)) - m_g.dot(&(&g.v_tilde * &m_g));
    }
    let b_star = priors.sigma2.b + 0.5 * quad;
    if a_star <= 1.0 {
        return Err(Error::InvalidParameter(format!("a* = {a_star} <= 1; posterior mean of sigma2 undefined")));
    }
    Ok((a_star, b_star))
}

/// Joint conjugate posterior summaries of one level.
#[derive(Debug, Clone)]
pub struct ConjugatePosterior {
    pub a_star: f64,
    pub b_star: f64,
    pub sigma2: f64,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub v_beta: DMatrix<f64>,
    pub mu_beta: DVector<f64>,
    /// Ṽ_γ; empty at level 1.
    pub v_gamma: DMatrix<f64>,
}

pub fn conjugate_posterior(cp: &CrossProducts, priors: &LevelPriors) -> Result<ConjugatePosterior> {
    let (mu_beta, v_beta) = posterior_beta(cp, priors)?;
    let beta: Vec<f64> = (&v_beta * &mu_beta).iter().copied().collect();
    let (gamma, v_gamma) = match (&cp.x, &priors.gamma) {
        (Some(_), Some(prior)) => {
            let (mu_g, v_g) = posterior_gamma(cp, &beta, prior)?;
            ((&v_g * mu_g).iter().copied().collect(), v_g)
        }
        _ => (Vec::new(), DMatrix::zeros(0, 0)),
    };
    let (a_star, b_star) = posterior_sigma2(cp, priors)?;
    let sigma2 = b_star / (a_star - 1.0);
    Ok(ConjugatePosterior { a_star, b_star, sigma2, beta, gamma, v_beta, mu_beta, v_gamma })
}

/// Candidate `(κ, τ̃²)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateGrid {
    pub entries: Vec<(f64, f64)>,
}

fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

impl CandidateGrid {
    pub fn new(entries: Vec<(f64, f64)>) -> Result<Self> {
        let g = Self { entries };
        g.validate()?;
        Ok(g)
    }

    /// Cartesian product of log-spaced `κ` and `τ̃²` ranges.
    pub fn log_spaced(kappa: (f64, f64, usize), tau2_rel: (f64, f64, usize)) -> Result<Self> {
        let ks = log_space(kappa.0, kappa.1, kappa.2);
        let ts = log_space(tau2_rel.0, tau2_rel.1, tau2_rel.2);
        Self::new(ks.iter().flat_map(|&k| ts.iter().map(move |&t| (k, t))).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::InvalidParameter("candidate grid is empty".into()));
        }
        if self.entries.iter().any(|&(k, t)| !(k > 0.0 && t > 0.0 && k.is_finite() && t.is_finite())) {
            return Err(Error::InvalidParameter("grid entries must be positive".into()));
        }
        Ok(())
    }

    fn kappas(&self) -> Vec<f64> {
        let mut ks: Vec<f64> = self.entries.iter().map(|e| e.0).collect();
        ks.sort_by(f64::total_cmp);
        ks.dedup();
        ks
    }
}

impl Default for CandidateGrid {
    /// `κ ∈ [0.1, 25]` × 20 and `τ̃² ∈ [5·10⁻⁴, 0.4]` × 10, both log-spaced.
    fn default() -> Self {
        Self::log_spaced((0.1, 25.0, 20), (5e-4, 0.4, 10)).expect("valid default grid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub kappa: f64,
    pub tau2_rel: f64,
    pub rmspe: f64,
}

/// Selected hyperparameters of one level with the full CV table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub kappa: f64,
    pub tau2_rel: f64,
    pub cv_table: Vec<CvRow>,
}

/// One level's inputs to the conjugate fit.
#[derive(Debug, Clone, Copy)]
pub struct LevelInput<'a> {
    pub data: &'a FidelityDataset,
    /// `ŷ_{t−1}(S_t)`, required above level 1.
    pub yprev: Option<&'a [f64]>,
    pub priors: &'a LevelPriors,
}

impl LevelInput<'_> {
    fn scale_design(&self) -> Result<Option<DMatrix<f64>>> {
        if self.data.level == 1 {
            return Ok(None);
        }
        let yprev = self
            .yprev
            .ok_or(Error::MissingPreviousLevel { level: self.data.level, prev: self.data.level - 1 })?;
        if yprev.len() != self.data.len() {
            return Err(Error::Shape(format!("{} imputed values for {} observations", yprev.len(), self.data.len())));
        }
        let g = self.data.g().expect("scale basis above level 1");
        Ok(Some(DMatrix::from_fn(g.nrows(), g.ncols(), |i, j| g[(i, j)] * yprev[i])))
    }
}

/// Seeded shuffle split into `k` folds whose sizes differ by at most one.
pub fn make_folds(n: usize, k: usize, seed: u64, stream: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > n {
        return Err(Error::InvalidFolds { k, n });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    idx.shuffle(&mut rng);
    let mut folds = vec![Vec::with_capacity(n / k + 1); k];
    for (pos, i) in idx.into_iter().enumerate() {
        folds[pos % k].push(i);
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(folds)
}

struct TestPoint {
    s: Vec<f64>,
    nbrs: Vec<usize>,
    h: DVector<f64>,
    x: Option<DVector<f64>>,
    z: f64,
}

/// Ordered training data with its neighbor structures and held-out points,
/// shared by every candidate.
struct Prepared {
    ordered: LocationSet,
    nbr: Arc<NeighborIndex>,
    pattern: Arc<PrecisionPattern>,
    h: DMatrix<f64>,
    x: Option<DMatrix<f64>>,
    z: Vec<f64>,
    test: Vec<TestPoint>,
}

fn prepare(
    data: &FidelityDataset,
    x: Option<&DMatrix<f64>>,
    train: &[usize],
    test: &[usize],
    m: usize,
    ordering: OrderingStrategy,
) -> Result<Prepared> {
    let locs = data.locs.select(train);
    let ord = order_locations(&locs, ordering)?;
    let rows: Vec<usize> = ord.as_slice().iter().map(|&k| train[k]).collect();
    let ordered = data.locs.select(&rows);
    let nbr = Arc::new(build_neighbor_index(&ordered, &LocationOrder::identity(rows.len()), m));
    let pattern = Arc::new(PrecisionPattern::new(&nbr)?);
    let h = data.h().select_rows(&rows);
    let x_train = x.map(|x| x.select_rows(&rows));
    let z = rows.iter().map(|&i| data.z[i]).collect();
    let searcher = NeighborSearcher::new(&ordered);
    let test = test
        .iter()
        .map(|&i| {
            let s = data.locs.point(i).to_vec();
            let nbrs = searcher.query(&s, m, false)?.into_iter().map(|n| n.index).collect();
            Ok(TestPoint {
                nbrs,
                h: data.h().row(i).transpose(),
                x: x.map(|x| x.row(i).transpose()),
                z: data.z[i],
                s,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Prepared { ordered, nbr, pattern, h, x: x_train, z, test })
}

impl Prepared {
    fn posterior(&self, kappa: f64, tau2_rel: f64, priors: &LevelPriors) -> Result<ConjugatePosterior> {
        let unit = CovarianceParams::isotropic(1.0, kappa)?;
        let f = compute_factors_ordered(&self.ordered, &self.nbr, &unit)?;
        let cf = CollapsedFactor::new(f, &self.pattern, tau2_rel)?;
        conjugate_posterior(&cross_products(&cf, &self.h, self.x.as_ref(), &self.z), priors)
    }

    fn residuals(&self, post: &ConjugatePosterior) -> Vec<f64> {
        let mut mean = &self.h * DVector::from_column_slice(&post.beta);
        if let Some(x) = &self.x {
            mean += x * DVector::from_column_slice(&post.gamma);
        }
        self.z.iter().zip(mean.iter()).map(|(z, m)| z - m).collect()
    }

    /// Held-out MSE for each `τ̃²` at fixed `κ`.
    fn fold_mse(&self, kappa: f64, tau2s: &[f64], priors: &LevelPriors) -> Result<Vec<f64>> {
        let unit = CovarianceParams::isotropic(1.0, kappa)?;
        let f = compute_factors_ordered(&self.ordered, &self.nbr, &unit)?;
        tau2s
            .iter()
            .map(|&t| {
                let cf = CollapsedFactor::new(f.clone(), &self.pattern, t)?;
                let post = conjugate_posterior(&cross_products(&cf, &self.h, self.x.as_ref(), &self.z), priors)?;
                let resid = self.residuals(&post);
                let beta = DVector::from_column_slice(&post.beta);
                let gamma = DVector::from_column_slice(&post.gamma);
                let mut sse = 0.0;
                for tp in &self.test {
                    let c = conditional_from_neighbors(
                        &tp.s,
                        &self.ordered,
                        &tp.nbrs,
                        &resid,
                        &unit,
                        t,
                        ConditioningMode::Observed,
                    )?;
                    let mut pred = tp.h.dot(&beta) + c.mean;
                    if let Some(x) = &tp.x {
                        pred += x.dot(&gamma);
                    }
                    sse += (tp.z - pred).powi(2);
                }
                Ok(sse / self.test.len() as f64)
            })
            .collect()
    }
}

/// K-fold selection of `(κ, τ̃²)` by held-out RMSPE, the root of the mean of
/// per-fold mean squared errors. Ties go to the smaller `τ̃²`, then the
/// smaller `κ`.
pub fn kfold_select(
    input: LevelInput<'_>,
    grid: &CandidateGrid,
    k: usize,
    m: usize,
    seed: u64,
    ordering: OrderingStrategy,
) -> Result<Selection> {
    grid.validate()?;
    let n = input.data.len();
    let folds = make_folds(n, k, seed, input.data.level as u64)?;
    let x = input.scale_design()?;
    let prepared: Vec<Prepared> = folds
        .par_iter()
        .map(|test| {
            let mut in_test = vec![false; n];
            test.iter().for_each(|&i| in_test[i] = true);
            let train: Vec<usize> = (0..n).filter(|&i| !in_test[i]).collect();
            prepare(input.data, x.as_ref(), &train, test, m, ordering)
        })
        .collect::<Result<_>>()?;
    let kappas = grid.kappas();
    let tau_for = |kappa: f64| -> Vec<f64> {
        grid.entries.iter().filter(|e| e.0 == kappa).map(|e| e.1).collect()
    };
    let jobs: Vec<(usize, usize)> = (0..prepared.len()).flat_map(|f| (0..kappas.len()).map(move |j| (f, j))).collect();
    let results: Vec<Vec<f64>> = jobs
        .par_iter()
        .map(|&(f, j)| prepared[f].fold_mse(kappas[j], &tau_for(kappas[j]), input.priors))
        .collect::<Result<_>>()?;
    let mut cv_table = Vec::with_capacity(grid.entries.len());
    for (j, &kappa) in kappas.iter().enumerate() {
        for (l, &tau2_rel) in tau_for(kappa).iter().enumerate() {
            let mean_mse = (0..prepared.len()).map(|f| results[f * kappas.len() + j][l]).sum::<f64>() / prepared.len() as f64;
            cv_table.push(CvRow { kappa, tau2_rel, rmspe: mean_mse.sqrt() });
        }
    }
    let best = cv_table
        .iter()
        .filter(|r| r.rmspe.is_finite())
        .min_by(|a, b| {
            a.rmspe.total_cmp(&b.rmspe).then(a.tau2_rel.total_cmp(&b.tau2_rel)).then(a.kappa.total_cmp(&b.kappa))
        })
        .ok_or_else(|| Error::Divergence("no candidate produced a finite RMSPE".into()))?;
    Ok(Selection { kappa: best.kappa, tau2_rel: best.tau2_rel, cv_table: cv_table.clone() })
}

/// Conjugate posterior on the full level data at fixed `(κ, τ̃²)`, with the
/// fitted level built from the posterior means.
pub fn fit_level(
    input: LevelInput<'_>,
    kappa: f64,
    tau2_rel: f64,
    m: usize,
    ordering: OrderingStrategy,
) -> Result<(ConjugatePosterior, FittedLevel)> {
    let n = input.data.len();
    if n == 0 {
        return Err(Error::EmptyRecords);
    }
    let h = input.data.h();
    if h.ncols() <= n && (h.transpose() * h).cholesky().is_none() {
        return Err(Error::InvalidParameter("trend basis is rank deficient".into()));
    }
    let x = input.scale_design()?;
    let all: Vec<usize> = (0..n).collect();
    let prep = prepare(input.data, x.as_ref(), &all, &[], m, ordering)?;
    let post = prep.posterior(kappa, tau2_rel, input.priors)?;
    let fitted = FittedLevel::new(
        input.data.clone(),
        post.beta.clone(),
        post.gamma.clone(),
        CovarianceParams::isotropic(post.sigma2, kappa)?,
        tau2_rel * post.sigma2,
        m,
        ConditioningMode::Observed,
        input.yprev.map(<[f64]>::to_vec).unwrap_or_default(),
    )?;
    Ok((post, fitted))
}

/// Per-level result of the conjugate fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelPosterior {
    pub level: usize,
    pub kappa: f64,
    pub tau2_rel: f64,
    pub sigma2: f64,
    pub tau2: f64,
    pub a_star: f64,
    pub b_star: f64,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    /// `σ̂² Ṽ_β`, row-major.
    pub beta_cov: Vec<f64>,
    /// `σ̂² Ṽ_γ`, row-major; empty at level 1.
    pub gamma_cov: Vec<f64>,
    pub cv_table: Vec<CvRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConjugateConfig {
    pub m: usize,
    pub k_folds: usize,
    pub seed: u64,
    pub ordering: OrderingStrategy,
    /// One grid per level, or a single grid shared by all.
    pub grids: Vec<CandidateGrid>,
    /// One entry per level.
    pub priors: Vec<LevelPriors>,
}

/// All fitted levels plus the imputed `ŷ_t` over `⋃_{i>t} S_i`.
#[derive(Debug, Clone)]
pub struct ConjugateFit {
    pub levels: Vec<LevelPosterior>,
    pub fitted: Vec<FittedLevel>,
    pub fields: Vec<ImputedField>,
}

fn row_major(m: &DMatrix<f64>, scale: f64) -> Vec<f64> {
    (m.transpose() * scale).as_slice().to_vec()
}

pub fn fit_all(datasets: &[FidelityDataset], cfg: &ConjugateConfig) -> Result<ConjugateFit> {
    let t_max = datasets.len();
    if t_max == 0 {
        return Err(Error::EmptyRecords);
    }
    if cfg.priors.len() != t_max {
        return Err(Error::Shape(format!("{} prior blocks for {t_max} levels", cfg.priors.len())));
    }
    if cfg.grids.len() != 1 && cfg.grids.len() != t_max {
        return Err(Error::Shape(format!("{} grids for {t_max} levels", cfg.grids.len())));
    }
    let mut levels = Vec::with_capacity(t_max);
    let mut fitted: Vec<FittedLevel> = Vec::with_capacity(t_max);
    let mut fields: Vec<ImputedField> = Vec::with_capacity(t_max);
    for (t, ds) in datasets.iter().enumerate() {
        if ds.level != t + 1 {
            return Err(Error::InvalidParameter(format!("dataset {} carries level {}", t + 1, ds.level)));
        }
        let yprev = match fields.last() {
            Some(f) => Some(f.means_at(&ds.locs, ds.level)?),
            None => None,
        };
        let input = LevelInput { data: ds, yprev: yprev.as_deref(), priors: &cfg.priors[t] };
        let grid = &cfg.grids[if cfg.grids.len() == 1 { 0 } else { t }];
        let sel = kfold_select(input, grid, cfg.k_folds, cfg.m, cfg.seed, cfg.ordering)?;
        let (post, fit) = fit_level(input, sel.kappa, sel.tau2_rel, cfg.m, cfg.ordering)?;
        if t + 1 < t_max {
            let knots = upper_locations(datasets, t + 1);
            fields.push(impute_knots(&fit, fields.last(), &knots, true)?);
        }
        levels.push(LevelPosterior {
            level: ds.level,
            kappa: sel.kappa,
            tau2_rel: sel.tau2_rel,
            sigma2: post.sigma2,
            tau2: fit.tau2,
            a_star: post.a_star,
            b_star: post.b_star,
            beta: post.beta.clone(),
            gamma: post.gamma.clone(),
            beta_cov: row_major(&post.v_beta, post.sigma2),
            gamma_cov: row_major(&post.v_gamma, post.sigma2),
            cv_table: sel.cv_table,
        });
        fitted.push(fit);
    }
    Ok(ConjugateFit { levels, fitted, fields })
}
