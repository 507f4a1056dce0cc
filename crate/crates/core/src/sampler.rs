//! Collapsed MCMC over `(β_t, γ_{t−1}, σ_t², κ_t, τ_t²)` level by level, with
//! the latent processes integrated out.
//!
//! Levels are sampled in order. Level `t` reads `ŷ_{t−1}` from the stored
//! draws of level `t − 1` (iteration `i` uses stored draw `i mod K`), so the
//! level-1 chain never depends on higher-level data.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::statistics::{Data, OrderStatistics};

use crate::conjugate::{cross_products, posterior_gamma, CrossProducts};
use crate::covariance::CovarianceParams;
use crate::error::{Error, Result};
use crate::geometry::{
    build_neighbor_index, order_locations, LocationOrder, LocationSet, NeighborIndex, NeighborSearcher,
    OrderingStrategy,
};
use crate::nngp::{compute_factors_ordered, conditional_from_neighbors, CollapsedFactor, ConditioningMode, PrecisionPattern};
use crate::priors::{InverseGammaPrior, LevelPriors, NormalPrior};
use crate::rnnc::{upper_locations, FidelityDataset, FittedLevel};

const BLOCK_MH: u64 = 1;
const BLOCK_BETA: u64 = 2;
const BLOCK_GAMMA: u64 = 3;
const BLOCK_KNOTS: u64 = 4;

/// One independent stream per `(level, block)`.
pub fn block_rng(seed: u64, level: usize, block: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(level as u64 * 16 + block);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Random-walk standard deviations on `(log σ², log κ, log τ²)`.
    pub scales: [f64; 3],
    /// Robbins–Monro scale adaptation during burn-in.
    pub adapt: bool,
    pub target_accept: f64,
    pub seed: u64,
    pub m: usize,
    pub ordering: OrderingStrategy,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            iterations: 35_000,
            burn_in: 5_000,
            thin: 1,
            scales: [0.1; 3],
            adapt: true,
            target_accept: 0.30,
            seed: 0,
            m: 10,
            ordering: OrderingStrategy::CoordSort,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thin == 0 || self.burn_in >= self.iterations {
            return Err(Error::InvalidParameter(format!(
                "need burn_in < iterations and thin > 0, got {}/{}/{}",
                self.burn_in, self.iterations, self.thin
            )));
        }
        if self.scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidParameter("proposal scales must be positive".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::InvalidParameter("target acceptance must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn kept(&self) -> usize {
        (self.iterations - self.burn_in).div_ceil(self.thin)
    }
}

/// Priors of one level for the sampler. `β` and `γ` priors are not scaled by `σ²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerPriors {
    pub level: LevelPriors,
    pub tau2: InverseGammaPrior,
    pub kappa_max: f64,
}

impl SamplerPriors {
    pub fn vague(p: usize, q: Option<usize>) -> Self {
        Self { level: LevelPriors::vague(p, q, 1000.0), tau2: InverseGammaPrior::default(), kappa_max: 25.0 }
    }

    /// Log prior of `(σ², κ, τ²)`; `−∞` outside the support.
    pub fn log_prior(&self, theta: [f64; 3]) -> f64 {
        let [s2, k, t2] = theta;
        if !(k > 0.0 && k <= self.kappa_max) {
            return f64::NEG_INFINITY;
        }
        self.level.sigma2.log_kernel(s2) + self.tau2.log_kernel(t2)
    }
}

/// Current values of one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelState {
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub sigma2: f64,
    pub kappa: f64,
    pub tau2: f64,
    pub loglik: f64,
    pub log_post: f64,
}

impl LevelState {
    pub fn theta(&self) -> [f64; 3] {
        [self.sigma2, self.kappa, self.tau2]
    }
}

/// Per-level states plus `ŷ_t` at `⋃_{i>t} S_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub levels: Vec<LevelState>,
    pub knots: Vec<Vec<f64>>,
}

/// Result of one Metropolis–Hastings step.
pub enum MhOutcome<T> {
    Accepted { theta: [f64; 3], loglik: f64, extra: T },
    Rejected,
}

/// One joint log-scale random-walk step on `(σ², κ, τ²)`. The target in
/// log coordinates is `loglik + log prior + Σ log θ`. Always consumes three
/// normals and one uniform so the stream position does not depend on the
/// outcome.
pub fn mh_step<T, R: Rng>(
    current: [f64; 3],
    current_loglik: f64,
    scales: &[f64; 3],
    priors: &SamplerPriors,
    rng: &mut R,
    mut loglik: impl FnMut([f64; 3]) -> Result<(f64, T)>,
) -> Result<MhOutcome<T>> {
    let mut prop = current;
    for (p, s) in prop.iter_mut().zip(scales) {
        *p *= (s * rng.sample::<f64, _>(StandardNormal)).exp();
    }
    let u: f64 = rng.random();
    let lp = priors.log_prior(prop);
    if !lp.is_finite() {
        return Ok(MhOutcome::Rejected);
    }
    let (ll, extra) = loglik(prop)?;
    let jac = |t: [f64; 3]| t.iter().map(|v| v.ln()).sum::<f64>();
    let ratio = ll + lp + jac(prop) - current_loglik - priors.log_prior(current) - jac(current);
    if ll.is_finite() && u.ln() < ratio {
        Ok(MhOutcome::Accepted { theta: prop, loglik: ll, extra })
    } else {
        Ok(MhOutcome::Rejected)
    }
}

/// `(mean, cov)` of `β | γ, θ, τ²` under an unscaled normal prior, from
/// cross products with `Λ̃`.
pub fn beta_conditional(cp: &CrossProducts, gamma: &[f64], prior: &NormalPrior) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let prec = prior.precision()?;
    let mut rhs = &prec * prior.mean_vec() + &cp.hz;
    if let Some((_, xh, _)) = &cp.x {
        rhs -= xh.transpose() * DVector::from_column_slice(gamma);
    }
    let info = &prec + &cp.hh;
    let chol = ((&info + info.transpose()) * 0.5).cholesky().ok_or_else(|| {
        Error::NotPositiveDefinite(format!("beta full conditional, diagonal {:?}", info.diagonal().as_slice()))
    })?;
    let cov = chol.inverse();
    Ok((&cov * rhs, cov))
}

/// `(mean, cov)` of `γ | β, θ, τ²`.
pub fn gamma_conditional(cp: &CrossProducts, beta: &[f64], prior: &NormalPrior) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (mu, v) = posterior_gamma(cp, beta, prior)?;
    Ok((&v * mu, v))
}

pub fn draw_normal<R: Rng>(mean: &DVector<f64>, cov: &DMatrix<f64>, rng: &mut R) -> Result<Vec<f64>> {
    let l = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("normal draw covariance".into()))?
        .l();
    let e = DVector::from_fn(mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok((mean + l * e).iter().copied().collect())
}

/// Level data in neighbor order with its fixed sparsity structures.
pub struct LevelModel {
    pub level: usize,
    ordered: LocationSet,
    /// Storage row of each ordered position.
    rows: Vec<usize>,
    nbr: Arc<NeighborIndex>,
    pattern: Arc<PrecisionPattern>,
    h: DMatrix<f64>,
    g: Option<DMatrix<f64>>,
    z: Vec<f64>,
    data: FidelityDataset,
    m: usize,
}

impl LevelModel {
    pub fn new(data: &FidelityDataset, m: usize, ordering: OrderingStrategy) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyRecords);
        }
        let ord = order_locations(&data.locs, ordering)?;
        let rows = ord.as_slice().to_vec();
        let ordered = data.locs.select(&rows);
        let nbr = Arc::new(build_neighbor_index(&ordered, &LocationOrder::identity(rows.len()), m));
        let pattern = Arc::new(PrecisionPattern::new(&nbr)?);
        Ok(Self {
            level: data.level,
            h: data.h().select_rows(&rows),
            g: data.g().map(|g| g.select_rows(&rows)),
            z: rows.iter().map(|&i| data.z[i]).collect(),
            ordered,
            rows,
            nbr,
            pattern,
            data: data.clone(),
            m,
        })
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    /// `G ∘ ŷ_{t−1}` with `yprev` in storage order.
    pub fn scale_design(&self, yprev: Option<&[f64]>) -> Result<Option<DMatrix<f64>>> {
        match (&self.g, yprev) {
            (None, _) => Ok(None),
            (Some(_), None) => Err(Error::MissingPreviousLevel { level: self.level, prev: self.level - 1 }),
            (Some(g), Some(y)) => {
                if y.len() != self.len() {
                    return Err(Error::Shape(format!("{} previous-level values for {} rows", y.len(), self.len())));
                }
                Ok(Some(DMatrix::from_fn(g.nrows(), g.ncols(), |i, j| g[(i, j)] * y[self.rows[i]])))
            }
        }
    }

    /// `z − Hβ − Xγ` in neighbor order.
    pub fn residual(&self, beta: &[f64], gamma: &[f64], x: Option<&DMatrix<f64>>) -> Vec<f64> {
        let mut mean = &self.h * DVector::from_column_slice(beta);
        if let Some(x) = x {
            mean += x * DVector::from_column_slice(gamma);
        }
        self.z.iter().zip(mean.iter()).map(|(z, m)| z - m).collect()
    }

    pub fn collapsed(&self, theta: [f64; 3]) -> Result<CollapsedFactor> {
        let p = CovarianceParams::isotropic(theta[0], theta[1])?;
        let f = compute_factors_ordered(&self.ordered, &self.nbr, &p)?;
        CollapsedFactor::new(f, &self.pattern, theta[2])
    }

    pub fn cross_products(&self, factor: &CollapsedFactor, x: Option<&DMatrix<f64>>) -> CrossProducts {
        cross_products(factor, &self.h, x, &self.z)
    }
}

/// Everything the sweep needs beyond the state.
struct Working {
    factor: CollapsedFactor,
    x: Option<DMatrix<f64>>,
    resid: Vec<f64>,
}

fn refresh(model: &LevelModel, st: &mut LevelState, w: &mut Working, priors: &SamplerPriors) {
    w.resid = model.residual(&st.beta, &st.gamma, w.x.as_ref());
    st.loglik = w.factor.loglik(&w.resid);
    st.log_post = st.loglik + priors.log_prior(st.theta());
}

/// MH update of `(σ², κ, τ²)` given `β, γ, ŷ`. Returns whether the proposal
/// was accepted.
pub fn mh_theta_tau<R: Rng>(
    model: &LevelModel,
    st: &mut LevelState,
    resid: &[f64],
    current: &mut CollapsedFactor,
    scales: &[f64; 3],
    priors: &SamplerPriors,
    rng: &mut R,
) -> Result<bool> {
    let out = mh_step(st.theta(), st.loglik, scales, priors, rng, |theta| {
        let f = model.collapsed(theta)?;
        Ok((f.loglik(resid), f))
    })?;
    match out {
        MhOutcome::Accepted { theta, loglik, extra } => {
            [st.sigma2, st.kappa, st.tau2] = theta;
            st.loglik = loglik;
            st.log_post = loglik + priors.log_prior(theta);
            *current = extra;
            Ok(true)
        }
        MhOutcome::Rejected => Ok(false),
    }
}

pub fn gibbs_beta<R: Rng>(cp: &CrossProducts, st: &mut LevelState, prior: &NormalPrior, rng: &mut R) -> Result<()> {
    let (mean, cov) = beta_conditional(cp, &st.gamma, prior)?;
    st.beta = draw_normal(&mean, &cov, rng)?;
    Ok(())
}

pub fn gibbs_gamma<R: Rng>(cp: &CrossProducts, st: &mut LevelState, prior: &NormalPrior, rng: &mut R) -> Result<()> {
    let (mean, cov) = gamma_conditional(cp, &st.beta, prior)?;
    st.gamma = draw_normal(&mean, &cov, rng)?;
    Ok(())
}

/// Knots of one level: `⋃_{i>t} S_i`, split into points observed at level
/// `t` (nested shortcut) and the rest, with fixed neighbor lists.
pub struct KnotPlan {
    pub at: LocationSet,
    shortcut: Vec<Option<usize>>,
    nbrs: Vec<Vec<usize>>,
    trend: Vec<DVector<f64>>,
    scale: Vec<DVector<f64>>,
}

impl KnotPlan {
    pub fn new(model: &LevelModel, at: LocationSet) -> Result<Self> {
        let searcher = NeighborSearcher::new(&model.ordered);
        let mut shortcut = Vec::with_capacity(at.len());
        let mut nbrs = Vec::with_capacity(at.len());
        let mut trend = Vec::with_capacity(at.len());
        let mut scale = Vec::with_capacity(at.len());
        for s in at.points() {
            let own = model.data.locs.index_of(s);
            shortcut.push(own);
            nbrs.push(match own {
                Some(_) => Vec::new(),
                None => searcher.query(s, model.m, false)?.into_iter().map(|n| n.index).collect(),
            });
            trend.push(DVector::from_vec(model.data.trend_basis.row(s)));
            scale.push(DVector::from_vec(model.data.scale_basis.map(|b| b.row(s)).unwrap_or_default()));
        }
        Ok(Self { at, shortcut, nbrs, trend, scale })
    }

    /// Whether every knot takes the nested shortcut.
    pub fn is_deterministic(&self) -> bool {
        self.shortcut.iter().all(Option::is_some)
    }
}

/// Draws `ŷ_t` at every knot: the observed value where the knot is a datum
/// of level `t`, otherwise a normal draw from the level conditional given
/// `ŷ_{t−1}` at the knot (`yprev[k]`).
pub fn sample_knots<R: Rng>(
    model: &LevelModel,
    plan: &KnotPlan,
    st: &LevelState,
    resid: &[f64],
    yprev: Option<&[f64]>,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let p = CovarianceParams::isotropic(st.sigma2, st.kappa)?;
    let beta = DVector::from_column_slice(&st.beta);
    let gamma = DVector::from_column_slice(&st.gamma);
    (0..plan.at.len())
        .map(|k| {
            if let Some(j) = plan.shortcut[k] {
                return Ok(model.data.z[j]);
            }
            let s = plan.at.point(k);
            let c = conditional_from_neighbors(s, &model.ordered, &plan.nbrs[k], resid, &p, st.tau2, ConditioningMode::Observed)?;
            let mut mean = plan.trend[k].dot(&beta) + c.mean;
            if model.level > 1 {
                let y = yprev.ok_or(Error::MissingPreviousLevel { level: model.level, prev: model.level - 1 })?[k];
                mean += plan.scale[k].dot(&gamma) * y;
            }
            Ok(mean + c.var.sqrt() * rng.sample::<f64, _>(StandardNormal))
        })
        .collect()
}

/// Posterior mean and 95% equal-tail interval of one stored column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub lo95: f64,
    pub hi95: f64,
}

/// Stored draws of one level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelChain {
    pub level: usize,
    pub columns: Vec<String>,
    /// One row per kept draw.
    pub draws: Vec<Vec<f64>>,
    pub acceptance: f64,
    pub final_scales: [f64; 3],
    pub knots: LocationSet,
    /// `ŷ_t` at `knots` per kept draw; a single row when every knot is a datum.
    pub fields: Vec<Vec<f64>>,
    pub last: LevelState,
}

impl LevelChain {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.draws.iter().map(|r| r[j]).collect())
    }

    pub fn summaries(&self) -> Vec<ParamSummary> {
        self.columns
            .iter()
            .enumerate()
            .map(|(j, name)| {
                let col: Vec<f64> = self.draws.iter().map(|r| r[j]).collect();
                let mean = col.iter().sum::<f64>() / col.len() as f64;
                let mut data = Data::new(col);
                ParamSummary { name: name.clone(), mean, lo95: data.quantile(0.025), hi95: data.quantile(0.975) }
            })
            .collect()
    }

    pub fn mean_field(&self) -> Vec<f64> {
        let k = self.fields.len() as f64;
        (0..self.knots.len()).map(|i| self.fields.iter().map(|f| f[i]).sum::<f64>() / k).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput {
    pub levels: Vec<LevelChain>,
}

impl ChainOutput {
    pub fn final_state(&self) -> ChainState {
        ChainState {
            levels: self.levels.iter().map(|l| l.last.clone()).collect(),
            knots: self.levels.iter().map(|l| l.fields.last().cloned().unwrap_or_default()).collect(),
        }
    }

    /// Fitted levels at the posterior means, with `ŷ_{t−1}` set to the mean
    /// of the stored knot draws.
    pub fn fitted_levels(&self, datasets: &[FidelityDataset], m: usize) -> Result<Vec<FittedLevel>> {
        let mut out: Vec<FittedLevel> = Vec::with_capacity(datasets.len());
        for (t, ds) in datasets.iter().enumerate() {
            let ch = &self.levels[t];
            let mean = |name: String| -> Result<f64> {
                let col = ch.column(&name).ok_or_else(|| Error::Shape(format!("missing column {name}")))?;
                Ok(col.iter().sum::<f64>() / col.len() as f64)
            };
            let lvl = ds.level;
            let beta = (0..ds.h().ncols()).map(|j| mean(format!("beta{lvl}_{j}"))).collect::<Result<Vec<_>>>()?;
            let gamma = match ds.g() {
                Some(g) => (0..g.ncols()).map(|j| mean(format!("gamma{}_{j}", lvl - 1))).collect::<Result<Vec<_>>>()?,
                None => Vec::new(),
            };
            let cov = CovarianceParams::isotropic(mean(format!("sigma2_{lvl}"))?, mean(format!("kappa_{lvl}"))?)?;
            let yprev = if t == 0 {
                Vec::new()
            } else {
                let below = &self.levels[t - 1];
                let field = below.mean_field();
                ds.locs
                    .points()
                    .map(|s| below.knots.index_of(s).map(|i| field[i]))
                    .collect::<Option<Vec<_>>>()
                    .ok_or(Error::MissingPreviousLevel { level: lvl, prev: lvl - 1 })?
            };
            out.push(FittedLevel::new(
                ds.clone(),
                beta,
                gamma,
                cov,
                mean(format!("tau2_{lvl}"))?,
                m,
                ConditioningMode::Observed,
                yprev,
            )?);
        }
        Ok(out)
    }
}

/// Least-squares start for `(β, γ)`, nuggets and variances from the
/// residual spread, and a decay of nine over the domain diameter.
fn initial_state(model: &LevelModel, x: Option<&DMatrix<f64>>, priors: &SamplerPriors) -> LevelState {
    let p = model.h.ncols();
    let q = x.map_or(0, |x| x.ncols());
    let mut w = DMatrix::zeros(model.len(), p + q);
    w.columns_mut(0, p).copy_from(&model.h);
    if let Some(x) = x {
        w.columns_mut(p, q).copy_from(x);
    }
    let z = DVector::from_column_slice(&model.z);
    let coef = (w.transpose() * &w)
        .cholesky()
        .map(|c| c.solve(&(w.transpose() * &z)))
        .unwrap_or_else(|| DVector::zeros(p + q));
    let beta: Vec<f64> = coef.rows(0, p).iter().copied().collect();
    let gamma: Vec<f64> = coef.rows(p, q).iter().copied().collect();
    let resid = model.residual(&beta, &gamma, x);
    let n = resid.len() as f64;
    let mu = resid.iter().sum::<f64>() / n;
    let var = (resid.iter().map(|r| (r - mu).powi(2)).sum::<f64>() / n).max(1e-6);
    let dim = model.ordered.dim();
    let diam = (0..dim)
        .map(|d| {
            let vals = model.ordered.points().map(|s| s[d]);
            let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            (hi - lo).powi(2)
        })
        .sum::<f64>()
        .sqrt()
        .max(1e-6);
    LevelState {
        beta,
        gamma,
        sigma2: 0.8 * var,
        kappa: (9.0 / diam).min(0.5 * priors.kappa_max),
        tau2: 0.2 * var,
        loglik: f64::NAN,
        log_post: f64::NAN,
    }
}

fn column_names(model: &LevelModel) -> Vec<String> {
    let t = model.level;
    let mut cols: Vec<String> = (0..model.h.ncols()).map(|j| format!("beta{t}_{j}")).collect();
    if let Some(g) = &model.g {
        cols.extend((0..g.ncols()).map(|j| format!("gamma{}_{j}", t - 1)));
    }
    cols.extend([format!("sigma2_{t}"), format!("kappa_{t}"), format!("tau2_{t}")]);
    cols
}

fn divergence(level: usize, iter: usize, st: &LevelState) -> Error {
    Error::Divergence(format!(
        "level {level}, iteration {iter}: log posterior {} at beta={:?} gamma={:?} sigma2={} kappa={} tau2={}",
        st.log_post, st.beta, st.gamma, st.sigma2, st.kappa, st.tau2
    ))
}

/// Runs the chain of one level. `below` holds the previous level's stored
/// knot fields (their locations must cover `S_t` and this level's knots).
pub fn run_level(
    data: &FidelityDataset,
    knots: LocationSet,
    below: Option<&LevelChain>,
    priors: &SamplerPriors,
    cfg: &ChainConfig,
) -> Result<LevelChain> {
    cfg.validate()?;
    let t = data.level;
    let model = LevelModel::new(data, cfg.m, cfg.ordering)?;
    let plan = KnotPlan::new(&model, knots)?;
    let lookup = |at: &LocationSet| -> Result<Vec<usize>> {
        let below = below.ok_or(Error::MissingPreviousLevel { level: t, prev: t - 1 })?;
        at.points()
            .map(|s| below.knots.index_of(s))
            .collect::<Option<Vec<_>>>()
            .ok_or(Error::MissingPreviousLevel { level: t, prev: t - 1 })
    };
    let (data_idx, knot_idx) = if t > 1 { (lookup(&data.locs)?, lookup(&plan.at)?) } else { (Vec::new(), Vec::new()) };
    let field_at = |j: usize, idx: &[usize]| -> Vec<f64> {
        let f = &below.expect("checked above").fields[j];
        idx.iter().map(|&i| f[i]).collect()
    };

    let mut rng_mh = block_rng(cfg.seed, t, BLOCK_MH);
    let mut rng_beta = block_rng(cfg.seed, t, BLOCK_BETA);
    let mut rng_gamma = block_rng(cfg.seed, t, BLOCK_GAMMA);
    let mut rng_knots = block_rng(cfg.seed, t, BLOCK_KNOTS);

    let gamma_prior = match (&model.g, &priors.level.gamma) {
        (Some(_), Some(g)) => g,
        (Some(_), None) => return Err(Error::InvalidParameter(format!("level {t} needs a gamma prior"))),
        (None, _) => &priors.level.beta,
    };
    let n_below = below.map_or(1, |b| b.fields.len());
    let mut yprev: Option<Vec<f64>> = (t > 1).then(|| field_at(0, &data_idx));
    let x0 = model.scale_design(yprev.as_deref())?;
    let mut st = initial_state(&model, x0.as_ref(), priors);
    let mut w = Working { factor: model.collapsed(st.theta())?, x: x0, resid: Vec::new() };
    refresh(&model, &mut st, &mut w, priors);
    if !st.log_post.is_finite() {
        return Err(divergence(t, 0, &st));
    }

    let mut scales = cfg.scales;
    let mut accepted = 0usize;
    let mut draws = Vec::with_capacity(cfg.kept());
    let mut fields = Vec::new();
    for iter in 0..cfg.iterations {
        let j = iter % n_below;
        if t > 1 && n_below > 1 {
            let y = field_at(j, &data_idx);
            if yprev.as_deref() != Some(&y) {
                w.x = model.scale_design(Some(&y))?;
                yprev = Some(y);
                refresh(&model, &mut st, &mut w, priors);
            }
        }
        let acc = mh_theta_tau(&model, &mut st, &w.resid, &mut w.factor, &scales, priors, &mut rng_mh)?;
        accepted += acc as usize;
        let cp = model.cross_products(&w.factor, w.x.as_ref());
        gibbs_beta(&cp, &mut st, &priors.level.beta, &mut rng_beta)?;
        if w.x.is_some() {
            gibbs_gamma(&cp, &mut st, gamma_prior, &mut rng_gamma)?;
        }
        refresh(&model, &mut st, &mut w, priors);
        if !st.log_post.is_finite() {
            return Err(divergence(t, iter, &st));
        }
        if cfg.adapt && iter < cfg.burn_in {
            let step = (acc as u8 as f64 - cfg.target_accept) / (iter as f64 + 1.0).powf(0.6);
            scales.iter_mut().for_each(|s| *s *= step.exp());
        }
        if iter >= cfg.burn_in && (iter - cfg.burn_in) % cfg.thin == 0 {
            let mut row = st.beta.clone();
            row.extend(&st.gamma);
            row.extend(st.theta());
            draws.push(row);
            if !plan.at.is_empty() && (fields.is_empty() || !plan.is_deterministic()) {
                let yk = (t > 1).then(|| field_at(j, &knot_idx));
                // knots are drawn at kept iterations only; they do not feed back into this level
                fields.push(sample_knots(&model, &plan, &st, &w.resid, yk.as_deref(), &mut rng_knots)?);
            }
        }
    }
    if draws.is_empty() {
        return Err(Error::InvalidParameter("no post-burn-in draws".into()));
    }
    Ok(LevelChain {
        level: t,
        columns: column_names(&model),
        draws,
        acceptance: accepted as f64 / cfg.iterations as f64,
        final_scales: scales,
        knots: plan.at,
        fields,
        last: st,
    })
}

/// Runs every level in order; level `t` uses the stored knot draws of level `t − 1`.
pub fn run_chain(datasets: &[FidelityDataset], priors: &[SamplerPriors], cfg: &ChainConfig) -> Result<ChainOutput> {
    cfg.validate()?;
    if datasets.is_empty() {
        return Err(Error::EmptyRecords);
    }
    if priors.len() != datasets.len() {
        return Err(Error::Shape(format!("{} prior blocks for {} levels", priors.len(), datasets.len())));
    }
    let mut levels: Vec<LevelChain> = Vec::with_capacity(datasets.len());
    for (t, ds) in datasets.iter().enumerate() {
        if ds.level != t + 1 {
            return Err(Error::InvalidParameter(format!("dataset {} carries level {}", t + 1, ds.level)));
        }
        let knots = if t + 1 < datasets.len() { upper_locations(datasets, t + 1) } else { LocationSet::empty(ds.locs.dim()) };
        let chain = run_level(ds, knots, levels.last(), &priors[t], cfg)?;
        levels.push(chain);
    }
    Ok(ChainOutput { levels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{dense_conjugate, dense_level_cov, dense_loglik, DenseSolver};
    use crate::rnnc::Basis;

    fn random_level(n: usize, level: usize, seed: u64) -> (FidelityDataset, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords: Vec<f64> = (0..2 * n).map(|_| rng.random::<f64>()).collect();
        let locs = LocationSet::new(2, coords).unwrap();
        let p = CovarianceParams::isotropic(1.0, 4.0).unwrap();
        let l = dense_level_cov(&locs, &p, 0.1).cholesky().unwrap().l();
        let e = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let w = l * e;
        let z = (0..n).map(|i| 10.0 + w[i]).collect();
        let yprev = (0..n).map(|_| 5.0 + rng.sample::<f64, _>(StandardNormal)).collect();
        (FidelityDataset::new(level, locs, z, Basis::Constant, Some(Basis::Linear)).unwrap(), yprev)
    }

    fn short(iterations: usize, burn_in: usize, m: usize) -> ChainConfig {
        ChainConfig { iterations, burn_in, m, seed: 7, ..ChainConfig::default() }
    }

    #[test]
    fn zero_step_is_always_accepted() {
        let pr = SamplerPriors::vague(1, None);
        let mut rng = block_rng(1, 1, BLOCK_MH);
        for _ in 0..100 {
            let out = mh_step([1.0, 3.0, 0.1], -5.0, &[0.0; 3], &pr, &mut rng, |_| Ok((-5.0, ()))).unwrap();
            assert!(matches!(out, MhOutcome::Accepted { theta: [1.0, 3.0, 0.1], .. }));
        }
    }

    #[test]
    fn decay_above_cap_is_rejected_without_evaluation() {
        let pr = SamplerPriors::vague(1, None);
        assert_eq!(pr.log_prior([1.0, 25.5, 0.1]), f64::NEG_INFINITY);
        let mut rng = block_rng(2, 1, BLOCK_MH);
        let mut calls = 0;
        let mut over = 0;
        for _ in 0..500 {
            let out = mh_step([1.0, 24.0, 0.1], 0.0, &[1e-9, 0.3, 1e-9], &pr, &mut rng, |t| {
                calls += 1;
                Ok((0.0, t))
            })
            .unwrap();
            match out {
                MhOutcome::Accepted { theta, .. } => assert!(theta[1] <= 25.0),
                MhOutcome::Rejected => over += 1,
            }
        }
        assert!(over > 0 && calls < 500);
    }

    fn dense_setup(n: usize, level: usize, seed: u64, theta: [f64; 3]) -> (LevelModel, CollapsedFactor, DMatrix<f64>, Option<DMatrix<f64>>, FidelityDataset, Vec<f64>) {
        let (ds, yprev) = random_level(n, level, seed);
        let model = LevelModel::new(&ds, n - 1, OrderingStrategy::CoordSort).unwrap();
        let x = model.scale_design((level > 1).then_some(&yprev[..])).unwrap();
        let f = model.collapsed(theta).unwrap();
        let p = CovarianceParams::isotropic(theta[0], theta[1]).unwrap();
        let lam = dense_level_cov(&model.ordered, &p, theta[2]);
        (model, f, lam, x, ds, yprev)
    }

    #[test]
    fn conditionals_match_dense_normal_equations() {
        for seed in 0..20 {
            let n = 10 + 4 * seed as usize;
            let theta = [0.5 + 0.1 * seed as f64, 1.0 + seed as f64, 0.05 + 0.01 * seed as f64];
            let (model, f, lam, x, _, _) = dense_setup(n, 2, seed, theta);
            let x = x.unwrap();
            let cp = model.cross_products(&f, Some(&x));
            let prior_b = NormalPrior::isotropic(1, 1.0, 50.0);
            let prior_g = NormalPrior::isotropic(3, 0.5, 20.0);
            let gamma = [0.9, 0.1, -0.2];
            let (mean, cov) = beta_conditional(&cp, &gamma, &prior_b).unwrap();
            // dense: z − Xγ regressed on H with covariance Λ
            let shifted: Vec<f64> = model.z.iter().zip((&x * DVector::from_column_slice(&gamma)).iter()).map(|(z, v)| z - v).collect();
            let pr = LevelPriors { beta: prior_b.clone(), gamma: None, sigma2: InverseGammaPrior::default() };
            let d = dense_conjugate(&model.h, None, &shifted, &lam, &pr).unwrap();
            assert!((mean[0] - d.theta[0]).abs() < 1e-8 * d.theta[0].abs());
            assert!((cov[(0, 0)] - d.v[(0, 0)]).abs() < 1e-8 * d.v[(0, 0)]);

            let beta = [9.5];
            let (gm, gc) = gamma_conditional(&cp, &beta, &prior_g).unwrap();
            let shifted: Vec<f64> = model.z.iter().map(|z| z - 9.5).collect();
            let pr = LevelPriors { beta: prior_g.clone(), gamma: None, sigma2: InverseGammaPrior::default() };
            let d = dense_conjugate(&x, None, &shifted, &lam, &pr).unwrap();
            let scale = d.theta.abs().max().max(1.0);
            assert!((gm - &d.theta).abs().max() < 1e-8 * scale, "seed {seed}");
            assert!((gc - &d.v).abs().max() < 1e-8 * d.v.abs().max());
        }
    }

    #[test]
    fn beta_conditional_limits() {
        let (model, f, lam, _, _, _) = dense_setup(30, 1, 3, [1.0, 4.0, 0.1]);
        let cp = model.cross_products(&f, None);
        let (m, _) = beta_conditional(&cp, &[], &NormalPrior::isotropic(1, 2.5, 1e-12)).unwrap();
        assert!((m[0] - 2.5).abs() < 1e-6);
        let (m, _) = beta_conditional(&cp, &[], &NormalPrior::isotropic(1, 0.0, 1e6)).unwrap();
        let s = DenseSolver::new(lam).unwrap();
        let one = DVector::from_element(30, 1.0);
        let gls = one.dot(&s.solve_vec(&DVector::from_column_slice(&model.z))) / one.dot(&s.solve_vec(&one));
        assert!((m[0] - gls).abs() < 1e-3);
    }

    #[test]
    fn one_observation_normal_update() {
        let solver = DenseSolver::new(DMatrix::from_element(1, 1, 0.5)).unwrap();
        let cp = cross_products(&solver, &DMatrix::from_element(1, 1, 1.0), None, &[3.0]);
        let (m, v) = beta_conditional(&cp, &[], &NormalPrior::isotropic(1, 1.0, 2.0)).unwrap();
        let var = 1.0 / (1.0 / 2.0 + 1.0 / 0.5);
        assert!((v[(0, 0)] - var).abs() < 1e-15);
        assert!((m[0] - var * (1.0 / 2.0 + 3.0 / 0.5)).abs() < 1e-14);
    }

    #[test]
    fn gamma_conditional_limits() {
        let (model, f, _, _, _, _) = dense_setup(20, 2, 4, [1.0, 4.0, 0.1]);
        let zero = model.scale_design(Some(&[0.0; 20])).unwrap().unwrap();
        let cp = model.cross_products(&f, Some(&zero));
        let prior = NormalPrior::isotropic(3, 0.3, 2.0);
        let (m, v) = gamma_conditional(&cp, &[10.0], &prior).unwrap();
        assert!((m - prior.mean_vec()).abs().max() < 1e-12);
        assert!((v - prior.cov_matrix()).abs().max() < 1e-12);
        let (_, _, _, x, _, _) = dense_setup(20, 2, 4, [1.0, 4.0, 0.1]);
        let cp = model.cross_products(&f, x.as_ref());
        let (m, _) = gamma_conditional(&cp, &[10.0], &NormalPrior::isotropic(3, 0.3, 1e-12)).unwrap();
        assert!((m.add_scalar(-0.3)).abs().max() < 1e-6);
    }

    #[test]
    fn knot_draws_have_conditional_variance() {
        let (ds, _) = random_level(40, 1, 5);
        let model = LevelModel::new(&ds, 8, OrderingStrategy::CoordSort).unwrap();
        let at = LocationSet::from_points(&[[0.5, 0.5], [0.05, 0.9]]).unwrap();
        let plan = KnotPlan::new(&model, at.clone()).unwrap();
        let st = LevelState { beta: vec![10.0], gamma: vec![], sigma2: 1.0, kappa: 4.0, tau2: 0.1, loglik: 0.0, log_post: 0.0 };
        let resid = model.residual(&st.beta, &[], None);
        let mut rng = block_rng(9, 1, BLOCK_KNOTS);
        let reps = 10_000;
        let draws: Vec<Vec<f64>> = (0..reps).map(|_| sample_knots(&model, &plan, &st, &resid, None, &mut rng).unwrap()).collect();
        let p = CovarianceParams::isotropic(1.0, 4.0).unwrap();
        for k in 0..2 {
            let c = conditional_from_neighbors(at.point(k), &model.ordered, &plan.nbrs[k], &resid, &p, 0.1, ConditioningMode::Observed).unwrap();
            let xs: Vec<f64> = draws.iter().map(|d| d[k]).collect();
            let mean = xs.iter().sum::<f64>() / reps as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (reps as f64 - 1.0);
            let se = c.var * (2.0 / (reps as f64 - 1.0)).sqrt();
            assert!((var - c.var).abs() < 3.0 * se, "knot {k}: {var} vs {}", c.var);
            assert!((mean - 10.0 - c.mean).abs() < 3.0 * (c.var / reps as f64).sqrt());
        }
    }

    #[test]
    fn data_knots_take_the_datum() {
        let (ds, _) = random_level(15, 1, 6);
        let model = LevelModel::new(&ds, 5, OrderingStrategy::CoordSort).unwrap();
        let plan = KnotPlan::new(&model, ds.locs.select(&[3, 7])).unwrap();
        assert!(plan.is_deterministic());
        let st = LevelState { beta: vec![0.0], gamma: vec![], sigma2: 1.0, kappa: 4.0, tau2: 0.0, loglik: 0.0, log_post: 0.0 };
        let resid = model.residual(&st.beta, &[], None);
        let out = sample_knots(&model, &plan, &st, &resid, None, &mut block_rng(0, 1, BLOCK_KNOTS)).unwrap();
        assert_eq!(out, vec![ds.z[3], ds.z[7]]);
    }

    #[test]
    fn cached_loglik_matches_recomputation() {
        let (ds, _) = random_level(60, 1, 7);
        let cfg = short(300, 100, 8);
        let ch = run_level(&ds, LocationSet::empty(2), None, &SamplerPriors::vague(1, None), &cfg).unwrap();
        let model = LevelModel::new(&ds, 8, cfg.ordering).unwrap();
        let st = &ch.last;
        let fresh = model.collapsed(st.theta()).unwrap().loglik(&model.residual(&st.beta, &[], None));
        assert!((fresh - st.loglik).abs() < 1e-10 * fresh.abs().max(1.0));
        assert!(ch.acceptance > 0.0 && ch.acceptance < 1.0);
    }

    fn nested_pair(seed: u64) -> Vec<FidelityDataset> {
        let (d1, _) = random_level(40, 1, seed);
        let l2 = d1.locs.select(&(0..20).collect::<Vec<_>>());
        let z2: Vec<f64> = (0..20).map(|i| 0.9 * d1.z[i] + 1.0 + 0.1 * (i as f64).sin()).collect();
        let d2 = FidelityDataset::new(2, l2, z2, Basis::Constant, Some(Basis::Constant)).unwrap();
        vec![d1, d2]
    }

    #[test]
    fn chains_are_reproducible_and_level_factorized() {
        let ds = nested_pair(8);
        let pr = vec![SamplerPriors::vague(1, None), SamplerPriors::vague(1, Some(1))];
        let cfg = short(200, 50, 6);
        let a = run_chain(&ds, &pr, &cfg).unwrap();
        let b = run_chain(&ds, &pr, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.levels[0].fields.len(), 1);
        assert_eq!(a.levels[0].fields[0], ds[0].z[..20].to_vec());
        let mut edited = ds.clone();
        edited[1] = FidelityDataset::new(2, ds[1].locs.clone(), ds[1].z.iter().map(|z| z * 3.0).collect(), Basis::Constant, Some(Basis::Constant)).unwrap();
        let c = run_chain(&edited, &pr, &cfg).unwrap();
        assert_eq!(a.levels[0].draws, c.levels[0].draws);
        assert_ne!(a.levels[1].draws, c.levels[1].draws);
        let fitted = a.fitted_levels(&ds, 6).unwrap();
        assert_eq!(fitted.len(), 2);
        assert_eq!(a.final_state().levels.len(), 2);
    }

    #[test]
    fn empty_store_is_an_error() {
        let (ds, _) = random_level(10, 1, 9);
        let cfg = short(100, 100, 4);
        assert!(run_level(&ds, LocationSet::empty(2), None, &SamplerPriors::vague(1, None), &cfg).is_err());
        let cfg = ChainConfig { thin: 0, ..short(100, 10, 4) };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn summaries_bracket_the_mean() {
        let (ds, _) = random_level(30, 1, 10);
        let ch = run_level(&ds, LocationSet::empty(2), None, &SamplerPriors::vague(1, None), &short(400, 100, 6)).unwrap();
        for s in ch.summaries() {
            assert!(s.lo95 <= s.mean && s.mean <= s.hi95, "{s:?}");
        }
        assert_eq!(ch.columns, vec!["beta1_0", "sigma2_1", "kappa_1", "tau2_1"]);
    }

    /// Level-1 chain with the same sweep and seed schedule, but the dense
    /// likelihood and dense solves.
    fn dense_chain(ds: &FidelityDataset, pr: &SamplerPriors, cfg: &ChainConfig) -> Vec<f64> {
        let model = LevelModel::new(ds, 1, cfg.ordering).unwrap();
        let x: Option<DMatrix<f64>> = None;
        let mut st = initial_state(&model, None, pr);
        let dense = |theta: [f64; 3]| {
            let p = CovarianceParams::isotropic(theta[0], theta[1]).unwrap();
            dense_level_cov(&model.ordered, &p, theta[2])
        };
        let mut lam = dense(st.theta());
        let mut resid = model.residual(&st.beta, &[], None);
        st.loglik = dense_loglik(&lam, &resid).unwrap();
        let mut rng_mh = block_rng(cfg.seed, 1, BLOCK_MH);
        let mut rng_beta = block_rng(cfg.seed, 1, BLOCK_BETA);
        let mut scales = cfg.scales;
        let mut out = Vec::new();
        for iter in 0..cfg.iterations {
            let r = resid.clone();
            let step = mh_step(st.theta(), st.loglik, &scales, pr, &mut rng_mh, |theta| {
                let c = dense(theta);
                Ok((dense_loglik(&c, &r)?, c))
            })
            .unwrap();
            let acc = match step {
                MhOutcome::Accepted { theta, loglik, extra } => {
                    [st.sigma2, st.kappa, st.tau2] = theta;
                    st.loglik = loglik;
                    lam = extra;
                    true
                }
                MhOutcome::Rejected => false,
            };
            let solver = DenseSolver::new(lam.clone()).unwrap();
            let cp = cross_products(&solver, &model.h, x.as_ref(), &model.z);
            gibbs_beta(&cp, &mut st, &pr.level.beta, &mut rng_beta).unwrap();
            resid = model.residual(&st.beta, &[], None);
            st.loglik = dense_loglik(&lam, &resid).unwrap();
            if cfg.adapt && iter < cfg.burn_in {
                let step = (acc as u8 as f64 - cfg.target_accept) / (iter as f64 + 1.0).powf(0.6);
                scales.iter_mut().for_each(|s| *s *= step.exp());
            }
            if iter >= cfg.burn_in {
                out.push(st.sigma2);
            }
        }
        out
    }

    #[test]
    fn sparse_chain_agrees_with_dense_likelihood_chain() {
        let (ds, _) = random_level(200, 1, 11);
        let pr = SamplerPriors::vague(1, None);
        let cfg = ChainConfig { iterations: 5000, burn_in: 1000, m: 199, seed: 3, ..ChainConfig::default() };
        let sparse = run_level(&ds, LocationSet::empty(2), None, &pr, &cfg).unwrap();
        let s_mean = sparse.column("sigma2_1").unwrap().iter().sum::<f64>() / sparse.draws.len() as f64;
        let dense = dense_chain(&ds, &pr, &cfg);
        let d_mean = dense.iter().sum::<f64>() / dense.len() as f64;
        assert!((s_mean - d_mean).abs() < 0.1, "{s_mean} vs {d_mean}");
    }
}
