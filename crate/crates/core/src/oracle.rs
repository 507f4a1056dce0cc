//! Dense brute-force reference computations for small instances: the full
//! multi-level co-kriging mean and covariance, Gaussian log densities,
//! kriging, and conjugate posteriors. Nothing here is used when fitting.

use nalgebra::{DMatrix, DVector};

use crate::covariance::{CovarianceParams, Kernel};
use crate::error::{Error, Result};
use crate::geometry::LocationSet;
use crate::nngp::{ConditioningMode, CovarianceSolve};
use crate::priors::LevelPriors;
use crate::rnnc::Basis;

/// Largest stacked dimension the oracle accepts.
pub const ORACLE_LIMIT: usize = 500;
pub const ORACLE_MAX_LEVELS: usize = 4;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Parameters and locations of one level of the generative model.
#[derive(Debug, Clone)]
pub struct OracleLevel {
    pub locs: LocationSet,
    pub trend_basis: Basis,
    /// Basis of `ζ_{t−1}`; ignored at level 1.
    pub scale_basis: Basis,
    pub beta: Vec<f64>,
    /// `γ_{t−1}`; empty at level 1.
    pub gamma: Vec<f64>,
    pub cov: CovarianceParams,
    pub tau2: f64,
}

impl OracleLevel {
    fn zeta(&self, s: &[f64]) -> f64 {
        self.scale_basis.row(s).iter().zip(&self.gamma).map(|(g, c)| g * c).sum()
    }

    fn trend(&self, s: &[f64]) -> f64 {
        self.trend_basis.row(s).iter().zip(&self.beta).map(|(h, b)| h * b).sum()
    }
}

/// Which covariance transcription to assemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovMode {
    /// Literal block formulas with the membership indicators.
    AsPrinted,
    /// Blocks implied by `y_t = ζ_{t−1} y_{t−1} + h_tᵀβ_t + w_t`.
    Generative,
}

fn guard(levels: &[OracleLevel]) -> Result<usize> {
    let n: usize = levels.iter().map(|l| l.locs.len()).sum();
    if levels.is_empty() || levels.len() > ORACLE_MAX_LEVELS || n > ORACLE_LIMIT {
        return Err(Error::TooLargeForDense { n, limit: ORACLE_LIMIT });
    }
    Ok(n)
}

/// `Π_{i=j+1}^{t} ζ_{i−1}(s)` over 0-based level indices `j ≤ t`.
fn chain(levels: &[OracleLevel], j: usize, t: usize, s: &[f64]) -> f64 {
    (j + 1..=t).map(|i| levels[i].zeta(s)).product()
}

/// Stacked mean of `z`, optionally conditional on latent values
/// `w(level, s)` (0-based level).
pub fn dense_mean(levels: &[OracleLevel], w: Option<&dyn Fn(usize, &[f64]) -> f64>) -> Result<DVector<f64>> {
    guard(levels)?;
    let mut out = Vec::new();
    for (t, lv) in levels.iter().enumerate() {
        for s in lv.locs.points() {
            let mut mu = lv.trend(s) + w.map_or(0.0, |w| w(t, s));
            for i in 0..t {
                let observed = levels[i].locs.contains(s);
                let wi = if observed { w.map_or(0.0, |w| w(i, s)) } else { 0.0 };
                mu += chain(levels, i, t, s) * (levels[i].trend(s) + wi);
            }
            out.push(mu);
        }
    }
    Ok(DVector::from_vec(out))
}

/// Stacked covariance of `z` over all levels.
pub fn dense_cov(levels: &[OracleLevel], mode: CovMode) -> Result<DMatrix<f64>> {
    let n = guard(levels)?;
    let mut index = Vec::with_capacity(n);
    for (t, lv) in levels.iter().enumerate() {
        for k in 0..lv.locs.len() {
            index.push((t, k));
        }
    }
    let mut out = DMatrix::zeros(n, n);
    for (a, &(t, k)) in index.iter().enumerate() {
        let s = levels[t].locs.point(k);
        for (b, &(u, l)) in index.iter().enumerate().skip(a) {
            let r = levels[u].locs.point(l);
            let v = match mode {
                CovMode::Generative => {
                    let mut v = 0.0;
                    for j in 0..=t.min(u) {
                        v += chain(levels, j, t, s) * chain(levels, j, u, r) * levels[j].cov.cov(s, r);
                    }
                    if t == u && k == l {
                        v += levels[t].tau2;
                    }
                    v
                }
                CovMode::AsPrinted => {
                    let lo = t.min(u);
                    let outside = |i: usize| !levels[i].locs.contains(s) && !levels[i].locs.contains(r);
                    let mut v = 0.0;
                    for i in 0..lo {
                        if outside(i) {
                            let prod: f64 = (i + 1..=lo).map(|j| levels[j].zeta(s) * levels[j].zeta(r)).product();
                            v += prod * levels[i].cov.cov(s, r);
                        }
                    }
                    if t == u {
                        if k == l {
                            v += levels[t].tau2;
                        }
                    } else if outside(lo) {
                        v += levels[lo].cov.cov(s, r);
                    }
                    v
                }
            };
            out[(a, b)] = v;
            out[(b, a)] = v;
        }
    }
    Ok(out)
}

/// Cholesky-based solver for a dense SPD matrix.
pub struct DenseSolver {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl DenseSolver {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        let chol = m.cholesky().ok_or_else(|| Error::NotPositiveDefinite("dense oracle matrix".into()))?;
        Ok(Self { chol })
    }

    pub fn log_det(&self) -> f64 {
        self.chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum()
    }

    pub fn solve_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(v)
    }
}

impl CovarianceSolve for DenseSolver {
    fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    fn solve_columns(&self, b: &[f64], k: usize) -> Vec<f64> {
        let n = self.dim();
        self.chol.solve(&DMatrix::from_column_slice(n, k, b)).as_slice().to_vec()
    }
}

/// Log density of `resid` under `N(0, cov)`.
pub fn dense_loglik(cov: &DMatrix<f64>, resid: &[f64]) -> Result<f64> {
    if cov.nrows() > ORACLE_LIMIT {
        return Err(Error::TooLargeForDense { n: cov.nrows(), limit: ORACLE_LIMIT });
    }
    let s = DenseSolver::new(cov.clone())?;
    let r = DVector::from_column_slice(resid);
    Ok(-0.5 * (resid.len() as f64 * LN_2PI + s.log_det() + r.dot(&s.solve_vec(&r))))
}

/// `C(S, S) + τ² I` for one level.
pub fn dense_level_cov(locs: &LocationSet, p: &CovarianceParams, tau2: f64) -> DMatrix<f64> {
    let n = locs.len();
    DMatrix::from_fn(n, n, |i, j| p.cov(locs.point(i), locs.point(j)) + if i == j { tau2 } else { 0.0 })
}

/// Simple kriging of the latent value at `target` from every reference residual.
pub fn dense_krige(
    locs: &LocationSet,
    resid: &[f64],
    p: &CovarianceParams,
    tau2: f64,
    target: &[f64],
    mode: ConditioningMode,
) -> Result<(f64, f64)> {
    if locs.is_empty() {
        return Ok((0.0, p.sigma2));
    }
    let nug = if mode == ConditioningMode::Observed { tau2 } else { 0.0 };
    let s = DenseSolver::new(dense_level_cov(locs, p, nug))?;
    let k = DVector::from_fn(locs.len(), |i, _| p.cov(locs.point(i), target));
    let w = s.solve_vec(&k);
    Ok((w.dot(&DVector::from_column_slice(resid)), p.sigma2 - w.dot(&k)))
}

/// Conjugate posterior of the joint regression `z = Wθ + e`, `W = [H X]`,
/// `θ ~ N(μ, σ²V)`, `e ~ N(0, σ²Σ)`, `σ² ~ IG(a, b)`, computed directly from
/// the stacked normal equations.
#[derive(Debug, Clone)]
pub struct DenseConjugate {
    pub theta: DVector<f64>,
    /// Posterior covariance divided by `σ²`.
    pub v: DMatrix<f64>,
    pub a_star: f64,
    pub b_star: f64,
}

fn joint_prior(priors: &LevelPriors, q: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let p = priors.beta.dim();
    let mut mu = DVector::zeros(p + q);
    let mut v = DMatrix::zeros(p + q, p + q);
    mu.rows_mut(0, p).copy_from(&priors.beta.mean_vec());
    v.view_mut((0, 0), (p, p)).copy_from(&priors.beta.cov_matrix());
    if q > 0 {
        let g = priors.gamma.as_ref().ok_or_else(|| Error::InvalidParameter("missing gamma prior".into()))?;
        mu.rows_mut(p, q).copy_from(&g.mean_vec());
        v.view_mut((p, p), (q, q)).copy_from(&g.cov_matrix());
    }
    Ok((mu, v))
}

fn stack(h: &DMatrix<f64>, x: Option<&DMatrix<f64>>) -> DMatrix<f64> {
    match x {
        Some(x) => {
            let mut w = DMatrix::zeros(h.nrows(), h.ncols() + x.ncols());
            w.columns_mut(0, h.ncols()).copy_from(h);
            w.columns_mut(h.ncols(), x.ncols()).copy_from(x);
            w
        }
        None => h.clone(),
    }
}

pub fn dense_conjugate(
    h: &DMatrix<f64>,
    x: Option<&DMatrix<f64>>,
    z: &[f64],
    sigma: &DMatrix<f64>,
    priors: &LevelPriors,
) -> Result<DenseConjugate> {
    let w = stack(h, x);
    let (mu, v0) = joint_prior(priors, x.map_or(0, |x| x.ncols()))?;
    let v0_inv = v0.try_inverse().ok_or_else(|| Error::NotPositiveDefinite("prior".into()))?;
    let sig_inv = sigma.clone().try_inverse().ok_or_else(|| Error::NotPositiveDefinite("sigma".into()))?;
    let zv = DVector::from_column_slice(z);
    let q = &v0_inv + w.transpose() * &sig_inv * &w;
    let v = q.try_inverse().ok_or_else(|| Error::NotPositiveDefinite("posterior precision".into()))?;
    let r = &v0_inv * &mu + w.transpose() * &sig_inv * &zv;
    let theta = &v * &r;
    let a_star = priors.sigma2.a + z.len() as f64 / 2.0;
    let b_star = priors.sigma2.b + 0.5 * (zv.dot(&(&sig_inv * &zv)) + mu.dot(&(&v0_inv * &mu)) - r.dot(&theta));
    Ok(DenseConjugate { theta, v, a_star, b_star })
}

/// Posterior mean of `σ²` by trapezoidal integration over `log σ²` of
/// `p(σ²) · N(z | Wμ, σ²(Σ + W V Wᵀ))`.
pub fn sigma2_quadrature(
    h: &DMatrix<f64>,
    x: Option<&DMatrix<f64>>,
    z: &[f64],
    sigma: &DMatrix<f64>,
    priors: &LevelPriors,
) -> Result<f64> {
    let w = stack(h, x);
    let (mu, v0) = joint_prior(priors, x.map_or(0, |x| x.ncols()))?;
    let marg = sigma + &w * v0 * w.transpose();
    let s = DenseSolver::new(marg)?;
    let r = DVector::from_column_slice(z) - &w * mu;
    let quad = r.dot(&s.solve_vec(&r));
    let n = z.len() as f64;
    let (a, b) = (priors.sigma2.a, priors.sigma2.b);
    // log integrand in u = log σ², Jacobian included
    let logf = |u: f64| -(a + 1.0) * u - b * (-u).exp() - 0.5 * n * u - 0.5 * quad * (-u).exp() + u;
    let alpha = a + n / 2.0;
    let centre = ((b + quad / 2.0) / alpha).ln();
    let half = 40.0 / alpha.sqrt() + 5.0;
    let steps = 200_000;
    let du = 2.0 * half / steps as f64;
    let grid: Vec<f64> = (0..=steps).map(|i| centre - half + i as f64 * du).collect();
    let logs: Vec<f64> = grid.iter().map(|&u| logf(u)).collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut num, mut den) = (0.0, 0.0);
    for (i, (&u, &l)) in grid.iter().zip(&logs).enumerate() {
        let wgt = if i == 0 || i == steps { 0.5 } else { 1.0 };
        let f = (l - top).exp() * wgt;
        den += f;
        num += f * u.exp();
    }
    Ok(num / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn two_levels(gamma: f64) -> Vec<OracleLevel> {
        let l1 = LocationSet::from_points(&[[0.1, 0.2], [0.5, 0.5], [0.9, 0.1]]).unwrap();
        let l2 = LocationSet::from_points(&[[0.5, 0.5], [0.3, 0.8]]).unwrap();
        vec![
            OracleLevel {
                locs: l1,
                trend_basis: Basis::Constant,
                scale_basis: Basis::Constant,
                beta: vec![2.0],
                gamma: vec![],
                cov: CovarianceParams::isotropic(1.5, 2.0).unwrap(),
                tau2: 0.1,
            },
            OracleLevel {
                locs: l2,
                trend_basis: Basis::Linear,
                scale_basis: Basis::Linear,
                beta: vec![0.5, 1.0, -1.0],
                gamma: vec![gamma, 0.3, -0.2],
                cov: CovarianceParams::isotropic(0.7, 3.0).unwrap(),
                tau2: 0.05,
            },
        ]
    }

    #[test]
    fn single_level_mean_is_trend() {
        let lv = two_levels(1.0);
        let mu = dense_mean(&lv[..1], None).unwrap();
        assert!(mu.iter().all(|&m| m == 2.0));
        let w = |_: usize, s: &[f64]| s[0];
        let mu = dense_mean(&lv[..1], Some(&w)).unwrap();
        assert!((mu[2] - 2.9).abs() < 1e-15);
    }

    #[test]
    fn unit_scales_telescope() {
        let mut lv = two_levels(1.0);
        lv[1].gamma = vec![1.0, 0.0, 0.0];
        lv[1].trend_basis = Basis::Constant;
        lv[1].beta = vec![0.5];
        let mu = dense_mean(&lv, None).unwrap();
        assert!((mu[3] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn nugget_on_diagonal_only() {
        let lv = two_levels(1.0);
        for mode in [CovMode::AsPrinted, CovMode::Generative] {
            let a = dense_cov(&lv, mode).unwrap();
            let mut lv0 = lv.clone();
            lv0.iter_mut().for_each(|l| l.tau2 = 0.0);
            let b = dense_cov(&lv0, mode).unwrap();
            let d = a - b;
            for i in 0..5 {
                for j in 0..5 {
                    let want = if i != j { 0.0 } else if i < 3 { 0.1 } else { 0.05 };
                    assert!((d[(i, j)] - want).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn zero_scale_decouples_levels() {
        let mut lv = two_levels(0.0);
        lv[1].gamma = vec![0.0, 0.0, 0.0];
        let c = dense_cov(&lv, CovMode::Generative).unwrap();
        assert!(c.view((0, 3), (3, 2)).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn printed_within_level_block_lacks_own_process() {
        let lv = two_levels(0.8);
        let g = dense_cov(&lv, CovMode::Generative).unwrap();
        let p = dense_cov(&lv, CovMode::AsPrinted).unwrap();
        // level-2 entry (0.3,0.8) is outside S_1: the difference is C_2 alone
        let s = [0.3, 0.8];
        assert!((g[(4, 4)] - p[(4, 4)] - lv[1].cov.cov(&s, &s)).abs() < 1e-12);
        // level-1 block: the printed version keeps only the nugget
        assert!((g[(0, 1)] - p[(0, 1)] - lv[0].cov.cov(lv[0].locs.point(0), lv[0].locs.point(1))).abs() < 1e-12);
    }

    #[test]
    fn generative_moments_match_simulation() {
        let lv = two_levels(0.9);
        let mu = dense_mean(&lv, None).unwrap();
        let cov = dense_cov(&lv, CovMode::Generative).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let l1 = dense_level_cov(&lv[0].locs, &lv[0].cov, 0.0);
        // level-1 process at the union of locations, level-2 process at S_2
        let union = LocationSet::from_points(&[[0.1, 0.2], [0.5, 0.5], [0.9, 0.1], [0.3, 0.8]]).unwrap();
        let c1 = dense_level_cov(&union, &lv[0].cov, 0.0).cholesky().unwrap().l();
        let c2 = dense_level_cov(&lv[1].locs, &lv[1].cov, 0.0).cholesky().unwrap().l();
        assert_eq!(l1.nrows(), 3);
        let reps = 1_000_000;
        let mut sum = DVector::<f64>::zeros(5);
        let mut sum2 = DMatrix::<f64>::zeros(5, 5);
        let mut draws = Vec::with_capacity(reps);
        for _ in 0..reps {
            let e1 = DVector::from_fn(4, |_, _| rng.sample::<f64, _>(StandardNormal));
            let e2 = DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal));
            let w1 = &c1 * e1;
            let w2 = &c2 * e2;
            let y1 = |i: usize| 2.0 + w1[i];
            let mut z = DVector::zeros(5);
            for k in 0..3 {
                z[k] = y1(k) + lv[0].tau2.sqrt() * rng.sample::<f64, _>(StandardNormal);
            }
            for (k, ui) in [(0usize, 1usize), (1, 3)] {
                let s = lv[1].locs.point(k);
                z[3 + k] = lv[1].zeta(s) * y1(ui) + lv[1].trend(s) + w2[k]
                    + lv[1].tau2.sqrt() * rng.sample::<f64, _>(StandardNormal);
            }
            sum += &z;
            draws.push(z);
        }
        let mean = sum / reps as f64;
        for z in &draws {
            let d = z - &mean;
            sum2 += &d * d.transpose();
        }
        let emp = sum2 / (reps as f64 - 1.0);
        for i in 0..5 {
            let se = (cov[(i, i)] / reps as f64).sqrt();
            assert!((mean[i] - mu[i]).abs() < 3.0 * se, "mean {i}");
            for j in 0..5 {
                // var of a product of jointly normal variables
                let se = ((cov[(i, i)] * cov[(j, j)] + cov[(i, j)].powi(2)) / reps as f64).sqrt();
                assert!((emp[(i, j)] - cov[(i, j)]).abs() < 3.0 * se, "cov {i},{j}");
            }
        }
    }

    #[test]
    fn printed_mean_conditions_on_observed_latents() {
        let lv = two_levels(0.9);
        let w = |t: usize, s: &[f64]| if t == 0 { s[0] + s[1] } else { 0.25 };
        let mu = dense_mean(&lv, Some(&w)).unwrap();
        // (0.5,0.5) is observed at level 1, (0.3,0.8) is not
        let s = [0.5, 0.5];
        let expect = lv[1].zeta(&s) * (2.0 + 1.0) + lv[1].trend(&s) + 0.25;
        assert!((mu[3] - expect).abs() < 1e-14);
        let s = [0.3, 0.8];
        let expect = lv[1].zeta(&s) * 2.0 + lv[1].trend(&s) + 0.25;
        assert!((mu[4] - expect).abs() < 1e-14);
    }

    #[test]
    fn one_point_loglik_and_krige() {
        let c = DMatrix::from_element(1, 1, 2.0);
        let ll = dense_loglik(&c, &[0.0]).unwrap();
        assert!((ll + 0.5 * (2.0 * std::f64::consts::PI * 2.0).ln()).abs() < 1e-14);
        let locs = LocationSet::from_points(&[[0.0, 0.0], [1.0, 0.0]]).unwrap();
        let p = CovarianceParams::isotropic(1.0, 1.0).unwrap();
        let (m, v) = dense_krige(&locs, &[3.0, -1.0], &p, 0.0, &[1.0, 0.0], ConditioningMode::Observed).unwrap();
        assert!((m + 1.0).abs() < 1e-12);
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn guard_rejects_large_inputs() {
        let coords: Vec<f64> = (0..1002).map(|i| i as f64).collect();
        let mut lv = two_levels(1.0);
        lv[0].locs = LocationSet::new(2, coords).unwrap();
        assert!(matches!(dense_mean(&lv, None), Err(Error::TooLargeForDense { .. })));
    }
}
