//! Prediction metrics and synthetic multi-fidelity data.

use faer::{Mat, Side};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::covariance::{CovarianceParams, Kernel};
use crate::error::{Error, Result};
use crate::geometry::{canonicalize, LocationSet};
use crate::rnnc::{Basis, FidelityDataset, Prediction};

/// Largest location set simulated with a dense Cholesky.
pub const DENSE_SIM_LIMIT: usize = 20_000;

/// One held-out observation with its predictive summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub obs: f64,
    pub mean: f64,
    pub sd: f64,
    pub lo95: f64,
    pub hi95: f64,
}

impl PredictionRecord {
    pub fn new(obs: f64, p: &Prediction) -> Self {
        Self { obs, mean: p.mean, sd: p.var.max(0.0).sqrt(), lo95: p.lo95, hi95: p.hi95 }
    }
}

fn nonempty(r: &[PredictionRecord]) -> Result<f64> {
    if r.is_empty() {
        Err(Error::EmptyRecords)
    } else {
        Ok(r.len() as f64)
    }
}

pub fn rmspe(r: &[PredictionRecord]) -> Result<f64> {
    let n = nonempty(r)?;
    Ok((r.iter().map(|x| (x.mean - x.obs).powi(2)).sum::<f64>() / n).sqrt())
}

/// Nash-Sutcliffe efficiency `1 − Σ(pred − obs)² / Σ(obs − ōbs)²`.
pub fn nsme(r: &[PredictionRecord]) -> Result<f64> {
    let n = nonempty(r)?;
    let bar = r.iter().map(|x| x.obs).sum::<f64>() / n;
    let ss = r.iter().map(|x| (x.obs - bar).powi(2)).sum::<f64>();
    if ss == 0.0 {
        return Err(Error::ConstantObservations);
    }
    Ok(1.0 - r.iter().map(|x| (x.mean - x.obs).powi(2)).sum::<f64>() / ss)
}

pub fn cvg95(r: &[PredictionRecord]) -> Result<f64> {
    let n = nonempty(r)?;
    Ok(r.iter().filter(|x| x.lo95 <= x.obs && x.obs <= x.hi95).count() as f64 / n)
}

pub fn alci95(r: &[PredictionRecord]) -> Result<f64> {
    let n = nonempty(r)?;
    Ok(r.iter().map(|x| x.hi95 - x.lo95).sum::<f64>() / n)
}

/// CRPS of `N(mean, sd²)` at `obs`.
pub fn crps_normal(obs: f64, mean: f64, sd: f64) -> f64 {
    if sd == 0.0 {
        return (obs - mean).abs();
    }
    let std = Normal::standard();
    let z = (obs - mean) / sd;
    sd * (z * (2.0 * std.cdf(z) - 1.0) + 2.0 * std.pdf(z) - 1.0 / std::f64::consts::PI.sqrt())
}

/// Mean Gaussian CRPS over the records.
pub fn crps_gaussian(r: &[PredictionRecord]) -> Result<f64> {
    let n = nonempty(r)?;
    if let Some(x) = r.iter().find(|x| !(x.sd >= 0.0)) {
        return Err(Error::InvalidParameter(format!("negative predictive sd {}", x.sd)));
    }
    Ok(r.iter().map(|x| crps_normal(x.obs, x.mean, x.sd)).sum::<f64>() / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmspe: f64,
    pub nsme: f64,
    pub crps: f64,
    pub cvg95: f64,
    pub alci95: f64,
}

pub fn metrics(r: &[PredictionRecord]) -> Result<Metrics> {
    Ok(Metrics { rmspe: rmspe(r)?, nsme: nsme(r)?, crps: crps_gaussian(r)?, cvg95: cvg95(r)?, alci95: alci95(r)? })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Design {
    /// `S_1` is a random subset of a regular grid on the unit square and each
    /// `S_t` a random subset of `S_{t−1}`.
    NestedGrid,
    /// Independent uniform points on the unit square per level.
    #[default]
    NonNestedUniform,
}

/// Truths of one simulated level. `gamma` is ignored at level 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimLevel {
    pub n: usize,
    pub beta: Vec<f64>,
    #[serde(default)]
    pub trend_basis: Basis,
    #[serde(default)]
    pub gamma: Vec<f64>,
    #[serde(default)]
    pub scale_basis: Basis,
    pub sigma2: f64,
    pub kappa: f64,
    pub tau2: f64,
}

/// Axis-aligned box `[x0, x1] × [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HoldoutBox {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl HoldoutBox {
    pub fn contains(&self, p: &[f64]) -> bool {
        (0..2).all(|k| self.lo[k] <= p[k] && p[k] <= self.hi[k])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSpec {
    pub levels: Vec<SimLevel>,
    #[serde(default)]
    pub design: Design,
    /// `None` draws four random squares covering 10% of the domain; an empty
    /// list holds nothing out.
    #[serde(default)]
    pub holdout: Option<Vec<HoldoutBox>>,
    #[serde(default)]
    pub seed: u64,
}

impl SimSpec {
    /// Two levels at the truths of the two-level study: `β = (10, 1)`,
    /// `σ² = (4, 1)`, decay 10 on both, `γ₁ = 1`, `τ² = (0.1, 0.05)`.
    pub fn two_level(n1: usize, n2: usize, design: Design, seed: u64) -> Self {
        let lv = |n, beta, gamma: Vec<f64>, sigma2, tau2| SimLevel {
            n,
            beta: vec![beta],
            trend_basis: Basis::Constant,
            gamma,
            scale_basis: Basis::Constant,
            sigma2,
            kappa: 10.0,
            tau2,
        };
        Self {
            levels: vec![lv(n1, 10.0, vec![], 4.0, 0.1), lv(n2, 1.0, vec![1.0], 1.0, 0.05)],
            design,
            holdout: None,
            seed,
        }
    }

    /// Four levels: `γ = (1.1, 0.9, 1)`, `(σ², κ) = (2, 12), (1, 6), (0.8, 8), (0.5, 3)`,
    /// `τ² = (0.1, 0.05, 0.05, 0.01)`, `β = (10, 1, 1, 1)`.
    pub fn four_level(n: usize, design: Design, seed: u64) -> Self {
        let truths = [
            (10.0, None, 2.0, 12.0, 0.1),
            (1.0, Some(1.1), 1.0, 6.0, 0.05),
            (1.0, Some(0.9), 0.8, 8.0, 0.05),
            (1.0, Some(1.0), 0.5, 3.0, 0.01),
        ];
        let levels = truths
            .iter()
            .map(|&(beta, gamma, sigma2, kappa, tau2)| SimLevel {
                n,
                beta: vec![beta],
                trend_basis: Basis::Constant,
                gamma: gamma.into_iter().collect(),
                scale_basis: Basis::Constant,
                sigma2,
                kappa,
                tau2,
            })
            .collect();
        Self { levels, design, holdout: None, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::InvalidParameter("no levels to simulate".into()));
        }
        for (t, lv) in self.levels.iter().enumerate() {
            let bad = |what: &str| Err(Error::InvalidParameter(format!("level {}: {what}", t + 1)));
            if lv.n == 0 {
                return bad("n must be positive");
            }
            if lv.beta.len() != lv.trend_basis.ncols(2) {
                return bad("beta length does not match the trend basis");
            }
            if t > 0 && lv.gamma.len() != lv.scale_basis.ncols(2) {
                return bad("gamma length does not match the scale basis");
            }
            if !(lv.sigma2 >= 0.0) || !(lv.tau2 >= 0.0) || !(lv.kappa > 0.0) {
                return bad("sigma2 and tau2 must be non-negative and kappa positive");
            }
            if self.design == Design::NestedGrid && t > 0 && lv.n > self.levels[t - 1].n {
                return bad("nested design needs n_t <= n_(t-1)");
            }
        }
        if let Some(boxes) = &self.holdout {
            if boxes.iter().any(|b| !(b.lo[0] <= b.hi[0] && b.lo[1] <= b.hi[1])) {
                return Err(Error::InvalidParameter("holdout box with lo > hi".into()));
            }
        }
        Ok(())
    }
}

/// Locations with latent values `y` and observations `z = y + ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimLevelData {
    pub locs: LocationSet,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimData {
    /// Training data per level; the top level excludes the holdout.
    pub levels: Vec<SimLevelData>,
    /// Top-level points inside the holdout boxes.
    pub holdout: SimLevelData,
    pub boxes: Vec<HoldoutBox>,
    /// Latent `y_t` on `⋃_{i≥t} S_i` for every `t`, keyed by location.
    pub latent: Vec<SimLevelData>,
}

impl SimData {
    pub fn datasets(&self, spec: &SimSpec) -> Result<Vec<FidelityDataset>> {
        self.levels
            .iter()
            .zip(&spec.levels)
            .enumerate()
            .map(|(t, (d, lv))| {
                let scale = (t > 0).then_some(lv.scale_basis);
                FidelityDataset::new(t + 1, d.locs.clone(), d.z.clone(), lv.trend_basis, scale)
            })
            .collect()
    }
}

const STREAM_LOCS: u64 = 0;
const STREAM_BOXES: u64 = 1;
const STREAM_FIELD: u64 = 16;
const STREAM_NOISE: u64 = 32;

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(s);
    r
}

fn uniform_points(n: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    (0..n).map(|_| [canonicalize(rng.random()), canonicalize(rng.random())]).collect()
}

fn design_points(spec: &SimSpec) -> Vec<Vec<[f64; 2]>> {
    let mut rng = stream(spec.seed, STREAM_LOCS);
    match spec.design {
        Design::NonNestedUniform => spec.levels.iter().map(|lv| uniform_points(lv.n, &mut rng)).collect(),
        Design::NestedGrid => {
            let g = (spec.levels[0].n as f64).sqrt().ceil() as usize;
            let grid: Vec<[f64; 2]> = (0..g * g)
                .map(|k| {
                    let c = |i: usize| canonicalize((i as f64 + 0.5) / g as f64);
                    [c(k % g), c(k / g)]
                })
                .collect();
            let mut out: Vec<Vec<[f64; 2]>> = Vec::new();
            let mut prev = grid;
            for lv in &spec.levels {
                let mut idx = sample(&mut rng, prev.len(), lv.n).into_vec();
                idx.sort_unstable();
                let cur: Vec<[f64; 2]> = idx.iter().map(|&i| prev[i]).collect();
                out.push(cur.clone());
                prev = cur;
            }
            out
        }
    }
}

/// Four non-overlapping squares, one per quadrant, jointly covering 10% of
/// the unit square.
pub fn default_boxes(seed: u64) -> Vec<HoldoutBox> {
    let mut rng = stream(seed, STREAM_BOXES);
    let side = (0.1f64 / 4.0).sqrt();
    (0..4)
        .map(|q| {
            let (ox, oy) = ((q % 2) as f64 * 0.5, (q / 2) as f64 * 0.5);
            let x = canonicalize(ox + rng.random::<f64>() * (0.5 - side));
            let y = canonicalize(oy + rng.random::<f64>() * (0.5 - side));
            HoldoutBox { lo: [x, y], hi: [canonicalize(x + side), canonicalize(y + side)] }
        })
        .collect()
}

fn dedup_union(sets: &[Vec<[f64; 2]>]) -> Vec<[f64; 2]> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for p in sets.iter().flatten() {
        if seen.insert((p[0].to_bits(), p[1].to_bits())) {
            out.push(*p);
        }
    }
    out
}

/// Draws `w ~ N(0, C)` at `pts` by a dense Cholesky.
fn draw_field(pts: &[[f64; 2]], sigma2: f64, kappa: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let n = pts.len();
    if sigma2 == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let p = CovarianceParams::isotropic(sigma2, kappa)?;
    let c = Mat::from_fn(n, n, |i, j| p.cov(&pts[i], &pts[j]));
    let llt = c
        .llt(Side::Lower)
        .map_err(|e| Error::NotPositiveDefinite(format!("simulation covariance: {e:?}")))?;
    let l = llt.L();
    let e: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok((0..n).map(|i| (0..=i).map(|j| l[(i, j)] * e[j]).sum()).collect())
}

fn basis_dot(b: Basis, coef: &[f64], s: &[f64]) -> f64 {
    b.row(s).iter().zip(coef).map(|(h, c)| h * c).sum()
}

/// Simulates every level densely and carves the holdout from the top level.
pub fn simulate(spec: &SimSpec) -> Result<SimData> {
    spec.validate()?;
    let t_max = spec.levels.len();
    let pts = design_points(spec);
    let mut latent: Vec<SimLevelData> = Vec::with_capacity(t_max);
    let mut noise_rngs: Vec<ChaCha8Rng> = (0..t_max).map(|t| stream(spec.seed, STREAM_NOISE + t as u64)).collect();
    for (t, lv) in spec.levels.iter().enumerate() {
        let union = dedup_union(&pts[t..]);
        if union.len() > DENSE_SIM_LIMIT {
            return Err(Error::TooLargeForDense { n: union.len(), limit: DENSE_SIM_LIMIT });
        }
        let w = draw_field(&union, lv.sigma2, lv.kappa, &mut stream(spec.seed, STREAM_FIELD + t as u64))?;
        let locs = LocationSet::from_points(&union)?;
        let y: Vec<f64> = union
            .iter()
            .zip(&w)
            .map(|(s, wi)| {
                let own = basis_dot(lv.trend_basis, &lv.beta, s) + wi;
                match latent.last() {
                    None => own,
                    Some(prev) => {
                        let k = prev.locs.index_of(s).expect("union of higher levels is nested");
                        basis_dot(lv.scale_basis, &lv.gamma, s) * prev.y[k] + own
                    }
                }
            })
            .collect();
        let sd = lv.tau2.sqrt();
        let rng = &mut noise_rngs[t];
        let z = y.iter().map(|v| v + sd * rng.sample::<f64, _>(StandardNormal)).collect();
        latent.push(SimLevelData { locs, y, z });
    }
    let boxes = spec.holdout.clone().unwrap_or_else(|| default_boxes(spec.seed));
    let mut levels = Vec::with_capacity(t_max);
    let mut holdout = None;
    for (t, p) in pts.iter().enumerate() {
        let src = &latent[t];
        let rows: Vec<usize> = p.iter().map(|s| src.locs.index_of(s).expect("level point in union")).collect();
        let (test, train): (Vec<usize>, Vec<usize>) = if t + 1 == t_max {
            rows.into_iter().partition(|&k| boxes.iter().any(|b| b.contains(src.locs.point(k))))
        } else {
            (Vec::new(), rows)
        };
        let take = |idx: &[usize]| SimLevelData {
            locs: LocationSet::from_points(&idx.iter().map(|&k| src.locs.point(k)).collect::<Vec<_>>())
                .expect("distinct points"),
            y: idx.iter().map(|&k| src.y[k]).collect(),
            z: idx.iter().map(|&k| src.z[k]).collect(),
        };
        levels.push(take(&train));
        if t + 1 == t_max {
            holdout = Some(take(&test));
        }
    }
    let holdout = holdout.expect("at least one level");
    Ok(SimData { levels, holdout, boxes, latent })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn rec(obs: f64, mean: f64, sd: f64) -> PredictionRecord {
        PredictionRecord { obs, mean, sd, lo95: mean - 1.96 * sd, hi95: mean + 1.96 * sd }
    }

    /// `∫ (Φ((x − μ)/σ) − 1{x ≥ y})² dx` by composite Simpson on each side of `y`.
    fn crps_quadrature(y: f64, mu: f64, sd: f64) -> f64 {
        let std = Normal::standard();
        let f = |x: f64, h: f64| (std.cdf((x - mu) / sd) - h).powi(2);
        let simpson = |a: f64, b: f64, h01: f64, n: usize| {
            let h = (b - a) / n as f64;
            let mut s = f(a, h01) + f(b, h01);
            for i in 1..n {
                s += f(a + i as f64 * h, h01) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            s * h / 3.0
        };
        let lo = mu.min(y) - 12.0 * sd;
        let hi = mu.max(y) + 12.0 * sd;
        simpson(lo, y, 0.0, 20_000) + simpson(y, hi, 1.0, 20_000)
    }

    #[test]
    fn perfect_prediction() {
        let r = vec![rec(1.0, 1.0, 0.5), rec(2.0, 2.0, 0.5), rec(4.0, 4.0, 0.5)];
        assert_eq!(rmspe(&r).unwrap(), 0.0);
        assert_eq!(nsme(&r).unwrap(), 1.0);
        assert_eq!(cvg95(&r).unwrap(), 1.0);
    }

    #[test]
    fn predicting_the_mean_gives_zero_nsme() {
        let obs = [1.0, 2.0, 6.0];
        let r: Vec<_> = obs.iter().map(|&o| rec(o, 3.0, 1.0)).collect();
        assert!(nsme(&r).unwrap().abs() < 1e-15);
    }

    #[test]
    fn unit_residuals() {
        let r: Vec<_> = [0.0, 3.0, -2.0].iter().map(|&o| rec(o, o + 1.0, 1.0)).collect();
        assert!((rmspe(&r).unwrap() - 1.0).abs() < 1e-15);
        assert!((alci95(&r).unwrap() - 3.92).abs() < 1e-12);
    }

    #[test]
    fn constant_obs_rejected_by_nsme() {
        let r = vec![rec(1.0, 0.0, 1.0), rec(1.0, 2.0, 1.0)];
        assert_eq!(nsme(&r), Err(Error::ConstantObservations));
        assert_eq!(rmspe(&[]), Err(Error::EmptyRecords));
    }

    #[test]
    fn crps_point_mass_on_truth() {
        assert_eq!(crps_gaussian(&[rec(2.5, 2.5, 0.0)]).unwrap(), 0.0);
        assert_eq!(crps_normal(1.0, 3.0, 0.0), 2.0);
    }

    #[test]
    fn crps_centered_unit() {
        let std = Normal::standard();
        let expect = 2.0 * std.pdf(0.0) - 1.0 / std::f64::consts::PI.sqrt();
        let q = crps_quadrature(0.0, 0.0, 1.0);
        assert!((q - expect).abs() < 1e-8, "{q} vs {expect}");
        let r = vec![rec(0.0, 0.0, 1.0), rec(5.0, 5.0, 1.0)];
        assert!((crps_gaussian(&r).unwrap() - q).abs() < 1e-8);
    }

    #[test]
    fn crps_matches_quadrature_on_random_records() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let mu = rng.random_range(-3.0..3.0);
            let sd = rng.random_range(0.05..3.0);
            let y = mu + sd * rng.sample::<f64, _>(StandardNormal) * 2.0;
            let q = crps_quadrature(y, mu, sd);
            assert!((crps_normal(y, mu, sd) - q).abs() < 1e-6, "y={y} mu={mu} sd={sd}");
        }
    }

    proptest! {
        #[test]
        fn metrics_are_order_free_and_bounded(
            raw in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, 0.0f64..3.0), 2..40),
            rot in 0usize..40,
        ) {
            let r: Vec<_> = raw.iter().map(|&(o, m, s)| rec(o, m, s)).collect();
            let mut r2 = r.clone();
            r2.reverse();
            let k = rot % r2.len();
            r2.rotate_left(k);
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * (1.0 + a.abs());
            prop_assert!(close(rmspe(&r).unwrap(), rmspe(&r2).unwrap()));
            prop_assert!(close(crps_gaussian(&r).unwrap(), crps_gaussian(&r2).unwrap()));
            prop_assert!(close(alci95(&r).unwrap(), alci95(&r2).unwrap()));
            prop_assert_eq!(cvg95(&r).unwrap(), cvg95(&r2).unwrap());
            if let (Ok(a), Ok(b)) = (nsme(&r), nsme(&r2)) {
                prop_assert!(close(a, b));
            }
            let c = cvg95(&r).unwrap();
            prop_assert!((0.0..=1.0).contains(&c));
            prop_assert!(alci95(&r).unwrap() >= 0.0);
            prop_assert!(r.iter().all(|x| crps_normal(x.obs, x.mean, x.sd) >= 0.0));
        }
    }

    #[test]
    fn degenerate_level_copies_lower_field() {
        let mut spec = SimSpec::two_level(300, 150, Design::NestedGrid, 4);
        spec.holdout = Some(vec![]);
        let top = &mut spec.levels[1];
        top.sigma2 = 0.0;
        top.tau2 = 0.0;
        top.gamma = vec![1.0];
        top.beta = vec![0.0];
        let sim = simulate(&spec).unwrap();
        let l2 = &sim.levels[1];
        assert_eq!(l2.locs.len(), 150);
        for i in 0..l2.locs.len() {
            let k = sim.latent[0].locs.index_of(l2.locs.point(i)).unwrap();
            assert_eq!(l2.z[i], sim.latent[0].y[k]);
        }
    }

    #[test]
    fn nested_design_is_nested() {
        let sim = simulate(&SimSpec::four_level(200, Design::NestedGrid, 1)).unwrap();
        for t in 1..4 {
            let lower = &sim.latent[t - 1].locs;
            assert!(sim.levels[t].locs.points().all(|p| lower.contains(p)));
        }
        assert!(sim.holdout.locs.points().all(|p| sim.boxes.iter().any(|b| b.contains(p))));
        assert!(sim.levels[3].locs.points().all(|p| !sim.boxes.iter().any(|b| b.contains(p))));
        assert_eq!(sim.levels[3].locs.len() + sim.holdout.locs.len(), 200);
    }

    #[test]
    fn default_boxes_cover_a_tenth() {
        let b = default_boxes(9);
        let area: f64 = b.iter().map(|b| (b.hi[0] - b.lo[0]) * (b.hi[1] - b.lo[1])).sum();
        assert!((area - 0.1).abs() < 1e-9);
        for (i, x) in b.iter().enumerate() {
            assert!(x.lo.iter().chain(&x.hi).all(|v| (0.0..=1.0).contains(v)));
            for y in &b[i + 1..] {
                let apart = (0..2).any(|k| x.hi[k] < y.lo[k] || y.hi[k] < x.lo[k]);
                assert!(apart);
            }
        }
    }

    #[test]
    fn simulation_is_deterministic() {
        let spec = SimSpec::two_level(150, 120, Design::NonNestedUniform, 77);
        assert_eq!(simulate(&spec).unwrap(), simulate(&spec).unwrap());
        let other = SimSpec { seed: 78, ..spec.clone() };
        assert_ne!(simulate(&spec).unwrap().levels[0].z, simulate(&other).unwrap().levels[0].z);
    }

    #[test]
    fn oversized_spec_rejected() {
        let spec = SimSpec::two_level(15_000, 6_000, Design::NonNestedUniform, 0);
        assert_eq!(simulate(&spec), Err(Error::TooLargeForDense { n: 21_000, limit: DENSE_SIM_LIMIT }));
    }

    #[test]
    fn level_one_variance_matches_sill_plus_nugget() {
        let reps = 50;
        let stats: Vec<f64> = (0..reps)
            .map(|r| {
                let mut spec = SimSpec::two_level(2000, 1, Design::NonNestedUniform, 1000 + r);
                spec.levels.truncate(1);
                spec.holdout = Some(vec![]);
                let sim = simulate(&spec).unwrap();
                let z = &sim.levels[0].z;
                z.iter().map(|v| (v - 10.0).powi(2)).sum::<f64>() / z.len() as f64
            })
            .collect();
        let mean = stats.iter().sum::<f64>() / reps as f64;
        let sd = (stats.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
        let se = sd / (reps as f64).sqrt();
        assert!((mean - 4.1).abs() < 3.0 * se, "{mean} ± {se}");
    }

    #[test]
    fn independent_levels_when_gamma_is_zero() {
        let mut spec = SimSpec::two_level(1600, 1600, Design::NestedGrid, 21);
        spec.holdout = Some(vec![]);
        for lv in &mut spec.levels {
            lv.kappa = 400.0;
        }
        spec.levels[1].gamma = vec![0.0];
        let sim = simulate(&spec).unwrap();
        let (a, b) = (&sim.levels[0], &sim.levels[1]);
        let pairs: Vec<(f64, f64)> = (0..b.locs.len())
            .map(|i| (a.z[a.locs.index_of(b.locs.point(i)).unwrap()], b.z[i]))
            .collect();
        let n = pairs.len() as f64;
        let (mx, my) = (pairs.iter().map(|p| p.0).sum::<f64>() / n, pairs.iter().map(|p| p.1).sum::<f64>() / n);
        let sxy: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pairs.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let syy: f64 = pairs.iter().map(|p| (p.1 - my).powi(2)).sum();
        let r = sxy / (sxx * syy).sqrt();
        assert!(r.abs() < 3.0 / n.sqrt(), "r = {r}");
    }
}
