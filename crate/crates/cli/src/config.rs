//! TOML run configuration. Unknown keys are rejected at every level.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use rnnc::conjugate::{CandidateGrid, ConjugateConfig};
use rnnc::eval::{Design, HoldoutBox, SimLevel, SimSpec};
use rnnc::geometry::OrderingStrategy;
use rnnc::priors::{InverseGammaPrior, LevelPriors, NormalPrior};
use rnnc::rnnc::Basis;
use rnnc::sampler::{ChainConfig, SamplerPriors};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Delimiter {
    #[default]
    Comma,
    Tab,
}

impl Delimiter {
    pub fn byte(self) -> u8 {
        match self {
            Delimiter::Comma => b',',
            Delimiter::Tab => b'\t',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelBlock {
    /// Number of fidelity levels `T`.
    pub levels: usize,
    /// Neighbor budget.
    pub m: usize,
    pub trend: Basis,
    pub scale: Basis,
    pub ordering: OrderingStrategy,
    /// Treat `x, y` as longitude/latitude in degrees and scale `x` by the
    /// cosine of the mean training latitude before fitting.
    pub equirectangular: bool,
}

impl Default for ModelBlock {
    fn default() -> Self {
        Self {
            levels: 2,
            m: 10,
            trend: Basis::Constant,
            scale: Basis::Constant,
            ordering: OrderingStrategy::CoordSort,
            equirectangular: false,
        }
    }
}

/// Prior settings; scalar means and variances are broadcast over the basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorValues {
    pub beta_mean: f64,
    pub beta_var: f64,
    pub gamma_mean: f64,
    pub gamma_var: f64,
    pub sigma2_a: f64,
    pub sigma2_b: f64,
    pub tau2_a: f64,
    pub tau2_b: f64,
    pub kappa_max: f64,
}

impl Default for PriorValues {
    fn default() -> Self {
        Self {
            beta_mean: 0.0,
            beta_var: 1000.0,
            gamma_mean: 0.0,
            gamma_var: 1000.0,
            sigma2_a: 2.0,
            sigma2_b: 1.0,
            tau2_a: 2.0,
            tau2_b: 1.0,
            kappa_max: 25.0,
        }
    }
}

/// Shared prior values plus optional full per-level replacements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorBlock {
    pub beta_mean: f64,
    pub beta_var: f64,
    pub gamma_mean: f64,
    pub gamma_var: f64,
    pub sigma2_a: f64,
    pub sigma2_b: f64,
    pub tau2_a: f64,
    pub tau2_b: f64,
    pub kappa_max: f64,
    /// Level 1 first; omitted keys take the built-in defaults.
    pub level: Vec<PriorValues>,
}

impl Default for PriorBlock {
    fn default() -> Self {
        let d = PriorValues::default();
        Self {
            beta_mean: d.beta_mean,
            beta_var: d.beta_var,
            gamma_mean: d.gamma_mean,
            gamma_var: d.gamma_var,
            sigma2_a: d.sigma2_a,
            sigma2_b: d.sigma2_b,
            tau2_a: d.tau2_a,
            tau2_b: d.tau2_b,
            kappa_max: d.kappa_max,
            level: Vec::new(),
        }
    }
}

impl PriorBlock {
    fn shared(&self) -> PriorValues {
        PriorValues {
            beta_mean: self.beta_mean,
            beta_var: self.beta_var,
            gamma_mean: self.gamma_mean,
            gamma_var: self.gamma_var,
            sigma2_a: self.sigma2_a,
            sigma2_b: self.sigma2_b,
            tau2_a: self.tau2_a,
            tau2_b: self.tau2_b,
            kappa_max: self.kappa_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridBlock {
    /// `[lo, hi, count]`, log-spaced.
    pub kappa: (f64, f64, usize),
    pub tau2_rel: (f64, f64, usize),
    pub k_folds: usize,
}

impl Default for GridBlock {
    fn default() -> Self {
        Self { kappa: (0.1, 25.0, 20), tau2_rel: (5e-4, 0.4, 10), k_folds: 5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    TwoLevel,
    FourLevel,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateBlock {
    pub preset: Option<Preset>,
    /// Per-level sizes for a preset.
    pub n: Vec<usize>,
    pub design: Design,
    /// Explicit levels; overrides `preset`.
    pub level: Vec<SimLevel>,
    pub holdout: Option<Vec<HoldoutBox>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub delimiter: Delimiter,
    pub model: ModelBlock,
    pub priors: PriorBlock,
    pub grid: GridBlock,
    pub mcmc: ChainConfig,
    pub simulate: SimulateBlock,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.model.levels == 0 {
            return bad("model.levels must be at least 1".into());
        }
        if !self.priors.level.is_empty() && self.priors.level.len() != self.model.levels {
            return bad(format!("{} [[priors.level]] blocks for {} levels", self.priors.level.len(), self.model.levels));
        }
        let (k, t) = (self.grid.kappa, self.grid.tau2_rel);
        if k.2 == 0 || t.2 == 0 || !(k.0 > 0.0 && k.0 <= k.1) || !(t.0 > 0.0 && t.0 <= t.1) {
            return bad("grid ranges need 0 < lo <= hi and a positive count".into());
        }
        if self.grid.k_folds < 2 {
            return bad("grid.k_folds must be at least 2".into());
        }
        Ok(())
    }

    /// SHA-256 of the resolved configuration.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    fn values(&self, t: usize) -> PriorValues {
        self.priors.level.get(t - 1).cloned().unwrap_or_else(|| self.priors.shared())
    }

    fn normal(mean: f64, var: f64, p: usize) -> Result<NormalPrior, CliError> {
        let prior = NormalPrior::isotropic(p, mean, var);
        prior.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(prior)
    }

    pub fn level_priors(&self, t: usize, dim: usize) -> Result<LevelPriors, CliError> {
        let v = self.values(t);
        let sigma2 = InverseGammaPrior::new(v.sigma2_a, v.sigma2_b).map_err(|e| CliError::Config(e.to_string()))?;
        let gamma = if t > 1 { Some(Self::normal(v.gamma_mean, v.gamma_var, self.model.scale.ncols(dim))?) } else { None };
        Ok(LevelPriors { beta: Self::normal(v.beta_mean, v.beta_var, self.model.trend.ncols(dim))?, gamma, sigma2 })
    }

    pub fn sampler_priors(&self, t: usize, dim: usize) -> Result<SamplerPriors, CliError> {
        let v = self.values(t);
        Ok(SamplerPriors {
            level: self.level_priors(t, dim)?,
            tau2: InverseGammaPrior::new(v.tau2_a, v.tau2_b).map_err(|e| CliError::Config(e.to_string()))?,
            kappa_max: v.kappa_max,
        })
    }

    pub fn conjugate(&self, dim: usize) -> Result<ConjugateConfig, CliError> {
        let grid = CandidateGrid::log_spaced(self.grid.kappa, self.grid.tau2_rel).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(ConjugateConfig {
            m: self.model.m,
            k_folds: self.grid.k_folds,
            seed: self.seed,
            ordering: self.model.ordering,
            grids: vec![grid],
            priors: (1..=self.model.levels).map(|t| self.level_priors(t, dim)).collect::<Result<_, _>>()?,
        })
    }

    pub fn chain(&self) -> ChainConfig {
        ChainConfig { seed: self.seed, m: self.model.m, ordering: self.model.ordering, ..self.mcmc.clone() }
    }

    pub fn sim_spec(&self) -> Result<SimSpec, CliError> {
        let s = &self.simulate;
        let mut spec = if !s.level.is_empty() {
            SimSpec { levels: s.level.clone(), design: s.design, holdout: None, seed: self.seed }
        } else {
            let preset = s.preset.ok_or_else(|| CliError::Config("simulate needs a preset or [[simulate.level]] blocks".into()))?;
            let want = match preset {
                Preset::TwoLevel => 2,
                Preset::FourLevel => 4,
            };
            let n = match s.n.as_slice() {
                [] => vec![1000; want],
                [k] => vec![*k; want],
                v if v.len() == want => v.to_vec(),
                v => return Err(CliError::Config(format!("simulate.n has {} entries for {want} levels", v.len()))),
            };
            let mut spec = match preset {
                Preset::TwoLevel => SimSpec::two_level(n[0], n[1], s.design, self.seed),
                Preset::FourLevel => SimSpec::four_level(n[0], s.design, self.seed),
            };
            for (lv, k) in spec.levels.iter_mut().zip(n) {
                lv.n = k;
            }
            spec
        };
        spec.holdout = s.holdout.clone();
        spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(spec)
    }
}
