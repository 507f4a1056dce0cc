//! `rnnc`: simulate, fit, predict and evaluate multi-fidelity co-kriging models.

mod config;
mod io;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use rnnc::conjugate::fit_all;
use rnnc::eval::{metrics, simulate, PredictionRecord};
use rnnc::geometry::LocationSet;
use rnnc::rnnc::{predict_many, FittedLevel};
use rnnc::sampler::run_chain;

use config::RunConfig;
use io::{num, read_rows, write_json, write_table, Diagnosis, Stamp};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Model(#[from] rnnc::Error),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    fn code(&self) -> &'static str {
        use rnnc::Error as E;
        match self {
            CliError::Config(_) => "config",
            CliError::Input(_) => "input",
            CliError::Io(_) => "io",
            CliError::Model(E::SingularNeighborBlock { .. } | E::NotPositiveDefinite(_) | E::Divergence(_)) => "numerical",
            CliError::Model(_) => "invalid",
        }
    }

    fn exit(&self) -> u8 {
        match self.code() {
            "numerical" | "io" => 1,
            _ => 2,
        }
    }
}

#[derive(Parser)]
#[command(name = "rnnc", version, about = "Recursive nearest-neighbor co-kriging for multi-fidelity spatial data")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "rnnc-out")]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for cross-validation, factor construction and prediction.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Draw synthetic multi-fidelity data; writes train.csv, holdout.csv, truth.json.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Conjugate fit with cross-validated (decay, nugget ratio); writes model.json,
    /// posterior.csv, cv_table.csv, knots.csv.
    FitConjugate {
        #[command(flatten)]
        common: Common,
        /// Observations with columns x, y, value, level.
        #[arg(long)]
        data: PathBuf,
    },
    /// Collapsed MCMC; writes model.json, summary.csv, draws_level<t>.csv.
    FitMcmc {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Recursive prediction; writes predictions.csv.
    Predict {
        #[command(flatten)]
        common: Common,
        /// model.json from a fit.
        #[arg(long)]
        model: PathBuf,
        /// Target locations with columns x, y and optionally value.
        #[arg(long, required_unless_present = "grid_out", conflicts_with = "grid_out")]
        data: Option<PathBuf>,
        /// Pixel-centre grid `xmin,xmax,dx,ymin,ymax,dy`.
        #[arg(long)]
        grid_out: Option<String>,
        /// Level to predict; defaults to the top level.
        #[arg(long)]
        level: Option<usize>,
        /// Interval for the latent field instead of a new observation.
        #[arg(long)]
        latent: bool,
    },
    /// Metrics of a predictions file carrying a value column; writes metrics.csv.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    config_sha256: String,
    seed: u64,
    method: String,
    /// Multiplier on `x` applied before fitting; 1 without projection.
    x_scale: f64,
    diagnosis: Diagnosis,
    levels: Vec<FittedLevel>,
}

struct Ctx {
    cfg: RunConfig,
    stamp: Stamp,
    out: PathBuf,
}

fn setup(c: &Common) -> Result<Ctx, CliError> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(n) = c.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        // a second call in one process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    std::fs::create_dir_all(&c.out).map_err(|e| CliError::Io(format!("{}: {e}", c.out.display())))?;
    let stamp = Stamp { config_hash: cfg.hash(), seed: cfg.seed };
    Ok(Ctx { cfg, stamp, out: c.out.clone() })
}

fn cmd_simulate(ctx: &Ctx) -> Result<(), CliError> {
    let spec = ctx.cfg.sim_spec()?;
    let sim = simulate(&spec)?;
    let d = ctx.cfg.delimiter;
    let mut rows = Vec::new();
    for (t, lv) in sim.levels.iter().enumerate() {
        for (i, p) in lv.locs.points().enumerate() {
            rows.push(vec![num(p[0]), num(p[1]), num(lv.z[i]), (t + 1).to_string()]);
        }
    }
    write_table(&ctx.out.join("train.csv"), &ctx.stamp, d, &["x", "y", "value", "level"], rows)?;
    let top = spec.levels.len();
    let h = &sim.holdout;
    let rows = h.locs.points().enumerate().map(|(i, p)| vec![num(p[0]), num(p[1]), num(h.z[i]), top.to_string(), num(h.y[i])]);
    write_table(&ctx.out.join("holdout.csv"), &ctx.stamp, d, &["x", "y", "value", "level", "latent"], rows)?;
    #[derive(Serialize)]
    struct Truth<'a> {
        config_sha256: &'a str,
        seed: u64,
        spec: &'a rnnc::eval::SimSpec,
        boxes: &'a [rnnc::eval::HoldoutBox],
    }
    write_json(
        &ctx.out.join("truth.json"),
        &Truth { config_sha256: &ctx.stamp.config_hash, seed: ctx.stamp.seed, spec: &spec, boxes: &sim.boxes },
    )?;
    eprintln!("info: simulated {} levels, {} held out", top, h.z.len());
    Ok(())
}

fn load_data(ctx: &Ctx, path: &Path) -> Result<(io::Ingested, f64), CliError> {
    let m = &ctx.cfg.model;
    let rows = read_rows(path, ctx.cfg.delimiter, true, true)?;
    let x_scale = if m.equirectangular { io::projection_scale(&rows) } else { 1.0 };
    let ing = io::ingest(path, &rows, m.levels, x_scale, m.trend, m.scale)?;
    let dg = &ing.diagnosis;
    eprintln!("info: level sizes {:?}, shared with the level below {:?}: {}", dg.sizes, dg.shared, dg.verdict);
    Ok((ing, x_scale))
}

fn model_file(ctx: &Ctx, method: &str, x_scale: f64, diagnosis: Diagnosis, levels: Vec<FittedLevel>) -> ModelFile {
    ModelFile {
        config_sha256: ctx.stamp.config_hash.clone(),
        seed: ctx.stamp.seed,
        method: method.into(),
        x_scale,
        diagnosis,
        levels,
    }
}

fn cmd_fit_conjugate(ctx: &Ctx, data: &Path) -> Result<(), CliError> {
    let (ing, x_scale) = load_data(ctx, data)?;
    let fit = fit_all(&ing.datasets, &ctx.cfg.conjugate(2)?)?;
    let d = ctx.cfg.delimiter;
    let mut post = Vec::new();
    let mut cv = Vec::new();
    for lp in &fit.levels {
        let t = lp.level.to_string();
        let p = lp.beta.len();
        for (j, b) in lp.beta.iter().enumerate() {
            post.push(vec![t.clone(), format!("beta_{j}"), num(*b), num(lp.beta_cov[j * p + j].sqrt())]);
        }
        let q = lp.gamma.len();
        for (j, g) in lp.gamma.iter().enumerate() {
            post.push(vec![t.clone(), format!("gamma_{j}"), num(*g), num(lp.gamma_cov[j * q + j].sqrt())]);
        }
        let s2_sd = if lp.a_star > 2.0 { lp.sigma2 / (lp.a_star - 2.0).sqrt() } else { f64::NAN };
        post.push(vec![t.clone(), "sigma2".into(), num(lp.sigma2), num(s2_sd)]);
        post.push(vec![t.clone(), "kappa".into(), num(lp.kappa), String::new()]);
        post.push(vec![t.clone(), "tau2_rel".into(), num(lp.tau2_rel), String::new()]);
        post.push(vec![t.clone(), "tau2".into(), num(lp.tau2), String::new()]);
        post.push(vec![t.clone(), "a_star".into(), num(lp.a_star), String::new()]);
        post.push(vec![t.clone(), "b_star".into(), num(lp.b_star), String::new()]);
        for r in &lp.cv_table {
            cv.push(vec![t.clone(), num(r.kappa), num(r.tau2_rel), num(r.rmspe)]);
        }
    }
    write_table(&ctx.out.join("posterior.csv"), &ctx.stamp, d, &["level", "param", "mean", "sd"], post)?;
    write_table(&ctx.out.join("cv_table.csv"), &ctx.stamp, d, &["level", "kappa", "tau2_rel", "rmspe"], cv)?;
    let mut knots = Vec::new();
    for (t, f) in fit.fields.iter().enumerate() {
        for (i, p) in f.at.points().enumerate() {
            knots.push(vec![(t + 1).to_string(), num(p[0] / x_scale), num(p[1]), num(f.mean[i]), num(f.var[i])]);
        }
    }
    write_table(&ctx.out.join("knots.csv"), &ctx.stamp, d, &["level", "x", "y", "mean", "var"], knots)?;
    write_json(&ctx.out.join("model.json"), &model_file(ctx, "conjugate", x_scale, ing.diagnosis, fit.fitted))
}

fn cmd_fit_mcmc(ctx: &Ctx, data: &Path) -> Result<(), CliError> {
    let (ing, x_scale) = load_data(ctx, data)?;
    let priors = (1..=ctx.cfg.model.levels).map(|t| ctx.cfg.sampler_priors(t, 2)).collect::<Result<Vec<_>, _>>()?;
    let chain_cfg = ctx.cfg.chain();
    let out = run_chain(&ing.datasets, &priors, &chain_cfg)?;
    let d = ctx.cfg.delimiter;
    let mut summary = Vec::new();
    for lc in &out.levels {
        let t = lc.level.to_string();
        for s in lc.summaries() {
            summary.push(vec![t.clone(), s.name, num(s.mean), num(s.lo95), num(s.hi95)]);
        }
        summary.push(vec![t.clone(), "acceptance".into(), num(lc.acceptance), String::new(), String::new()]);
        let cols: Vec<&str> = lc.columns.iter().map(String::as_str).collect();
        let rows = lc.draws.iter().map(|r| r.iter().map(|v| num(*v)).collect());
        write_table(&ctx.out.join(format!("draws_level{}.csv", lc.level)), &ctx.stamp, d, &cols, rows)?;
    }
    write_table(&ctx.out.join("summary.csv"), &ctx.stamp, d, &["level", "param", "mean", "lo95", "hi95"], summary)?;
    let fitted = out.fitted_levels(&ing.datasets, chain_cfg.m)?;
    write_json(&ctx.out.join("model.json"), &model_file(ctx, "mcmc", x_scale, ing.diagnosis, fitted))
}

fn parse_grid(spec: &str) -> Result<Vec<[f64; 2]>, CliError> {
    let bad = || CliError::Config(format!("--grid-out expects xmin,xmax,dx,ymin,ymax,dy, got '{spec}'"));
    let v: Vec<f64> = spec.split(',').map(|s| s.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|_| bad())?;
    let [x0, x1, dx, y0, y1, dy] = v[..] else { return Err(bad()) };
    if !(dx > 0.0 && dy > 0.0 && x1 > x0 && y1 > y0) {
        return Err(bad());
    }
    let centres = |lo: f64, hi: f64, step: f64| -> Vec<f64> {
        let n = ((hi - lo) / step).round().max(1.0) as usize;
        (0..n).map(|i| rnnc::geometry::canonicalize(lo + (i as f64 + 0.5) * step)).collect()
    };
    let (xs, ys) = (centres(x0, x1, dx), centres(y0, y1, dy));
    Ok(ys.iter().flat_map(|&y| xs.iter().map(move |&x| [x, y])).collect())
}

fn cmd_predict(
    ctx: &Ctx,
    model: &Path,
    data: Option<&Path>,
    grid: Option<&str>,
    level: Option<usize>,
    latent: bool,
) -> Result<(), CliError> {
    let text = std::fs::read_to_string(model).map_err(|e| CliError::Input(format!("{}: {e}", model.display())))?;
    let mf: ModelFile = serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", model.display())))?;
    let upto = level.unwrap_or(mf.levels.len());
    if upto == 0 || upto > mf.levels.len() {
        return Err(CliError::Config(format!("--level {upto} outside 1..={}", mf.levels.len())));
    }
    let (pts, values): (Vec<[f64; 2]>, Vec<Option<f64>>) = match (data, grid) {
        (Some(p), _) => read_rows(p, ctx.cfg.delimiter, false, false)?.into_iter().map(|r| ([r.x, r.y], r.value)).unzip(),
        (None, Some(g)) => parse_grid(g)?.into_iter().map(|p| (p, None)).unzip(),
        (None, None) => return Err(CliError::Config("predict needs --data or --grid-out".into())),
    };
    let mut coords = Vec::with_capacity(2 * pts.len());
    for p in &pts {
        coords.extend([p[0] * mf.x_scale, p[1]]);
    }
    let targets = LocationSet::new(2, coords).map_err(|e| CliError::Input(e.to_string()))?;
    let preds = predict_many(&mf.levels, &targets, upto, !latent)?;
    let has_value = values.iter().all(Option::is_some) && !values.is_empty();
    let mut header = vec!["x", "y", "level", "mean", "sd", "lo95", "hi95"];
    if has_value {
        header.push("value");
    }
    let rows = pts.iter().zip(&preds).zip(&values).map(|((p, pr), v)| {
        let mut r = vec![num(p[0]), num(p[1]), upto.to_string(), num(pr.mean), num(pr.var.max(0.0).sqrt()), num(pr.lo95), num(pr.hi95)];
        if has_value {
            r.push(num(v.unwrap()));
        }
        r
    });
    write_table(&ctx.out.join("predictions.csv"), &ctx.stamp, ctx.cfg.delimiter, &header, rows)
}

fn cmd_evaluate(ctx: &Ctx, data: &Path) -> Result<(), CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(ctx.cfg.delimiter.byte())
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(data)
        .map_err(|e| CliError::Input(format!("{}: {e}", data.display())))?;
    #[derive(Deserialize)]
    struct Rec {
        value: f64,
        mean: f64,
        sd: f64,
        lo95: f64,
        hi95: f64,
    }
    let mut recs = Vec::new();
    for (k, r) in rdr.deserialize::<Rec>().enumerate() {
        let r = r.map_err(|e| CliError::Input(format!("{}: record {}: {e}", data.display(), k + 1)))?;
        recs.push(PredictionRecord { obs: r.value, mean: r.mean, sd: r.sd, lo95: r.lo95, hi95: r.hi95 });
    }
    let m = metrics(&recs)?;
    let rows = [("rmspe", m.rmspe), ("nsme", m.nsme), ("crps", m.crps), ("cvg95", m.cvg95), ("alci95", m.alci95)]
        .map(|(k, v)| vec![k.to_string(), num(v)]);
    write_table(&ctx.out.join("metrics.csv"), &ctx.stamp, ctx.cfg.delimiter, &["metric", "value"], rows)
}

fn run(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Simulate { common } => cmd_simulate(&setup(&common)?),
        Cmd::FitConjugate { common, data } => cmd_fit_conjugate(&setup(&common)?, &data),
        Cmd::FitMcmc { common, data } => cmd_fit_mcmc(&setup(&common)?, &data),
        Cmd::Predict { common, model, data, grid_out, level, latent } => {
            cmd_predict(&setup(&common)?, &model, data.as_deref(), grid_out.as_deref(), level, latent)
        }
        Cmd::Evaluate { common, data } => cmd_evaluate(&setup(&common)?, &data),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::from(e.exit())
        }
    }
}
