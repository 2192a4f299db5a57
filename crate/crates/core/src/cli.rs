//! Experiment configuration and orchestration behind the `mvlab` binary.
//!
//! An experiment is one JSON document ([`ExperimentConfig`]) plus a
//! subcommand name. Subcommands are [`Experiment`] trait objects looked up in
//! an [`ExperimentRegistry`]. Every run writes `<subcommand>-<seed>.csv` and
//! `<subcommand>-<seed>.json` into the output directory; the JSON embeds the
//! resolved config, the seed and [`ARTIFACT_VERSION`].

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path as FsPath, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::devlab::{
    exit_rate, exponential_equivalence_check, girsanov_is_estimate, mdp_decay_experiment, mdp_scale, validate_alpha,
    Control, EventSpec, SamplingSettings, Side, SkeletonPropagator,
};
use crate::engine::{simulate_particle_groups, solve_limit_ode, BrownianBundle, MeanMode, Path, TimeGrid};
use crate::error::{LabError, Result};
use crate::fluctlab::{clt_rate_fit, validate_ladder, CltSettings};
use crate::measure::EmpiricalMeasure;
use crate::model::{
    check_gradient, check_lderivative, check_lipschitz, growth_at_origin, sample_pairs, CoefficientModel, ModelRegistry,
    ModelSpec,
};

pub const ARTIFACT_VERSION: &str = "1";

/// Initial condition: a scalar is broadcast to every component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InitialCondition {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl InitialCondition {
    pub fn resolve(&self, dim: usize) -> Result<Vec<f64>> {
        let x0 = match self {
            InitialCondition::Scalar(v) => vec![*v; dim],
            InitialCondition::Vector(v) if v.len() == dim => v.clone(),
            InitialCondition::Vector(v) => {
                return Err(LabError::validation(format!(
                    "x0 has {} components but the model has dimension {dim}",
                    v.len()
                )))
            }
        };
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(LabError::validation("x0 must be finite"));
        }
        Ok(x0)
    }
}

/// Target path for `rate-fn`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetPath {
    /// CSV with header `time,g_0,..` and one row per grid node; relative
    /// paths are resolved against the config file's directory.
    Csv(String),
    /// `g(t) = slope * t`.
    Linear(Vec<f64>),
}

/// Control used to tilt the driving noise in `is-estimate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    /// The optimal exit control of the event.
    #[default]
    Optimal,
    /// No tilt: plain Monte Carlo.
    None,
}

fn default_horizon() -> f64 {
    1.0
}
fn default_steps() -> usize {
    1000
}
fn default_particles() -> usize {
    1024
}
fn default_replicas() -> usize {
    1024
}
fn default_p() -> f64 {
    2.0
}
fn default_bootstrap() -> usize {
    200
}
fn default_samples() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub x0: InitialCondition,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Particles per interacting system.
    #[serde(default = "default_particles")]
    pub particles: usize,
    /// Total replicas, split into systems of `particles`.
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub epsilon_ladder: Option<Vec<f64>>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default)]
    pub event: Option<EventSpec>,
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub mean_mode: MeanMode,
    #[serde(default = "default_bootstrap")]
    pub bootstrap_resamples: usize,
    #[serde(default)]
    pub target_path: Option<TargetPath>,
    /// Exit radius for `exit-rate`.
    #[serde(default)]
    pub radius: Option<f64>,
    #[serde(default)]
    pub side: Side,
    /// Gap threshold for `exp-equiv`.
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default)]
    pub shift: ShiftKind,
    /// Also write the terminal empirical measure in `simulate`.
    #[serde(default)]
    pub dump_measure: bool,
    /// Sampled pairs for `check-model`.
    #[serde(default = "default_samples")]
    pub check_samples: usize,
    /// Directory of the config file, for resolving relative inputs.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Syntax errors are [`LabError::Parse`]; well-formed JSON with missing,
    /// unknown or ill-typed fields is [`LabError::Validation`].
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| match e.classify() {
            serde_json::error::Category::Data => LabError::validation(e.to_string()),
            _ => LabError::Parse(e.to_string()),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &FsPath) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg = Self::from_json(&text)?;
        cfg.base_dir = path.parent().map(FsPath::to_path_buf);
        Ok(cfg)
    }

    /// Checks that hold for every subcommand.
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.particles == 0 || self.replicas == 0 {
            return Err(LabError::validation("steps, particles and replicas must all be >= 1"));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(LabError::validation(format!("horizon must be positive, got {}", self.horizon)));
        }
        if let Some(alpha) = self.alpha {
            validate_alpha(alpha)?;
        }
        if let Some(ladder) = &self.epsilon_ladder {
            validate_ladder(ladder, 1)?;
        }
        if let Some(eps) = self.epsilon {
            if !(eps >= 0.0) || !eps.is_finite() {
                return Err(LabError::validation(format!("epsilon must be >= 0, got {eps}")));
            }
        }
        if !(self.p >= 2.0) || !self.p.is_finite() {
            return Err(LabError::validation(format!("moment order p must be >= 2, got {}", self.p)));
        }
        if let Some(ev) = &self.event {
            if !(ev.threshold >= 0.0) || !ev.threshold.is_finite() {
                return Err(LabError::validation("event threshold must be >= 0"));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.horizon, self.steps).map_err(|e| LabError::validation(e.to_string()))
    }

    fn require_epsilon(&self) -> Result<f64> {
        self.epsilon.ok_or_else(|| LabError::validation("this subcommand needs `epsilon`"))
    }

    fn require_ladder(&self, min_len: usize) -> Result<&[f64]> {
        let ladder = self
            .epsilon_ladder
            .as_deref()
            .ok_or_else(|| LabError::validation("this subcommand needs `epsilon_ladder`"))?;
        validate_ladder(ladder, min_len)?;
        Ok(ladder)
    }

    fn require_alpha(&self) -> Result<f64> {
        self.alpha.ok_or_else(|| LabError::validation("this subcommand needs `alpha` in (0, 1/2)"))
    }

    fn require_event(&self) -> Result<EventSpec> {
        self.event.ok_or_else(|| LabError::validation("this subcommand needs an `event`"))
    }

    fn require_positive(value: Option<f64>, name: &str) -> Result<f64> {
        match value {
            Some(v) if v > 0.0 && v.is_finite() => Ok(v),
            Some(v) => Err(LabError::validation(format!("`{name}` must be positive, got {v}"))),
            None => Err(LabError::validation(format!("this subcommand needs `{name}`"))),
        }
    }
}

/// Output of one experiment before it is written to disk.
#[derive(Debug, Clone, Default)]
pub struct Artifacts {
    pub csv: Vec<u8>,
    pub summary: Value,
    /// Additional CSV files, keyed by a suffix of the file stem.
    pub extra: BTreeMap<String, Vec<u8>>,
}

/// Context handed to an experiment: the built model and its resolved start.
pub struct RunContext<'a> {
    pub config: &'a ExperimentConfig,
    pub model: &'a dyn CoefficientModel,
    pub x0: Vec<f64>,
    pub grid: TimeGrid,
}

pub trait Experiment: Send + Sync {
    fn name(&self) -> &'static str;
    fn run(&self, ctx: &RunContext<'_>) -> Result<Artifacts>;
}

pub struct ExperimentRegistry {
    experiments: BTreeMap<&'static str, Box<dyn Experiment>>,
}

impl ExperimentRegistry {
    pub fn empty() -> Self {
        Self {
            experiments: BTreeMap::new(),
        }
    }

    pub fn builtin() -> Self {
        let mut reg = Self::empty();
        reg.register(Box::new(Simulate));
        reg.register(Box::new(CltRate));
        reg.register(Box::new(RateFn));
        reg.register(Box::new(ExitRate));
        reg.register(Box::new(IsEstimate));
        reg.register(Box::new(MdpDecay));
        reg.register(Box::new(ExpEquiv));
        reg.register(Box::new(CheckModel));
        reg
    }

    pub fn register(&mut self, experiment: Box<dyn Experiment>) {
        self.experiments.insert(experiment.name(), experiment);
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.experiments.keys().copied()
    }

    pub fn get(&self, name: &str) -> Result<&dyn Experiment> {
        self.experiments.get(name).map(|e| e.as_ref()).ok_or_else(|| {
            LabError::validation(format!(
                "unknown subcommand `{name}` (known: {})",
                self.names().collect::<Vec<_>>().join(", ")
            ))
        })
    }
}

impl Default for ExperimentRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

/// Runs `subcommand` and writes its artifacts into `out_dir` (falling back
/// to the config's `output_dir`, then the working directory). Returns the
/// written paths.
pub fn run(subcommand: &str, config: &ExperimentConfig, out_dir: Option<&FsPath>) -> Result<Vec<PathBuf>> {
    let registry = ExperimentRegistry::builtin();
    let experiment = registry.get(subcommand)?;
    config.validate()?;
    let model = ModelRegistry::builtin().build(&config.model)?;
    let ctx = RunContext {
        config,
        model: model.as_ref(),
        x0: config.x0.resolve(model.dim())?,
        grid: config.grid()?,
    };
    let artifacts = experiment.run(&ctx)?;

    let dir = out_dir
        .map(FsPath::to_path_buf)
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)?;
    let stem = format!("{subcommand}-{}", config.seed);
    let mut written = Vec::new();

    let csv_path = dir.join(format!("{stem}.csv"));
    fs::write(&csv_path, &artifacts.csv)?;
    written.push(csv_path);
    for (suffix, bytes) in &artifacts.extra {
        let p = dir.join(format!("{stem}-{suffix}.csv"));
        fs::write(&p, bytes)?;
        written.push(p);
    }
    let summary = json!({
        "artifact_version": ARTIFACT_VERSION,
        "subcommand": subcommand,
        "seed": config.seed,
        "config": config,
        "model": { "kind": model.kind(), "params": model.params() },
        "result": artifacts.summary,
    });
    let json_path = dir.join(format!("{stem}.json"));
    let mut text = serde_json::to_string_pretty(&summary).map_err(|e| LabError::Parse(e.to_string()))?;
    text.push('\n');
    fs::write(&json_path, text)?;
    written.push(json_path);
    Ok(written)
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::Writer::from_writer(Vec::new())
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| LabError::Io(e.into_error()))
}

fn csv_err(e: csv::Error) -> LabError {
    LabError::Io(std::io::Error::other(e))
}

/// Shortest round-trip text, in exponent form for very small or large values.
fn num(x: f64) -> String {
    let a = x.abs();
    if a != 0.0 && a.is_finite() && !(1e-5..1e16).contains(&a) {
        format!("{x:e}")
    } else {
        x.to_string()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn to_json<T: Serialize>(value: &T) -> Value {
    serde_json::to_value(value).expect("plain data serializes")
}

// ---------------------------------------------------------------------------
// Subcommands

struct Simulate;

impl Experiment for Simulate {
    fn name(&self) -> &'static str {
        "simulate"
    }

    fn run(&self, ctx: &RunContext<'_>) -> Result<Artifacts> {
        let cfg = ctx.config;
        let eps = cfg.require_epsilon()?;
        let noise = BrownianBundle::new(cfg.seed, cfg.replicas, ctx.model.dim(), ctx.grid)?;
        let ens = simulate_particle_groups(ctx.model, &ctx.x0, eps, &noise, cfg.particles)?;
        let mut csv = Vec::new();
        ens.write_csv(&mut csv)?;
        let mut extra = BTreeMap::new();
        let d = ctx.model.dim();
        let terminal: Vec<f64> = (0..ens.replicas()).flat_map(|j| ens.at(j, ctx.grid.steps()).to_vec()).collect();
        if cfg.dump_measure {
            let mu = EmpiricalMeasure::uniform(d, terminal.clone())?;
            let mut buf = Vec::new();
            mu.write_csv(&mut buf)?;
            extra.insert("measure".to_string(), buf);
        }
        let mu = EmpiricalMeasure::uniform(d, terminal)?;
        Ok(Artifacts {
            csv,
            summary: json!({
                "epsilon": eps,
                "replicas": ens.replicas(),
                "terminal_mean": mu.mean(),
                "terminal_second_moment": mu.second_moment(),
            }),
            extra,
        })
    }
}

struct CltRate;

impl Experiment for CltRate {
    fn name(&self) -> &'static str {
        "clt-rate"
    }

    fn run(&self, ctx: &RunContext<'_>) -> Result<Artifacts> {
        let cfg = ctx.config;
        let ladder = cfg.require_ladder(3)?;
        let settings = CltSettings {
            grid: ctx.grid,
            replicas: cfg.replicas,
            particles: cfg.particles,
            seed: cfg.seed,
            mean_mode: cfg.mean_mode,
            bootstrap_resamples: cfg.bootstrap_resamples,
        };
        let result = clt_rate_fit(ctx.model, &ctx.x0, ladder, cfg.p, &settings)?;
        let mut w = csv_writer();
        w.write_record(["epsilon", "p", "estimate", "standard_error", "scaled_moment"])
            .map_err(csv_err)?;
        for (i, eps) in result.epsilon_ladder.iter().enumerate() {
            w.write_record([
                num(*eps),
                num(result.p),
                num(result.errors[i]),
                opt(result.standard_errors[i]),
                num(result.scaled_moments[i]),
            ])
            .map_err(csv_err)?;
        }
        Ok(Artifacts {
            csv: finish(w)?,
            summary: json!({
                "fitted_slope": result.fitted_slope,
                "slope_ci": result.slope_ci,
                "theory_slope": result.p / 2.0,
                "excluded": result.excluded,
                "law_stability": result.law_stability,
                "flags": result.flags,
            }),
            extra: BTreeMap::new(),
        })
    }
}

fn read_target(cfg: &ExperimentConfig, grid: TimeGrid, dim: usize) -> Result<Path> {
    let spec = cfg
        .target_path
        .as_ref()
        .ok_or_else(|| LabError::validation("`rate-fn` needs `target_path`"))?;
    match spec {
        TargetPath::Linear(slope) => {
            if slope.len() != dim {
                return Err(LabError::validation("target slope has the wrong dimension"));
            }
            Path::from_fn(grid, dim, |t| slope.iter().map(|s| s * t).collect())
        }
        TargetPath::Csv(file) => {
            let path = match &cfg.base_dir {
                Some(base) if FsPath::new(file).is_relative() => base.join(file),
                _ => PathBuf::from(file),
            };
            let mut reader = csv::Reader::from_path(&path).map_err(|e| LabError::Parse(format!("{}: {e}", path.display())))?;
            let mut values = Vec::with_capacity((grid.steps() + 1) * dim);
            let mut rows = 0;
            for (k, record) in reader.records().enumerate() {
                let record = record.map_err(|e| LabError::Parse(e.to_string()))?;
                if record.len() != dim + 1 {
                    return Err(LabError::Parse(format!("target row {k} has {} columns, expected {}", record.len(), dim + 1)));
                }
                let nums: Vec<f64> = record
                    .iter()
                    .map(|f| f.trim().parse::<f64>().map_err(|e| LabError::Parse(format!("target row {k}: {e}"))))
                    .collect::<Result<_>>()?;
                if k > grid.steps() || (nums[0] - grid.time(k)).abs() > 1e-9 * grid.horizon().max(1.0) {
                    return Err(LabError::validation(format!("target row {k} is not on the configured grid")));
                }
                values.extend_from_slice(&nums[1..]);
                rows += 1;
            }
            if rows != grid.steps() + 1 {
                return Err(LabError::validation(format!(
                    "target has {rows} rows, the grid has {} nodes",
                    grid.steps() + 1
                )));
            }
            Path::new(grid, dim, values)
        }
    }
}

fn control_csv(control: &Control) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    control.write_csv(&mut buf)?;
    Ok(buf)
}

struct RateFn;

impl Experiment for RateFn {
    fn name(&self) -> &'static str {
        "rate-fn"
    }

    fn run(&self, ctx: &RunContext<'_>) -> Result<Artifacts> {
        let target = read_target(ctx.config, ctx.grid, ctx.model.dim())?;
        let limit = solve_limit_ode(ctx.model, &ctx.x0, &ctx.grid)?;
        let result = SkeletonPropagator::new(ctx.model, &limit)?.rate_function(&target, None)?;
        let control = result
            .optimal_control
            .clone()
            .unwrap_or_else(|| Control::zero(ctx.grid, ctx.model.dim()));
        Ok(Artifacts {
            csv: control_csv(&control)?,
            summary: json!({
                "value": if result.attainable { Some(result.value) } else { None },
                "attainable": result.attainable,
                "residual": result.residual,
                "tolerance": result.tolerance,
            }),
            extra: BTreeMap::new(),
        })
    }
}

struct ExitRate;

impl Experiment for ExitRate {
    fn name(&self) -> &'static str {
        "exit-rate"
    }

    fn run(&self, ctx: &RunContext<'_>) -> Result<Artifacts> {
        let radius = ExperimentConfig::require_positive(ctx.config.radius, "radius")?;
        let limit = solve_limit_ode(ctx.model, &ctx.x0, &ctx.grid)?;
        let r = exit_rate(ctx.model, &limit, radius, ctx.config.side)?;
        let control = r
            .optimal_control
            .clone()
            .unwrap_or_else(|| Control::zero(ctx.grid, ctx.model.dim()));
        Ok(Artifacts {
            csv: control_csv(&control)?,
            summary: json!({
                "value": if r.value.is_finite() { Some(r.value) } else { None },
                "controllable": r.value.is_finite(),
                "optimal_time": r.optimal_time,
                "optimal_step": r.optimal_step,
                "target": r.target,
                "radius": radius,
                "side": ctx.config.side,
            }),
            extra: BTreeMap::new(),
        })
    }
}

struct IsEstimate;

impl Experiment for IsEstimate {
    fn name(&self) -> &'static str {
        "is-estimate"
    }

    fn run(&self, ctx: &RunContext<'_>) -> Result<Artifacts> {
        let cfg = ctx.config;
        let eps = cfg.require_epsilon()?;
        if !(eps > 0.0) {
            return Err(LabError::validation("`is-estimate` needs epsilon > 0"));
        }
        let lambda = mdp_scale(eps, cfg.require_alpha()?)?;
        let event = cfg.require_event()?;
        let limit = solve_limit_ode(ctx.model, &ctx.x0, &ctx.grid)?;
        let shift = match cfg.shift {
            ShiftKind::Optimal if event.threshold > 0.0 => exit_rate(ctx.model, &limit, event.threshold, event.side)?
                .optimal_control
                .unwrap_or_else(|| Control::zero(ctx.grid, ctx.model.dim())),
            _ => Control::zero(ctx.grid, ctx.model.dim()),
        };
        let noise = BrownianBundle::new(cfg.seed, cfg.replicas, ctx.model.dim(), ctx.grid)?;
        let est = girsanov_is_estimate(ctx.model, &ctx.x0, eps, lambda, &event, &shift, &noise)?;
        let mut w = csv_writer();
        w.write_record(["epsilon", "lambda", "probability", "standard_error", "relative_error", "mean_weight"])
            .map_err(csv_err)?;
        w.write_record([
            num(eps),
            num(lambda),
            num(est.probability),
            num(est.standard_error),
            num(est.relative_error),
            num(est.mean_weight),
        ])
        .map_err(csv_err)?;
        Ok(Artifacts {
            csv: finish(w)?,
            summary: json!({ "estimate": to_json(&est), "lambda": lambda }),
            extra: BTreeMap::new(),
        })
    }
}

struct MdpDecay;

impl Experiment for MdpDecay {
    fn name(&self) -> &'static str {
        "mdp-decay"
    }

    fn run(&self, ctx: &RunContext<'_>) -> Result<Artifacts> {
        let cfg = ctx.config;
        let settings = SamplingSettings {
            grid: ctx.grid,
            replicas: cfg.replicas,
            particles: cfg.particles,
            seed: cfg.seed,
        };
        let result = mdp_decay_experiment(
            ctx.model,
            &ctx.x0,
            cfg.require_alpha()?,
            cfg.require_ladder(1)?,
            &cfg.require_event()?,
            &settings,
        )?;
        let mut w = csv_writer();
        w.write_record([
            "epsilon",
            "lambda",
            "probability",
            "standard_error",
            "normalized_log_prob",
            "band_low",
            "band_high",
            "predicted",
            "lower_bound_only",
        ])
        .map_err(csv_err)?;
        for r in &result.rows {
            w.write_record([
                num(r.epsilon),
                num(r.lambda),
                num(r.probability),
                num(r.standard_error),
                opt(r.normalized_log_prob),
                opt(r.band.0),
                opt(r.band.1),
                num(result.predicted),
                r.lower_bound_only.to_string(),
            ])
            .map_err(csv_err)?;
        }
        Ok(Artifacts {
            csv: finish(w)?,
            summary: to_json(&result),
            extra: BTreeMap::new(),
        })
    }
}

struct ExpEquiv;

impl Experiment for ExpEquiv {
    fn name(&self) -> &'static str {
        "exp-equiv"
    }

    fn run(&self, ctx: &RunContext<'_>) -> Result<Artifacts> {
        let cfg = ctx.config;
        let settings = SamplingSettings {
            grid: ctx.grid,
            replicas: cfg.replicas,
            particles: cfg.particles,
            seed: cfg.seed,
        };
        let rows = exponential_equivalence_check(
            ctx.model,
            &ctx.x0,
            cfg.require_alpha()?,
            cfg.require_ladder(1)?,
            ExperimentConfig::require_positive(cfg.delta, "delta")?,
            &settings,
        )?;
        let mut w = csv_writer();
        w.write_record(["epsilon", "lambda", "probability", "mean_sup_gap", "normalized_log_prob", "eps_log_prob"])
            .map_err(csv_err)?;
        for r in &rows {
            w.write_record([
                num(r.epsilon),
                num(r.lambda),
                num(r.probability),
                num(r.mean_sup_gap),
                opt(r.normalized_log_prob),
                opt(r.eps_log_prob),
            ])
            .map_err(csv_err)?;
        }
        let nonincreasing = rows.windows(2).all(|w| w[1].probability <= w[0].probability);
        Ok(Artifacts {
            csv: finish(w)?,
            summary: json!({ "rows": to_json(&rows), "nonincreasing": nonincreasing }),
            extra: BTreeMap::new(),
        })
    }
}

struct CheckModel;

impl Experiment for CheckModel {
    fn name(&self) -> &'static str {
        "check-model"
    }

    fn run(&self, ctx: &RunContext<'_>) -> Result<Artifacts> {
        let cfg = ctx.config;
        let model = ctx.model;
        let d = model.dim();
        let t_grid: Vec<f64> = (0..=4).map(|i| ctx.grid.horizon() * i as f64 / 4.0).collect();
        let pairs = sample_pairs(d, cfg.check_samples, 8, 3.0, cfg.seed);
        let lip = check_lipschitz(model, &pairs, &t_grid)?;
        let growth: Vec<(f64, f64)> = t_grid.iter().map(|&t| growth_at_origin(model, t)).collect();
        let grad_err = pairs
            .iter()
            .take(100)
            .map(|p| check_gradient(model, 0.0, &p.x, &p.mu, 1e-5))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        let mu = &pairs[0].mu;
        let field: Vec<f64> = mu.flat_atoms().iter().map(|a| a.sin()).collect();
        let lderiv = match check_lderivative(model, 0.0, &pairs[0].x, mu, &field, &[1e-2, 5e-3, 2.5e-3, 1.25e-3]) {
            Ok(r) => Some(r),
            Err(LabError::Unsupported(_)) => None,
            Err(e) => return Err(e),
        };

        let mut w = csv_writer();
        w.write_record(["check", "value", "bound", "pass"]).map_err(csv_err)?;
        w.write_record([
            "lipschitz_max_ratio".to_string(),
            num(lip.max_ratio),
            lip.witness.as_ref().map(|x| num(x.bound)).unwrap_or_default(),
            (!lip.violation).to_string(),
        ])
        .map_err(csv_err)?;
        for (t, (lhs, k)) in t_grid.iter().zip(&growth) {
            w.write_record([format!("growth_at_origin_t={t}"), num(*lhs), num(*k), (lhs <= k).to_string()])
                .map_err(csv_err)?;
        }
        w.write_record(["gradient_fd_error".to_string(), num(grad_err), "1e-6".into(), (grad_err <= 1e-6).to_string()])
            .map_err(csv_err)?;
        if let Some(r) = &lderiv {
            w.write_record([
                "lderivative_extrapolated_error".to_string(),
                num(r.extrapolated_error),
                "1e-6".into(),
                (r.extrapolated_error <= 1e-6).to_string(),
            ])
            .map_err(csv_err)?;
        }
        Ok(Artifacts {
            csv: finish(w)?,
            summary: json!({
                "lipschitz": to_json(&lip),
                "growth_at_origin": growth,
                "gradient_fd_error": grad_err,
                "lderivative": lderiv.as_ref().map(to_json),
            }),
            extra: BTreeMap::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> Value {
        json!({
            "model": { "kind": "linear_mean_field", "a": 0.5, "c": 0.5, "s": 1.0 },
            "x0": 1.0,
            "steps": 20,
            "replicas": 16,
            "particles": 8,
            "seed": 3
        })
    }

    fn with(extra: Value) -> ExperimentConfig {
        let mut v = base();
        for (k, x) in extra.as_object().unwrap() {
            v[k] = x.clone();
        }
        ExperimentConfig::from_json(&v.to_string()).unwrap()
    }

    #[test]
    fn defaults_and_broadcast() {
        let cfg = with(json!({}));
        assert_eq!(cfg.horizon, 1.0);
        assert_eq!(cfg.p, 2.0);
        assert_eq!(cfg.mean_mode, MeanMode::Analytic);
        assert_eq!(InitialCondition::Scalar(2.0).resolve(3).unwrap(), vec![2.0; 3]);
        assert!(InitialCondition::Vector(vec![1.0]).resolve(2).is_err());
    }

    #[test]
    fn error_categories() {
        assert!(matches!(ExperimentConfig::from_json("{ not json"), Err(LabError::Parse(_))));
        let mut v = base();
        v.as_object_mut().unwrap().remove("seed");
        assert!(matches!(ExperimentConfig::from_json(&v.to_string()), Err(LabError::Validation(_))));
        let mut v = base();
        v["alpha"] = json!(0.7);
        match ExperimentConfig::from_json(&v.to_string()) {
            Err(e @ LabError::Validation(_)) => {
                assert_eq!(e.exit_code(), 3);
                assert!(e.to_string().contains("(0, 1/2)"));
            }
            other => panic!("{other:?}"),
        }
        for (k, x) in [("steps", json!(0)), ("horizon", json!(-1.0)), ("epsilon_ladder", json!([0.1, 0.2]))] {
            let mut v = base();
            v[k] = x;
            assert!(matches!(ExperimentConfig::from_json(&v.to_string()), Err(LabError::Validation(_))));
        }
        let mut v = base();
        v["bogus"] = json!(1);
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn registry_lists_every_subcommand() {
        let names: Vec<_> = ExperimentRegistry::builtin().names().collect();
        for n in ["simulate", "clt-rate", "rate-fn", "exit-rate", "is-estimate", "mdp-decay", "exp-equiv", "check-model"] {
            assert!(names.contains(&n), "{n}");
        }
        assert!(ExperimentRegistry::builtin().get("nope").is_err());
    }

    #[test]
    fn rate_fn_reads_csv_targets() {
        let dir = tempfile::tempdir().unwrap();
        let mut text = String::from("time,g_0\n");
        for k in 0..=20 {
            let t = k as f64 / 20.0;
            text.push_str(&format!("{t},{t}\n"));
        }
        fs::write(dir.path().join("g.csv"), text).unwrap();
        let cfg_path = dir.path().join("cfg.json");
        let mut v = base();
        v["model"] = json!({ "kind": "linear_mean_field", "a": 0.0, "c": 1.0, "s": 1.0 });
        v["target_path"] = json!({ "csv": "g.csv" });
        fs::write(&cfg_path, v.to_string()).unwrap();
        let cfg = ExperimentConfig::load(&cfg_path).unwrap();
        let out = dir.path().join("out");
        run("rate-fn", &cfg, Some(&out)).unwrap();
        let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("rate-fn-3.json")).unwrap()).unwrap();
        assert!((summary["result"]["value"].as_f64().unwrap() - 0.5).abs() < 1e-8);
        assert_eq!(summary["artifact_version"], ARTIFACT_VERSION);
        assert_eq!(summary["config"]["seed"], 3);
    }
}
