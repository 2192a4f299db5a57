//! Moderate deviations: skeleton equation, rate function, exit rates and
//! Girsanov importance sampling.
//!
//! The skeleton `dY = (grad b(X0) Y + sigma(X0) hdot) dt`, `Y_0 = 0`, is
//! discretised with piecewise-constant coefficients and controls on each grid
//! cell and integrated exactly on each cell:
//!
//! ```text
//! Y_{k+1} = Phi_k Y_k + Gamma_k hdot_k,
//! Phi_k = exp(A_k dt),  Gamma_k = (int_0^dt exp(A_k s) ds) Sigma_k.
//! ```
//!
//! Everything downstream (rate function, exit rates, bounds) works with this
//! one-step map, so the least-squares inversion in [`rate_function`] recovers
//! controls exactly up to rounding.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{
    deviation_processes, solve_limit_ode, BrownianBundle, DecoupledStepper, FrozenCoefficients, Path,
    TimeGrid,
};
use crate::error::{LabError, Result};
use crate::fluctlab::validate_ladder;
use crate::linalg::{exp_and_integral, norm, operator_norm, pseudo_inverse};
use crate::model::CoefficientModel;
use crate::stats::mean_and_se;

/// Relative attainability tolerance: `g` is reachable when the skeleton
/// driven by the least-squares control stays within
/// `ATTAINABILITY_TOL * (1 + |g|_inf)` of it.
pub const ATTAINABILITY_TOL: f64 = 1e-6;

// ---------------------------------------------------------------------------
// Controls

/// Piecewise-constant `hdot` on the cells of a grid; `h(0) = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Control {
    grid: TimeGrid,
    dim: usize,
    hdot: Vec<f64>,
}

impl Control {
    /// `hdot` holds `steps * dim` entries, cell-major.
    pub fn new(grid: TimeGrid, dim: usize, hdot: Vec<f64>) -> Result<Self> {
        if dim == 0 || hdot.len() != grid.steps() * dim {
            return Err(LabError::contract(format!(
                "control of {} values does not fit {} cells of dimension {dim}",
                hdot.len(),
                grid.steps()
            )));
        }
        if hdot.iter().any(|v| !v.is_finite()) {
            return Err(LabError::contract("control values must be finite"));
        }
        Ok(Self { grid, dim, hdot })
    }

    pub fn zero(grid: TimeGrid, dim: usize) -> Self {
        Self {
            grid,
            dim,
            hdot: vec![0.0; grid.steps() * dim],
        }
    }

    pub fn constant(grid: TimeGrid, value: &[f64]) -> Self {
        Self {
            grid,
            dim: value.len(),
            hdot: value.iter().copied().cycle().take(grid.steps() * value.len()).collect(),
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rate(&self, k: usize) -> &[f64] {
        &self.hdot[k * self.dim..(k + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.hdot
    }

    /// `1/2 int |hdot|^2 dt`, exact for piecewise constants.
    pub fn energy(&self) -> f64 {
        0.5 * self.grid.dt() * self.hdot.iter().map(|v| v * v).sum::<f64>()
    }

    /// `h(t_k) = int_0^{t_k} hdot`.
    pub fn path(&self) -> Path {
        let d = self.dim;
        let dt = self.grid.dt();
        let mut values = vec![0.0; (self.grid.steps() + 1) * d];
        for k in 0..self.grid.steps() {
            for i in 0..d {
                values[(k + 1) * d + i] = values[k * d + i] + dt * self.hdot[k * d + i];
            }
        }
        Path::new(self.grid, d, values).expect("sized from the grid")
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            hdot: self.hdot.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }

    /// `a * self + b * other`
    pub fn combine(&self, a: f64, other: &Control, b: f64) -> Result<Self> {
        if self.grid != other.grid || self.dim != other.dim {
            return Err(LabError::contract("controls live on different grids"));
        }
        Ok(Self {
            hdot: self.hdot.iter().zip(&other.hdot).map(|(x, y)| a * x + b * y).collect(),
            ..self.clone()
        })
    }

    /// `|hdot_1 - hdot_2|_{L^2}`
    pub fn l2_distance(&self, other: &Control) -> f64 {
        let sq: f64 = self.hdot.iter().zip(&other.hdot).map(|(x, y)| (x - y) * (x - y)).sum();
        (self.grid.dt() * sq).sqrt()
    }

    /// Header `step,time,hdot_0..`, one row per cell labelled by its left node.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = std::io::BufWriter::new(out);
        let mut header = String::from("step,time");
        for i in 0..self.dim {
            header.push_str(&format!(",hdot_{i}"));
        }
        writeln!(w, "{header}")?;
        for k in 0..self.grid.steps() {
            write!(w, "{k},{}", self.grid.time(k))?;
            for v in self.rate(k) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Skeleton

/// Cell propagators of the skeleton equation along a fixed limit path.
#[derive(Debug, Clone)]
pub struct SkeletonPropagator {
    grid: TimeGrid,
    dim: usize,
    phi: Vec<DMatrix<f64>>,
    gamma: Vec<DMatrix<f64>>,
    gamma_pinv: Vec<DMatrix<f64>>,
    /// `sum_k K(t_k) dt`
    lipschitz_integral: f64,
    /// `sum_k |Sigma_k|^2 dt`
    sigma_sq_integral: f64,
}

impl SkeletonPropagator {
    pub fn new(model: &dyn CoefficientModel, limit_path: &Path) -> Result<Self> {
        let coeffs = FrozenCoefficients::along(model, limit_path, false)?;
        let grid = *limit_path.grid();
        let dt = grid.dt();
        let mut phi = Vec::with_capacity(grid.steps());
        let mut gamma = Vec::with_capacity(grid.steps());
        let mut gamma_pinv = Vec::with_capacity(grid.steps());
        for (a, s) in coeffs.grad.iter().zip(&coeffs.sigma) {
            let (p, integral) = exp_and_integral(a, dt);
            let g = integral * s;
            gamma_pinv.push(pseudo_inverse(&g));
            phi.push(p);
            gamma.push(g);
        }
        let lipschitz_integral = (0..grid.steps()).map(|k| model.lipschitz_bound(grid.time(k)) * dt).sum();
        let sigma_sq_integral = coeffs.sigma.iter().map(|s| operator_norm(s).powi(2) * dt).sum();
        Ok(Self {
            grid,
            dim: model.dim(),
            phi,
            gamma,
            gamma_pinv,
            lipschitz_integral,
            sigma_sq_integral,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// `exp(int K) * (int |Sigma|^2)^(1/2)`: bounds `sup_t |Y^h_t|` by this
    /// times `|hdot|_{L^2}`.
    pub fn gronwall_constant(&self) -> f64 {
        self.lipschitz_integral.exp() * self.sigma_sq_integral.sqrt()
    }

    fn check_control(&self, control: &Control) -> Result<()> {
        if *control.grid() != self.grid || control.dim() != self.dim {
            return Err(LabError::contract("control and limit path live on different grids"));
        }
        Ok(())
    }

    /// `Y^h` on the grid.
    pub fn solve(&self, control: &Control) -> Result<Path> {
        self.check_control(control)?;
        let d = self.dim;
        let mut values = vec![0.0; (self.grid.steps() + 1) * d];
        let mut y = DVector::zeros(d);
        for k in 0..self.grid.steps() {
            let u = DVector::from_column_slice(control.rate(k));
            y = &self.phi[k] * &y + &self.gamma[k] * u;
            values[(k + 1) * d..(k + 2) * d].copy_from_slice(y.as_slice());
        }
        Path::new(self.grid, d, values)
    }

    /// Least-norm control reproducing `g` cell by cell, with the
    /// attainability check.
    pub fn rate_function(&self, target: &Path, tolerance: Option<f64>) -> Result<RateFunctionResult> {
        if *target.grid() != self.grid || target.dim() != self.dim {
            return Err(LabError::contract("target path lives on a different grid"));
        }
        if target.at(0).iter().any(|v| *v != 0.0) {
            return Err(LabError::contract("target path must start at 0"));
        }
        let d = self.dim;
        let mut hdot = Vec::with_capacity(self.grid.steps() * d);
        for k in 0..self.grid.steps() {
            let gk = DVector::from_column_slice(target.at(k));
            let gk1 = DVector::from_column_slice(target.at(k + 1));
            let rhs = gk1 - &self.phi[k] * gk;
            hdot.extend((&self.gamma_pinv[k] * rhs).iter());
        }
        let control = Control::new(self.grid, d, hdot)?;
        let reached = self.solve(&control)?;
        let residual = reached
            .values()
            .chunks_exact(d)
            .zip(target.values().chunks_exact(d))
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        let tolerance = tolerance.unwrap_or(ATTAINABILITY_TOL * (1.0 + target.sup_norm()));
        let attainable = residual <= tolerance;
        Ok(RateFunctionResult {
            value: if attainable { control.energy() } else { f64::INFINITY },
            attainable,
            optimal_control: attainable.then_some(control),
            residual,
            tolerance,
        })
    }

    /// Discrete controllability Gramians `W_m`, `m = 1..=n`, with
    /// `W_{m+1} = Phi_m W_m Phi_m^T + Gamma_m Gamma_m^T / dt`.
    fn gramians(&self) -> Vec<DMatrix<f64>> {
        let dt = self.grid.dt();
        let mut w = DMatrix::zeros(self.dim, self.dim);
        let mut out = Vec::with_capacity(self.grid.steps());
        for k in 0..self.grid.steps() {
            w = &self.phi[k] * &w * self.phi[k].transpose() + &self.gamma[k] * self.gamma[k].transpose() / dt;
            out.push(w.clone());
        }
        out
    }

    /// Minimum-energy control steering `Y` from 0 to `y = W_m nu` at step
    /// `m`, then switched off: `hdot_k = M_k^T nu / dt` with
    /// `M_k = Phi_{m-1} .. Phi_{k+1} Gamma_k`.
    fn steering_control(&self, m: usize, nu: &DVector<f64>) -> Control {
        let d = self.dim;
        let dt = self.grid.dt();
        let mut hdot = vec![0.0; self.grid.steps() * d];
        let mut psi = DMatrix::identity(d, d);
        for k in (0..m).rev() {
            let mk = &psi * &self.gamma[k];
            let u = mk.transpose() * nu / dt;
            hdot[k * d..(k + 1) * d].copy_from_slice(u.as_slice());
            psi *= &self.phi[k];
        }
        Control {
            grid: self.grid,
            dim: d,
            hdot,
        }
    }
}

/// `Y^h` for the skeleton along `limit_path`.
pub fn solve_skeleton(model: &dyn CoefficientModel, limit_path: &Path, control: &Control) -> Result<Path> {
    SkeletonPropagator::new(model, limit_path)?.solve(control)
}

#[derive(Debug, Clone)]
pub struct RateFunctionResult {
    /// Minimal control energy, `+inf` when `g` is not reachable.
    pub value: f64,
    pub attainable: bool,
    pub optimal_control: Option<Control>,
    /// `sup_k |Y^{h*}_k - g_k|`
    pub residual: f64,
    pub tolerance: f64,
}

/// `I(g)` for a grid path `g` with `g(0) = 0`.
pub fn rate_function(model: &dyn CoefficientModel, limit_path: &Path, target: &Path) -> Result<RateFunctionResult> {
    SkeletonPropagator::new(model, limit_path)?.rate_function(target, None)
}

// ---------------------------------------------------------------------------
// Exit rates

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    /// Exit through `{y_0 >= R}`.
    #[default]
    OneSided,
    /// Exit through `{|y| >= R}`.
    TwoSided,
}

#[derive(Debug, Clone)]
pub struct ExitRateResult {
    /// `inf I(g)` over paths leaving the set by time `T`; `+inf` without
    /// controllability.
    pub value: f64,
    pub optimal_step: Option<usize>,
    pub optimal_time: Option<f64>,
    pub optimal_control: Option<Control>,
    /// The boundary point reached at the optimal time.
    pub target: Option<Vec<f64>>,
}

/// Cheapest exit from the ball (or half-space) of radius `R` by time `T`.
///
/// For each exit step `m` the inner problem is linear-quadratic with value
/// `R^2 / (2 e_0^T W_m e_0)` one-sided and `R^2 / (2 lambda_max(W_m))`
/// two-sided; the outer minimum is taken over all grid steps.
pub fn exit_rate(model: &dyn CoefficientModel, limit_path: &Path, radius: f64, side: Side) -> Result<ExitRateResult> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(LabError::contract(format!("exit radius must be positive, got {radius}")));
    }
    let prop = SkeletonPropagator::new(model, limit_path)?;
    exit_rate_with(&prop, radius, side)
}

pub fn exit_rate_with(prop: &SkeletonPropagator, radius: f64, side: Side) -> Result<ExitRateResult> {
    let gramians = prop.gramians();
    let reach = |w: &DMatrix<f64>| -> f64 {
        match side {
            Side::OneSided => w[(0, 0)],
            Side::TwoSided => {
                if w.nrows() == 1 {
                    w[(0, 0)]
                } else {
                    SymmetricEigen::new(w.clone()).eigenvalues.iter().copied().fold(0.0, f64::max)
                }
            }
        }
    };
    let mut best: Option<(usize, f64)> = None;
    for (i, w) in gramians.iter().enumerate() {
        let r = reach(w);
        if best.is_none_or(|(_, b)| r > b) {
            best = Some((i, r));
        }
    }
    let scale = gramians.iter().map(|w| w.abs().max()).fold(0.0, f64::max);
    let Some((i, r)) = best.filter(|(_, r)| *r > 1e-14 * scale.max(f64::MIN_POSITIVE)) else {
        return Ok(ExitRateResult {
            value: f64::INFINITY,
            optimal_step: None,
            optimal_time: None,
            optimal_control: None,
            target: None,
        });
    };
    let m = i + 1;
    let w = &gramians[i];
    let d = w.nrows();
    let nu = match side {
        Side::OneSided => {
            let mut e = DVector::zeros(d);
            e[0] = radius / r;
            e
        }
        Side::TwoSided => {
            if d == 1 {
                DVector::from_element(1, radius / r)
            } else {
                let eig = SymmetricEigen::new(w.clone());
                let top = eig.eigenvalues.iter().enumerate().fold(0, |acc, (j, v)| {
                    if *v > eig.eigenvalues[acc] {
                        j
                    } else {
                        acc
                    }
                });
                let mut v = eig.eigenvectors.column(top).into_owned();
                if v.iter().find(|x| **x != 0.0).is_some_and(|x| *x < 0.0) {
                    v = -v;
                }
                v * (radius / r)
            }
        }
    };
    let target = w * &nu;
    let control = prop.steering_control(m, &nu);
    Ok(ExitRateResult {
        value: radius * radius / (2.0 * r),
        optimal_step: Some(m),
        optimal_time: Some(prop.grid().time(m)),
        optimal_control: Some(control),
        target: Some(target.iter().copied().collect()),
    })
}

// ---------------------------------------------------------------------------
// Importance sampling

/// `{sup_k Ybar_k,0 >= threshold}` or `{sup_k |Ybar_k| >= threshold}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventSpec {
    pub threshold: f64,
    #[serde(default)]
    pub side: Side,
}

impl EventSpec {
    #[inline]
    fn hit(&self, y: &[f64]) -> bool {
        match self.side {
            Side::OneSided => y[0] >= self.threshold,
            Side::TwoSided => norm(y) >= self.threshold,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IsEstimate {
    pub probability: f64,
    pub standard_error: f64,
    /// `standard_error / probability` (`+inf` when the estimate is 0).
    pub relative_error: f64,
    /// Sample mean of the likelihood ratio; 1 in expectation.
    pub mean_weight: f64,
    pub mean_weight_se: f64,
    pub replicas: usize,
    /// Replicas dropped because their likelihood ratio overflowed.
    pub excluded: usize,
}

/// Importance-sampling estimate of `P(Ybar^eps in event)` for the
/// decoupled deviation process.
///
/// Each replica is driven by `dW + lambda hdot dt` and weighted by
/// `exp(-lambda sum <hdot_k, dW_k> - lambda^2 dt / 2 sum |hdot_k|^2)`, the
/// exact likelihood ratio of the discrete increments. A zero shift gives
/// plain Monte Carlo.
pub fn girsanov_is_estimate(
    model: &dyn CoefficientModel,
    x0: &[f64],
    epsilon: f64,
    lambda: f64,
    event: &EventSpec,
    shift: &Control,
    noise: &BrownianBundle,
) -> Result<IsEstimate> {
    if !(epsilon > 0.0) || !(lambda > 0.0) {
        return Err(LabError::contract("importance sampling needs epsilon > 0 and lambda > 0"));
    }
    let grid = *noise.grid();
    if *shift.grid() != grid || shift.dim() != model.dim() || noise.dim() != model.dim() {
        return Err(LabError::contract("shift, noise and model disagree on grid or dimension"));
    }
    let limit = solve_limit_ode(model, x0, &grid)?;
    let stepper = DecoupledStepper::new(model, &limit, epsilon);
    let d = model.dim();
    let dt = grid.dt();
    let factor = 1.0 / (epsilon.sqrt() * lambda);
    let shift_energy = lambda * lambda * shift.energy();

    let samples: Vec<Option<(f64, f64)>> = (0..noise.replicas())
        .into_par_iter()
        .map(|j| {
            let mut stream = noise.stream(j);
            let mut y = x0.to_vec();
            let (mut dw, mut b, mut s) = (vec![0.0; d], vec![0.0; d], vec![0.0; d * d]);
            let mut ybar = vec![0.0; d];
            let mut hit = event.hit(&ybar);
            let mut pairing = 0.0;
            for k in 0..grid.steps() {
                stream.next_into(&mut dw);
                let h = shift.rate(k);
                for i in 0..d {
                    pairing += h[i] * dw[i];
                    dw[i] += lambda * h[i] * dt;
                }
                stepper.step(k, &mut y, &dw, &mut b, &mut s);
                if !hit {
                    for i in 0..d {
                        ybar[i] = (y[i] - limit.at(k + 1)[i]) * factor;
                    }
                    hit = event.hit(&ybar);
                }
            }
            let weight = (-lambda * pairing - shift_energy).exp();
            (weight.is_finite() && y.iter().all(|v| v.is_finite())).then_some((if hit { weight } else { 0.0 }, weight))
        })
        .collect();

    let kept: Vec<(f64, f64)> = samples.iter().flatten().copied().collect();
    let excluded = samples.len() - kept.len();
    if kept.is_empty() {
        return Err(LabError::Integration {
            step: grid.steps(),
            detail: "every replica overflowed its likelihood ratio".into(),
        });
    }
    let (values, weights): (Vec<f64>, Vec<f64>) = kept.into_iter().unzip();
    let (probability, se) = mean_and_se(&values);
    let (mean_weight, wse) = mean_and_se(&weights);
    let standard_error = se.unwrap_or(f64::NAN);
    Ok(IsEstimate {
        probability,
        standard_error,
        relative_error: if probability > 0.0 { standard_error / probability } else { f64::INFINITY },
        mean_weight,
        mean_weight_se: wse.unwrap_or(f64::NAN),
        replicas: values.len(),
        excluded,
    })
}

// ---------------------------------------------------------------------------
// Decay experiments

/// `lambda(eps) = eps^-alpha`, with `alpha` restricted to `(0, 1/2)` so that
/// `lambda -> inf` and `sqrt(eps) lambda -> 0`.
pub fn mdp_scale(epsilon: f64, alpha: f64) -> Result<f64> {
    validate_alpha(alpha)?;
    Ok(epsilon.powf(-alpha))
}

pub fn validate_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(LabError::validation(format!(
            "alpha = {alpha} is outside (0, 1/2): lambda(eps) = eps^-alpha must satisfy lambda -> inf and sqrt(eps) lambda -> 0"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct SamplingSettings {
    pub grid: TimeGrid,
    pub replicas: usize,
    pub particles: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecayRow {
    pub epsilon: f64,
    pub lambda: f64,
    pub probability: f64,
    pub standard_error: f64,
    /// `lambda^-2 log P`, absent when the estimate is 0.
    pub normalized_log_prob: Option<f64>,
    /// `lambda^-2 log (P -/+ 2 SE)`; the lower end is absent when `P <= 2 SE`.
    pub band: (Option<f64>, Option<f64>),
    /// `eps log P`
    pub eps_log_prob: Option<f64>,
    /// No replica hit the event, so only an upper bound is known.
    pub lower_bound_only: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecayResult {
    pub alpha: f64,
    pub event: EventSpec,
    /// `-inf I` over the event's exit set.
    pub predicted: f64,
    pub optimal_exit_time: Option<f64>,
    pub rows: Vec<DecayRow>,
}

fn log_normalized(p: f64, lambda: f64) -> Option<f64> {
    (p > 0.0).then(|| p.ln() / (lambda * lambda))
}

/// Normalised log-probabilities of the deviation event along an `eps`
/// ladder, estimated with the Girsanov shift `lambda h*` where `h*` is the
/// optimal exit control.
pub fn mdp_decay_experiment(
    model: &dyn CoefficientModel,
    x0: &[f64],
    alpha: f64,
    epsilon_ladder: &[f64],
    event: &EventSpec,
    settings: &SamplingSettings,
) -> Result<DecayResult> {
    validate_alpha(alpha)?;
    validate_ladder(epsilon_ladder, 1)?;
    let limit = solve_limit_ode(model, x0, &settings.grid)?;
    let (predicted, optimal_exit_time, shift) = if event.threshold > 0.0 {
        let exit = exit_rate(model, &limit, event.threshold, event.side)?;
        let shift = exit
            .optimal_control
            .clone()
            .unwrap_or_else(|| Control::zero(settings.grid, model.dim()));
        (-exit.value, exit.optimal_time, shift)
    } else {
        (0.0, None, Control::zero(settings.grid, model.dim()))
    };
    let noise = BrownianBundle::new(settings.seed, settings.replicas, model.dim(), settings.grid)?;
    let rows = epsilon_ladder
        .iter()
        .map(|&eps| {
            let lambda = mdp_scale(eps, alpha)?;
            let est = girsanov_is_estimate(model, x0, eps, lambda, event, &shift, &noise)?;
            let p = est.probability;
            let se = est.standard_error;
            Ok(DecayRow {
                epsilon: eps,
                lambda,
                probability: p,
                standard_error: se,
                normalized_log_prob: log_normalized(p, lambda),
                band: (log_normalized(p - 2.0 * se, lambda), log_normalized(p + 2.0 * se, lambda)),
                eps_log_prob: (p > 0.0).then(|| eps * p.ln()),
                lower_bound_only: p == 0.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DecayResult {
        alpha,
        event: *event,
        predicted,
        optimal_exit_time,
        rows,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EquivalenceRow {
    pub epsilon: f64,
    pub lambda: f64,
    /// Fraction of replicas with `sup_k |Xbar_k - Ybar_k| >= delta`.
    pub probability: f64,
    pub mean_sup_gap: f64,
    /// `lambda^-2 log P`
    pub normalized_log_prob: Option<f64>,
    /// `eps log P`
    pub eps_log_prob: Option<f64>,
}

/// Empirical tail of the gap between the particle deviation process and the
/// decoupled one along an `eps` ladder.
pub fn exponential_equivalence_check(
    model: &dyn CoefficientModel,
    x0: &[f64],
    alpha: f64,
    epsilon_ladder: &[f64],
    delta: f64,
    settings: &SamplingSettings,
) -> Result<Vec<EquivalenceRow>> {
    validate_alpha(alpha)?;
    validate_ladder(epsilon_ladder, 1)?;
    if !(delta > 0.0) {
        return Err(LabError::contract("gap threshold must be positive"));
    }
    let noise = BrownianBundle::new(settings.seed, settings.replicas, model.dim(), settings.grid)?;
    epsilon_ladder
        .iter()
        .map(|&eps| {
            let lambda = mdp_scale(eps, alpha)?;
            let dev = deviation_processes(model, x0, eps, lambda, &noise, settings.particles)?;
            let d = model.dim();
            let gaps: Vec<f64> = (0..noise.replicas())
                .map(|j| {
                    dev.xbar
                        .path(j)
                        .chunks_exact(d)
                        .zip(dev.ybar.path(j).chunks_exact(d))
                        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
                        .fold(0.0, f64::max)
                })
                .collect();
            let m = gaps.len() as f64;
            let p = gaps.iter().filter(|g| **g >= delta).count() as f64 / m;
            Ok(EquivalenceRow {
                epsilon: eps,
                lambda,
                probability: p,
                mean_sup_gap: gaps.iter().sum::<f64>() / m,
                normalized_log_prob: log_normalized(p, lambda),
                eps_log_prob: (p > 0.0).then(|| eps * p.ln()),
            })
        })
        .collect()
}
