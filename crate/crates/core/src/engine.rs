//! Time stepping for the McKean-Vlasov equation and its companions.
//!
//! All stochastic processes here consume a shared [`BrownianBundle`]: replica
//! `j` of every coupled process (particle `j`, fluctuation replica `j`,
//! decoupled replica `j`) sees the same increments. Increments are a pure
//! function of `(seed, replica, step)`, so results do not depend on how
//! replicas are scheduled across threads.

use std::io::Write;

use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{LabError, Result};
use crate::linalg::gemv_acc;
use crate::measure::EmpiricalMeasure;
use crate::model::CoefficientModel;

/// Uniform grid `t_k = k T / n` on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(LabError::contract(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(LabError::contract("grid needs at least one step"));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.horizon / self.steps as f64
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.steps).map(|k| self.time(k))
    }
}

// ---------------------------------------------------------------------------
// Noise

/// Seeded Brownian increments for `replicas` independent `dim`-dimensional
/// Brownian motions on a grid.
///
/// Replica `j` draws from ChaCha8 stream `j` of `seed`; each base increment
/// consumes exactly one 64-bit word per component, mapped to a standard
/// normal by the inverse CDF. A coarsened bundle sums consecutive base
/// increments, so it describes the same Brownian paths on a coarser grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianBundle {
    seed: u64,
    replicas: usize,
    dim: usize,
    grid: TimeGrid,
    substeps: usize,
}

impl BrownianBundle {
    pub fn new(seed: u64, replicas: usize, dim: usize, grid: TimeGrid) -> Result<Self> {
        if replicas == 0 || dim == 0 {
            return Err(LabError::contract("bundle needs at least one replica and dimension"));
        }
        Ok(Self {
            seed,
            replicas,
            dim,
            grid,
            substeps: 1,
        })
    }

    /// The same paths observed every `factor` steps.
    pub fn coarsened(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.grid.steps.is_multiple_of(factor) {
            return Err(LabError::contract(format!(
                "cannot coarsen {} steps by {factor}",
                self.grid.steps
            )));
        }
        Ok(Self {
            grid: TimeGrid::new(self.grid.horizon, self.grid.steps / factor)?,
            substeps: self.substeps * factor,
            ..self.clone()
        })
    }

    /// The first `count` replicas.
    pub fn truncated(&self, count: usize) -> Result<Self> {
        if count == 0 || count > self.replicas {
            return Err(LabError::contract("replica subset out of range"));
        }
        Ok(Self {
            replicas: count,
            ..self.clone()
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn replicas(&self) -> usize {
        self.replicas
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Sequential increments of one replica, starting at step 0.
    pub fn stream(&self, replica: usize) -> IncrementStream {
        assert!(replica < self.replicas, "replica {replica} out of range");
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(replica as u64);
        IncrementStream {
            rng,
            dim: self.dim,
            substeps: self.substeps,
            sqrt_dt: (self.grid.dt() / self.substeps as f64).sqrt(),
            normal: Normal::standard(),
        }
    }

    /// Random access to `Delta W_step` of one replica.
    pub fn increment(&self, replica: usize, step: usize) -> Vec<f64> {
        assert!(step < self.grid.steps, "step {step} out of range");
        let mut s = self.stream(replica);
        // one 64-bit word = two 32-bit ChaCha words
        s.rng
            .set_word_pos(2 * (step * self.substeps * self.dim) as u128);
        let mut out = vec![0.0; self.dim];
        s.next_into(&mut out);
        out
    }
}

pub struct IncrementStream {
    rng: ChaCha8Rng,
    dim: usize,
    substeps: usize,
    sqrt_dt: f64,
    normal: Normal,
}

impl IncrementStream {
    #[inline]
    fn standard_normal(&mut self) -> f64 {
        // open interval (0, 1) from the top 53 bits
        let u = ((self.rng.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
        self.normal.inverse_cdf(u)
    }

    /// Writes the next increment (`dim` entries).
    #[inline]
    pub fn next_into(&mut self, out: &mut [f64]) {
        if self.substeps == 1 {
            for o in out.iter_mut() {
                *o = self.sqrt_dt * self.standard_normal();
            }
            return;
        }
        out.fill(0.0);
        for _ in 0..self.substeps {
            for o in out.iter_mut().take(self.dim) {
                *o += self.sqrt_dt * self.standard_normal();
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Paths

/// A single deterministic trajectory on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    grid: TimeGrid,
    dim: usize,
    values: Vec<f64>,
}

impl Path {
    /// `values` holds `(steps + 1) * dim` entries, node-major.
    pub fn new(grid: TimeGrid, dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || values.len() != (grid.steps + 1) * dim {
            return Err(LabError::contract(format!(
                "path of {} values does not fit {} nodes of dimension {dim}",
                values.len(),
                grid.steps + 1
            )));
        }
        Ok(Self { grid, dim, values })
    }

    pub fn from_fn(grid: TimeGrid, dim: usize, f: impl Fn(f64) -> Vec<f64>) -> Result<Self> {
        let values = grid.nodes().flat_map(f).collect();
        Self::new(grid, dim, values)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn at(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn terminal(&self) -> &[f64] {
        self.at(self.grid.steps)
    }

    /// `max_k |x_k|`
    pub fn sup_norm(&self) -> f64 {
        self.values
            .chunks_exact(self.dim)
            .map(crate::linalg::norm)
            .fold(0.0, f64::max)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessLabel {
    /// `X^eps` from the particle system.
    Solution,
    /// `X^0`
    Limit,
    /// `Z`
    Fluctuation,
    /// `(X^eps - X^0) / (sqrt(eps) lambda)`
    Deviation,
    /// `(Y^eps - X^0) / (sqrt(eps) lambda)`
    Decoupled,
}

/// `replicas` trajectories sharing a grid; replica-major, then node, then
/// component.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    grid: TimeGrid,
    dim: usize,
    replicas: usize,
    values: Vec<f64>,
    label: ProcessLabel,
}

impl PathEnsemble {
    pub fn new(grid: TimeGrid, dim: usize, replicas: usize, values: Vec<f64>, label: ProcessLabel) -> Result<Self> {
        if values.len() != replicas * (grid.steps + 1) * dim {
            return Err(LabError::contract("ensemble buffer has the wrong size"));
        }
        Ok(Self {
            grid,
            dim,
            replicas,
            values,
            label,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn replicas(&self) -> usize {
        self.replicas
    }

    pub fn label(&self) -> ProcessLabel {
        self.label
    }

    fn path_len(&self) -> usize {
        (self.grid.steps + 1) * self.dim
    }

    /// Trajectory of replica `j`, node-major.
    pub fn path(&self, j: usize) -> &[f64] {
        let len = self.path_len();
        &self.values[j * len..(j + 1) * len]
    }

    pub fn at(&self, j: usize, k: usize) -> &[f64] {
        let start = j * self.path_len() + k * self.dim;
        &self.values[start..start + self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Component `i` of every replica at node `k`.
    pub fn column(&self, k: usize, i: usize) -> Vec<f64> {
        (0..self.replicas).map(|j| self.at(j, k)[i]).collect()
    }

    /// Per-replica `max_k |x_k - reference_k|^p`.
    pub fn sup_deviation_powers(&self, reference: Option<&Path>, p: f64) -> Result<Vec<f64>> {
        if let Some(r) = reference {
            if r.grid != self.grid || r.dim != self.dim {
                return Err(LabError::contract("reference path is on a different grid"));
            }
        }
        let d = self.dim;
        Ok((0..self.replicas)
            .map(|j| {
                let path = self.path(j);
                (0..=self.grid.steps)
                    .map(|k| {
                        let x = &path[k * d..(k + 1) * d];
                        let sq: f64 = match reference {
                            Some(r) => x.iter().zip(r.at(k)).map(|(a, b)| (a - b) * (a - b)).sum(),
                            None => x.iter().map(|a| a * a).sum(),
                        };
                        sq.sqrt()
                    })
                    .fold(0.0, f64::max)
                    .powf(p)
            })
            .collect())
    }

    /// Header `replica,step,time,component_0..`; rows replica-major.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = std::io::BufWriter::new(out);
        let mut header = String::from("replica,step,time");
        for i in 0..self.dim {
            header.push_str(&format!(",component_{i}"));
        }
        writeln!(w, "{header}")?;
        for j in 0..self.replicas {
            for k in 0..=self.grid.steps {
                write!(w, "{j},{k},{}", self.grid.time(k))?;
                for v in self.at(j, k) {
                    write!(w, ",{v}")?;
                }
                writeln!(w)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Limit ODE

fn limit_rhs(model: &dyn CoefficientModel, t: f64, x: &[f64], out: &mut [f64]) {
    let delta = EmpiricalMeasure::dirac(x);
    model.drift_into(t, x, &delta, out);
}

fn check_x0(model: &dyn CoefficientModel, x0: &[f64]) -> Result<()> {
    if x0.len() != model.dim() {
        return Err(LabError::contract(format!(
            "initial state has dimension {}, model has {}",
            x0.len(),
            model.dim()
        )));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(LabError::contract("initial state must be finite"));
    }
    Ok(())
}

fn blow_up(step: usize) -> LabError {
    LabError::Integration {
        step,
        detail: "state became non-finite".into(),
    }
}

/// Classical fourth-order Runge-Kutta for `dX = b_t(X, delta_X) dt`.
pub fn solve_limit_ode(model: &dyn CoefficientModel, x0: &[f64], grid: &TimeGrid) -> Result<Path> {
    check_x0(model, x0)?;
    let d = model.dim();
    let h = grid.dt();
    let mut values = Vec::with_capacity((grid.steps + 1) * d);
    values.extend_from_slice(x0);
    let mut x = x0.to_vec();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut stage = vec![0.0; d];
    for k in 0..grid.steps {
        let t = grid.time(k);
        limit_rhs(model, t, &x, &mut k1);
        for i in 0..d {
            stage[i] = x[i] + 0.5 * h * k1[i];
        }
        limit_rhs(model, t + 0.5 * h, &stage, &mut k2);
        for i in 0..d {
            stage[i] = x[i] + 0.5 * h * k2[i];
        }
        limit_rhs(model, t + 0.5 * h, &stage, &mut k3);
        for i in 0..d {
            stage[i] = x[i] + h * k3[i];
        }
        limit_rhs(model, t + h, &stage, &mut k4);
        for i in 0..d {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(blow_up(k + 1));
        }
        values.extend_from_slice(&x);
    }
    Path::new(*grid, d, values)
}

/// Explicit Euler for the limit ODE: what the particle scheme produces at
/// `eps = 0`.
pub fn euler_limit_path(model: &dyn CoefficientModel, x0: &[f64], grid: &TimeGrid) -> Result<Path> {
    check_x0(model, x0)?;
    let d = model.dim();
    let h = grid.dt();
    let mut values = Vec::with_capacity((grid.steps + 1) * d);
    values.extend_from_slice(x0);
    let mut x = x0.to_vec();
    let mut b = vec![0.0; d];
    for k in 0..grid.steps {
        limit_rhs(model, grid.time(k), &x, &mut b);
        for i in 0..d {
            x[i] += b[i] * h;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(blow_up(k + 1));
        }
        values.extend_from_slice(&x);
    }
    Path::new(*grid, d, values)
}

// ---------------------------------------------------------------------------
// Euler-Maruyama

/// `x += b dt + scale * sigma dw` with `sigma` row-major `d x d`.
#[inline]
pub(crate) fn euler_update(x: &mut [f64], b: &[f64], sigma: &[f64], dw: &[f64], dt: f64, scale: f64) {
    let d = x.len();
    for i in 0..d {
        let mut noise = 0.0;
        for j in 0..d {
            noise += sigma[i * d + j] * dw[j];
        }
        x[i] += b[i] * dt + scale * noise;
    }
}

fn check_eps(epsilon: f64) -> Result<()> {
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(LabError::contract(format!("epsilon must be >= 0, got {epsilon}")));
    }
    Ok(())
}

/// One interacting system of `N = noise.replicas()` particles, all started
/// at `x0`, with the law replaced by the empirical measure of the system.
pub fn simulate_particles(
    model: &dyn CoefficientModel,
    x0: &[f64],
    epsilon: f64,
    noise: &BrownianBundle,
) -> Result<PathEnsemble> {
    simulate_particle_groups(model, x0, epsilon, noise, noise.replicas())
}

/// Splits the bundle's replicas into consecutive independent systems of
/// `group_size` particles (the last one may be smaller) and simulates each.
/// Replica `j` of the result is particle `j mod group_size` of system
/// `j / group_size`.
pub fn simulate_particle_groups(
    model: &dyn CoefficientModel,
    x0: &[f64],
    epsilon: f64,
    noise: &BrownianBundle,
    group_size: usize,
) -> Result<PathEnsemble> {
    check_x0(model, x0)?;
    check_eps(epsilon)?;
    if noise.dim() != model.dim() {
        return Err(LabError::contract("noise dimension differs from model dimension"));
    }
    if group_size == 0 {
        return Err(LabError::contract("particle systems need at least one particle"));
    }
    let grid = *noise.grid();
    let d = model.dim();
    let path_len = (grid.steps + 1) * d;
    let m = noise.replicas();
    let mut values = vec![0.0; m * path_len];
    let results: Vec<Result<()>> = values
        .par_chunks_mut(group_size * path_len)
        .enumerate()
        .map(|(g, chunk)| {
            let first = g * group_size;
            run_particle_system(model, x0, epsilon, noise, first, chunk)
        })
        .collect();
    results.into_iter().collect::<Result<Vec<()>>>()?;
    PathEnsemble::new(grid, d, m, values, ProcessLabel::Solution)
}

fn run_particle_system(
    model: &dyn CoefficientModel,
    x0: &[f64],
    epsilon: f64,
    noise: &BrownianBundle,
    first_replica: usize,
    out: &mut [f64],
) -> Result<()> {
    let grid = *noise.grid();
    let d = model.dim();
    let path_len = (grid.steps + 1) * d;
    let n_particles = out.len() / path_len;
    let dt = grid.dt();
    let scale = epsilon.sqrt();

    let mut streams: Vec<IncrementStream> = (0..n_particles).map(|j| noise.stream(first_replica + j)).collect();
    let mut states: Vec<f64> = x0.iter().copied().cycle().take(n_particles * d).collect();
    let mut drift = vec![0.0; n_particles * d];
    let mut sigma = vec![0.0; n_particles * d * d];
    let mut dw = vec![0.0; n_particles * d];
    for j in 0..n_particles {
        out[j * path_len..j * path_len + d].copy_from_slice(x0);
    }
    for k in 0..grid.steps {
        let t = grid.time(k);
        let mu = EmpiricalMeasure::uniform(d, states.clone())
            .map_err(|_| blow_up(k))?;
        model.drift_batch(t, &mu, &mut drift);
        model.diffusion_batch(t, &mu, &mut sigma);
        streams
            .par_iter_mut()
            .zip(dw.par_chunks_mut(d))
            .zip(states.par_chunks_mut(d))
            .enumerate()
            .for_each(|(j, ((stream, dw_j), x))| {
                stream.next_into(dw_j);
                euler_update(
                    x,
                    &drift[j * d..(j + 1) * d],
                    &sigma[j * d * d..(j + 1) * d * d],
                    dw_j,
                    dt,
                    scale,
                );
            });
        if states.iter().any(|v| !v.is_finite()) {
            return Err(blow_up(k + 1));
        }
        for j in 0..n_particles {
            let at = j * path_len + (k + 1) * d;
            out[at..at + d].copy_from_slice(&states[j * d..(j + 1) * d]);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Fluctuation process

/// How the mean term `E <D^L b, Z>` of the fluctuation SDE is supplied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanMode {
    /// `m(t) = E Z_t` from its own linear ODE started at 0, so `m = 0`.
    #[default]
    Analytic,
    /// `m(t)` is the sample mean of the coupled replicas at each step.
    SampleMean,
}

/// Coefficients of the linearised dynamics frozen along a deterministic
/// path: `A = grad b`, `L = D^L b`, `Sigma = sigma`, all at `(X0_t, delta_X0_t)`.
#[derive(Debug, Clone)]
pub struct FrozenCoefficients {
    pub grad: Vec<DMatrix<f64>>,
    pub lderiv: Vec<DMatrix<f64>>,
    pub sigma: Vec<DMatrix<f64>>,
}

impl FrozenCoefficients {
    /// Evaluates at the left node of every cell. The L-derivative is only
    /// collected when `with_lderiv` is set.
    pub fn along(model: &dyn CoefficientModel, path: &Path, with_lderiv: bool) -> Result<Self> {
        if path.dim() != model.dim() {
            return Err(LabError::contract("path dimension differs from model dimension"));
        }
        let grid = path.grid();
        let mut grad = Vec::with_capacity(grid.steps);
        let mut lderiv = Vec::new();
        let mut sigma = Vec::with_capacity(grid.steps);
        for k in 0..grid.steps {
            let t = grid.time(k);
            let x = path.at(k);
            let delta = EmpiricalMeasure::dirac(x);
            grad.push(model.grad_drift(t, x, &delta));
            if with_lderiv {
                lderiv.push(model.lderiv_drift(t, x, &delta, x)?);
            }
            sigma.push(model.diffusion(t, x, &delta));
        }
        Ok(Self { grad, lderiv, sigma })
    }
}

/// Euler-Maruyama for the fluctuation SDE
/// `dZ = grad b Z dt + D^L b m(t) dt + sigma dW`, `Z_0 = 0`, with all
/// coefficients frozen along `limit_path`.
pub fn simulate_fluctuation(
    model: &dyn CoefficientModel,
    limit_path: &Path,
    noise: &BrownianBundle,
    mode: MeanMode,
) -> Result<PathEnsemble> {
    simulate_fluctuation_groups(model, limit_path, noise, mode, noise.replicas())
}

/// As [`simulate_fluctuation`]; in sample-mean mode the mean is taken over
/// consecutive groups of `group_size` replicas, mirroring the particle
/// systems of [`simulate_particle_groups`].
pub fn simulate_fluctuation_groups(
    model: &dyn CoefficientModel,
    limit_path: &Path,
    noise: &BrownianBundle,
    mode: MeanMode,
    group_size: usize,
) -> Result<PathEnsemble> {
    let grid = *noise.grid();
    if *limit_path.grid() != grid {
        return Err(LabError::contract("limit path and noise live on different grids"));
    }
    if noise.dim() != model.dim() {
        return Err(LabError::contract("noise dimension differs from model dimension"));
    }
    if group_size == 0 {
        return Err(LabError::contract("group size must be positive"));
    }
    let coeffs = FrozenCoefficients::along(model, limit_path, true)?;
    let d = model.dim();
    let dt = grid.dt();
    let path_len = (grid.steps + 1) * d;
    let m = noise.replicas();
    let mut values = vec![0.0; m * path_len];

    match mode {
        MeanMode::Analytic => {
            // m' = (A + L) m, m(0) = 0
            let mut means = vec![vec![0.0; d]; grid.steps + 1];
            for k in 0..grid.steps {
                let mut next = means[k].clone();
                let drive = &coeffs.grad[k] + &coeffs.lderiv[k];
                gemv_acc(&mut next, &drive, &means[k], dt);
                means[k + 1] = next;
            }
            let results: Vec<Result<()>> = values
                .par_chunks_mut(path_len)
                .enumerate()
                .map(|(j, out)| {
                    let mut stream = noise.stream(j);
                    let mut z = vec![0.0; d];
                    let mut dw = vec![0.0; d];
                    for k in 0..grid.steps {
                        stream.next_into(&mut dw);
                        fluctuation_step(&coeffs, k, &mut z, &means[k], &dw, dt);
                        if z.iter().any(|v| !v.is_finite()) {
                            return Err(blow_up(k + 1));
                        }
                        out[(k + 1) * d..(k + 2) * d].copy_from_slice(&z);
                    }
                    Ok(())
                })
                .collect();
            results.into_iter().collect::<Result<Vec<()>>>()?;
        }
        MeanMode::SampleMean => {
            let results: Vec<Result<()>> = values
                .par_chunks_mut(group_size * path_len)
                .enumerate()
                .map(|(g, chunk)| {
                    let count = chunk.len() / path_len;
                    let mut streams: Vec<IncrementStream> =
                        (0..count).map(|j| noise.stream(g * group_size + j)).collect();
                    let mut zs = vec![0.0; count * d];
                    let mut dw = vec![0.0; d];
                    for k in 0..grid.steps {
                        let mut mean = vec![0.0; d];
                        for z in zs.chunks_exact(d) {
                            for i in 0..d {
                                mean[i] += z[i];
                            }
                        }
                        mean.iter_mut().for_each(|v| *v /= count as f64);
                        for (j, z) in zs.chunks_exact_mut(d).enumerate() {
                            streams[j].next_into(&mut dw);
                            fluctuation_step(&coeffs, k, z, &mean, &dw, dt);
                            let at = j * path_len + (k + 1) * d;
                            chunk[at..at + d].copy_from_slice(z);
                        }
                        if zs.iter().any(|v| !v.is_finite()) {
                            return Err(blow_up(k + 1));
                        }
                    }
                    Ok(())
                })
                .collect();
            results.into_iter().collect::<Result<Vec<()>>>()?;
        }
    }
    PathEnsemble::new(grid, d, m, values, ProcessLabel::Fluctuation)
}

#[inline]
fn fluctuation_step(coeffs: &FrozenCoefficients, k: usize, z: &mut [f64], mean: &[f64], dw: &[f64], dt: f64) {
    let mut next = z.to_vec();
    gemv_acc(&mut next, &coeffs.grad[k], z, dt);
    gemv_acc(&mut next, &coeffs.lderiv[k], mean, dt);
    gemv_acc(&mut next, &coeffs.sigma[k], dw, 1.0);
    z.copy_from_slice(&next);
}

// ---------------------------------------------------------------------------
// Decoupled equation and deviation processes

/// Euler-Maruyama for `dY = b_t(Y, delta_X0_t) dt + sqrt(eps) sigma_t(Y, delta_X0_t) dW`
/// along a fixed limit path: the law argument is frozen, so replicas do not
/// interact.
pub(crate) struct DecoupledStepper<'a> {
    model: &'a dyn CoefficientModel,
    grid: TimeGrid,
    diracs: Vec<EmpiricalMeasure>,
    scale: f64,
}

impl<'a> DecoupledStepper<'a> {
    pub(crate) fn new(model: &'a dyn CoefficientModel, limit_path: &Path, epsilon: f64) -> Self {
        let grid = *limit_path.grid();
        let diracs = (0..grid.steps).map(|k| EmpiricalMeasure::dirac(limit_path.at(k))).collect();
        Self {
            model,
            grid,
            diracs,
            scale: epsilon.sqrt(),
        }
    }

    /// Advances `y` across cell `k` with increment `dw`.
    #[inline]
    pub(crate) fn step(&self, k: usize, y: &mut [f64], dw: &[f64], drift: &mut [f64], sigma: &mut [f64]) {
        let t = self.grid.time(k);
        self.model.drift_into(t, y, &self.diracs[k], drift);
        self.model.diffusion_into(t, y, &self.diracs[k], sigma);
        euler_update(y, drift, sigma, dw, self.grid.dt(), self.scale);
    }
}

/// Raw `Y^eps` replicas of the decoupled equation.
pub fn simulate_decoupled(
    model: &dyn CoefficientModel,
    limit_path: &Path,
    epsilon: f64,
    noise: &BrownianBundle,
) -> Result<PathEnsemble> {
    check_eps(epsilon)?;
    let grid = *noise.grid();
    if *limit_path.grid() != grid {
        return Err(LabError::contract("limit path and noise live on different grids"));
    }
    let d = model.dim();
    let stepper = DecoupledStepper::new(model, limit_path, epsilon);
    let path_len = (grid.steps + 1) * d;
    let mut values = vec![0.0; noise.replicas() * path_len];
    let x0 = limit_path.at(0);
    let results: Vec<Result<()>> = values
        .par_chunks_mut(path_len)
        .enumerate()
        .map(|(j, out)| {
            let mut stream = noise.stream(j);
            let mut y = x0.to_vec();
            let (mut dw, mut b, mut s) = (vec![0.0; d], vec![0.0; d], vec![0.0; d * d]);
            out[..d].copy_from_slice(x0);
            for k in 0..grid.steps {
                stream.next_into(&mut dw);
                stepper.step(k, &mut y, &dw, &mut b, &mut s);
                if y.iter().any(|v| !v.is_finite()) {
                    return Err(blow_up(k + 1));
                }
                out[(k + 1) * d..(k + 2) * d].copy_from_slice(&y);
            }
            Ok(())
        })
        .collect();
    results.into_iter().collect::<Result<Vec<()>>>()?;
    PathEnsemble::new(grid, d, noise.replicas(), values, ProcessLabel::Solution)
}

/// `(X - reference) * factor`, replica by replica.
pub fn recentre(ensemble: &PathEnsemble, reference: &Path, factor: f64, label: ProcessLabel) -> Result<PathEnsemble> {
    if reference.grid() != ensemble.grid() || reference.dim() != ensemble.dim() {
        return Err(LabError::contract("reference path is on a different grid"));
    }
    let path_len = reference.values().len();
    let values = ensemble
        .values()
        .chunks_exact(path_len)
        .flat_map(|p| p.iter().zip(reference.values()).map(move |(x, r)| (x - r) * factor))
        .collect();
    PathEnsemble::new(*ensemble.grid(), ensemble.dim(), ensemble.replicas(), values, label)
}

#[derive(Debug, Clone)]
pub struct Deviations {
    pub limit: Path,
    /// `(X^eps - X^0) / (sqrt(eps) lambda)`
    pub xbar: PathEnsemble,
    /// `(Y^eps - X^0) / (sqrt(eps) lambda)`
    pub ybar: PathEnsemble,
}

/// Coupled deviation processes: the particle solution and the decoupled
/// solution, both driven by `noise` and centred on the fourth-order limit
/// path.
pub fn deviation_processes(
    model: &dyn CoefficientModel,
    x0: &[f64],
    epsilon: f64,
    lambda: f64,
    noise: &BrownianBundle,
    group_size: usize,
) -> Result<Deviations> {
    if !(epsilon > 0.0) {
        return Err(LabError::contract("deviation scaling needs epsilon > 0"));
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(LabError::contract("deviation scaling needs lambda > 0"));
    }
    let limit = solve_limit_ode(model, x0, noise.grid())?;
    let factor = 1.0 / (epsilon.sqrt() * lambda);
    let x = simulate_particle_groups(model, x0, epsilon, noise, group_size)?;
    let y = simulate_decoupled(model, &limit, epsilon, noise)?;
    Ok(Deviations {
        xbar: recentre(&x, &limit, factor, ProcessLabel::Deviation)?,
        ybar: recentre(&y, &limit, factor, ProcessLabel::Decoupled)?,
        limit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{KuramotoModel, LinearMeanField};
    use crate::stats::{mean_and_se, sample_variance};

    fn grid(t: f64, n: usize) -> TimeGrid {
        TimeGrid::new(t, n).unwrap()
    }

    #[test]
    fn grid_nodes() {
        let g = grid(2.0, 4);
        assert_eq!(g.dt(), 0.5);
        assert_eq!(g.nodes().collect::<Vec<_>>(), vec![0.0, 0.5, 1.0, 1.5, 2.0]);
        assert!(TimeGrid::new(0.0, 3).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
    }

    #[test]
    fn bundle_is_reproducible_and_random_access_matches_streams() {
        let b = BrownianBundle::new(42, 3, 2, grid(1.0, 10)).unwrap();
        let mut s = b.stream(1);
        let mut dw = vec![0.0; 2];
        for k in 0..10 {
            s.next_into(&mut dw);
            assert_eq!(dw, b.increment(1, k));
        }
        let again = BrownianBundle::new(42, 3, 2, grid(1.0, 10)).unwrap();
        assert_eq!(b.increment(2, 7), again.increment(2, 7));
        assert_ne!(b.increment(0, 7), b.increment(1, 7));
    }

    #[test]
    fn coarsened_bundle_sums_fine_increments() {
        let fine = BrownianBundle::new(9, 2, 1, grid(1.0, 12)).unwrap();
        let coarse = fine.coarsened(3).unwrap();
        assert_eq!(coarse.grid().steps(), 4);
        for k in 0..4 {
            let sum: f64 = (0..3).map(|s| fine.increment(1, 3 * k + s)[0]).sum();
            assert!((coarse.increment(1, k)[0] - sum).abs() < 1e-15);
        }
        assert!(fine.coarsened(5).is_err());
    }

    #[test]
    fn increments_have_the_right_law() {
        let g = grid(1.0, 4);
        let b = BrownianBundle::new(3, 20_000, 1, g).unwrap();
        let xs: Vec<f64> = (0..b.replicas()).map(|j| b.increment(j, 2)[0]).collect();
        let (mean, se) = mean_and_se(&xs);
        assert!(mean.abs() < 4.0 * se.unwrap());
        let var = sample_variance(&xs);
        // Var of the sample variance of a normal: 2 sigma^4 / (n - 1)
        let sd = (2.0 * 0.25f64.powi(2) / 19_999.0).sqrt();
        assert!((var - 0.25).abs() < 4.0 * sd, "{var}");
    }

    #[test]
    fn limit_ode_examples() {
        let g = grid(1.0, 1000);
        let flat = solve_limit_ode(&LinearMeanField::new(0.7, -0.7, 1.0), &[1.3], &g).unwrap();
        assert!(flat.values().iter().all(|v| *v == 1.3));
        let e = std::f64::consts::E;
        let x = solve_limit_ode(&LinearMeanField::new(1.0, 0.0, 1.0), &[1.0], &g).unwrap();
        assert!((x.terminal()[0] - e).abs() < 1e-9);
        let x = solve_limit_ode(&LinearMeanField::new(0.5, 0.5, 1.0), &[1.0], &g).unwrap();
        assert!((x.terminal()[0] - e).abs() < 1e-9);
    }

    #[test]
    fn limit_ode_reports_blow_up_step() {
        let g = grid(1.0, 10);
        let err = solve_limit_ode(&LinearMeanField::new(1e300, 1e300, 1.0), &[1.0], &g).unwrap_err();
        assert!(matches!(err, LabError::Integration { step: 1, .. }), "{err}");
    }

    #[test]
    fn zero_noise_particles_follow_euler() {
        let g = grid(1.0, 1000);
        let noise = BrownianBundle::new(1, 8, 1, g).unwrap();
        let ens = simulate_particles(&LinearMeanField::new(1.0, 0.0, 1.0), &[1.0], 0.0, &noise).unwrap();
        let e = std::f64::consts::E;
        for j in 0..8 {
            assert!((ens.at(j, 1000)[0] - e).abs() <= 5.0 * e * g.dt());
        }
    }

    #[test]
    fn driftless_particles_are_gaussian() {
        let g = grid(1.0, 50);
        let eps = 0.3;
        let noise = BrownianBundle::new(17, 4000, 1, g).unwrap();
        let ens = simulate_particles(&LinearMeanField::new(0.0, 0.0, 1.0), &[2.0], eps, &noise).unwrap();
        let xs = ens.column(50, 0);
        let var = sample_variance(&xs);
        let sd = (2.0 * (eps * eps) / 3999.0).sqrt();
        assert!((var - eps).abs() < 4.0 * sd, "{var}");
    }

    #[test]
    fn same_seed_same_ensemble() {
        let g = grid(1.0, 40);
        let model = KuramotoModel::new(1.0, 0.5, 1.0);
        let a = simulate_particles(&model, &[0.2], 0.1, &BrownianBundle::new(5, 64, 1, g).unwrap()).unwrap();
        let b = simulate_particles(&model, &[0.2], 0.1, &BrownianBundle::new(5, 64, 1, g).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ensembles_do_not_depend_on_thread_count() {
        let g = grid(1.0, 40);
        let model = KuramotoModel::new(1.0, 0.5, 1.0);
        let noise = BrownianBundle::new(5, 256, 1, g).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| {
                    let lim = solve_limit_ode(&model, &[0.2], &g).unwrap();
                    (
                        simulate_particle_groups(&model, &[0.2], 0.1, &noise, 64).unwrap(),
                        simulate_fluctuation(&model, &lim, &noise, MeanMode::SampleMean).unwrap(),
                        simulate_decoupled(&model, &lim, 0.1, &noise).unwrap(),
                    )
                })
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn ou_fluctuation_variance() {
        // m = 0 removes the c-term: Var Z(T) = s^2 (e^{2aT} - 1) / (2a).
        let g = grid(1.0, 500);
        for (a, s) in [(1.0, 1.0), (-1.0, 2.0), (0.0, 1.5)] {
            let model = LinearMeanField::new(a, 0.8, s);
            let lim = solve_limit_ode(&model, &[1.0], &g).unwrap();
            let noise = BrownianBundle::new(23, 8000, 1, g).unwrap();
            let z = simulate_fluctuation(&model, &lim, &noise, MeanMode::Analytic).unwrap();
            let var = sample_variance(&z.column(500, 0));
            let exact: f64 = if a == 0.0 { s * s } else { s * s * ((2.0 * a).exp() - 1.0) / (2.0 * a) };
            let sd = exact * (2.0 / 7999.0f64).sqrt();
            assert!((var - exact).abs() < 4.0 * sd, "a={a}: {var} vs {exact}");
        }
    }

    #[test]
    fn noiseless_fluctuation_vanishes() {
        let g = grid(1.0, 100);
        let model = LinearMeanField::new(1.0, 1.0, 0.0);
        let lim = solve_limit_ode(&model, &[1.0], &g).unwrap();
        let noise = BrownianBundle::new(1, 10, 1, g).unwrap();
        for mode in [MeanMode::Analytic, MeanMode::SampleMean] {
            let z = simulate_fluctuation(&model, &lim, &noise, mode).unwrap();
            assert!(z.values().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn sample_mean_mode_tracks_analytic_mode() {
        let g = grid(1.0, 200);
        let model = LinearMeanField::new(0.5, 1.0, 1.0);
        let lim = solve_limit_ode(&model, &[1.0], &g).unwrap();
        let m = 10_000;
        let noise = BrownianBundle::new(77, m, 1, g).unwrap();
        let za = simulate_fluctuation(&model, &lim, &noise, MeanMode::Analytic).unwrap();
        let zs = simulate_fluctuation(&model, &lim, &noise, MeanMode::SampleMean).unwrap();
        let sq: f64 = (0..m)
            .map(|j| {
                za.path(j)
                    .iter()
                    .zip(zs.path(j))
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
                    .powi(2)
            })
            .sum();
        let rms = (sq / m as f64).sqrt();
        assert!(rms <= 5.0 / (m as f64).sqrt(), "{rms}");
    }

    #[test]
    fn fluctuation_rejects_grid_mismatch() {
        let model = LinearMeanField::new(1.0, 1.0, 1.0);
        let lim = solve_limit_ode(&model, &[1.0], &grid(1.0, 10)).unwrap();
        let noise = BrownianBundle::new(1, 4, 1, grid(1.0, 20)).unwrap();
        let err = simulate_fluctuation(&model, &lim, &noise, MeanMode::Analytic).unwrap_err();
        assert!(matches!(err, LabError::Contract(_)));
    }

    #[test]
    fn driftless_deviation_is_scaled_brownian_motion() {
        let g = grid(1.0, 100);
        let noise = BrownianBundle::new(4, 16, 1, g).unwrap();
        let (eps, lambda) = (1e-3, 4.0);
        let dev = deviation_processes(&LinearMeanField::new(0.0, 0.0, 1.0), &[0.5], eps, lambda, &noise, 16).unwrap();
        for j in 0..16 {
            let mut w = 0.0;
            for k in 0..100 {
                w += noise.increment(j, k)[0];
                let xbar = dev.xbar.at(j, k + 1)[0];
                assert!((xbar - w / lambda).abs() < 1e-11, "{xbar} vs {}", w / lambda);
            }
        }
    }

    #[test]
    fn law_free_model_couples_bitwise() {
        let g = grid(1.0, 200);
        let noise = BrownianBundle::new(8, 64, 1, g).unwrap();
        let dev = deviation_processes(&LinearMeanField::new(0.8, 0.0, 1.3), &[1.0], 1e-2, 3.0, &noise, 32).unwrap();
        assert_eq!(dev.xbar.values(), dev.ybar.values());
    }

    #[test]
    fn shared_increments_are_identical_across_processes() {
        // Driftless, unit noise: Z, (X - x0)/sqrt(eps) and (Y - x0)/sqrt(eps)
        // all equal the summed increments.
        let g = grid(1.0, 30);
        let noise = BrownianBundle::new(12, 5, 1, g).unwrap();
        let model = LinearMeanField::new(0.0, 0.0, 1.0);
        let lim = solve_limit_ode(&model, &[0.0], &g).unwrap();
        let z = simulate_fluctuation(&model, &lim, &noise, MeanMode::Analytic).unwrap();
        let x = simulate_particles(&model, &[0.0], 1.0, &noise).unwrap();
        let y = simulate_decoupled(&model, &lim, 1.0, &noise).unwrap();
        assert_eq!(z.values(), x.values());
        assert_eq!(x.values(), y.values());
    }

    #[test]
    fn moments_are_stable_in_particle_number() {
        let g = grid(1.0, 100);
        let models: [Box<dyn CoefficientModel>; 2] = [
            Box::new(LinearMeanField::new(1.0, 1.0, 1.0)),
            Box::new(KuramotoModel::new(1.0, 0.5, 1.0)),
        ];
        for model in &models {
            for p in [2.0, 4.0] {
                let est = |n: usize| {
                    let noise = BrownianBundle::new(31, 4096, 1, g).unwrap();
                    let ens = simulate_particle_groups(model.as_ref(), &[1.0], 0.1, &noise, n).unwrap();
                    let v = ens.sup_deviation_powers(None, p).unwrap();
                    v.iter().sum::<f64>() / v.len() as f64
                };
                let (a, b) = (est(512), est(1024));
                assert!(a.is_finite() && ((a - b) / a).abs() < 0.1, "{} p={p}: {a} {b}", model.kind());
            }
        }
    }

    #[test]
    fn strong_order_against_fine_reference() {
        // Same Brownian paths observed on nested grids; the finest Euler run
        // stands in for the exact Gaussian solution.
        let model = LinearMeanField::new(1.0, 0.0, 1.0);
        let fine = BrownianBundle::new(2024, 2000, 1, grid(1.0, 4096)).unwrap();
        let eps = 0.5;
        let reference = simulate_particle_groups(&model, &[1.0], eps, &fine, 1).unwrap();
        let exact = reference.column(4096, 0);
        let mut log_dt = Vec::new();
        let mut log_err = Vec::new();
        for factor in [16, 32, 64, 128] {
            let coarse = fine.coarsened(factor).unwrap();
            let ens = simulate_particle_groups(&model, &[1.0], eps, &coarse, 1).unwrap();
            let n = coarse.grid().steps();
            let mse: f64 = ens.column(n, 0).iter().zip(&exact).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 2000.0;
            log_dt.push(coarse.grid().dt().ln());
            log_err.push(0.5 * mse.ln());
        }
        let (slope, _) = crate::stats::ols(&log_dt, &log_err).unwrap();
        assert!((0.45..=1.2).contains(&slope), "{slope}");
    }

    #[test]
    fn csv_layout() {
        let g = grid(1.0, 2);
        let noise = BrownianBundle::new(1, 2, 1, g).unwrap();
        let ens = simulate_particles(&LinearMeanField::new(0.0, 0.0, 1.0), &[0.0], 0.0, &noise).unwrap();
        let mut buf = Vec::new();
        ens.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "replica,step,time,component_0");
        assert_eq!(lines[1], "0,0,0,0");
        assert_eq!(lines[3], "0,2,1,0");
        assert_eq!(lines[4], "1,0,0,0");
        assert_eq!(lines.len(), 7);
    }
}
