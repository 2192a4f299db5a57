//! Coefficient models `(b, sigma)` with analytic derivatives.
//!
//! Every model implements [`CoefficientModel`]. Built-ins are registered by
//! their `kind` string in a [`ModelRegistry`], which is how the CLI turns a
//! config entry such as `{"kind": "kuramoto", "coupling": 1, "omega": 0,
//! "s": 1}` into a trait object.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::marker::PhantomData;

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::{norm, operator_norm};
use crate::measure::{wasserstein2, EmpiricalMeasure};

/// Drift and diffusion of a distribution-dependent SDE on R^d.
///
/// `drift_into` and `diffusion_into` are the hot-path entry points used by
/// the solvers; they write into caller-owned buffers (`d` entries and `d*d`
/// row-major entries respectively). Implementations must be pure.
pub trait CoefficientModel: Send + Sync + Debug {
    /// Registry name, e.g. `"linear_mean_field"`.
    fn kind(&self) -> &'static str;

    fn dim(&self) -> usize;

    fn drift_into(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]);

    fn diffusion_into(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]);

    /// Jacobian of `x -> b_t(x, mu)`.
    fn grad_drift(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure) -> DMatrix<f64>;

    /// L-derivative `D^L b_t(x, .)(mu)(y)`; row `i` is the derivative of the
    /// `i`-th drift component.
    fn lderiv_drift(
        &self,
        _t: f64,
        _x: &[f64],
        _mu: &EmpiricalMeasure,
        _y: &[f64],
    ) -> Result<DMatrix<f64>> {
        Err(LabError::unsupported(format!(
            "model `{}` has no analytic L-derivative",
            self.kind()
        )))
    }

    /// The increasing function `K(t)` of the Lipschitz assumption.
    fn lipschitz_bound(&self, t: f64) -> f64;

    /// Model parameters, echoed into experiment summaries.
    fn params(&self) -> serde_json::Value;

    /// Drift at every atom of `mu`, evaluated against `mu` itself; writes
    /// `mu.len() * d` entries. Override when the measure enters through a
    /// few statistics.
    fn drift_batch(&self, t: f64, mu: &EmpiricalMeasure, out: &mut [f64]) {
        let d = self.dim();
        for (atom, slot) in mu.atoms().zip(out.chunks_exact_mut(d)) {
            self.drift_into(t, atom, mu, slot);
        }
    }

    /// Diffusion at every atom of `mu`; writes `mu.len() * d * d` entries.
    fn diffusion_batch(&self, t: f64, mu: &EmpiricalMeasure, out: &mut [f64]) {
        let d = self.dim();
        for (atom, slot) in mu.atoms().zip(out.chunks_exact_mut(d * d)) {
            self.diffusion_into(t, atom, mu, slot);
        }
    }

    fn drift(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        self.drift_into(t, x, mu, out.as_mut_slice());
        out
    }

    fn diffusion(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure) -> DMatrix<f64> {
        let d = self.dim();
        let mut buf = vec![0.0; d * d];
        self.diffusion_into(t, x, mu, &mut buf);
        DMatrix::from_row_slice(d, d, &buf)
    }
}

fn check_dims(model: &dyn CoefficientModel, x: &[f64], mu: &EmpiricalMeasure) -> Result<()> {
    let d = model.dim();
    if x.len() != d || mu.dim() != d {
        return Err(LabError::contract(format!(
            "model dimension {d}, state dimension {}, measure dimension {}",
            x.len(),
            mu.dim()
        )));
    }
    Ok(())
}

/// `b_t(x, mu)` with dimension checks.
pub fn eval_drift(
    model: &dyn CoefficientModel,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
) -> Result<DVector<f64>> {
    check_dims(model, x, mu)?;
    let b = model.drift(t, x, mu);
    if b.iter().any(|v| !v.is_finite()) {
        return Err(LabError::contract("drift evaluated to a non-finite value"));
    }
    Ok(b)
}

/// `D^L b_t(x, .)(mu)(y)` with dimension checks.
pub fn eval_lderivative(
    model: &dyn CoefficientModel,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
    y: &[f64],
) -> Result<DMatrix<f64>> {
    check_dims(model, x, mu)?;
    if y.len() != model.dim() {
        return Err(LabError::contract("L-derivative point has the wrong dimension"));
    }
    model.lderiv_drift(t, x, mu, y)
}

// ---------------------------------------------------------------------------
// Built-in models

/// `b(x, mu) = a x + c mean(mu)`, `sigma = s`, in one dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearMeanField {
    pub a: f64,
    pub c: f64,
    pub s: f64,
}

impl LinearMeanField {
    pub fn new(a: f64, c: f64, s: f64) -> Self {
        Self { a, c, s }
    }
}

impl CoefficientModel for LinearMeanField {
    fn kind(&self) -> &'static str {
        "linear_mean_field"
    }

    fn dim(&self) -> usize {
        1
    }

    fn drift_into(&self, _t: f64, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        let m = mu.integrate(|y| y[0]);
        out[0] = self.a * x[0] + self.c * m;
    }

    fn diffusion_into(&self, _t: f64, _x: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]) {
        out[0] = self.s;
    }

    fn grad_drift(&self, _t: f64, _x: &[f64], _mu: &EmpiricalMeasure) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.a)
    }

    fn lderiv_drift(
        &self,
        _t: f64,
        _x: &[f64],
        _mu: &EmpiricalMeasure,
        _y: &[f64],
    ) -> Result<DMatrix<f64>> {
        Ok(DMatrix::from_element(1, 1, self.c))
    }

    fn lipschitz_bound(&self, _t: f64) -> f64 {
        // b(0, delta_0) = 0
        (self.a.abs() + self.c.abs()).max(self.s.abs())
    }

    fn params(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("plain struct")
    }

    fn drift_batch(&self, _t: f64, mu: &EmpiricalMeasure, out: &mut [f64]) {
        let m = mu.integrate(|y| y[0]);
        for (o, x) in out.iter_mut().zip(mu.flat_atoms()) {
            *o = self.a * x + self.c * m;
        }
    }

    fn diffusion_batch(&self, _t: f64, _mu: &EmpiricalMeasure, out: &mut [f64]) {
        out.fill(self.s);
    }
}

/// Mean-field Kuramoto drift `omega + K int sin(y - x) mu(dy)` with additive
/// noise `s`, in one dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KuramotoModel {
    pub coupling: f64,
    pub omega: f64,
    pub s: f64,
}

impl KuramotoModel {
    pub fn new(coupling: f64, omega: f64, s: f64) -> Self {
        Self { coupling, omega, s }
    }

    /// `(int sin y mu(dy), int cos y mu(dy))`
    fn phase_moments(mu: &EmpiricalMeasure) -> (f64, f64) {
        mu.atoms()
            .zip(mu.weights())
            .fold((0.0, 0.0), |(s, c), (y, w)| {
                let (sy, cy) = y[0].sin_cos();
                (s + w * sy, c + w * cy)
            })
    }
}

impl CoefficientModel for KuramotoModel {
    fn kind(&self) -> &'static str {
        "kuramoto"
    }

    fn dim(&self) -> usize {
        1
    }

    fn drift_into(&self, _t: f64, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        let (s, c) = Self::phase_moments(mu);
        let (sx, cx) = x[0].sin_cos();
        out[0] = self.omega + self.coupling * (s * cx - c * sx);
    }

    fn diffusion_into(&self, _t: f64, _x: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]) {
        out[0] = self.s;
    }

    fn grad_drift(&self, _t: f64, x: &[f64], mu: &EmpiricalMeasure) -> DMatrix<f64> {
        let (s, c) = Self::phase_moments(mu);
        let (sx, cx) = x[0].sin_cos();
        DMatrix::from_element(1, 1, -self.coupling * (c * cx + s * sx))
    }

    fn lderiv_drift(
        &self,
        _t: f64,
        x: &[f64],
        _mu: &EmpiricalMeasure,
        y: &[f64],
    ) -> Result<DMatrix<f64>> {
        Ok(DMatrix::from_element(1, 1, self.coupling * (y[0] - x[0]).cos()))
    }

    fn lipschitz_bound(&self, _t: f64) -> f64 {
        // |b(0, delta_0)| + |sigma| = |omega| + |s|; |b| <= |omega| + K.
        (self.omega.abs() + self.coupling.abs()).max(self.omega.abs() + self.s.abs())
    }

    fn params(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("plain struct")
    }

    fn drift_batch(&self, _t: f64, mu: &EmpiricalMeasure, out: &mut [f64]) {
        let (s, c) = Self::phase_moments(mu);
        for (o, x) in out.iter_mut().zip(mu.flat_atoms()) {
            let (sx, cx) = x.sin_cos();
            *o = self.omega + self.coupling * (s * cx - c * sx);
        }
    }

    fn diffusion_batch(&self, _t: f64, _mu: &EmpiricalMeasure, out: &mut [f64]) {
        out.fill(self.s);
    }
}

// ---------------------------------------------------------------------------
// Registry

/// Config entry naming a model: `kind` plus its parameters inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: String,
    #[serde(flatten)]
    pub params: serde_json::Map<String, serde_json::Value>,
}

/// Builds a model from its config parameters.
pub trait ModelFactory: Send + Sync {
    fn kind(&self) -> &'static str;
    fn build(&self, params: &serde_json::Map<String, serde_json::Value>) -> Result<Box<dyn CoefficientModel>>;
}

/// Factory for any model that deserializes straight from its parameters.
pub struct SerdeFactory<M> {
    kind: &'static str,
    _model: PhantomData<fn() -> M>,
}

impl<M> SerdeFactory<M> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            _model: PhantomData,
        }
    }
}

impl<M> ModelFactory for SerdeFactory<M>
where
    M: CoefficientModel + DeserializeOwned + 'static,
{
    fn kind(&self) -> &'static str {
        self.kind
    }

    fn build(&self, params: &serde_json::Map<String, serde_json::Value>) -> Result<Box<dyn CoefficientModel>> {
        let model: M = serde_json::from_value(serde_json::Value::Object(params.clone()))
            .map_err(|e| LabError::validation(format!("model `{}`: {e}", self.kind)))?;
        let p = model.params();
        let finite = p
            .as_object()
            .map(|o| o.values().all(|v| v.as_f64().is_none_or(f64::is_finite)))
            .unwrap_or(true);
        if !finite {
            return Err(LabError::validation(format!("model `{}` has non-finite parameters", self.kind)));
        }
        Ok(Box::new(model))
    }
}

pub struct ModelRegistry {
    factories: BTreeMap<&'static str, Box<dyn ModelFactory>>,
}

impl ModelRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    /// Registry with `linear_mean_field` and `kuramoto`.
    pub fn builtin() -> Self {
        let mut reg = Self::empty();
        reg.register(Box::new(SerdeFactory::<LinearMeanField>::new("linear_mean_field")));
        reg.register(Box::new(SerdeFactory::<KuramotoModel>::new("kuramoto")));
        reg
    }

    pub fn register(&mut self, factory: Box<dyn ModelFactory>) {
        self.factories.insert(factory.kind(), factory);
    }

    pub fn kinds(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.factories.keys().copied()
    }

    pub fn build(&self, spec: &ModelSpec) -> Result<Box<dyn CoefficientModel>> {
        let factory = self.factories.get(spec.kind.as_str()).ok_or_else(|| {
            LabError::validation(format!(
                "unknown model kind `{}` (known: {})",
                spec.kind,
                self.kinds().collect::<Vec<_>>().join(", ")
            ))
        })?;
        factory.build(&spec.params)
    }
}

impl Default for ModelRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

// ---------------------------------------------------------------------------
// Sampled assumption checks

/// A pair of arguments `(x, mu)`, `(y, nu)` for the Lipschitz check.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub x: Vec<f64>,
    pub mu: EmpiricalMeasure,
    pub y: Vec<f64>,
    pub nu: EmpiricalMeasure,
}

/// Random pairs with points in `[-half_width, half_width]^d` and uniform
/// measures of 1 to `max_atoms` atoms. Both measures of a pair share their
/// atom count so W2 is available in any dimension.
pub fn sample_pairs(dim: usize, count: usize, max_atoms: usize, half_width: f64, seed: u64) -> Vec<SamplePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unif = move || {
        let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        (2.0 * u - 1.0) * half_width
    };
    (0..count)
        .map(|i| {
            let m = 1 + i % max_atoms.max(1);
            let x: Vec<f64> = (0..dim).map(|_| unif()).collect();
            let y: Vec<f64> = (0..dim).map(|_| unif()).collect();
            let mu = EmpiricalMeasure::uniform(dim, (0..m * dim).map(|_| unif()).collect()).unwrap();
            let nu = EmpiricalMeasure::uniform(dim, (0..m * dim).map(|_| unif()).collect()).unwrap();
            SamplePair { x, mu, y, nu }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct LipschitzWitness {
    pub pair: usize,
    pub t: f64,
    pub ratio: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LipschitzReport {
    pub max_ratio: f64,
    pub witness: Option<LipschitzWitness>,
    /// Some sampled ratio exceeded `K(t)`.
    pub violation: bool,
    pub evaluated: usize,
    /// Pairs with `|x - y| + W2(mu, nu) = 0`.
    pub skipped: usize,
}

/// Relative slack on `K(t)` before a ratio is flagged.
pub const LIPSCHITZ_SLACK: f64 = 1e-9;

/// Largest sampled value of
/// `(|b(x,mu) - b(y,nu)| + ||sigma(x,mu) - sigma(y,nu)||) / (|x - y| + W2(mu,nu))`.
pub fn check_lipschitz(
    model: &dyn CoefficientModel,
    pairs: &[SamplePair],
    t_grid: &[f64],
) -> Result<LipschitzReport> {
    let mut report = LipschitzReport {
        max_ratio: 0.0,
        witness: None,
        violation: false,
        evaluated: 0,
        skipped: 0,
    };
    for (i, pair) in pairs.iter().enumerate() {
        check_dims(model, &pair.x, &pair.mu)?;
        check_dims(model, &pair.y, &pair.nu)?;
        let dx: Vec<f64> = pair.x.iter().zip(&pair.y).map(|(a, b)| a - b).collect();
        let denom = norm(&dx) + wasserstein2(&pair.mu, &pair.nu)?;
        if denom == 0.0 {
            report.skipped += 1;
            continue;
        }
        for &t in t_grid {
            let db = model.drift(t, &pair.x, &pair.mu) - model.drift(t, &pair.y, &pair.nu);
            let ds = model.diffusion(t, &pair.x, &pair.mu) - model.diffusion(t, &pair.y, &pair.nu);
            let ratio = (db.norm() + operator_norm(&ds)) / denom;
            let bound = model.lipschitz_bound(t);
            report.evaluated += 1;
            if ratio > bound * (1.0 + LIPSCHITZ_SLACK) {
                report.violation = true;
            }
            if ratio > report.max_ratio {
                report.max_ratio = ratio;
                report.witness = Some(LipschitzWitness { pair: i, t, ratio, bound });
            }
        }
    }
    Ok(report)
}

/// `(|b_t(0, delta_0)| + ||sigma_t(0, delta_0)||, K(t))`.
pub fn growth_at_origin(model: &dyn CoefficientModel, t: f64) -> (f64, f64) {
    let zero = vec![0.0; model.dim()];
    let delta0 = EmpiricalMeasure::dirac(&zero);
    let lhs = model.drift(t, &zero, &delta0).norm() + operator_norm(&model.diffusion(t, &zero, &delta0));
    (lhs, model.lipschitz_bound(t))
}

/// Largest entrywise error of `grad_drift` against central differences of
/// the drift with step `h`, relative to `max(1, |entry|)`.
pub fn check_gradient(model: &dyn CoefficientModel, t: f64, x: &[f64], mu: &EmpiricalMeasure, h: f64) -> Result<f64> {
    check_dims(model, x, mu)?;
    let d = model.dim();
    let analytic = model.grad_drift(t, x, mu);
    let mut worst: f64 = 0.0;
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    for j in 0..d {
        xp[j] = x[j] + h;
        xm[j] = x[j] - h;
        let fd = (model.drift(t, &xp, mu) - model.drift(t, &xm, mu)) / (2.0 * h);
        for i in 0..d {
            let a = analytic[(i, j)];
            worst = worst.max((fd[i] - a).abs() / a.abs().max(1.0));
        }
        xp[j] = x[j];
        xm[j] = x[j];
    }
    Ok(worst)
}

#[derive(Debug, Clone, Serialize)]
pub struct LDerivativeReport {
    pub eps_ladder: Vec<f64>,
    /// `(b(x, mu o (Id + eps phi)^-1) - b(x, mu)) / eps` per rung.
    pub quotients: Vec<Vec<f64>>,
    /// `sum_i w_i D^L b(x, .)(mu)(xi_i) phi(xi_i)`.
    pub reference: Vec<f64>,
    pub errors: Vec<f64>,
    /// Error of the first-order Richardson limit from the two finest rungs.
    pub extrapolated_error: f64,
}

/// Compares difference quotients along the pushforward `mu o (Id + eps phi)^-1`
/// with the pairing of the analytic L-derivative against `phi`.
pub fn check_lderivative(
    model: &dyn CoefficientModel,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
    y_field: &[f64],
    eps_ladder: &[f64],
) -> Result<LDerivativeReport> {
    check_dims(model, x, mu)?;
    let d = model.dim();
    if y_field.len() != mu.len() * d {
        return Err(LabError::contract("perturbation field must give one d-vector per atom"));
    }
    if eps_ladder.is_empty() || eps_ladder.iter().any(|e| !(*e > 0.0)) {
        return Err(LabError::contract("eps ladder must be nonempty and positive"));
    }
    if eps_ladder.windows(2).any(|w| w[1] >= w[0]) {
        return Err(LabError::contract("eps ladder must be strictly decreasing"));
    }
    let mut reference = DVector::zeros(d);
    for (i, (atom, w)) in mu.atoms().zip(mu.weights()).enumerate() {
        let l = model.lderiv_drift(t, x, mu, atom)?;
        let phi = DVector::from_column_slice(&y_field[i * d..(i + 1) * d]);
        reference += *w * (l * phi);
    }
    let base = model.drift(t, x, mu);
    let mut quotients = Vec::with_capacity(eps_ladder.len());
    let mut errors = Vec::with_capacity(eps_ladder.len());
    for &eps in eps_ladder {
        let scaled: Vec<f64> = y_field.iter().map(|v| eps * v).collect();
        let pushed = mu.perturb(&scaled)?;
        let q = (model.drift(t, x, &pushed) - &base) / eps;
        errors.push((&q - &reference).norm());
        quotients.push(q.iter().copied().collect::<Vec<_>>());
    }
    let extrapolated_error = match quotients.len() {
        1 => errors[0],
        k => {
            let (e1, e2) = (eps_ladder[k - 2], eps_ladder[k - 1]);
            let q1 = DVector::from_column_slice(&quotients[k - 2]);
            let q2 = DVector::from_column_slice(&quotients[k - 1]);
            let limit = (q2 * e1 - q1 * e2) / (e1 - e2);
            (limit - &reference).norm()
        }
    };
    Ok(LDerivativeReport {
        eps_ladder: eps_ladder.to_vec(),
        quotients,
        reference: reference.iter().copied().collect(),
        errors,
        extrapolated_error,
    })
}
