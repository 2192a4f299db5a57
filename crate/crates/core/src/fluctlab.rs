//! Coupled CLT experiments.
//!
//! `Z^eps = (X^eps - X^0) / sqrt(eps)` from the particle system is compared
//! with the fluctuation process `Z` built on the same Brownian increments,
//! and the decay of `E sup_t |Z^eps_t - Z_t|^p` in `eps` is fitted on a
//! log-log scale.

use serde::Serialize;

use crate::engine::{
    euler_limit_path, recentre, simulate_fluctuation_groups, simulate_particle_groups, BrownianBundle,
    MeanMode, PathEnsemble, ProcessLabel, TimeGrid,
};
use crate::error::{LabError, Result};
use crate::model::CoefficientModel;
use crate::stats::{mean_and_se, ols, quantile_sorted, Bootstrap};

#[derive(Debug, Clone, Serialize)]
pub struct CltErrorEstimate {
    pub estimate: f64,
    /// `None` when a single replica makes the variance undefined.
    pub standard_error: Option<f64>,
    /// `E sup_t |Z^eps_t|^p`, the scaled deviation moment.
    pub scaled_moment: f64,
    #[serde(skip)]
    pub per_replica: Vec<f64>,
}

/// Monte Carlo estimate of `E sup_k |Z^eps_k - Z_k|^p` over the replicas of
/// `noise`, grouped into particle systems of `particles` members.
///
/// Both `Z^eps` and the coefficients of `Z` are taken around the explicit
/// Euler solution of the limit ODE on the same grid, so the scheme's own
/// O(dt) bias cancels instead of being amplified by `1/sqrt(eps)`.
pub fn clt_error(
    model: &dyn CoefficientModel,
    x0: &[f64],
    epsilon: f64,
    p: f64,
    noise: &BrownianBundle,
    particles: usize,
    mode: MeanMode,
) -> Result<CltErrorEstimate> {
    if !(epsilon > 0.0) {
        return Err(LabError::contract("CLT scaling needs epsilon > 0"));
    }
    if !(p >= 2.0) {
        return Err(LabError::contract(format!("moment order must be >= 2, got {p}")));
    }
    let reference = euler_limit_path(model, x0, noise.grid())?;
    let x = simulate_particle_groups(model, x0, epsilon, noise, particles)?;
    let zeps = recentre(&x, &reference, 1.0 / epsilon.sqrt(), ProcessLabel::Fluctuation)?;
    let z = simulate_fluctuation_groups(model, &reference, noise, mode, particles)?;
    let per_replica = coupled_sup_powers(&zeps, &z, p);
    let (estimate, standard_error) = mean_and_se(&per_replica);
    let scaled = zeps.sup_deviation_powers(None, p)?;
    Ok(CltErrorEstimate {
        estimate,
        standard_error,
        scaled_moment: scaled.iter().sum::<f64>() / scaled.len() as f64,
        per_replica,
    })
}

fn coupled_sup_powers(a: &PathEnsemble, b: &PathEnsemble, p: f64) -> Vec<f64> {
    let d = a.dim();
    (0..a.replicas())
        .map(|j| {
            a.path(j)
                .chunks_exact(d)
                .zip(b.path(j).chunks_exact(d))
                .map(|(u, v)| u.iter().zip(v).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
                .fold(0.0, f64::max)
                .powf(p)
        })
        .collect()
}

/// Settings shared by every rung of a rate fit.
#[derive(Debug, Clone, Serialize)]
pub struct CltSettings {
    pub grid: TimeGrid,
    pub replicas: usize,
    pub particles: usize,
    pub seed: u64,
    pub mean_mode: MeanMode,
    pub bootstrap_resamples: usize,
}

/// Result of re-running the finest rung with twice as many particles per
/// system.
#[derive(Debug, Clone, Serialize)]
pub struct LawStability {
    pub epsilon: f64,
    pub particles: usize,
    pub estimate: f64,
    pub estimate_doubled: f64,
    pub relative_change: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CltExperimentResult {
    pub epsilon_ladder: Vec<f64>,
    pub p: f64,
    pub errors: Vec<f64>,
    pub standard_errors: Vec<Option<f64>>,
    /// `E sup |Z^eps|^p` per rung.
    pub scaled_moments: Vec<f64>,
    /// OLS slope of `log error` on `log eps`; `None` when fewer than two
    /// rungs have a positive estimate.
    pub fitted_slope: Option<f64>,
    pub slope_ci: Option<(f64, f64)>,
    /// Rungs left out of the regression because their estimate is 0.
    pub excluded: Vec<f64>,
    pub law_stability: Option<LawStability>,
    pub flags: Vec<String>,
}

fn slope_of(ladder: &[f64], errors: &[f64]) -> Option<f64> {
    let (x, y): (Vec<f64>, Vec<f64>) = ladder
        .iter()
        .zip(errors)
        .filter(|(_, e)| **e > 0.0)
        .map(|(l, e)| (l.ln(), e.ln()))
        .unzip();
    ols(&x, &y).map(|(s, _)| s)
}

pub fn validate_ladder(ladder: &[f64], min_len: usize) -> Result<()> {
    if ladder.len() < min_len {
        return Err(LabError::validation(format!(
            "epsilon ladder needs at least {min_len} points, got {}",
            ladder.len()
        )));
    }
    if ladder.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
        return Err(LabError::validation("epsilon ladder entries must be positive"));
    }
    if ladder.windows(2).any(|w| w[1] >= w[0]) {
        return Err(LabError::validation("epsilon ladder must be strictly decreasing"));
    }
    Ok(())
}

/// Coupled CLT errors along a decreasing `eps` ladder and their log-log
/// slope. All rungs share one Brownian bundle, and the bootstrap resamples
/// replicas jointly across rungs.
pub fn clt_rate_fit(
    model: &dyn CoefficientModel,
    x0: &[f64],
    epsilon_ladder: &[f64],
    p: f64,
    settings: &CltSettings,
) -> Result<CltExperimentResult> {
    validate_ladder(epsilon_ladder, 3)?;
    let noise = BrownianBundle::new(settings.seed, settings.replicas, model.dim(), settings.grid)?;
    let rungs: Vec<CltErrorEstimate> = epsilon_ladder
        .iter()
        .map(|&eps| clt_error(model, x0, eps, p, &noise, settings.particles, settings.mean_mode))
        .collect::<Result<_>>()?;
    let errors: Vec<f64> = rungs.iter().map(|r| r.estimate).collect();
    let mut flags = Vec::new();
    let excluded: Vec<f64> = epsilon_ladder
        .iter()
        .zip(&errors)
        .filter(|(_, e)| **e <= 0.0)
        .map(|(l, _)| *l)
        .collect();
    let fitted_slope = slope_of(epsilon_ladder, &errors);
    if fitted_slope.is_none() {
        flags.push("regression skipped: fewer than two rungs with a positive coupled error".to_string());
    }
    if rungs.iter().any(|r| r.standard_error.is_none()) {
        flags.push("standard errors unavailable with a single replica".to_string());
    }

    let slope_ci = if fitted_slope.is_some() && settings.bootstrap_resamples > 0 && settings.replicas > 1 {
        let mut boot = Bootstrap::new(settings.seed ^ 0x5eed_b007);
        let m = settings.replicas;
        let mut slopes: Vec<f64> = (0..settings.bootstrap_resamples)
            .filter_map(|_| {
                let idx = boot.resample(m);
                let est: Vec<f64> = rungs
                    .iter()
                    .map(|r| idx.iter().map(|&j| r.per_replica[j]).sum::<f64>() / m as f64)
                    .collect();
                slope_of(epsilon_ladder, &est)
            })
            .collect();
        slopes.sort_by(f64::total_cmp);
        (!slopes.is_empty()).then(|| (quantile_sorted(&slopes, 0.025), quantile_sorted(&slopes, 0.975)))
    } else {
        None
    };

    let finest = *epsilon_ladder.last().expect("validated");
    let doubled = clt_error(model, x0, finest, p, &noise, 2 * settings.particles, settings.mean_mode)?;
    let base = *errors.last().expect("validated");
    let relative_change = if base > 0.0 {
        (doubled.estimate - base).abs() / base
    } else if doubled.estimate == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    if relative_change > 0.25 {
        flags.push(format!(
            "finite-particle law error is not negligible: doubling N changes the finest rung by {:.0}%",
            100.0 * relative_change
        ));
    }

    Ok(CltExperimentResult {
        epsilon_ladder: epsilon_ladder.to_vec(),
        p,
        standard_errors: rungs.iter().map(|r| r.standard_error).collect(),
        scaled_moments: rungs.iter().map(|r| r.scaled_moment).collect(),
        errors,
        fitted_slope,
        slope_ci,
        excluded,
        law_stability: Some(LawStability {
            epsilon: finest,
            particles: settings.particles,
            estimate: base,
            estimate_doubled: doubled.estimate,
            relative_change,
        }),
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{KuramotoModel, LinearMeanField};

    fn settings(n: usize, m: usize, particles: usize, mode: MeanMode) -> CltSettings {
        CltSettings {
            grid: TimeGrid::new(1.0, n).unwrap(),
            replicas: m,
            particles,
            seed: 99,
            mean_mode: mode,
            bootstrap_resamples: 100,
        }
    }

    #[test]
    fn additive_driftless_coupling_is_exact() {
        let g = TimeGrid::new(1.0, 200).unwrap();
        let noise = BrownianBundle::new(3, 256, 1, g).unwrap();
        let est = clt_error(&LinearMeanField::new(0.0, 0.0, 1.5), &[0.4], 0.01, 2.0, &noise, 256, MeanMode::Analytic).unwrap();
        assert!(est.estimate < 1e-20, "{}", est.estimate);
    }

    #[test]
    fn single_replica_has_no_standard_error() {
        let g = TimeGrid::new(1.0, 50).unwrap();
        let noise = BrownianBundle::new(3, 1, 1, g).unwrap();
        let est = clt_error(&KuramotoModel::new(1.0, 0.0, 1.0), &[0.0], 0.1, 2.0, &noise, 1, MeanMode::Analytic).unwrap();
        assert!(est.standard_error.is_none());
        assert!(est.estimate.is_finite());
    }

    #[test]
    fn rejects_low_moment_order() {
        let g = TimeGrid::new(1.0, 10).unwrap();
        let noise = BrownianBundle::new(3, 4, 1, g).unwrap();
        assert!(clt_error(&KuramotoModel::new(1.0, 0.0, 1.0), &[0.0], 0.1, 1.5, &noise, 4, MeanMode::Analytic).is_err());
    }

    #[test]
    fn nonlinear_model_error_decreases_with_eps() {
        // Sample-mean coupling removes the eps-independent finite-N term,
        // leaving the nonlinear remainder of the drift.
        let model = KuramotoModel::new(1.0, 0.5, 1.0);
        let s = settings(200, 2048, 512, MeanMode::SampleMean);
        let res = clt_rate_fit(&model, &[0.3], &[1e-1, 3e-2, 1e-2, 3e-3], 2.0, &s).unwrap();
        assert!(res.errors.windows(2).all(|w| w[1] < w[0]), "{:?}", res.errors);
        let (lo, _) = res.slope_ci.unwrap();
        assert!(lo > 0.0, "{:?}", res.slope_ci);
        // Scaled moments stay bounded across the ladder.
        let max = res.scaled_moments.iter().copied().fold(0.0, f64::max);
        let min = res.scaled_moments.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(max < 2.0 * min, "{:?}", res.scaled_moments);
    }

    #[test]
    fn degenerate_coupling_skips_regression() {
        let s = settings(100, 64, 64, MeanMode::Analytic);
        let res = clt_rate_fit(&LinearMeanField::new(0.0, 0.0, 0.0), &[0.0], &[1e-1, 1e-2, 1e-3], 2.0, &s).unwrap();
        assert!(res.errors.iter().all(|e| *e == 0.0), "{:?}", res.errors);
        assert!(res.fitted_slope.is_none());
        assert_eq!(res.excluded.len(), 3);
        assert!(!res.flags.is_empty());
    }

    #[test]
    fn ladder_validation() {
        assert!(validate_ladder(&[1e-1, 1e-2], 3).is_err());
        assert!(validate_ladder(&[1e-1, 1e-2, 1e-2], 3).is_err());
        assert!(validate_ladder(&[1e-1, -1e-2, -1e-3], 3).is_err());
        assert!(validate_ladder(&[1e-1, 1e-2, 1e-3], 3).is_ok());
    }
}
