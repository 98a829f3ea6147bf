//! Soft-input MAP estimation of the phase vector.
//!
//! The log-posterior (up to a constant) is
//!
//! ```text
//! l(theta) = sum_k (2 / s2_k) Re{ y_k conj(s_k) exp(-j theta_k) } - theta^T C^-1 theta / 2
//! ```
//!
//! with gradient `g_k = (2 / s2_k) Im{...} - [C^-1 theta]_k` and Hessian
//! `H = -(2 diag(Re{...} / s2_k) + C^-1)`. The maximizer is found by
//! Newton-Raphson started from a linear interpolation of the pilot ML
//! phases. `H` is negative definite whenever every `Re{...}` is
//! non-negative, which holds with high probability at moderate SNR.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::pn_process::PriorCovariance;
use crate::signal::ObservationBlock;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MapError {
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("observation block has no pilots")]
    NoPilots,
    #[error("Newton system is singular")]
    SingularHessian,
    #[error("information matrix is singular")]
    SingularMatrix,
    #[error("error covariance check needs a data-aided block")]
    NotDataAided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StepDamping {
    /// Plain Newton steps.
    None,
    /// Newton direction (diagonally shifted where the Hessian is not
    /// negative definite) with step halving until `l` does not decrease.
    #[default]
    Backtracking,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapOptions {
    /// Stop once `max_k |g_k|` falls below this.
    pub gradient_tolerance: f64,
    pub max_iterations: usize,
    pub step_damping: StepDamping,
}

impl Default for MapOptions {
    fn default() -> Self {
        Self {
            gradient_tolerance: 1e-6,
            max_iterations: 50,
            step_damping: StepDamping::Backtracking,
        }
    }
}

const MAX_HALVINGS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateResult {
    /// Unwrapped phase estimates, rad.
    pub phases: Vec<f64>,
    /// Soft-input BCRB per sample, rad^2.
    pub error_variances: Vec<f64>,
    pub iterations_used: usize,
    pub converged: bool,
    pub final_gradient_norm: f64,
}

fn check_dims(phases: &[f64], obs: &ObservationBlock, prior: &PriorCovariance) -> Result<(), MapError> {
    let expected = prior.dim();
    for found in [phases.len(), obs.len()] {
        if found != expected {
            return Err(MapError::DimensionMismatch { expected, found });
        }
    }
    Ok(())
}

/// `c_k exp(-j theta_k) / s2_k` for every sample.
fn rotated_terms(phases: &[f64], obs: &ObservationBlock) -> Vec<Complex64> {
    phases
        .iter()
        .enumerate()
        .map(|(k, &t)| obs.correlation(k) * Complex64::from_polar(1.0, -t) / obs.effective_noise(k))
        .collect()
}

pub fn log_posterior(
    phases: &[f64],
    obs: &ObservationBlock,
    prior: &PriorCovariance,
) -> Result<f64, MapError> {
    check_dims(phases, obs, prior)?;
    let data: f64 = rotated_terms(phases, obs).iter().map(|z| 2.0 * z.re).sum();
    Ok(data - 0.5 * prior.quadratic_form(phases))
}

pub fn gradient(
    phases: &[f64],
    obs: &ObservationBlock,
    prior: &PriorCovariance,
) -> Result<Vec<f64>, MapError> {
    check_dims(phases, obs, prior)?;
    let pull = prior.apply_precision(phases);
    Ok(rotated_terms(phases, obs)
        .iter()
        .zip(pull)
        .map(|(z, p)| 2.0 * z.im - p)
        .collect())
}

pub fn hessian(
    phases: &[f64],
    obs: &ObservationBlock,
    prior: &PriorCovariance,
) -> Result<DMatrix<f64>, MapError> {
    check_dims(phases, obs, prior)?;
    Ok(-curvature(&rotated_terms(phases, obs), prior))
}

/// `-H = 2 diag(Re{...}) + C^-1`.
fn curvature(terms: &[Complex64], prior: &PriorCovariance) -> DMatrix<f64> {
    let mut m = prior.precision().clone();
    for (k, z) in terms.iter().enumerate() {
        m[(k, k)] += 2.0 * z.re;
    }
    m
}

/// Wraps to `(-pi, pi]`.
pub fn wrap_phase(x: f64) -> f64 {
    let w = x - 2.0 * PI * (x / (2.0 * PI)).round();
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

/// Pilots averaged into the unwrapping reference.
const UNWRAP_SPAN: usize = 4;

/// Pilot ML phases `arg(y_k conj(s_k))`, unwrapped in index order.
///
/// Each pilot is unwrapped against the `|s_k|^2 / sigma_k^2` weighted mean of
/// the previous few unwrapped pilots, so one weak pilot with a phase error
/// near `pi` does not shift every later pilot by a cycle.
pub fn pilot_phases(obs: &ObservationBlock) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64)> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    for k in obs.pilot_indices() {
        let raw = wrap_phase(obs.correlation(k).arg());
        let start = out.len().saturating_sub(UNWRAP_SPAN);
        let total: f64 = weights[start..].iter().sum();
        let value = if total > 0.0 {
            let reference = out[start..]
                .iter()
                .zip(&weights[start..])
                .map(|(&(_, v), w)| v * w)
                .sum::<f64>()
                / total;
            reference + wrap_phase(raw - reference)
        } else {
            raw
        };
        out.push((k, value));
        weights.push(obs.soft_symbols()[k].norm_sqr() / obs.effective_noise(k));
    }
    out
}

/// Linear interpolation of the unwrapped pilot ML phases, held constant
/// outside the first and last pilot.
pub fn ml_pilot_init(obs: &ObservationBlock) -> Result<Vec<f64>, MapError> {
    let pilots = pilot_phases(obs);
    if pilots.is_empty() {
        return Err(MapError::NoPilots);
    }
    let mut out = Vec::with_capacity(obs.len());
    let mut seg = 0;
    for k in 0..obs.len() {
        while seg + 1 < pilots.len() && pilots[seg + 1].0 <= k {
            seg += 1;
        }
        let (k0, v0) = pilots[seg];
        let value = if k <= k0 || seg + 1 == pilots.len() {
            v0
        } else {
            let (k1, v1) = pilots[seg + 1];
            v0 + (v1 - v0) * (k - k0) as f64 / (k1 - k0) as f64
        };
        out.push(value);
    }
    Ok(out)
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Rounding allowance for comparing two evaluations of `l`.
fn comparison_slack(phases: &[f64], obs: &ObservationBlock, prior: &PriorCovariance) -> f64 {
    let data: f64 = (0..obs.len())
        .map(|k| 2.0 * obs.correlation(k).norm() / obs.effective_noise(k))
        .sum();
    let quad = prior.quadratic_form(phases).abs();
    64.0 * f64::EPSILON * (data + quad + 1.0)
}

/// Solves `(-H) step = g` for the Newton step.
fn newton_step(
    terms: &[Complex64],
    grad: &[f64],
    prior: &PriorCovariance,
    damping: StepDamping,
) -> Result<DVector<f64>, MapError> {
    let rhs = DVector::from_column_slice(grad);
    let m = curvature(terms, prior);
    match damping {
        StepDamping::None => m.lu().solve(&rhs).ok_or(MapError::SingularHessian),
        StepDamping::Backtracking => {
            if let Some(chol) = m.clone().cholesky() {
                return Ok(chol.solve(&rhs));
            }
            // Shift the data curvature up to zero where it is negative so
            // the system is positive definite and the step is an ascent
            // direction.
            let deficit = terms.iter().map(|z| (-2.0 * z.re).max(0.0)).fold(0.0, f64::max);
            let mut shift = deficit.max(f64::EPSILON);
            for _ in 0..8 {
                let mut shifted = m.clone();
                for k in 0..shifted.nrows() {
                    shifted[(k, k)] += shift;
                }
                if let Some(chol) = shifted.cholesky() {
                    return Ok(chol.solve(&rhs));
                }
                shift *= 10.0;
            }
            Err(MapError::SingularHessian)
        }
    }
}

/// Newton-Raphson maximization of the log-posterior from the pilot ML
/// initialization. A run that hits `max_iterations` returns the best
/// iterate with `converged == false`.
pub fn estimate_map(
    obs: &ObservationBlock,
    prior: &PriorCovariance,
    opts: &MapOptions,
) -> Result<EstimateResult, MapError> {
    let init = ml_pilot_init(obs)?;
    estimate_map_from(obs, prior, opts, init)
}

/// As [`estimate_map`], starting from `init`.
pub fn estimate_map_from(
    obs: &ObservationBlock,
    prior: &PriorCovariance,
    opts: &MapOptions,
    init: Vec<f64>,
) -> Result<EstimateResult, MapError> {
    check_dims(&init, obs, prior)?;
    let mut theta = init;
    let mut value = log_posterior(&theta, obs, prior)?;
    let mut best = (value, theta.clone(), f64::INFINITY);
    let mut iterations = 0;
    let mut converged = false;
    let mut grad_norm;

    loop {
        let grad = gradient(&theta, obs, prior)?;
        grad_norm = inf_norm(&grad);
        if value >= best.0 {
            best = (value, theta.clone(), grad_norm);
        }
        if grad_norm < opts.gradient_tolerance {
            converged = true;
            break;
        }
        if iterations >= opts.max_iterations {
            break;
        }
        let terms = rotated_terms(&theta, obs);
        let step = newton_step(&terms, &grad, prior, opts.step_damping)?;
        iterations += 1;
        match opts.step_damping {
            StepDamping::None => {
                for (t, s) in theta.iter_mut().zip(step.iter()) {
                    *t += s;
                }
                value = log_posterior(&theta, obs, prior)?;
            }
            StepDamping::Backtracking => {
                let slack = comparison_slack(&theta, obs, prior);
                let mut scale = 1.0;
                let mut accepted = None;
                for _ in 0..=MAX_HALVINGS {
                    let cand: Vec<f64> =
                        theta.iter().zip(step.iter()).map(|(t, s)| t + scale * s).collect();
                    let cand_value = log_posterior(&cand, obs, prior)?;
                    if cand_value >= value - slack {
                        accepted = Some((cand, cand_value));
                        break;
                    }
                    scale *= 0.5;
                }
                let Some((cand, cand_value)) = accepted else {
                    break;
                };
                theta = cand;
                value = cand_value;
            }
        }
    }

    let (phases, final_gradient_norm) = if converged {
        (theta, grad_norm)
    } else {
        (best.1, best.2)
    };
    Ok(EstimateResult {
        phases,
        error_variances: soft_bcrb(obs, prior)?,
        iterations_used: iterations,
        converged,
        final_gradient_norm,
    })
}

/// Expected Fisher information plus prior precision,
/// `-H~ = 2 diag(|s_k|^2 / s2_k) + C^-1`.
pub fn bayesian_information(
    obs: &ObservationBlock,
    prior: &PriorCovariance,
) -> Result<DMatrix<f64>, MapError> {
    if obs.len() != prior.dim() {
        return Err(MapError::DimensionMismatch {
            expected: prior.dim(),
            found: obs.len(),
        });
    }
    let mut m = prior.precision().clone();
    for k in 0..obs.len() {
        m[(k, k)] += 2.0 * obs.soft_symbols()[k].norm_sqr() / obs.effective_noise(k);
    }
    Ok(m)
}

/// Soft-input Bayesian Cramer-Rao bound: `diag((-H~)^-1)`.
pub fn soft_bcrb(obs: &ObservationBlock, prior: &PriorCovariance) -> Result<Vec<f64>, MapError> {
    let info = bayesian_information(obs, prior)?;
    let chol = info.cholesky().ok_or(MapError::SingularMatrix)?;
    Ok(chol.inverse().diagonal().iter().copied().collect())
}

/// Monte-Carlo check of `E[g g^T] = -H~` at the true phases.
///
/// Each trial draws the true phases from the prior and fresh observation
/// noise `CN(0, s2_k)` around the block's known symbols, then evaluates the
/// gradient there. Returns `(empirical E[g g^T], -H~)`.
pub fn error_covariance_check(
    obs: &ObservationBlock,
    prior: &PriorCovariance,
    n_trials: usize,
    seed: u64,
) -> Result<(DMatrix<f64>, DMatrix<f64>), MapError> {
    if !obs.pilot_mask().iter().all(|&p| p) {
        return Err(MapError::NotDataAided);
    }
    let predicted = bayesian_information(obs, prior)?;
    let dim = obs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = DMatrix::<f64>::zeros(dim, dim);
    let symbols = obs.soft_symbols().to_vec();
    for _ in 0..n_trials {
        let truth = prior.sample(&mut rng);
        let received: Vec<Complex64> = (0..dim)
            .map(|k| {
                let sd = (obs.effective_noise(k) / 2.0).sqrt();
                let w = Complex64::new(
                    rand::Rng::sample::<f64, _>(&mut rng, StandardNormal),
                    rand::Rng::sample::<f64, _>(&mut rng, StandardNormal),
                ) * sd;
                symbols[k] * Complex64::from_polar(1.0, truth[k]) + w
            })
            .collect();
        let trial = ObservationBlock::new(
            received,
            symbols.clone(),
            obs.symbol_uncertainty().to_vec(),
            obs.channel_noise_variance(),
            obs.pilot_mask().to_vec(),
        )
        .expect("derived from a valid block");
        let g = DVector::from_vec(gradient(&truth, &trial, prior)?);
        acc += &g * g.transpose();
    }
    Ok((acc / n_trials as f64, predicted))
}
