//! Symbol detection and the iterative estimation-detection loop.
//!
//! Each data symbol's posterior over the constellation is computed from the
//! de-rotated sample `y[k] exp(-j theta_hat[k])` with a uniform prior. Its
//! mean and variance become the soft symbol and symbol uncertainty for the
//! next estimation pass.

use num_complex::Complex64;
use thiserror::Error;

use crate::baselines::{dct_estimate, white_eks, BaselineError, DctOptions};
use crate::kalman::{eks_smooth, AugmentedStateModel, KalmanError};
use crate::map::{estimate_map, MapError, MapOptions};
use crate::pn_process::PriorCovariance;
use crate::signal::{Constellation, ObservationBlock, SignalError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("at least one estimation-detection iteration is required")]
    NoIterations,
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Kalman(#[from] KalmanError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftDecision {
    pub mean: Complex64,
    pub variance: f64,
    /// Constellation index of the most probable symbol.
    pub hard: usize,
}

/// Posterior soft decisions for every position. Pilot positions return
/// their known symbol with zero variance.
pub fn posterior_soft_symbols(
    received: &[Complex64],
    phases: &[f64],
    constellation: &Constellation,
    noise_variance: f64,
    pilot_mask: &[bool],
    pilot_symbols: &[Complex64],
) -> Result<Vec<SoftDecision>, EstimatorError> {
    let len = received.len();
    for found in [phases.len(), pilot_mask.len(), pilot_symbols.len()] {
        if found != len {
            return Err(EstimatorError::DimensionMismatch { expected: len, found });
        }
    }
    let points = constellation.points();
    let mut metric = vec![0.0; points.len()];
    let out = (0..len)
        .map(|k| {
            if pilot_mask[k] {
                return SoftDecision {
                    mean: pilot_symbols[k],
                    variance: 0.0,
                    hard: constellation.nearest(pilot_symbols[k]),
                };
            }
            let z = received[k] * Complex64::from_polar(1.0, -phases[k]);
            for (m, p) in metric.iter_mut().zip(points) {
                *m = -(z - p).norm_sqr() / noise_variance;
            }
            let mut hard = 0;
            for (i, &m) in metric.iter().enumerate() {
                if m > metric[hard] {
                    hard = i;
                }
            }
            let top = metric[hard];
            let mut total = 0.0;
            for m in metric.iter_mut() {
                *m = (*m - top).exp();
                total += *m;
            }
            let mut mean = Complex64::new(0.0, 0.0);
            for (w, p) in metric.iter_mut().zip(points) {
                *w /= total;
                mean += p * *w;
            }
            let variance = metric
                .iter()
                .zip(points)
                .map(|(w, p)| w * (p - mean).norm_sqr())
                .sum();
            SoftDecision { mean, variance, hard }
        })
        .collect();
    Ok(out)
}

/// A phase estimator usable inside the detection loop.
#[derive(Debug, Clone)]
pub enum Estimator<'a> {
    Map {
        prior: &'a PriorCovariance,
        options: MapOptions,
    },
    /// EKS on an AR-augmented model.
    Eks {
        model: &'a AugmentedStateModel,
        theta1_variance: f64,
    },
    /// EKS that assumes white increments of the given variance.
    WhiteEks {
        increment_variance: f64,
        theta1_variance: f64,
    },
    /// DCT interpolation; `None` keeps half the pilot count.
    Dct { options: Option<DctOptions> },
    /// Returns the true phases; a reference for detection with perfect
    /// phase knowledge.
    Genie { phases: &'a [f64] },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseEstimate {
    pub phases: Vec<f64>,
    pub newton_iterations: Option<usize>,
    pub converged: bool,
}

impl Estimator<'_> {
    pub fn estimate(&self, obs: &ObservationBlock) -> Result<PhaseEstimate, EstimatorError> {
        let plain = |phases: Vec<f64>| PhaseEstimate {
            phases,
            newton_iterations: None,
            converged: true,
        };
        Ok(match self {
            Self::Map { prior, options } => {
                let r = estimate_map(obs, prior, options)?;
                PhaseEstimate {
                    phases: r.phases,
                    newton_iterations: Some(r.iterations_used),
                    converged: r.converged,
                }
            }
            Self::Eks {
                model,
                theta1_variance,
            } => plain(eks_smooth(obs, model, *theta1_variance)?.phases),
            Self::WhiteEks {
                increment_variance,
                theta1_variance,
            } => plain(white_eks(obs, *increment_variance, *theta1_variance)?.phases),
            Self::Dct { options } => {
                let opts = options.unwrap_or_else(|| {
                    DctOptions::half_of(obs.pilot_mask().iter().filter(|&&p| p).count())
                });
                plain(dct_estimate(obs, &opts)?)
            }
            Self::Genie { phases } => {
                if phases.len() != obs.len() {
                    return Err(EstimatorError::DimensionMismatch {
                        expected: obs.len(),
                        found: phases.len(),
                    });
                }
                plain(phases.to_vec())
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationDiagnostics {
    pub newton_iterations: Option<usize>,
    pub converged: bool,
    /// Hard decisions after this iteration.
    pub decisions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopOutcome {
    pub phases: Vec<f64>,
    pub decisions: Vec<usize>,
    pub soft: Vec<SoftDecision>,
    /// Block fed to the last estimation pass.
    pub final_block: ObservationBlock,
    pub iterations: Vec<IterationDiagnostics>,
}

/// Alternates phase estimation and soft detection `n_iterations` times.
///
/// The first pass sees data positions as `s_hat = 0` with unit uncertainty,
/// so it is driven by the pilots alone.
pub fn iterate(
    received: &[Complex64],
    pilot_mask: &[bool],
    pilot_symbols: &[Complex64],
    estimator: &Estimator<'_>,
    n_iterations: usize,
    constellation: &Constellation,
    noise_variance: f64,
) -> Result<LoopOutcome, EstimatorError> {
    if n_iterations == 0 {
        return Err(EstimatorError::NoIterations);
    }
    let len = received.len();
    let soft0: Vec<Complex64> = (0..len)
        .map(|k| {
            if pilot_mask[k] {
                pilot_symbols[k]
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
        .collect();
    let eps0: Vec<f64> = pilot_mask.iter().map(|&p| if p { 0.0 } else { 1.0 }).collect();
    let mut block = ObservationBlock::new(
        received.to_vec(),
        soft0,
        eps0,
        noise_variance,
        pilot_mask.to_vec(),
    )?;
    let rounds = if pilot_mask.iter().all(|&p| p) {
        1
    } else {
        n_iterations
    };

    let mut diagnostics = Vec::with_capacity(rounds);
    let mut round = 0;
    let (phases, soft) = loop {
        let est = estimator.estimate(&block)?;
        let soft = posterior_soft_symbols(
            received,
            &est.phases,
            constellation,
            noise_variance,
            pilot_mask,
            pilot_symbols,
        )?;
        diagnostics.push(IterationDiagnostics {
            newton_iterations: est.newton_iterations,
            converged: est.converged,
            decisions: soft.iter().map(|d| d.hard).collect(),
        });
        round += 1;
        if round == rounds {
            break (est.phases, soft);
        }
        block = block.with_soft_symbols(
            soft.iter().map(|d| d.mean).collect(),
            soft.iter().map(|d| d.variance).collect(),
        )?;
    };
    Ok(LoopOutcome {
        phases,
        decisions: soft.iter().map(|d| d.hard).collect(),
        soft,
        final_block: block,
        iterations: diagnostics,
    })
}
