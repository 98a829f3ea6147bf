//! Monte-Carlo experiment harness: config-driven trials, aggregation and
//! CSV / plot-data output.

mod config;
mod output;

pub use config::{
    ConfigError, EstimatorSpec, Experiment, ExperimentConfig, IncrementSpec, SER_TARGET_SYMBOLS,
};
pub use output::{emit_csv, emit_plot_data, emit_sample_series, parse_csv, write_csv};

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::DctOptions;
use crate::detector::{iterate, Estimator};
use crate::kalman::{AugmentedStateModel, KalmanError};
use crate::map::{soft_bcrb, wrap_phase};
use crate::pn_process::{build_prior_covariance, ModelError, PriorCovariance, TrajectorySampler};
use crate::signal::{gray_qam, noise_variance_from_snr_db, transmit, uniform_pilots, SignalError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Kalman(#[from] KalmanError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    MseRad2,
    MseStderrRad2,
    MseWrappedRad2,
    BcrbRad2,
    Ser,
    SerStderr,
    AvgIterations,
    ConvergenceRate,
    FailureRate,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Self::MseRad2 => "mse_rad2",
            Self::MseStderrRad2 => "mse_stderr_rad2",
            Self::MseWrappedRad2 => "mse_wrapped_rad2",
            Self::BcrbRad2 => "bcrb_rad2",
            Self::Ser => "ser",
            Self::SerStderr => "ser_stderr",
            Self::AvgIterations => "avg_iterations",
            Self::ConvergenceRate => "convergence_rate",
            Self::FailureRate => "failure_rate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: Experiment,
    pub estimator: String,
    pub snr_db: f64,
    pub metric: Metric,
    pub value: f64,
    pub n_trials: usize,
    pub seed: u64,
}

/// Per-sample MSE (and BCRB for MAP) averaged over trials at one SNR.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSeries {
    pub estimator: String,
    pub snr_db: f64,
    pub mse: Vec<f64>,
    pub bcrb: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub rows: Vec<ResultRow>,
    /// Filled for [`Experiment::MseVsBcrb`] only.
    pub series: Vec<SampleSeries>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of one trial; depends only on its coordinates, never on the trial count.
pub fn trial_seed(master_seed: u64, snr_index: usize, trial_index: usize) -> u64 {
    let h = splitmix64(master_seed);
    let h = splitmix64(h ^ snr_index as u64);
    splitmix64(h ^ (trial_index as u64).wrapping_mul(0xd1b5_4a32_d192_ed03))
}

struct Prepared {
    prior: Option<PriorCovariance>,
    eks: Vec<Option<AugmentedStateModel>>,
    sampler: TrajectorySampler,
    increment_variance: f64,
}

fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, SimError> {
    let model = cfg.increment.build()?;
    let k = cfg.block_length;
    let needs_prior = cfg.estimators.contains(&EstimatorSpec::Map);
    let prior = if needs_prior {
        Some(build_prior_covariance(&model, k, cfg.theta1_variance)?)
    } else {
        None
    };
    let eks = cfg
        .estimators
        .iter()
        .map(|e| match e {
            EstimatorSpec::Eks { order } => AugmentedStateModel::fitted(&model, *order).map(Some),
            _ => Ok(None),
        })
        .collect::<Result<_, _>>()?;
    Ok(Prepared {
        prior,
        eks,
        sampler: TrajectorySampler::new(&model, k, cfg.theta1_variance)?,
        increment_variance: model.variance(),
    })
}

#[derive(Debug, Clone)]
struct EstimatorTrial {
    mse: f64,
    mse_wrapped: f64,
    per_sample: Option<Vec<f64>>,
    symbol_errors: usize,
    data_symbols: usize,
    newton: Vec<(usize, bool)>,
    bcrb: Option<Vec<f64>>,
}

fn run_trial(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    pilot_mask: &[bool],
    snr_index: usize,
    trial: usize,
) -> Vec<Option<EstimatorTrial>> {
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(cfg.master_seed, snr_index, trial));
    let constellation = gray_qam(cfg.constellation_order).expect("validated order");
    let sigma2 = noise_variance_from_snr_db(cfg.snr_grid_db[snr_index]);
    let k = cfg.block_length;

    let truth = prep.sampler.sample(rng.next_u64());
    let labels: Vec<usize> = (0..k)
        .map(|_| rng.random_range(0..constellation.order()))
        .collect();
    let symbols: Vec<Complex64> = labels.iter().map(|&i| constellation.points()[i]).collect();
    let received = transmit(&symbols, &truth, sigma2, rng.next_u64());
    let keep_samples = cfg.experiment == Experiment::MseVsBcrb;

    cfg.estimators
        .iter()
        .zip(&prep.eks)
        .map(|(spec, eks_model)| {
            let estimator = match spec {
                EstimatorSpec::Map => Estimator::Map {
                    prior: prep.prior.as_ref().expect("prepared"),
                    options: cfg.map_options,
                },
                EstimatorSpec::Eks { .. } => Estimator::Eks {
                    model: eks_model.as_ref().expect("prepared"),
                    theta1_variance: cfg.theta1_variance,
                },
                EstimatorSpec::WhiteEks => Estimator::WhiteEks {
                    increment_variance: prep.increment_variance,
                    theta1_variance: cfg.theta1_variance,
                },
                EstimatorSpec::Dct => Estimator::Dct {
                    options: cfg.dct_coefficients.map(|retained_coefficients| DctOptions {
                        retained_coefficients,
                    }),
                },
                EstimatorSpec::Genie => Estimator::Genie {
                    phases: &truth.values,
                },
            };
            let out = iterate(
                &received,
                pilot_mask,
                &symbols,
                &estimator,
                cfg.n_detection_iterations,
                &constellation,
                sigma2,
            )
            .ok()?;

            let err: Vec<f64> = out.phases.iter().zip(&truth.values).map(|(a, b)| a - b).collect();
            // A common 2*pi offset of the whole block is unobservable.
            let offset = 2.0 * PI * (err.iter().sum::<f64>() / k as f64 / (2.0 * PI)).round();
            let sq: Vec<f64> = err.iter().map(|e| (e - offset).powi(2)).collect();
            let mse = sq.iter().sum::<f64>() / k as f64;
            let mse_wrapped = err.iter().map(|e| wrap_phase(*e).powi(2)).sum::<f64>() / k as f64;
            if !mse.is_finite() {
                return None;
            }

            let (mut symbol_errors, mut data_symbols) = (0, 0);
            for ((&d, &t), &p) in out.decisions.iter().zip(&labels).zip(pilot_mask) {
                if !p {
                    data_symbols += 1;
                    symbol_errors += usize::from(d != t);
                }
            }
            let bcrb = match (spec, &prep.prior) {
                (EstimatorSpec::Map, Some(prior)) => Some(soft_bcrb(&out.final_block, prior).ok()?),
                _ => None,
            };
            Some(EstimatorTrial {
                mse,
                mse_wrapped,
                per_sample: keep_samples.then_some(sq),
                symbol_errors,
                data_symbols,
                newton: out
                    .iterations
                    .iter()
                    .filter_map(|d| d.newton_iterations.map(|n| (n, d.converged)))
                    .collect(),
                bcrb,
            })
        })
        .collect()
}

fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn average_columns(rows: &[&Vec<f64>]) -> Vec<f64> {
    let mut acc = vec![0.0; rows[0].len()];
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r.iter()) {
            *a += v;
        }
    }
    acc.iter().map(|a| a / rows.len() as f64).collect()
}

/// Runs the experiment and aggregates one row per (estimator, SNR, metric).
pub fn run(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>, SimError> {
    Ok(run_report(cfg)?.rows)
}

/// Like [`run`], also returning per-sample series for `mse_vs_bcrb`.
///
/// Trials run on the current rayon pool; results are combined in trial
/// order, so output does not depend on the thread count.
pub fn run_report(cfg: &ExperimentConfig) -> Result<RunReport, SimError> {
    cfg.validate()?;
    let prep = prepare(cfg)?;
    let pilot_mask = uniform_pilots(cfg.block_length, cfg.pilot_density)?.mask();

    let mut rows = Vec::new();
    let mut series = Vec::new();
    for (si, &snr_db) in cfg.snr_grid_db.iter().enumerate() {
        let trials: Vec<Vec<Option<EstimatorTrial>>> = (0..cfg.n_trials)
            .into_par_iter()
            .map(|t| run_trial(cfg, &prep, &pilot_mask, si, t))
            .collect();

        for (ei, spec) in cfg.estimators.iter().enumerate() {
            let name = spec.name();
            let ok: Vec<&EstimatorTrial> = trials.iter().filter_map(|t| t[ei].as_ref()).collect();
            let mut push = |metric, value: f64| {
                rows.push(ResultRow {
                    experiment: cfg.experiment,
                    estimator: name.clone(),
                    snr_db,
                    metric,
                    value,
                    n_trials: cfg.n_trials,
                    seed: cfg.master_seed,
                })
            };
            push(
                Metric::FailureRate,
                (cfg.n_trials - ok.len()) as f64 / cfg.n_trials as f64,
            );
            if ok.is_empty() {
                continue;
            }

            let mses: Vec<f64> = ok.iter().map(|t| t.mse).collect();
            let (mse, mse_se) = mean_and_stderr(&mses);
            push(Metric::MseRad2, mse);
            push(Metric::MseStderrRad2, mse_se);
            if cfg.wrap_diagnostics {
                let wrapped: Vec<f64> = ok.iter().map(|t| t.mse_wrapped).collect();
                push(Metric::MseWrappedRad2, mean_and_stderr(&wrapped).0);
            }

            let data: usize = ok.iter().map(|t| t.data_symbols).sum();
            if data > 0 && cfg.experiment == Experiment::Ser {
                let ser = ok.iter().map(|t| t.symbol_errors).sum::<usize>() as f64 / data as f64;
                push(Metric::Ser, ser);
                push(Metric::SerStderr, (ser * (1.0 - ser) / data as f64).sqrt());
            }

            let calls: Vec<(usize, bool)> = ok.iter().flat_map(|t| t.newton.iter().copied()).collect();
            if !calls.is_empty() {
                let n = calls.len() as f64;
                push(
                    Metric::AvgIterations,
                    calls.iter().map(|c| c.0 as f64).sum::<f64>() / n,
                );
                push(
                    Metric::ConvergenceRate,
                    calls.iter().filter(|c| c.1).count() as f64 / n,
                );
            }

            let bcrbs: Vec<&Vec<f64>> = ok.iter().filter_map(|t| t.bcrb.as_ref()).collect();
            let bcrb_k = (!bcrbs.is_empty()).then(|| average_columns(&bcrbs));
            if let Some(b) = &bcrb_k {
                push(Metric::BcrbRad2, b.iter().sum::<f64>() / b.len() as f64);
            }

            if cfg.experiment == Experiment::MseVsBcrb {
                let samples: Vec<&Vec<f64>> = ok.iter().filter_map(|t| t.per_sample.as_ref()).collect();
                series.push(SampleSeries {
                    estimator: name.clone(),
                    snr_db,
                    mse: average_columns(&samples),
                    bcrb: bcrb_k,
                });
            }
        }
    }
    rows.sort_by(|a, b| {
        (a.experiment, &a.estimator)
            .cmp(&(b.experiment, &b.estimator))
            .then(a.snr_db.total_cmp(&b.snr_db))
            .then(a.metric.cmp(&b.metric))
    });
    Ok(RunReport { rows, series })
}
