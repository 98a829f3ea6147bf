//! Reference estimators: DCT interpolation of pilot phases and an EKS that
//! assumes white increments regardless of the true statistics.

use std::f64::consts::PI;

use thiserror::Error;

use crate::kalman::{build_augmented_model, eks_smooth, KalmanError, SmootherResult};
use crate::map::pilot_phases;
use crate::signal::ObservationBlock;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("DCT interpolation needs at least 2 pilots, found {0}")]
    TooFewPilots(usize),
    #[error("retained coefficient count {retained} outside 1..={pilots}")]
    InvalidRetained { retained: usize, pilots: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DctOptions {
    /// Low-pass truncation: DCT coefficients kept, counted from DC.
    pub retained_coefficients: usize,
}

impl DctOptions {
    /// Keeps `ceil(pilots / 2)` coefficients.
    pub fn half_of(pilot_count: usize) -> Self {
        Self {
            retained_coefficients: pilot_count.div_ceil(2).max(1),
        }
    }
}

/// Pilot ML phases, low-pass filtered in the DCT-II domain and evaluated on
/// the full block through a fractional pilot-index grid.
pub fn dct_estimate(obs: &ObservationBlock, opts: &DctOptions) -> Result<Vec<f64>, BaselineError> {
    let pilots = pilot_phases(obs);
    let count = pilots.len();
    if count < 2 {
        return Err(BaselineError::TooFewPilots(count));
    }
    let retained = opts.retained_coefficients;
    if retained == 0 || retained > count {
        return Err(BaselineError::InvalidRetained {
            retained,
            pilots: count,
        });
    }
    let n = count as f64;
    let coeffs: Vec<f64> = (0..retained)
        .map(|m| {
            pilots
                .iter()
                .enumerate()
                .map(|(i, &(_, v))| v * (PI * m as f64 * (i as f64 + 0.5) / n).cos())
                .sum()
        })
        .collect();
    let eval = |u: f64| {
        coeffs[0] / n
            + 2.0 / n
                * coeffs
                    .iter()
                    .enumerate()
                    .skip(1)
                    .map(|(m, c)| c * (PI * m as f64 * (u + 0.5) / n).cos())
                    .sum::<f64>()
    };

    let mut out = Vec::with_capacity(obs.len());
    let mut seg = 0;
    for k in 0..obs.len() {
        while seg + 2 < count && pilots[seg + 1].0 <= k {
            seg += 1;
        }
        let (k0, k1) = (pilots[seg].0, pilots[seg + 1].0);
        let u = if k <= k0 {
            seg as f64
        } else if k >= k1 {
            (seg + 1) as f64
        } else {
            seg as f64 + (k - k0) as f64 / (k1 - k0) as f64
        };
        out.push(eval(u));
    }
    Ok(out)
}

/// EKS built for white increments of variance `increment_variance`.
pub fn white_eks(
    obs: &ObservationBlock,
    increment_variance: f64,
    theta1_variance: f64,
) -> Result<SmootherResult, KalmanError> {
    let model = build_augmented_model(&[0.0], increment_variance)?;
    eks_smooth(obs, &model, theta1_variance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kalman::AugmentedStateModel;
    use crate::pn_process::{sample_trajectory, PhaseIncrementModel};
    use crate::signal::{gray_qam, transmit, uniform_pilots};
    use num_complex::Complex64;

    fn noiseless(phases: &[f64], density: f64) -> ObservationBlock {
        let c = gray_qam(16).unwrap();
        let len = phases.len();
        let symbols: Vec<_> = (0..len).map(|k| c.points()[(k * 7) % 16]).collect();
        let y: Vec<_> = symbols
            .iter()
            .zip(phases)
            .map(|(s, &t)| s * Complex64::from_polar(1.0, t))
            .collect();
        let mask = uniform_pilots(len, density).unwrap().mask();
        ObservationBlock::new(y, symbols, vec![0.0; len], 1e-6, mask).unwrap()
    }

    #[test]
    fn constant_phase_recovered() {
        let obs = noiseless(&[0.7; 101], 0.21);
        for retained in [1, 5, 22] {
            let est = dct_estimate(&obs, &DctOptions { retained_coefficients: retained }).unwrap();
            assert!(est.iter().all(|v| (v - 0.7).abs() < 1e-12));
        }
    }

    #[test]
    fn full_retention_interpolates_pilots() {
        let ramp: Vec<f64> = (0..101).map(|k| 0.5 * k as f64 / 100.0).collect();
        let obs = noiseless(&ramp, 0.21);
        let pilots = obs.pilot_indices();
        let est = dct_estimate(&obs, &DctOptions { retained_coefficients: pilots.len() }).unwrap();
        for &k in &pilots {
            assert!((est[k] - ramp[k]).abs() < 1e-12);
        }
        let worst = est.iter().zip(&ramp).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-2, "max interior error {worst}");
    }

    #[test]
    fn pilot_interpolation_on_random_phases() {
        let model = PhaseIncrementModel::reference_colored(0.9, 1e-3).unwrap();
        let traj = sample_trajectory(&model, 101, 0.1, 4).unwrap();
        let obs = noiseless(&traj.values, 0.06);
        let pilots = pilot_phases(&obs);
        let est = dct_estimate(&obs, &DctOptions { retained_coefficients: pilots.len() }).unwrap();
        for (k, v) in pilots {
            assert!((est[k] - v).abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_pilots() {
        let mut obs = noiseless(&[0.0; 10], 0.2);
        let mask: Vec<bool> = (0..10).map(|k| k == 3).collect();
        obs = ObservationBlock::new(
            obs.received().to_vec(),
            obs.soft_symbols().to_vec(),
            vec![0.0; 10],
            0.1,
            mask,
        )
        .unwrap();
        assert_eq!(dct_estimate(&obs, &DctOptions::half_of(1)), Err(BaselineError::TooFewPilots(1)));
        let obs = noiseless(&[0.0; 10], 0.5);
        assert!(matches!(
            dct_estimate(&obs, &DctOptions { retained_coefficients: 9 }),
            Err(BaselineError::InvalidRetained { .. })
        ));
    }

    #[test]
    fn white_eks_matches_matched_eks() {
        let model = PhaseIncrementModel::white(1e-3).unwrap();
        let traj = sample_trajectory(&model, 101, 1.0, 8).unwrap();
        let c = gray_qam(16).unwrap();
        let symbols: Vec<_> = (0..101).map(|k| c.points()[(k * 5) % 16]).collect();
        let y = transmit(&symbols, &traj, 0.01, 3);
        let obs = ObservationBlock::data_aided(y, symbols, 0.01).unwrap();
        let a = white_eks(&obs, 1e-3, 1e4).unwrap();
        let b = eks_smooth(&obs, &AugmentedStateModel::fitted(&model, 0).unwrap(), 1e4).unwrap();
        for (x, y) in a.phases.iter().zip(&b.phases) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}
