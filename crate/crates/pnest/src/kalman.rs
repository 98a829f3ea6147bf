//! AR-augmented state-space model and the soft-input extended Kalman
//! smoother.
//!
//! Approximating the increments by an AR(p) process makes the phase a
//! first-order Markov state once it is stacked with the recent increments:
//!
//! ```text
//! x[k] = [theta[k], zeta[k], zeta[k-1], ..., zeta[k-p]]
//! x[k] = F x[k-1] + [0, delta[k], 0, ..., 0]
//! ```
//!
//! with `F` row 0 `[1, 1, 0, ..]`, row 1 `[0, a1, .., ap, 0]` and a shift
//! register below. The observation `y[k] = s_hat[k] exp(j theta[k]) + noise`
//! is handled as a real 2-vector and linearized at the predicted phase; a
//! Rauch-Tung-Striebel pass smooths the filtered states.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use thiserror::Error;

use crate::map::ml_pilot_init;
use crate::pn_process::{fit_ar, is_stationary, toeplitz, ModelError, PhaseIncrementModel};
use crate::signal::ObservationBlock;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KalmanError {
    #[error("AR coefficients are not stationary")]
    UnstableAr,
    #[error("innovation variance must be non-negative, got {0}")]
    NegativeInnovation(f64),
    #[error("state covariance lost positive semidefiniteness at step {step} (min eigenvalue {min_eigenvalue:e})")]
    NumericalBreakdown { step: usize, min_eigenvalue: f64 },
    #[error("observation block is empty")]
    EmptyBlock,
    #[error(transparent)]
    Model(#[from] ModelError),
}

const PSD_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedStateModel {
    order: usize,
    transition: DMatrix<f64>,
    process_noise: DMatrix<f64>,
    ar_coeffs: Vec<f64>,
    innovation_variance: f64,
    /// Stationary covariance of `[zeta[k], ..., zeta[k-p]]`.
    increment_covariance: DMatrix<f64>,
}

impl AugmentedStateModel {
    /// Fits an AR(`order`) approximation of `model` by Levinson-Durbin and
    /// builds its augmented state model.
    pub fn fitted(model: &PhaseIncrementModel, order: usize) -> Result<Self, KalmanError> {
        let fit = fit_ar(model, order)?;
        build_augmented_model(&fit.coeffs, fit.innovation_variance)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn state_dim(&self) -> usize {
        self.order + 2
    }

    pub fn transition(&self) -> &DMatrix<f64> {
        &self.transition
    }

    pub fn process_noise(&self) -> &DMatrix<f64> {
        &self.process_noise
    }

    pub fn ar_coeffs(&self) -> &[f64] {
        &self.ar_coeffs
    }

    pub fn innovation_variance(&self) -> f64 {
        self.innovation_variance
    }

    pub fn increment_covariance(&self) -> &DMatrix<f64> {
        &self.increment_covariance
    }

    /// Initial state covariance `diag(theta1_variance, stationary block)`.
    pub fn initial_covariance(&self, theta1_variance: f64) -> DMatrix<f64> {
        let n = self.state_dim();
        let mut p = DMatrix::zeros(n, n);
        p[(0, 0)] = theta1_variance;
        p.view_mut((1, 1), (n - 1, n - 1))
            .copy_from(&self.increment_covariance);
        p
    }
}

pub fn build_augmented_model(
    ar_coeffs: &[f64],
    innovation_variance: f64,
) -> Result<AugmentedStateModel, KalmanError> {
    if !is_stationary(ar_coeffs) {
        return Err(KalmanError::UnstableAr);
    }
    if !(innovation_variance >= 0.0 && innovation_variance.is_finite()) {
        return Err(KalmanError::NegativeInnovation(innovation_variance));
    }
    let order = ar_coeffs.len();
    let n = order + 2;
    let mut transition = DMatrix::zeros(n, n);
    transition[(0, 0)] = 1.0;
    transition[(0, 1)] = 1.0;
    for (i, a) in ar_coeffs.iter().enumerate() {
        transition[(1, i + 1)] = *a;
    }
    for r in 2..n {
        transition[(r, r - 1)] = 1.0;
    }
    let mut process_noise = DMatrix::zeros(n, n);
    process_noise[(1, 1)] = innovation_variance;

    let increment_covariance = if innovation_variance > 0.0 {
        let ar = PhaseIncrementModel::auto_regressive(ar_coeffs.to_vec(), innovation_variance)?;
        toeplitz(&ar.autocorrelation_sequence(order + 1))
    } else {
        DMatrix::zeros(order + 1, order + 1)
    };

    Ok(AugmentedStateModel {
        order,
        transition,
        process_noise,
        ar_coeffs: ar_coeffs.to_vec(),
        innovation_variance,
        increment_covariance,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmootherResult {
    pub phases: Vec<f64>,
    pub phase_variances: Vec<f64>,
    pub filtered_phase_variances: Vec<f64>,
    pub filtered_states: Vec<DVector<f64>>,
    pub smoothed_states: Vec<DVector<f64>>,
}

fn symmetrize(p: &mut DMatrix<f64>) {
    let t = p.transpose();
    *p += t;
    *p *= 0.5;
}

fn check_psd(p: &DMatrix<f64>, step: usize) -> Result<(), KalmanError> {
    if p.clone().cholesky().is_some() {
        return Ok(());
    }
    let min_eigenvalue = SymmetricEigen::new(p.clone()).eigenvalues.min();
    if min_eigenvalue < -PSD_TOLERANCE {
        return Err(KalmanError::NumericalBreakdown {
            step,
            min_eigenvalue,
        });
    }
    Ok(())
}

/// `a * b^-1` for symmetric positive semidefinite `b`.
fn right_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    match b.clone().cholesky() {
        Some(chol) => chol.solve(&a.transpose()).transpose(),
        None => {
            let pinv = b
                .clone()
                .pseudo_inverse(1e-14 * b.amax().max(f64::MIN_POSITIVE))
                .expect("pseudo-inverse tolerance is non-negative");
            a * pinv
        }
    }
}

/// Extended Kalman filter followed by a Rauch-Tung-Striebel pass.
///
/// The phase component starts at the ML phase of the first pilot (zero if
/// there are none) with variance `theta1_variance`; the increment
/// sub-state starts from its stationary distribution.
pub fn eks_smooth(
    obs: &ObservationBlock,
    model: &AugmentedStateModel,
    theta1_variance: f64,
) -> Result<SmootherResult, KalmanError> {
    let len = obs.len();
    if len == 0 {
        return Err(KalmanError::EmptyBlock);
    }
    let n = model.state_dim();
    let f = model.transition();
    let q = model.process_noise();

    let mut x0 = DVector::zeros(n);
    x0[0] = ml_pilot_init(obs).map(|v| v[0]).unwrap_or(0.0);
    let p0 = model.initial_covariance(theta1_variance);

    let mut x_pred: Vec<DVector<f64>> = Vec::with_capacity(len);
    let mut p_pred: Vec<DMatrix<f64>> = Vec::with_capacity(len);
    let mut x_filt: Vec<DVector<f64>> = Vec::with_capacity(len);
    let mut p_filt: Vec<DMatrix<f64>> = Vec::with_capacity(len);

    let identity = DMatrix::<f64>::identity(n, n);
    for k in 0..len {
        let (xp, mut pp) = if k == 0 {
            (x0.clone(), p0.clone())
        } else {
            (f * &x_filt[k - 1], f * &p_filt[k - 1] * f.transpose() + q)
        };
        symmetrize(&mut pp);

        let predicted = obs.soft_symbols()[k] * Complex64::from_polar(1.0, xp[0]);
        let residual = obs.received()[k] - predicted;
        let mut jac = DMatrix::<f64>::zeros(2, n);
        jac[(0, 0)] = -predicted.im;
        jac[(1, 0)] = predicted.re;
        let r = DMatrix::<f64>::identity(2, 2) * (obs.effective_noise(k) / 2.0);
        let s = &jac * &pp * jac.transpose() + &r;
        let gain = right_solve(&(&pp * jac.transpose()), &s);
        let innovation = DVector::from_column_slice(&[residual.re, residual.im]);
        let xf = &xp + &gain * innovation;
        let a = &identity - &gain * &jac;
        let mut pf = &a * &pp * a.transpose() + &gain * r * gain.transpose();
        symmetrize(&mut pf);
        check_psd(&pf, k)?;

        x_pred.push(xp);
        p_pred.push(pp);
        x_filt.push(xf);
        p_filt.push(pf);
    }

    let mut x_smooth = x_filt.clone();
    let mut p_smooth = p_filt.clone();
    for k in (0..len.saturating_sub(1)).rev() {
        let cross = &p_filt[k] * f.transpose();
        let g = right_solve(&cross, &p_pred[k + 1]);
        let xs = &x_filt[k] + &g * (&x_smooth[k + 1] - &x_pred[k + 1]);
        let mut ps = &p_filt[k] + &g * (&p_smooth[k + 1] - &p_pred[k + 1]) * g.transpose();
        symmetrize(&mut ps);
        check_psd(&ps, k)?;
        x_smooth[k] = xs;
        p_smooth[k] = ps;
    }

    Ok(SmootherResult {
        phases: x_smooth.iter().map(|x| x[0]).collect(),
        phase_variances: p_smooth.iter().map(|p| p[(0, 0)]).collect(),
        filtered_phase_variances: p_filt.iter().map(|p| p[(0, 0)]).collect(),
        filtered_states: x_filt,
        smoothed_states: x_smooth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pn_process::sample_trajectory;
    use crate::signal::{gray_qam, noise_variance_from_snr_db, transmit, uniform_pilots};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn block(
        model: &PhaseIncrementModel,
        len: usize,
        snr_db: f64,
        density: f64,
        seed: u64,
    ) -> (ObservationBlock, Vec<f64>) {
        block_with(model, len, snr_db, density, seed, 16)
    }

    fn block_with(
        model: &PhaseIncrementModel,
        len: usize,
        snr_db: f64,
        density: f64,
        seed: u64,
        order: usize,
    ) -> (ObservationBlock, Vec<f64>) {
        let traj = sample_trajectory(model, len, 1.0, seed).unwrap();
        let c = gray_qam(order).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31) + 1);
        let symbols: Vec<_> = (0..len).map(|_| c.points()[rng.random_range(0..order)]).collect();
        let s2 = noise_variance_from_snr_db(snr_db);
        let y = transmit(&symbols, &traj, s2, seed + 7);
        let mask = uniform_pilots(len, density).unwrap().mask();
        let soft: Vec<_> = symbols
            .iter()
            .zip(&mask)
            .map(|(s, &p)| if p { *s } else { Complex64::new(0.0, 0.0) })
            .collect();
        let eps: Vec<f64> = mask.iter().map(|&p| if p { 0.0 } else { 1.0 }).collect();
        (ObservationBlock::new(y, soft, eps, s2, mask).unwrap(), traj.values)
    }

    #[test]
    fn white_special_case_structure() {
        let m = build_augmented_model(&[0.0], 2e-3).unwrap();
        let f = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(m.transition(), &f);
        assert_eq!(m.process_noise(), &DMatrix::from_diagonal(&DVector::from_column_slice(&[0.0, 2e-3, 0.0])));
    }

    #[test]
    fn ar1_row() {
        let m = build_augmented_model(&[0.9], 1e-4).unwrap();
        assert_eq!(m.transition().row(1).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.9, 0.0]);
    }

    #[test]
    fn ar3_hand_expanded() {
        let (a1, a2, a3) = (0.5, -0.2, 0.1);
        let m = build_augmented_model(&[a1, a2, a3], 1e-4).unwrap();
        #[rustfmt::skip]
        let f = DMatrix::from_row_slice(5, 5, &[
            1.0, 1.0, 0.0, 0.0, 0.0,
            0.0, a1,  a2,  a3,  0.0,
            0.0, 1.0, 0.0, 0.0, 0.0,
            0.0, 0.0, 1.0, 0.0, 0.0,
            0.0, 0.0, 0.0, 1.0, 0.0,
        ]);
        assert_eq!(m.transition(), &f);
        assert_eq!(m.state_dim(), 5);
    }

    #[test]
    fn unstable_ar_rejected() {
        assert_eq!(build_augmented_model(&[1.0], 1e-3), Err(KalmanError::UnstableAr));
        assert!(matches!(
            build_augmented_model(&[0.5], -1.0),
            Err(KalmanError::NegativeInnovation(_))
        ));
    }

    #[test]
    fn stationary_block_solves_lyapunov() {
        let m = build_augmented_model(&[0.6, -0.2, 0.1], 1e-4).unwrap();
        let n = m.state_dim();
        let a = m.transition().view((1, 1), (n - 1, n - 1)).into_owned();
        let q = m.process_noise().view((1, 1), (n - 1, n - 1)).into_owned();
        let p = m.increment_covariance();
        let lhs = &a * p * a.transpose() + q;
        assert!((lhs - p).amax() < 1e-18);
    }

    #[test]
    fn near_noiseless_tracking() {
        let model = PhaseIncrementModel::reference_colored(0.9, 1e-3).unwrap();
        let aug = AugmentedStateModel::fitted(&model, 1).unwrap();
        let (obs, truth) = block(&model, 101, 80.0, 1.0, 3);
        let out = eks_smooth(&obs, &aug, 1e4).unwrap();
        let rms = (out.phases.iter().zip(&truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 101.0).sqrt();
        // truth starts at a draw from N(0, 1); compare modulo a common 2 pi
        let offset = (out.phases[0] - truth[0]) / (2.0 * std::f64::consts::PI);
        assert!((offset - offset.round()).abs() < 1e-3);
        let shift = offset.round() * 2.0 * std::f64::consts::PI;
        let rms_aligned = (out
            .phases
            .iter()
            .zip(&truth)
            .map(|(a, b)| (a - b - shift).powi(2))
            .sum::<f64>()
            / 101.0)
            .sqrt();
        assert!(rms_aligned < 1e-3, "rms {rms} aligned {rms_aligned}");
    }

    #[test]
    fn smoothing_never_increases_variance() {
        let model = PhaseIncrementModel::reference_colored(0.9, 1e-3).unwrap();
        for p in [1, 3] {
            let aug = AugmentedStateModel::fitted(&model, p).unwrap();
            let (obs, _) = block(&model, 101, 10.0, 0.21, 5);
            let out = eks_smooth(&obs, &aug, 1e4).unwrap();
            for (s, f) in out.phase_variances.iter().zip(&out.filtered_phase_variances) {
                assert!(*s <= f + 1e-12);
                assert!(*s > 0.0);
            }
        }
    }

    #[test]
    fn pilot_only_variances_peak_between_pilots() {
        // Markov (white-increment) case with constant-modulus pilots whose
        // own observation beats the information arriving from the far side.
        let model = PhaseIncrementModel::white(1e-3).unwrap();
        let aug = AugmentedStateModel::fitted(&model, 1).unwrap();
        let (obs, _) = block_with(&model, 101, 20.0, 0.06, 9, 4);
        let eps: Vec<f64> = obs.pilot_mask().iter().map(|&p| if p { 0.0 } else { 1e6 }).collect();
        let obs = obs.with_soft_symbols(obs.soft_symbols().to_vec(), eps).unwrap();
        let out = eks_smooth(&obs, &aug, 1e4).unwrap();
        let pilots = obs.pilot_indices();
        for w in pilots.windows(2) {
            let (a, b) = (w[0], w[1]);
            for k in a + 1..b {
                let nearest = if k - a <= b - k { a } else { b };
                assert!(
                    out.phase_variances[k] > out.phase_variances[nearest],
                    "k={k}: {} vs pilot {nearest}: {}",
                    out.phase_variances[k],
                    out.phase_variances[nearest]
                );
            }
        }
    }

    #[test]
    fn order_zero_matches_order_one_with_zero_coefficient() {
        let model = PhaseIncrementModel::white(1e-3).unwrap();
        let (obs, _) = block(&model, 60, 15.0, 0.21, 2);
        let p0 = eks_smooth(&obs, &build_augmented_model(&[], 1e-3).unwrap(), 1e4).unwrap();
        let p1 = eks_smooth(&obs, &build_augmented_model(&[0.0], 1e-3).unwrap(), 1e4).unwrap();
        for (a, b) in p0.phases.iter().zip(&p1.phases) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_block_rejected() {
        let obs = ObservationBlock::data_aided(vec![], vec![], 0.1).unwrap();
        let aug = build_augmented_model(&[0.0], 1e-3).unwrap();
        assert_eq!(eks_smooth(&obs, &aug, 1.0).unwrap_err(), KalmanError::EmptyBlock);
    }
}
