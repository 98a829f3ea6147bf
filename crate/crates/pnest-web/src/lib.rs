//! WebAssembly bindings for the static demo page in `www/`.

use std::f64::consts::PI;

use pnest::detector::{iterate, Estimator};
use pnest::kalman::AugmentedStateModel;
use pnest::map::{soft_bcrb, MapOptions};
use pnest::pn_process::{
    build_prior_covariance, fit_ar, sample_trajectory, PhaseIncrementModel, TailRule,
};
use pnest::signal::{gray_qam, noise_variance_from_snr_db, transmit, uniform_pilots, ObservationBlock};
use wasm_bindgen::prelude::*;

const BLOCK: usize = 101;
const THETA1_VARIANCE: f64 = 1.0;

/// One simulated block: the true phase and each estimator's track.
#[wasm_bindgen]
pub struct BlockRun {
    truth: Vec<f64>,
    pilots: Vec<u32>,
    names: Vec<String>,
    tracks: Vec<Vec<f64>>,
    mse: Vec<f64>,
}

#[wasm_bindgen]
impl BlockRun {
    pub fn truth(&self) -> Vec<f64> {
        self.truth.clone()
    }

    pub fn pilots(&self) -> Vec<u32> {
        self.pilots.clone()
    }

    #[wasm_bindgen(js_name = estimatorCount)]
    pub fn estimator_count(&self) -> usize {
        self.names.len()
    }

    #[wasm_bindgen(js_name = estimatorName)]
    pub fn estimator_name(&self, i: usize) -> String {
        self.names[i].clone()
    }

    pub fn track(&self, i: usize) -> Vec<f64> {
        self.tracks[i].clone()
    }

    pub fn mse(&self, i: usize) -> f64 {
        self.mse[i]
    }
}

fn colored(alpha: f64, increment_variance: f64) -> Result<PhaseIncrementModel, String> {
    PhaseIncrementModel::reference_colored(alpha, increment_variance).map_err(|e| e.to_string())
}

/// Simulates a 16-QAM block with AR(1) phase increments and runs MAP, the
/// AR(1) EKS, the white EKS and DCT interpolation through the detection loop.
pub fn run_block(
    snr_db: f64,
    pilot_density: f64,
    alpha: f64,
    increment_variance: f64,
    rounds: usize,
    seed: u32,
) -> Result<BlockRun, String> {
    let model = colored(alpha, increment_variance)?;
    let seed = u64::from(seed);
    let truth = sample_trajectory(&model, BLOCK, THETA1_VARIANCE, seed).map_err(|e| e.to_string())?;
    let c = gray_qam(16).map_err(|e| e.to_string())?;
    let symbols: Vec<_> = (0..BLOCK)
        .map(|k| c.points()[(seed as usize).wrapping_mul(2654435761).wrapping_add(k * 40503) % 16])
        .collect();
    let sigma2 = noise_variance_from_snr_db(snr_db);
    let received = transmit(&symbols, &truth, sigma2, seed ^ 0x5eed);
    let pattern = uniform_pilots(BLOCK, pilot_density).map_err(|e| e.to_string())?;
    let mask = pattern.mask();

    let prior = build_prior_covariance(&model, BLOCK, THETA1_VARIANCE).map_err(|e| e.to_string())?;
    let ar1 = AugmentedStateModel::fitted(&model, 1).map_err(|e| e.to_string())?;
    let estimators = [
        ("MAP", Estimator::Map { prior: &prior, options: MapOptions::default() }),
        ("EKS AR(1)", Estimator::Eks { model: &ar1, theta1_variance: THETA1_VARIANCE }),
        ("white EKS", Estimator::WhiteEks { increment_variance, theta1_variance: THETA1_VARIANCE }),
        ("DCT", Estimator::Dct { options: None }),
    ];

    let mut run = BlockRun {
        truth: truth.values.clone(),
        pilots: pattern.indices().iter().map(|&k| k as u32).collect(),
        names: Vec::new(),
        tracks: Vec::new(),
        mse: Vec::new(),
    };
    for (name, est) in &estimators {
        let out = iterate(&received, &mask, &symbols, est, rounds.max(1), &c, sigma2)
            .map_err(|e| format!("{name}: {e}"))?;
        let mean_err = out.phases.iter().zip(&truth.values).map(|(a, b)| a - b).sum::<f64>() / BLOCK as f64;
        let offset = 2.0 * PI * (mean_err / (2.0 * PI)).round();
        let track: Vec<f64> = out.phases.iter().map(|p| p - offset).collect();
        let mse = track
            .iter()
            .zip(&truth.values)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / BLOCK as f64;
        run.names.push(name.to_string());
        run.tracks.push(track);
        run.mse.push(mse);
    }
    Ok(run)
}

#[wasm_bindgen(js_name = simulateBlock)]
pub fn simulate_block(
    snr_db: f64,
    pilot_density: f64,
    alpha: f64,
    increment_variance: f64,
    rounds: usize,
    seed: u32,
) -> Result<BlockRun, JsError> {
    run_block(snr_db, pilot_density, alpha, increment_variance, rounds, seed).map_err(|e| JsError::new(&e))
}

/// Per-sample BCRB for unit-modulus symbols. Without `data_aided` only
/// pilots carry information.
pub fn bcrb(
    snr_db: f64,
    pilot_density: f64,
    alpha: f64,
    increment_variance: f64,
    data_aided: bool,
) -> Result<Vec<f64>, String> {
    let model = colored(alpha, increment_variance)?;
    let prior = build_prior_covariance(&model, BLOCK, THETA1_VARIANCE).map_err(|e| e.to_string())?;
    let mask = uniform_pilots(BLOCK, pilot_density).map_err(|e| e.to_string())?.mask();
    let one = pnest::signal::gray_qam(4).map_err(|e| e.to_string())?.points()[0];
    let soft = mask
        .iter()
        .map(|&p| if p || data_aided { one } else { 0.0 * one })
        .collect();
    let eps = mask.iter().map(|&p| if p || data_aided { 0.0 } else { 1.0 }).collect();
    let mask = if data_aided { vec![true; BLOCK] } else { mask };
    let obs = ObservationBlock::new(vec![one; BLOCK], soft, eps, noise_variance_from_snr_db(snr_db), mask)
        .map_err(|e| e.to_string())?;
    soft_bcrb(&obs, &prior).map_err(|e| e.to_string())
}

#[wasm_bindgen(js_name = bcrbProfile)]
pub fn bcrb_profile(
    snr_db: f64,
    pilot_density: f64,
    alpha: f64,
    increment_variance: f64,
    data_aided: bool,
) -> Result<Vec<f64>, JsError> {
    bcrb(snr_db, pilot_density, alpha, increment_variance, data_aided).map_err(|e| JsError::new(&e))
}

/// Power-law increment autocorrelation and its AR(order) approximation.
#[wasm_bindgen]
pub struct AcfFit {
    truth: Vec<f64>,
    fitted: Vec<f64>,
    coeffs: Vec<f64>,
    innovation_variance: f64,
}

#[wasm_bindgen]
impl AcfFit {
    pub fn truth(&self) -> Vec<f64> {
        self.truth.clone()
    }

    pub fn fitted(&self) -> Vec<f64> {
        self.fitted.clone()
    }

    pub fn coeffs(&self) -> Vec<f64> {
        self.coeffs.clone()
    }

    #[wasm_bindgen(js_name = innovationVariance)]
    pub fn innovation_variance(&self) -> f64 {
        self.innovation_variance
    }
}

/// `R(l) = R(0) (1 + l)^-exponent`, tabulated to 256 lags.
pub fn fit_power_law(exponent: f64, variance: f64, order: usize, lags: usize) -> Result<AcfFit, String> {
    let table: Vec<f64> = (0..256).map(|l| variance * (1.0 + l as f64).powf(-exponent)).collect();
    let model = PhaseIncrementModel::tabulated(table, TailRule::GeometricDecay).map_err(|e| e.to_string())?;
    let fit = fit_ar(&model, order).map_err(|e| e.to_string())?;
    let fitted_model = if order == 0 {
        PhaseIncrementModel::white(fit.innovation_variance)
    } else {
        PhaseIncrementModel::auto_regressive(fit.coeffs.clone(), fit.innovation_variance)
    }
    .map_err(|e| e.to_string())?;
    Ok(AcfFit {
        truth: model.autocorrelation_sequence(lags),
        fitted: fitted_model.autocorrelation_sequence(lags),
        coeffs: fit.coeffs,
        innovation_variance: fit.innovation_variance,
    })
}

#[wasm_bindgen(js_name = fitPowerLaw)]
pub fn fit_power_law_js(exponent: f64, variance: f64, order: usize, lags: usize) -> Result<AcfFit, JsError> {
    fit_power_law(exponent, variance, order, lags).map_err(|e| JsError::new(&e))
}
