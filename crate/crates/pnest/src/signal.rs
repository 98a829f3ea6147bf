//! Constellations, pilot placement and the received-signal model
//! `y[k] = s[k] exp(j theta[k]) + w[k]`.
//!
//! Signal power is normalized so every constellation has unit average
//! energy; SNR is therefore `1 / noise_variance` throughout the crate.
//! Block positions are 0-based.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::pn_process::PhaseTrajectory;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("unsupported constellation order {0} (expected 4, 16 or 64)")]
    UnsupportedOrder(usize),
    #[error("inconsistent observation block: {0}")]
    InconsistentBlock(String),
    #[error("invalid pilot pattern: {0}")]
    InvalidPilots(String),
}

/// Converts an SNR in dB to the noise variance of a unit-energy alphabet.
pub fn noise_variance_from_snr_db(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

/// Square QAM alphabet with per-axis Gray labels and unit average energy.
#[derive(Debug, Clone, PartialEq)]
pub struct Constellation {
    points: Vec<Complex64>,
    labels: Vec<u32>,
}

impl Constellation {
    pub fn points(&self) -> &[Complex64] {
        &self.points
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn order(&self) -> usize {
        self.points.len()
    }

    /// Index of the nearest point; ties go to the lowest index.
    pub fn nearest(&self, z: Complex64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, p) in self.points.iter().enumerate() {
            let d = (z - p).norm_sqr();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }
}

fn gray(i: u32) -> u32 {
    i ^ (i >> 1)
}

pub fn gray_qam(order: usize) -> Result<Constellation, SignalError> {
    let side = match order {
        4 => 2usize,
        16 => 4,
        64 => 8,
        _ => return Err(SignalError::UnsupportedOrder(order)),
    };
    let bits = side.trailing_zeros();
    let scale = (2.0 * (order as f64 - 1.0) / 3.0).sqrt();
    let level = |i: usize| (2.0 * i as f64 - (side as f64 - 1.0)) / scale;
    let mut points = Vec::with_capacity(order);
    let mut labels = Vec::with_capacity(order);
    for i in 0..side {
        for q in 0..side {
            points.push(Complex64::new(level(i), level(q)));
            labels.push((gray(i as u32) << bits) | gray(q as u32));
        }
    }
    Ok(Constellation { points, labels })
}

/// Known-symbol positions within a block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PilotPattern {
    block_length: usize,
    indices: Vec<usize>,
}

impl PilotPattern {
    pub fn new(block_length: usize, mut indices: Vec<usize>) -> Result<Self, SignalError> {
        indices.sort_unstable();
        indices.dedup();
        if indices.last().is_some_and(|&i| i >= block_length) {
            return Err(SignalError::InvalidPilots(format!(
                "index out of range for block length {block_length}"
            )));
        }
        Ok(Self {
            block_length,
            indices,
        })
    }

    pub fn block_length(&self) -> usize {
        self.block_length
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn count(&self) -> usize {
        self.indices.len()
    }

    pub fn density(&self) -> f64 {
        self.indices.len() as f64 / self.block_length as f64
    }

    pub fn mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.block_length];
        for &i in &self.indices {
            mask[i] = true;
        }
        mask
    }
}

/// `ceil(density * K)` evenly spaced pilots, always including both block
/// edges.
pub fn uniform_pilots(block_length: usize, density: f64) -> Result<PilotPattern, SignalError> {
    if block_length < 2 {
        return Err(SignalError::InvalidPilots("block length must be at least 2".into()));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(SignalError::InvalidPilots(format!(
            "density {density} outside (0, 1]"
        )));
    }
    let n = ((density * block_length as f64 - 1e-9).ceil() as usize).clamp(2, block_length);
    let span = (block_length - 1) as f64;
    let indices = (0..n)
        .map(|i| (i as f64 * span / (n - 1) as f64).round() as usize)
        .collect();
    PilotPattern::new(block_length, indices)
}

/// `y[k] = s[k] exp(j theta[k]) + w[k]`, `w` circularly symmetric with
/// variance `noise_variance`.
pub fn transmit(
    symbols: &[Complex64],
    trajectory: &PhaseTrajectory,
    noise_variance: f64,
    seed: u64,
) -> Vec<Complex64> {
    assert_eq!(symbols.len(), trajectory.len(), "length mismatch");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = (noise_variance / 2.0).sqrt();
    symbols
        .iter()
        .zip(&trajectory.values)
        .map(|(s, &theta)| {
            let w = Complex64::new(
                rand::Rng::sample::<f64, _>(&mut rng, StandardNormal),
                rand::Rng::sample::<f64, _>(&mut rng, StandardNormal),
            );
            s * Complex64::from_polar(1.0, theta) + w * sd
        })
        .collect()
}

/// Received block with soft symbols `s_hat` and per-symbol uncertainty
/// `sigma_eps^2`, so the effective noise is `sigma^2 + sigma_eps^2[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationBlock {
    received: Vec<Complex64>,
    soft_symbols: Vec<Complex64>,
    symbol_uncertainty: Vec<f64>,
    channel_noise_variance: f64,
    pilot_mask: Vec<bool>,
}

impl ObservationBlock {
    pub fn new(
        received: Vec<Complex64>,
        soft_symbols: Vec<Complex64>,
        symbol_uncertainty: Vec<f64>,
        channel_noise_variance: f64,
        pilot_mask: Vec<bool>,
    ) -> Result<Self, SignalError> {
        let k = received.len();
        if soft_symbols.len() != k || symbol_uncertainty.len() != k || pilot_mask.len() != k {
            return Err(SignalError::InconsistentBlock(format!(
                "lengths differ: received {k}, soft {}, uncertainty {}, mask {}",
                soft_symbols.len(),
                symbol_uncertainty.len(),
                pilot_mask.len()
            )));
        }
        if !(channel_noise_variance >= 0.0 && channel_noise_variance.is_finite()) {
            return Err(SignalError::InconsistentBlock(format!(
                "channel noise variance {channel_noise_variance}"
            )));
        }
        for (i, (&u, &pilot)) in symbol_uncertainty.iter().zip(&pilot_mask).enumerate() {
            if !u.is_finite() || u < 0.0 {
                return Err(SignalError::InconsistentBlock(format!(
                    "symbol uncertainty {u} at position {i}"
                )));
            }
            if pilot && u != 0.0 {
                return Err(SignalError::InconsistentBlock(format!(
                    "pilot at position {i} has nonzero uncertainty {u}"
                )));
            }
            if channel_noise_variance + u <= 0.0 {
                return Err(SignalError::InconsistentBlock(format!(
                    "effective noise at position {i} is not positive"
                )));
            }
        }
        Ok(Self {
            received,
            soft_symbols,
            symbol_uncertainty,
            channel_noise_variance,
            pilot_mask,
        })
    }

    /// Data-aided block: every symbol known.
    pub fn data_aided(
        received: Vec<Complex64>,
        symbols: Vec<Complex64>,
        noise_variance: f64,
    ) -> Result<Self, SignalError> {
        let k = received.len();
        Self::new(received, symbols, vec![0.0; k], noise_variance, vec![true; k])
    }

    pub fn len(&self) -> usize {
        self.received.len()
    }

    pub fn is_empty(&self) -> bool {
        self.received.is_empty()
    }

    pub fn received(&self) -> &[Complex64] {
        &self.received
    }

    pub fn soft_symbols(&self) -> &[Complex64] {
        &self.soft_symbols
    }

    pub fn symbol_uncertainty(&self) -> &[f64] {
        &self.symbol_uncertainty
    }

    pub fn channel_noise_variance(&self) -> f64 {
        self.channel_noise_variance
    }

    pub fn pilot_mask(&self) -> &[bool] {
        &self.pilot_mask
    }

    pub fn pilot_indices(&self) -> Vec<usize> {
        self.pilot_mask
            .iter()
            .enumerate()
            .filter_map(|(i, &p)| p.then_some(i))
            .collect()
    }

    /// `sigma^2 + sigma_eps^2[k]`.
    pub fn effective_noise(&self, k: usize) -> f64 {
        self.channel_noise_variance + self.symbol_uncertainty[k]
    }

    /// `y[k] * conj(s_hat[k])`, the only combination of received and soft
    /// symbols the phase estimators depend on.
    pub fn correlation(&self, k: usize) -> Complex64 {
        self.received[k] * self.soft_symbols[k].conj()
    }

    /// Copy with new soft symbols and uncertainties at the same received
    /// samples.
    pub fn with_soft_symbols(
        &self,
        soft_symbols: Vec<Complex64>,
        symbol_uncertainty: Vec<f64>,
    ) -> Result<Self, SignalError> {
        Self::new(
            self.received.clone(),
            soft_symbols,
            symbol_uncertainty,
            self.channel_noise_variance,
            self.pilot_mask.clone(),
        )
    }
}
