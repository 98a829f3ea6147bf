//! Phase-noise estimation for oscillators with colored noise sources.

pub mod baselines;
pub mod kalman;
pub mod map;
pub mod pn_process;
pub mod signal;
pub mod detector;
#[cfg(feature = "sim")]
pub mod sim;
