//! Colored phase-increment models and the phase-noise prior.
//!
//! The phase follows a random walk `theta[k] = theta[k-1] + zeta[k-1]` whose
//! increments `zeta` are a zero-mean stationary Gaussian process with a known
//! autocorrelation `R(l)`. Three increment models are supported:
//!
//! - white increments (the Wiener phase-noise model),
//! - a stationary AR(p) process given by its coefficients and innovation
//!   variance,
//! - a tabulated autocorrelation read from a text file.
//!
//! From a model this module builds the `K x K` prior covariance of the phase
//! vector, fits AR approximations by Levinson-Durbin recursion and samples
//! phase trajectories.

use std::fs;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("increment variance must be positive, got {0}")]
    NonPositiveVariance(f64),
    #[error("AR coefficients are not stationary (a root lies on or outside the unit circle)")]
    NonStationary,
    #[error("autocorrelation table: {0}")]
    InvalidTable(String),
    #[error("covariance is not positive definite")]
    NotPositiveDefinite,
    #[error("autocorrelation sequence is not positive semidefinite at length {len} (min eigenvalue {min_eigenvalue:e})")]
    NotPositiveSemidefinite { len: usize, min_eigenvalue: f64 },
    #[error("Levinson-Durbin recursion hit a non-positive prediction error at order {order}")]
    SingularAutocorrelation { order: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
    #[error("i/o error reading {path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Extension of a tabulated autocorrelation beyond its last lag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TailRule {
    /// `R(l) = 0` past the table.
    #[default]
    ZeroBeyondTable,
    /// `R(L + n) = R(L) * rho^n` with `rho = R(L) / R(L - 1)`, used only when
    /// `|rho| < 1`; otherwise the tail is zero.
    GeometricDecay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    White,
    AutoRegressive,
    Tabulated,
}

/// Autocorrelation model of the phase increments.
#[derive(Debug, Clone, PartialEq)]
pub enum PhaseIncrementModel {
    White {
        variance: f64,
    },
    AutoRegressive {
        coeffs: Vec<f64>,
        innovation_variance: f64,
        /// `R(0..=p)`, solved from the Yule-Walker relations at construction.
        head: Vec<f64>,
    },
    Tabulated {
        table: Vec<f64>,
        tail: TailRule,
    },
}

impl PhaseIncrementModel {
    pub fn white(variance: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(ModelError::NonPositiveVariance(variance));
        }
        Ok(Self::White { variance })
    }

    /// AR(p) increments `zeta[k] = sum_i coeffs[i] * zeta[k-1-i] + delta[k]`
    /// with `Var(delta) = innovation_variance`.
    pub fn auto_regressive(coeffs: Vec<f64>, innovation_variance: f64) -> Result<Self> {
        if !(innovation_variance > 0.0 && innovation_variance.is_finite()) {
            return Err(ModelError::NonPositiveVariance(innovation_variance));
        }
        if !is_stationary(&coeffs) {
            return Err(ModelError::NonStationary);
        }
        let head = yule_walker_head(&coeffs, innovation_variance)?;
        Ok(Self::AutoRegressive {
            coeffs,
            innovation_variance,
            head,
        })
    }

    /// AR(p) increments scaled so that `R(0) == variance`.
    pub fn auto_regressive_with_variance(coeffs: Vec<f64>, variance: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(ModelError::NonPositiveVariance(variance));
        }
        let unit = Self::auto_regressive(coeffs.clone(), 1.0)?;
        Self::auto_regressive(coeffs, variance / unit.variance())
    }

    /// Tabulated `R(0), R(1), ...`; negative lags follow by symmetry.
    pub fn tabulated(table: Vec<f64>, tail: TailRule) -> Result<Self> {
        let Some(&r0) = table.first() else {
            return Err(ModelError::InvalidTable("table is empty".into()));
        };
        if !(r0 > 0.0 && r0.is_finite()) {
            return Err(ModelError::NonPositiveVariance(r0));
        }
        if table.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::InvalidTable("non-finite value".into()));
        }
        Ok(Self::Tabulated { table, tail })
    }

    /// Reads a table file: one `lag value` pair per line, lags `0, 1, 2, ...`
    /// in order, `#` starts a comment.
    pub fn load_table(path: impl AsRef<Path>, tail: TailRule) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| ModelError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::tabulated(parse_table(&text)?, tail)
    }

    /// The reference colored model: AR(1) with `R(0) = variance`.
    pub fn reference_colored(alpha: f64, variance: f64) -> Result<Self> {
        Self::auto_regressive_with_variance(vec![alpha], variance)
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Self::White { .. } => ModelKind::White,
            Self::AutoRegressive { .. } => ModelKind::AutoRegressive,
            Self::Tabulated { .. } => ModelKind::Tabulated,
        }
    }

    /// `R(0)`.
    pub fn variance(&self) -> f64 {
        match self {
            Self::White { variance } => *variance,
            Self::AutoRegressive { head, .. } => head[0],
            Self::Tabulated { table, .. } => table[0],
        }
    }

    pub fn ar_coeffs(&self) -> Option<&[f64]> {
        match self {
            Self::AutoRegressive { coeffs, .. } => Some(coeffs),
            _ => None,
        }
    }

    pub fn innovation_variance(&self) -> Option<f64> {
        match self {
            Self::AutoRegressive {
                innovation_variance,
                ..
            } => Some(*innovation_variance),
            _ => None,
        }
    }

    pub fn table(&self) -> Option<&[f64]> {
        match self {
            Self::Tabulated { table, .. } => Some(table),
            _ => None,
        }
    }

    pub fn tail_rule(&self) -> Option<TailRule> {
        match self {
            Self::Tabulated { tail, .. } => Some(*tail),
            _ => None,
        }
    }

    /// `R(lag)`, symmetric in `lag`.
    pub fn autocorrelation(&self, lag: i64) -> f64 {
        let lag = lag.unsigned_abs() as usize;
        match self {
            Self::White { variance } => {
                if lag == 0 {
                    *variance
                } else {
                    0.0
                }
            }
            _ => self.autocorrelation_sequence(lag + 1)[lag],
        }
    }

    /// `R(0), ..., R(len - 1)`.
    pub fn autocorrelation_sequence(&self, len: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(len);
        match self {
            Self::White { variance } => {
                out.resize(len, 0.0);
                if len > 0 {
                    out[0] = *variance;
                }
            }
            Self::AutoRegressive { coeffs, head, .. } => {
                for l in 0..len {
                    let r = if l < head.len() {
                        head[l]
                    } else {
                        coeffs
                            .iter()
                            .enumerate()
                            .map(|(i, a)| a * out[l - 1 - i])
                            .sum()
                    };
                    out.push(r);
                }
            }
            Self::Tabulated { table, tail } => {
                let last = table.len() - 1;
                let rho = match tail {
                    TailRule::GeometricDecay if last >= 1 && table[last - 1] != 0.0 => {
                        let rho = table[last] / table[last - 1];
                        if rho.abs() < 1.0 {
                            rho
                        } else {
                            0.0
                        }
                    }
                    _ => 0.0,
                };
                for l in 0..len {
                    let r = if l <= last {
                        table[l]
                    } else if rho == 0.0 {
                        0.0
                    } else {
                        table[last] * rho.powi((l - last) as i32)
                    };
                    out.push(r);
                }
            }
        }
        out
    }

    /// Checks that the `len x len` Toeplitz matrix of `R` is positive
    /// semidefinite, allowing eigenvalues down to `-1e-12 * R(0)`.
    pub fn check_positive_semidefinite(&self, len: usize) -> Result<()> {
        if len == 0 {
            return Ok(());
        }
        let t = toeplitz(&self.autocorrelation_sequence(len));
        let min_eigenvalue = SymmetricEigen::new(t).eigenvalues.min();
        if min_eigenvalue < -1e-12 * self.variance() {
            return Err(ModelError::NotPositiveSemidefinite { len, min_eigenvalue });
        }
        Ok(())
    }
}

fn parse_table(text: &str) -> Result<Vec<f64>> {
    let mut values = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| ModelError::InvalidTable(format!("line {}: {what}", lineno + 1));
        let mut fields = line.split_whitespace();
        let (Some(lag), Some(value), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(bad("expected `lag value`"));
        };
        let lag: usize = lag.parse().map_err(|_| bad("lag is not a non-negative integer"))?;
        let value: f64 = value.parse().map_err(|_| bad("value is not a number"))?;
        if lag != values.len() {
            return Err(bad(&format!("expected lag {}, found {lag}", values.len())));
        }
        values.push(value);
    }
    Ok(values)
}

/// Symmetric Toeplitz matrix with first column `r`.
pub fn toeplitz(r: &[f64]) -> DMatrix<f64> {
    let n = r.len();
    DMatrix::from_fn(n, n, |i, j| r[i.abs_diff(j)])
}

/// Stationarity test by step-down recursion to reflection coefficients.
pub fn is_stationary(coeffs: &[f64]) -> bool {
    if coeffs.iter().any(|a| !a.is_finite()) {
        return false;
    }
    let mut a = coeffs.to_vec();
    while let Some(&k) = a.last() {
        if k.abs() >= 1.0 {
            return false;
        }
        let m = a.len();
        let denom = 1.0 - k * k;
        let prev: Vec<f64> = (0..m - 1).map(|i| (a[i] + k * a[m - 2 - i]) / denom).collect();
        a = prev;
    }
    true
}

/// Solves `R(l) - sum_i a_i R(|l - i|) = s2 * [l == 0]` for `l = 0..=p`.
fn yule_walker_head(coeffs: &[f64], innovation_variance: f64) -> Result<Vec<f64>> {
    let p = coeffs.len();
    let mut a = DMatrix::<f64>::zeros(p + 1, p + 1);
    for l in 0..=p {
        a[(l, l)] += 1.0;
        for (i, alpha) in coeffs.iter().enumerate() {
            a[(l, l.abs_diff(i + 1))] -= alpha;
        }
    }
    let mut rhs = DVector::<f64>::zeros(p + 1);
    rhs[0] = innovation_variance;
    let head = a.lu().solve(&rhs).ok_or(ModelError::NonStationary)?;
    if head[0].is_nan() || head[0] <= 0.0 {
        return Err(ModelError::NonStationary);
    }
    Ok(head.iter().copied().collect())
}

/// Result of an AR fit.
#[derive(Debug, Clone, PartialEq)]
pub struct ArFit {
    pub coeffs: Vec<f64>,
    pub innovation_variance: f64,
}

/// Levinson-Durbin solution of the order-`order` Yule-Walker system.
pub fn fit_ar(model: &PhaseIncrementModel, order: usize) -> Result<ArFit> {
    if order == 0 {
        return Ok(ArFit {
            coeffs: Vec::new(),
            innovation_variance: model.variance(),
        });
    }
    levinson_durbin(&model.autocorrelation_sequence(order + 1), order)
}

/// Levinson-Durbin recursion on `r[0..=order]`.
pub fn levinson_durbin(r: &[f64], order: usize) -> Result<ArFit> {
    if r.len() <= order {
        return Err(ModelError::InvalidArgument("autocorrelation shorter than order + 1"));
    }
    let mut a: Vec<f64> = Vec::with_capacity(order);
    let mut err = r[0];
    for m in 1..=order {
        if err.is_nan() || err <= 0.0 {
            return Err(ModelError::SingularAutocorrelation { order: m - 1 });
        }
        let acc = r[m] - a.iter().enumerate().map(|(i, ai)| ai * r[m - 1 - i]).sum::<f64>();
        let k = acc / err;
        let prev = a.clone();
        for i in 0..m - 1 {
            a[i] = prev[i] - k * prev[m - 2 - i];
        }
        a.push(k);
        err *= 1.0 - k * k;
    }
    if err < 0.0 {
        return Err(ModelError::SingularAutocorrelation { order });
    }
    Ok(ArFit {
        coeffs: a,
        innovation_variance: err,
    })
}

/// Cholesky factor of the `n x n` increment covariance `Toeplitz(R)`.
fn increment_factor(
    model: &PhaseIncrementModel,
    n: usize,
) -> Result<Option<Cholesky<f64, Dyn>>> {
    if n == 0 {
        return Ok(None);
    }
    let t = toeplitz(&model.autocorrelation_sequence(n));
    Cholesky::new(t).map(Some).ok_or(ModelError::NotPositiveDefinite)
}

/// Prior covariance of the phase vector, together with a factorization of
/// the increment covariance used to apply its inverse.
///
/// With `D` the first-difference operator (`(D theta)[0] = theta[0]`,
/// `(D theta)[k] = theta[k] - theta[k-1]`), `C = D^-1 Lambda D^-T` where
/// `Lambda = blockdiag(theta1_variance, Toeplitz(R))`. The inverse of `C` is
/// applied as `D^T Lambda^-1 D` through the Cholesky factor of the
/// increment block, which stays well conditioned when `theta1_variance` is
/// large.
#[derive(Debug, Clone)]
pub struct PriorCovariance {
    entries: DMatrix<f64>,
    theta1_variance: f64,
    increments: Option<Cholesky<f64, Dyn>>,
    precision: DMatrix<f64>,
}

impl PriorCovariance {
    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn theta1_variance(&self) -> f64 {
        self.theta1_variance
    }

    /// Dense `C^-1`, assembled once from the structured factorization.
    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    /// `C^-1 theta` without forming `C^-1`.
    pub fn apply_precision(&self, theta: &[f64]) -> Vec<f64> {
        assert_eq!(theta.len(), self.dim(), "dimension mismatch");
        let r = self.lambda_inv_diff(theta);
        // D^T r
        let k = r.len();
        (0..k)
            .map(|i| if i + 1 < k { r[i] - r[i + 1] } else { r[i] })
            .collect()
    }

    /// `theta^T C^-1 theta`.
    pub fn quadratic_form(&self, theta: &[f64]) -> f64 {
        assert_eq!(theta.len(), self.dim(), "dimension mismatch");
        let r = self.lambda_inv_diff(theta);
        diff(theta).iter().zip(&r).map(|(d, r)| d * r).sum()
    }

    /// Draws a phase vector from `N(0, C)`.
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let theta1 = self.theta1_variance.sqrt() * rng.sample::<f64, _>(StandardNormal);
        let increments = draw_increments(self.increments.as_ref(), self.dim() - 1, rng);
        cumulative(theta1, &increments)
    }

    fn lambda_inv_diff(&self, theta: &[f64]) -> Vec<f64> {
        let d = diff(theta);
        let mut r = Vec::with_capacity(d.len());
        r.push(d[0] / self.theta1_variance);
        if let Some(chol) = &self.increments {
            let z = chol.solve(&DVector::from_column_slice(&d[1..]));
            r.extend(z.iter());
        }
        r
    }
}

fn diff(theta: &[f64]) -> Vec<f64> {
    let mut d = Vec::with_capacity(theta.len());
    d.push(theta[0]);
    d.extend(theta.windows(2).map(|w| w[1] - w[0]));
    d
}

fn cumulative(theta1: f64, increments: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(increments.len() + 1);
    let mut acc = theta1;
    out.push(acc);
    for z in increments {
        acc += z;
        out.push(acc);
    }
    out
}

fn draw_increments<R: rand::Rng + ?Sized>(
    factor: Option<&Cholesky<f64, Dyn>>,
    n: usize,
    rng: &mut R,
) -> Vec<f64> {
    let Some(chol) = factor else {
        return Vec::new();
    };
    let z = DVector::<f64>::from_fn(n, |_, _| rng.sample(StandardNormal));
    (chol.l() * z).iter().copied().collect()
}

/// Builds `C[m, m'] = s1 + sum_{l<m} sum_{l'<m'} R(l - l')` for the phase
/// vector of length `dim` (1-based sums as in the random-walk expansion).
pub fn build_prior_covariance(
    model: &PhaseIncrementModel,
    dim: usize,
    theta1_variance: f64,
) -> Result<PriorCovariance> {
    if dim == 0 {
        return Err(ModelError::InvalidArgument("block length must be at least 1"));
    }
    if !(theta1_variance > 0.0 && theta1_variance.is_finite()) {
        return Err(ModelError::NonPositiveVariance(theta1_variance));
    }
    let r = model.autocorrelation_sequence(dim);
    // s[i][j] = sum_{l=1..i} sum_{l'=1..j} R(l - l'), by inclusion-exclusion.
    let mut s = DMatrix::<f64>::zeros(dim, dim);
    for i in 1..dim {
        for j in 1..=i {
            let v = s[(i - 1, j)] + s[(i, j - 1)] - s[(i - 1, j - 1)] + r[i - j];
            s[(i, j)] = v;
            // s[(i - 1, i)] is read at j = i; it was mirrored at j = i - 1
            s[(j, i)] = v;
        }
    }
    let entries = s.map(|v| v + theta1_variance);

    let increments = increment_factor(model, dim - 1)?;
    let mut lambda_inv = DMatrix::<f64>::zeros(dim, dim);
    lambda_inv[(0, 0)] = 1.0 / theta1_variance;
    if let Some(chol) = &increments {
        lambda_inv.view_mut((1, 1), (dim - 1, dim - 1)).copy_from(&chol.inverse());
    }
    let mut d = DMatrix::<f64>::identity(dim, dim);
    for k in 1..dim {
        d[(k, k - 1)] = -1.0;
    }
    let mut precision = d.transpose() * lambda_inv * d;
    precision = (&precision + precision.transpose()) * 0.5;

    Ok(PriorCovariance {
        entries,
        theta1_variance,
        increments,
        precision,
    })
}

/// Sampled phase trajectory `theta[0..K]` in radians, unwrapped.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseTrajectory {
    pub values: Vec<f64>,
}

impl PhaseTrajectory {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Draws `theta[0] ~ N(0, theta1_variance)` and jointly Gaussian increments
/// with covariance `Toeplitz(R)`, then accumulates them.
pub fn sample_trajectory(
    model: &PhaseIncrementModel,
    len: usize,
    theta1_variance: f64,
    seed: u64,
) -> Result<PhaseTrajectory> {
    if len == 0 {
        return Err(ModelError::InvalidArgument("block length must be at least 1"));
    }
    if !(theta1_variance >= 0.0 && theta1_variance.is_finite()) {
        return Err(ModelError::NonPositiveVariance(theta1_variance));
    }
    let factor = increment_factor(model, len - 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample_with_factor(factor.as_ref(), len, theta1_variance, &mut rng))
}

fn sample_with_factor<R: rand::Rng + ?Sized>(
    factor: Option<&Cholesky<f64, Dyn>>,
    len: usize,
    theta1_variance: f64,
    rng: &mut R,
) -> PhaseTrajectory {
    let theta1 = theta1_variance.sqrt() * rng.sample::<f64, _>(StandardNormal);
    let increments = draw_increments(factor, len - 1, rng);
    PhaseTrajectory {
        values: cumulative(theta1, &increments),
    }
}

/// Reusable sampler that factors the increment covariance once.
#[derive(Debug, Clone)]
pub struct TrajectorySampler {
    factor: Option<Cholesky<f64, Dyn>>,
    len: usize,
    theta1_variance: f64,
}

impl TrajectorySampler {
    pub fn new(model: &PhaseIncrementModel, len: usize, theta1_variance: f64) -> Result<Self> {
        if len == 0 {
            return Err(ModelError::InvalidArgument("block length must be at least 1"));
        }
        Ok(Self {
            factor: increment_factor(model, len - 1)?,
            len,
            theta1_variance,
        })
    }

    pub fn sample(&self, seed: u64) -> PhaseTrajectory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample_with_factor(self.factor.as_ref(), self.len, self.theta1_variance, &mut rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn ar1() -> PhaseIncrementModel {
        PhaseIncrementModel::auto_regressive(vec![0.5], 7.5e-4).unwrap()
    }

    fn literal_double_sum(model: &PhaseIncrementModel, dim: usize, s1: f64) -> DMatrix<f64> {
        DMatrix::from_fn(dim, dim, |a, b| {
            let (m, mp) = (a + 1, b + 1);
            let mut acc = s1;
            for l in 1..m {
                for lp in 1..mp {
                    acc += model.autocorrelation(l as i64 - lp as i64);
                }
            }
            acc
        })
    }

    #[test]
    fn white_autocorrelation() {
        let m = PhaseIncrementModel::white(1e-3).unwrap();
        assert_eq!(m.autocorrelation(0), 1e-3);
        assert_eq!(m.autocorrelation(3), 0.0);
        assert_eq!(m.autocorrelation(-3), 0.0);
    }

    #[test]
    fn ar1_autocorrelation_closed_form() {
        let m = ar1();
        assert!((m.autocorrelation(0) - 1e-3).abs() < 1e-15);
        assert!((m.autocorrelation(1) - 5e-4).abs() < 1e-15);
        assert!((m.autocorrelation(-1) - 5e-4).abs() < 1e-15);
        assert!((m.autocorrelation(4) - 1e-3 * 0.5f64.powi(4)).abs() < 1e-15);
    }

    #[test]
    fn ar1_lag1_matches_simulated_products() {
        // Direct AR recursion, independent of the Yule-Walker solve.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000;
        let sd = 7.5e-4f64.sqrt();
        let mut z = 0.0f64;
        for _ in 0..1000 {
            z = 0.5 * z + sd * rng.sample::<f64, _>(StandardNormal);
        }
        let mut acc = 0.0;
        for _ in 0..n {
            let next = 0.5 * z + sd * rng.sample::<f64, _>(StandardNormal);
            acc += z * next;
            z = next;
        }
        let est = acc / n as f64;
        // std of the lag-1 product mean is about 1.2e-6 here
        assert!((est - 5e-4).abs() < 6e-6, "lag-1 estimate {est}");
    }

    #[test]
    fn ar2_autocorrelation_satisfies_yule_walker() {
        let m = PhaseIncrementModel::auto_regressive(vec![0.6, -0.2], 1e-4).unwrap();
        let r = m.autocorrelation_sequence(8);
        assert!((r[0] - 0.6 * r[1] + 0.2 * r[2] - 1e-4).abs() < 1e-18);
        for l in 1..8 {
            let lhs = r[l] - 0.6 * r[l - 1] + 0.2 * r[l.abs_diff(2)];
            assert!(lhs.abs() < 1e-18, "lag {l}: {lhs}");
        }
    }

    #[test]
    fn stationarity_check() {
        assert!(is_stationary(&[0.9]));
        assert!(!is_stationary(&[1.0]));
        assert!(!is_stationary(&[-1.2]));
        assert!(is_stationary(&[0.6, -0.2]));
        // (1 - 0.9 z^-1)(1 - 0.5 z^-1) -> coefficients 1.4, -0.45
        assert!(is_stationary(&[1.4, -0.45]));
        // root at 1.1
        assert!(!is_stationary(&[1.6, -0.55]));
        assert!(matches!(
            PhaseIncrementModel::auto_regressive(vec![1.1], 1.0),
            Err(ModelError::NonStationary)
        ));
    }

    #[test]
    fn tabulated_tail_rules() {
        let zero = PhaseIncrementModel::tabulated(vec![1.0, 0.5, 0.25], TailRule::ZeroBeyondTable)
            .unwrap();
        assert_eq!(zero.autocorrelation(2), 0.25);
        assert_eq!(zero.autocorrelation(-1), 0.5);
        assert_eq!(zero.autocorrelation(3), 0.0);
        let geo = PhaseIncrementModel::tabulated(vec![1.0, 0.5, 0.25], TailRule::GeometricDecay)
            .unwrap();
        assert!((geo.autocorrelation(4) - 0.0625).abs() < 1e-15);
    }

    #[test]
    fn table_parsing() {
        let t = parse_table("# header\n0 1e-3\n1 5e-4  # comment\n\n2 2.5e-4\n").unwrap();
        assert_eq!(t, vec![1e-3, 5e-4, 2.5e-4]);
        assert!(parse_table("1 0.5\n").is_err());
        assert!(parse_table("0 x\n").is_err());
        assert!(parse_table("0 1 2\n").is_err());
    }

    #[test]
    fn invalid_models_rejected() {
        assert!(PhaseIncrementModel::white(0.0).is_err());
        assert!(PhaseIncrementModel::tabulated(vec![], TailRule::ZeroBeyondTable).is_err());
        assert!(PhaseIncrementModel::tabulated(vec![-1.0], TailRule::ZeroBeyondTable).is_err());
        let bad = PhaseIncrementModel::tabulated(vec![1.0, 0.99, -0.9], TailRule::ZeroBeyondTable)
            .unwrap();
        assert!(matches!(
            bad.check_positive_semidefinite(3),
            Err(ModelError::NotPositiveSemidefinite { .. })
        ));
        assert!(matches!(
            build_prior_covariance(&bad, 5, 1.0),
            Err(ModelError::NotPositiveDefinite)
        ));
    }

    #[test]
    fn prior_first_entry_is_theta1_variance() {
        for model in [PhaseIncrementModel::white(1e-3).unwrap(), ar1()] {
            let c = build_prior_covariance(&model, 6, 1e4).unwrap();
            assert_eq!(c.entries()[(0, 0)], 1e4);
        }
    }

    #[test]
    fn prior_white_closed_form() {
        let v = 1e-3;
        let model = PhaseIncrementModel::white(v).unwrap();
        for dim in 1..=10 {
            let c = build_prior_covariance(&model, dim, 2.0).unwrap();
            let oracle = literal_double_sum(&model, dim, 2.0);
            for m in 0..dim {
                for mp in 0..dim {
                    let closed = 2.0 + m.min(mp) as f64 * v;
                    assert!((c.entries()[(m, mp)] - closed).abs() < 1e-14);
                    assert!((oracle[(m, mp)] - closed).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn prior_matches_double_sum_ar1_k4() {
        let model = ar1();
        let c = build_prior_covariance(&model, 4, 1.0).unwrap();
        let oracle = literal_double_sum(&model, 4, 1.0);
        assert!((c.entries() - oracle).amax() < 1e-15);
    }

    #[test]
    fn precision_inverts_covariance() {
        let model = ar1();
        let c = build_prior_covariance(&model, 9, 1.0).unwrap();
        let prod = c.entries() * c.precision();
        assert!((prod - DMatrix::identity(9, 9)).amax() < 1e-8);
        let theta: Vec<f64> = (0..9).map(|k| (k as f64 * 0.7).sin()).collect();
        let dense = c.precision() * DVector::from_column_slice(&theta);
        let applied = c.apply_precision(&theta);
        for (a, b) in applied.iter().zip(dense.iter()) {
            assert!((a - b).abs() < 1e-8 * b.abs().max(1.0));
        }
        let q = dense.dot(&DVector::from_column_slice(&theta));
        assert!((c.quadratic_form(&theta) - q).abs() < 1e-8 * q.abs());
    }

    #[test]
    fn single_sample_prior() {
        let model = PhaseIncrementModel::white(1e-3).unwrap();
        let c = build_prior_covariance(&model, 1, 4.0).unwrap();
        assert_eq!(c.apply_precision(&[2.0]), vec![0.5]);
        assert_eq!(c.quadratic_form(&[2.0]), 1.0);
    }

    #[test]
    fn single_sample_trajectory_variance() {
        let model = PhaseIncrementModel::white(1e-3).unwrap();
        let n = 100_000;
        let mut acc = 0.0;
        for seed in 0..n {
            let t = sample_trajectory(&model, 1, 4.0, seed).unwrap();
            assert_eq!(t.len(), 1);
            acc += t.values[0] * t.values[0];
        }
        let var = acc / n as f64;
        // standard error of the variance estimate: 4 * sqrt(2 / n)
        assert!((var - 4.0).abs() < 3.0 * 4.0 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn trajectory_is_deterministic_per_seed() {
        let model = ar1();
        let a = sample_trajectory(&model, 20, 1.0, 42).unwrap();
        let b = sample_trajectory(&model, 20, 1.0, 42).unwrap();
        let c = sample_trajectory(&model, 20, 1.0, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let sampler = TrajectorySampler::new(&model, 20, 1.0).unwrap();
        assert_eq!(sampler.sample(42), a);
    }

    #[test]
    fn white_trajectory_covariance_matches_prior() {
        let model = PhaseIncrementModel::white(1e-3).unwrap();
        let (dim, s1, n) = (5, 1e-3, 100_000u64);
        let prior = build_prior_covariance(&model, dim, s1).unwrap();
        let sampler = TrajectorySampler::new(&model, dim, s1).unwrap();
        let mut sum = DMatrix::<f64>::zeros(dim, dim);
        let mut mean = DVector::<f64>::zeros(dim);
        for seed in 0..n {
            let v = DVector::from_vec(sampler.sample(seed).values);
            sum += &v * v.transpose();
            mean += v;
        }
        let emp = sum / n as f64;
        mean /= n as f64;
        for a in 0..dim {
            let sa = prior.entries()[(a, a)];
            assert!(mean[a].abs() < 3.0 * (sa / n as f64).sqrt());
            for b in 0..dim {
                let sb = prior.entries()[(b, b)];
                let sab = prior.entries()[(a, b)];
                // Var(x_a x_b) = s_aa s_bb + s_ab^2 for zero-mean Gaussians
                let se = ((sa * sb + sab * sab) / n as f64).sqrt();
                assert!(
                    (emp[(a, b)] - sab).abs() < 3.0 * se,
                    "({a},{b}): {} vs {sab}",
                    emp[(a, b)]
                );
            }
        }
    }

    #[test]
    fn ar1_endpoint_difference_variance() {
        let model = PhaseIncrementModel::reference_colored(0.9, 1e-3).unwrap();
        let dim = 8;
        let n = 100_000u64;
        let sampler = TrajectorySampler::new(&model, dim, 1.0).unwrap();
        let mut acc = 0.0;
        for seed in 0..n {
            let t = sampler.sample(seed).values;
            let d = t[dim - 1] - t[0];
            acc += d * d;
        }
        let emp = acc / n as f64;
        let mut expected = 0.0;
        for l in 1..dim {
            for lp in 1..dim {
                expected += model.autocorrelation(l as i64 - lp as i64);
            }
        }
        let se = expected * (2.0 / n as f64).sqrt();
        assert!((emp - expected).abs() < 3.0 * se, "{emp} vs {expected}");
    }

    #[test]
    fn ar_trajectory_agrees_with_recursive_simulation() {
        // cross-check joint-Gaussian sampling against a stationary AR(1)
        // recursion with burn-in
        let alpha = 0.9;
        let model = PhaseIncrementModel::reference_colored(alpha, 1e-3).unwrap();
        let sd = model.innovation_variance().unwrap().sqrt();
        let dim = 6;
        let n = 50_000;
        let sampler = TrajectorySampler::new(&model, dim, 1e-6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut joint, mut recursive) = (0.0, 0.0);
        for seed in 0..n {
            let t = sampler.sample(seed as u64).values;
            joint += (t[dim - 1] - t[0]).powi(2);
            let mut z = 0.0;
            for _ in 0..200 {
                z = alpha * z + sd * rng.sample::<f64, _>(StandardNormal);
            }
            let mut sum = 0.0;
            for _ in 0..dim - 1 {
                sum += z;
                z = alpha * z + sd * rng.sample::<f64, _>(StandardNormal);
            }
            recursive += sum * sum;
        }
        let (joint, recursive) = (joint / n as f64, recursive / n as f64);
        let se = joint * (4.0 / n as f64).sqrt();
        assert!((joint - recursive).abs() < 3.0 * se, "{joint} vs {recursive}");
    }

    #[test]
    fn fit_ar_white_and_ar1() {
        let white = PhaseIncrementModel::white(1e-3).unwrap();
        let fit = fit_ar(&white, 1).unwrap();
        assert_eq!(fit.coeffs, vec![0.0]);
        assert_eq!(fit.innovation_variance, 1e-3);

        let fit = fit_ar(&ar1(), 1).unwrap();
        assert!((fit.coeffs[0] - 0.5).abs() < 1e-12);
        assert!((fit.innovation_variance - 7.5e-4).abs() < 1e-12);
        let fit = fit_ar(&ar1(), 3).unwrap();
        assert!((fit.coeffs[0] - 0.5).abs() < 1e-12);
        assert!(fit.coeffs[1].abs() < 1e-12 && fit.coeffs[2].abs() < 1e-12);
    }

    #[test]
    fn fit_ar2_against_direct_solve() {
        let model = PhaseIncrementModel::auto_regressive(vec![0.6, -0.2], 1e-4).unwrap();
        let r = model.autocorrelation_sequence(3);
        // direct Yule-Walker solve
        let a = DMatrix::from_row_slice(2, 2, &[r[0], r[1], r[1], r[0]]);
        let sol = a.lu().solve(&DVector::from_column_slice(&[r[1], r[2]])).unwrap();
        let fit = fit_ar(&model, 2).unwrap();
        assert!((fit.coeffs[0] - sol[0]).abs() < 1e-10);
        assert!((fit.coeffs[1] - sol[1]).abs() < 1e-10);
        assert!((fit.coeffs[0] - 0.6).abs() < 1e-10);
        assert!((fit.coeffs[1] + 0.2).abs() < 1e-10);
        let under = fit_ar(&model, 1).unwrap();
        assert!(under.innovation_variance > 1e-4);
    }

    #[test]
    fn fit_ar_singular_sequence() {
        // perfectly predictable sequence R(l) = 1 for all l
        let model =
            PhaseIncrementModel::tabulated(vec![1.0, 1.0, 1.0, 1.0], TailRule::ZeroBeyondTable)
                .unwrap();
        assert!(matches!(
            fit_ar(&model, 3),
            Err(ModelError::SingularAutocorrelation { .. })
        ));
    }

    #[test]
    fn load_table_from_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("acf.txt");
        fs::write(&path, "0 0.001\n1 0.0009\n2 0.0008\n").unwrap();
        let model = PhaseIncrementModel::load_table(&path, TailRule::ZeroBeyondTable).unwrap();
        assert_eq!(model.kind(), ModelKind::Tabulated);
        assert_eq!(model.autocorrelation(2), 0.0008);
        assert!(PhaseIncrementModel::load_table(dir.path().join("missing"), TailRule::ZeroBeyondTable).is_err());
    }
}
