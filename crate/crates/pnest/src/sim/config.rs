//! Flat `key = value` experiment configuration.
//!
//! ```text
//! # MSE vs SNR, 21% pilots
//! experiment = mse
//! pilot_density = 0.21
//! increment_model = ar
//! ar_coeffs = 0.9
//! increment_variance = 1e-3
//! snr_grid_db = 0, 10, 20, 30
//! estimators = map, eks_p1, white_eks, dct
//! ```
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `experiment` | `mse` | `mse`, `mse_vs_bcrb` or `ser` |
//! | `block_length` | 101 | symbols per block |
//! | `constellation_order` | 16 | 4, 16 or 64 (Gray QAM) |
//! | `pilot_density` | 0.21 | fraction of pilots in (0, 1] |
//! | `increment_model` | `ar` | `white`, `ar` or `tabulated` |
//! | `increment_variance` | 1e-3 | `R(0)` in rad^2 (white and ar) |
//! | `ar_coeffs` | 0.9 | comma-separated AR coefficients (ar) |
//! | `table_file` | | autocorrelation table, relative to the config (tabulated) |
//! | `tail_rule` | `zero` | `zero` or `geometric` (tabulated) |
//! | `theta1_variance` | 1e4 | prior variance of the first phase, rad^2 |
//! | `snr_grid_db` | 0, 5, .., 30 | comma-separated SNRs, `SNR = 1 / sigma^2` |
//! | `estimators` | `map, eks_p1, white_eks, dct` | also `eks_p<N>`, `genie` |
//! | `dct_coefficients` | half the pilots | retained DCT coefficients |
//! | `map_gradient_tolerance` | 1e-6 | stopping rule on `max |g|` |
//! | `map_max_iterations` | 50 | Newton iteration cap |
//! | `map_backtracking` | `true` | step halving line search |
//! | `n_trials` | 500 (`ser`: enough for 2e5 data symbols) | blocks per SNR |
//! | `n_detection_iterations` | 3 | estimation-detection rounds |
//! | `master_seed` | 1 | seed of every random draw |
//! | `wrap_diagnostics` | `false` | also report MSE of wrapped errors |

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::map::{MapOptions, StepDamping};
use crate::pn_process::{ModelError, PhaseIncrementModel, TailRule};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{}{field}: {message}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
pub struct ConfigError {
    pub line: Option<usize>,
    pub field: String,
    pub message: String,
}

impl ConfigError {
    fn new(line: Option<usize>, field: &str, message: impl Into<String>) -> Self {
        Self {
            line,
            field: field.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Mse,
    MseVsBcrb,
    Ser,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Self::Mse => "mse",
            Self::MseVsBcrb => "mse_vs_bcrb",
            Self::Ser => "ser",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mse" => Ok(Self::Mse),
            "mse_vs_bcrb" => Ok(Self::MseVsBcrb),
            "ser" => Ok(Self::Ser),
            _ => Err(format!("unknown experiment `{s}` (mse, mse_vs_bcrb, ser)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum IncrementSpec {
    White { variance: f64 },
    AutoRegressive { coeffs: Vec<f64>, variance: f64 },
    Tabulated { path: PathBuf, tail: TailRule },
}

impl IncrementSpec {
    pub fn build(&self) -> Result<PhaseIncrementModel, ModelError> {
        match self {
            Self::White { variance } => PhaseIncrementModel::white(*variance),
            Self::AutoRegressive { coeffs, variance } => {
                PhaseIncrementModel::auto_regressive_with_variance(coeffs.clone(), *variance)
            }
            Self::Tabulated { path, tail } => PhaseIncrementModel::load_table(path, *tail),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorSpec {
    Map,
    /// EKS on an AR(order) fit of the true increment model.
    Eks { order: usize },
    WhiteEks,
    Dct,
    Genie,
}

impl EstimatorSpec {
    pub fn name(&self) -> String {
        match self {
            Self::Map => "map".into(),
            Self::Eks { order } => format!("eks_p{order}"),
            Self::WhiteEks => "white_eks".into(),
            Self::Dct => "dct".into(),
            Self::Genie => "genie".into(),
        }
    }
}

impl FromStr for EstimatorSpec {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "map" => Ok(Self::Map),
            "white_eks" => Ok(Self::WhiteEks),
            "dct" => Ok(Self::Dct),
            "genie" => Ok(Self::Genie),
            _ => {
                let order = s
                    .strip_prefix("eks_p")
                    .and_then(|p| p.parse::<usize>().ok())
                    .ok_or_else(|| {
                        format!("unknown estimator `{s}` (map, eks_p<N>, white_eks, dct, genie)")
                    })?;
                if order > 10 {
                    return Err(format!("AR order {order} above the supported maximum of 10"));
                }
                Ok(Self::Eks { order })
            }
        }
    }
}

/// Data symbols per SER point unless `n_trials` is given.
pub const SER_TARGET_SYMBOLS: usize = 200_000;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub block_length: usize,
    pub constellation_order: usize,
    pub pilot_density: f64,
    pub increment: IncrementSpec,
    pub theta1_variance: f64,
    pub snr_grid_db: Vec<f64>,
    pub estimators: Vec<EstimatorSpec>,
    pub dct_coefficients: Option<usize>,
    pub map_options: MapOptions,
    pub n_trials: usize,
    pub n_detection_iterations: usize,
    pub master_seed: u64,
    pub wrap_diagnostics: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: Experiment::Mse,
            block_length: 101,
            constellation_order: 16,
            pilot_density: 0.21,
            increment: IncrementSpec::AutoRegressive {
                coeffs: vec![0.9],
                variance: 1e-3,
            },
            theta1_variance: 1e4,
            snr_grid_db: (0..=6).map(|i| 5.0 * i as f64).collect(),
            estimators: vec![
                EstimatorSpec::Map,
                EstimatorSpec::Eks { order: 1 },
                EstimatorSpec::WhiteEks,
                EstimatorSpec::Dct,
            ],
            dct_coefficients: None,
            map_options: MapOptions::default(),
            n_trials: 500,
            n_detection_iterations: 3,
            master_seed: 1,
            wrap_diagnostics: false,
        }
    }
}

const KEYS: &[&str] = &[
    "experiment",
    "block_length",
    "constellation_order",
    "pilot_density",
    "increment_model",
    "increment_variance",
    "ar_coeffs",
    "table_file",
    "tail_rule",
    "theta1_variance",
    "snr_grid_db",
    "estimators",
    "dct_coefficients",
    "map_gradient_tolerance",
    "map_max_iterations",
    "map_backtracking",
    "n_trials",
    "n_detection_iterations",
    "master_seed",
    "wrap_diagnostics",
];

fn parse_value<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<T, ConfigError> {
    raw.parse()
        .map_err(|_| ConfigError::new(Some(line), key, format!("cannot parse `{raw}`")))
}

fn parse_list<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<Vec<T>, ConfigError> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(line, key, s))
        .collect()
}

fn parse_bool(line: usize, key: &str, raw: &str) -> Result<bool, ConfigError> {
    match raw {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(ConfigError::new(Some(line), key, format!("expected true/false, got `{raw}`"))),
    }
}

impl ExperimentConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new(None, "config", format!("{}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Parses config text; relative table paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen: Vec<(&str, usize)> = Vec::new();
        let mut model_kind: Option<(String, usize)> = None;
        let mut variance: Option<f64> = None;
        let mut coeffs: Option<Vec<f64>> = None;
        let mut table: Option<PathBuf> = None;
        let mut tail = TailRule::ZeroBeyondTable;
        let mut n_trials: Option<usize> = None;

        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(ConfigError::new(Some(line), content, "expected `key = value`"));
            };
            let (key, value) = (key.trim(), value.trim());
            let Some(&known) = KEYS.iter().find(|&&k| k == key) else {
                return Err(ConfigError::new(Some(line), key, "unknown key"));
            };
            if let Some((_, first)) = seen.iter().find(|(k, _)| *k == known) {
                return Err(ConfigError::new(
                    Some(line),
                    key,
                    format!("duplicate key (first set on line {first})"),
                ));
            }
            seen.push((known, line));

            match known {
                "experiment" => {
                    cfg.experiment = value.parse().map_err(|e| ConfigError::new(Some(line), key, e))?
                }
                "block_length" => cfg.block_length = parse_value(line, key, value)?,
                "constellation_order" => cfg.constellation_order = parse_value(line, key, value)?,
                "pilot_density" => cfg.pilot_density = parse_value(line, key, value)?,
                "increment_model" => model_kind = Some((value.to_string(), line)),
                "increment_variance" => variance = Some(parse_value(line, key, value)?),
                "ar_coeffs" => coeffs = Some(parse_list(line, key, value)?),
                "table_file" => table = Some(base_dir.join(value)),
                "tail_rule" => {
                    tail = match value {
                        "zero" => TailRule::ZeroBeyondTable,
                        "geometric" => TailRule::GeometricDecay,
                        _ => {
                            return Err(ConfigError::new(
                                Some(line),
                                key,
                                format!("expected zero or geometric, got `{value}`"),
                            ))
                        }
                    }
                }
                "theta1_variance" => cfg.theta1_variance = parse_value(line, key, value)?,
                "snr_grid_db" => cfg.snr_grid_db = parse_list(line, key, value)?,
                "estimators" => {
                    cfg.estimators = value
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(|s| s.parse().map_err(|e| ConfigError::new(Some(line), key, e)))
                        .collect::<Result<_, _>>()?
                }
                "dct_coefficients" => cfg.dct_coefficients = Some(parse_value(line, key, value)?),
                "map_gradient_tolerance" => {
                    cfg.map_options.gradient_tolerance = parse_value(line, key, value)?
                }
                "map_max_iterations" => cfg.map_options.max_iterations = parse_value(line, key, value)?,
                "map_backtracking" => {
                    cfg.map_options.step_damping = if parse_bool(line, key, value)? {
                        StepDamping::Backtracking
                    } else {
                        StepDamping::None
                    }
                }
                "n_trials" => n_trials = Some(parse_value(line, key, value)?),
                "n_detection_iterations" => cfg.n_detection_iterations = parse_value(line, key, value)?,
                "master_seed" => cfg.master_seed = parse_value(line, key, value)?,
                "wrap_diagnostics" => cfg.wrap_diagnostics = parse_bool(line, key, value)?,
                _ => unreachable!("key list and match arms agree"),
            }
        }

        let line_of = |k: &str| seen.iter().find(|(s, _)| *s == k).map(|(_, l)| *l);
        let kind = model_kind.as_ref().map(|(k, _)| k.as_str()).unwrap_or("ar");
        let kind_line = model_kind.as_ref().map(|(_, l)| *l);
        let unused = |k: &str, why: &str| -> Result<(), ConfigError> {
            match line_of(k) {
                Some(l) => Err(ConfigError::new(Some(l), k, why.to_string())),
                None => Ok(()),
            }
        };
        cfg.increment = match kind {
            "white" => {
                unused("ar_coeffs", "only valid with increment_model = ar")?;
                unused("table_file", "only valid with increment_model = tabulated")?;
                IncrementSpec::White {
                    variance: variance.unwrap_or(1e-3),
                }
            }
            "ar" => {
                unused("table_file", "only valid with increment_model = tabulated")?;
                IncrementSpec::AutoRegressive {
                    coeffs: coeffs.unwrap_or_else(|| vec![0.9]),
                    variance: variance.unwrap_or(1e-3),
                }
            }
            "tabulated" => {
                unused("ar_coeffs", "only valid with increment_model = ar")?;
                unused("increment_variance", "the table defines R(0)")?;
                let path = table.ok_or_else(|| {
                    ConfigError::new(kind_line, "table_file", "required with increment_model = tabulated")
                })?;
                IncrementSpec::Tabulated { path, tail }
            }
            other => {
                return Err(ConfigError::new(
                    kind_line,
                    "increment_model",
                    format!("expected white, ar or tabulated, got `{other}`"),
                ))
            }
        };

        cfg.n_trials = match n_trials {
            Some(n) => n,
            None if cfg.experiment == Experiment::Ser => cfg.default_ser_trials(),
            None => 500,
        };
        cfg.validate_with_lines(&line_of)?;
        Ok(cfg)
    }

    /// Blocks needed to reach [`SER_TARGET_SYMBOLS`] data symbols.
    pub fn default_ser_trials(&self) -> usize {
        let pilots = crate::signal::uniform_pilots(self.block_length.max(2), self.pilot_density.clamp(1e-9, 1.0))
            .map(|p| p.count())
            .unwrap_or(self.block_length);
        let data = self.block_length.saturating_sub(pilots).max(1);
        SER_TARGET_SYMBOLS.div_ceil(data)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.validate_with_lines(&|_| None)
    }

    fn validate_with_lines(&self, line_of: &dyn Fn(&str) -> Option<usize>) -> Result<(), ConfigError> {
        let err = |k: &str, m: String| ConfigError::new(line_of(k), k, m);
        if self.block_length < 2 {
            return Err(err("block_length", "must be at least 2".into()));
        }
        if ![4, 16, 64].contains(&self.constellation_order) {
            return Err(err("constellation_order", "must be 4, 16 or 64".into()));
        }
        if !(self.pilot_density > 0.0 && self.pilot_density <= 1.0) {
            return Err(err("pilot_density", "must lie in (0, 1]".into()));
        }
        if !(self.theta1_variance > 0.0 && self.theta1_variance.is_finite()) {
            return Err(err("theta1_variance", "must be positive".into()));
        }
        if self.snr_grid_db.is_empty() || self.snr_grid_db.iter().any(|s| !s.is_finite()) {
            return Err(err("snr_grid_db", "must be a nonempty list of finite values".into()));
        }
        if self.estimators.is_empty() {
            return Err(err("estimators", "must list at least one estimator".into()));
        }
        for (i, e) in self.estimators.iter().enumerate() {
            if self.estimators[..i].contains(e) {
                return Err(err("estimators", format!("`{}` listed twice", e.name())));
            }
        }
        if self.n_trials == 0 {
            return Err(err("n_trials", "must be at least 1".into()));
        }
        if self.n_detection_iterations == 0 {
            return Err(err("n_detection_iterations", "must be at least 1".into()));
        }
        if self.map_options.gradient_tolerance.is_nan() || self.map_options.gradient_tolerance <= 0.0 {
            return Err(err("map_gradient_tolerance", "must be positive".into()));
        }
        if self.map_options.max_iterations == 0 {
            return Err(err("map_max_iterations", "must be at least 1".into()));
        }
        if self.dct_coefficients == Some(0) {
            return Err(err("dct_coefficients", "must be at least 1".into()));
        }
        let model = self
            .increment
            .build()
            .map_err(|e| err("increment_model", e.to_string()))?;
        model
            .check_positive_semidefinite(self.block_length)
            .map_err(|e| err("increment_model", e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig, ConfigError> {
        ExperimentConfig::parse(text, Path::new("."))
    }

    #[test]
    fn defaults() {
        let cfg = parse("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let ser = parse("experiment = ser\n").unwrap();
        // 22 pilots out of 101 leave 79 data symbols per block
        assert_eq!(ser.n_trials, 200_000usize.div_ceil(79));
    }

    #[test]
    fn full_config() {
        let cfg = parse(
            "# comment\nexperiment = mse_vs_bcrb\nblock_length=51\nconstellation_order = 4\n\
             pilot_density = 0.06 # trailing\nincrement_model = white\nincrement_variance = 2e-3\n\
             snr_grid_db = 10, 20\nestimators = map, eks_p5, genie\nmap_backtracking = false\n\
             n_trials = 7\nmaster_seed = 99\nwrap_diagnostics = true\n",
        )
        .unwrap();
        assert_eq!(cfg.experiment, Experiment::MseVsBcrb);
        assert_eq!(cfg.block_length, 51);
        assert_eq!(cfg.increment, IncrementSpec::White { variance: 2e-3 });
        assert_eq!(cfg.snr_grid_db, vec![10.0, 20.0]);
        assert_eq!(
            cfg.estimators,
            vec![EstimatorSpec::Map, EstimatorSpec::Eks { order: 5 }, EstimatorSpec::Genie]
        );
        assert_eq!(cfg.map_options.step_damping, StepDamping::None);
        assert_eq!((cfg.n_trials, cfg.master_seed, cfg.wrap_diagnostics), (7, 99, true));
    }

    #[test]
    fn unknown_key_is_an_error_with_line() {
        let e = parse("n_trials = 3\nbogus = 1\n").unwrap_err();
        assert_eq!(e.line, Some(2));
        assert_eq!(e.field, "bogus");
    }

    #[test]
    fn bad_values() {
        assert_eq!(parse("n_trials = x\n").unwrap_err().line, Some(1));
        assert_eq!(parse("\nn_trials = 0\n").unwrap_err().line, Some(2));
        assert!(parse("estimators = map, kalman\n").is_err());
        assert!(parse("estimators = eks_p11\n").is_err());
        assert!(parse("pilot_density = 1.5\n").is_err());
        assert!(parse("experiment = mse\nexperiment = ser\n").is_err());
        assert!(parse("increment_model = white\nar_coeffs = 0.5\n").is_err());
        assert!(parse("increment_model = tabulated\n").is_err());
        assert!(parse("ar_coeffs = 1.2\n").is_err());
        assert!(parse("no equals sign\n").is_err());
        assert!(parse("snr_grid_db = \n").is_err());
    }

    #[test]
    fn tabulated_relative_path() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("acf.txt"), "0 1e-3\n1 9e-4\n").unwrap();
        let cfg = ExperimentConfig::parse(
            "increment_model = tabulated\ntable_file = acf.txt\ntail_rule = geometric\n",
            dir.path(),
        )
        .unwrap();
        assert_eq!(
            cfg.increment,
            IncrementSpec::Tabulated {
                path: dir.path().join("acf.txt"),
                tail: TailRule::GeometricDecay
            }
        );
    }
}
