//! Study configuration and the line-oriented `key=value` text format shared
//! by config and calibration files.

use crate::calibration::Calibration;
use crate::dgp::DgpTruth;
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use thiserror::Error;

/// Largest sample for which full leave-one-out refits are allowed.
pub const MAX_JACKKNIFE_UNITS: usize = 5000;
/// Largest number of clusters for leave-one-cluster-out refits.
pub const MAX_JACKKNIFE_CLUSTERS: usize = 500;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {message}")]
    Value { key: String, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

/// Parses `key=value` lines; `#` starts a comment, blank lines are skipped,
/// and later duplicates override earlier ones.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut out = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: idx + 1,
            message: format!("expected key=value, found `{line}`"),
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(ConfigError::Syntax { line: idx + 1, message: "empty key".into() });
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn read_file(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|e| ConfigError::Io { path: path.display().to_string(), message: e.to_string() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudyKind {
    AipwStrongDecay,
    NearBoundary,
    ClusteredIccSweep,
    BootstrapConsistency,
}

impl StudyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StudyKind::AipwStrongDecay => "aipw-strong-decay",
            StudyKind::NearBoundary => "near-boundary",
            StudyKind::ClusteredIccSweep => "clustered-icc-sweep",
            StudyKind::BootstrapConsistency => "bootstrap-consistency",
        }
    }

    pub fn is_clustered(self) -> bool {
        self == StudyKind::ClusteredIccSweep
    }
}

impl FromStr for StudyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "aipw-strong-decay" => Ok(StudyKind::AipwStrongDecay),
            "near-boundary" => Ok(StudyKind::NearBoundary),
            "clustered-icc-sweep" => Ok(StudyKind::ClusteredIccSweep),
            "bootstrap-consistency" => Ok(StudyKind::BootstrapConsistency),
            other => Err(format!("unknown study `{other}`")),
        }
    }
}

impl fmt::Display for StudyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Critical-value family for Wald intervals. `T` uses J − 1 degrees of
/// freedom for clustered studies and n − 1 otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CriticalKind {
    Z,
    T,
}

impl FromStr for CriticalKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "z" | "Z" => Ok(CriticalKind::Z),
            "t" | "T" => Ok(CriticalKind::T),
            other => Err(format!("critical must be z or t, got `{other}`")),
        }
    }
}

impl fmt::Display for CriticalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CriticalKind::Z => "z",
            CriticalKind::T => "t",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Markdown,
}

impl FromStr for OutputFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "markdown" | "md" => Ok(OutputFormat::Markdown),
            other => Err(format!("format must be csv or markdown, got `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub study_kind: StudyKind,
    pub sizes: Vec<usize>,
    pub icc_values: Vec<f64>,
    pub reps: usize,
    pub boot_b: usize,
    pub base_seed: u64,
    pub alpha: f64,
    pub critical: CriticalKind,
    pub lambda_q: f64,
    pub lambda_g: f64,
    pub cluster_size: usize,
    pub output_path: Option<PathBuf>,
    pub format: OutputFormat,
    pub worker_count: usize,
    /// Fraction of failed replicates in a cell above which the study aborts.
    pub max_failure_rate: f64,
    pub truth: DgpTruth,
}

impl StudyConfig {
    /// Defaults for a study kind, with λ from the built-in calibration.
    pub fn defaults(kind: StudyKind) -> Self {
        let truth = DgpTruth::default();
        let cal = Calibration::default_for(&truth);
        let (sizes, icc_values, critical) = match kind {
            StudyKind::AipwStrongDecay => (vec![200, 500, 1000, 2000], vec![0.0], CriticalKind::Z),
            StudyKind::NearBoundary => (vec![500, 1000, 2000], vec![0.0], CriticalKind::Z),
            StudyKind::ClusteredIccSweep => (vec![30], vec![0.01, 0.05, 0.10, 0.20], CriticalKind::T),
            StudyKind::BootstrapConsistency => (vec![200, 500, 1000], vec![0.0], CriticalKind::Z),
        };
        StudyConfig {
            study_kind: kind,
            sizes,
            icc_values,
            reps: 500,
            boot_b: 200,
            base_seed: 2024,
            alpha: 0.05,
            critical,
            lambda_q: cal.lambda_q,
            lambda_g: cal.lambda_g,
            cluster_size: 40,
            output_path: None,
            format: OutputFormat::Csv,
            worker_count: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            max_failure_rate: 0.05,
            truth,
        }
    }

    pub fn level(&self) -> f64 {
        1.0 - self.alpha
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.reps < 1 {
            return bad("reps must be at least 1".into());
        }
        if self.sizes.is_empty() {
            return bad("sizes must be nonempty".into());
        }
        if self.sizes.windows(2).any(|w| w[0] >= w[1]) {
            return bad("sizes must be strictly ascending".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha = {} outside (0, 1)", self.alpha));
        }
        if self.icc_values.is_empty() || self.icc_values.iter().any(|v| !(0.0..1.0).contains(v)) {
            return bad("icc values must lie in [0, 1)".into());
        }
        if self.boot_b == 1 {
            return bad("boot must be 0 (disabled) or at least 2".into());
        }
        if self.worker_count == 0 {
            return bad("workers must be at least 1".into());
        }
        if !(self.lambda_q >= 0.0 && self.lambda_g >= 0.0) {
            return bad("lambda values must be non-negative".into());
        }
        if self.study_kind.is_clustered() {
            if self.sizes[0] < 3 {
                return bad("clustered studies need at least 3 clusters".into());
            }
            if let Some(&j) = self.sizes.iter().find(|&&j| j > MAX_JACKKNIFE_CLUSTERS) {
                return bad(format!(
                    "J = {j} exceeds the leave-one-cluster-out cap of {MAX_JACKKNIFE_CLUSTERS}; use fewer clusters"
                ));
            }
            if self.cluster_size < 1 {
                return bad("cluster_size must be at least 1".into());
            }
        } else {
            if self.sizes[0] < 10 {
                return bad("sample sizes must be at least 10".into());
            }
            if let Some(&n) = self.sizes.iter().find(|&&n| n > MAX_JACKKNIFE_UNITS) {
                return bad(format!(
                    "n = {n} exceeds the leave-one-out cap of {MAX_JACKKNIFE_UNITS}; use smaller samples"
                ));
            }
            if self.icc_values.iter().any(|&v| v != 0.0) {
                return bad(format!("study `{}` is unclustered; icc must be 0", self.study_kind));
            }
        }
        if self.study_kind == StudyKind::BootstrapConsistency && self.boot_b < 2 {
            return bad("bootstrap-consistency needs boot >= 2".into());
        }
        Ok(())
    }

    /// Echo of the settings, one `key=value` per line, in the config-file
    /// syntax.
    pub fn echo(&self) -> String {
        let join = |xs: Vec<String>| xs.join(",");
        format!(
            "study={}\nsizes={}\nicc={}\nreps={}\nboot={}\nseed={}\nalpha={}\ncritical={}\nlambda_q={}\nlambda_g={}\ncluster_size={}\nworkers={}\n",
            self.study_kind,
            join(self.sizes.iter().map(|s| s.to_string()).collect()),
            join(self.icc_values.iter().map(|s| s.to_string()).collect()),
            self.reps,
            self.boot_b,
            self.base_seed,
            self.alpha,
            self.critical,
            self.lambda_q,
            self.lambda_g,
            self.cluster_size,
            self.worker_count,
        )
    }
}

/// Partially specified settings from a config file or the command line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigOverrides {
    pub study: Option<StudyKind>,
    pub sizes: Option<Vec<usize>>,
    pub icc: Option<Vec<f64>>,
    pub reps: Option<usize>,
    pub boot: Option<usize>,
    pub seed: Option<u64>,
    pub alpha: Option<f64>,
    pub critical: Option<CriticalKind>,
    pub lambda: Option<(f64, f64)>,
    pub cluster_size: Option<usize>,
    pub calibration: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub format: Option<OutputFormat>,
    pub workers: Option<usize>,
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| ConfigError::Value { key: key.into(), message: e.to_string() })
}

pub fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: fmt::Display,
{
    v.split(',').map(|s| parse_value(key, s.trim())).collect()
}

pub fn parse_lambda(v: &str) -> Result<(f64, f64), ConfigError> {
    let xs: Vec<f64> = parse_list("lambda", v)?;
    match xs.as_slice() {
        [q, g] => Ok((*q, *g)),
        [l] => Ok((*l, *l)),
        _ => Err(ConfigError::Value { key: "lambda".into(), message: "expected `q,g` or a single value".into() }),
    }
}

impl ConfigOverrides {
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let kv = parse_key_values(text)?;
        let mut o = ConfigOverrides::default();
        let mut lq = None;
        let mut lg = None;
        for (k, v) in &kv {
            match k.as_str() {
                "study" => o.study = Some(parse_value(k, v)?),
                "sizes" => o.sizes = Some(parse_list(k, v)?),
                "icc" => o.icc = Some(parse_list(k, v)?),
                "reps" => o.reps = Some(parse_value(k, v)?),
                "boot" => o.boot = Some(parse_value(k, v)?),
                "seed" => o.seed = Some(parse_value(k, v)?),
                "alpha" => o.alpha = Some(parse_value(k, v)?),
                "critical" => o.critical = Some(parse_value(k, v)?),
                "lambda" => o.lambda = Some(parse_lambda(v)?),
                "lambda_q" => lq = Some(parse_value::<f64>(k, v)?),
                "lambda_g" => lg = Some(parse_value::<f64>(k, v)?),
                "cluster_size" => o.cluster_size = Some(parse_value(k, v)?),
                "calibration" => o.calibration = Some(PathBuf::from(v)),
                "out" => o.out = Some(PathBuf::from(v)),
                "format" => o.format = Some(parse_value(k, v)?),
                "workers" => o.workers = Some(parse_value(k, v)?),
                other => return Err(ConfigError::UnknownKey(other.to_string())),
            }
        }
        match (lq, lg) {
            (Some(q), Some(g)) => o.lambda = Some((q, g)),
            (None, None) => {}
            _ => return Err(ConfigError::Invalid("lambda_q and lambda_g must be given together".into())),
        }
        Ok(o)
    }

    /// Fields set in `other` replace those set here.
    pub fn merge(mut self, other: ConfigOverrides) -> Self {
        macro_rules! take {
            ($($f:ident),*) => { $( if other.$f.is_some() { self.$f = other.$f; } )* };
        }
        take!(study, sizes, icc, reps, boot, seed, alpha, critical, lambda, cluster_size, calibration, out, format, workers);
        self
    }

    /// Resolves against the defaults of the chosen study kind. λ comes from,
    /// in order: an explicit value, the calibration file, the built-in
    /// calibration.
    pub fn build(self) -> Result<StudyConfig, ConfigError> {
        let kind = self.study.ok_or_else(|| ConfigError::Invalid("study kind is required".into()))?;
        let mut c = StudyConfig::defaults(kind);
        if let Some(v) = self.sizes {
            c.sizes = v;
        }
        if let Some(v) = self.icc {
            c.icc_values = v;
        }
        if let Some(v) = self.reps {
            c.reps = v;
        }
        if let Some(v) = self.boot {
            c.boot_b = v;
        }
        if let Some(v) = self.seed {
            c.base_seed = v;
        }
        if let Some(v) = self.alpha {
            c.alpha = v;
        }
        if let Some(v) = self.critical {
            c.critical = v;
        }
        if let Some(v) = self.cluster_size {
            c.cluster_size = v;
        }
        if let Some(path) = &self.calibration {
            let cal = crate::harness::calibration_file::read(path)?;
            c.lambda_q = cal.lambda_q;
            c.lambda_g = cal.lambda_g;
        }
        if let Some((q, g)) = self.lambda {
            c.lambda_q = q;
            c.lambda_g = g;
        }
        c.output_path = self.out;
        if let Some(v) = self.format {
            c.format = v;
        }
        if let Some(v) = self.workers {
            c.worker_count = v;
        }
        c.validate()?;
        Ok(c)
    }
}
