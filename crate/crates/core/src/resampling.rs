//! Variance estimators and confidence intervals: sandwich, leave-one-out and
//! leave-one-cluster-out jackknife, pairs and cluster bootstrap, BCa, the
//! HC-corrected sandwich, and Wald intervals.

use crate::dgp::ClusteredDataset;
use crate::dist::{normal_cdf, normal_quantile, t_quantile};
use crate::numeric::{sum_sq_dev, CompensatedSum};
use crate::rng::SeedPath;
use rand::Rng;
use rayon::prelude::*;
use std::fmt::Display;
use thiserror::Error;

/// Redraws allowed per bootstrap replicate before giving up.
pub const MAX_BOOTSTRAP_RETRIES: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ResamplingError {
    #[error("invalid size: {what} = {got}, need at least {min}")]
    InvalidSize { what: &'static str, got: usize, min: usize },
    #[error("jackknife refits failed at indices {indices:?}: {first_error}")]
    JackknifeRefit { indices: Vec<usize>, first_error: String },
    #[error("bootstrap replicate {replicate} failed {attempts} times; last error: {last_error}")]
    BootstrapDegenerate { replicate: usize, attempts: usize, last_error: String },
    #[error("all bootstrap replicates are identical")]
    DegenerateDistribution,
    #[error("sandwich variance is zero; the variance ratio is undefined")]
    DivisionDegenerate,
    #[error("confidence level {0} outside (0, 1)")]
    InvalidLevel(f64),
    #[error("variance {0} is negative or not a number")]
    InvalidVariance(f64),
}

impl ResamplingError {
    /// Short reason code for failure tallies.
    pub fn code(&self) -> &'static str {
        match self {
            ResamplingError::InvalidSize { .. } => "invalid-size",
            ResamplingError::JackknifeRefit { .. } => "jackknife-refit",
            ResamplingError::BootstrapDegenerate { .. } => "bootstrap-degenerate",
            ResamplingError::DegenerateDistribution => "degenerate-distribution",
            ResamplingError::DivisionDegenerate => "zero-sandwich",
            ResamplingError::InvalidLevel(_) => "invalid-level",
            ResamplingError::InvalidVariance(_) => "invalid-variance",
        }
    }
}

/// A statistic that can be recomputed with one unit (row or cluster) deleted.
pub trait LeaveOneOut: Sync {
    type Error: Display + Send;

    fn units(&self) -> usize;

    fn estimate_without(&self, unit: usize) -> Result<f64, Self::Error>;
}

/// Deletion refits of an arbitrary functional over a slice of units.
pub struct DeletionRefit<'a, T, F> {
    data: &'a [T],
    estimate_fn: F,
}

impl<'a, T, F, E> DeletionRefit<'a, T, F>
where
    T: Clone + Sync,
    F: Fn(&[T]) -> Result<f64, E> + Sync,
{
    pub fn new(estimate_fn: F, data: &'a [T]) -> Self {
        DeletionRefit { data, estimate_fn }
    }
}

impl<T, F, E> LeaveOneOut for DeletionRefit<'_, T, F>
where
    T: Clone + Sync,
    F: Fn(&[T]) -> Result<f64, E> + Sync,
    E: Display + Send,
{
    type Error = E;

    fn units(&self) -> usize {
        self.data.len()
    }

    fn estimate_without(&self, i: usize) -> Result<f64, E> {
        let mut reduced = Vec::with_capacity(self.data.len() - 1);
        reduced.extend_from_slice(&self.data[..i]);
        reduced.extend_from_slice(&self.data[i + 1..]);
        (self.estimate_fn)(&reduced)
    }
}

/// Whole-cluster deletion refits of an arbitrary functional.
pub struct ClusterDeletionRefit<'a, F> {
    data: &'a ClusteredDataset,
    estimate_fn: F,
}

impl<'a, F, E> ClusterDeletionRefit<'a, F>
where
    F: Fn(&ClusteredDataset) -> Result<f64, E> + Sync,
{
    pub fn new(estimate_fn: F, data: &'a ClusteredDataset) -> Self {
        ClusterDeletionRefit { data, estimate_fn }
    }
}

impl<F, E> LeaveOneOut for ClusterDeletionRefit<'_, F>
where
    F: Fn(&ClusteredDataset) -> Result<f64, E> + Sync,
    E: Display + Send,
{
    type Error = E;

    fn units(&self) -> usize {
        self.data.n_clusters()
    }

    fn estimate_without(&self, j: usize) -> Result<f64, E> {
        (self.estimate_fn)(&self.data.without_cluster(j))
    }
}

/// Σ(Dᵢ − D̄)² / ((n − 1)·n).
pub fn sandwich(scores: &[f64]) -> Result<f64, ResamplingError> {
    let n = scores.len();
    if n < 2 {
        return Err(ResamplingError::InvalidSize { what: "n", got: n, min: 2 });
    }
    Ok(sum_sq_dev(scores) / ((n - 1) as f64 * n as f64))
}

/// The sandwich applied to per-cluster score sums.
pub fn cluster_sandwich(cluster_scores: &[f64]) -> Result<f64, ResamplingError> {
    if cluster_scores.len() < 2 {
        return Err(ResamplingError::InvalidSize { what: "J", got: cluster_scores.len(), min: 2 });
    }
    sandwich(cluster_scores)
}

#[derive(Debug, Clone, PartialEq)]
pub struct JackknifeResult {
    pub var_jk: f64,
    pub loo_estimates: Vec<f64>,
}

/// ((n − 1)/n)·Σ(Ψ̂⁽⁻ⁱ⁾ − Ψ̄)².
pub fn jackknife_variance(loo_estimates: &[f64]) -> f64 {
    let n = loo_estimates.len() as f64;
    (n - 1.0) / n * sum_sq_dev(loo_estimates)
}

fn run_jackknife<L: LeaveOneOut>(loo: &L, min_units: usize, what: &'static str) -> Result<JackknifeResult, ResamplingError> {
    let n = loo.units();
    if n < min_units {
        return Err(ResamplingError::InvalidSize { what, got: n, min: min_units });
    }
    let results: Vec<Result<f64, String>> =
        (0..n).into_par_iter().map(|i| loo.estimate_without(i).map_err(|e| e.to_string())).collect();
    let mut loo_estimates = Vec::with_capacity(n);
    let mut indices = Vec::new();
    let mut first_error = None;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => loo_estimates.push(v),
            Err(e) => {
                indices.push(i);
                first_error.get_or_insert(e);
            }
        }
    }
    if !indices.is_empty() {
        return Err(ResamplingError::JackknifeRefit { indices, first_error: first_error.unwrap_or_default() });
    }
    Ok(JackknifeResult { var_jk: jackknife_variance(&loo_estimates), loo_estimates })
}

/// Delete-one jackknife over the units of `loo`.
pub fn jackknife<L: LeaveOneOut>(loo: &L) -> Result<JackknifeResult, ResamplingError> {
    run_jackknife(loo, 3, "n")
}

/// Delete-one jackknife of `estimate_fn` by refitting on each deleted sample.
pub fn jackknife_fn<T, F, E>(estimate_fn: F, data: &[T]) -> Result<JackknifeResult, ResamplingError>
where
    T: Clone + Sync,
    F: Fn(&[T]) -> Result<f64, E> + Sync,
    E: Display + Send,
{
    jackknife(&DeletionRefit::new(estimate_fn, data))
}

/// Leave-one-cluster-out jackknife over the clusters of `loo`.
pub fn cluster_jackknife<L: LeaveOneOut>(loo: &L) -> Result<JackknifeResult, ResamplingError> {
    run_jackknife(loo, 3, "J")
}

pub fn cluster_jackknife_fn<F, E>(estimate_fn: F, data: &ClusteredDataset) -> Result<JackknifeResult, ResamplingError>
where
    F: Fn(&ClusteredDataset) -> Result<f64, E> + Sync,
    E: Display + Send,
{
    cluster_jackknife(&ClusterDeletionRefit::new(estimate_fn, data))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    pub var_boot: f64,
    pub replicates: Vec<f64>,
    /// Total redraws caused by failed resamples.
    pub retries: usize,
}

/// Resample indices for replicate `b`, attempt `attempt`.
fn draw_indices(seed: SeedPath, b: usize, attempt: usize, units: usize) -> Vec<usize> {
    let mut rng = seed.child(b as u64).child(attempt as u64).rng();
    (0..units).map(|_| rng.random_range(0..units)).collect()
}

fn run_bootstrap<S, E>(units: usize, b: usize, seed: SeedPath, stat: S) -> Result<BootstrapResult, ResamplingError>
where
    S: Fn(&[usize]) -> Result<f64, E> + Sync,
    E: Display,
{
    if b < 2 {
        return Err(ResamplingError::InvalidSize { what: "B", got: b, min: 2 });
    }
    let outcomes: Vec<Result<(f64, usize), ResamplingError>> = (0..b)
        .into_par_iter()
        .map(|rep| {
            let mut last_error = String::new();
            for attempt in 0..=MAX_BOOTSTRAP_RETRIES {
                match stat(&draw_indices(seed, rep, attempt, units)) {
                    Ok(v) => return Ok((v, attempt)),
                    Err(e) => last_error = e.to_string(),
                }
            }
            Err(ResamplingError::BootstrapDegenerate {
                replicate: rep,
                attempts: MAX_BOOTSTRAP_RETRIES + 1,
                last_error,
            })
        })
        .collect();
    let mut replicates = Vec::with_capacity(b);
    let mut retries = 0;
    for o in outcomes {
        let (v, r) = o?;
        replicates.push(v);
        retries += r;
    }
    let var_boot = sum_sq_dev(&replicates) / (b - 1) as f64;
    Ok(BootstrapResult { var_boot, replicates, retries })
}

/// Nonparametric bootstrap resampling units with replacement.
///
/// A resample on which `estimate_fn` fails is redrawn from a fresh stream,
/// up to [`MAX_BOOTSTRAP_RETRIES`] times.
pub fn pairs_bootstrap<T, F, E>(estimate_fn: F, data: &[T], b: usize, seed: SeedPath) -> Result<BootstrapResult, ResamplingError>
where
    T: Clone + Sync,
    F: Fn(&[T]) -> Result<f64, E> + Sync,
    E: Display,
{
    run_bootstrap(data.len(), b, seed, |idx| {
        let sample: Vec<T> = idx.iter().map(|&i| data[i].clone()).collect();
        estimate_fn(&sample)
    })
}

/// Bootstrap resampling whole clusters; a cluster drawn twice enters as two
/// clusters.
pub fn cluster_bootstrap<F, E>(
    estimate_fn: F,
    data: &ClusteredDataset,
    b: usize,
    seed: SeedPath,
) -> Result<BootstrapResult, ResamplingError>
where
    F: Fn(&ClusteredDataset) -> Result<f64, E> + Sync,
    E: Display,
{
    run_bootstrap(data.n_clusters(), b, seed, |idx| estimate_fn(&data.select(idx)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Critical {
    Z,
    T(f64),
}

impl Critical {
    /// Two-sided critical value for a `level` interval.
    pub fn value(self, level: f64) -> Result<f64, ResamplingError> {
        if !(level > 0.0 && level < 1.0) {
            return Err(ResamplingError::InvalidLevel(level));
        }
        let p = 1.0 - (1.0 - level) / 2.0;
        Ok(match self {
            Critical::Z => normal_quantile(p),
            Critical::T(df) => t_quantile(p, df),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IntervalMethod {
    SandWald,
    JkWald,
    BootWald,
    BootPercentile,
    Bca,
    HcWald,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceInterval {
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub method: IntervalMethod,
    pub critical: Critical,
}

impl ConfidenceInterval {
    pub fn contains(&self, psi: f64) -> bool {
        self.lower <= psi && psi <= self.upper
    }
}

/// `psi_hat ± c·√variance` with `c` the two-sided critical value.
pub fn wald_interval(
    psi_hat: f64,
    variance: f64,
    level: f64,
    critical: Critical,
    method: IntervalMethod,
) -> Result<ConfidenceInterval, ResamplingError> {
    let c = critical.value(level)?;
    wald_with_critical(psi_hat, variance, c, level, critical, method)
}

/// Wald interval with a precomputed critical value.
pub fn wald_with_critical(
    psi_hat: f64,
    variance: f64,
    c: f64,
    level: f64,
    critical: Critical,
    method: IntervalMethod,
) -> Result<ConfidenceInterval, ResamplingError> {
    if !(variance >= 0.0) {
        return Err(ResamplingError::InvalidVariance(variance));
    }
    let half = c * variance.sqrt();
    Ok(ConfidenceInterval { lower: psi_hat - half, upper: psi_hat + half, level, method, critical })
}

/// Order statistic at cumulative probability `p` (the ⌈pB⌉-th smallest).
fn order_statistic(sorted: &[f64], p: f64) -> f64 {
    let b = sorted.len();
    // The small offset keeps exact products such as 0.025·200 from
    // rounding up to the next rank.
    let k = (p * b as f64 - 1e-9).ceil() as isize;
    sorted[(k.clamp(1, b as isize) - 1) as usize]
}

fn sorted_copy(xs: &[f64]) -> Vec<f64> {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

pub fn percentile_interval(replicates: &[f64], level: f64) -> Result<ConfidenceInterval, ResamplingError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(ResamplingError::InvalidLevel(level));
    }
    if replicates.is_empty() {
        return Err(ResamplingError::InvalidSize { what: "B", got: 0, min: 1 });
    }
    let alpha = 1.0 - level;
    let s = sorted_copy(replicates);
    Ok(ConfidenceInterval {
        lower: order_statistic(&s, alpha / 2.0),
        upper: order_statistic(&s, 1.0 - alpha / 2.0),
        level,
        method: IntervalMethod::BootPercentile,
        critical: Critical::Z,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BcaInterval {
    pub interval: ConfidenceInterval,
    pub z0: f64,
    pub acceleration: f64,
    /// Set when every replicate fell on one side of `psi_hat` and the
    /// bias-correction had to be clamped.
    pub z0_clamped: bool,
}

/// Bias-corrected and accelerated bootstrap interval.
pub fn bca_interval(
    replicates: &[f64],
    psi_hat: f64,
    loo_estimates: &[f64],
    level: f64,
) -> Result<BcaInterval, ResamplingError> {
    let b = replicates.len();
    if b < 50 {
        return Err(ResamplingError::InvalidSize { what: "B", got: b, min: 50 });
    }
    if loo_estimates.len() < 2 {
        return Err(ResamplingError::InvalidSize { what: "leave-one-out estimates", got: loo_estimates.len(), min: 2 });
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(ResamplingError::InvalidLevel(level));
    }
    let s = sorted_copy(replicates);
    if s[0] == s[b - 1] {
        return Err(ResamplingError::DegenerateDistribution);
    }
    let below = replicates.iter().filter(|&&r| r < psi_hat).count();
    let mut prop = below as f64 / b as f64;
    let lo_clamp = 0.5 / b as f64;
    let z0_clamped = below == 0 || below == b;
    prop = prop.clamp(lo_clamp, 1.0 - lo_clamp);
    let z0 = normal_quantile(prop);

    let jk_mean = crate::numeric::mean(loo_estimates);
    let mut s2 = CompensatedSum::new();
    let mut s3 = CompensatedSum::new();
    for &v in loo_estimates {
        let d = jk_mean - v;
        s2.add(d * d);
        s3.add(d * d * d);
    }
    let acceleration = if s2.value() > 0.0 { s3.value() / (6.0 * s2.value().powf(1.5)) } else { 0.0 };

    let alpha = 1.0 - level;
    let adjust = |z: f64| {
        let num = z0 + z;
        let den = 1.0 - acceleration * num;
        if den <= 0.0 {
            if num > 0.0 {
                1.0
            } else {
                0.0
            }
        } else {
            normal_cdf(z0 + num / den)
        }
    };
    let p_lo = adjust(normal_quantile(alpha / 2.0));
    let p_hi = adjust(normal_quantile(1.0 - alpha / 2.0));
    let interval = ConfidenceInterval {
        lower: order_statistic(&s, p_lo),
        upper: order_statistic(&s, p_hi),
        level,
        method: IntervalMethod::Bca,
        critical: Critical::Z,
    };
    Ok(BcaInterval { interval, z0, acceleration, z0_clamped })
}

/// The HC-corrected sandwich and the variance ratio ρ̂ = VarJK / VarSand.
///
/// ρ̂·VarSand is evaluated as VarJK·(VarSand/VarSand), which is the same
/// product regrouped so the result is VarJK to the last bit.
pub fn hc_corrected(var_sand: f64, var_jk: f64) -> Result<(f64, f64), ResamplingError> {
    if !(var_sand > 0.0) || !var_sand.is_finite() {
        return Err(ResamplingError::DivisionDegenerate);
    }
    if !(var_jk >= 0.0) {
        return Err(ResamplingError::InvalidVariance(var_jk));
    }
    let rho_hat = var_jk / var_sand;
    let var_hc = var_jk * (var_sand / var_sand);
    debug_assert_eq!(var_hc.to_bits(), var_jk.to_bits());
    Ok((var_hc, rho_hat))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceReport {
    pub var_sand: f64,
    pub var_jk: f64,
    pub var_boot: Option<f64>,
    pub var_hc: f64,
    pub rho_hat: f64,
    pub boot_replicates: Option<Vec<f64>>,
}
