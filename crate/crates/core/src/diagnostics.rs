//! Study-level checks: Monte Carlo variance decomposition, the ρ̂-trend
//! regime classifier, the empirical Mallows-2 distance, and C_n tracking.

use crate::numeric::{mean, sample_covariance, sample_variance};
use crate::resampling::{pairs_bootstrap, ResamplingError};
use crate::rng::{purpose, SeedPath};
use std::fmt::Display;
use thiserror::Error;

/// Batches used for Monte Carlo standard errors.
pub const MC_BATCHES: usize = 20;
/// Largest quantile grid used by [`mallows2_1d`].
pub const MALLOWS_GRID: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticsError {
    #[error("need at least {min} replicates, got {got}")]
    TooFewReplicates { got: usize, min: usize },
    #[error("replicate {index} has no oracle fields")]
    OracleUnavailable { index: usize },
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Resampling(#[from] ResamplingError),
    #[error("estimator failed: {0}")]
    Estimator(String),
}

/// The per-replicate quantities the decomposition needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleRecord {
    pub psi_hat: f64,
    pub mean_true_d: Option<f64>,
    pub r_rem: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecompositionReport {
    pub var_total: f64,
    pub eif_term: f64,
    pub var_rem: f64,
    pub cross_term: f64,
    pub closure_gap: f64,
    /// Batch-means standard error of `var_total`.
    pub var_total_se: f64,
    pub replicates: usize,
}

/// Monte Carlo standard error of the sample variance by batch means.
pub fn batched_variance_se(xs: &[f64], batches: usize) -> f64 {
    let n = xs.len();
    let vars: Vec<f64> = (0..batches)
        .map(|k| {
            let lo = k * n / batches;
            let hi = (k + 1) * n / batches;
            sample_variance(&xs[lo..hi])
        })
        .collect();
    // Each batch variance has roughly `batches` times the sampling variance of
    // the full-sample variance.
    (sample_variance(&vars) / batches as f64).sqrt()
}

pub fn decomposition_oracle(records: &[OracleRecord]) -> Result<DecompositionReport, DiagnosticsError> {
    const MIN: usize = 100;
    if records.len() < MIN {
        return Err(DiagnosticsError::TooFewReplicates { got: records.len(), min: MIN });
    }
    let mut psi = Vec::with_capacity(records.len());
    let mut d = Vec::with_capacity(records.len());
    let mut r = Vec::with_capacity(records.len());
    for (index, rec) in records.iter().enumerate() {
        match (rec.mean_true_d, rec.r_rem) {
            (Some(md), Some(rr)) => {
                psi.push(rec.psi_hat);
                d.push(md);
                r.push(rr);
            }
            _ => return Err(DiagnosticsError::OracleUnavailable { index }),
        }
    }
    let var_total = sample_variance(&psi);
    let eif_term = sample_variance(&d);
    let var_rem = sample_variance(&r);
    let cross_term = 2.0 * sample_covariance(&d, &r);
    Ok(DecompositionReport {
        var_total,
        eif_term,
        var_rem,
        cross_term,
        closure_gap: var_total - (eif_term + var_rem + cross_term),
        var_total_se: batched_variance_se(&psi, MC_BATCHES),
        replicates: records.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    StrongDecay,
    NearBoundary,
    Inconclusive,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::StrongDecay => "strong-decay",
            Verdict::NearBoundary => "near-boundary",
            Verdict::Inconclusive => "inconclusive",
        }
    }
}

/// Knobs of the regime classifier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegimeRule {
    /// Excess ρ̂ − 1 below which the variance ratio counts as settled.
    pub threshold: f64,
    /// Relative decrease of ρ̂ − 1 required for strong decay.
    pub min_relative_decrease: f64,
}

impl Default for RegimeRule {
    fn default() -> Self {
        RegimeRule { threshold: 0.05, min_relative_decrease: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegimeVerdict {
    pub verdict: Verdict,
    pub rho_by_n: Vec<(usize, f64)>,
    /// Relative decrease of ρ̂ − 1 from the smallest to the largest n.
    pub trend_statistic: f64,
    pub rule: RegimeRule,
}

pub fn regime_classify(rho_by_n: &[(usize, f64)], threshold: f64) -> Result<RegimeVerdict, DiagnosticsError> {
    regime_classify_with(rho_by_n, RegimeRule { threshold, ..RegimeRule::default() })
}

/// Strong decay: the excess at the largest n is under the threshold and has
/// fallen by at least the required fraction. Near boundary: the excess stays
/// above the threshold at every n while ρ̂ itself falls by less than that
/// fraction. Anything else, or fewer than three sizes, is inconclusive.
pub fn regime_classify_with(rho_by_n: &[(usize, f64)], rule: RegimeRule) -> Result<RegimeVerdict, DiagnosticsError> {
    if rho_by_n.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(DiagnosticsError::Input("sample sizes must be distinct and ascending".into()));
    }
    if rho_by_n.iter().any(|(_, r)| !r.is_finite()) {
        return Err(DiagnosticsError::Input("non-finite variance ratio".into()));
    }
    let mut out = RegimeVerdict {
        verdict: Verdict::Inconclusive,
        rho_by_n: rho_by_n.to_vec(),
        trend_statistic: f64::NAN,
        rule,
    };
    if rho_by_n.len() < 2 {
        return Ok(out);
    }
    let first = rho_by_n[0].1;
    let last = rho_by_n[rho_by_n.len() - 1].1;
    let (e_first, e_last) = (first - 1.0, last - 1.0);
    out.trend_statistic = if e_first != 0.0 { (e_first - e_last) / e_first.abs() } else { 0.0 };
    if rho_by_n.len() < 3 {
        return Ok(out);
    }
    let rho_decrease = (first - last) / first;
    out.verdict = if e_last < rule.threshold && out.trend_statistic >= rule.min_relative_decrease {
        Verdict::StrongDecay
    } else if rho_by_n.iter().all(|(_, r)| r - 1.0 > rule.threshold) && rho_decrease < rule.min_relative_decrease {
        Verdict::NearBoundary
    } else {
        Verdict::Inconclusive
    };
    Ok(out)
}

/// Linear interpolation of the sorted sample at plotting position
/// `p·len − 1/2`, so a grid as fine as the sample returns the order
/// statistics themselves.
fn quantile_at(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let pos = (p * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let t = pos - lo as f64;
    if t == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + t * (sorted[hi] - sorted[lo])
    }
}

/// Empirical 1-D Wasserstein-2 distance by quantile coupling.
///
/// Both samples are sorted and read off at the midpoints of a common grid of
/// `min(|a|, |b|, 4096)` probabilities.
pub fn mallows2_1d(sample_a: &[f64], sample_b: &[f64]) -> f64 {
    assert!(!sample_a.is_empty() && !sample_b.is_empty(), "mallows2_1d needs nonempty samples");
    let mut a = sample_a.to_vec();
    let mut b = sample_b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let k = a.len().min(b.len()).min(MALLOWS_GRID);
    let sq: crate::numeric::CompensatedSum = (0..k)
        .map(|j| {
            let p = (j as f64 + 0.5) / k as f64;
            let d = quantile_at(&a, p) - quantile_at(&b, p);
            d * d
        })
        .collect();
    (sq.value() / k as f64).sqrt()
}

/// d₂ between bootstrap pivots √n(Ψ̂* − Ψ̂) and Monte Carlo pivots
/// √n(Ψ̂ − Ψ₀).
pub fn pivot_distance(n: usize, psi_hat: f64, boot_replicates: &[f64], psi0: f64, mc_estimates: &[f64]) -> f64 {
    let s = (n as f64).sqrt();
    let boot: Vec<f64> = boot_replicates.iter().map(|v| s * (v - psi_hat)).collect();
    let mc: Vec<f64> = mc_estimates.iter().map(|v| s * (v - psi0)).collect();
    mallows2_1d(&boot, &mc)
}

/// Compares the bootstrap law of the pivot on `data` with its sampling law
/// over `reps` fresh datasets from `generate`.
///
/// Streams: the bootstrap uses `seed.child(BOOTSTRAP)`, Monte Carlo dataset
/// `r` uses `seed.child(MONTE_CARLO).child(r)`.
#[allow(clippy::too_many_arguments)]
pub fn bootstrap_consistency_check<T, F, G, E>(
    data: &[T],
    estimate_fn: F,
    generate: G,
    psi0: f64,
    b: usize,
    reps: usize,
    seed: SeedPath,
) -> Result<f64, DiagnosticsError>
where
    T: Clone + Sync,
    F: Fn(&[T]) -> Result<f64, E> + Sync,
    G: Fn(SeedPath) -> Result<Vec<T>, E>,
    E: Display,
{
    if reps < 2 {
        return Err(DiagnosticsError::TooFewReplicates { got: reps, min: 2 });
    }
    let psi_hat = estimate_fn(data).map_err(|e| DiagnosticsError::Estimator(e.to_string()))?;
    let boot = pairs_bootstrap(&estimate_fn, data, b, seed.child(purpose::BOOTSTRAP))?;
    let mc_root = seed.child(purpose::MONTE_CARLO);
    let mc = (0..reps)
        .map(|r| {
            let d = generate(mc_root.child(r as u64)).map_err(|e| DiagnosticsError::Estimator(e.to_string()))?;
            estimate_fn(&d).map_err(|e| DiagnosticsError::Estimator(e.to_string()))
        })
        .collect::<Result<Vec<f64>, _>>()?;
    Ok(pivot_distance(data.len(), psi_hat, &boot.replicates, psi0, &mc))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CnSummary {
    pub n: usize,
    pub mean: f64,
    pub variance: f64,
    pub count: usize,
}

/// Per-n Monte Carlo mean and variance of C_n, ascending in n.
pub fn cn_tracker(records: &[(usize, f64)]) -> Vec<CnSummary> {
    let mut sizes: Vec<usize> = records.iter().map(|r| r.0).collect();
    sizes.sort_unstable();
    sizes.dedup();
    sizes
        .into_iter()
        .map(|n| {
            let vals: Vec<f64> = records.iter().filter(|r| r.0 == n).map(|r| r.1).collect();
            CnSummary { n, mean: mean(&vals), variance: sample_variance(&vals), count: vals.len() }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_sequences_classify() {
        let strong = [(200, 1.040), (500, 1.014), (1000, 1.007), (2000, 1.003)];
        assert_eq!(regime_classify(&strong, 0.05).unwrap().verdict, Verdict::StrongDecay);
        let near = [(10, 1.318), (20, 1.191), (30, 1.159), (50, 1.145)];
        assert_eq!(regime_classify(&near, 0.05).unwrap().verdict, Verdict::NearBoundary);
        assert_eq!(regime_classify(&strong[..2], 0.05).unwrap().verdict, Verdict::Inconclusive);
        assert!(regime_classify(&[(500, 1.0), (200, 1.0), (1000, 1.0)], 0.05).is_err());
        assert!(regime_classify(&[(200, 1.0), (200, 1.0), (1000, 1.0)], 0.05).is_err());
    }

    #[test]
    fn mallows_basic() {
        let a = [0.3, -1.2, 2.5, 0.0];
        assert_eq!(mallows2_1d(&a, &a), 0.0);
        let shifted: Vec<f64> = a.iter().map(|x| x + 0.75).collect();
        assert!((mallows2_1d(&a, &shifted) - 0.75).abs() < 1e-10);
    }

    #[test]
    fn decomposition_requires_oracles() {
        let recs = vec![OracleRecord { psi_hat: 0.4, mean_true_d: Some(0.0), r_rem: None }; 150];
        assert_eq!(decomposition_oracle(&recs), Err(DiagnosticsError::OracleUnavailable { index: 0 }));
        assert!(matches!(decomposition_oracle(&recs[..10]), Err(DiagnosticsError::TooFewReplicates { .. })));
    }

    #[test]
    fn cn_tracker_groups_by_size() {
        let recs = [(500, 1.0), (1000, 0.5), (500, 3.0), (1000, 0.7)];
        let s = cn_tracker(&recs);
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].n, s[0].mean, s[0].variance), (500, 2.0, 2.0));
        assert_eq!(s[1].count, 2);
    }
}
