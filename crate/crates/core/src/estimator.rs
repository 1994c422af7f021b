//! The AIPW estimator, its influence scores, and simulation-only oracles
//! (true efficient influence function, realized remainder, leave-one-out
//! perturbation statistics).

use crate::dgp::{residual_amplitude, ClusteredDataset, DgpError, DgpTruth, NearBoundaryConfig, Observation, PerturbedOracle};
use crate::numeric::CompensatedSum;
use crate::nuisance::{
    fit_logistic, fit_ols, loo_downdate_ols, loo_refit_logistic, LinearFit, LogisticFit, NewtonConfig, NuisanceError,
    NuisancePair, OutcomeSpec, PropensitySpec,
};
use crate::resampling::LeaveOneOut;
use thiserror::Error;

/// Propensities must lie strictly inside (G_MIN, 1 − G_MIN).
pub const G_MIN: f64 = 1e-6;

#[derive(Debug, Error, Clone)]
pub enum EstimatorError {
    #[error("propensity outside ({G_MIN}, 1 - {G_MIN}) at rows {rows:?}")]
    Positivity { rows: Vec<usize> },
    #[error(transparent)]
    Nuisance(#[from] NuisanceError),
    #[error(transparent)]
    Dgp(#[from] DgpError),
    #[error("empty dataset")]
    Empty,
    #[error("{units} units exceeds the leave-one-out cap of {cap}")]
    SizeCap { units: usize, cap: usize },
    #[error("leave-one-out refits failed at {} indices (first: {})", failures.len(), failures.first().map(|f| f.0).unwrap_or(0))]
    LooFailures { failures: Vec<(usize, String)> },
}

impl EstimatorError {
    /// Short reason code for failure tallies.
    pub fn code(&self) -> &'static str {
        match self {
            EstimatorError::Positivity { .. } => "positivity",
            EstimatorError::Nuisance(e) => e.code(),
            EstimatorError::Dgp(_) => "dgp",
            EstimatorError::Empty => "empty",
            EstimatorError::SizeCap { .. } => "size-cap",
            EstimatorError::LooFailures { .. } => "loo-refit",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateResult {
    pub psi_hat: f64,
    /// Estimated influence contributions, centered at zero.
    pub scores: Vec<f64>,
    /// Per-cluster sums of `scores`, when the data are clustered.
    pub cluster_scores: Option<Vec<f64>>,
}

#[inline]
fn summand(o: &Observation, q1: f64, q0: f64, g: f64) -> f64 {
    let ipw = if o.a { (o.y - q1) / g } else { -(o.y - q0) / (1.0 - g) };
    q1 - q0 + ipw
}

fn check_positivity(data: &[Observation], nuis: &NuisancePair) -> Result<(), EstimatorError> {
    let rows: Vec<usize> = data
        .iter()
        .enumerate()
        .filter(|(_, o)| {
            let g = nuis.g(o.w);
            !(g > G_MIN && g < 1.0 - G_MIN)
        })
        .map(|(i, _)| i)
        .collect();
    if rows.is_empty() {
        Ok(())
    } else {
        Err(EstimatorError::Positivity { rows })
    }
}

pub fn aipw(data: &[Observation], nuis: &NuisancePair) -> Result<EstimateResult, EstimatorError> {
    if data.is_empty() {
        return Err(EstimatorError::Empty);
    }
    check_positivity(data, nuis)?;
    let terms: Vec<f64> = data
        .iter()
        .map(|o| summand(o, nuis.q(true, o.w), nuis.q(false, o.w), nuis.g(o.w)))
        .collect();
    let psi_hat = crate::numeric::mean(&terms);
    let scores = terms.into_iter().map(|t| t - psi_hat).collect();
    Ok(EstimateResult { psi_hat, scores, cluster_scores: None })
}

/// AIPW on clustered data; the unit scores are also summed within clusters.
pub fn aipw_clustered(data: &ClusteredDataset, nuis: &NuisancePair) -> Result<EstimateResult, EstimatorError> {
    let mut result = aipw(data.observations(), nuis)?;
    let mut sums = Vec::with_capacity(data.n_clusters());
    let mut start = 0;
    for j in 0..data.n_clusters() {
        let len = data.cluster(j).len();
        sums.push(result.scores[start..start + len].iter().copied().collect::<CompensatedSum>().value());
        start += len;
    }
    result.cluster_scores = Some(sums);
    Ok(result)
}

/// Point estimate only, skipping row `skip`.
fn aipw_psi(data: &[Observation], skip: Option<usize>, nuis: &NuisancePair) -> Result<f64, EstimatorError> {
    let mut total = CompensatedSum::new();
    let mut bad = Vec::new();
    let mut count = 0usize;
    for (i, o) in data.iter().enumerate() {
        if Some(i) == skip {
            continue;
        }
        let g = nuis.g(o.w);
        if !(g > G_MIN && g < 1.0 - G_MIN) {
            bad.push(i);
            continue;
        }
        total.add(summand(o, nuis.q(true, o.w), nuis.q(false, o.w), g));
        count += 1;
    }
    if !bad.is_empty() {
        return Err(EstimatorError::Positivity { rows: bad });
    }
    if count == 0 {
        return Err(EstimatorError::Empty);
    }
    Ok(total.value() / count as f64)
}

/// Efficient influence function of the ATE at one observation.
pub fn true_eif(obs: &Observation, truth: &DgpTruth) -> f64 {
    summand(obs, truth.q0(true, obs.w), truth.q0(false, obs.w), truth.g0(obs.w)) - truth.psi0()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemainderOracle {
    pub r_rem: f64,
    pub mean_true_d: f64,
    pub true_scores: Vec<f64>,
}

/// Splits `psi_hat − psi0` into the efficient-influence average and the
/// realized remainder.
pub fn remainder_oracle(result: &EstimateResult, data: &[Observation], truth: &DgpTruth) -> RemainderOracle {
    let true_scores: Vec<f64> = data.iter().map(|o| true_eif(o, truth)).collect();
    let mean_true_d = crate::numeric::mean(&true_scores);
    let r_rem = result.psi_hat - truth.psi0() - mean_true_d;
    RemainderOracle { r_rem, mean_true_d, true_scores }
}

/// How the pipeline obtains its nuisances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NuisanceStrategy {
    Fitted { outcome: OutcomeSpec, propensity: PropensitySpec, newton: NewtonConfig },
    Oracle,
    NearBoundary(NearBoundaryConfig),
}

/// Data → nuisances → AIPW, with the truth kept for oracle modes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AipwPipeline {
    pub truth: DgpTruth,
    pub strategy: NuisanceStrategy,
}

impl AipwPipeline {
    /// Correct outcome model with interaction and quadratic logistic propensity.
    pub fn fitted(truth: DgpTruth) -> Self {
        AipwPipeline {
            truth,
            strategy: NuisanceStrategy::Fitted {
                outcome: OutcomeSpec::Interaction,
                propensity: PropensitySpec::Quadratic,
                newton: NewtonConfig::default(),
            },
        }
    }

    pub fn oracle(truth: DgpTruth) -> Self {
        AipwPipeline { truth, strategy: NuisanceStrategy::Oracle }
    }

    pub fn near_boundary(truth: DgpTruth, cfg: NearBoundaryConfig) -> Self {
        AipwPipeline { truth, strategy: NuisanceStrategy::NearBoundary(cfg) }
    }

    fn perturbed<'a, I>(&self, cfg: &NearBoundaryConfig, groups: I, n_groups: usize) -> Result<NuisancePair, EstimatorError>
    where
        I: IntoIterator<Item = &'a [Observation]>,
    {
        let amplitude = if cfg.enabled { residual_amplitude(groups, &self.truth)? } else { 0.0 };
        Ok(NuisancePair::NearBoundary(PerturbedOracle::new(self.truth, cfg, amplitude, n_groups)))
    }

    /// Nuisances for i.i.d. data.
    pub fn nuisances(&self, data: &[Observation]) -> Result<NuisancePair, EstimatorError> {
        if data.is_empty() {
            return Err(EstimatorError::Empty);
        }
        match &self.strategy {
            NuisanceStrategy::Fitted { outcome, propensity, newton } => Ok(NuisancePair::Fitted {
                q: fit_ols(data, *outcome)?,
                g: fit_logistic(data, *propensity, newton)?,
            }),
            NuisanceStrategy::Oracle => Ok(NuisancePair::Oracle(self.truth)),
            NuisanceStrategy::NearBoundary(cfg) => self.perturbed(cfg, data.iter().map(std::slice::from_ref), data.len()),
        }
    }

    /// Nuisances for clustered data; both the near-boundary amplitude and its
    /// rate are taken at the cluster level, so n·Var(R) grows like
    /// 1 + m·ICC/(1−ICC) at fixed J.
    pub fn nuisances_clustered(&self, data: &ClusteredDataset) -> Result<NuisancePair, EstimatorError> {
        match &self.strategy {
            NuisanceStrategy::NearBoundary(cfg) => self.perturbed(cfg, data.clusters(), data.n_clusters()),
            _ => self.nuisances(data.observations()),
        }
    }

    pub fn estimate(&self, data: &[Observation]) -> Result<EstimateResult, EstimatorError> {
        aipw(data, &self.nuisances(data)?)
    }

    pub fn estimate_clustered(&self, data: &ClusteredDataset) -> Result<EstimateResult, EstimatorError> {
        aipw_clustered(data, &self.nuisances_clustered(data)?)
    }

    pub fn psi(&self, data: &[Observation]) -> Result<f64, EstimatorError> {
        aipw_psi(data, None, &self.nuisances(data)?)
    }

    pub fn psi_clustered(&self, data: &ClusteredDataset) -> Result<f64, EstimatorError> {
        aipw_psi(data.observations(), None, &self.nuisances_clustered(data)?)
    }
}

/// Leave-one-out refits of the full pipeline on i.i.d. data.
///
/// Fitted nuisances are recomputed on each deleted sample: the outcome
/// regression by a rank-one downdate and the propensity by a warm-started
/// Newton refit. Oracle modes recompute their data-dependent parts directly.
pub struct PipelineLoo<'a> {
    pipeline: &'a AipwPipeline,
    data: &'a [Observation],
    full_fits: Option<(LinearFit, LogisticFit)>,
}

impl<'a> PipelineLoo<'a> {
    pub fn new(pipeline: &'a AipwPipeline, data: &'a [Observation]) -> Result<Self, EstimatorError> {
        let full_fits = match pipeline.nuisances(data)? {
            NuisancePair::Fitted { q, g } => Some((q, g)),
            _ => None,
        };
        Ok(PipelineLoo { pipeline, data, full_fits })
    }

    /// Builds the refitter from nuisances already fitted on `data`.
    pub fn with_nuisances(pipeline: &'a AipwPipeline, data: &'a [Observation], nuis: &NuisancePair) -> Self {
        let full_fits = match nuis {
            NuisancePair::Fitted { q, g } => Some((q.clone(), g.clone())),
            _ => None,
        };
        PipelineLoo { pipeline, data, full_fits }
    }
}

impl LeaveOneOut for PipelineLoo<'_> {
    type Error = EstimatorError;

    fn units(&self) -> usize {
        self.data.len()
    }

    fn estimate_without(&self, i: usize) -> Result<f64, EstimatorError> {
        let data = self.data;
        if i >= data.len() {
            return Err(NuisanceError::IndexOutOfRange { index: i, n: data.len() }.into());
        }
        let nuis = match (&self.pipeline.strategy, &self.full_fits) {
            (NuisanceStrategy::Fitted { newton, .. }, Some((q, g))) => NuisancePair::Fitted {
                q: loo_downdate_ols(q, data, i)?,
                g: loo_refit_logistic(data, i, g, newton)?,
            },
            (NuisanceStrategy::NearBoundary(cfg), _) => {
                let groups = data
                    .iter()
                    .enumerate()
                    .filter(move |(k, _)| *k != i)
                    .map(|(_, o)| std::slice::from_ref(o));
                self.pipeline.perturbed(cfg, groups, data.len() - 1)?
            }
            (NuisanceStrategy::Oracle, _) => NuisancePair::Oracle(self.pipeline.truth),
            (NuisanceStrategy::Fitted { .. }, None) => unreachable!("fitted strategy always stores full fits"),
        };
        aipw_psi(data, Some(i), &nuis)
    }
}

/// Leave-one-cluster-out refits of the full pipeline.
pub struct ClusterPipelineLoo<'a> {
    pipeline: &'a AipwPipeline,
    data: &'a ClusteredDataset,
}

impl<'a> ClusterPipelineLoo<'a> {
    pub fn new(pipeline: &'a AipwPipeline, data: &'a ClusteredDataset) -> Self {
        ClusterPipelineLoo { pipeline, data }
    }
}

impl LeaveOneOut for ClusterPipelineLoo<'_> {
    type Error = EstimatorError;

    fn units(&self) -> usize {
        self.data.n_clusters()
    }

    fn estimate_without(&self, j: usize) -> Result<f64, EstimatorError> {
        self.pipeline.psi_clustered(&self.data.without_cluster(j))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LooPerturbations {
    /// δᵢ = (Ψ̂⁽⁻ⁱ⁾ − Ψ̂) + D*(Oᵢ)/n.
    pub deltas: Vec<f64>,
    /// bᵢ = R⁽⁻ⁱ⁾ − R, the change in the realized remainder.
    pub b_values: Vec<f64>,
    /// C_n = (n − 1)·Σ δᵢ².
    pub c_n: f64,
}

/// Perturbation statistics from precomputed leave-one-out estimates.
pub fn loo_perturbations_from_estimates(
    data: &[Observation],
    truth: &DgpTruth,
    psi_hat: f64,
    loo_estimates: &[f64],
) -> LooPerturbations {
    let n = data.len();
    assert_eq!(n, loo_estimates.len());
    let nf = n as f64;
    let d: Vec<f64> = data.iter().map(|o| true_eif(o, truth)).collect();
    let total_d = crate::numeric::sum(&d);
    let psi0 = truth.psi0();
    let r_full = psi_hat - psi0 - total_d / nf;
    let mut deltas = Vec::with_capacity(n);
    let mut b_values = Vec::with_capacity(n);
    let mut sq = CompensatedSum::new();
    for i in 0..n {
        let delta = (loo_estimates[i] - psi_hat) + d[i] / nf;
        let r_loo = loo_estimates[i] - psi0 - (total_d - d[i]) / (nf - 1.0);
        deltas.push(delta);
        b_values.push(r_loo - r_full);
        sq.add(delta * delta);
    }
    LooPerturbations { deltas, b_values, c_n: (nf - 1.0) * sq.value() }
}

/// Leave-one-out perturbation statistics by full pipeline refits.
pub fn loo_perturbations<L>(
    data: &[Observation],
    truth: &DgpTruth,
    loo: &L,
    psi_hat: f64,
    cap: usize,
) -> Result<LooPerturbations, EstimatorError>
where
    L: LeaveOneOut<Error = EstimatorError>,
{
    if data.len() > cap {
        return Err(EstimatorError::SizeCap { units: data.len(), cap });
    }
    let mut estimates = Vec::with_capacity(data.len());
    let mut failures = Vec::new();
    for i in 0..data.len() {
        match loo.estimate_without(i) {
            Ok(v) => estimates.push(v),
            Err(e) => failures.push((i, e.to_string())),
        }
    }
    if !failures.is_empty() {
        return Err(EstimatorError::LooFailures { failures });
    }
    Ok(loo_perturbations_from_estimates(data, truth, psi_hat, &estimates))
}
