//! Data-generating processes: the i.i.d. AIPW design, its clustered
//! random-intercept variant, and the perturbed-oracle nuisances used for the
//! near-boundary regime.

use crate::rng::SeedPath;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DgpError {
    #[error("invalid size: {what} = {got}, need at least {min}")]
    InvalidSize { what: &'static str, got: usize, min: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("empty dataset")]
    Empty,
}

/// One unit: covariate `w`, binary treatment `a`, outcome `y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub w: f64,
    pub a: bool,
    pub y: f64,
}

impl Observation {
    pub fn new(w: f64, a: bool, y: f64) -> Self {
        Observation { w, a, y }
    }

    #[inline]
    pub fn a_f64(&self) -> f64 {
        if self.a {
            1.0
        } else {
            0.0
        }
    }
}

pub type Dataset = Vec<Observation>;

/// Copy of `data` with row `i` removed.
pub fn without_row(data: &[Observation], i: usize) -> Dataset {
    let mut out = Vec::with_capacity(data.len().saturating_sub(1));
    out.extend_from_slice(&data[..i]);
    out.extend_from_slice(&data[i + 1..]);
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterObservation {
    pub cluster_id: usize,
    pub member_index: usize,
    pub obs: Observation,
}

/// Units grouped into clusters `0..J`, stored contiguously by cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredDataset {
    obs: Vec<Observation>,
    offsets: Vec<usize>,
}

impl ClusteredDataset {
    pub fn from_clusters(clusters: Vec<Vec<Observation>>) -> Self {
        let mut obs = Vec::with_capacity(clusters.iter().map(Vec::len).sum());
        let mut offsets = Vec::with_capacity(clusters.len() + 1);
        offsets.push(0);
        for c in clusters {
            obs.extend(c);
            offsets.push(obs.len());
        }
        ClusteredDataset { obs, offsets }
    }

    /// Every unit in its own cluster.
    pub fn singletons(data: &[Observation]) -> Self {
        ClusteredDataset {
            obs: data.to_vec(),
            offsets: (0..=data.len()).collect(),
        }
    }

    pub fn n_clusters(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n_units(&self) -> usize {
        self.obs.len()
    }

    /// All units, cluster by cluster.
    pub fn observations(&self) -> &[Observation] {
        &self.obs
    }

    pub fn cluster(&self, j: usize) -> &[Observation] {
        &self.obs[self.offsets[j]..self.offsets[j + 1]]
    }

    pub fn clusters(&self) -> impl Iterator<Item = &[Observation]> + '_ {
        (0..self.n_clusters()).map(move |j| self.cluster(j))
    }

    pub fn rows(&self) -> impl Iterator<Item = ClusterObservation> + '_ {
        (0..self.n_clusters()).flat_map(move |j| {
            self.cluster(j)
                .iter()
                .enumerate()
                .map(move |(k, &obs)| ClusterObservation { cluster_id: j, member_index: k, obs })
        })
    }

    /// Copy with cluster `j` removed; later clusters are renumbered down by one.
    pub fn without_cluster(&self, j: usize) -> Self {
        let (lo, hi) = (self.offsets[j], self.offsets[j + 1]);
        let width = hi - lo;
        let mut obs = Vec::with_capacity(self.obs.len() - width);
        obs.extend_from_slice(&self.obs[..lo]);
        obs.extend_from_slice(&self.obs[hi..]);
        let mut offsets = Vec::with_capacity(self.offsets.len() - 1);
        offsets.extend_from_slice(&self.offsets[..=j]);
        offsets.extend(self.offsets[j + 2..].iter().map(|o| o - width));
        ClusteredDataset { obs, offsets }
    }

    /// Dataset built from the listed clusters in order; repeated clusters
    /// become distinct clusters with fresh ids.
    pub fn select(&self, clusters: &[usize]) -> Self {
        let mut obs = Vec::new();
        let mut offsets = Vec::with_capacity(clusters.len() + 1);
        offsets.push(0);
        for &j in clusters {
            obs.extend_from_slice(self.cluster(j));
            offsets.push(obs.len());
        }
        ClusteredDataset { obs, offsets }
    }
}

/// The generating mechanism.
///
/// Outcome regression `Q0(a, w) = β0 + βa·a + βw·w + βaw·a·w` plus a cluster
/// intercept with SD `sigma_b` and unit noise with SD `sigma_eps`; propensity
/// `g0(w) = expit(γ0 + γw·w)`; covariate W ~ N(0, 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DgpTruth {
    pub outcome: [f64; 4],
    pub propensity: [f64; 2],
    pub sigma_eps: f64,
    pub sigma_b: f64,
    pub m: usize,
}

impl Default for DgpTruth {
    fn default() -> Self {
        DgpTruth {
            outcome: [0.5, 0.4, 0.3, 0.15],
            propensity: [0.0, 0.3],
            sigma_eps: 0.5,
            sigma_b: 0.0,
            m: 1,
        }
    }
}

#[inline]
pub fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl DgpTruth {
    #[inline]
    pub fn q0(&self, a: bool, w: f64) -> f64 {
        let [b0, ba, bw, baw] = self.outcome;
        if a {
            b0 + ba + (bw + baw) * w
        } else {
            b0 + bw * w
        }
    }

    #[inline]
    pub fn logit_g0(&self, w: f64) -> f64 {
        self.propensity[0] + self.propensity[1] * w
    }

    #[inline]
    pub fn g0(&self, w: f64) -> f64 {
        expit(self.logit_g0(w))
    }

    /// ATE implied by the outcome regression; E[W] = 0 so the interaction
    /// term averages out.
    pub fn psi0(&self) -> f64 {
        self.outcome[1]
    }

    pub fn icc(&self) -> f64 {
        let vb = self.sigma_b * self.sigma_b;
        let total = vb + self.sigma_eps * self.sigma_eps;
        if total == 0.0 {
            0.0
        } else {
            vb / total
        }
    }

    /// Same mechanism with the random-intercept SD set to hit `icc` exactly.
    pub fn with_icc(mut self, icc: f64) -> Result<Self, DgpError> {
        if !(0.0..1.0).contains(&icc) {
            return Err(DgpError::InvalidParameter(format!("icc = {icc} outside [0, 1)")));
        }
        self.sigma_b = self.sigma_eps * (icc / (1.0 - icc)).sqrt();
        Ok(self)
    }

    pub fn with_cluster_size(mut self, m: usize) -> Self {
        self.m = m;
        self
    }

    pub fn validate(&self) -> Result<(), DgpError> {
        let finite = self.outcome.iter().chain(&self.propensity).all(|v| v.is_finite());
        if !finite {
            return Err(DgpError::InvalidParameter("non-finite coefficient".into()));
        }
        if !(self.sigma_eps >= 0.0 && self.sigma_eps.is_finite()) {
            return Err(DgpError::InvalidParameter(format!("sigma_eps = {}", self.sigma_eps)));
        }
        if !(self.sigma_b >= 0.0 && self.sigma_b.is_finite()) {
            return Err(DgpError::InvalidParameter(format!("sigma_b = {}", self.sigma_b)));
        }
        if self.m == 0 {
            return Err(DgpError::InvalidSize { what: "m", got: 0, min: 1 });
        }
        Ok(())
    }

    fn draw<R: Rng>(&self, rng: &mut R, intercept: f64) -> Observation {
        let w: f64 = rng.sample(StandardNormal);
        let u: f64 = rng.random();
        let a = u < self.g0(w);
        let e: f64 = rng.sample(StandardNormal);
        Observation { w, a, y: self.q0(a, w) + intercept + self.sigma_eps * e }
    }
}

/// `n` i.i.d. draws from the mechanism (cluster intercept ignored).
pub fn gen_aipw_iid(n: usize, truth: &DgpTruth, seed: SeedPath) -> Result<Dataset, DgpError> {
    if n < 2 {
        return Err(DgpError::InvalidSize { what: "n", got: n, min: 2 });
    }
    truth.validate()?;
    let mut rng = seed.rng();
    Ok((0..n).map(|_| truth.draw(&mut rng, 0.0)).collect())
}

/// `j_clusters` balanced clusters of `truth.m` units sharing a N(0, σ_b²)
/// intercept.
pub fn gen_clustered(j_clusters: usize, truth: &DgpTruth, seed: SeedPath) -> Result<ClusteredDataset, DgpError> {
    if j_clusters < 2 {
        return Err(DgpError::InvalidSize { what: "j_clusters", got: j_clusters, min: 2 });
    }
    truth.validate()?;
    let mut rng = seed.rng();
    let clusters = (0..j_clusters)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            let b = truth.sigma_b * z;
            (0..truth.m).map(|_| truth.draw(&mut rng, b)).collect()
        })
        .collect();
    Ok(ClusteredDataset::from_clusters(clusters))
}

/// Covariate and treatment amplitudes
/// `eps_q = n^{-1/2} Σ Wᵢ`, `eps_g = n^{-1/2} Σ (Aᵢ − g0)/√(g0(1−g0))`.
pub fn perturbation_amplitudes(data: &[Observation], truth: &DgpTruth) -> Result<(f64, f64), DgpError> {
    if data.is_empty() {
        return Err(DgpError::Empty);
    }
    let scale = (data.len() as f64).sqrt();
    let mut sq = crate::numeric::CompensatedSum::new();
    let mut sg = crate::numeric::CompensatedSum::new();
    for o in data {
        sq.add(o.w);
        let g = truth.g0(o.w);
        sg.add((o.a_f64() - g) / (g * (1.0 - g)).sqrt());
    }
    Ok((sq.value() / scale, sg.value() / scale))
}

/// Standardized outcome-residual amplitude driving the near-boundary
/// outcome perturbation.
///
/// Each group contributes `Σ (Yᵢ − Q0(Aᵢ, Wᵢ)) / (√m_g σ_ε)` and the total is
/// scaled by `G^{-1/2}` for `G` groups. With singleton groups this is the
/// i.i.d. amplitude `n^{-1/2} Σ eᵢ/σ_ε`; with clusters the variance becomes
/// `1 + m·ICC/(1−ICC)`. The residual is uncorrelated with the efficient
/// influence function, so the perturbation adds variance without a cross
/// term.
pub fn residual_amplitude<'a, I>(groups: I, truth: &DgpTruth) -> Result<f64, DgpError>
where
    I: IntoIterator<Item = &'a [Observation]>,
{
    let mut total = crate::numeric::CompensatedSum::new();
    let mut count = 0usize;
    for g in groups {
        if g.is_empty() {
            continue;
        }
        let s: crate::numeric::CompensatedSum = g.iter().map(|o| o.y - truth.q0(o.a, o.w)).collect();
        total.add(s.value() / (g.len() as f64).sqrt());
        count += 1;
    }
    if count == 0 {
        return Err(DgpError::Empty);
    }
    if truth.sigma_eps == 0.0 {
        return Ok(0.0);
    }
    Ok(total.value() / (truth.sigma_eps * (count as f64).sqrt()))
}

/// Upper quartile of N(0, 1); splits W into equal-probability halves by |W|.
pub const SHAPE_CUT: f64 = 0.674_489_750_196_081_7;

/// Direction of the synthetic nuisance error: +1 on the outer half of the
/// covariate distribution, −1 on the inner half. Even, mean zero, unit
/// square.
#[inline]
pub fn boundary_shape(w: f64) -> f64 {
    if w.abs() > SHAPE_CUT {
        1.0
    } else {
        -1.0
    }
}

/// Scale constants of the near-boundary injection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NearBoundaryConfig {
    pub lambda_q: f64,
    pub lambda_g: f64,
    pub enabled: bool,
}

impl NearBoundaryConfig {
    pub fn new(lambda_q: f64, lambda_g: f64) -> Self {
        NearBoundaryConfig { lambda_q, lambda_g, enabled: true }
    }

    pub fn disabled() -> Self {
        NearBoundaryConfig { lambda_q: 0.0, lambda_g: 0.0, enabled: false }
    }

    pub fn validate(&self) -> Result<(), DgpError> {
        if !(self.lambda_q >= 0.0 && self.lambda_g >= 0.0) || !self.lambda_q.is_finite() || !self.lambda_g.is_finite() {
            return Err(DgpError::InvalidParameter(format!(
                "lambda_q = {}, lambda_g = {}",
                self.lambda_q, self.lambda_g
            )));
        }
        Ok(())
    }
}

/// True nuisances shifted at the product-rate boundary:
/// `Q̃(a, w) = Q0(a, w) + λ_q·eps·N^{-1/4}·h(w)` and
/// `logit g̃(w) = logit g0(w) + λ_g·N^{-1/4}·h(w)`, where `N` is the number of
/// independent units (observations or clusters) and `eps` the residual
/// amplitude of the sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbedOracle {
    pub truth: DgpTruth,
    pub q_shift: f64,
    pub logit_shift: f64,
}

impl PerturbedOracle {
    pub fn new(truth: DgpTruth, cfg: &NearBoundaryConfig, amplitude: f64, n_independent: usize) -> Self {
        let (lq, lg) = if cfg.enabled { (cfg.lambda_q, cfg.lambda_g) } else { (0.0, 0.0) };
        let rate = (n_independent as f64).powf(-0.25);
        PerturbedOracle { truth, q_shift: lq * amplitude * rate, logit_shift: lg * rate }
    }

    #[inline]
    pub fn q(&self, a: bool, w: f64) -> f64 {
        self.truth.q0(a, w) + self.q_shift * boundary_shape(w)
    }

    #[inline]
    pub fn g(&self, w: f64) -> f64 {
        expit(self.truth.logit_g0(w) + self.logit_shift * boundary_shape(w))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_truth_targets() {
        let t = DgpTruth::default();
        assert_eq!(t.psi0(), 0.4);
        assert_eq!(t.q0(true, 0.0) - t.q0(false, 0.0), 0.4);
        assert_eq!(t.g0(0.0), 0.5);
        assert_eq!(t.icc(), 0.0);
    }

    #[test]
    fn icc_setter_is_exact_in_ratio() {
        for icc in [0.01, 0.05, 0.1, 0.2] {
            let t = DgpTruth::default().with_icc(icc).unwrap();
            assert!((t.icc() - icc).abs() < 1e-15);
        }
        assert!(DgpTruth::default().with_icc(1.0).is_err());
    }

    #[test]
    fn shape_is_balanced() {
        let m = crate::numeric::normal_expectation(boundary_shape, &[-SHAPE_CUT, SHAPE_CUT]);
        assert!(m.abs() < 1e-12);
    }

    #[test]
    fn cluster_bookkeeping() {
        let t = DgpTruth::default().with_cluster_size(3);
        let d = gen_clustered(4, &t, SeedPath::root(1)).unwrap();
        assert_eq!(d.n_units(), 12);
        let dropped = d.without_cluster(1);
        assert_eq!(dropped.n_clusters(), 3);
        assert_eq!(dropped.cluster(1), d.cluster(2));
        let picked = d.select(&[3, 3, 0]);
        assert_eq!(picked.n_clusters(), 3);
        assert_eq!(picked.cluster(0), picked.cluster(1));
        let ids: Vec<usize> = picked.rows().map(|r| r.cluster_id).collect();
        assert_eq!(ids, vec![0, 0, 0, 1, 1, 1, 2, 2, 2]);
    }

    #[test]
    fn small_sizes_rejected() {
        let t = DgpTruth::default();
        assert!(matches!(gen_aipw_iid(1, &t, SeedPath::root(0)), Err(DgpError::InvalidSize { .. })));
        assert!(matches!(gen_clustered(1, &t, SeedPath::root(0)), Err(DgpError::InvalidSize { .. })));
        assert_eq!(perturbation_amplitudes(&[], &t), Err(DgpError::Empty));
    }
}
