//! Constants of the near-boundary design: the remainder slope κ, the
//! efficiency bound σ²_EIF, and the remainder variance c_R implied by a pair
//! of scale constants.

use crate::dgp::{boundary_shape, expit, gen_aipw_iid, DgpTruth, SHAPE_CUT};
use crate::estimator::true_eif;
use crate::numeric::{normal_expectation, sample_variance};
use crate::rng::SeedPath;

/// Step used for the central difference defining κ.
const KAPPA_STEP: f64 = 1e-4;

/// Default ratio λ_g/λ_q used to split the product λ_q·λ_g.
pub const DEFAULT_LAMBDA_SPLIT: f64 = 4.5;
/// Default target for c_R/σ²_EIF.
pub const DEFAULT_TARGET_RATIO: f64 = 0.3;

/// κ = −d/dτ E[h(W)·(g0/g_τ − (1 − g0)/(1 − g_τ))] at τ = 0, where
/// logit g_τ = logit g0 + τ·h. The realized remainder of the perturbed
/// oracle is approximately κ·(Q shift)·(logit shift).
pub fn kappa(truth: &DgpTruth) -> f64 {
    let bias = |tau: f64| {
        normal_expectation(
            |w| {
                let h = boundary_shape(w);
                let g0 = truth.g0(w);
                let gt = expit(truth.logit_g0(w) + tau * h);
                h * (g0 / gt - (1.0 - g0) / (1.0 - gt))
            },
            &[-SHAPE_CUT, SHAPE_CUT],
        )
    };
    -(bias(KAPPA_STEP) - bias(-KAPPA_STEP)) / (2.0 * KAPPA_STEP)
}

/// Variance of the efficient influence function for independent units:
/// Var(Q0(1,W) − Q0(0,W)) + σ²·E[1/g0 + 1/(1 − g0)], with σ² the total
/// outcome-noise variance.
pub fn sigma2_eif(truth: &DgpTruth) -> f64 {
    let psi0 = truth.psi0();
    let noise = truth.sigma_eps * truth.sigma_eps + truth.sigma_b * truth.sigma_b;
    let effect = normal_expectation(
        |w| {
            let d = truth.q0(true, w) - truth.q0(false, w) - psi0;
            d * d
        },
        &[],
    );
    let weights = normal_expectation(
        |w| {
            let g = truth.g0(w);
            1.0 / g + 1.0 / (1.0 - g)
        },
        &[],
    );
    effect + noise * weights
}

/// Monte Carlo estimate of σ²_EIF from `draws` simulated observations.
pub fn sigma2_eif_monte_carlo(truth: &DgpTruth, draws: usize, seed: SeedPath) -> f64 {
    let data = gen_aipw_iid(draws, truth, seed).expect("draws >= 2");
    let d: Vec<f64> = data.iter().map(|o| true_eif(o, truth)).collect();
    sample_variance(&d)
}

/// c_R = λ_q²·λ_g²·κ².
pub fn remainder_constant(kappa: f64, lambda_q: f64, lambda_g: f64) -> f64 {
    let l = lambda_q * lambda_g * kappa;
    l * l
}

/// Variance of the cluster-level residual amplitude relative to the i.i.d.
/// case: 1 + m·ICC/(1 − ICC).
pub fn cluster_amplitude_inflation(truth: &DgpTruth) -> f64 {
    let icc = truth.icc();
    1.0 + truth.m as f64 * icc / (1.0 - icc)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub kappa: f64,
    pub sigma2_eif: f64,
    pub target_ratio: f64,
    pub lambda_split: f64,
    pub lambda_q: f64,
    pub lambda_g: f64,
    pub c_r: f64,
    /// Monte Carlo cross-check of `sigma2_eif`, when computed.
    pub sigma2_eif_mc: Option<f64>,
}

impl Calibration {
    /// Chooses λ_q, λ_g with λ_g/λ_q = `lambda_split` so that
    /// c_R/σ²_EIF = `target_ratio`.
    pub fn compute(truth: &DgpTruth, target_ratio: f64, lambda_split: f64) -> Self {
        let kappa = kappa(truth);
        let s2 = sigma2_eif(truth);
        let product = (target_ratio * s2).sqrt() / kappa;
        let lambda_q = (product / lambda_split).sqrt();
        let lambda_g = (product * lambda_split).sqrt();
        Calibration {
            kappa,
            sigma2_eif: s2,
            target_ratio,
            lambda_split,
            lambda_q,
            lambda_g,
            c_r: remainder_constant(kappa, lambda_q, lambda_g),
            sigma2_eif_mc: None,
        }
    }

    pub fn default_for(truth: &DgpTruth) -> Self {
        Self::compute(truth, DEFAULT_TARGET_RATIO, DEFAULT_LAMBDA_SPLIT)
    }

    pub fn with_monte_carlo(mut self, truth: &DgpTruth, draws: usize, seed: SeedPath) -> Self {
        self.sigma2_eif_mc = Some(sigma2_eif_monte_carlo(truth, draws, seed));
        self
    }

    /// c_R/σ²_EIF; the large-sample mean of ρ̂ is 1 plus this.
    pub fn ratio(&self) -> f64 {
        self.c_r / self.sigma2_eif
    }
}
