//! Nuisance estimation: least-squares outcome regression with rank-one
//! leave-one-out updates and a Newton–Raphson logistic propensity model.

use crate::dgp::{expit, DgpTruth, Observation, PerturbedOracle};
use crate::numeric::CompensatedSum;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone)]
pub enum NuisanceError {
    #[error("too few rows: {got} (need at least {min})")]
    TooFewRows { got: usize, min: usize },
    #[error("design matrix is rank deficient")]
    SingularDesign,
    #[error("removing row {index} would make the design singular (leverage {leverage})")]
    SingularDowndate { index: usize, leverage: f64 },
    #[error("treatment takes a single value in every row")]
    DegenerateResponse,
    #[error("logistic fit did not converge after {iterations} iterations: {reason}")]
    NonConvergence { reason: String, iterations: usize, last: Box<LogisticFit> },
    #[error("row index {index} out of range for {n} rows")]
    IndexOutOfRange { index: usize, n: usize },
}

impl NuisanceError {
    /// Short reason code for failure tallies.
    pub fn code(&self) -> &'static str {
        match self {
            NuisanceError::TooFewRows { .. } => "too-few-rows",
            NuisanceError::SingularDesign => "singular-design",
            NuisanceError::SingularDowndate { .. } => "singular-downdate",
            NuisanceError::DegenerateResponse => "degenerate-response",
            NuisanceError::NonConvergence { .. } => "non-convergence",
            NuisanceError::IndexOutOfRange { .. } => "index-out-of-range",
        }
    }
}

/// Column set of the outcome regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutcomeSpec {
    /// Intercept, A, W, A·W.
    Interaction,
    /// Intercept, A, W (drops the interaction; mis-specified for the default truth).
    MainEffects,
}

impl OutcomeSpec {
    pub fn dim(self) -> usize {
        match self {
            OutcomeSpec::Interaction => 4,
            OutcomeSpec::MainEffects => 3,
        }
    }

    #[inline]
    fn features(self, a: bool, w: f64) -> [f64; 4] {
        let af = if a { 1.0 } else { 0.0 };
        match self {
            OutcomeSpec::Interaction => [1.0, af, w, af * w],
            OutcomeSpec::MainEffects => [1.0, af, w, 0.0],
        }
    }

    fn row(self, a: bool, w: f64) -> DVector<f64> {
        DVector::from_column_slice(&self.features(a, w)[..self.dim()])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub spec: OutcomeSpec,
    pub coefficients: DVector<f64>,
    pub gram_inverse: DMatrix<f64>,
    pub n_used: usize,
}

pub fn design_matrix(data: &[Observation], spec: OutcomeSpec) -> DMatrix<f64> {
    let p = spec.dim();
    DMatrix::from_fn(data.len(), p, |i, j| spec.features(data[i].a, data[i].w)[j])
}

/// Solves the normal equations for an arbitrary design, returning the
/// coefficients and (XᵀX)⁻¹.
pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>), NuisanceError> {
    solve_normal_equations(x.transpose() * x, x.transpose() * y)
}

fn solve_normal_equations(
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>), NuisanceError> {
    let eig = xtx.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |m, v| m.min(*v));
    if !(max > 0.0) || min <= 1e-12 * max {
        return Err(NuisanceError::SingularDesign);
    }
    let chol = xtx.cholesky().ok_or(NuisanceError::SingularDesign)?;
    let beta = chol.solve(&xty);
    Ok((beta, chol.inverse()))
}

pub fn fit_ols(data: &[Observation], spec: OutcomeSpec) -> Result<LinearFit, NuisanceError> {
    if data.len() < 5 {
        return Err(NuisanceError::TooFewRows { got: data.len(), min: 5 });
    }
    let p = spec.dim();
    let mut xtx = DMatrix::zeros(p, p);
    let mut xty = DVector::zeros(p);
    for o in data {
        let f = spec.features(o.a, o.w);
        for j in 0..p {
            xty[j] += f[j] * o.y;
            for k in 0..=j {
                xtx[(j, k)] += f[j] * f[k];
            }
        }
    }
    for j in 0..p {
        for k in 0..j {
            xtx[(k, j)] = xtx[(j, k)];
        }
    }
    let (coefficients, gram_inverse) = solve_normal_equations(xtx, xty)?;
    Ok(LinearFit { spec, coefficients, gram_inverse, n_used: data.len() })
}

pub fn predict_q(fit: &LinearFit, a: bool, w: f64) -> f64 {
    let c = &fit.coefficients;
    let af = if a { 1.0 } else { 0.0 };
    match fit.spec {
        OutcomeSpec::Interaction => c[0] + c[1] * af + c[2] * w + c[3] * af * w,
        OutcomeSpec::MainEffects => c[0] + c[1] * af + c[2] * w,
    }
}

fn rank_one(fit: &LinearFit, obs: &Observation, remove: bool, index: usize) -> Result<LinearFit, NuisanceError> {
    let x = fit.spec.row(obs.a, obs.w);
    let u = &fit.gram_inverse * &x;
    let h = x.dot(&u);
    let resid = obs.y - x.dot(&fit.coefficients);
    let (denom, sign) = if remove { (1.0 - h, -1.0) } else { (1.0 + h, 1.0) };
    if remove && denom <= 1e-10 {
        return Err(NuisanceError::SingularDowndate { index, leverage: h });
    }
    let gram_inverse = &fit.gram_inverse - (&u * u.transpose()) * (sign / denom);
    let coefficients = &fit.coefficients + &u * (sign * resid / denom);
    let n_used = if remove { fit.n_used - 1 } else { fit.n_used + 1 };
    Ok(LinearFit { spec: fit.spec, coefficients, gram_inverse, n_used })
}

/// The fit on `data` without row `i`, by a Sherman–Morrison downdate of the
/// full-data fit. `fit` must have been computed on `data`.
pub fn loo_downdate_ols(fit: &LinearFit, data: &[Observation], i: usize) -> Result<LinearFit, NuisanceError> {
    if i >= data.len() {
        return Err(NuisanceError::IndexOutOfRange { index: i, n: data.len() });
    }
    if fit.n_used < 6 {
        return Err(NuisanceError::TooFewRows { got: fit.n_used, min: 6 });
    }
    rank_one(fit, &data[i], true, i)
}

/// The fit with `obs` appended, by a rank-one update.
pub fn loo_update_ols(fit: &LinearFit, obs: &Observation) -> LinearFit {
    rank_one(fit, obs, false, 0).expect("rank-one update cannot be singular")
}

/// Column set of the propensity model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PropensitySpec {
    /// Intercept, W, W².
    Quadratic,
    /// Intercept, W.
    Linear,
}

impl PropensitySpec {
    pub fn dim(self) -> usize {
        match self {
            PropensitySpec::Quadratic => 3,
            PropensitySpec::Linear => 2,
        }
    }

    #[inline]
    fn features(self, w: f64) -> [f64; 3] {
        match self {
            PropensitySpec::Quadratic => [1.0, w, w * w],
            PropensitySpec::Linear => [1.0, w, 0.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        NewtonConfig { tol: 1e-10, max_iter: 50, max_halvings: 30 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub spec: PropensitySpec,
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub log_likelihood: f64,
    pub n_used: usize,
}

/// Fitted probabilities this close to 0 or 1 are treated as separation.
const SEPARATION_EPS: f64 = 1e-10;

struct Pass {
    ll: f64,
    grad: [f64; 3],
    info: [[f64; 3]; 3],
    extreme: bool,
}

fn linear_predictor(spec: PropensitySpec, beta: &[f64], w: f64) -> f64 {
    let f = spec.features(w);
    beta.iter().zip(f).map(|(b, x)| b * x).sum()
}

fn evaluate(data: &[Observation], skip: Option<usize>, spec: PropensitySpec, beta: &[f64]) -> Pass {
    let p = spec.dim();
    let mut ll = CompensatedSum::new();
    let mut grad = [0.0; 3];
    let mut info = [[0.0; 3]; 3];
    let mut extreme = false;
    for (i, o) in data.iter().enumerate() {
        if Some(i) == skip {
            continue;
        }
        let f = spec.features(o.w);
        let eta = linear_predictor(spec, beta, o.w);
        let prob = expit(eta);
        let y = o.a_f64();
        // log(1 + e^η) without overflow.
        let softplus = eta.max(0.0) + (-eta.abs()).exp().ln_1p();
        ll.add(y * eta - softplus);
        let r = y - prob;
        let v = prob * (1.0 - prob);
        extreme |= !(SEPARATION_EPS..=1.0 - SEPARATION_EPS).contains(&prob);
        for j in 0..p {
            grad[j] += f[j] * r;
            for k in 0..=j {
                info[j][k] += v * f[j] * f[k];
            }
        }
    }
    for j in 0..p {
        for k in 0..j {
            info[k][j] = info[j][k];
        }
    }
    Pass { ll: ll.value(), grad, info, extreme }
}

/// Log-likelihood and score of the logistic model at `beta`.
pub fn log_likelihood_and_score(data: &[Observation], spec: PropensitySpec, beta: &[f64]) -> (f64, Vec<f64>) {
    let pass = evaluate(data, None, spec, beta);
    (pass.ll, pass.grad[..spec.dim()].to_vec())
}

fn newton(
    data: &[Observation],
    skip: Option<usize>,
    spec: PropensitySpec,
    start: &[f64],
    cfg: &NewtonConfig,
) -> Result<LogisticFit, NuisanceError> {
    let p = spec.dim();
    let n_used = data.len() - usize::from(skip.is_some());
    let (mut n1, mut n0) = (0usize, 0usize);
    for (i, o) in data.iter().enumerate() {
        if Some(i) != skip {
            if o.a {
                n1 += 1
            } else {
                n0 += 1
            }
        }
    }
    if n1 == 0 || n0 == 0 {
        return Err(NuisanceError::DegenerateResponse);
    }
    let mut beta = start.to_vec();
    let mut pass = evaluate(data, skip, spec, &beta);
    let mut iterations = 0;
    let snapshot = |beta: &[f64], ll: f64, iterations: usize, converged: bool| LogisticFit {
        spec,
        coefficients: beta.to_vec(),
        converged,
        iterations,
        log_likelihood: ll,
        n_used,
    };
    let fail = |reason: &str, beta: &[f64], ll: f64, iterations: usize| NuisanceError::NonConvergence {
        reason: reason.to_string(),
        iterations,
        last: Box::new(snapshot(beta, ll, iterations, false)),
    };
    loop {
        let max_score = pass.grad[..p].iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if max_score <= cfg.tol {
            if pass.extreme {
                return Err(fail("fitted probabilities reached 0 or 1 (separation)", &beta, pass.ll, iterations));
            }
            return Ok(snapshot(&beta, pass.ll, iterations, true));
        }
        if iterations >= cfg.max_iter {
            return Err(fail("iteration limit reached", &beta, pass.ll, iterations));
        }
        let info = DMatrix::from_fn(p, p, |j, k| pass.info[j][k]);
        let grad = DVector::from_column_slice(&pass.grad[..p]);
        let step = match info.cholesky() {
            Some(ch) => ch.solve(&grad),
            None => return Err(fail("singular information matrix", &beta, pass.ll, iterations)),
        };
        // Accept the first step length that does not lower the likelihood;
        // the slack absorbs rounding once the increments fall below it.
        let slack = 1e-12 * pass.ll.abs().max(1.0);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=cfg.max_halvings {
            let cand: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + t * s).collect();
            let cand_pass = evaluate(data, skip, spec, &cand);
            if cand_pass.ll.is_finite() && cand_pass.ll >= pass.ll - slack {
                accepted = Some((cand, cand_pass));
                break;
            }
            t *= 0.5;
        }
        iterations += 1;
        match accepted {
            Some((b, ps)) => {
                beta = b;
                pass = ps;
            }
            None => return Err(fail("step-halving could not increase the likelihood", &beta, pass.ll, iterations)),
        }
    }
}

pub fn fit_logistic(data: &[Observation], spec: PropensitySpec, cfg: &NewtonConfig) -> Result<LogisticFit, NuisanceError> {
    if data.len() < spec.dim() {
        return Err(NuisanceError::TooFewRows { got: data.len(), min: spec.dim() });
    }
    newton(data, None, spec, &vec![0.0; spec.dim()], cfg)
}

/// Newton refit on `data` without row `i`, started from `warm`.
pub fn loo_refit_logistic(
    data: &[Observation],
    i: usize,
    warm: &LogisticFit,
    cfg: &NewtonConfig,
) -> Result<LogisticFit, NuisanceError> {
    if i >= data.len() {
        return Err(NuisanceError::IndexOutOfRange { index: i, n: data.len() });
    }
    newton(data, Some(i), warm.spec, &warm.coefficients, cfg)
}

pub fn predict_g(fit: &LogisticFit, w: f64) -> f64 {
    expit(linear_predictor(fit.spec, &fit.coefficients, w))
}

/// Which nuisance source feeds the estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NuisanceMode {
    Fitted,
    Oracle,
    NearBoundary,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NuisancePair {
    Fitted { q: LinearFit, g: LogisticFit },
    Oracle(DgpTruth),
    NearBoundary(PerturbedOracle),
}

impl NuisancePair {
    pub fn mode(&self) -> NuisanceMode {
        match self {
            NuisancePair::Fitted { .. } => NuisanceMode::Fitted,
            NuisancePair::Oracle(_) => NuisanceMode::Oracle,
            NuisancePair::NearBoundary(_) => NuisanceMode::NearBoundary,
        }
    }

    #[inline]
    pub fn q(&self, a: bool, w: f64) -> f64 {
        match self {
            NuisancePair::Fitted { q, .. } => predict_q(q, a, w),
            NuisancePair::Oracle(t) => t.q0(a, w),
            NuisancePair::NearBoundary(p) => p.q(a, w),
        }
    }

    #[inline]
    pub fn g(&self, w: f64) -> f64 {
        match self {
            NuisancePair::Fitted { g, .. } => predict_g(g, w),
            NuisancePair::Oracle(t) => t.g0(w),
            NuisancePair::NearBoundary(p) => p.g(w),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Vec<Observation> {
        (0..12)
            .map(|i| {
                let w = i as f64 / 3.0 - 2.0;
                Observation::new(w, i % 3 == 0 || i > 8, 1.0 + 0.5 * w + (i % 4) as f64 * 0.1)
            })
            .collect()
    }

    #[test]
    fn zero_coefficient_predictions() {
        let q = LinearFit {
            spec: OutcomeSpec::Interaction,
            coefficients: DVector::from_column_slice(&[0.7, 0.0, 0.0, 0.0]),
            gram_inverse: DMatrix::identity(4, 4),
            n_used: 10,
        };
        assert_eq!(predict_q(&q, true, 3.0), 0.7);
        let g = LogisticFit {
            spec: PropensitySpec::Quadratic,
            coefficients: vec![0.0; 3],
            converged: true,
            iterations: 0,
            log_likelihood: 0.0,
            n_used: 10,
        };
        assert_eq!(predict_g(&g, -4.0), 0.5);
    }

    #[test]
    fn update_then_downdate_is_identity() {
        let data = toy();
        let fit = fit_ols(&data, OutcomeSpec::Interaction).unwrap();
        let extra = Observation::new(0.3, true, 2.0);
        let grown = loo_update_ols(&fit, &extra);
        let mut with_extra = data.clone();
        with_extra.push(extra);
        let back = loo_downdate_ols(&grown, &with_extra, data.len()).unwrap();
        for (a, b) in back.coefficients.iter().zip(fit.coefficients.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_response() {
        let data: Vec<_> = (0..10).map(|i| Observation::new(i as f64, true, 0.0)).collect();
        assert!(matches!(
            fit_logistic(&data, PropensitySpec::Quadratic, &NewtonConfig::default()),
            Err(NuisanceError::DegenerateResponse)
        ));
    }

    #[test]
    fn index_checks() {
        let data = toy();
        let fit = fit_ols(&data, OutcomeSpec::Interaction).unwrap();
        assert!(matches!(loo_downdate_ols(&fit, &data, 99), Err(NuisanceError::IndexOutOfRange { .. })));
        let g = fit_logistic(&data, PropensitySpec::Linear, &NewtonConfig::default()).unwrap();
        assert!(matches!(
            loo_refit_logistic(&data, 12, &g, &NewtonConfig::default()),
            Err(NuisanceError::IndexOutOfRange { .. })
        ));
    }
}
