use alevar::dgp::{gen_aipw_iid, without_row, DgpTruth, Observation};
use alevar::nuisance::*;
use alevar::rng::SeedPath;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use std::time::Instant;

fn data(n: usize, s: u64) -> Vec<Observation> {
    gen_aipw_iid(n, &DgpTruth::default(), SeedPath::root(s)).unwrap()
}

/// Least squares by QR, independent of the normal-equation path.
fn qr_coefficients(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let qr = x.clone().qr();
    let qty = qr.q().transpose() * y;
    qr.r().solve_upper_triangular(&qty).unwrap()
}

fn y_of(d: &[Observation]) -> DVector<f64> {
    DVector::from_iterator(d.len(), d.iter().map(|o| o.y))
}

#[test]
fn noiseless_outcomes_recovered_exactly() {
    let truth = DgpTruth { sigma_eps: 0.0, ..DgpTruth::default() };
    let d = gen_aipw_iid(200, &truth, SeedPath::root(1)).unwrap();
    let fit = fit_ols(&d, OutcomeSpec::Interaction).unwrap();
    for (got, want) in fit.coefficients.iter().zip([0.5, 0.4, 0.3, 0.15]) {
        assert!((got - want).abs() < 1e-10);
    }
}

#[test]
fn ols_matches_qr_and_is_orthogonal() {
    let d = data(300, 2);
    let fit = fit_ols(&d, OutcomeSpec::Interaction).unwrap();
    let x = design_matrix(&d, OutcomeSpec::Interaction);
    let y = y_of(&d);
    let qr = qr_coefficients(&x, &y);
    assert!((&fit.coefficients - &qr).amax() < 1e-10);
    let resid = &y - &x * &fit.coefficients;
    let bound = 1e-8 * y.norm();
    for j in 0..4 {
        assert!(x.column(j).dot(&resid).abs() < bound);
    }
    let gram = x.transpose() * &x;
    assert!((&fit.gram_inverse * gram - DMatrix::<f64>::identity(4, 4)).amax() < 1e-8);
}

#[test]
fn duplicate_column_is_singular() {
    let x = DMatrix::from_fn(10, 2, |i, _| i as f64);
    let y = DVector::from_element(10, 1.0);
    assert!(matches!(least_squares(&x, &y), Err(NuisanceError::SingularDesign)));
    // All units treated: the A column duplicates the intercept.
    let d: Vec<Observation> = (0..10).map(|i| Observation::new(i as f64 * 0.1, true, 1.0)).collect();
    assert!(matches!(fit_ols(&d, OutcomeSpec::Interaction), Err(NuisanceError::SingularDesign)));
}

#[test]
fn downdate_matches_naive_refit_everywhere() {
    for s in 0..20 {
        let d = data(50, 100 + s);
        let fit = fit_ols(&d, OutcomeSpec::Interaction).unwrap();
        for i in 0..d.len() {
            let fast = loo_downdate_ols(&fit, &d, i).unwrap();
            let slow = fit_ols(&without_row(&d, i), OutcomeSpec::Interaction).unwrap();
            assert!((&fast.coefficients - &slow.coefficients).amax() < 1e-8, "seed {s} row {i}");
            for w in [-1.5, 0.0, 2.0] {
                for a in [false, true] {
                    assert!((predict_q(&fast, a, w) - predict_q(&slow, a, w)).abs() < 1e-8);
                }
            }
        }
    }
}

#[test]
fn downdate_then_update_restores() {
    let d = data(40, 5);
    let fit = fit_ols(&d, OutcomeSpec::Interaction).unwrap();
    for i in [0, 17, 39] {
        let back = loo_update_ols(&loo_downdate_ols(&fit, &d, i).unwrap(), &d[i]);
        assert!((&back.coefficients - &fit.coefficients).amax() < 1e-8);
        assert_eq!(back.n_used, fit.n_used);
    }
}

#[test]
fn downdate_of_sole_leverage_row_errors() {
    // The only control unit has leverage 1: removing it leaves A constant.
    let mut d: Vec<Observation> = (0..8).map(|i| Observation::new(i as f64 * 0.3 - 1.0, true, i as f64)).collect();
    d.push(Observation::new(0.2, false, 0.0));
    let fit = fit_ols(&d, OutcomeSpec::MainEffects).unwrap();
    assert!(matches!(loo_downdate_ols(&fit, &d, 8), Err(NuisanceError::SingularDowndate { .. })));
}

#[test]
fn downdate_is_faster_than_refit() {
    let d = data(2000, 9);
    let fit = fit_ols(&d, OutcomeSpec::Interaction).unwrap();
    let t = Instant::now();
    let mut acc = 0.0;
    for i in 0..d.len() {
        acc += loo_downdate_ols(&fit, &d, i).unwrap().coefficients[0];
    }
    let fast = t.elapsed();
    let t = Instant::now();
    for i in 0..d.len() {
        acc -= fit_ols(&without_row(&d, i), OutcomeSpec::Interaction).unwrap().coefficients[0];
    }
    let slow = t.elapsed();
    assert!(acc.abs() < 1e-6);
    assert!(slow.as_secs_f64() >= 5.0 * fast.as_secs_f64(), "fast {fast:?} slow {slow:?}");
}

#[test]
fn logistic_null_slopes_vanish() {
    let truth = DgpTruth { propensity: [0.2, 0.0], ..DgpTruth::default() };
    let d = gen_aipw_iid(100_000, &truth, SeedPath::root(31)).unwrap();
    let fit = fit_logistic(&d, PropensitySpec::Quadratic, &NewtonConfig::default()).unwrap();
    assert!(fit.converged);
    // Slopes vanish and the intercept tracks the marginal log-odds.
    assert!(fit.coefficients[1].abs() < 0.03 && fit.coefficients[2].abs() < 0.03);
    let rate = d.iter().filter(|o| o.a).count() as f64 / d.len() as f64;
    assert!((fit.coefficients[0] - (rate / (1.0 - rate)).ln()).abs() < 0.03);
}

#[test]
fn logistic_recovers_default_propensity() {
    let d = data(100_000, 32);
    let fit = fit_logistic(&d, PropensitySpec::Quadratic, &NewtonConfig::default()).unwrap();
    assert!((fit.coefficients[1] - 0.3).abs() < 0.03);
    assert!(fit.coefficients[2].abs() < 0.03);
    let (_, score) = log_likelihood_and_score(&d, PropensitySpec::Quadratic, &fit.coefficients);
    assert!(score.iter().all(|s| s.abs() < 1e-8));
}

#[test]
fn separation_is_an_error() {
    let mut d = Vec::new();
    for _ in 0..3 {
        d.push(Observation::new(-1.0, false, 0.0));
        d.push(Observation::new(1.0, true, 0.0));
    }
    let r = fit_logistic(&d, PropensitySpec::Quadratic, &NewtonConfig::default());
    assert!(matches!(r, Err(NuisanceError::NonConvergence { .. })), "{r:?}");
}

#[test]
fn single_class_is_degenerate() {
    let d: Vec<Observation> = (0..10).map(|i| Observation::new(i as f64, true, 0.0)).collect();
    assert!(matches!(
        fit_logistic(&d, PropensitySpec::Quadratic, &NewtonConfig::default()),
        Err(NuisanceError::DegenerateResponse)
    ));
}

#[test]
fn warm_refit_matches_cold() {
    let d = data(200, 41);
    let cfg = NewtonConfig::default();
    let full = fit_logistic(&d, PropensitySpec::Quadratic, &cfg).unwrap();
    for k in 0..20 {
        let i = (k * 37 + 3) % d.len();
        let warm = loo_refit_logistic(&d, i, &full, &cfg).unwrap();
        let cold = fit_logistic(&without_row(&d, i), PropensitySpec::Quadratic, &cfg).unwrap();
        for (a, b) in warm.coefficients.iter().zip(&cold.coefficients) {
            assert!((a - b).abs() < 1e-8);
        }
        for w in [-2.0, 0.0, 1.0] {
            assert!((predict_g(&warm, w) - predict_g(&cold, w)).abs() < 1e-8);
        }
    }
    assert!(matches!(loo_refit_logistic(&d, 200, &full, &cfg), Err(NuisanceError::IndexOutOfRange { .. })));
}

#[test]
fn dropping_a_duplicate_moves_coefficients_by_order_one_over_n() {
    let mut d = data(400, 42);
    d.push(d[7]);
    let cfg = NewtonConfig::default();
    let full = fit_logistic(&d, PropensitySpec::Quadratic, &cfg).unwrap();
    let loo = loo_refit_logistic(&d, d.len() - 1, &full, &cfg).unwrap();
    let shift = full.coefficients.iter().zip(&loo.coefficients).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let n = d.len() as f64;
    assert!(shift > 0.0 && shift < 20.0 / n, "{shift}");
}

#[test]
fn zero_coefficient_predictions() {
    let g = LogisticFit {
        spec: PropensitySpec::Quadratic,
        coefficients: vec![0.0; 3],
        converged: true,
        iterations: 0,
        log_likelihood: 0.0,
        n_used: 0,
    };
    assert_eq!(predict_g(&g, 3.7), 0.5);
    let q = LinearFit {
        spec: OutcomeSpec::Interaction,
        coefficients: DVector::from_column_slice(&[0.25, 0.0, 0.0, 0.0]),
        gram_inverse: DMatrix::identity(4, 4),
        n_used: 0,
    };
    assert_eq!(predict_q(&q, true, -4.0), 0.25);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10))]

    #[test]
    fn score_matches_finite_differences(
        s in 0u64..1000,
        b0 in -1.0f64..1.0,
        b1 in -1.0f64..1.0,
        b2 in -0.5f64..0.5,
    ) {
        let d = data(150, s);
        let beta = [b0, b1, b2];
        let (_, score) = log_likelihood_and_score(&d, PropensitySpec::Quadratic, &beta);
        for j in 0..3 {
            let h = 1e-5;
            let mut up = beta;
            let mut dn = beta;
            up[j] += h;
            dn[j] -= h;
            let fd = (log_likelihood_and_score(&d, PropensitySpec::Quadratic, &up).0
                - log_likelihood_and_score(&d, PropensitySpec::Quadratic, &dn).0)
                / (2.0 * h);
            prop_assert!((fd - score[j]).abs() <= 1e-6 * score[j].abs().max(1.0), "{} vs {}", fd, score[j]);
        }
    }

    #[test]
    fn predictions_linear_in_coefficients(c in prop::array::uniform4(-2.0f64..2.0), k in -3.0f64..3.0, w in -3.0f64..3.0) {
        let mk = |v: [f64; 4]| LinearFit {
            spec: OutcomeSpec::Interaction,
            coefficients: DVector::from_column_slice(&v),
            gram_inverse: DMatrix::identity(4, 4),
            n_used: 0,
        };
        let scaled = c.map(|x| k * x);
        for a in [false, true] {
            prop_assert!((predict_q(&mk(scaled), a, w) - k * predict_q(&mk(c), a, w)).abs() < 1e-12);
        }
    }
}
