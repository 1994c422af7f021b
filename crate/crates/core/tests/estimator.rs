use alevar::calibration::sigma2_eif;
use alevar::dgp::*;
use alevar::estimator::*;
use alevar::nuisance::{NewtonConfig, NuisancePair, OutcomeSpec, PropensitySpec};
use alevar::numeric::{mean, sample_variance};
use alevar::resampling::LeaveOneOut;
use alevar::rng::SeedPath;
use proptest::prelude::*;

fn data(n: usize, s: u64) -> Vec<Observation> {
    gen_aipw_iid(n, &DgpTruth::default(), SeedPath::root(s)).unwrap()
}

#[test]
fn oracle_noiseless_is_exact() {
    // With ε ≡ 0 the weighted residuals vanish and Ψ̂ is the in-sample
    // plug-in 0.4 + 0.15·W̄; it equals 0.4 exactly once the A·W term is off.
    let truth = DgpTruth { sigma_eps: 0.0, ..DgpTruth::default() };
    let flat = DgpTruth { outcome: [0.5, 0.4, 0.3, 0.0], ..truth };
    for n in [2, 7, 100] {
        let d = gen_aipw_iid(n, &truth, SeedPath::root(n as u64)).unwrap();
        let est = aipw(&d, &NuisancePair::Oracle(truth)).unwrap();
        let plug_in = mean(&d.iter().map(|o| truth.q0(true, o.w) - truth.q0(false, o.w)).collect::<Vec<_>>());
        assert!((est.psi_hat - plug_in).abs() < 1e-10);
        let d = gen_aipw_iid(n, &flat, SeedPath::root(n as u64)).unwrap();
        assert!((aipw(&d, &NuisancePair::Oracle(flat)).unwrap().psi_hat - 0.4).abs() < 1e-10);
    }
}

#[test]
fn oracle_large_sample_near_truth() {
    let truth = DgpTruth::default();
    let est = aipw(&data(100_000, 3), &NuisancePair::Oracle(truth)).unwrap();
    assert!((est.psi_hat - 0.4).abs() < 0.01);
}

#[test]
fn fitted_bias_and_mcsd_at_2000() {
    let pipeline = AipwPipeline::fitted(DgpTruth::default());
    let psi: Vec<f64> = (0..500).map(|r| pipeline.psi(&data(2000, 10_000 + r)).unwrap()).collect();
    let bias = mean(&psi) - 0.4;
    let mcsd = sample_variance(&psi).sqrt();
    assert!(bias.abs() < 0.003, "{bias}");
    assert!((mcsd / 0.023 - 1.0).abs() < 0.2, "{mcsd}");
}

#[test]
fn double_robustness_with_misspecified_outcome() {
    let pipeline = AipwPipeline {
        truth: DgpTruth::default(),
        strategy: NuisanceStrategy::Fitted {
            outcome: OutcomeSpec::MainEffects,
            propensity: PropensitySpec::Quadratic,
            newton: NewtonConfig::default(),
        },
    };
    let psi: Vec<f64> = (0..500).map(|r| pipeline.psi(&data(2000, 20_000 + r)).unwrap()).collect();
    assert!((mean(&psi) - 0.4).abs() < 0.005);
}

#[test]
fn eif_at_regression_value_is_zero() {
    let truth = DgpTruth::default();
    let o = Observation::new(0.0, true, truth.q0(true, 0.0));
    assert!(true_eif(&o, &truth).abs() < 1e-15);
}

#[test]
fn eif_moments() {
    let truth = DgpTruth::default();
    let d: Vec<f64> = data(1_000_000, 4).iter().map(|o| true_eif(o, &truth)).collect();
    let v = sample_variance(&d);
    let se = (v / d.len() as f64).sqrt();
    assert!(mean(&d).abs() < 3.0 * se);
    // The variance of a sample variance is about 2σ⁴/n for near-normal data;
    // the IPW terms are heavier-tailed, so allow 5%.
    assert!((v / sigma2_eif(&truth) - 1.0).abs() < 0.05, "{v}");
}

#[test]
fn positivity_violation_names_rows() {
    let truth = DgpTruth { propensity: [0.0, 40.0], ..DgpTruth::default() };
    let d = vec![Observation::new(0.0, true, 1.0), Observation::new(2.0, true, 1.0), Observation::new(-2.0, false, 0.0)];
    match aipw(&d, &NuisancePair::Oracle(truth)) {
        Err(EstimatorError::Positivity { rows }) => assert_eq!(rows, vec![1, 2]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn oracle_mode_has_no_remainder() {
    let truth = DgpTruth::default();
    let d = data(300, 5);
    let est = aipw(&d, &NuisancePair::Oracle(truth)).unwrap();
    let o = remainder_oracle(&est, &d, &truth);
    assert!(o.r_rem.abs() < 1e-12);
    let pipeline = AipwPipeline::oracle(truth);
    let loo = PipelineLoo::new(&pipeline, &d).unwrap();
    let p = loo_perturbations(&d, &truth, &loo, est.psi_hat, 5000).unwrap();
    assert!(p.b_values.iter().all(|b| b.abs() < 1e-12));
    assert!(p.c_n >= 0.0);
}

#[test]
fn loo_cap_enforced() {
    let truth = DgpTruth::default();
    let d = data(50, 6);
    let pipeline = AipwPipeline::oracle(truth);
    let loo = PipelineLoo::new(&pipeline, &d).unwrap();
    assert!(matches!(loo_perturbations(&d, &truth, &loo, 0.4, 10), Err(EstimatorError::SizeCap { .. })));
}

#[test]
fn zero_lambda_matches_oracle_bitwise() {
    let truth = DgpTruth::default();
    let d = data(400, 7);
    let nb = AipwPipeline::near_boundary(truth, NearBoundaryConfig::new(0.0, 0.0));
    let or = AipwPipeline::oracle(truth);
    let a = nb.estimate(&d).unwrap();
    let b = or.estimate(&d).unwrap();
    assert_eq!(a.psi_hat.to_bits(), b.psi_hat.to_bits());
    assert!(a.scores.iter().zip(&b.scores).all(|(x, y)| x.to_bits() == y.to_bits()));
    let la = PipelineLoo::new(&nb, &d).unwrap();
    let lb = PipelineLoo::new(&or, &d).unwrap();
    for i in [0, 199, 399] {
        assert_eq!(la.estimate_without(i).unwrap().to_bits(), lb.estimate_without(i).unwrap().to_bits());
    }
}

#[test]
fn pipeline_loo_equals_refit_on_deleted_data() {
    let truth = DgpTruth::default();
    let d = data(120, 8);
    for pipeline in [
        AipwPipeline::fitted(truth),
        AipwPipeline::near_boundary(truth, NearBoundaryConfig::new(0.35, 1.59)),
        AipwPipeline::oracle(truth),
    ] {
        let loo = PipelineLoo::new(&pipeline, &d).unwrap();
        for i in 0..d.len() {
            let fast = loo.estimate_without(i).unwrap();
            let slow = pipeline.psi(&without_row(&d, i)).unwrap();
            assert!((fast - slow).abs() < 1e-8, "{:?} row {i}", pipeline.strategy);
        }
    }
}

#[test]
fn cluster_loo_equals_refit() {
    let truth = DgpTruth::default().with_icc(0.1).unwrap().with_cluster_size(5);
    let d = gen_clustered(12, &truth, SeedPath::root(9)).unwrap();
    let pipeline = AipwPipeline::near_boundary(truth, NearBoundaryConfig::new(0.35, 1.59));
    let loo = ClusterPipelineLoo::new(&pipeline, &d);
    assert_eq!(loo.units(), 12);
    for j in 0..12 {
        let a = loo.estimate_without(j).unwrap();
        let b = pipeline.psi_clustered(&d.without_cluster(j)).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn cluster_scores_sum_members() {
    let truth = DgpTruth::default().with_icc(0.05).unwrap().with_cluster_size(4);
    let d = gen_clustered(10, &truth, SeedPath::root(10)).unwrap();
    let est = AipwPipeline::fitted(truth).estimate_clustered(&d).unwrap();
    let sums = est.cluster_scores.as_ref().unwrap();
    assert_eq!(sums.len(), 10);
    for (j, s) in sums.iter().enumerate() {
        let members: f64 = est.scores[j * 4..(j + 1) * 4].iter().sum();
        assert!((s - members).abs() < 1e-12);
    }
    let total: f64 = sums.iter().sum();
    assert!(total.abs() < 1e-10);
}

#[test]
fn strong_decay_remainder_shrinks() {
    let truth = DgpTruth::default();
    let pipeline = AipwPipeline::fitted(truth);
    let scaled: Vec<f64> = [200usize, 500, 1000, 2000]
        .iter()
        .map(|&n| {
            let r: Vec<f64> = (0..300)
                .map(|k| {
                    let d = data(n, 30_000 + 1000 * n as u64 + k);
                    remainder_oracle(&pipeline.estimate(&d).unwrap(), &d, &truth).r_rem
                })
                .collect();
            n as f64 * sample_variance(&r)
        })
        .collect();
    assert!(scaled.windows(2).all(|w| w[1] < w[0]), "{scaled:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn scores_are_centered(s in any::<u64>(), n in 20usize..300) {
        let d = gen_aipw_iid(n, &DgpTruth::default(), SeedPath::root(s)).unwrap();
        let est = AipwPipeline::fitted(DgpTruth::default()).estimate(&d);
        if let Ok(est) = est {
            prop_assert!(mean(&est.scores).abs() < 1e-10);
        }
    }

    #[test]
    fn decomposition_identity_is_exact(s in any::<u64>(), n in 20usize..300, lq in 0.0f64..1.0, lg in 0.0f64..3.0) {
        let truth = DgpTruth::default();
        let d = gen_aipw_iid(n, &truth, SeedPath::root(s)).unwrap();
        let est = AipwPipeline::near_boundary(truth, NearBoundaryConfig::new(lq, lg)).estimate(&d).unwrap();
        let o = remainder_oracle(&est, &d, &truth);
        prop_assert!((est.psi_hat - truth.psi0() - (o.mean_true_d + o.r_rem)).abs() < 1e-14);
        prop_assert!(o.true_scores.iter().zip(&d).all(|(t, obs)| *t == true_eif(obs, &truth)));
    }
}
