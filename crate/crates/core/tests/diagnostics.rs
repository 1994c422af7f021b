use alevar::dgp::{gen_aipw_iid, DgpTruth, Observation};
use alevar::diagnostics::*;
use alevar::estimator::{aipw, remainder_oracle};
use alevar::numeric::mean;
use alevar::nuisance::NuisancePair;
use alevar::rng::SeedPath;
use proptest::prelude::*;
use rand::Rng;

fn normals(n: usize, sd: f64, s: u64) -> Vec<f64> {
    let mut rng = SeedPath::root(s).rng();
    (0..n).map(|_| sd * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect()
}

#[test]
fn reference_sequences_classify() {
    let strong = [(200, 1.040), (500, 1.014), (1000, 1.007), (2000, 1.003)];
    assert_eq!(regime_classify(&strong, 0.05).unwrap().verdict, Verdict::StrongDecay);
    let near = [(10, 1.318), (30, 1.191), (50, 1.159), (100, 1.145)];
    assert_eq!(regime_classify(&near, 0.05).unwrap().verdict, Verdict::NearBoundary);
}

#[test]
fn classifier_preconditions() {
    let two = [(200, 1.3), (500, 1.3)];
    assert_eq!(regime_classify(&two, 0.05).unwrap().verdict, Verdict::Inconclusive);
    assert!(regime_classify(&[(500, 1.0), (200, 1.0), (1000, 1.0)], 0.05).is_err());
    assert!(regime_classify(&[(200, 1.0), (200, 1.0), (1000, 1.0)], 0.05).is_err());
    // Settled at small n but not at large n fits neither regime.
    let mixed = [(200, 1.03), (500, 1.2), (1000, 1.08)];
    assert_eq!(regime_classify(&mixed, 0.05).unwrap().verdict, Verdict::Inconclusive);
}

#[test]
fn classifier_reports_its_knobs() {
    let v = regime_classify(&[(1, 1.2), (2, 1.1), (3, 1.04)], 0.05).unwrap();
    assert_eq!(v.rule, RegimeRule::default());
    assert!((v.trend_statistic - 0.8).abs() < 1e-12);
}

#[test]
fn mallows_examples() {
    let a = normals(500, 1.0, 1);
    assert_eq!(mallows2_1d(&a, &a), 0.0);
    let shifted: Vec<f64> = a.iter().map(|x| x + 0.37).collect();
    assert!((mallows2_1d(&a, &shifted) - 0.37).abs() < 1e-10);
    let d = mallows2_1d(&normals(100_000, 1.0, 2), &normals(100_000, 2.0, 3));
    assert!((d - 1.0).abs() < 0.05, "{d}");
}

#[test]
fn mallows_on_unequal_sizes() {
    // One point against its own replication is zero; a two-point law against
    // its midpoint is half the gap.
    assert_eq!(mallows2_1d(&[2.0], &[2.0, 2.0, 2.0]), 0.0);
    assert!((mallows2_1d(&[0.0, 2.0], &[1.0, 1.0]) - 1.0).abs() < 1e-15);
}

#[test]
fn decomposition_with_oracle_nuisances() {
    let truth = DgpTruth::default();
    let records: Vec<OracleRecord> = (0..400)
        .map(|r| {
            let d = gen_aipw_iid(200, &truth, SeedPath::root(100 + r)).unwrap();
            let est = aipw(&d, &NuisancePair::Oracle(truth)).unwrap();
            let o = remainder_oracle(&est, &d, &truth);
            OracleRecord { psi_hat: est.psi_hat, mean_true_d: Some(o.mean_true_d), r_rem: Some(o.r_rem) }
        })
        .collect();
    let rep = decomposition_oracle(&records).unwrap();
    assert!(rep.var_rem < 1e-24);
    assert!(rep.cross_term.abs() < 1e-12);
    assert!(rep.closure_gap.abs() <= 3.0 * rep.var_total_se);
    assert_eq!(rep.replicates, 400);
}

#[test]
fn decomposition_preconditions() {
    let full = OracleRecord { psi_hat: 0.4, mean_true_d: Some(0.0), r_rem: Some(0.0) };
    assert!(matches!(decomposition_oracle(&[full; 99]), Err(DiagnosticsError::TooFewReplicates { .. })));
    let mut recs = vec![full; 120];
    recs[17].r_rem = None;
    assert!(matches!(decomposition_oracle(&recs), Err(DiagnosticsError::OracleUnavailable { index: 17 })));
}

fn mean_y(d: &[Observation]) -> Result<f64, String> {
    Ok(mean(&d.iter().map(|o| o.y).collect::<Vec<_>>()))
}

#[test]
fn constant_estimator_distance() {
    let truth = DgpTruth::default();
    let d = gen_aipw_iid(100, &truth, SeedPath::root(4)).unwrap();
    let c = 0.47;
    let dist = bootstrap_consistency_check(
        &d,
        |_: &[Observation]| Ok::<_, String>(c),
        |s| gen_aipw_iid(100, &truth, s).map_err(|e| e.to_string()),
        0.4,
        50,
        20,
        SeedPath::root(5),
    )
    .unwrap();
    assert!((dist - 10.0 * (c - 0.4f64).abs()).abs() < 1e-12);
}

#[test]
fn sample_mean_bootstrap_converges() {
    let truth = DgpTruth::default();
    // E[Y] = 0.5 + 0.4·E[A] + 0 + 0.15·E[AW].
    let ey = 0.5 + 0.4 * 0.5 + 0.15 * alevar::numeric::normal_expectation(|w| w * truth.g0(w), &[]);
    let avg = |n: usize| {
        let ds: Vec<f64> = (0..20)
            .map(|k| {
                let seed = SeedPath::root(77).child(n as u64).child(k);
                let d = gen_aipw_iid(n, &truth, seed.child(0)).unwrap();
                bootstrap_consistency_check(
                    &d,
                    mean_y,
                    |s| gen_aipw_iid(n, &truth, s).map_err(|e| e.to_string()),
                    ey,
                    200,
                    200,
                    seed.child(1),
                )
                .unwrap()
            })
            .collect();
        mean(&ds)
    };
    let (small, large) = (avg(20), avg(2000));
    assert!(large < small, "{large} vs {small}");
}

#[test]
fn cn_tracker_groups_by_n() {
    let recs = [(1000, 0.3), (500, 0.2), (500, 0.4), (1000, 0.5)];
    let s = cn_tracker(&recs);
    assert_eq!(s.iter().map(|c| c.n).collect::<Vec<_>>(), vec![500, 1000]);
    assert!((s[0].mean - 0.3).abs() < 1e-15 && (s[1].mean - 0.4).abs() < 1e-15);
    assert!((s[0].variance - 0.02).abs() < 1e-15);
    assert_eq!(s[1].count, 2);
}

#[test]
fn batched_se_of_iid_normals() {
    // SE of the sample variance of n standard normals is √(2/(n−1)).
    let xs = normals(40_000, 1.0, 9);
    let se = batched_variance_se(&xs, MC_BATCHES);
    let target = (2.0f64 / 39_999.0).sqrt();
    assert!((se / target - 1.0).abs() < 0.5, "{se} vs {target}");
}

proptest! {
    #[test]
    fn mallows_is_symmetric(a in prop::collection::vec(-50.0f64..50.0, 1..80), b in prop::collection::vec(-50.0f64..50.0, 1..80)) {
        prop_assert!((mallows2_1d(&a, &b) - mallows2_1d(&b, &a)).abs() <= 1e-12);
    }

    #[test]
    fn mallows_zero_on_permutations(mut a in prop::collection::vec(-50.0f64..50.0, 1..80)) {
        let orig = a.clone();
        a.reverse();
        prop_assert_eq!(mallows2_1d(&orig, &a), 0.0);
    }

    #[test]
    fn mallows_positive_when_laws_differ(a in prop::collection::vec(-50.0f64..50.0, 2..80), c in 0.01f64..5.0) {
        let b: Vec<f64> = a.iter().map(|x| x * (1.0 + c) + c).collect();
        prop_assert!(mallows2_1d(&a, &b) > 0.0);
    }

    #[test]
    fn mallows_triangle(
        n in 1usize..60,
        seeds in any::<[u64; 3]>(),
    ) {
        // Equal sizes so all three distances share one grid.
        let a = normals(n, 1.0, seeds[0]);
        let b = normals(n, 2.0, seeds[1]);
        let c: Vec<f64> = normals(n, 0.5, seeds[2]).iter().map(|x| x + 1.0).collect();
        prop_assert!(mallows2_1d(&a, &c) <= mallows2_1d(&a, &b) + mallows2_1d(&b, &c) + 1e-9);
    }
}
