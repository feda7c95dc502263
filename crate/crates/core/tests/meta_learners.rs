use std::sync::Arc;

use proptest::prelude::*;
use tvmeta::codec::{EncodingScheme, FeatureCodec};
use tvmeta::dgp::{make_d1, make_d2, simulate_panel, Dgp, OracleOptions};
use tvmeta::harness::experiment::evaluation_histories;
use tvmeta::harness::verify::pooled_pseudo_mean;
use tvmeta::learners::RegressorSpec;
use tvmeta::meta::{
    fit_meta, ivw_realized, ivw_target, predict_cate, pseudo_dr, pseudo_ipw, pseudo_ra,
    pseudo_table, stabilized_weights, CateModel, Estimand, LearnerKind, MetaSpec, RowInputs,
    WeightsMode,
};
use tvmeta::nuisance::{split_ids, NuisanceSet, PropensitySource};
use tvmeta::panel::InterventionPair;
use tvmeta::Error;

fn oracle_set(dgp: Arc<dyn Dgp>, pair: InterventionPair, n: usize) -> NuisanceSet {
    let codec = FeatureCodec::new(dgp.horizon(), EncodingScheme::Windowed(1), true, 1, 2).unwrap();
    let split = split_ids(n, pair.tau(), false, 0).unwrap();
    NuisanceSet::oracle(dgp, codec, pair, 0.01, OracleOptions::new(500, 9))
        .unwrap()
        .with_split(split)
}

fn quick_spec() -> MetaSpec {
    MetaSpec {
        second_stage: RegressorSpec::ridge(64, 2.0, 1e-2),
        variance: RegressorSpec::ridge(64, 2.0, 1e-2),
        ..MetaSpec::default()
    }
}

fn row(
    treatments: Vec<usize>,
    props: Vec<f64>,
    y: f64,
    mu_a: Vec<f64>,
    mu_b: Vec<f64>,
) -> RowInputs {
    let n = treatments.len();
    RowInputs {
        treatments,
        outcome: y,
        outcome_now: y,
        propensities: props.clone(),
        mu_a,
        mu_b,
        pi_a: props.clone(),
        pi_b: props,
        evaluated: n,
        clipped: 0,
    }
}

proptest! {
    #[test]
    fn dr_with_zero_responses_is_ipw(
        treatments in prop::collection::vec(0usize..2, 1..4),
        props in prop::collection::vec(0.05f64..0.95, 3),
        y in -5.0f64..5.0,
    ) {
        let tau = treatments.len() - 1;
        let pair = InterventionPair::benchmark(tau);
        let r = row(treatments, props[..=tau].to_vec(), y, vec![0.0; tau + 1], vec![0.0; tau + 1]);
        let (dr, ipw) = (pseudo_dr(&r, &pair), pseudo_ipw(&r, &pair));
        prop_assert!((dr.2 - ipw.2).abs() < 1e-9 * (1.0 + ipw.2.abs()));
        prop_assert!((dr.0 - ipw.0).abs() < 1e-9 * (1.0 + ipw.0.abs()));
    }

    #[test]
    fn stabilized_weights_average_one(v in prop::collection::vec(0.1f64..100.0, 1..200)) {
        let w = stabilized_weights(&v).unwrap();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        prop_assert!((mean - 1.0).abs() < 1e-12);
        // larger variance, smaller weight
        for i in 1..v.len() {
            if v[i] > v[i - 1] {
                prop_assert!(w[i] < w[i - 1]);
            }
        }
    }

    #[test]
    fn identical_arms_give_zero_effect(
        treatments in prop::collection::vec(0usize..2, 2),
        props in prop::collection::vec(0.05f64..0.95, 2),
        mu in prop::collection::vec(-3.0f64..3.0, 2),
        y in -5.0f64..5.0,
    ) {
        let pair = InterventionPair::new(vec![0, 1], vec![0, 1]).unwrap();
        let r = row(treatments, props, y, mu.clone(), mu);
        prop_assert_eq!(pseudo_dr(&r, &pair).2, 0.0);
        prop_assert_eq!(pseudo_ipw(&r, &pair).2, 0.0);
    }
}

#[test]
fn balanced_static_design_has_constant_variance() {
    // pi = 0.5 everywhere: V^a + V^b = 1/0.25 whichever arm was taken
    let pair = InterventionPair::benchmark(0);
    for a in 0..2 {
        let r = row(vec![a], vec![0.5], 1.0, vec![0.0], vec![0.0]);
        assert_eq!(ivw_realized(&r, &pair).1, 4.0);
        assert_eq!(ivw_target(&r, &pair).1, 4.0);
    }
}

#[test]
fn ra_rejects_coinciding_first_arms() {
    let pair = InterventionPair::new(vec![1, 0], vec![1, 1]).unwrap();
    let r = row(vec![1, 0], vec![0.5, 0.5], 1.0, vec![0.0; 2], vec![0.0; 2]);
    assert!(matches!(pseudo_ra(&r, &pair), Err(Error::ArmsCoincide)));
}

#[test]
fn ra_is_cate_only() {
    let dgp: Arc<dyn Dgp> = Arc::new(make_d2());
    let panel = simulate_panel(dgp.as_ref(), 50, 1).unwrap();
    let set = oracle_set(dgp, InterventionPair::benchmark(1), 50);
    let spec = MetaSpec {
        estimand: Estimand::Capo,
        ..quick_spec()
    };
    assert!(fit_meta(LearnerKind::Ra, &panel, &set, &spec).is_err());
    assert!(fit_meta(LearnerKind::Dr, &panel, &set, &spec).is_ok());
}

#[test]
fn plug_in_regression_adjustment_with_oracles_is_exact() {
    let dgp: Arc<dyn Dgp> = Arc::new(make_d1());
    for tau in 0..=2 {
        let panel = simulate_panel(dgp.as_ref(), 100, 3).unwrap();
        let set = oracle_set(dgp.clone(), InterventionPair::benchmark(tau), 100);
        let model = fit_meta(LearnerKind::PiRa, &panel, &set, &quick_spec()).unwrap();
        let hs = evaluation_histories(&panel, tau, None);
        for p in predict_cate(&model, &hs).unwrap() {
            assert!((p - 0.5).abs() < 1e-9, "tau {tau}: {p}");
        }
    }
}

#[test]
fn ra_pseudo_outcome_is_unbiased_on_d1() {
    let dgp: Arc<dyn Dgp> = Arc::new(make_d1());
    let panel = simulate_panel(dgp.as_ref(), 20_000, 5).unwrap();
    let set = oracle_set(dgp, InterventionPair::benchmark(1), 20_000);
    let (mean, se) = pooled_pseudo_mean(LearnerKind::Ra, Estimand::Cate, &panel, &set).unwrap();
    assert!((mean - 0.5).abs() <= 3.0 * se, "mean {mean}, se {se}");
}

#[test]
fn dr_survives_a_wrong_propensity() {
    let dgp: Arc<dyn Dgp> = Arc::new(make_d2());
    let panel = simulate_panel(dgp.as_ref(), 20_000, 6).unwrap();
    let set = oracle_set(dgp, InterventionPair::benchmark(1), 20_000)
        .with_propensity(PropensitySource::Constant { value: 0.5 });
    let (dr, se) = pooled_pseudo_mean(LearnerKind::Dr, Estimand::Cate, &panel, &set).unwrap();
    assert!((dr - 0.5).abs() <= 3.0 * se, "dr {dr}, se {se}");
}

#[test]
fn ivw_weights_are_stabilized_in_both_modes() {
    let dgp: Arc<dyn Dgp> = Arc::new(make_d2());
    let panel = simulate_panel(dgp.as_ref(), 400, 8).unwrap();
    let set = oracle_set(dgp, InterventionPair::benchmark(1), 400);
    for weights_mode in [WeightsMode::Regression, WeightsMode::Realized] {
        let spec = MetaSpec {
            weights_mode,
            ..quick_spec()
        };
        let model = fit_meta(LearnerKind::IvwDr, &panel, &set, &spec).unwrap();
        let d = &model.diagnostics;
        assert!(
            (d.weight_mean - 1.0).abs() < 1e-9,
            "{weights_mode:?}: {}",
            d.weight_mean
        );
        assert!(d.weight_min > 0.0);
        assert_eq!(
            model.v_model.is_some(),
            weights_mode == WeightsMode::Regression
        );
    }
}

#[test]
fn pseudo_table_rows_match_anchor_count() {
    let dgp: Arc<dyn Dgp> = Arc::new(make_d2());
    let panel = simulate_panel(dgp.as_ref(), 30, 4).unwrap();
    let set = oracle_set(dgp, InterventionPair::benchmark(2), 30);
    let ids: Vec<usize> = (0..30).collect();
    let table = pseudo_table(LearnerKind::IvwDr, Estimand::Cate, &panel, &set, &ids).unwrap();
    assert_eq!(table.rows.len(), 30 * 3);
    assert_eq!(table.v.len(), 30 * 3);
    assert!(table.v.iter().all(|v| *v > 0.0));
    assert_eq!(table.clip_fraction(), 0.0);
}

#[test]
fn fitting_is_deterministic_and_bundles_round_trip() {
    let dgp: Arc<dyn Dgp> = Arc::new(make_d2());
    let panel = simulate_panel(dgp.as_ref(), 300, 2).unwrap();
    let test = simulate_panel(dgp.as_ref(), 20, 12).unwrap();
    let hs = evaluation_histories(&test, 1, None);
    for kind in [LearnerKind::Dr, LearnerKind::IvwDr, LearnerKind::PiRa] {
        let set = oracle_set(dgp.clone(), InterventionPair::benchmark(1), 300);
        let fit = || {
            let mut buf = Vec::new();
            fit_meta(kind, &panel, &set, &quick_spec())
                .unwrap()
                .export(&mut buf)
                .unwrap();
            buf
        };
        let bytes = fit();
        assert_eq!(bytes, fit(), "{kind}");
        let model = CateModel::import(bytes.as_slice()).unwrap();
        let again = fit_meta(kind, &panel, &set, &quick_spec()).unwrap();
        assert_eq!(
            predict_cate(&model, &hs).unwrap(),
            predict_cate(&again, &hs).unwrap()
        );
    }
}
