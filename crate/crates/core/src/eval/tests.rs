use super::*;
use crate::skeleton::NormStats;
use crate::testutil::{random_sequence, small_model};

fn cases(n: usize, seed: u64) -> Vec<EvalCase> {
    (0..n).map(|i| EvalCase::split(&random_sequence(7, 24, seed + i as u64), 4, 3).unwrap()).collect()
}

/// Cases sharing one observed prefix, each continuing with `future`.
fn shared_prefix(n: usize, future: &MotionSequence) -> Vec<EvalCase> {
    let observed = random_sequence(4, 24, 99);
    (0..n).map(|i| EvalCase { id: format!("c{i}"), observed: observed.clone(), future: future.clone() }).collect()
}

#[test]
fn split_and_pseudo_grouping() {
    let seq = random_sequence(10, 24, 1);
    let c = EvalCase::split(&seq, 4, 3).unwrap();
    assert_eq!((c.observed.len(), c.future.len()), (4, 3));
    assert_eq!(c.future.frame(0), seq.frame(4));
    assert!(EvalCase::split(&seq, 8, 3).is_err());

    let pool = cases(5, 10);
    // random frames in [-1, 1]^24 are far apart; each case only matches itself
    for c in &pool {
        let p = pseudo_futures(c, &pool, 0.5);
        assert_eq!(p, vec![&c.future]);
    }
    assert_eq!(pseudo_futures(&pool[0], &pool, 1e3).len(), 5);
}

#[test]
fn diverse_evaluation_is_deterministic_and_consistent() {
    let m = small_model(2);
    let cs = cases(3, 20);
    let cfg = RolloutConfig::new(3, 4, Strategy::Random, 7);
    let a = evaluate_diverse(&m, &cs, &cs, &cfg, 0.5).unwrap();
    let b = evaluate_diverse(&m, &cs, &cs, &cfg, 0.5).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.cases.len(), 3);
    for c in &a.cases {
        // each case is its own pseudo set here
        assert_eq!(c.pseudo_count, 1);
        assert_eq!((c.metrics.mmade, c.metrics.mmfde), (c.metrics.ade, c.metrics.fde));
    }
    let csv = a.to_csv();
    assert!(csv.starts_with("id,pseudo_count,apd,ade,fde,mmade,mmfde\n"));
    assert_eq!(csv.lines().count(), 4);
    let mean_ade = a.cases.iter().map(|c| c.metrics.ade).sum::<f64>() / 3.0;
    assert!((a.summary.ade - mean_ade).abs() < 1e-15);
}

#[test]
fn mirror_rank_examples() {
    assert_eq!(mirror_rank(0.5, 51), 0);
    assert_eq!(mirror_rank(0.25, 51), 25);
    assert_eq!(mirror_rank(0.45, 51), 5);
    assert_eq!(mirror_rank(0.01, 51), 49);
    assert_eq!(mirror_rank(0.3, 1), 0);
}

#[test]
fn degenerate_pseudo_distribution_reduces_to_plain_distance() {
    let m = small_model(3);
    let gt = random_sequence(3, 24, 5);
    let cs = shared_prefix(50, &gt);
    let cfg = CalibrationConfig { seed: 4, ..CalibrationConfig::default() };
    let report = empirical_quantile_eval(&m, &cs[..2], &cs, &cfg).unwrap();
    assert!(!report.insufficient_data);
    assert_eq!(report.evaluated, 2);
    for (i, case) in report.cases.iter().enumerate() {
        assert_eq!(case.pseudo_count, 50);
        for (j, &q) in cfg.quantiles.iter().enumerate() {
            let s = crate::dynamics::sample_quantile_sequence(&m, &cs[i].observed, q, 1.0, 3, case_seed(4, i)).unwrap();
            assert_eq!(case.ade[j], sequence_distance(&s.forecast.poses, &gt).unwrap());
        }
    }
    assert_eq!(report.to_csv().lines().count(), 1 + 2 * 4);
}

#[test]
fn too_few_pseudo_futures_is_reported_as_insufficient() {
    let m = small_model(3);
    let gt = random_sequence(3, 24, 5);
    let cs = shared_prefix(49, &gt);
    let report = empirical_quantile_eval(&m, &cs, &cs, &CalibrationConfig::default()).unwrap();
    assert!(report.insufficient_data);
    assert_eq!((report.evaluated, report.excluded), (0, 49));
    assert!(report.rows.is_empty());
}

#[test]
fn coverage_is_a_fraction() {
    let m = small_model(4);
    let cs = cases(4, 30);
    let c = latent_coverage(&m, &cs, 0.8).unwrap();
    assert!((0.0..=1.0).contains(&c));
    assert_eq!(latent_coverage(&m, &cs, 1.0).unwrap(), 1.0);
}

#[test]
fn efficiency_deltas_vanish_when_sizes_match() {
    let m = small_model(5);
    let cs = cases(2, 40);
    let cfg = EfficiencyConfig { s_small: 4, s_large: 4, seeds: vec![1, 2, 3], ..EfficiencyConfig::for_width(24) };
    let r = sampling_efficiency_report(&m, &cs, &cs, &cfg).unwrap();
    assert_eq!(r.rows[1].delta_pct, DiverseMetrics::default());
    assert_eq!(r.ade_degradation_random, 0.0);
    assert_eq!(r, sampling_efficiency_report(&m, &cs, &cs, &cfg).unwrap());
    assert!(r.table().contains("poisson-disk"));
    assert_eq!(r.to_csv().lines().count(), 1 + 3 * 3);
}

#[test]
fn deterministic_angle_error_uses_raw_units() {
    let m = small_model(6);
    let cs = cases(3, 50);
    let norm = NormStats { mean: vec![0.1; 24], std: vec![2.0; 24] };
    let r = evaluate_deterministic(&m, &norm, &cs, &[1, 3]).unwrap();
    assert_eq!(r.horizons_ms, vec![40.0, 120.0]);
    let f = crate::dynamics::rollout_mean(&m, &norm.normalize(&cs[0].observed), 3).unwrap();
    let raw = norm.denormalize(&f.poses);
    let want = mae_angle(&raw, &cs[0].future, ChannelSemantics::Expmap).unwrap();
    assert_eq!(r.cases[0].errors, vec![want[0], want[2]]);
    assert!(evaluate_deterministic(&m, &norm, &cs, &[4]).is_err());
    assert!(r.to_csv().starts_with("id,frame_1,frame_3\n"));
}
