use std::collections::BTreeSet;

use mactn::data::{synth_generate, SegmentSet, SynthProfile};
use mactn::preprocess::{preprocess_pipeline, PipelineConfig};
use mactn::train::{
    evaluate, fold_jobs, make_splits, metrics_from_predictions, train, wilcoxon_signed_rank, EarlyStopping,
    MetricsReport, PlateauScheduler, SplitParams, SplitScheme, StopDecision, TrainConfig,
};
use mactn::{Error, Mactn, ModelConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("x{i:03}")).collect()
}

fn scheme_strategy() -> impl Strategy<Value = SplitScheme> {
    prop_oneof![
        Just(SplitScheme::Csv10),
        Just(SplitScheme::Loso),
        Just(SplitScheme::Loto),
        Just(SplitScheme::Ctv10),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_id_is_tested_once_and_folds_are_disjoint(
        scheme in scheme_strategy(),
        n in 10usize..100,
        seed in 0u64..10_000,
        val in prop::option::of(0.0f64..0.5),
    ) {
        let all = ids(n);
        let params = SplitParams { val_fraction: val, ..SplitParams::default() };
        let plan = make_splits(scheme, &all, seed, &params).unwrap();
        let expected_folds = match scheme {
            SplitScheme::Csv10 | SplitScheme::Ctv10 => 10,
            _ => n,
        };
        prop_assert_eq!(plan.folds.len(), expected_folds);
        let mut tested = BTreeSet::new();
        for f in &plan.folds {
            let (tr, va, te): (BTreeSet<_>, BTreeSet<_>, BTreeSet<_>) =
                (f.train.iter().collect(), f.val.iter().collect(), f.test.iter().collect());
            prop_assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
            prop_assert_eq!(tr.len() + va.len() + te.len(), n);
            let frac = params.val_fraction_for(scheme);
            prop_assert_eq!(va.len(), (frac * (n - te.len()) as f64).round() as usize);
            if matches!(scheme, SplitScheme::Csv10 | SplitScheme::Ctv10) {
                prop_assert!(te.len() == n / 10 || te.len() == n / 10 + 1);
            }
            for t in te {
                prop_assert!(tested.insert(t.clone()));
            }
        }
        prop_assert_eq!(tested.len(), n);
        prop_assert_eq!(make_splits(scheme, &all, seed, &params).unwrap(), plan);
    }
}

#[test]
fn split_errors() {
    let p = SplitParams::default();
    assert!(matches!(make_splits(SplitScheme::Csv10, &ids(9), 0, &p), Err(Error::SplitTooSmall { .. })));
    assert!(matches!(make_splits(SplitScheme::Loso, &ids(1), 0, &p), Err(Error::SplitTooSmall { .. })));
    let mut dup = ids(12);
    dup[3] = dup[4].clone();
    assert!(matches!(make_splits(SplitScheme::Loso, &dup, 0, &p), Err(Error::Contract(_))));
    let bad = SplitParams {
        val_fraction: Some(1.0),
        ..p
    };
    assert!(matches!(make_splits(SplitScheme::Loso, &ids(12), 0, &bad), Err(Error::Config(_))));
}

fn tiny_set(subjects: usize, trials_per_class: usize, seed: u64) -> SegmentSet {
    let mut p = SynthProfile::three_class(subjects);
    p.n_trials_per_class = trials_per_class;
    p.trial_len_s = 8.0;
    preprocess_pipeline(&synth_generate(&p, seed).unwrap(), &PipelineConfig::custom(2.0, 2.0)).unwrap()
}

#[test]
fn fold_jobs_never_share_segments() {
    let data = tiny_set(3, 4, 1);
    for scheme in [SplitScheme::Loso, SplitScheme::Loto, SplitScheme::Ctv10] {
        let params = SplitParams {
            n_folds: 4,
            ..SplitParams::default()
        };
        let (plans, jobs) = fold_jobs(&data, scheme, 5, &params).unwrap();
        assert!(!jobs.is_empty());
        let mut tested = BTreeSet::new();
        for j in &jobs {
            let (tr, va, te): (BTreeSet<_>, BTreeSet<_>, BTreeSet<_>) =
                (j.train.iter().collect(), j.val.iter().collect(), j.test.iter().collect());
            assert!(tr.is_disjoint(&te) && va.is_disjoint(&te) && tr.is_disjoint(&va), "{}", j.name);
            // segments of one trial never straddle train and test
            let test_trials: BTreeSet<_> =
                j.test.iter().map(|&i| (&data.segments[i].subject_id, data.segments[i].trial_id)).collect();
            assert!(j.train.iter().all(|&i| !test_trials.contains(&(&data.segments[i].subject_id, data.segments[i].trial_id))));
            tested.extend(j.test.iter().copied());
        }
        assert_eq!(tested.len(), data.len(), "{scheme}");
        match scheme {
            SplitScheme::Loso => assert_eq!((plans.len(), jobs.len()), (1, 3)),
            SplitScheme::Loto => {
                assert_eq!((plans.len(), jobs.len()), (3, 36));
                assert!(jobs.iter().all(|j| j.val.is_empty()));
            }
            _ => {
                assert_eq!((plans.len(), jobs.len()), (3, 12));
                // validation comes from the training trials' segments
                for j in &jobs {
                    let total = j.train.len() + j.val.len();
                    assert_eq!(j.val.len(), (0.2 * total as f64).round() as usize, "{}", j.name);
                }
            }
        }
    }
}

#[test]
fn model_overfits_a_small_training_set() {
    let data = tiny_set(1, 2, 3);
    let [m, t] = data.segment_shape().unwrap();
    let mut cfg = ModelConfig::miniature(m, t, 3);
    cfg.dropout_p = 0.0;
    let model = Mactn::new(cfg, 1).unwrap();
    let idx: Vec<usize> = (0..data.len()).collect();
    let tc = TrainConfig {
        lr: 3e-3,
        max_epochs: 40,
        batch_size: 8,
        flooding_b: 0.0,
        early_stop_patience: 40,
        ..TrainConfig::default()
    };
    let out = train(&model, &data, &idx, &[], &tc).unwrap();
    let (metrics, _) = evaluate(&out.model, &data, &idx).unwrap();
    assert!(metrics.accuracy >= 0.99, "train accuracy {}", metrics.accuracy);
    let first = out.history.first().unwrap().train_ce;
    let best = out.history.iter().map(|h| h.train_ce).fold(f64::INFINITY, f64::min);
    assert!(best < 0.2 * first, "{first} -> {best}");
}

#[test]
fn training_is_deterministic() {
    let data = tiny_set(2, 1, 4);
    let [m, t] = data.segment_shape().unwrap();
    let model = Mactn::new(ModelConfig::miniature(m, t, 3), 2).unwrap();
    let idx: Vec<usize> = (0..data.len()).collect();
    let (tr, va) = idx.split_at(data.len() - 4);
    let tc = TrainConfig {
        max_epochs: 3,
        seed: 77,
        ..TrainConfig::default()
    };
    let a = train(&model, &data, tr, va, &tc).unwrap();
    let b = train(&model, &data, tr, va, &tc).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.history, b.history);
    assert_eq!(a.optimizer, b.optimizer);
    assert!(a.history.iter().all(|h| h.val_loss.is_some()));
    let c = train(&model, &data, tr, va, &TrainConfig { seed: 78, ..tc }).unwrap();
    assert_ne!(a.model, c.model);
}

#[test]
fn max_steps_caps_training() {
    let data = tiny_set(1, 1, 6);
    let [m, t] = data.segment_shape().unwrap();
    let model = Mactn::new(ModelConfig::miniature(m, t, 3), 2).unwrap();
    let idx: Vec<usize> = (0..data.len()).collect();
    let tc = TrainConfig {
        max_steps: Some(2),
        batch_size: 4,
        ..TrainConfig::default()
    };
    let out = train(&model, &data, &idx, &[], &tc).unwrap();
    assert_eq!(out.steps.len(), 2);
    assert_eq!(out.optimizer.step, 2);
}

#[test]
fn schedulers_follow_their_patience() {
    let mut p = PlateauScheduler::new(1.0, 0.1, 2, 1e-4);
    let lrs: Vec<f64> = [1.0, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9].iter().map(|&l| p.step(l)).collect();
    assert_eq!(lrs[..3], [1.0, 1.0, 1.0]);
    assert!((lrs[3] - 0.1).abs() < 1e-15);
    assert!((lrs[6] - 0.01).abs() < 1e-15);

    let mut e = EarlyStopping::new(2, 1e-4);
    assert_eq!(e.check(1.0), StopDecision::Continue { improved: true });
    assert_eq!(e.check(0.99995), StopDecision::Continue { improved: false });
    assert_eq!(e.check(1.2), StopDecision::Stop);
    assert_eq!(e.best(), Some(1.0));
}

#[test]
fn metrics_report_aggregates_folds() {
    let a = metrics_from_predictions(&[0, 1, 1, 2], &[0, 1, 2, 2], 3).unwrap();
    assert!((a.accuracy - 0.75).abs() < 1e-15);
    // per-class F1: 1, 2/3, 2/3
    assert!((a.f1 - (1.0 + 2.0 / 3.0 + 2.0 / 3.0) / 3.0).abs() < 1e-12);
    assert_eq!(a.confusion[2], vec![0, 1, 1]);
    let b = metrics_from_predictions(&[0, 0], &[0, 0], 3).unwrap();
    let r = MetricsReport::new(vec!["f1".into(), "f2".into()], vec![a, b]).unwrap();
    assert!((r.mean_accuracy - 0.875).abs() < 1e-12);
    // sample standard deviation of (0.75, 1.0)
    assert!((r.std_accuracy - 0.125 * 2f64.sqrt()).abs() < 1e-12);
    assert!(r.to_table().contains("87.5 ± 17.7"));
}

/// Two-sided p-value by enumerating all sign assignments.
fn brute_force_p(d: &[f64]) -> f64 {
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let rank = |i: usize| {
        let below = abs.iter().filter(|&&a| a < abs[i]).count() as f64;
        let equal = abs.iter().filter(|&&a| a == abs[i]).count() as f64;
        below + (equal + 1.0) / 2.0
    };
    let r: Vec<f64> = (0..d.len()).map(rank).collect();
    let total: f64 = r.iter().sum();
    let w_plus: f64 = (0..d.len()).filter(|&i| d[i] > 0.0).map(|i| r[i]).sum();
    let observed = (w_plus - total / 2.0).abs();
    let n = d.len();
    let mut extreme = 0u64;
    for mask in 0u64..(1 << n) {
        let w: f64 = (0..n).filter(|&i| mask >> i & 1 == 1).map(|i| r[i]).sum();
        if (w - total / 2.0).abs() >= observed - 1e-9 {
            extreme += 1;
        }
    }
    (extreme as f64 / (1u64 << n) as f64).min(1.0)
}

#[test]
fn wilcoxon_exact_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..40 {
        let n = rng.gen_range(5..15);
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        // coarse rounding plants ties
        let b: Vec<f64> = a.iter().map(|x| x + (rng.gen_range(-4.0f64..5.0)).round() / 10.0).collect();
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| y - x).filter(|v| *v != 0.0).collect();
        if d.len() < 5 {
            continue;
        }
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert!(r.exact);
        let want = brute_force_p(&d);
        assert!((r.p_two_sided - want).abs() < 1e-12, "case {case}: {} vs {want}", r.p_two_sided);
    }
}

#[test]
fn wilcoxon_null_is_calibrated() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in [12usize, 40] {
        let trials = 2000;
        let mut rejections = 0;
        for _ in 0..trials {
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            if wilcoxon_signed_rank(&a, &b).unwrap().p_two_sided < 0.05 {
                rejections += 1;
            }
        }
        let rate = rejections as f64 / trials as f64;
        // the exact test is conservative at small n
        assert!((0.025..0.07).contains(&rate), "n={n}: rejection rate {rate}");
    }
}

#[test]
fn wilcoxon_large_sample_uses_normal_approximation() {
    let a: Vec<f64> = (0..30).map(|i| i as f64).collect();
    let b: Vec<f64> = a.iter().enumerate().map(|(i, x)| x + if i % 3 == 0 { -1.0 } else { 2.0 }).collect();
    let r = wilcoxon_signed_rank(&a, &b).unwrap();
    assert!(!r.exact);
    assert_eq!(r.n, 30);
    assert!(r.p_two_sided > 0.0 && r.p_two_sided < 0.05);
}
