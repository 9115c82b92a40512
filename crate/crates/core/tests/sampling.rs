use std::collections::HashSet;
use std::time::Instant;

use proptest::prelude::*;
use sinuscl::data::{AugmentationPolicy, SinusSample, Side, AnomalyKind, Volume};
use sinuscl::sampling::*;

fn items(normal: usize, anomaly: usize) -> Vec<LabeledId> {
    (0..normal + anomaly)
        .map(|i| {
            let pid = format!("p{:04}", i / 2);
            let side = if i % 2 == 0 { "left" } else { "right" };
            LabeledId::new(format!("{pid}_{side}"), usize::from(i >= normal), pid)
        })
        .collect()
}

fn label_of<'a>(all: &'a [LabeledId]) -> impl Fn(&str) -> usize + 'a {
    move |id| all.iter().find(|i| i.id == id).unwrap().label
}

fn class_counts(ids: &[String], label: &impl Fn(&str) -> usize) -> [usize; 2] {
    let mut c = [0; 2];
    for id in ids {
        c[label(id)] += 1;
    }
    c
}

fn deviation(ids: &[String], pool: &[String], label: &impl Fn(&str) -> usize) -> f64 {
    let c = class_counts(ids, label);
    let p = class_counts(pool, label);
    let share = p[0] as f64 / (p[0] + p[1]) as f64;
    (c[0] as f64 - share * ids.len() as f64).abs()
}

/// Every split is within one sample per class of the set it was cut from,
/// outer test folds are within one sample of the cohort ratio, and no split
/// drifts more than two samples from the cohort ratio.
fn assert_stratified(plan: &FoldPlan, all: &[LabeledId], global_tol: f64) {
    let label = label_of(all);
    let cohort: Vec<String> = all.iter().map(|i| i.id.clone()).collect();
    let tol = 1.0 + 1e-9;
    for fold in &plan.outer {
        assert!(deviation(&fold.test, &cohort, &label) <= tol);
        let pool = fold.train_pool();
        for split in &fold.inner {
            for ids in [&split.train, &split.val] {
                assert!(deviation(ids, &pool, &label) <= tol);
                let d = deviation(ids, &cohort, &label);
                assert!(d <= global_tol + 1e-9, "{d} from cohort ratio");
            }
        }
    }
}

fn assert_no_leakage(plan: &FoldPlan, all: &[LabeledId]) {
    let everything: HashSet<&str> = all.iter().map(|i| i.id.as_str()).collect();
    let mut union = HashSet::new();
    for fold in &plan.outer {
        for id in &fold.test {
            assert!(union.insert(id.as_str()), "{id} in two test folds");
        }
        let test: HashSet<&str> = fold.test.iter().map(String::as_str).collect();
        for split in &fold.inner {
            let train: HashSet<&str> = split.train.iter().map(String::as_str).collect();
            let val: HashSet<&str> = split.val.iter().map(String::as_str).collect();
            assert!(train.is_disjoint(&val));
            assert!(train.is_disjoint(&test));
            assert!(val.is_disjoint(&test));
            assert_eq!(train.len() + val.len() + test.len(), all.len());
        }
    }
    assert_eq!(union, everything);
}

#[test]
fn reference_cohort_gives_eighty_per_test_fold() {
    let all = items(269, 130);
    let start = Instant::now();
    let plan = plan_nested_kfold(&all, &KFoldConfig::default(), 7).unwrap();
    assert!(start.elapsed().as_secs_f64() < 1.0);
    let label = label_of(&all);
    let mut sizes: Vec<usize> = plan.outer.iter().map(|f| f.test.len()).collect();
    sizes.sort_unstable();
    assert_eq!(sizes, vec![79, 80, 80, 80, 80]);
    for fold in &plan.outer {
        let c = class_counts(&fold.test, &label);
        assert!((53..=54).contains(&c[0]), "{c:?}");
        assert_eq!(c[1], 26);
        for split in &fold.inner {
            assert!((63..=64).contains(&split.val.len()));
            assert!((255..=256).contains(&split.train.len()));
        }
        assert_eq!(fold.train_pool().len(), 399 - fold.test.len());
    }
    assert_stratified(&plan, &all, 1.0);
    assert_no_leakage(&plan, &all);
}

#[test]
fn plans_are_deterministic_per_seed() {
    let all = items(40, 30);
    let a = plan_nested_kfold(&all, &KFoldConfig::default(), 1).unwrap();
    assert_eq!(a, plan_nested_kfold(&all, &KFoldConfig::default(), 1).unwrap());
    assert_ne!(a, plan_nested_kfold(&all, &KFoldConfig::default(), 2).unwrap());
}

#[test]
fn plan_csv_round_trips() {
    let all = items(30, 20);
    let plan = plan_nested_kfold(&all, &KFoldConfig::default(), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("folds.csv");
    plan.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("outer_fold,inner_fold,role,sample_id\n"));
    assert!(text.contains(",,test,"));
    assert_eq!(FoldPlan::read_csv(&path).unwrap(), plan);
}

#[test]
fn grouping_keeps_patients_together() {
    let all = items(60, 40);
    let config = KFoldConfig {
        group_by_patient: true,
        ..KFoldConfig::default()
    };
    let plan = plan_nested_kfold(&all, &config, 5).unwrap();
    assert_no_leakage(&plan, &all);
    for fold in &plan.outer {
        let patients: HashSet<&str> = fold.test.iter().map(|id| &id[..5]).collect();
        for split in &fold.inner {
            for id in split.train.iter().chain(&split.val) {
                assert!(!patients.contains(&id[..5]), "{id} shares a patient with the test fold");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn plans_partition_and_stratify(normal in 10usize..80, anomaly in 10usize..80, seed in any::<u64>()) {
        let all = items(normal, anomaly);
        let plan = plan_nested_kfold(&all, &KFoldConfig::default(), seed).unwrap();
        assert_stratified(&plan, &all, 2.0);
        assert_no_leakage(&plan, &all);
    }

    #[test]
    fn batches_are_balanced(normal in 1usize..90, anomaly in 1usize..90, half in 1usize..20, seed in any::<u64>(), epoch in 0u64..5) {
        let labels: Vec<usize> = (0..normal + anomaly).map(|i| usize::from(i >= normal)).collect();
        let spec = BatchSpec { batch_size: 2 * half, two_view: false };
        let batches = make_balanced_batches(&labels, &spec, seed, epoch).unwrap();
        prop_assert_eq!(batches.len(), normal.max(anomaly).div_ceil(half));
        for b in &batches {
            prop_assert_eq!(b.iter().filter(|&&i| labels[i] == 1).count(), half);
            prop_assert_eq!(b.len(), 2 * half);
        }
        // every sample is drawn at least once per epoch
        let seen: HashSet<usize> = batches.iter().flatten().copied().collect();
        prop_assert_eq!(seen.len(), labels.len());
        prop_assert_eq!(&batches, &make_balanced_batches(&labels, &spec, seed, epoch).unwrap());
    }

    #[test]
    fn subsets_nest_and_hit_rounded_counts(normal in 1usize..120, anomaly in 1usize..120, seed in any::<u64>()) {
        let labels: Vec<usize> = (0..normal + anomaly).map(|i| usize::from(i >= normal)).collect();
        let s6 = subsample_training(&labels, 0.6, seed).unwrap();
        let s8 = subsample_training(&labels, 0.8, seed).unwrap();
        let s6_set: HashSet<usize> = s6.iter().copied().collect();
        let s8_set: HashSet<usize> = s8.iter().copied().collect();
        prop_assert!(s6_set.is_subset(&s8_set));
        let count = |s: &[usize], c: usize| s.iter().filter(|&&i| labels[i] == c).count();
        prop_assert_eq!(count(&s6, 0), (0.6 * normal as f64).round() as usize);
        prop_assert_eq!(count(&s8, 1), (0.8 * anomaly as f64).round() as usize);
    }
}

#[test]
fn epochs_shuffle_differently() {
    let labels: Vec<usize> = (0..100).map(|i| i % 2).collect();
    let spec = BatchSpec {
        batch_size: 10,
        two_view: false,
    };
    assert_ne!(
        make_balanced_batches(&labels, &spec, 1, 0).unwrap(),
        make_balanced_batches(&labels, &spec, 1, 1).unwrap()
    );
}

#[test]
fn subsample_examples() {
    let labels: Vec<usize> = (0..150).map(|i| usize::from(i >= 100)).collect();
    assert_eq!(subsample_training(&labels, 1.0, 4).unwrap(), (0..150).collect::<Vec<_>>());
    let s = subsample_training(&labels, 0.6, 4).unwrap();
    assert_eq!(s.iter().filter(|&&i| i < 100).count(), 60);
    assert_eq!(s.iter().filter(|&&i| i >= 100).count(), 30);
    assert!(subsample_training(&labels, 1.2, 4).is_err());
}

fn sample(i: usize, label: usize) -> SinusSample {
    let vox = (0..32 * 32 * 32).map(|v| (((v * 7 + i * 13) % 200) as f32 / 100.0) - 1.0).collect();
    let kind = if label == 1 { AnomalyKind::Polyp } else { AnomalyKind::None };
    SinusSample::new(Volume::new([32; 3], [1.0; 3], vox).unwrap(), format!("p{i:04}"), Side::Left, kind).unwrap()
}

#[test]
fn two_view_batches_pair_views_of_one_source() {
    let samples: Vec<SinusSample> = (0..4).map(|i| sample(i, i % 2)).collect();
    let refs: Vec<&SinusSample> = samples.iter().collect();
    let vb = make_two_view_batch(&refs, &AugmentationPolicy::default(), 8).unwrap();
    assert_eq!(vb.views.len(), 8);
    assert_eq!(vb.index.class_count(0), 4);
    assert_eq!(vb.index.class_count(1), 4);
    let pairs = vb.index.pairs().unwrap();
    for i in 0..8 {
        assert_ne!(pairs[i], i);
        assert_eq!(pairs[pairs[i]], i);
        assert_eq!(vb.source[i], vb.source[pairs[i]]);
        assert_eq!(vb.index.labels()[i], samples[vb.source[i]].label);
    }
}

#[test]
fn twin_views_differ_under_default_policy() {
    let samples = [sample(0, 0)];
    let refs: Vec<&SinusSample> = samples.iter().collect();
    let mut total = 0.0;
    for draw in 0..50 {
        let vb = make_two_view_batch(&refs, &AugmentationPolicy::default(), draw).unwrap();
        let diff: f64 = vb.views[0]
            .voxels()
            .iter()
            .zip(vb.views[1].voxels())
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        total += diff / vb.views[0].len() as f64;
    }
    assert!(total / 50.0 > 0.0);
}
