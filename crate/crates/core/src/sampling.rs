//! Class-balanced batching, nested stratified k-fold planning and
//! label-efficiency subsets.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{augment_volume, AugmentationPolicy, SinusSample, Volume};
use crate::losses::ContrastiveBatchIndex;
use crate::seed;

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("class {class} has {count} samples, at least {needed} required")]
    ClassTooSmall { class: usize, count: usize, needed: usize },
    #[error("class {class} has no samples")]
    EmptyClass { class: usize },
    #[error("sample {index} has label {label}; labels must be 0 or 1")]
    Label { index: usize, label: usize },
    #[error("duplicate sample id {0}")]
    DuplicateId(String),
    #[error("batch size {0} must be even and at least 2")]
    BatchSize(usize),
    #[error("fraction {0} outside (0, 1]")]
    Fraction(f64),
    #[error("fold counts must lie in 2..=32 (outer {outer}, inner {inner})")]
    FoldCount { outer: usize, inner: usize },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

/// A sample id with its binary label and owning patient.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledId {
    pub id: String,
    pub label: usize,
    pub patient_id: String,
}

impl LabeledId {
    pub fn new(id: impl Into<String>, label: usize, patient_id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            label,
            patient_id: patient_id.into(),
        }
    }

    pub fn of(sample: &SinusSample) -> Self {
        Self::new(sample.id(), sample.label, sample.patient_id.clone())
    }
}

fn check_labels(labels: impl IntoIterator<Item = usize>) -> Result<[usize; 2], SamplingError> {
    let mut counts = [0usize; 2];
    for (index, label) in labels.into_iter().enumerate() {
        if label > 1 {
            return Err(SamplingError::Label { index, label });
        }
        counts[label] += 1;
    }
    Ok(counts)
}

fn check_unique(items: &[LabeledId]) -> Result<(), SamplingError> {
    let mut seen = HashSet::with_capacity(items.len());
    for item in items {
        if !seen.insert(item.id.as_str()) {
            return Err(SamplingError::DuplicateId(item.id.clone()));
        }
    }
    Ok(())
}

/// Candidate per-fold `[normal, anomaly]` counts for `k` folds: each class
/// spread as evenly as possible, over every choice of which folds take the
/// remainders.
fn count_candidates(n0: usize, n1: usize, k: usize) -> Vec<Vec<[usize; 2]>> {
    let (q0, e0, q1, e1) = (n0 / k, n0 % k, n1 / k, n1 % k);
    let counts = |m0: u64, m1: u64| -> Vec<[usize; 2]> {
        (0..k)
            .map(|j| [q0 + (m0 >> j & 1) as usize, q1 + (m1 >> j & 1) as usize])
            .collect()
    };
    if k > 10 {
        return vec![counts((1 << e0) - 1, ((1 << e1) - 1) << (k - e1))];
    }
    let masks = |e: usize| (0u64..1 << k).filter(move |m| m.count_ones() as usize == e);
    masks(e0).flat_map(|m0| masks(e1).map(move |m1| counts(m0, m1))).collect()
}

/// Largest distance, in samples, of any fold or its complement within the
/// set from the cohort normal fraction `ratio`.
fn deviation(c: &[[usize; 2]], ratio: f64) -> f64 {
    let n0: usize = c.iter().map(|f| f[0]).sum();
    let n: usize = c.iter().map(|f| f[0] + f[1]).sum();
    let set_dev = n0 as f64 - n as f64 * ratio;
    c.iter()
        .map(|&[a, b]| {
            let dev = a as f64 - (a + b) as f64 * ratio;
            dev.abs().max((set_dev - dev).abs())
        })
        .fold(0.0, f64::max)
}

fn spread(c: &[[usize; 2]]) -> usize {
    let sizes = || c.iter().map(|[a, b]| a + b);
    sizes().max().unwrap() - sizes().min().unwrap()
}

/// Anything within one sample of the target counts as stratified.
fn flatten(dev: f64) -> f64 {
    if dev <= 1.0 + 1e-9 {
        0.0
    } else {
        dev
    }
}

/// Counts minimising (deviation beyond one sample, fold-size spread).
fn fold_counts(n0: usize, n1: usize, k: usize, ratio: f64) -> (f64, Vec<[usize; 2]>) {
    count_candidates(n0, n1, k)
        .into_iter()
        .map(|c| (deviation(&c, ratio), c))
        .min_by(|(da, a), (db, b)| {
            (flatten(*da), spread(a))
                .partial_cmp(&(flatten(*db), spread(b)))
                .unwrap()
        })
        .expect("at least one candidate")
}

/// Outer counts chosen together with the inner splits of each remainder, so
/// that every test, validation and training set stays within one sample of
/// the cohort ratio whenever such a layout exists.
fn nested_counts(n0: usize, n1: usize, k_out: usize, k_in: usize, ratio: f64) -> Vec<[usize; 2]> {
    count_candidates(n0, n1, k_out)
        .into_iter()
        .map(|c| {
            let inner = c
                .iter()
                .map(|&[a, b]| fold_counts(n0 - a, n1 - b, k_in, ratio).0)
                .fold(0.0, f64::max);
            (flatten(deviation(&c, ratio).max(inner)), spread(&c), c)
        })
        .min_by(|a, b| (a.0, a.1).partial_cmp(&(b.0, b.1)).unwrap())
        .expect("at least one candidate")
        .2
}

/// Shuffles each class and deals members to folds in the given counts.
fn deal(labels: &[usize], counts: &[[usize; 2]], rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let members: Vec<Vec<usize>> = (0..2)
        .map(|class| {
            let mut m: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
            m.shuffle(rng);
            m
        })
        .collect();
    let mut next = [0usize; 2];
    counts
        .iter()
        .map(|c| {
            let mut fold = Vec::with_capacity(c[0] + c[1]);
            for class in 0..2 {
                fold.extend_from_slice(&members[class][next[class]..next[class] + c[class]]);
                next[class] += c[class];
            }
            fold.sort_unstable();
            fold
        })
        .collect()
}

fn class_totals(labels: &[usize]) -> (usize, usize) {
    let n1 = labels.iter().filter(|&&l| l == 1).count();
    (labels.len() - n1, n1)
}

fn stratified_folds(labels: &[usize], k: usize, ratio: f64, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let (n0, n1) = class_totals(labels);
    deal(labels, &fold_counts(n0, n1, k, ratio).1, rng)
}

fn normal_fraction(labels: impl Iterator<Item = usize>) -> f64 {
    let (mut n, mut normal) = (0usize, 0usize);
    for l in labels {
        n += 1;
        normal += usize::from(l == 0);
    }
    normal as f64 / n.max(1) as f64
}

/// Stratified partition of `items` into `k` disjoint folds of sample ids.
pub fn stratified_partition(items: &[LabeledId], k: usize, seed: u64) -> Result<Vec<Vec<String>>, SamplingError> {
    if !(2..=32).contains(&k) {
        return Err(SamplingError::FoldCount { outer: k, inner: k });
    }
    check_unique(items)?;
    let counts = check_labels(items.iter().map(|i| i.label))?;
    for (class, &count) in counts.iter().enumerate() {
        if count < k {
            return Err(SamplingError::ClassTooSmall { class, count, needed: k });
        }
    }
    let labels: Vec<usize> = items.iter().map(|i| i.label).collect();
    let ratio = normal_fraction(labels.iter().copied());
    let folds = stratified_folds(&labels, k, ratio, &mut seed::rng(seed));
    Ok(folds
        .into_iter()
        .map(|f| f.into_iter().map(|i| items[i].id.clone()).collect())
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KFoldConfig {
    pub outer: usize,
    pub inner: usize,
    /// Keep both sinuses of a patient in the same fold.
    pub group_by_patient: bool,
}

impl Default for KFoldConfig {
    fn default() -> Self {
        Self {
            outer: 5,
            inner: 5,
            group_by_patient: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InnerSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OuterFold {
    pub test: Vec<String>,
    pub inner: Vec<InnerSplit>,
}

impl OuterFold {
    /// Every id outside the test set (the union of any inner train and val).
    pub fn train_pool(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.inner[0].train.iter().chain(&self.inner[0].val).cloned().collect();
        ids.sort();
        ids
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub outer: Vec<OuterFold>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Val,
    Test,
}

#[derive(Debug, Serialize, Deserialize)]
struct PlanRow {
    outer_fold: usize,
    inner_fold: Option<usize>,
    role: Role,
    sample_id: String,
}

impl FoldPlan {
    /// Rows of `outer_fold,inner_fold,role,sample_id`; test rows leave
    /// `inner_fold` empty.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), SamplingError> {
        let path = path.as_ref();
        let io = |e: csv::Error| SamplingError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        for (o, fold) in self.outer.iter().enumerate() {
            for id in &fold.test {
                w.serialize(PlanRow {
                    outer_fold: o,
                    inner_fold: None,
                    role: Role::Test,
                    sample_id: id.clone(),
                })
                .map_err(io)?;
            }
            for (i, split) in fold.inner.iter().enumerate() {
                for (role, ids) in [(Role::Train, &split.train), (Role::Val, &split.val)] {
                    for id in ids {
                        w.serialize(PlanRow {
                            outer_fold: o,
                            inner_fold: Some(i),
                            role,
                            sample_id: id.clone(),
                        })
                        .map_err(io)?;
                    }
                }
            }
        }
        w.flush().map_err(|e| SamplingError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self, SamplingError> {
        let path = path.as_ref();
        let io = |message: String| SamplingError::Io {
            path: path.display().to_string(),
            message,
        };
        let mut r = csv::Reader::from_path(path).map_err(|e| io(e.to_string()))?;
        let mut outer: BTreeMap<usize, (Vec<String>, BTreeMap<usize, InnerSplit>)> = BTreeMap::new();
        for row in r.deserialize::<PlanRow>() {
            let row = row.map_err(|e| io(e.to_string()))?;
            let entry = outer.entry(row.outer_fold).or_default();
            match (row.role, row.inner_fold) {
                (Role::Test, None) => entry.0.push(row.sample_id),
                (Role::Train | Role::Val, Some(i)) => {
                    let split = entry.1.entry(i).or_insert_with(|| InnerSplit {
                        train: Vec::new(),
                        val: Vec::new(),
                    });
                    if row.role == Role::Train {
                        split.train.push(row.sample_id);
                    } else {
                        split.val.push(row.sample_id);
                    }
                }
                _ => return Err(io(format!("row for {} has inconsistent role and inner fold", row.sample_id))),
            }
        }
        Ok(Self {
            outer: outer
                .into_values()
                .map(|(test, inner)| OuterFold {
                    test,
                    inner: inner.into_values().collect(),
                })
                .collect(),
        })
    }
}

/// Positions grouped into folds, optionally keeping patients together.
/// With `nested_inner`, the split is planned jointly with that many inner
/// folds per remainder.
fn plan_level(
    items: &[LabeledId],
    positions: &[usize],
    k: usize,
    nested_inner: Option<usize>,
    group: bool,
    ratio: f64,
    rng: &mut impl Rng,
) -> Vec<Vec<usize>> {
    if !group {
        let labels: Vec<usize> = positions.iter().map(|&p| items[p].label).collect();
        let (n0, n1) = class_totals(&labels);
        let counts = match nested_inner {
            Some(k_in) => nested_counts(n0, n1, k, k_in, ratio),
            None => fold_counts(n0, n1, k, ratio).1,
        };
        return deal(&labels, &counts, rng)
            .into_iter()
            .map(|f| f.into_iter().map(|i| positions[i]).collect())
            .collect();
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for &p in positions {
        groups.entry(items[p].patient_id.as_str()).or_default().push(p);
    }
    let groups: Vec<Vec<usize>> = groups.into_values().collect();
    // a patient counts as anomalous if either sinus is
    let labels: Vec<usize> = groups.iter().map(|g| g.iter().map(|&p| items[p].label).max().unwrap()).collect();
    let group_ratio = normal_fraction(labels.iter().copied());
    stratified_folds(&labels, k, group_ratio, rng)
        .into_iter()
        .map(|f| {
            let mut out: Vec<usize> = f.into_iter().flat_map(|g| groups[g].iter().copied()).collect();
            out.sort_unstable();
            out
        })
        .collect()
}

/// Nested stratified k-fold plan over sample ids, deterministic per seed.
pub fn plan_nested_kfold(items: &[LabeledId], config: &KFoldConfig, seed: u64) -> Result<FoldPlan, SamplingError> {
    let KFoldConfig {
        outer: k_out,
        inner: k_in,
        group_by_patient,
    } = *config;
    if !(2..=32).contains(&k_out) || !(2..=32).contains(&k_in) {
        return Err(SamplingError::FoldCount { outer: k_out, inner: k_in });
    }
    check_unique(items)?;
    let counts = check_labels(items.iter().map(|i| i.label))?;
    let needed = 2 * k_out.max(k_in);
    for (class, &count) in counts.iter().enumerate() {
        if count < needed {
            return Err(SamplingError::ClassTooSmall { class, count, needed });
        }
    }
    let ids = |ps: &[usize]| ps.iter().map(|&p| items[p].id.clone()).collect::<Vec<_>>();
    let all: Vec<usize> = (0..items.len()).collect();
    let mut rng = seed::rng(seed::derive_str(seed, "outer"));
    let ratio = normal_fraction(items.iter().map(|i| i.label));
    let outer_folds = plan_level(items, &all, k_out, Some(k_in), group_by_patient, ratio, &mut rng);
    let outer = outer_folds
        .iter()
        .enumerate()
        .map(|(o, test)| {
            let test_set: HashSet<usize> = test.iter().copied().collect();
            let rest: Vec<usize> = all.iter().copied().filter(|p| !test_set.contains(p)).collect();
            let mut rng = seed::rng(seed::derive(seed::derive_str(seed, "inner"), o as u64));
            let inner_folds = plan_level(items, &rest, k_in, None, group_by_patient, ratio, &mut rng);
            let inner = (0..k_in)
                .map(|i| {
                    let train: Vec<usize> = inner_folds
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != i)
                        .flat_map(|(_, f)| f.iter().copied())
                        .collect();
                    let mut train = ids(&train);
                    train.sort();
                    InnerSplit {
                        train,
                        val: ids(&inner_folds[i]),
                    }
                })
                .collect();
            OuterFold { test: ids(test), inner }
        })
        .collect();
    Ok(FoldPlan { outer })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub batch_size: usize,
    pub two_view: bool,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self {
            batch_size: 128,
            two_view: false,
        }
    }
}

impl BatchSpec {
    pub fn validate(&self) -> Result<(), SamplingError> {
        if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) {
            return Err(SamplingError::BatchSize(self.batch_size));
        }
        Ok(())
    }

    pub fn per_class(&self) -> usize {
        self.batch_size / 2
    }
}

/// Batches of positions into `labels` with exactly `N/2` per class.
///
/// Each class is shuffled once per epoch and consumed without replacement;
/// a class that runs out is topped up with uniform draws with replacement.
/// The epoch has `ceil(max class size / (N/2))` batches.
pub fn make_balanced_batches(
    labels: &[usize],
    spec: &BatchSpec,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<usize>>, SamplingError> {
    spec.validate()?;
    let counts = check_labels(labels.iter().copied())?;
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(SamplingError::EmptyClass { class });
    }
    let half = spec.per_class();
    let mut rng = seed::rng(seed::derive(seed::derive_str(seed, "batches"), epoch));
    let members: Vec<Vec<usize>> = (0..2)
        .map(|c| {
            let mut m: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            m.shuffle(&mut rng);
            m
        })
        .collect();
    let n_batches = counts.iter().max().unwrap().div_ceil(half);
    Ok((0..n_batches)
        .map(|b| {
            let mut batch = Vec::with_capacity(spec.batch_size);
            for m in &members {
                for j in b * half..(b + 1) * half {
                    batch.push(match m.get(j) {
                        Some(&p) => p,
                        None => m[rng.random_range(0..m.len())],
                    });
                }
            }
            batch
        })
        .collect())
}

/// Two augmented views per source sample. Views `0..N` are the first draws
/// and `N..2N` the second, so view `i` pairs with `(i + N) mod 2N`.
#[derive(Clone, Debug)]
pub struct ViewBatch {
    pub views: Vec<Volume>,
    /// Position in the source batch of each view.
    pub source: Vec<usize>,
    pub index: ContrastiveBatchIndex,
}

pub fn make_two_view_batch(
    batch: &[&SinusSample],
    policy: &AugmentationPolicy,
    seed: u64,
) -> Result<ViewBatch, crate::losses::LossError> {
    let n = batch.len();
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let index = ContrastiveBatchIndex::two_view(&labels)?;
    let views = (0..2 * n)
        .into_par_iter()
        .map(|v| augment_volume(&batch[v % n].volume, policy, seed::derive(seed, v as u64)))
        .collect();
    Ok(ViewBatch {
        views,
        source: (0..2 * n).map(|v| v % n).collect(),
        index,
    })
}

/// Stratified subset of positions with `round(fraction * class count)` per
/// class. Subsets for one seed are prefixes of the same per-class shuffle,
/// so smaller fractions nest inside larger ones.
pub fn subsample_training(labels: &[usize], fraction: f64, seed: u64) -> Result<Vec<usize>, SamplingError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(SamplingError::Fraction(fraction));
    }
    check_labels(labels.iter().copied())?;
    let mut rng = seed::rng(seed::derive_str(seed, "subsample"));
    let mut keep = Vec::new();
    for class in 0..2 {
        let mut m: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        m.shuffle(&mut rng);
        let take = (fraction * m.len() as f64).round() as usize;
        keep.extend_from_slice(&m[..take]);
    }
    keep.sort_unstable();
    Ok(keep)
}
