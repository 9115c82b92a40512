use std::collections::HashSet;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::artifacts::evaluate_on;
use super::{select_samples, train, Regime, Result, RunRecord, TrainConfig, TrainError};
use crate::data::SinusSample;
use crate::metrics::{aggregate_folds, mean_std, Aggregate, MeanStd, MetricsReport, ScoredPrediction, StdKind};
use crate::nn::SupConNet;
use crate::sampling::{subsample_training, FoldPlan};
use crate::seed;

pub struct FoldResult {
    pub outer: usize,
    pub test_ids: Vec<String>,
    pub report: MetricsReport,
    pub predictions: Vec<ScoredPrediction>,
    /// One report per inner split when inner validation is enabled.
    pub inner_validation: Vec<MetricsReport>,
    pub record: RunRecord,
    pub net: SupConNet,
}

pub struct NestedCvResult {
    pub folds: Vec<FoldResult>,
    pub aggregate: Aggregate,
}

/// Runs `f` over `0..n`, on a pool of `jobs` threads when `jobs > 1`.
fn run_indexed<T: Send>(n: usize, jobs: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    if jobs <= 1 {
        return (0..n).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| TrainError::Config(format!("thread pool: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(f).collect())
}

fn audit(record: &RunRecord, test_ids: &[String], what: &str) -> Result<()> {
    let test: HashSet<&str> = test_ids.iter().map(String::as_str).collect();
    if let Some(id) = record.trained_ids.iter().find(|id| test.contains(id.as_str())) {
        return Err(TrainError::Leakage(format!("{what}: test sample {id} entered training")));
    }
    Ok(())
}

/// Trains one model per outer fold on the union of its inner training sets
/// and evaluates it once on the outer test set. With `inner_validation`,
/// every inner split additionally gets its own model scored on its
/// validation set.
pub fn run_nested_cv(
    samples: &[SinusSample],
    config: &TrainConfig,
    plan: &FoldPlan,
    inner_validation: bool,
    jobs: usize,
) -> Result<NestedCvResult> {
    config.validate()?;
    let folds = run_indexed(plan.outer.len(), jobs, |o| {
        let fold = &plan.outer[o];
        let fold_config = TrainConfig {
            seed: seed::derive(config.seed, o as u64),
            ..config.clone()
        };
        let pool = select_samples(samples, &fold.train_pool())?;
        let test = select_samples(samples, &fold.test)?;
        log::info!("outer fold {o}: {} train, {} test", pool.len(), test.len());
        let outcome = train(&pool, &[], &fold_config)?;
        audit(&outcome.record, &fold.test, &format!("outer fold {o}"))?;
        let (report, predictions) = evaluate_on(&outcome.net, &test, config.eval_batch)?;
        let mut inner = Vec::new();
        if inner_validation {
            for (i, split) in fold.inner.iter().enumerate() {
                let inner_config = TrainConfig {
                    seed: seed::derive(fold_config.seed, 1 + i as u64),
                    ..config.clone()
                };
                let tr = select_samples(samples, &split.train)?;
                let val = select_samples(samples, &split.val)?;
                let out = train(&tr, &val, &inner_config)?;
                audit(&out.record, &fold.test, &format!("outer fold {o}, inner fold {i}"))?;
                audit(&out.record, &split.val, &format!("outer fold {o}, inner fold {i}"))?;
                inner.push(out.record.validation.expect("validation set is nonempty"));
            }
        }
        Ok(FoldResult {
            outer: o,
            test_ids: fold.test.clone(),
            report,
            predictions,
            inner_validation: inner,
            record: outcome.record,
            net: outcome.net,
        })
    })?;
    let reports: Vec<MetricsReport> = folds.iter().map(|f| f.report.clone()).collect();
    Ok(NestedCvResult {
        aggregate: aggregate_folds(&reports, StdKind::Sample)?,
        folds,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct LabelEfficiencyRow {
    pub regime: Regime,
    pub fraction: f64,
    pub fold_auprc: Vec<f64>,
    pub train_sizes: Vec<usize>,
    pub auprc: MeanStd,
    /// Test ids each outer fold of this arm was scored on.
    #[serde(skip)]
    pub test_ids: Vec<Vec<String>>,
}

pub struct LabelEfficiencyResult {
    pub rows: Vec<LabelEfficiencyRow>,
    /// The outer test sets shared by every arm.
    pub test_ids: Vec<Vec<String>>,
}

/// AUPRC per (regime, fraction) over the outer folds of `plan`. Every arm
/// of a fold is scored on the same test set; training sets are nested
/// stratified subsets of that fold's training pool.
pub fn run_label_efficiency(
    samples: &[SinusSample],
    config: &TrainConfig,
    regimes: &[Regime],
    fractions: &[f64],
    plan: &FoldPlan,
    jobs: usize,
) -> Result<LabelEfficiencyResult> {
    config.validate()?;
    if regimes.is_empty() || fractions.is_empty() {
        return Err(TrainError::Config("at least one regime and one fraction are required".into()));
    }
    for &f in fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(TrainError::Config(format!("fraction {f} outside (0, 1]")));
        }
    }
    let k = plan.outer.len();
    let arms: Vec<(Regime, f64, usize)> = regimes
        .iter()
        .flat_map(|&r| fractions.iter().flat_map(move |&f| (0..k).map(move |o| (r, f, o))))
        .collect();
    // (auprc, train size, test ids seen by the arm)
    let results = run_indexed(arms.len(), jobs, |a| {
        let (regime, fraction, o) = arms[a];
        let fold = &plan.outer[o];
        let pool = select_samples(samples, &fold.train_pool())?;
        let labels: Vec<usize> = pool.iter().map(|s| s.label).collect();
        let keep = subsample_training(&labels, fraction, seed::derive(config.seed, o as u64))?;
        let subset: Vec<SinusSample> = keep.iter().map(|&i| pool[i].clone()).collect();
        let test = select_samples(samples, &fold.test)?;
        let arm_config = TrainConfig {
            regime,
            seed: seed::derive(config.seed, o as u64),
            ..config.clone()
        };
        log::info!("{regime} at {fraction}: outer fold {o}, {} train", subset.len());
        let outcome = train(&subset, &[], &arm_config)?;
        audit(&outcome.record, &fold.test, &format!("{regime} {fraction} fold {o}"))?;
        let (report, _) = evaluate_on(&outcome.net, &test, config.eval_batch)?;
        Ok((report.auprc, subset.len(), test.iter().map(SinusSample::id).collect::<Vec<_>>()))
    })?;
    for (a, (_, _, ids)) in results.iter().enumerate() {
        if ids != &plan.outer[arms[a].2].test {
            return Err(TrainError::Leakage(format!("arm {a} was scored on a different test set")));
        }
    }
    let rows = results
        .chunks(k)
        .zip(arms.chunks(k))
        .map(|(res, arm)| {
            let fold_auprc: Vec<f64> = res.iter().map(|r| r.0).collect();
            Ok(LabelEfficiencyRow {
                regime: arm[0].0,
                fraction: arm[0].1,
                auprc: mean_std(&fold_auprc, StdKind::Sample)?,
                train_sizes: res.iter().map(|r| r.1).collect(),
                test_ids: res.iter().map(|r| r.2.clone()).collect(),
                fold_auprc,
            })
        })
        .collect::<Result<_>>()?;
    Ok(LabelEfficiencyResult {
        rows,
        test_ids: plan.outer.iter().map(|f| f.test.clone()).collect(),
    })
}

/// Columns `regime,fraction,auprc_mean,auprc_std`.
pub fn write_label_efficiency_csv(path: impl AsRef<Path>, rows: &[LabelEfficiencyRow]) -> Result<()> {
    let path = path.as_ref();
    let io = |e: csv::Error| TrainError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["regime", "fraction", "auprc_mean", "auprc_std"]).map_err(io)?;
    for r in rows {
        w.write_record([
            r.regime.to_string(),
            r.fraction.to_string(),
            r.auprc.mean.to_string(),
            r.auprc.std.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| TrainError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}
