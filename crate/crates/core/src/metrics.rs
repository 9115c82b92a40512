//! Binary classification metrics and the paired permutation test.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no predictions")]
    Empty,
    #[error("metric undefined: only class {0} present")]
    SingleClass(usize),
    #[error("no positive samples")]
    NoPositives,
    #[error("invalid prediction for {id}: {reason}")]
    Invalid { id: String, reason: String },
    #[error("duplicate prediction id {0}")]
    DuplicateId(String),
    #[error("predictions are not paired: {0}")]
    Unpaired(String),
    #[error("aggregation needs at least 2 reports, got {0}")]
    TooFewReports(usize),
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub id: String,
    pub label: usize,
    /// Probability of the anomaly class.
    pub score: f64,
    pub predicted: usize,
}

impl ScoredPrediction {
    /// Prediction from a class-1 probability; argmax breaks ties toward class 0.
    pub fn from_score(id: impl Into<String>, label: usize, score: f64) -> Self {
        Self {
            id: id.into(),
            label,
            score,
            predicted: usize::from(score > 0.5),
        }
    }
}

pub fn validate(preds: &[ScoredPrediction]) -> Result<()> {
    if preds.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut seen = HashSet::with_capacity(preds.len());
    for p in preds {
        let bad = |reason: &str| {
            Err(MetricsError::Invalid {
                id: p.id.clone(),
                reason: reason.into(),
            })
        };
        if p.label > 1 || p.predicted > 1 {
            return bad("labels must be 0 or 1");
        }
        if !p.score.is_finite() {
            return bad("score is not finite");
        }
        if !seen.insert(p.id.as_str()) {
            return Err(MetricsError::DuplicateId(p.id.clone()));
        }
    }
    Ok(())
}

pub fn accuracy(preds: &[ScoredPrediction]) -> Result<f64> {
    validate(preds)?;
    Ok(preds.iter().filter(|p| p.label == p.predicted).count() as f64 / preds.len() as f64)
}

/// Support-weighted mean of per-class F1, with 0/0 taken as 0.
pub fn f1_weighted(preds: &[ScoredPrediction]) -> Result<f64> {
    validate(preds)?;
    let n = preds.len() as f64;
    let mut total = 0.0;
    for class in 0..2 {
        let tp = preds.iter().filter(|p| p.label == class && p.predicted == class).count() as f64;
        let support = preds.iter().filter(|p| p.label == class).count() as f64;
        let predicted = preds.iter().filter(|p| p.predicted == class).count() as f64;
        // 2PR/(P+R) = 2tp/(support + predicted)
        let f1 = if support + predicted == 0.0 {
            0.0
        } else {
            2.0 * tp / (support + predicted)
        };
        total += support / n * f1;
    }
    Ok(total)
}

fn class_counts(preds: &[ScoredPrediction]) -> (usize, usize) {
    let pos = preds.iter().filter(|p| p.label == 1).count();
    (preds.len() - pos, pos)
}

/// Mann-Whitney AUROC with average ranks for tied scores.
pub fn auroc(preds: &[ScoredPrediction]) -> Result<f64> {
    validate(preds)?;
    let (neg, pos) = class_counts(preds);
    if neg == 0 || pos == 0 {
        return Err(MetricsError::SingleClass(usize::from(pos > 0)));
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[a].score.total_cmp(&preds[b].score));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && preds[order[j + 1]].score == preds[order[i]].score {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| preds[k].label == 1).count() as f64;
        i = j + 1;
    }
    let (neg, pos) = (neg as f64, pos as f64);
    Ok((rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Descending score order, ties broken by id.
fn ranking(preds: &[ScoredPrediction]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| match preds[b].score.total_cmp(&preds[a].score) {
        Ordering::Equal => preds[a].id.cmp(&preds[b].id),
        other => other,
    });
    order
}

/// Average precision and the precision-recall points at each positive in
/// ranking order.
pub fn auprc(preds: &[ScoredPrediction]) -> Result<(f64, Vec<PrPoint>)> {
    validate(preds)?;
    let (_, pos) = class_counts(preds);
    if pos == 0 {
        return Err(MetricsError::NoPositives);
    }
    let mut tp = 0usize;
    let mut ap = 0.0;
    let mut curve = Vec::with_capacity(pos);
    for (k, &i) in ranking(preds).iter().enumerate() {
        if preds[i].label != 1 {
            continue;
        }
        tp += 1;
        let precision = tp as f64 / (k + 1) as f64;
        ap += precision / pos as f64;
        curve.push(PrPoint {
            threshold: preds[i].score,
            recall: tp as f64 / pos as f64,
            precision,
        });
    }
    Ok((ap, curve))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    F1Weighted,
    Auroc,
    Auprc,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Accuracy, Metric::F1Weighted, Metric::Auroc, Metric::Auprc];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::F1Weighted => "f1_weighted",
            Metric::Auroc => "auroc",
            Metric::Auprc => "auprc",
        }
    }

    pub fn eval(self, preds: &[ScoredPrediction]) -> Result<f64> {
        match self {
            Metric::Accuracy => accuracy(preds),
            Metric::F1Weighted => f1_weighted(preds),
            Metric::Auroc => auroc(preds),
            Metric::Auprc => auprc(preds).map(|(ap, _)| ap),
        }
    }

    pub fn of(self, report: &MetricsReport) -> f64 {
        match self {
            Metric::Accuracy => report.accuracy,
            Metric::F1Weighted => report.f1_weighted,
            Metric::Auroc => report.auroc,
            Metric::Auprc => report.auprc,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| MetricsError::UnknownMetric(s.into()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub f1_weighted: f64,
    pub auroc: f64,
    pub auprc: f64,
    pub n_samples: usize,
    pub pr_curve: Vec<PrPoint>,
}

pub fn evaluate(preds: &[ScoredPrediction]) -> Result<MetricsReport> {
    let (auprc, pr_curve) = auprc(preds)?;
    Ok(MetricsReport {
        accuracy: accuracy(preds)?,
        f1_weighted: f1_weighted(preds)?,
        auroc: auroc(preds)?,
        auprc,
        n_samples: preds.len(),
        pr_curve,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    pub observed: f64,
    pub p_value: f64,
    pub permutations: usize,
}

/// Paired permutation test on `metric(a) - metric(b)`.
///
/// Each replica swaps the two models' predictions per sample with
/// probability 1/2; the two-sided p-value uses add-one smoothing. Replica
/// `r` draws from its own derived seed, so the result does not depend on
/// thread count.
pub fn permutation_test(
    a: &[ScoredPrediction],
    b: &[ScoredPrediction],
    metric: Metric,
    permutations: usize,
    seed: u64,
) -> Result<PermutationResult> {
    validate(a)?;
    validate(b)?;
    if a.len() != b.len() {
        return Err(MetricsError::Unpaired(format!("{} vs {} predictions", a.len(), b.len())));
    }
    let by_id: HashMap<&str, &ScoredPrediction> = b.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut pairs = Vec::with_capacity(a.len());
    for p in a {
        let q = by_id
            .get(p.id.as_str())
            .ok_or_else(|| MetricsError::Unpaired(format!("{} missing from second set", p.id)))?;
        if q.label != p.label {
            return Err(MetricsError::Unpaired(format!("{} has different labels", p.id)));
        }
        pairs.push((p, *q));
    }
    let observed = metric.eval(a)? - metric.eval(b)?;
    let tol = 1e-12 * observed.abs().max(1.0);
    let extreme = (0..permutations)
        .into_par_iter()
        .map(|r| -> Result<usize> {
            let mut rng = seed::rng(seed::derive(seed, r as u64));
            let (mut pa, mut pb) = (Vec::with_capacity(pairs.len()), Vec::with_capacity(pairs.len()));
            for &(x, y) in &pairs {
                let (x, y) = if rng.random::<bool>() { (y, x) } else { (x, y) };
                pa.push(x.clone());
                pb.push(y.clone());
            }
            let delta = metric.eval(&pa)? - metric.eval(&pb)?;
            Ok(usize::from(delta.abs() >= observed.abs() - tol))
        })
        .try_reduce(|| 0, |x, y| Ok(x + y))?;
    Ok(PermutationResult {
        observed,
        p_value: (1 + extreme) as f64 / (permutations + 1) as f64,
        permutations,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StdKind {
    #[default]
    Sample,
    Population,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4}±{:.4}", self.mean, self.std)
    }
}

pub fn mean_std(values: &[f64], kind: StdKind) -> Result<MeanStd> {
    if values.len() < 2 {
        return Err(MetricsError::TooFewReports(values.len()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    let dof = match kind {
        StdKind::Sample => n - 1.0,
        StdKind::Population => n,
    };
    Ok(MeanStd {
        mean,
        std: (ss / dof).sqrt(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub accuracy: MeanStd,
    pub f1_weighted: MeanStd,
    pub auroc: MeanStd,
    pub auprc: MeanStd,
}

impl Aggregate {
    pub fn get(&self, metric: Metric) -> MeanStd {
        match metric {
            Metric::Accuracy => self.accuracy,
            Metric::F1Weighted => self.f1_weighted,
            Metric::Auroc => self.auroc,
            Metric::Auprc => self.auprc,
        }
    }
}

/// Per-metric mean and standard deviation over fold reports.
pub fn aggregate_folds(reports: &[MetricsReport], kind: StdKind) -> Result<Aggregate> {
    let stat = |m: Metric| mean_std(&reports.iter().map(|r| m.of(r)).collect::<Vec<_>>(), kind);
    Ok(Aggregate {
        accuracy: stat(Metric::Accuracy)?,
        f1_weighted: stat(Metric::F1Weighted)?,
        auroc: stat(Metric::Auroc)?,
        auprc: stat(Metric::Auprc)?,
    })
}

pub const METRICS_HEADER: [&str; 6] = ["fold", "n_samples", "accuracy", "f1_weighted", "auroc", "auprc"];

fn io_err(path: &Path, e: impl fmt::Display) -> MetricsError {
    MetricsError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// One row per labelled report, followed by `mean` and `std` rows when
/// there are at least two reports.
pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[(String, MetricsReport)], kind: StdKind) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(METRICS_HEADER).map_err(|e| io_err(path, e))?;
    for (label, r) in rows {
        let mut rec = vec![label.clone(), r.n_samples.to_string()];
        rec.extend(Metric::ALL.iter().map(|m| m.of(r).to_string()));
        w.write_record(&rec).map_err(|e| io_err(path, e))?;
    }
    if rows.len() >= 2 {
        let reports: Vec<MetricsReport> = rows.iter().map(|(_, r)| r.clone()).collect();
        let agg = aggregate_folds(&reports, kind)?;
        let total: usize = reports.iter().map(|r| r.n_samples).sum();
        for (name, pick) in [("mean", 0), ("std", 1)] {
            let mut rec = vec![name.to_string(), total.to_string()];
            rec.extend(Metric::ALL.iter().map(|&m| {
                let s = agg.get(m);
                if pick == 0 { s.mean } else { s.std }.to_string()
            }));
            w.write_record(&rec).map_err(|e| io_err(path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Rows of a metrics CSV as `(fold label, metric name -> value)`.
pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<(String, Vec<(String, f64)>)>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let header = r.headers().map_err(|e| io_err(path, e))?.clone();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        let label = rec.get(0).unwrap_or_default().to_string();
        let values = header
            .iter()
            .zip(rec.iter())
            .skip(2)
            .map(|(h, v)| {
                v.parse::<f64>()
                    .map(|x| (h.to_string(), x))
                    .map_err(|e| io_err(path, format!("column {h}: {e}")))
            })
            .collect::<Result<_>>()?;
        rows.push((label, values));
    }
    Ok(rows)
}

pub fn write_pr_curve_csv(path: impl AsRef<Path>, curve: &[PrPoint]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    for p in curve {
        w.serialize(p).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_pr_curve_csv(path: impl AsRef<Path>) -> Result<Vec<PrPoint>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    r.deserialize().map(|p| p.map_err(|e| io_err(path, e))).collect()
}

/// Columns `id,label,score,predicted`.
pub fn write_predictions_csv(path: impl AsRef<Path>, preds: &[ScoredPrediction]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    for p in preds {
        w.serialize(p).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_predictions_csv(path: impl AsRef<Path>) -> Result<Vec<ScoredPrediction>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    r.deserialize().map(|p| p.map_err(|e| io_err(path, e))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn preds(labels: &[usize], scores: &[f64]) -> Vec<ScoredPrediction> {
        labels
            .iter()
            .zip(scores)
            .enumerate()
            .map(|(i, (&l, &s))| ScoredPrediction::from_score(format!("s{i:03}"), l, s))
            .collect()
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&preds(&[0, 1], &[0.1, 0.9])).unwrap(), 1.0);
        assert_eq!(accuracy(&preds(&[0, 1], &[0.9, 0.1])).unwrap(), 0.0);
        assert_eq!(accuracy(&preds(&[0, 1, 1, 0], &[0.1, 0.9, 0.2, 0.3])).unwrap(), 0.75);
        assert!(matches!(accuracy(&[]), Err(MetricsError::Empty)));
    }

    #[test]
    fn auroc_edge_cases() {
        assert_eq!(auroc(&preds(&[0, 0, 1, 1], &[0.5; 4])).unwrap(), 0.5);
        assert_eq!(auroc(&preds(&[0, 0, 1, 1], &[0.1, 0.2, 0.3, 0.4])).unwrap(), 1.0);
        assert!(matches!(auroc(&preds(&[1, 1], &[0.1, 0.2])), Err(MetricsError::SingleClass(1))));
    }

    #[test]
    fn ap_with_no_positives_is_an_error() {
        assert!(matches!(auprc(&preds(&[0, 0], &[0.1, 0.2])), Err(MetricsError::NoPositives)));
    }

    #[test]
    fn aggregate_needs_two_reports() {
        assert!(matches!(mean_std(&[0.5], StdKind::Sample), Err(MetricsError::TooFewReports(1))));
        let s = mean_std(&[0.8, 0.9], StdKind::Sample).unwrap();
        assert!((s.mean - 0.85).abs() < 1e-15);
        assert!((s.std - 0.005f64.sqrt()).abs() < 1e-15);
        assert!((mean_std(&[0.8, 0.9], StdKind::Population).unwrap().std - 0.05).abs() < 1e-15);
    }
}
