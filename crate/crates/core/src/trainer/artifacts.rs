use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{predict, stack_volumes, Result, RunRecord, TrainError};
use crate::data::{SinusSample, Volume};
use crate::metrics::{write_metrics_csv, write_pr_curve_csv, write_predictions_csv, MetricsReport, ScoredPrediction, StdKind};
use crate::nn::{save_checkpoint, SupConNet};

fn io(path: &Path, e: impl std::fmt::Display) -> TrainError {
    TrainError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub id: String,
    pub label: usize,
    pub z: Vec<f32>,
}

/// Unit-norm contrastive embeddings of `samples`, one row each.
pub fn export_embeddings(net: &SupConNet, samples: &[SinusSample], eval_batch: usize) -> Result<Vec<EmbeddingRow>> {
    let mut rows = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(eval_batch.max(1)) {
        let vols: Vec<&Volume> = chunk.iter().map(|s| &s.volume).collect();
        let z = net.embed(stack_volumes(&vols)?)?;
        let dim = z.shape()[1];
        for (s, row) in chunk.iter().zip(z.data().chunks(dim)) {
            rows.push(EmbeddingRow {
                id: s.id(),
                label: s.label,
                z: row.to_vec(),
            });
        }
    }
    Ok(rows)
}

/// Header `id,label,z0,...`, one row per sample.
pub fn write_embeddings_csv(path: impl AsRef<Path>, rows: &[EmbeddingRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| io(path, e))?;
    let dim = rows.first().map_or(0, |r| r.z.len());
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend((0..dim).map(|i| format!("z{i}")));
    w.write_record(&header).map_err(|e| io(path, e))?;
    for r in rows {
        let mut rec = vec![r.id.clone(), r.label.to_string()];
        rec.extend(r.z.iter().map(f32::to_string));
        w.write_record(&rec).map_err(|e| io(path, e))?;
    }
    w.flush().map_err(|e| io(path, e))
}

pub fn read_embeddings_csv(path: impl AsRef<Path>) -> Result<Vec<EmbeddingRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| io(path, e))?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| io(path, e))?;
        let field = |i: usize| rec.get(i).ok_or_else(|| io(path, "short row"));
        let label = field(1)?.parse().map_err(|e| io(path, e))?;
        let z = rec
            .iter()
            .skip(2)
            .map(|v| v.parse::<f32>().map_err(|e| io(path, e)))
            .collect::<Result<_>>()?;
        rows.push(EmbeddingRow {
            id: field(0)?.to_string(),
            label,
            z,
        });
    }
    Ok(rows)
}

#[derive(Serialize, Deserialize)]
struct LossRow {
    stage: u8,
    epoch: usize,
    loss: f64,
    contrastive: Option<f64>,
    ce: Option<f64>,
}

pub fn write_loss_csv(path: impl AsRef<Path>, record: &RunRecord) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| io(path, e))?;
    for e in &record.losses {
        w.serialize(LossRow {
            stage: e.stage,
            epoch: e.epoch,
            loss: e.loss,
            contrastive: e.contrastive,
            ce: e.ce,
        })
        .map_err(|e| io(path, e))?;
    }
    w.flush().map_err(|e| io(path, e))
}

/// What a finished run leaves behind.
pub struct RunArtifacts<'a> {
    pub record: &'a RunRecord,
    pub net: &'a SupConNet,
    /// Held-out evaluation, written to `metrics.csv` and `pr_curve.csv`.
    pub evaluation: Option<(&'a MetricsReport, &'a [ScoredPrediction])>,
    /// Samples whose embeddings go to `embeddings.csv`.
    pub embed: &'a [SinusSample],
}

/// Writes `run.json`, `loss.csv`, `checkpoint.sclm`, `embeddings.csv` and,
/// with an evaluation, `metrics.csv`, `pr_curve.csv` and `predictions.csv`.
pub fn write_run_dir(dir: impl AsRef<Path>, run: &RunArtifacts<'_>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let json = serde_json::to_string_pretty(run.record).map_err(|e| io(dir, e))?;
    let run_json = dir.join("run.json");
    std::fs::write(&run_json, json + "\n").map_err(|e| io(&run_json, e))?;
    write_loss_csv(dir.join("loss.csv"), run.record)?;
    let ckpt = dir.join("checkpoint.sclm");
    save_checkpoint(&ckpt, run.net.params()).map_err(|e| io(&ckpt, e))?;
    let rows = export_embeddings(run.net, run.embed, run.record.config.eval_batch)?;
    write_embeddings_csv(dir.join("embeddings.csv"), &rows)?;
    if let Some((report, preds)) = run.evaluation {
        write_metrics_csv(dir.join("metrics.csv"), &[("test".into(), report.clone())], StdKind::Sample)?;
        write_pr_curve_csv(dir.join("pr_curve.csv"), &report.pr_curve)?;
        write_predictions_csv(dir.join("predictions.csv"), preds)?;
    }
    Ok(())
}

/// Scores `samples` with `net` and returns the report with its predictions.
pub(super) fn evaluate_on(
    net: &SupConNet,
    samples: &[SinusSample],
    eval_batch: usize,
) -> Result<(MetricsReport, Vec<ScoredPrediction>)> {
    let preds = predict(net, samples, eval_batch)?;
    Ok((crate::metrics::evaluate(&preds)?, preds))
}
