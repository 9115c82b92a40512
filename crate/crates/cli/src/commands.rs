use std::path::Path;

use sinuscl::data::{
    generate_corpus, generate_heads, load_samples, preprocess_manifest, read_manifest, CorpusConfig, CorpusSummary,
    CropConfig, SinusSample,
};
use sinuscl::metrics::{
    evaluate, permutation_test, read_pr_curve_csv, read_predictions_csv, write_metrics_csv, write_pr_curve_csv,
    write_predictions_csv, Metric, StdKind,
};
use sinuscl::nn::{load_checkpoint, SupConNet};
use sinuscl::sampling::{plan_nested_kfold, KFoldConfig, LabeledId};
use sinuscl::trainer::{
    export_embeddings, predict, run_label_efficiency, run_nested_cv, train as train_model, write_embeddings_csv,
    write_label_efficiency_csv, write_run_dir, RunArtifacts, RunRecord,
};

use crate::config::resolve;
use crate::svg::{Chart, Series};
use crate::{CliError, EmbedArgs, GenDataArgs, KfoldArgs, LabelEfficiencyArgs, PreprocessArgs, ReportArgs, TrainArgs};

type Result<T> = std::result::Result<T, CliError>;

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Run(format!("{}: {e}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

fn load(manifest: &Path) -> Result<Vec<SinusSample>> {
    let m = read_manifest(manifest)?;
    Ok(load_samples(&m)?)
}

fn print_summary(s: &CorpusSummary, out: &Path) {
    println!(
        "{} samples: {} normal, {} anomaly, {} excluded -> {}",
        s.normal + s.anomaly,
        s.normal,
        s.anomaly,
        s.excluded,
        out.display()
    );
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let config = CorpusConfig {
        patients: a.patients,
        normal_ratio: a.normal_ratio,
        exclude: a.exclude,
        seed: a.seed,
        ..CorpusConfig::default()
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let summary = if a.raw {
        generate_heads(&config, &a.out)?
    } else {
        generate_corpus(&config, &a.out)?
    };
    print_summary(&summary, &a.out);
    Ok(())
}

pub fn preprocess(a: PreprocessArgs) -> Result<()> {
    let crops = match &a.crops {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        None => CropConfig::default(),
    };
    let heads = read_manifest(&a.manifest)?;
    let summary = preprocess_manifest(&heads, &crops, &a.out)?;
    print_summary(&summary, &a.out);
    Ok(())
}

fn config_json(config: &sinuscl::trainer::TrainConfig, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(config).map_err(|e| io_error(path, e))?;
    write_text(path, &(json + "\n"))
}

pub fn train(a: TrainArgs) -> Result<()> {
    let config = resolve(&a.flags, a.regime)?;
    let samples = load(&a.manifest)?;
    let eval = match &a.eval_manifest {
        Some(m) => load(m)?,
        None => Vec::new(),
    };
    let outcome = train_model(&samples, &[], &config)?;
    let evaluation = if eval.is_empty() {
        None
    } else {
        let preds = predict(&outcome.net, &eval, config.eval_batch)?;
        Some((evaluate(&preds)?, preds))
    };
    write_run_dir(
        &a.out,
        &RunArtifacts {
            record: &outcome.record,
            net: &outcome.net,
            evaluation: evaluation.as_ref().map(|(r, p)| (r, p.as_slice())),
            embed: if eval.is_empty() { &samples } else { &eval },
        },
    )?;
    let last = outcome.record.losses.last().map_or(f64::NAN, |e| e.loss);
    println!("{} on {} samples: final loss {last:.5}", config.regime, samples.len());
    if let Some((r, _)) = &evaluation {
        println!(
            "accuracy {:.4}  f1_weighted {:.4}  auroc {:.4}  auprc {:.4}",
            r.accuracy, r.f1_weighted, r.auroc, r.auprc
        );
    }
    Ok(())
}

fn kfold_config(outer: usize, inner: usize, group_by_patient: bool) -> KFoldConfig {
    KFoldConfig {
        outer,
        inner,
        group_by_patient,
    }
}

pub fn kfold(a: KfoldArgs) -> Result<()> {
    let config = resolve(&a.flags, a.regime)?;
    if a.jobs == 0 {
        return Err(CliError::Usage("--jobs must be positive".into()));
    }
    let samples = load(&a.manifest)?;
    let items: Vec<LabeledId> = samples.iter().map(LabeledId::of).collect();
    let plan = plan_nested_kfold(&items, &kfold_config(a.folds, a.inner_folds, a.group_by_patient), config.seed)?;
    create_dir(&a.out)?;
    plan.write_csv(a.out.join("folds.csv"))?;
    config_json(&config, &a.out.join("run.json"))?;

    let result = run_nested_cv(&samples, &config, &plan, a.inner_validation, a.jobs)?;
    let mut rows = Vec::new();
    let mut inner_rows = Vec::new();
    let mut pooled = Vec::new();
    for fold in &result.folds {
        let test = sinuscl::trainer::select_samples(&samples, &fold.test_ids)?;
        write_run_dir(
            a.out.join(format!("fold_{}", fold.outer)),
            &RunArtifacts {
                record: &fold.record,
                net: &fold.net,
                evaluation: Some((&fold.report, &fold.predictions)),
                embed: &test,
            },
        )?;
        rows.push((fold.outer.to_string(), fold.report.clone()));
        for (i, r) in fold.inner_validation.iter().enumerate() {
            inner_rows.push((format!("{}.{i}", fold.outer), r.clone()));
        }
        pooled.extend(fold.predictions.iter().cloned());
    }
    write_metrics_csv(a.out.join("metrics.csv"), &rows, StdKind::Sample)?;
    if !inner_rows.is_empty() {
        write_metrics_csv(a.out.join("inner_metrics.csv"), &inner_rows, StdKind::Sample)?;
    }
    pooled.sort_by(|x, y| x.id.cmp(&y.id));
    write_predictions_csv(a.out.join("predictions.csv"), &pooled)?;
    write_pr_curve_csv(a.out.join("pr_curve.csv"), &evaluate(&pooled)?.pr_curve)?;

    println!("{} over {} outer folds (mean±std across folds):", config.regime, result.folds.len());
    for m in Metric::ALL {
        println!("  {:<12} {}", m.as_str(), result.aggregate.get(m));
    }
    Ok(())
}

pub fn label_efficiency(a: LabelEfficiencyArgs) -> Result<()> {
    let config = resolve(&a.flags, None)?;
    if a.jobs == 0 {
        return Err(CliError::Usage("--jobs must be positive".into()));
    }
    if let Some(f) = a.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(CliError::Usage(format!("fraction {f} outside (0, 1]")));
    }
    let samples = load(&a.manifest)?;
    let items: Vec<LabeledId> = samples.iter().map(LabeledId::of).collect();
    let plan = plan_nested_kfold(&items, &kfold_config(a.folds, a.folds, false), config.seed)?;
    create_dir(&a.out)?;
    plan.write_csv(a.out.join("folds.csv"))?;
    config_json(&config, &a.out.join("run.json"))?;

    let result = run_label_efficiency(&samples, &config, &a.regimes, &a.fractions, &plan, a.jobs)?;
    write_label_efficiency_csv(a.out.join("label_efficiency.csv"), &result.rows)?;
    write_audit(&a.out.join("test_audit.csv"), &result.rows)?;
    let mut fractions = a.fractions.clone();
    fractions.sort_by(f64::total_cmp);
    let lo = fractions[0].min(0.5);
    let series: Vec<Series> = a
        .regimes
        .iter()
        .map(|&regime| {
            let mut points: Vec<(f64, f64)> = result
                .rows
                .iter()
                .filter(|r| r.regime == regime)
                .map(|r| (r.fraction, r.auprc.mean))
                .collect();
            points.sort_by(|p, q| p.0.total_cmp(&q.0));
            Series {
                name: regime.to_string(),
                points,
            }
        })
        .collect();
    let chart = Chart {
        title: "AUPRC against training fraction".into(),
        x_label: "fraction of training data".into(),
        y_label: "AUPRC".into(),
        x_range: (lo, 1.0),
        y_range: (0.0, 1.0),
    };
    write_text(&a.out.join("label_efficiency.svg"), &chart.render(&series))?;
    for r in &result.rows {
        println!("{:<9} {:.2}  auprc {}", r.regime.as_str(), r.fraction, r.auprc);
    }
    Ok(())
}

/// Digest of a test set; equal digests mean identical id lists.
pub fn test_digest(ids: &[String]) -> u64 {
    sinuscl::seed::derive_str(0, &ids.join("\n"))
}

/// One row per (regime, fraction, outer fold) naming the test set it was scored on.
fn write_audit(path: &Path, rows: &[sinuscl::trainer::LabelEfficiencyRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_error(path, e))?;
    w.write_record(["regime", "fraction", "outer_fold", "train_size", "test_size", "test_digest"])
        .map_err(|e| io_error(path, e))?;
    for r in rows {
        for (o, ids) in r.test_ids.iter().enumerate() {
            w.write_record([
                r.regime.to_string(),
                r.fraction.to_string(),
                o.to_string(),
                r.train_sizes[o].to_string(),
                ids.len().to_string(),
                format!("{:016x}", test_digest(ids)),
            ])
            .map_err(|e| io_error(path, e))?;
        }
    }
    w.flush().map_err(|e| io_error(path, e))
}

pub fn embed(a: EmbedArgs) -> Result<()> {
    let run_json = a.run.join("run.json");
    let text = std::fs::read_to_string(&run_json).map_err(|e| io_error(&run_json, e))?;
    let record: RunRecord = serde_json::from_str(&text).map_err(|e| io_error(&run_json, e))?;
    let params = load_checkpoint(a.run.join("checkpoint.sclm"))?;
    let net = SupConNet::from_params(record.config.encoder.clone(), params)?;
    let samples = load(&a.manifest)?;
    let rows = export_embeddings(&net, &samples, record.config.eval_batch)?;
    write_embeddings_csv(&a.out, &rows)?;
    println!("{} embeddings -> {}", rows.len(), a.out.display());
    Ok(())
}

fn require(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Run(format!("missing {}", path.display())))
    }
}

/// Rows of `metrics.csv` exactly as written.
fn metrics_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_error(path, e))?;
    let header = r.headers().map_err(|e| io_error(path, e))?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| {
            rec.map(|rec| rec.iter().map(str::to_string).collect())
                .map_err(|e| io_error(path, e))
        })
        .collect::<Result<_>>()?;
    Ok((header, rows))
}

pub fn report(a: ReportArgs) -> Result<()> {
    let metrics_path = a.run.join("metrics.csv");
    let pr_path = a.run.join("pr_curve.csv");
    require(&metrics_path)?;
    require(&pr_path)?;
    let (header, rows) = metrics_table(&metrics_path)?;
    let width = rows.iter().flatten().chain(&header).map(String::len).max().unwrap_or(8) + 2;
    let line = |cells: &[String]| cells.iter().map(|c| format!("{c:<width$}")).collect::<String>();
    println!("{}", line(&header).trim_end());
    for row in &rows {
        println!("{}", line(row).trim_end());
    }
    let find = |label: &str| rows.iter().find(|r| r.first().is_some_and(|f| f == label));
    if let (Some(mean), Some(std)) = (find("mean"), find("std")) {
        let cells: Vec<String> = std::iter::once("mean±std".to_string())
            .chain(header.iter().enumerate().skip(2).map(|(i, _)| format!("{}±{}", mean[i], std[i])))
            .collect();
        println!("{}", cells.join("  "));
    }

    let curve = read_pr_curve_csv(&pr_path)?;
    let points = curve.iter().map(|p| (p.recall, p.precision)).collect();
    let chart = Chart {
        title: "Precision-recall curve".into(),
        x_label: "recall".into(),
        y_label: "precision".into(),
        x_range: (0.0, 1.0),
        y_range: (0.0, 1.0),
    };
    let svg = chart.render(&[Series {
        name: "model".into(),
        points,
    }]);
    let svg_path = a.svg.unwrap_or_else(|| a.run.join("pr_curve.svg"));
    write_text(&svg_path, &svg)?;
    log::info!("wrote {}", svg_path.display());

    if let Some(other) = &a.compare {
        let (pa, pb) = (a.run.join("predictions.csv"), other.join("predictions.csv"));
        require(&pa)?;
        require(&pb)?;
        let (x, y) = (read_predictions_csv(&pa)?, read_predictions_csv(&pb)?);
        println!("paired permutation test ({} permutations):", a.permutations);
        for m in Metric::ALL {
            let t = permutation_test(&x, &y, m, a.permutations, a.seed)?;
            println!("  {:<12} difference {:+.4}  p {:.4}", m.as_str(), t.observed, t.p_value);
        }
    }
    Ok(())
}
