use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::phantom::generate_head;
use super::preprocess::{preprocess_side, CropConfig, SAMPLE_EXTENT};
use super::volume::{read_volume, write_volume};
use super::{sample_id, AnomalyKind, DataError, SinusSample, Side};
use crate::seed;

/// Normal share of the reference cohort: 269 of 399 sinus volumes.
pub const DEFAULT_NORMAL_RATIO: f64 = 269.0 / 399.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub patients: usize,
    /// Fraction of emitted sinus samples that are normal.
    pub normal_ratio: f64,
    /// Sinus slots dropped from the corpus (two per patient before exclusion).
    pub exclude: usize,
    pub seed: u64,
    pub crops: CropConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            patients: 200,
            normal_ratio: DEFAULT_NORMAL_RATIO,
            exclude: 0,
            seed: 0,
            crops: CropConfig::default(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.patients == 0 {
            return Err(DataError::Config("at least one patient is required".into()));
        }
        if !(0.0..=1.0).contains(&self.normal_ratio) {
            return Err(DataError::Config(format!("normal ratio {} outside [0, 1]", self.normal_ratio)));
        }
        if self.exclude >= 2 * self.patients {
            return Err(DataError::Config(format!(
                "cannot exclude {} of {} sinus slots",
                self.exclude,
                2 * self.patients
            )));
        }
        Ok(())
    }

    /// `(normal, anomaly)` sample counts after exclusion.
    pub fn class_counts(&self) -> (usize, usize) {
        let total = 2 * self.patients - self.exclude;
        let normal = ((self.normal_ratio * total as f64).round() as usize).min(total);
        (normal, total - normal)
    }
}

/// Per-patient ground truth; `None` marks an excluded side.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientPlan {
    pub patient_id: String,
    pub left: Option<AnomalyKind>,
    pub right: Option<AnomalyKind>,
    pub seed: u64,
}

impl PatientPlan {
    pub fn side(&self, side: Side) -> Option<AnomalyKind> {
        match side {
            Side::Left => self.left,
            Side::Right => self.right,
        }
    }
}

/// Assigns classes and anomaly kinds to every sinus slot.
pub fn plan_corpus(config: &CorpusConfig) -> Result<Vec<PatientPlan>, DataError> {
    config.validate()?;
    let mut rng = seed::rng(seed::derive_str(config.seed, "corpus-plan"));
    let slots = 2 * config.patients;
    let mut order: Vec<usize> = (0..slots).collect();
    order.shuffle(&mut rng);
    let (_, anomalies) = config.class_counts();
    let mut kinds: Vec<Option<AnomalyKind>> = vec![Some(AnomalyKind::None); slots];
    for &slot in &order[..config.exclude] {
        kinds[slot] = None;
    }
    for &slot in &order[config.exclude..config.exclude + anomalies] {
        kinds[slot] = Some(AnomalyKind::ANOMALIES[rng.random_range(0..3)]);
    }
    Ok((0..config.patients)
        .map(|p| {
            let patient_id = format!("p{:04}", p + 1);
            PatientPlan {
                seed: seed::derive_str(config.seed, &patient_id),
                patient_id,
                left: kinds[2 * p],
                right: kinds[2 * p + 1],
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub patient_id: String,
    pub side: Side,
    pub label: usize,
    pub anomaly_kind: AnomalyKind,
    pub path: String,
}

impl ManifestRow {
    pub fn sample_id(&self) -> String {
        sample_id(&self.patient_id, self.side)
    }
}

/// Manifest rows plus the directory relative paths resolve against.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub base_dir: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        self.base_dir.join(&row.path)
    }

    pub fn labels(&self) -> Vec<(String, usize)> {
        self.rows.iter().map(|r| (r.sample_id(), r.label)).collect()
    }

    pub fn class_counts(&self) -> (usize, usize) {
        let anomalies = self.rows.iter().filter(|r| r.label == 1).count();
        (self.rows.len() - anomalies, anomalies)
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest, DataError> {
    let path = path.as_ref();
    let err = |message: String| DataError::Manifest {
        path: path.to_path_buf(),
        message,
    };
    let file = std::fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (i, record) in reader.deserialize::<ManifestRow>().enumerate() {
        let row = record.map_err(|e| err(format!("row {}: {e}", i + 1)))?;
        if row.label != row.anomaly_kind.label() {
            return Err(err(format!(
                "row {}: label {} inconsistent with kind {}",
                i + 1,
                row.label,
                row.anomaly_kind
            )));
        }
        if !seen.insert(row.sample_id()) {
            return Err(err(format!("duplicate sample {}", row.sample_id())));
        }
        rows.push(row);
    }
    Ok(Manifest {
        base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        rows,
    })
}

pub fn write_manifest(path: impl AsRef<Path>, rows: &[ManifestRow]) -> Result<(), DataError> {
    let path = path.as_ref();
    let to_err = |e: csv::Error| DataError::Manifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut writer = csv::Writer::from_path(path).map_err(to_err)?;
    for row in rows {
        writer.serialize(row).map_err(to_err)?;
    }
    writer.flush().map_err(|e| DataError::io(path, e))
}

/// Loads every volume listed in a manifest.
pub fn load_samples(manifest: &Manifest) -> Result<Vec<SinusSample>, DataError> {
    manifest
        .rows
        .par_iter()
        .map(|row| {
            let volume = read_volume(manifest.resolve(row))?;
            SinusSample::new(volume, row.patient_id.clone(), row.side, row.anomaly_kind)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct CorpusSummary {
    pub normal: usize,
    pub anomaly: usize,
    pub excluded: usize,
}

fn create_dir(dir: &Path) -> Result<(), DataError> {
    std::fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))
}

fn summarize(rows: &[ManifestRow], excluded: usize) -> CorpusSummary {
    let anomaly = rows.iter().filter(|r| r.label == 1).count();
    CorpusSummary {
        normal: rows.len() - anomaly,
        anomaly,
        excluded,
    }
}

/// Generates heads, preprocesses both sides and writes `volumes/*.vol` plus
/// `manifest.csv` under `out_dir`.
pub fn generate_corpus(config: &CorpusConfig, out_dir: impl AsRef<Path>) -> Result<CorpusSummary, DataError> {
    let out_dir = out_dir.as_ref();
    let plans = plan_corpus(config)?;
    create_dir(&out_dir.join("volumes"))?;
    let per_patient: Vec<Vec<ManifestRow>> = plans
        .par_iter()
        .map(|plan| {
            let left = plan.left.unwrap_or(AnomalyKind::None);
            let right = plan.right.unwrap_or(AnomalyKind::None);
            let head = generate_head(left, right, plan.seed, false).volume;
            let mut rows = Vec::new();
            for side in Side::BOTH {
                let Some(kind) = plan.side(side) else { continue };
                let volume = preprocess_side(&head, &config.crops, side, SAMPLE_EXTENT)?;
                let rel = format!("volumes/{}.vol", sample_id(&plan.patient_id, side));
                write_volume(&volume, out_dir.join(&rel))?;
                rows.push(ManifestRow {
                    patient_id: plan.patient_id.clone(),
                    side,
                    label: kind.label(),
                    anomaly_kind: kind,
                    path: rel,
                });
            }
            Ok(rows)
        })
        .collect::<Result<_, DataError>>()?;
    let rows: Vec<ManifestRow> = per_patient.into_iter().flatten().collect();
    write_manifest(out_dir.join("manifest.csv"), &rows)?;
    Ok(summarize(&rows, config.exclude))
}

/// Writes raw 128^3 heads to `heads/*.vol` with a manifest whose rows point at
/// the head each side belongs to.
pub fn generate_heads(config: &CorpusConfig, out_dir: impl AsRef<Path>) -> Result<CorpusSummary, DataError> {
    let out_dir = out_dir.as_ref();
    let plans = plan_corpus(config)?;
    create_dir(&out_dir.join("heads"))?;
    let per_patient: Vec<Vec<ManifestRow>> = plans
        .par_iter()
        .map(|plan| {
            let left = plan.left.unwrap_or(AnomalyKind::None);
            let right = plan.right.unwrap_or(AnomalyKind::None);
            let rel = format!("heads/{}.vol", plan.patient_id);
            write_volume(&generate_head(left, right, plan.seed, false).volume, out_dir.join(&rel))?;
            Ok(Side::BOTH
                .iter()
                .filter_map(|&side| {
                    plan.side(side).map(|kind| ManifestRow {
                        patient_id: plan.patient_id.clone(),
                        side,
                        label: kind.label(),
                        anomaly_kind: kind,
                        path: rel.clone(),
                    })
                })
                .collect())
        })
        .collect::<Result<_, DataError>>()?;
    let rows: Vec<ManifestRow> = per_patient.into_iter().flatten().collect();
    write_manifest(out_dir.join("manifest.csv"), &rows)?;
    Ok(summarize(&rows, config.exclude))
}

/// Turns a head manifest into preprocessed sample volumes under `out_dir`.
pub fn preprocess_manifest(
    heads: &Manifest,
    crops: &CropConfig,
    out_dir: impl AsRef<Path>,
) -> Result<CorpusSummary, DataError> {
    let out_dir = out_dir.as_ref();
    create_dir(&out_dir.join("volumes"))?;
    let rows: Vec<ManifestRow> = heads
        .rows
        .par_iter()
        .map(|row| {
            let head = read_volume(heads.resolve(row))?;
            let volume = preprocess_side(&head, crops, row.side, SAMPLE_EXTENT)?;
            let rel = format!("volumes/{}.vol", row.sample_id());
            write_volume(&volume, out_dir.join(&rel))?;
            Ok(ManifestRow {
                path: rel,
                ..row.clone()
            })
        })
        .collect::<Result<_, DataError>>()?;
    write_manifest(out_dir.join("manifest.csv"), &rows)?;
    Ok(summarize(&rows, 0))
}
