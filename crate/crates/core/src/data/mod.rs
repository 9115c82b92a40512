//! Volume IO, phantom generation, preprocessing, augmentation and manifests.

mod augment;
mod corpus;
mod phantom;
mod preprocess;
mod volume;

pub use augment::{augment, augment_volume, AugmentationPolicy, OUT_OF_BOUNDS};
pub use corpus::{
    generate_corpus, generate_heads, load_samples, plan_corpus, preprocess_manifest, read_manifest, write_manifest,
    CorpusConfig, CorpusSummary, Manifest, ManifestRow, PatientPlan, DEFAULT_NORMAL_RATIO,
};
pub use phantom::{generate_head, generate_phantom, Phantom, SideTruth, HEAD_EXTENT, TISSUE_THRESHOLD};
pub use preprocess::{
    crop, extract_sinus_subvolumes, flip_axis, flip_right_to_left, normalize_minus1_1, preprocess_pipeline,
    preprocess_side, resize_trilinear, CropBox, CropConfig, SAMPLE_EXTENT,
};
pub use volume::{decode_volume, encode_volume, read_volume, write_volume, Volume};

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("not a VOL1 file: bad magic bytes")]
    BadMagic,
    #[error("truncated volume: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("payload does not match extents: expected {expected}, found {actual}")]
    ExtentMismatch { expected: usize, actual: usize },
    #[error("invalid extents {0:?}")]
    InvalidExtent([usize; 3]),
    #[error("invalid voxel spacing {0:?}")]
    InvalidSpacing([f32; 3]),
    #[error("crop box at {origin:?} of size {size:?} exceeds volume extents {extents:?}")]
    CropOutOfBounds {
        origin: [usize; 3],
        size: [usize; 3],
        extents: [usize; 3],
    },
    #[error("cannot resize {from:?} to {target:?}: every extent must be at least 2")]
    DegenerateExtent { from: [usize; 3], target: [usize; 3] },
    #[error("invalid sample: {0}")]
    Sample(String),
    #[error("invalid corpus configuration: {0}")]
    Config(String),
    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Left, Side::Right];

    pub fn as_str(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Side {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "left" => Ok(Side::Left),
            "right" => Ok(Side::Right),
            other => Err(format!("unknown side `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnomalyKind {
    None,
    Thickening,
    Polyp,
    Cyst,
}

impl AnomalyKind {
    pub const ANOMALIES: [AnomalyKind; 3] = [AnomalyKind::Thickening, AnomalyKind::Polyp, AnomalyKind::Cyst];

    /// 0 for normal, 1 for any anomaly.
    pub fn label(self) -> usize {
        usize::from(self != AnomalyKind::None)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AnomalyKind::None => "none",
            AnomalyKind::Thickening => "thickening",
            AnomalyKind::Polyp => "polyp",
            AnomalyKind::Cyst => "cyst",
        }
    }
}

impl fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AnomalyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(AnomalyKind::None),
            "thickening" => Ok(AnomalyKind::Thickening),
            "polyp" => Ok(AnomalyKind::Polyp),
            "cyst" => Ok(AnomalyKind::Cyst),
            other => Err(format!("unknown anomaly kind `{other}`")),
        }
    }
}

/// Sample id of one sinus: `{patient_id}_{side}`.
pub fn sample_id(patient_id: &str, side: Side) -> String {
    format!("{patient_id}_{side}")
}

/// One preprocessed maxillary sinus volume with its label.
#[derive(Clone, Debug, PartialEq)]
pub struct SinusSample {
    pub volume: Volume,
    pub label: usize,
    pub patient_id: String,
    pub side: Side,
    pub anomaly_kind: AnomalyKind,
}

impl SinusSample {
    pub fn new(volume: Volume, patient_id: String, side: Side, anomaly_kind: AnomalyKind) -> Result<Self, DataError> {
        let sample = Self {
            volume,
            label: anomaly_kind.label(),
            patient_id,
            side,
            anomaly_kind,
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn id(&self) -> String {
        sample_id(&self.patient_id, self.side)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let ext = self.volume.extents();
        if ext != [SAMPLE_EXTENT; 3] {
            return Err(DataError::Sample(format!("{}: extent {ext:?}, expected 32^3", self.id())));
        }
        if !self.volume.voxels().iter().all(|v| (-1.0..=1.0).contains(v)) {
            return Err(DataError::Sample(format!("{}: voxel outside [-1, 1]", self.id())));
        }
        if self.label != self.anomaly_kind.label() {
            return Err(DataError::Sample(format!(
                "{}: label {} inconsistent with kind {}",
                self.id(),
                self.label,
                self.anomaly_kind
            )));
        }
        Ok(())
    }
}
