//! Training regimes, the two-stage contrastive protocol, and the nested-CV
//! and label-efficiency harnesses.

mod artifacts;
mod experiments;

pub use artifacts::{
    export_embeddings, read_embeddings_csv, write_embeddings_csv, write_loss_csv, write_run_dir, EmbeddingRow,
    RunArtifacts,
};
pub use experiments::{
    run_label_efficiency, run_nested_cv, write_label_efficiency_csv, FoldResult, LabelEfficiencyResult,
    LabelEfficiencyRow, NestedCvResult,
};

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{augment_volume, AugmentationPolicy, DataError, SinusSample, Volume, SAMPLE_EXTENT};
use crate::losses::{loss_ce, loss_combined, loss_simclr, loss_supcon, ContrastiveBatchIndex, LossConfig, LossError};
use crate::metrics::{evaluate, MetricsError, MetricsReport, ScoredPrediction};
use crate::nn::{anomaly_scores, AdamConfig, AdamState, Bound, EncoderConfig, NnError, ParamGroup, SupConNet};
use crate::sampling::{make_balanced_batches, BatchSpec, SamplingError};
use crate::seed;
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss {value} in stage {stage}, epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        stage: u8,
        epoch: usize,
        batch: usize,
        value: f64,
    },
    #[error("training set must contain both classes (normal {normal}, anomaly {anomaly})")]
    TrainClasses { normal: usize, anomaly: usize },
    #[error("unknown sample id {0}")]
    UnknownId(String),
    #[error("leakage: {0}")]
    Leakage(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Cross-entropy through the classifier head, no augmentation.
    Ce,
    /// Cross-entropy on augmented batches.
    CeAug,
    /// Class-prior InfoNCE on two-view batches, then a classifier stage.
    Simclr,
    /// Supervised contrastive loss, then a classifier stage.
    Supcon,
    /// Supervised contrastive plus weighted cross-entropy, one stage.
    Combined,
}

impl Regime {
    pub const ALL: [Regime; 5] = [Regime::Ce, Regime::CeAug, Regime::Simclr, Regime::Supcon, Regime::Combined];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Ce => "ce",
            Regime::CeAug => "ce_aug",
            Regime::Simclr => "simclr",
            Regime::Supcon => "supcon",
            Regime::Combined => "combined",
        }
    }

    /// Contrastive pretraining followed by a classifier stage.
    pub fn is_two_stage(self) -> bool {
        matches!(self, Regime::Simclr | Regime::Supcon)
    }

    pub fn augments(self) -> bool {
        self != Regime::Ce
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Regime::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown regime `{s}` (expected ce, ce_aug, simclr, supcon or combined)"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub regime: Regime,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub loss: LossConfig,
    pub augmentation: AugmentationPolicy,
    pub seed: u64,
    pub encoder: EncoderConfig,
    /// Classifier epochs after contrastive pretraining (simclr, supcon).
    pub stage2_epochs: usize,
    /// Keep training the encoder during the classifier stage.
    pub fine_tune: bool,
    /// Batch size used for inference only.
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Combined,
            epochs: 200,
            batch_size: 128,
            lr: 1e-4,
            loss: LossConfig::default(),
            augmentation: AugmentationPolicy::default(),
            seed: 0,
            encoder: EncoderConfig::default(),
            stage2_epochs: 50,
            fine_tune: false,
            eval_batch: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if self.eval_batch == 0 {
            return bad("eval batch must be positive".into());
        }
        BatchSpec {
            batch_size: self.batch_size,
            two_view: false,
        }
        .validate()?;
        self.loss.validate()?;
        self.encoder.validate()?;
        self.augmentation.validate().map_err(TrainError::Config)?;
        if self.encoder.input_extent != SAMPLE_EXTENT {
            return bad(format!(
                "encoder input extent {} does not match sample extent {SAMPLE_EXTENT}",
                self.encoder.input_extent
            ));
        }
        if matches!(self.regime, Regime::Supcon | Regime::Combined) && self.batch_size < 4 {
            return bad(format!(
                "{} needs at least two samples per class per batch (batch size {})",
                self.regime, self.batch_size
            ));
        }
        Ok(())
    }

    fn spec(&self) -> BatchSpec {
        BatchSpec {
            batch_size: self.batch_size,
            two_view: self.regime == Regime::Simclr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub stage: u8,
    pub epoch: usize,
    pub loss: f64,
    /// Contrastive term, when the stage has one.
    pub contrastive: Option<f64>,
    /// Cross-entropy term, when the stage has one.
    pub ce: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub losses: Vec<EpochLoss>,
    pub train_samples: usize,
    pub validation: Option<MetricsReport>,
    /// Seconds spent training; kept out of written artifacts.
    #[serde(skip)]
    pub wall_clock_secs: f64,
    /// Every sample id that entered an optimizer step.
    #[serde(skip)]
    pub trained_ids: BTreeSet<String>,
}

pub struct TrainOutcome {
    pub net: SupConNet,
    pub record: RunRecord,
}

/// `[n, 1, d, h, w]` input tensor from volumes.
pub fn stack_volumes(volumes: &[&Volume]) -> Result<Tensor<f32>> {
    let ext = volumes.first().map(|v| v.extents()).unwrap_or([SAMPLE_EXTENT; 3]);
    let mut data = Vec::with_capacity(volumes.len() * ext.iter().product::<usize>());
    for v in volumes {
        if v.extents() != ext {
            return Err(TrainError::Config(format!("mixed volume extents {:?} and {ext:?}", v.extents())));
        }
        data.extend_from_slice(v.voxels());
    }
    Ok(Tensor::new([volumes.len(), 1, ext[0], ext[1], ext[2]], data)?)
}

/// Anomaly scores through the classifier head.
pub fn predict(net: &SupConNet, samples: &[SinusSample], eval_batch: usize) -> Result<Vec<ScoredPrediction>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(eval_batch.max(1)) {
        let vols: Vec<&Volume> = chunk.iter().map(|s| &s.volume).collect();
        let scores = anomaly_scores(&net.logits(stack_volumes(&vols)?)?);
        out.extend(
            chunk
                .iter()
                .zip(scores)
                .map(|(s, p)| ScoredPrediction::from_score(s.id(), s.label, p)),
        );
    }
    Ok(out)
}

fn encoder_features(net: &SupConNet, samples: &[SinusSample], eval_batch: usize) -> Result<Tensor<f32>> {
    let mut rows = Vec::new();
    let mut dim = net.config().feature_dim;
    for chunk in samples.chunks(eval_batch.max(1)) {
        let vols: Vec<&Volume> = chunk.iter().map(|s| &s.volume).collect();
        let f = net.features(stack_volumes(&vols)?)?;
        dim = f.shape()[1];
        rows.extend_from_slice(f.data());
    }
    Ok(Tensor::new([samples.len(), dim], rows)?)
}

fn gather_rows(t: &Tensor<f32>, idx: &[usize]) -> Result<Tensor<f32>> {
    let dim = t.shape()[1];
    let mut data = Vec::with_capacity(idx.len() * dim);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * dim..(i + 1) * dim]);
    }
    Ok(Tensor::new([idx.len(), dim], data)?)
}

/// Seeds shared by every regime so that runs differ only in what they
/// optimize.
struct Seeds {
    init: u64,
    batches: u64,
    augment: u64,
}

impl Seeds {
    fn new(seed: u64) -> Self {
        Self {
            init: seed::derive_str(seed, "init"),
            batches: seed::derive_str(seed, "batches"),
            augment: seed::derive_str(seed, "augment"),
        }
    }

    fn batch(&self, stage: u8, epoch: usize, batch: usize) -> u64 {
        let s = seed::derive(self.augment, u64::from(stage));
        seed::derive(seed::derive(s, epoch as u64), batch as u64)
    }
}

/// Per-step loss values, accumulated into an [`EpochLoss`].
#[derive(Default)]
struct Accumulator {
    loss: f64,
    contrastive: Option<f64>,
    ce: Option<f64>,
    steps: usize,
}

impl Accumulator {
    fn add(&mut self, loss: f64, contrastive: Option<f64>, ce: Option<f64>) {
        self.loss += loss;
        if let Some(c) = contrastive {
            *self.contrastive.get_or_insert(0.0) += c;
        }
        if let Some(c) = ce {
            *self.ce.get_or_insert(0.0) += c;
        }
        self.steps += 1;
    }

    fn finish(self, stage: u8, epoch: usize) -> EpochLoss {
        let n = self.steps.max(1) as f64;
        EpochLoss {
            stage,
            epoch,
            loss: self.loss / n,
            contrastive: self.contrastive.map(|c| c / n),
            ce: self.ce.map(|c| c / n),
        }
    }
}

fn check_finite(value: f64, stage: u8, epoch: usize, batch: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(TrainError::NonFiniteLoss {
            stage,
            epoch,
            batch,
            value,
        })
    }
}

/// Non-finite values reaching a domain-checked op mean the loss diverged.
fn diagnose(e: TrainError, stage: u8, epoch: usize, batch: usize) -> TrainError {
    let tensor = match &e {
        TrainError::Tensor(t) | TrainError::Loss(LossError::Tensor(t)) | TrainError::Nn(NnError::Tensor(t)) => Some(t),
        _ => None,
    };
    match tensor {
        Some(&TensorError::Domain { value, .. }) if !value.is_finite() => TrainError::NonFiniteLoss {
            stage,
            epoch,
            batch,
            value,
        },
        _ => e,
    }
}

struct Trainer<'a> {
    config: &'a TrainConfig,
    samples: &'a [SinusSample],
    labels: Vec<usize>,
    seeds: Seeds,
    net: SupConNet,
    trained: BTreeSet<usize>,
}

impl Trainer<'_> {
    fn inputs(&self, batch: &[usize], stage: u8, epoch: usize, b: usize, augment: bool) -> Result<Tensor<f32>> {
        let vols: Vec<Volume> = if augment {
            let s = self.seeds.batch(stage, epoch, b);
            let policy = &self.config.augmentation;
            batch
                .par_iter()
                .enumerate()
                .map(|(slot, &i)| augment_volume(&self.samples[i].volume, policy, seed::derive(s, slot as u64)))
                .collect()
        } else {
            batch.iter().map(|&i| self.samples[i].volume.clone()).collect()
        };
        stack_volumes(&vols.iter().collect::<Vec<_>>())
    }

    /// Two views per source: slot `v` of `0..2N` draws from source `v mod N`
    /// with the same per-slot seeds as single-view batches.
    fn two_view_inputs(&self, batch: &[usize], stage: u8, epoch: usize, b: usize) -> Result<Tensor<f32>> {
        let s = self.seeds.batch(stage, epoch, b);
        let n = batch.len();
        let policy = &self.config.augmentation;
        let vols: Vec<Volume> = (0..2 * n)
            .into_par_iter()
            .map(|v| augment_volume(&self.samples[batch[v % n]].volume, policy, seed::derive(s, v as u64)))
            .collect();
        stack_volumes(&vols.iter().collect::<Vec<_>>())
    }

    fn step(&mut self, g: &mut Graph<f32>, vars: &[Var], loss: Var, adam: &mut AdamState) -> Result<()> {
        g.backward(loss)?;
        let grads: Vec<Option<Tensor<f32>>> = vars.iter().map(|&v| g.take_grad(v)).collect();
        adam.step(self.net.params_mut(), &grads)?;
        Ok(())
    }

    /// Loss graph of one stage-1 batch: total, contrastive and cross-entropy terms.
    fn forward_main(
        &self,
        g: &mut Graph<f32>,
        bound: &Bound,
        batch: &[usize],
        epoch: usize,
        b: usize,
    ) -> Result<(Var, Option<Var>, Option<Var>)> {
        let config = self.config;
        let regime = config.regime;
        let labels: Vec<usize> = batch.iter().map(|&i| self.labels[i]).collect();
        let x = if regime == Regime::Simclr {
            self.two_view_inputs(batch, 1, epoch, b)?
        } else {
            self.inputs(batch, 1, epoch, b, regime.augments())?
        };
        let x = g.constant(x);
        let features = self.net.encode(g, bound, x)?;
        Ok(match regime {
            Regime::Ce | Regime::CeAug => {
                let logits = self.net.project_classify(g, bound, features)?;
                let l = loss_ce(g, logits, &labels)?;
                (l, None, Some(l))
            }
            Regime::Simclr => {
                let z = self.net.project_contrastive(g, bound, features)?;
                let index = ContrastiveBatchIndex::two_view(&labels)?;
                let l = loss_simclr(g, z, &index, &config.loss)?;
                (l, Some(l), None)
            }
            Regime::Supcon => {
                let z = self.net.project_contrastive(g, bound, features)?;
                let index = ContrastiveBatchIndex::new(labels.clone())?;
                let l = loss_supcon(g, z, &index, &config.loss)?;
                (l, Some(l), None)
            }
            Regime::Combined => {
                let z = self.net.project_contrastive(g, bound, features)?;
                let logits = self.net.project_classify(g, bound, features)?;
                let index = ContrastiveBatchIndex::new(labels.clone())?;
                let l = loss_combined(g, z, logits, &index, &config.loss)?;
                // the components are recomputed on detached copies for logging
                let zc = g.constant(g.value(z).clone());
                let sc = loss_supcon(g, zc, &index, &config.loss)?;
                let lc = g.constant(g.value(logits).clone());
                let ce = loss_ce(g, lc, &labels)?;
                (l, Some(sc), Some(ce))
            }
        })
    }

    /// Stage 1 of every regime (the only stage for ce, ce_aug, combined).
    fn main_stage(&mut self, losses: &mut Vec<EpochLoss>) -> Result<()> {
        let config = self.config;
        let regime = config.regime;
        let spec = config.spec();
        let mut adam = AdamState::new(self.net.params(), AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        });
        for epoch in 0..config.epochs {
            let batches = make_balanced_batches(&self.labels, &spec, self.seeds.batches, epoch as u64)?;
            let mut acc = Accumulator::default();
            for (b, batch) in batches.iter().enumerate() {
                let mut g = Graph::<f32>::new();
                let bound = self.net.bind(&mut g, |group| match regime {
                    Regime::Ce | Regime::CeAug => group != ParamGroup::Contrastive,
                    Regime::Simclr | Regime::Supcon => group != ParamGroup::Classifier,
                    Regime::Combined => true,
                });
                let (loss, contrastive, ce) = self
                    .forward_main(&mut g, &bound, batch, epoch, b)
                    .map_err(|e| diagnose(e, 1, epoch, b))?;
                let value = g.value(loss).item().unwrap() as f64;
                check_finite(value, 1, epoch, b)?;
                let scalar = |v: Option<Var>| v.map(|v| g.value(v).item().unwrap() as f64);
                acc.add(value, scalar(contrastive), scalar(ce));
                self.step(&mut g, bound.vars(), loss, &mut adam)?;
                self.trained.extend(batch.iter().copied());
            }
            let e = acc.finish(1, epoch);
            log::debug!("{regime} stage 1 epoch {epoch}: loss {:.6}", e.loss);
            losses.push(e);
        }
        Ok(())
    }

    /// Classifier stage for the two-stage regimes: cross-entropy on
    /// unaugmented balanced batches, encoder frozen unless fine-tuning.
    fn classifier_stage(&mut self, losses: &mut Vec<EpochLoss>) -> Result<()> {
        let config = self.config;
        let spec = BatchSpec {
            batch_size: config.batch_size,
            two_view: false,
        };
        let mut adam = AdamState::new(self.net.params(), AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        });
        let cached = if config.fine_tune {
            None
        } else {
            Some(encoder_features(&self.net, self.samples, config.eval_batch)?)
        };
        let batch_seed = seed::derive_str(self.seeds.batches, "stage2");
        for epoch in 0..config.stage2_epochs {
            let batches = make_balanced_batches(&self.labels, &spec, batch_seed, epoch as u64)?;
            let mut acc = Accumulator::default();
            for (b, batch) in batches.iter().enumerate() {
                let mut g = Graph::<f32>::new();
                let fine_tune = config.fine_tune;
                let bound = self.net.bind(&mut g, |group| match group {
                    ParamGroup::Classifier => true,
                    ParamGroup::Encoder => fine_tune,
                    ParamGroup::Contrastive => false,
                });
                let labels: Vec<usize> = batch.iter().map(|&i| self.labels[i]).collect();
                let loss = (|| -> Result<Var> {
                    let features = match &cached {
                        Some(f) => g.constant(gather_rows(f, batch)?),
                        None => {
                            let x = g.constant(self.inputs(batch, 2, epoch, b, false)?);
                            self.net.encode(&mut g, &bound, x)?
                        }
                    };
                    let logits = self.net.project_classify(&mut g, &bound, features)?;
                    Ok(loss_ce(&mut g, logits, &labels)?)
                })()
                .map_err(|e| diagnose(e, 2, epoch, b))?;
                let value = g.value(loss).item().unwrap() as f64;
                check_finite(value, 2, epoch, b)?;
                acc.add(value, None, Some(value));
                self.step(&mut g, bound.vars(), loss, &mut adam)?;
                self.trained.extend(batch.iter().copied());
            }
            let e = acc.finish(2, epoch);
            log::debug!("{} stage 2 epoch {epoch}: loss {:.6}", config.regime, e.loss);
            losses.push(e);
        }
        Ok(())
    }
}

/// Trains one model. `validation` (possibly empty) is scored with the final
/// model and never enters an optimizer step.
pub fn train(samples: &[SinusSample], validation: &[SinusSample], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let anomaly = labels.iter().filter(|&&l| l == 1).count();
    if anomaly == 0 || anomaly == labels.len() {
        return Err(TrainError::TrainClasses {
            normal: labels.len() - anomaly,
            anomaly,
        });
    }
    let start = Instant::now();
    let seeds = Seeds::new(config.seed);
    let mut trainer = Trainer {
        config,
        samples,
        labels,
        net: SupConNet::new(config.encoder.clone(), seeds.init)?,
        seeds,
        trained: BTreeSet::new(),
    };
    let mut losses = Vec::new();
    trainer.main_stage(&mut losses)?;
    if config.regime.is_two_stage() {
        trainer.classifier_stage(&mut losses)?;
    }
    let validation_report = if validation.is_empty() {
        None
    } else {
        Some(evaluate(&predict(&trainer.net, validation, config.eval_batch)?)?)
    };
    let trained_ids = trainer.trained.iter().map(|&i| samples[i].id()).collect();
    let wall_clock_secs = start.elapsed().as_secs_f64();
    log::info!(
        "{} trained on {} samples in {wall_clock_secs:.1}s, final loss {:.5}",
        config.regime,
        samples.len(),
        losses.last().map_or(f64::NAN, |e| e.loss)
    );
    Ok(TrainOutcome {
        net: trainer.net,
        record: RunRecord {
            config: config.clone(),
            losses,
            train_samples: samples.len(),
            validation: validation_report,
            wall_clock_secs,
            trained_ids,
        },
    })
}

/// Samples in `ids` order, looked up by sample id.
pub fn select_samples(samples: &[SinusSample], ids: &[String]) -> Result<Vec<SinusSample>> {
    let by_id: HashMap<String, &SinusSample> = samples.iter().map(|s| (s.id(), s)).collect();
    ids.iter()
        .map(|id| by_id.get(id).map(|s| (*s).clone()).ok_or_else(|| TrainError::UnknownId(id.clone())))
        .collect()
}
