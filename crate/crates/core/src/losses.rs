//! Contrastive and classification objectives built from graph operations.
//!
//! Every loss takes unit-norm embeddings (rows of `[n, dim]`) or raw logits
//! and returns a scalar [`Var`] so gradients flow back into the network.
//! Exponentials are stabilized per anchor row with a detached maximum.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};

pub const CLASS_NAMES: [&str; 2] = ["normal", "anomaly"];

const NORM_TOL: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("temperature must be positive and finite, got {0}")]
    Temperature(f64),
    #[error("loss weight must be non-negative and finite, got {0}")]
    Weight(f64),
    #[error("label {label} at index {index} is not 0 or 1")]
    Label { index: usize, label: usize },
    #[error("class `{class}` has {count} members in the batch, at least {needed} required")]
    ClassTooSmall {
        class: &'static str,
        count: usize,
        needed: usize,
    },
    #[error("two-view loss needs a pairing map")]
    MissingPairs,
    #[error("invalid pairing at index {index}: {reason}")]
    Pairing { index: usize, reason: &'static str },
    #[error("embedding row {row} has norm {norm}, expected 1")]
    NotUnitNorm { row: usize, norm: f64 },
    #[error("batch has {labels} labels but {rows} rows")]
    BatchSize { labels: usize, rows: usize },
    #[error("zero-norm vector passed to cosine similarity")]
    ZeroNorm,
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Where the positive sum sits in the supervised contrastive loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SupConVariant {
    /// `-log(sum_pos / (sum_pos + sum_neg))` per anchor.
    #[default]
    Inside,
    /// `-mean_pos log(exp(s_p) / (sum_pos + sum_neg))` per anchor.
    Outside,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub temperature: f64,
    pub lambda: f64,
    pub variant: SupConVariant,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            lambda: 1.0,
            variant: SupConVariant::Inside,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(LossError::Temperature(self.temperature));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(LossError::Weight(self.lambda));
        }
        Ok(())
    }
}

/// Class membership of every batch row plus, for two-view batches, the
/// index of each row's augmentation twin.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveBatchIndex {
    labels: Vec<usize>,
    pairs: Option<Vec<usize>>,
}

impl ContrastiveBatchIndex {
    pub fn new(labels: Vec<usize>) -> Result<Self> {
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l > 1) {
            return Err(LossError::Label { index, label });
        }
        Ok(Self { labels, pairs: None })
    }

    pub fn with_pairs(labels: Vec<usize>, pairs: Vec<usize>) -> Result<Self> {
        let mut index = Self::new(labels)?;
        if pairs.len() != index.labels.len() {
            return Err(LossError::BatchSize {
                labels: index.labels.len(),
                rows: pairs.len(),
            });
        }
        for (i, &k) in pairs.iter().enumerate() {
            let reason = if k >= pairs.len() {
                "twin out of range"
            } else if k == i {
                "row paired with itself"
            } else if pairs[k] != i {
                "pairing is not symmetric"
            } else if index.labels[k] != index.labels[i] {
                "twin has a different class"
            } else {
                continue;
            };
            return Err(LossError::Pairing { index: i, reason });
        }
        index.pairs = Some(pairs);
        Ok(index)
    }

    /// Standard two-view layout: view one at `[0, n)`, view two at `[n, 2n)`.
    pub fn two_view(labels: &[usize]) -> Result<Self> {
        let n = labels.len();
        let doubled = labels.iter().chain(labels).copied().collect();
        Self::with_pairs(doubled, (0..2 * n).map(|i| (i + n) % (2 * n)).collect())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pairs(&self) -> Option<&[usize]> {
        self.pairs.as_deref()
    }

    pub fn class_count(&self, class: usize) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    fn require_class_size(&self, needed: usize) -> Result<()> {
        for (class, name) in CLASS_NAMES.iter().enumerate() {
            let count = self.class_count(class);
            if count < needed {
                return Err(LossError::ClassTooSmall {
                    class: name,
                    count,
                    needed,
                });
            }
        }
        Ok(())
    }

    /// Row weights `1 / |I_c|` for the class of each row.
    fn class_weights(&self) -> Vec<f64> {
        let counts = [self.class_count(0), self.class_count(1)];
        self.labels.iter().map(|&l| 1.0 / counts[l] as f64).collect()
    }
}

pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(LossError::ZeroNorm);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

fn check_embeddings<T: Scalar>(g: &Graph<T>, z: Var, index: &ContrastiveBatchIndex) -> Result<()> {
    let shape = g.shape(z);
    if shape.len() != 2 {
        return Err(TensorError::Rank {
            op: "contrastive loss",
            expected: 2,
            shape: shape.to_vec(),
        }
        .into());
    }
    if shape[0] != index.len() {
        return Err(LossError::BatchSize {
            labels: index.len(),
            rows: shape[0],
        });
    }
    let dim = shape[1];
    for (row, chunk) in g.value(z).data().chunks(dim.max(1)).enumerate() {
        let norm = chunk.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        if !((norm - 1.0).abs() <= NORM_TOL) {
            return Err(LossError::NotUnitNorm { row, norm });
        }
    }
    Ok(())
}

/// Row-wise `log sum_{j in mask_i} exp(x_ij)` of an `[n, n]` matrix.
///
/// Entries outside the mask are replaced by `-inf` and the row maximum over the
/// mask is subtracted as a constant, so no exponent is positive.
fn masked_logsumexp<T: Scalar>(g: &mut Graph<T>, x: Var, mask: &[bool]) -> Result<Var> {
    let n = g.shape(x)[0];
    let values = g.value(x).data();
    let mut shift = vec![T::zero(); n * n];
    let mut row_max = vec![T::zero(); n];
    for i in 0..n {
        let m = (0..n)
            .filter(|&j| mask[i * n + j])
            .map(|j| values[i * n + j])
            .fold(T::neg_infinity(), T::max);
        for j in 0..n {
            shift[i * n + j] = if mask[i * n + j] { -m } else { T::neg_infinity() };
        }
        row_max[i] = m;
    }
    let shift = g.constant(Tensor::new([n, n], shift)?);
    let shifted = g.add(x, shift)?;
    let e = g.exp(shifted);
    let s = g.sum_axis(e, 1, false)?;
    let l = g.log(s)?;
    let m = g.constant(Tensor::new([n], row_max)?);
    Ok(g.add(l, m)?)
}

/// `sum_i w_i * (lse_den_i - lse_num_i)` over anchors.
fn weighted_sum<T: Scalar>(g: &mut Graph<T>, per_anchor: Var, weights: &[f64]) -> Result<Var> {
    let n = weights.len();
    let w = g.constant(Tensor::new([n], weights.iter().map(|&w| T::of_f64(w)).collect())?);
    let terms = g.mul(per_anchor, w)?;
    Ok(g.sum(terms))
}

fn similarity<T: Scalar>(g: &mut Graph<T>, z: Var, temperature: f64) -> Result<Var> {
    let zt = g.transpose(z)?;
    let s = g.matmul(z, zt)?;
    Ok(g.mul_scalar(s, T::of_f64(1.0 / temperature)))
}

/// Class-prior InfoNCE over a two-view batch.
///
/// Anchor `i` has the single positive `k(i)`; its negatives are every row of
/// the other class. Same-class rows other than the twin are ignored.
pub fn loss_simclr<T: Scalar>(
    g: &mut Graph<T>,
    z: Var,
    index: &ContrastiveBatchIndex,
    config: &LossConfig,
) -> Result<Var> {
    config.validate()?;
    let pairs = index.pairs().ok_or(LossError::MissingPairs)?;
    index.require_class_size(1)?;
    check_embeddings(g, z, index)?;
    let n = index.len();
    let labels = index.labels();
    let mut pos = vec![false; n * n];
    let mut den = vec![false; n * n];
    for i in 0..n {
        pos[i * n + pairs[i]] = true;
        for j in 0..n {
            den[i * n + j] = j == pairs[i] || labels[j] != labels[i];
        }
    }
    let s = similarity(g, z, config.temperature)?;
    let num = masked_logsumexp(g, s, &pos)?;
    let all = masked_logsumexp(g, s, &den)?;
    let per_anchor = g.sub(all, num)?;
    weighted_sum(g, per_anchor, &index.class_weights())
}

/// Supervised contrastive loss: every other same-class row is a positive.
pub fn loss_supcon<T: Scalar>(
    g: &mut Graph<T>,
    z: Var,
    index: &ContrastiveBatchIndex,
    config: &LossConfig,
) -> Result<Var> {
    config.validate()?;
    index.require_class_size(2)?;
    check_embeddings(g, z, index)?;
    let n = index.len();
    let labels = index.labels();
    let mut pos = vec![false; n * n];
    let mut den = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            pos[i * n + j] = j != i && labels[j] == labels[i];
            den[i * n + j] = j != i;
        }
    }
    let s = similarity(g, z, config.temperature)?;
    let all = masked_logsumexp(g, s, &den)?;
    let per_anchor = match config.variant {
        SupConVariant::Inside => {
            let num = masked_logsumexp(g, s, &pos)?;
            g.sub(all, num)?
        }
        SupConVariant::Outside => {
            // lse_den_i - mean_{p in P_i} s_ip
            let mask: Vec<T> = pos.iter().map(|&p| if p { T::one() } else { T::zero() }).collect();
            let mask = g.constant(Tensor::new([n, n], mask)?);
            let picked = g.mul(s, mask)?;
            let pos_sum = g.sum_axis(picked, 1, false)?;
            let inv: Vec<T> = (0..n)
                .map(|i| T::of_f64(1.0 / (index.class_count(labels[i]) - 1) as f64))
                .collect();
            let inv = g.constant(Tensor::new([n], inv)?);
            let pos_mean = g.mul(pos_sum, inv)?;
            g.sub(all, pos_mean)?
        }
    };
    weighted_sum(g, per_anchor, &index.class_weights())
}

/// Mean cross-entropy of `[n, 2]` logits against labels in `{0, 1}`.
pub fn loss_ce<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits);
    if shape.len() != 2 || shape[1] != CLASS_NAMES.len() {
        return Err(TensorError::Rank {
            op: "loss_ce",
            expected: 2,
            shape: shape.to_vec(),
        }
        .into());
    }
    let n = shape[0];
    if labels.len() != n {
        return Err(LossError::BatchSize {
            labels: labels.len(),
            rows: n,
        });
    }
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l > 1) {
        return Err(LossError::Label { index, label });
    }
    let row_max: Vec<T> = g.value(logits).data().chunks(2).map(|r| r[0].max(r[1])).collect();
    let m = g.constant(Tensor::new([n, 1], row_max.clone())?);
    let shifted = g.sub(logits, m)?;
    let e = g.exp(shifted);
    let s = g.sum_axis(e, 1, false)?;
    let l = g.log(s)?;
    let m = g.constant(Tensor::new([n], row_max)?);
    let lse = g.add(l, m)?;
    let onehot: Vec<T> = labels
        .iter()
        .flat_map(|&y| if y == 0 { [T::one(), T::zero()] } else { [T::zero(), T::one()] })
        .collect();
    let onehot = g.constant(Tensor::new([n, 2], onehot)?);
    let picked = g.mul(logits, onehot)?;
    let target = g.sum_axis(picked, 1, false)?;
    let nll = g.sub(lse, target)?;
    Ok(g.mean(nll))
}

/// `loss_supcon + lambda * loss_ce`. With `lambda == 0` the supervised
/// contrastive term is returned unchanged.
pub fn loss_combined<T: Scalar>(
    g: &mut Graph<T>,
    z: Var,
    logits: Var,
    index: &ContrastiveBatchIndex,
    config: &LossConfig,
) -> Result<Var> {
    let sc = loss_supcon(g, z, index, config)?;
    let ce = loss_ce(g, logits, index.labels())?;
    if config.lambda == 0.0 {
        return Ok(sc);
    }
    let weighted = g.mul_scalar(ce, T::of_f64(config.lambda));
    Ok(g.add(sc, weighted)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identical(n: usize, dim: usize) -> Tensor<f64> {
        let mut row = vec![0.0; dim];
        row[0] = 1.0;
        Tensor::new([n, dim], row.repeat(n)).unwrap()
    }

    #[test]
    fn cosine_basics() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
        assert_eq!(cosine_sim(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 1.0);
        assert_eq!(cosine_sim(&[3.0, 4.0], &[-3.0, -4.0]).unwrap(), -1.0);
        assert!(matches!(cosine_sim(&[0.0], &[1.0]), Err(LossError::ZeroNorm)));
    }

    #[test]
    fn supcon_identical_embeddings() {
        let mut g = Graph::new();
        let z = g.constant(identical(4, 8));
        let idx = ContrastiveBatchIndex::new(vec![0, 0, 1, 1]).unwrap();
        let l = loss_supcon(&mut g, z, &idx, &LossConfig::default()).unwrap();
        assert!((g.value(l).data()[0] - 2.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn supcon_rejects_singleton_class() {
        let mut g = Graph::new();
        let z = g.constant(identical(3, 4));
        let idx = ContrastiveBatchIndex::new(vec![0, 0, 1]).unwrap();
        let err = loss_supcon(&mut g, z, &idx, &LossConfig::default()).unwrap_err();
        assert!(err.to_string().contains("anomaly"), "{err}");
    }

    #[test]
    fn non_unit_rows_are_rejected() {
        let mut g = Graph::new();
        let z = g.constant(identical(4, 4).map(|v| v * 2.0));
        let idx = ContrastiveBatchIndex::new(vec![0, 0, 1, 1]).unwrap();
        assert!(matches!(
            loss_supcon(&mut g, z, &idx, &LossConfig::default()),
            Err(LossError::NotUnitNorm { row: 0, .. })
        ));
    }

    #[test]
    fn pairing_validation() {
        assert!(ContrastiveBatchIndex::with_pairs(vec![0, 0], vec![1, 0]).is_ok());
        assert!(ContrastiveBatchIndex::with_pairs(vec![0, 1], vec![1, 0]).is_err());
        assert!(ContrastiveBatchIndex::with_pairs(vec![0, 0, 0], vec![1, 2, 0]).is_err());
        let tv = ContrastiveBatchIndex::two_view(&[0, 1]).unwrap();
        assert_eq!(tv.pairs().unwrap(), &[2, 3, 0, 1]);
        assert_eq!(tv.labels(), &[0, 1, 0, 1]);
    }

    #[test]
    fn ce_is_stable_for_huge_logits() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new([1, 2], vec![1000.0, -1000.0]).unwrap());
        let l = loss_ce(&mut g, x, &[0]).unwrap();
        assert!(g.value(l).data()[0].abs() < 1e-6);
    }
}
