//! Loss terms of the joint objective.
//!
//! * weighted partial-label cross entropy over known cells,
//! * per-category (and holistic) adversarial domain objectives,
//! * temporal ensemble of past predictions with bias correction,
//! * the confidence-gated squared error toward the ensemble on unknown cells,
//! * their weighted sum.
//!
//! Every term returns its value together with `dL/d(input)`, which the trainer
//! feeds back through the network.

use std::collections::{BTreeMap, HashMap};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::{CategoryId, LabelValue, PartialLabelMatrix, TaskWeightTable};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no common categories: adversarial alignment is inapplicable")]
    NoCommonCategories,
    #[error("predictions belong to epoch {found}, buffer is at epoch {expected}")]
    EpochMismatch { expected: usize, found: usize },
    #[error("sample id {0:?} is not covered by the ensemble buffer")]
    UnknownSampleId(String),
    #[error("duplicate sample id {0:?} in ensemble buffer")]
    DuplicateSampleId(String),
    #[error("ensemble target undefined at epoch {0}: no history yet")]
    NoHistory(usize),
    #[error("threshold {0} outside [0, 0.5]")]
    BadThreshold(f64),
    #[error("momentum {0} outside [0, 1)")]
    BadMomentum(f64),
}

/// A scalar loss and its gradient with respect to the `B × C` probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbLoss {
    pub value: f64,
    pub grad: Array2<f64>,
}

fn check_shape(p: ArrayView2<f64>, y: &PartialLabelMatrix) -> Result<(), LossError> {
    if p.dim() != (y.samples(), y.categories()) {
        return Err(LossError::ShapeMismatch(format!(
            "predictions {:?} vs labels {:?}",
            p.dim(),
            (y.samples(), y.categories())
        )));
    }
    Ok(())
}

/// `-(1/C) mean_i sum_c alpha_c [beta_c 1[y=1] ln p + 1[y=0] ln(1-p)]`.
/// Unknown cells are skipped, so they contribute exactly zero value and gradient.
pub fn partial_bce(
    p: ArrayView2<f64>,
    y: &PartialLabelMatrix,
    weights: &TaskWeightTable,
) -> Result<ProbLoss, LossError> {
    check_shape(p, y)?;
    let (batch, categories) = p.dim();
    if weights.categories() != categories || weights.beta.len() != categories {
        return Err(LossError::ShapeMismatch(format!(
            "{} task weights for {categories} categories",
            weights.categories()
        )));
    }
    let scale = 1.0 / (categories as f64 * batch as f64);
    let mut value = 0.0;
    let mut grad = Array2::zeros((batch, categories));
    for i in 0..batch {
        for c in 0..categories {
            let pc = p[[i, c]];
            let alpha = weights.alpha[c];
            match y.get(i, c) {
                LabelValue::Present => {
                    let w = alpha * weights.beta[c];
                    value -= w * pc.ln();
                    grad[[i, c]] = -scale * w / pc;
                }
                LabelValue::Absent => {
                    value -= alpha * (1.0 - pc).ln();
                    grad[[i, c]] = scale * alpha / (1.0 - pc);
                }
                LabelValue::Unknown => {}
            }
        }
    }
    Ok(ProbLoss {
        value: value * scale,
        grad,
    })
}

/// Value of an adversarial domain objective and the matching zero-sum losses.
///
/// `objective` is what the discriminators ascend. The discriminators descend
/// `discriminator_loss = -objective`; the feature generator descends
/// `generator_loss = objective`. Gradients are of `objective` with respect to
/// each discriminator output.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialLoss {
    pub objective: f64,
    pub discriminator_loss: f64,
    pub generator_loss: f64,
    pub grads: BTreeMap<CategoryId, Vec<f64>>,
}

/// `mean_{internal} ln D + mean_{external} ln(1 - D)` and its gradient.
fn domain_term(probs: &[f64], is_internal: &[bool]) -> Result<(f64, Vec<f64>), LossError> {
    if probs.len() != is_internal.len() {
        return Err(LossError::ShapeMismatch(format!(
            "{} discriminator outputs, {} domain tags",
            probs.len(),
            is_internal.len()
        )));
    }
    let n_int = is_internal.iter().filter(|&&b| b).count();
    let n_ext = is_internal.len() - n_int;
    let (mut int_sum, mut ext_sum) = (0.0, 0.0);
    let mut grad = vec![0.0; probs.len()];
    for (i, (&d, &internal)) in probs.iter().zip(is_internal).enumerate() {
        if internal {
            int_sum += d.ln();
            grad[i] = 1.0 / (n_int as f64 * d);
        } else {
            ext_sum += (1.0 - d).ln();
            grad[i] = -1.0 / (n_ext as f64 * (1.0 - d));
        }
    }
    let mut value = 0.0;
    if n_int > 0 {
        value += int_sum / n_int as f64;
    }
    if n_ext > 0 {
        value += ext_sum / n_ext as f64;
    }
    Ok((value, grad))
}

/// Sum over common categories of each category discriminator's domain objective.
pub fn tat_loss(
    outputs: &BTreeMap<CategoryId, Vec<f64>>,
    is_internal: &[bool],
) -> Result<AdversarialLoss, LossError> {
    if outputs.is_empty() {
        return Err(LossError::NoCommonCategories);
    }
    let mut objective = 0.0;
    let mut grads = BTreeMap::new();
    for (&c, probs) in outputs {
        let (v, g) = domain_term(probs, is_internal)?;
        objective += v;
        grads.insert(c, g);
    }
    Ok(AdversarialLoss {
        objective,
        discriminator_loss: -objective,
        generator_loss: objective,
        grads,
    })
}

/// Key under which [`holistic_adv_loss`] reports its gradient.
pub const HOLISTIC: CategoryId = usize::MAX;

/// Single discriminator on the undivided trunk feature.
pub fn holistic_adv_loss(outputs: &[f64], is_internal: &[bool]) -> Result<AdversarialLoss, LossError> {
    let (objective, g) = domain_term(outputs, is_internal)?;
    Ok(AdversarialLoss {
        objective,
        discriminator_loss: -objective,
        generator_loss: objective,
        grads: BTreeMap::from([(HOLISTIC, g)]),
    })
}

/// Running ensemble of per-sample predictions, keyed by sample id.
///
/// Stored as the bias-corrected mean `z` and the correction weight
/// `1 - gamma^n` of each row (`n` = updates the row has received), updated as
/// `w' = gamma w + (1 - gamma)`, `z' = z + (1 - gamma) / w' (p - z)`. This is
/// algebraically `Z_t / (1 - gamma^(t-1))` with `Z_t = gamma Z_{t-1} + (1 - gamma) p`,
/// and keeps constant predictions an exact fixpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaBuffer {
    ids: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    mean: Array2<f64>,
    weight: Vec<f64>,
    epoch: usize,
    gamma: f64,
    last_updated: Vec<bool>,
}

/// Predictions collected during one epoch, indexed like the buffer.
/// A sample seen several times keeps its last prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochPredictions {
    epoch: usize,
    values: Array2<f64>,
    seen: Vec<bool>,
}

impl EpochPredictions {
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn record(&mut self, row: usize, probs: &[f64]) {
        self.values.row_mut(row).iter_mut().zip(probs).for_each(|(v, p)| *v = *p);
        self.seen[row] = true;
    }

    pub fn seen(&self) -> &[bool] {
        &self.seen
    }
}

impl EmaBuffer {
    /// `Z_1 = 0`, epoch counter at 1.
    pub fn new(ids: Vec<String>, categories: usize, gamma: f64) -> Result<Self, LossError> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(LossError::BadMomentum(gamma));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(LossError::DuplicateSampleId(id.clone()));
            }
        }
        let n = ids.len();
        Ok(Self {
            ids,
            index,
            mean: Array2::zeros((n, categories)),
            weight: vec![0.0; n],
            epoch: 1,
            gamma,
            last_updated: vec![false; n],
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// The uncorrected average `Z`.
    pub fn running(&self) -> Array2<f64> {
        let mut z = self.mean.clone();
        for (mut row, &w) in z.rows_mut().into_iter().zip(&self.weight) {
            row.mapv_inplace(|v| v * w);
        }
        z
    }

    /// Which rows received a prediction in the most recent update.
    pub fn last_updated(&self) -> &[bool] {
        &self.last_updated
    }

    pub fn index_of(&self, id: &str) -> Result<usize, LossError> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| LossError::UnknownSampleId(id.to_string()))
    }

    /// Empty prediction store for the current epoch.
    pub fn start_epoch(&self) -> EpochPredictions {
        EpochPredictions {
            epoch: self.epoch,
            values: Array2::zeros(self.mean.dim()),
            seen: vec![false; self.ids.len()],
        }
    }

    /// Records a prediction by sample id.
    pub fn record(&self, store: &mut EpochPredictions, id: &str, probs: &[f64]) -> Result<(), LossError> {
        let row = self.index_of(id)?;
        store.record(row, probs);
        Ok(())
    }

    /// `Z_t = gamma Z_{t-1} + (1 - gamma) p_{t-1}` for every sample with a
    /// prediction; rows without one keep their value. Advances the counter.
    pub fn update(&mut self, predictions: &EpochPredictions) -> Result<(), LossError> {
        if predictions.epoch != self.epoch {
            return Err(LossError::EpochMismatch {
                expected: self.epoch,
                found: predictions.epoch,
            });
        }
        if predictions.values.dim() != self.mean.dim() {
            return Err(LossError::ShapeMismatch("prediction store shape".into()));
        }
        let g = self.gamma;
        for (row, &seen) in predictions.seen.iter().enumerate() {
            if seen {
                let w = g * self.weight[row] + (1.0 - g);
                let k = (1.0 - g) / w;
                self.weight[row] = w;
                let mut z = self.mean.row_mut(row);
                if k == 1.0 {
                    // first update, or no memory at all
                    z.assign(&predictions.values.row(row));
                } else {
                    z.zip_mut_with(&predictions.values.row(row), |z, &p| *z += k * (p - *z));
                }
            }
        }
        self.last_updated = predictions.seen.clone();
        self.epoch += 1;
        Ok(())
    }

    /// Bias-corrected targets `z_t`, for `t >= 2`. Rows never updated stay at 0.
    pub fn targets(&self) -> Result<Array2<f64>, LossError> {
        if self.epoch < 2 {
            return Err(LossError::NoHistory(self.epoch));
        }
        Ok(self.mean.clone())
    }

    /// Rebuilds the id index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.ids.iter().cloned().enumerate().map(|(i, id)| (id, i)).collect();
    }
}

/// Gated squared error toward the ensemble targets.
#[derive(Debug, Clone, PartialEq)]
pub struct UteLoss {
    pub value: f64,
    pub grad: Array2<f64>,
    pub included: usize,
    pub unknown: usize,
    pub gated_fraction: f64,
}

/// Mean of `(p - z)^2` over unknown cells with `|0.5 - p| >= threshold`.
/// `eligible` restricts which rows take part (`None`: all rows).
pub fn ute_loss(
    p: ArrayView2<f64>,
    z: ArrayView2<f64>,
    y: &PartialLabelMatrix,
    threshold: f64,
    eligible: Option<&[bool]>,
) -> Result<UteLoss, LossError> {
    if !(0.0..=0.5).contains(&threshold) {
        return Err(LossError::BadThreshold(threshold));
    }
    check_shape(p, y)?;
    if z.dim() != p.dim() || eligible.is_some_and(|e| e.len() != p.nrows()) {
        return Err(LossError::ShapeMismatch("targets or row mask".into()));
    }
    let (batch, categories) = p.dim();
    let mut cells = Vec::new();
    let mut unknown = 0;
    for i in 0..batch {
        if eligible.is_some_and(|e| !e[i]) {
            continue;
        }
        for c in 0..categories {
            if y.get(i, c) == LabelValue::Unknown {
                unknown += 1;
                if (0.5 - p[[i, c]]).abs() >= threshold {
                    cells.push((i, c));
                }
            }
        }
    }
    let mut grad = Array2::zeros((batch, categories));
    let mut value = 0.0;
    let included = cells.len();
    if included > 0 {
        let n = included as f64;
        for (i, c) in cells {
            let d = p[[i, c]] - z[[i, c]];
            value += d * d;
            grad[[i, c]] = 2.0 * d / n;
        }
        value /= n;
    }
    Ok(UteLoss {
        value,
        grad,
        included,
        unknown,
        gated_fraction: if unknown > 0 {
            included as f64 / unknown as f64
        } else {
            0.0
        },
    })
}

/// Per-step record of every loss term.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub tat_generator: f64,
    pub tat_discriminator: f64,
    pub ute: f64,
    pub total: f64,
    pub gated_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub cls: f64,
    pub tat_generator: f64,
    pub tat_discriminator: f64,
    pub ute: f64,
    pub gated_fraction: f64,
}

/// `total = cls + lambda_tat * tat_generator + lambda_ute * ute`. The
/// discriminator term is reported but drives its own optimizer.
pub fn total_loss(parts: LossParts, lambda_tat: f64, lambda_ute: f64) -> LossBreakdown {
    LossBreakdown {
        cls: parts.cls,
        tat_generator: parts.tat_generator,
        tat_discriminator: parts.tat_discriminator,
        ute: parts.ute,
        total: parts.cls + lambda_tat * parts.tat_generator + lambda_ute * parts.ute,
        gated_fraction: parts.gated_fraction,
    }
}
