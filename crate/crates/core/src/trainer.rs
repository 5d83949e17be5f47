//! Joint training over several partially labeled domains.
//!
//! Each step draws an equal-size batch from every training domain, updates the
//! discriminators on detached features, then updates the generator on the
//! composite objective. Predictions made during an epoch feed the ensemble
//! buffer at the epoch boundary.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{Dataset, DomainData};
use crate::labels::{
    category_partition, task_weight_table, CategoryId, CategoryPartition, DomainId, DomainRegistry,
    LabelError, LabelValue, PartialLabelMatrix, TaskWeightTable,
};
use crate::losses::{
    holistic_adv_loss, partial_bce, tat_loss, total_loss, ute_loss, EmaBuffer, EpochPredictions,
    LossBreakdown, LossError, LossParts, HOLISTIC,
};
use crate::metrics::{metrics_report, MetricsReport};
use crate::nn::{
    grad_check, Adam, Architecture, GradCheckReport, Discriminator, Discriminators, Gradients, ModelParams, NnError,
    OptimizerState, ParamBlock, Seeds, StepSchedule,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("domain {domain} has {samples} training samples, fewer than one batch of {batch}")]
    InsufficientData {
        domain: DomainId,
        samples: usize,
        batch: usize,
    },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error("writing history: {0}")]
    Io(#[from] std::io::Error),
    #[error("writing history: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdShape {
    /// From `start` at epoch 2 down to `end` at the final epoch.
    Linear,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSchedule {
    pub shape: ThresholdShape,
    pub start: f64,
    pub end: f64,
}

impl Default for ThresholdSchedule {
    fn default() -> Self {
        Self {
            shape: ThresholdShape::Linear,
            start: 0.4,
            end: 0.0,
        }
    }
}

/// Which unknown cells the ensemble term may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UteScope {
    #[default]
    AllUnknown,
    ExternalSamplesOnly,
}

/// Denominator of the ensemble term's squared-error mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UteReduction {
    /// Every cell of the batch, like the classification loss. Each gated cell
    /// then weighs the same however few cells pass the gate.
    #[default]
    BatchCells,
    /// Only the cells that pass the gate.
    GatedCells,
}

/// Component switches. The default is the full method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Switches {
    pub tw: bool,
    pub tat: bool,
    pub ute: bool,
    pub uncertainty_gate: bool,
    pub hat_instead_of_tat: bool,
    pub hard_label_instead_of_ute: bool,
}

impl Default for Switches {
    fn default() -> Self {
        Self {
            tw: true,
            tat: true,
            ute: true,
            uncertainty_gate: true,
            hat_instead_of_tat: false,
            hard_label_instead_of_ute: false,
        }
    }
}

impl Switches {
    pub const NONE: Switches = Switches {
        tw: false,
        tat: false,
        ute: false,
        uncertainty_gate: false,
        hat_instead_of_tat: false,
        hard_label_instead_of_ute: false,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Samples drawn from each domain per step.
    pub batch_size: usize,
    /// Base generator rate; decays ×0.1 after epochs 3 and 6.
    pub lr: f64,
    pub disc_lr: f64,
    pub lambda_tat: f64,
    pub lambda_ute: f64,
    pub gamma: f64,
    pub alpha_common: f64,
    pub alpha_other: f64,
    pub threshold: ThresholdSchedule,
    /// Validate every this many steps; `None` validates at each epoch end.
    pub validation_interval: Option<usize>,
    pub seed: u64,
    pub switches: Switches,
    pub ute_scope: UteScope,
    pub ute_reduction: UteReduction,
    pub trunk_widths: Vec<usize>,
    pub projection_dim: usize,
    pub disc_hidden: [usize; 2],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 32,
            lr: 1e-4,
            disc_lr: 1e-4,
            lambda_tat: 0.03,
            lambda_ute: 30.0,
            gamma: 0.9,
            alpha_common: 3.0,
            alpha_other: 1.0,
            threshold: ThresholdSchedule::default(),
            validation_interval: None,
            seed: 0,
            switches: Switches::default(),
            ute_scope: UteScope::AllUnknown,
            ute_reduction: UteReduction::BatchCells,
            trunk_widths: vec![64, 64],
            projection_dim: 16,
            disc_hidden: [16, 8],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        let t = &self.threshold;
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.validation_interval == Some(0) {
            return bad("validation_interval must be positive");
        }
        if !(self.lambda_tat >= 0.0 && self.lambda_ute >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if !(self.lr > 0.0 && self.disc_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(t.start <= 0.5 && t.start >= t.end && t.end >= 0.0) {
            return bad("threshold schedule needs 0.5 >= start >= end >= 0");
        }
        if self.projection_dim == 0 || self.disc_hidden.contains(&0) || self.trunk_widths.contains(&0) {
            return bad("layer widths must be positive");
        }
        Ok(())
    }

    pub fn architecture(&self, input_dim: usize, categories: usize, common: &[CategoryId]) -> Architecture {
        let adversary = Adversary::from_switches(&self.switches);
        Architecture {
            input_dim,
            trunk_widths: self.trunk_widths.clone(),
            projection_dim: self.projection_dim,
            categories,
            common: if adversary == Adversary::PerCategory {
                common.to_vec()
            } else {
                Vec::new()
            },
            disc_hidden: self.disc_hidden,
            holistic: adversary == Adversary::Holistic,
        }
    }
}

/// Confidence threshold in effect during 1-based `epoch`.
pub fn h_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    let t = &config.threshold;
    match t.shape {
        ThresholdShape::Constant => t.start,
        ThresholdShape::Linear => {
            if epoch < 2 {
                t.start
            } else if config.epochs <= 2 {
                t.end
            } else {
                let frac = (epoch.min(config.epochs) - 2) as f64 / (config.epochs - 2) as f64;
                t.start + (t.end - t.start) * frac
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Adversary {
    Off,
    PerCategory,
    Holistic,
}

impl Adversary {
    fn from_switches(s: &Switches) -> Self {
        match (s.tat, s.hat_instead_of_tat) {
            (_, true) => Adversary::Holistic,
            (true, false) => Adversary::PerCategory,
            (false, false) => Adversary::Off,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ensemble {
    Off,
    /// Squared error toward the ensemble targets.
    Soft,
    /// Confident ensemble targets become hard labels for the classification loss.
    HardLabel,
}

/// Everything the composite loss needs besides parameters and data.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub weights: TaskWeightTable,
    pub adversary: Adversary,
    pub ensemble: Ensemble,
    pub scope: UteScope,
    pub reduction: UteReduction,
    pub lambda_tat: f64,
    pub lambda_ute: f64,
    pub gate: bool,
}

impl Objective {
    pub fn from_config(config: &TrainConfig, weights: TaskWeightTable, domains: usize) -> Self {
        let s = &config.switches;
        let multi = domains >= 2;
        let adversary = if multi {
            Adversary::from_switches(s)
        } else {
            Adversary::Off
        };
        let ensemble = match (s.ute || s.hard_label_instead_of_ute, s.hard_label_instead_of_ute) {
            (false, _) => Ensemble::Off,
            (true, true) => Ensemble::HardLabel,
            (true, false) => Ensemble::Soft,
        };
        Self {
            weights,
            adversary,
            ensemble,
            scope: config.ute_scope,
            reduction: config.ute_reduction,
            lambda_tat: config.lambda_tat,
            lambda_ute: config.lambda_ute,
            gate: s.uncertainty_gate,
        }
    }
}

/// Rows drawn for one step, internal-domain rows first.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Array2<f64>,
    pub labels: PartialLabelMatrix,
    pub is_internal: Vec<bool>,
    /// Row of each sample in the ensemble buffer.
    pub buffer_rows: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn eligible(&self, scope: UteScope) -> Option<Vec<bool>> {
        match scope {
            UteScope::AllUnknown => None,
            UteScope::ExternalSamplesOnly => Some(self.is_internal.iter().map(|&i| !i).collect()),
        }
    }
}

fn zeroed(d: &Discriminators) -> Discriminators {
    let mut z = d.clone();
    z.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
    z
}

/// Replaces confident unknown cells with `round(z)`.
fn hard_labels(
    labels: &PartialLabelMatrix,
    targets: ArrayView2<f64>,
    threshold: f64,
    eligible: Option<&[bool]>,
) -> (PartialLabelMatrix, f64) {
    let mut out = labels.clone();
    let (mut unknown, mut assigned) = (0usize, 0usize);
    for i in 0..labels.samples() {
        if eligible.is_some_and(|e| !e[i]) {
            continue;
        }
        for c in 0..labels.categories() {
            if labels.get(i, c) != LabelValue::Unknown {
                continue;
            }
            unknown += 1;
            let z = targets[[i, c]];
            if (0.5 - z).abs() >= threshold {
                assigned += 1;
                let v = if z >= 0.5 {
                    LabelValue::Present
                } else {
                    LabelValue::Absent
                };
                out.set(i, c, v);
            }
        }
    }
    let frac = if unknown > 0 {
        assigned as f64 / unknown as f64
    } else {
        0.0
    };
    (out, frac)
}

/// Composite loss on `batch` and its gradient with respect to every
/// parameter (discriminators included, through the adversarial term).
///
/// `targets` holds the ensemble targets of the batch rows; `None` disables
/// the ensemble term for this step.
pub fn composite_objective(
    params: &ModelParams,
    batch: &Batch,
    objective: &Objective,
    targets: Option<ArrayView2<f64>>,
    threshold: f64,
) -> Result<(LossBreakdown, Gradients), TrainError> {
    let fwd = params.forward(batch.features.view())?;
    composite_from_forward(params, &fwd, batch, objective, targets, threshold)
}

fn composite_from_forward(
    params: &ModelParams,
    fwd: &crate::nn::Forward,
    batch: &Batch,
    objective: &Objective,
    targets: Option<ArrayView2<f64>>,
    threshold: f64,
) -> Result<(LossBreakdown, Gradients), TrainError> {
    let threshold = if objective.gate { threshold } else { 0.0 };
    let eligible = batch.eligible(objective.scope);
    let mut parts = LossParts::default();

    let hard;
    let cls_labels = match (objective.ensemble, targets) {
        (Ensemble::HardLabel, Some(z)) => {
            let (labels, frac) = hard_labels(&batch.labels, z, threshold, eligible.as_deref());
            parts.gated_fraction = frac;
            hard = labels;
            &hard
        }
        _ => &batch.labels,
    };
    let cls = partial_bce(fwd.probs.view(), cls_labels, &objective.weights)?;
    parts.cls = cls.value;
    let mut d_probs = cls.grad;

    if let (Ensemble::Soft, Some(z)) = (objective.ensemble, targets) {
        let u = ute_loss(fwd.probs.view(), z, &batch.labels, threshold, eligible.as_deref())?;
        let k = match objective.reduction {
            UteReduction::GatedCells => 1.0,
            UteReduction::BatchCells => u.included as f64 / (batch.len() * batch.labels.categories()) as f64,
        };
        parts.ute = u.value * k;
        parts.gated_fraction = u.gated_fraction;
        d_probs.scaled_add(objective.lambda_ute * k, &u.grad);
    }

    let mut seeds = Seeds {
        probs: Some(d_probs),
        ..Seeds::default()
    };
    let mut disc_grads = zeroed(&params.discriminators);
    match objective.adversary {
        Adversary::Off => {}
        Adversary::PerCategory => {
            let mut outputs = BTreeMap::new();
            let mut forwards = BTreeMap::new();
            for &c in params.discriminators.per_category.keys() {
                let d = params.discriminate(fwd.features[c].view(), c)?;
                outputs.insert(c, d.probs.clone());
                forwards.insert(c, d);
            }
            let adv = tat_loss(&outputs, &batch.is_internal)?;
            parts.tat_generator = adv.generator_loss;
            parts.tat_discriminator = adv.discriminator_loss;
            for (c, d) in forwards {
                let seed: Vec<f64> = adv.grads[&c].iter().map(|g| objective.lambda_tat * g).collect();
                let grad = disc_grads.per_category.get_mut(&c).expect("same keys");
                let df = params.discriminator(c)?.backward(&d, &seed, grad)?;
                seeds.features.insert(c, df);
            }
        }
        Adversary::Holistic => {
            let d = params.discriminate_holistic(fwd.trunk.view())?;
            let adv = holistic_adv_loss(&d.probs, &batch.is_internal)?;
            parts.tat_generator = adv.generator_loss;
            parts.tat_discriminator = adv.discriminator_loss;
            let seed: Vec<f64> = adv.grads[&HOLISTIC].iter().map(|g| objective.lambda_tat * g).collect();
            let disc = params.discriminators.holistic.as_ref().expect("holistic present");
            let grad = disc_grads.holistic.as_mut().expect("holistic present");
            seeds.trunk = Some(disc.backward(&d, &seed, grad)?);
        }
    }
    let mut grads = params.backward(fwd, &seeds)?;
    grads.discriminators = disc_grads;
    Ok((total_loss(parts, objective.lambda_tat, objective.lambda_ute), grads))
}

/// Ascent step of the discriminators on features treated as constants.
/// Returns the discriminator loss before the update.
fn discriminator_step(
    params: &mut ModelParams,
    fwd: &crate::nn::Forward,
    batch: &Batch,
    adversary: Adversary,
    optimizer: &mut OptimizerState,
) -> Result<f64, TrainError> {
    let mut grads = zeroed(&params.discriminators);
    let loss = match adversary {
        Adversary::Off => return Ok(0.0),
        Adversary::PerCategory => {
            let mut outputs = BTreeMap::new();
            let mut forwards = BTreeMap::new();
            for &c in params.discriminators.per_category.keys() {
                let d = params.discriminate(fwd.features[c].view(), c)?;
                outputs.insert(c, d.probs.clone());
                forwards.insert(c, d);
            }
            let adv = tat_loss(&outputs, &batch.is_internal)?;
            for (c, d) in forwards {
                let seed: Vec<f64> = adv.grads[&c].iter().map(|g| -g).collect();
                let grad = grads.per_category.get_mut(&c).expect("same keys");
                params.discriminator(c)?.backward(&d, &seed, grad)?;
            }
            adv.discriminator_loss
        }
        Adversary::Holistic => {
            let d = params.discriminate_holistic(fwd.trunk.view())?;
            let adv = holistic_adv_loss(&d.probs, &batch.is_internal)?;
            let seed: Vec<f64> = adv.grads[&HOLISTIC].iter().map(|g| -g).collect();
            let disc = params.discriminators.holistic.as_ref().expect("holistic present");
            disc.backward(&d, &seed, grads.holistic.as_mut().expect("holistic present"))?;
            adv.discriminator_loss
        }
    };
    optimizer.rmsprop_step(&mut params.discriminators, &grads)?;
    Ok(loss)
}

/// Model, optimizers and ensemble buffer: everything a step mutates.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub ema: EmaBuffer,
    pub epoch: usize,
    pub step: usize,
}

/// One discriminator update followed by one generator update. The
/// clean-forward predictions are recorded into `store`.
pub fn train_step(
    state: &mut TrainState,
    batch: &Batch,
    objective: &Objective,
    targets: Option<ArrayView2<f64>>,
    threshold: f64,
    store: &mut EpochPredictions,
) -> Result<LossBreakdown, TrainError> {
    let fwd = state.params.forward(batch.features.view())?;
    let disc_loss = discriminator_step(
        &mut state.params,
        &fwd,
        batch,
        objective.adversary,
        &mut state.optimizer,
    )?;
    // The generator is untouched by the discriminator step, so `fwd` is current.
    let (mut breakdown, grads) =
        composite_from_forward(&state.params, &fwd, batch, objective, targets, threshold)?;
    breakdown.tat_discriminator = disc_loss;
    state
        .optimizer
        .adam_step(&mut state.params.generator, &grads.generator, state.epoch)?;
    for (k, &row) in batch.buffer_rows.iter().enumerate() {
        store.record(row, fwd.probs.row(k).as_slice().expect("row-major"));
    }
    state.step += 1;
    if !breakdown.total.is_finite() || !disc_loss.is_finite() {
        return Err(TrainError::NonFiniteLoss { step: state.step });
    }
    Ok(breakdown)
}

/// Class probabilities for every row of `x`, computed in fixed-size chunks.
pub fn predict(params: &ModelParams, x: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
    const CHUNK: usize = 512;
    let mut out = Array2::zeros((x.nrows(), params.arch.categories));
    let mut start = 0;
    while start < x.nrows() {
        let end = (start + CHUNK).min(x.nrows());
        let fwd = params.forward(x.slice(s![start..end, ..]))?;
        out.slice_mut(s![start..end, ..]).assign(&fwd.probs);
        start = end;
    }
    Ok(out)
}

/// Per-category AUC of `params` on `data`.
pub fn evaluate(
    params: &ModelParams,
    data: &Dataset,
    partition: &CategoryPartition,
    internal_domain: DomainId,
) -> Result<MetricsReport, TrainError> {
    let p = predict(params, data.features.view())?;
    Ok(metrics_report(p.view(), &data.labels, partition, internal_domain))
}

/// Report on the internal validation split; its mean drives selection.
pub fn validate_and_select(
    params: &ModelParams,
    val: &Dataset,
    partition: &CategoryPartition,
    internal_domain: DomainId,
) -> Result<MetricsReport, TrainError> {
    if val.is_empty() {
        return Err(TrainError::InvalidConfig("empty validation split".into()));
    }
    evaluate(params, val, partition, internal_domain)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub threshold: f64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: usize,
    pub epoch: usize,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub steps: Vec<StepRecord>,
    pub validations: Vec<ValidationRecord>,
}

impl History {
    pub const CSV_HEADER: [&'static str; 9] = [
        "step", "epoch", "cls", "tat_gen", "tat_disc", "ute", "total", "gated_fraction", "H",
    ];

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<(), TrainError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::CSV_HEADER)?;
        for r in &self.steps {
            let l = &r.loss;
            w.write_record([
                r.step.to_string(),
                r.epoch.to_string(),
                l.cls.to_string(),
                l.tat_generator.to_string(),
                l.tat_discriminator.to_string(),
                l.ute.to_string(),
                l.total.to_string(),
                l.gated_fraction.to_string(),
                r.threshold.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), TrainError> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Index of the validation with the highest mean AUC (first on ties).
    pub fn best_validation(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, v) in self.validations.iter().enumerate() {
            let m = v.report.mean.unwrap_or(f64::NEG_INFINITY);
            if best.is_none_or(|(_, b)| m > b) {
                best = Some((i, m));
            }
        }
        best.map(|(i, _)| i)
    }
}

/// Parameters at the best validation, with the report that chose them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestCheckpoint {
    pub params: ModelParams,
    pub report: MetricsReport,
    pub step: usize,
    pub epoch: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: BestCheckpoint,
    pub history: History,
    pub final_state: TrainState,
    pub partition: CategoryPartition,
    pub weights: TaskWeightTable,
}

/// Endless per-domain sampler: reshuffles whenever fewer than one batch remains.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Cycler {
    fn new(n: usize, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    fn take(&mut self, b: usize) -> &[usize] {
        if self.pos + b > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += b;
        &self.order[self.pos - b..self.pos]
    }
}

/// Orders domains internal first, keeping the rest by id.
fn ordered_domains(domains: &[DomainData], internal: DomainId) -> Result<Vec<&DomainData>, TrainError> {
    let mut out: Vec<&DomainData> = domains.iter().collect();
    out.sort_by_key(|d| (d.domain_id != internal, d.domain_id));
    if out.first().map(|d| d.domain_id) != Some(internal) {
        return Err(TrainError::InvalidConfig(format!(
            "internal domain {internal} is not among the training domains"
        )));
    }
    Ok(out)
}

/// Trains on the train splits of `domains`, validates on the internal
/// domain's validation split and keeps the best checkpoint.
pub fn run_training(
    config: &TrainConfig,
    registry: &DomainRegistry,
    internal_domain: DomainId,
    domains: &[DomainData],
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let domains = ordered_domains(domains, internal_domain)?;
    let b = config.batch_size;
    for d in &domains {
        if d.train.len() < b {
            return Err(TrainError::InsufficientData {
                domain: d.domain_id,
                samples: d.train.len(),
                batch: b,
            });
        }
    }
    let partition = category_partition(registry)?;
    let categories = registry.categories();
    let input_dim = domains[0].train.observed_dim();

    let pooled = PartialLabelMatrix::concat(&domains.iter().map(|d| &d.train.labels).collect::<Vec<_>>())?;
    let (alpha_common, alpha_other) = if config.switches.tw {
        (config.alpha_common, config.alpha_other)
    } else {
        (1.0, 1.0)
    };
    let weights = task_weight_table(&partition, &pooled, alpha_common, alpha_other)?;
    let objective = Objective::from_config(config, weights.clone(), domains.len());

    let common: Vec<CategoryId> = partition.common.iter().copied().collect();
    let arch = config.architecture(input_dim, categories, &common);
    let params = ModelParams::init(&arch, config.seed);
    let optimizer = OptimizerState::new(
        &params.generator,
        &params.discriminators,
        StepSchedule::for_epochs(config.lr, config.epochs),
        config.disc_lr,
    );
    let ema = EmaBuffer::new(pooled.sample_ids().to_vec(), categories, config.gamma)?;
    let mut offsets = Vec::with_capacity(domains.len());
    let mut acc = 0;
    for d in &domains {
        offsets.push(acc);
        acc += d.train.len();
    }
    let mut state = TrainState {
        params,
        optimizer,
        ema,
        epoch: 1,
        step: 0,
    };
    let mut cyclers: Vec<Cycler> = domains
        .iter()
        .enumerate()
        .map(|(k, d)| Cycler::new(d.train.len(), config.seed, 1 + k as u64))
        .collect();
    let steps_per_epoch = domains.iter().map(|d| d.train.len() / b).min().expect("nonempty");

    let internal = domains[0];
    let mut history = History::default();
    let mut best: Option<BestCheckpoint> = None;
    let mut validate = |state: &TrainState, history: &mut History| -> Result<(), TrainError> {
        let report = validate_and_select(&state.params, &internal.val, &partition, internal_domain)?;
        let improves = match &best {
            None => true,
            Some(bc) => report.mean.unwrap_or(f64::NEG_INFINITY) > bc.report.mean.unwrap_or(f64::NEG_INFINITY),
        };
        if improves {
            best = Some(BestCheckpoint {
                params: state.params.clone(),
                report: report.clone(),
                step: state.step,
                epoch: state.epoch,
            });
        }
        history.validations.push(ValidationRecord {
            step: state.step,
            epoch: state.epoch,
            report,
        });
        Ok(())
    };

    for epoch in 1..=config.epochs {
        state.epoch = epoch;
        let mut store = state.ema.start_epoch();
        let targets = match objective.ensemble {
            Ensemble::Off => None,
            _ if state.ema.epoch() < 2 => None,
            _ => Some(state.ema.targets()?),
        };
        let threshold = h_schedule(epoch, config);
        for _ in 0..steps_per_epoch {
            let mut rows: Vec<usize> = Vec::with_capacity(b * domains.len());
            let mut parts_x = Vec::with_capacity(domains.len());
            let mut parts_y = Vec::with_capacity(domains.len());
            let mut is_internal = Vec::with_capacity(b * domains.len());
            for (k, (d, cyc)) in domains.iter().zip(cyclers.iter_mut()).enumerate() {
                let idx = cyc.take(b).to_vec();
                parts_x.push(d.train.features.select(Axis(0), &idx));
                parts_y.push(d.train.labels.select(&idx));
                rows.extend(idx.iter().map(|i| offsets[k] + i));
                is_internal.extend(std::iter::repeat_n(k == 0, b));
            }
            let views: Vec<_> = parts_x.iter().map(|x| x.view()).collect();
            let batch = Batch {
                features: ndarray::concatenate(Axis(0), &views).expect("equal widths"),
                labels: PartialLabelMatrix::concat(&parts_y.iter().collect::<Vec<_>>())?,
                is_internal,
                buffer_rows: rows,
            };
            let batch_targets = targets.as_ref().map(|z| z.select(Axis(0), &batch.buffer_rows));
            let loss = train_step(
                &mut state,
                &batch,
                &objective,
                batch_targets.as_ref().map(|z| z.view()),
                threshold,
                &mut store,
            )?;
            history.steps.push(StepRecord {
                step: state.step,
                epoch,
                threshold,
                loss,
            });
            if config.validation_interval.is_some_and(|n| state.step.is_multiple_of(n)) {
                validate(&state, &mut history)?;
            }
        }
        state.ema.update(&store)?;
        if config.validation_interval.is_none() {
            validate(&state, &mut history)?;
        }
    }
    if history.validations.is_empty() {
        validate(&state, &mut history)?;
    }
    let best = best.expect("at least one validation");
    Ok(TrainOutcome {
        best,
        history,
        final_state: state,
        partition,
        weights,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden: [usize; 2],
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 64,
            lr: 1e-3,
            hidden: [16, 8],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// Balanced held-out domain accuracy per category.
    pub per_category: BTreeMap<CategoryId, f64>,
    pub mean_accuracy: f64,
}

/// Trains a fresh domain classifier on each category's frozen features and
/// reports its balanced accuracy on held-out rows.
pub fn domain_probe(
    params: &ModelParams,
    train: (&Dataset, &Dataset),
    test: (&Dataset, &Dataset),
    categories: &[CategoryId],
    config: &ProbeConfig,
) -> Result<ProbeResult, TrainError> {
    if categories.is_empty() {
        return Err(LossError::NoCommonCategories.into());
    }
    let features = |d: &Dataset| -> Result<Vec<Array2<f64>>, NnError> { Ok(params.forward(d.features.view())?.features) };
    let (tr_int, tr_ext) = (features(train.0)?, features(train.1)?);
    let (te_int, te_ext) = (features(test.0)?, features(test.1)?);
    let b = config.batch_size.max(1);
    let n = train.0.len().min(train.1.len());
    if n < b {
        return Err(TrainError::InsufficientData {
            domain: 0,
            samples: n,
            batch: b,
        });
    }

    let mut per_category = BTreeMap::new();
    for &c in categories {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(c as u64);
        let disc = Discriminator::init(params.arch.projection_dim, config.hidden, &mut rng);
        let mut block = Discriminators {
            per_category: BTreeMap::from([(c, disc)]),
            holistic: None,
        };
        let mut adam = Adam::new(block.len());
        let mut order_int: Vec<usize> = (0..train.0.len()).collect();
        let mut order_ext: Vec<usize> = (0..train.1.len()).collect();
        let is_internal: Vec<bool> = (0..2 * b).map(|i| i < b).collect();
        for _ in 0..config.epochs {
            order_int.shuffle(&mut rng);
            order_ext.shuffle(&mut rng);
            for s in 0..n / b {
                let xi = tr_int[c].select(Axis(0), &order_int[s * b..(s + 1) * b]);
                let xe = tr_ext[c].select(Axis(0), &order_ext[s * b..(s + 1) * b]);
                let x = ndarray::concatenate(Axis(0), &[xi.view(), xe.view()]).expect("equal widths");
                let d = &block.per_category[&c];
                let fwd = d.forward(x.view());
                let adv = tat_loss(&BTreeMap::from([(c, fwd.probs.clone())]), &is_internal)?;
                let seed: Vec<f64> = adv.grads[&c].iter().map(|g| -g).collect();
                let mut grads = zeroed(&block);
                d.backward(&fwd, &seed, grads.per_category.get_mut(&c).expect("present"))?;
                adam.step(&mut block, &grads, config.lr)?;
            }
        }
        let d = &block.per_category[&c];
        let hit_int = d.forward(te_int[c].view()).probs.iter().filter(|&&p| p >= 0.5).count();
        let hit_ext = d.forward(te_ext[c].view()).probs.iter().filter(|&&p| p < 0.5).count();
        let acc = 0.5 * (hit_int as f64 / test.0.len() as f64 + hit_ext as f64 / test.1.len() as f64);
        per_category.insert(c, acc);
    }
    let mean_accuracy = per_category.values().sum::<f64>() / per_category.len() as f64;
    Ok(ProbeResult {
        per_category,
        mean_accuracy,
    })
}

/// Tiny two-domain problem with every loss term active, for gradient checks.
pub struct GradCheckProblem {
    pub params: ModelParams,
    pub batch: Batch,
    pub objective: Objective,
    pub targets: Array2<f64>,
    pub threshold: f64,
}

impl GradCheckProblem {
    pub fn random(seed: u64) -> Self {
        const PER_DOMAIN: usize = 4;
        const CATEGORIES: usize = 4;
        let arch = Architecture {
            input_dim: 5,
            trunk_widths: vec![6, 5],
            projection_dim: 3,
            categories: CATEGORIES,
            common: vec![0, 1],
            disc_hidden: [3, 2],
            holistic: false,
        };
        let params = ModelParams::init(&arch, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let n = 2 * PER_DOMAIN;
        let features = Array2::from_shape_fn((n, arch.input_dim), |_| rng.gen_range(-1.5..1.5));
        let mut labels = Vec::with_capacity(n * CATEGORIES);
        for i in 0..n {
            for c in 0..CATEGORIES {
                let external_gap = i >= PER_DOMAIN && c >= 2;
                labels.push(if external_gap || rng.gen_bool(0.2) {
                    LabelValue::Unknown
                } else if rng.gen_bool(0.4) {
                    LabelValue::Present
                } else {
                    LabelValue::Absent
                });
            }
        }
        let ids = (0..n).map(|i| format!("g{i}")).collect();
        let domains = (0..n).map(|i| usize::from(i >= PER_DOMAIN)).collect();
        let labels = PartialLabelMatrix::new(CATEGORIES, labels, ids, domains).expect("consistent shape");
        let weights = TaskWeightTable {
            alpha: vec![3.0, 3.0, 1.0, 1.0],
            beta: (0..CATEGORIES).map(|_| rng.gen_range(0.5..3.0)).collect(),
        };
        let targets = Array2::from_shape_fn((n, CATEGORIES), |_| rng.gen_range(0.0..1.0));
        // Unit adversarial weight keeps discriminator gradients well above
        // the finite-difference noise floor.
        let config = TrainConfig {
            lambda_tat: 1.0,
            ..TrainConfig::default()
        };
        let objective = Objective::from_config(&config, weights, 2);
        Self {
            params,
            batch: Batch {
                features,
                labels,
                is_internal: (0..n).map(|i| i < PER_DOMAIN).collect(),
                buffer_rows: (0..n).collect(),
            },
            objective,
            targets,
            threshold: 0.05,
        }
    }

    pub fn evaluate(&self, params: &ModelParams) -> Result<(LossBreakdown, Gradients), TrainError> {
        composite_objective(
            params,
            &self.batch,
            &self.objective,
            Some(self.targets.view()),
            self.threshold,
        )
    }
}

/// Finite-difference check of the full composite objective on a random tiny model.
pub fn composite_grad_check(seed: u64, eps: f64) -> Result<GradCheckReport, TrainError> {
    let problem = GradCheckProblem::random(seed);
    // surface shape errors before the unwrapping closures below
    problem.evaluate(&problem.params)?;
    Ok(grad_check(
        |_| problem.params.clone(),
        |p| problem.evaluate(p).expect("checked above").0.total,
        |p| problem.evaluate(p).expect("checked above").1,
        seed,
        eps,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::SyntheticBenchmark;

    #[test]
    fn threshold_schedule_endpoints_and_midpoint() {
        let c = TrainConfig::default();
        assert_eq!(h_schedule(1, &c), 0.4);
        assert_eq!(h_schedule(2, &c), 0.4);
        assert_eq!(h_schedule(8, &c), 0.0);
        // independent oracle: 0.4 * (8 - 5) / (8 - 2)
        assert!((h_schedule(5, &c) - 0.4 * 3.0 / 6.0).abs() < 1e-15);
        for t in 2..8 {
            assert!(h_schedule(t + 1, &c) <= h_schedule(t, &c));
        }
        let short = TrainConfig { epochs: 2, ..c.clone() };
        assert_eq!(h_schedule(2, &short), 0.0);
        let flat = TrainConfig {
            threshold: ThresholdSchedule {
                shape: ThresholdShape::Constant,
                start: 0.3,
                end: 0.3,
            },
            ..c
        };
        assert_eq!(h_schedule(6, &flat), 0.3);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { lambda_tat: -1.0, ..Default::default() },
            TrainConfig { gamma: 1.0, ..Default::default() },
            TrainConfig {
                threshold: ThresholdSchedule { shape: ThresholdShape::Linear, start: 0.1, end: 0.2 },
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(TrainError::InvalidConfig(_))), "{c:?}");
        }
    }

    #[test]
    fn config_json_defaults_fill_missing_fields() {
        let c: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "switches": {"tat": false}}"#).unwrap();
        assert_eq!(c.epochs, 3);
        assert!(!c.switches.tat && c.switches.ute);
        assert_eq!(c.lambda_ute, 30.0);
    }

    fn small_bench() -> SyntheticBenchmark {
        SyntheticBenchmark {
            train: 96,
            val: 64,
            test: 64,
            ..Default::default()
        }
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 16,
            lr: 1e-3,
            trunk_widths: vec![8],
            projection_dim: 4,
            disc_hidden: [4, 2],
            ..Default::default()
        }
    }

    fn small_data(seed: u64) -> (DomainRegistry, Vec<DomainData>) {
        let cfg = small_bench().build(seed).unwrap();
        (cfg.registry().unwrap(), cfg.generate().unwrap())
    }

    #[test]
    fn training_is_deterministic() {
        let (reg, data) = small_data(3);
        let a = run_training(&small_config(), &reg, 0, &data).unwrap();
        let b = run_training(&small_config(), &reg, 0, &data).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.best, b.best);
        let other = TrainConfig { seed: 1, ..small_config() };
        let c = run_training(&other, &reg, 0, &data).unwrap();
        assert_ne!(a.history, c.history);
    }

    #[test]
    fn best_checkpoint_is_argmax_of_validations() {
        let (reg, data) = small_data(4);
        let cfg = TrainConfig {
            validation_interval: Some(2),
            ..small_config()
        };
        let out = run_training(&cfg, &reg, 0, &data).unwrap();
        assert_eq!(out.history.validations.len(), 3 * (96 / 16) / 2);
        let max = out
            .history
            .validations
            .iter()
            .filter_map(|v| v.report.mean)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.best.report.mean, Some(max));
        // replaying the stored checkpoint reproduces its report
        let internal = data.iter().find(|d| d.domain_id == 0).unwrap();
        let replay = validate_and_select(&out.best.params, &internal.val, &out.partition, 0).unwrap();
        assert_eq!(replay, out.best.report);
    }

    #[test]
    fn every_training_sample_is_recorded_each_epoch_when_sizes_match() {
        let (reg, data) = small_data(5);
        let out = run_training(&small_config(), &reg, 0, &data).unwrap();
        let ema = &out.final_state.ema;
        assert_eq!(ema.epoch(), 4);
        assert!(ema.last_updated().iter().all(|&u| u));
        assert_eq!(ema.ids().len(), 2 * 96);
    }

    #[test]
    fn truncated_epochs_carry_unseen_samples_forward() {
        let bench = SyntheticBenchmark {
            train: 100,
            val: 64,
            test: 64,
            ..Default::default()
        };
        let cfg = bench.build(2).unwrap();
        let (reg, data) = (cfg.registry().unwrap(), cfg.generate().unwrap());
        let out = run_training(&small_config(), &reg, 0, &data).unwrap();
        let ema = &out.final_state.ema;
        // 6 steps of 16 per domain leave 4 rows of each domain unseen
        let unseen: Vec<usize> = (0..ema.ids().len()).filter(|&i| !ema.last_updated()[i]).collect();
        assert_eq!(unseen.len(), 8);
    }

    #[test]
    fn insufficient_data_is_reported() {
        let (reg, data) = small_data(1);
        let cfg = TrainConfig { batch_size: 97, ..small_config() };
        assert!(matches!(
            run_training(&cfg, &reg, 0, &data),
            Err(TrainError::InsufficientData { batch: 97, .. })
        ));
    }

    #[test]
    fn switches_off_leave_only_classification() {
        let (reg, data) = small_data(6);
        let cfg = TrainConfig {
            switches: Switches::NONE,
            ..small_config()
        };
        let out = run_training(&cfg, &reg, 0, &data).unwrap();
        for r in &out.history.steps {
            assert_eq!(r.loss.total, r.loss.cls);
            assert_eq!((r.loss.tat_generator, r.loss.tat_discriminator, r.loss.ute), (0.0, 0.0, 0.0));
        }
        assert!(out.final_state.params.discriminators.is_empty());
        assert_eq!(out.final_state.optimizer.rmsprop.step, 0);
    }

    #[test]
    fn ensemble_term_starts_in_second_epoch() {
        let (reg, data) = small_data(6);
        let out = run_training(&small_config(), &reg, 0, &data).unwrap();
        let steps = &out.history.steps;
        assert!(steps.iter().filter(|r| r.epoch == 1).all(|r| r.loss.ute == 0.0 && r.loss.gated_fraction == 0.0));
        assert!(steps.iter().any(|r| r.epoch > 1 && r.loss.gated_fraction > 0.0));
    }

    #[test]
    fn single_domain_run_disables_alignment() {
        let (reg, data) = small_data(7);
        let internal: Vec<DomainData> = data.into_iter().filter(|d| d.domain_id == 0).collect();
        let out = run_training(&small_config(), &reg, 0, &internal).unwrap();
        assert!(out.history.steps.iter().all(|r| r.loss.tat_discriminator == 0.0));
        assert_eq!(out.final_state.ema.ids().len(), 96);
    }

    #[test]
    fn zero_model_scores_half_everywhere() {
        let (reg, data) = small_data(8);
        let part = category_partition(&reg).unwrap();
        let arch = small_config().architecture(32, 10, &[0]);
        let params = ModelParams::zeros(&arch);
        let r = validate_and_select(&params, &data[0].val, &part, 0).unwrap();
        assert!(r.per_category.values().filter_map(|a| a.auc).all(|a| a == 0.5));
        assert_eq!(r.mean, Some(0.5));
    }

    #[test]
    fn history_csv_layout() {
        let (reg, data) = small_data(9);
        let out = run_training(&TrainConfig { epochs: 1, ..small_config() }, &reg, 0, &data).unwrap();
        let mut buf = Vec::new();
        out.history.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "step,epoch,cls,tat_gen,tat_disc,ute,total,gated_fraction,H");
        assert_eq!(lines.count(), 96 / 16);
    }

    #[test]
    fn hard_label_assignment_uses_gate_on_targets() {
        let y = PartialLabelMatrix::new(
            2,
            vec![LabelValue::Unknown, LabelValue::Unknown, LabelValue::Present, LabelValue::Unknown],
            vec!["a".into(), "b".into()],
            vec![1, 1],
        )
        .unwrap();
        let z = ndarray::array![[0.95, 0.6], [0.5, 0.02]];
        let (out, frac) = hard_labels(&y, z.view(), 0.3, None);
        assert_eq!(out.row(0), &[LabelValue::Present, LabelValue::Unknown]);
        assert_eq!(out.row(1), &[LabelValue::Present, LabelValue::Absent]);
        assert!((frac - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let r = composite_grad_check(seed, 1e-5).unwrap();
            assert!(r.max_rel_error < 1e-5, "seed {seed}: {r:?}");
        }
        let p = GradCheckProblem::random(0);
        let (loss, _) = p.evaluate(&p.params).unwrap();
        assert!(loss.cls > 0.0 && loss.ute > 0.0 && loss.tat_generator != 0.0);
    }
}
