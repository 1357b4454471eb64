//! Greedy accept/reject training: Blind Descent with optional layer-cyclic or
//! random-filter freezing, and the first-order gradient-check trainer.
//!
//! Every step makes exactly one proposal on the current batch and keeps it
//! only if the batch loss strictly decreases.

use std::time::Instant;

use crate::data::{BatchPlan, LabeledDataset};
use crate::error::{Error, Result};
use crate::gradient::{backward, forward_with_cache};
use crate::network::{NetworkModel, DEFAULT_HIDDEN_FILTERS};
use crate::sampling::{derive_seed, sample_learning_rate, ProposalKind, ProposalSpec, RngStream};
use crate::scalar::Scalar;
use crate::tensor::{batch_loss, ConvMode, Tensor4};

const EVAL_BATCH: usize = 256;

const TAG_INIT: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_STEPS: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FreezeKind {
    None,
    LayerCyclic,
    RandomFilter,
}

impl FreezeKind {
    pub const ALL: [FreezeKind; 3] = [FreezeKind::None, FreezeKind::LayerCyclic, FreezeKind::RandomFilter];

    pub fn as_str(self) -> &'static str {
        match self {
            FreezeKind::None => "none",
            FreezeKind::LayerCyclic => "layer-cyclic",
            FreezeKind::RandomFilter => "random-filter",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FreezeKind::None),
            "layer-cyclic" => Ok(FreezeKind::LayerCyclic),
            "random-filter" => Ok(FreezeKind::RandomFilter),
            other => Err(Error::config(format!("unknown freeze policy `{other}`"))),
        }
    }
}

/// Which weights a Blind Descent step may change.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreezePolicy {
    pub kind: FreezeKind,
    /// Per-filter freeze probability; only read by `RandomFilter`.
    pub gamma: f64,
}

impl FreezePolicy {
    pub const NONE: FreezePolicy = FreezePolicy { kind: FreezeKind::None, gamma: 0.0 };
    pub const LAYER_CYCLIC: FreezePolicy = FreezePolicy { kind: FreezeKind::LayerCyclic, gamma: 0.0 };

    pub fn random_filter(gamma: f64) -> Result<Self> {
        let p = FreezePolicy { kind: FreezeKind::RandomFilter, gamma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrainerKind {
    BlindDescent,
    GradientCheck,
}

impl TrainerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainerKind::BlindDescent => "blind-descent",
            TrainerKind::GradientCheck => "gradient-check",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "blind-descent" => Ok(TrainerKind::BlindDescent),
            "gradient-check" => Ok(TrainerKind::GradientCheck),
            other => Err(Error::config(format!("unknown trainer `{other}`"))),
        }
    }
}

/// Record of one accept/reject decision.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub batch_index: usize,
    pub loss_before: f64,
    pub loss_after: f64,
    pub accepted: bool,
    pub trainer: TrainerKind,
    /// Learning rate drawn by a gradient-check step.
    pub sampled_eta: Option<f64>,
    /// Set when a gradient-check step was rejected for a non-finite gradient.
    pub nonfinite_gradient: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub trainer: TrainerKind,
    pub proposal: ProposalSpec,
    pub freeze: FreezePolicy,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub conv_mode: ConvMode,
    pub hidden_filters: [usize; 2],
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            trainer: TrainerKind::BlindDescent,
            proposal: ProposalSpec { kind: ProposalKind::NormalCentered, eta: 0.001 },
            freeze: FreezePolicy::NONE,
            epochs: 40,
            batch_size: 16,
            seed: 0,
            conv_mode: ConvMode::ChannelSum,
            hidden_filters: DEFAULT_HIDDEN_FILTERS,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trainer == TrainerKind::BlindDescent {
            self.proposal.validate()?;
            self.freeze.validate()?;
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        Ok(())
    }
}

/// Per-filter freeze flags, bank by bank: each filter is frozen independently
/// with probability `gamma`.
pub fn sample_freeze_mask<T: Scalar>(model: &NetworkModel<T>, gamma: f64, rng: &mut RngStream) -> Vec<Vec<bool>> {
    model.banks().iter().map(|b| (0..b.filters()).map(|_| rng.bernoulli(gamma)).collect()).collect()
}

/// Builds the candidate model for a Blind Descent step. Frozen weights are
/// copied verbatim; the others are drawn from `proposal`.
pub fn propose_model<T: Scalar>(
    model: &NetworkModel<T>,
    proposal: &ProposalSpec,
    freeze: &FreezePolicy,
    batch_index: usize,
    rng: &mut RngStream,
) -> NetworkModel<T> {
    let mut candidate = model.clone();
    match freeze.kind {
        FreezeKind::None => {
            for (dst, src) in candidate.banks_mut().iter_mut().zip(model.banks()) {
                proposal.propose_into(src.weights(), dst.weights_mut(), rng);
            }
        }
        FreezeKind::LayerCyclic => {
            let layer = batch_index % model.num_conv_layers();
            proposal.propose_into(model.banks()[layer].weights(), candidate.banks_mut()[layer].weights_mut(), rng);
        }
        FreezeKind::RandomFilter => {
            let mask = sample_freeze_mask(model, freeze.gamma, rng);
            for (b, frozen) in mask.iter().enumerate() {
                for (f, &is_frozen) in frozen.iter().enumerate() {
                    if !is_frozen {
                        let src = model.banks()[b].filter(f);
                        proposal.propose_into(src, candidate.banks_mut()[b].filter_mut(f), rng);
                    }
                }
            }
        }
    }
    candidate
}

/// One Blind Descent update on `batch`.
#[allow(clippy::too_many_arguments)]
pub fn blind_descent_step<T: Scalar>(
    model: &mut NetworkModel<T>,
    batch: &Tensor4<T>,
    labels: &[usize],
    proposal: &ProposalSpec,
    freeze: &FreezePolicy,
    batch_index: usize,
    rng: &mut RngStream,
) -> Result<StepOutcome> {
    let before = batch_loss(&model.forward(batch)?, labels)?;
    let candidate = propose_model(model, proposal, freeze, batch_index, rng);
    let after = batch_loss(&candidate.forward(batch)?, labels)?;
    let accepted = after < before;
    if accepted {
        *model = candidate;
    }
    Ok(StepOutcome {
        batch_index,
        loss_before: before.as_f64(),
        loss_after: after.as_f64(),
        accepted,
        trainer: TrainerKind::BlindDescent,
        sampled_eta: None,
        nonfinite_gradient: false,
    })
}

/// One first-order gradient step with a log-uniform random learning rate,
/// kept only if it lowers the batch loss.
pub fn gradient_check_step<T: Scalar>(
    model: &mut NetworkModel<T>,
    batch: &Tensor4<T>,
    labels: &[usize],
    batch_index: usize,
    rng: &mut RngStream,
) -> Result<StepOutcome> {
    let cache = forward_with_cache(model, batch, labels)?;
    let before = cache.loss();
    let grad = backward(model, &cache)?;
    let eta = sample_learning_rate(rng);
    let mut outcome = StepOutcome {
        batch_index,
        loss_before: before.as_f64(),
        loss_after: before.as_f64(),
        accepted: false,
        trainer: TrainerKind::GradientCheck,
        sampled_eta: Some(eta),
        nonfinite_gradient: false,
    };
    if !grad.is_finite() {
        outcome.nonfinite_gradient = true;
        return Ok(outcome);
    }
    let step = T::lit(eta);
    let mut candidate = model.clone();
    for (bank, g) in candidate.banks_mut().iter_mut().zip(grad.banks()) {
        for (w, &gi) in bank.weights_mut().iter_mut().zip(g) {
            *w -= step * gi;
        }
    }
    let after = batch_loss(&candidate.forward(batch)?, labels)?;
    outcome.loss_after = after.as_f64();
    if after < before {
        outcome.accepted = true;
        *model = candidate;
    }
    Ok(outcome)
}

/// Fraction of accepted steps.
pub fn acceptance_rate(steps: &[StepOutcome]) -> Result<f64> {
    if steps.is_empty() {
        return Err(Error::EmptyInput("acceptance_rate"));
    }
    Ok(steps.iter().filter(|s| s.accepted).count() as f64 / steps.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub test_accuracy: f64,
    pub acceptance_rate: f64,
    /// Mean pre-step batch loss over the epoch.
    pub mean_loss: f64,
    /// Seconds since training started; not part of any deterministic output.
    pub wall_clock: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: NetworkModel<T>,
    pub initial_accuracy: f64,
    pub steps: Vec<StepOutcome>,
    pub epochs: Vec<EpochRecord>,
}

impl<T> TrainOutcome<T> {
    /// Test accuracy after the last epoch, or of the initial model.
    pub fn final_accuracy(&self) -> f64 {
        self.epochs.last().map_or(self.initial_accuracy, |e| e.test_accuracy)
    }
}

/// Seeded initial model for `config` on data of the training set's geometry.
pub fn initial_model<T: Scalar>(config: &TrainerConfig, train_set: &LabeledDataset<T>) -> Result<NetworkModel<T>> {
    Ok(NetworkModel::three_layer(
        config.conv_mode,
        train_set.geometry(),
        train_set.num_classes(),
        config.hidden_filters,
    )?
    .init_weights(derive_seed(config.seed, &[TAG_INIT])))
}

pub fn train<T: Scalar>(
    config: &TrainerConfig,
    train_set: &LabeledDataset<T>,
    test_set: &LabeledDataset<T>,
) -> Result<TrainOutcome<T>> {
    train_with(config, train_set, test_set, |_| {})
}

/// [`train`] with a callback after every epoch.
///
/// The batch index passed to each step counts batches globally across epochs.
pub fn train_with<T: Scalar>(
    config: &TrainerConfig,
    train_set: &LabeledDataset<T>,
    test_set: &LabeledDataset<T>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::EmptyInput("train: datasets must be nonempty"));
    }
    let started = Instant::now();
    let mut model = initial_model(config, train_set)?;
    let initial_accuracy = model.evaluate(test_set, EVAL_BATCH)?;
    let plan = BatchPlan::new(train_set.len(), config.batch_size, derive_seed(config.seed, &[TAG_SHUFFLE]))?;
    let mut rng = RngStream::derived(config.seed, &[TAG_STEPS]);
    let mut steps = Vec::with_capacity(config.epochs * plan.batches_per_epoch());
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut batch_index = 0;
    for epoch in 0..config.epochs {
        let first = steps.len();
        for indices in plan.epoch(epoch) {
            let (images, labels) = train_set.batch(&indices)?;
            let outcome = match config.trainer {
                TrainerKind::BlindDescent => blind_descent_step(
                    &mut model,
                    &images,
                    &labels,
                    &config.proposal,
                    &config.freeze,
                    batch_index,
                    &mut rng,
                )?,
                TrainerKind::GradientCheck => gradient_check_step(&mut model, &images, &labels, batch_index, &mut rng)?,
            };
            steps.push(outcome);
            batch_index += 1;
        }
        let this_epoch = &steps[first..];
        let record = EpochRecord {
            epoch: epoch + 1,
            test_accuracy: model.evaluate(test_set, EVAL_BATCH)?,
            acceptance_rate: acceptance_rate(this_epoch)?,
            mean_loss: this_epoch.iter().map(|s| s.loss_before).sum::<f64>() / this_epoch.len() as f64,
            wall_clock: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        epochs.push(record);
    }
    Ok(TrainOutcome { model, initial_accuracy, steps, epochs })
}
