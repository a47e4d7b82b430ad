//! Greedy criterion selection during training.
//!
//! At every pruning step each candidate criterion proposes masks for all
//! conv layers at the shared rate. Each proposal is applied to a throwaway
//! copy of the model and scored with a meta-attribute; the criterion whose
//! pruned copy stays closest to the reference value `M(F)` wins and exactly
//! one criterion is applied per step.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::criteria::CriterionId;
use crate::data::Dataset;
use crate::error::{MfpError, Result};
use crate::filters::PruneMask;
use crate::flops::{model_flops, FlopsReport};
use crate::model::{in_top_k, EvalStats, ModelState};
use crate::tensor::SgdConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MetaAttributeId {
    /// Top-5 error on the held-out batch.
    Top5Loss,
    /// Top-1 error on the held-out batch.
    Top1Loss,
    /// Mean of all conv weights.
    MeanWeight,
    /// Number of nonzero filters.
    Sparsity,
    /// Uniform draw; selection becomes a random pick (baseline).
    Random,
}

impl MetaAttributeId {
    pub const ALL: [MetaAttributeId; 5] = [
        MetaAttributeId::Top5Loss,
        MetaAttributeId::Top1Loss,
        MetaAttributeId::MeanWeight,
        MetaAttributeId::Sparsity,
        MetaAttributeId::Random,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            MetaAttributeId::Top5Loss => "top5",
            MetaAttributeId::Top1Loss => "top1",
            MetaAttributeId::MeanWeight => "mean",
            MetaAttributeId::Sparsity => "sparsity",
            MetaAttributeId::Random => "random",
        }
    }

    pub fn needs_eval_batch(&self) -> bool {
        matches!(self, MetaAttributeId::Top5Loss | MetaAttributeId::Top1Loss)
    }
}

impl fmt::Display for MetaAttributeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetaAttributeId {
    type Err = MfpError;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        Self::ALL.into_iter().find(|a| a.name() == lower).ok_or_else(|| {
            MfpError::InvalidArgument(format!(
                "unknown meta-attribute {s:?} (expected top5, top1, mean, sparsity or random)"
            ))
        })
    }
}

impl Serialize for MetaAttributeId {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for MetaAttributeId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One-hot choice over the candidate list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionVector(Vec<u8>);

impl ActionVector {
    pub fn one_hot(len: usize, index: usize) -> Self {
        let mut v = vec![0; len];
        v[index] = 1;
        Self(v)
    }

    pub fn entries(&self) -> &[u8] {
        &self.0
    }

    pub fn is_one_hot(&self) -> bool {
        self.0.iter().all(|&a| a <= 1) && self.0.iter().map(|&a| a as usize).sum::<usize>() == 1
    }

    pub fn selected(&self) -> Option<usize> {
        self.0.iter().position(|&a| a == 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateEval {
    pub criterion: CriterionId,
    pub attribute_value: f64,
    pub gap: f64,
    /// Zero-norm cosine pairs encountered while scoring (0 for other criteria).
    pub degenerate_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneStepRecord {
    pub step: usize,
    pub epoch: usize,
    pub attribute: MetaAttributeId,
    pub reference_value: f64,
    pub candidates: Vec<CandidateEval>,
    pub selected: CriterionId,
    pub action: ActionVector,
    pub masks: Vec<PruneMask>,
}

impl PruneStepRecord {
    pub fn selected_gap(&self) -> f64 {
        self.candidates[self.action.selected().expect("one-hot action")].gap
    }

    /// The selected gap is no larger than any candidate's gap.
    pub fn is_greedy_optimal(&self) -> bool {
        let g = self.selected_gap();
        self.candidates.iter().all(|c| g <= c.gap)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_top1: f64,
    pub eval_top5: f64,
    /// Nonzero filters after this epoch's pruning step (if any).
    pub kappa: usize,
    /// MACs of the network with the current masks removed.
    pub macs: u64,
}

fn error_rate(model: &ModelState, eval: &Dataset, k: usize) -> Result<f64> {
    if eval.is_empty() {
        return Err(MfpError::InvalidArgument(
            "meta-attribute needs a non-empty evaluation batch".into(),
        ));
    }
    let classes = model.arch().classes;
    let idx: Vec<usize> = (0..eval.len()).collect();
    let mut hits = 0usize;
    for chunk in idx.chunks(256) {
        let (batch, labels) = eval.batch(chunk)?;
        let logits = model.forward(&batch)?;
        hits += logits
            .data()
            .chunks_exact(classes)
            .zip(&labels)
            .filter(|(row, &l)| in_top_k(row, l, k))
            .count();
    }
    Ok(1.0 - hits as f64 / eval.len() as f64)
}

/// Scalar characterization of a network used to compare pruned and
/// unpruned models.
pub fn meta_attribute(
    model: &ModelState,
    eval: &Dataset,
    attribute: MetaAttributeId,
    rng: &mut impl Rng,
) -> Result<f64> {
    match attribute {
        MetaAttributeId::Top5Loss => {
            let classes = model.arch().classes;
            if classes < 6 {
                return Err(MfpError::InvalidArgument(format!(
                    "top-5 loss needs at least 6 classes, model has {classes} (top-5 accuracy would always be 1)"
                )));
            }
            error_rate(model, eval, 5)
        }
        MetaAttributeId::Top1Loss => error_rate(model, eval, 1),
        MetaAttributeId::MeanWeight => Ok(model.mean_conv_weight()),
        MetaAttributeId::Sparsity => Ok(model.nonzero_filters() as f64),
        MetaAttributeId::Random => Ok(rng.random::<f64>()),
    }
}

/// Masks for every conv layer from one criterion at a shared rate. The
/// classifier head is never pruned.
pub fn candidate_prune(model: &ModelState, criterion: CriterionId, rate: f64) -> Result<Vec<PruneMask>> {
    Ok(candidate_prune_scored(model, criterion, rate)?.0)
}

fn candidate_prune_scored(model: &ModelState, criterion: CriterionId, rate: f64) -> Result<(Vec<PruneMask>, usize)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(MfpError::InvalidArgument(format!(
            "prune rate must lie in [0, 1), got {rate}"
        )));
    }
    criterion.validate()?;
    let mut masks = Vec::with_capacity(model.num_layers());
    let mut degenerate = 0;
    for i in 0..model.num_layers() {
        let bank = model.bank(i);
        let scores = criterion.score(i, bank)?;
        degenerate += scores.degenerate_pairs;
        masks.push(PruneMask::from_pruned(bank.out_channels(), &scores.select(rate)?)?);
    }
    Ok((masks, degenerate))
}

/// Where the reference value `M(F)` of a step comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceMode {
    /// The model as it stands before this step's pruning.
    #[default]
    Current,
    /// The model at initialization, measured once per run.
    Initial,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub criterion: CriterionId,
    pub masks: Vec<PruneMask>,
    pub record: PruneStepRecord,
}

/// Evaluates every candidate on a masked copy of `model` and returns the
/// one minimizing `|M(pruned) − M(F)|` (earliest candidate on ties). With
/// [`MetaAttributeId::Random`] a candidate is drawn uniformly instead; gaps
/// are still recorded. `model` is not modified.
///
/// `reference` overrides `M(F)`; `None` measures it on `model`.
pub fn select_criterion(
    model: &ModelState,
    eval: &Dataset,
    candidates: &[CriterionId],
    rate: f64,
    attribute: MetaAttributeId,
    reference: Option<f64>,
    rng: &mut impl Rng,
) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(MfpError::InvalidArgument("no candidate criteria".into()));
    }
    let reference_value = match reference {
        Some(v) => v,
        None => meta_attribute(model, eval, attribute, rng)?,
    };
    let mut evals = Vec::with_capacity(candidates.len());
    let mut proposals = Vec::with_capacity(candidates.len());
    for &criterion in candidates {
        let (masks, degenerate_pairs) = candidate_prune_scored(model, criterion, rate)?;
        let mut trial = model.clone();
        trial.apply_mask(&masks)?;
        let value = meta_attribute(&trial, eval, attribute, rng)?;
        evals.push(CandidateEval {
            criterion,
            attribute_value: value,
            gap: (value - reference_value).abs(),
            degenerate_pairs,
        });
        proposals.push(masks);
    }
    let chosen = if attribute == MetaAttributeId::Random {
        rng.random_range(0..candidates.len())
    } else {
        let mut best = 0;
        for (h, e) in evals.iter().enumerate() {
            if e.gap < evals[best].gap {
                best = h;
            }
        }
        best
    };
    let masks = proposals.swap_remove(chosen);
    let record = PruneStepRecord {
        step: 0,
        epoch: 0,
        attribute,
        reference_value,
        candidates: evals,
        selected: candidates[chosen],
        action: ActionVector::one_hot(candidates.len(), chosen),
        masks: masks.clone(),
    };
    Ok(Selection {
        criterion: candidates[chosen],
        masks,
        record,
    })
}

/// Step decay: the rate is multiplied by `factor` at each listed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    /// 0-based epochs at which a decay takes effect.
    pub decay_epochs: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    /// Decays by `factor` at 50% and 75% of `epochs`.
    pub fn halves_and_quarters(initial: f64, epochs: usize, factor: f64) -> Self {
        Self {
            initial,
            decay_epochs: vec![epochs / 2, epochs * 3 / 4],
            factor,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&d| epoch >= d).count();
        self.initial * self.factor.powi(decays as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub epochs: usize,
    pub interval: usize,
    pub prune_rate: f64,
    pub candidates: Vec<CriterionId>,
    pub attribute: MetaAttributeId,
    pub reference: ReferenceMode,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl RunConfig {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.interval == 0 || self.epochs < self.interval {
            return Err(MfpError::InvalidArgument(format!(
                "need epochs >= interval >= 1, got epochs {} interval {}",
                self.epochs, self.interval
            )));
        }
        if !(0.0..1.0).contains(&self.prune_rate) {
            return Err(MfpError::InvalidArgument(format!(
                "prune rate must lie in [0, 1), got {}",
                self.prune_rate
            )));
        }
        if self.candidates.is_empty() {
            return Err(MfpError::InvalidArgument("no candidate criteria".into()));
        }
        for c in &self.candidates {
            c.validate()?;
        }
        if self.attribute == MetaAttributeId::Top5Loss && classes < 6 {
            return Err(MfpError::InvalidArgument(format!(
                "top-5 loss needs at least 6 classes, got {classes}"
            )));
        }
        if self.batch_size == 0 {
            return Err(MfpError::InvalidArgument("batch size must be >= 1".into()));
        }
        self.sgd_at(0).validate()
    }

    pub fn sgd_at(&self, epoch: usize) -> SgdConfig {
        SgdConfig {
            lr: self.lr.lr_at(epoch),
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    /// Whether a pruning step follows 1-based epoch `epoch`.
    pub fn prunes_after(&self, epoch: usize) -> bool {
        epoch.is_multiple_of(self.interval) || epoch == self.epochs
    }
}

/// Data a pruning run reads.
#[derive(Debug, Clone, Copy)]
pub struct RunData<'a> {
    pub train: &'a Dataset,
    /// Fixed held-out batch for loss meta-attributes.
    pub meta_eval: &'a Dataset,
    /// Evaluation split for per-epoch reports.
    pub eval: &'a Dataset,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Soft-pruned model after the last step (full shape).
    pub masked_model: ModelState,
    /// Hard-pruned deliverable.
    pub final_model: ModelState,
    pub steps: Vec<PruneStepRecord>,
    pub epochs: Vec<EpochReport>,
    pub final_eval: EvalStats,
    pub flops: FlopsReport,
}

/// A run that stopped early, with everything recorded before the failure.
#[derive(Debug, Error)]
#[error("pruning run aborted after {} epochs: {error}", epochs.len())]
pub struct RunFailure {
    #[source]
    pub error: MfpError,
    pub steps: Vec<PruneStepRecord>,
    pub epochs: Vec<EpochReport>,
}

fn derive_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Trains for `config.epochs`, pruning after every `interval` epochs and
/// after the final epoch, then compacts the soft-pruned model.
pub fn run_pruning_training(
    model: ModelState,
    data: RunData<'_>,
    config: &RunConfig,
) -> std::result::Result<RunOutput, RunFailure> {
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    match run_inner(model, data, config, &mut steps, &mut epochs) {
        Ok((masked_model, final_model, final_eval, flops)) => Ok(RunOutput {
            masked_model,
            final_model,
            steps,
            epochs,
            final_eval,
            flops,
        }),
        Err(error) => Err(RunFailure { error, steps, epochs }),
    }
}

fn run_inner(
    mut model: ModelState,
    data: RunData<'_>,
    config: &RunConfig,
    steps: &mut Vec<PruneStepRecord>,
    epochs: &mut Vec<EpochReport>,
) -> Result<(ModelState, ModelState, EvalStats, FlopsReport)> {
    config.validate(model.arch().classes)?;
    let mut train_rng = derive_rng(config.seed, 1);
    let mut meta_rng = derive_rng(config.seed, 2);
    let fixed_reference = match config.reference {
        ReferenceMode::Current => None,
        ReferenceMode::Initial => Some(meta_attribute(&model, data.meta_eval, config.attribute, &mut meta_rng)?),
    };
    for epoch in 1..=config.epochs {
        let sgd = config.sgd_at(epoch - 1);
        let stats = model.train_epoch(data.train, &sgd, config.batch_size, &mut train_rng)?;
        if !stats.loss.is_finite() || !model.is_finite() {
            return Err(MfpError::Diverged { epoch });
        }
        if config.prunes_after(epoch) {
            let mut sel = select_criterion(
                &model,
                data.meta_eval,
                &config.candidates,
                config.prune_rate,
                config.attribute,
                fixed_reference,
                &mut meta_rng,
            )?;
            model.apply_mask(&sel.masks)?;
            sel.record.step = steps.len();
            sel.record.epoch = epoch;
            steps.push(sel.record);
        }
        let eval = model.evaluate(data.eval)?;
        let flops = model_flops(&model, model.masks())?;
        epochs.push(EpochReport {
            epoch,
            lr: sgd.lr,
            train_loss: stats.loss,
            train_acc: stats.accuracy,
            eval_top1: eval.top1,
            eval_top5: eval.top5,
            kappa: model.nonzero_filters(),
            macs: flops.pruned_macs,
        });
    }
    let final_model = model.compact(model.masks())?;
    let final_eval = final_model.evaluate(data.eval)?;
    let flops = model_flops(&model, model.masks())?;
    Ok((model, final_model, final_eval, flops))
}
