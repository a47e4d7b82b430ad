//! Experiment configuration and orchestration: dataset construction, the
//! pruning run, report emission and the final checkpoint.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::criteria::CriterionId;
use crate::data::{gen_synthetic_dataset, load_cifar10_dir, Dataset, SplitDataset};
use crate::error::{MfpError, Result};
use crate::flops::timing_harness;
use crate::meta::{run_pruning_training, LrSchedule, MetaAttributeId, ReferenceMode, RunConfig, RunData, RunOutput};
use crate::model::{build_model, ArchSpec};
use crate::report::{emit_report, FinalSummary, ReportBundle};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        n_train: usize,
        n_eval: usize,
        classes: usize,
        image_size: usize,
    },
    /// Directory holding the CIFAR-10 binary batches.
    Cifar10 { path: PathBuf },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic {
            n_train: 1500,
            n_eval: 500,
            classes: 10,
            image_size: 12,
        }
    }
}

impl DatasetSpec {
    pub fn classes(&self) -> usize {
        match self {
            DatasetSpec::Synthetic { classes, .. } => *classes,
            DatasetSpec::Cifar10 { .. } => crate::data::CIFAR_CLASSES,
        }
    }

    pub fn load(&self, seed: u64) -> Result<SplitDataset> {
        match self {
            DatasetSpec::Synthetic {
                n_train,
                n_eval,
                classes,
                image_size,
            } => gen_synthetic_dataset(seed, *n_train, *n_eval, *classes, *image_size),
            DatasetSpec::Cifar10 { path } => load_cifar10_dir(path),
        }
    }
}

fn default_epochs() -> usize {
    60
}
fn default_interval() -> usize {
    2
}
fn default_prune_rate() -> f64 {
    0.4
}
fn default_criteria() -> Vec<CriterionId> {
    CriterionId::default_set()
}
fn default_attribute() -> MetaAttributeId {
    MetaAttributeId::Top5Loss
}
fn default_lr() -> f64 {
    0.02
}
fn default_decay_factor() -> f64 {
    0.1
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    5e-4
}
fn default_batch_size() -> usize {
    32
}
fn default_eval_batch_size() -> usize {
    512
}

/// Every knob of an experiment. Fields missing from a JSON config take the
/// defaults shown by [`ExperimentConfig::default`]; unknown fields are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    /// `None` selects the four-layer desk architecture sized to the dataset.
    #[serde(default)]
    pub arch: Option<ArchSpec>,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_interval")]
    pub interval: usize,
    #[serde(default = "default_prune_rate")]
    pub prune_rate: f64,
    #[serde(default = "default_criteria")]
    pub criteria: Vec<CriterionId>,
    #[serde(default = "default_attribute")]
    pub meta_attribute: MetaAttributeId,
    #[serde(default)]
    pub reference: ReferenceMode,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// 0-based epochs where the learning rate decays; `None` means 50% and 75% of `epochs`.
    #[serde(default)]
    pub lr_decay_epochs: Option<Vec<usize>>,
    #[serde(default = "default_decay_factor")]
    pub lr_decay_factor: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Samples held out of the training split for loss meta-attributes.
    #[serde(default = "default_eval_batch_size")]
    pub eval_batch_size: usize,
    /// Time baseline vs. pruned forward passes (makes reports machine-dependent).
    #[serde(default)]
    pub measure_timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            arch: None,
            dataset: DatasetSpec::default(),
            epochs: default_epochs(),
            interval: default_interval(),
            prune_rate: default_prune_rate(),
            criteria: default_criteria(),
            meta_attribute: default_attribute(),
            reference: ReferenceMode::default(),
            lr: default_lr(),
            lr_decay_epochs: None,
            lr_decay_factor: default_decay_factor(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            batch_size: default_batch_size(),
            eval_batch_size: default_eval_batch_size(),
            measure_timing: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn run_config(&self) -> RunConfig {
        let lr = match &self.lr_decay_epochs {
            Some(d) => LrSchedule {
                initial: self.lr,
                decay_epochs: d.clone(),
                factor: self.lr_decay_factor,
            },
            None => LrSchedule::halves_and_quarters(self.lr, self.epochs, self.lr_decay_factor),
        };
        RunConfig {
            epochs: self.epochs,
            interval: self.interval,
            prune_rate: self.prune_rate,
            candidates: self.criteria.clone(),
            attribute: self.meta_attribute,
            reference: self.reference,
            lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let DatasetSpec::Synthetic { classes, .. } = self.dataset {
            if classes < 2 {
                return Err(MfpError::InvalidArgument(
                    "synthetic dataset needs at least 2 classes".into(),
                ));
            }
        }
        if self.eval_batch_size == 0 {
            return Err(MfpError::InvalidArgument("eval batch size must be >= 1".into()));
        }
        if let Some(arch) = &self.arch {
            arch.validate()?;
        }
        self.run_config().validate(self.dataset.classes())
    }

    fn arch_for(&self, data: &Dataset) -> Result<ArchSpec> {
        let arch = match &self.arch {
            Some(a) => a.clone(),
            None => {
                let [c, h, _] = data.image_shape();
                ArchSpec::desk(c, h, data.classes())
            }
        };
        if arch.input != data.image_shape() || arch.classes != data.classes() {
            return Err(MfpError::InvalidArchitecture(format!(
                "architecture expects input {:?} and {} classes, dataset has {:?} and {}",
                arch.input,
                arch.classes,
                data.image_shape(),
                data.classes()
            )));
        }
        Ok(arch)
    }
}

/// Seed of the model initializer, kept distinct from the dataset stream.
pub fn model_seed(seed: u64) -> u64 {
    seed ^ 0x5eed_1417_c0de_0001
}

fn holdout_seed(seed: u64) -> u64 {
    seed ^ 0x4e1d_0075_eba7_c400
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub library_version: String,
    /// Wall-clock duration of the run; varies between runs.
    pub timing_wall_seconds: f64,
    pub files: Vec<String>,
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub bundle: ReportBundle,
    pub run: RunOutput,
    pub wall_seconds: f64,
}

/// Compacted (hard-pruned) model.
pub const CHECKPOINT_FILE: &str = "final.ckpt";
/// Full-shape soft-pruned model with its masks.
pub const MASKED_CHECKPOINT_FILE: &str = "masked.ckpt";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Runs one experiment end to end. When `out_dir` is given, writes
/// the reports, both checkpoints and `manifest.json` there; a
/// failed run still flushes its partial reports before returning the error.
pub fn run_experiment(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentOutcome> {
    let start = Instant::now();
    config.validate()?;
    let split = config.dataset.load(config.seed)?;
    let (train, meta_eval) = split
        .train
        .hold_out(config.eval_batch_size, holdout_seed(config.seed))?;
    let arch = config.arch_for(&train)?;
    let model = build_model(&arch, model_seed(config.seed))?;
    let data = RunData {
        train: &train,
        meta_eval: &meta_eval,
        eval: &split.eval,
    };
    let mut bundle = ReportBundle {
        config: config.clone(),
        normalization: train.normalization().cloned(),
        epochs: Vec::new(),
        steps: Vec::new(),
        final_summary: None,
        flops: None,
        aborted: None,
    };
    let mut run = match run_pruning_training(model, data, &config.run_config()) {
        Ok(run) => run,
        Err(failure) => {
            bundle.epochs = failure.epochs;
            bundle.steps = failure.steps;
            bundle.aborted = Some(failure.error.to_string());
            if let Some(dir) = out_dir {
                emit_report(&bundle, dir)?;
            }
            return Err(failure.error);
        }
    };
    if config.measure_timing {
        let n = split.eval.len().min(64);
        let (batch, _) = split.eval.batch(&(0..n).collect::<Vec<_>>())?;
        let baseline = build_model(&arch, model_seed(config.seed))?;
        let base_ms = timing_harness(&baseline, &batch, 2, 5)?;
        let pruned_ms = timing_harness(&run.final_model, &batch, 2, 5)?;
        run.flops = run.flops.clone().with_timing(base_ms, pruned_ms);
    }
    bundle.epochs = run.epochs.clone();
    bundle.steps = run.steps.clone();
    bundle.final_summary = Some(FinalSummary {
        eval_loss: run.final_eval.loss,
        eval_top1: run.final_eval.top1,
        eval_top5: run.final_eval.top5,
        kappa: run.final_model.nonzero_filters(),
        total_filters: run.masked_model.total_filters(),
    });
    bundle.flops = Some(run.flops.clone());
    let wall_seconds = start.elapsed().as_secs_f64();
    if let Some(dir) = out_dir {
        let (csv, json) = emit_report(&bundle, dir)?;
        let ckpt = dir.join(CHECKPOINT_FILE);
        save_checkpoint(&ckpt, &run.final_model, config.seed, config.epochs)?;
        let masked = dir.join(MASKED_CHECKPOINT_FILE);
        save_checkpoint(&masked, &run.masked_model, config.seed, config.epochs)?;
        let manifest = RunManifest {
            config: config.clone(),
            library_version: env!("CARGO_PKG_VERSION").to_string(),
            timing_wall_seconds: wall_seconds,
            files: [csv, json, ckpt, masked]
                .iter()
                .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
                .collect(),
        };
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| MfpError::io(&path, e))?;
    }
    Ok(ExperimentOutcome {
        bundle,
        run,
        wall_seconds,
    })
}
