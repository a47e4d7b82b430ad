use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mfp_core::checkpoint::load_checkpoint;
use mfp_core::flops::{model_flops, timing_harness, FlopsReport};
use mfp_core::gradcheck::{random_gradcheck, GRADCHECK_TOLERANCE};
use mfp_core::harness::{run_experiment, DatasetSpec, ExperimentConfig};
use mfp_core::visualize::{read_image, render_feature_maps};
use mfp_core::{CriterionId, MetaAttributeId, MfpError, Tensor};

/// Filter-pruning lab: train with meta-selected pruning criteria and inspect the results.
#[derive(Parser)]
#[command(name = "mfp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model with soft filter pruning and write reports and checkpoints.
    Train(TrainArgs),
    /// Print criterion scores for one layer of a checkpoint and the filters it would prune.
    Analyze(AnalyzeArgs),
    /// Print the MAC counts of a checkpoint under its stored masks.
    Flops(FlopsArgs),
    /// Check analytic gradients against finite differences on a random small model.
    Gradcheck(GradcheckArgs),
    /// Write one PGM image per output channel of a conv layer.
    Visualize(VisualizeArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON experiment config; flags given here override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of filters pruned per layer, in [0, 1). [default: 0.4]
    #[arg(long, value_parser = parse_rate)]
    prune_rate: Option<f64>,
    /// Epochs between pruning steps. [default: 2]
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    interval: Option<u64>,
    /// [default: 60]
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    epochs: Option<u64>,
    /// Comma-separated candidate criteria. [default: l1,l2,minkowski1,minkowski2,cosine]
    #[arg(long, value_delimiter = ',')]
    criteria: Option<Vec<CriterionId>>,
    /// One of top5, top1, mean, sparsity, random. [default: top5]
    #[arg(long)]
    meta_attribute: Option<MetaAttributeId>,
    /// `synthetic` or `cifar10=DIR` (DIR holds the binary batch files). [default: synthetic]
    #[arg(long, value_parser = parse_dataset)]
    dataset: Option<DatasetSpec>,
    /// Time baseline and pruned forward passes (machine-dependent numbers).
    #[arg(long)]
    measure_timing: bool,
    #[arg(long, default_value = "mfp-run")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    checkpoint: PathBuf,
    #[arg(long, default_value = "l1")]
    criterion: CriterionId,
    #[arg(long, default_value_t = 0)]
    layer: usize,
    #[arg(long, default_value_t = 0.4, value_parser = parse_rate)]
    rate: f64,
}

#[derive(Args)]
struct FlopsArgs {
    checkpoint: PathBuf,
    /// Also time forward passes of the full and the compacted model.
    #[arg(long)]
    time: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct VisualizeArgs {
    checkpoint: PathBuf,
    /// PGM (grayscale) or PNM (RGB) image matching the model input shape.
    image: PathBuf,
    #[arg(long, default_value_t = 0)]
    layer: usize,
    #[arg(long, default_value = "feature-maps")]
    out: PathBuf,
}

fn parse_rate(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("must lie in [0, 1), got {v}"))
    }
}

fn parse_dataset(s: &str) -> Result<DatasetSpec, String> {
    if s == "synthetic" {
        return Ok(DatasetSpec::default());
    }
    match s.split_once('=') {
        Some(("cifar10", dir)) if !dir.is_empty() => Ok(DatasetSpec::Cifar10 { path: dir.into() }),
        _ => Err(format!("expected `synthetic` or `cifar10=DIR`, got `{s}`")),
    }
}

enum Failure {
    Usage(String),
    Runtime(MfpError),
}

impl From<MfpError> for Failure {
    fn from(e: MfpError) -> Self {
        Failure::Runtime(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let outcome = match cli.command {
        Command::Train(a) => train(a),
        Command::Analyze(a) => analyze(a),
        Command::Flops(a) => flops(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Visualize(a) => visualize(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
    ExperimentConfig::from_json(&text).map_err(|e| Failure::Usage(format!("bad config {}: {e}", path.display())))
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut config = match &a.config {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = a.seed {
        config.seed = v;
    }
    if let Some(v) = a.prune_rate {
        config.prune_rate = v;
    }
    if let Some(v) = a.interval {
        config.interval = v as usize;
    }
    if let Some(v) = a.epochs {
        config.epochs = v as usize;
    }
    if let Some(v) = a.criteria {
        config.criteria = v;
    }
    if let Some(v) = a.meta_attribute {
        config.meta_attribute = v;
    }
    if let Some(v) = a.dataset {
        config.dataset = v;
    }
    config.measure_timing |= a.measure_timing;
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;

    let outcome = run_experiment(&config, Some(&a.out_dir))?;
    let run = &outcome.run;
    println!("epochs {}", run.epochs.len());
    println!("prune_steps {}", run.steps.len());
    println!("final_eval_top1 {}", run.final_eval.top1);
    println!("final_eval_top5 {}", run.final_eval.top5);
    println!(
        "filters {} of {}",
        run.final_model.total_filters(),
        run.masked_model.total_filters()
    );
    println!("macs {} of {}", run.flops.pruned_macs, run.flops.baseline_macs);
    println!("theoretical_reduction {}", run.flops.theoretical_reduction);
    print_timing(&run.flops);
    println!("out_dir {}", a.out_dir.display());
    Ok(())
}

fn print_timing(report: &FlopsReport) {
    if let (Some(b), Some(p)) = (report.measured_ms_baseline, report.measured_ms_pruned) {
        println!("timing(machine-dependent) baseline_ms {b:.3} pruned_ms {p:.3}");
        if let Some(r) = report.realistic_reduction() {
            println!("timing(machine-dependent) realistic_reduction {r:.4}");
        }
    }
}

fn analyze(a: AnalyzeArgs) -> Result<(), Failure> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let model = &ckpt.model;
    if a.layer >= model.num_layers() {
        return Err(Failure::Usage(format!(
            "layer {} out of range, checkpoint has {} conv layers",
            a.layer,
            model.num_layers()
        )));
    }
    let scores = a.criterion.score(a.layer, model.bank(a.layer))?;
    println!("layer {} criterion {} rate {}", a.layer, a.criterion, a.rate);
    println!("filter score");
    for (j, s) in scores.scores.iter().enumerate() {
        println!("{j} {s}");
    }
    if a.criterion == CriterionId::CosineAveD {
        println!("degenerate_pairs {}", scores.degenerate_pairs);
    }
    let pruned = scores.select(a.rate)?;
    let list: Vec<String> = pruned.iter().map(|j| j.to_string()).collect();
    println!("prune {}", list.join(","));
    Ok(())
}

fn flops(a: FlopsArgs) -> Result<(), Failure> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let model = &ckpt.model;
    let mut report = model_flops(model, model.masks())?;
    println!("layer baseline_macs pruned_macs");
    for l in &report.layers {
        println!("{} {} {}", l.layer, l.baseline_macs, l.pruned_macs);
    }
    println!("baseline_macs {}", report.baseline_macs);
    println!("pruned_macs {}", report.pruned_macs);
    println!("theoretical_reduction {}", report.theoretical_reduction);
    if a.time {
        let [c, h, w] = model.arch().input;
        let batch = Tensor::zeros(&[64, c, h, w]);
        let compact = model.compact(model.masks())?;
        let base = timing_harness(model, &batch, 2, 5)?;
        let pruned = timing_harness(&compact, &batch, 2, 5)?;
        report = report.with_timing(base, pruned);
        print_timing(&report);
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<(), Failure> {
    let checks = random_gradcheck(a.seed)?;
    println!("param max_rel_error checked skipped_kinks");
    for c in &checks {
        println!("{} {:.3e} {} {}", c.name, c.max_rel_error, c.checked, c.skipped_kinks);
    }
    if let Some(bad) = checks.iter().find(|c| !c.passed()) {
        return Err(Failure::Runtime(MfpError::InvalidArgument(format!(
            "gradient check failed for {}: max relative error {:.3e} exceeds {GRADCHECK_TOLERANCE:e}",
            bad.name, bad.max_rel_error
        ))));
    }
    println!("ok");
    Ok(())
}

fn visualize(a: VisualizeArgs) -> Result<(), Failure> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let image = read_image(&a.image)?;
    let files = render_feature_maps(&ckpt.model, &image, a.layer, &a.out)?;
    for f in &files {
        println!("{}", f.display());
    }
    Ok(())
}
