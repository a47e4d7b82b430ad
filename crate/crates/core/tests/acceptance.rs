//! Acceptance gate: runs every criterion and prints one PASS/FAIL line each.
//! Exits non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mfp_core::criteria::average_distance_scores;
use mfp_core::flops::{model_flops, theoretical_reduction};
use mfp_core::gradcheck::{random_gradcheck, GRADCHECK_TOLERANCE};
use mfp_core::harness::{
    run_experiment, ExperimentConfig, ExperimentOutcome, CHECKPOINT_FILE, MANIFEST_FILE, MASKED_CHECKPOINT_FILE,
};
use mfp_core::meta::MetaAttributeId;
use mfp_core::model::{build_model, ArchSpec, ConvSpec, ModelState};
use mfp_core::tensor::conv2d_forward;
use mfp_core::{CriterionId, FilterBank, PruneMask, Tensor};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($fmt)+));
        }
    };
}

const SEEDS: u64 = 5;

/// Desk-scale runs shared by several criteria.
struct SharedRuns {
    _dir: tempfile::TempDir,
    top5: Vec<(ExperimentOutcome, PathBuf)>,
    random: Vec<ExperimentOutcome>,
    elapsed: Duration,
}

fn desk_config(seed: u64, attribute: MetaAttributeId) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        meta_attribute: attribute,
        epochs: 60,
        prune_rate: 0.4,
        interval: 2,
        ..ExperimentConfig::default()
    }
}

fn shared_runs() -> SharedRuns {
    let dir = tempfile::tempdir().expect("temp dir");
    let start = Instant::now();
    let mut top5 = Vec::new();
    let mut random = Vec::new();
    for seed in 0..SEEDS {
        let out_dir = dir.path().join(format!("top5-{seed}"));
        let out = run_experiment(&desk_config(seed, MetaAttributeId::Top5Loss), Some(&out_dir)).expect("top5 run");
        top5.push((out, out_dir));
        random.push(run_experiment(&desk_config(seed, MetaAttributeId::Random), None).expect("random run"));
    }
    SharedRuns {
        _dir: dir,
        top5,
        random,
        elapsed: start.elapsed(),
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut skipped = 0;
    for seed in 0..20 {
        for c in random_gradcheck(seed).map_err(|e| e.to_string())? {
            ensure!(
                c.passed(),
                "seed {seed} {}: max relative error {:.3e}",
                c.name,
                c.max_rel_error
            );
            ensure!(c.checked > 0, "seed {seed} {}: nothing checked", c.name);
            worst = worst.max(c.max_rel_error);
            skipped += c.skipped_kinks;
        }
    }
    let t = start.elapsed();
    ensure!(t < Duration::from_secs(60), "took {t:?}");
    Ok(format!(
        "20 seeds, worst relative error {worst:.2e} < {GRADCHECK_TOLERANCE:e}, {skipped} kink-crossing entries skipped, {:.1}s",
        t.as_secs_f64()
    ))
}

fn criterion_2() -> Outcome {
    let w = Tensor::new(vec![3, 3, 1, 1], vec![1.0, 1.0, 1.0, 1.1, 1.0, 1.0, 0.5, 0.3, 0.2]).unwrap();
    let bank = FilterBank::new(w).unwrap();
    let l1 = CriterionId::NormP(1.0).score(0, &bank).unwrap();
    let l1_pruned = l1.select(0.34).unwrap();
    ensure!(l1_pruned == vec![2], "l1 prunes {l1_pruned:?}");
    let d = CriterionId::MinkowskiAveD(1.0).score(0, &bank).unwrap();
    for (got, want) in d.scores.iter().zip([0.7000, 0.7333, 1.3667]) {
        ensure!((got - want).abs() < 1e-4, "AveD {got} vs {want}");
    }
    let d_pruned = d.select(0.34).unwrap();
    ensure!(d_pruned == vec![0], "minkowski1 prunes {d_pruned:?}");
    Ok(format!(
        "l1 prunes C, minkowski1 prunes A, AveD = {:.4}/{:.4}/{:.4}",
        d.scores[0], d.scores[1], d.scores[2]
    ))
}

fn brute_force(bank: &FilterBank, metric: CriterionId) -> Vec<f64> {
    let n = bank.out_channels();
    let mut out = vec![0.0; n];
    for (i, o) in out.iter_mut().enumerate() {
        for j in 0..n {
            let (x, y) = (bank.filter(i), bank.filter(j));
            let d = match metric {
                CriterionId::MinkowskiAveD(p) => x
                    .iter()
                    .zip(y)
                    .map(|(a, b)| (a - b).abs().powf(p))
                    .sum::<f64>()
                    .powf(1.0 / p),
                CriterionId::CosineAveD => {
                    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
                    let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
                    let ny = y.iter().map(|a| a * a).sum::<f64>().sqrt();
                    if nx == 0.0 || ny == 0.0 {
                        1.0
                    } else {
                        1.0 - dot / (nx * ny)
                    }
                }
                CriterionId::NormP(_) => unreachable!(),
            };
            *o += if i == j { 0.0 } else { d };
        }
        *o /= n as f64;
    }
    out
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for layer in 0..50 {
        let n = rng.random_range(1..=32);
        let (c, k) = loop {
            let c = rng.random_range(1..=14);
            let k = [1, 3][rng.random_range(0..2)];
            if c * k * k <= 128 {
                break (c, k);
            }
        };
        let mut w = Tensor::from_fn(&[n, c, k, k], |_| rng.random_range(-1.0..1.0));
        if layer % 7 == 0 {
            w.data_mut()[..c * k * k].fill(0.0);
        }
        let bank = FilterBank::new(w).unwrap();
        for metric in [
            CriterionId::MinkowskiAveD(1.0),
            CriterionId::MinkowskiAveD(2.0),
            CriterionId::CosineAveD,
        ] {
            let (fast, _) = average_distance_scores(&bank, metric).map_err(|e| e.to_string())?;
            for (a, b) in fast.iter().zip(brute_force(&bank, metric)) {
                let diff = (a - b).abs();
                ensure!(diff <= 1e-12, "layer {layer} {metric}: {a} vs {b}");
                worst = worst.max(diff);
            }
        }
    }
    let t = start.elapsed();
    ensure!(t < Duration::from_secs(60), "took {t:?}");
    Ok(format!(
        "50 layers x 3 metrics, max |diff| {worst:.1e} <= 1e-12, {:.2}s",
        t.as_secs_f64()
    ))
}

fn random_model(rng: &mut ChaCha8Rng) -> ModelState {
    let layers = rng.random_range(2..=4);
    let mut channels = rng.random_range(1..=3);
    let size = rng.random_range(5..=9);
    let mut convs = Vec::new();
    for _ in 0..layers {
        let out = rng.random_range(2..=8);
        let kernel = [1, 3][rng.random_range(0..2)];
        convs.push(ConvSpec {
            in_channels: channels,
            out_channels: out,
            kernel,
            stride: rng.random_range(1..=2),
            pad: kernel / 2,
        });
        channels = out;
    }
    let arch = ArchSpec {
        input: [convs[0].in_channels, size, size],
        convs,
        classes: rng.random_range(2..=10),
    };
    let mut model = build_model(&arch, rng.random()).unwrap();
    model
        .classifier_mut()
        .1
        .data_mut()
        .iter_mut()
        .for_each(|b| *b = rng.random_range(-0.5..0.5));
    model
}

fn random_masks(model: &ModelState, rng: &mut ChaCha8Rng) -> Vec<PruneMask> {
    model
        .layers()
        .iter()
        .map(|l| {
            let n = l.bank.out_channels();
            let pruned: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.4)).collect();
            let pruned = if pruned.len() == n {
                pruned[1..].to_vec()
            } else {
                pruned
            };
            PruneMask::from_pruned(n, &pruned).unwrap()
        })
        .collect()
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for case in 0..10 {
        let mut model = random_model(&mut rng);
        let masks = random_masks(&model, &mut rng);
        model.apply_mask(&masks).unwrap();
        let compact = model.compact(&masks).unwrap();
        let [c, h, w] = model.arch().input;
        let b = rng.random_range(1..=4);
        let x = Tensor::from_fn(&[b, c, h, w], |_| rng.random_range(-1.0..1.0));
        let (soft, hard) = (model.forward(&x).unwrap(), compact.forward(&x).unwrap());
        for (u, v) in soft.data().iter().zip(hard.data()) {
            ensure!((u - v).abs() < 1e-9, "case {case}: {u} vs {v}");
            worst = worst.max((u - v).abs());
        }
    }
    Ok(format!("10 random models, max logit difference {worst:.1e} < 1e-9"))
}

/// Direct six-loop cross-correlation that counts every multiply-accumulate.
fn naive_conv_counting(x: &Tensor, bank: &FilterBank, stride: usize, pad: usize, macs: &mut u64) -> Tensor {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, k) = (bank.out_channels(), bank.kernel());
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[co, ho, wo]);
    for o in 0..co {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for c in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            *macs += 1;
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc += x.data()[(c * h + iy as usize) * w + ix as usize]
                                    * bank.filter(o)[(c * k + ky) * k + kx];
                            }
                        }
                    }
                }
                out.data_mut()[(o * ho + oy) * wo + ox] = acc;
            }
        }
    }
    out
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..10 {
        let model = random_model(&mut rng);
        let masks = random_masks(&model, &mut rng);
        let report = model_flops(&model, &masks).map_err(|e| e.to_string())?;
        let compact = model.compact(&masks).unwrap();
        let [c, h, w] = compact.arch().input;
        let mut x = Tensor::from_fn(&[c, h, w], |_| rng.random_range(-1.0..1.0));
        let mut macs = 0;
        for l in compact.layers() {
            let y = naive_conv_counting(&x, &l.bank, l.stride, l.pad, &mut macs);
            let fast = conv2d_forward(&x, &l.bank, l.stride, l.pad).unwrap();
            for (a, b) in y.data().iter().zip(fast.data()) {
                ensure!((a - b).abs() < 1e-12, "case {case}: naive conv disagrees");
            }
            x = y;
        }
        ensure!(
            report.pruned_macs == macs,
            "case {case}: model_flops {} vs counted {macs}",
            report.pruned_macs
        );
        let full = model_flops(&compact, compact.masks()).unwrap();
        ensure!(
            full.baseline_macs == macs,
            "case {case}: compacted baseline {}",
            full.baseline_macs
        );
    }
    let (a, b) = (theoretical_reduction(0.3, 0.3), theoretical_reduction(0.4, 0.4));
    ensure!(a == 0.51, "theoretical_reduction(0.3, 0.3) = {a:?}");
    ensure!(b == 0.64, "theoretical_reduction(0.4, 0.4) = {b:?}");
    Ok("10 models match the instrumented loop count exactly; reductions 0.51 and 0.64 exact".into())
}

fn criterion_6(runs: &SharedRuns) -> Outcome {
    let mut steps = 0;
    for (out, _) in &runs.top5 {
        ensure!(
            out.run.steps.len() == 30,
            "expected 30 steps, got {}",
            out.run.steps.len()
        );
        for s in &out.run.steps {
            let min = s.candidates.iter().map(|c| c.gap).fold(f64::INFINITY, f64::min);
            ensure!(
                s.selected_gap() <= min,
                "step {}: selected gap {} > {min}",
                s.step,
                s.selected_gap()
            );
            ensure!(s.action.is_one_hot(), "step {}: action {:?}", s.step, s.action);
            steps += 1;
        }
    }
    Ok(format!(
        "{steps} prune steps over {SEEDS} desk runs, all greedy-optimal and one-hot"
    ))
}

fn criterion_7(runs: &SharedRuns) -> Outcome {
    let top5: Vec<f64> = runs.top5.iter().map(|(o, _)| o.run.final_eval.top1).collect();
    let random: Vec<f64> = runs.random.iter().map(|o| o.run.final_eval.top1).collect();
    let (a, b) = (mean(&top5), mean(&random));
    let t = runs.elapsed;
    ensure!(t < Duration::from_secs(15 * 60), "took {t:?}");
    ensure!(a >= b, "top5 mean {a:.4} < random mean {b:.4}");
    Ok(format!(
        "mean final accuracy top5 {a:.4} >= random {b:.4} over {SEEDS} seeds (top5 {top5:?}, random {random:?}); {:.0}s",
        t.as_secs_f64()
    ))
}

fn criterion_8(runs: &SharedRuns) -> Outcome {
    let seeds = 3;
    let mut means = Vec::new();
    for interval in [1, 2, 5, 10] {
        let accs: Vec<f64> = if interval == 2 {
            runs.top5[..seeds].iter().map(|(o, _)| o.run.final_eval.top1).collect()
        } else {
            (0..seeds as u64)
                .map(|seed| {
                    let mut c = desk_config(seed, MetaAttributeId::Top5Loss);
                    c.interval = interval;
                    run_experiment(&c, None).map(|o| o.run.final_eval.top1)
                })
                .collect::<Result<_, _>>()
                .map_err(|e| format!("interval {interval}: {e}"))?
        };
        means.push((interval, mean(&accs)));
    }
    let lo = means.iter().map(|m| m.1).fold(f64::INFINITY, f64::min);
    let hi = means.iter().map(|m| m.1).fold(f64::NEG_INFINITY, f64::max);
    let list: Vec<String> = means.iter().map(|(i, m)| format!("{i}:{m:.4}")).collect();
    Ok(format!(
        "all intervals complete; mean accuracy over {seeds} seeds {}; spread {:.4}",
        list.join(" "),
        hi - lo
    ))
}

fn selected_criteria(csv_path: &Path) -> Result<BTreeSet<String>, String> {
    let mut reader = csv::Reader::from_path(csv_path).map_err(|e| e.to_string())?;
    let headers = reader.headers().map_err(|e| e.to_string())?.clone();
    let col = headers
        .iter()
        .position(|h| h == "selected_criterion")
        .ok_or("no selected_criterion column")?;
    let mut set = BTreeSet::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        if &rec[0] == "prune" {
            set.insert(rec[col].to_string());
        }
    }
    Ok(set)
}

fn criterion_9(runs: &SharedRuns) -> Outcome {
    let mut adaptive = 0;
    let mut notes = Vec::new();
    for (seed, (_, dir)) in runs.top5.iter().enumerate() {
        let set = selected_criteria(&dir.join("report.csv"))?;
        if set.len() >= 2 {
            adaptive += 1;
        } else {
            notes.push(format!("seed {seed} single-criterion {set:?}"));
        }
        println!("  criterion 9: seed {seed} selected {set:?}");
    }
    ensure!(
        adaptive >= 3,
        "only {adaptive}/{SEEDS} runs used >= 2 criteria; {}",
        notes.join(", ")
    );
    Ok(format!("{adaptive}/{SEEDS} runs select >= 2 distinct criteria"))
}

fn mask_timing(json: &str) -> String {
    let mut v: serde_json::Value = serde_json::from_str(json).unwrap();
    fn walk(v: &mut serde_json::Value) {
        match v {
            serde_json::Value::Object(m) => {
                for (k, x) in m.iter_mut() {
                    if k.starts_with("measured_ms") || k.starts_with("timing") {
                        *x = serde_json::Value::Null;
                    } else {
                        walk(x);
                    }
                }
            }
            serde_json::Value::Array(a) => a.iter_mut().for_each(walk),
            _ => {}
        }
    }
    walk(&mut v);
    v.to_string()
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = ExperimentConfig {
        seed: 10,
        epochs: 6,
        measure_timing: true,
        ..ExperimentConfig::default()
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_experiment(&config, Some(&a)).map_err(|e| e.to_string())?;
    run_experiment(&config, Some(&b)).map_err(|e| e.to_string())?;
    for f in ["report.csv", CHECKPOINT_FILE, MASKED_CHECKPOINT_FILE] {
        ensure!(
            fs::read(a.join(f)).unwrap() == fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
    for f in ["report.json", MANIFEST_FILE] {
        let (x, y) = (
            fs::read_to_string(a.join(f)).unwrap(),
            fs::read_to_string(b.join(f)).unwrap(),
        );
        ensure!(mask_timing(&x) == mask_timing(&y), "{f} differs outside timing fields");
    }
    Ok("repeated run gives byte-identical CSV and checkpoints, identical JSON with timing masked".into())
}

fn report(id: usize, f: impl FnOnce() -> Outcome) -> bool {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into()))
    });
    match outcome {
        Ok(detail) => {
            println!("criterion {id}: PASS - {detail}");
            true
        }
        Err(detail) => {
            println!("criterion {id}: FAIL - {detail}");
            false
        }
    }
}

fn main() {
    let mut ok = true;
    ok &= report(1, criterion_1);
    ok &= report(2, criterion_2);
    ok &= report(3, criterion_3);
    ok &= report(4, criterion_4);
    ok &= report(5, criterion_5);
    let runs = shared_runs();
    ok &= report(6, || criterion_6(&runs));
    ok &= report(7, || criterion_7(&runs));
    ok &= report(8, || criterion_8(&runs));
    ok &= report(9, || criterion_9(&runs));
    ok &= report(10, criterion_10);
    if !ok {
        println!("acceptance: FAILED");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
