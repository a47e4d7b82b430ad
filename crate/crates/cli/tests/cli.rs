use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mfp_core::checkpoint::save_checkpoint;
use mfp_core::model::{ArchSpec, ConvSpec, ModelState};
use mfp_core::visualize::write_pgm;
use mfp_core::{FilterBank, PruneMask, Tensor};

fn mfp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfp"))
        .args(args)
        .output()
        .expect("spawn mfp")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

const SMALL: &str = r#"{
  "dataset": {"kind": "synthetic", "n_train": 80, "n_eval": 30, "classes": 6, "image_size": 8},
  "eval_batch_size": 20,
  "epochs": 3,
  "seed": 1
}"#;

fn small_config(dir: &Path) -> String {
    let p = dir.join("small.json");
    fs::write(&p, SMALL).unwrap();
    p.to_string_lossy().into_owned()
}

fn abc_checkpoint(path: &Path) {
    let conv = |i, o| ConvSpec {
        in_channels: i,
        out_channels: o,
        kernel: 1,
        stride: 1,
        pad: 0,
    };
    let arch = ArchSpec {
        input: [3, 1, 1],
        convs: vec![conv(3, 3), conv(3, 2)],
        classes: 2,
    };
    let abc = Tensor::new(vec![3, 3, 1, 1], vec![1.0, 1.0, 1.0, 1.1, 1.0, 1.0, 0.5, 0.3, 0.2]).unwrap();
    let model = ModelState::from_parts(
        arch,
        vec![
            FilterBank::new(abc).unwrap(),
            FilterBank::new(Tensor::filled(&[2, 3, 1, 1], 0.5)).unwrap(),
        ],
        Tensor::filled(&[2, 2], 0.1),
        Tensor::zeros(&[2]),
        vec![PruneMask::all_keep(3), PruneMask::all_keep(2)],
    )
    .unwrap();
    save_checkpoint(path, &model, 0, 0).unwrap();
}

#[test]
fn out_of_range_rate_is_a_usage_error() {
    let o = mfp(&["train", "--prune-rate", "1.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("prune-rate"));
}

#[test]
fn unknown_flags_and_values_are_usage_errors() {
    assert_eq!(mfp(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(mfp(&["train", "--criteria", "l1,euclid"]).status.code(), Some(2));
    assert_eq!(mfp(&["train", "--meta-attribute", "top3"]).status.code(), Some(2));
    assert_eq!(mfp(&["train", "--dataset", "imagenet"]).status.code(), Some(2));
    assert_eq!(mfp(&["train", "--epochs", "0"]).status.code(), Some(2));
}

#[test]
fn bad_config_file_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    fs::write(&p, r#"{"epochz": 3}"#).unwrap();
    assert_eq!(mfp(&["train", "--config", p.to_str().unwrap()]).status.code(), Some(2));
    fs::write(&p, r#"{"epochs": 2, "interval": 3}"#).unwrap();
    assert_eq!(mfp(&["train", "--config", p.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn missing_cifar_directory_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let arg = format!("cifar10={}", dir.path().join("absent").display());
    let out = dir.path().join("run");
    let o = mfp(&[
        "train",
        "--dataset",
        &arg,
        "--epochs",
        "1",
        "--interval",
        "1",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn zero_rate_train_emits_reports_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = mfp(&[
            "train",
            "--config",
            &cfg,
            "--epochs",
            "2",
            "--interval",
            "2",
            "--prune-rate",
            "0",
            "--out-dir",
            out.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        (out, stdout(&o))
    };
    let (a, out_a) = run("a");
    let (b, out_b) = run("b");
    assert!(out_a.contains("epochs 2\n"));
    assert!(out_a.contains("theoretical_reduction 0\n"));
    for f in ["report.csv", "report.json", "final.ckpt", "masked.ckpt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(
        out_a.replace(a.to_str().unwrap(), ""),
        out_b.replace(b.to_str().unwrap(), "")
    );
    let csv = fs::read_to_string(a.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 + 1);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("run");
    let o = mfp(&[
        "train",
        "--config",
        &cfg,
        "--epochs",
        "1",
        "--interval",
        "1",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("epochs 1\n"));
    let manifest = fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 1"));
}

#[test]
fn analyze_reproduces_the_abc_example() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("abc.ckpt");
    abc_checkpoint(&ckpt);
    let p = ckpt.to_str().unwrap();
    let l1 = mfp(&["analyze", p, "--criterion", "l1", "--layer", "0", "--rate", "0.34"]);
    assert_eq!(l1.status.code(), Some(0));
    assert!(stdout(&l1).ends_with("prune 2\n"), "{}", stdout(&l1));
    let d1 = mfp(&[
        "analyze",
        p,
        "--criterion",
        "minkowski1",
        "--layer",
        "0",
        "--rate",
        "0.34",
    ]);
    assert!(stdout(&d1).ends_with("prune 0\n"), "{}", stdout(&d1));
    assert_eq!(
        stdout(&d1),
        stdout(&mfp(&["analyze", p, "--criterion", "minkowski1", "--rate", "0.34"]))
    );
    assert_eq!(mfp(&["analyze", p, "--layer", "5"]).status.code(), Some(2));
}

#[test]
fn corrupt_checkpoints_fail_at_runtime() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("abc.ckpt");
    abc_checkpoint(&ckpt);
    let bytes = fs::read(&ckpt).unwrap();
    let cut = dir.path().join("cut.ckpt");
    fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
    assert_eq!(mfp(&["analyze", cut.to_str().unwrap()]).status.code(), Some(1));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    fs::write(&cut, &bad).unwrap();
    assert_eq!(mfp(&["flops", cut.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn flops_of_an_unpruned_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("abc.ckpt");
    abc_checkpoint(&ckpt);
    let o = mfp(&["flops", ckpt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(
        out.contains("baseline_macs 15\n") && out.contains("pruned_macs 15\n"),
        "{out}"
    );
    assert!(out.ends_with("theoretical_reduction 0\n"));
}

#[test]
fn gradcheck_passes() {
    let o = mfp(&["gradcheck", "--seed", "7"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.ends_with("ok\n"));
    assert!(out.lines().any(|l| l.starts_with("conv0 ")));
}

#[test]
fn visualize_writes_one_image_per_filter() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = dir.path().join("run");
    let o = mfp(&[
        "train",
        "--config",
        &cfg,
        "--epochs",
        "2",
        "--interval",
        "2",
        "--out-dir",
        run.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let img = dir.path().join("in.pgm");
    let pixels: Vec<u8> = (0..64).map(|i| (i * 4) as u8).collect();
    write_pgm(&img, &pixels, 8, 8).unwrap();
    for (ckpt, expected) in [("masked.ckpt", 8), ("final.ckpt", 5)] {
        let out = dir.path().join(ckpt);
        let o = mfp(&[
            "visualize",
            run.join(ckpt).to_str().unwrap(),
            img.to_str().unwrap(),
            "--layer",
            "0",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(stdout(&o).lines().count(), expected);
        assert_eq!(fs::read_dir(&out).unwrap().count(), expected);
    }
}
