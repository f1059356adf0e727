use std::fs;
use std::path::Path;

use pmsacl_core::pipeline::{run, Command, ConfigValues, PipelineError, RunFlags};

const TINY: &str = "
[data]
train = 16
val_normal = 6
val_abnormal = 6
test_normal = 8
test_abnormal = 8

[encoder]
epochs = 2
batch_size = 8

[igd]
epochs = 2
batch_size = 8
global_scales = 2
local_scales = 1
local_patch = 16
local_stride = 16

[eval]
groups = 2
group_size = 4
";

fn tiny(extra: &str) -> ConfigValues {
    ConfigValues::parse(&format!("{TINY}\n{extra}")).unwrap()
}

fn flags(out: &Path) -> RunFlags {
    RunFlags {
        seed: 5,
        out: out.to_path_buf(),
        allow_hash_mismatch: false,
        hard: false,
    }
}

fn chain(cfg: &ConfigValues, f: &RunFlags, commands: &[Command]) {
    for &c in commands {
        run(c, cfg, f).unwrap_or_else(|e| panic!("{c}: {e}"));
    }
}

use Command::*;

#[test]
fn full_chain_is_deterministic_across_runs_and_workers() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let steps = [Synth, Pretrain, FitPadim, FitIgd, Score, Eval, Report];
    chain(&tiny(""), &flags(a.path()), &steps);
    chain(&tiny("[runtime]\nworkers = 3\n"), &flags(b.path()), &steps);
    for rel in [
        "pretrain/encoder.pmck",
        "padim/model.pmdm",
        "igd/model.pmck",
        "scores/padim.json",
        "scores/igd.maps",
        "eval/padim/metrics.json",
        "eval/igd/metrics.json",
        "report/padim/roc.svg",
    ] {
        let x = fs::read(a.path().join(rel)).unwrap();
        let y = fs::read(b.path().join(rel)).unwrap();
        assert!(x == y, "{rel} differs");
    }
    let metrics: serde_json::Value =
        serde_json::from_slice(&fs::read(a.path().join("eval/padim/metrics.json")).unwrap()).unwrap();
    for k in ["detector", "seed", "auroc", "specificity", "sensitivity", "accuracy", "threshold", "iou", "dice", "pro"] {
        assert!(metrics.get(k).is_some(), "metrics.json lacks {k}");
    }
    assert!(a.path().join("report/padim/overlays").read_dir().unwrap().count() > 0);
}

#[test]
fn eval_without_scores_is_missing_artifact() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny("");
    run(Synth, &cfg, &flags(d.path())).unwrap();
    let e = run(Eval, &cfg, &flags(d.path())).unwrap_err();
    assert!(matches!(e, PipelineError::Missing(_)), "{e}");
    assert_eq!(e.exit_code(), 3);
}

#[test]
fn unknown_key_is_a_config_error() {
    let e = ConfigValues::parse("[encoder]\nepoch = 3\n").unwrap_err();
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn dataset_from_other_seed_is_refused() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny("");
    let mut f = flags(d.path());
    chain(&cfg, &f, &[Synth]);
    f.seed += 1;
    let e = run(Pretrain, &cfg, &f).unwrap_err();
    assert!(e.to_string().contains("--seed 5"), "{e}");
    assert_eq!(e.exit_code(), 2);
    f.seed -= 1;
    f.hard = !f.hard;
    assert_eq!(run(Pretrain, &cfg, &f).unwrap_err().exit_code(), 2);
}

#[test]
fn padim_model_is_not_an_encoder() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny("");
    let f = flags(d.path());
    chain(&cfg, &f, &[Synth, Pretrain, FitPadim]);
    fs::copy(d.path().join("padim/model.pmdm"), d.path().join("pretrain/encoder.pmck")).unwrap();
    let e = run(FitIgd, &cfg, &f).unwrap_err();
    assert!(e.to_string().contains("wrong artifact type"), "{e}");
    assert_eq!(e.exit_code(), 3);
}

#[test]
fn corrupt_record_is_named_and_hash_mismatch_is_refusable() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny("");
    let mut f = flags(d.path());
    chain(&cfg, &f, &[Synth, Pretrain, FitPadim]);

    let other = tiny("[padim]\neps = 0.02\n");
    let e = run(Score, &other, &f).unwrap_err();
    assert!(matches!(e, PipelineError::HashMismatch { .. }), "{e}");
    assert_eq!(e.exit_code(), 2);
    f.allow_hash_mismatch = true;
    run(Score, &other, &f).unwrap();
    f.allow_hash_mismatch = false;

    // The first record follows magic, version, hash, count and the name length.
    let path = d.path().join("padim/model.pmdm");
    let mut bytes = fs::read(&path).unwrap();
    let name_len = u16::from_le_bytes([bytes[41], bytes[42]]) as usize;
    let name = String::from_utf8(bytes[43..43 + name_len].to_vec()).unwrap();
    // Inflate the first extent of the record's tensor header past the end of the file.
    let tensor = 43 + name_len;
    bytes[tensor + 9] ^= 0x7f;
    fs::write(&path, &bytes).unwrap();
    let e = run(Score, &cfg, &f).unwrap_err();
    assert!(e.to_string().contains(&format!("record {name}")), "{e}");
    assert_eq!(e.exit_code(), 3);
}

#[test]
fn gradcheck_command_writes_errors() {
    let d = tempfile::tempdir().unwrap();
    run(Gradcheck, &ConfigValues::default(), &flags(d.path())).unwrap();
    let v: serde_json::Value = serde_json::from_slice(&fs::read(d.path().join("gradcheck.json")).unwrap()).unwrap();
    for k in ["ctr", "pmsacl", "aug", "pos", "rec", "composed"] {
        assert!(v["f64"][k].as_f64().unwrap() < 1e-6);
        assert!(v["f32_normwise"][k].as_f64().unwrap() < 1e-4);
    }
}

#[test]
fn ablate_writes_one_metrics_file_per_cell() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny("[encoder]\nepochs = 1\n[ablate]\ncells = random_init, ccd, ccd_medmix, full, classes_4\n");
    run(Ablate, &cfg, &flags(d.path())).unwrap();
    for c in ["random_init", "ccd", "ccd_medmix", "full", "classes_4"] {
        assert!(d.path().join("ablate").join(c).join("metrics.json").exists(), "{c}");
    }
    let full = fs::read(d.path().join("ablate/full/metrics.json")).unwrap();
    assert_eq!(full, fs::read(d.path().join("ablate/classes_4/metrics.json")).unwrap());
    let s: serde_json::Value = serde_json::from_slice(&fs::read(d.path().join("ablate/summary.json")).unwrap()).unwrap();
    assert!(s["full_minus_ccd"].is_number());
    let e = run(Ablate, &tiny("[ablate]\ncells = nope\n"), &flags(d.path())).unwrap_err();
    assert_eq!(e.exit_code(), 2);
}
