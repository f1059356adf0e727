//! Training-progress checks on the synthetic set.

use std::fs;
use std::path::Path;

use pmsacl_core::detect::IGD_MAGIC;
use pmsacl_core::pipeline::{read_container, run, Command, ConfigValues, Layout, RunFlags};

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn flags(out: &Path, seed: u64, hard: bool) -> RunFlags {
    RunFlags {
        seed,
        out: out.to_path_buf(),
        allow_hash_mismatch: false,
        hard,
    }
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn five_epochs_lower_the_total_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ConfigValues::parse("[encoder]\nepochs = 5\n").unwrap();
    let mut drops = Vec::new();
    for seed in 1..=3 {
        let f = flags(&tmp.path().join(seed.to_string()), seed, false);
        run(Command::Synth, &cfg, &f).unwrap();
        run(Command::Pretrain, &cfg, &f).unwrap();
        let curves = json(&Layout::new(&f.out).curves());
        let total = |e: usize| curves["epochs"][e]["total"].as_f64().unwrap();
        drops.push(total(0) - total(4));
    }
    println!("epoch 1 minus epoch 5 total loss: {drops:?}");
    assert!(median(drops) > 0.0);
}

#[test]
fn ten_igd_epochs_lower_the_reconstruction_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ConfigValues::parse("[data]\ntrain = 64\n[encoder]\nepochs = 0\n[igd]\nepochs = 10\n").unwrap();
    let mut drops = Vec::new();
    for seed in 1..=3 {
        let f = flags(&tmp.path().join(seed.to_string()), seed, false);
        for c in [Command::Synth, Command::Pretrain, Command::FitIgd] {
            run(c, &cfg, &f).unwrap();
        }
        let t = read_container(&Layout::new(&f.out).igd(), &IGD_MAGIC).unwrap().trailer;
        let (a, b) = (t["rec_initial"].as_f64().unwrap(), t["rec_final"].as_f64().unwrap());
        assert!(a.is_finite() && b.is_finite());
        drops.push(a - b);
    }
    println!("initial minus final reconstruction error: {drops:?}");
    assert!(median(drops) > 0.0);
}

#[test]
fn untrained_encoder_centres_match_or_beat_random_centres() {
    let tmp = tempfile::tempdir().unwrap();
    let mut auc = Vec::new();
    for strategy in ["untrained", "random"] {
        let cfg = ConfigValues::parse(&format!("[encoder]\ncentres = {strategy}\n")).unwrap();
        let f = flags(&tmp.path().join(strategy), 1, true);
        for c in [Command::Synth, Command::Pretrain, Command::FitPadim, Command::Score, Command::Eval] {
            run(c, &cfg, &f).unwrap();
        }
        auc.push(json(&f.out.join("eval/padim/metrics.json"))["auroc"].as_f64().unwrap());
    }
    println!("hard-mode test AUROC, untrained centres {:.4}, random centres {:.4}", auc[0], auc[1]);
    assert!(auc[0] >= auc[1]);
}
