use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sprc_core::training::TrainConfig;

fn sprc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sprc")).args(args).env("RUST_LOG", "warn").output().expect("spawn sprc")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small dataset plus a fast training config.
fn fixture(dir: &Path, extra: &str) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    let spec = dir.join("spec.toml");
    fs::write(&spec, "corpus_size = 24\nn_triplets = 60\ngrowth_candidates = 8\n").unwrap();
    let o = sprc(&["synth", "--config", p(&spec), "--out", p(&data), "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = dir.join("train.toml");
    fs::write(
        &cfg,
        format!("steps = 6\nbatch_size = 4\nprompt_length = 2\nd_model = 8\nd_embed = 8\nd_ff = 8\nmlp_hidden = 8\ninv_hidden = 8\ninner_steps = 2\nlr = 1e-3\n{extra}"),
    )
    .unwrap();
    (data, cfg)
}

fn metrics(dir: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(dir.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn synth_is_deterministic_and_complete() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    for d in [&a, &b] {
        let o = sprc(&["synth", "--out", p(d), "--seed", "5", "--corpus-size", "20"]);
        assert_eq!(code(&o), 0);
    }
    for f in ["corpus.bin", "triplets.tsv", "vocab.txt", "dataset.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 4);
}

#[test]
fn unwritable_output_exits_one() {
    let t = tempfile::tempdir().unwrap();
    let blocker = t.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let o = sprc(&["synth", "--out", p(&blocker.join("sub"))]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn single_step_logs_one_record_and_echoes_defaults() {
    let t = tempfile::tempdir().unwrap();
    let (data, cfg) = fixture(t.path(), "");
    fs::write(&cfg, fs::read_to_string(&cfg).unwrap().replace("steps = 6", "steps = 1")).unwrap();
    let run = t.path().join("run");
    let o = sprc(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&run)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let recs = metrics(&run);
    assert_eq!(recs.len(), 1);
    for key in ["step", "Lc", "La", "L", "lr"] {
        assert!(recs[0].get(key).is_some(), "missing {key}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["gamma"], 0.8);
    assert!(run.join("checkpoint.bin").exists());
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let t = tempfile::tempdir().unwrap();
    let (data, cfg) = fixture(t.path(), "");
    let full = t.path().join("full");
    assert_eq!(code(&sprc(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&full)])), 0);

    let part = t.path().join("part");
    let o = sprc(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&part), "--stop-after", "3"]);
    assert_eq!(code(&o), 0);
    assert_eq!(metrics(&part).len(), 3);
    let ckpt = part.join("checkpoint.bin");
    let o = sprc(&["train", "--data", p(&data), "--resume", p(&ckpt), "--out", p(&part)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(metrics(&part), metrics(&full));
    assert_eq!(fs::read(part.join("checkpoint.bin")).unwrap(), fs::read(full.join("checkpoint.bin")).unwrap());
}

#[test]
fn identity_rerank_matches_first_stage() {
    let t = tempfile::tempdir().unwrap();
    let (data, cfg) = fixture(t.path(), "");
    let run = t.path().join("run");
    assert_eq!(code(&sprc(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&run)])), 0);
    let ckpt = run.join("checkpoint.bin");
    let (plain, ident) = (t.path().join("plain"), t.path().join("ident"));
    assert_eq!(code(&sprc(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&plain)])), 0);
    let o = sprc(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&ident), "--rerank", "identity", "--top-m", "5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["rankings.jsonl", "recall.csv"] {
        assert_eq!(fs::read(plain.join(f)).unwrap(), fs::read(ident.join(f)).unwrap(), "{f}");
    }
    let csv = fs::read_to_string(plain.join("recall.csv")).unwrap();
    assert!(csv.starts_with("group,R@1,R@5,R@10,R@50,Rs@1,Rs@2,Rs@3"), "{csv}");
}

#[test]
fn unknown_mechanism_in_config_exits_two() {
    let t = tempfile::tempdir().unwrap();
    let (data, cfg) = fixture(t.path(), "mechanism = \"NOPE\"\n");
    let o = sprc(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&t.path().join("run"))]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("SPRC"));
}

#[test]
fn sweep_with_failing_cell_exits_four() {
    let t = tempfile::tempdir().unwrap();
    let (data, cfg) = fixture(t.path(), "");
    let out = t.path().join("sweep");
    let o = sprc(&["sweep", "--axis", "gamma", "--values", "0.5,-1", "--data", p(&data), "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("sweep.csv").exists());
    assert!(out.join("cells/gamma=0.5/seed0/metrics.jsonl").exists());
}

#[test]
fn desk_profile_is_the_desk_config() {
    let text = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("desk.profile")).unwrap();
    assert_eq!(TrainConfig::from_toml(&text).unwrap(), TrainConfig::desk());
}
