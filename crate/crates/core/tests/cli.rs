mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use m2ctts_core::extractors::cache::read_tensor;
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_m2ctts");

const SMALL: [&str; 16] = [
    "--model.d_model", "16",
    "--model.style_dim", "8",
    "--model.ffn_filter", "24",
    "--model.variance_filter", "8",
    "--model.encoder_layers", "1",
    "--model.decoder_layers", "1",
    "--model.n_bins", "16",
    "--train.batch_size", "3",
];

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("M2CTTS_SEED")
        .output()
        .expect("binary runs")
}

fn run_env(args: &[&str], seed: &str) -> Output {
    Command::new(BIN)
        .args(args)
        .env("M2CTTS_SEED", seed)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn toy(dir: &Path) -> PathBuf {
    let corpus = dir.join("corpus");
    let o = run(&["gen-toy", "--out", p(&corpus), "--seed", "7"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    corpus
}

fn train(corpus: &Path, out: &Path, ablation: &str, steps: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "train", "--corpus", p(corpus), "--out", p(out), "--seed", "5", "--ablation", ablation,
        "--train.steps", steps, "--train.checkpoint_every", "2",
    ];
    args.extend(SMALL);
    args.extend(extra);
    run(&args)
}

#[test]
fn preprocess_fills_cache_and_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = toy(dir.path());
    let out = dir.path().join("pre");
    let o = run(&["preprocess", "--corpus", p(&corpus), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let files = snapshot(&out);
    let cached = files.keys().filter(|k| k.starts_with("cache")).count();
    assert_eq!(cached, 4 * 8);
    for kind in ["text-utterance", "acoustic-utterance", "text-sequence", "acoustic-sequence"] {
        assert_eq!(files.keys().filter(|k| k.to_string_lossy().contains(kind)).count(), 8, "{kind}");
    }
    let stats: Value = serde_json::from_slice(&files[Path::new("stats.json")]).unwrap();
    let cfg: Value = serde_json::from_slice(&files[Path::new("config.json")]).unwrap();
    assert_eq!(cfg["model"]["pitch_range"], stats["pitch_range"]);
    assert_eq!(cfg["model"]["energy_range"], stats["energy_range"]);

    let again = run(&["preprocess", "--corpus", p(&corpus), "--out", p(&out)]);
    assert_eq!(code(&again), 0);
    assert_eq!(snapshot(&out), files);
}

#[test]
fn cache_mode_lists_missing_keys() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = toy(dir.path());
    let out = dir.path().join("pre");
    assert_eq!(code(&run(&["preprocess", "--corpus", p(&corpus), "--out", p(&out)])), 0);
    let cache = out.join("cache");
    let victim = cache.join("toy_0001").join("2.acoustic-sequence.m2ct");
    assert!(victim.exists(), "expected cache layout {}", victim.display());
    fs::remove_file(&victim).unwrap();
    let o = run(&[
        "preprocess", "--corpus", p(&corpus), "--out", p(&dir.path().join("check")),
        "--cache", p(&cache), "--data.extractor", "cache",
    ]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("toy_0001") && err.contains("2.acoustic-sequence"), "{err}");
    assert_eq!(err.matches("missing:").count(), 1, "{err}");
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = toy(dir.path());
    let out = dir.path().join("x");
    assert_eq!(code(&run(&["frobnicate"])), 2);
    assert_eq!(code(&run(&["train", "--out", p(&out)])), 2);
    let o = run(&["train", "--corpus", p(&corpus), "--out", p(&out), "--model.colour", "red"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("colour"));
    assert_eq!(code(&run(&["train", "--corpus", p(&corpus), "--out", p(&out), "--ablation", "M9"])), 2);
    assert_eq!(code(&run(&["verify", "nonsense"])), 2);
    assert_eq!(code(&run(&["ablate", "--corpus", p(&corpus), "--out", p(&out), "--names", "M1,M8"])), 2);
    assert_eq!(code(&run(&["train", "--corpus", p(&corpus), "--out", p(&out), "stray"])), 2);
}

#[test]
fn missing_corpus_is_a_failure_not_usage() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["train", "--corpus", p(&dir.path().join("nope")), "--out", p(&dir.path().join("o"))]);
    assert_eq!(code(&o), 1);
}

#[test]
fn verify_reports_each_property() {
    let o = run(&["verify", "windowing"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.lines().filter(|l| l.starts_with("[PASS] windowing/")).count() >= 2, "{text}");
    let all = run(&["verify"]);
    assert_eq!(code(&all), 0, "{}", stdout(&all));
    for suite in ["attention", "saln", "gradients", "masking", "windowing", "cache", "ablation"] {
        assert!(stdout(&all).contains(&format!("] {suite}/")), "{suite}");
    }
    assert!(!stdout(&all).contains("[FAIL]"));
}

#[test]
fn train_writes_artifacts_and_resume_matches() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = toy(dir.path());
    let full = dir.path().join("full");
    let o = train(&corpus, &full, "M7", "4", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["config.json", "loss.jsonl", "final.m2ck", "checkpoints/step_0000002.m2ck", "checkpoints/step_0000004.m2ck"] {
        assert!(full.join(f).exists(), "{f}");
    }
    let cfg: Value = serde_json::from_str(&fs::read_to_string(full.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["seed"], 5);
    assert_eq!(cfg["ablation"], "M7");
    assert_eq!(cfg["model"]["d_model"], 16);
    let curve = fs::read_to_string(full.join("loss.jsonl")).unwrap();
    assert_eq!(curve.lines().count(), 4);

    let resumed = dir.path().join("resumed");
    let ck = full.join("checkpoints/step_0000002.m2ck");
    let o = train(&corpus, &resumed, "M7", "4", &["--resume", p(&ck)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let tail: Vec<&str> = curve.lines().skip(2).collect();
    assert_eq!(fs::read_to_string(resumed.join("loss.jsonl")).unwrap().lines().collect::<Vec<_>>(), tail);
    assert_eq!(fs::read(resumed.join("final.m2ck")).unwrap(), fs::read(full.join("final.m2ck")).unwrap());

    let o = train(&corpus, &dir.path().join("bad"), "M7", "4", &["--resume", p(&ck), "--model.d_model", "32"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("config hash mismatch"), "{}", stderr(&o));
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = toy(dir.path());
    let go = |out: &Path, seed: &str| {
        let mut args = vec!["train", "--corpus", p(&corpus), "--out", p(out), "--train.steps", "2"];
        args.extend(SMALL);
        let o = run_env(&args, seed);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let cfg: Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
        (cfg["seed"].clone(), fs::read(out.join("final.m2ck")).unwrap())
    };
    let (sa, a) = go(&dir.path().join("a"), "41");
    let (sb, b) = go(&dir.path().join("b"), "41");
    let (sc, c) = go(&dir.path().join("c"), "42");
    assert_eq!(sa, 41);
    assert_eq!(sb, 41);
    assert_eq!(sc, 42);
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn synthesize_writes_mel_and_attention_dumps() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = toy(dir.path());
    let mut mels = Vec::new();
    for ablation in ["M1", "M7"] {
        let run_dir = dir.path().join(ablation);
        assert_eq!(code(&train(&corpus, &run_dir, ablation, "2", &[])), 0);
        let ck = run_dir.join("final.m2ck");
        for t in ["0", "3"] {
            let out = dir.path().join(format!("syn_{ablation}_{t}"));
            let args = ["synthesize", "--checkpoint", p(&ck), "--corpus", p(&corpus), "--dialogue", "toy_0000", "--turn", t, "--out", p(&out)];
            let o = run(&args);
            assert_eq!(code(&o), 0, "{}", stderr(&o));
            let mel = out.join(format!("toy_0000_{t}.mel.m2ct"));
            assert_eq!(stdout(&o).trim(), p(&mel));
            let tensor = read_tensor(&mel).unwrap();
            assert_eq!(tensor.dims[1], 80);
            assert!(tensor.data.iter().all(|x| x.is_finite()));
            let first = fs::read(&mel).unwrap();
            assert_eq!(code(&run(&args)), 0);
            assert_eq!(fs::read(&mel).unwrap(), first, "synthesis is not deterministic");
            assert!(out.join("config.json").exists());
            let dumps = ["tpm_attn", "wpm_attn"].map(|k| out.join(format!("toy_0000_{t}.{k}.m2ct")).exists());
            assert_eq!(dumps, [ablation == "M7" && t == "3"; 2], "{ablation} t={t}");
            if t == "3" {
                mels.push(first);
            }
        }
    }
    assert_ne!(mels[0], mels[1]);
    let wpm = read_tensor(&dir.path().join("syn_M7_3/toy_0000_3.wpm_attn.m2ct")).unwrap();
    assert_eq!(wpm.dims.len(), 3);
    assert_eq!(wpm.dims[0], 2);

    let o = run(&["synthesize", "--checkpoint", p(&dir.path().join("M7/final.m2ck")), "--corpus", p(&corpus), "--dialogue", "toy_0000", "--turn", "9", "--out", p(&dir.path().join("z"))]);
    assert_eq!(code(&o), 1);
}

#[test]
fn ablate_writes_one_row_per_config() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = toy(dir.path());
    let go = |out: &Path| {
        let mut args = vec!["ablate", "--corpus", p(&corpus), "--out", p(out), "--names", "M1,M7", "--seed", "2", "--train.steps", "3"];
        args.extend(SMALL);
        let o = run(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        fs::read_to_string(out.join("metrics.jsonl")).unwrap()
    };
    let table = go(&dir.path().join("a"));
    assert!(dir.path().join("a/config.json").exists());
    let rows: Vec<Value> = table.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["name"], "M1");
    assert_eq!(rows[0]["final"]["prosody_mse"], 0.0);
    assert!(rows[1]["final"]["prosody_mse"].as_f64().unwrap() > 0.0);
    for r in &rows {
        for k in ["mel_l1", "pitch_mse", "energy_mse", "logdur_mse", "prosody_mse", "total"] {
            assert!(r["final"][k].is_number(), "{k}");
        }
    }
    assert_eq!(go(&dir.path().join("b")), table);
}
