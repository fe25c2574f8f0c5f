mod common;

use m2ctts_core::autodiff::{Mat, Tape};
use m2ctts_core::config::{AblationConfig, ModelConfig, Reduction, RunConfig};
use m2ctts_core::corpus::{all_windows, make_batch, TOY_VOCAB_SIZE};
use m2ctts_core::model::batch_inputs;
use m2ctts_core::training::{
    encode_checkpoint, run_ablation, total_loss, Checkpoint, ItemPrediction, LossWeights, Trainer,
    CHECKPOINT_MAGIC,
};
use m2ctts_core::verify::tiny_config;
use m2ctts_core::Error;

use common::*;

fn run_config(ablation: &str) -> RunConfig {
    let mut cfg = RunConfig {
        seed: Some(11),
        model: ModelConfig {
            vocab_size: TOY_VOCAB_SIZE,
            ..tiny_config()
        },
        ..RunConfig::default()
    };
    cfg.ablation = AblationConfig::named(ablation).unwrap();
    cfg.train.batch_size = 3;
    cfg
}

/// Targets as predictions, padded rows filled with `pad`.
fn perfect_predictions(tape: &mut Tape, items: &[m2ctts_core::model::ItemInputs], pad: f64) -> Vec<ItemPrediction> {
    items
        .iter()
        .map(|it| {
            let mut mel = it.mel.clone();
            for (mut row, &m) in mel.rows_mut().into_iter().zip(&it.frame_mask) {
                if !m {
                    row.fill(pad);
                }
            }
            let column = |v: Vec<f64>| {
                let n = v.len();
                let v = v
                    .into_iter()
                    .zip(&it.phoneme_mask)
                    .map(|(x, &m)| if m { x } else { pad })
                    .collect();
                Mat::from_shape_vec((n, 1), v).unwrap()
            };
            let logd = it.durations.iter().map(|&d| (d.max(1) as f64).ln()).collect();
            ItemPrediction {
                mel: tape.leaf(mel),
                log_duration: tape.leaf(column(logd)),
                pitch: tape.leaf(column(it.pitch.clone())),
                energy: tape.leaf(column(it.energy.clone())),
                prosody: Some(tape.row_leaf(&it.current_acoustic)),
            }
        })
        .collect()
}

#[test]
fn perfect_predictions_give_zero_loss_regardless_of_padding() {
    let dir = tempfile::tempdir().unwrap();
    let (_, dialogues) = toy_corpus(dir.path());
    let cfg = run_config("M7");
    let bank = stub_bank(&cfg, &dialogues);
    let windows = all_windows(&dialogues, cfg.data.c);
    let batch = make_batch(&windows, cfg.data.pad_id, cfg.data.c).unwrap();
    let items = batch_inputs(&batch, &bank, &cfg.model, cfg.data.pad_id).unwrap();
    let weights = LossWeights { lambda_prosody: 1.0, reduction: Reduction::Mean, prosody_active: true };
    let store = m2ctts_core::autodiff::ParamStore::new();
    for pad in [0.0, 3.0, -40.0] {
        let mut tape = Tape::new(&store);
        let preds = perfect_predictions(&mut tape, &items, pad);
        let (_, b) = total_loss(&mut tape, &preds, &items, weights).unwrap();
        assert_eq!(b.total, 0.0, "pad {pad}: {b:?}");
    }
}

#[test]
fn doubling_padded_values_leaves_loss_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let (_, dialogues) = toy_corpus(dir.path());
    let cfg = run_config("M7");
    let bank = stub_bank(&cfg, &dialogues);
    let windows = all_windows(&dialogues, cfg.data.c);
    let batch = make_batch(&windows, cfg.data.pad_id, cfg.data.c).unwrap();
    let items = batch_inputs(&batch, &bank, &cfg.model, cfg.data.pad_id).unwrap();
    let weights = LossWeights { lambda_prosody: 0.5, reduction: Reduction::Mean, prosody_active: true };
    let store = m2ctts_core::autodiff::ParamStore::new();
    let shifted = |pad: f64| {
        let mut tape = Tape::new(&store);
        let mut preds = perfect_predictions(&mut tape, &items, pad);
        for p in &mut preds {
            // offset every prediction so the real part contributes too
            p.mel = tape.add_scalar(p.mel, 0.25);
            p.pitch = tape.add_scalar(p.pitch, -0.5);
        }
        total_loss(&mut tape, &preds, &items, weights).unwrap().1
    };
    let a = shifted(1.5);
    let b = shifted(3.0);
    assert!(a.total > 0.0);
    assert_eq!(a, b);
    assert!((a.mel_l1 - 0.25).abs() < 1e-12);
    assert!((a.pitch_mse - 0.25).abs() < 1e-12);
}

#[test]
fn non_finite_term_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let (_, dialogues) = toy_corpus(dir.path());
    let cfg = run_config("M1");
    let bank = stub_bank(&cfg, &dialogues);
    let windows = all_windows(&dialogues, cfg.data.c);
    let batch = make_batch(&windows[..2], cfg.data.pad_id, cfg.data.c).unwrap();
    let mut items = batch_inputs(&batch, &bank, &cfg.model, cfg.data.pad_id).unwrap();
    items[1].energy[0] = f64::NAN;
    let store = m2ctts_core::autodiff::ParamStore::new();
    let mut tape = Tape::new(&store);
    let preds = perfect_predictions(&mut tape, &items, 0.0);
    let weights = LossWeights { lambda_prosody: 1.0, reduction: Reduction::Mean, prosody_active: false };
    let err = total_loss(&mut tape, &preds, &items, weights).unwrap_err();
    assert!(matches!(&err, Error::NonFinite(m) if m.contains("energy_mse")), "{err}");
}

#[test]
fn m1_reports_zero_prosody() {
    let dir = tempfile::tempdir().unwrap();
    let (_, dialogues) = toy_corpus(dir.path());
    let cfg = run_config("M1");
    let bank = stub_bank(&cfg, &dialogues);
    let mut t = Trainer::new(&cfg, &dialogues, &bank).unwrap();
    for _ in 0..3 {
        let b = t.train_step().unwrap();
        assert_eq!(b.prosody_mse, 0.0);
        let sum = b.mel_l1 + b.pitch_mse + b.energy_mse + b.logdur_mse;
        assert!((b.total - sum).abs() <= 1e-12 * sum.abs().max(1.0));
    }
}

#[test]
fn total_includes_weighted_prosody() {
    let dir = tempfile::tempdir().unwrap();
    let (_, dialogues) = toy_corpus(dir.path());
    let mut cfg = run_config("M2");
    cfg.train.lambda_prosody = 0.3;
    let bank = stub_bank(&cfg, &dialogues);
    let mut t = Trainer::new(&cfg, &dialogues, &bank).unwrap();
    let b = t.train_step().unwrap();
    assert!(b.prosody_mse > 0.0);
    let sum = b.mel_l1 + b.pitch_mse + b.energy_mse + b.logdur_mse + 0.3 * b.prosody_mse;
    assert!((b.total - sum).abs() <= 1e-12 * sum);
}

#[test]
fn identical_state_and_batch_give_identical_update() {
    let dir = tempfile::tempdir().unwrap();
    let (_, dialogues) = toy_corpus(dir.path());
    let cfg = run_config("M7");
    let bank = stub_bank(&cfg, &dialogues);
    let mut a = Trainer::new(&cfg, &dialogues, &bank).unwrap();
    let mut b = Trainer::new(&cfg, &dialogues, &bank).unwrap();
    for _ in 0..3 {
        assert_eq!(a.train_step().unwrap(), b.train_step().unwrap());
    }
    assert_eq!(
        encode_checkpoint(&a.config, &a.model.store, &a.state),
        encode_checkpoint(&b.config, &b.model.store, &b.state)
    );
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let (_, dialogues) = toy_corpus(dir.path());
    let mut cfg = run_config("M7");
    cfg.train.lr = 0.0;
    let bank = stub_bank(&cfg, &dialogues);
    let mut t = Trainer::new(&cfg, &dialogues, &bank).unwrap();
    let before = t.model.store.clone();
    let first = t.train_step().unwrap();
    for _ in 0..2 {
        t.train_step().unwrap();
    }
    for (id, p) in before.iter() {
        assert_eq!(&p.value, t.model.store.get(id), "{}", p.name);
    }
    assert!(first.total.is_finite());
}

#[test]
fn fixed_batch_overfits_mel() {
    let dir = tempfile::tempdir().unwrap();
    let (_, dialogues) = toy_corpus(dir.path());
    let mut cfg = RunConfig::desk();
    cfg.seed = Some(1);
    cfg.ablation = AblationConfig::named("M7").unwrap();
    let bank = stub_bank(&cfg, &dialogues);
    let windows = all_windows(&dialogues, cfg.data.c);
    let mut t = Trainer::new(&cfg, &dialogues, &bank).unwrap();
    let batch = make_batch(&windows[..2], cfg.data.pad_id, cfg.data.c).unwrap();
    let first = t.step_on_batch(&batch).unwrap().mel_l1;
    let mut last = first;
    for _ in 1..200 {
        last = t.step_on_batch(&batch).unwrap().mel_l1;
    }
    assert!(last <= 0.5 * first, "mel L1 {first} → {last}");
}

#[test]
fn checkpoint_bytes_are_stable_and_guarded() {
    let dir = tempfile::tempdir().unwrap();
    let (_, dialogues) = toy_corpus(&dir.path().join("c"));
    let cfg = run_config("M5");
    let bank = stub_bank(&cfg, &dialogues);
    let mut files = Vec::new();
    for name in ["a.m2ck", "b.m2ck"] {
        let mut t = Trainer::new(&cfg, &dialogues, &bank).unwrap();
        for _ in 0..3 {
            t.train_step().unwrap();
        }
        let path = dir.path().join(name);
        t.save_checkpoint(&path).unwrap();
        files.push(std::fs::read(&path).unwrap());
    }
    assert_eq!(files[0], files[1]);
    let bytes = &files[0];
    assert_eq!(&bytes[..4], CHECKPOINT_MAGIC);

    let ck = Checkpoint::decode(bytes).unwrap();
    assert_eq!(ck.step, 3);
    assert_eq!(ck.seed, 11);
    assert_eq!(ck.config, cfg.resolved());
    assert_eq!(ck.config_hash, cfg.model_hash());

    for cut in [3, 40, bytes.len() / 2, bytes.len() - 1] {
        assert!(Checkpoint::decode(&bytes[..cut]).is_err(), "truncated at {cut}");
    }
    let mut versioned = bytes.clone();
    versioned[4..8].copy_from_slice(&99u32.to_le_bytes());
    let err = Checkpoint::decode(&versioned).unwrap_err();
    assert!(err.to_string().contains("version"), "{err}");
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(Checkpoint::decode(&magic).is_err());

    let mut other = cfg.clone();
    other.model.d_model = 16;
    let err = Trainer::resume(&other, &dir.path().join("a.m2ck"), &dialogues, &bank).err().expect("mismatch");
    assert!(err.to_string().contains("config hash mismatch"), "{err}");

    // training-only knobs do not change the hash
    let mut relaxed = cfg.clone();
    relaxed.train.lr = 5e-4;
    relaxed.train.steps = 9;
    assert!(Trainer::resume(&relaxed, &dir.path().join("a.m2ck"), &dialogues, &bank).is_ok());
}

#[test]
fn ablation_table_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (_, dialogues) = toy_corpus(&dir.path().join("c"));
    let mut cfg = run_config("M1");
    cfg.train.steps = 2;
    let bank = stub_bank(&cfg, &dialogues);
    let (train, val) = dialogues.split_at(1);
    let names: Vec<String> = ["M1", "M7"].map(String::from).to_vec();
    let a = run_ablation(&names, &cfg, train, val, &bank, &dir.path().join("a.jsonl")).unwrap();
    let b = run_ablation(&names, &cfg, train, val, &bank, &dir.path().join("b.jsonl")).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        std::fs::read(dir.path().join("a.jsonl")).unwrap(),
        std::fs::read(dir.path().join("b.jsonl")).unwrap()
    );
    assert_eq!(a[0].final_loss.prosody_mse, 0.0);
    assert!(a[1].final_loss.prosody_mse > 0.0);
    assert!(a.iter().all(|r| r.val_mel_l1.is_some_and(f64::is_finite)));

    let single = run_ablation(&names[..1], &cfg, train, val, &bank, &dir.path().join("c.jsonl")).unwrap();
    assert_eq!(single.len(), 1);
    assert_eq!(std::fs::read_to_string(dir.path().join("c.jsonl")).unwrap().lines().count(), 1);

    let bad: Vec<String> = vec!["M1".into(), "M0".into()];
    assert!(matches!(
        run_ablation(&bad, &cfg, train, val, &bank, &dir.path().join("d.jsonl")),
        Err(Error::Config(_))
    ));
}
