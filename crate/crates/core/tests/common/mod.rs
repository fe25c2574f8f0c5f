//! Shared fixtures and brute-force oracles for the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use m2ctts_core::autodiff::{Mat, ParamId, ParamStore, Tape, Var};
use m2ctts_core::config::RunConfig;
use m2ctts_core::corpus::{gen_toy_corpus, load_manifest, Dialogue, MelRef, Speaker, Turn};
use m2ctts_core::extractors::{FeatureBank, StubExtractor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const TOY_SEED: u64 = 7;

/// The 2 × 4 toy corpus written under `dir`.
pub fn toy_corpus(dir: &Path) -> (PathBuf, Vec<Dialogue>) {
    let manifest = gen_toy_corpus(TOY_SEED, 2, 4, dir).expect("toy corpus");
    let dialogues = load_manifest(&manifest).expect("manifest loads");
    (manifest, dialogues)
}

pub fn stub_bank(cfg: &RunConfig, dialogues: &[Dialogue]) -> FeatureBank {
    let stub = StubExtractor {
        dims: cfg.model.features,
        seed: cfg.data.extractor_seed,
    };
    FeatureBank::load(dialogues, &stub).expect("stub features")
}

pub fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.dim(), b.dim(), "shape mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Indices `i` of a dialogue of length `len` with `t − c ≤ i < t`.
pub fn window_oracle(len: usize, t: usize, c: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for i in 0..len {
        if i < t && i as i64 >= t as i64 - c as i64 {
            out.push(i);
        }
    }
    out
}

/// A dialogue of alternating speakers with no mel files behind it.
pub fn plain_dialogue(len: usize) -> Dialogue {
    let turns = (0..len)
        .map(|i| Turn {
            dialogue_id: "plain".into(),
            turn_index: i,
            speaker: if i % 2 == 0 { Speaker::A } else { Speaker::B },
            text: format!("t{i}"),
            phoneme_ids: vec![1],
            durations: vec![1],
            pitch: vec![0.0],
            energy: vec![0.0],
            mel: MelRef { path: PathBuf::new(), frames: 1 },
        })
        .collect();
    Dialogue { dialogue_id: "plain".into(), turns }
}

/// Row softmax over unmasked keys computed with plain loops.
pub fn softmax_oracle(scores: &Mat, mask: &[bool]) -> Mat {
    let mut out = Mat::zeros(scores.raw_dim());
    for r in 0..scores.nrows() {
        let max = (0..scores.ncols())
            .filter(|&k| mask[k])
            .map(|k| scores[[r, k]])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for k in 0..scores.ncols() {
            if mask[k] {
                z += (scores[[r, k]] - max).exp();
            }
        }
        for k in 0..scores.ncols() {
            if mask[k] {
                out[[r, k]] = (scores[[r, k]] - max).exp() / z;
            }
        }
    }
    out
}

/// Per-row `(x − μ) / √(σ² + eps)` with population variance.
pub fn layer_norm_oracle(x: &Mat, eps: f64) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let n = row.len() as f64;
        let mu = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
        row.mapv_inplace(|v| (v - mu) / (var + eps).sqrt());
    }
    out
}

/// Analytic vs central-difference gradient of scalar `f`, over every input
/// entry and up to `per_param` evenly spaced entries of every parameter.
/// Returns `‖a − n‖ / (‖a‖ + ‖n‖)` over all compared entries, and their
/// count.
pub fn finite_difference_check<F>(store: &ParamStore, inputs: &[Mat], per_param: usize, f: F) -> (f64, usize)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    const H: f64 = 1e-6;
    let value = |store: &ParamStore, inputs: &[Mat]| {
        let mut tape = Tape::new(store);
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.scalar(out)
    };
    let mut tape = Tape::new(store);
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out);

    let mut pairs: Vec<(f64, f64)> = Vec::new();
    let mut moved = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let g = grads.of(*var).cloned().unwrap_or_else(|| Mat::zeros(inputs[k].raw_dim()));
        for r in 0..inputs[k].nrows() {
            for c in 0..inputs[k].ncols() {
                let x = inputs[k][[r, c]];
                moved[k][[r, c]] = x + H;
                let up = value(store, &moved);
                moved[k][[r, c]] = x - H;
                let down = value(store, &moved);
                moved[k][[r, c]] = x;
                pairs.push((g[[r, c]], (up - down) / (2.0 * H)));
            }
        }
    }
    let mut probe = store.clone();
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let (rows, cols) = store.get(id).dim();
        let total = rows * cols;
        let g = grads.param(id).cloned().unwrap_or_else(|| Mat::zeros((rows, cols)));
        let step = total.div_ceil(per_param.max(1)).max(1);
        for idx in (0..total).step_by(step) {
            let (r, c) = (idx / cols, idx % cols);
            let x = store.get(id)[[r, c]];
            probe.get_mut(id)[[r, c]] = x + H;
            let up = value(&probe, inputs);
            probe.get_mut(id)[[r, c]] = x - H;
            let down = value(&probe, inputs);
            probe.get_mut(id)[[r, c]] = x;
            pairs.push((g[[r, c]], (up - down) / (2.0 * H)));
        }
    }
    let diff = pairs.iter().map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = pairs.iter().map(|(a, _)| a * a).sum::<f64>().sqrt();
    let nn = pairs.iter().map(|(_, n)| n * n).sum::<f64>().sqrt();
    let err = if na + nn == 0.0 { 0.0 } else { diff / (na + nn) };
    (err, pairs.len())
}

/// `Σ out ⊙ w` for fixed random `w`.
pub fn weighted_sum(tape: &mut Tape, out: Var, w: &Mat) -> Var {
    let p = tape.mul_const(out, w.clone()).expect("probe shape");
    tape.sum_all(p)
}

pub fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    let mut m: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
    let keep = rng.random_range(0..n);
    m[keep] = true;
    m
}
