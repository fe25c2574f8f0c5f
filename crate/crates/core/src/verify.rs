//! Property suites run by `m2ctts verify`: attention, saln, gradients,
//! masking, windowing, cache and ablation. Each property reports pass/fail
//! with a short detail string.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{masked_softmax_rows, Init, Mat, ParamId, ParamStore, Tape, Var};
use crate::config::{AblationConfig, ModelConfig, Reduction};
use crate::context::FineGrainedMemory;
use crate::corpus::{window, Dialogue, MelRef, Speaker, Turn, MEL_CHANNELS};
use crate::error::{Error, Result};
use crate::extractors::cache::CacheTensor;
use crate::extractors::{FeatureDims, Modality};
use crate::fusion::{AdditivePool, Gru, Linear, MultiHeadAttention, Saln};
use crate::model::{ItemInputs, Mode, Model};
use crate::training::{total_loss, ItemPrediction, LossWeights};

pub const SUITES: [&str; 7] = [
    "attention", "saln", "gradients", "masking", "windowing", "cache", "ablation",
];

#[derive(Clone, Debug)]
pub struct PropertyResult {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for PropertyResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[{}] {}/{}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite,
            self.name,
            self.detail
        )
    }
}

fn prop(suite: &'static str, name: &str, passed: bool, detail: impl Into<String>) -> PropertyResult {
    PropertyResult {
        suite,
        name: name.to_string(),
        passed,
        detail: detail.into(),
    }
}

pub fn run_suite(name: &str) -> Result<Vec<PropertyResult>> {
    match name {
        "attention" => attention_suite(),
        "saln" => saln_suite(),
        "gradients" => gradients_suite(),
        "masking" => masking_suite(),
        "windowing" => windowing_suite(),
        "cache" => cache_suite(),
        "ablation" => ablation_suite(),
        other => Err(Error::InvalidArgument(format!(
            "unknown suite {other:?}, expected one of {} or all",
            SUITES.join(", ")
        ))),
    }
}

pub fn run_all() -> Result<Vec<PropertyResult>> {
    let mut out = Vec::new();
    for s in SUITES {
        out.extend(run_suite(s)?);
    }
    Ok(out)
}

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    if a.dim() != b.dim() {
        return f64::INFINITY;
    }
    (a - b).mapv(f64::abs).fold(0.0f64, |m, &x| m.max(x))
}

/// Norm-wise relative error `‖a − n‖ / (‖a‖ + ‖n‖)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    if na + nn == 0.0 {
        0.0
    } else {
        diff / (na + nn)
    }
}

fn probe_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        (0..max).map(|i| i * len / max).collect()
    }
}

/// Compares the tape gradient of the scalar `f` with central differences,
/// over every input entry and up to `max_per_param` entries of each
/// parameter. Returns `(relative error, entries checked)`.
pub fn gradient_check<F>(
    store: &ParamStore,
    inputs: &[Mat],
    max_per_param: usize,
    h: f64,
    f: F,
) -> Result<(f64, usize)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore, inputs: &[Mat]| -> Result<f64> {
        let mut tape = Tape::new(store);
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };
    let mut tape = Tape::new(store);
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out);

    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    let mut scratch = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let g = grads.of(*v).cloned().unwrap_or_else(|| Mat::zeros(inputs[k].raw_dim()));
        for idx in 0..inputs[k].len() {
            let (r, c) = (idx / inputs[k].ncols(), idx % inputs[k].ncols());
            let x = inputs[k][[r, c]];
            scratch[k][[r, c]] = x + h;
            let plus = eval(store, &scratch)?;
            scratch[k][[r, c]] = x - h;
            let minus = eval(store, &scratch)?;
            scratch[k][[r, c]] = x;
            analytic.push(g[[r, c]]);
            numeric.push((plus - minus) / (2.0 * h));
        }
    }
    let mut probe = store.clone();
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).dim();
        let g = grads.param(id).cloned().unwrap_or_else(|| Mat::zeros(shape));
        for idx in probe_indices(shape.0 * shape.1, max_per_param) {
            let (r, c) = (idx / shape.1, idx % shape.1);
            let x = store.get(id)[[r, c]];
            probe.get_mut(id)[[r, c]] = x + h;
            let plus = eval(&probe, inputs)?;
            probe.get_mut(id)[[r, c]] = x - h;
            let minus = eval(&probe, inputs)?;
            probe.get_mut(id)[[r, c]] = x;
            analytic.push(g[[r, c]]);
            numeric.push((plus - minus) / (2.0 * h));
        }
    }
    Ok((relative_error(&analytic, &numeric), analytic.len()))
}

/// Weighted sum `Σ out ⊙ w` with fixed random weights, so that no
/// gradient vanishes by symmetry.
fn probe_sum(tape: &mut Tape, out: Var, weights: &Mat) -> Result<Var> {
    let p = tape.mul_const(out, weights.clone())?;
    Ok(tape.sum_all(p))
}

/// Small model widths for exhaustive checks.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        d_model: 8,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        ffn_filter: 12,
        ffn_kernels: [3, 1],
        variance_filter: 6,
        variance_kernel: 3,
        n_bins: 16,
        style_dim: 6,
        context_kernel: 3,
        features: FeatureDims {
            text_utterance: 5,
            acoustic_utterance: 7,
            text_sequence: 6,
            acoustic_sequence: 4,
        },
        ..ModelConfig::default()
    }
}

/// Shape of one history turn in a synthetic item.
#[derive(Clone, Copy, Debug)]
pub struct HistoryShape {
    pub text_rows: usize,
    pub acoustic_rows: usize,
    pub speaker: Speaker,
}

/// Random, unpadded inputs for one window. Pitch and energy stay inside the
/// configured bin ranges.
pub fn synthetic_item(
    rng: &mut ChaCha8Rng,
    cfg: &ModelConfig,
    durations: &[usize],
    history: &[HistoryShape],
    c: usize,
) -> ItemInputs {
    let n = durations.len();
    let t: usize = durations.iter().sum();
    let f = &cfg.features;
    let rows = c.max(history.len());
    let mut history_text = Mat::zeros((rows, f.text_utterance));
    let mut history_acoustic = Mat::zeros((rows, f.acoustic_utterance));
    for i in 0..history.len() {
        history_text.row_mut(i).assign(&randn(rng, 1, f.text_utterance).row(0));
        history_acoustic.row_mut(i).assign(&randn(rng, 1, f.acoustic_utterance).row(0));
    }
    let memory = |rng: &mut ChaCha8Rng, modality: Modality, width: usize| {
        let mut feats = Vec::new();
        let (mut speakers, mut positions) = (Vec::new(), Vec::new());
        for (offset, h) in history.iter().enumerate() {
            let r = match modality {
                Modality::Text => h.text_rows,
                Modality::Acoustic => h.acoustic_rows,
            };
            feats.push(randn(rng, r, width));
            speakers.extend(std::iter::repeat_n(h.speaker.index(), r));
            positions.extend(std::iter::repeat_n(offset, r));
        }
        let total = speakers.len();
        let mut features = Mat::zeros((total, width));
        let mut at = 0;
        for m in feats {
            features.slice_mut(ndarray::s![at..at + m.nrows(), ..]).assign(&m);
            at += m.nrows();
        }
        FineGrainedMemory {
            features,
            speakers,
            positions,
            mask: vec![true; total],
            modality,
        }
    };
    let text_memory = memory(rng, Modality::Text, f.text_sequence);
    let acoustic_memory = memory(rng, Modality::Acoustic, f.acoustic_sequence);
    let (plo, phi) = (cfg.pitch_range[0], cfg.pitch_range[1]);
    let (elo, ehi) = (cfg.energy_range[0], cfg.energy_range[1]);
    ItemInputs {
        dialogue_id: "synthetic".into(),
        turn_index: history.len(),
        phonemes: (0..n).map(|_| rng.random_range(1..cfg.vocab_size)).collect(),
        phoneme_mask: vec![true; n],
        durations: durations.to_vec(),
        pitch: (0..n).map(|_| rng.random_range(plo..phi)).collect(),
        energy: (0..n).map(|_| rng.random_range(elo..ehi)).collect(),
        mel: randn(rng, t, MEL_CHANNELS),
        frame_mask: vec![true; t],
        history_len: history.len(),
        history_text,
        history_acoustic,
        current_text: randn(rng, 1, f.text_utterance).row(0).to_vec(),
        current_acoustic: randn(rng, 1, f.acoustic_utterance).row(0).to_vec(),
        text_memory,
        acoustic_memory,
    }
}

/// Right-pads every slot of `item` and fills the padding with random junk:
/// phoneme ids, variance targets, mel rows, history embeddings and memory
/// rows, speakers and positions.
pub fn pad_with_junk(
    item: &ItemInputs,
    rng: &mut ChaCha8Rng,
    vocab: usize,
    extra_phonemes: usize,
    extra_frames: usize,
    extra_memory: usize,
) -> ItemInputs {
    let mut p = item.clone();
    for _ in 0..extra_phonemes {
        p.phonemes.push(rng.random_range(0..vocab));
        p.phoneme_mask.push(false);
        p.durations.push(rng.random_range(1..5));
        p.pitch.push(rng.random_range(-3.0..3.0));
        p.energy.push(rng.random_range(-3.0..3.0));
    }
    let junk = randn(rng, extra_frames, MEL_CHANNELS);
    p.mel = ndarray::concatenate![ndarray::Axis(0), item.mel, junk];
    p.frame_mask.extend(std::iter::repeat_n(false, extra_frames));
    let (wt, wa) = (p.history_text.ncols(), p.history_acoustic.ncols());
    for r in item.history_len..p.history_text.nrows() {
        p.history_text.row_mut(r).assign(&randn(rng, 1, wt).row(0));
        p.history_acoustic.row_mut(r).assign(&randn(rng, 1, wa).row(0));
    }
    for mem in [&mut p.text_memory, &mut p.acoustic_memory] {
        let junk = randn(rng, extra_memory, mem.features.ncols());
        mem.features = ndarray::concatenate![ndarray::Axis(0), mem.features, junk];
        for _ in 0..extra_memory {
            mem.speakers.push(rng.random_range(0..2));
            mem.positions.push(rng.random_range(0..8));
            mem.mask.push(false);
        }
    }
    p
}

/// Right-pads `item` with zeros, the same layout a batch uses.
pub fn pad_with_zeros(item: &ItemInputs, pad_id: usize, phonemes: usize, frames: usize, memory: usize) -> ItemInputs {
    let mut p = item.clone();
    let n = item.phonemes.len();
    for _ in n..phonemes.max(n) {
        p.phonemes.push(pad_id);
        p.phoneme_mask.push(false);
        p.durations.push(0);
        p.pitch.push(0.0);
        p.energy.push(0.0);
    }
    let t = item.mel.nrows();
    if frames > t {
        p.mel = ndarray::concatenate![ndarray::Axis(0), item.mel, Mat::zeros((frames - t, MEL_CHANNELS))];
        p.frame_mask.extend(std::iter::repeat_n(false, frames - t));
    }
    for mem in [&mut p.text_memory, &mut p.acoustic_memory] {
        let r = mem.features.nrows();
        if memory > r {
            mem.features = ndarray::concatenate![
                ndarray::Axis(0),
                mem.features,
                Mat::zeros((memory - r, mem.features.ncols()))
            ];
            mem.speakers.resize(memory, 0);
            mem.positions.resize(memory, 0);
            mem.mask.resize(memory, false);
        }
    }
    p
}

/// Mel, loss and style for one item under `ablation` in train mode.
pub fn item_outputs(model: &Model, item: &ItemInputs, ablation: &AblationConfig) -> Result<(Mat, f64)> {
    let mut tape = Tape::new(&model.store);
    let out = model.forward_item(&mut tape, item, ablation, Mode::Train)?;
    let pred = ItemPrediction {
        mel: out.mel,
        log_duration: out.predictions.log_duration,
        pitch: out.predictions.pitch,
        energy: out.predictions.energy,
        prosody: out.prosody,
    };
    let weights = LossWeights {
        lambda_prosody: 1.0,
        reduction: Reduction::Mean,
        prosody_active: ablation.any_coarse(),
    };
    let (loss, _) = total_loss(&mut tape, &[pred], std::slice::from_ref(item), weights)?;
    let real = item.num_frames();
    let mel = tape.value(out.mel).slice(ndarray::s![..real, ..]).to_owned();
    Ok((mel, tape.scalar(loss)))
}

fn attention_suite() -> Result<Vec<PropertyResult>> {
    const S: &str = "attention";
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut out = Vec::new();
    let mut worst_sum = 0.0f64;
    let mut masked_ok = true;
    for _ in 0..200 {
        let q = rng.random_range(1..6);
        let k = rng.random_range(1..10);
        let scores = randn(&mut rng, q, k).mapv(|x| 5.0 * x);
        let mut mask: Vec<bool> = (0..k).map(|_| rng.random_bool(0.6)).collect();
        let keep = rng.random_range(0..k);
        mask[keep] = true;
        let w = masked_softmax_rows(&scores, &mask)?;
        for row in w.rows() {
            worst_sum = worst_sum.max((row.sum() - 1.0).abs());
            masked_ok &= row.iter().zip(&mask).all(|(&x, &m)| m || x == 0.0);
        }
    }
    out.push(prop(S, "rows_sum_to_one", worst_sum < 1e-5, format!("max |Σw − 1| = {worst_sum:.2e} over 200 shapes")));
    out.push(prop(S, "masked_keys_exactly_zero", masked_ok, "200 random shapes"));
    let all_masked = masked_softmax_rows(&Mat::zeros((2, 3)), &[false; 3]);
    out.push(prop(
        S,
        "all_masked_is_error",
        matches!(all_masked, Err(Error::AllKeysMasked)),
        format!("{:?}", all_masked.err().map(|e| e.to_string())),
    ));

    // permuting (K, V) rows together with the mask leaves the output fixed
    let mut store = ParamStore::new();
    let mut init = Init::new(3);
    let mha = MultiHeadAttention::new(&mut store, &mut init, "mha", 8, 2)?;
    let q = randn(&mut rng, 3, 8);
    let kv = randn(&mut rng, 5, 8);
    let mask = [true, false, true, true, false];
    let perm = [3usize, 0, 4, 2, 1];
    let kv_p = Mat::from_shape_fn((5, 8), |(i, j)| kv[[perm[i], j]]);
    let mask_p: Vec<bool> = perm.iter().map(|&i| mask[i]).collect();
    let mut tape = Tape::new(&store);
    let (qv, kvv, kvp) = (tape.leaf(q), tape.leaf(kv), tape.leaf(kv_p));
    let (a, wa) = mha.forward(&mut tape, qv, kvv, kvv, &mask)?;
    let (b, _) = mha.forward(&mut tape, qv, kvp, kvp, &mask_p)?;
    let d = max_abs_diff(tape.value(a), tape.value(b));
    out.push(prop(S, "kv_permutation_invariance", d < 1e-12, format!("max diff {d:.2e}")));
    let e = wa.max_row_sum_error();
    out.push(prop(S, "mha_weights_normalized", e < 1e-5, format!("max row error {e:.2e}")));
    Ok(out)
}

fn saln_suite() -> Result<Vec<PropertyResult>> {
    const S: &str = "saln";
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut out = Vec::new();
    let mut store = ParamStore::new();
    let mut init = Init::new(4);
    let saln = Saln::new(&mut store, &mut init, "saln", 5, 6);
    saln.set_identity(&mut store);
    let h = randn(&mut rng, 7, 6).mapv(|x| 3.0 * x + 1.0);
    let w = randn(&mut rng, 1, 5);
    let mut tape = Tape::new(&store);
    let (hv, wv) = (tape.leaf(h.clone()), tape.leaf(w));
    let y = saln.forward(&mut tape, hv, wv)?;
    let y = tape.value(y).clone();
    let mut worst = 0.0f64;
    let mut stats = 0.0f64;
    for (row_h, row_y) in h.rows().into_iter().zip(y.rows()) {
        let mu = row_h.mean().unwrap_or(0.0);
        let var = row_h.mapv(|x| (x - mu) * (x - mu)).mean().unwrap_or(0.0);
        for (x, o) in row_h.iter().zip(row_y) {
            worst = worst.max(((x - mu) / (var + 1e-5).sqrt() - o).abs());
        }
        let m = row_y.mean().unwrap_or(0.0);
        let v = row_y.mapv(|x| (x - m) * (x - m)).mean().unwrap_or(0.0);
        stats = stats.max(m.abs()).max((v - 1.0).abs());
    }
    out.push(prop(S, "identity_is_layer_norm", worst < 1e-4, format!("max diff {worst:.2e}")));
    out.push(prop(S, "identity_zero_mean_unit_var", stats < 1e-4, format!("max deviation {stats:.2e}")));

    // g ≡ 2, b ≡ 0.5 through the bias terms
    let mut store = ParamStore::new();
    let hand = Saln::new(&mut store, &mut init, "hand", 1, 2);
    hand.set_identity(&mut store);
    store.get_mut(hand.gain.bias.expect("bias")).fill(2.0);
    store.get_mut(hand.shift.bias.expect("bias")).fill(0.5);
    let mut tape = Tape::new(&store);
    let hv = tape.row_leaf(&[1.0, 3.0]);
    let wv = tape.row_leaf(&[0.0]);
    let y = hand.forward(&mut tape, hv, wv)?;
    let y = tape.value(y);
    let err = (y[[0, 0]] + 1.5).abs().max((y[[0, 1]] - 2.5).abs());
    out.push(prop(S, "hand_case", err < 1e-3, format!("[1,3] → [{:.5}, {:.5}]", y[[0, 0]], y[[0, 1]])));

    let mut tape = Tape::new(&store);
    let hv = tape.row_leaf(&[4.0, 4.0]);
    let wv = tape.row_leaf(&[0.0]);
    let y = hand.forward(&mut tape, hv, wv)?;
    let y = tape.value(y);
    let ok = y.iter().all(|&v| (v - 0.5).abs() < 1e-9);
    out.push(prop(S, "constant_row_gives_shift", ok, format!("{:?}", y.row(0).to_vec())));
    Ok(out)
}

fn gradients_suite() -> Result<Vec<PropertyResult>> {
    const S: &str = "gradients";
    const TOL: f64 = 1e-4;
    const H: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut out = Vec::new();
    let mut report = |name: &str, r: Result<(f64, usize)>| match r {
        Ok((e, n)) => out.push(prop(S, name, e < TOL, format!("rel err {e:.2e} over {n} entries"))),
        Err(e) => out.push(prop(S, name, false, e.to_string())),
    };

    let mut store = ParamStore::new();
    let mut init = Init::new(21);
    let saln = Saln::new(&mut store, &mut init, "saln", 3, 5);
    let w = randn(&mut rng, 4, 5);
    report(
        "saln",
        gradient_check(&store, &[randn(&mut rng, 4, 5), randn(&mut rng, 1, 3)], 64, H, |t, v| {
            let y = saln.forward(t, v[0], v[1])?;
            probe_sum(t, y, &w)
        }),
    );

    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, &mut init, "mha", 6, 2)?;
    let w = randn(&mut rng, 3, 6);
    report(
        "multi_head_attention",
        gradient_check(
            &store,
            &[randn(&mut rng, 3, 6), randn(&mut rng, 4, 6), randn(&mut rng, 4, 6)],
            64,
            H,
            |t, v| {
                let (y, _) = mha.forward(t, v[0], v[1], v[2], &[true, true, false, true])?;
                probe_sum(t, y, &w)
            },
        ),
    );

    let mut store = ParamStore::new();
    let pool = AdditivePool::new(&mut store, &mut init, "pool", 4, 5, 3);
    let w = randn(&mut rng, 1, 5);
    report(
        "additive_attention_pool",
        gradient_check(&store, &[randn(&mut rng, 1, 4), randn(&mut rng, 6, 5)], 64, H, |t, v| {
            let (y, _) = pool.forward(t, v[0], v[1], &[true, true, true, false, true, true])?;
            probe_sum(t, y, &w)
        }),
    );

    let mut store = ParamStore::new();
    let gru = Gru::new(&mut store, &mut init, "gru", 3, 4);
    let w = randn(&mut rng, 5, 4);
    report(
        "gru_summarize",
        gradient_check(&store, &[randn(&mut rng, 5, 3), randn(&mut rng, 1, 4)], 64, H, |t, v| {
            let (_, states) = gru.forward(t, v[0], v[1])?;
            let all = t.concat_rows(&states)?;
            probe_sum(t, all, &w)
        }),
    );

    report("full_model", full_model_gradient_check(&mut rng));
    drop(report);

    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, &mut init, "lin", 3, 2, true);
    let (e, _) = gradient_check(&store, &[randn(&mut rng, 2, 3)], 64, H, |t, v| {
        let y = lin.forward(t, v[0])?;
        let y = t.tanh(y);
        Ok(t.sum_all(y))
    })?;
    out.push(prop(S, "linear_sanity", e < TOL, format!("rel err {e:.2e}")));
    Ok(out)
}

/// Total loss of the full model under M7 on a 2-phoneme, 4-frame item
/// with two history turns.
pub fn full_model_gradient_check(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let cfg = tiny_config();
    let model = Model::new(&cfg, 5)?;
    let history = [
        HistoryShape { text_rows: 3, acoustic_rows: 2, speaker: Speaker::A },
        HistoryShape { text_rows: 2, acoustic_rows: 3, speaker: Speaker::B },
    ];
    let item = synthetic_item(rng, &cfg, &[1, 3], &history, 2);
    let ablation = AblationConfig::named("M7")?;
    let weights = LossWeights {
        lambda_prosody: 1.0,
        reduction: Reduction::Mean,
        prosody_active: true,
    };
    gradient_check(&model.store, &[], 6, 1e-6, |t, _| {
        let out = model.forward_item(t, &item, &ablation, Mode::Train)?;
        let pred = ItemPrediction {
            mel: out.mel,
            log_duration: out.predictions.log_duration,
            pitch: out.predictions.pitch,
            energy: out.predictions.energy,
            prosody: out.prosody,
        };
        let (loss, _) = total_loss(t, &[pred], std::slice::from_ref(&item), weights)?;
        Ok(loss)
    })
}

fn masking_suite() -> Result<Vec<PropertyResult>> {
    const S: &str = "masking";
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let cfg = tiny_config();
    let model = Model::new(&cfg, 8)?;
    let ablation = AblationConfig::named("M7")?;
    let history = [
        HistoryShape { text_rows: 2, acoustic_rows: 3, speaker: Speaker::B },
        HistoryShape { text_rows: 4, acoustic_rows: 2, speaker: Speaker::A },
    ];
    let item = synthetic_item(&mut rng, &cfg, &[2, 1, 3], &history, 4);
    let (mel, loss) = item_outputs(&model, &item, &ablation)?;
    let mut worst_mel = 0.0f64;
    let mut worst_loss = 0.0f64;
    for _ in 0..5 {
        let padded = pad_with_junk(&item, &mut rng, cfg.vocab_size, 3, 4, 5);
        let (m, l) = item_outputs(&model, &padded, &ablation)?;
        worst_mel = worst_mel.max(max_abs_diff(&mel, &m));
        worst_loss = worst_loss.max((loss - l).abs());
    }
    let mut out = vec![
        prop(S, "padded_slots_do_not_change_mel", worst_mel <= 1e-6, format!("max diff {worst_mel:.2e}")),
        prop(S, "padded_slots_do_not_change_loss", worst_loss <= 1e-6, format!("max diff {worst_loss:.2e}")),
    ];

    // truncated history equals an oracle that physically drops absent turns
    let short = synthetic_item(&mut rng, &cfg, &[1, 2], &history[..1], 4);
    let mut dropped = short.clone();
    dropped.history_text = short.history_text.slice(ndarray::s![..1, ..]).to_owned();
    dropped.history_acoustic = short.history_acoustic.slice(ndarray::s![..1, ..]).to_owned();
    let (a, la) = item_outputs(&model, &short, &ablation)?;
    let (b, lb) = item_outputs(&model, &dropped, &ablation)?;
    let d = max_abs_diff(&a, &b).max((la - lb).abs());
    out.push(prop(S, "truncated_history_matches_dropped", d <= 1e-6, format!("max diff {d:.2e}")));
    Ok(out)
}

/// Turn indices of the window by direct filtering of `0..len`.
pub fn window_oracle(len: usize, t: usize, c: usize) -> Vec<usize> {
    (0..len).filter(|&i| i < t && i + c >= t).collect()
}

/// A dialogue of `len` alternating turns with no mel files behind them.
pub fn bare_dialogue(len: usize) -> Dialogue {
    let mut speaker = Speaker::A;
    let turns = (0..len)
        .map(|i| {
            let t = Turn {
                dialogue_id: "bare".into(),
                turn_index: i,
                speaker,
                text: format!("turn {i}"),
                phoneme_ids: vec![1],
                durations: vec![1],
                pitch: vec![0.0],
                energy: vec![0.0],
                mel: MelRef {
                    path: std::path::PathBuf::new(),
                    frames: 1,
                },
            };
            speaker = speaker.other();
            t
        })
        .collect();
    Dialogue {
        dialogue_id: "bare".into(),
        turns,
    }
}

fn windowing_suite() -> Result<Vec<PropertyResult>> {
    const S: &str = "windowing";
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut mismatches = 0;
    let mut length_ok = true;
    for _ in 0..1000 {
        let len = rng.random_range(1..30);
        let t = rng.random_range(0..len);
        let c = rng.random_range(0..12);
        let d = bare_dialogue(len);
        let w = window(&d, t, c)?;
        if w.history_indices() != window_oracle(len, t, c) || w.current.turn_index != t {
            mismatches += 1;
        }
        length_ok &= w.history.len() == t.min(c);
    }
    let d = bare_dialogue(5);
    let out_of_range = window(&d, 5, 2).is_err();
    Ok(vec![
        prop(S, "matches_index_filter_oracle", mismatches == 0, format!("{mismatches} mismatches in 1000 triples")),
        prop(S, "history_length_is_min_t_c", length_ok, "1000 triples"),
        prop(S, "t_out_of_range_is_error", out_of_range, "t = len"),
    ])
}

fn cache_suite() -> Result<Vec<PropertyResult>> {
    const S: &str = "cache";
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut out = Vec::new();
    for dims in [vec![1usize], vec![25, 768], vec![2, 3, 4]] {
        let n: usize = dims.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.random_range(-10.0f32..10.0)).collect();
        let t = CacheTensor::new(dims.clone(), data)?;
        let back = CacheTensor::from_bytes(&t.to_bytes())?;
        let exact = back.dims == t.dims
            && back.data.iter().zip(&t.data).all(|(a, b)| a.to_bits() == b.to_bits());
        out.push(prop(S, &format!("round_trip_rank{}", dims.len()), exact, format!("dims {dims:?}")));
    }
    let mut bytes = CacheTensor::new(vec![1], vec![0.5])?.to_bytes();
    bytes[0] = b'X';
    let bad = CacheTensor::from_bytes(&bytes);
    out.push(prop(S, "wrong_magic_rejected", bad.is_err(), format!("{:?}", bad.err().map(|e| e.to_string()))));
    let bytes = CacheTensor::new(vec![2, 2], vec![1.0; 4])?.to_bytes();
    out.push(prop(
        S,
        "truncation_rejected",
        CacheTensor::from_bytes(&bytes[..bytes.len() - 2]).is_err(),
        "two bytes short",
    ));
    Ok(out)
}

fn ablation_suite() -> Result<Vec<PropertyResult>> {
    const S: &str = "ablation";
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let cfg = tiny_config();
    let full = Model::new(&cfg, 9)?;
    let bare = Model::context_free(&cfg, 9)?;
    let history = [
        HistoryShape { text_rows: 3, acoustic_rows: 2, speaker: Speaker::A },
        HistoryShape { text_rows: 2, acoustic_rows: 4, speaker: Speaker::B },
    ];
    let item = synthetic_item(&mut rng, &cfg, &[2, 2, 1], &history, 4);
    let m1 = AblationConfig::named("M1")?;
    let (a, la) = item_outputs(&full, &item, &m1)?;
    let (b, lb) = item_outputs(&bare, &item, &m1)?;
    let identical = a == b && la.to_bits() == lb.to_bits();
    let mut out = vec![prop(S, "m1_bit_identical_to_context_free", identical, format!("loss {la} vs {lb}"))];

    let ctx = full.context.as_ref().expect("full model has context modules");
    let ppm = full.ppm.as_ref().expect("full model has a predictor");
    let module_range = |first: ParamId, next: ParamId| first.0..next.0;
    let ranges = [
        ("tum", module_range(ctx.tum.history_proj.weight, ctx.wum.history_proj.weight)),
        ("wum", module_range(ctx.wum.history_proj.weight, ctx.tpm.speaker_table)),
        ("tpm", module_range(ctx.tpm.speaker_table, ctx.wpm.speaker_table)),
        ("wpm", module_range(ctx.wpm.speaker_table, ppm.hidden.weight)),
        ("ppm", ppm.hidden.weight.0..full.store.len()),
    ];
    for name in ["M1", "M2", "M3", "M4", "M5", "M6"] {
        let ab = AblationConfig::named(name)?;
        let on = [ab.tum, ab.wum, ab.tpm, ab.wpm, ab.any_coarse()];
        let mut tape = Tape::new(&full.store);
        let o = full.forward_item(&mut tape, &item, &ab, Mode::Train)?;
        let pred = ItemPrediction {
            mel: o.mel,
            log_duration: o.predictions.log_duration,
            pitch: o.predictions.pitch,
            energy: o.predictions.energy,
            prosody: o.prosody,
        };
        let weights = LossWeights {
            lambda_prosody: 1.0,
            reduction: Reduction::Mean,
            prosody_active: ab.any_coarse(),
        };
        let (loss, _) = total_loss(&mut tape, &[pred], std::slice::from_ref(&item), weights)?;
        let grads = tape.backward(loss);
        let mut leaks = Vec::new();
        for ((module, range), enabled) in ranges.iter().zip(on) {
            if enabled {
                continue;
            }
            let nonzero = range.clone().any(|i| {
                grads
                    .param(ParamId(i))
                    .is_some_and(|g| g.iter().any(|&x| x != 0.0))
            });
            if nonzero {
                leaks.push(*module);
            }
        }
        out.push(prop(
            S,
            &format!("{name}_disabled_modules_zero_gradient"),
            leaks.is_empty(),
            if leaks.is_empty() { "no leaks".to_string() } else { format!("leaks in {leaks:?}") },
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_passes() {
        for r in run_all().unwrap() {
            eprintln!("{r}");
            assert!(r.passed, "{r}");
        }
    }

    #[test]
    fn relative_error_edge_cases() {
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert_eq!(relative_error(&[1.0], &[1.0]), 0.0);
        assert_eq!(relative_error(&[1.0], &[-1.0]), 1.0);
    }
}
