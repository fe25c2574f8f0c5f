//! Loss aggregation, the Adam optimizer, the deterministic training loop,
//! checkpoints and the ablation runner.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Grads, Mat, ParamStore, Tape, Var};
use crate::config::{AblationConfig, Reduction, RunConfig, TrainConfig};
use crate::corpus::{make_batch, Batch, ConversationWindow, Dialogue, MEL_CHANNELS};
use crate::error::{Error, Result};
use crate::extractors::FeatureBank;
use crate::model::{batch_inputs, ItemInputs, Mode, Model};
use crate::prosody::prosody_loss_var;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mel_l1: f64,
    pub pitch_mse: f64,
    pub energy_mse: f64,
    pub logdur_mse: f64,
    pub prosody_mse: f64,
    pub total: f64,
}

/// Model predictions for one item, as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct ItemPrediction {
    /// `T_pad × 80`.
    pub mel: Var,
    /// Each `N_pad × 1`.
    pub log_duration: Var,
    pub pitch: Var,
    pub energy: Var,
    /// `1 × D_ac`, present when the prosody predictor ran.
    pub prosody: Option<Var>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_prosody: f64,
    pub reduction: Reduction,
    /// The prosody term counts only with a coarse module enabled.
    pub prosody_active: bool,
}

fn column_target(values: impl Iterator<Item = f64>, mask: &[bool]) -> Mat {
    let v: Vec<f64> = values
        .zip(mask)
        .map(|(x, &m)| if m { x } else { 0.0 })
        .collect();
    Mat::from_shape_vec((v.len(), 1), v).expect("column shape")
}

fn masked_rows(m: &Mat, mask: &[bool]) -> Mat {
    let mut out = m.clone();
    for (mut row, &keep) in out.rows_mut().into_iter().zip(mask) {
        if !keep {
            row.fill(0.0);
        }
    }
    out
}

fn add_opt(tape: &mut Tape, acc: Option<Var>, x: Var) -> Result<Option<Var>> {
    Ok(Some(match acc {
        Some(a) => tape.add(a, x)?,
        None => x,
    }))
}

fn masked_square_sum(tape: &mut Tape, pred: Var, target: Mat, mask: &[bool]) -> Result<Var> {
    let pred = tape.mask_rows(pred, mask)?;
    let t = tape.leaf(target);
    let d = tape.sub(pred, t)?;
    let sq = tape.square(d);
    Ok(tape.sum_all(sq))
}

/// Masked means over real frames and phonemes across the whole batch, plus
/// the prosody term averaged over items. Fails on any non-finite term.
pub fn total_loss(
    tape: &mut Tape,
    preds: &[ItemPrediction],
    items: &[ItemInputs],
    weights: LossWeights,
) -> Result<(Var, LossBreakdown)> {
    if preds.is_empty() || preds.len() != items.len() {
        return Err(Error::EmptyBatch);
    }
    let (mut mel, mut pitch, mut energy, mut dur, mut pros) = (None, None, None, None, None);
    let (mut frames, mut phonemes, mut pros_items) = (0usize, 0usize, 0usize);
    for (p, it) in preds.iter().zip(items) {
        let pm = &it.phoneme_mask;
        let fm = &it.frame_mask;
        if tape.shape(p.mel) != it.mel.dim() {
            return Err(Error::Shape(format!(
                "predicted mel {:?} vs target {:?}",
                tape.shape(p.mel),
                it.mel.dim()
            )));
        }
        let out = tape.mask_rows(p.mel, fm)?;
        let target = tape.leaf(masked_rows(&it.mel, fm));
        let diff = tape.sub(out, target)?;
        let a = tape.abs(diff);
        let s = tape.sum_all(a);
        mel = add_opt(tape, mel, s)?;
        frames += it.num_frames();

        let s = masked_square_sum(tape, p.pitch, column_target(it.pitch.iter().copied(), pm), pm)?;
        pitch = add_opt(tape, pitch, s)?;
        let s = masked_square_sum(tape, p.energy, column_target(it.energy.iter().copied(), pm), pm)?;
        energy = add_opt(tape, energy, s)?;
        let logd = it.durations.iter().map(|&d| (d.max(1) as f64).ln());
        let s = masked_square_sum(tape, p.log_duration, column_target(logd, pm), pm)?;
        dur = add_opt(tape, dur, s)?;
        phonemes += it.num_phonemes();

        if let (true, Some(v)) = (weights.prosody_active, p.prosody) {
            let l = prosody_loss_var(tape, v, &it.current_acoustic, weights.reduction)?;
            pros = add_opt(tape, pros, l)?;
            pros_items += 1;
        }
    }
    if frames == 0 || phonemes == 0 {
        return Err(Error::InvalidArgument("batch has no real frames or phonemes".into()));
    }
    let mel = tape.scale(mel.expect("nonempty"), 1.0 / (frames * MEL_CHANNELS) as f64);
    let pitch = tape.scale(pitch.expect("nonempty"), 1.0 / phonemes as f64);
    let energy = tape.scale(energy.expect("nonempty"), 1.0 / phonemes as f64);
    let dur = tape.scale(dur.expect("nonempty"), 1.0 / phonemes as f64);
    let mut total = tape.add(mel, pitch)?;
    total = tape.add(total, energy)?;
    total = tape.add(total, dur)?;
    let mut prosody_mse = 0.0;
    if let Some(p) = pros {
        let p = tape.scale(p, 1.0 / pros_items as f64);
        prosody_mse = tape.scalar(p);
        let w = tape.scale(p, weights.lambda_prosody);
        total = tape.add(total, w)?;
    }
    let b = LossBreakdown {
        mel_l1: tape.scalar(mel),
        pitch_mse: tape.scalar(pitch),
        energy_mse: tape.scalar(energy),
        logdur_mse: tape.scalar(dur),
        prosody_mse,
        total: tape.scalar(total),
    };
    for (name, v) in [
        ("mel_l1", b.mel_l1),
        ("pitch_mse", b.pitch_mse),
        ("energy_mse", b.energy_mse),
        ("logdur_mse", b.logdur_mse),
        ("prosody_mse", b.prosody_mse),
        ("total", b.total),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss term {name}")));
        }
    }
    Ok((total, b))
}

/// Forward every item in train mode and aggregate the loss.
pub fn batch_loss(
    tape: &mut Tape,
    model: &Model,
    items: &[ItemInputs],
    ablation: &AblationConfig,
    train: &TrainConfig,
) -> Result<(Var, LossBreakdown)> {
    let mut preds = Vec::with_capacity(items.len());
    for it in items {
        let out = model.forward_item(tape, it, ablation, Mode::Train)?;
        preds.push(ItemPrediction {
            mel: out.mel,
            log_duration: out.predictions.log_duration,
            pitch: out.predictions.pitch,
            energy: out.predictions.energy,
            prosody: out.prosody,
        });
    }
    let weights = LossWeights {
        lambda_prosody: train.lambda_prosody,
        reduction: train.prosody_reduction,
        prosody_active: ablation.any_coarse(),
    };
    total_loss(tape, &preds, items, weights)
}

/// Adam with linear warmup and optional global-norm clipping. Parameters
/// without a gradient are treated as having a zero gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Mat> = store.iter().map(|(_, p)| Mat::zeros(p.value.raw_dim())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn learning_rate(cfg: &TrainConfig, step: u64) -> f64 {
        if cfg.warmup_steps == 0 {
            cfg.lr
        } else {
            cfg.lr * ((step + 1) as f64 / cfg.warmup_steps as f64).min(1.0)
        }
    }

    /// Applies update number `step + 1`.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Grads, cfg: &TrainConfig, step: u64) {
        let norm = grads
            .touched_params()
            .filter_map(|id| grads.param(id))
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let clip = match cfg.grad_clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let lr = Self::learning_rate(cfg, step);
        let t = (step + 1) as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            match grads.param(id) {
                Some(g) => {
                    ndarray::Zip::from(&mut *m).and(&mut *v).and(g).for_each(|m, v, &g| {
                        let g = g * clip;
                        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    });
                }
                None => {
                    m.mapv_inplace(|x| cfg.beta1 * x);
                    v.mapv_inplace(|x| cfg.beta2 * x);
                }
            }
            let p = store.get_mut(id);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + cfg.adam_eps);
            });
        }
    }
}

/// Step counter, seed and optimizer moments; the batch order is a pure
/// function of `(seed, step)`, so no generator state is stored.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub seed: u64,
    pub adam: Adam,
}

/// Window indices for `step`: each epoch visits every window once in an
/// order shuffled by `(seed, epoch)`.
pub fn schedule(n_windows: usize, batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    let bs = batch_size.max(1).min(n_windows.max(1));
    let per_epoch = n_windows.div_ceil(bs) as u64;
    let epoch = step / per_epoch;
    let k = (step % per_epoch) as usize;
    let mut order: Vec<usize> = (0..n_windows).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    order.shuffle(&mut rng);
    order[k * bs..((k + 1) * bs).min(n_windows)].to_vec()
}

/// The last `floor(n · fraction)` dialogues are held out, keeping at least
/// one for training.
pub fn split_dialogues(dialogues: &[Dialogue], fraction: f64) -> (&[Dialogue], &[Dialogue]) {
    let n = dialogues.len();
    let held = ((n as f64 * fraction).floor() as usize).min(n.saturating_sub(1));
    dialogues.split_at(n - held)
}

pub struct Trainer<'a> {
    pub config: RunConfig,
    pub model: Model,
    pub state: TrainState,
    pub windows: Vec<ConversationWindow<'a>>,
    pub bank: &'a FeatureBank,
}

impl<'a> Trainer<'a> {
    /// `config` is resolved (seed fixed) and validated.
    pub fn new(config: &RunConfig, dialogues: &'a [Dialogue], bank: &'a FeatureBank) -> Result<Self> {
        let config = config.resolved();
        config.validate()?;
        let seed = config.resolved_seed();
        let model = Model::new(&config.model, seed)?;
        let windows = crate::corpus::all_windows(dialogues, config.data.c);
        if windows.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let adam = Adam::new(&model.store);
        Ok(Self {
            config,
            model,
            state: TrainState { step: 0, seed, adam },
            windows,
            bank,
        })
    }

    pub fn next_windows(&self) -> Vec<ConversationWindow<'a>> {
        schedule(
            self.windows.len(),
            self.config.train.batch_size,
            self.state.seed,
            self.state.step,
        )
        .into_iter()
        .map(|i| self.windows[i])
        .collect()
    }

    pub fn make_batch(&self, windows: &[ConversationWindow<'a>]) -> Result<Batch<'a>> {
        make_batch(windows, self.config.data.pad_id, self.config.data.c)
    }

    /// One optimizer update on the scheduled batch.
    pub fn train_step(&mut self) -> Result<LossBreakdown> {
        let batch = self.make_batch(&self.next_windows())?;
        self.step_on_batch(&batch)
    }

    pub fn step_on_batch(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        let items = batch_inputs(batch, self.bank, &self.model.config, self.config.data.pad_id)?;
        let (grads, breakdown) = {
            let mut tape = Tape::new(&self.model.store);
            let (loss, b) = batch_loss(
                &mut tape,
                &self.model,
                &items,
                &self.config.ablation,
                &self.config.train,
            )?;
            (tape.backward(loss), b)
        };
        self.state
            .adam
            .update(&mut self.model.store, &grads, &self.config.train, self.state.step);
        self.state.step += 1;
        Ok(breakdown)
    }

    /// Teacher-forced loss on `windows` without updating, in batches.
    pub fn evaluate(&self, windows: &[ConversationWindow]) -> Result<LossBreakdown> {
        evaluate(&self.model, &self.config, windows, self.bank)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let bytes = encode_checkpoint(&self.config, &self.model.store, &self.state);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Rebuild a trainer from a checkpoint written under the same config.
    pub fn resume(
        config: &RunConfig,
        path: &Path,
        dialogues: &'a [Dialogue],
        bank: &'a FeatureBank,
    ) -> Result<Self> {
        let mut t = Self::new(config, dialogues, bank)?;
        let ck = Checkpoint::read(path)?;
        if ck.config_hash != t.config.model_hash() {
            return Err(Error::Checkpoint(
                "config hash mismatch: checkpoint was written for a different model".into(),
            ));
        }
        ck.restore_into(&mut t.model.store)?;
        t.state = TrainState {
            step: ck.step,
            seed: ck.seed,
            adam: Adam { m: ck.m, v: ck.v },
        };
        Ok(t)
    }
}

pub fn evaluate(
    model: &Model,
    config: &RunConfig,
    windows: &[ConversationWindow],
    bank: &FeatureBank,
) -> Result<LossBreakdown> {
    if windows.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut sum = LossBreakdown::default();
    let mut weight = 0.0;
    for chunk in windows.chunks(config.train.batch_size.max(1)) {
        let batch = make_batch(chunk, config.data.pad_id, config.data.c)?;
        let items = batch_inputs(&batch, bank, &model.config, config.data.pad_id)?;
        let mut tape = Tape::new(&model.store);
        let (_, b) = batch_loss(&mut tape, model, &items, &config.ablation, &config.train)?;
        let w = chunk.len() as f64;
        sum.mel_l1 += w * b.mel_l1;
        sum.pitch_mse += w * b.pitch_mse;
        sum.energy_mse += w * b.energy_mse;
        sum.logdur_mse += w * b.logdur_mse;
        sum.prosody_mse += w * b.prosody_mse;
        sum.total += w * b.total;
        weight += w;
    }
    Ok(LossBreakdown {
        mel_l1: sum.mel_l1 / weight,
        pitch_mse: sum.pitch_mse / weight,
        energy_mse: sum.energy_mse / weight,
        logdur_mse: sum.logdur_mse / weight,
        prosody_mse: sum.prosody_mse / weight,
        total: sum.total / weight,
    })
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"M2CK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Decoded checkpoint contents.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub config: RunConfig,
    pub step: u64,
    pub seed: u64,
    pub names: Vec<String>,
    pub values: Vec<Mat>,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

fn put_u32(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_mat(out: &mut Vec<u8>, m: &Mat) {
    for x in m.iter() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Layout: magic, u32 version, 32-byte config hash, u32-length config
/// JSON, u64 step, u64 seed, u32 parameter count, then per parameter the
/// u32-length name, u32 rows, u32 cols and the value, first and second
/// moments as f64 LE.
pub fn encode_checkpoint(config: &RunConfig, store: &ParamStore, state: &TrainState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    out.extend_from_slice(&config.model_hash());
    let json = config.to_pretty_json();
    put_u32(&mut out, json.len() as u32);
    out.extend_from_slice(json.as_bytes());
    out.extend_from_slice(&state.step.to_le_bytes());
    out.extend_from_slice(&state.seed.to_le_bytes());
    put_u32(&mut out, store.len() as u32);
    for (id, p) in store.iter() {
        put_u32(&mut out, p.name.len() as u32);
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.value.nrows() as u32);
        put_u32(&mut out, p.value.ncols() as u32);
        put_mat(&mut out, &p.value);
        put_mat(&mut out, &state.adam.m[id.0]);
        put_mat(&mut out, &state.adam.v[id.0]);
    }
    out
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn mat(&mut self, rows: usize, cols: usize) -> Result<Mat> {
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Checkpoint("parameter shape overflow".into()))?;
        let raw = self.take(n)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Mat::from_shape_vec((rows, cols), data).expect("shape matches length"))
    }
}

impl Checkpoint {
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic, not an M2CK checkpoint".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let config_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let len = r.u32()? as usize;
        let json = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let config: RunConfig = serde_json::from_str(json)
            .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        if config.model_hash() != config_hash {
            return Err(Error::Checkpoint("embedded config does not match its hash".into()));
        }
        let step = r.u64()?;
        let seed = r.u64()?;
        let n = r.u32()? as usize;
        let (mut names, mut values, mut m, mut v) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for _ in 0..n {
            let l = r.u32()? as usize;
            let name = String::from_utf8(r.take(l)?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            values.push(r.mat(rows, cols)?);
            m.push(r.mat(rows, cols)?);
            v.push(r.mat(rows, cols)?);
            names.push(name);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            config_hash,
            config,
            step,
            seed,
            names,
            values,
            m,
            v,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Copy parameter values into `store`; names and shapes must agree.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.values.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameters in checkpoint, model has {}",
                self.values.len(),
                store.len()
            )));
        }
        let ids: Vec<_> = store.ids().collect();
        for (id, (name, value)) in ids.into_iter().zip(self.names.iter().zip(&self.values)) {
            if store.name(id) != name || store.get(id).dim() != value.dim() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} does not match model parameter {}",
                    store.name(id)
                )));
            }
            *store.get_mut(id) = value.clone();
        }
        Ok(())
    }

    /// Model for inference, rebuilt from the embedded config.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(&self.config.model, self.seed)?;
        self.restore_into(&mut model.store)?;
        Ok(model)
    }
}

/// One row of the ablation metrics table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub tum: bool,
    pub wum: bool,
    pub tpm: bool,
    pub wpm: bool,
    pub steps: u64,
    pub seed: u64,
    pub initial_total: f64,
    #[serde(rename = "final")]
    pub final_loss: LossBreakdown,
    pub val_mel_l1: Option<f64>,
}

/// Train every named configuration from the shared seed and write one JSON
/// line per configuration to `out`.
pub fn run_ablation(
    names: &[String],
    base: &RunConfig,
    train: &[Dialogue],
    val: &[Dialogue],
    bank: &FeatureBank,
    out: &Path,
) -> Result<Vec<AblationRow>> {
    let ablations = names
        .iter()
        .map(|n| AblationConfig::named(n))
        .collect::<Result<Vec<_>>>()?;
    let base = base.resolved();
    let mut rows = Vec::new();
    for ablation in ablations {
        let cfg = RunConfig {
            ablation: ablation.clone(),
            ..base.clone()
        };
        let mut trainer = Trainer::new(&cfg, train, bank)?;
        let mut first = None;
        let mut last = LossBreakdown::default();
        for _ in 0..cfg.train.steps {
            last = trainer.train_step()?;
            first.get_or_insert(last.total);
        }
        let val_windows = crate::corpus::all_windows(val, cfg.data.c);
        let val_mel_l1 = if val_windows.is_empty() {
            None
        } else {
            Some(trainer.evaluate(&val_windows)?.mel_l1)
        };
        rows.push(AblationRow {
            name: ablation.name.clone(),
            tum: ablation.tum,
            wum: ablation.wum,
            tpm: ablation.tpm,
            wpm: ablation.wpm,
            steps: cfg.train.steps,
            seed: trainer.state.seed,
            initial_total: first.unwrap_or(f64::NAN),
            final_loss: last,
            val_mel_l1,
        });
    }
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(out).map_err(|e| Error::io(out, e))?;
    for row in &rows {
        let line = serde_json::to_string(row).expect("row serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(out, e))?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_covers_each_window_once_per_epoch() {
        let mut seen = Vec::new();
        for step in 0..3 {
            seen.extend(schedule(10, 4, 5, step));
        }
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(schedule(10, 4, 5, 2).len(), 2);
        assert_eq!(schedule(10, 4, 5, 7), schedule(10, 4, 5, 7));
        assert_ne!(
            (0..3).flat_map(|s| schedule(10, 4, 5, s)).collect::<Vec<_>>(),
            (3..6).flat_map(|s| schedule(10, 4, 5, s)).collect::<Vec<_>>()
        );
    }

    #[test]
    fn warmup_ramps_linearly() {
        let cfg = TrainConfig {
            lr: 1e-3,
            warmup_steps: 10,
            ..TrainConfig::default()
        };
        assert!((Adam::learning_rate(&cfg, 0) - 1e-4).abs() < 1e-15);
        assert_eq!(Adam::learning_rate(&cfg, 9), 1e-3);
        assert_eq!(Adam::learning_rate(&cfg, 100), 1e-3);
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_truncation() {
        assert!(Checkpoint::decode(b"XXXX").is_err());
        let mut store = ParamStore::new();
        store.add("w", Mat::from_elem((2, 3), 0.25));
        let state = TrainState {
            step: 3,
            seed: 9,
            adam: Adam::new(&store),
        };
        let cfg = RunConfig::desk();
        let bytes = encode_checkpoint(&cfg, &store, &state);
        let ck = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(ck.step, 3);
        assert_eq!(ck.values[0], *store.get(crate::autodiff::ParamId(0)));
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[4] = 2;
        assert!(Checkpoint::decode(&wrong).is_err());
    }
}
