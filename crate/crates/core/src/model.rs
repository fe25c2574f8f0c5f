//! The full acoustic model: backbone, style assembler, the four context
//! modules and the prosody predictor, with per-window input assembly.
//!
//! Parameters are created in a fixed order (backbone, style, TUM, WUM,
//! TPM, WPM, PPM), so a context-free model built from the same seed holds
//! the same backbone and style values.

use crate::autodiff::{Init, Mat, ParamStore, Tape, Var};
use crate::backbone::{AttentionDump, Backbone, VariancePredictions, VarianceTargets};
use crate::config::{AblationConfig, ModelConfig};
use crate::context::{memory_rows, ContextEmbeddings, ContextModules, FineGrainedMemory, StyleAssembler};
use crate::corpus::{Batch, ConversationWindow, MEL_CHANNELS};
use crate::error::{Error, Result};
use crate::extractors::{FeatureBank, Modality};
use crate::prosody::Ppm;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Teacher-forced variance embeddings and durations; PPM active.
    Train,
    /// Predicted durations, pitch and energy; PPM never runs.
    Infer,
}

/// Right-padding targets for one item.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Padding {
    pub phonemes: usize,
    pub frames: usize,
    pub text_rows: usize,
    pub acoustic_rows: usize,
}

/// Everything the model reads for one window, already padded.
#[derive(Clone, Debug)]
pub struct ItemInputs {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub phonemes: Vec<usize>,
    pub phoneme_mask: Vec<bool>,
    pub durations: Vec<usize>,
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
    /// `T_pad × 80` target, zero past the real frames; empty without targets.
    pub mel: Mat,
    pub frame_mask: Vec<bool>,
    pub history_len: usize,
    pub history_text: Mat,
    pub history_acoustic: Mat,
    pub current_text: Vec<f64>,
    /// Target for the prosody predictor.
    pub current_acoustic: Vec<f64>,
    pub text_memory: FineGrainedMemory,
    pub acoustic_memory: FineGrainedMemory,
}

impl ItemInputs {
    pub fn num_phonemes(&self) -> usize {
        self.phoneme_mask.iter().filter(|&&m| m).count()
    }

    pub fn num_frames(&self) -> usize {
        self.frame_mask.iter().filter(|&&m| m).count()
    }

    /// `with_targets` loads the current turn's mel; synthesis leaves it out.
    pub fn from_window(
        window: &ConversationWindow,
        bank: &FeatureBank,
        cfg: &ModelConfig,
        c: usize,
        pad_id: usize,
        padding: Padding,
        with_targets: bool,
    ) -> Result<Self> {
        let cur = window.current;
        let n = cur.num_phonemes();
        let n_pad = n.max(padding.phonemes);
        let mut phonemes = vec![pad_id; n_pad];
        phonemes[..n].copy_from_slice(&cur.phoneme_ids);
        let mut durations = vec![0; n_pad];
        durations[..n].copy_from_slice(&cur.durations);
        let mut pitch = vec![0.0; n_pad];
        pitch[..n].copy_from_slice(&cur.pitch);
        let mut energy = vec![0.0; n_pad];
        energy[..n].copy_from_slice(&cur.energy);

        let (mel, frame_mask) = if with_targets {
            let m = cur.load_mel()?;
            let t = m.nrows();
            let t_pad = t.max(padding.frames);
            let mut mel = Mat::zeros((t_pad, MEL_CHANNELS));
            mel.slice_mut(ndarray::s![..t, ..]).assign(&m);
            (mel, (0..t_pad).map(|i| i < t).collect())
        } else {
            (Mat::zeros((0, MEL_CHANNELS)), Vec::new())
        };

        let dims = &cfg.features;
        let h = window.history.len();
        let rows = c.max(h);
        let mut history_text = Mat::zeros((rows, dims.text_utterance));
        let mut history_acoustic = Mat::zeros((rows, dims.acoustic_utterance));
        for (i, turn) in window.history.iter().enumerate() {
            let f = bank.get(turn)?;
            copy_row(&mut history_text, i, &f.text_utterance, turn)?;
            copy_row(&mut history_acoustic, i, &f.acoustic_utterance, turn)?;
        }
        let f = bank.get(cur)?;
        if f.text_utterance.len() != dims.text_utterance
            || f.acoustic_utterance.len() != dims.acoustic_utterance
        {
            return Err(Error::Shape(format!(
                "{}/{} utterance embeddings do not match configured widths",
                cur.dialogue_id, cur.turn_index
            )));
        }
        Ok(Self {
            dialogue_id: cur.dialogue_id.clone(),
            turn_index: cur.turn_index,
            phonemes,
            phoneme_mask: (0..n_pad).map(|i| i < n).collect(),
            durations,
            pitch,
            energy,
            mel,
            frame_mask,
            history_len: h,
            history_text,
            history_acoustic,
            current_text: f.text_utterance.clone(),
            current_acoustic: f.acoustic_utterance.clone(),
            text_memory: FineGrainedMemory::from_window(
                window,
                bank,
                Modality::Text,
                dims.text_sequence,
                padding.text_rows,
            )?,
            acoustic_memory: FineGrainedMemory::from_window(
                window,
                bank,
                Modality::Acoustic,
                dims.acoustic_sequence,
                padding.acoustic_rows,
            )?,
        })
    }

    pub fn targets(&self) -> VarianceTargets {
        VarianceTargets {
            durations: self.durations.clone(),
            pitch: self.pitch.clone(),
            energy: self.energy.clone(),
        }
    }
}

fn copy_row(dst: &mut Mat, row: usize, v: &[f64], turn: &crate::corpus::Turn) -> Result<()> {
    if v.len() != dst.ncols() {
        return Err(Error::Shape(format!(
            "{}/{} embedding width {} != {}",
            turn.dialogue_id,
            turn.turn_index,
            v.len(),
            dst.ncols()
        )));
    }
    dst.row_mut(row).iter_mut().zip(v).for_each(|(o, &x)| *o = x);
    Ok(())
}

/// Per-item inputs for a batch, padded to the batch maxima.
pub fn batch_inputs(batch: &Batch, bank: &FeatureBank, cfg: &ModelConfig, pad_id: usize) -> Result<Vec<ItemInputs>> {
    let mut padding = Padding {
        phonemes: batch.max_phonemes(),
        frames: batch.max_frames(),
        ..Padding::default()
    };
    for w in &batch.windows {
        padding.text_rows = padding.text_rows.max(memory_rows(w, bank, Modality::Text)?);
        padding.acoustic_rows = padding.acoustic_rows.max(memory_rows(w, bank, Modality::Acoustic)?);
    }
    batch
        .windows
        .iter()
        .map(|w| ItemInputs::from_window(w, bank, cfg, batch.memory_capacity, pad_id, padding, true))
        .collect()
}

#[derive(Clone, Debug)]
pub struct ItemOutput {
    /// `T_pad × 80`, zero past the real frames.
    pub mel: Var,
    pub frame_mask: Vec<bool>,
    pub durations: Vec<usize>,
    pub predictions: VariancePredictions,
    /// Encoder output after the phoneme-level residuals.
    pub encoder: Var,
    pub style: Var,
    pub context: ContextEmbeddings,
    pub prosody: Option<Var>,
    pub attention: AttentionDump,
    pub text_pool_weights: Option<Mat>,
    pub acoustic_pool_weights: Option<Mat>,
}

/// Synthesized mel and the attention maps produced on the way.
#[derive(Clone, Debug)]
pub struct Synthesis {
    pub mel: Mat,
    pub durations: Vec<usize>,
    pub attention: AttentionDump,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub style: StyleAssembler,
    pub context: Option<ContextModules>,
    pub ppm: Option<Ppm>,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Self::build(cfg, seed, true)
    }

    /// Backbone and style assembler only; same values as the prefix of
    /// [`Model::new`] for the same seed.
    pub fn context_free(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Self::build(cfg, seed, false)
    }

    fn build(cfg: &ModelConfig, seed: u64, with_context: bool) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let backbone = Backbone::new(&mut store, &mut init, cfg)?;
        let style = StyleAssembler::new(&mut store, &mut init, cfg.d_model, cfg.style_dim);
        let (context, ppm) = if with_context {
            let ctx = ContextModules::new(&mut store, &mut init, cfg)?;
            let ppm = Ppm::new(&mut store, &mut init, cfg.d_model, cfg.features.acoustic_utterance);
            (Some(ctx), Some(ppm))
        } else {
            (None, None)
        };
        Ok(Self {
            config: cfg.clone(),
            store,
            backbone,
            style,
            context,
            ppm,
        })
    }

    /// Same model with the prosody predictor and its parameters removed.
    pub fn without_ppm(&self) -> Self {
        let mut m = self.clone();
        if let Some(ppm) = m.ppm.take() {
            m.store.truncate(ppm.hidden.weight.0);
        }
        m
    }

    fn context_modules(&self, ablation: &AblationConfig) -> Result<Option<&ContextModules>> {
        match (&self.context, ablation.any_context()) {
            (_, false) => Ok(None),
            (Some(c), true) => Ok(Some(c)),
            (None, true) => Err(Error::InvalidArgument(format!(
                "ablation {ablation} needs context modules this model was built without"
            ))),
        }
    }

    pub fn forward_item(
        &self,
        tape: &mut Tape,
        inputs: &ItemInputs,
        ablation: &AblationConfig,
        mode: Mode,
    ) -> Result<ItemOutput> {
        let ctx_mods = self.context_modules(ablation)?;
        let bb = &self.backbone;
        let enc = bb.encoder.forward(tape, &inputs.phonemes, &inputs.phoneme_mask)?;
        let mut hidden = enc.hidden;
        let mut attention = AttentionDump::default();
        let mut context = ContextEmbeddings::default();
        let mut text_pool_weights = None;
        let mut acoustic_pool_weights = None;
        if let Some(cm) = ctx_mods {
            if ablation.tpm {
                if let Some((delta, w)) =
                    cm.tpm.forward(tape, enc.hidden, &inputs.phoneme_mask, &inputs.text_memory)?
                {
                    hidden = tape.add(hidden, delta)?;
                    attention.text = Some(w);
                }
            }
            if ablation.wpm {
                if let Some((delta, w)) =
                    cm.wpm.forward(tape, enc.hidden, &inputs.phoneme_mask, &inputs.acoustic_memory)?
                {
                    hidden = tape.add(hidden, delta)?;
                    attention.acoustic = Some(w);
                }
            }
            if ablation.tum {
                let out = cm.tum.forward(tape, &inputs.history_text, inputs.history_len, &inputs.current_text)?;
                context.text = Some(out.embedding);
                text_pool_weights = Some(out.weights);
            }
            if ablation.wum {
                let out = cm.wum.forward(
                    tape,
                    &inputs.history_acoustic,
                    inputs.history_len,
                    &inputs.current_text,
                )?;
                context.acoustic = Some(out.embedding);
                acoustic_pool_weights = Some(out.weights);
            }
        }
        let style = self.style.forward(tape, &context)?;
        let enc = crate::backbone::EncoderOutput {
            hidden,
            mask: enc.mask,
        };
        let adapted = match mode {
            Mode::Train => {
                let t = inputs.targets();
                bb.adaptor.forward(tape, &enc, Some(&t), Some(inputs.frame_mask.len()))?
            }
            Mode::Infer => bb.adaptor.forward(tape, &enc, None, None)?,
        };
        let mel = bb.decoder.forward(tape, adapted.frames, &adapted.frame_mask, Some(style))?;
        let prosody = match (&self.ppm, mode, ablation.any_coarse()) {
            (Some(ppm), Mode::Train, true) => Some(ppm.forward(tape, &context, &self.style)?),
            _ => None,
        };
        Ok(ItemOutput {
            mel,
            frame_mask: adapted.frame_mask,
            durations: adapted.durations,
            predictions: adapted.predictions,
            encoder: hidden,
            style,
            context,
            prosody,
            attention,
            text_pool_weights,
            acoustic_pool_weights,
        })
    }

    /// Full inference for the current turn of `window`.
    pub fn synthesize(
        &self,
        window: &ConversationWindow,
        bank: &FeatureBank,
        ablation: &AblationConfig,
        c: usize,
        pad_id: usize,
    ) -> Result<Synthesis> {
        let inputs = ItemInputs::from_window(window, bank, &self.config, c, pad_id, Padding::default(), false)?;
        let mut tape = Tape::new(&self.store);
        let out = self.forward_item(&mut tape, &inputs, ablation, Mode::Infer)?;
        let mel = tape.value(out.mel).clone();
        if mel.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("synthesized mel".into()));
        }
        Ok(Synthesis {
            mel,
            durations: out.durations,
            attention: out.attention,
        })
    }
}
