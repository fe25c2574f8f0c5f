//! Dialogue-context modules: utterance-level summarizers over history
//! embeddings (text and wave), phoneme-level cross-attention into history
//! feature sequences, and assembly of the decoder style vector.

use crate::autodiff::{Init, Mat, ParamId, ParamStore, Tape, Var};
use crate::config::ModelConfig;
use crate::corpus::ConversationWindow;
use crate::error::{Error, Result};
use crate::extractors::{FeatureBank, Modality};
use crate::fusion::{
    sinusoidal_rows, AdditivePool, AttentionWeights, Conv1d, Gru, Linear, MultiHeadAttention,
};

/// Global context vectors, each `1 × d` when present.
#[derive(Clone, Copy, Debug, Default)]
pub struct ContextEmbeddings {
    pub text: Option<Var>,
    pub acoustic: Option<Var>,
}

/// GRU over projected history embeddings, then additive attention pooling
/// over the per-step states. The pooling query is a linear map of the
/// final state concatenated with the projected current text embedding.
#[derive(Clone, Debug)]
pub struct CoarseEncoder {
    pub history_proj: Linear,
    pub current_proj: Linear,
    pub gru: Gru,
    pub init_state: ParamId,
    pub query: Linear,
    pub pool: AdditivePool,
    pub history_dim: usize,
    pub current_dim: usize,
}

#[derive(Clone, Debug)]
pub struct CoarseOutput {
    pub embedding: Var,
    /// `1 × keys`; keys are the GRU states, or the initial state alone.
    pub weights: Mat,
}

impl CoarseEncoder {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        history_dim: usize,
        current_dim: usize,
        d: usize,
    ) -> Self {
        Self {
            history_proj: Linear::new(store, init, &format!("{name}.history_proj"), history_dim, d, true),
            current_proj: Linear::new(store, init, &format!("{name}.current_proj"), current_dim, d, true),
            gru: Gru::new(store, init, &format!("{name}.gru"), d, d),
            init_state: store.add(format!("{name}.init_state"), init.normal(1, d, 0.1)),
            query: Linear::new(store, init, &format!("{name}.query"), 2 * d, d, true),
            pool: AdditivePool::new(store, init, &format!("{name}.pool"), d, d, d),
            history_dim,
            current_dim,
        }
    }

    /// `history: rows × history_dim` with the first `len` rows real.
    pub fn forward(
        &self,
        tape: &mut Tape,
        history: &Mat,
        len: usize,
        current: &[f64],
    ) -> Result<CoarseOutput> {
        if history.ncols() != self.history_dim || current.len() != self.current_dim {
            return Err(Error::Shape(format!(
                "coarse encoder expects history width {} and current width {}, got {} and {}",
                self.history_dim,
                self.current_dim,
                history.ncols(),
                current.len()
            )));
        }
        if len > history.nrows() {
            return Err(Error::Shape(format!(
                "history length {len} exceeds {} rows",
                history.nrows()
            )));
        }
        let h0 = tape.param(self.init_state);
        let (final_state, keys, mask) = if len == 0 {
            (h0, h0, vec![true])
        } else {
            let x = tape.leaf(history.clone());
            let x = self.history_proj.forward(tape, x)?;
            let (_, states) = self.gru.forward(tape, x, h0)?;
            let keys = tape.concat_rows(&states)?;
            let mask = (0..states.len()).map(|i| i < len).collect();
            (states[len - 1], keys, mask)
        };
        let cur = tape.row_leaf(current);
        let cur = self.current_proj.forward(tape, cur)?;
        let q = tape.concat_cols(&[final_state, cur])?;
        let q = self.query.forward(tape, q)?;
        let (embedding, weights) = self.pool.forward(tape, q, keys, &mask)?;
        Ok(CoarseOutput { embedding, weights })
    }
}

/// Concatenated history feature rows with per-row speaker and turn offset
/// (0 = oldest turn in the window).
#[derive(Clone, Debug, PartialEq)]
pub struct FineGrainedMemory {
    pub features: Mat,
    pub speakers: Vec<usize>,
    pub positions: Vec<usize>,
    pub mask: Vec<bool>,
    pub modality: Modality,
}

impl FineGrainedMemory {
    pub fn real_rows(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// History sequences of `window` stacked oldest first, right-padded with
    /// zero rows up to `pad_to`.
    pub fn from_window(
        window: &ConversationWindow,
        bank: &FeatureBank,
        modality: Modality,
        width: usize,
        pad_to: usize,
    ) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut speakers = Vec::new();
        let mut positions = Vec::new();
        for (offset, turn) in window.history.iter().enumerate() {
            let f = bank.get(turn)?;
            let seq = match modality {
                Modality::Text => &f.text_sequence,
                Modality::Acoustic => &f.acoustic_sequence,
            };
            if seq.ncols() != width {
                return Err(Error::Shape(format!(
                    "{}/{} sequence width {} != {width}",
                    turn.dialogue_id,
                    turn.turn_index,
                    seq.ncols()
                )));
            }
            speakers.extend(std::iter::repeat_n(turn.speaker.index(), seq.nrows()));
            positions.extend(std::iter::repeat_n(offset, seq.nrows()));
            blocks.push(seq.view());
        }
        let real = speakers.len();
        let rows = real.max(pad_to);
        let mut features = Mat::zeros((rows, width));
        let mut r = 0;
        for b in blocks {
            features.slice_mut(ndarray::s![r..r + b.nrows(), ..]).assign(&b);
            r += b.nrows();
        }
        speakers.resize(rows, 0);
        positions.resize(rows, 0);
        Ok(Self {
            features,
            speakers,
            positions,
            mask: (0..rows).map(|i| i < real).collect(),
            modality,
        })
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

/// Number of history feature rows in `window` for one modality.
pub fn memory_rows(window: &ConversationWindow, bank: &FeatureBank, modality: Modality) -> Result<usize> {
    window.history.iter().try_fold(0, |acc, t| {
        let f = bank.get(t)?;
        Ok(acc
            + match modality {
                Modality::Text => f.text_sequence.nrows(),
                Modality::Acoustic => f.acoustic_sequence.nrows(),
            })
    })
}

/// Phoneme-level module: contextualize the memory with a 1-D conv, then let
/// the encoder output attend into it. Returns only the residual branch.
#[derive(Clone, Debug)]
pub struct FineEncoder {
    pub speaker_table: ParamId,
    pub use_speaker: bool,
    pub proj: Linear,
    pub conv: Conv1d,
    pub attention: MultiHeadAttention,
    pub feature_dim: usize,
    pub modality: Modality,
}

impl FineEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        feature_dim: usize,
        cfg: &ModelConfig,
        use_speaker: bool,
        modality: Modality,
    ) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            speaker_table: store.add(format!("{name}.speaker"), init.normal(2, feature_dim, 1.0)),
            use_speaker,
            proj: Linear::new(store, init, &format!("{name}.proj"), feature_dim, d, true),
            conv: Conv1d::new(
                store,
                init,
                &format!("{name}.conv"),
                d,
                d,
                cfg.context_kernel,
                cfg.context_activation,
            )?,
            attention: MultiHeadAttention::new(store, init, &format!("{name}.attn"), d, cfg.heads)?,
            feature_dim,
            modality,
        })
    }

    /// Memory rows after speaker and position addition and projection to the
    /// model width; padded rows are zero.
    pub fn project_memory(&self, tape: &mut Tape, memory: &FineGrainedMemory) -> Result<Var> {
        if memory.modality != self.modality {
            return Err(Error::InvalidArgument(format!(
                "{:?} module given {:?} memory",
                self.modality, memory.modality
            )));
        }
        if memory.features.ncols() != self.feature_dim {
            return Err(Error::Shape(format!(
                "memory width {} != {}",
                memory.features.ncols(),
                self.feature_dim
            )));
        }
        let mut x = tape.leaf(memory.features.clone());
        if self.use_speaker {
            let table = tape.param(self.speaker_table);
            let idx: Vec<Option<usize>> = memory
                .speakers
                .iter()
                .zip(&memory.mask)
                .map(|(&s, &m)| m.then_some(s))
                .collect();
            let spk = tape.gather_rows(table, &idx)?;
            x = tape.add(x, spk)?;
        }
        let mut pos = sinusoidal_rows(&memory.positions, self.feature_dim)?;
        for (mut row, &m) in pos.rows_mut().into_iter().zip(&memory.mask) {
            if !m {
                row.fill(0.0);
            }
        }
        let pos = tape.leaf(pos);
        let x = tape.add(x, pos)?;
        let x = self.proj.forward(tape, x)?;
        tape.mask_rows(x, &memory.mask)
    }

    /// `None` when the memory has no real rows (the residual is bypassed).
    pub fn forward(
        &self,
        tape: &mut Tape,
        encoder_out: Var,
        phoneme_mask: &[bool],
        memory: &FineGrainedMemory,
    ) -> Result<Option<(Var, AttentionWeights)>> {
        if memory.real_rows() == 0 {
            return Ok(None);
        }
        let m = self.project_memory(tape, memory)?;
        let m = self.conv.forward(tape, m)?;
        let m = tape.mask_rows(m, &memory.mask)?;
        let (delta, weights) = self.attention.forward(tape, encoder_out, m, m, &memory.mask)?;
        let delta = tape.mask_rows(delta, phoneme_mask)?;
        Ok(Some((delta, weights)))
    }
}

/// Learned null vectors stand in for a disabled coarse module; the
/// concatenation is mapped to the style width.
#[derive(Clone, Debug)]
pub struct StyleAssembler {
    pub null_text: ParamId,
    pub null_acoustic: ParamId,
    pub proj: Linear,
}

impl StyleAssembler {
    pub fn new(store: &mut ParamStore, init: &mut Init, d: usize, style_dim: usize) -> Self {
        Self {
            null_text: store.add("style.null_text", init.normal(1, d, 0.1)),
            null_acoustic: store.add("style.null_acoustic", init.normal(1, d, 0.1)),
            proj: Linear::new(store, init, "style.proj", 2 * d, style_dim, true),
        }
    }

    /// `[H_text or null, H_acoustic or null]`, `1 × 2d`.
    pub fn joined(&self, tape: &mut Tape, ctx: &ContextEmbeddings) -> Result<Var> {
        let t = match ctx.text {
            Some(v) => v,
            None => tape.param(self.null_text),
        };
        let a = match ctx.acoustic {
            Some(v) => v,
            None => tape.param(self.null_acoustic),
        };
        tape.concat_cols(&[t, a])
    }

    pub fn forward(&self, tape: &mut Tape, ctx: &ContextEmbeddings) -> Result<Var> {
        let j = self.joined(tape, ctx)?;
        self.proj.forward(tape, j)
    }
}

/// The four context modules; which ones run is chosen per call.
#[derive(Clone, Debug)]
pub struct ContextModules {
    pub tum: CoarseEncoder,
    pub wum: CoarseEncoder,
    pub tpm: FineEncoder,
    pub wpm: FineEncoder,
}

impl ContextModules {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &ModelConfig) -> Result<Self> {
        let f = &cfg.features;
        let d = cfg.d_model;
        Ok(Self {
            tum: CoarseEncoder::new(store, init, "tum", f.text_utterance, f.text_utterance, d),
            wum: CoarseEncoder::new(store, init, "wum", f.acoustic_utterance, f.text_utterance, d),
            tpm: FineEncoder::new(store, init, "tpm", f.text_sequence, cfg, true, Modality::Text)?,
            wpm: FineEncoder::new(
                store,
                init,
                "wpm",
                f.acoustic_sequence,
                cfg,
                cfg.wpm_speaker_id,
                Modality::Acoustic,
            )?,
        })
    }
}
