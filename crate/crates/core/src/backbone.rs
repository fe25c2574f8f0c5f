//! Non-autoregressive acoustic model: phoneme encoder, variance adaptor with
//! length regulation, and a style-conditioned mel decoder.

use crate::autodiff::{Init, Mat, ParamId, ParamStore, Tape, Var};
use crate::config::ModelConfig;
use crate::corpus::MEL_CHANNELS;
use crate::error::{Error, Result};
use crate::fusion::{
    sinusoidal_positions, Activation, AttentionWeights, Conv1d, LayerNorm, Linear,
    MultiHeadAttention, Saln,
};

#[derive(Clone, Debug)]
pub enum BlockNorm {
    Plain(LayerNorm),
    Style(Saln),
}

impl BlockNorm {
    /// With `style == None`, a SALN norm falls back to affine-free layer
    /// norm (the unconditioned reference).
    fn forward(&self, tape: &mut Tape, x: Var, style: Option<Var>) -> Result<Var> {
        match (self, style) {
            (BlockNorm::Plain(ln), _) => ln.forward(tape, x),
            (BlockNorm::Style(saln), Some(w)) => saln.forward(tape, x, w),
            (BlockNorm::Style(_), None) => Ok(tape.layer_norm(x, crate::fusion::NORM_EPS)),
        }
    }
}

/// Feed-forward transformer block: self-attention and a two-layer conv
/// network, each followed by residual add and normalization.
#[derive(Clone, Debug)]
pub struct FftBlock {
    pub attention: MultiHeadAttention,
    pub norm_attn: BlockNorm,
    pub conv_in: Conv1d,
    pub conv_out: Conv1d,
    pub norm_ffn: BlockNorm,
}

impl FftBlock {
    fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        cfg: &ModelConfig,
        conditioned: bool,
    ) -> Result<Self> {
        let d = cfg.d_model;
        let attention = MultiHeadAttention::new(store, init, &format!("{name}.attn"), d, cfg.heads)?;
        let norm = |store: &mut ParamStore, init: &mut Init, suffix: &str| {
            let n = format!("{name}.{suffix}");
            if conditioned {
                BlockNorm::Style(Saln::new(store, init, &n, cfg.style_dim, d))
            } else {
                BlockNorm::Plain(LayerNorm::new(store, &n, d))
            }
        };
        let norm_attn = norm(store, init, "norm_attn");
        let conv_in = Conv1d::new(
            store,
            init,
            &format!("{name}.ffn_in"),
            d,
            cfg.ffn_filter,
            cfg.ffn_kernels[0],
            Activation::Relu,
        )?;
        let conv_out = Conv1d::new(
            store,
            init,
            &format!("{name}.ffn_out"),
            cfg.ffn_filter,
            d,
            cfg.ffn_kernels[1],
            Activation::Linear,
        )?;
        let norm_ffn = norm(store, init, "norm_ffn");
        Ok(Self {
            attention,
            norm_attn,
            conv_in,
            conv_out,
            norm_ffn,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, mask: &[bool], style: Option<Var>) -> Result<Var> {
        let (attn, _) = self.attention.forward(tape, x, x, x, mask)?;
        let h = tape.add(x, attn)?;
        let h = self.norm_attn.forward(tape, h, style)?;
        let h = tape.mask_rows(h, mask)?;
        let f = self.conv_in.forward(tape, h)?;
        let f = self.conv_out.forward(tape, f)?;
        let h = tape.add(h, f)?;
        let h = self.norm_ffn.forward(tape, h, style)?;
        tape.mask_rows(h, mask)
    }

    pub fn saln_norms(&self) -> impl Iterator<Item = &Saln> {
        [&self.norm_attn, &self.norm_ffn].into_iter().filter_map(|n| match n {
            BlockNorm::Style(s) => Some(s),
            BlockNorm::Plain(_) => None,
        })
    }
}

fn positions_leaf(tape: &mut Tape, n: usize, d: usize) -> Result<Var> {
    Ok(tape.leaf(sinusoidal_positions(n.max(1), d)?.slice_move(ndarray::s![..n, ..])))
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub hidden: Var,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub embedding: ParamId,
    pub blocks: Vec<FftBlock>,
    pub vocab_size: usize,
    pub dim: usize,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        let embedding = store.add(
            "encoder.embedding",
            init.normal(cfg.vocab_size, d, (d as f64).powf(-0.5)),
        );
        let blocks = (0..cfg.encoder_layers)
            .map(|i| FftBlock::new(store, init, &format!("encoder.block{i}"), cfg, false))
            .collect::<Result<_>>()?;
        Ok(Self {
            embedding,
            blocks,
            vocab_size: cfg.vocab_size,
            dim: d,
        })
    }

    /// `phoneme_ids` may include padding; only `mask`ed-in rows are real.
    pub fn forward(&self, tape: &mut Tape, phoneme_ids: &[usize], mask: &[bool]) -> Result<EncoderOutput> {
        if phoneme_ids.len() != mask.len() {
            return Err(Error::Shape("phoneme ids and mask differ in length".into()));
        }
        if let Some(&bad) = phoneme_ids.iter().find(|&&p| p >= self.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "phoneme id {bad} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        let table = tape.param(self.embedding);
        let idx: Vec<Option<usize>> = phoneme_ids.iter().map(|&p| Some(p)).collect();
        let x = tape.gather_rows(table, &idx)?;
        let pos = positions_leaf(tape, phoneme_ids.len(), self.dim)?;
        let x = tape.add(x, pos)?;
        let mut h = tape.mask_rows(x, mask)?;
        for block in &self.blocks {
            h = block.forward(tape, h, mask, None)?;
        }
        Ok(EncoderOutput {
            hidden: h,
            mask: mask.to_vec(),
        })
    }
}

/// Two conv layers with layer norm and a scalar head, one value per phoneme.
#[derive(Clone, Debug)]
pub struct VariancePredictor {
    pub conv1: Conv1d,
    pub norm1: LayerNorm,
    pub conv2: Conv1d,
    pub norm2: LayerNorm,
    pub head: Linear,
}

impl VariancePredictor {
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let f = cfg.variance_filter;
        let k = cfg.variance_kernel;
        Ok(Self {
            conv1: Conv1d::new(store, init, &format!("{name}.conv1"), cfg.d_model, f, k, Activation::Relu)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), f),
            conv2: Conv1d::new(store, init, &format!("{name}.conv2"), f, f, k, Activation::Relu)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), f),
            head: Linear::new(store, init, &format!("{name}.head"), f, 1, true),
        })
    }

    /// `N × 1` predictions, zero at padding.
    pub fn forward(&self, tape: &mut Tape, x: Var, mask: &[bool]) -> Result<Var> {
        let h = self.conv1.forward(tape, x)?;
        let h = self.norm1.forward(tape, h)?;
        let h = tape.mask_rows(h, mask)?;
        let h = self.conv2.forward(tape, h)?;
        let h = self.norm2.forward(tape, h)?;
        let h = tape.mask_rows(h, mask)?;
        let y = self.head.forward(tape, h)?;
        tape.mask_rows(y, mask)
    }
}

/// Per-phoneme oracle values used for teacher forcing.
#[derive(Clone, Debug)]
pub struct VarianceTargets {
    pub durations: Vec<usize>,
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct VariancePredictions {
    pub log_duration: Var,
    pub pitch: Var,
    pub energy: Var,
}

#[derive(Clone, Debug)]
pub struct AdaptorOutput {
    /// `T_pad × d`, zero past the real frames.
    pub frames: Var,
    pub frame_mask: Vec<bool>,
    pub durations: Vec<usize>,
    pub predictions: VariancePredictions,
}

/// `n_bins − 1` evenly spaced boundaries over `[lo, hi]`.
pub fn bin_boundaries(range: [f64; 2], n_bins: usize) -> Vec<f64> {
    let k = n_bins - 1;
    (0..k)
        .map(|i| range[0] + (range[1] - range[0]) * i as f64 / (k - 1).max(1) as f64)
        .collect()
}

/// Index of the bin holding `v`: the number of boundaries strictly below it.
pub fn bucketize(v: f64, boundaries: &[f64]) -> usize {
    boundaries.partition_point(|&b| b < v)
}

/// Repeat phoneme `p` `durations[p]` times, then pad with `None`.
pub fn length_regulation_index(durations: &[usize], pad_to: usize) -> Vec<Option<usize>> {
    let mut idx: Vec<Option<usize>> = durations
        .iter()
        .enumerate()
        .flat_map(|(p, &d)| std::iter::repeat_n(Some(p), d))
        .collect();
    if idx.len() < pad_to {
        idx.resize(pad_to, None);
    }
    idx
}

/// `max(1, round(exp(log_d)))` on real phonemes, 0 on padding.
pub fn durations_from_log(log_duration: &Mat, mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .map(|(i, &m)| {
            if m {
                (log_duration[[i, 0]].exp().round().max(1.0)).min(1e6) as usize
            } else {
                0
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct VarianceAdaptor {
    pub duration: VariancePredictor,
    pub pitch: VariancePredictor,
    pub energy: VariancePredictor,
    pub pitch_embedding: ParamId,
    pub energy_embedding: ParamId,
    pub pitch_bins: Vec<f64>,
    pub energy_bins: Vec<f64>,
}

impl VarianceAdaptor {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &ModelConfig) -> Result<Self> {
        let duration = VariancePredictor::new(store, init, "variance.duration", cfg)?;
        let pitch = VariancePredictor::new(store, init, "variance.pitch", cfg)?;
        let energy = VariancePredictor::new(store, init, "variance.energy", cfg)?;
        let std = (cfg.d_model as f64).powf(-0.5);
        let pitch_embedding = store.add("variance.pitch_embedding", init.normal(cfg.n_bins, cfg.d_model, std));
        let energy_embedding = store.add("variance.energy_embedding", init.normal(cfg.n_bins, cfg.d_model, std));
        Ok(Self {
            duration,
            pitch,
            energy,
            pitch_embedding,
            energy_embedding,
            pitch_bins: bin_boundaries(cfg.pitch_range, cfg.n_bins),
            energy_bins: bin_boundaries(cfg.energy_range, cfg.n_bins),
        })
    }

    fn embed(&self, tape: &mut Tape, table: ParamId, values: &[f64], bins: &[f64], mask: &[bool]) -> Result<Var> {
        let idx: Vec<Option<usize>> = values
            .iter()
            .zip(mask)
            .map(|(&v, &m)| m.then(|| bucketize(v, bins)))
            .collect();
        let t = tape.param(table);
        tape.gather_rows(t, &idx)
    }

    /// With `targets`, pitch/energy embeddings and length regulation use the
    /// oracle values; without, the predictions. `pad_frames` right-pads the
    /// frame sequence.
    pub fn forward(
        &self,
        tape: &mut Tape,
        enc: &EncoderOutput,
        targets: Option<&VarianceTargets>,
        pad_frames: Option<usize>,
    ) -> Result<AdaptorOutput> {
        let mask = &enc.mask;
        let log_duration = self.duration.forward(tape, enc.hidden, mask)?;
        let pitch = self.pitch.forward(tape, enc.hidden, mask)?;
        let energy = self.energy.forward(tape, enc.hidden, mask)?;

        let column = |tape: &Tape, v: Var| tape.value(v).column(0).to_vec();
        let (durations, pitch_vals, energy_vals) = match targets {
            Some(t) => {
                if t.durations.len() != mask.len() {
                    return Err(Error::Shape("duration targets do not match phonemes".into()));
                }
                let d = t
                    .durations
                    .iter()
                    .zip(mask)
                    .map(|(&d, &m)| if m { d } else { 0 })
                    .collect();
                (d, t.pitch.clone(), t.energy.clone())
            }
            None => (
                durations_from_log(tape.value(log_duration), mask),
                column(tape, pitch),
                column(tape, energy),
            ),
        };
        let total: usize = durations.iter().sum();
        if total == 0 {
            return Err(Error::InvalidArgument("total duration is zero".into()));
        }
        let pe = self.embed(tape, self.pitch_embedding, &pitch_vals, &self.pitch_bins, mask)?;
        let ee = self.embed(tape, self.energy_embedding, &energy_vals, &self.energy_bins, mask)?;
        let x = tape.add(enc.hidden, pe)?;
        let x = tape.add(x, ee)?;
        let x = tape.mask_rows(x, mask)?;
        let pad_to = pad_frames.unwrap_or(total).max(total);
        let index = length_regulation_index(&durations, pad_to);
        let frame_mask = index.iter().map(Option::is_some).collect();
        let frames = tape.gather_rows(x, &index)?;
        Ok(AdaptorOutput {
            frames,
            frame_mask,
            durations,
            predictions: VariancePredictions {
                log_duration,
                pitch,
                energy,
            },
        })
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub blocks: Vec<FftBlock>,
    pub mel_head: Linear,
    pub dim: usize,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &ModelConfig) -> Result<Self> {
        let blocks = (0..cfg.decoder_layers)
            .map(|i| FftBlock::new(store, init, &format!("decoder.block{i}"), cfg, true))
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            mel_head: Linear::new(store, init, "decoder.mel_head", cfg.d_model, MEL_CHANNELS, true),
            dim: cfg.d_model,
        })
    }

    /// `frames: T × d` → mel `T × 80`. `style = None` runs every norm as
    /// plain layer norm.
    pub fn forward(&self, tape: &mut Tape, frames: Var, frame_mask: &[bool], style: Option<Var>) -> Result<Var> {
        let t = tape.shape(frames).0;
        if t == 0 {
            return Err(Error::InvalidArgument("decoder needs at least one frame".into()));
        }
        let pos = positions_leaf(tape, t, self.dim)?;
        let x = tape.add(frames, pos)?;
        let mut h = tape.mask_rows(x, frame_mask)?;
        for block in &self.blocks {
            h = block.forward(tape, h, frame_mask, style)?;
        }
        let mel = self.mel_head.forward(tape, h)?;
        tape.mask_rows(mel, frame_mask)
    }

    pub fn saln_norms(&self) -> impl Iterator<Item = &Saln> {
        self.blocks.iter().flat_map(|b| b.saln_norms())
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub encoder: Encoder,
    pub adaptor: VarianceAdaptor,
    pub decoder: Decoder,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            encoder: Encoder::new(store, init, cfg)?,
            adaptor: VarianceAdaptor::new(store, init, cfg)?,
            decoder: Decoder::new(store, init, cfg)?,
        })
    }
}

/// Attention maps produced while running the fine-grained modules.
#[derive(Clone, Debug, Default)]
pub struct AttentionDump {
    pub text: Option<AttentionWeights>,
    pub acoustic: Option<AttentionWeights>,
}
