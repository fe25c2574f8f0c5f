//! Neural building blocks shared by the backbone and the context modules.
//!
//! Every block records itself on a [`Tape`], so gradients come from the
//! tape's reverse sweep. Parameters are registered in a [`ParamStore`] at
//! construction time; construction order fixes the init order.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Init, Mat, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Variance floor used by SALN and every plain layer norm.
pub const NORM_EPS: f64 = 1e-5;

/// `n × d` table of sinusoidal encodings for positions `0..n`.
pub fn sinusoidal_positions(n: usize, d: usize) -> Result<Mat> {
    let positions: Vec<usize> = (0..n).collect();
    sinusoidal_rows(&positions, d)
}

/// Sinusoidal encodings for an arbitrary list of positions.
pub fn sinusoidal_rows(positions: &[usize], d: usize) -> Result<Mat> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "sinusoidal width must be even and positive, got {d}"
        )));
    }
    let mut out = Mat::zeros((positions.len(), d));
    for (r, &pos) in positions.iter().enumerate() {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            out[[r, 2 * i]] = angle.sin();
            out[[r, 2 * i + 1]] = angle.cos();
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Linear => x,
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init.fan_in(in_dim, out_dim));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Mat::zeros((1, out_dim))));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Per-head attention weights, each `queries × keys`.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub heads: Vec<Mat>,
}

impl AttentionWeights {
    /// Largest deviation of any row sum from 1 across heads.
    pub fn max_row_sum_error(&self) -> f64 {
        self.heads
            .iter()
            .flat_map(|h| h.rows().into_iter().map(|r| (r.sum() - 1.0).abs()).collect::<Vec<_>>())
            .fold(0.0, f64::max)
    }

    /// `heads × queries × keys` flattened row-major, for dumping.
    pub fn to_rank3(&self) -> (Vec<usize>, Vec<f32>) {
        let (q, k) = self.heads.first().map(|h| h.dim()).unwrap_or((0, 0));
        let data = self
            .heads
            .iter()
            .flat_map(|h| h.iter().map(|&x| x as f32).collect::<Vec<_>>())
            .collect();
        (vec![self.heads.len(), q, k], data)
    }
}

/// Scaled dot-product attention over `heads` slices of the model width,
/// with learned input projections and an output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "width {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, init, &format!("{name}.q"), dim, dim, false),
            key: Linear::new(store, init, &format!("{name}.k"), dim, dim, false),
            value: Linear::new(store, init, &format!("{name}.v"), dim, dim, false),
            output: Linear::new(store, init, &format!("{name}.o"), dim, dim, false),
            heads,
            dim,
        })
    }

    /// `queries: n_q×d`, `keys`/`values: n_k×d`, `key_mask: n_k`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        queries: Var,
        keys: Var,
        values: Var,
        key_mask: &[bool],
    ) -> Result<(Var, AttentionWeights)> {
        let (_, dq) = tape.shape(queries);
        let (nk, dk) = tape.shape(keys);
        if dq != self.dim || dk != self.dim || tape.shape(values) != (nk, self.dim) {
            return Err(Error::Shape(format!(
                "attention expects width {}, got q {dq}, k {dk}, v {:?}",
                self.dim,
                tape.shape(values)
            )));
        }
        if key_mask.len() != nk {
            return Err(Error::Shape(format!(
                "key mask length {} for {nk} keys",
                key_mask.len()
            )));
        }
        if !key_mask.iter().any(|&m| m) {
            return Err(Error::AllKeysMasked);
        }
        let q = self.query.forward(tape, queries)?;
        let k = self.key.forward(tape, keys)?;
        let v = self.value.forward(tape, values)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, (h + 1) * dh);
            let kh = tape.slice_cols(k, h * dh, (h + 1) * dh);
            let vh = tape.slice_cols(v, h * dh, (h + 1) * dh);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let w = tape.masked_softmax(scores, key_mask)?;
            weights.push(tape.value(w).clone());
            outs.push(tape.matmul(w, vh)?);
        }
        let joined = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)?
        };
        let out = self.output.forward(tape, joined)?;
        Ok((out, AttentionWeights { heads: weights }))
    }
}

/// Additive attention pooling: `score_i = vᵀ tanh(W_q q + W_k k_i)`,
/// output is the softmax-weighted sum of the keys.
#[derive(Clone, Debug)]
pub struct AdditivePool {
    pub query_proj: Linear,
    pub key_proj: Linear,
    pub score: Linear,
}

impl AdditivePool {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        query_dim: usize,
        key_dim: usize,
        attn_dim: usize,
    ) -> Self {
        Self {
            query_proj: Linear::new(store, init, &format!("{name}.wq"), query_dim, attn_dim, false),
            key_proj: Linear::new(store, init, &format!("{name}.wk"), key_dim, attn_dim, true),
            score: Linear::new(store, init, &format!("{name}.v"), attn_dim, 1, false),
        }
    }

    /// `query: 1×d_q`, `keys: n×d_k` → (`1×d_k`, weights `1×n`).
    pub fn forward(
        &self,
        tape: &mut Tape,
        query: Var,
        keys: Var,
        mask: &[bool],
    ) -> Result<(Var, Mat)> {
        let n = tape.shape(keys).0;
        if mask.len() != n {
            return Err(Error::Shape(format!("pool mask {} for {n} keys", mask.len())));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::AllKeysMasked);
        }
        let q = self.query_proj.forward(tape, query)?;
        let k = self.key_proj.forward(tape, keys)?;
        let hidden = tape.add_row(k, q)?;
        let hidden = tape.tanh(hidden);
        let scores = self.score.forward(tape, hidden)?;
        let scores = tape.transpose(scores);
        let w = tape.masked_softmax(scores, mask)?;
        let weights = tape.value(w).clone();
        let pooled = tape.matmul(w, keys)?;
        Ok((pooled, weights))
    }
}

/// Gated recurrent unit, `h' = (1 − z) ⊙ n + z ⊙ h` with
/// `n = tanh(x W_n + (r ⊙ h) U_n + b_n)`.
#[derive(Clone, Debug)]
pub struct Gru {
    pub input: ParamId,
    pub recurrent_zr: ParamId,
    pub recurrent_n: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        input_dim: usize,
        hidden: usize,
    ) -> Self {
        Self {
            input: store.add(format!("{name}.w_ih"), init.fan_in(input_dim, 3 * hidden)),
            recurrent_zr: store.add(format!("{name}.w_hh_zr"), init.fan_in(hidden, 2 * hidden)),
            recurrent_n: store.add(format!("{name}.w_hh_n"), init.fan_in(hidden, hidden)),
            bias: store.add(format!("{name}.bias"), Mat::zeros((1, 3 * hidden))),
            input_dim,
            hidden,
        }
    }

    /// Runs over the rows of `seq` starting from `init` (`1×hidden`).
    /// Returns the final state and every per-step state.
    pub fn forward(&self, tape: &mut Tape, seq: Var, init: Var) -> Result<(Var, Vec<Var>)> {
        let (n, d) = tape.shape(seq);
        if d != self.input_dim {
            return Err(Error::Shape(format!(
                "gru input width {d}, expected {}",
                self.input_dim
            )));
        }
        if tape.shape(init) != (1, self.hidden) {
            return Err(Error::Shape(format!(
                "gru init {:?}, expected (1, {})",
                tape.shape(init),
                self.hidden
            )));
        }
        if n == 0 {
            return Ok((init, Vec::new()));
        }
        let hd = self.hidden;
        let w = tape.param(self.input);
        let b = tape.param(self.bias);
        let u_zr = tape.param(self.recurrent_zr);
        let u_n = tape.param(self.recurrent_n);
        let projected = tape.matmul(seq, w)?;
        let projected = tape.add_row(projected, b)?;
        let mut h = init;
        let mut states = Vec::with_capacity(n);
        for t in 0..n {
            let xt = tape.slice_rows(projected, t, t + 1);
            let x_zr = tape.slice_cols(xt, 0, 2 * hd);
            let x_n = tape.slice_cols(xt, 2 * hd, 3 * hd);
            let h_zr = tape.matmul(h, u_zr)?;
            let zr = tape.add(x_zr, h_zr)?;
            let zr = tape.sigmoid(zr);
            let z = tape.slice_cols(zr, 0, hd);
            let r = tape.slice_cols(zr, hd, 2 * hd);
            let rh = tape.mul(r, h)?;
            let rh = tape.matmul(rh, u_n)?;
            let cand = tape.add(x_n, rh)?;
            let cand = tape.tanh(cand);
            // (1 - z) * cand + z * h == cand + z * (h - cand)
            let diff = tape.sub(h, cand)?;
            let gated = tape.mul(z, diff)?;
            h = tape.add(cand, gated)?;
            states.push(h);
        }
        Ok((h, states))
    }
}

/// Same-length 1-D convolution over the sequence axis with zero padding,
/// followed by a pointwise activation.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        kernel: usize,
        activation: Activation,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv kernel must be odd, got {kernel}"
            )));
        }
        Ok(Self {
            weight: store.add(
                format!("{name}.weight"),
                init.fan_in(kernel * in_dim, out_dim),
            ),
            bias: store.add(format!("{name}.bias"), Mat::zeros((1, out_dim))),
            kernel,
            in_dim,
            out_dim,
            activation,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let cols = tape.unfold(x, self.kernel)?;
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(cols, w)?;
        let y = tape.add_row(y, b)?;
        Ok(self.activation.apply(tape, y))
    }
}

/// Layer norm with learned per-feature gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Mat::ones((1, dim))),
            beta: store.add(format!("{name}.beta"), Mat::zeros((1, dim))),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x, NORM_EPS);
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        let y = tape.mul_row(n, g)?;
        tape.add_row(y, b)
    }
}

/// Style-adaptive layer norm: gain and shift are affine maps of a style
/// vector, `y = g(w) ⊙ norm(h) + b(w)`.
#[derive(Clone, Debug)]
pub struct Saln {
    pub gain: Linear,
    pub shift: Linear,
    pub dim: usize,
    pub style_dim: usize,
}

impl Saln {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        style_dim: usize,
        dim: usize,
    ) -> Self {
        let gain = Linear::new(store, init, &format!("{name}.gain"), style_dim, dim, true);
        let shift = Linear::new(store, init, &format!("{name}.shift"), style_dim, dim, true);
        // gain starts around 1 so an untrained SALN behaves like layer norm
        store.get_mut(gain.bias.expect("gain has bias")).fill(1.0);
        let scale = 0.1 / (style_dim.max(1) as f64).sqrt();
        *store.get_mut(gain.weight) = init.normal(style_dim, dim, scale);
        *store.get_mut(shift.weight) = init.normal(style_dim, dim, scale);
        Self {
            gain,
            shift,
            dim,
            style_dim,
        }
    }

    /// `(g(w), b(w))`, each `1×dim`.
    pub fn modulation(&self, tape: &mut Tape, style: Var) -> Result<(Var, Var)> {
        if tape.shape(style) != (1, self.style_dim) {
            return Err(Error::Shape(format!(
                "style {:?}, expected (1, {})",
                tape.shape(style),
                self.style_dim
            )));
        }
        let g = self.gain.forward(tape, style)?;
        let b = self.shift.forward(tape, style)?;
        Ok((g, b))
    }

    pub fn forward(&self, tape: &mut Tape, h: Var, style: Var) -> Result<Var> {
        let (g, b) = self.modulation(tape, style)?;
        let n = tape.layer_norm(h, NORM_EPS);
        let y = tape.mul_row(n, g)?;
        tape.add_row(y, b)
    }

    /// Zero the style maps so that `g ≡ 1` and `b ≡ 0` for every style.
    pub fn set_identity(&self, store: &mut ParamStore) {
        store.get_mut(self.gain.weight).fill(0.0);
        store.get_mut(self.gain.bias.expect("gain has bias")).fill(1.0);
        store.get_mut(self.shift.weight).fill(0.0);
        store.get_mut(self.shift.bias.expect("shift has bias")).fill(0.0);
    }
}
