//! Deterministic stand-ins for the pretrained sentence, token and speech
//! encoders. Each output is a pure function of its inputs and the seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::autodiff::Mat;
use crate::corpus::{Turn, MEL_CHANNELS};
use crate::error::{Error, Result};

use super::{FeatureSequence, Modality, Source, UtteranceEmbedding};

fn rng_for(tag: &str, seed: u64, dim: usize, payload: &[u8]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(tag.as_bytes());
    h.update(seed.to_le_bytes());
    h.update((dim as u64).to_le_bytes());
    h.update(payload);
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

fn check_dim(dim: usize) -> Result<()> {
    if dim == 0 {
        return Err(Error::InvalidArgument("embedding dim must be ≥ 1".into()));
    }
    Ok(())
}

fn check_mel(mel: &Mat) -> Result<()> {
    if mel.nrows() == 0 {
        return Err(Error::InvalidArgument("mel has no frames".into()));
    }
    if mel.ncols() != MEL_CHANNELS {
        return Err(Error::Shape(format!(
            "mel has {} channels, expected {MEL_CHANNELS}",
            mel.ncols()
        )));
    }
    if mel.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("mel".into()));
    }
    Ok(())
}

/// Fixed `in_dim × dim` projection plus bias, drawn from the seed.
fn projection(tag: &str, seed: u64, in_dim: usize, dim: usize) -> (Mat, Vec<f64>) {
    let mut rng = rng_for(tag, seed, dim, &(in_dim as u64).to_le_bytes());
    let scale = 1.0 / (in_dim as f64).sqrt();
    let w = Mat::from_shape_fn((in_dim, dim), |_| {
        let x: f64 = StandardNormal.sample(&mut rng);
        x * scale
    });
    let b = normal_vec(&mut rng, dim);
    (w, b)
}

/// Unit-norm pseudo-sentence embedding keyed by a hash of the text.
pub fn stub_text_utterance(text: &str, dim: usize, seed: u64) -> Result<UtteranceEmbedding> {
    check_dim(dim)?;
    let mut rng = rng_for("text-utterance", seed, dim, text.as_bytes());
    let mut v = normal_vec(&mut rng, dim);
    normalize(&mut v);
    Ok(UtteranceEmbedding {
        vector: v,
        modality: Modality::Text,
        source: Source::Stub,
    })
}

/// Per-channel mean and std of the mel (160 values), projected to `dim`
/// and normalized to unit length. Frame order does not matter.
pub fn stub_acoustic_utterance(mel: &Mat, dim: usize, seed: u64) -> Result<UtteranceEmbedding> {
    check_dim(dim)?;
    check_mel(mel)?;
    let t = mel.nrows() as f64;
    let mut stats = vec![0.0; 2 * MEL_CHANNELS];
    for ch in 0..MEL_CHANNELS {
        let col = mel.column(ch);
        let mean = col.sum() / t;
        let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / t;
        stats[ch] = mean;
        stats[MEL_CHANNELS + ch] = var.sqrt();
    }
    let (w, b) = projection("acoustic-utterance", seed, 2 * MEL_CHANNELS, dim);
    let mut v: Vec<f64> = (0..dim)
        .map(|j| b[j] + stats.iter().enumerate().map(|(i, s)| s * w[[i, j]]).sum::<f64>())
        .collect();
    normalize(&mut v);
    Ok(UtteranceEmbedding {
        vector: v,
        modality: Modality::Acoustic,
        source: Source::Stub,
    })
}

/// One row per phoneme; row `l` is the text stub of `(text, l)` scaled to
/// norm `√dim` so entries have roughly unit variance.
pub fn stub_text_sequence(text: &str, len: usize, dim: usize, seed: u64) -> Result<FeatureSequence> {
    check_dim(dim)?;
    if len == 0 {
        return Err(Error::InvalidArgument("sequence length must be ≥ 1".into()));
    }
    let scale = (dim as f64).sqrt();
    let mut data = Mat::zeros((len, dim));
    for l in 0..len {
        let mut rng = rng_for("text-sequence", seed, dim, format!("{text}\u{1f}{l}").as_bytes());
        let mut v = normal_vec(&mut rng, dim);
        normalize(&mut v);
        for (o, x) in data.row_mut(l).iter_mut().zip(v) {
            *o = x * scale;
        }
    }
    Ok(FeatureSequence {
        data,
        modality: Modality::Text,
        source: Source::Stub,
    })
}

/// `ceil(T/2)` rows; row `l` projects frames `2l` and `2l+1` (zero when past
/// the end) and is scaled to norm `√dim`.
pub fn stub_acoustic_sequence(mel: &Mat, dim: usize, seed: u64) -> Result<FeatureSequence> {
    check_dim(dim)?;
    check_mel(mel)?;
    let frames = mel.nrows();
    let len = frames.div_ceil(2);
    let (w, b) = projection("acoustic-sequence", seed, 2 * MEL_CHANNELS, dim);
    let scale = (dim as f64).sqrt();
    let mut data = Mat::zeros((len, dim));
    for l in 0..len {
        let mut pair = vec![0.0; 2 * MEL_CHANNELS];
        for k in 0..2 {
            let f = 2 * l + k;
            if f < frames {
                for ch in 0..MEL_CHANNELS {
                    pair[k * MEL_CHANNELS + ch] = mel[[f, ch]];
                }
            }
        }
        let mut v: Vec<f64> = (0..dim)
            .map(|j| 0.1 * b[j] + pair.iter().enumerate().map(|(i, s)| s * w[[i, j]]).sum::<f64>())
            .collect();
        normalize(&mut v);
        for (o, x) in data.row_mut(l).iter_mut().zip(v) {
            *o = x * scale;
        }
    }
    Ok(FeatureSequence {
        data,
        modality: Modality::Acoustic,
        source: Source::Stub,
    })
}

/// Token-level (text) or frame-level (acoustic) features for one turn.
pub fn stub_sequence(turn: &Turn, modality: Modality, dim: usize, seed: u64) -> Result<FeatureSequence> {
    match modality {
        Modality::Text => stub_text_sequence(&turn.text, turn.num_phonemes(), dim, seed),
        Modality::Acoustic => stub_acoustic_sequence(&turn.load_mel()?, dim, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn text_stub_is_deterministic_unit_and_text_sensitive() {
        let a = stub_text_utterance("hello", 16, 0).unwrap();
        let b = stub_text_utterance("hello", 16, 0).unwrap();
        let c = stub_text_utterance("world", 16, 0).unwrap();
        assert_eq!(a, b);
        assert_abs_diff_eq!(norm(&a.vector), 1.0, epsilon = 1e-5);
        assert!(cosine(&a.vector, &c.vector) < 0.9);
        assert_abs_diff_eq!(norm(&stub_text_utterance("", 3, 9).unwrap().vector), 1.0, epsilon = 1e-5);
        assert!(stub_text_utterance("x", 0, 0).is_err());
    }

    #[test]
    fn acoustic_stub_degenerate_and_permutation_cases() {
        let zeros = Mat::zeros((10, MEL_CHANNELS));
        let e = stub_acoustic_utterance(&zeros, 32, 1).unwrap();
        assert_abs_diff_eq!(norm(&e.vector), 1.0, epsilon = 1e-5);

        let mel = Mat::from_shape_fn((6, MEL_CHANNELS), |(f, c)| ((f * 7 + c * 3) % 11) as f64 * 0.25);
        let mut perm = mel.clone();
        for (dst, src) in [5usize, 0, 3, 1, 4, 2].iter().enumerate() {
            perm.row_mut(dst).assign(&mel.row(*src));
        }
        let a = stub_acoustic_utterance(&mel, 32, 1).unwrap();
        let b = stub_acoustic_utterance(&perm, 32, 1).unwrap();
        for (x, y) in a.vector.iter().zip(&b.vector) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
        }
        let mut bad = mel.clone();
        bad[[0, 0]] = f64::NAN;
        assert!(stub_acoustic_utterance(&bad, 32, 1).is_err());
    }

    #[test]
    fn sequence_shapes() {
        let t = stub_text_sequence("a b c", 7, 12, 0).unwrap();
        assert_eq!(t.data.dim(), (7, 12));
        let mel = Mat::from_elem((50, MEL_CHANNELS), 0.3);
        assert_eq!(stub_acoustic_sequence(&mel, 12, 0).unwrap().data.dim(), (25, 12));
        let odd = Mat::from_elem((51, MEL_CHANNELS), 0.3);
        assert_eq!(stub_acoustic_sequence(&odd, 12, 0).unwrap().data.dim(), (26, 12));
        assert_eq!(
            stub_acoustic_sequence(&mel, 12, 4).unwrap(),
            stub_acoustic_sequence(&mel, 12, 4).unwrap()
        );
    }
}
