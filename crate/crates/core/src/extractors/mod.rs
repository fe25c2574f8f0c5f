//! Utterance-level embeddings and token/frame-level feature sequences for
//! dialogue turns, from in-process stubs or a precomputed file cache.
//!
//! Real sentence/token/speech encoders are never run here; an offline step
//! can fill the cache directory using the layout in [`cache`].

pub mod cache;
pub mod stub;

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::corpus::{Dialogue, Turn};
use crate::error::{Error, Result};

pub use cache::{read_cache, write_cache, CacheKey, CacheTensor, FeatureKind};
pub use stub::{
    stub_acoustic_sequence, stub_acoustic_utterance, stub_sequence, stub_text_sequence,
    stub_text_utterance,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Acoustic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Stub,
    Cached,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceEmbedding {
    pub vector: Vec<f64>,
    pub modality: Modality,
    pub source: Source,
}

impl UtteranceEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub data: Mat,
    pub modality: Modality,
    pub source: Source,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureDims {
    pub text_utterance: usize,
    pub acoustic_utterance: usize,
    pub text_sequence: usize,
    pub acoustic_sequence: usize,
}

impl Default for FeatureDims {
    fn default() -> Self {
        Self {
            text_utterance: 512,
            acoustic_utterance: 768,
            text_sequence: 768,
            acoustic_sequence: 768,
        }
    }
}

impl FeatureDims {
    pub fn dim(&self, kind: FeatureKind) -> usize {
        match kind {
            FeatureKind::TextUtterance => self.text_utterance,
            FeatureKind::TextSequence => self.text_sequence,
            FeatureKind::AcousticUtterance => self.acoustic_utterance,
            FeatureKind::AcousticSequence => self.acoustic_sequence,
        }
    }

    fn check(&self, key: &CacheKey, t: &CacheTensor) -> Result<()> {
        let d = self.dim(key.kind);
        let ok = match t.dims.as_slice() {
            [n] => key.kind.rank() == 1 && *n == d,
            [rows, cols] => key.kind.rank() == 2 && *rows >= 1 && *cols == d,
            _ => false,
        };
        if !ok {
            return Err(Error::CacheFormat(format!(
                "{key}: dims {:?} do not match expected width {d}",
                t.dims
            )));
        }
        Ok(())
    }
}

pub trait FeatureSource {
    fn fetch(&self, turn: &Turn, kind: FeatureKind) -> Result<CacheTensor>;
}

#[derive(Clone, Debug)]
pub struct StubExtractor {
    pub dims: FeatureDims,
    pub seed: u64,
}

impl FeatureSource for StubExtractor {
    fn fetch(&self, turn: &Turn, kind: FeatureKind) -> Result<CacheTensor> {
        let d = self.dims.dim(kind);
        Ok(match kind {
            FeatureKind::TextUtterance => {
                CacheTensor::from_vector(&stub_text_utterance(&turn.text, d, self.seed)?.vector)
            }
            FeatureKind::AcousticUtterance => CacheTensor::from_vector(
                &stub_acoustic_utterance(&turn.load_mel()?, d, self.seed)?.vector,
            ),
            FeatureKind::TextSequence => {
                CacheTensor::from_mat(&stub_sequence(turn, Modality::Text, d, self.seed)?.data)
            }
            FeatureKind::AcousticSequence => {
                CacheTensor::from_mat(&stub_sequence(turn, Modality::Acoustic, d, self.seed)?.data)
            }
        })
    }
}

/// Reads precomputed features from `<root>/<dialogue_id>/<turn>.<kind>.m2ct`.
#[derive(Clone, Debug)]
pub struct CachedExtractor {
    pub root: PathBuf,
    pub dims: FeatureDims,
}

impl FeatureSource for CachedExtractor {
    fn fetch(&self, turn: &Turn, kind: FeatureKind) -> Result<CacheTensor> {
        let key = CacheKey::new(&turn.dialogue_id, turn.turn_index, kind);
        let t = read_cache(&self.root, &key)?;
        self.dims.check(&key, &t)?;
        Ok(t)
    }
}

pub fn cache_keys(dialogues: &[Dialogue]) -> Vec<CacheKey> {
    dialogues
        .iter()
        .flat_map(|d| d.turns.iter())
        .flat_map(|t| {
            FeatureKind::ALL
                .iter()
                .map(move |&k| CacheKey::new(&t.dialogue_id, t.turn_index, k))
        })
        .collect()
}

/// Computes every stub feature and writes it under `root`. Existing files
/// with identical contents are left alone.
pub fn fill_cache(dialogues: &[Dialogue], stub: &StubExtractor, root: &Path) -> Result<usize> {
    let mut written = 0;
    for d in dialogues {
        for turn in &d.turns {
            for kind in FeatureKind::ALL {
                let key = CacheKey::new(&turn.dialogue_id, turn.turn_index, kind);
                write_cache(root, &key, &stub.fetch(turn, kind)?)?;
                written += 1;
            }
        }
    }
    Ok(written)
}

/// Keys whose file is absent or unreadable under `root`.
pub fn missing_keys(dialogues: &[Dialogue], root: &Path, dims: &FeatureDims) -> Vec<CacheKey> {
    let src = CachedExtractor {
        root: root.to_path_buf(),
        dims: *dims,
    };
    let mut missing = Vec::new();
    for d in dialogues {
        for turn in &d.turns {
            for kind in FeatureKind::ALL {
                if src.fetch(turn, kind).is_err() {
                    missing.push(CacheKey::new(&turn.dialogue_id, turn.turn_index, kind));
                }
            }
        }
    }
    missing
}

/// All four features of one turn, widened to `f64`.
#[derive(Clone, Debug)]
pub struct TurnFeatures {
    pub text_utterance: Vec<f64>,
    pub acoustic_utterance: Vec<f64>,
    pub text_sequence: Mat,
    pub acoustic_sequence: Mat,
}

/// In-memory features for a set of dialogues, keyed by (dialogue, turn).
#[derive(Clone, Debug, Default)]
pub struct FeatureBank {
    turns: HashMap<(String, usize), TurnFeatures>,
}

impl FeatureBank {
    pub fn load(dialogues: &[Dialogue], source: &dyn FeatureSource) -> Result<Self> {
        let mut turns = HashMap::new();
        for d in dialogues {
            for turn in &d.turns {
                turns.insert(
                    (turn.dialogue_id.clone(), turn.turn_index),
                    Self::turn_features(turn, source)?,
                );
            }
        }
        Ok(Self { turns })
    }

    pub fn turn_features(turn: &Turn, source: &dyn FeatureSource) -> Result<TurnFeatures> {
        let vec = |t: CacheTensor| t.data.iter().map(|&x| x as f64).collect::<Vec<_>>();
        Ok(TurnFeatures {
            text_utterance: vec(source.fetch(turn, FeatureKind::TextUtterance)?),
            acoustic_utterance: vec(source.fetch(turn, FeatureKind::AcousticUtterance)?),
            text_sequence: source.fetch(turn, FeatureKind::TextSequence)?.to_mat()?,
            acoustic_sequence: source.fetch(turn, FeatureKind::AcousticSequence)?.to_mat()?,
        })
    }

    pub fn insert(&mut self, dialogue_id: &str, turn_index: usize, f: TurnFeatures) {
        self.turns.insert((dialogue_id.to_string(), turn_index), f);
    }

    pub fn get(&self, turn: &Turn) -> Result<&TurnFeatures> {
        self.turns
            .get(&(turn.dialogue_id.clone(), turn.turn_index))
            .ok_or_else(|| {
                Error::MissingCache(vec![format!("{}/{}", turn.dialogue_id, turn.turn_index)])
            })
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_toy_corpus, load_manifest};

    #[test]
    fn cache_matches_stub_and_detects_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = gen_toy_corpus(7, 2, 3, &dir.path().join("corpus")).unwrap();
        let ds = load_manifest(&m).unwrap();
        let dims = FeatureDims {
            text_utterance: 8,
            acoustic_utterance: 12,
            text_sequence: 6,
            acoustic_sequence: 10,
        };
        let stub = StubExtractor { dims, seed: 3 };
        let root = dir.path().join("cache");
        assert_eq!(fill_cache(&ds, &stub, &root).unwrap(), 2 * 3 * 4);
        assert!(missing_keys(&ds, &root, &dims).is_empty());

        let cached = CachedExtractor { root: root.clone(), dims };
        let turn = &ds[1].turns[2];
        for kind in FeatureKind::ALL {
            assert_eq!(cached.fetch(turn, kind).unwrap(), stub.fetch(turn, kind).unwrap());
        }
        let seq = cached.fetch(turn, FeatureKind::AcousticSequence).unwrap();
        assert_eq!(seq.dims, vec![turn.num_frames().div_ceil(2), 10]);

        let victim = CacheKey::new("toy_0001", 2, FeatureKind::TextSequence);
        std::fs::remove_file(root.join(victim.relative_path())).unwrap();
        assert_eq!(missing_keys(&ds, &root, &dims), vec![victim]);

        let wrong = FeatureDims { text_utterance: 9, ..dims };
        assert_eq!(missing_keys(&ds, &root, &wrong).len(), 6 + 1);
    }
}
