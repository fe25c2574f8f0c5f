//! Conversational corpus: turns, dialogues, history windows, padded batches,
//! and a deterministic toy-corpus generator.
//!
//! The manifest is JSON Lines, one turn per line:
//!
//! ```text
//! {"dialogue_id":"toy_0000","turn_index":0,"speaker":"A","text":"ka mo",
//!  "phoneme_ids":[11,1,13,15],"durations":[5,6,4,7],"pitch":[...],
//!  "energy":[...],"mel_path":"mels/toy_0000/0.mel.m2ct"}
//! ```
//!
//! `mel_path` is relative to the manifest's directory (absolute paths are
//! used as-is) and points at a `T × 80` tensor in the cache file format.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::extractors::cache::{read_dims, read_tensor, write_tensor, CacheTensor};

pub const MEL_CHANNELS: usize = 80;
pub const SAMPLE_RATE_HZ: u32 = 22050;
pub const DEFAULT_MEMORY_CAPACITY: usize = 4;

/// Phoneme ids emitted by the toy generator: 0 is padding, 1..=26 letters.
pub const TOY_VOCAB_SIZE: usize = 28;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Speaker {
    A,
    B,
}

impl Speaker {
    pub fn index(self) -> usize {
        match self {
            Speaker::A => 0,
            Speaker::B => 1,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Speaker::A => Speaker::B,
            Speaker::B => Speaker::A,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MelRef {
    pub path: PathBuf,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Turn {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub speaker: Speaker,
    pub text: String,
    pub phoneme_ids: Vec<usize>,
    pub durations: Vec<usize>,
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
    pub mel: MelRef,
}

impl Turn {
    pub fn num_phonemes(&self) -> usize {
        self.phoneme_ids.len()
    }

    pub fn num_frames(&self) -> usize {
        self.mel.frames
    }

    /// Loads the `T × 80` mel target.
    pub fn load_mel(&self) -> Result<Mat> {
        let t = read_tensor(&self.mel.path)?;
        if t.dims != [self.mel.frames, MEL_CHANNELS] {
            return Err(self.err(format!(
                "mel dims {:?}, expected [{}, {MEL_CHANNELS}]",
                t.dims, self.mel.frames
            )));
        }
        t.to_mat()
    }

    fn err(&self, message: String) -> Error {
        Error::Turn {
            dialogue_id: self.dialogue_id.clone(),
            turn_index: self.turn_index,
            message,
        }
    }

    /// Per-turn invariants, excluding the mel frame count.
    pub fn validate(&self) -> Result<()> {
        let n = self.phoneme_ids.len();
        if n == 0 {
            return Err(self.err("no phonemes".into()));
        }
        if self.durations.len() != n || self.pitch.len() != n || self.energy.len() != n {
            return Err(self.err(format!(
                "per-phoneme lengths differ: phonemes {n}, durations {}, pitch {}, energy {}",
                self.durations.len(),
                self.pitch.len(),
                self.energy.len()
            )));
        }
        if self.durations.iter().any(|&d| d == 0) {
            return Err(self.err("durations must be ≥ 1".into()));
        }
        if self.pitch.iter().chain(&self.energy).any(|x| !x.is_finite()) {
            return Err(self.err("non-finite pitch or energy".into()));
        }
        let total: usize = self.durations.iter().sum();
        if total != self.mel.frames {
            return Err(self.err(format!(
                "durations sum to {total} but mel has {} frames",
                self.mel.frames
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dialogue {
    pub dialogue_id: String,
    pub turns: Vec<Turn>,
}

impl Dialogue {
    pub fn validate(&self) -> Result<()> {
        let err = |message: String| Error::Dialogue {
            dialogue_id: self.dialogue_id.clone(),
            message,
        };
        for (i, turn) in self.turns.iter().enumerate() {
            if turn.turn_index != i {
                return Err(err(format!(
                    "turn indices must be 0,1,2,…; found {} at position {i}",
                    turn.turn_index
                )));
            }
        }
        for pair in self.turns.windows(2) {
            if pair[0].speaker == pair[1].speaker {
                return Err(err(format!(
                    "speakers do not alternate at turns {} and {}",
                    pair[0].turn_index, pair[1].turn_index
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub speaker: Speaker,
    pub text: String,
    pub phoneme_ids: Vec<usize>,
    pub durations: Vec<usize>,
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
    pub mel_path: String,
}

/// Parses and validates a manifest. Dialogues come back sorted by id, turns
/// by index, so line order in the file does not matter.
pub fn load_manifest(path: &Path) -> Result<Vec<Dialogue>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut grouped: BTreeMap<String, Vec<Turn>> = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            line: line_no,
            message: e.to_string(),
        })?;
        let mel_path = {
            let p = PathBuf::from(&rec.mel_path);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let dims = read_dims(&mel_path).map_err(|e| Error::Manifest {
            line: line_no,
            message: format!("mel for {}/{}: {e}", rec.dialogue_id, rec.turn_index),
        })?;
        if dims.len() != 2 || dims[1] != MEL_CHANNELS {
            return Err(Error::Manifest {
                line: line_no,
                message: format!("mel dims {dims:?}, expected [T, {MEL_CHANNELS}]"),
            });
        }
        let turn = Turn {
            dialogue_id: rec.dialogue_id,
            turn_index: rec.turn_index,
            speaker: rec.speaker,
            text: rec.text,
            phoneme_ids: rec.phoneme_ids,
            durations: rec.durations,
            pitch: rec.pitch,
            energy: rec.energy,
            mel: MelRef {
                path: mel_path,
                frames: dims[0],
            },
        };
        turn.validate()?;
        grouped.entry(turn.dialogue_id.clone()).or_default().push(turn);
    }
    grouped
        .into_iter()
        .map(|(dialogue_id, mut turns)| {
            turns.sort_by_key(|t| t.turn_index);
            let d = Dialogue { dialogue_id, turns };
            d.validate()?;
            Ok(d)
        })
        .collect()
}

/// History turns followed by the current turn, all from one dialogue.
#[derive(Clone, Copy, Debug)]
pub struct ConversationWindow<'a> {
    pub history: &'a [Turn],
    pub current: &'a Turn,
}

impl ConversationWindow<'_> {
    pub fn history_indices(&self) -> Vec<usize> {
        self.history.iter().map(|t| t.turn_index).collect()
    }
}

/// History is turns `max(0, t−c) .. t`; windows never cross dialogues.
pub fn window(dialogue: &Dialogue, t: usize, c: usize) -> Result<ConversationWindow<'_>> {
    if t >= dialogue.turns.len() {
        return Err(Error::TurnOutOfRange {
            t,
            len: dialogue.turns.len(),
        });
    }
    let start = t.saturating_sub(c);
    Ok(ConversationWindow {
        history: &dialogue.turns[start..t],
        current: &dialogue.turns[t],
    })
}

/// Right-padded batch of windows.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub windows: Vec<ConversationWindow<'a>>,
    pub memory_capacity: usize,
    /// `B × N_max`, padding filled with the pad id.
    pub phonemes: Array2<usize>,
    pub phoneme_mask: Array2<bool>,
    /// `B × N_max`, zero at padding.
    pub durations: Array2<usize>,
    pub pitch: Array2<f64>,
    pub energy: Array2<f64>,
    /// `B × T_max × 80`, zero at padding.
    pub mel: Array3<f64>,
    pub frame_mask: Array2<bool>,
    pub history_lengths: Vec<usize>,
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn max_phonemes(&self) -> usize {
        self.phonemes.ncols()
    }

    pub fn max_frames(&self) -> usize {
        self.frame_mask.ncols()
    }

    pub fn num_phonemes(&self, item: usize) -> usize {
        self.windows[item].current.num_phonemes()
    }

    pub fn num_frames(&self, item: usize) -> usize {
        self.windows[item].current.num_frames()
    }
}

pub fn make_batch<'a>(
    windows: &[ConversationWindow<'a>],
    pad_phoneme_id: usize,
    c: usize,
) -> Result<Batch<'a>> {
    if windows.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if let Some(w) = windows.iter().find(|w| w.history.len() > c) {
        return Err(Error::InvalidArgument(format!(
            "window for {}/{} has {} history turns, more than c = {c}",
            w.current.dialogue_id,
            w.current.turn_index,
            w.history.len()
        )));
    }
    let b = windows.len();
    let n_max = windows.iter().map(|w| w.current.num_phonemes()).max().unwrap_or(0);
    let t_max = windows.iter().map(|w| w.current.num_frames()).max().unwrap_or(0);
    let mut phonemes = Array2::from_elem((b, n_max), pad_phoneme_id);
    let mut phoneme_mask = Array2::from_elem((b, n_max), false);
    let mut durations = Array2::zeros((b, n_max));
    let mut pitch = Array2::zeros((b, n_max));
    let mut energy = Array2::zeros((b, n_max));
    let mut mel = Array3::zeros((b, t_max, MEL_CHANNELS));
    let mut frame_mask = Array2::from_elem((b, t_max), false);
    for (i, w) in windows.iter().enumerate() {
        let cur = w.current;
        for p in 0..cur.num_phonemes() {
            phonemes[[i, p]] = cur.phoneme_ids[p];
            phoneme_mask[[i, p]] = true;
            durations[[i, p]] = cur.durations[p];
            pitch[[i, p]] = cur.pitch[p];
            energy[[i, p]] = cur.energy[p];
        }
        let m = cur.load_mel()?;
        for f in 0..m.nrows() {
            frame_mask[[i, f]] = true;
            for ch in 0..MEL_CHANNELS {
                mel[[i, f, ch]] = m[[f, ch]];
            }
        }
    }
    Ok(Batch {
        windows: windows.to_vec(),
        memory_capacity: c,
        phonemes,
        phoneme_mask,
        durations,
        pitch,
        energy,
        mel,
        frame_mask,
        history_lengths: windows.iter().map(|w| w.history.len()).collect(),
    })
}

/// Every turn of every dialogue as a window, in dialogue then turn order.
pub fn all_windows(dialogues: &[Dialogue], c: usize) -> Vec<ConversationWindow<'_>> {
    dialogues
        .iter()
        .flat_map(|d| (0..d.turns.len()).map(move |t| window(d, t, c).expect("t in range")))
        .collect()
}

const TOY_MIN_PHONEMES: usize = 4;
const TOY_MAX_PHONEMES: usize = 16;
const TOY_MIN_FRAMES: usize = 20;
const TOY_MAX_FRAMES: usize = 80;

/// Synthetic mel value for one frame of a phoneme; smooth in the channel
/// axis and shifted by pitch and energy so the targets are learnable.
fn toy_mel_frame(phoneme: usize, pitch: f64, energy: f64, progress: f64, ch: usize) -> f64 {
    let c = ch as f64 / MEL_CHANNELS as f64;
    let formant = (phoneme as f64 * 0.9 + c * 7.0).sin();
    let harmonic = ((c * 40.0) / (1.2 + 0.3 * pitch)).cos();
    -4.0 + 1.5 * formant + 0.6 * harmonic * energy + 0.4 * (progress - 0.5) * (1.0 - c)
}

/// Writes `manifest.jsonl` plus one mel file per turn under `out_dir`.
pub fn gen_toy_corpus(
    seed: u64,
    n_dialogues: usize,
    turns_per_dialogue: usize,
    out_dir: &Path,
) -> Result<PathBuf> {
    if n_dialogues < 1 {
        return Err(Error::InvalidArgument("need at least one dialogue".into()));
    }
    if turns_per_dialogue < 2 {
        return Err(Error::InvalidArgument("need at least two turns per dialogue".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lines = Vec::new();
    for d in 0..n_dialogues {
        let dialogue_id = format!("toy_{d:04}");
        let mut speaker = if rng.random_bool(0.5) { Speaker::A } else { Speaker::B };
        for t in 0..turns_per_dialogue {
            let n = rng.random_range(TOY_MIN_PHONEMES..=TOY_MAX_PHONEMES);
            let phoneme_ids: Vec<usize> = (0..n).map(|_| rng.random_range(1..=26)).collect();
            let mut text = String::new();
            let mut word_left = rng.random_range(2..=5);
            for (i, &p) in phoneme_ids.iter().enumerate() {
                if word_left == 0 && i + 1 < n {
                    text.push(' ');
                    word_left = rng.random_range(2..=5);
                }
                text.push((b'a' + (p - 1) as u8) as char);
                word_left -= 1;
            }
            let frames = rng.random_range(TOY_MIN_FRAMES.max(n)..=TOY_MAX_FRAMES);
            let mut durations = vec![1usize; n];
            for _ in 0..frames - n {
                durations[rng.random_range(0..n)] += 1;
            }
            let speaker_offset = match speaker {
                Speaker::A => -0.5,
                Speaker::B => 0.5,
            };
            let turn_mood: f64 = rng.random_range(-0.5..0.5);
            let pitch: Vec<f64> = phoneme_ids
                .iter()
                .map(|&p| {
                    let v = speaker_offset + turn_mood + 0.3 * ((p as f64) * 0.37).sin()
                        + rng.random_range(-0.1..0.1);
                    (v * 1e4).round() / 1e4
                })
                .collect();
            let energy: Vec<f64> = phoneme_ids
                .iter()
                .map(|&p| {
                    let v = 0.6 + 0.3 * turn_mood + 0.2 * ((p as f64) * 0.53).cos()
                        + rng.random_range(-0.05..0.05);
                    (v * 1e4).round() / 1e4
                })
                .collect();
            let mut mel = Vec::with_capacity(frames * MEL_CHANNELS);
            for (p, &dur) in durations.iter().enumerate() {
                for f in 0..dur {
                    let progress = (f as f64 + 0.5) / dur as f64;
                    for ch in 0..MEL_CHANNELS {
                        let noise: f64 = rng.random_range(-0.05..0.05);
                        mel.push(
                            (toy_mel_frame(phoneme_ids[p], pitch[p], energy[p], progress, ch) + noise)
                                as f32,
                        );
                    }
                }
            }
            let rel = format!("mels/{dialogue_id}/{t}.mel.m2ct");
            write_tensor(
                &out_dir.join(&rel),
                &CacheTensor::new(vec![frames, MEL_CHANNELS], mel)?,
            )?;
            let rec = ManifestRecord {
                dialogue_id: dialogue_id.clone(),
                turn_index: t,
                speaker,
                text,
                phoneme_ids,
                durations,
                pitch,
                energy,
                mel_path: rel,
            };
            lines.push(serde_json::to_string(&rec).expect("manifest record serializes"));
            speaker = speaker.other();
        }
    }
    let manifest = out_dir.join("manifest.jsonl");
    let mut f = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    for l in &lines {
        writeln!(f, "{l}").map_err(|e| Error::io(&manifest, e))?;
    }
    Ok(manifest)
}
