//! Run configuration: model shape, training schedule, data options and the
//! ablation row, read from JSON with `--section.key value` overrides.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::extractors::FeatureDims;
use crate::fusion::Activation;

pub const SEED_ENV: &str = "M2CTTS_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_filter: usize,
    pub ffn_kernels: [usize; 2],
    pub variance_filter: usize,
    pub variance_kernel: usize,
    pub n_bins: usize,
    pub pitch_range: [f64; 2],
    pub energy_range: [f64; 2],
    pub style_dim: usize,
    pub context_kernel: usize,
    pub context_activation: Activation,
    pub wpm_speaker_id: bool,
    pub features: FeatureDims,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 256,
            heads: 2,
            encoder_layers: 4,
            decoder_layers: 4,
            ffn_filter: 1024,
            ffn_kernels: [9, 1],
            variance_filter: 256,
            variance_kernel: 3,
            n_bins: 256,
            pitch_range: [-2.0, 2.0],
            energy_range: [0.0, 1.5],
            style_dim: 256,
            context_kernel: 3,
            context_activation: Activation::Relu,
            wpm_speaker_id: true,
            features: FeatureDims::default(),
        }
    }
}

impl ModelConfig {
    /// Small widths for laptop-scale runs; extractor dims stay at defaults.
    pub fn desk() -> Self {
        Self {
            d_model: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            ffn_filter: 128,
            variance_filter: 64,
            style_dim: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return err(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if self.d_model % 2 != 0 {
            return err("d_model must be even for sinusoidal positions".into());
        }
        if self.features.text_sequence % 2 != 0 || self.features.acoustic_sequence % 2 != 0 {
            return err("sequence feature widths must be even".into());
        }
        for k in self
            .ffn_kernels
            .iter()
            .chain([&self.variance_kernel, &self.context_kernel])
        {
            if k % 2 == 0 {
                return err(format!("kernel sizes must be odd, got {k}"));
            }
        }
        if self.n_bins < 2 {
            return err("n_bins must be ≥ 2".into());
        }
        if self.pitch_range[0] >= self.pitch_range[1] || self.energy_range[0] >= self.energy_range[1] {
            return err("pitch/energy ranges must be increasing".into());
        }
        if self.vocab_size == 0 || self.style_dim == 0 {
            return err("vocab_size and style_dim must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: Option<f64>,
    pub steps: u64,
    pub batch_size: usize,
    pub lambda_prosody: f64,
    pub prosody_reduction: Reduction,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            warmup_steps: 50,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-9,
            grad_clip: Some(1.0),
            steps: 500,
            batch_size: 4,
            lambda_prosody: 1.0,
            prosody_reduction: Reduction::Mean,
            checkpoint_every: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorMode {
    #[default]
    Stub,
    Cache,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Memory capacity: number of history turns per window.
    pub c: usize,
    pub pad_id: usize,
    pub extractor: ExtractorMode,
    pub extractor_seed: u64,
    pub val_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            c: crate::corpus::DEFAULT_MEMORY_CAPACITY,
            pad_id: 0,
            extractor: ExtractorMode::Stub,
            extractor_seed: 0,
            val_fraction: 0.125,
        }
    }
}

/// Which context modules are active. Named rows M1–M7 follow the
/// comparison table: M1 none, M2 TUM, M3 WUM, M4 TUM+TPM, M5 WUM+WPM,
/// M6 TUM+WUM, M7 all four.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AblationConfig {
    pub name: String,
    pub tum: bool,
    pub wum: bool,
    pub tpm: bool,
    pub wpm: bool,
}

pub const ABLATION_NAMES: [&str; 7] = ["M1", "M2", "M3", "M4", "M5", "M6", "M7"];

impl AblationConfig {
    pub fn named(name: &str) -> Result<Self> {
        let (tum, wum, tpm, wpm) = match name {
            "M1" => (false, false, false, false),
            "M2" => (true, false, false, false),
            "M3" => (false, true, false, false),
            "M4" => (true, false, true, false),
            "M5" => (false, true, false, true),
            "M6" => (true, true, false, false),
            "M7" => (true, true, true, true),
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation {other:?}, expected one of {}",
                    ABLATION_NAMES.join(", ")
                )))
            }
        };
        Ok(Self {
            name: name.to_string(),
            tum,
            wum,
            tpm,
            wpm,
        })
    }

    pub fn custom(tum: bool, wum: bool, tpm: bool, wpm: bool) -> Self {
        Self {
            name: "custom".into(),
            tum,
            wum,
            tpm,
            wpm,
        }
    }

    pub fn any_coarse(&self) -> bool {
        self.tum || self.wum
    }

    pub fn any_context(&self) -> bool {
        self.tum || self.wum || self.tpm || self.wpm
    }

    pub fn flags(&self) -> [bool; 4] {
        [self.tum, self.wum, self.tpm, self.wpm]
    }
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self::named("M7").expect("M7 is a named row")
    }
}

impl fmt::Display for AblationConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} (tum={}, wum={}, tpm={}, wpm={})",
            self.name, self.tum, self.wum, self.tpm, self.wpm
        )
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum AblationRepr {
    Named(String),
    Custom {
        tum: bool,
        wum: bool,
        tpm: bool,
        wpm: bool,
    },
}

impl Serialize for AblationConfig {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if ABLATION_NAMES.contains(&self.name.as_str()) {
            AblationRepr::Named(self.name.clone()).serialize(s)
        } else {
            AblationRepr::Custom {
                tum: self.tum,
                wum: self.wum,
                tpm: self.tpm,
                wpm: self.wpm,
            }
            .serialize(s)
        }
    }
}

impl<'de> Deserialize<'de> for AblationConfig {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match AblationRepr::deserialize(d)? {
            AblationRepr::Named(n) => AblationConfig::named(&n).map_err(serde::de::Error::custom),
            AblationRepr::Custom { tum, wum, tpm, wpm } => {
                Ok(AblationConfig::custom(tum, wum, tpm, wpm))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Falls back to `M2CTTS_SEED`, then 0.
    pub seed: Option<u64>,
    pub ablation: AblationConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            ablation: AblationConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            ..Self::default()
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `(dotted.key, value)` overrides. Values parse as JSON and fall
    /// back to a plain string. Unknown keys are rejected.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut tree = serde_json::to_value(self).expect("config serializes");
        for (key, raw) in overrides {
            let value: Value =
                serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            let mut node = &mut tree;
            let parts: Vec<&str> = key.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let obj = node
                    .as_object_mut()
                    .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
                if !obj.contains_key(*part) {
                    return Err(Error::Config(format!("unknown config key {key:?}")));
                }
                if i + 1 == parts.len() {
                    obj.insert(part.to_string(), value.clone());
                    break;
                }
                node = obj.get_mut(*part).expect("checked");
            }
        }
        serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))
    }

    /// The seed with the environment fallback applied.
    pub fn resolved_seed(&self) -> u64 {
        self.seed
            .or_else(|| std::env::var(SEED_ENV).ok().and_then(|s| s.parse().ok()))
            .unwrap_or(0)
    }

    pub fn resolved(&self) -> Self {
        Self {
            seed: Some(self.resolved_seed()),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0, 1)".into()));
        }
        if self.data.pad_id >= self.model.vocab_size {
            return Err(Error::Config("pad_id must be inside the vocabulary".into()));
        }
        Ok(())
    }

    /// Hash over everything that determines parameter shapes and the
    /// forward graph. Checkpoints refuse to load under a different hash.
    pub fn model_hash(&self) -> [u8; 32] {
        #[derive(Serialize)]
        struct Shape<'a> {
            model: &'a ModelConfig,
            ablation: &'a AblationConfig,
            c: usize,
        }
        let json = serde_json::to_vec(&Shape {
            model: &self.model,
            ablation: &self.ablation,
            c: self.data.c,
        })
        .expect("config serializes");
        Sha256::digest(&json).into()
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Splits `--a.b value` pairs from raw trailing arguments.
pub fn parse_override_args(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(flag) = it.next() {
        let key = flag
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("expected --key, got {flag:?}")))?;
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_string(), v.to_string()));
            continue;
        }
        let value = it
            .next()
            .ok_or_else(|| Error::Config(format!("missing value for --{key}")))?;
        out.push((key.to_string(), value.clone()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_rows_match_the_table() {
        let rows = [
            ("M1", [false, false, false, false]),
            ("M2", [true, false, false, false]),
            ("M3", [false, true, false, false]),
            ("M4", [true, false, true, false]),
            ("M5", [false, true, false, true]),
            ("M6", [true, true, false, false]),
            ("M7", [true, true, true, true]),
        ];
        for (name, flags) in rows {
            assert_eq!(AblationConfig::named(name).unwrap().flags(), flags, "{name}");
        }
        assert!(AblationConfig::named("M8").is_err());
    }

    #[test]
    fn overrides_apply_and_reject_unknown_keys() {
        let base = RunConfig::default();
        let cfg = base
            .with_overrides(&[
                ("model.d_model".into(), "64".into()),
                ("ablation".into(), "M3".into()),
                ("train.lr".into(), "0.01".into()),
                ("data.extractor".into(), "cache".into()),
            ])
            .unwrap();
        assert_eq!(cfg.model.d_model, 64);
        assert_eq!(cfg.ablation, AblationConfig::named("M3").unwrap());
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.data.extractor, ExtractorMode::Cache);
        assert!(base.with_overrides(&[("model.width".into(), "3".into())]).is_err());
        assert!(base.with_overrides(&[("nope".into(), "3".into())]).is_err());
    }

    #[test]
    fn unknown_file_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"model": {"depth": 3}}"#);
        assert!(err.is_err());
        let custom: RunConfig =
            serde_json::from_str(r#"{"ablation": {"tum": true, "wum": false, "tpm": false, "wpm": true}}"#)
                .unwrap();
        assert_eq!(custom.ablation.name, "custom");
        let round: RunConfig = serde_json::from_str(&custom.to_pretty_json()).unwrap();
        assert_eq!(round, custom);
    }

    #[test]
    fn hash_tracks_model_shape_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.lr = 0.5;
        assert_eq!(a.model_hash(), b.model_hash());
        b.model.d_model = 128;
        assert_ne!(a.model_hash(), b.model_hash());
    }

    #[test]
    fn override_args_parse() {
        let args: Vec<String> = ["--train.steps", "10", "--seed=3"].iter().map(|s| s.to_string()).collect();
        assert_eq!(
            parse_override_args(&args).unwrap(),
            vec![("train.steps".into(), "10".into()), ("seed".into(), "3".into())]
        );
        assert!(parse_override_args(&["x".to_string()]).is_err());
    }
}
