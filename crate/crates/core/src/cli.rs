//! Command-line surface: `gen-toy`, `preprocess`, `train`, `synthesize`,
//! `verify` and `ablate`. Each command takes an optional JSON config plus
//! trailing `--section.key value` overrides, and writes the effective
//! config into its output directory.
//!
//! Exit codes: 0 success, 1 validation or verification failure, 2 usage
//! error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::{parse_override_args, ExtractorMode, RunConfig};
use crate::corpus::{gen_toy_corpus, load_manifest, window, Dialogue, MEL_CHANNELS};
use crate::error::{Error, Result};
use crate::extractors::cache::{write_tensor, CacheTensor};
use crate::extractors::{
    fill_cache, missing_keys, CachedExtractor, FeatureBank, FeatureSource, StubExtractor,
    TurnFeatures,
};
use crate::fusion::AttentionWeights;
use crate::model::Synthesis;
use crate::training::{run_ablation, split_dialogues, Checkpoint, Trainer};
use crate::verify;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Parser)]
#[command(name = "m2ctts", version, about = "Conversational TTS with multi-scale dialogue context")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a deterministic synthetic corpus.
    GenToy(GenToyArgs),
    /// Validate a corpus, fill or check the feature cache, write statistics.
    Preprocess(PreprocessArgs),
    /// Train a model and write checkpoints and the loss curve.
    Train(TrainArgs),
    /// Synthesize the mel of one dialogue turn from a checkpoint.
    Synthesize(SynthesizeArgs),
    /// Run property suites.
    Verify(VerifyArgs),
    /// Train several ablation rows and write a metrics table.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
pub enum Preset {
    /// Small widths for CPU runs.
    #[default]
    Desk,
    /// Full-size defaults.
    Full,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON run config; missing fields take the preset's values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base values used when no config file is given.
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    /// `--section.key value` overrides, split off before parsing.
    #[arg(skip)]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => match self.preset {
                Preset::Desk => RunConfig::desk(),
                Preset::Full => RunConfig::default(),
            },
        };
        let cfg = base.with_overrides(&parse_override_args(&self.overrides)?)?;
        let cfg = cfg.resolved();
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct GenToyArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub dialogues: usize,
    #[arg(long, default_value_t = 4)]
    pub turns: usize,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Corpus directory holding `manifest.jsonl`, or the manifest itself.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Feature cache directory; defaults to `<out>/cache`.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Feature cache directory, required in cache mode.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Continue from a checkpoint written under the same config.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub dialogue: String,
    #[arg(long)]
    pub turn: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Feature cache directory, required when the checkpoint used cache mode.
    #[arg(long)]
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// One of the suite names, or `all`.
    #[arg(default_value = "all")]
    pub suite: String,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated rows, e.g. `M1,M7`.
    #[arg(long, value_delimiter = ',', default_value = "M1,M2,M3,M4,M5,M6,M7")]
    pub names: Vec<String>,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

/// Separates config overrides from the declared flags of the chosen
/// subcommand. Any `--name` that is not a declared long flag is taken as an
/// override together with its value (inline after `=` or the next token).
pub fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<String>) {
    let root = Cli::command();
    let Some(pos) = args.iter().skip(1).position(|a| !a.starts_with('-')).map(|p| p + 1) else {
        return (args, Vec::new());
    };
    let Some(sub) = root.find_subcommand(&args[pos]) else {
        return (args, Vec::new());
    };
    let known: Vec<String> = sub
        .get_arguments()
        .filter_map(|a| a.get_long().map(str::to_string))
        .chain(["help".to_string()])
        .collect();
    let (mut kept, mut overrides) = (args[..=pos].to_vec(), Vec::new());
    let mut rest = args[pos + 1..].iter();
    while let Some(a) = rest.next() {
        let name = a.strip_prefix("--").map(|n| n.split('=').next().unwrap_or(n));
        match name {
            Some(n) if !n.is_empty() && !known.iter().any(|k| k == n) => {
                overrides.push(a.clone());
                if !a.contains('=') {
                    overrides.extend(rest.next().cloned());
                }
            }
            _ => kept.push(a.clone()),
        }
    }
    (kept, overrides)
}

/// Parses the arguments with overrides split off first.
pub fn parse(args: Vec<String>) -> std::result::Result<Cli, clap::Error> {
    let (kept, overrides) = split_overrides(args);
    let mut cli = Cli::try_parse_from(kept)?;
    match &mut cli.command {
        Command::Preprocess(a) => a.config.overrides = overrides,
        Command::Train(a) => a.config.overrides = overrides,
        Command::Ablate(a) => a.config.overrides = overrides,
        Command::GenToy(_) | Command::Synthesize(_) | Command::Verify(_) => {
            if let Some(first) = overrides.first() {
                return Err(Cli::command().error(
                    clap::error::ErrorKind::UnknownArgument,
                    format!("unexpected argument '{first}'; this command takes no config overrides"),
                ));
            }
        }
    }
    Ok(cli)
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString>,
{
    let args: Vec<String> = args
        .into_iter()
        .map(|a| a.into().to_string_lossy().into_owned())
        .collect();
    let cli = match parse(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

pub fn run(command: Command) -> Result<i32> {
    match command {
        Command::GenToy(a) => {
            let manifest = gen_toy_corpus(a.seed, a.dialogues, a.turns, &a.out)?;
            println!("{}", manifest.display());
            Ok(EXIT_OK)
        }
        Command::Preprocess(a) => cmd_preprocess(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Synthesize(a) => cmd_synthesize(&a),
        Command::Verify(a) => cmd_verify(&a.suite),
        Command::Ablate(a) => cmd_ablate(&a),
    }
}

pub fn manifest_path(corpus: &Path) -> PathBuf {
    if corpus.is_dir() {
        corpus.join("manifest.jsonl")
    } else {
        corpus.to_path_buf()
    }
}

/// Writes `bytes` unless the file already holds exactly them.
fn write_if_changed(path: &Path, bytes: &[u8]) -> Result<()> {
    if fs::read(path).ok().as_deref() == Some(bytes) {
        return Ok(());
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_if_changed(&dir.join(CONFIG_FILE), format!("{}\n", cfg.to_pretty_json()).as_bytes())
}

/// Min and max of per-phoneme pitch and energy over a corpus.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusStats {
    pub dialogues: usize,
    pub turns: usize,
    pub phonemes: usize,
    pub frames: usize,
    pub pitch_range: [f64; 2],
    pub energy_range: [f64; 2],
}

pub fn corpus_stats(dialogues: &[Dialogue]) -> CorpusStats {
    let mut s = CorpusStats {
        dialogues: dialogues.len(),
        turns: 0,
        phonemes: 0,
        frames: 0,
        pitch_range: [f64::INFINITY, f64::NEG_INFINITY],
        energy_range: [f64::INFINITY, f64::NEG_INFINITY],
    };
    for t in dialogues.iter().flat_map(|d| &d.turns) {
        s.turns += 1;
        s.phonemes += t.num_phonemes();
        s.frames += t.num_frames();
        for &p in &t.pitch {
            s.pitch_range = [s.pitch_range[0].min(p), s.pitch_range[1].max(p)];
        }
        for &e in &t.energy {
            s.energy_range = [s.energy_range[0].min(e), s.energy_range[1].max(e)];
        }
    }
    for r in [&mut s.pitch_range, &mut s.energy_range] {
        if r[0] >= r[1] {
            // a flat or empty range still needs increasing bin boundaries
            let mid = if r[0].is_finite() { r[0] } else { 0.0 };
            *r = [mid - 0.5, mid + 0.5];
        }
    }
    s
}

fn cmd_preprocess(a: &PreprocessArgs) -> Result<i32> {
    let mut cfg = a.config.load()?;
    let dialogues = load_manifest(&manifest_path(&a.corpus))?;
    let stats = corpus_stats(&dialogues);
    cfg.model.pitch_range = stats.pitch_range;
    cfg.model.energy_range = stats.energy_range;
    cfg.validate()?;
    let cache = a.cache.clone().unwrap_or_else(|| a.out.join("cache"));
    match cfg.data.extractor {
        ExtractorMode::Stub => {
            let stub = StubExtractor {
                dims: cfg.model.features,
                seed: cfg.data.extractor_seed,
            };
            let n = fill_cache(&dialogues, &stub, &cache)?;
            println!("cache: {n} entries under {}", cache.display());
        }
        ExtractorMode::Cache => {
            let missing = missing_keys(&dialogues, &cache, &cfg.model.features);
            if !missing.is_empty() {
                for k in &missing {
                    eprintln!("missing: {}", k.relative_path().display());
                }
                return Err(Error::MissingCache(
                    missing.iter().map(|k| k.to_string()).collect(),
                ));
            }
            println!("cache: complete under {}", cache.display());
        }
    }
    let json = serde_json::to_string_pretty(&stats).expect("stats serialize");
    write_if_changed(&a.out.join("stats.json"), format!("{json}\n").as_bytes())?;
    write_config(&a.out, &cfg)?;
    println!(
        "{} dialogues, {} turns; pitch {:?}, energy {:?}",
        stats.dialogues, stats.turns, stats.pitch_range, stats.energy_range
    );
    Ok(EXIT_OK)
}

/// Feature source chosen by the config's extractor mode.
pub fn feature_source(cfg: &RunConfig, cache: Option<&Path>) -> Result<Box<dyn FeatureSource>> {
    Ok(match cfg.data.extractor {
        ExtractorMode::Stub => Box::new(StubExtractor {
            dims: cfg.model.features,
            seed: cfg.data.extractor_seed,
        }),
        ExtractorMode::Cache => Box::new(CachedExtractor {
            root: cache
                .ok_or_else(|| Error::Config("cache mode needs --cache <dir>".into()))?
                .to_path_buf(),
            dims: cfg.model.features,
        }),
    })
}

fn cmd_train(a: &TrainArgs) -> Result<i32> {
    let cfg = a.config.load()?;
    let dialogues = load_manifest(&manifest_path(&a.corpus))?;
    let (train, val) = split_dialogues(&dialogues, cfg.data.val_fraction);
    let source = feature_source(&cfg, a.cache.as_deref())?;
    let bank = FeatureBank::load(&dialogues, source.as_ref())?;
    let mut trainer = match &a.resume {
        Some(p) => Trainer::resume(&cfg, p, train, &bank)?,
        None => Trainer::new(&cfg, train, &bank)?,
    };
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_config(&a.out, &trainer.config)?;
    let curve = a.out.join("loss.jsonl");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(a.resume.is_some())
        .write(true)
        .truncate(a.resume.is_none())
        .open(&curve)
        .map_err(|e| Error::io(&curve, e))?;
    let every = trainer.config.train.checkpoint_every;
    while trainer.state.step < trainer.config.train.steps {
        let b = trainer.train_step()?;
        let step = trainer.state.step;
        #[derive(Serialize)]
        struct Line<'a> {
            step: u64,
            #[serde(flatten)]
            loss: &'a crate::training::LossBreakdown,
        }
        let line = serde_json::to_string(&Line { step, loss: &b }).expect("serializes");
        writeln!(log, "{line}").map_err(|e| Error::io(&curve, e))?;
        if every > 0 && step % every == 0 {
            trainer.save_checkpoint(&a.out.join("checkpoints").join(format!("step_{step:07}.m2ck")))?;
        }
    }
    let last = a.out.join("final.m2ck");
    trainer.save_checkpoint(&last)?;
    let val_windows = crate::corpus::all_windows(val, trainer.config.data.c);
    if !val_windows.is_empty() {
        let v = trainer.evaluate(&val_windows)?;
        println!("validation mel L1 {:.6}", v.mel_l1);
    }
    println!("{}", last.display());
    Ok(EXIT_OK)
}

/// History turns get every feature; the current turn only needs its text
/// features, so acoustic entries are left as zeros.
fn synthesis_bank(
    dialogue: &Dialogue,
    t: usize,
    c: usize,
    source: &dyn FeatureSource,
    cfg: &RunConfig,
) -> Result<FeatureBank> {
    let w = window(dialogue, t, c)?;
    let mut bank = FeatureBank::default();
    for turn in w.history {
        bank.insert(&turn.dialogue_id, turn.turn_index, FeatureBank::turn_features(turn, source)?);
    }
    let cur = w.current;
    let dims = cfg.model.features;
    let text_utterance = source
        .fetch(cur, crate::extractors::FeatureKind::TextUtterance)?
        .data
        .iter()
        .map(|&x| x as f64)
        .collect();
    let text_sequence = source
        .fetch(cur, crate::extractors::FeatureKind::TextSequence)?
        .to_mat()?;
    bank.insert(
        &cur.dialogue_id,
        cur.turn_index,
        TurnFeatures {
            text_utterance,
            acoustic_utterance: vec![0.0; dims.acoustic_utterance],
            text_sequence,
            acoustic_sequence: crate::autodiff::Mat::zeros((1, dims.acoustic_sequence)),
        },
    );
    Ok(bank)
}

fn write_attention(path: &Path, w: &AttentionWeights) -> Result<()> {
    let (dims, data) = w.to_rank3();
    write_tensor(path, &CacheTensor::new(dims, data)?)
}

/// Inference for turn `t` of `dialogue_id` under the checkpoint's config,
/// with predicted durations and no prosody predictor.
pub fn synthesize_turn(
    ck: &Checkpoint,
    dialogues: &[Dialogue],
    dialogue_id: &str,
    t: usize,
    cache: Option<&Path>,
) -> Result<Synthesis> {
    let cfg = &ck.config;
    let model = ck.model()?.without_ppm();
    let dialogue = dialogues
        .iter()
        .find(|d| d.dialogue_id == dialogue_id)
        .ok_or_else(|| Error::InvalidArgument(format!("no dialogue {dialogue_id:?} in corpus")))?;
    let source = feature_source(cfg, cache)?;
    let bank = synthesis_bank(dialogue, t, cfg.data.c, source.as_ref(), cfg)?;
    let w = window(dialogue, t, cfg.data.c)?;
    model.synthesize(&w, &bank, &cfg.ablation, cfg.data.c, cfg.data.pad_id)
}

fn cmd_synthesize(a: &SynthesizeArgs) -> Result<i32> {
    let ck = Checkpoint::read(&a.checkpoint)?;
    let cfg = ck.config.clone();
    let dialogues = load_manifest(&manifest_path(&a.corpus))?;
    let syn = synthesize_turn(&ck, &dialogues, &a.dialogue, a.turn, a.cache.as_deref())?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_config(&a.out, &cfg)?;
    let stem = format!("{}_{}", a.dialogue, a.turn);
    let mel_path = a.out.join(format!("{stem}.mel.m2ct"));
    debug_assert_eq!(syn.mel.ncols(), MEL_CHANNELS);
    write_tensor(&mel_path, &CacheTensor::from_mat(&syn.mel))?;
    if let Some(w) = &syn.attention.text {
        write_attention(&a.out.join(format!("{stem}.tpm_attn.m2ct")), w)?;
    }
    if let Some(w) = &syn.attention.acoustic {
        write_attention(&a.out.join(format!("{stem}.wpm_attn.m2ct")), w)?;
    }
    println!("{}", mel_path.display());
    Ok(EXIT_OK)
}

fn cmd_verify(suite: &str) -> Result<i32> {
    let results = if suite == "all" {
        verify::run_all()
    } else if verify::SUITES.contains(&suite) {
        verify::run_suite(suite)
    } else {
        return Err(Error::Config(format!(
            "unknown suite {suite:?}, expected all or one of {}",
            verify::SUITES.join(", ")
        )));
    }?;
    let failed = results.iter().filter(|r| !r.passed).count();
    for r in &results {
        println!("{r}");
    }
    println!("{} properties, {failed} failed", results.len());
    Ok(if failed == 0 { EXIT_OK } else { EXIT_FAILURE })
}

fn cmd_ablate(a: &AblateArgs) -> Result<i32> {
    let cfg = a.config.load()?;
    for n in &a.names {
        crate::config::AblationConfig::named(n)?;
    }
    let dialogues = load_manifest(&manifest_path(&a.corpus))?;
    let (train, val) = split_dialogues(&dialogues, cfg.data.val_fraction);
    let source = feature_source(&cfg, a.cache.as_deref())?;
    let bank = FeatureBank::load(&dialogues, source.as_ref())?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_config(&a.out, &cfg)?;
    let table = a.out.join("metrics.jsonl");
    let rows = run_ablation(&a.names, &cfg, train, val, &bank, &table)?;
    for r in &rows {
        println!(
            "{}: total {:.6} (from {:.6}), mel L1 {:.6}, prosody {:.6}",
            r.name, r.final_loss.total, r.initial_total, r.final_loss.mel_l1, r.final_loss.prosody_mse
        );
    }
    println!("{}", table.display());
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(a: &[&str]) -> Vec<String> {
        a.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn overrides_after_known_flags_are_collected() {
        let cli = parse(args(&[
            "m2ctts", "train", "--corpus", "c", "--out", "o", "--train.steps", "3", "--ablation", "M1",
        ]))
        .unwrap();
        let Command::Train(t) = cli.command else { panic!("wrong command") };
        assert_eq!(t.config.overrides, vec!["--train.steps", "3", "--ablation", "M1"]);
        let cfg = t.config.load().unwrap();
        assert_eq!(cfg.train.steps, 3);
        assert_eq!(cfg.ablation.name, "M1");
    }

    #[test]
    fn known_flags_may_follow_overrides() {
        let cli = parse(args(&[
            "m2ctts", "train", "--corpus", "c", "--train.steps", "3", "--out", "o", "--resume", "r.m2ck", "--seed=4",
        ]))
        .unwrap();
        let Command::Train(t) = cli.command else { panic!("wrong command") };
        assert_eq!(t.out, PathBuf::from("o"));
        assert_eq!(t.resume, Some(PathBuf::from("r.m2ck")));
        assert_eq!(t.config.overrides, vec!["--train.steps", "3", "--seed=4"]);
    }

    #[test]
    fn negative_override_values_are_kept() {
        let (kept, o) = split_overrides(args(&["m2ctts", "ablate", "--model.pitch_range", "[-3,3]", "--train.lr", "-1", "--out", "x"]));
        assert_eq!(kept, args(&["m2ctts", "ablate", "--out", "x"]));
        assert_eq!(o, args(&["--model.pitch_range", "[-3,3]", "--train.lr", "-1"]));
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(main_with_args(["m2ctts", "nope"]), EXIT_USAGE);
        assert_eq!(main_with_args(["m2ctts", "verify", "bogus"]), EXIT_USAGE);
        assert_eq!(
            main_with_args(["m2ctts", "ablate", "--corpus", "x", "--out", "y", "--model.nope", "1"]),
            EXIT_USAGE
        );
        assert_eq!(main_with_args(["m2ctts", "verify", "--train.steps", "1"]), EXIT_USAGE);
    }
}
