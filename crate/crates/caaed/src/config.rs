//! The experiment configuration file: a small INI dialect with five
//! sections. Every key has a documented default except the two seeds, which
//! must be written out explicitly — no run ever draws entropy from the
//! environment. Unknown sections, unknown keys, and duplicate keys are
//! config errors.
//!
//! ```text
//! # comment (';' also starts a comment)
//! [data]
//! seed = 1                  # REQUIRED. Corpus generation seed.
//! stems = walk,talk,jump,play,look,call,help,turn
//! suffixes = -,s,ed,ing     # '-' names the bare (empty) suffix
//! d_raw = 8                 # raw feature dimension per frame
//! frames_per_char = 2
//! stack_factor = 3          # consecutive frames stacked per model step
//! noise_std = 0.3
//! n_train = 200
//! n_test = 50
//! holdout =                 # e.g. walk+ed,talk+ing: forms kept out of train
//! train_path =              # optional: read this dataset instead of synthesizing
//! test_path =               # optional: ditto
//!
//! [vocab]
//! kind = word-piece         # character | word-piece | mixed-unit
//! target_size = 40          # word-piece inventory size
//! freq_threshold = 3        # mixed-unit whole-word frequency floor
//!
//! [model]
//! encoder_layers = 2
//! decoder_layers = 1
//! hidden = 48
//! char_embed_dim = 16
//! ca_layers = 2
//! attn_filter_len = 5
//! dropout_p = 0.1
//! embedding = lookup        # lookup | char-aware
//!
//! [train]
//! seed = 1                  # REQUIRED. Initialization/shuffling/sampling seed.
//! lr = 0.002
//! beta1 = 0.9
//! beta2 = 0.999
//! adam_eps = 1e-8
//! clip_norm = 5.0
//! batch_size = 8
//! epochs = 30
//! sampling_start = 0.0
//! sampling_end = 0.2
//! smoothing = 0.1
//!
//! [decode]
//! max_len = 200
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::{read_dataset, synth_corpus, SynthLanguage, Utterance};
use crate::error::{Error, Result};
use crate::model::{EmbeddingKind, ModelConfig};
use crate::training::TrainConfig;
use crate::vocab::{Corpus, Vocab, VocabKind};

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub stems: Vec<String>,
    pub suffixes: Vec<String>,
    pub d_raw: usize,
    pub frames_per_char: usize,
    pub stack_factor: usize,
    pub noise_std: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub holdout: Vec<(String, String)>,
    pub seed: u64,
}

impl DataConfig {
    /// The synthetic language these settings describe.
    pub fn language(&self) -> Result<SynthLanguage> {
        SynthLanguage::new(
            self.stems.clone(),
            self.suffixes.clone(),
            self.d_raw,
            self.frames_per_char,
            self.stack_factor,
            self.noise_std,
            self.seed,
        )
    }

    /// Train and test sets: read from the configured paths when both are
    /// given, synthesized otherwise.
    pub fn datasets(&self) -> Result<(Vec<Utterance>, Vec<Utterance>)> {
        match (&self.train_path, &self.test_path) {
            (Some(tr), Some(te)) => Ok((read_dataset(tr)?, read_dataset(te)?)),
            (None, None) => {
                let lang = self.language()?;
                synth_corpus(&lang, self.n_train, self.n_test, &self.holdout, self.seed)
            }
            _ => Err(Error::Config(
                "train_path and test_path must be given together or not at all".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VocabConfig {
    pub kind: VocabKind,
    pub target_size: usize,
    pub freq_threshold: u64,
}

impl VocabConfig {
    pub fn build(&self, lines: &[String]) -> Result<Vocab> {
        match self.kind {
            VocabKind::Character => Ok(Vocab::character()),
            VocabKind::WordPiece => {
                Vocab::build_wordpiece(&Corpus::from_lines(lines.iter())?, self.target_size)
            }
            VocabKind::MixedUnit => {
                Vocab::build_mixed_units(&Corpus::from_lines(lines.iter())?, self.freq_threshold)
            }
        }
    }
}

/// The architecture knobs that live in the file; inventory sizes and the
/// feature dimension are derived from the vocabulary and data at run time.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub hidden: usize,
    pub char_embed_dim: usize,
    pub ca_layers: usize,
    pub attn_filter_len: usize,
    pub dropout_p: f64,
    pub embedding: EmbeddingKind,
}

impl ModelSection {
    pub fn to_model_config(
        &self,
        vocab: &Vocab,
        d_x: usize,
        embedding: EmbeddingKind,
    ) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab.size(),
            n_chars: vocab.char_inventory().len(),
            d_x,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            hidden: self.hidden,
            char_embed_dim: self.char_embed_dim,
            ca_layers: self.ca_layers,
            attn_filter_len: self.attn_filter_len,
            dropout_p: self.dropout_p,
            embedding,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub max_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub vocab: VocabConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Entries::scan(text)?;

        let data = DataConfig {
            train_path: entries.take_path("data", "train_path")?,
            test_path: entries.take_path("data", "test_path")?,
            stems: entries.take_list(
                "data",
                "stems",
                &["walk", "talk", "jump", "play", "look", "call", "help", "turn"],
            )?,
            suffixes: entries.take_list("data", "suffixes", &["-", "s", "ed", "ing"])?,
            d_raw: entries.take_usize("data", "d_raw", 8)?,
            frames_per_char: entries.take_usize("data", "frames_per_char", 2)?,
            stack_factor: entries.take_usize("data", "stack_factor", 3)?,
            noise_std: entries.take_f64("data", "noise_std", 0.3)?,
            n_train: entries.take_usize("data", "n_train", 200)?,
            n_test: entries.take_usize("data", "n_test", 50)?,
            holdout: entries.take_holdout("data", "holdout")?,
            seed: entries.take_seed("data")?,
        };

        let vocab = VocabConfig {
            kind: match entries.take_str("vocab", "kind", "word-piece")?.as_str() {
                "character" => VocabKind::Character,
                "word-piece" => VocabKind::WordPiece,
                "mixed-unit" => VocabKind::MixedUnit,
                other => {
                    return Err(Error::Config(format!("unknown vocab kind {other:?}")));
                }
            },
            target_size: entries.take_usize("vocab", "target_size", 40)?,
            freq_threshold: entries.take_u64("vocab", "freq_threshold", 3)?,
        };

        let model = ModelSection {
            encoder_layers: entries.take_usize("model", "encoder_layers", 2)?,
            decoder_layers: entries.take_usize("model", "decoder_layers", 1)?,
            hidden: entries.take_usize("model", "hidden", 48)?,
            char_embed_dim: entries.take_usize("model", "char_embed_dim", 16)?,
            ca_layers: entries.take_usize("model", "ca_layers", 2)?,
            attn_filter_len: entries.take_usize("model", "attn_filter_len", 5)?,
            dropout_p: entries.take_f64("model", "dropout_p", 0.1)?,
            embedding: EmbeddingKind::parse(&entries.take_str("model", "embedding", "lookup")?)?,
        };

        let train = TrainConfig {
            lr: entries.take_f64("train", "lr", 2e-3)?,
            beta1: entries.take_f64("train", "beta1", 0.9)?,
            beta2: entries.take_f64("train", "beta2", 0.999)?,
            adam_eps: entries.take_f64("train", "adam_eps", 1e-8)?,
            clip_norm: entries.take_f64("train", "clip_norm", 5.0)?,
            batch_size: entries.take_usize("train", "batch_size", 8)?,
            epochs: entries.take_usize("train", "epochs", 30)?,
            sampling_start: entries.take_f64("train", "sampling_start", 0.0)?,
            sampling_end: entries.take_f64("train", "sampling_end", 0.2)?,
            smoothing: entries.take_f64("train", "smoothing", 0.1)?,
            seed: entries.take_seed("train")?,
        };
        train.validate()?;

        let decode = DecodeConfig { max_len: entries.take_usize("decode", "max_len", 200)? };
        if decode.max_len < 1 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }

        entries.finish()?;
        Ok(ExperimentConfig { data, vocab, model, train, decode })
    }
}

/// The raw key–value entries of a config file, consumed key by key.
struct Entries {
    values: BTreeMap<(String, String), String>,
}

const SECTIONS: [&str; 5] = ["data", "vocab", "model", "train", "decode"];

impl Entries {
    fn scan(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = match raw.find(['#', ';']) {
                Some(i) => raw[..i].trim(),
                None => raw.trim(),
            };
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
                if !SECTIONS.contains(&name) {
                    return Err(Error::Config(format!("unknown section [{name}] on line {}", n + 1)));
                }
                section = Some(name.to_string());
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {} is not key = value", n + 1)));
            };
            let Some(section) = &section else {
                return Err(Error::Config(format!("line {} appears before any section", n + 1)));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if values.insert((section.clone(), key.clone()), value).is_some() {
                return Err(Error::Config(format!("duplicate key {key} in [{section}]")));
            }
        }
        Ok(Entries { values })
    }

    fn take(&mut self, section: &str, key: &str) -> Option<String> {
        self.values.remove(&(section.to_string(), key.to_string()))
    }

    fn take_str(&mut self, section: &str, key: &str, default: &str) -> Result<String> {
        Ok(self.take(section, key).unwrap_or_else(|| default.to_string()))
    }

    fn take_path(&mut self, section: &str, key: &str) -> Result<Option<PathBuf>> {
        Ok(self.take(section, key).filter(|v| !v.is_empty()).map(PathBuf::from))
    }

    fn take_usize(&mut self, section: &str, key: &str, default: usize) -> Result<usize> {
        match self.take(section, key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("[{section}] {key} must be an integer, got {v:?}"))),
        }
    }

    fn take_u64(&mut self, section: &str, key: &str, default: u64) -> Result<u64> {
        match self.take(section, key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("[{section}] {key} must be an integer, got {v:?}"))),
        }
    }

    fn take_f64(&mut self, section: &str, key: &str, default: f64) -> Result<f64> {
        match self.take(section, key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("[{section}] {key} must be a number, got {v:?}"))),
        }
    }

    /// Comma-separated list; the single character '-' denotes the empty
    /// string (the bare suffix).
    fn take_list(&mut self, section: &str, key: &str, default: &[&str]) -> Result<Vec<String>> {
        let raw = match self.take(section, key) {
            None => default.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
            Some(v) => v.split(',').map(|p| p.trim().to_string()).collect(),
        };
        Ok(raw.into_iter().map(|p| if p == "-" { String::new() } else { p }).collect())
    }

    /// Comma-separated stem+suffix pairs, e.g. `walk+ed,talk+ing`; a bare
    /// suffix is written with a trailing '+' or '+-'.
    fn take_holdout(&mut self, section: &str, key: &str) -> Result<Vec<(String, String)>> {
        let Some(raw) = self.take(section, key) else {
            return Ok(Vec::new());
        };
        let mut out = Vec::new();
        for part in raw.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let Some((stem, suffix)) = part.split_once('+') else {
                return Err(Error::Config(format!(
                    "holdout entry {part:?} must look like stem+suffix"
                )));
            };
            let suffix = if suffix == "-" { "" } else { suffix };
            out.push((stem.to_string(), suffix.to_string()));
        }
        Ok(out)
    }

    fn take_seed(&mut self, section: &str) -> Result<u64> {
        match self.take(section, "seed") {
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("[{section}] seed must be an integer, got {v:?}"))),
            None => Err(Error::Config(format!(
                "[{section}] seed is required: seeds are always explicit, never implicit"
            ))),
        }
    }

    fn finish(self) -> Result<()> {
        if let Some((section, key)) = self.values.keys().next() {
            return Err(Error::Config(format!("unknown key {key} in [{section}]")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[data]\nseed = 4\n[train]\nseed = 9\n";

    #[test]
    fn minimal_config_fills_documented_defaults() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.data.seed, 4);
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.data.stems.len(), 8);
        assert_eq!(c.data.suffixes, vec!["", "s", "ed", "ing"]);
        assert_eq!(c.data.n_train, 200);
        assert_eq!(c.vocab.kind, VocabKind::WordPiece);
        assert_eq!(c.vocab.target_size, 40);
        assert_eq!(c.model.hidden, 48);
        assert_eq!(c.model.embedding, EmbeddingKind::Lookup);
        assert_eq!(c.train.lr, 2e-3);
        assert_eq!(c.train.sampling_end, 0.2);
        assert_eq!(c.train.epochs, 30);
        assert_eq!(c.decode.max_len, 200);
        assert!(c.data.holdout.is_empty());
    }

    #[test]
    fn seeds_are_mandatory() {
        assert!(matches!(ExperimentConfig::parse(""), Err(Error::Config(_))));
        assert!(matches!(
            ExperimentConfig::parse("[data]\nseed = 1\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::parse("[train]\nseed = 1\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn unknown_keys_sections_and_duplicates_are_rejected() {
        assert!(matches!(
            ExperimentConfig::parse("[data]\nseed = 1\nbogus = 2\n[train]\nseed = 1\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::parse("[cheese]\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::parse("[data]\nseed = 1\nseed = 2\n[train]\nseed = 1\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::parse("seed = 1\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::parse("[data]\nnot a pair\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn values_parse_and_holdout_splits() {
        let text = "\
[data]
seed = 7
stems = walk, talk
suffixes = -, ed
holdout = walk+ed, talk+-
noise_std = 0.25   # trailing comment
[vocab]
kind = mixed-unit
freq_threshold = 5
[model]
embedding = char-aware
hidden = 32
[train]
seed = 8
epochs = 12
[decode]
max_len = 99
";
        let c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(c.data.stems, vec!["walk", "talk"]);
        assert_eq!(c.data.suffixes, vec!["", "ed"]);
        assert_eq!(
            c.data.holdout,
            vec![("walk".into(), "ed".into()), ("talk".into(), String::new())]
        );
        assert_eq!(c.data.noise_std, 0.25);
        assert_eq!(c.vocab.kind, VocabKind::MixedUnit);
        assert_eq!(c.vocab.freq_threshold, 5);
        assert_eq!(c.model.embedding, EmbeddingKind::CharAware);
        assert_eq!(c.model.hidden, 32);
        assert_eq!(c.train.epochs, 12);
        assert_eq!(c.decode.max_len, 99);
    }

    #[test]
    fn bad_values_are_config_errors() {
        for text in [
            "[data]\nseed = x\n[train]\nseed = 1\n",
            "[data]\nseed = 1\nn_train = -2\n[train]\nseed = 1\n",
            "[data]\nseed = 1\nholdout = walked\n[train]\nseed = 1\n",
            "[data]\nseed = 1\n[train]\nseed = 1\nsmoothing = 1.5\n",
            "[data]\nseed = 1\n[vocab]\nkind = syllable\n[train]\nseed = 1\n",
            "[data]\nseed = 1\n[train]\nseed = 1\n[decode]\nmax_len = 0\n",
        ] {
            assert!(
                matches!(ExperimentConfig::parse(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn datasets_require_paths_in_pairs() {
        let c = ExperimentConfig::parse(
            "[data]\nseed = 1\ntrain_path = only-one.bin\n[train]\nseed = 1\n",
        )
        .unwrap();
        assert!(matches!(c.data.datasets(), Err(Error::Config(_))));
    }

    #[test]
    fn default_data_section_synthesizes_a_usable_corpus() {
        let mut c = ExperimentConfig::parse(MINIMAL).unwrap();
        c.data.n_train = 30;
        c.data.n_test = 5;
        let (train, test) = c.data.datasets().unwrap();
        assert_eq!(train.len(), 30);
        assert_eq!(test.len(), 5);
        assert_eq!(train[0].features.shape()[1], c.data.language().unwrap().d_x());
    }
}
