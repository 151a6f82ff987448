//! Acoustic data handling: frame stacking, a seeded synthetic
//! morphology-rich corpus, and the binary dataset file format.
//!
//! The synthetic language pairs stems with suffixes (walk + ing, walk + ed,
//! ...). Each character has a fixed prototype feature vector; an utterance's
//! features are its characters' prototypes repeated a few frames each, plus
//! Gaussian noise, then stacked. Selected (stem, suffix) forms can be held
//! out of training entirely while still appearing in the test set, which is
//! what lets an experiment ask whether a model can recognize an inflected
//! form it never saw.

use std::collections::BTreeSet;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use crate::vocab::Vocab;

/// One training or test example.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    /// Stacked feature frames, `[I, d_x]`, always f32-representable.
    pub features: Tensor,
    /// Unit ids framed by `<sos>`/`<eos>`.
    pub labels: Vec<usize>,
    pub transcript: String,
}

/// Concatenate consecutive groups of `factor` frames, zero-padding the final
/// partial group: `[N, d]` becomes `[ceil(N/factor), factor*d]`, and output
/// row i covers raw rows `factor*i .. factor*i+factor-1`.
pub fn stack_frames(raw: &Tensor, factor: usize) -> Result<Tensor> {
    if factor < 1 {
        return Err(Error::Config(format!("stack factor must be at least 1, got {factor}")));
    }
    if raw.shape().len() != 2 {
        return Err(Error::dimension("stack_frames", raw.shape(), &[]));
    }
    let (n, d) = (raw.shape()[0], raw.shape()[1]);
    let rows = n.div_ceil(factor);
    let mut out = vec![0.0; rows * factor * d];
    for i in 0..n {
        let (group, slot) = (i / factor, i % factor);
        let dst = group * factor * d + slot * d;
        out[dst..dst + d].copy_from_slice(raw.row(i));
    }
    Tensor::from_vec(vec![rows, factor * d], out)
}

/// The generator's fixed world: which words exist and how they sound.
#[derive(Debug, Clone)]
pub struct SynthLanguage {
    stems: Vec<String>,
    suffixes: Vec<String>,
    d_raw: usize,
    frames_per_char: usize,
    stack_factor: usize,
    noise_std: f64,
    /// Per-character prototype vectors, keyed by char, drawn once per seed.
    prototypes: Vec<(char, Vec<f64>)>,
}

impl SynthLanguage {
    /// Define a language. Prototype vectors for every pronounceable character
    /// (letters, apostrophe, space) are drawn here from `seed`, so two
    /// languages built with the same arguments sound identical.
    pub fn new(
        stems: Vec<String>,
        suffixes: Vec<String>,
        d_raw: usize,
        frames_per_char: usize,
        stack_factor: usize,
        noise_std: f64,
        seed: u64,
    ) -> Result<Self> {
        if stems.is_empty() {
            return Err(Error::Config("synthetic language needs at least one stem".into()));
        }
        if suffixes.is_empty() {
            return Err(Error::Config("synthetic language needs at least one suffix".into()));
        }
        for s in stems.iter().chain(&suffixes) {
            if !s.chars().all(|c| c.is_ascii_lowercase() || c == '\'') {
                return Err(Error::Config(format!(
                    "stem/suffix {s:?} contains characters outside the alphabet"
                )));
            }
        }
        if stems.iter().any(String::is_empty) {
            return Err(Error::Config("stems must be non-empty strings".into()));
        }
        if d_raw < 1 || frames_per_char < 1 || stack_factor < 1 {
            return Err(Error::Config(
                "d_raw, frames_per_char and stack_factor must all be at least 1".into(),
            ));
        }
        if noise_std < 0.0 {
            return Err(Error::Config(format!("noise_std must be non-negative, got {noise_std}")));
        }
        let mut proto_rng = rng::stream(seed, "synth/prototypes");
        let mut prototypes = Vec::new();
        let mut chars: Vec<char> = vec![' ', '\''];
        chars.extend('a'..='z');
        for c in chars {
            let v: Vec<f64> = (0..d_raw).map(|_| rng::gaussian(&mut proto_rng)).collect();
            prototypes.push((c, v));
        }
        Ok(SynthLanguage {
            stems,
            suffixes,
            d_raw,
            frames_per_char,
            stack_factor,
            noise_std,
            prototypes,
        })
    }

    pub fn stems(&self) -> &[String] {
        &self.stems
    }

    pub fn suffixes(&self) -> &[String] {
        &self.suffixes
    }

    /// Stacked feature dimension produced by this language.
    pub fn d_x(&self) -> usize {
        self.d_raw * self.stack_factor
    }

    /// Every surface form, in (stem, suffix) index order.
    pub fn forms(&self) -> Vec<String> {
        let mut out = Vec::new();
        for s in &self.stems {
            for x in &self.suffixes {
                out.push(format!("{s}{x}"));
            }
        }
        out
    }

    fn prototype(&self, c: char) -> &[f64] {
        &self
            .prototypes
            .iter()
            .find(|(p, _)| *p == c)
            .expect("transcripts only use pronounceable characters")
            .1
    }

    /// Render a transcript to stacked, f32-quantized features.
    fn render<R: Rng>(&self, transcript: &str, rng: &mut R) -> Result<Tensor> {
        let chars: Vec<char> = transcript.chars().collect();
        let mut raw = Vec::with_capacity(chars.len() * self.frames_per_char * self.d_raw);
        for c in &chars {
            let proto = self.prototype(*c);
            for _ in 0..self.frames_per_char {
                for p in proto {
                    raw.push(p + self.noise_std * rng::gaussian(rng));
                }
            }
        }
        let raw = Tensor::from_vec(vec![chars.len() * self.frames_per_char, self.d_raw], raw)?;
        let mut stacked = stack_frames(&raw, self.stack_factor)?;
        stacked.quantize_f32();
        Ok(stacked)
    }
}

/// Generate seeded train and test sets.
///
/// Train utterances sample 2-6 words from all (stem, suffix) forms except the
/// held-out ones. Test utterances sample the same pool but, when a holdout
/// list is given, one word slot per utterance cycles through the held-out
/// forms, so every held-out form occurs in test. Labels are character-level
/// (see [`relabel`] for switching vocabularies). Generation is a pure
/// function of its arguments.
pub fn synth_corpus(
    lang: &SynthLanguage,
    n_train: usize,
    n_test: usize,
    holdout: &[(String, String)],
    seed: u64,
) -> Result<(Vec<Utterance>, Vec<Utterance>)> {
    for (s, x) in holdout {
        if !lang.stems.contains(s) {
            return Err(Error::Config(format!("holdout stem {s:?} is not in the language")));
        }
        if !lang.suffixes.contains(x) {
            return Err(Error::Config(format!("holdout suffix {x:?} is not in the language")));
        }
    }
    let held: BTreeSet<(usize, usize)> = holdout
        .iter()
        .map(|(s, x)| {
            (
                lang.stems.iter().position(|v| v == s).unwrap(),
                lang.suffixes.iter().position(|v| v == x).unwrap(),
            )
        })
        .collect();

    // The training pool must still exercise every held-out stem and suffix
    // through other combinations, otherwise the holdout is untestable.
    let mut pool = Vec::new();
    for si in 0..lang.stems.len() {
        for xi in 0..lang.suffixes.len() {
            if !held.contains(&(si, xi)) {
                pool.push((si, xi));
            }
        }
    }
    if pool.is_empty() {
        return Err(Error::Config("holdout list excludes every form".into()));
    }
    for &(si, xi) in &held {
        if !pool.iter().any(|&(s, _)| s == si) {
            return Err(Error::Config(format!(
                "holdout leaves stem {:?} with no training form",
                lang.stems[si]
            )));
        }
        if !pool.iter().any(|&(_, x)| x == xi) {
            return Err(Error::Config(format!(
                "holdout leaves suffix {:?} with no training form",
                lang.suffixes[xi]
            )));
        }
    }

    let form = |&(si, xi): &(usize, usize)| format!("{}{}", lang.stems[si], lang.suffixes[xi]);
    let charvocab = Vocab::character();
    let make = |transcript: String, rng: &mut rand_chacha::ChaCha8Rng| -> Result<Utterance> {
        Ok(Utterance {
            features: lang.render(&transcript, rng)?,
            labels: charvocab.tokenize(&transcript),
            transcript,
        })
    };

    let mut train = Vec::with_capacity(n_train);
    let mut rng = rng::stream(seed, "synth/train");
    for _ in 0..n_train {
        let n_words = rng.gen_range(2..=6);
        let words: Vec<String> =
            (0..n_words).map(|_| form(&pool[rng.gen_range(0..pool.len())])).collect();
        train.push(make(words.join(" "), &mut rng)?);
    }

    // Unlucky sampling can defeat the holdout guarantee; detect it rather
    // than silently running a meaningless experiment.
    let train_words: BTreeSet<&str> =
        train.iter().flat_map(|u| u.transcript.split(' ')).collect();
    for &(si, xi) in &held {
        // The pool already excludes held-out pairs, so matching the stem
        // (or suffix) here means a *different* inflection of it.
        let stem_seen = pool
            .iter()
            .any(|&(s, x)| s == si && train_words.contains(form(&(s, x)).as_str()));
        let suffix_seen = pool
            .iter()
            .any(|&(s, x)| x == xi && train_words.contains(form(&(s, x)).as_str()));
        if !stem_seen || !suffix_seen {
            return Err(Error::Config(format!(
                "training draw never produced other forms of held-out ({:?}, {:?}); increase n_train",
                lang.stems[si], lang.suffixes[xi]
            )));
        }
    }

    let mut test = Vec::with_capacity(n_test);
    let mut rng = rng::stream(seed, "synth/test");
    let held_list: Vec<(usize, usize)> = held.iter().copied().collect();
    for i in 0..n_test {
        let n_words = rng.gen_range(2..=6);
        let mut words: Vec<String> =
            (0..n_words).map(|_| form(&pool[rng.gen_range(0..pool.len())])).collect();
        if !held_list.is_empty() {
            let slot = rng.gen_range(0..n_words);
            words[slot] = form(&held_list[i % held_list.len()]);
        }
        test.push(make(words.join(" "), &mut rng)?);
    }

    Ok((train, test))
}

/// Re-derive every utterance's labels from its transcript with `vocab`.
pub fn relabel(utterances: &mut [Utterance], vocab: &Vocab) {
    for u in utterances {
        u.labels = vocab.tokenize(&u.transcript);
    }
}

// ── Dataset files ────────────────────────────────────────────────────

const MAGIC: &[u8; 6] = b"CAAED1";
/// Per-record sanity caps so corrupt headers cannot demand huge allocations.
const MAX_FRAME_ELEMS: u64 = 1 << 24;
const MAX_LABELS: u32 = 1 << 20;
const MAX_TRANSCRIPT: u32 = 1 << 24;

pub fn write_dataset(path: &Path, utterances: &[Utterance]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    for u in utterances {
        let shape = u.features.shape();
        if shape.len() != 2 {
            return Err(Error::dimension("write_dataset", shape, &[]));
        }
        w.write_all(&u32::try_from(shape[0]).map_err(|_| too_big("frame count"))?.to_le_bytes())?;
        w.write_all(&u32::try_from(shape[1]).map_err(|_| too_big("frame dim"))?.to_le_bytes())?;
        for v in u.features.data() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        w.write_all(&u32::try_from(u.labels.len()).map_err(|_| too_big("label count"))?.to_le_bytes())?;
        for &l in &u.labels {
            w.write_all(&u32::try_from(l).map_err(|_| too_big("label id"))?.to_le_bytes())?;
        }
        let t = u.transcript.as_bytes();
        w.write_all(&u32::try_from(t.len()).map_err(|_| too_big("transcript"))?.to_le_bytes())?;
        w.write_all(t)?;
    }
    w.flush()?;
    Ok(())
}

fn too_big(what: &str) -> Error {
    Error::Data(format!("{what} exceeds the file format's 32-bit range"))
}

pub fn read_dataset(path: &Path) -> Result<Vec<Utterance>> {
    parse_dataset(BufReader::new(std::fs::File::open(path)?))
}

/// Decode a dataset stream. Every length is validated against caps before
/// allocation, and truncation anywhere is a data error, never a panic.
pub fn parse_dataset<R: Read>(mut r: R) -> Result<Vec<Utterance>> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic).map_err(|_| Error::Data("dataset file lacks a header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Data("dataset file has the wrong magic bytes".into()));
    }
    let mut utterances = Vec::new();
    while let Some(frames) = read_u32_or_eof(&mut r)? {
        let dim = read_u32(&mut r)?;
        if frames == 0 || dim == 0 {
            return Err(Error::Data("dataset record declares an empty feature matrix".into()));
        }
        let elems = u64::from(frames) * u64::from(dim);
        if elems > MAX_FRAME_ELEMS {
            return Err(Error::Data(format!("dataset record declares {elems} feature values")));
        }
        let mut data = Vec::with_capacity(elems as usize);
        let mut buf = [0u8; 4];
        for _ in 0..elems {
            r.read_exact(&mut buf).map_err(truncated)?;
            data.push(f64::from(f32::from_le_bytes(buf)));
        }
        let features = Tensor::from_vec(vec![frames as usize, dim as usize], data)
            .map_err(|e| Error::Data(format!("dataset record is inconsistent: {e}")))?;

        let n_labels = read_u32(&mut r)?;
        if n_labels > MAX_LABELS {
            return Err(Error::Data(format!("dataset record declares {n_labels} labels")));
        }
        let mut labels = Vec::with_capacity(n_labels as usize);
        for _ in 0..n_labels {
            r.read_exact(&mut buf).map_err(truncated)?;
            labels.push(u32::from_le_bytes(buf) as usize);
        }

        let t_len = read_u32(&mut r)?;
        if t_len > MAX_TRANSCRIPT {
            return Err(Error::Data(format!("dataset record declares a {t_len}-byte transcript")));
        }
        let mut t = vec![0u8; t_len as usize];
        r.read_exact(&mut t).map_err(truncated)?;
        let transcript = String::from_utf8(t)
            .map_err(|_| Error::Data("dataset transcript is not valid UTF-8".into()))?;

        utterances.push(Utterance { features, labels, transcript });
    }
    Ok(utterances)
}

fn truncated(_: std::io::Error) -> Error {
    Error::Data("dataset file is truncated".into())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(u32::from_le_bytes(buf))
}

/// A u32 read that treats clean EOF at a record boundary as end-of-stream.
fn read_u32_or_eof<R: Read>(r: &mut R) -> Result<Option<u32>> {
    let mut buf = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut buf[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(Error::Data("dataset file is truncated".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(Error::Io(e)),
        }
    }
    Ok(Some(u32::from_le_bytes(buf)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_lang(noise_std: f64, seed: u64) -> SynthLanguage {
        SynthLanguage::new(
            vec!["walk".into(), "talk".into(), "jump".into()],
            vec!["".into(), "s".into(), "ed".into(), "ing".into()],
            8,
            2,
            3,
            noise_std,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn stack_frames_follows_padding_rule() {
        let raw = Tensor::from_vec(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let s = stack_frames(&raw, 3).unwrap();
        assert_eq!(s.shape(), &[1, 6]);
        assert_eq!(s.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);

        let raw4 =
            Tensor::from_vec(vec![4, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let s4 = stack_frames(&raw4, 3).unwrap();
        assert_eq!(s4.shape(), &[2, 6]);
        assert_eq!(s4.row(1), &[7.0, 8.0, 0.0, 0.0, 0.0, 0.0]);

        // Dropping the zero padding recovers the original rows.
        let mut recovered = Vec::new();
        for i in 0..s4.shape()[0] {
            for j in 0..3 {
                if recovered.len() < raw4.numel() {
                    recovered.extend_from_slice(&s4.row(i)[j * 2..(j + 1) * 2]);
                }
            }
        }
        assert_eq!(recovered.as_slice(), raw4.data());

        let wide = Tensor::zeros(&[10, 80]);
        assert_eq!(stack_frames(&wide, 3).unwrap().shape(), &[4, 240]);

        assert!(matches!(stack_frames(&raw, 0), Err(Error::Config(_))));
    }

    #[test]
    fn synthesis_is_deterministic() {
        let lang = tiny_lang(0.1, 5);
        let holdout = vec![("walk".to_string(), "ing".to_string())];
        let (tr1, te1) = synth_corpus(&lang, 30, 10, &holdout, 99).unwrap();
        let (tr2, te2) = synth_corpus(&lang, 30, 10, &holdout, 99).unwrap();
        assert_eq!(tr1, tr2);
        assert_eq!(te1, te2);

        let (tr3, _) = synth_corpus(&lang, 30, 10, &holdout, 100).unwrap();
        assert_ne!(tr1, tr3);
    }

    #[test]
    fn zero_noise_makes_features_a_function_of_text() {
        let lang = tiny_lang(0.0, 5);
        let (train, _) = synth_corpus(&lang, 50, 1, &[], 7).unwrap();
        for a in &train {
            for b in &train {
                if a.transcript == b.transcript {
                    assert_eq!(a.features, b.features);
                }
            }
        }
    }

    #[test]
    fn holdout_forms_are_absent_from_train_and_present_in_test() {
        let lang = tiny_lang(0.1, 5);
        let holdout = vec![
            ("walk".to_string(), "ing".to_string()),
            ("talk".to_string(), "ed".to_string()),
        ];
        let (train, test) = synth_corpus(&lang, 60, 20, &holdout, 3).unwrap();
        for u in &train {
            for w in u.transcript.split(' ') {
                assert_ne!(w, "walking");
                assert_ne!(w, "talked");
            }
        }
        let test_words: BTreeSet<&str> =
            test.iter().flat_map(|u| u.transcript.split(' ')).collect();
        assert!(test_words.contains("walking"));
        assert!(test_words.contains("talked"));
        // Stems and suffixes still occur in train through other forms.
        let train_words: BTreeSet<&str> =
            train.iter().flat_map(|u| u.transcript.split(' ')).collect();
        assert!(train_words.iter().any(|w| w.starts_with("walk") && *w != "walking"));
        assert!(train_words.iter().any(|w| w.ends_with("ed") && *w != "talked"));
    }

    #[test]
    fn impossible_holdout_is_a_config_error() {
        let lang = SynthLanguage::new(
            vec!["cat".into()],
            vec!["s".into(), "ing".into()],
            8,
            2,
            3,
            0.1,
            5,
        )
        .unwrap();
        let holdout = vec![
            ("cat".to_string(), "s".to_string()),
            ("cat".to_string(), "ing".to_string()),
        ];
        assert!(matches!(
            synth_corpus(&lang, 10, 5, &holdout, 1),
            Err(Error::Config(_))
        ));

        let bad = vec![("dog".to_string(), "s".to_string())];
        assert!(matches!(
            synth_corpus(&lang, 10, 5, &bad, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn labels_are_framed_and_relabel_switches_vocabularies() {
        let lang = tiny_lang(0.1, 5);
        let (mut train, _) = synth_corpus(&lang, 20, 1, &[], 11).unwrap();
        let charvocab = Vocab::character();
        for u in &train {
            assert_eq!(u.labels[0], charvocab.sos());
            assert_eq!(*u.labels.last().unwrap(), charvocab.eos());
            assert_eq!(charvocab.detokenize(&u.labels).unwrap(), u.transcript);
        }
        let corpus =
            crate::vocab::Corpus::from_lines(train.iter().map(|u| u.transcript.clone())).unwrap();
        let mixed = Vocab::build_mixed_units(&corpus, 2).unwrap();
        relabel(&mut train, &mixed);
        for u in &train {
            assert_eq!(mixed.detokenize(&u.labels).unwrap(), u.transcript);
        }
    }

    #[test]
    fn dataset_files_round_trip() {
        let lang = tiny_lang(0.1, 5);
        let (train, _) = synth_corpus(&lang, 12, 1, &[], 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.bin");
        write_dataset(&path, &train).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back, train);

        // Writing the loaded copy reproduces the bytes.
        let path2 = dir.path().join("again.bin");
        write_dataset(&path2, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn dataset_parser_rejects_corruption() {
        let lang = tiny_lang(0.1, 5);
        let (train, _) = synth_corpus(&lang, 2, 1, &[], 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        write_dataset(&path, &train).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        assert!(matches!(parse_dataset(&b""[..]), Err(Error::Data(_))));
        assert!(matches!(parse_dataset(&b"NOTMAG"[..]), Err(Error::Data(_))));

        // Truncation at every prefix length is an error, never a panic.
        for cut in [7, 10, 20, bytes.len() - 3] {
            assert!(
                matches!(parse_dataset(&bytes[..cut]), Err(Error::Data(_))),
                "prefix of {cut} bytes"
            );
        }

        // A frame count that disagrees with the payload length.
        let mut bad = bytes.clone();
        bad[6] = 0xff;
        bad[7] = 0xff;
        assert!(parse_dataset(&bad[..]).is_err());

        // Oversized declared lengths are rejected before allocation.
        let mut huge = b"CAAED1".to_vec();
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(parse_dataset(&huge[..]), Err(Error::Data(_))));
    }
}
