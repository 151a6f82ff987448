//! Greedy inference and word-level error-rate scoring.

use std::collections::BTreeSet;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Binder, Model, Params};
use crate::tensor::{Graph, Mode, Precision, Tensor};
use crate::vocab::Vocab;

/// Default cap on emitted units per utterance.
pub const DEFAULT_MAX_LEN: usize = 200;

/// One decoded utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Emitted unit ids, ending with `<eos>` unless the cap intervened.
    pub ids: Vec<usize>,
    /// Log-probability of each emitted unit under the model's posterior.
    pub log_probs: Vec<f64>,
    /// The ids rendered back to text.
    pub text: String,
    /// True when the length cap stopped decoding before `<eos>`.
    pub capped: bool,
}

/// Greedy decode: start from `<sos>`, repeatedly emit the argmax unit (ties
/// broken toward the lowest id) and feed its embedding back, until `<eos>`
/// or `max_len` units.
///
/// `table` optionally supplies a precomputed embedding inventory; without it
/// embeddings are produced by the model's own provider on the fly. Decoding
/// is deterministic either way.
pub fn greedy_decode(
    model: &Model,
    params: &Params,
    vocab: &Vocab,
    features: &Tensor,
    max_len: usize,
    table: Option<&Tensor>,
) -> Result<Hypothesis> {
    if max_len < 1 {
        return Err(Error::Config(format!("max_len must be at least 1, got {max_len}")));
    }
    let mut g = Graph::new(Precision::Single);
    let mut binder = Binder::new(params);
    // Eval mode makes dropout the identity, so the rng is never consulted.
    let mut unused_rng = crate::rng::stream(0, "decode/unused");
    let enc = model.encode(&mut g, &mut binder, features, Mode::Eval, &mut unused_rng)?;
    let table_var = table.map(|t| g.input(t));
    let mut state = model.initial_state(&mut g, &enc)?;
    let mut w = model.embed(&mut g, &mut binder, vocab.sos(), table_var)?;

    let mut ids = Vec::new();
    let mut log_probs = Vec::new();
    let mut capped = false;
    loop {
        let out = model.decode_step(&mut g, &mut binder, &enc, &state, w)?;
        let logp = g.log_softmax(out.logits)?;
        let chosen = argmax(g.value(out.logits));
        ids.push(chosen);
        log_probs.push(g.value(logp)[chosen]);
        if chosen == vocab.eos() {
            break;
        }
        if ids.len() == max_len {
            capped = true;
            break;
        }
        w = model.embed(&mut g, &mut binder, chosen, table_var)?;
        state = out.state;
    }
    let text = vocab.detokenize(&ids)?;
    Ok(Hypothesis { ids, log_probs, text, capped })
}

/// Index of the largest value; the first (lowest index) wins ties.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Word-level edit counts between a reference and a hypothesis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EditStats {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    /// Reference length in words.
    pub ref_len: usize,
    /// (S + D + I) / max(1, ref_len).
    pub rate: f64,
}

impl EditStats {
    pub fn edits(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

/// The minimal edit alignment between two word sequences, recovered by a
/// deterministic backtrace (preferring diagonal moves, then deletions, then
/// insertions). Each pair is `(Some(i), Some(j))` for a match or
/// substitution, `(Some(i), None)` for a deleted reference word, or
/// `(None, Some(j))` for an inserted hypothesis word, in left-to-right order.
fn edit_alignment(r: &[&str], h: &[&str]) -> Vec<(Option<usize>, Option<usize>)> {
    let (m, n) = (r.len(), h.len());

    // d[i][j] = distance between the first i reference words and the first
    // j hypothesis words.
    let mut d = vec![vec![0usize; n + 1]; m + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, cell) in d[0].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=m {
        for j in 1..=n {
            let sub = d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]);
            let del = d[i - 1][j] + 1;
            let ins = d[i][j - 1] + 1;
            d[i][j] = sub.min(del).min(ins);
        }
    }

    let (mut i, mut j) = (m, n);
    let mut pairs = Vec::with_capacity(m.max(n));
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]) {
            i -= 1;
            j -= 1;
            pairs.push((Some(i), Some(j)));
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            i -= 1;
            pairs.push((Some(i), None));
        } else {
            j -= 1;
            pairs.push((None, Some(j)));
        }
    }
    pairs.reverse();
    pairs
}

/// Word-level edit alignment between two whitespace-split strings; indices
/// refer to the word positions in each string (see [`edit_alignment`]).
pub fn word_alignment(reference: &str, hypothesis: &str) -> Vec<(Option<usize>, Option<usize>)> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    edit_alignment(&r, &h)
}

/// Word error rate: unit-cost Levenshtein distance over whitespace-split
/// words, with the edit mix read off the minimal alignment.
pub fn wer(reference: &str, hypothesis: &str) -> EditStats {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    let (mut subs, mut dels, mut inss) = (0usize, 0usize, 0usize);
    for pair in edit_alignment(&r, &h) {
        match pair {
            (Some(i), Some(j)) => subs += usize::from(r[i] != h[j]),
            (Some(_), None) => dels += 1,
            (None, Some(_)) => inss += 1,
            (None, None) => unreachable!("alignment never pairs two gaps"),
        }
    }

    EditStats {
        substitutions: subs,
        deletions: dels,
        insertions: inss,
        ref_len: r.len(),
        rate: (subs + dels + inss) as f64 / r.len().max(1) as f64,
    }
}

/// Fraction of reference words from `forms` that the hypothesis reproduced
/// exactly, judged under the minimal edit alignment; `None` when no
/// reference word belongs to `forms`. Pools occurrences across all pairs.
pub fn heldout_word_accuracy(
    pairs: &[(String, String)],
    forms: &BTreeSet<String>,
) -> Option<f64> {
    let mut seen = 0usize;
    let mut correct = 0usize;
    for (reference, hypothesis) in pairs {
        let r: Vec<&str> = reference.split_whitespace().collect();
        let h: Vec<&str> = hypothesis.split_whitespace().collect();
        for pair in edit_alignment(&r, &h) {
            if let (Some(i), hyp) = pair {
                if forms.contains(r[i]) {
                    seen += 1;
                    if hyp.is_some_and(|j| h[j] == r[i]) {
                        correct += 1;
                    }
                }
            }
        }
    }
    (seen > 0).then(|| correct as f64 / seen as f64)
}

/// One line of a hypothesis file.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredLine {
    pub index: usize,
    pub rate: f64,
    pub reference: String,
    pub hypothesis: String,
}

/// Write the tab-separated hypothesis file: index, rate, reference text,
/// hypothesis text.
pub fn write_hypothesis_file(path: &Path, lines: &[ScoredLine]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for l in lines {
        writeln!(w, "{}\t{:.6}\t{}\t{}", l.index, l.rate, l.reference, l.hypothesis)?;
    }
    w.flush()?;
    Ok(())
}

/// Parse a hypothesis file back into its lines (used by `score`).
pub fn parse_hypothesis_file(text: &str) -> Result<Vec<ScoredLine>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let mut parts = line.splitn(4, '\t');
        let bad = || Error::Data(format!("hypothesis file line {} is malformed", lineno + 1));
        let index = parts.next().ok_or_else(bad)?.parse::<usize>().map_err(|_| bad())?;
        let rate = parts.next().ok_or_else(bad)?.parse::<f64>().map_err(|_| bad())?;
        let reference = parts.next().ok_or_else(bad)?.to_string();
        let hypothesis = parts.next().ok_or_else(bad)?.to_string();
        out.push(ScoredLine { index, rate, reference, hypothesis });
    }
    Ok(out)
}

/// Corpus-level WER: total edits over total reference words (the standard
/// pooled definition, not a mean of per-utterance rates).
pub fn corpus_wer(pairs: &[(String, String)]) -> f64 {
    let mut edits = 0usize;
    let mut words = 0usize;
    for (reference, hypothesis) in pairs {
        let s = wer(reference, hypothesis);
        edits += s.edits();
        words += s.ref_len;
    }
    edits as f64 / words.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, EmbeddingKind, ModelConfig};
    use rand::Rng;

    #[test]
    fn wer_hand_examples() {
        let s = wer("a b c", "a b c");
        assert_eq!((s.substitutions, s.deletions, s.insertions), (0, 0, 0));
        assert_eq!(s.rate, 0.0);

        let s = wer("a b c", "a x c");
        assert_eq!((s.substitutions, s.deletions, s.insertions), (1, 0, 0));
        assert!((s.rate - 1.0 / 3.0).abs() < 1e-12);

        let s = wer("a b c", "a c");
        assert_eq!((s.substitutions, s.deletions, s.insertions), (0, 1, 0));

        let s = wer("a c", "a b c");
        assert_eq!((s.substitutions, s.deletions, s.insertions), (0, 0, 1));

        // Empty reference: edits are pure insertions over a floor of one.
        let s = wer("", "x y");
        assert_eq!((s.substitutions, s.deletions, s.insertions), (0, 0, 2));
        assert_eq!(s.rate, 2.0);
        assert_eq!(wer("", "").rate, 0.0);

        // Rates above 1 are possible.
        assert!(wer("a", "x y z").rate > 1.0);
    }

    /// An independent oracle: plain edit distance with no backtrace, written
    /// against the textbook recurrence on whole words.
    fn distance_oracle(a: &str, b: &str) -> usize {
        let x: Vec<&str> = a.split_whitespace().collect();
        let y: Vec<&str> = b.split_whitespace().collect();
        let mut prev: Vec<usize> = (0..=y.len()).collect();
        for i in 1..=x.len() {
            let mut cur = vec![i; y.len() + 1];
            for j in 1..=y.len() {
                let cost = usize::from(x[i - 1] != y[j - 1]);
                cur[j] = (prev[j - 1] + cost).min(prev[j] + 1).min(cur[j - 1] + 1);
            }
            prev = cur;
        }
        prev[y.len()]
    }

    fn random_sentence<R: Rng>(rng: &mut R, alphabet: &[&str]) -> String {
        let len = rng.gen_range(0..10);
        (0..len).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn wer_matches_the_dp_oracle_on_500_pairs() {
        let mut rng = crate::rng::stream(2024, "test/wer-pairs");
        let alphabet = ["walk", "walks", "walked", "talk", "talks", "go", "went"];
        for _ in 0..500 {
            let a = random_sentence(&mut rng, &alphabet);
            let b = random_sentence(&mut rng, &alphabet);
            let s = wer(&a, &b);
            assert_eq!(s.edits(), distance_oracle(&a, &b), "{a:?} vs {b:?}");
            // Edit distance itself is symmetric (the S/D/I split need not be).
            assert_eq!(s.edits(), wer(&b, &a).edits());
        }
    }

    #[test]
    fn alignment_agrees_with_wer_and_orders_pairs() {
        // The unique minimal alignment: a matches, b→x substitutes, c
        // matches, d is deleted, e matches.
        let align = word_alignment("a b c d e", "a x c e");
        assert_eq!(
            align,
            vec![
                (Some(0), Some(0)),
                (Some(1), Some(1)),
                (Some(2), Some(2)),
                (Some(3), None),
                (Some(4), Some(3)),
            ]
        );
        assert_eq!(word_alignment("a", "b a"), vec![(None, Some(0)), (Some(0), Some(1))]);

        let mut rng = crate::rng::stream(31, "test/alignment");
        let alphabet = ["walk", "walks", "walked", "go"];
        for _ in 0..200 {
            let a = random_sentence(&mut rng, &alphabet);
            let b = random_sentence(&mut rng, &alphabet);
            let r: Vec<&str> = a.split_whitespace().collect();
            let h: Vec<&str> = b.split_whitespace().collect();
            let (mut s, mut d, mut i) = (0, 0, 0);
            let mut last_r = None;
            let mut last_h = None;
            for pair in word_alignment(&a, &b) {
                match pair {
                    (Some(ri), Some(hj)) => s += usize::from(r[ri] != h[hj]),
                    (Some(_), None) => d += 1,
                    (None, Some(_)) => i += 1,
                    (None, None) => panic!("two gaps"),
                }
                // Indices on each side must appear in strictly increasing order.
                if let (Some(ri), _) = pair {
                    assert!(last_r.is_none_or(|p| ri > p));
                    last_r = Some(ri);
                }
                if let (_, Some(hj)) = pair {
                    assert!(last_h.is_none_or(|p| hj > p));
                    last_h = Some(hj);
                }
            }
            let stats = wer(&a, &b);
            assert_eq!((s, d, i), (stats.substitutions, stats.deletions, stats.insertions));
        }
    }

    #[test]
    fn heldout_accuracy_counts_aligned_matches() {
        let forms: BTreeSet<String> = ["walked".to_string(), "talking".to_string()].into();
        // First pair: "walked" survives, "talking" is mangled.
        // Second pair: "walked" is dropped entirely.
        let pairs = vec![
            ("he walked while talking".to_string(), "he walked while talk".to_string()),
            ("she walked".to_string(), "she".to_string()),
        ];
        let acc = heldout_word_accuracy(&pairs, &forms).unwrap();
        assert!((acc - 1.0 / 3.0).abs() < 1e-12);

        // No held-out occurrences: no score at all rather than a fake zero.
        assert_eq!(heldout_word_accuracy(&pairs, &BTreeSet::new()), None);
        assert_eq!(
            heldout_word_accuracy(&[("walk".into(), "walk".into())], &forms),
            None
        );
    }

    #[test]
    fn edit_distance_satisfies_the_triangle_inequality() {
        let mut rng = crate::rng::stream(7, "test/wer-triangle");
        let alphabet = ["a", "b", "c"];
        for _ in 0..200 {
            let x = random_sentence(&mut rng, &alphabet);
            let y = random_sentence(&mut rng, &alphabet);
            let z = random_sentence(&mut rng, &alphabet);
            assert!(wer(&x, &z).edits() <= wer(&x, &y).edits() + wer(&y, &z).edits());
        }
    }

    fn tiny_model(kind: EmbeddingKind) -> (Model, Params, Vocab) {
        let vocab = Vocab::character();
        let config = ModelConfig {
            vocab_size: vocab.size(),
            n_chars: 31,
            d_x: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            hidden: 3,
            char_embed_dim: 2,
            ca_layers: 1,
            attn_filter_len: 3,
            dropout_p: 0.0,
            embedding: kind,
        };
        let params = init_params(&config, 4);
        (Model::new(config, &vocab).unwrap(), params, vocab)
    }

    fn some_features(frames: usize) -> Tensor {
        let mut rng = crate::rng::stream(9, "test/decode-features");
        let data = (0..frames * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut t = Tensor::from_vec(vec![frames, 2], data).unwrap();
        t.quantize_f32();
        t
    }

    #[test]
    fn zero_parameters_emit_the_lowest_id_until_the_cap() {
        let (model, params, vocab) = tiny_model(EmbeddingKind::Lookup);
        let mut zeroed = params.clone();
        for (_, t) in zeroed.iter_mut() {
            t.data_mut().fill(0.0);
        }
        let hyp = greedy_decode(&model, &zeroed, &vocab, &some_features(3), 7, None).unwrap();
        // A flat posterior ties everywhere; the lowest id is <sos> (0),
        // which is never <eos>, so decoding runs to the cap.
        assert_eq!(hyp.ids, vec![0; 7]);
        assert!(hyp.capped);
        assert_eq!(hyp.log_probs.len(), 7);
        for lp in &hyp.log_probs {
            assert!((lp - (1.0f64 / 31.0).ln()).abs() < 1e-6);
        }
    }

    #[test]
    fn decoding_is_deterministic() {
        for kind in [EmbeddingKind::Lookup, EmbeddingKind::CharAware] {
            let (model, params, vocab) = tiny_model(kind);
            let feats = some_features(5);
            let a = greedy_decode(&model, &params, &vocab, &feats, 50, None).unwrap();
            let b = greedy_decode(&model, &params, &vocab, &feats, 50, None).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn precomputed_table_reproduces_on_the_fly_decoding() {
        let (model, params, vocab) = tiny_model(EmbeddingKind::CharAware);
        let table = model.precompute_table(&params).unwrap();
        for frames in 1..8 {
            let feats = some_features(frames);
            let fly = greedy_decode(&model, &params, &vocab, &feats, 30, None).unwrap();
            let tab = greedy_decode(&model, &params, &vocab, &feats, 30, Some(&table)).unwrap();
            assert_eq!(fly, tab, "frames {frames}");
        }
    }

    #[test]
    fn max_len_must_be_positive() {
        let (model, params, vocab) = tiny_model(EmbeddingKind::Lookup);
        assert!(matches!(
            greedy_decode(&model, &params, &vocab, &some_features(2), 0, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn hypothesis_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hyps.tsv");
        let lines = vec![
            ScoredLine { index: 0, rate: 0.0, reference: "walk on".into(), hypothesis: "walk on".into() },
            ScoredLine { index: 1, rate: 0.5, reference: "go home".into(), hypothesis: "go rome".into() },
        ];
        write_hypothesis_file(&path, &lines).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let back = parse_hypothesis_file(&text).unwrap();
        assert_eq!(back, lines);
        assert!(parse_hypothesis_file("not\ta\tvalid").is_err());
        assert!(parse_hypothesis_file("x\t0.5\ta\tb").is_err());
    }

    #[test]
    fn corpus_wer_pools_edits_over_words() {
        let pairs = vec![
            ("a b".to_string(), "a b".to_string()),
            ("c d".to_string(), "c x".to_string()),
        ];
        // One edit over four reference words.
        assert!((corpus_wer(&pairs) - 0.25).abs() < 1e-12);
        assert_eq!(corpus_wer(&[]), 0.0);
    }
}
