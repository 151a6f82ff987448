//! The paired comparison: train both embedding providers on identical data
//! with identical seeds and put their accuracy, held-out-inflection
//! fidelity, and parameter budgets side by side.
//!
//! Everything here is deterministic; progress strings (the only place wall
//! time may ever appear, and it is not included here either) go through a
//! caller-supplied sink so reports stay byte-stable run to run.

use std::collections::BTreeSet;

use crate::config::ExperimentConfig;
use crate::data::{relabel, Utterance};
use crate::decoding::{corpus_wer, greedy_decode, heldout_word_accuracy, wer, ScoredLine};
use crate::error::{Error, Result};
use crate::model::{count_breakdown, parameter_reduction_rate, init_params, EmbeddingKind, Model};
use crate::training::{train, TrainConfig};
use crate::vocab::Vocab;

/// One trained system: a provider at a seed, scored on the test set.
#[derive(Debug, Clone)]
pub struct ArmOutcome {
    pub embedding: EmbeddingKind,
    pub seed: u64,
    /// Pooled word error rate of the best checkpoint on the test set.
    pub test_wer: f64,
    /// Accuracy on held-out inflected forms, when the test references
    /// contain any.
    pub heldout_accuracy: Option<f64>,
    pub best_epoch: usize,
    pub n_params: usize,
    /// Per-utterance decodes behind the numbers above.
    pub lines: Vec<ScoredLine>,
}

/// Train one provider at one seed and score it on the test set. Both
/// providers see the same utterances in the same shuffled order, and shared
/// parameters are initialized identically because initialization streams
/// are keyed by parameter name.
#[allow(clippy::too_many_arguments)]
pub fn run_arm(
    config: &ExperimentConfig,
    vocab: &Vocab,
    train_set: &[Utterance],
    test_set: &[Utterance],
    heldout_forms: &BTreeSet<String>,
    embedding: EmbeddingKind,
    seed: u64,
    progress: &mut dyn FnMut(&str),
) -> Result<ArmOutcome> {
    let Some(first) = train_set.first() else {
        return Err(Error::Data("training set is empty".into()));
    };
    let d_x = first.features.shape()[1];
    let model_config = config.model.to_model_config(vocab, d_x, embedding);
    let model = Model::new(model_config.clone(), vocab)?;
    let params = init_params(&model_config, seed);
    let train_config = TrainConfig { seed, ..config.train.clone() };

    let label = embedding.as_str();
    let outcome = train(&model, vocab, params, train_set, test_set, &train_config, |stats| {
        progress(&format!(
            "seed {seed} {label}: epoch {} train {:.4} dev {:.4} wer {:.4}",
            stats.epoch, stats.train_loss, stats.dev_loss, stats.dev_wer
        ));
    })?;

    // Score the best checkpoint through the inference path: greedy decoding
    // over the precomputed embedding inventory.
    let table = model.precompute_table(&outcome.best_params)?;
    let mut lines = Vec::with_capacity(test_set.len());
    for (index, utt) in test_set.iter().enumerate() {
        let hyp = greedy_decode(
            &model,
            &outcome.best_params,
            vocab,
            &utt.features,
            config.decode.max_len,
            Some(&table),
        )?;
        let rate = wer(&utt.transcript, &hyp.text).rate;
        lines.push(ScoredLine {
            index,
            rate,
            reference: utt.transcript.clone(),
            hypothesis: hyp.text,
        });
    }
    let pairs: Vec<(String, String)> =
        lines.iter().map(|l| (l.reference.clone(), l.hypothesis.clone())).collect();
    let test_wer = corpus_wer(&pairs);
    let heldout_accuracy = heldout_word_accuracy(&pairs, heldout_forms);

    progress(&format!(
        "seed {seed} {label}: best epoch {} test wer {test_wer:.4}",
        outcome.best_epoch
    ));

    Ok(ArmOutcome {
        embedding,
        seed,
        test_wer,
        heldout_accuracy,
        best_epoch: outcome.best_epoch,
        n_params: count_breakdown(&model_config).total(),
        lines,
    })
}

/// One seed's pair of arms, side by side.
#[derive(Debug, Clone)]
pub struct CompareRow {
    pub seed: u64,
    pub lookup: ArmOutcome,
    pub composed: ArmOutcome,
}

/// The full comparison across seeds.
#[derive(Debug, Clone)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
    pub n_params_lookup: usize,
    pub n_params_composed: usize,
    /// Percentage of lookup-model parameters saved by composition.
    pub reduction_pct: f64,
    pub median_wer_lookup: f64,
    pub median_wer_composed: f64,
    pub median_heldout_lookup: Option<f64>,
    pub median_heldout_composed: Option<f64>,
}

/// Run the paired comparison over at least three distinct seeds. Data and
/// vocabulary are built once and shared by every run; only the training
/// seed varies between rows, and only the embedding provider varies within
/// a row.
pub fn compare(
    config: &ExperimentConfig,
    seeds: &[u64],
    progress: &mut dyn FnMut(&str),
) -> Result<CompareReport> {
    if seeds.len() < 3 {
        return Err(Error::Config(format!(
            "a comparison needs at least 3 seeds, got {}",
            seeds.len()
        )));
    }
    let distinct: BTreeSet<u64> = seeds.iter().copied().collect();
    if distinct.len() != seeds.len() {
        return Err(Error::Config("comparison seeds must be distinct".into()));
    }

    let (mut train_set, mut test_set) = config.data.datasets()?;
    let lines: Vec<String> = train_set.iter().map(|u| u.transcript.clone()).collect();
    let vocab = config.vocab.build(&lines)?;
    relabel(&mut train_set, &vocab);
    relabel(&mut test_set, &vocab);
    let heldout_forms: BTreeSet<String> =
        config.data.holdout.iter().map(|(stem, suffix)| format!("{stem}{suffix}")).collect();
    progress(&format!(
        "corpus: {} train / {} test utterances, {} units",
        train_set.len(),
        test_set.len(),
        vocab.size()
    ));

    let mut rows = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let lookup = run_arm(
            config,
            &vocab,
            &train_set,
            &test_set,
            &heldout_forms,
            EmbeddingKind::Lookup,
            seed,
            progress,
        )?;
        let composed = run_arm(
            config,
            &vocab,
            &train_set,
            &test_set,
            &heldout_forms,
            EmbeddingKind::CharAware,
            seed,
            progress,
        )?;
        rows.push(CompareRow { seed, lookup, composed });
    }

    let n_params_lookup = rows[0].lookup.n_params;
    let n_params_composed = rows[0].composed.n_params;
    let reduction_pct = parameter_reduction_rate(n_params_lookup, n_params_composed);

    let median_wer_lookup = median(rows.iter().map(|r| r.lookup.test_wer));
    let median_wer_composed = median(rows.iter().map(|r| r.composed.test_wer));
    let median_heldout_lookup = median_opt(rows.iter().map(|r| r.lookup.heldout_accuracy));
    let median_heldout_composed = median_opt(rows.iter().map(|r| r.composed.heldout_accuracy));

    Ok(CompareReport {
        rows,
        n_params_lookup,
        n_params_composed,
        reduction_pct,
        median_wer_lookup,
        median_wer_composed,
        median_heldout_lookup,
        median_heldout_composed,
    })
}

/// Median of a non-empty sequence; the mean of the middle two when even.
fn median(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    assert!(n > 0, "median of an empty sequence");
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Median across seeds of a per-seed optional score: present only when
/// every seed produced one (they all score the same references, so this is
/// all-or-nothing in practice).
fn median_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<Option<f64>> = values.collect();
    if v.iter().any(Option::is_none) {
        return None;
    }
    Some(median(v.into_iter().map(Option::unwrap)))
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "n/a".to_string(),
    }
}

impl CompareReport {
    /// The deterministic report: one row per seed, a median row, and the
    /// parameter accounting. Tab-separated so it pastes into anything.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(
            "seed\twer_lookup\twer_char_aware\twer_rel_change_pct\theldout_lookup\theldout_char_aware\n",
        );
        for row in &self.rows {
            out.push_str(&format!(
                "{}\t{:.6}\t{:.6}\t{}\t{}\t{}\n",
                row.seed,
                row.lookup.test_wer,
                row.composed.test_wer,
                fmt_rel_change(row.lookup.test_wer, row.composed.test_wer),
                fmt_opt(row.lookup.heldout_accuracy),
                fmt_opt(row.composed.heldout_accuracy),
            ));
        }
        out.push_str(&format!(
            "median\t{:.6}\t{:.6}\t{}\t{}\t{}\n",
            self.median_wer_lookup,
            self.median_wer_composed,
            fmt_rel_change(self.median_wer_lookup, self.median_wer_composed),
            fmt_opt(self.median_heldout_lookup),
            fmt_opt(self.median_heldout_composed),
        ));
        out.push('\n');
        out.push_str(&format!("params_lookup\t{}\n", self.n_params_lookup));
        out.push_str(&format!("params_char_aware\t{}\n", self.n_params_composed));
        out.push_str(&format!("param_reduction_pct\t{:.2}\n", self.reduction_pct));
        out
    }
}

/// Relative WER change of the composed system against the lookup baseline,
/// in percent; negative is an improvement. Undefined on a perfect baseline.
fn fmt_rel_change(wer_lookup: f64, wer_composed: f64) -> String {
    if wer_lookup == 0.0 {
        "n/a".to_string()
    } else {
        format!("{:.2}", (wer_composed - wer_lookup) / wer_lookup * 100.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig::parse(
            "\
[data]
seed = 5
stems = wa,tu,mi
suffixes = -,s
d_raw = 4
frames_per_char = 1
stack_factor = 2
noise_std = 0.05
n_train = 12
n_test = 4
holdout = wa+s
[vocab]
kind = character
[model]
encoder_layers = 1
decoder_layers = 1
hidden = 8
char_embed_dim = 4
ca_layers = 1
attn_filter_len = 3
dropout_p = 0
[train]
seed = 1
epochs = 2
batch_size = 4
[decode]
max_len = 40
",
        )
        .unwrap()
    }

    #[test]
    fn compare_needs_at_least_three_distinct_seeds() {
        let config = tiny_config();
        let mut sink = |_: &str| {};
        assert!(matches!(compare(&config, &[1, 2], &mut sink), Err(Error::Config(_))));
        assert!(matches!(compare(&config, &[1, 2, 1], &mut sink), Err(Error::Config(_))));
    }

    #[test]
    fn compare_reports_every_seed_and_is_deterministic() {
        let config = tiny_config();
        let mut sink = |_: &str| {};
        let a = compare(&config, &[3, 1, 2], &mut sink).unwrap();
        assert_eq!(a.rows.len(), 3);
        // Rows follow the caller's seed order.
        assert_eq!(a.rows.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![3, 1, 2]);
        for row in &a.rows {
            assert_eq!(row.lookup.seed, row.composed.seed);
            assert!(row.lookup.test_wer.is_finite());
            assert!(row.composed.test_wer.is_finite());
            // The held-out form appears in the fixed test references, so
            // both arms must produce a score, however bad.
            assert!(row.lookup.heldout_accuracy.is_some());
            assert!(row.composed.heldout_accuracy.is_some());
            assert_eq!(row.lookup.lines.len(), 4);
        }
        assert_eq!(a.n_params_lookup, a.rows[0].lookup.n_params);
        assert!(a.reduction_pct.is_finite());

        let b = compare(&config, &[3, 1, 2], &mut sink).unwrap();
        assert_eq!(a.render(), b.render());
        assert!(a.render().starts_with("seed\t"));
        assert!(a.render().contains("param_reduction_pct"));
    }

    #[test]
    fn medians_are_the_usual_order_statistics() {
        assert_eq!(median([3.0, 1.0, 2.0].into_iter()), 2.0);
        assert_eq!(median([4.0, 1.0, 2.0, 3.0].into_iter()), 2.5);
        assert_eq!(median_opt([Some(1.0), Some(3.0), Some(2.0)].into_iter()), Some(2.0));
        assert_eq!(median_opt([Some(1.0), None, Some(2.0)].into_iter()), None);
    }
}
