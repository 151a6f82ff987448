//! Parameter accounting.

use super::config::ModelConfig;
use super::params::parameter_shapes;

/// Learnable-parameter totals per component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CountBreakdown {
    pub encoder: usize,
    pub attention: usize,
    pub decoder: usize,
    /// Readout projection to the unit inventory (W_y, b_y).
    pub output: usize,
    /// Embedding provider: lookup table, or character table plus the
    /// character recurrence.
    pub embedding: usize,
}

impl CountBreakdown {
    pub fn total(&self) -> usize {
        self.encoder + self.attention + self.decoder + self.output + self.embedding
    }

    /// Everything except the embedding provider — identical between the two
    /// providers at the same architecture.
    pub fn non_embedding(&self) -> usize {
        self.total() - self.embedding
    }
}

/// Word-piece inventory size of the reference large-vocabulary systems.
pub const WORD_PIECE_INVENTORY: usize = 29_190;
/// Mixed-unit inventory size of the reference large-vocabulary systems.
pub const MIXED_UNIT_INVENTORY: usize = 33_755;

pub fn count_breakdown(config: &ModelConfig) -> CountBreakdown {
    let mut b = CountBreakdown { encoder: 0, attention: 0, decoder: 0, output: 0, embedding: 0 };
    for (name, shape) in parameter_shapes(config) {
        let n: usize = shape.iter().product();
        let bucket = if name.starts_with("encoder.") {
            &mut b.encoder
        } else if name.starts_with("attn.") {
            &mut b.attention
        } else if name.starts_with("decoder.") {
            &mut b.decoder
        } else if name.starts_with("out.") {
            &mut b.output
        } else {
            &mut b.embedding
        };
        *bucket += n;
    }
    b
}

/// Relative shrinkage (percent) of the composed-embedding model against the
/// lookup model: (N_lookup - N_composed) / N_lookup * 100.
pub fn parameter_reduction_rate(n_lookup: usize, n_composed: usize) -> f64 {
    (n_lookup as f64 - n_composed as f64) / n_lookup as f64 * 100.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::EmbeddingKind;

    fn within(actual: f64, expected: f64, rel: f64) -> bool {
        (actual - expected).abs() <= rel * expected.abs()
    }

    /// Counts for the architecture reported in the source experiments, by
    /// unit inventory size, encoder depth, and embedding provider.
    fn reference_total(vocab: usize, layers: usize, kind: EmbeddingKind) -> CountBreakdown {
        count_breakdown(&ModelConfig::reference(vocab, layers, kind))
    }

    #[test]
    fn embedding_savings_match_published_deltas() {
        for (vocab, expected_delta_millions) in [(29190usize, 12.2f64), (33755, 14.5)] {
            for layers in [4, 6] {
                let lookup = reference_total(vocab, layers, EmbeddingKind::Lookup);
                let composed = reference_total(vocab, layers, EmbeddingKind::CharAware);
                assert_eq!(lookup.non_embedding(), composed.non_embedding());
                let delta = lookup.total() - composed.total();
                // The savings are exactly the lookup table minus the
                // character machinery, independent of encoder depth.
                assert_eq!(delta, vocab * 512 - (30 * 256 + 2_755_584));
                assert!(
                    within(delta as f64 / 1e6, expected_delta_millions, 0.02),
                    "delta {delta} vs {expected_delta_millions}M"
                );
            }
        }
    }

    #[test]
    fn character_machinery_sizes() {
        let b = reference_total(29190, 4, EmbeddingKind::CharAware);
        // 30 characters x 256 dims, plus a 2-layer 512-unit recurrence over
        // 256-dim inputs.
        assert_eq!(b.embedding, 30 * 256 + 2_755_584);
        assert_eq!(b.embedding, 2_763_264);
        let lookup = reference_total(29190, 4, EmbeddingKind::Lookup);
        assert_eq!(lookup.embedding, 29190 * 512);
    }

    #[test]
    fn totals_track_published_sizes() {
        // (vocab, layers, kind, published millions)
        let rows = [
            (29190, 4, EmbeddingKind::Lookup, 44.9),
            (29190, 6, EmbeddingKind::Lookup, 52.2),
            (29190, 4, EmbeddingKind::CharAware, 32.7),
            (29190, 6, EmbeddingKind::CharAware, 39.0),
            (33755, 4, EmbeddingKind::Lookup, 49.5),
            (33755, 6, EmbeddingKind::Lookup, 55.8),
            (33755, 4, EmbeddingKind::CharAware, 35.0),
            (33755, 6, EmbeddingKind::CharAware, 41.3),
        ];
        for (vocab, layers, kind, published) in rows {
            let total = reference_total(vocab, layers, kind).total() as f64 / 1e6;
            assert!(within(total, published, 0.20), "{total}M vs {published}M");
        }
    }

    #[test]
    fn reduction_rates_track_published_rates() {
        let rows = [(29190, 4, 27.1), (29190, 6, 23.8), (33755, 4, 29.3), (33755, 6, 26.0)];
        for (vocab, layers, published) in rows {
            let lookup = reference_total(vocab, layers, EmbeddingKind::Lookup).total();
            let composed = reference_total(vocab, layers, EmbeddingKind::CharAware).total();
            let prr = parameter_reduction_rate(lookup, composed);
            assert!((prr - published).abs() < 0.5, "PRR {prr} vs {published}");
        }
    }

    #[test]
    fn breakdown_sums_to_registry_total() {
        let cfg = ModelConfig::reference(29190, 4, EmbeddingKind::CharAware);
        let from_registry: usize =
            parameter_shapes(&cfg).values().map(|s| s.iter().product::<usize>()).sum();
        assert_eq!(count_breakdown(&cfg).total(), from_registry);
    }
}
