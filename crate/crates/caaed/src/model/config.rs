//! Model hyperparameters.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingKind {
    /// One learned row per output unit.
    Lookup,
    /// Embeddings composed from character sequences by a recurrent network.
    CharAware,
}

impl EmbeddingKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EmbeddingKind::Lookup => "lookup",
            EmbeddingKind::CharAware => "char-aware",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lookup" => Ok(EmbeddingKind::Lookup),
            "char-aware" => Ok(EmbeddingKind::CharAware),
            other => Err(Error::Config(format!("unknown embedding kind {other:?}"))),
        }
    }
}

/// Architecture description. One hidden width `hidden` serves as encoder
/// output, decoder state, attention score space, and embedding dimension —
/// the identity attention projections and the sum-based combinations force
/// them all equal.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Output inventory size d_y.
    pub vocab_size: usize,
    /// Character inventory size (for the character-aware embedding).
    pub n_chars: usize,
    /// Input feature dimension d_x (stacked frames).
    pub d_x: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub hidden: usize,
    /// Character embedding width for the character-aware provider.
    pub char_embed_dim: usize,
    /// Layers in the character-composition recurrence.
    pub ca_layers: usize,
    /// Attention convolution filter length r (odd).
    pub attn_filter_len: usize,
    pub dropout_p: f64,
    pub embedding: EmbeddingKind,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 5 {
            return Err(Error::Config(format!(
                "vocab_size must cover the specials plus content, got {}",
                self.vocab_size
            )));
        }
        for (what, v) in [
            ("n_chars", self.n_chars),
            ("d_x", self.d_x),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("char_embed_dim", self.char_embed_dim),
            ("ca_layers", self.ca_layers),
        ] {
            if v < 1 {
                return Err(Error::Config(format!("{what} must be at least 1, got {v}")));
            }
        }
        if self.hidden < 2 {
            return Err(Error::Config(format!(
                "hidden must be at least 2 for layer normalization, got {}",
                self.hidden
            )));
        }
        if self.attn_filter_len.is_multiple_of(2) || self.attn_filter_len == 0 {
            return Err(Error::Config(format!(
                "attn_filter_len must be odd, got {}",
                self.attn_filter_len
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        Ok(())
    }

    /// The built-in large-vocabulary reference architecture: 240-dim stacked
    /// features, 512 hidden everywhere, 256-dim character embeddings,
    /// 2-layer character recurrence, 2-layer decoder, filter length 15, and a
    /// 30-character inventory for accounting.
    pub fn reference(vocab_size: usize, encoder_layers: usize, embedding: EmbeddingKind) -> Self {
        ModelConfig {
            vocab_size,
            n_chars: 30,
            d_x: 240,
            encoder_layers,
            decoder_layers: 2,
            hidden: 512,
            char_embed_dim: 256,
            ca_layers: 2,
            attn_filter_len: 15,
            dropout_p: 0.1,
            embedding,
        }
    }

    /// Serialize as the checkpoint key=value block (one key per line).
    pub fn to_kv(&self) -> String {
        format!(
            "vocab_size={}\nn_chars={}\nd_x={}\nencoder_layers={}\ndecoder_layers={}\n\
             hidden={}\nchar_embed_dim={}\nca_layers={}\nattn_filter_len={}\ndropout_p={}\n\
             embedding={}\n",
            self.vocab_size,
            self.n_chars,
            self.d_x,
            self.encoder_layers,
            self.decoder_layers,
            self.hidden,
            self.char_embed_dim,
            self.ca_layers,
            self.attn_filter_len,
            self.dropout_p,
            self.embedding.as_str()
        )
    }

    /// Parse the checkpoint key=value block; every key is required, unknown
    /// or repeated keys are data errors.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut seen = std::collections::BTreeMap::new();
        for line in text.lines() {
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("bad config line {line:?}")))?;
            if seen.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Data(format!("repeated config key {k}")));
            }
        }
        let mut take = |k: &str| {
            seen.remove(k).ok_or_else(|| Error::Data(format!("config block is missing {k}")))
        };
        let usize_of = |k: &str, v: String| {
            v.parse::<usize>().map_err(|_| Error::Data(format!("bad value for {k}: {v:?}")))
        };
        let cfg = ModelConfig {
            vocab_size: usize_of("vocab_size", take("vocab_size")?)?,
            n_chars: usize_of("n_chars", take("n_chars")?)?,
            d_x: usize_of("d_x", take("d_x")?)?,
            encoder_layers: usize_of("encoder_layers", take("encoder_layers")?)?,
            decoder_layers: usize_of("decoder_layers", take("decoder_layers")?)?,
            hidden: usize_of("hidden", take("hidden")?)?,
            char_embed_dim: usize_of("char_embed_dim", take("char_embed_dim")?)?,
            ca_layers: usize_of("ca_layers", take("ca_layers")?)?,
            attn_filter_len: usize_of("attn_filter_len", take("attn_filter_len")?)?,
            dropout_p: {
                let v = take("dropout_p")?;
                v.parse::<f64>().map_err(|_| Error::Data(format!("bad value for dropout_p: {v:?}")))?
            },
            embedding: EmbeddingKind::parse(&take("embedding")?)
                .map_err(|e| Error::Data(e.to_string()))?,
        };
        if let Some(k) = seen.keys().next() {
            return Err(Error::Data(format!("unknown config key {k}")));
        }
        cfg.validate().map_err(|e| Error::Data(e.to_string()))?;
        Ok(cfg)
    }
}
