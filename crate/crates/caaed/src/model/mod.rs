//! The encoder–attention–decoder network.
//!
//! A pyramid-free bidirectional GRU encoder turns a feature matrix into one
//! vector per frame; a location-aware attention mixes those vectors into a
//! context; a unidirectional GRU decoder consumes the previous output-unit
//! embedding plus the previous context and emits logits over the unit
//! inventory. Output-unit embeddings come from one of two interchangeable
//! providers: a learned lookup table, or a character-level recurrence that
//! composes each unit's embedding from its spelling.
//!
//! Every hidden space (encoder output, decoder state, attention score space,
//! embedding) shares one width: the attention input projections are fixed
//! identity maps, realized here by simply adding the vectors together, so
//! they carry no parameters and receive no gradients; and the decoder input
//! and readout combine vectors by summation, never concatenation.

mod checkpoint;
mod config;
mod count;
mod params;

pub use checkpoint::{parse_checkpoint, read_checkpoint, write_checkpoint, Checkpoint};
pub use config::{EmbeddingKind, ModelConfig};
pub use count::{
    count_breakdown, parameter_reduction_rate, CountBreakdown, MIXED_UNIT_INVENTORY,
    WORD_PIECE_INVENTORY,
};
pub use params::{fd_check, init_params, parameter_shapes, validate_against_registry, Binder, Params};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Mode, Tensor, Var};
use crate::vocab::Vocab;
use rand::Rng;

/// Epsilon inside the layer-norm variance square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Encoder output for one utterance.
pub struct Encoded {
    /// One vector per frame, each `[hidden]`.
    pub rows: Vec<Var>,
    /// The same vectors stacked as an `[frames, hidden]` matrix.
    pub matrix: Var,
}

/// Recurrent decoder state carried between output steps.
#[derive(Clone)]
pub struct DecoderState {
    /// Per-layer GRU hidden states, each `[hidden]`.
    pub layers: Vec<Var>,
    /// Attention weights over the frames, `[frames]`.
    pub attn: Var,
    /// Attention context vector, `[hidden]`.
    pub context: Var,
}

/// One decoder step: the next state and the logits it produced.
pub struct StepOutput {
    pub state: DecoderState,
    /// Unnormalized scores over the unit inventory, `[vocab_size]`.
    pub logits: Var,
}

pub struct Model {
    config: ModelConfig,
    /// Character-id spelling of every output unit, indexed by unit id.
    char_seqs: Vec<Vec<usize>>,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: &Vocab) -> Result<Model> {
        config.validate()?;
        if config.vocab_size != vocab.size() {
            return Err(Error::Config(format!(
                "config says {} output units but the vocabulary has {}",
                config.vocab_size,
                vocab.size()
            )));
        }
        if config.n_chars != vocab.char_inventory().len() {
            return Err(Error::Config(format!(
                "config says {} characters but the vocabulary alphabet has {}",
                config.n_chars,
                vocab.char_inventory().len()
            )));
        }
        let mut char_seqs = Vec::with_capacity(vocab.size());
        for u in 0..vocab.size() {
            let seq = vocab.char_ids(u)?.to_vec();
            if seq.iter().any(|&c| c >= config.n_chars) {
                return Err(Error::Config(format!(
                    "unit {u} has a character id outside the {}-character alphabet",
                    config.n_chars
                )));
            }
            char_seqs.push(seq);
        }
        Ok(Model { config, char_seqs })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// One GRU cell step with combined input⊕state weight matrices and a
    /// single bias per gate:
    ///   z = σ(W_z·[x;h] + b_z)
    ///   r = σ(W_r·[x;h] + b_r)
    ///   n = tanh(W_n·[x; r⊙h] + b_n)
    ///   h' = (1−z)⊙n + z⊙h
    fn gru_step(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        prefix: &str,
        x: Var,
        h: Var,
    ) -> Result<Var> {
        let gate = |g: &mut Graph, binder: &mut Binder, name: &str, joined: Var| -> Result<Var> {
            let w = binder.var(g, &format!("{prefix}.w_{name}"));
            let b = binder.var(g, &format!("{prefix}.b_{name}"));
            let t = g.matmul(w, joined)?;
            g.add(t, b)
        };
        let xh = g.concat(x, h)?;
        let z = {
            let t = gate(g, binder, "z", xh)?;
            g.sigmoid(t)
        };
        let r = {
            let t = gate(g, binder, "r", xh)?;
            g.sigmoid(t)
        };
        let rh = g.mul(r, h)?;
        let xrh = g.concat(x, rh)?;
        let n = {
            let t = gate(g, binder, "n", xrh)?;
            g.tanh(t)
        };
        let keep = g.mul(z, h)?;
        let update = {
            let one_minus_z = g.affine(z, -1.0, 1.0);
            g.mul(one_minus_z, n)?
        };
        g.add(update, keep)
    }

    /// Run the bidirectional encoder over a `[frames, d_x]` feature matrix.
    ///
    /// Each layer runs one forward and one backward GRU over its input
    /// sequence, sums the two direction states per frame, and layer-norms the
    /// sum. Dropout is applied between layers (never after the last) in
    /// train mode.
    pub fn encode<R: Rng>(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        features: &Tensor,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Encoded> {
        let shape = features.shape();
        if shape.len() != 2 || shape[1] != self.config.d_x {
            return Err(Error::dimension("encode", shape, &[0, self.config.d_x]));
        }
        let frames = shape[0];
        let h = self.config.hidden;

        let x_mat = g.input(features);
        let mut inputs: Vec<Var> = (0..frames).map(|i| g.row(x_mat, i)).collect::<Result<_>>()?;

        for l in 0..self.config.encoder_layers {
            let zero = g.input(&Tensor::zeros(&[h]));
            let fwd = format!("encoder.l{l}.fwd");
            let mut state = zero;
            let mut fwd_states = Vec::with_capacity(frames);
            for &input in &inputs {
                state = self.gru_step(g, binder, &fwd, input, state)?;
                fwd_states.push(state);
            }
            let bwd = format!("encoder.l{l}.bwd");
            let mut state = zero;
            let mut bwd_states = vec![zero; frames];
            for i in (0..frames).rev() {
                state = self.gru_step(g, binder, &bwd, inputs[i], state)?;
                bwd_states[i] = state;
            }
            let gain = binder.var(g, &format!("encoder.l{l}.norm.gain"));
            let bias = binder.var(g, &format!("encoder.l{l}.norm.bias"));
            let mut outs = Vec::with_capacity(frames);
            for i in 0..frames {
                let summed = g.add(fwd_states[i], bwd_states[i])?;
                outs.push(g.layer_norm(summed, gain, bias, LAYER_NORM_EPS)?);
            }
            if l + 1 < self.config.encoder_layers {
                for o in outs.iter_mut() {
                    *o = g.dropout(*o, self.config.dropout_p, mode, rng)?;
                }
            }
            inputs = outs;
        }
        let matrix = g.stack_rows(&inputs)?;
        Ok(Encoded { rows: inputs, matrix })
    }

    /// Location-aware attention. The previous weights are convolved with a
    /// learned filter bank to give one location feature per frame; scores are
    ///   z_i = v · ReLU(h_i + s + f_i + b)
    /// (the three inputs land in the same space because their projections are
    /// fixed identities), the weights are their softmax, and the context is
    /// the weight-averaged encoder output.
    pub fn attend(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        enc: &Encoded,
        s_t: Var,
        a_prev: Var,
    ) -> Result<(Var, Var)> {
        let filter = binder.var(g, "attn.filter");
        let v = binder.var(g, "attn.v");
        let b_z = binder.var(g, "attn.b_z");
        let f = g.conv1d_same(a_prev, filter)?;
        let hf = g.add(enc.matrix, f)?;
        let hfs = g.add_rows(hf, s_t)?;
        let hfsb = g.add_rows(hfs, b_z)?;
        let act = g.relu(hfsb);
        let scores = g.matmul(act, v)?;
        let a_t = g.softmax(scores)?;
        let g_t = g.matmul(a_t, enc.matrix)?;
        Ok((a_t, g_t))
    }

    /// State before the first output step: zero GRU states, uniform attention
    /// weights, zero context.
    pub fn initial_state(&self, g: &mut Graph, enc: &Encoded) -> Result<DecoderState> {
        let frames = enc.rows.len();
        let h = self.config.hidden;
        let layers =
            (0..self.config.decoder_layers).map(|_| g.input(&Tensor::zeros(&[h]))).collect();
        let uniform = Tensor::from_vec(vec![frames], vec![1.0 / frames as f64; frames])?;
        Ok(DecoderState {
            layers,
            attn: g.input(&uniform),
            context: g.input(&Tensor::zeros(&[h])),
        })
    }

    /// One decoder step. The GRU stack consumes the sum of the previous unit
    /// embedding and the previous context; its top state queries the
    /// attention; the logits read out the sum of state and fresh context:
    ///   s_t = GRU(s_{t-1}, w_{t-1} + g_{t-1})
    ///   a_t, g_t = attend(s_t, a_{t-1})
    ///   logits = W_y·(s_t + g_t) + b_y
    pub fn decode_step(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        enc: &Encoded,
        state: &DecoderState,
        w_prev: Var,
    ) -> Result<StepOutput> {
        let mut x = g.add(w_prev, state.context)?;
        let mut layers = Vec::with_capacity(self.config.decoder_layers);
        for l in 0..self.config.decoder_layers {
            let next = self.gru_step(g, binder, &format!("decoder.l{l}"), x, state.layers[l])?;
            layers.push(next);
            x = next;
        }
        let s_t = *layers.last().expect("decoder has at least one layer");
        let (a_t, g_t) = self.attend(g, binder, enc, s_t, state.attn)?;
        let w_y = binder.var(g, "out.w_y");
        let b_y = binder.var(g, "out.b_y");
        let readout = g.add(s_t, g_t)?;
        let logits = {
            let t = g.matmul(w_y, readout)?;
            g.add(t, b_y)?
        };
        Ok(StepOutput { state: DecoderState { layers, attn: a_t, context: g_t }, logits })
    }

    /// Embedding of one output unit.
    ///
    /// With a precomputed `table` the embedding is just that row. Otherwise
    /// the lookup provider reads a row of its parameter table, and the
    /// character-aware provider composes the unit's spelling on the fly.
    pub fn embed(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        unit_id: usize,
        table: Option<Var>,
    ) -> Result<Var> {
        if unit_id >= self.config.vocab_size {
            return Err(Error::Usage(format!(
                "unit id {unit_id} out of range for {} units",
                self.config.vocab_size
            )));
        }
        if let Some(t) = table {
            return g.row(t, unit_id);
        }
        match self.config.embedding {
            EmbeddingKind::Lookup => {
                let t = binder.var(g, "embed.table");
                g.row(t, unit_id)
            }
            EmbeddingKind::CharAware => self.compose_char(g, binder, unit_id),
        }
    }

    /// Run the character recurrence over a unit's spelling from a fresh zero
    /// state; the final top-layer state is the embedding. The state reset
    /// makes every unit's embedding independent of what was embedded before.
    fn compose_char(&self, g: &mut Graph, binder: &mut Binder, unit_id: usize) -> Result<Var> {
        let table = binder.var(g, "embed.char_table");
        let h = self.config.hidden;
        let mut states: Vec<Var> =
            (0..self.config.ca_layers).map(|_| g.input(&Tensor::zeros(&[h]))).collect();
        for &c in &self.char_seqs[unit_id] {
            let mut x = g.row(table, c)?;
            for (l, state) in states.iter_mut().enumerate() {
                let next = self.gru_step(g, binder, &format!("embed.ca.l{l}"), x, *state)?;
                *state = next;
                x = next;
            }
        }
        Ok(*states.last().expect("character recurrence has at least one layer"))
    }

    /// Materialize the whole embedding inventory as a `[vocab_size, hidden]`
    /// table. For the character-aware provider each row is composed with
    /// exactly the ops and precision used on the fly, so decoding from the
    /// table reproduces on-the-fly decoding bit for bit.
    pub fn precompute_table(&self, params: &Params) -> Result<Tensor> {
        use crate::tensor::Precision;
        let h = self.config.hidden;
        match self.config.embedding {
            EmbeddingKind::Lookup => Ok(params.get("embed.table").clone()),
            EmbeddingKind::CharAware => {
                let mut data = Vec::with_capacity(self.config.vocab_size * h);
                for u in 0..self.config.vocab_size {
                    let mut g = Graph::new(Precision::Single);
                    let mut binder = Binder::new(params);
                    let e = self.compose_char(&mut g, &mut binder, u)?;
                    data.extend_from_slice(g.value(e));
                }
                Tensor::from_vec(vec![self.config.vocab_size, h], data)
            }
        }
    }
}
