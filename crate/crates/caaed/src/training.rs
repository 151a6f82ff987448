//! Teacher-forced training with scheduled sampling, a label-smoothed
//! cross-entropy objective, adaptive-moment updates, and the epoch loop.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::Utterance;
use crate::decoding::{corpus_wer, greedy_decode, DEFAULT_MAX_LEN};
use crate::error::{Error, Result};
use crate::model::{Binder, Model, Params};
use crate::rng;
use crate::tensor::{Graph, Mode, Precision, Tensor, Var};
use crate::vocab::Vocab;

/// Optimization hyperparameters. Dropout lives with the model configuration
/// (it shapes graph construction inside the network), not here.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Adaptive-moment step size.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Epsilon inside the adaptive-moment denominator.
    pub adam_eps: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Scheduled-sampling probability ramps linearly from `sampling_start`
    /// to `sampling_end` over the first half of the epochs, then holds.
    pub sampling_start: f64,
    pub sampling_end: f64,
    /// Label-smoothing mass ε.
    pub smoothing: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// The documented defaults with an explicit seed.
    pub fn new(seed: u64) -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 5.0,
            batch_size: 8,
            epochs: 30,
            sampling_start: 0.0,
            sampling_end: 0.4,
            smoothing: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        for (what, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{what} must be in [0, 1), got {v}")));
            }
        }
        if !self.adam_eps.is_finite() || self.adam_eps <= 0.0 {
            return Err(Error::Config(format!("adam_eps must be positive, got {}", self.adam_eps)));
        }
        if !self.clip_norm.is_finite() || self.clip_norm <= 0.0 {
            return Err(Error::Config(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.sampling_start)
            || !(0.0..=1.0).contains(&self.sampling_end)
            || self.sampling_start > self.sampling_end
        {
            return Err(Error::Config(format!(
                "sampling schedule must satisfy 0 <= start <= end <= 1, got {} -> {}",
                self.sampling_start, self.sampling_end
            )));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::Config(format!(
                "label-smoothing mass must be in [0, 1), got {}",
                self.smoothing
            )));
        }
        Ok(())
    }

    /// Sampling probability for a 0-based epoch: linear from start to end
    /// across the first half of training, flat at `sampling_end` after.
    pub fn sampling_probability(&self, epoch: usize) -> f64 {
        let ramp = (self.epochs / 2).max(1);
        let frac = (epoch as f64 / ramp as f64).min(1.0);
        self.sampling_start + (self.sampling_end - self.sampling_start) * frac
    }
}

/// Label-smoothed cross-entropy, masked-mean over steps.
///
/// Per step the target distribution puts 1−ε on the reference unit and
/// ε/(d_y−1) on every other unit; the loss is the mean over unmasked steps
/// of the cross-entropy against log-softmax(logits).
pub fn smoothed_ce(
    g: &mut Graph,
    logits: &[Var],
    targets: &[usize],
    eps: f64,
    mask: &[bool],
) -> Result<Var> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Config(format!("label-smoothing mass must be in [0, 1), got {eps}")));
    }
    if logits.len() != targets.len() || logits.len() != mask.len() {
        return Err(Error::Usage(format!(
            "smoothed_ce got {} logits, {} targets, {} mask entries",
            logits.len(),
            targets.len(),
            mask.len()
        )));
    }
    let kept = mask.iter().filter(|&&m| m).count();
    if kept == 0 {
        return Err(Error::Usage("smoothed_ce needs at least one unmasked step".into()));
    }

    let mut total: Option<Var> = None;
    for ((&step, &target), _) in logits.iter().zip(targets).zip(mask).filter(|(_, &m)| m) {
        let d_y = g.shape(step)[0];
        if d_y < 2 {
            return Err(Error::Usage("smoothed_ce needs at least two classes".into()));
        }
        if target >= d_y {
            return Err(Error::Usage(format!("target id {target} out of range for {d_y} units")));
        }
        let mut q = vec![eps / (d_y - 1) as f64; d_y];
        q[target] = 1.0 - eps;
        let q = g.input(&Tensor::from_vec(vec![d_y], q)?);
        let logp = g.log_softmax(step)?;
        let ce = {
            let inner = g.dot(q, logp)?;
            g.affine(inner, -1.0, 0.0)
        };
        total = Some(match total {
            Some(t) => g.add(t, ce)?,
            None => ce,
        });
    }
    let total = total.expect("at least one unmasked step");
    Ok(g.affine(total, 1.0 / kept as f64, 0.0))
}

/// The forward pass of one utterance: per-step logits and the smoothed loss.
pub struct ForwardResult {
    pub logits: Vec<Var>,
    pub loss: Var,
    /// Number of predicted steps (labels minus the leading `<sos>`).
    pub steps: usize,
}

/// Run encode plus one decode step per target unit.
///
/// The input embedding at step t is the reference unit y_{t−1} with
/// probability 1−`sampling_p`, otherwise the model's own argmax prediction
/// from step t−1 (an independent draw per step; ties go to the lowest id).
/// With `sampling_p` = 0 the rng is never consulted for sampling, giving
/// pure teacher forcing.
#[allow(clippy::too_many_arguments)]
pub fn forward_utterance<R: Rng>(
    model: &Model,
    g: &mut Graph,
    binder: &mut Binder,
    utt: &Utterance,
    sampling_p: f64,
    smoothing: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<ForwardResult> {
    if utt.labels.len() < 2 {
        return Err(Error::Data(format!(
            "utterance needs at least <sos> and <eos> labels, got {:?}",
            utt.labels
        )));
    }
    if !(0.0..=1.0).contains(&sampling_p) {
        return Err(Error::Config(format!(
            "sampling probability must be in [0, 1], got {sampling_p}"
        )));
    }
    let enc = model.encode(g, binder, &utt.features, mode, rng)?;
    let mut state = model.initial_state(g, &enc)?;
    let mut w = model.embed(g, binder, utt.labels[0], None)?;
    let targets = &utt.labels[1..];
    let mut logits = Vec::with_capacity(targets.len());
    for (t, &target) in targets.iter().enumerate() {
        let out = model.decode_step(g, binder, &enc, &state, w)?;
        logits.push(out.logits);
        state = out.state;
        if t + 1 < targets.len() {
            let sample = sampling_p > 0.0 && rng.gen::<f64>() < sampling_p;
            let next = if sample { argmax(g.value(out.logits)) } else { target };
            w = model.embed(g, binder, next, None)?;
        }
    }
    let mask = vec![true; targets.len()];
    let loss = smoothed_ce(g, &logits, targets, smoothing, &mask)?;
    Ok(ForwardResult { logits, loss, steps: targets.len() })
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

/// Scale all gradients by clip/norm when their global L2 norm exceeds the
/// ceiling. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for t in grads.values() {
        for v in t.data() {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for t in grads.values_mut() {
            for v in t.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// Adaptive-moment optimizer with bias correction.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: &TrainConfig) -> Self {
        Adam {
            lr: config.lr,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update over every parameter; names missing from `grads` are
    /// treated as zero gradient. Updated tensors are re-rounded to f32 so a
    /// checkpoint written after any number of steps restores bit-exactly.
    pub fn step(&mut self, params: &mut Params, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            let p = params.get_mut(&name);
            let shape = p.shape().to_vec();
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(&shape));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(&shape));
            let zero;
            let grad = match grads.get(&name) {
                Some(t) => {
                    if t.shape() != p.shape() {
                        return Err(Error::dimension("adam_step", t.shape(), p.shape()));
                    }
                    t
                }
                None => {
                    zero = Tensor::zeros(&shape);
                    &zero
                }
            };
            for i in 0..p.numel() {
                let gi = grad.data()[i];
                if !gi.is_finite() {
                    return Err(Error::Numeric(format!("gradient for {name} is not finite")));
                }
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let update = self.lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                p.data_mut()[i] -= update;
            }
            p.quantize_f32();
        }
        Ok(())
    }
}

/// One line of the training log (wall time is deliberately not part of it,
/// so logs are byte-identical across reruns with the same seed).
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_wer: f64,
    pub sampling_p: f64,
}

impl EpochStats {
    pub fn tsv_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.epoch, self.train_loss, self.dev_loss, self.dev_wer, self.sampling_p
        )
    }
}

pub struct TrainOutcome {
    /// Parameters after the final epoch.
    pub final_params: Params,
    /// Parameters of the best epoch by (dev WER, dev loss, earliest).
    pub best_params: Params,
    pub best_epoch: usize,
    pub log: Vec<EpochStats>,
}

/// The optimization loop: per-epoch shuffled mini-batches, per-utterance
/// gradients weighted by step count, global-norm clipping, adaptive-moment
/// updates, then a teacher-forced dev loss and a greedy-decode dev WER.
/// `on_epoch` fires after each epoch's stats are final.
pub fn train(
    model: &Model,
    vocab: &Vocab,
    init: Params,
    train_set: &[Utterance],
    dev_set: &[Utterance],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(Error::Data("training and dev sets must both be non-empty".into()));
    }
    let d_y = model.config().vocab_size;
    for (i, u) in train_set.iter().chain(dev_set).enumerate() {
        if u.labels.len() < 2 || u.labels.iter().any(|&l| l >= d_y) {
            return Err(Error::Data(format!("utterance {i} has labels unusable with this model")));
        }
    }

    let mut params = init;
    let mut adam = Adam::new(config);
    let mut best: Option<(f64, f64, usize, Params)> = None;
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let sampling_p = config.sampling_probability(epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng::stream(config.seed, &format!("train/order/{epoch}")));
        let mut noise = rng::stream(config.seed, &format!("train/noise/{epoch}"));

        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0usize;
        for batch in order.chunks(config.batch_size) {
            let mut accum: BTreeMap<String, Tensor> = BTreeMap::new();
            let mut batch_steps = 0usize;
            for &idx in batch {
                let utt = &train_set[idx];
                let mut g = Graph::new(Precision::Single);
                let mut binder = Binder::new(&params);
                let fwd = forward_utterance(
                    model,
                    &mut g,
                    &mut binder,
                    utt,
                    sampling_p,
                    config.smoothing,
                    Mode::Train,
                    &mut noise,
                )?;
                let loss = g.scalar_value(fwd.loss);
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "training diverged: non-finite loss at epoch {epoch}, utterance {idx}"
                    )));
                }
                g.backward(fwd.loss)?;
                let weight = fwd.steps as f64;
                for (name, grad) in binder.grads(&g)? {
                    let slot =
                        accum.entry(name).or_insert_with(|| Tensor::zeros(grad.shape()));
                    for (a, gv) in slot.data_mut().iter_mut().zip(grad.data()) {
                        *a += weight * gv;
                    }
                }
                batch_steps += fwd.steps;
                epoch_loss += weight * loss;
                epoch_steps += fwd.steps;
            }
            // The batch objective is the mean over all steps in the batch.
            for t in accum.values_mut() {
                for v in t.data_mut() {
                    *v /= batch_steps as f64;
                }
            }
            clip_global_norm(&mut accum, config.clip_norm);
            adam.step(&mut params, &accum)?;
        }
        let train_loss = epoch_loss / epoch_steps as f64;

        let (dev_loss, dev_wer) = evaluate(model, vocab, &params, dev_set, config.smoothing)?;
        let stats = EpochStats { epoch, train_loss, dev_loss, dev_wer, sampling_p };
        let better = match &best {
            None => true,
            Some((w, l, _, _)) => dev_wer < *w || (dev_wer == *w && dev_loss < *l),
        };
        if better {
            best = Some((dev_wer, dev_loss, epoch, params.clone()));
        }
        on_epoch(&stats);
        log.push(stats);
    }

    let (_, _, best_epoch, best_params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome { final_params: params, best_params, best_epoch, log })
}

/// Teacher-forced mean dev loss plus greedy-decode corpus WER.
pub fn evaluate(
    model: &Model,
    vocab: &Vocab,
    params: &Params,
    dev_set: &[Utterance],
    smoothing: f64,
) -> Result<(f64, f64)> {
    let mut total = 0.0;
    let mut steps = 0usize;
    let mut pairs = Vec::with_capacity(dev_set.len());
    let mut unused = rng::stream(0, "eval/unused-dropout");
    for utt in dev_set {
        let mut g = Graph::new(Precision::Single);
        let mut binder = Binder::new(params);
        let fwd = forward_utterance(
            model,
            &mut g,
            &mut binder,
            utt,
            0.0,
            smoothing,
            Mode::Eval,
            &mut unused,
        )?;
        let loss = g.scalar_value(fwd.loss);
        if !loss.is_finite() {
            return Err(Error::Numeric("non-finite dev loss".into()));
        }
        total += fwd.steps as f64 * loss;
        steps += fwd.steps;

        let hyp =
            greedy_decode(model, params, vocab, &utt.features, DEFAULT_MAX_LEN, None)?;
        pairs.push((utt.transcript.clone(), hyp.text));
    }
    Ok((total / steps as f64, corpus_wer(&pairs)))
}
