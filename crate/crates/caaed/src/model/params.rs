//! Named parameter storage, the shape registry, and seeded initialization.
//!
//! Every learnable tensor has a hierarchical name ("encoder.l0.fwd.w_z",
//! "embed.table", ...). The shape registry derives the full name->shape map
//! from a config and is the single source of truth for initialization,
//! parameter counting and checkpoint validation. Initialization draws each
//! tensor from its own named substream, so two models built from the same
//! seed share bit-identical values for every name they have in common — a
//! lookup-table model and a character-aware model differ only in the
//! embedding parameters.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Graph, Tensor, Var};

use super::config::{EmbeddingKind, ModelConfig};

/// The learnable tensors of one model, keyed by name.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    tensors: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is not in the registry"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("parameter {name} is not in the registry"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn total(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub(crate) fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Params { tensors }
    }
}

/// Name -> shape for every learnable tensor implied by `config`.
///
/// The attention input projections have no entries here: they are fixed
/// identity maps realized by simply adding the vectors, so they contribute
/// neither parameters nor gradients.
pub fn parameter_shapes(config: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
    let mut shapes = BTreeMap::new();
    let h = config.hidden;

    let gru = |shapes: &mut BTreeMap<String, Vec<usize>>, prefix: &str, input: usize| {
        for gate in ["z", "r", "n"] {
            shapes.insert(format!("{prefix}.w_{gate}"), vec![h, input + h]);
            shapes.insert(format!("{prefix}.b_{gate}"), vec![h]);
        }
    };

    for l in 0..config.encoder_layers {
        let input = if l == 0 { config.d_x } else { h };
        gru(&mut shapes, &format!("encoder.l{l}.fwd"), input);
        gru(&mut shapes, &format!("encoder.l{l}.bwd"), input);
        shapes.insert(format!("encoder.l{l}.norm.gain"), vec![h]);
        shapes.insert(format!("encoder.l{l}.norm.bias"), vec![h]);
    }

    shapes.insert("attn.v".into(), vec![h]);
    shapes.insert("attn.b_z".into(), vec![h]);
    shapes.insert("attn.filter".into(), vec![h, config.attn_filter_len]);

    for l in 0..config.decoder_layers {
        gru(&mut shapes, &format!("decoder.l{l}"), h);
    }

    shapes.insert("out.w_y".into(), vec![config.vocab_size, h]);
    shapes.insert("out.b_y".into(), vec![config.vocab_size]);

    match config.embedding {
        EmbeddingKind::Lookup => {
            shapes.insert("embed.table".into(), vec![config.vocab_size, h]);
        }
        EmbeddingKind::CharAware => {
            shapes.insert("embed.char_table".into(), vec![config.n_chars, config.char_embed_dim]);
            for l in 0..config.ca_layers {
                let input = if l == 0 { config.char_embed_dim } else { h };
                gru(&mut shapes, &format!("embed.ca.l{l}"), input);
            }
        }
    }
    shapes
}

/// Seeded initialization: weights uniform on (-a, a) with a = sqrt(1/fan_in)
/// (fan_in = trailing dimension), biases zero, layer-norm gain one. Values
/// are rounded to f32 so checkpoints round-trip losslessly.
pub fn init_params(config: &ModelConfig, seed: u64) -> Params {
    let mut tensors = BTreeMap::new();
    for (name, shape) in parameter_shapes(config) {
        let numel: usize = shape.iter().product();
        let data = if is_bias(&name) {
            vec![0.0; numel]
        } else if name.ends_with("norm.gain") {
            vec![1.0; numel]
        } else {
            let fan_in = *shape.last().expect("registry shapes are non-empty") as f64;
            let a = (1.0 / fan_in).sqrt();
            let mut stream = rng::stream(seed, &name);
            (0..numel).map(|_| rand::Rng::gen_range(&mut stream, -a..a)).collect()
        };
        let mut t = Tensor::from_vec(shape, data).expect("registry shapes are consistent");
        t.quantize_f32();
        tensors.insert(name, t);
    }
    Params::from_map(tensors)
}

fn is_bias(name: &str) -> bool {
    name.ends_with(".b_z")
        || name.ends_with(".b_r")
        || name.ends_with(".b_n")
        || name.ends_with(".b_y")
        || name.ends_with("norm.bias")
}

/// Registers parameters as graph leaves on first use, handing back the same
/// node on every later request so gradient contributions from all uses
/// accumulate in one place.
pub struct Binder<'p> {
    params: &'p Params,
    vars: BTreeMap<String, Var>,
}

impl<'p> Binder<'p> {
    pub fn new(params: &'p Params) -> Self {
        Binder { params, vars: BTreeMap::new() }
    }

    pub fn var(&mut self, g: &mut Graph, name: &str) -> Var {
        if let Some(v) = self.vars.get(name) {
            return *v;
        }
        let v = g.param(self.params.get(name));
        self.vars.insert(name.to_string(), v);
        v
    }

    /// Gradients accumulated by a completed backward pass, as name -> tensor.
    /// Parameters the loss never touched get zero gradients.
    pub fn grads(&self, g: &Graph) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.vars {
            let shape = self.params.get(name).shape().to_vec();
            let data = match g.grad(*var) {
                Some(d) => d.to_vec(),
                None => vec![0.0; self.params.get(name).numel()],
            };
            out.insert(name.clone(), Tensor::from_vec(shape, data)?);
        }
        Ok(out)
    }
}

/// Finite-difference check of a whole named parameter set against the tape's
/// analytic gradients.
///
/// `build` must deterministically construct a scalar loss from whatever
/// parameters it binds; it is re-run at 64-bit precision with every bound
/// element perturbed up and down by `step`. Returns the worst relative error
/// max(|analytic − numeric|) / max(1, |analytic|, |numeric|) over all bound
/// elements.
pub fn fd_check<F>(params: &Params, step: f64, mut build: F) -> Result<f64>
where
    F: FnMut(&mut Graph, &mut Binder) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(crate::error::Error::Config(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let eval = |p: &Params, build: &mut F| -> Result<f64> {
        let mut g = Graph::new(crate::tensor::Precision::Double);
        let mut binder = Binder::new(p);
        let loss = build(&mut g, &mut binder)?;
        if g.shape(loss) != [1] {
            return Err(crate::error::Error::Usage(
                "finite-difference check needs a scalar loss".into(),
            ));
        }
        let v = g.scalar_value(loss);
        if !v.is_finite() {
            return Err(crate::error::Error::Numeric("loss is not finite".into()));
        }
        Ok(v)
    };

    let mut g = Graph::new(crate::tensor::Precision::Double);
    let mut binder = Binder::new(params);
    let loss = build(&mut g, &mut binder)?;
    if g.shape(loss) != [1] {
        return Err(crate::error::Error::Usage(
            "finite-difference check needs a scalar loss".into(),
        ));
    }
    g.backward(loss)?;
    let grads = binder.grads(&g)?;

    let mut worst: f64 = 0.0;
    for (name, analytic) in &grads {
        for i in 0..analytic.numel() {
            let mut perturbed = params.clone();
            perturbed.get_mut(name).data_mut()[i] += step;
            let up = eval(&perturbed, &mut build)?;
            perturbed.get_mut(name).data_mut()[i] -= 2.0 * step;
            let down = eval(&perturbed, &mut build)?;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Convenience wrapper: shape-validate a foreign tensor map against the
/// registry (used by checkpoint loading).
pub fn validate_against_registry(
    config: &ModelConfig,
    tensors: &BTreeMap<String, Tensor>,
) -> Result<()> {
    let registry = parameter_shapes(config);
    for (name, shape) in &registry {
        match tensors.get(name) {
            None => return Err(Error::Data(format!("checkpoint is missing tensor {name}"))),
            Some(t) if t.shape() != shape.as_slice() => {
                return Err(Error::Data(format!(
                    "checkpoint tensor {name} has shape {:?}, config implies {shape:?}",
                    t.shape()
                )))
            }
            Some(_) => {}
        }
    }
    for name in tensors.keys() {
        if !registry.contains_key(name) {
            return Err(Error::Data(format!("checkpoint has unexpected tensor {name}")));
        }
    }
    Ok(())
}
