//! Recorded-operation graph: forward primitives plus their backward rules.
//!
//! Every primitive pushes one node holding the op, its output value and, after
//! [`Graph::backward`], an accumulated gradient. Nodes are appended in
//! execution order, so the node list is already topologically sorted and the
//! backward pass is a single reverse scan that visits each node exactly once.

use rand::Rng;

use crate::error::{Error, Result};

use super::{Mode, Precision, Tensor};

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Affine { x: usize, scale: f64 },
    Relu { x: usize },
    Tanh { x: usize },
    Sigmoid { x: usize },
    Concat { a: usize, b: usize },
    MatMat { a: usize, b: usize },
    MatVec { a: usize, x: usize },
    VecMat { x: usize, a: usize },
    StackRows { rows: Vec<usize> },
    Row { m: usize, index: usize },
    AddRows { m: usize, v: usize },
    Softmax { x: usize, valid: Option<Vec<bool>> },
    LogSoftmax { x: usize },
    Conv1dSame { signal: usize, filter: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, inv_std: f64, xhat: Vec<f64> },
    /// `mask` holds the already-scaled keep factors (0 or 1/(1-p)).
    Dropout { x: usize, mask: Vec<f64> },
    Sum { x: usize },
    Dot { a: usize, b: usize },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Recorded computation: an append-only list of primitive applications.
///
/// Recording is confined to one execution context (`&mut self` everywhere);
/// node values are immutable once pushed and gradients are only written during
/// the single permitted [`Graph::backward`] pass.
pub struct Graph {
    precision: Precision,
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Graph {
            precision,
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.id].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.id].value
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.id].value.len(), 1);
        self.nodes[v.id].value[0]
    }

    /// Accumulated gradient, present only after [`Graph::backward`] reached
    /// this node. Nodes created without `requires_grad` never hold one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.id].grad.as_deref()
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::from_vec(self.nodes[v.id].shape.clone(), self.nodes[v.id].value.clone())
            .expect("graph node holds a consistent shape")
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, mut value: Vec<f64>, needs_grad: bool) -> Var {
        for v in &mut value {
            *v = self.precision.quantize(*v);
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            shape,
            value,
            needs_grad,
            grad: None,
        });
        Var { id }
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Constant leaf: participates in forward compute, never accumulates
    /// gradient.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), false)
    }

    /// Learnable leaf: receives gradient during [`Graph::backward`].
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), true)
    }

    // ── Elementwise ──────────────────────────────────────────────────

    /// Elementwise sum. Shapes must match exactly, or one side must be a
    /// single-element tensor which is broadcast over the other.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("add", a, b)
    }

    /// Elementwise product, with the same broadcast rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("mul", a, b)
    }

    /// `a - b`, composed from the elementwise primitives.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let neg = self.affine(b, -1.0, 0.0);
        self.add(a, neg)
    }

    fn binary_elementwise(&mut self, which: &'static str, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.nodes[a.id].shape.clone(), self.nodes[b.id].shape.clone());
        let (na, nb) = (self.nodes[a.id].value.len(), self.nodes[b.id].value.len());
        let out_shape = if sa == sb {
            sa.clone()
        } else if na == 1 {
            sb.clone()
        } else if nb == 1 {
            sa.clone()
        } else {
            return Err(Error::dimension(
                if which == "add" { "add" } else { "mul" },
                &sa,
                &sb,
            ));
        };
        let va = &self.nodes[a.id].value;
        let vb = &self.nodes[b.id].value;
        let n = out_shape.iter().product();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let x = va[if na == 1 { 0 } else { i }];
            let y = vb[if nb == 1 { 0 } else { i }];
            out.push(match which {
                "add" => x + y,
                _ => x * y,
            });
        }
        let needs = self.needs(a.id) || self.needs(b.id);
        let op = if which == "add" {
            Op::Add { a: a.id, b: b.id }
        } else {
            Op::Mul { a: a.id, b: b.id }
        };
        Ok(self.push(op, out_shape, out, needs))
    }

    /// Elementwise `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out: Vec<f64> = self.nodes[x.id].value.iter().map(|v| scale * v + shift).collect();
        let shape = self.nodes[x.id].shape.clone();
        let needs = self.needs(x.id);
        self.push(Op::Affine { x: x.id, scale }, shape, out, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.nodes[x.id].value.iter().map(|v| v.max(0.0)).collect();
        let shape = self.nodes[x.id].shape.clone();
        let needs = self.needs(x.id);
        self.push(Op::Relu { x: x.id }, shape, out, needs)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.nodes[x.id].value.iter().map(|v| v.tanh()).collect();
        let shape = self.nodes[x.id].shape.clone();
        let needs = self.needs(x.id);
        self.push(Op::Tanh { x: x.id }, shape, out, needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self
            .nodes[x.id]
            .value
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let shape = self.nodes[x.id].shape.clone();
        let needs = self.needs(x.id);
        self.push(Op::Sigmoid { x: x.id }, shape, out, needs)
    }

    // ── Structure ────────────────────────────────────────────────────

    /// Concatenation of two vectors.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.nodes[a.id].shape.clone(), self.nodes[b.id].shape.clone());
        if sa.len() != 1 || sb.len() != 1 {
            return Err(Error::dimension("concat", &sa, &sb));
        }
        let mut out = self.nodes[a.id].value.clone();
        out.extend_from_slice(&self.nodes[b.id].value);
        let n = out.len();
        let needs = self.needs(a.id) || self.needs(b.id);
        Ok(self.push(Op::Concat { a: a.id, b: b.id }, vec![n], out, needs))
    }

    /// Stack equal-length vectors as the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::Usage("stack_rows needs at least one row".into()));
        }
        let d = self.nodes[rows[0].id].value.len();
        let mut out = Vec::with_capacity(rows.len() * d);
        for r in rows {
            let shape = &self.nodes[r.id].shape;
            if shape.len() != 1 || self.nodes[r.id].value.len() != d {
                return Err(Error::dimension("stack_rows", &[d], shape));
            }
            out.extend_from_slice(&self.nodes[r.id].value);
        }
        let needs = rows.iter().any(|r| self.needs(r.id));
        let ids: Vec<usize> = rows.iter().map(|r| r.id).collect();
        Ok(self.push(Op::StackRows { rows: ids }, vec![rows.len(), d], out, needs))
    }

    /// Row `index` of a matrix, as a vector.
    pub fn row(&mut self, m: Var, index: usize) -> Result<Var> {
        let shape = self.nodes[m.id].shape.clone();
        if shape.len() != 2 {
            return Err(Error::dimension("row", &shape, &[]));
        }
        if index >= shape[0] {
            return Err(Error::Usage(format!(
                "row index {index} out of range for {} rows",
                shape[0]
            )));
        }
        let d = shape[1];
        let out = self.nodes[m.id].value[index * d..(index + 1) * d].to_vec();
        let needs = self.needs(m.id);
        Ok(self.push(Op::Row { m: m.id, index }, vec![d], out, needs))
    }

    /// Add a vector to every row of a matrix.
    pub fn add_rows(&mut self, m: Var, v: Var) -> Result<Var> {
        let sm = self.nodes[m.id].shape.clone();
        let sv = self.nodes[v.id].shape.clone();
        if sm.len() != 2 || sv.len() != 1 || sm[1] != sv[0] {
            return Err(Error::dimension("add_rows", &sm, &sv));
        }
        let (rows, d) = (sm[0], sm[1]);
        let mut out = self.nodes[m.id].value.clone();
        for i in 0..rows {
            for j in 0..d {
                out[i * d + j] += self.nodes[v.id].value[j];
            }
        }
        let needs = self.needs(m.id) || self.needs(v.id);
        Ok(self.push(Op::AddRows { m: m.id, v: v.id }, sm, out, needs))
    }

    // ── Linear algebra ───────────────────────────────────────────────

    /// Matrix product. Accepts `[m,k] x [k,n]`, matrix-vector `[m,k] x [k]`
    /// and vector-matrix `[k] x [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.nodes[a.id].shape.clone();
        let sb = self.nodes[b.id].shape.clone();
        match (sa.len(), sb.len()) {
            (2, 2) => {
                let (m, k) = (sa[0], sa[1]);
                let (k2, n) = (sb[0], sb[1]);
                if k != k2 {
                    return Err(Error::dimension("matmul", &sa, &sb));
                }
                let va = &self.nodes[a.id].value;
                let vb = &self.nodes[b.id].value;
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for p in 0..k {
                        let aip = va[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            out[i * n + j] += aip * vb[p * n + j];
                        }
                    }
                }
                let needs = self.needs(a.id) || self.needs(b.id);
                Ok(self.push(Op::MatMat { a: a.id, b: b.id }, vec![m, n], out, needs))
            }
            (2, 1) => {
                let (m, k) = (sa[0], sa[1]);
                if k != sb[0] {
                    return Err(Error::dimension("matmul", &sa, &sb));
                }
                let va = &self.nodes[a.id].value;
                let vx = &self.nodes[b.id].value;
                let mut out = vec![0.0; m];
                for i in 0..m {
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += va[i * k + p] * vx[p];
                    }
                    out[i] = acc;
                }
                let needs = self.needs(a.id) || self.needs(b.id);
                Ok(self.push(Op::MatVec { a: a.id, x: b.id }, vec![m], out, needs))
            }
            (1, 2) => {
                let k = sa[0];
                let (k2, n) = (sb[0], sb[1]);
                if k != k2 {
                    return Err(Error::dimension("matmul", &sa, &sb));
                }
                let vx = &self.nodes[a.id].value;
                let va = &self.nodes[b.id].value;
                let mut out = vec![0.0; n];
                for p in 0..k {
                    let xp = vx[p];
                    if xp == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        out[j] += xp * va[p * n + j];
                    }
                }
                let needs = self.needs(a.id) || self.needs(b.id);
                Ok(self.push(Op::VecMat { x: a.id, a: b.id }, vec![n], out, needs))
            }
            _ => Err(Error::dimension("matmul", &sa, &sb)),
        }
    }

    /// Dot product of two equal-length vectors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.nodes[a.id].shape.clone();
        let sb = self.nodes[b.id].shape.clone();
        if sa.len() != 1 || sa != sb {
            return Err(Error::dimension("dot", &sa, &sb));
        }
        let out: f64 = self.nodes[a.id]
            .value
            .iter()
            .zip(&self.nodes[b.id].value)
            .map(|(x, y)| x * y)
            .sum();
        let needs = self.needs(a.id) || self.needs(b.id);
        Ok(self.push(Op::Dot { a: a.id, b: b.id }, vec![1], vec![out], needs))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let out: f64 = self.nodes[x.id].value.iter().sum();
        let needs = self.needs(x.id);
        self.push(Op::Sum { x: x.id }, vec![1], vec![out], needs)
    }

    // ── Softmax family ───────────────────────────────────────────────

    /// Numerically stable softmax over a vector (max subtraction).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, None)
    }

    /// Softmax restricted to entries where `valid` is true; masked entries
    /// get probability zero (the score is treated as negative infinity).
    pub fn softmax_masked(&mut self, x: Var, valid: &[bool]) -> Result<Var> {
        self.softmax_impl(x, Some(valid.to_vec()))
    }

    fn softmax_impl(&mut self, x: Var, valid: Option<Vec<bool>>) -> Result<Var> {
        let shape = self.nodes[x.id].shape.clone();
        if shape.len() != 1 {
            return Err(Error::dimension("softmax", &shape, &[]));
        }
        let n = shape[0];
        if let Some(v) = &valid {
            if v.len() != n {
                return Err(Error::dimension("softmax mask", &shape, &[v.len()]));
            }
            if !v.iter().any(|&b| b) {
                return Err(Error::Usage("softmax mask excludes every entry".into()));
            }
        }
        let vx = &self.nodes[x.id].value;
        if vx.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax input contains NaN or Inf".into()));
        }
        let is_valid = |i: usize| valid.as_ref().is_none_or(|v| v[i]);
        let mut max = f64::NEG_INFINITY;
        for (i, &v) in vx.iter().enumerate() {
            if is_valid(i) && v > max {
                max = v;
            }
        }
        let mut out = vec![0.0; n];
        let mut total = 0.0;
        for i in 0..n {
            if is_valid(i) {
                out[i] = (vx[i] - max).exp();
                total += out[i];
            }
        }
        for o in &mut out {
            *o /= total;
        }
        let needs = self.needs(x.id);
        Ok(self.push(Op::Softmax { x: x.id, valid }, shape, out, needs))
    }

    /// `x - logsumexp(x)` over a vector, stable under large scores.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.nodes[x.id].shape.clone();
        if shape.len() != 1 {
            return Err(Error::dimension("log_softmax", &shape, &[]));
        }
        let vx = &self.nodes[x.id].value;
        if vx.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("log_softmax input contains NaN or Inf".into()));
        }
        let max = vx.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + vx.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let out: Vec<f64> = vx.iter().map(|v| v - lse).collect();
        let needs = self.needs(x.id);
        Ok(self.push(Op::LogSoftmax { x: x.id }, shape, out, needs))
    }

    // ── Network primitives ───────────────────────────────────────────

    /// Same-length 1-D convolution of a signal with a bank of filters.
    ///
    /// `filter` has one row per output channel and odd length `r`; the signal
    /// is zero-padded by `(r-1)/2` on both ends so the output keeps the input
    /// length. Output element `[i, c]` is the channel-`c` filter applied to
    /// the padded window centred on `i`.
    pub fn conv1d_same(&mut self, signal: Var, filter: Var) -> Result<Var> {
        let ss = self.nodes[signal.id].shape.clone();
        let sf = self.nodes[filter.id].shape.clone();
        if ss.len() != 1 || sf.len() != 2 {
            return Err(Error::dimension("conv1d_same", &ss, &sf));
        }
        let (channels, r) = (sf[0], sf[1]);
        if r % 2 == 0 {
            return Err(Error::Config(format!(
                "conv1d_same filter length must be odd, got {r}"
            )));
        }
        let len = ss[0];
        let pad = (r - 1) / 2;
        let vs = &self.nodes[signal.id].value;
        let vf = &self.nodes[filter.id].value;
        let mut out = vec![0.0; len * channels];
        for i in 0..len {
            for c in 0..channels {
                let mut acc = 0.0;
                for j in 0..r {
                    let src = i + j;
                    if src >= pad && src - pad < len {
                        acc += vf[c * r + j] * vs[src - pad];
                    }
                }
                out[i * channels + c] = acc;
            }
        }
        let needs = self.needs(signal.id) || self.needs(filter.id);
        Ok(self.push(
            Op::Conv1dSame { signal: signal.id, filter: filter.id },
            vec![len, channels],
            out,
            needs,
        ))
    }

    /// Layer normalization of a vector with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let sx = self.nodes[x.id].shape.clone();
        let sg = self.nodes[gain.id].shape.clone();
        let sb = self.nodes[bias.id].shape.clone();
        if sx.len() != 1 || sg != sx || sb != sx {
            return Err(Error::dimension("layer_norm", &sx, &sg));
        }
        let n = sx[0];
        if n < 2 {
            return Err(Error::Usage("layer_norm needs at least 2 elements".into()));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let vx = &self.nodes[x.id].value;
        let mean = vx.iter().sum::<f64>() / n as f64;
        let var = vx.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        let xhat: Vec<f64> = vx.iter().map(|v| (v - mean) * inv_std).collect();
        let vg = &self.nodes[gain.id].value;
        let vb = &self.nodes[bias.id].value;
        let out: Vec<f64> = xhat
            .iter()
            .zip(vg.iter().zip(vb))
            .map(|(h, (g, b))| g * h + b)
            .collect();
        let needs = self.needs(x.id) || self.needs(gain.id) || self.needs(bias.id);
        Ok(self.push(
            Op::LayerNorm { x: x.id, gain: gain.id, bias: bias.id, inv_std, xhat },
            sx,
            out,
            needs,
        ))
    }

    /// Inverted dropout: in train mode each element is zeroed with probability
    /// `p` and survivors are scaled by `1/(1-p)`, so eval mode is the
    /// identity (the input var is returned unchanged).
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.nodes[x.id].value.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = self.nodes[x.id]
            .value
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let shape = self.nodes[x.id].shape.clone();
        let needs = self.needs(x.id);
        Ok(self.push(Op::Dropout { x: x.id, mask }, shape, out, needs))
    }

    // ── Backward ─────────────────────────────────────────────────────

    fn accumulate(&mut self, id: usize, contrib: &[f64]) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut self.nodes[id].grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            None => self.nodes[id].grad = Some(contrib.to_vec()),
        }
    }

    /// Reverse pass from a scalar loss. Every node reachable from the loss
    /// whose subgraph contains a learnable leaf receives `d loss / d node`,
    /// accumulated additively across uses. May run once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.id].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.id].shape
            )));
        }
        if self.backward_done {
            return Err(Error::Usage("backward already ran on this graph".into()));
        }
        self.backward_done = true;
        if !self.nodes[loss.id].needs_grad {
            // No learnable leaf feeds the loss; nothing to do.
            return Ok(());
        }
        self.nodes[loss.id].grad = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            if !self.nodes[id].needs_grad || self.nodes[id].grad.is_none() {
                continue;
            }
            let g = self.nodes[id].grad.clone().expect("checked above");
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add { a, b } => {
                    self.accumulate_broadcast(a, &g);
                    self.accumulate_broadcast(b, &g);
                }
                Op::Mul { a, b } => {
                    let va = self.nodes[a].value.clone();
                    let vb = self.nodes[b].value.clone();
                    let contrib_a: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| gi * vb[if vb.len() == 1 { 0 } else { i }])
                        .collect();
                    let contrib_b: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| gi * va[if va.len() == 1 { 0 } else { i }])
                        .collect();
                    self.accumulate_broadcast(a, &contrib_a);
                    self.accumulate_broadcast(b, &contrib_b);
                }
                Op::Affine { x, scale } => {
                    let contrib: Vec<f64> = g.iter().map(|gi| gi * scale).collect();
                    self.accumulate(x, &contrib);
                }
                Op::Relu { x } => {
                    let vx = self.nodes[x].value.clone();
                    let contrib: Vec<f64> = g
                        .iter()
                        .zip(&vx)
                        .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                        .collect();
                    self.accumulate(x, &contrib);
                }
                Op::Tanh { x } => {
                    let y = self.nodes[id].value.clone();
                    let contrib: Vec<f64> = g.iter().zip(&y).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect();
                    self.accumulate(x, &contrib);
                }
                Op::Sigmoid { x } => {
                    let y = self.nodes[id].value.clone();
                    let contrib: Vec<f64> = g.iter().zip(&y).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect();
                    self.accumulate(x, &contrib);
                }
                Op::Concat { a, b } => {
                    let na = self.nodes[a].value.len();
                    self.accumulate(a, &g[..na]);
                    self.accumulate(b, &g[na..]);
                }
                Op::MatMat { a, b } => {
                    let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                    let n = self.nodes[b].shape[1];
                    let va = self.nodes[a].value.clone();
                    let vb = self.nodes[b].value.clone();
                    // dA = G B^T
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += gij * vb[p * n + j];
                            }
                        }
                    }
                    // dB = A^T G
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = va[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::MatVec { a, x } => {
                    let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                    let va = self.nodes[a].value.clone();
                    let vx = self.nodes[x].value.clone();
                    let mut da = vec![0.0; m * k];
                    let mut dx = vec![0.0; k];
                    for i in 0..m {
                        let gi = g[i];
                        if gi == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            da[i * k + p] += gi * vx[p];
                            dx[p] += gi * va[i * k + p];
                        }
                    }
                    self.accumulate(a, &da);
                    self.accumulate(x, &dx);
                }
                Op::VecMat { x, a } => {
                    let (k, n) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                    let va = self.nodes[a].value.clone();
                    let vx = self.nodes[x].value.clone();
                    let mut dx = vec![0.0; k];
                    let mut da = vec![0.0; k * n];
                    for p in 0..k {
                        for j in 0..n {
                            dx[p] += g[j] * va[p * n + j];
                            da[p * n + j] += vx[p] * g[j];
                        }
                    }
                    self.accumulate(x, &dx);
                    self.accumulate(a, &da);
                }
                Op::StackRows { rows } => {
                    let d = self.nodes[rows[0]].value.len();
                    for (i, r) in rows.iter().enumerate() {
                        self.accumulate(*r, &g[i * d..(i + 1) * d]);
                    }
                }
                Op::Row { m, index } => {
                    let cols = self.nodes[m].shape[1];
                    let mut dm = vec![0.0; self.nodes[m].value.len()];
                    dm[index * cols..(index + 1) * cols].copy_from_slice(&g);
                    self.accumulate(m, &dm);
                }
                Op::AddRows { m, v } => {
                    let d = self.nodes[v].value.len();
                    let rows = self.nodes[m].shape[0];
                    self.accumulate(m, &g);
                    let mut dv = vec![0.0; d];
                    for i in 0..rows {
                        for j in 0..d {
                            dv[j] += g[i * d + j];
                        }
                    }
                    self.accumulate(v, &dv);
                }
                Op::Softmax { x, valid } => {
                    let y = self.nodes[id].value.clone();
                    let is_valid = |i: usize| valid.as_ref().is_none_or(|v| v[i]);
                    let s: f64 = (0..y.len()).filter(|&i| is_valid(i)).map(|i| y[i] * g[i]).sum();
                    let contrib: Vec<f64> = (0..y.len())
                        .map(|i| if is_valid(i) { y[i] * (g[i] - s) } else { 0.0 })
                        .collect();
                    self.accumulate(x, &contrib);
                }
                Op::LogSoftmax { x } => {
                    let y = self.nodes[id].value.clone();
                    let gsum: f64 = g.iter().sum();
                    let contrib: Vec<f64> = g
                        .iter()
                        .zip(&y)
                        .map(|(gi, yi)| gi - yi.exp() * gsum)
                        .collect();
                    self.accumulate(x, &contrib);
                }
                Op::Conv1dSame { signal, filter } => {
                    let len = self.nodes[signal].shape[0];
                    let (channels, r) = (self.nodes[filter].shape[0], self.nodes[filter].shape[1]);
                    let pad = (r - 1) / 2;
                    let vs = self.nodes[signal].value.clone();
                    let vf = self.nodes[filter].value.clone();
                    let mut ds = vec![0.0; len];
                    let mut df = vec![0.0; channels * r];
                    for i in 0..len {
                        for c in 0..channels {
                            let gic = g[i * channels + c];
                            if gic == 0.0 {
                                continue;
                            }
                            for j in 0..r {
                                let src = i + j;
                                if src >= pad && src - pad < len {
                                    ds[src - pad] += vf[c * r + j] * gic;
                                    df[c * r + j] += vs[src - pad] * gic;
                                }
                            }
                        }
                    }
                    self.accumulate(signal, &ds);
                    self.accumulate(filter, &df);
                }
                Op::LayerNorm { x, gain, bias, inv_std, xhat } => {
                    let n = xhat.len();
                    let vg = self.nodes[gain].value.clone();
                    let dgain: Vec<f64> = g.iter().zip(&xhat).map(|(gi, h)| gi * h).collect();
                    self.accumulate(gain, &dgain);
                    self.accumulate(bias, &g);
                    let dxhat: Vec<f64> = g.iter().zip(&vg).map(|(gi, gn)| gi * gn).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(d, h)| d * h).sum::<f64>() / n as f64;
                    let dx: Vec<f64> = dxhat
                        .iter()
                        .zip(&xhat)
                        .map(|(d, h)| inv_std * (d - mean_dxhat - h * mean_dxhat_xhat))
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::Dropout { x, mask } => {
                    let contrib: Vec<f64> = g.iter().zip(&mask).map(|(gi, m)| gi * m).collect();
                    self.accumulate(x, &contrib);
                }
                Op::Sum { x } => {
                    let contrib = vec![g[0]; self.nodes[x].value.len()];
                    self.accumulate(x, &contrib);
                }
                Op::Dot { a, b } => {
                    let va = self.nodes[a].value.clone();
                    let vb = self.nodes[b].value.clone();
                    let contrib_a: Vec<f64> = vb.iter().map(|v| g[0] * v).collect();
                    let contrib_b: Vec<f64> = va.iter().map(|v| g[0] * v).collect();
                    self.accumulate(a, &contrib_a);
                    self.accumulate(b, &contrib_b);
                }
            }
        }
        Ok(())
    }

    /// Accumulate `contrib` into `id`, reducing to a single element when the
    /// target was a broadcast scalar.
    fn accumulate_broadcast(&mut self, id: usize, contrib: &[f64]) {
        if self.nodes[id].value.len() == 1 && contrib.len() > 1 {
            let total: f64 = contrib.iter().sum();
            self.accumulate(id, &[total]);
        } else {
            self.accumulate(id, contrib);
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_examples() {
        let mut g = Graph::new(Precision::Double);
        let a = g.input(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let x = g.input(&t(&[2], &[5.0, 6.0]));
        let y = g.matmul(a, x).unwrap();
        assert_eq!(g.value(y), &[17.0, 39.0]);

        let i = g.input(&Tensor::eye(2));
        let b = g.matmul(i, a).unwrap();
        assert_eq!(g.value(b), g.value(a));

        let z = g.input(&Tensor::zeros(&[2, 2]));
        let c = g.matmul(z, a).unwrap();
        assert_eq!(g.value(c), &[0.0; 4]);

        let v = g.input(&t(&[2], &[1.0, 1.0]));
        let vm = g.matmul(v, a).unwrap();
        assert_eq!(g.value(vm), &[4.0, 6.0]);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dim() {
        let mut g = Graph::new(Precision::Double);
        let a = g.input(&Tensor::zeros(&[2, 3]));
        let b = g.input(&Tensor::zeros(&[2, 2]));
        match g.matmul(a, b) {
            Err(Error::Dimension { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 2]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_hand_examples() {
        let mut g = Graph::new(Precision::Double);
        let x = g.input(&t(&[2], &[2.0f64.ln(), 0.0]));
        let s = g.softmax(x).unwrap();
        let v = g.value(s).to_vec();
        assert!((v[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((v[1] - 1.0 / 3.0).abs() < 1e-12);

        // Shift invariance.
        let y = g.input(&t(&[2], &[2.0f64.ln() + 500.0, 500.0]));
        let s2 = g.softmax(y).unwrap();
        assert!((g.value(s2)[0] - v[0]).abs() < 1e-12);

        // Uniform for constant input.
        let u = g.input(&t(&[4], &[3.0; 4]));
        let s3 = g.softmax(u).unwrap();
        for p in g.value(s3) {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut g = Graph::new(Precision::Double);
        let x = g.input(&t(&[2], &[f64::NAN, 0.0]));
        assert!(matches!(g.softmax(x), Err(Error::Numeric(_))));
        let y = g.input(&t(&[2], &[f64::INFINITY, 0.0]));
        assert!(matches!(g.log_softmax(y), Err(Error::Numeric(_))));
    }

    #[test]
    fn masked_softmax_zeroes_invalid_and_sums_to_one() {
        let mut g = Graph::new(Precision::Double);
        let x = g.input(&t(&[4], &[10.0, 1.0, 2.0, 30.0]));
        let s = g.softmax_masked(x, &[false, true, true, false]).unwrap();
        let v = g.value(s);
        assert_eq!(v[0], 0.0);
        assert_eq!(v[3], 0.0);
        assert!((v[1] + v[2] - 1.0).abs() < 1e-12);
        assert!(v[2] > v[1]);

        assert!(matches!(
            g.softmax_masked(x, &[false; 4]),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let mut g = Graph::new(Precision::Double);
        let x = g.input(&t(&[3], &[0.3, -1.2, 2.0]));
        let s = g.softmax(x).unwrap();
        let ls = g.log_softmax(x).unwrap();
        for (p, lp) in g.value(s).to_vec().iter().zip(g.value(ls)) {
            assert!((p.ln() - lp).abs() < 1e-12);
        }
    }

    #[test]
    fn conv1d_same_hand_examples() {
        let mut g = Graph::new(Precision::Double);
        let s = g.input(&t(&[3], &[1.0, 2.0, 3.0]));
        let f = g.input(&t(&[1, 3], &[1.0, 1.0, 1.0]));
        let c = g.conv1d_same(s, f).unwrap();
        assert_eq!(g.shape(c), &[3, 1]);
        assert_eq!(g.value(c), &[3.0, 6.0, 5.0]);

        // Unit impulse filter reproduces the signal.
        let d = g.input(&t(&[1, 3], &[0.0, 1.0, 0.0]));
        let c2 = g.conv1d_same(s, d).unwrap();
        assert_eq!(g.value(c2), &[1.0, 2.0, 3.0]);

        // Zero signal stays zero.
        let z = g.input(&Tensor::zeros(&[5]));
        let c3 = g.conv1d_same(z, f).unwrap();
        assert!(g.value(c3).iter().all(|v| *v == 0.0));

        let even = g.input(&Tensor::zeros(&[1, 4]));
        assert!(matches!(g.conv1d_same(s, even), Err(Error::Config(_))));
    }

    #[test]
    fn layer_norm_hand_examples() {
        let mut g = Graph::new(Precision::Double);
        let gain = g.input(&t(&[2], &[1.0, 1.0]));
        let bias = g.input(&t(&[2], &[0.0, 0.0]));

        let x = g.input(&t(&[2], &[1.0, 3.0]));
        let n = g.layer_norm(x, gain, bias, 1e-10).unwrap();
        let v = g.value(n);
        assert!((v[0] + 1.0).abs() < 1e-4);
        assert!((v[1] - 1.0).abs() < 1e-4);

        // Constant input maps to bias.
        let c = g.input(&t(&[2], &[7.0, 7.0]));
        let b2 = g.input(&t(&[2], &[0.5, -0.5]));
        let n2 = g.layer_norm(c, gain, b2, 1e-5).unwrap();
        assert_eq!(g.value(n2), &[0.5, -0.5]);

        // Zero gain leaves only the bias.
        let g0 = g.input(&t(&[2], &[0.0, 0.0]));
        let n3 = g.layer_norm(x, g0, b2, 1e-5).unwrap();
        assert_eq!(g.value(n3), &[0.5, -0.5]);
    }

    #[test]
    fn dropout_matches_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new(Precision::Double);
        let x = g.input(&t(&[4], &[1.0, 2.0, 3.0, 4.0]));

        // p = 0 and eval mode are both the identity (same var back).
        let same = g.dropout(x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(same, x);
        let same = g.dropout(x, 0.5, Mode::Eval, &mut rng).unwrap();
        assert_eq!(same, x);

        assert!(matches!(
            g.dropout(x, 1.0, Mode::Train, &mut rng),
            Err(Error::Config(_))
        ));

        // Surviving elements are scaled by 1/(1-p); expectation is preserved.
        let n = 20_000;
        let big = g.input(&Tensor::from_vec(vec![n], vec![1.0; n]).unwrap());
        let dropped = g.dropout(big, 0.25, Mode::Train, &mut rng).unwrap();
        let keep = 1.0 / 0.75;
        let mut sum = 0.0;
        for v in g.value(dropped) {
            assert!(*v == 0.0 || (*v - keep).abs() < 1e-12);
            sum += v;
        }
        let mean = sum / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "dropout mean {mean} strays from 1");
    }

    #[test]
    fn backward_of_sum_and_dot() {
        let mut g = Graph::new(Precision::Double);
        let xt = t(&[3], &[1.0, -2.0, 0.5]);
        let yt = t(&[3], &[4.0, 5.0, 6.0]);
        let x = g.param(&xt);
        let y = g.param(&yt);
        let d = g.dot(x, y).unwrap();
        g.backward(d).unwrap();
        assert_eq!(g.grad(x).unwrap(), yt.data());
        assert_eq!(g.grad(y).unwrap(), xt.data());

        let mut g2 = Graph::new(Precision::Double);
        let x2 = g2.param(&xt);
        let s = g2.sum(x2);
        g2.backward(s).unwrap();
        assert_eq!(g2.grad(x2).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_accumulates_across_uses() {
        // loss = x . x  =>  d loss / dx = 2x, via two uses of the same node.
        let mut g = Graph::new(Precision::Double);
        let xt = t(&[3], &[1.0, -2.0, 0.5]);
        let x = g.param(&xt);
        let d = g.dot(x, x).unwrap();
        g.backward(d).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_contract_checks() {
        let mut g = Graph::new(Precision::Double);
        let x = g.param(&t(&[2], &[1.0, 2.0]));
        let inp = g.input(&t(&[2], &[3.0, 4.0]));
        let y = g.mul(x, inp).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Usage(_)))); // non-scalar

        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, 4.0]);
        // Inputs never accumulate gradient.
        assert!(g.grad(inp).is_none());
        // A second backward pass is refused.
        assert!(matches!(g.backward(s), Err(Error::Usage(_))));
    }

    #[test]
    fn elementwise_shape_errors_name_both_shapes() {
        let mut g = Graph::new(Precision::Double);
        let a = g.input(&Tensor::zeros(&[2]));
        let b = g.input(&Tensor::zeros(&[3]));
        match g.add(a, b) {
            Err(Error::Dimension { op, left, right }) => {
                assert_eq!(op, "add");
                assert_eq!(left, vec![2]);
                assert_eq!(right, vec![3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn single_precision_rounds_every_output() {
        let mut g = Graph::new(Precision::Single);
        let fine = 0.1 + 1e-12; // not representable in f32
        let x = g.input(&t(&[1], &[fine]));
        assert_eq!(g.value(x)[0], 0.1f32 as f64);
        let y = g.affine(x, 3.0, 0.0);
        assert_eq!(g.value(y)[0], (0.1f32 * 3.0f32) as f64);

        let mut gd = Graph::new(Precision::Double);
        let xd = gd.input(&t(&[1], &[fine]));
        assert_eq!(gd.value(xd)[0], fine);
    }

    #[test]
    fn structure_ops_round_trip() {
        let mut g = Graph::new(Precision::Double);
        let a = g.input(&t(&[2], &[1.0, 2.0]));
        let b = g.input(&t(&[2], &[3.0, 4.0]));
        let m = g.stack_rows(&[a, b]).unwrap();
        assert_eq!(g.shape(m), &[2, 2]);
        let r1 = g.row(m, 1).unwrap();
        assert_eq!(g.value(r1), &[3.0, 4.0]);
        assert!(matches!(g.row(m, 2), Err(Error::Usage(_))));

        let c = g.concat(a, b).unwrap();
        assert_eq!(g.value(c), &[1.0, 2.0, 3.0, 4.0]);

        let v = g.input(&t(&[2], &[10.0, 20.0]));
        let shifted = g.add_rows(m, v).unwrap();
        assert_eq!(g.value(shifted), &[11.0, 22.0, 13.0, 24.0]);
    }
}
