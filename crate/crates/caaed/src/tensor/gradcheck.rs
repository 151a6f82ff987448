//! Finite-difference verification of backward rules.
//!
//! The checker rebuilds the loss from scratch for every probe, so the build
//! closure must be deterministic: same parameters in, same loss out. Anything
//! stochastic (dropout) must either be disabled or re-seeded identically
//! inside the closure. Checks always run in 64-bit precision; the rounding in
//! [`Precision::Single`] would swamp the difference quotient.

use crate::error::{Error, Result};

use super::{Graph, Precision, Tensor, Var};

/// Central-difference step. At 1e-5 the truncation error (~step^2) and the
/// 64-bit cancellation error (~1e-16/step) are both far below the 1e-4
/// acceptance threshold.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Compare analytic and numeric gradients for one parameter tensor.
///
/// Returns the worst relative error over the tensor's elements, where the
/// relative error of analytic `a` versus numeric `n` is
/// `|a - n| / max(1, |a|, |n|)`.
pub fn grad_check<F>(param: &mut Tensor, step: f64, mut build: F) -> Result<f64>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    let mut params = [param.clone()];
    let worst = grad_check_params(&mut params, step, |g, vars| build(g, vars[0]))?;
    *param = params[0].clone();
    Ok(worst[0])
}

/// Compare analytic and numeric gradients for a set of parameter tensors
/// feeding one scalar loss.
///
/// `build` receives a fresh graph and one leaf per tensor (in order) and must
/// return the loss. The analytic gradient comes from a single backward pass;
/// the numeric one perturbs every element by `±step` and re-evaluates the
/// loss. Returns the worst relative error per tensor.
pub fn grad_check_params<F>(params: &mut [Tensor], step: f64, mut build: F) -> Result<Vec<f64>>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::Config(format!("grad check step must be positive, got {step}")));
    }

    let mut graph = Graph::new(Precision::Double);
    let vars: Vec<Var> = params.iter().map(|t| graph.param(t)).collect();
    let loss = build(&mut graph, &vars)?;
    if graph.value(loss).len() != 1 {
        return Err(Error::Usage(format!(
            "grad check loss must be scalar, got shape {:?}",
            graph.shape(loss)
        )));
    }
    graph.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params.iter())
        .map(|(v, t)| graph.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |params: &[Tensor], build: &mut F| -> Result<f64> {
        let mut g = Graph::new(Precision::Double);
        let vars: Vec<Var> = params.iter().map(|t| g.param(t)).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.scalar_value(loss))
    };

    let mut worst = vec![0.0f64; params.len()];
    for pi in 0..params.len() {
        // Indexing is load-bearing: each element is nudged in place while the
        // analytic gradient for the same coordinate is read back.
        #[allow(clippy::needless_range_loop)]
        for idx in 0..params[pi].numel() {
            let orig = params[pi].data()[idx];
            params[pi].data_mut()[idx] = orig + step;
            let f_plus = eval(params, &mut build)?;
            params[pi].data_mut()[idx] = orig - step;
            let f_minus = eval(params, &mut build)?;
            params[pi].data_mut()[idx] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * step);
            let a = analytic[pi][idx];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::Numeric(format!(
                    "grad check hit a non-finite derivative at tensor {pi} element {idx}"
                )));
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if rel > worst[pi] {
                worst[pi] = rel;
            }
        }
    }
    Ok(worst)
}
