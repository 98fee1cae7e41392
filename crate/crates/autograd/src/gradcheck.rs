use crate::error::{AutogradError, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    /// Largest relative error per input, in input order.
    pub per_input: Vec<f64>,
}

/// Checks the gradient of the scalar `f(inputs)` against central differences
/// with step `eps`.
///
/// `f` receives a fresh evaluation-mode graph and one [`Var`] per input; it
/// must return a single-element result.
pub fn grad_check<T, F>(f: F, inputs: &[Tensor<T>], eps: T) -> Result<GradReport>
where
    T: Real,
    F: Fn(&Graph<T>, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&g, &vars)?;
    let grads = g.backward(out)?;

    let eval = |inputs: &[Tensor<T>]| -> Result<f64> {
        let g = Graph::new();
        g.disable_grad();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vars)?;
        let v = g.value(out).item().as_f64();
        if !v.is_finite() {
            return Err(AutogradError::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut max_abs = 0.0f64;
    for (i, &var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[i].shape());
        let analytic = grads.get(var).unwrap_or(&zeros);
        let mut worst = 0.0f64;
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let step = (orig + eps).as_f64() - (orig - eps).as_f64();
            let numeric = (plus - minus) / step;
            let a = analytic.data()[j].as_f64();
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
            max_abs = max_abs.max(abs);
        }
        per_input.push(worst);
    }
    Ok(GradReport {
        max_relative_error: per_input.iter().copied().fold(0.0, f64::max),
        max_absolute_error: max_abs,
        per_input,
    })
}
