//! Central-difference verification of [`Graph`] gradients, in `f64`.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-3;

/// Per-input breakdown of a multi-input check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max relative error per input, in input order.
    pub per_input: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }
}

/// Max over coordinates of `|analytic − numeric| / max(1, |numeric|)` for a
/// scalar computation of one input.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Var,
{
    let report = grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), step)?;
    Ok(report.max_error())
}

/// Same as [`grad_check`] for a computation of several inputs.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let analytic = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
        let out = f(&mut g, &vars);
        if g.value(out).numel() != 1 {
            return Err(Error::Contract(format!(
                "grad_check needs a scalar computation, got shape {:?}",
                g.shape(out)
            )));
        }
        let grads = g.backward(out);
        vars.iter()
            .map(|&v| grads.get_or_zeros(v))
            .collect::<Vec<_>>()
    };

    let value_at = |xs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut per_input = Vec::with_capacity(inputs.len());
    for (k, grad) in analytic.iter().enumerate() {
        let mut worst = 0.0f64;
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let up = value_at(&work);
            work[k].data_mut()[i] = orig - step;
            let down = value_at(&work);
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let err = (grad.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            if !err.is_finite() {
                return Ok(GradCheckReport {
                    per_input: vec![f64::INFINITY],
                });
            }
            worst = worst.max(err);
        }
        per_input.push(worst);
    }
    Ok(GradCheckReport { per_input })
}
