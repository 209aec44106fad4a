//! Finite-difference verification of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

/// Outcome of [`grad_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// (input index, element index) of the worst element.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences, perturbing every element of every input.
///
/// The relative error of one element is `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn grad_check<Fun>(inputs: &[Tensor<f64>], f: Fun) -> Result<GradCheck>
where
    Fun: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = vals
            .iter()
            .map(|t| g.param(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if v.numel() != 1 {
            return Err(Error::shape(
                "grad_check",
                format!("function must be scalar-valued, got {:?}", v.shape()),
            ));
        }
        Ok(v.data()[0])
    };

    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for e in 0..inputs[i].numel() {
            let orig = inputs[i].data()[e];
            work[i].data_mut()[e] = orig + FD_STEP;
            let plus = eval(&work)?;
            work[i].data_mut()[e] = orig - FD_STEP;
            let minus = eval(&work)?;
            work[i].data_mut()[e] = orig;

            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic.data()[e];
            let denom = a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            let rel = (a - numeric).abs() / denom;
            if rel > report.max_rel_error {
                report = GradCheck {
                    max_rel_error: rel,
                    worst: (i, e),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}
