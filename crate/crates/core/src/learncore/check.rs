//! Central finite-difference validation of tape gradients.

use super::graph::{Gradients, Graph, Var};
use super::params::ModelParams;
use crate::error::Result;
use crate::scalar::Scalar;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for the relative error of near-zero gradients.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_parameter: String,
    pub checked: usize,
}

/// Compares the tape gradient of the scalar built by `build` against central
/// differences over every parameter entry.
pub fn gradient_check<F>(params: &ModelParams<f64>, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let mut g = Graph::new(params);
    let root = build(&mut g)?;
    let mut grads = Gradients::zeros_like(params);
    g.backward(root, &mut grads);

    let eval = |p: &ModelParams<f64>| -> Result<f64> {
        let mut g = Graph::new(p);
        let r = build(&mut g)?;
        Ok(g.scalar(r))
    };

    let mut probe = params.clone();
    let mut worst = GradCheck { max_rel_error: 0.0, worst_parameter: String::new(), checked: 0 };
    for k in 0..params.tensors.len() {
        for i in 0..params.tensors[k].tensor.len() {
            let w = params.tensors[k].tensor.data()[i];
            probe.tensors[k].tensor.data_mut()[i] = w + FD_STEP;
            let up = eval(&probe)?;
            probe.tensors[k].tensor.data_mut()[i] = w - FD_STEP;
            let down = eval(&probe)?;
            probe.tensors[k].tensor.data_mut()[i] = w;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = grads.buffers[k][i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > worst.max_rel_error {
                worst.max_rel_error = rel;
                worst.worst_parameter = format!("{}[{i}]", params.tensors[k].name);
            }
            worst.checked += 1;
        }
    }
    Ok(worst)
}

/// Relative error of a scalar derivative against central differences of `f`.
pub fn scalar_fd<T: Scalar>(f: impl Fn(T) -> T, x: T, analytic: T) -> f64 {
    let h = T::lit(FD_STEP);
    let numeric = ((f(x + h) - f(x - h)) / (h + h)).to_f64_lossy();
    let a = analytic.to_f64_lossy();
    (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR)
}
