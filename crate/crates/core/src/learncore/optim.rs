use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::params::ModelParams;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Rescale gradients whose global norm exceeds this.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, clip_norm: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros: Vec<Vec<T>> = params.tensors.iter().map(|t| vec![T::zero(); t.tensor.len()]).collect();
        AdamState { step: 0, m: zeros.clone(), v: zeros }
    }
}

/// One adaptive-moment update in place.
pub fn optimize_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    config: &AdamConfig,
) {
    state.step += 1;
    let b1 = T::lit(config.beta1);
    let b2 = T::lit(config.beta2);
    let lr = T::lit(config.learning_rate);
    let eps = T::lit(config.epsilon);
    let mut scale = T::one();
    if let Some(clip) = config.clip_norm {
        let norm = grads.global_norm();
        let clip = T::lit(clip);
        if norm > clip {
            scale = clip / norm;
        }
    }
    let t = state.step as i32;
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    for (k, named) in params.tensors.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (i, w) in named.tensor.data_mut().iter_mut().enumerate() {
            let g = grads.buffers[k][i] * scale;
            m[i] = b1 * m[i] + (T::one() - b1) * g;
            v[i] = b2 * v[i] + (T::one() - b2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learncore::params::Topology;

    fn scalar_params(w: &[f64]) -> ModelParams<f64> {
        let mut p = ModelParams::zeros(&Topology::Mlp { sizes: vec![w.len(), 1] });
        p.tensors[0].tensor.data_mut().copy_from_slice(w);
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar_params(&[0.3, -2.0]);
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let zero = Gradients::zeros_like(&p);
        optimize_step(&mut p, &zero, &mut st, &AdamConfig::default());
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn one_step_descends_on_square() {
        let mut p = scalar_params(&[1.0]);
        let mut st = AdamState::new(&p);
        let mut g = Gradients::zeros_like(&p);
        g.buffers[0][0] = 2.0;
        optimize_step(&mut p, &g, &mut st, &AdamConfig::default());
        assert!(p.tensors[0].tensor.data()[0].abs() < 1.0);
    }

    #[test]
    fn converges_on_convex_quadratic() {
        // f(w) = (w0 - 0.7)^2 + 3 (w1 + 0.4)^2 + (w0 - 0.7)(w1 + 0.4)
        let mut p = scalar_params(&[0.0, 0.0]);
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig::default();
        for _ in 0..2000 {
            let w = p.tensors[0].tensor.data().to_vec();
            let (a, b) = (w[0] - 0.7, w[1] + 0.4);
            let mut g = Gradients::zeros_like(&p);
            g.buffers[0][0] = 2.0 * a + b;
            g.buffers[0][1] = 6.0 * b + a;
            optimize_step(&mut p, &g, &mut st, &cfg);
        }
        let w = p.tensors[0].tensor.data();
        assert!(((w[0] - 0.7).powi(2) + (w[1] + 0.4).powi(2)).sqrt() < 1e-3);
    }

    #[test]
    fn clipping_bounds_effective_gradient() {
        let mut a = scalar_params(&[1.0]);
        let mut b = scalar_params(&[1.0]);
        let mut g = Gradients::zeros_like(&a);
        g.buffers[0][0] = 1e6;
        let clipped = AdamConfig { clip_norm: Some(1.0), ..AdamConfig::default() };
        optimize_step(&mut a, &g, &mut AdamState::new(&scalar_params(&[1.0])), &clipped);
        optimize_step(&mut b, &g, &mut AdamState::new(&scalar_params(&[1.0])), &AdamConfig::default());
        // first Adam step is sign-like either way
        assert!((a.flat()[0] - b.flat()[0]).abs() < 1e-9);
    }
}
