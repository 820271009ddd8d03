//! Small dense and recurrent networks with reverse-mode gradients and Adam.

pub mod check;
pub mod graph;
pub mod nets;
pub mod optim;
pub mod params;
pub mod tensor;

pub use check::{gradient_check, GradCheck};
pub use graph::{Gradients, Graph, Var};
pub use nets::{forward_lstm_head, forward_mlp, forward_recurrent, lstm_graph, mlp_graph};
pub use optim::{optimize_step, AdamConfig, AdamState};
pub use params::{load_model, save_model, ModelParams, NamedTensor, Topology, MODEL_SCHEMA_VERSION};
pub use tensor::Tensor;

use rayon::prelude::*;

use crate::error::Result;
use crate::scalar::Scalar;

/// Examples per parallel work unit. Fixed so the reduction order does not
/// depend on the thread count.
pub const GRAD_CHUNK: usize = 16;

/// Mean loss and mean gradient over `examples`.
///
/// `per_example` builds the loss on a fresh tape and accumulates its gradient.
/// Chunks are summed sequentially and chunk totals are folded in index order.
pub fn batch_gradient<T, E, F>(params: &ModelParams<T>, examples: &[E], per_example: F) -> Result<(T, Gradients<T>)>
where
    T: Scalar,
    E: Sync,
    F: Fn(&mut Graph<'_, T>, &E) -> Result<Var> + Sync,
{
    let partials: Vec<Result<(T, Gradients<T>)>> = examples
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut grads = Gradients::zeros_like(params);
            let mut loss = T::zero();
            for ex in chunk {
                let mut g = Graph::new(params);
                let root = per_example(&mut g, ex)?;
                loss += g.scalar(root);
                g.backward(root, &mut grads);
            }
            Ok((loss, grads))
        })
        .collect();
    let mut total = Gradients::zeros_like(params);
    let mut loss = T::zero();
    for part in partials {
        let (l, g) = part?;
        loss += l;
        total.add_assign(&g);
    }
    let n = T::from_usize_lossy(examples.len().max(1));
    total.scale(T::one() / n);
    total.check_finite(params)?;
    Ok((loss / n, total))
}

/// Mean loss without gradients.
pub fn batch_loss<T, E, F>(params: &ModelParams<T>, examples: &[E], per_example: F) -> Result<T>
where
    T: Scalar,
    E: Sync,
    F: Fn(&mut Graph<'_, T>, &E) -> Result<Var> + Sync,
{
    let partials: Vec<Result<T>> = examples
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut loss = T::zero();
            for ex in chunk {
                let mut g = Graph::new(params);
                let root = per_example(&mut g, ex)?;
                loss += g.scalar(root);
            }
            Ok(loss)
        })
        .collect();
    let mut loss = T::zero();
    for p in partials {
        loss += p?;
    }
    Ok(loss / T::from_usize_lossy(examples.len().max(1)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fit(seed: u64) -> ModelParams<f64> {
        let topo = Topology::Mlp { sizes: vec![2, 8, 1] };
        let mut p = ModelParams::init(&topo, seed);
        let data: Vec<([f64; 2], f64)> = (0..40)
            .map(|i| {
                let a = i as f64 / 40.0 - 0.5;
                ([a, a * a], (3.0 * a).sin())
            })
            .collect();
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig::default();
        for _ in 0..50 {
            let (_, g) = batch_gradient(&p, &data, |g, (x, y)| {
                let xv = g.input(x.to_vec());
                let out = mlp_graph(g, xv)?;
                let yv = g.input(vec![*y]);
                let d = g.sub(out, yv);
                Ok(g.sum_sq(d))
            })
            .unwrap();
            optimize_step(&mut p, &g, &mut st, &cfg);
        }
        p
    }

    #[test]
    fn training_is_bit_reproducible() {
        let a = fit(7).flat();
        let b = fit(7).flat();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn batch_gradient_equals_sequential_sum() {
        let p = ModelParams::<f64>::init(&Topology::Mlp { sizes: vec![1, 3, 1] }, 1);
        let xs: Vec<f64> = (0..37).map(|i| i as f64 * 0.1).collect();
        let build = |g: &mut Graph<'_, f64>, x: &f64| {
            let xv = g.input(vec![*x]);
            let out = mlp_graph(g, xv)?;
            Ok(g.sum_sq(out))
        };
        let (loss, grads) = batch_gradient(&p, &xs, build).unwrap();
        let mut manual = Gradients::zeros_like(&p);
        let mut manual_loss = 0.0;
        for x in &xs {
            let mut g = Graph::new(&p);
            let r = build(&mut g, x).unwrap();
            manual_loss += g.scalar(r);
            g.backward(r, &mut manual);
        }
        manual.scale(1.0 / 37.0);
        assert!((loss - manual_loss / 37.0).abs() < 1e-12);
        for (a, b) in grads.buffers.iter().flatten().zip(manual.buffers.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((batch_loss(&p, &xs, build).unwrap() - loss).abs() < 1e-12);
    }
}
