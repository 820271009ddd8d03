//! Forward passes for the two network families, both as plain evaluation and
//! as tape builders for training.

use super::graph::{Graph, Var};
use super::params::{ModelParams, Topology};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn affine<T: Scalar>(w: &Tensor<T>, b: &Tensor<T>, x: &[T]) -> Vec<T> {
    (0..w.shape()[0])
        .map(|i| {
            w.row(i).iter().zip(x).fold(b.data()[i], |acc, (&a, &v)| acc + a * v)
        })
        .collect()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn mlp_sizes<T: Scalar>(params: &ModelParams<T>) -> Result<&[usize]> {
    match &params.topology {
        Topology::Mlp { sizes } => Ok(sizes),
        other => Err(Error::InvalidInput(format!("expected an MLP topology, found {other:?}"))),
    }
}

fn lstm_dims<T: Scalar>(params: &ModelParams<T>) -> Result<(usize, &[usize], usize)> {
    match &params.topology {
        Topology::Lstm { input, hidden, output } => Ok((*input, hidden, *output)),
        other => Err(Error::InvalidInput(format!("expected an LSTM topology, found {other:?}"))),
    }
}

/// Affine + tanh hidden layers, linear output.
pub fn forward_mlp<T: Scalar>(params: &ModelParams<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    let sizes = mlp_sizes(params)?;
    if input.len() != sizes[0] {
        return Err(Error::Shape { expected: vec![sizes[0]], found: input.shape().to_vec() });
    }
    let layers = sizes.len() - 1;
    let mut x = input.data().to_vec();
    for l in 0..layers {
        x = affine(&params.tensors[2 * l].tensor, &params.tensors[2 * l + 1].tensor, &x);
        if l + 1 < layers {
            x.iter_mut().for_each(|v| *v = v.tanh());
        }
    }
    Ok(Tensor::vector(x))
}

/// One LSTM cell update for layer tensors starting at index `base`.
fn lstm_cell<T: Scalar>(params: &ModelParams<T>, base: usize, x: &[T], h: &[T], c: &[T]) -> (Vec<T>, Vec<T>) {
    let hd = h.len();
    let mut z = affine(&params.tensors[base].tensor, &params.tensors[base + 2].tensor, x);
    let w_hh = &params.tensors[base + 1].tensor;
    for (i, zi) in z.iter_mut().enumerate() {
        *zi += w_hh.row(i).iter().zip(h).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
    }
    let mut h_new = vec![T::zero(); hd];
    let mut c_new = vec![T::zero(); hd];
    for k in 0..hd {
        let i = sigmoid(z[k]);
        let f = sigmoid(z[hd + k]);
        let g = z[2 * hd + k].tanh();
        let o = sigmoid(z[3 * hd + k]);
        c_new[k] = f * c[k] + i * g;
        h_new[k] = o * c_new[k].tanh();
    }
    (h_new, c_new)
}

/// Hidden states of the last LSTM layer for a `[len, input]` sequence.
pub fn forward_recurrent<T: Scalar>(params: &ModelParams<T>, sequence: &Tensor<T>) -> Result<Tensor<T>> {
    let (input, hidden, _) = lstm_dims(params)?;
    let shape = sequence.shape();
    if shape.len() != 2 || shape[1] != input || shape[0] == 0 {
        return Err(Error::Shape { expected: vec![shape.first().copied().unwrap_or(1).max(1), input], found: shape.to_vec() });
    }
    let mut layer_in: Vec<Vec<T>> = (0..shape[0]).map(|t| sequence.row(t).to_vec()).collect();
    for (l, &hd) in hidden.iter().enumerate() {
        let mut h = vec![T::zero(); hd];
        let mut c = vec![T::zero(); hd];
        let mut outs = Vec::with_capacity(layer_in.len());
        for x in &layer_in {
            (h, c) = lstm_cell(params, 3 * l, x, &h, &c);
            outs.push(h.clone());
        }
        layer_in = outs;
    }
    let hd = *hidden.last().expect("validated");
    Tensor::from_vec(vec![layer_in.len(), hd], layer_in.concat())
}

/// Linear head applied to the final hidden state.
pub fn forward_lstm_head<T: Scalar>(params: &ModelParams<T>, sequence: &Tensor<T>) -> Result<Tensor<T>> {
    let hs = forward_recurrent(params, sequence)?;
    let last = hs.row(hs.shape()[0] - 1);
    let n = params.tensors.len();
    Ok(Tensor::vector(affine(&params.tensors[n - 2].tensor, &params.tensors[n - 1].tensor, last)))
}

/// Tape version of [`forward_mlp`].
pub fn mlp_graph<T: Scalar>(g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
    let params = g.params();
    let sizes = mlp_sizes(params)?;
    let layers = sizes.len() - 1;
    let mut h = x;
    for l in 0..layers {
        let wx = g.matvec(2 * l, h)?;
        h = g.add_param(wx, 2 * l + 1)?;
        if l + 1 < layers {
            h = g.tanh(h);
        }
    }
    Ok(h)
}

/// Tape version of [`forward_lstm_head`]; `steps` are the per-step inputs.
pub fn lstm_graph<T: Scalar>(g: &mut Graph<'_, T>, steps: &[Var]) -> Result<Var> {
    let params = g.params();
    let (_, hidden, _) = lstm_dims(params)?;
    if steps.is_empty() {
        return Err(Error::Empty("recurrent input sequence".into()));
    }
    let mut layer_in = steps.to_vec();
    for (l, &hd) in hidden.iter().enumerate() {
        let base = 3 * l;
        let mut h = g.input(vec![T::zero(); hd]);
        let mut c = g.input(vec![T::zero(); hd]);
        let mut outs = Vec::with_capacity(layer_in.len());
        for &x in &layer_in {
            let a = g.matvec(base, x)?;
            let b = g.matvec(base + 1, h)?;
            let s = g.add(a, b);
            let z = g.add_param(s, base + 2)?;
            let zi = g.slice(z, 0, hd);
            let zf = g.slice(z, hd, hd);
            let zg = g.slice(z, 2 * hd, hd);
            let zo = g.slice(z, 3 * hd, hd);
            let i = g.sigmoid(zi);
            let f = g.sigmoid(zf);
            let gg = g.tanh(zg);
            let o = g.sigmoid(zo);
            let fc = g.mul(f, c);
            let ig = g.mul(i, gg);
            c = g.add(fc, ig);
            let tc = g.tanh(c);
            h = g.mul(o, tc);
            outs.push(h);
        }
        layer_in = outs;
    }
    let n = params.tensors.len();
    let last = *layer_in.last().expect("non-empty");
    let wx = g.matvec(n - 2, last)?;
    g.add_param(wx, n - 1)
}
