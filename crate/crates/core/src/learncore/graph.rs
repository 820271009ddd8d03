//! Reverse-mode differentiation over a tape of vector-valued nodes.
//!
//! A [`Graph`] is built per example: inputs are constant leaves, parameters
//! are read from a borrowed [`ModelParams`] and never copied onto the tape.
//! [`Graph::backward`] accumulates parameter gradients into a [`Gradients`]
//! buffer shaped like the parameters.

use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
enum Op<T> {
    Input,
    /// `W x` with `W` a parameter of shape `[rows, cols]`.
    MatVec { w: usize, x: usize },
    AddParam { x: usize, p: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Offset(usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Square(usize),
    Sqrt(usize),
    Sin(usize),
    Cos(usize),
    Tan(usize),
    Clamp(usize, T, T),
    Slice { x: usize, start: usize },
    Sum(usize),
    SumSq(usize),
}

/// Parameter gradients, one flat buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub buffers: Vec<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(params: &ModelParams<T>) -> Self {
        Gradients { buffers: params.tensors.iter().map(|t| vec![T::zero(); t.tensor.len()]).collect() }
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (a, b) in self.buffers.iter_mut().zip(&other.buffers) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for b in &mut self.buffers {
            for x in b.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn global_norm(&self) -> T {
        self.buffers.iter().flatten().fold(T::zero(), |acc, &g| acc + g * g).sqrt()
    }

    /// Errors with the first parameter whose gradient is not finite.
    pub fn check_finite(&self, params: &ModelParams<T>) -> Result<()> {
        for (buf, named) in self.buffers.iter().zip(&params.tensors) {
            if buf.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { parameter: named.name.clone() });
            }
        }
        Ok(())
    }
}

pub struct Graph<'p, T> {
    params: &'p ModelParams<T>,
    values: Vec<Vec<T>>,
    ops: Vec<Op<T>>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ModelParams<T>) -> Self {
        Graph { params, values: Vec::with_capacity(256), ops: Vec::with_capacity(256) }
    }

    pub fn params(&self) -> &'p ModelParams<T> {
        self.params
    }

    fn push(&mut self, value: Vec<T>, op: Op<T>) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.values[v.0]
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.values[v.0][0]
    }

    pub fn len(&self, v: Var) -> usize {
        self.values[v.0].len()
    }

    pub fn input(&mut self, data: Vec<T>) -> Var {
        self.push(data, Op::Input)
    }

    pub fn constant(&mut self, c: T) -> Var {
        self.push(vec![c], Op::Input)
    }

    /// Product of parameter matrix `w` (shape `[rows, cols]`) with `x`.
    pub fn matvec(&mut self, w: usize, x: Var) -> Result<Var> {
        let t = &self.params.tensors[w].tensor;
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let xv = &self.values[x.0];
        if xv.len() != cols {
            return Err(Error::Shape { expected: vec![cols], found: vec![xv.len()] });
        }
        let wd = t.data();
        let out = (0..rows)
            .map(|i| {
                let row = &wd[i * cols..(i + 1) * cols];
                row.iter().zip(xv).fold(T::zero(), |acc, (&a, &b)| acc + a * b)
            })
            .collect();
        Ok(self.push(out, Op::MatVec { w, x: x.0 }))
    }

    /// `x + p` for a parameter vector `p`.
    pub fn add_param(&mut self, x: Var, p: usize) -> Result<Var> {
        let pv = self.params.tensors[p].tensor.data();
        let xv = &self.values[x.0];
        if xv.len() != pv.len() {
            return Err(Error::Shape { expected: vec![pv.len()], found: vec![xv.len()] });
        }
        let out = xv.iter().zip(pv).map(|(&a, &b)| a + b).collect();
        Ok(self.push(out, Op::AddParam { x: x.0, p }))
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(av.len(), bv.len(), "elementwise operands differ in length");
        let out = av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect();
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.values[a.0].iter().map(|&x| f(x)).collect();
        self.push(out, op)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.map(a, |x| x * s, Op::Scale(a.0, s))
    }

    pub fn offset(&mut self, a: Var, c: T) -> Var {
        self.map(a, |x| x + c, Op::Offset(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, |x| x.tanh(), Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, |x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(T::zero()), Op::Relu(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a.0))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map(a, |x| x.sqrt(), Op::Sqrt(a.0))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.map(a, |x| x.sin(), Op::Sin(a.0))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.map(a, |x| x.cos(), Op::Cos(a.0))
    }

    pub fn tan(&mut self, a: Var) -> Var {
        self.map(a, |x| x.tan(), Op::Tan(a.0))
    }

    /// Clamp into `[lo, hi]`; the gradient passes wherever the input lies in
    /// the closed interval.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        self.map(a, |x| x.max(lo).min(hi), Op::Clamp(a.0, lo, hi))
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.values[a.0][start..start + len].to_vec();
        self.push(out, Op::Slice { x: a.0, start })
    }

    /// Single element `i` of `a`.
    pub fn index(&mut self, a: Var, i: usize) -> Var {
        self.slice(a, i, 1)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.values[a.0].iter().fold(T::zero(), |acc, &x| acc + x);
        self.push(vec![s], Op::Sum(a.0))
    }

    pub fn sum_sq(&mut self, a: Var) -> Var {
        let s = self.values[a.0].iter().fold(T::zero(), |acc, &x| acc + x * x);
        self.push(vec![s], Op::SumSq(a.0))
    }

    /// Sum of several single-element nodes.
    pub fn add_all(&mut self, terms: &[Var]) -> Var {
        match terms.split_first() {
            None => self.constant(T::zero()),
            Some((&first, rest)) => rest.iter().fold(first, |acc, &t| self.add(acc, t)),
        }
    }

    /// Accumulates `d root / d params` into `grads`. `root` must be a scalar.
    pub fn backward(&self, root: Var, grads: &mut Gradients<T>) {
        assert_eq!(self.values[root.0].len(), 1, "backward needs a scalar root");
        let mut adj: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![T::one()]);

        fn acc<'a, T: Scalar>(adj: &'a mut [Option<Vec<T>>], values: &[Vec<T>], i: usize) -> &'a mut Vec<T> {
            adj[i].get_or_insert_with(|| vec![T::zero(); values[i].len()])
        }

        for node in (0..=root.0).rev() {
            let Some(g) = adj[node].take() else { continue };
            let y = &self.values[node];
            match self.ops[node] {
                Op::Input => {}
                Op::MatVec { w, x } => {
                    let t = &self.params.tensors[w].tensor;
                    let cols = t.shape()[1];
                    let wd = t.data();
                    let xv = &self.values[x];
                    let gw = &mut grads.buffers[w];
                    let gx = acc(&mut adj, &self.values, x);
                    for (i, &gi) in g.iter().enumerate() {
                        if gi == T::zero() {
                            continue;
                        }
                        let row = &wd[i * cols..(i + 1) * cols];
                        let grow = &mut gw[i * cols..(i + 1) * cols];
                        for j in 0..cols {
                            gx[j] += row[j] * gi;
                            grow[j] += gi * xv[j];
                        }
                    }
                }
                Op::AddParam { x, p } => {
                    for (b, &gi) in grads.buffers[p].iter_mut().zip(&g) {
                        *b += gi;
                    }
                    let gx = acc(&mut adj, &self.values, x);
                    for (a, &gi) in gx.iter_mut().zip(&g) {
                        *a += gi;
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(self.ops[node], Op::Sub(..)) { -T::one() } else { T::one() };
                    for (d, &gi) in acc(&mut adj, &self.values, a).iter_mut().zip(&g) {
                        *d += gi;
                    }
                    for (d, &gi) in acc(&mut adj, &self.values, b).iter_mut().zip(&g) {
                        *d += sign * gi;
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.values[a].clone(), self.values[b].clone());
                    for ((d, &gi), &bi) in acc(&mut adj, &self.values, a).iter_mut().zip(&g).zip(&bv) {
                        *d += gi * bi;
                    }
                    for ((d, &gi), &ai) in acc(&mut adj, &self.values, b).iter_mut().zip(&g).zip(&av) {
                        *d += gi * ai;
                    }
                }
                Op::Scale(a, s) => {
                    for (d, &gi) in acc(&mut adj, &self.values, a).iter_mut().zip(&g) {
                        *d += gi * s;
                    }
                }
                Op::Offset(a) => {
                    for (d, &gi) in acc(&mut adj, &self.values, a).iter_mut().zip(&g) {
                        *d += gi;
                    }
                }
                Op::Tanh(a) => self.unary(&mut adj, a, &g, |_, y| T::one() - y * y, y),
                Op::Sigmoid(a) => self.unary(&mut adj, a, &g, |_, y| y * (T::one() - y), y),
                Op::Relu(a) => self.unary(&mut adj, a, &g, |x, _| if x > T::zero() { T::one() } else { T::zero() }, y),
                Op::Square(a) => self.unary(&mut adj, a, &g, |x, _| x + x, y),
                Op::Sqrt(a) => self.unary(&mut adj, a, &g, |_, y| T::lit(0.5) / y, y),
                Op::Sin(a) => self.unary(&mut adj, a, &g, |x, _| x.cos(), y),
                Op::Cos(a) => self.unary(&mut adj, a, &g, |x, _| -x.sin(), y),
                Op::Tan(a) => self.unary(&mut adj, a, &g, |_, y| T::one() + y * y, y),
                Op::Clamp(a, lo, hi) => {
                    self.unary(&mut adj, a, &g, |x, _| if x >= lo && x <= hi { T::one() } else { T::zero() }, y)
                }
                Op::Slice { x, start } => {
                    let gx = acc(&mut adj, &self.values, x);
                    for (k, &gi) in g.iter().enumerate() {
                        gx[start + k] += gi;
                    }
                }
                Op::Sum(a) => {
                    for d in acc(&mut adj, &self.values, a).iter_mut() {
                        *d += g[0];
                    }
                }
                Op::SumSq(a) => {
                    let av = &self.values[a];
                    let two = T::lit(2.0);
                    let d = adj[a].get_or_insert_with(|| vec![T::zero(); av.len()]);
                    for (dk, &xk) in d.iter_mut().zip(av) {
                        *dk += two * xk * g[0];
                    }
                }
            }
        }
    }

    fn unary(&self, adj: &mut [Option<Vec<T>>], a: usize, g: &[T], deriv: impl Fn(T, T) -> T, y: &[T]) {
        let xv = &self.values[a];
        let d = adj[a].get_or_insert_with(|| vec![T::zero(); xv.len()]);
        for k in 0..xv.len() {
            d[k] += g[k] * deriv(xv[k], y[k]);
        }
    }
}
