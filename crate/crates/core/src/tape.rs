//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Parameters live in a [`ParamStore`]; a forward pass borrows the store,
//! records every operation on a [`Tape`], and [`Tape::backward`] replays the
//! records in reverse to produce one gradient tensor per parameter. Weight
//! slices are recorded as prefix reads of the full tensor, so their gradients
//! scatter back into the shared storage.

use alloc::string::String;

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::{self, PoolKind, Window};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Checks that `other` has the same names and shapes, in the same order.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }
}

/// Per-parameter gradients, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    grads: Vec<Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(params: &ParamStore<T>) -> Self {
        Self {
            grads: params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn as_slice(&self) -> &[Tensor<T>] {
        &self.grads
    }

    /// Adds `other` into `self`, parameter by parameter in id order.
    pub fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }

    /// Euclidean norm over all entries, accumulated in `f64`.
    pub fn global_norm(&self) -> f64 {
        let sq: f64 = self
            .grads
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum();
        num_traits::Float::sqrt(sq)
    }

    /// Rescales so the global norm is at most `max_norm`. Returns the norm
    /// before clipping.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm {
            let k = T::from_f64(max_norm / norm);
            for g in &mut self.grads {
                for v in g.data_mut() {
                    *v = *v * k;
                }
            }
        }
        norm
    }

    /// True when each of the first `out` rows of parameter `id` has at least
    /// one nonzero gradient entry.
    pub fn rows_touched(&self, id: ParamId, out: usize) -> bool {
        let g = &self.grads[id.0];
        let row: usize = g.shape()[1..].iter().product::<usize>().max(1);
        (0..out).all(|o| g.data()[o * row..(o + 1) * row].iter().any(|v| *v != T::zero()))
    }
}

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Constant,
    Param { id: ParamId },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Dense { x: Var, w: Var, b: Var },
    Relu { x: Var },
    Pool { x: Var, kind: PoolKind, win: Window, argmax: Vec<usize> },
    Reshape { x: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Mse { y: Var, target: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, k: T },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Record of one forward pass.
pub struct Tape<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Records a constant. No gradient flows into constants.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Records the whole parameter `id`.
    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.params.get(id).clone();
        self.push(value, Op::Param { id }, true)
    }

    /// Records the leading `out` filters of parameter `id`, each truncated to
    /// its leading `inp` input channels.
    pub fn param_slice(&mut self, id: ParamId, out: usize, inp: usize) -> Result<Var> {
        let value = self.params.get(id).prefix_slice(out, inp)?;
        Ok(self.push(value, Op::Param { id }, true))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = kernels::conv2d(self.value(x), self.value(w), self.value(b), stride, pad)?;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(y, Op::Conv2d { x, w, b, stride, pad }, ng))
    }

    /// Dense layer. Inputs with more than two axes are flattened per example.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let x = if self.value(x).ndim() != 2 {
            self.flatten(x)?
        } else {
            x
        };
        let y = kernels::dense(self.value(x), self.value(w), self.value(b))?;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(y, Op::Dense { x, w, b }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = kernels::relu(self.value(x));
        let ng = self.needs(x);
        self.push(y, Op::Relu { x }, ng)
    }

    pub fn pool(&mut self, x: Var, kind: PoolKind, win: Window) -> Result<Var> {
        let (y, argmax) = kernels::pool(self.value(x), kind, win)?;
        let ng = self.needs(x);
        Ok(self.push(y, Op::Pool { x, kind, win, argmax }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(x);
        Ok(self.push(y, Op::Reshape { x }, ng))
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape();
        let b = shape[0];
        let rest = shape[1..].iter().product();
        self.reshape(x, &[b, rest])
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = kernels::cross_entropy(self.value(logits), labels)?;
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Stage distillation loss `(1/F)·Σ(y − target)²`. The target is read as
    /// a constant: no gradient flows into it.
    pub fn mse_stage(&mut self, y: Var, target: Var) -> Result<Var> {
        let loss = kernels::mse_stage(self.value(y), self.value(target))?;
        let ng = self.needs(y);
        Ok(self.push(Tensor::scalar(loss), Op::Mse { y, target }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                expected: va.shape().to_vec(),
                actual: vb.shape().to_vec(),
            });
        }
        let mut y = va.clone();
        y.add_assign(vb);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Add { a, b }, ng))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| e * k).collect();
        let y = Tensor::new(v.shape().to_vec(), data).expect("shape");
        let ng = self.needs(x);
        self.push(y, Op::Scale { x, k }, ng)
    }

    /// Replays the tape in reverse from `output`, seeded with `seed`.
    ///
    /// Returns one gradient per parameter of the store; parameters the forward
    /// pass never reached get zeros. A tape can be replayed only once.
    pub fn backward(&mut self, output: Var, seed: &Tensor<T>) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(output).shape() != seed.shape() {
            return Err(Error::ShapeMismatch {
                op: "backward seed",
                expected: self.value(output).shape().to_vec(),
                actual: seed.shape().to_vec(),
            });
        }
        self.consumed = true;
        let mut out = Gradients::zeros_like(self.params);
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed.clone());

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param { id } => out.grads[id.0].scatter_add_prefix(&g),
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (gx, gw, gb) = kernels::conv2d_backward(
                        &self.nodes[x.0].value,
                        &self.nodes[w.0].value,
                        &g,
                        *stride,
                        *pad,
                        self.nodes[x.0].needs_grad,
                    );
                    if let Some(gx) = gx {
                        acc(&mut grads, *x, gx);
                    }
                    acc(&mut grads, *w, gw);
                    acc(&mut grads, *b, gb);
                }
                Op::Dense { x, w, b } => {
                    let (gx, gw, gb) = kernels::dense_backward(
                        &self.nodes[x.0].value,
                        &self.nodes[w.0].value,
                        &g,
                        self.nodes[x.0].needs_grad,
                    );
                    if let Some(gx) = gx {
                        acc(&mut grads, *x, gx);
                    }
                    acc(&mut grads, *w, gw);
                    acc(&mut grads, *b, gb);
                }
                Op::Relu { x } => {
                    let gx = kernels::relu_backward(&self.nodes[x.0].value, &g);
                    acc(&mut grads, *x, gx);
                }
                Op::Pool { x, kind, win, argmax } => {
                    let gx = kernels::pool_backward(
                        self.nodes[x.0].value.shape(),
                        *kind,
                        *win,
                        argmax,
                        &g,
                    );
                    acc(&mut grads, *x, gx);
                }
                Op::Reshape { x } => {
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    acc(&mut grads, *x, g.reshape(&shape)?);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let k = self.nodes[logits.0].value.shape()[1];
                    let scale = g.item() / T::from_f64(labels.len() as f64);
                    let mut gl = probs.clone();
                    for (bi, &label) in labels.iter().enumerate() {
                        gl[bi * k + label] = gl[bi * k + label] - T::one();
                    }
                    gl.iter_mut().for_each(|v| *v = *v * scale);
                    let shape = self.nodes[logits.0].value.shape().to_vec();
                    acc(&mut grads, *logits, Tensor::new(shape, gl)?);
                }
                Op::Mse { y, target } => {
                    let yv = &self.nodes[y.0].value;
                    let tv = &self.nodes[target.0].value;
                    let f = T::from_f64(yv.shape()[1] as f64);
                    let k = (T::one() + T::one()) * g.item() / f;
                    let data = yv
                        .data()
                        .iter()
                        .zip(tv.data())
                        .map(|(&a, &b)| (a - b) * k)
                        .collect();
                    acc(&mut grads, *y, Tensor::new(yv.shape().to_vec(), data)?);
                }
                Op::Add { a, b } => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Scale { x, k } => {
                    let data = g.data().iter().map(|&e| e * *k).collect();
                    acc(&mut grads, *x, Tensor::new(g.shape().to_vec(), data)?);
                }
            }
        }
        Ok(out)
    }
}

fn acc<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Convenience for scalar losses: backward with seed 1.
pub fn backward_scalar<T: Real>(tape: &mut Tape<'_, T>, loss: Var) -> Result<Gradients<T>> {
    tape.backward(loss, &Tensor::scalar(T::one()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_scalar_gradient() {
        // loss = w * x with x = 2
        let mut store = ParamStore::<f64>::new();
        let w = store.push("w", Tensor::new(vec![1, 1], vec![3.0]).unwrap());
        let b = store.push("b", Tensor::zeros(&[1]));
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
        let wv = tape.param(w);
        let bv = tape.param(b);
        let y = tape.dense(x, wv, bv).unwrap();
        let grads = tape.backward(y, &Tensor::new(vec![1, 1], vec![1.0]).unwrap()).unwrap();
        assert_eq!(grads.get(w).data(), &[2.0]);
        assert_eq!(grads.get(b).data(), &[1.0]);
    }

    #[test]
    fn tape_consumed_once() {
        let mut store = ParamStore::<f64>::new();
        let w = store.push("w", Tensor::scalar(1.0));
        let mut tape = Tape::new(&store);
        let v = tape.param(w);
        let y = tape.scale(v, 2.0);
        assert!(backward_scalar(&mut tape, y).is_ok());
        assert_eq!(backward_scalar(&mut tape, y), Err(Error::TapeConsumed));
    }

    #[test]
    fn seed_shape_checked() {
        let mut store = ParamStore::<f64>::new();
        let w = store.push("w", Tensor::zeros(&[2]));
        let mut tape = Tape::new(&store);
        let v = tape.param(w);
        assert!(matches!(
            tape.backward(v, &Tensor::scalar(1.0)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn mse_at_target_has_zero_gradient() {
        let mut store = ParamStore::<f64>::new();
        let w = store.push("w", Tensor::new(vec![1, 2, 1, 1], vec![0.5, -1.5]).unwrap());
        let mut tape = Tape::new(&store);
        let y = tape.param(w);
        let t = tape.constant(store.get(w).clone());
        let loss = tape.mse_stage(y, t).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
        let g = backward_scalar(&mut tape, loss).unwrap();
        assert!(g.get(w).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unreached_params_get_zero() {
        let mut store = ParamStore::<f64>::new();
        let a = store.push("a", Tensor::scalar(2.0));
        let b = store.push("b", Tensor::full(&[3], 1.0));
        let mut tape = Tape::new(&store);
        let v = tape.param(a);
        let y = tape.scale(v, 4.0);
        let g = backward_scalar(&mut tape, y).unwrap();
        assert_eq!(g.get(a).data(), &[4.0]);
        assert_eq!(g.get(b).data(), &[0.0; 3]);
    }

    #[test]
    fn slice_gradient_scatters_into_prefix() {
        let mut store = ParamStore::<f64>::new();
        let w = store.push("w", Tensor::full(&[3, 2], 1.0));
        let bias = store.push("b", Tensor::zeros(&[3]));
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::full(&[1, 1], 5.0));
        let ws = tape.param_slice(w, 2, 1).unwrap();
        let bs = tape.param_slice(bias, 2, 1).unwrap();
        let y = tape.dense(x, ws, bs).unwrap();
        let g = tape.backward(y, &Tensor::full(&[1, 2], 1.0)).unwrap();
        assert_eq!(g.get(w).data(), &[5.0, 0.0, 5.0, 0.0, 0.0, 0.0]);
        assert_eq!(g.get(bias).data(), &[1.0, 1.0, 0.0]);
    }
}
