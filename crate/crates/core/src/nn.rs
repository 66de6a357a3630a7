//! Named parameter storage, affine/MLP building blocks and the optimizer.

use std::ops::Index;

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Tape variables for every parameter of one store, indexed by [`ParamId`].
#[derive(Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    /// `[fan_in × fan_out]` weight, uniform in ±scale·sqrt(6/(fan_in+fan_out)).
    pub fn glorot(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, scale: f64, rng: &mut impl Rng) -> ParamId {
        let lim = scale * (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-lim..=lim)).collect();
        self.add(name, Tensor::new(vec![fan_in, fan_out], data).expect("positive dims"))
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn filled(&mut self, name: impl Into<String>, shape: &[usize], v: f64) -> ParamId {
        let n = shape.iter().product();
        self.add(name, Tensor::new(shape.to_vec(), vec![v; n]).expect("positive dims"))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    /// Replaces the values of an existing parameter, keeping its shape.
    pub fn set_data(&mut self, id: ParamId, data: Vec<f64>) -> Result<()> {
        let t = &mut self.tensors[id.0];
        if t.len() != data.len() {
            return Err(shape_err(format!("parameter {} has {} values, got {}", self.names[id.0], t.len(), data.len())));
        }
        t.data_mut().copy_from_slice(&data);
        Ok(())
    }

    /// Records every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                let mut leaf = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid parameter");
                leaf.requires_grad = true;
                tape.leaf(leaf)
            })
            .collect();
        Bound { vars }
    }

    /// Records every parameter as a constant; nothing flows back to them.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.leaf(Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid parameter")))
            .collect();
        Bound { vars }
    }

    /// Adds the gradients of the bound leaves into each parameter's `grad`.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients) {
        for (t, v) in self.tensors.iter_mut().zip(&bound.vars) {
            match grads.get(*v) {
                Some(g) => t.accumulate_grad(g),
                None => {
                    if t.grad.is_none() {
                        t.grad = Some(vec![0.0; t.len()]);
                    }
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.grad = Some(vec![0.0; t.len()]);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter_map(|t| t.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm {
            let s = max_norm / norm;
            for g in self.tensors.iter_mut().filter_map(|t| t.grad.as_mut()) {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
        norm
    }

    /// Polyak averaging: `self ← τ·online + (1-τ)·self`.
    pub fn soft_update_from(&mut self, online: &ParamStore, tau: f64) {
        for (t, o) in self.tensors.iter_mut().zip(&online.tensors) {
            for (a, b) in t.data_mut().iter_mut().zip(o.data()) {
                *a = tau * b + (1.0 - tau) * *a;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// `x·W + b` with `W: [in × out]`.
#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub w: ParamId,
    pub b: ParamId,
}

impl Affine {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let w = store.glorot(format!("{name}.w"), fan_in, fan_out, scale, rng);
        let b = store.zeros(format!("{name}.b"), &[fan_out]);
        Self { w, b }
    }

    pub fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.affine(x, p[self.w], p[self.b])
    }
}

/// Affine layers with ReLU between them; the last layer has no nonlinearity.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Affine>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut impl Rng) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Affine::new(store, &format!("{name}.{i}"), w[0], w[1], 1.0, rng))
            .collect();
        Self { layers }
    }

    pub fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let pairs: Vec<(Var, Var)> = self.layers.iter().map(|l| (p[l.w], p[l.b])).collect();
        mlp_apply(tape, &pairs, x)
    }
}

/// Applies `(W, b)` pairs with ReLU between consecutive layers.
pub fn mlp_apply(tape: &mut Tape, layers: &[(Var, Var)], x: Var) -> Result<Var> {
    let mut h = x;
    for (i, &(w, b)) in layers.iter().enumerate() {
        if tape.value(h).cols() != tape.value(w).rows() {
            return Err(shape_err(format!(
                "mlp layer {i}: input {:?} does not chain into weight {:?}",
                tape.value(h).shape(),
                tape.value(w).shape()
            )));
        }
        h = tape.affine(h, w, b)?;
        if i + 1 < layers.len() {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

/// Gradient descent with adaptive first/second-moment scaling.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((t, m), v) in store.tensors.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = t.grad.clone() else { continue };
            for (((p, g), m), v) in t.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            }
        }
    }
}
