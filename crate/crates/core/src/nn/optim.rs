//! Parameter storage, AdamW and EMA.

use std::collections::HashMap;

use super::graph::{Grads, Graph, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{DdError, Result};

/// Named parameters in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

/// Graph handles for every parameter of a store, by parameter id.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: usize) -> Var {
        self.vars[id]
    }

    /// Per-parameter gradients, zero-filled where the loss did not reach.
    pub fn collect<T: Scalar>(&self, grads: &mut Grads<T>, store: &ParamStore<T>) -> Vec<Vec<T>> {
        self.vars
            .iter()
            .zip(store.tensors())
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| vec![T::zero(); t.numel()]))
            .collect()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor(&self, id: usize) -> &Tensor<T> {
        &self.tensors[id]
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Tensor<T> {
        &mut self.tensors[id]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|i| &self.tensors[i])
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every parameter in `g`; `track` decides whether gradients flow to them.
    pub fn bind(&self, g: &mut Graph<T>, track: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| if track { g.param(t.clone()) } else { g.input(t.clone()) })
            .collect();
        Bound { vars }
    }

    /// Replaces `name`'s values, keeping its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| DdError::Structural(format!("unknown parameter `{name}`")))?;
        if self.tensors[id].shape() != tensor.shape() {
            return Err(DdError::Structural(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                self.tensors[id].shape(),
                tensor.shape()
            )));
        }
        self.tensors[id] = tensor;
        Ok(())
    }

    fn check_same_layout(&self, other: &ParamStore<T>) -> Result<()> {
        if self.names != other.names || self.tensors.iter().zip(&other.tensors).any(|(a, b)| a.shape() != b.shape()) {
            return Err(DdError::Structural("parameter sets differ in layout".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros = |t: &Tensor<T>| vec![T::zero(); t.numel()];
        AdamW {
            config,
            m: params.tensors().iter().map(zeros).collect(),
            v: params.tensors().iter().map(zeros).collect(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Vec<T>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(DdError::Structural(format!(
                "optimizer tracks {} parameters, got {} gradients for {}",
                self.m.len(),
                grads.len(),
                params.len()
            )));
        }
        for (id, g) in grads.iter().enumerate() {
            if g.len() != params.tensor(id).numel() {
                return Err(DdError::Structural(format!(
                    "gradient for `{}` has {} values",
                    params.name(id),
                    g.len()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(DdError::NonFiniteGradient(params.name(id).to_string()));
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::c(c.beta1), T::c(c.beta2));
        let (one_b1, one_b2) = (T::c(1.0 - c.beta1), T::c(1.0 - c.beta2));
        let lr = T::c(c.lr);
        let decay = T::c(1.0 - c.lr * c.weight_decay);
        let (inv_bc1, inv_bc2) = (T::c(1.0 / bc1), T::c(1.0 / bc2));
        let eps = T::c(c.eps);
        for (id, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            let p = params.tensor_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = b1 * m[i] + one_b1 * g[i];
                v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                let mhat = m[i] * inv_bc1;
                let vhat = v[i] * inv_bc2;
                p[i] = p[i] * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Exponential moving average of parameters.
#[derive(Debug, Clone)]
pub struct Ema<T> {
    shadow: ParamStore<T>,
    decay: f64,
}

impl<T: Scalar> Ema<T> {
    pub fn new(params: &ParamStore<T>, decay: f64) -> Self {
        Ema {
            shadow: params.clone(),
            decay,
        }
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn shadow(&self) -> &ParamStore<T> {
        &self.shadow
    }

    pub fn into_shadow(self) -> ParamStore<T> {
        self.shadow
    }

    /// `shadow <- decay * shadow + (1 - decay) * params`
    pub fn update(&mut self, params: &ParamStore<T>) -> Result<()> {
        self.shadow.check_same_layout(params)?;
        let d = T::c(self.decay);
        let one_d = T::c(1.0 - self.decay);
        for id in 0..params.len() {
            let src = params.tensor(id).data();
            for (s, &p) in self.shadow.tensor_mut(id).data_mut().iter_mut().zip(src) {
                *s = d * *s + one_d * p;
            }
        }
        Ok(())
    }

    /// Exchanges shadow and live weights; calling twice restores the original state.
    pub fn swap_in(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        self.shadow.check_same_layout(params)?;
        std::mem::swap(&mut self.shadow, params);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(vec![vals.len()], vals.to_vec()).unwrap());
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = store(&[0.5, -1.5]);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        for _ in 0..5 {
            opt.step(&mut p, &[vec![0.0, 0.0]]).unwrap();
        }
        assert_eq!(p.tensor(0).data(), &[0.5, -1.5]);
        assert_eq!(opt.steps_taken(), 5);
    }

    #[test]
    fn descends_on_half_square() {
        let mut p = store(&[1.0]);
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, ..Default::default() }, &p);
        let w = p.tensor(0).data()[0];
        opt.step(&mut p, &[vec![w]]).unwrap();
        assert!(p.tensor(0).data()[0].abs() < 1.0);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        // m̂ = g and v̂ = g² after bias correction, so Δ = -lr * g / (|g| + eps).
        let cfg = AdamWConfig { lr: 0.01, eps: 1e-8, ..Default::default() };
        let mut p = store(&[0.0, 0.0, 0.0]);
        let g = vec![3.0, -0.25, 1e-3];
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &[g.clone()]).unwrap();
        for (w, gv) in p.tensor(0).data().iter().zip(&g) {
            let expect = -0.01 * gv / (gv.abs() + 1e-8);
            assert!((w - expect).abs() < 1e-12, "{w} vs {expect}");
        }
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() };
        let mut p = store(&[2.0]);
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &[vec![0.0]]).unwrap();
        assert!((p.tensor(0).data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut p = store(&[1.0]);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        match opt.step(&mut p, &[vec![f64::NAN]]) {
            Err(DdError::NonFiniteGradient(name)) => assert_eq!(name, "w"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ema_extremes() {
        let p0 = store(&[1.0, 2.0]);
        let p1 = store(&[5.0, -3.0]);
        let mut follow = Ema::new(&p0, 0.0);
        follow.update(&p1).unwrap();
        assert_eq!(follow.shadow(), &p1);
        let mut frozen = Ema::new(&p0, 1.0);
        frozen.update(&p1).unwrap();
        assert_eq!(frozen.shadow(), &p0);
    }

    #[test]
    fn ema_converges_geometrically() {
        let decay = 0.9;
        let mut ema = Ema::new(&store(&[0.0]), decay);
        let target = store(&[1.0]);
        for k in 1..=30 {
            ema.update(&target).unwrap();
            let gap = 1.0 - ema.shadow().tensor(0).data()[0];
            assert!((gap - decay.powi(k)).abs() < 1e-12);
        }
    }

    #[test]
    fn ema_swap_round_trips() {
        let mut live = store(&[3.0]);
        let mut ema = Ema::new(&store(&[7.0]), 0.5);
        ema.swap_in(&mut live).unwrap();
        assert_eq!(live.tensor(0).data(), &[7.0]);
        ema.swap_in(&mut live).unwrap();
        assert_eq!(live.tensor(0).data(), &[3.0]);
        assert!(ema.update(&ParamStore::new()).is_err());
    }
}
