//! Parameter update rules, registered by name and chosen at runtime.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

/// Moment estimates for one parameter tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }
}

/// One bias-corrected Adam update at step `t ≥ 1`.
pub fn adam_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    lr: f64,
    t: u64,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::dim("adam_step", &[params.len()], &[grads.len(), state.m.len()]));
    }
    if t == 0 {
        return Err(Error::Argument("adam step counter starts at 1".into()));
    }
    let b1 = T::from_f64(ADAM_BETA1);
    let b2 = T::from_f64(ADAM_BETA2);
    let one = T::one();
    let c1 = T::from_f64(1.0 - ADAM_BETA1.powi(t as i32));
    let c2 = T::from_f64(1.0 - ADAM_BETA2.powi(t as i32));
    let lr = T::from_f64(lr);
    let eps = T::from_f64(ADAM_EPSILON);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// `v ← momentum·v − lr·g; p ← p + v`.
pub fn sgd_momentum_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    velocity: &mut [T],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || velocity.len() != params.len() {
        return Err(Error::dim(
            "sgd_momentum_step",
            &[params.len()],
            &[grads.len(), velocity.len()],
        ));
    }
    let lr = T::from_f64(lr);
    let mu = T::from_f64(momentum);
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = mu * *v - lr * g;
        *p = *p + *v;
    }
    Ok(())
}

/// A stateful update rule over a model's parameter list.
pub trait Optimizer<T: Scalar>: Send {
    fn name(&self) -> &'static str;

    /// Applies one update; `grads[i]` belongs to `params[i]`.
    fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Tensor<T>]) -> Result<()>;
}

fn check_pairs<T: Scalar>(params: &[&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::dim("optimizer", &[params.len()], &[grads.len()]));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::dim("optimizer", p.shape(), g.shape()));
        }
    }
    Ok(())
}

pub struct Adam<T: Scalar> {
    lr: f64,
    t: u64,
    states: Vec<AdamState<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            t: 0,
            states: Vec::new(),
        }
    }
}

impl<T: Scalar> Optimizer<T> for Adam<T> {
    fn name(&self) -> &'static str {
        "adam"
    }

    fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Tensor<T>]) -> Result<()> {
        check_pairs(&params, grads)?;
        if self.states.is_empty() {
            self.states = params.iter().map(|p| AdamState::new(p.len())).collect();
        }
        self.t += 1;
        for ((p, g), s) in params.into_iter().zip(grads).zip(&mut self.states) {
            adam_step(p.data_mut(), g.data(), s, self.lr, self.t)?;
        }
        Ok(())
    }
}

pub struct SgdMomentum<T: Scalar> {
    lr: f64,
    momentum: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> SgdMomentum<T> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }
}

impl<T: Scalar> Optimizer<T> for SgdMomentum<T> {
    fn name(&self) -> &'static str {
        "sgd_momentum"
    }

    fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Tensor<T>]) -> Result<()> {
        check_pairs(&params, grads)?;
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            sgd_momentum_step(p.data_mut(), g.data(), v, self.lr, self.momentum)?;
        }
        Ok(())
    }
}

type Factory<T> = fn(f64) -> Box<dyn Optimizer<T>>;

/// Name → constructor table for optimizers.
pub struct OptimizerRegistry<T: Scalar> {
    factories: BTreeMap<&'static str, Factory<T>>,
}

impl<T: Scalar> Default for OptimizerRegistry<T> {
    fn default() -> Self {
        let mut reg = Self {
            factories: BTreeMap::new(),
        };
        reg.register("adam", |lr| Box::new(Adam::new(lr)));
        reg.register("sgd_momentum", |lr| Box::new(SgdMomentum::new(lr, DEFAULT_MOMENTUM)));
        reg
    }
}

impl<T: Scalar> OptimizerRegistry<T> {
    pub fn register(&mut self, name: &'static str, factory: Factory<T>) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.factories.keys().copied().collect()
    }

    pub fn create(&self, name: &str, lr: f64) -> Result<Box<dyn Optimizer<T>>> {
        let factory = self.factories.get(name).ok_or_else(|| {
            Error::Config(format!(
                "unknown optimizer '{name}' (available: {})",
                self.names().join(", ")
            ))
        })?;
        Ok(factory(lr))
    }
}
