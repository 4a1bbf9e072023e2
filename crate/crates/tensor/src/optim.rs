//! Adam with an L2 penalty folded into the gradient.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 0.004, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-5 }
    }
}

/// Moment accumulators for every parameter of one store.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    shapes: Vec<Vec<usize>>,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let shapes: Vec<Vec<usize>> = params.iter().map(|(_, t)| t.shape().to_vec()).collect();
        let zeros = |s: &Vec<usize>| vec![T::zero(); s.iter().product()];
        Self {
            config,
            step: 0,
            m: shapes.iter().map(zeros).collect(),
            v: shapes.iter().map(zeros).collect(),
            shapes,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// One bias-corrected update from the accumulated gradients. Parameters
    /// without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        if params.len() != self.shapes.len() {
            return Err(TensorError::State(format!(
                "optimizer tracks {} parameters, store has {}",
                self.shapes.len(),
                params.len()
            )));
        }
        for ((name, t), shape) in params.iter().zip(&self.shapes) {
            if t.shape() != shape.as_slice() {
                return Err(TensorError::State(format!(
                    "parameter `{name}` changed shape from {shape:?} to {:?}",
                    t.shape()
                )));
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let lr = T::of(c.learning_rate);
        let eps = T::of(c.eps);
        let wd = T::of(c.weight_decay);
        let bc1 = T::of(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(self.step as i32));
        for ((t, m), v) in params.tensors_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = t.grad().map(<[T]>::to_vec);
            let data = t.data_mut();
            for i in 0..data.len() {
                let w = data[i];
                let g = grad.as_ref().map_or(T::zero(), |g| g[i]) + wd * w;
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] = w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
