//! First-order update rules and per-epoch learning-rate schedules.

use std::collections::HashMap;
use std::f64::consts::PI;

use crate::tensor::{lit, Element, Tensor};

use super::params::{ParamId, ParamStore};

/// SGD with momentum and L2 weight decay:
/// `d = g + wd*w; buf = momentum*buf + d; w -= lr*buf`.
/// An empty `buf` is initialised to `d`.
pub fn sgd_step<T: Element>(
    w: &mut [T],
    grad: &[T],
    buf: &mut Vec<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    let (lr, mu, wd) = (lit::<T>(lr), lit::<T>(momentum), lit::<T>(weight_decay));
    let fresh = buf.is_empty();
    if fresh {
        buf.resize(w.len(), T::zero());
    }
    for ((wi, &gi), bi) in w.iter_mut().zip(grad).zip(buf.iter_mut()) {
        let d = gi + wd * *wi;
        *bi = if fresh { d } else { mu * *bi + d };
        *wi -= lr * *bi;
    }
}

#[derive(Clone, Debug, Default)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
        }
    }
}

/// Adam with L2 weight decay folded into the gradient and bias correction.
pub fn adam_step<T: Element>(w: &mut [T], grad: &[T], state: &mut AdamState<T>, lr: f64, cfg: &AdamConfig) {
    if state.m.is_empty() {
        state.m = vec![T::zero(); w.len()];
        state.v = vec![T::zero(); w.len()];
    }
    state.step += 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let (lb1, lb2, wd, eps) = (lit::<T>(b1), lit::<T>(b2), lit::<T>(cfg.weight_decay), lit::<T>(cfg.eps));
    let step_size = lit::<T>(lr / c1);
    let c2_sqrt = lit::<T>(c2.sqrt());
    for i in 0..w.len() {
        let g = grad[i] + wd * w[i];
        state.m[i] = lb1 * state.m[i] + (T::one() - lb1) * g;
        state.v[i] = lb2 * state.v[i] + (T::one() - lb2) * g * g;
        let denom = state.v[i].sqrt() / c2_sqrt + eps;
        w[i] -= step_size * state.m[i] / denom;
    }
}

/// `eta_min + (eta0 - eta_min) * (1 + cos(pi * epoch / total)) / 2`.
pub fn cosine_schedule(eta0: f64, eta_min: f64, total: usize, epoch: usize) -> f64 {
    let t = epoch.min(total) as f64 / total.max(1) as f64;
    eta_min + (eta0 - eta_min) * (1.0 + (PI * t).cos()) / 2.0
}

/// `eta0 * factor^(number of milestones <= epoch)`.
pub fn step_schedule(eta0: f64, milestones: &[usize], factor: f64, epoch: usize) -> f64 {
    let passed = milestones.iter().filter(|&&m| epoch >= m).count();
    eta0 * factor.powi(passed as i32)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Schedule {
    Constant(f64),
    Cosine { initial: f64, min: f64, epochs: usize },
    Step { initial: f64, milestones: Vec<usize>, factor: f64 },
}

impl Schedule {
    pub fn at(&self, epoch: usize) -> f64 {
        match self {
            Schedule::Constant(v) => *v,
            Schedule::Cosine { initial, min, epochs } => cosine_schedule(*initial, *min, *epochs, epoch),
            Schedule::Step {
                initial,
                milestones,
                factor,
            } => step_schedule(*initial, milestones, *factor, epoch),
        }
    }
}

/// SGD over a [`ParamStore`]. Parameters without a gradient this step are
/// left untouched, momentum included.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: HashMap<ParamId, Vec<T>>,
}

impl<T: Element> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: HashMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) {
        for (id, g) in grads {
            let buf = self.buffers.entry(*id).or_default();
            sgd_step(store.value_mut(*id).data_mut(), g.data(), buf, lr, self.momentum, self.weight_decay);
        }
    }
}
