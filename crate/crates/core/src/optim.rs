//! Optimisers over flat parameter vectors, with the update rules of the
//! common deep-learning libraries (weight decay added to the gradient).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check(params: &[f32], grads: &[f32], state: usize) -> Result<()> {
    if params.len() != grads.len() || params.len() != state {
        return Err(Error::dim(format!(
            "optimiser over {state} values got {} params and {} grads",
            params.len(),
            grads.len()
        )));
    }
    Ok(())
}

/// SGD with heavy-ball momentum: `b ← μb + (g + λp)`, `p ← p − lr·b`.
/// The first step initialises `b` to the gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    buf: Vec<f32>,
    started: bool,
}

impl Sgd {
    pub fn new(n: usize, momentum: f32, weight_decay: f32) -> Self {
        Self {
            momentum,
            weight_decay,
            buf: vec![0.0; n],
            started: false,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f32) -> Result<()> {
        check(params, grads, self.buf.len())?;
        for ((p, &g), b) in params.iter_mut().zip(grads).zip(&mut self.buf) {
            let d = g + self.weight_decay * *p;
            *b = if self.started { self.momentum * *b + d } else { d };
            *p -= lr * *b;
        }
        self.started = true;
        Ok(())
    }
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f32,
    pub betas: (f32, f32),
    pub eps: f32,
    pub weight_decay: f32,
    m: Vec<f32>,
    v: Vec<f32>,
    t: u32,
}

impl Adam {
    pub fn new(n: usize, lr: f32, betas: (f32, f32), weight_decay: f32) -> Self {
        Self {
            lr,
            betas,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps(&self) -> u32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) -> Result<()> {
        check(params, grads, self.m.len())?;
        self.t += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let d = g + self.weight_decay * *p;
            *m = b1 * *m + (1.0 - b1) * d;
            *v = b2 * *v + (1.0 - b2) * d * d;
            let denom = (*v / c2).sqrt() + self.eps;
            *p -= self.lr * (*m / c1) / denom;
        }
        Ok(())
    }
}

/// Cosine annealing from `lr_max` at epoch 0 towards `lr_min` at `total`.
pub fn cosine_lr(lr_max: f32, lr_min: f32, epoch: usize, total: usize) -> f32 {
    if total == 0 {
        return lr_max;
    }
    let t = epoch as f64 / total as f64;
    (lr_min as f64 + 0.5 * (lr_max - lr_min) as f64 * (1.0 + (std::f64::consts::PI * t).cos())) as f32
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [f32], max_norm: f32) -> f32 {
    let norm = grads.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / (norm + 1e-6);
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}
