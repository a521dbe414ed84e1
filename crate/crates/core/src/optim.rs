//! SGD for client training and Adam with step decay for synthesis.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{ModelError, ParamVector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("iteration {iter} outside [1, {max_iters}]")]
    IterOutOfRange { iter: usize, max_iters: usize },
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
    #[error("non-finite gradient")]
    NonFinite,
    #[error("state holds {expected} entries, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    /// Rounds at which the learning rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            decay_epochs: Vec::new(),
            decay_factor: 0.1,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(OptimError::InvalidConfig(format!("sgd lr must be > 0, got {}", self.lr)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(OptimError::InvalidConfig(format!(
                "sgd decay factor must be in (0, 1], got {}",
                self.decay_factor
            )));
        }
        Ok(())
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let passed = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.lr * self.decay_factor.powi(passed as i32)
    }
}

/// `params - lr * grads`.
pub fn sgd_step(params: &ParamVector, grads: &ParamVector, lr: f64) -> Result<ParamVector, OptimError> {
    if !grads.is_finite() {
        return Err(OptimError::NonFinite);
    }
    Ok(params.sub(&grads.scale(lr))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr_x: f64,
    pub lr_y: f64,
    pub lr_alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_iters: usize,
    pub decay_iters: Vec<usize>,
    pub decay_factor: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr_x: 0.1,
            lr_y: 0.1,
            lr_alpha: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_iters: 1000,
            decay_iters: vec![375, 625, 875],
            decay_factor: 0.1,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |m: String| Err(OptimError::InvalidConfig(m));
        for (name, lr) in [("lr_x", self.lr_x), ("lr_y", self.lr_y), ("lr_alpha", self.lr_alpha)] {
            if !(lr > 0.0) || !lr.is_finite() {
                return bad(format!("adam {name} must be > 0, got {lr}"));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("adam betas must be in [0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if !(self.eps > 0.0) {
            return bad(format!("adam eps must be > 0, got {}", self.eps));
        }
        if self.max_iters == 0 {
            return bad("adam max_iters must be >= 1".into());
        }
        if self.decay_iters.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("adam decay_iters must be strictly increasing: {:?}", self.decay_iters));
        }
        if self.decay_iters.last().is_some_and(|&d| d >= self.max_iters) {
            return bad(format!(
                "adam decay_iters {:?} must be below max_iters {}",
                self.decay_iters, self.max_iters
            ));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("adam decay factor must be in (0, 1], got {}", self.decay_factor));
        }
        Ok(())
    }

    /// Step-decay schedule starting from `base_lr`.
    pub fn schedule(&self, base_lr: f64) -> StepDecay {
        StepDecay {
            base_lr,
            milestones: self.decay_iters.clone(),
            factor: self.decay_factor,
            max_iters: self.max_iters,
        }
    }
}

/// Piecewise-constant schedule: the rate is multiplied by `factor` once for
/// every milestone `m` with `iter >= m`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDecay {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
    pub max_iters: usize,
}

impl StepDecay {
    /// Learning rate at 1-based iteration `iter`.
    pub fn lr_at(&self, iter: usize) -> Result<f64, OptimError> {
        if iter == 0 || iter > self.max_iters {
            return Err(OptimError::IterOutOfRange {
                iter,
                max_iters: self.max_iters,
            });
        }
        let passed = self.milestones.iter().filter(|&&m| iter >= m).count();
        Ok(self.base_lr * self.factor.powi(passed as i32))
    }
}

/// Adam moment state for one flat parameter block.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(len: usize, cfg: &AdamConfig) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<(), OptimError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(OptimError::LengthMismatch {
                expected: self.m.len(),
                actual: params.len().min(grads.len()),
            });
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(OptimError::NonFinite);
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}
