//! Gradient-inversion attack used to measure how much an observed update
//! reveals about training inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, match_eval, normal_tensor, CodecError, LabelInput, Trainable, DEGENERATE_NORM};
use crate::models::{dims_of, one_hot, ModelError, ParamVector};
use crate::optim::{Adam, AdamConfig, OptimError, StepDecay};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum LeakageError {
    #[error("degenerate target: norm below {DEGENERATE_NORM}")]
    DegenerateTarget,
    #[error("invalid attack config: {0}")]
    InvalidConfig(String),
    #[error("non-finite values during inversion at iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "labels", rename_all = "snake_case")]
pub enum LabelMode {
    /// The attacker knows the label of every reconstructed datum.
    Known(Vec<usize>),
    /// Labels are optimized as softmax logits alongside the inputs.
    Optimized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub num_recon: usize,
    pub iters: usize,
    pub lr: f64,
    pub label_mode: LabelMode,
}

impl AttackConfig {
    pub fn validate(&self, num_classes: usize) -> Result<(), LeakageError> {
        let bad = |m: String| Err(LeakageError::InvalidConfig(m));
        if self.num_recon == 0 {
            return bad("num_recon must be >= 1".into());
        }
        if self.iters == 0 {
            return bad("iters must be >= 1".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if let LabelMode::Known(labels) = &self.label_mode {
            if labels.len() != self.num_recon {
                return bad(format!("{} known labels for {} reconstructions", labels.len(), self.num_recon));
            }
            if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
                return bad(format!("label {l} outside [0, {num_classes})"));
            }
        }
        Ok(())
    }

    /// Decay by 10x at 3/8, 5/8 and 7/8 of the run, the same shape as the
    /// synthesis schedule.
    fn schedule(&self) -> StepDecay {
        let mut milestones: Vec<usize> = [3, 5, 7].iter().map(|k| (self.iters * k / 8).max(1)).collect();
        milestones.dedup();
        StepDecay {
            base_lr: self.lr,
            milestones,
            factor: 0.1,
            max_iters: self.iters,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackReport {
    /// `[num_recon, D]`
    #[serde(skip)]
    pub recon_inputs: Tensor,
    pub initial_cosine: f64,
    pub final_cosine: f64,
    /// Per reconstruction, MSE to its nearest reference row.
    pub nearest_datum_mse: Vec<f64>,
}

/// Optimizes `cfg.num_recon` inputs so that their uniformly weighted
/// gradient at `params` aligns with `target`, then scores each
/// reconstruction against its nearest row of `reference`.
pub fn invert_update(
    target: &ParamVector,
    params: &ParamVector,
    cfg: &AttackConfig,
    seed: u64,
    reference: &Tensor,
) -> Result<AttackReport, LeakageError> {
    let (d, c) = dims_of(params);
    cfg.validate(c)?;
    target.dot(params)?;
    if target.l2_norm() < DEGENERATE_NORM {
        return Err(LeakageError::DegenerateTarget);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = normal_tensor(&mut rng, &[cfg.num_recon, d]);
    let fixed;
    let mut ylog = None;
    match &cfg.label_mode {
        LabelMode::Known(l) => fixed = Some(one_hot(l, c)),
        LabelMode::Optimized => {
            fixed = None;
            ylog = Some(normal_tensor(&mut rng, &[cfg.num_recon, c]));
        }
    }
    let alpha = Tensor::zeros(&[cfg.num_recon]);
    let trainable = Trainable {
        labels: ylog.is_some(),
        alpha: false,
    };
    let adam_cfg = AdamConfig::default();
    let mut adam_x = Adam::new(x.numel(), &adam_cfg);
    let mut adam_y = Adam::new(cfg.num_recon * c, &adam_cfg);
    let sched = cfg.schedule();

    let eval = |x: &Tensor, ylog: &Option<Tensor>| {
        let labels = match (ylog, &fixed) {
            (Some(t), _) => LabelInput::Logits(t),
            (None, Some(t)) => LabelInput::Fixed(t),
            (None, None) => unreachable!(),
        };
        match_eval(target, params, x, labels, &alpha, trainable)
    };

    let mut initial = None;
    for iteration in 1..=cfg.iters {
        let e = eval(&x, &ylog)?;
        if !e.r_loss.is_finite() || e.d_inputs.check_finite().is_err() {
            return Err(LeakageError::NonFinite { iteration });
        }
        initial.get_or_insert(1.0 - e.r_loss);
        let lr = sched.lr_at(iteration)?;
        adam_x.step(x.data_mut(), e.d_inputs.data(), lr)?;
        if let (Some(y), Some(dy)) = (ylog.as_mut(), e.d_labels) {
            adam_y.step(y.data_mut(), dy.data(), lr)?;
        }
    }
    let last = eval(&x, &ylog)?;
    let nearest_datum_mse = nearest_mse(&x, reference)?;
    Ok(AttackReport {
        recon_inputs: x,
        initial_cosine: initial.unwrap(),
        final_cosine: 1.0 - last.r_loss,
        nearest_datum_mse,
    })
}

/// Per row of `recon`, the smallest mean squared difference to any row of
/// `reference`.
pub fn nearest_mse(recon: &Tensor, reference: &Tensor) -> Result<Vec<f64>, LeakageError> {
    let (n, d) = recon.rows_cols();
    let (m, d_ref) = reference.rows_cols();
    if d != d_ref || m == 0 {
        return Err(LeakageError::InvalidConfig(format!(
            "reference must be non-empty with {d} columns, got [{m}, {d_ref}]"
        )));
    }
    Ok((0..n)
        .map(|i| {
            let r = recon.row(i);
            (0..m)
                .map(|j| {
                    let s: f64 = r.iter().zip(reference.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                    s / d as f64
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect())
}

/// Gradient of the summed hard-label loss of `inputs`, the raw update a
/// single-step client with batch `inputs` would reveal (up to the step size).
pub fn raw_gradient(params: &ParamVector, inputs: &Tensor, labels: &[usize]) -> Result<ParamVector, LeakageError> {
    Ok(crate::models::minibatch_gradient(params, inputs, labels)?)
}

/// Decoded update an observer of a payload can reconstruct.
pub fn observed_update(params: &ParamVector, ds: &codec::SyntheticDataset) -> Result<ParamVector, LeakageError> {
    Ok(codec::decode(params, ds)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{minibatch_gradient, MlpSpec};

    fn setup() -> (ParamVector, Tensor) {
        let params = MlpSpec::new(vec![4, 8, 3], 3).unwrap().init();
        let x = Tensor::matrix(1, 4, vec![0.3, -0.7, 1.1, 0.2]).unwrap();
        (params, x)
    }

    #[test]
    fn nearest_mse_picks_closest_row() {
        let reference = Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let recon = Tensor::matrix(1, 2, vec![0.9, 1.1]).unwrap();
        let m = nearest_mse(&recon, &reference).unwrap();
        assert!((m[0] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn degenerate_target() {
        let (params, x) = setup();
        let cfg = AttackConfig {
            num_recon: 1,
            iters: 5,
            lr: 0.1,
            label_mode: LabelMode::Optimized,
        };
        let zero = params.scale(0.0);
        assert!(matches!(
            invert_update(&zero, &params, &cfg, 0, &x),
            Err(LeakageError::DegenerateTarget)
        ));
    }

    #[test]
    fn own_reconstruction_gradient_is_a_fixed_point() {
        // With the same seed the attack starts at the datum whose gradient is
        // the target, so the initial cosine is already 1.
        let (params, _) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let start = normal_tensor(&mut rng, &[1, 4]);
        let target = minibatch_gradient(&params, &start, &[2]).unwrap();
        let cfg = AttackConfig {
            num_recon: 1,
            iters: 3,
            lr: 0.01,
            label_mode: LabelMode::Known(vec![2]),
        };
        let rep = invert_update(&target, &params, &cfg, 11, &start).unwrap();
        assert!((rep.initial_cosine - 1.0).abs() < 1e-12, "{}", rep.initial_cosine);
        assert!(rep.final_cosine > 1.0 - 1e-9);
        assert!(rep.nearest_datum_mse[0] < 1e-6);
    }

    #[test]
    fn config_errors() {
        let (params, x) = setup();
        let target = minibatch_gradient(&params, &x, &[0]).unwrap();
        let cfg = AttackConfig {
            num_recon: 2,
            iters: 5,
            lr: 0.1,
            label_mode: LabelMode::Known(vec![0]),
        };
        assert!(invert_update(&target, &params, &cfg, 0, &x).is_err());
        let cfg = AttackConfig {
            num_recon: 1,
            iters: 5,
            lr: 0.1,
            label_mode: LabelMode::Known(vec![7]),
        };
        assert!(invert_update(&target, &params, &cfg, 0, &x).is_err());
    }
}
