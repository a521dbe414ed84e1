//! Encoding a weight update into a small synthetic dataset, and decoding it.
//!
//! The encoder optimizes synthetic inputs, soft-label logits and
//! spanning-ratio logits so that the gradient of their spanning-ratio
//! weighted cross-entropy points in the same direction as a target update.
//! Direction is matched with one global cosine; magnitude is restored per
//! layer by the scaling ratios shipped alongside the data.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::ledger::{tofu_payload_scalars, PayloadSpec};
use crate::models::{
    dims_of, forward_graph, soft_cross_entropy_rows, ModelError, ParamVector, SoftBatch,
};
use crate::ndgrad::{Graph, GradError, Var};
use crate::optim::{Adam, AdamConfig, OptimError};
use crate::tensor::Tensor;

/// Norms below this count as zero.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("degenerate update: norm below {DEGENERATE_NORM}")]
    DegenerateUpdate,
    #[error("non-finite values during synthesis at iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error("need at least one synthetic datapoint")]
    NoImages,
    #[error("{expected} layers but {actual} scaling ratios")]
    GammaLength { expected: usize, actual: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

impl From<crate::tensor::TensorError> for CodecError {
    fn from(e: crate::tensor::TensorError) -> Self {
        CodecError::Model(e.into())
    }
}

/// The payload exchanged in place of a weight update.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub batch: SoftBatch,
    /// Per-layer scaling ratios.
    pub gamma: Vec<f64>,
    /// Reconstruction loss of the unscaled synthetic update when synthesis ended.
    pub final_r_loss: f64,
}

impl SyntheticDataset {
    pub fn nimgs(&self) -> usize {
        self.batch.len()
    }

    pub fn payload_spec(&self, param_count: usize) -> PayloadSpec {
        PayloadSpec {
            nimgs: self.nimgs(),
            input_dim: self.batch.inputs.rows_cols().1,
            class_count: self.batch.label_logits.rows_cols().1,
            layer_count: self.gamma.len(),
            param_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodeReport {
    /// Reconstruction loss at the start of every iteration.
    pub r_loss_trace: Vec<f64>,
    pub iterations_run: usize,
    pub payload_scalars: u64,
    /// Layers whose synthetic gradient vanished; their ratio is 0.
    pub dead_layers: Vec<usize>,
}

/// Gradient of `sum_i alpha_i * loss_i` with respect to `wrt`.
///
/// Weighting the per-datum losses before one backward pass equals weighting
/// the per-datum gradients, so this is the spanning-ratio combination of
/// the individual gradients.
pub fn alpha_weighted_gradient(
    g: &mut Graph,
    per_datum_losses: Var,
    alphas: Var,
    wrt: &[Var],
) -> Result<Vec<Var>, GradError> {
    let weighted = g.mul(per_datum_losses, alphas)?;
    let total = g.sum(weighted);
    g.grad(total, wrt)
}

/// Records the synthetic update for `inputs`, effective `labels` and
/// effective `alphas` on `g`, returning one handle per parameter tensor.
fn synthetic_update_graph(
    g: &mut Graph,
    params: &ParamVector,
    inputs: Var,
    labels: Var,
    alphas: Var,
) -> Result<Vec<Var>, CodecError> {
    let pv = params.to_graph(g, true);
    let logits = forward_graph(g, &pv, inputs)?;
    let ce = soft_cross_entropy_rows(g, logits, labels)?;
    Ok(alpha_weighted_gradient(g, ce, alphas, &pv.flat())?)
}

/// `1 - cos(u_syn, u_real)` over the flattened updates, as a graph scalar.
fn r_loss_graph(g: &mut Graph, u_syn: &[Var], u_real: &ParamVector) -> Result<Var, CodecError> {
    let real: Vec<&Tensor> = u_real
        .layers()
        .iter()
        .flat_map(|l| [&l.weight, &l.bias])
        .collect();
    let mut dot: Option<Var> = None;
    let mut sq: Option<Var> = None;
    for (&s, &r) in u_syn.iter().zip(&real) {
        let rv = g.constant(r.clone());
        let d = g.dot(s, rv)?;
        let n = g.dot(s, s)?;
        dot = Some(match dot {
            None => d,
            Some(acc) => g.add(acc, d)?,
        });
        sq = Some(match sq {
            None => n,
            Some(acc) => g.add(acc, n)?,
        });
    }
    let (dot, sq) = (dot.unwrap(), sq.unwrap());
    let norm_syn = g.sqrt(sq);
    let denom = g.scale(norm_syn, u_real.l2_norm());
    let cos = g.div(dot, denom)?;
    let one = g.constant(Tensor::scalar(1.0));
    Ok(g.sub(one, cos)?)
}

/// Gradient of the spanning-ratio weighted loss of `batch` w.r.t. `params`.
pub fn spanned_update(params: &ParamVector, batch: &SoftBatch) -> Result<ParamVector, CodecError> {
    batch.check_dims(dims_of(params))?;
    let mut g = Graph::new();
    let x = g.constant(batch.inputs.clone());
    let ylog = g.constant(batch.label_logits.clone());
    let y = g.softmax(ylog);
    let alog = g.constant(batch.alpha_logits.clone());
    let a = g.softmax(alog);
    let grads = synthetic_update_graph(&mut g, params, x, y, a)?;
    Ok(ParamVector::from_tensors(
        grads.into_iter().map(|v| g.value(v).clone()).collect(),
    ))
}

/// Reconstruction loss `1 - cos(u_real, u_syn)` on the flattened updates,
/// clamped to `[0, 2]`.
///
/// If exactly one vector is zero the cosine is taken as 0.
pub fn r_loss(u_real: &ParamVector, u_syn: &ParamVector) -> Result<f64, CodecError> {
    let dot = u_real.dot(u_syn)?;
    let (nr, ns) = (u_real.l2_norm(), u_syn.l2_norm());
    if nr < DEGENERATE_NORM && ns < DEGENERATE_NORM {
        return Err(CodecError::DegenerateUpdate);
    }
    if nr < DEGENERATE_NORM || ns < DEGENERATE_NORM {
        return Ok(1.0);
    }
    Ok((1.0 - dot / (nr * ns)).clamp(0.0, 2.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingRatios {
    pub gamma: Vec<f64>,
    pub dead_layers: Vec<usize>,
}

/// Per-layer `||u_real_l|| / ||u_syn_l||`.
///
/// A layer whose synthetic part vanished while the real part did not is a
/// dead layer: its ratio is 0 and it is listed in `dead_layers`.
pub fn scaling_ratios(u_real: &ParamVector, u_syn: &ParamVector) -> Result<ScalingRatios, CodecError> {
    if u_real.num_layers() != u_syn.num_layers() {
        return Err(CodecError::GammaLength {
            expected: u_real.num_layers(),
            actual: u_syn.num_layers(),
        });
    }
    let mut gamma = Vec::with_capacity(u_real.num_layers());
    let mut dead_layers = Vec::new();
    for (l, (nr, ns)) in u_real
        .layer_norms()
        .into_iter()
        .zip(u_syn.layer_norms())
        .enumerate()
    {
        if nr < DEGENERATE_NORM {
            gamma.push(0.0);
        } else if ns < DEGENERATE_NORM {
            gamma.push(0.0);
            dead_layers.push(l);
        } else {
            gamma.push(nr / ns);
        }
    }
    Ok(ScalingRatios { gamma, dead_layers })
}

/// Labels as fed to the matcher.
#[derive(Debug, Clone, Copy)]
pub(crate) enum LabelInput<'a> {
    /// Unconstrained logits mapped through softmax.
    Logits(&'a Tensor),
    /// Fixed probabilities; never differentiated.
    Fixed(&'a Tensor),
}

/// Which synthetic blocks receive gradients.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Trainable {
    pub labels: bool,
    pub alpha: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct MatchEval {
    pub r_loss: f64,
    pub d_inputs: Tensor,
    pub d_labels: Option<Tensor>,
    pub d_alpha: Option<Tensor>,
}

/// Reconstruction loss and its exact gradients with respect to the
/// synthetic blocks, via double backprop. Shared by the encoder and the
/// inversion attack.
pub(crate) fn match_eval(
    target: &ParamVector,
    params: &ParamVector,
    inputs: &Tensor,
    labels: LabelInput<'_>,
    alpha_logits: &Tensor,
    trainable: Trainable,
) -> Result<MatchEval, CodecError> {
    let mut g = Graph::new();
    let x = g.leaf(inputs.clone());
    let (y, ylog) = match labels {
        LabelInput::Logits(t) => {
            let v = if trainable.labels { g.leaf(t.clone()) } else { g.constant(t.clone()) };
            (g.softmax(v), Some(v))
        }
        LabelInput::Fixed(t) => (g.constant(t.clone()), None),
    };
    let alog = if trainable.alpha {
        g.leaf(alpha_logits.clone())
    } else {
        g.constant(alpha_logits.clone())
    };
    let a = g.softmax(alog);
    let u_syn = synthetic_update_graph(&mut g, params, x, y, a)?;
    let r = r_loss_graph(&mut g, &u_syn, target)?;

    let mut wrt = vec![x];
    if let (true, Some(v)) = (trainable.labels, ylog) {
        wrt.push(v);
    }
    if trainable.alpha {
        wrt.push(alog);
    }
    let mut grads = g.grad_values(r, &wrt)?.into_iter();
    let d_inputs = grads.next().unwrap();
    let d_labels = if trainable.labels && ylog.is_some() { grads.next() } else { None };
    let d_alpha = if trainable.alpha { grads.next() } else { None };
    Ok(MatchEval {
        r_loss: g.value(r).item(),
        d_inputs,
        d_labels,
        d_alpha,
    })
}

/// Gradients of the reconstruction loss with respect to each block of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradients {
    pub inputs: Tensor,
    pub label_logits: Tensor,
    pub alpha_logits: Tensor,
}

/// `r_loss(u_real, spanned_update(params, batch))` together with its exact
/// gradients with respect to inputs, label logits and spanning-ratio logits.
pub fn r_loss_gradients(
    u_real: &ParamVector,
    params: &ParamVector,
    batch: &SoftBatch,
) -> Result<(f64, BatchGradients), CodecError> {
    batch.check_dims(dims_of(params))?;
    if u_real.l2_norm() < DEGENERATE_NORM {
        return Err(CodecError::DegenerateUpdate);
    }
    let e = match_eval(
        u_real,
        params,
        &batch.inputs,
        LabelInput::Logits(&batch.label_logits),
        &batch.alpha_logits,
        Trainable {
            labels: true,
            alpha: true,
        },
    )?;
    Ok((
        e.r_loss,
        BatchGradients {
            inputs: e.d_inputs,
            label_logits: e.d_labels.unwrap(),
            alpha_logits: e.d_alpha.unwrap(),
        },
    ))
}

pub(crate) fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Synthesizes `nimgs` datapoints whose weighted gradient at `params`
/// aligns with `u_real`, then computes the per-layer scaling ratios.
///
/// All blocks start from a seeded standard normal; every one of
/// `cfg.max_iters` Adam iterations is run.
pub fn encode(
    u_real: &ParamVector,
    params: &ParamVector,
    nimgs: usize,
    cfg: &AdamConfig,
    seed: u64,
) -> Result<(SyntheticDataset, EncodeReport), CodecError> {
    cfg.validate()?;
    if nimgs == 0 {
        return Err(CodecError::NoImages);
    }
    // layout check
    u_real.dot(params)?;
    if u_real.l2_norm() < DEGENERATE_NORM {
        return Err(CodecError::DegenerateUpdate);
    }
    let (d, c) = dims_of(params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch = SoftBatch {
        inputs: normal_tensor(&mut rng, &[nimgs, d]),
        label_logits: normal_tensor(&mut rng, &[nimgs, c]),
        alpha_logits: normal_tensor(&mut rng, &[nimgs]),
    };

    let (sx, sy, sa) = (
        cfg.schedule(cfg.lr_x),
        cfg.schedule(cfg.lr_y),
        cfg.schedule(cfg.lr_alpha),
    );
    let mut adam_x = Adam::new(batch.inputs.numel(), cfg);
    let mut adam_y = Adam::new(batch.label_logits.numel(), cfg);
    let mut adam_a = Adam::new(batch.alpha_logits.numel(), cfg);
    let mut trace = Vec::with_capacity(cfg.max_iters);
    let all = Trainable {
        labels: true,
        alpha: true,
    };

    for iteration in 1..=cfg.max_iters {
        let e = match_eval(
            u_real,
            params,
            &batch.inputs,
            LabelInput::Logits(&batch.label_logits),
            &batch.alpha_logits,
            all,
        )?;
        let (dy, da) = (e.d_labels.unwrap(), e.d_alpha.unwrap());
        let finite = e.r_loss.is_finite()
            && e.d_inputs.check_finite().is_ok()
            && dy.check_finite().is_ok()
            && da.check_finite().is_ok();
        if !finite {
            return Err(CodecError::NonFinite { iteration });
        }
        trace.push(e.r_loss);
        adam_x.step(batch.inputs.data_mut(), e.d_inputs.data(), sx.lr_at(iteration)?)?;
        adam_y.step(batch.label_logits.data_mut(), dy.data(), sy.lr_at(iteration)?)?;
        adam_a.step(batch.alpha_logits.data_mut(), da.data(), sa.lr_at(iteration)?)?;
    }

    let u_syn = spanned_update(params, &batch)?;
    if !u_syn.is_finite() {
        return Err(CodecError::NonFinite {
            iteration: cfg.max_iters,
        });
    }
    let final_r_loss = r_loss(u_real, &u_syn)?;
    let ratios = scaling_ratios(u_real, &u_syn)?;
    let ds = SyntheticDataset {
        batch,
        gamma: ratios.gamma,
        final_r_loss,
    };
    let report = EncodeReport {
        iterations_run: trace.len(),
        r_loss_trace: trace,
        payload_scalars: tofu_payload_scalars(&ds.payload_spec(params.total_len())),
        dead_layers: ratios.dead_layers,
    };
    Ok((ds, report))
}

/// Recreates the update carried by `ds`: one forward and one backward pass,
/// then each layer scaled by its ratio.
pub fn decode(params: &ParamVector, ds: &SyntheticDataset) -> Result<ParamVector, CodecError> {
    if ds.gamma.len() != params.num_layers() {
        return Err(CodecError::GammaLength {
            expected: params.num_layers(),
            actual: ds.gamma.len(),
        });
    }
    let u = spanned_update(params, &ds.batch)?;
    Ok(u.scale_layers(&ds.gamma)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{minibatch_gradient, Layer, MlpSpec};
    use proptest::prelude::*;

    fn pv_from(spec: &MlpSpec, v: Vec<f64>) -> ParamVector {
        ParamVector::unflatten(&Tensor::vector(v), spec).unwrap()
    }

    fn random_batch(seed: u64, n: usize, d: usize, c: usize) -> SoftBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SoftBatch {
            inputs: normal_tensor(&mut rng, &[n, d]),
            label_logits: normal_tensor(&mut rng, &[n, c]),
            alpha_logits: normal_tensor(&mut rng, &[n]),
        }
    }

    #[test]
    fn squared_error_weighted_gradient_hand_oracle() {
        // loss_i = 0.5 (theta x_i - y_i)^2, g_i = (theta x_i - y_i) x_i
        let mut g = Graph::new();
        let theta = g.leaf(Tensor::matrix(1, 1, vec![0.0]).unwrap());
        let x = g.constant(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        let y = g.constant(Tensor::matrix(2, 1, vec![1.0, -1.0]).unwrap());
        let pred = g.matmul(x, theta).unwrap();
        let r = g.sub(pred, y).unwrap();
        let sq = g.mul(r, r).unwrap();
        let rows = g.sum_cols(sq);
        let losses = g.scale(rows, 0.5);
        let alphas = g.constant(Tensor::vector(vec![0.75, 0.25]));
        let grads = alpha_weighted_gradient(&mut g, losses, alphas, &[theta]).unwrap();
        let expected = 0.75 * (0.0 - 1.0) + 0.25 * (0.0 + 1.0);
        assert_eq!(g.value(grads[0]).item(), expected);
        assert_eq!(expected, -0.5);
    }

    #[test]
    fn single_datum_is_plain_gradient() {
        let spec = MlpSpec::new(vec![3, 4, 2], 1).unwrap();
        let p = spec.init();
        let mut b = random_batch(5, 1, 3, 2);
        // a one-hot-ish label lets us compare against the hard-label path
        b.label_logits = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let u = spanned_update(&p, &b).unwrap();
        let half0 = minibatch_gradient(&p, &b.inputs, &[0]).unwrap();
        let half1 = minibatch_gradient(&p, &b.inputs, &[1]).unwrap();
        let expected = half0.add(&half1).unwrap().scale(0.5);
        assert!(u.max_abs_diff(&expected).unwrap() < 1e-14);
    }

    #[test]
    fn uniform_alpha_is_mean_gradient() {
        let spec = MlpSpec::new(vec![3, 4, 2], 1).unwrap();
        let p = spec.init();
        let mut b = random_batch(9, 2, 3, 2);
        b.alpha_logits = Tensor::vector(vec![0.3, 0.3]);
        let u = spanned_update(&p, &b).unwrap();
        let per = |i: usize| {
            let single = SoftBatch {
                inputs: b.inputs.select_rows(&[i]),
                label_logits: b.label_logits.select_rows(&[i]),
                alpha_logits: Tensor::vector(vec![0.0]),
            };
            spanned_update(&p, &single).unwrap()
        };
        let mean = ParamVector::mean(&[per(0), per(1)]).unwrap();
        assert!(u.max_abs_diff(&mean).unwrap() < 1e-15);
    }

    #[test]
    fn spanned_update_rejects_bad_dims() {
        let p = MlpSpec::new(vec![3, 4, 2], 1).unwrap().init();
        let b = random_batch(1, 2, 4, 2);
        assert!(matches!(spanned_update(&p, &b), Err(CodecError::Model(_))));
    }

    #[test]
    fn r_loss_reference_values() {
        let spec = MlpSpec::new(vec![1, 2], 0).unwrap(); // 4 params
        let u = pv_from(&spec, vec![1.0, 2.0, 0.0, -1.0]);
        assert!(r_loss(&u, &u).unwrap().abs() < 1e-15);
        assert!((r_loss(&u, &u.scale(-1.0)).unwrap() - 2.0).abs() < 1e-15);
        let orth = pv_from(&spec, vec![2.0, -1.0, 3.0, 0.0]);
        assert_eq!(r_loss(&u, &orth).unwrap(), 1.0);
        let zero = spec.zeros();
        assert_eq!(r_loss(&zero, &zero), Err(CodecError::DegenerateUpdate));
    }

    #[test]
    fn scaling_ratio_formula_and_dead_layers() {
        let spec = MlpSpec::new(vec![1, 1, 2], 0).unwrap(); // layers of 2 and 4 params
        let real = pv_from(&spec, vec![2.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let syn = pv_from(&spec, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let r = scaling_ratios(&real, &syn).unwrap();
        assert_eq!(r.gamma, vec![2.0, 0.0]);
        assert_eq!(r.dead_layers, vec![1]);
        let same = scaling_ratios(&real, &real).unwrap();
        assert_eq!(same.gamma, vec![1.0, 1.0]);
        assert!(same.dead_layers.is_empty());
    }

    #[test]
    fn decode_applies_gamma_per_layer() {
        let spec = MlpSpec::new(vec![3, 4, 2], 2).unwrap();
        let p = spec.init();
        let batch = random_batch(3, 4, 3, 2);
        let plain = spanned_update(&p, &batch).unwrap();
        let ones = SyntheticDataset {
            batch: batch.clone(),
            gamma: vec![1.0, 1.0],
            final_r_loss: 0.0,
        };
        assert_eq!(decode(&p, &ones).unwrap(), plain);
        let doubled = SyntheticDataset {
            gamma: vec![1.0, 2.0],
            ..ones.clone()
        };
        let d = decode(&p, &doubled).unwrap();
        assert_eq!(d.layers()[0], plain.layers()[0]);
        assert_eq!(d.layers()[1].weight, plain.layers()[1].weight.map(|v| v * 2.0));
        let short = SyntheticDataset {
            gamma: vec![1.0],
            ..ones
        };
        assert!(matches!(decode(&p, &short), Err(CodecError::GammaLength { .. })));
    }

    #[test]
    fn encode_rejects_degenerate_and_empty() {
        let spec = MlpSpec::new(vec![3, 4, 2], 2).unwrap();
        let p = spec.init();
        let cfg = AdamConfig {
            max_iters: 10,
            decay_iters: vec![],
            ..AdamConfig::default()
        };
        assert_eq!(
            encode(&spec.zeros(), &p, 2, &cfg, 0).unwrap_err(),
            CodecError::DegenerateUpdate
        );
        let u = p.clone();
        assert_eq!(encode(&u, &p, 0, &cfg, 0).unwrap_err(), CodecError::NoImages);
    }

    #[test]
    fn encode_single_image_makes_progress() {
        let spec = MlpSpec::new(vec![4, 8, 3], 11).unwrap();
        let p = spec.init();
        let target = spanned_update(&p, &random_batch(77, 6, 4, 3)).unwrap();
        let cfg = AdamConfig {
            max_iters: 200,
            decay_iters: vec![100, 150],
            ..AdamConfig::default()
        };
        let (ds, report) = encode(&target, &p, 1, &cfg, 4).unwrap();
        assert_eq!(report.iterations_run, 200);
        assert_eq!(report.r_loss_trace.len(), 200);
        assert_eq!(ds.nimgs(), 1);
        assert!(ds.final_r_loss < report.r_loss_trace[0]);
        let min = report.r_loss_trace.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min <= report.r_loss_trace[0]);
        // 1 * (4 + 3 + 1) + 2 + 1
        assert_eq!(report.payload_scalars, 11);
    }

    #[test]
    fn decode_norms_match_target_layers() {
        let spec = MlpSpec::new(vec![4, 8, 3], 12).unwrap();
        let p = spec.init();
        let target = spanned_update(&p, &random_batch(7, 5, 4, 3)).unwrap().scale(0.37);
        let cfg = AdamConfig {
            max_iters: 100,
            decay_iters: vec![50],
            ..AdamConfig::default()
        };
        let (ds, _) = encode(&target, &p, 3, &cfg, 1).unwrap();
        let dec = decode(&p, &ds).unwrap();
        for (a, b) in dec.layer_norms().iter().zip(target.layer_norms()) {
            assert!((a - b).abs() <= 1e-9 * b, "{a} vs {b}");
        }
        // decode is pure
        assert_eq!(decode(&p, &ds).unwrap(), dec);
    }

    #[test]
    fn dead_layer_gamma_is_zero_after_decode() {
        let p = ParamVector::from_layers(vec![Layer {
            weight: Tensor::zeros(&[2, 2]),
            bias: Tensor::zeros(&[2]),
        }]);
        let real = ParamVector::from_layers(vec![Layer {
            weight: Tensor::full(&[2, 2], 1.0),
            bias: Tensor::zeros(&[2]),
        }]);
        let r = scaling_ratios(&real, &p).unwrap();
        assert_eq!(r.gamma, vec![0.0]);
        assert_eq!(r.dead_layers, vec![0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn r_loss_symmetric_bounded_and_scale_free(
            a in prop::collection::vec(-5.0f64..5.0, 6),
            b in prop::collection::vec(-5.0f64..5.0, 6),
            c in 0.01f64..100.0,
        ) {
            let spec = MlpSpec::new(vec![1, 1, 2], 0).unwrap();
            let (ua, ub) = (pv_from(&spec, a), pv_from(&spec, b));
            prop_assume!(ua.l2_norm() > 1e-3 && ub.l2_norm() > 1e-3);
            let ab = r_loss(&ua, &ub).unwrap();
            let ba = r_loss(&ub, &ua).unwrap();
            prop_assert!((ab - ba).abs() < 1e-15);
            prop_assert!((0.0..=2.0).contains(&ab));
            prop_assert!(r_loss(&ua.scale(c), &ua).unwrap() < 1e-12);
        }

        #[test]
        fn weighted_loss_equals_weighted_gradients(seed in 0u64..1000, n in 1usize..6) {
            let spec = MlpSpec::new(vec![3, 5, 3], seed).unwrap();
            let p = spec.init();
            let b = random_batch(seed + 1, n, 3, 3);
            let u = spanned_update(&p, &b).unwrap();
            let alphas = b.alphas();
            let mut acc = spec.zeros();
            for i in 0..n {
                let single = SoftBatch {
                    inputs: b.inputs.select_rows(&[i]),
                    label_logits: b.label_logits.select_rows(&[i]),
                    alpha_logits: Tensor::vector(vec![0.0]),
                };
                let gi = spanned_update(&p, &single).unwrap();
                acc = acc.add(&gi.scale(alphas.data()[i])).unwrap();
            }
            let rel = u.sub(&acc).unwrap().l2_norm() / u.l2_norm();
            prop_assert!(rel <= 1e-12, "rel {}", rel);
        }
    }
}
