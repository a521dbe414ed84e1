//! Multilayer perceptrons and the flat parameter-vector view shared by all
//! update arithmetic.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ndgrad::{Graph, GradError, Var};
use crate::tensor::{Tensor, TensorError};

/// Tolerance for soft-label rows summing to one.
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid architecture {0:?}: need at least an input width and >= 2 classes, all widths positive")]
    InvalidSpec(Vec<usize>),
    #[error("input has {actual} columns, model expects {expected}")]
    InputDim { expected: usize, actual: usize },
    #[error("parameter layouts differ: {0}")]
    LayoutMismatch(String),
    #[error("flat vector has {actual} entries, layout needs {expected}")]
    FlatLength { expected: usize, actual: usize },
    #[error("soft-label row {row} sums to {sum}, not 1")]
    NotOnSimplex { row: usize, sum: f64 },
    #[error("soft-label row {row} has a negative entry")]
    NegativeLabel { row: usize },
    #[error("cannot average an empty list of updates")]
    EmptyAverage,
    #[error("non-finite parameter values")]
    NonFinite,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Grad(#[from] GradError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub seed: u64,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, seed: u64) -> Result<Self, ModelError> {
        let ok = layer_widths.len() >= 2
            && layer_widths.iter().all(|&w| w >= 1)
            && *layer_widths.last().unwrap() >= 2;
        if !ok {
            return Err(ModelError::InvalidSpec(layer_widths));
        }
        Ok(Self { layer_widths, seed })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    /// Number of weight/bias pairs.
    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Weights drawn from `N(0, 1/fan_in)`, biases zero.
    pub fn init(&self) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let layers = self
            .layer_widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std = 1.0 / (fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| { let z: f64 = StandardNormal.sample(&mut rng); std * z })
                    .collect();
                Layer {
                    weight: Tensor::new(vec![fan_in, fan_out], data).unwrap(),
                    bias: Tensor::zeros(&[fan_out]),
                }
            })
            .collect();
        ParamVector { layers }
    }

    pub fn zeros(&self) -> ParamVector {
        ParamVector {
            layers: self
                .layer_widths
                .windows(2)
                .map(|w| Layer {
                    weight: Tensor::zeros(&[w[0], w[1]]),
                    bias: Tensor::zeros(&[w[1]]),
                })
                .collect(),
        }
    }
}

/// One dense layer: `weight` is `[fan_in, fan_out]`, `bias` is `[fan_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Layer {
    pub fn len(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sq_norm(&self) -> f64 {
        self.weight.sq_norm() + self.bias.sq_norm()
    }

    pub fn l2_norm(&self) -> f64 {
        self.sq_norm().sqrt()
    }

    fn scaled(&self, c: f64) -> Layer {
        Layer {
            weight: self.weight.map(|v| v * c),
            bias: self.bias.map(|v| v * c),
        }
    }
}

/// Model parameters, or an update to them, as an ordered list of layers.
///
/// Flattening order is layer order, weight (row-major) before bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    layers: Vec<Layer>,
}

impl ParamVector {
    pub fn from_layers(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn total_len(&self) -> usize {
        self.layers.iter().map(Layer::len).sum()
    }

    /// Flat `[start, end)` range each layer occupies in [`ParamVector::flatten`].
    pub fn layer_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut start = 0;
        self.layers
            .iter()
            .map(|l| {
                let r = start..start + l.len();
                start = r.end;
                r
            })
            .collect()
    }

    pub fn flatten(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.total_len());
        for l in &self.layers {
            data.extend_from_slice(l.weight.data());
            data.extend_from_slice(l.bias.data());
        }
        Tensor::vector(data)
    }

    pub fn unflatten(v: &Tensor, spec: &MlpSpec) -> Result<Self, ModelError> {
        let expected = spec.param_count();
        if v.numel() != expected {
            return Err(ModelError::FlatLength {
                expected,
                actual: v.numel(),
            });
        }
        let data = v.data();
        let mut at = 0;
        let mut take = |n: usize| {
            let s = data[at..at + n].to_vec();
            at += n;
            s
        };
        let layers = spec
            .layer_widths
            .windows(2)
            .map(|w| Layer {
                weight: Tensor::new(vec![w[0], w[1]], take(w[0] * w[1])).unwrap(),
                bias: Tensor::vector(take(w[1])),
            })
            .collect();
        Ok(Self { layers })
    }

    fn check_layout(&self, other: &ParamVector) -> Result<(), ModelError> {
        let same = self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weight.shape() == b.weight.shape() && a.bias.shape() == b.bias.shape()
            });
        if !same {
            return Err(ModelError::LayoutMismatch(format!(
                "{:?} vs {:?}",
                self.shapes(),
                other.shapes()
            )));
        }
        Ok(())
    }

    fn shapes(&self) -> Vec<Vec<usize>> {
        self.layers.iter().map(|l| l.weight.shape().to_vec()).collect()
    }

    fn zip_with(
        &self,
        other: &ParamVector,
        f: impl Fn(f64, f64) -> f64 + Copy,
    ) -> Result<ParamVector, ModelError> {
        self.check_layout(other)?;
        let layers = self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| {
                Ok(Layer {
                    weight: a.weight.zip_map(&b.weight, "param", f)?,
                    bias: a.bias.zip_map(&b.bias, "param", f)?,
                })
            })
            .collect::<Result<_, TensorError>>()?;
        Ok(ParamVector { layers })
    }

    pub fn add(&self, other: &ParamVector) -> Result<ParamVector, ModelError> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector, ModelError> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> ParamVector {
        ParamVector {
            layers: self.layers.iter().map(|l| l.scaled(c)).collect(),
        }
    }

    /// Scales layer `l` by `factors[l]`.
    pub fn scale_layers(&self, factors: &[f64]) -> Result<ParamVector, ModelError> {
        if factors.len() != self.layers.len() {
            return Err(ModelError::LayoutMismatch(format!(
                "{} scale factors for {} layers",
                factors.len(),
                self.layers.len()
            )));
        }
        Ok(ParamVector {
            layers: self
                .layers
                .iter()
                .zip(factors)
                .map(|(l, &c)| l.scaled(c))
                .collect(),
        })
    }

    /// Elementwise mean, summed in list order.
    pub fn mean(updates: &[ParamVector]) -> Result<ParamVector, ModelError> {
        let (first, rest) = updates.split_first().ok_or(ModelError::EmptyAverage)?;
        let mut acc = first.clone();
        for u in rest {
            acc = acc.add(u)?;
        }
        Ok(acc.scale(1.0 / updates.len() as f64))
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64, ModelError> {
        self.check_layout(other)?;
        Ok(self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| {
                a.weight.dot(&b.weight).unwrap() + a.bias.dot(&b.bias).unwrap()
            })
            .sum())
    }

    pub fn l2_norm(&self) -> f64 {
        self.layers.iter().map(Layer::sq_norm).sum::<f64>().sqrt()
    }

    pub fn layer_norms(&self) -> Vec<f64> {
        self.layers.iter().map(Layer::l2_norm).collect()
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &ParamVector) -> Result<f64, ModelError> {
        Ok(self.sub(other)?.layers.iter().fold(0.0, |m, l| {
            m.max(l.weight.max_abs()).max(l.bias.max_abs())
        }))
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.check_finite().is_ok() && l.bias.check_finite().is_ok())
    }

    /// Registers every weight and bias in `g`, as leaves or constants.
    pub fn to_graph(&self, g: &mut Graph, as_leaves: bool) -> ParamVars {
        let mut put = |t: &Tensor| {
            if as_leaves {
                g.leaf(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        ParamVars {
            layers: self
                .layers
                .iter()
                .map(|l| (put(&l.weight), put(&l.bias)))
                .collect(),
        }
    }

    /// Rebuilds a `ParamVector` from per-tensor values in flattening order.
    pub fn from_tensors(tensors: Vec<Tensor>) -> ParamVector {
        let mut it = tensors.into_iter();
        let mut layers = Vec::new();
        while let (Some(weight), Some(bias)) = (it.next(), it.next()) {
            layers.push(Layer { weight, bias });
        }
        ParamVector { layers }
    }
}

/// Graph handles for a [`ParamVector`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub layers: Vec<(Var, Var)>,
}

impl ParamVars {
    /// Weight and bias handles in flattening order.
    pub fn flat(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// Synthetic inputs with unconstrained label and spanning-ratio logits.
///
/// Effective labels are `softmax(label_logits)` per row; effective spanning
/// ratios are `softmax(alpha_logits)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftBatch {
    pub inputs: Tensor,
    pub label_logits: Tensor,
    pub alpha_logits: Tensor,
}

impl SoftBatch {
    pub fn len(&self) -> usize {
        self.inputs.rows_cols().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> Tensor {
        self.label_logits.softmax()
    }

    pub fn alphas(&self) -> Tensor {
        self.alpha_logits.softmax()
    }

    /// Checks row counts agree with each other and the model dimensions.
    pub fn check_dims(&self, spec_dims: (usize, usize)) -> Result<(), ModelError> {
        let (d, c) = spec_dims;
        let n = self.len();
        let ok = self.inputs.shape() == [n, d]
            && self.label_logits.shape() == [n, c]
            && self.alpha_logits.shape() == [n];
        if !ok {
            return Err(ModelError::LayoutMismatch(format!(
                "batch inputs {:?}, labels {:?}, alphas {:?} vs model D={d}, C={c}",
                self.inputs.shape(),
                self.label_logits.shape(),
                self.alpha_logits.shape()
            )));
        }
        Ok(())
    }
}

/// `(input_dim, num_classes)` of a parameter set.
pub fn dims_of(params: &ParamVector) -> (usize, usize) {
    let first = &params.layers()[0].weight;
    let last = &params.layers()[params.num_layers() - 1].weight;
    (first.shape()[0], last.shape()[1])
}

/// Logits `[N, C]` for inputs `[N, D]`; ReLU between layers, none after the last.
pub fn forward(params: &ParamVector, inputs: &Tensor) -> Result<Tensor, ModelError> {
    let (d, _) = dims_of(params);
    if inputs.shape().len() != 2 || inputs.shape()[1] != d {
        return Err(ModelError::InputDim {
            expected: d,
            actual: inputs.rows_cols().1,
        });
    }
    let last = params.num_layers() - 1;
    let mut h = inputs.clone();
    for (i, l) in params.layers().iter().enumerate() {
        h = h.matmul(&l.weight)?.add_row_vector(&l.bias)?;
        if i != last {
            h = h.map(|v| v.max(0.0));
        }
    }
    Ok(h)
}

/// Graph version of [`forward`].
pub fn forward_graph(g: &mut Graph, params: &ParamVars, inputs: Var) -> Result<Var, ModelError> {
    let last = params.layers.len() - 1;
    let mut h = inputs;
    for (i, &(w, b)) in params.layers.iter().enumerate() {
        h = g.matmul(h, w)?;
        h = g.add_bias(h, b)?;
        if i != last {
            h = g.relu(h);
        }
    }
    Ok(h)
}

/// Per-row soft cross-entropy `-sum_k y_k log softmax(z)_k`, shape `[N]`.
pub fn soft_cross_entropy_rows(g: &mut Graph, logits: Var, labels: Var) -> Result<Var, ModelError> {
    let ls = g.log_softmax(logits);
    let prod = g.mul(labels, ls)?;
    let rows = g.sum_cols(prod);
    Ok(g.scale(rows, -1.0))
}

pub fn check_simplex(labels: &Tensor) -> Result<(), ModelError> {
    let (rows, _) = labels.rows_cols();
    for row in 0..rows {
        let r = labels.row(row);
        if r.iter().any(|&v| v < -SIMPLEX_TOL) {
            return Err(ModelError::NegativeLabel { row });
        }
        let sum: f64 = r.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(ModelError::NotOnSimplex { row, sum });
        }
    }
    Ok(())
}

/// Mean over rows of the soft cross-entropy between `logits` and `soft_labels`.
pub fn soft_cross_entropy(logits: &Tensor, soft_labels: &Tensor) -> Result<f64, ModelError> {
    logits.same_shape(soft_labels, "soft_cross_entropy")?;
    check_simplex(soft_labels)?;
    let ls = logits.log_softmax();
    let (rows, _) = logits.rows_cols();
    let total: f64 = ls
        .data()
        .iter()
        .zip(soft_labels.data())
        .map(|(l, y)| -y * l)
        .sum();
    Ok(total / rows as f64)
}

/// `[N, C]` one-hot rows.
pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data).unwrap()
}

/// Gradient of the mean hard-label cross-entropy over a minibatch.
pub fn minibatch_gradient(
    params: &ParamVector,
    inputs: &Tensor,
    labels: &[usize],
) -> Result<ParamVector, ModelError> {
    let (_, c) = dims_of(params);
    let mut g = Graph::new();
    let pv = params.to_graph(&mut g, true);
    let x = g.constant(inputs.clone());
    let y = g.constant(one_hot(labels, c));
    let logits = forward_graph(&mut g, &pv, x)?;
    let ce = soft_cross_entropy_rows(&mut g, logits, y)?;
    let total = g.sum(ce);
    let loss = g.scale(total, 1.0 / labels.len() as f64);
    let grads = g.grad_values(loss, &pv.flat())?;
    Ok(ParamVector::from_tensors(grads))
}

/// Fraction of rows whose argmax logit equals the label.
pub fn accuracy(params: &ParamVector, inputs: &Tensor, labels: &[usize]) -> Result<f64, ModelError> {
    if labels.is_empty() {
        return Ok(0.0);
    }
    let pred = forward(params, inputs)?.argmax_rows();
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}
