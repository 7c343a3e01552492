//! Small MLP feature extractors with analytic backprop.
//!
//! A model is a stack of affine layers with an activation on every layer
//! except the last (the feature layer is linear), an optional linear
//! classifier head on top of the raw features, and optional row-wise ℓ2
//! normalization of the features for consumers that work on directions.
//!
//! Forward passes record everything backward needs ([`ForwardTrace`]);
//! backward accepts upstream gradients with respect to the features the
//! caller consumed (normalized if normalization was on) and/or the head
//! logits, and returns parameter gradients summed over the batch. Models are
//! value types: a training step reads a parameter vector out, updates it,
//! and writes it back.

use crate::linalg::{self, matmul_nn, matmul_nt, matmul_tn, DataMatrix};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Checkpoint schema version written by [`save_checkpoint`].
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum Error {
    #[error("layer dims {0:?} are invalid: need at least two entries, all positive")]
    BadDims(Vec<usize>),
    #[error("batch has {got} columns but the model expects {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("{what} has shape {got_rows}x{got_cols}, expected {rows}x{cols}")]
    ShapeMismatch {
        what: &'static str,
        rows: usize,
        cols: usize,
        got_rows: usize,
        got_cols: usize,
    },
    #[error("logits gradient supplied but the model has no classifier head")]
    MissingHead,
    #[error("parameter vector has {got} entries, expected {expected}")]
    ParamCount { expected: usize, got: usize },
    #[error("io error: {0}")]
    IoError(#[from] std::io::Error),
    #[error("checkpoint parse error: {0}")]
    ParseError(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {0} (this build reads version 1)")]
    BadVersion(u32),
    #[error(transparent)]
    Matrix(#[from] crate::linalg::Error),
}

/// Nonlinearity applied to every hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    ReLU,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::ReLU => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation output `a = act(z)`.
    /// ReLU uses the `z <= 0 → 0` subgradient convention.
    #[inline]
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::ReLU => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Linear classifier head applied to the raw (unnormalized) features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub weight: DataMatrix,
    pub bias: Vec<f64>,
}

/// Multi-layer perceptron; see the module docs for the layer conventions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    layer_dims: Vec<usize>,
    weights: Vec<DataMatrix>,
    biases: Vec<Vec<f64>>,
    hidden_activation: Activation,
    head: Option<Head>,
}

/// Everything a forward pass computed, kept for backward.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `activations[0]` is the input batch; `activations[l + 1]` is the
    /// output of layer `l`. The last entry is the raw feature matrix.
    activations: Vec<DataMatrix>,
    /// Row ℓ2 norms of the raw features when normalization was requested.
    norms: Option<Vec<f64>>,
    /// Normalized features, present iff normalization was requested.
    normalized: Option<DataMatrix>,
    /// Rows whose feature vector was exactly zero under normalization.
    zero_rows: Vec<usize>,
    /// Head outputs, present iff the model has a head.
    logits: Option<DataMatrix>,
}

impl ForwardTrace {
    /// Raw (unnormalized) features.
    pub fn features(&self) -> &DataMatrix {
        self.activations.last().expect("trace always has input")
    }

    /// ℓ2-normalized features, if normalization was requested.
    pub fn normalized(&self) -> Option<&DataMatrix> {
        self.normalized.as_ref()
    }

    /// The features a loss should consume: normalized when available,
    /// raw otherwise.
    pub fn consumed_features(&self) -> &DataMatrix {
        self.normalized.as_ref().unwrap_or_else(|| self.features())
    }

    pub fn logits(&self) -> Option<&DataMatrix> {
        self.logits.as_ref()
    }

    /// Indices of rows that could not be normalized (zero feature vector).
    pub fn zero_rows(&self) -> &[usize] {
        &self.zero_rows
    }

    pub fn batch_len(&self) -> usize {
        self.activations[0].rows()
    }
}

/// Parameter gradients, summed over the batch, mirroring the model layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub weights: Vec<DataMatrix>,
    pub biases: Vec<Vec<f64>>,
    pub head: Option<(DataMatrix, Vec<f64>)>,
}

impl GradientSet {
    fn zeros_like(model: &MlpModel) -> Self {
        Self {
            weights: model
                .weights
                .iter()
                .map(|w| DataMatrix::zeros(w.rows(), w.cols()))
                .collect(),
            biases: model.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            head: model
                .head
                .as_ref()
                .map(|h| (DataMatrix::zeros(h.weight.rows(), h.weight.cols()), vec![0.0; h.bias.len()])),
        }
    }

    /// Flatten in the same order as [`MlpModel::flatten_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.values());
            out.extend_from_slice(b);
        }
        if let Some((w, b)) = &self.head {
            out.extend_from_slice(w.values());
            out.extend_from_slice(b);
        }
        out
    }
}

impl MlpModel {
    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn feature_dim(&self) -> usize {
        *self.layer_dims.last().expect("at least two dims")
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_activation
    }

    pub fn head_classes(&self) -> Option<usize> {
        self.head.as_ref().map(|h| h.weight.rows())
    }

    pub fn has_head(&self) -> bool {
        self.head.is_some()
    }

    /// Total scalar parameter count: `Σ (fan_in + 1) · fan_out` over layers,
    /// plus the head if present.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        for w in &self.weights {
            n += w.rows() * w.cols() + w.rows();
        }
        if let Some(h) = &self.head {
            n += h.weight.rows() * h.weight.cols() + h.bias.len();
        }
        n
    }

    /// Copy all parameters into one vector: for each layer its row-major
    /// weight then bias, then the head weight and bias if present.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.values());
            out.extend_from_slice(b);
        }
        if let Some(h) = &self.head {
            out.extend_from_slice(h.weight.values());
            out.extend_from_slice(&h.bias);
        }
        out
    }

    /// Write a flat parameter vector (in [`MlpModel::flatten_params`] order)
    /// back into the model.
    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::ParamCount {
                expected: self.param_count(),
                got: params.len(),
            });
        }
        let mut off = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            let len = w.values().len();
            w.values_mut().copy_from_slice(&params[off..off + len]);
            off += len;
            let blen = b.len();
            b.copy_from_slice(&params[off..off + blen]);
            off += blen;
        }
        if let Some(h) = &mut self.head {
            let len = h.weight.values().len();
            h.weight.values_mut().copy_from_slice(&params[off..off + len]);
            off += len;
            let blen = h.bias.len();
            h.bias.copy_from_slice(&params[off..off + blen]);
        }
        Ok(())
    }
}

/// Build an MLP with Xavier-uniform weights (`limit = sqrt(6 / (fan_in +
/// fan_out))`) and zero biases, drawn from a ChaCha stream seeded with
/// `seed`. Layers draw first, in order, then the head.
pub fn mlp_init(
    layer_dims: &[usize],
    activation: Activation,
    head_classes: Option<usize>,
    seed: u64,
) -> Result<MlpModel> {
    if layer_dims.len() < 2 || layer_dims.iter().any(|&d| d == 0) || head_classes == Some(0) {
        return Err(Error::BadDims(layer_dims.to_vec()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw_layer = |fan_in: usize, fan_out: usize| {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let values = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        let weight = DataMatrix::new(fan_out, fan_in, values).expect("init values are finite");
        (weight, vec![0.0; fan_out])
    };
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for pair in layer_dims.windows(2) {
        let (w, b) = draw_layer(pair[0], pair[1]);
        weights.push(w);
        biases.push(b);
    }
    let head = head_classes.map(|classes| {
        let (weight, bias) = draw_layer(*layer_dims.last().expect("nonempty"), classes);
        Head { weight, bias }
    });
    Ok(MlpModel {
        layer_dims: layer_dims.to_vec(),
        weights,
        biases,
        hidden_activation: activation,
        head,
    })
}

/// Row-wise ℓ2 normalization; exactly-zero rows pass through unchanged.
pub fn l2_normalize(x: &DataMatrix) -> DataMatrix {
    l2_normalize_flagged(x).0
}

fn l2_normalize_flagged(x: &DataMatrix) -> (DataMatrix, Vec<f64>, Vec<usize>) {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    let mut zero_rows = Vec::new();
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let norm = linalg::nrm2(row);
        norms.push(norm);
        if norm == 0.0 {
            zero_rows.push(i);
            continue;
        }
        for v in row {
            *v /= norm;
        }
    }
    (out, norms, zero_rows)
}

/// Run the model on a batch. `normalize` additionally produces ℓ2-normalized
/// features (used by the direction-based losses); the classifier head, when
/// present, always reads the raw features.
pub fn forward(model: &MlpModel, batch: &DataMatrix, normalize: bool) -> Result<ForwardTrace> {
    if batch.cols() != model.input_dim() {
        return Err(Error::DimMismatch {
            expected: model.input_dim(),
            got: batch.cols(),
        });
    }
    let layers = model.weights.len();
    let mut activations = Vec::with_capacity(layers + 1);
    activations.push(batch.clone());
    for l in 0..layers {
        let mut z = matmul_nt(&activations[l], &model.weights[l]);
        let bias = &model.biases[l];
        for i in 0..z.rows() {
            for (v, b) in z.row_mut(i).iter_mut().zip(bias) {
                *v += b;
            }
        }
        if l + 1 < layers {
            for v in z.values_mut() {
                *v = model.hidden_activation.apply(*v);
            }
        }
        activations.push(z);
    }
    let (normalized, norms, zero_rows) = if normalize {
        let (n, norms, zeros) = l2_normalize_flagged(activations.last().expect("feature layer"));
        (Some(n), Some(norms), zeros)
    } else {
        (None, None, Vec::new())
    };
    let logits = match &model.head {
        Some(h) => {
            let mut lg = matmul_nt(activations.last().expect("feature layer"), &h.weight);
            for i in 0..lg.rows() {
                for (v, b) in lg.row_mut(i).iter_mut().zip(&h.bias) {
                    *v += b;
                }
            }
            Some(lg)
        }
        None => None,
    };
    Ok(ForwardTrace {
        activations,
        norms,
        normalized,
        zero_rows,
        logits,
    })
}

fn check_shape(
    what: &'static str,
    m: &DataMatrix,
    rows: usize,
    cols: usize,
) -> Result<()> {
    if m.rows() != rows || m.cols() != cols {
        return Err(Error::ShapeMismatch {
            what,
            rows,
            cols,
            got_rows: m.rows(),
            got_cols: m.cols(),
        });
    }
    Ok(())
}

/// Backpropagate upstream gradients to all parameters.
///
/// `grad_features` is the gradient with respect to the features the caller
/// consumed — the normalized features when the forward pass normalized
/// (the ℓ2 Jacobian is applied here), the raw features otherwise.
/// `grad_logits` is the gradient with respect to the head outputs. Either
/// may be omitted; both together realize a joint objective.
pub fn backward(
    model: &MlpModel,
    trace: &ForwardTrace,
    grad_features: Option<&DataMatrix>,
    grad_logits: Option<&DataMatrix>,
) -> Result<GradientSet> {
    let batch = trace.batch_len();
    let feat_dim = model.feature_dim();
    let mut grads = GradientSet::zeros_like(model);
    let mut delta = DataMatrix::zeros(batch, feat_dim);

    if let Some(gf) = grad_features {
        check_shape("grad_features", gf, batch, feat_dim)?;
        match (&trace.normalized, &trace.norms) {
            (Some(normalized), Some(norms)) => {
                // d/dx (x / ‖x‖) pulled back: g ↦ (g − (g·x̂) x̂) / ‖x‖,
                // and zero rows stay put (their output is constant zero).
                for i in 0..batch {
                    let norm = norms[i];
                    if norm == 0.0 {
                        continue;
                    }
                    let xhat = normalized.row(i);
                    let g = gf.row(i);
                    let coeff = linalg::dot(g, xhat);
                    let out = delta.row_mut(i);
                    for j in 0..feat_dim {
                        out[j] += (g[j] - coeff * xhat[j]) / norm;
                    }
                }
            }
            _ => {
                for (d, g) in delta.values_mut().iter_mut().zip(gf.values()) {
                    *d += g;
                }
            }
        }
    }

    if let Some(gl) = grad_logits {
        let head = model.head.as_ref().ok_or(Error::MissingHead)?;
        check_shape("grad_logits", gl, batch, head.weight.rows())?;
        let features = trace.features();
        let (head_w, head_b) = grads.head.as_mut().expect("head grads allocated");
        *head_w = matmul_tn(gl, features);
        for i in 0..batch {
            for (acc, g) in head_b.iter_mut().zip(gl.row(i)) {
                *acc += g;
            }
        }
        let into_features = matmul_nn(gl, &head.weight);
        for (d, g) in delta.values_mut().iter_mut().zip(into_features.values()) {
            *d += g;
        }
    }

    let layers = model.weights.len();
    let mut g = delta;
    for l in (0..layers).rev() {
        if l + 1 < layers {
            // g currently holds ∂loss/∂act(z_l); fold in the activation.
            let act = &trace.activations[l + 1];
            for (gv, av) in g.values_mut().iter_mut().zip(act.values()) {
                *gv *= model.hidden_activation.derivative_from_output(*av);
            }
        }
        grads.weights[l] = matmul_tn(&g, &trace.activations[l]);
        for i in 0..batch {
            for (acc, gv) in grads.biases[l].iter_mut().zip(g.row(i)) {
                *acc += gv;
            }
        }
        if l > 0 {
            g = matmul_nn(&g, &model.weights[l]);
        }
    }
    Ok(grads)
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    model: MlpModel,
}

/// Write the model as versioned JSON. Floats print in shortest round-trip
/// form, so loading reproduces parameters bit for bit.
pub fn save_checkpoint(model: &MlpModel, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        model: model.clone(),
    };
    let text = serde_json::to_string_pretty(&file)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<MlpModel> {
    let text = std::fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text)?;
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::BadVersion(file.version));
    }
    Ok(file.model)
}
