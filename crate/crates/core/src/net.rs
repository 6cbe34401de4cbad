//! Two-layer fully connected classifier with a softmax output.

use std::fmt;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{GwclError, Result};
use crate::registry::{Named, Registry};
use crate::rng::GwclRng;

/// Elementwise hidden-layer nonlinearity.
pub trait Activation: Named + Send + Sync {
    fn apply(&self, x: f64) -> f64;
    /// Derivative given the pre-activation `x` and the output `y = apply(x)`.
    fn derivative(&self, x: f64, y: f64) -> f64;
}

pub struct Relu;
pub struct Tanh;
pub struct Sigmoid;

impl Named for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }
}

impl Activation for Relu {
    fn apply(&self, x: f64) -> f64 {
        x.max(0.0)
    }

    fn derivative(&self, x: f64, _y: f64) -> f64 {
        if x > 0.0 {
            1.0
        } else {
            0.0
        }
    }
}

impl Named for Tanh {
    fn name(&self) -> &'static str {
        "tanh"
    }
}

impl Activation for Tanh {
    fn apply(&self, x: f64) -> f64 {
        x.tanh()
    }

    fn derivative(&self, _x: f64, y: f64) -> f64 {
        1.0 - y * y
    }
}

impl Named for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
}

impl Activation for Sigmoid {
    fn apply(&self, x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn derivative(&self, _x: f64, y: f64) -> f64 {
        y * (1.0 - y)
    }
}

pub fn activations() -> Registry<dyn Activation> {
    Registry::<dyn Activation>::new("activation")
        .with(Arc::new(Relu))
        .with(Arc::new(Tanh))
        .with(Arc::new(Sigmoid))
}

/// Weights of `softmax(act(x W1 + b1) W2 + b2)`.
#[derive(Clone)]
pub struct MlpParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub activation: Arc<dyn Activation>,
}

impl fmt::Debug for MlpParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MlpParams")
            .field("input", &self.input_dim())
            .field("hidden", &self.hidden_dim())
            .field("classes", &self.classes())
            .field("activation", &self.activation.name())
            .finish()
    }
}

impl PartialEq for MlpParams {
    fn eq(&self, other: &Self) -> bool {
        self.w1 == other.w1
            && self.b1 == other.b1
            && self.w2 == other.w2
            && self.b2 == other.b2
            && self.activation.name() == other.activation.name()
    }
}

impl MlpParams {
    /// Uniform Glorot initialisation (`±sqrt(6 / (fan_in + fan_out))`),
    /// zero biases. W1 is drawn row-major first, then W2.
    pub fn init(input: usize, hidden: usize, classes: usize, activation: Arc<dyn Activation>, seed: u64) -> Self {
        assert!(input > 0 && hidden > 0 && classes > 0, "layer sizes must be positive");
        let mut rng = GwclRng::with_stream(seed, 1);
        let mut draw = |rows: usize, cols: usize| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.uniform(-limit, limit))
        };
        let w1 = draw(input, hidden);
        let w2 = draw(hidden, classes);
        Self {
            w1,
            b1: Array1::zeros(hidden),
            w2,
            b2: Array1::zeros(classes),
            activation,
        }
    }

    pub fn zeros(input: usize, hidden: usize, classes: usize, activation: Arc<dyn Activation>) -> Self {
        Self {
            w1: Array2::zeros((input, hidden)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((hidden, classes)),
            b2: Array1::zeros(classes),
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn classes(&self) -> usize {
        self.w2.ncols()
    }

    pub fn parameter_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Flat views in the fixed order `w1, b1, w2, b2`.
    pub fn tensors(&self) -> [&[f64]; 4] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Gradients with the same shapes as [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl MlpGrads {
    pub fn tensors(&self) -> [&[f64]; 4] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
        ]
    }
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub inputs: Array2<f64>,
    pub hidden_pre: Array2<f64>,
    pub hidden: Array2<f64>,
    pub logits: Array2<f64>,
    pub probs: Array2<f64>,
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

pub fn forward(params: &MlpParams, batch: ArrayView2<'_, f64>) -> Result<ForwardTrace> {
    if batch.ncols() != params.input_dim() {
        return Err(GwclError::Dimension(format!(
            "batch has {} columns, network expects {}",
            batch.ncols(),
            params.input_dim()
        )));
    }
    if let Some(i) = batch.iter().position(|v| !v.is_finite()) {
        return Err(GwclError::NonFinite(i));
    }
    let hidden_pre = batch.dot(&params.w1) + &params.b1;
    let act = &params.activation;
    let hidden = hidden_pre.mapv(|v| act.apply(v));
    let logits = hidden.dot(&params.w2) + &params.b2;
    let probs = softmax_rows(&logits);
    Ok(ForwardTrace {
        inputs: batch.to_owned(),
        hidden_pre,
        hidden,
        logits,
        probs,
    })
}

/// Backpropagates `dL/dz` (gradient w.r.t. the softmax output) to the weights.
pub fn backward(params: &MlpParams, trace: &ForwardTrace, dl_dz: ArrayView2<'_, f64>) -> Result<MlpGrads> {
    if dl_dz.dim() != trace.probs.dim() {
        return Err(GwclError::Dimension(format!(
            "dL/dz is {:?}, forward output is {:?}",
            dl_dz.dim(),
            trace.probs.dim()
        )));
    }
    // softmax Jacobian: dl/dlogit_k = z_k (g_k - sum_j g_j z_j)
    let mut dlogits = Array2::zeros(trace.probs.dim());
    for ((mut out, z), g) in dlogits
        .axis_iter_mut(Axis(0))
        .zip(trace.probs.axis_iter(Axis(0)))
        .zip(dl_dz.axis_iter(Axis(0)))
    {
        let inner: f64 = z.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        for ((o, &zk), &gk) in out.iter_mut().zip(z.iter()).zip(g.iter()) {
            *o = zk * (gk - inner);
        }
    }
    let w2 = trace.hidden.t().dot(&dlogits);
    let b2 = dlogits.sum_axis(Axis(0));
    let mut dhidden = dlogits.dot(&params.w2.t());
    let act = &params.activation;
    ndarray::Zip::from(&mut dhidden)
        .and(&trace.hidden_pre)
        .and(&trace.hidden)
        .for_each(|d, &x, &y| *d *= act.derivative(x, y));
    let w1 = trace.inputs.t().dot(&dhidden);
    let b1 = dhidden.sum_axis(Axis(0));
    Ok(MlpGrads {
        w1: w1.as_standard_layout().into_owned(),
        b1,
        w2: w2.as_standard_layout().into_owned(),
        b2,
    })
}

/// Class index (0-based) of the largest probability; ties go to the smaller index.
pub fn argmax_rows(probs: &Array2<f64>) -> Vec<usize> {
    probs
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}
