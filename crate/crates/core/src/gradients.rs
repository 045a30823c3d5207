//! Log loss and its hand-derived gradient with respect to every parameter.
//!
//! With `δ = ŷ - y` the logit gradient, the output cotangent is
//! `C_L[i][k] = δ * W_out[i]`. Walking the layers backwards, with
//! `G_{l-1} = act(Z_{l-1}) + 1` and `Z_{l-1} = W'_{l-1} X'_0`:
//!
//! ```text
//! dZ        = (C_l ∘ X'_{l-1}) ∘ act'(Z_{l-1})
//! dW'_{l-1} = dZ X'_0^T
//! dX'_0    += W'_{l-1}^T dZ
//! C_{l-1}   = C_l ∘ G_{l-1}
//! ```
//!
//! and finally `dX'_0 += C_0`, which is unstacked and scattered into the
//! embedding rows that were looked up.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::features::Example;
use crate::matrix::{clamp_probability, Matrix};
use crate::model::{forward, unstack, Activation, ForwardTrace, ModelConfig, ModelParams};

/// Binary log loss with the prediction clamped to `[1e-12, 1 - 1e-12]`.
///
/// ```
/// let l = xdeepint::gradients::log_loss(1, 0.5);
/// assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
/// ```
pub fn log_loss(label: u8, prediction: f64) -> f64 {
    let p = clamp_probability(prediction);
    if label == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Mean log loss over paired labels and predictions.
pub fn mean_log_loss(labels: &[u8], predictions: &[f64]) -> f64 {
    let total = labels
        .iter()
        .zip(predictions)
        .fold(0.0, |acc, (&y, &p)| acc + log_loss(y, p));
    total / labels.len() as f64
}

/// Cotangents for every entry of [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub d_pin_kernels: Vec<Matrix>,
    pub d_out_weights: Matrix,
    pub d_bias: f64,
    /// Gradient rows keyed by `(field, row)`; each touched row appears once.
    pub d_embeddings: BTreeMap<(usize, usize), Vec<f64>>,
}

impl GradientSet {
    pub fn zeros(config: &ModelConfig) -> Self {
        let n = config.stacked_rows();
        GradientSet {
            d_pin_kernels: (0..config.pin_layers).map(|_| Matrix::zeros(n, n)).collect(),
            d_out_weights: Matrix::zeros(1, n),
            d_bias: 0.0,
            d_embeddings: BTreeMap::new(),
        }
    }

    pub fn add_assign(&mut self, other: &GradientSet) -> Result<()> {
        if self.d_pin_kernels.len() != other.d_pin_kernels.len() {
            return Err(Error::Consistency("gradient sets have different layer counts".into()));
        }
        for (a, b) in self.d_pin_kernels.iter_mut().zip(&other.d_pin_kernels) {
            a.add_assign(b)?;
        }
        self.d_out_weights.add_assign(&other.d_out_weights)?;
        self.d_bias += other.d_bias;
        for (key, row) in &other.d_embeddings {
            match self.d_embeddings.get_mut(key) {
                Some(acc) => acc.iter_mut().zip(row).for_each(|(a, b)| *a += b),
                None => {
                    self.d_embeddings.insert(*key, row.clone());
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.d_pin_kernels.iter_mut().for_each(|m| m.scale_in_place(factor));
        self.d_out_weights.scale_in_place(factor);
        self.d_bias *= factor;
        for row in self.d_embeddings.values_mut() {
            row.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.d_bias.is_finite()
            && self.d_out_weights.is_finite()
            && self.d_pin_kernels.iter().all(Matrix::is_finite)
            && self.d_embeddings.values().flatten().all(|v| v.is_finite())
    }

    /// Gradient of one embedding entry; rows that were never touched read as zero.
    pub fn embedding(&self, field: usize, row: usize, col: usize) -> f64 {
        self.d_embeddings.get(&(field, row)).map_or(0.0, |r| r[col])
    }
}

/// Reverse pass for a single example with label `label`.
pub fn backward(trace: &ForwardTrace, label: u8, params: &ModelParams, config: &ModelConfig) -> Result<GradientSet> {
    check_trace(trace, params, config)?;
    let delta = trace.prediction - f64::from(label);
    let cols = config.stacked_cols();
    let rows = config.stacked_rows();
    let layers = params.pin_kernels.len();

    let last = trace.last_output();
    let row_sums = last.row_sums();
    let d_out_weights = Matrix::from_fn(1, rows, |_, i| delta * row_sums[i]);

    let x0 = &trace.x0_stacked;
    let x0_t = x0.transpose();
    let mut cot = Matrix::from_fn(rows, cols, |i, _| delta * params.out_weights[(0, i)]);
    let mut d_x0 = Matrix::zeros(rows, cols);
    let mut d_pin_kernels = vec![Matrix::zeros(rows, rows); layers];

    for l in (1..=layers).rev() {
        let prev = trace.output(l - 1);
        let gate = &trace.aggregates[l - 1];
        let mut d_pre = cot.hadamard(prev)?;
        if config.activation != Activation::Linear {
            let pre = &trace.pre_activations[l - 1];
            let act = config.activation;
            d_pre = d_pre.hadamard(&pre.map(|z| act.derivative(z)))?;
        }
        d_pin_kernels[l - 1] = d_pre.matmul(&x0_t)?;
        d_x0.add_assign(&params.pin_kernels[l - 1].transpose().matmul(&d_pre)?)?;
        cot = cot.hadamard(gate)?;
    }
    d_x0.add_assign(&cot)?;

    let d_embed = unstack(&d_x0, config.subspaces)?;
    let d_embeddings = trace
        .indices
        .iter()
        .enumerate()
        .map(|(f, &idx)| ((f, idx), d_embed.row(f).to_vec()))
        .collect();

    Ok(GradientSet {
        d_pin_kernels,
        d_out_weights,
        d_bias: delta * cols as f64,
        d_embeddings,
    })
}

fn check_trace(trace: &ForwardTrace, params: &ModelParams, config: &ModelConfig) -> Result<()> {
    let layers = params.pin_kernels.len();
    let shape = (config.stacked_rows(), config.stacked_cols());
    let fail = |m: String| Err(Error::Consistency(m));
    if layers != config.pin_layers {
        return fail(format!("{layers} kernels for {} configured layers", config.pin_layers));
    }
    if trace.layer_outputs.len() != layers || trace.aggregates.len() != layers {
        return fail(format!(
            "trace has {} layers, parameters have {layers}",
            trace.layer_outputs.len()
        ));
    }
    let expected_pre = if config.activation == Activation::Linear { 0 } else { layers };
    if trace.pre_activations.len() != expected_pre {
        return fail(format!(
            "trace holds {} pre-activations for activation {}",
            trace.pre_activations.len(),
            config.activation
        ));
    }
    if trace.x0_stacked.shape() != shape {
        return fail(format!("stacked input is {:?}, expected {shape:?}", trace.x0_stacked.shape()));
    }
    if params.out_weights.shape() != (1, shape.0) {
        return fail(format!("output weights are {:?}", params.out_weights.shape()));
    }
    if trace.indices.len() != config.field_count {
        return fail(format!("trace has {} indices for {} fields", trace.indices.len(), config.field_count));
    }
    Ok(())
}

/// Mean loss and mean gradient over `examples`, accumulated in order.
pub fn batch_gradient(examples: &[Example], params: &ModelParams, config: &ModelConfig) -> Result<(f64, GradientSet)> {
    if examples.is_empty() {
        return Err(Error::Value("empty batch".into()));
    }
    let mut total = GradientSet::zeros(config);
    let mut loss = 0.0;
    for (i, ex) in examples.iter().enumerate() {
        let wrap = |e| Error::Example {
            example: i,
            source: Box::new(e),
        };
        let trace = forward(&ex.indices, params, config).map_err(wrap)?;
        loss += log_loss(ex.label, trace.prediction);
        total.add_assign(&backward(&trace, ex.label, params, config).map_err(wrap)?)?;
    }
    let n = examples.len() as f64;
    total.scale(1.0 / n);
    Ok((loss / n, total))
}
