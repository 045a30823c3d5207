//! Forward computation: embedding lookup, subspace restacking, the polynomial
//! interaction recursion and the linear output head.
//!
//! With `F` fields, embedding width `K` and `h` subspaces the stacked feature
//! map has `F*h` rows and `K/h` columns. Each interaction layer computes
//!
//! ```text
//! X_l = X_{l-1} ∘ [act(W_{l-1} X_0) + 1]
//! ```
//!
//! which for the linear activation is a Hadamard product with a residual
//! connection folded in. The logit is `sum(W_out X_L) + b * K/h`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::features::{EncodedDataset, Example};
use crate::matrix::{clamp_probability, sigmoid, Matrix};

/// Entry-wise nonlinearity applied to the aggregation term `W X_0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Linear,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub const ALL: [Activation; 4] = [Activation::Linear, Activation::Relu, Activation::Tanh, Activation::Sigmoid];

    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Linear => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => sigmoid(z),
        }
    }

    /// Derivative at `z`. ReLU uses 0 at the kink.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        }
    }

    pub(crate) fn code(self) -> u64 {
        match self {
            Activation::Linear => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
            Activation::Sigmoid => 3,
        }
    }

    pub(crate) fn from_code(code: u64) -> Option<Self> {
        Activation::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Activation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown activation `{s}`")))
    }
}

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub field_count: usize,
    pub embedding_dim: usize,
    pub pin_layers: usize,
    pub subspaces: usize,
    pub activation: Activation,
}

impl ModelConfig {
    pub fn new(field_count: usize, embedding_dim: usize, pin_layers: usize, subspaces: usize) -> Result<Self> {
        let cfg = ModelConfig {
            field_count,
            embedding_dim,
            pin_layers,
            subspaces,
            activation: Activation::Linear,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.field_count == 0 || self.embedding_dim == 0 || self.subspaces == 0 {
            return Err(Error::Config(format!(
                "field_count, embedding_dim and subspaces must be positive (got {}, {}, {})",
                self.field_count, self.embedding_dim, self.subspaces
            )));
        }
        if self.embedding_dim % self.subspaces != 0 {
            return Err(Error::Config(format!(
                "subspaces ({}) must divide embedding_dim ({})",
                self.subspaces, self.embedding_dim
            )));
        }
        Ok(())
    }

    /// Rows of the stacked feature map, `F*h`.
    pub fn stacked_rows(&self) -> usize {
        self.field_count * self.subspaces
    }

    /// Columns of the stacked feature map, `K/h`.
    pub fn stacked_cols(&self) -> usize {
        self.embedding_dim / self.subspaces
    }
}

/// Trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// One `C_f x K` table per field.
    pub embeddings: Vec<Matrix>,
    /// One `(F*h) x (F*h)` kernel per interaction layer.
    pub pin_kernels: Vec<Matrix>,
    /// `1 x (F*h)`.
    pub out_weights: Matrix,
    pub bias: f64,
}

impl ModelParams {
    /// Embeddings uniform in `±1/sqrt(K)`; kernels, head and bias zero.
    ///
    /// Zero kernels make every layer the identity, so a fresh model is
    /// exactly logistic regression on its embeddings.
    pub fn init(config: &ModelConfig, cardinalities: &[usize], rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if cardinalities.len() != config.field_count {
            return Err(Error::Config(format!(
                "{} cardinalities for {} fields",
                cardinalities.len(),
                config.field_count
            )));
        }
        if let Some(f) = cardinalities.iter().position(|&c| c == 0) {
            return Err(Error::Config(format!("field {f} has cardinality 0")));
        }
        let k = config.embedding_dim;
        let bound = 1.0 / (k as f64).sqrt();
        let embeddings = cardinalities
            .iter()
            .map(|&c| Matrix::from_fn(c, k, |_, _| rng.gen_range(-bound..bound)))
            .collect();
        Ok(Self::with_embeddings(config, embeddings))
    }

    pub fn with_embeddings(config: &ModelConfig, embeddings: Vec<Matrix>) -> Self {
        let n = config.stacked_rows();
        ModelParams {
            embeddings,
            pin_kernels: (0..config.pin_layers).map(|_| Matrix::zeros(n, n)).collect(),
            out_weights: Matrix::zeros(1, n),
            bias: 0.0,
        }
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.embeddings.iter().map(Matrix::rows).collect()
    }

    /// Checks every shape against `config`.
    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        let n = config.stacked_rows();
        let fail = |what: String| Err(Error::Consistency(what));
        if self.embeddings.len() != config.field_count {
            return fail(format!("{} embedding tables for {} fields", self.embeddings.len(), config.field_count));
        }
        if let Some(f) = self.embeddings.iter().position(|e| e.cols() != config.embedding_dim) {
            return fail(format!("embedding table {f} is not {} wide", config.embedding_dim));
        }
        if self.pin_kernels.len() != config.pin_layers {
            return fail(format!("{} kernels for {} layers", self.pin_kernels.len(), config.pin_layers));
        }
        if let Some(l) = self.pin_kernels.iter().position(|w| w.shape() != (n, n)) {
            return fail(format!("kernel {l} is not {n}x{n}"));
        }
        if self.out_weights.shape() != (1, n) {
            return fail(format!("output weights are {:?}, expected (1, {n})", self.out_weights.shape()));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.bias.is_finite()
            && self.out_weights.is_finite()
            && self.embeddings.iter().all(Matrix::is_finite)
            && self.pin_kernels.iter().all(Matrix::is_finite)
    }
}

/// Intermediates of one forward pass, retained for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Hot index of each field.
    pub indices: Vec<usize>,
    /// `X'_0`.
    pub x0_stacked: Matrix,
    /// `X'_1 .. X'_L`.
    pub layer_outputs: Vec<Matrix>,
    /// Pre-activation aggregations `W'_l X'_0`; left empty for the linear
    /// activation, whose derivative is constant.
    pub pre_activations: Vec<Matrix>,
    /// Gates `act(W'_l X'_0) + 1`; equal to `W'_l X'_0 + 1` for the linear activation.
    pub aggregates: Vec<Matrix>,
    pub logit: f64,
    /// Clamped into `[1e-12, 1 - 1e-12]`.
    pub prediction: f64,
}

impl ForwardTrace {
    /// `X'_L` (or `X'_0` when there are no layers).
    pub fn last_output(&self) -> &Matrix {
        self.layer_outputs.last().unwrap_or(&self.x0_stacked)
    }

    /// `X'_l` for `l` in `0..=L`.
    pub fn output(&self, l: usize) -> &Matrix {
        if l == 0 {
            &self.x0_stacked
        } else {
            &self.layer_outputs[l - 1]
        }
    }
}

/// Gathers row `indices[f]` of table `f` into an `F x K` feature map.
pub fn embed(indices: &[usize], params: &ModelParams, config: &ModelConfig) -> Result<Matrix> {
    if indices.len() != config.field_count {
        return Err(Error::Value(format!(
            "example has {} fields, model expects {}",
            indices.len(),
            config.field_count
        )));
    }
    let k = config.embedding_dim;
    let mut out = Matrix::zeros(config.field_count, k);
    for (f, (&idx, table)) in indices.iter().zip(&params.embeddings).enumerate() {
        if idx >= table.rows() {
            return Err(Error::Lookup {
                field: f,
                index: idx,
                cardinality: table.rows(),
            });
        }
        out.row_mut(f).copy_from_slice(table.row(idx));
    }
    Ok(out)
}

/// Splits the columns of `x0` into `h` blocks and stacks them vertically.
///
/// Row `j*F + f` of the result holds columns `j*K/h .. (j+1)*K/h` of row `f`.
///
/// ```
/// use xdeepint::{model::restack, Matrix};
/// let x = Matrix::from_rows(&[[1.0, 2.0, 3.0, 4.0], [5.0, 6.0, 7.0, 8.0]]).unwrap();
/// let s = restack(&x, 2).unwrap();
/// assert_eq!(s, Matrix::from_rows(&[[1.0, 2.0], [5.0, 6.0], [3.0, 4.0], [7.0, 8.0]]).unwrap());
/// ```
pub fn restack(x0: &Matrix, subspaces: usize) -> Result<Matrix> {
    let (f, k) = x0.shape();
    if subspaces == 0 || k % subspaces != 0 {
        return Err(Error::Config(format!("subspaces ({subspaces}) must divide embedding width ({k})")));
    }
    let w = k / subspaces;
    Ok(Matrix::from_fn(f * subspaces, w, |r, c| {
        let (block, field) = (r / f, r % f);
        x0[(field, block * w + c)]
    }))
}

/// Inverse of [`restack`]: `(F*h) x (K/h)` back to `F x K`.
pub fn unstack(stacked: &Matrix, subspaces: usize) -> Result<Matrix> {
    let (rows, w) = stacked.shape();
    if subspaces == 0 || rows % subspaces != 0 {
        return Err(Error::Config(format!("subspaces ({subspaces}) must divide stacked rows ({rows})")));
    }
    let f = rows / subspaces;
    Ok(Matrix::from_fn(f, w * subspaces, |field, col| {
        let (block, c) = (col / w, col % w);
        stacked[(block * f + field, c)]
    }))
}

/// Runs the interaction recursion and output head on a stacked input map.
pub fn pin_forward(x0_stacked: Matrix, params: &ModelParams, config: &ModelConfig) -> Result<ForwardTrace> {
    let expected = (config.stacked_rows(), config.stacked_cols());
    if x0_stacked.shape() != expected {
        return Err(Error::shape("pin_forward", x0_stacked.shape(), expected));
    }
    let layers = params.pin_kernels.len();
    let mut layer_outputs = Vec::with_capacity(layers);
    let mut pre_activations = Vec::with_capacity(layers);
    let mut aggregates = Vec::with_capacity(layers);
    for kernel in &params.pin_kernels {
        let gate = match config.activation {
            Activation::Linear => kernel.matmul_add_one(&x0_stacked)?,
            act => {
                let pre = kernel.matmul(&x0_stacked)?;
                let gate = pre.map(|z| act.apply(z) + 1.0);
                pre_activations.push(pre);
                gate
            }
        };
        let prev = layer_outputs.last().unwrap_or(&x0_stacked);
        let next = prev.hadamard(&gate)?;
        aggregates.push(gate);
        layer_outputs.push(next);
    }
    let last = layer_outputs.last().unwrap_or(&x0_stacked);
    let (logit, prediction) = output_head(last, params, config)?;
    Ok(ForwardTrace {
        indices: Vec::new(),
        x0_stacked,
        layer_outputs,
        pre_activations,
        aggregates,
        logit,
        prediction,
    })
}

/// `s = sum(W_out X_L) + b * K/h`, prediction `sigmoid(s)` clamped away from 0 and 1.
pub fn output_head(last: &Matrix, params: &ModelParams, config: &ModelConfig) -> Result<(f64, f64)> {
    let logit = params.out_weights.matmul(last)?.reduce_sum_all() + params.bias * config.stacked_cols() as f64;
    Ok((logit, clamp_probability(sigmoid(logit))))
}

/// Full single-example forward pass.
pub fn forward(indices: &[usize], params: &ModelParams, config: &ModelConfig) -> Result<ForwardTrace> {
    let x0 = embed(indices, params, config)?;
    let mut trace = pin_forward(restack(&x0, config.subspaces)?, params, config)?;
    trace.indices = indices.to_vec();
    Ok(trace)
}

/// Predicted click probability for each example, in order.
pub fn predict_batch(examples: &[Example], params: &ModelParams, config: &ModelConfig) -> Result<Vec<f64>> {
    examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            forward(&ex.indices, params, config)
                .map(|t| t.prediction)
                .map_err(|e| Error::Example {
                    example: i,
                    source: Box::new(e),
                })
        })
        .collect()
}

pub fn predict_dataset(ds: &EncodedDataset, params: &ModelParams, config: &ModelConfig) -> Result<Vec<f64>> {
    predict_batch(&ds.examples, params, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_config(layers: usize) -> ModelConfig {
        ModelConfig::new(1, 1, layers, 1).unwrap()
    }

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn config_requires_divisible_subspaces() {
        assert!(matches!(ModelConfig::new(3, 6, 2, 4), Err(Error::Config(_))));
        assert!(ModelConfig::new(3, 8, 2, 4).is_ok());
        let cfg = ModelConfig::new(3, 8, 2, 4).unwrap();
        assert_eq!((cfg.stacked_rows(), cfg.stacked_cols()), (12, 2));
        assert_eq!(cfg.activation, Activation::Linear);
    }

    #[test]
    fn embed_gathers_rows() {
        let cfg = ModelConfig::new(2, 2, 0, 1).unwrap();
        let params = ModelParams::with_embeddings(
            &cfg,
            vec![m(&[&[1.0, 2.0], &[3.0, 4.0]]), m(&[&[5.0, 6.0], &[7.0, 8.0], &[9.0, 10.0]])],
        );
        assert_eq!(embed(&[1, 2], &params, &cfg).unwrap(), m(&[&[3.0, 4.0], &[9.0, 10.0]]));
        let a = embed(&[0, 0], &params, &cfg).unwrap();
        let b = embed(&[0, 1], &params, &cfg).unwrap();
        assert_eq!(a.row(0), b.row(0));
        assert_ne!(a.row(1), b.row(1));

        let zero = ModelParams::with_embeddings(&cfg, vec![Matrix::zeros(2, 2), Matrix::zeros(3, 2)]);
        assert_eq!(embed(&[1, 2], &zero, &cfg).unwrap(), Matrix::zeros(2, 2));

        match embed(&[0, 3], &params, &cfg) {
            Err(Error::Lookup { field: 1, index: 3, cardinality: 3 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn restack_examples() {
        let x = m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        assert_eq!(restack(&x, 1).unwrap(), x);
        assert!(matches!(restack(&x, 2), Err(Error::Config(_))));
        let x = m(&[&[11.0, 12.0, 13.0, 14.0], &[21.0, 22.0, 23.0, 24.0]]);
        let s = restack(&x, 2).unwrap();
        assert_eq!(s, m(&[&[11.0, 12.0], &[21.0, 22.0], &[13.0, 14.0], &[23.0, 24.0]]));
        assert_eq!(unstack(&s, 2).unwrap(), x);
    }

    #[test]
    fn zero_kernels_are_identity_layers() {
        let cfg = ModelConfig::new(3, 4, 3, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = ModelParams::init(&cfg, &[4, 5, 6], &mut rng).unwrap();
        let trace = forward(&[1, 2, 3], &params, &cfg).unwrap();
        for out in &trace.layer_outputs {
            assert_eq!(out, &trace.x0_stacked);
        }
        assert_eq!(trace.prediction, 0.5);
    }

    #[test]
    fn scalar_recursions_by_hand() {
        // x1 = 2 * (0.5 * 2 + 1) = 4
        let cfg = scalar_config(1);
        let mut p = ModelParams::with_embeddings(&cfg, vec![m(&[&[2.0]])]);
        p.pin_kernels[0] = m(&[&[0.5]]);
        let t = forward(&[0], &p, &cfg).unwrap();
        assert_eq!(t.layer_outputs[0], m(&[&[4.0]]));

        // x2 = 4 * (1 * 2 + 1) = 12
        let cfg = scalar_config(2);
        let mut p = ModelParams::with_embeddings(&cfg, vec![m(&[&[2.0]])]);
        p.pin_kernels = vec![m(&[&[0.5]]), m(&[&[1.0]])];
        let t = forward(&[0], &p, &cfg).unwrap();
        assert_eq!(t.layer_outputs[1], m(&[&[12.0]]));
    }

    #[test]
    fn output_head_examples() {
        let cfg = ModelConfig::new(2, 2, 0, 1).unwrap();
        let mut p = ModelParams::with_embeddings(&cfg, vec![Matrix::zeros(1, 2), Matrix::zeros(1, 2)]);
        let x = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(output_head(&x, &p, &cfg).unwrap(), (0.0, 0.5));

        p.out_weights = m(&[&[1.0, 1.0]]);
        let (s, y) = output_head(&x, &p, &cfg).unwrap();
        assert_eq!(s, 10.0);
        assert!((y - 0.999_954_602_131_297_6).abs() < 1e-15);

        p.out_weights = Matrix::zeros(1, 2);
        p.bias = 1.0;
        assert_eq!(output_head(&x, &p, &cfg).unwrap().0, 2.0);
    }

    #[test]
    fn batch_matches_single_path_and_permutes() {
        let cfg = ModelConfig::new(3, 4, 2, 2).unwrap().with_activation(Activation::Tanh);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut p = ModelParams::init(&cfg, &[3, 3, 3], &mut rng).unwrap();
        for w in &mut p.pin_kernels {
            *w = Matrix::from_fn(6, 6, |_, _| rng.gen_range(-0.5..0.5));
        }
        p.out_weights = Matrix::from_fn(1, 6, |_, _| rng.gen_range(-1.0..1.0));
        let examples: Vec<Example> = (0..5)
            .map(|i| Example { indices: vec![i % 3, (i + 1) % 3, (2 * i) % 3], label: 0 })
            .collect();
        let preds = predict_batch(&examples, &p, &cfg).unwrap();
        for (ex, &y) in examples.iter().zip(&preds) {
            assert_eq!(forward(&ex.indices, &p, &cfg).unwrap().prediction, y);
        }
        let reversed: Vec<Example> = examples.iter().rev().cloned().collect();
        let mut back = predict_batch(&reversed, &p, &cfg).unwrap();
        back.reverse();
        assert_eq!(back, preds);

        let bad = vec![examples[0].clone(), Example { indices: vec![0, 9, 0], label: 0 }];
        match predict_batch(&bad, &p, &cfg) {
            Err(Error::Example { example: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_layer_prediction_only_sees_x0() {
        let cfg = ModelConfig::new(2, 2, 0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = ModelParams::init(&cfg, &[2, 2], &mut rng).unwrap();
        p.out_weights = m(&[&[0.3, -0.7]]);
        p.bias = 0.1;
        let t = forward(&[1, 0], &p, &cfg).unwrap();
        let x0 = &t.x0_stacked;
        let direct = 0.3 * (x0[(0, 0)] + x0[(0, 1)]) - 0.7 * (x0[(1, 0)] + x0[(1, 1)]) + 0.1 * 2.0;
        assert!((t.logit - direct).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn restack_is_a_bijection(f in 1usize..5, w in 1usize..4, h in 1usize..5, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Matrix::from_fn(f, w * h, |_, _| rng.gen_range(-1.0..1.0));
            let s = restack(&x, h).unwrap();
            prop_assert_eq!(s.shape(), (f * h, w));
            let mut a = x.as_slice().to_vec();
            let mut b = s.as_slice().to_vec();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);
            prop_assert_eq!(unstack(&s, h).unwrap(), x);
        }
    }
}
