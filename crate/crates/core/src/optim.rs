//! Parameter updates.
//!
//! The default strategy pairs group-lasso FTRL on embedding rows (whole rows
//! are thresholded to zero together) with coordinate-wise FTRL-Proximal on
//! the interaction kernels and the output head. Adam on everything is the
//! alternative. FTRL variants are lazy: coordinates (rows) with a zero
//! gradient in a step are left untouched, state and weight alike.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::gradients::GradientSet;
use crate::matrix::Matrix;
use crate::model::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FtrlConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for FtrlConfig {
    fn default() -> Self {
        FtrlConfig {
            alpha: 0.01,
            beta: 1.0,
            lambda1: 0.001,
            lambda2: 0.001,
        }
    }
}

impl FtrlConfig {
    #[inline]
    fn denominator(&self, n: f64) -> f64 {
        (self.beta + n.sqrt()) / self.alpha + self.lambda2
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

fn ensure_finite(grads: &[f64]) -> Result<()> {
    match grads.iter().position(|g| !g.is_finite()) {
        Some(i) => Err(Error::Numeric(format!("non-finite gradient {} at coordinate {i}", grads[i]))),
        None => Ok(()),
    }
}

fn ensure_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Value(format!("{what}: {a} weights but {b} gradients")));
    }
    Ok(())
}

/// Per-coordinate FTRL accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct FtrlState {
    pub z: Vec<f64>,
    pub n: Vec<f64>,
}

impl FtrlState {
    pub fn new(len: usize) -> Self {
        FtrlState {
            z: vec![0.0; len],
            n: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }
}

/// One FTRL-Proximal step over a flat weight vector.
///
/// ```
/// use xdeepint::optim::{ftrl_apply, FtrlConfig, FtrlState};
/// let cfg = FtrlConfig { alpha: 1.0, beta: 1.0, lambda1: 0.0, lambda2: 0.0 };
/// let mut state = FtrlState::new(1);
/// let mut w = [0.0];
/// ftrl_apply(&mut state, &cfg, &mut w, &[1.0]).unwrap();
/// assert_eq!((state.z[0], state.n[0], w[0]), (1.0, 1.0, -0.5));
/// ```
pub fn ftrl_apply(state: &mut FtrlState, cfg: &FtrlConfig, weights: &mut [f64], grads: &[f64]) -> Result<()> {
    ensure_len("ftrl", weights.len(), grads.len())?;
    ensure_len("ftrl state", state.len(), grads.len())?;
    ensure_finite(grads)?;
    for (i, &g) in grads.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let n_old = state.n[i];
        let n_new = n_old + g * g;
        let sigma = (n_new.sqrt() - n_old.sqrt()) / cfg.alpha;
        let z = state.z[i] + g - sigma * weights[i];
        state.z[i] = z;
        state.n[i] = n_new;
        weights[i] = if z.abs() <= cfg.lambda1 {
            0.0
        } else {
            -(z - z.signum() * cfg.lambda1) / cfg.denominator(n_new)
        };
    }
    Ok(())
}

/// Group-lasso FTRL accumulators for one embedding table; each row is a group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupFtrlState {
    pub width: usize,
    /// Row-major, `rows x width`.
    pub z: Vec<f64>,
    pub n: Vec<f64>,
}

impl GroupFtrlState {
    pub fn new(rows: usize, width: usize) -> Self {
        GroupFtrlState {
            width,
            z: vec![0.0; rows * width],
            n: vec![0.0; rows * width],
        }
    }

    pub fn rows(&self) -> usize {
        if self.width == 0 {
            0
        } else {
            self.z.len() / self.width
        }
    }
}

/// One group-lasso FTRL step over the rows listed in `row_grads`.
///
/// A touched row is zeroed as a whole when `||z_row|| <= lambda1 * sqrt(K)`;
/// otherwise each coordinate is `-(z_i - lambda1 sqrt(K) z_i / ||z||) / d_i`
/// with the same per-coordinate denominator as plain FTRL.
pub fn group_ftrl_apply<'a>(
    state: &mut GroupFtrlState,
    cfg: &FtrlConfig,
    table: &mut Matrix,
    row_grads: impl IntoIterator<Item = (usize, &'a [f64])>,
) -> Result<()> {
    let width = state.width;
    if table.cols() != width || table.rows() != state.rows() {
        return Err(Error::Value(format!(
            "group ftrl state is {}x{width}, table is {:?}",
            state.rows(),
            table.shape()
        )));
    }
    let rows: Vec<(usize, &[f64])> = row_grads.into_iter().collect();
    for &(r, g) in &rows {
        ensure_len("group ftrl row", width, g.len())?;
        if r >= table.rows() {
            return Err(Error::Value(format!("row {r} outside table of {} rows", table.rows())));
        }
        ensure_finite(g)?;
    }
    let threshold = cfg.lambda1 * (width as f64).sqrt();
    for (r, g) in rows {
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        let base = r * width;
        let w = table.row_mut(r);
        for (i, &gi) in g.iter().enumerate() {
            let n_old = state.n[base + i];
            let n_new = n_old + gi * gi;
            let sigma = (n_new.sqrt() - n_old.sqrt()) / cfg.alpha;
            state.z[base + i] = state.z[base + i] + gi - sigma * w[i];
            state.n[base + i] = n_new;
        }
        let z = &state.z[base..base + width];
        let norm = z.iter().fold(0.0, |acc, &v| acc + v * v).sqrt();
        if norm <= threshold {
            w.iter_mut().for_each(|v| *v = 0.0);
        } else {
            for (i, wi) in w.iter_mut().enumerate() {
                let zi = z[i];
                *wi = -(zi - threshold * (zi / norm)) / cfg.denominator(state.n[base + i]);
            }
        }
    }
    Ok(())
}

/// Adam moments for a flat parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    fn update(&mut self, cfg: &AdamConfig, idx: usize, w: &mut f64, g: f64) {
        let m = cfg.beta1 * self.m[idx] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * self.v[idx] + (1.0 - cfg.beta2) * g * g;
        self.m[idx] = m;
        self.v[idx] = v;
        let t = self.t as i32;
        let m_hat = m / (1.0 - cfg.beta1.powi(t));
        let v_hat = v / (1.0 - cfg.beta2.powi(t));
        *w -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}

/// One bias-corrected Adam step over every coordinate.
pub fn adam_apply(state: &mut AdamState, cfg: &AdamConfig, weights: &mut [f64], grads: &[f64]) -> Result<()> {
    ensure_len("adam", weights.len(), grads.len())?;
    ensure_len("adam state", state.m.len(), grads.len())?;
    ensure_finite(grads)?;
    state.t += 1;
    for (i, (w, &g)) in weights.iter_mut().zip(grads).enumerate() {
        state.update(cfg, i, w, g);
    }
    Ok(())
}

/// Adam over selected rows of a table; the step counter is shared by the table.
pub fn adam_apply_rows<'a>(
    state: &mut AdamState,
    cfg: &AdamConfig,
    table: &mut Matrix,
    row_grads: impl IntoIterator<Item = (usize, &'a [f64])>,
) -> Result<()> {
    let width = table.cols();
    let rows: Vec<(usize, &[f64])> = row_grads.into_iter().collect();
    for &(r, g) in &rows {
        ensure_len("adam row", width, g.len())?;
        if r >= table.rows() {
            return Err(Error::Value(format!("row {r} outside table of {} rows", table.rows())));
        }
        ensure_finite(g)?;
    }
    state.t += 1;
    for (r, g) in rows {
        let w = table.row_mut(r);
        for (i, &gi) in g.iter().enumerate() {
            state.update(cfg, r * width + i, &mut w[i], gi);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    /// Group-lasso FTRL on embeddings, FTRL on kernels and head.
    #[default]
    GftrlFtrl,
    Adam,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::GftrlFtrl => "gftrl_ftrl",
            OptimizerKind::Adam => "adam",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gftrl_ftrl" => Ok(OptimizerKind::GftrlFtrl),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub ftrl: FtrlConfig,
    pub adam: AdamConfig,
}

/// Accumulators for every parameter block of a model.
#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    GftrlFtrl {
        embeddings: Vec<GroupFtrlState>,
        kernels: Vec<FtrlState>,
        out_weights: FtrlState,
        bias: FtrlState,
    },
    Adam {
        embeddings: Vec<AdamState>,
        kernels: Vec<AdamState>,
        out_weights: AdamState,
        bias: AdamState,
    },
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &ModelParams) -> Self {
        let kernel_len = |w: &Matrix| w.rows() * w.cols();
        match kind {
            OptimizerKind::GftrlFtrl => OptimizerState::GftrlFtrl {
                embeddings: params.embeddings.iter().map(|e| GroupFtrlState::new(e.rows(), e.cols())).collect(),
                kernels: params.pin_kernels.iter().map(|w| FtrlState::new(kernel_len(w))).collect(),
                out_weights: FtrlState::new(params.out_weights.cols()),
                bias: FtrlState::new(1),
            },
            OptimizerKind::Adam => OptimizerState::Adam {
                embeddings: params.embeddings.iter().map(|e| AdamState::new(kernel_len(e))).collect(),
                kernels: params.pin_kernels.iter().map(|w| AdamState::new(kernel_len(w))).collect(),
                out_weights: AdamState::new(params.out_weights.cols()),
                bias: AdamState::new(1),
            },
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            OptimizerState::GftrlFtrl { .. } => OptimizerKind::GftrlFtrl,
            OptimizerState::Adam { .. } => OptimizerKind::Adam,
        }
    }

    /// Applies one step. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, config: &OptimizerConfig, params: &mut ModelParams, grads: &GradientSet) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::Numeric("non-finite gradient; step rejected".into()));
        }
        if grads.d_pin_kernels.len() != params.pin_kernels.len() {
            return Err(Error::Consistency("gradient layer count differs from parameters".into()));
        }
        let by_field = rows_by_field(grads, params.embeddings.len())?;
        match self {
            OptimizerState::GftrlFtrl {
                embeddings,
                kernels,
                out_weights,
                bias,
            } => {
                let cfg = &config.ftrl;
                for ((state, table), rows) in embeddings.iter_mut().zip(&mut params.embeddings).zip(&by_field) {
                    group_ftrl_apply(state, cfg, table, rows.iter().map(|&(r, g)| (r, g)))?;
                }
                for ((state, w), g) in kernels.iter_mut().zip(&mut params.pin_kernels).zip(&grads.d_pin_kernels) {
                    ftrl_apply(state, cfg, w.as_mut_slice(), g.as_slice())?;
                }
                ftrl_apply(out_weights, cfg, params.out_weights.as_mut_slice(), grads.d_out_weights.as_slice())?;
                ftrl_apply(bias, cfg, std::slice::from_mut(&mut params.bias), &[grads.d_bias])?;
            }
            OptimizerState::Adam {
                embeddings,
                kernels,
                out_weights,
                bias,
            } => {
                let cfg = &config.adam;
                for ((state, table), rows) in embeddings.iter_mut().zip(&mut params.embeddings).zip(&by_field) {
                    adam_apply_rows(state, cfg, table, rows.iter().map(|&(r, g)| (r, g)))?;
                }
                for ((state, w), g) in kernels.iter_mut().zip(&mut params.pin_kernels).zip(&grads.d_pin_kernels) {
                    adam_apply(state, cfg, w.as_mut_slice(), g.as_slice())?;
                }
                adam_apply(out_weights, cfg, params.out_weights.as_mut_slice(), grads.d_out_weights.as_slice())?;
                adam_apply(bias, cfg, std::slice::from_mut(&mut params.bias), &[grads.d_bias])?;
            }
        }
        Ok(())
    }
}

fn rows_by_field(grads: &GradientSet, fields: usize) -> Result<Vec<Vec<(usize, &[f64])>>> {
    let mut out = vec![Vec::new(); fields];
    for (&(field, row), g) in &grads.d_embeddings {
        out.get_mut(field)
            .ok_or_else(|| Error::Consistency(format!("gradient for field {field} of {fields}")))?
            .push((row, g.as_slice()));
    }
    Ok(out)
}

/// Exact-zero sparsity of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityReport {
    /// Fraction of embedding rows that are entirely zero.
    pub feature_sparse_ratio: f64,
    /// Fraction of interaction-kernel entries that are zero (0 when there are no kernels).
    pub weight_sparse_ratio: f64,
    pub zero_rows_per_field: Vec<usize>,
    pub rows_per_field: Vec<usize>,
}

pub fn sparsity_report(params: &ModelParams) -> SparsityReport {
    let zero_rows_per_field: Vec<usize> = params
        .embeddings
        .iter()
        .map(|t| (0..t.rows()).filter(|&r| t.row(r).iter().all(|&v| v == 0.0)).count())
        .collect();
    let rows_per_field: Vec<usize> = params.embeddings.iter().map(Matrix::rows).collect();
    let total_rows: usize = rows_per_field.iter().sum();
    let (zero_w, total_w) = params.pin_kernels.iter().fold((0usize, 0usize), |(z, t), w| {
        (z + w.as_slice().iter().filter(|&&v| v == 0.0).count(), t + w.as_slice().len())
    });
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    SparsityReport {
        feature_sparse_ratio: ratio(zero_rows_per_field.iter().sum(), total_rows),
        weight_sparse_ratio: ratio(zero_w, total_w),
        zero_rows_per_field,
        rows_per_field,
    }
}

/// Groups gradient rows by field without copying; exposed for callers that
/// drive the per-table updates themselves.
pub fn embedding_rows(grads: &GradientSet) -> BTreeMap<usize, Vec<(usize, &[f64])>> {
    let mut out: BTreeMap<usize, Vec<(usize, &[f64])>> = BTreeMap::new();
    for (&(field, row), g) in &grads.d_embeddings {
        out.entry(field).or_default().push((row, g.as_slice()));
    }
    out
}
