//! Oracle suites comparing the fast paths against the reference
//! implementations in [`crate::oracle`], at fixed seeds.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradients::{backward, log_loss};
use crate::matrix::Matrix;
use crate::metrics::auc;
use crate::model::{forward, pin_forward, Activation, ForwardTrace, ModelConfig, ModelParams};
use crate::oracle::{
    finite_diff, max_relative_error, pairwise_auc, pin_symbolic, SYMBOLIC_MAX_COLS, SYMBOLIC_MAX_LAYERS,
    SYMBOLIC_MAX_ROWS,
};

/// Signature of the interaction stack under test; normally [`pin_forward`].
pub type PinForward = fn(Matrix, &ModelParams, &ModelConfig) -> Result<ForwardTrace>;

pub const POLYNOMIAL_TOLERANCE: f64 = 1e-12;
pub const GRADIENT_TOLERANCE: f64 = 1e-6;
pub const FINITE_DIFF_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub module: &'static str,
    pub property: &'static str,
    pub passed: bool,
    pub cases: usize,
    /// Worst observed error, or the first failing case.
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {}::{} ({} cases) {}", self.module, self.property, self.cases, self.detail)
    }
}

/// Every `(F, h, K, L)` with `F*h <= 8`, `K/h <= 4` and `L <= 4`.
pub fn polynomial_shapes() -> Vec<(usize, usize, usize, usize)> {
    let mut out = Vec::new();
    for f in 1..=SYMBOLIC_MAX_ROWS {
        for h in 1..=SYMBOLIC_MAX_ROWS / f {
            for c in 1..=SYMBOLIC_MAX_COLS {
                for l in 0..=SYMBOLIC_MAX_LAYERS {
                    out.push((f, h, h * c, l));
                }
            }
        }
    }
    out
}

/// Relative error used by the polynomial check: `|a - b| / max(|b|, 1)`.
fn poly_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

/// Runs `forward` on random kernels and inputs and compares every output
/// entry with the expanded polynomial. Each parameterization draws fresh
/// kernels and a fresh input.
pub fn polynomial_suite(forward: PinForward, per_shape: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    let mut failure = None;
    'shapes: for (f, h, k, l) in polynomial_shapes() {
        let config = ModelConfig::new(f, k, l, h).expect("enumerated shapes are valid");
        let (rows, cols) = (config.stacked_rows(), config.stacked_cols());
        for _ in 0..per_shape {
            let kernels: Vec<Matrix> = (0..l)
                .map(|_| Matrix::from_fn(rows, rows, |_, _| rng.gen_range(-1.0..1.0)))
                .collect();
            let x0 = Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0));
            let mut params = ModelParams::with_embeddings(&config, vec![Matrix::zeros(1, k); f]);
            params.pin_kernels = kernels;
            cases += 1;
            let outcome = pin_symbolic(rows, cols, &params.pin_kernels).and_then(|polys| {
                let trace = forward(x0.clone(), &params, &config)?;
                Ok(polys
                    .iter()
                    .zip(trace.last_output().as_slice())
                    .map(|(p, &a)| poly_error(a, p.evaluate(x0.as_slice())))
                    .fold(0.0, f64::max))
            });
            match outcome {
                Ok(err) if err <= POLYNOMIAL_TOLERANCE => worst = worst.max(err),
                Ok(err) => {
                    failure = Some(format!("F={f} h={h} K={k} L={l}: relative error {err:.3e}"));
                    break 'shapes;
                }
                Err(e) => {
                    failure = Some(format!("F={f} h={h} K={k} L={l}: {e}"));
                    break 'shapes;
                }
            }
        }
    }
    CheckResult {
        module: "model",
        property: "pin_matches_polynomial_expansion",
        passed: failure.is_none(),
        cases,
        detail: failure.unwrap_or_else(|| format!("max relative error {worst:.3e}")),
    }
}

/// A random model whose loss is smooth enough for central differences.
pub fn random_model(rng: &mut impl Rng, h: usize, layers: usize, activation: Activation) -> (ModelConfig, ModelParams) {
    let f = rng.gen_range(1..=3);
    let k = h * rng.gen_range(1..=2);
    let config = ModelConfig::new(f, k, layers, h)
        .expect("h divides k")
        .with_activation(activation);
    let cards: Vec<usize> = (0..f).map(|_| rng.gen_range(1..=3)).collect();
    let mut params = ModelParams::init(&config, &cards, rng).expect("valid cardinalities");
    let n = config.stacked_rows();
    for w in &mut params.pin_kernels {
        *w = Matrix::from_fn(n, n, |_, _| rng.gen_range(-0.8..0.8));
    }
    params.out_weights = Matrix::from_fn(1, n, |_, _| rng.gen_range(-1.0..1.0));
    params.bias = rng.gen_range(-0.5..0.5);
    (config, params)
}

/// Backward pass against central differences on `models` random models,
/// cycling through subspace counts 1, 2, 4, depths 0 to 4 and every activation.
pub fn gradient_suite(models: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut failure = None;
    for case in 0..models {
        let h = [1, 2, 4][case % 3];
        let layers = case % 5;
        let activation = Activation::ALL[case % 4];
        let (config, params) = random_model(&mut rng, h, layers, activation);
        let indices: Vec<usize> = params.embeddings.iter().map(|e| rng.gen_range(0..e.rows())).collect();
        let label = rng.gen_range(0..=1u8);
        let loss = |p: &ModelParams| forward(&indices, p, &config).map_or(f64::NAN, |t| log_loss(label, t.prediction));
        let outcome = forward(&indices, &params, &config)
            .and_then(|t| backward(&t, label, &params, &config))
            .map(|analytic| max_relative_error(&analytic, &finite_diff(loss, &params, FINITE_DIFF_STEP)));
        match outcome {
            Ok(err) if err < GRADIENT_TOLERANCE => worst = worst.max(err),
            Ok(err) => {
                failure = Some(format!("case {case} {config:?}: relative error {err:.3e}"));
                break;
            }
            Err(e) => {
                failure = Some(format!("case {case}: {e}"));
                break;
            }
        }
    }
    CheckResult {
        module: "gradients",
        property: "backward_matches_finite_differences",
        passed: failure.is_none(),
        cases: models,
        detail: failure.unwrap_or_else(|| format!("max relative error {worst:.3e}")),
    }
}

/// Random score/label vectors of length up to `max_len`, with scores drawn
/// from a handful of values so ties are common.
pub fn random_auc_instance(rng: &mut impl Rng, max_len: usize) -> (Vec<f64>, Vec<u8>) {
    let n = rng.gen_range(2..=max_len);
    let levels = rng.gen_range(1..=n.min(20));
    let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
    let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1)).collect();
    let a = rng.gen_range(0..n);
    let b = (a + rng.gen_range(1..n)) % n;
    labels[a] = 0;
    labels[b] = 1;
    (scores, labels)
}

/// Rank-based AUC against the pairwise count, requiring bitwise equality.
pub fn auc_suite(instances: usize, max_len: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failure = None;
    for case in 0..instances {
        let (scores, labels) = random_auc_instance(&mut rng, max_len);
        match (auc(&scores, &labels), pairwise_auc(&scores, &labels)) {
            (Ok(a), Ok(b)) if a.to_bits() == b.to_bits() => {}
            (a, b) => {
                failure = Some(format!("case {case} (n={}): rank {a:?} vs pairwise {b:?}", scores.len()));
                break;
            }
        }
    }
    CheckResult {
        module: "metrics",
        property: "rank_auc_equals_pairwise",
        passed: failure.is_none(),
        cases: instances,
        detail: failure.unwrap_or_else(|| "exact".into()),
    }
}

/// The suites run by the command-line `self-check`.
pub fn run_all_with(forward: PinForward) -> Vec<CheckResult> {
    vec![
        polynomial_suite(forward, 20, 0x5eed_0001),
        gradient_suite(50, 0x5eed_0002),
        auc_suite(1000, 200, 0x5eed_0003),
    ]
}

pub fn run_all() -> Vec<CheckResult> {
    run_all_with(pin_forward)
}
