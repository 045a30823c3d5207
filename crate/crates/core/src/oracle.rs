//! Brute-force reference implementations used to check the fast paths.
//!
//! Nothing in here shares code with the routines it verifies: the polynomial
//! oracle expands the closed-form product instead of running the layer
//! recursion, the gradient oracle perturbs parameters one at a time, and the
//! AUC oracle counts every positive/negative pair.

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::gradients::GradientSet;
use crate::matrix::Matrix;
use crate::model::ModelParams;

/// Triple-loop product with the same accumulation order as [`Matrix::matmul`].
pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(Error::Shape {
            op: "naive_matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut acc = 0.0;
            for k in 0..a.cols() {
                acc += a[(i, k)] * b[(k, j)];
            }
            out[(i, j)] = acc;
        }
    }
    Ok(out)
}

/// Most variables a [`SparsePolynomial`] can mention.
pub const MAX_VARIABLES: usize = 32;
const EXPONENT_BITS: u32 = 4;
const EXPONENT_MASK: u128 = (1 << EXPONENT_BITS) - 1;

/// Exponent vector packed four bits per variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
struct Monomial(u128);

impl Monomial {
    fn from_ids(ids: &[usize]) -> Self {
        let mut m = Monomial::default();
        for &id in ids {
            m = m.times(Monomial::var(id));
        }
        m
    }

    fn var(id: usize) -> Self {
        assert!(id < MAX_VARIABLES, "variable id {id} exceeds {MAX_VARIABLES}");
        Monomial(1 << (id as u32 * EXPONENT_BITS))
    }

    fn exponent(self, id: usize) -> u32 {
        ((self.0 >> (id as u32 * EXPONENT_BITS)) & EXPONENT_MASK) as u32
    }

    fn times(self, other: Monomial) -> Monomial {
        // a carry into the low bit of any nibble means some exponent overflowed
        const NIBBLE_LOW_BITS: u128 = u128::MAX / EXPONENT_MASK;
        let sum = self.0.checked_add(other.0).expect("exponent overflow");
        assert_eq!((sum ^ self.0 ^ other.0) & NIBBLE_LOW_BITS, 0, "exponent overflow");
        Monomial(sum)
    }

    /// `(id, exponent)` for every variable present, ascending by id.
    fn factors(self) -> impl Iterator<Item = (usize, u32)> {
        let mut bits = self.0;
        std::iter::from_fn(move || {
            if bits == 0 {
                return None;
            }
            let id = (bits.trailing_zeros() / EXPONENT_BITS) as usize;
            let shift = id as u32 * EXPONENT_BITS;
            let exp = ((bits >> shift) & EXPONENT_MASK) as u32;
            bits &= !(EXPONENT_MASK << shift);
            Some((id, exp))
        })
    }

    /// Sorted variable ids, repeated for powers.
    fn ids(self) -> Vec<usize> {
        self.factors()
            .flat_map(|(id, exp)| std::iter::repeat_n(id, exp as usize))
            .collect()
    }

    fn degree(self) -> usize {
        self.factors().map(|(_, exp)| exp as usize).sum()
    }
}

/// Polynomial over variables numbered `0..MAX_VARIABLES`. Monomials are
/// written as lists of variable ids, repeated for powers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparsePolynomial {
    terms: BTreeMap<Monomial, f64>,
}

impl SparsePolynomial {
    pub fn constant(c: f64) -> Self {
        let mut p = SparsePolynomial::default();
        p.add_term(Monomial::default(), c);
        p
    }

    pub fn variable(id: usize) -> Self {
        let mut p = SparsePolynomial::default();
        p.add_term(Monomial::var(id), 1.0);
        p
    }

    fn add_term(&mut self, monomial: Monomial, coef: f64) {
        if coef == 0.0 {
            return;
        }
        match self.terms.entry(monomial) {
            Entry::Occupied(mut e) => {
                *e.get_mut() += coef;
                if *e.get() == 0.0 {
                    e.remove();
                }
            }
            Entry::Vacant(e) => {
                e.insert(coef);
            }
        }
    }

    pub fn add(&self, other: &SparsePolynomial) -> SparsePolynomial {
        let mut out = self.clone();
        for (&m, &c) in &other.terms {
            out.add_term(m, c);
        }
        out
    }

    pub fn mul(&self, other: &SparsePolynomial) -> SparsePolynomial {
        let mut products = Vec::with_capacity(self.len() * other.len());
        for (&ma, &ca) in &self.terms {
            for (&mb, &cb) in &other.terms {
                products.push((ma.times(mb), ca * cb));
            }
        }
        // stable, so like terms are summed in generation order
        products.sort_by_key(|&(m, _)| m);
        let mut merged: Vec<(Monomial, f64)> = Vec::with_capacity(products.len());
        for (m, c) in products {
            match merged.last_mut() {
                Some(last) if last.0 == m => last.1 += c,
                _ => merged.push((m, c)),
            }
        }
        SparsePolynomial {
            terms: merged.into_iter().filter(|&(_, c)| c != 0.0).collect(),
        }
    }

    /// Renames every variable through a strictly increasing map.
    fn relabel(&self, f: impl Fn(usize) -> usize) -> SparsePolynomial {
        SparsePolynomial {
            terms: self
                .terms
                .iter()
                .map(|(m, &c)| {
                    let renamed = m.factors().fold(0u128, |acc, (id, exp)| {
                        let to = f(id);
                        assert!(to < MAX_VARIABLES, "variable id {to} exceeds {MAX_VARIABLES}");
                        acc | (exp as u128) << (to as u32 * EXPONENT_BITS)
                    });
                    (Monomial(renamed), c)
                })
                .collect(),
        }
    }

    pub fn terms(&self) -> impl Iterator<Item = (Vec<usize>, f64)> + '_ {
        self.terms.iter().map(|(m, &c)| (m.ids(), c))
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn degree(&self) -> usize {
        self.terms.keys().map(|m| m.degree()).max().unwrap_or(0)
    }

    pub fn coefficient(&self, monomial: &[usize]) -> f64 {
        self.terms.get(&Monomial::from_ids(monomial)).copied().unwrap_or(0.0)
    }

    /// Every variable appearing in some term.
    pub fn variables(&self) -> BTreeSet<usize> {
        self.terms.keys().flat_map(|m| m.ids()).collect()
    }

    /// True when every term contains `id`.
    pub fn every_term_contains(&self, id: usize) -> bool {
        self.terms.keys().all(|m| m.exponent(id) > 0)
    }

    pub fn evaluate(&self, values: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(m, &c)| {
                let mut acc = c;
                for (id, exp) in m.factors() {
                    for _ in 0..exp {
                        acc *= values[id];
                    }
                }
                acc
            })
            .sum()
    }
}

pub const SYMBOLIC_MAX_ROWS: usize = 8;
pub const SYMBOLIC_MAX_COLS: usize = 4;
pub const SYMBOLIC_MAX_LAYERS: usize = 4;

/// Expands `x_ik * prod_r (sum_j w^(r)_ij x_jk + 1)` for every entry of a
/// `rows x cols` stacked input map. Variable `(j, k)` has id `j * cols + k`.
/// Entries are returned row-major.
pub fn pin_symbolic(rows: usize, cols: usize, kernels: &[Matrix]) -> Result<Vec<SparsePolynomial>> {
    if rows > SYMBOLIC_MAX_ROWS || cols > SYMBOLIC_MAX_COLS || kernels.len() > SYMBOLIC_MAX_LAYERS {
        return Err(Error::OracleBudget(format!(
            "{rows}x{cols} map with {} layers exceeds {SYMBOLIC_MAX_ROWS}x{SYMBOLIC_MAX_COLS} with {SYMBOLIC_MAX_LAYERS} layers",
            kernels.len()
        )));
    }
    if let Some(w) = kernels.iter().find(|w| w.shape() != (rows, rows)) {
        return Err(Error::Shape {
            op: "pin_symbolic",
            left: w.shape(),
            right: (rows, rows),
        });
    }
    // Columns never mix, so each row is expanded once over row ids and then
    // relabelled per column.
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let mut poly = SparsePolynomial::variable(i);
        for w in kernels {
            let mut factor = SparsePolynomial::constant(1.0);
            for j in 0..rows {
                factor.add_term(Monomial::var(j), w[(i, j)]);
            }
            poly = poly.mul(&factor);
        }
        for k in 0..cols {
            out.push(poly.relabel(|j| j * cols + k));
        }
    }
    Ok(out)
}

/// Identifies one scalar parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamCoord {
    Embedding { field: usize, row: usize, col: usize },
    Kernel { layer: usize, row: usize, col: usize },
    OutWeight { col: usize },
    Bias,
}

/// Every scalar parameter, in a fixed order.
pub fn param_coords(params: &ModelParams) -> Vec<ParamCoord> {
    let mut out = Vec::new();
    for (field, e) in params.embeddings.iter().enumerate() {
        for row in 0..e.rows() {
            for col in 0..e.cols() {
                out.push(ParamCoord::Embedding { field, row, col });
            }
        }
    }
    for (layer, w) in params.pin_kernels.iter().enumerate() {
        for row in 0..w.rows() {
            for col in 0..w.cols() {
                out.push(ParamCoord::Kernel { layer, row, col });
            }
        }
    }
    for col in 0..params.out_weights.cols() {
        out.push(ParamCoord::OutWeight { col });
    }
    out.push(ParamCoord::Bias);
    out
}

pub fn param_mut(params: &mut ModelParams, coord: ParamCoord) -> &mut f64 {
    match coord {
        ParamCoord::Embedding { field, row, col } => &mut params.embeddings[field][(row, col)],
        ParamCoord::Kernel { layer, row, col } => &mut params.pin_kernels[layer][(row, col)],
        ParamCoord::OutWeight { col } => &mut params.out_weights[(0, col)],
        ParamCoord::Bias => &mut params.bias,
    }
}

pub fn gradient_at(grads: &GradientSet, coord: ParamCoord) -> f64 {
    match coord {
        ParamCoord::Embedding { field, row, col } => grads.embedding(field, row, col),
        ParamCoord::Kernel { layer, row, col } => grads.d_pin_kernels[layer][(row, col)],
        ParamCoord::OutWeight { col } => grads.d_out_weights[(0, col)],
        ParamCoord::Bias => grads.d_bias,
    }
}

/// Central difference `(f(x + h) - f(x - h)) / 2h` of a scalar function.
///
/// ```
/// let d = xdeepint::oracle::finite_diff_scalar(|x| x * x, 3.0, 1e-6);
/// assert!((d - 6.0).abs() < 1e-6);
/// ```
pub fn finite_diff_scalar(f: impl Fn(f64) -> f64, x: f64, step: f64) -> f64 {
    (f(x + step) - f(x - step)) / (2.0 * step)
}

/// Central differences of `loss` with respect to every parameter. Every
/// embedding row is reported, touched or not.
pub fn finite_diff(loss: impl Fn(&ModelParams) -> f64, params: &ModelParams, step: f64) -> GradientSet {
    let mut work = params.clone();
    let n = params.out_weights.cols();
    let mut out = GradientSet {
        d_pin_kernels: params.pin_kernels.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect(),
        d_out_weights: Matrix::zeros(1, n),
        d_bias: 0.0,
        d_embeddings: BTreeMap::new(),
    };
    for coord in param_coords(params) {
        let original = *param_mut(&mut work, coord);
        *param_mut(&mut work, coord) = original + step;
        let up = loss(&work);
        *param_mut(&mut work, coord) = original - step;
        let down = loss(&work);
        *param_mut(&mut work, coord) = original;
        let d = (up - down) / (2.0 * step);
        match coord {
            ParamCoord::Embedding { field, row, col } => {
                let width = params.embeddings[field].cols();
                out.d_embeddings.entry((field, row)).or_insert_with(|| vec![0.0; width])[col] = d;
            }
            ParamCoord::Kernel { layer, row, col } => out.d_pin_kernels[layer][(row, col)] = d,
            ParamCoord::OutWeight { col } => out.d_out_weights[(0, col)] = d,
            ParamCoord::Bias => out.d_bias = d,
        }
    }
    out
}

/// Largest `|a - b| / max(1, |a|)` over every coordinate of either set.
pub fn max_relative_error(analytic: &GradientSet, reference: &GradientSet) -> f64 {
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(1.0);
    let mut worst: f64 = rel(analytic.d_bias, reference.d_bias);
    for (x, y) in analytic.d_pin_kernels.iter().zip(&reference.d_pin_kernels) {
        for (&a, &b) in x.as_slice().iter().zip(y.as_slice()) {
            worst = worst.max(rel(a, b));
        }
    }
    for (&a, &b) in analytic.d_out_weights.as_slice().iter().zip(reference.d_out_weights.as_slice()) {
        worst = worst.max(rel(a, b));
    }
    let keys: BTreeSet<&(usize, usize)> = analytic.d_embeddings.keys().chain(reference.d_embeddings.keys()).collect();
    for &(field, row) in keys {
        let width = analytic
            .d_embeddings
            .get(&(field, row))
            .or_else(|| reference.d_embeddings.get(&(field, row)))
            .map_or(0, Vec::len);
        for col in 0..width {
            worst = worst.max(rel(analytic.embedding(field, row, col), reference.embedding(field, row, col)));
        }
    }
    if analytic.d_pin_kernels.len() != reference.d_pin_kernels.len() {
        return f64::INFINITY;
    }
    worst
}

/// `sum over positive/negative pairs of [s_p > s_n] + 0.5 [s_p == s_n]`, over `P * N`.
pub fn pairwise_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Value(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &y)| y == 1).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &y)| y != 1).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::UndefinedMetric("AUC needs both positive and negative labels".into()));
    }
    // counted in half-units so the tally stays an exact integer
    let mut twice: u64 = 0;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                twice += 2;
            } else if p == n {
                twice += 1;
            }
        }
    }
    Ok(twice as f64 / (2 * pos.len() as u64 * neg.len() as u64) as f64)
}
