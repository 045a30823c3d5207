//! Synthetic click data with known interaction structure.
//!
//! Every generator draws tokens uniformly from `1..=tokens` per field (index
//! 0 stays the unseen-token slot) and labels from a Bernoulli whose logit is
//! a fixed function of per-token latent values.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::features::{EncodedDataset, Example};
use crate::matrix::sigmoid;

fn signs(rng: &mut ChaCha8Rng, tokens: usize) -> Vec<f64> {
    // balanced +-1 so no single field carries signal on its own
    let mut v: Vec<f64> = (0..=tokens).map(|t| if t % 2 == 0 { 1.0 } else { -1.0 }).collect();
    v[0] = 0.0;
    for i in (2..=tokens).rev() {
        let j = rng.gen_range(1..=i);
        v.swap(i, j);
    }
    v
}

fn build(
    rows: usize,
    fields: usize,
    tokens: usize,
    rng: &mut ChaCha8Rng,
    mut logit: impl FnMut(&[usize]) -> f64,
) -> EncodedDataset {
    let examples = (0..rows)
        .map(|_| {
            let indices: Vec<usize> = (0..fields).map(|_| rng.gen_range(1..=tokens)).collect();
            let p = sigmoid(logit(&indices));
            let label = u8::from(rng.gen::<f64>() < p);
            Example { indices, label }
        })
        .collect();
    EncodedDataset::new(examples, vec![tokens + 1; fields]).expect("generated indices are in range")
}

/// Label depends only on the product of two fields' latent signs:
/// `logit = 3 u_0 u_1`. Remaining fields are noise.
pub fn second_order(rows: usize, fields: usize, tokens: usize, seed: u64) -> EncodedDataset {
    assert!(fields >= 2 && tokens >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u0 = signs(&mut rng, tokens);
    let u1 = signs(&mut rng, tokens);
    build(rows, fields, tokens, &mut rng, |ix| 3.0 * u0[ix[0]] * u1[ix[1]])
}

/// Each token carries two latent signs `(p, q)` and the logit is
/// `c * sum_{i<j} p_i q_j`, a cross between different latent coordinates
/// of different fields.
pub fn bit_crossed(rows: usize, fields: usize, tokens: usize, scale: f64, seed: u64) -> EncodedDataset {
    assert!(fields >= 2 && tokens >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p: Vec<Vec<f64>> = (0..fields).map(|_| signs(&mut rng, tokens)).collect();
    let q: Vec<Vec<f64>> = (0..fields).map(|_| signs(&mut rng, tokens)).collect();
    build(rows, fields, tokens, &mut rng, |ix| {
        let mut s = 0.0;
        for i in 0..ix.len() {
            for j in i + 1..ix.len() {
                s += p[i][ix[i]] * q[j][ix[j]];
            }
        }
        scale * s
    })
}

/// The first `signal_fields` fields each add an independent latent weight to
/// the logit; the remaining `noise_fields` fields are unrelated to the label.
pub fn noisy_fields(rows: usize, signal_fields: usize, noise_fields: usize, tokens: usize, seed: u64) -> EncodedDataset {
    assert!(signal_fields >= 1 && tokens >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<Vec<f64>> = (0..signal_fields).map(|_| signs(&mut rng, tokens)).collect();
    build(rows, signal_fields + noise_fields, tokens, &mut rng, |ix| {
        ix.iter().zip(&w).map(|(&t, wf)| 1.5 * wf[t]).sum()
    })
}

/// Renders a dataset as delimited text with header `f0,...,label`; token
/// `t` of field `f` is written `f<f>_<t>`.
pub fn to_text(ds: &EncodedDataset, delimiter: char) -> String {
    let mut out = String::new();
    for f in 0..ds.field_count() {
        write!(out, "f{f}{delimiter}").expect("write to string");
    }
    out.push_str("label\n");
    for ex in &ds.examples {
        for (f, t) in ex.indices.iter().enumerate() {
            write!(out, "f{f}_{t}{delimiter}").expect("write to string");
        }
        writeln!(out, "{}", ex.label).expect("write to string");
    }
    out
}

/// Schema text matching [`to_text`]: every field categorical.
pub fn schema_text(fields: usize) -> String {
    let mut out = String::new();
    for f in 0..fields {
        writeln!(out, "f{f}\tcategorical\tnone").expect("write to string");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_balance() {
        let ds = second_order(4_000, 4, 6, 1);
        assert_eq!(ds.len(), 4_000);
        assert_eq!(ds.cardinalities, vec![7; 4]);
        let pos = ds.labels().iter().filter(|&&y| y == 1).count();
        assert!((1_700..2_300).contains(&pos), "{pos}");
        assert!(ds.examples.iter().all(|e| e.indices.iter().all(|&i| (1..=6).contains(&i))));
    }

    #[test]
    fn second_order_has_no_marginal_signal() {
        let ds = second_order(40_000, 2, 4, 3);
        for field in 0..2 {
            for t in 1..=4 {
                let (n, pos) = ds
                    .examples
                    .iter()
                    .filter(|e| e.indices[field] == t)
                    .fold((0, 0), |(n, p), e| (n + 1, p + e.label as usize));
                let rate = pos as f64 / n as f64;
                assert!((rate - 0.5).abs() < 0.03, "field {field} token {t}: {rate}");
            }
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(bit_crossed(300, 3, 5, 1.0, 9), bit_crossed(300, 3, 5, 1.0, 9));
        assert_ne!(noisy_fields(300, 2, 2, 5, 9), noisy_fields(300, 2, 2, 5, 10));
    }
}
