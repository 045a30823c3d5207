//! AUC and log loss over a dataset.

use std::cmp::Ordering;
use std::fmt;

use crate::error::{Error, Result};
use crate::features::EncodedDataset;
use crate::gradients::mean_log_loss;
use crate::model::{predict_dataset, ModelConfig, ModelParams};

/// Area under the ROC curve via average ranks; tied scores count one half.
///
/// The sum of positive ranks is kept as an exact integer (in half units), so
/// the result is bit-identical to counting every positive/negative pair.
///
/// ```
/// use xdeepint::metrics::auc;
/// assert_eq!(auc(&[0.1, 0.9], &[0, 1]).unwrap(), 1.0);
/// assert_eq!(auc(&[0.4, 0.4, 0.4], &[1, 0, 1]).unwrap(), 0.5);
/// ```
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Value(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Value(format!("score {i} is NaN")));
    }
    if let Some(i) = labels.iter().position(|&y| y > 1) {
        return Err(Error::Value(format!("label {i} is {}, expected 0 or 1", labels[i])));
    }
    let positives = labels.iter().filter(|&&y| y == 1).count() as u64;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric("AUC needs both positive and negative labels".into()));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));

    // Twice the rank sum of positives; a tie group occupying ranks
    // start+1..=end has average rank (start + end + 1) / 2.
    let mut twice_rank_sum: u64 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let pos_in_group = order[start..end].iter().filter(|&&i| labels[i] == 1).count() as u64;
        twice_rank_sum += pos_in_group * (start as u64 + end as u64 + 1);
        start = end;
    }
    let twice_u = twice_rank_sum - positives * (positives + 1);
    Ok(twice_u as f64 / (2 * positives * negatives) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub auc: f64,
    pub logloss: f64,
    pub n_examples: usize,
    pub n_positive: usize,
}

impl fmt::Display for EvalResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "auc={:.6} logloss={:.6} n={}", self.auc, self.logloss, self.n_examples)
    }
}

/// Scores and labels to metrics.
pub fn eval_predictions(predictions: &[f64], labels: &[u8]) -> Result<EvalResult> {
    if labels.is_empty() {
        return Err(Error::Value("cannot evaluate an empty dataset".into()));
    }
    let auc = auc(predictions, labels)?;
    Ok(EvalResult {
        auc,
        logloss: mean_log_loss(labels, predictions),
        n_examples: labels.len(),
        n_positive: labels.iter().filter(|&&y| y == 1).count(),
    })
}

/// One deterministic pass over `ds`.
pub fn evaluate(params: &ModelParams, config: &ModelConfig, ds: &EncodedDataset) -> Result<EvalResult> {
    if ds.is_empty() {
        return Err(Error::Value("cannot evaluate an empty dataset".into()));
    }
    let predictions = predict_dataset(ds, params, config)?;
    eval_predictions(&predictions, &ds.labels())
}
