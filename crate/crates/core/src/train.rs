//! Mini-batch training with periodic validation and early stopping.

use std::io::{self, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::features::{EncodedDataset, Example};
use crate::gradients::batch_gradient;
use crate::metrics::{evaluate, EvalResult};
use crate::model::{ModelConfig, ModelParams};
use crate::optim::{OptimizerConfig, OptimizerState};

pub const DEFAULT_BATCH_SIZE: usize = 4096;
pub const DEFAULT_EVAL_EVERY: u64 = 2000;
pub const DEFAULT_PATIENCE: usize = 3;
pub const DEFAULT_MAX_STEPS: u64 = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub eval_every_steps: u64,
    /// Evaluations without a validation improvement before training halts.
    pub patience: usize,
    pub max_steps: u64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        TrainConfig {
            model,
            optimizer: OptimizerConfig::default(),
            batch_size: DEFAULT_BATCH_SIZE,
            eval_every_steps: DEFAULT_EVAL_EVERY,
            patience: DEFAULT_PATIENCE,
            max_steps: DEFAULT_MAX_STEPS,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.eval_every_steps == 0 {
            return Err(Error::Config("eval_every_steps must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        let f = &self.optimizer.ftrl;
        if !(f.alpha > 0.0 && f.beta >= 0.0 && f.lambda1 >= 0.0 && f.lambda2 >= 0.0) {
            return Err(Error::Config(format!("bad FTRL hyper-parameters {f:?}")));
        }
        let a = &self.optimizer.adam;
        if !(a.learning_rate > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.epsilon > 0.0) {
            return Err(Error::Config(format!("bad Adam hyper-parameters {a:?}")));
        }
        Ok(())
    }
}

/// One line of the metric history.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub split: &'static str,
    pub auc: f64,
    pub logloss: f64,
}

pub const METRICS_HEADER: &str = "step,split,auc,logloss";

pub fn write_metrics_csv(rows: &[MetricRow], mut out: impl Write) -> io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(out, "{},{},{:.10},{:.10}", r.step, r.split, r.auc, r.logloss)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// State at the best validation evaluation.
    pub best: Checkpoint,
    /// State when training stopped.
    pub last: Checkpoint,
    pub history: Vec<MetricRow>,
    pub stopped_early: bool,
}

/// Permutation of `0..n` for an epoch: the seed picks the generator, the
/// epoch picks its stream.
pub fn epoch_permutation(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Fresh parameters for a run; drawn from a stream no epoch uses.
pub fn init_params(config: &TrainConfig, cardinalities: &[usize]) -> Result<ModelParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(u64::MAX);
    ModelParams::init(&config.model, cardinalities, &mut rng)
}

/// Trains from a fresh initialization.
pub fn train(train_ds: &EncodedDataset, valid_ds: &EncodedDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    check_datasets(train_ds, valid_ds, config)?;
    let params = init_params(config, &train_ds.cardinalities)?;
    let optimizer = OptimizerState::new(config.optimizer.kind, &params);
    let start = Checkpoint::new(config.model.clone(), params, optimizer);
    run(start, train_ds, valid_ds, config, true)
}

/// Continues a run from `checkpoint`; with the same data and config this
/// reproduces the uninterrupted run.
pub fn resume(
    checkpoint: Checkpoint,
    train_ds: &EncodedDataset,
    valid_ds: &EncodedDataset,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_datasets(train_ds, valid_ds, config)?;
    if checkpoint.model != config.model {
        return Err(Error::Config("checkpoint model configuration differs from the run configuration".into()));
    }
    if checkpoint.optimizer.kind() != config.optimizer.kind {
        return Err(Error::Config("checkpoint optimizer differs from the run configuration".into()));
    }
    if checkpoint.params.cardinalities() != train_ds.cardinalities {
        return Err(Error::Config("checkpoint vocabulary sizes differ from the data".into()));
    }
    run(checkpoint, train_ds, valid_ds, config, false)
}

fn check_datasets(train_ds: &EncodedDataset, valid_ds: &EncodedDataset, config: &TrainConfig) -> Result<()> {
    if train_ds.is_empty() || valid_ds.is_empty() {
        return Err(Error::Value("training and validation sets must be non-empty".into()));
    }
    if train_ds.cardinalities != valid_ds.cardinalities {
        return Err(Error::Schema("training and validation sets use different vocabularies".into()));
    }
    if train_ds.field_count() != config.model.field_count {
        return Err(Error::Config(format!(
            "model expects {} fields, data has {}",
            config.model.field_count,
            train_ds.field_count()
        )));
    }
    Ok(())
}

fn improves(r: &EvalResult, best_auc: f64, best_logloss: f64) -> bool {
    r.auc > best_auc || (r.auc == best_auc && r.logloss < best_logloss)
}

fn run(
    mut state: Checkpoint,
    train_ds: &EncodedDataset,
    valid_ds: &EncodedDataset,
    config: &TrainConfig,
    evaluate_start: bool,
) -> Result<TrainOutcome> {
    let n = train_ds.len();
    let bs = config.batch_size;
    let batches_per_epoch = n.div_ceil(bs) as u64;
    let mut history = Vec::new();
    let mut best = state.clone();
    let mut stopped_early = false;

    let record = |state: &mut Checkpoint, best: &mut Checkpoint, history: &mut Vec<MetricRow>| -> Result<bool> {
        let r = evaluate(&state.params, &state.model, valid_ds)?;
        history.push(MetricRow {
            step: state.step,
            split: "valid",
            auc: r.auc,
            logloss: r.logloss,
        });
        if improves(&r, state.best_auc, state.best_logloss) {
            state.best_auc = r.auc;
            state.best_logloss = r.logloss;
            state.evals_since_improvement = 0;
            *best = state.clone();
        } else {
            state.evals_since_improvement += 1;
        }
        Ok(state.evals_since_improvement as usize >= config.patience)
    };

    if evaluate_start && record(&mut state, &mut best, &mut history)? {
        stopped_early = true;
    }

    let mut epoch_cache: Option<(u64, Vec<usize>)> = None;
    let mut batch: Vec<Example> = Vec::with_capacity(bs.min(n));
    while !stopped_early && state.step < config.max_steps {
        let epoch = state.step / batches_per_epoch;
        let b = (state.step % batches_per_epoch) as usize;
        if epoch_cache.as_ref().map(|c| c.0) != Some(epoch) {
            epoch_cache = Some((epoch, epoch_permutation(config.seed, epoch, n)));
        }
        let order = &epoch_cache.as_ref().expect("permutation cached").1;
        batch.clear();
        batch.extend(order[b * bs..((b + 1) * bs).min(n)].iter().map(|&i| train_ds.examples[i].clone()));

        let (loss, grads) = batch_gradient(&batch, &state.params, &state.model)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Divergence {
                step: state.step,
                epoch,
                batch: b,
                loss,
            });
        }
        state.optimizer.step(&config.optimizer, &mut state.params, &grads)?;
        state.step += 1;

        if state.step % config.eval_every_steps == 0 || state.step == config.max_steps {
            stopped_early = record(&mut state, &mut best, &mut history)?;
        }
    }

    Ok(TrainOutcome {
        best,
        last: state,
        history,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::OptimizerKind;
    use crate::synth;

    fn small() -> (EncodedDataset, EncodedDataset, TrainConfig) {
        let ds = synth::second_order(1_200, 4, 6, 11);
        let (tr, va, _) = ds.split((0.7, 0.2, 0.1), 1).unwrap();
        let mut cfg = TrainConfig::new(ModelConfig::new(4, 4, 2, 2).unwrap());
        cfg.batch_size = 64;
        cfg.eval_every_steps = 10;
        cfg.max_steps = 60;
        cfg.patience = 100;
        cfg.optimizer.ftrl.alpha = 0.1;
        (tr, va, cfg)
    }

    #[test]
    fn zero_steps_returns_initial_model() {
        let (tr, va, mut cfg) = small();
        cfg.max_steps = 0;
        let out = train(&tr, &va, &cfg).unwrap();
        assert_eq!(out.best.step, 0);
        assert_eq!(out.history.len(), 1);
        assert_eq!(out.history[0].auc, 0.5);
        assert_eq!(out.best.params, init_params(&cfg, &tr.cardinalities).unwrap());
    }

    #[test]
    fn runs_are_deterministic() {
        let (tr, va, cfg) = small();
        let a = train(&tr, &va, &cfg).unwrap();
        let b = train(&tr, &va, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.last.to_bytes(), b.last.to_bytes());
        assert_eq!(a.history.len(), 7);
        assert_ne!(a.last.params, init_params(&cfg, &tr.cardinalities).unwrap());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (tr, va, mut cfg) = small();
        cfg.optimizer.kind = OptimizerKind::Adam;
        cfg.optimizer.adam.learning_rate = 0.01;
        let full = train(&tr, &va, &cfg).unwrap();
        let mut half = cfg.clone();
        half.max_steps = 25;
        let first = train(&tr, &va, &half).unwrap();
        let bytes = first.last.to_bytes();
        let restored = Checkpoint::from_bytes(&bytes).unwrap();
        let rest = resume(restored, &tr, &va, &cfg).unwrap();
        assert_eq!(rest.last.to_bytes(), full.last.to_bytes());
    }

    #[test]
    fn best_is_never_worse_than_history() {
        let (tr, va, mut cfg) = small();
        cfg.patience = 2;
        cfg.max_steps = 400;
        let out = train(&tr, &va, &cfg).unwrap();
        let best_seen = out.history.iter().map(|r| r.auc).fold(f64::MIN, f64::max);
        assert_eq!(out.best.best_auc, best_seen);
        let check = evaluate(&out.best.params, &out.best.model, &va).unwrap();
        assert_eq!(check.auc, best_seen);
    }

    #[test]
    fn divergence_reports_step_and_batch() {
        let (tr, va, mut cfg) = small();
        cfg.optimizer.kind = OptimizerKind::Adam;
        let mut start = Checkpoint::new(
            cfg.model.clone(),
            init_params(&cfg, &tr.cardinalities).unwrap(),
            OptimizerState::new(OptimizerKind::Adam, &init_params(&cfg, &tr.cardinalities).unwrap()),
        );
        for e in start.params.embeddings.iter_mut() {
            e.as_mut_slice().iter_mut().for_each(|v| *v = f64::NAN);
        }
        match resume(start, &tr, &va, &cfg) {
            Err(Error::Divergence { step, batch, epoch, .. }) => assert_eq!((step, batch, epoch), (0, 0, 0)),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn metrics_csv_format() {
        let mut buf = Vec::new();
        let rows = [MetricRow {
            step: 3,
            split: "valid",
            auc: 0.75,
            logloss: 0.5,
        }];
        write_metrics_csv(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,split,auc,logloss\n3,valid,0.7500000000,0.5000000000\n");
    }

    #[test]
    fn rejects_bad_configs() {
        let (tr, va, mut cfg) = small();
        cfg.batch_size = 0;
        assert!(matches!(train(&tr, &va, &cfg), Err(Error::Config(_))));
        let (tr, va, mut cfg) = small();
        cfg.model.field_count = 3;
        assert!(train(&tr, &va, &cfg).is_err());
    }
}
