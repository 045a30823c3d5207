//! Acceptance checks, one line per criterion:
//!
//! ```text
//! cargo test -p xdeepint-cli --test acceptance -- --nocapture
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xdeepint::features::Example;
use xdeepint::gradients::{backward, log_loss, GradientSet};
use xdeepint::matrix::Matrix;
use xdeepint::model::{forward, pin_forward, ModelConfig, ModelParams};
use xdeepint::optim::{ftrl_apply, group_ftrl_apply, FtrlConfig, FtrlState, GroupFtrlState, OptimizerKind};
use xdeepint::selfcheck::{auc_suite, gradient_suite, polynomial_suite};
use xdeepint::train::{epoch_permutation, init_params};
use xdeepint::{evaluate, sparsity_report, synth, train, EncodedDataset, OptimizerState, TrainConfig};

/// Frozen from the first paired run: L=2 reached 0.9571, L=0 0.5147.
const LAYER_MARGIN: f64 = 0.40;
/// Frozen from the first paired run: h=4 reached 0.8640, h=1 0.8442.
const SUBSPACE_MARGIN: f64 = 0.01;
/// First run put every zeroed row in a noise field.
const NOISE_SHARE: f64 = 0.80;
/// Time ratio per doubling of F, as a power of two.
const GROWTH_EXPONENT: f64 = 2.5;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn timed(f: impl FnOnce() -> Outcome, budget: Duration) -> Outcome {
    let t = Instant::now();
    let mut o = f();
    let took = t.elapsed();
    o.detail = format!("{} [{:.1}s, budget {}s]", o.detail, took.as_secs_f64(), budget.as_secs());
    o.passed &= took < budget;
    o
}

fn polynomial_equivalence() -> Outcome {
    let r = polynomial_suite(pin_forward, 100, 0xacc1);
    outcome(r.passed && r.cases == 40_000, r.to_string())
}

fn gradient_correctness() -> Outcome {
    let r = gradient_suite(50, 0xacc2);
    outcome(r.passed, r.to_string())
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// Logistic regression on the concatenated embeddings, one weight per
/// field and subspace block: returns `(logit, probability)`.
fn lr_forward(indices: &[usize], params: &ModelParams, h: usize) -> (f64, f64) {
    let f = indices.len();
    let width = params.embeddings[0].cols() / h;
    let mut logit = 0.0;
    for c in 0..width {
        let mut col = 0.0;
        for j in 0..h {
            for (field, &idx) in indices.iter().enumerate() {
                col += params.out_weights[(0, j * f + field)] * params.embeddings[field][(idx, j * width + c)];
            }
        }
        logit += col;
    }
    logit += params.bias * width as f64;
    (logit, sigmoid(logit).clamp(1e-12, 1.0 - 1e-12))
}

fn lr_gradient(indices: &[usize], label: u8, params: &ModelParams, h: usize) -> GradientSet {
    let f = indices.len();
    let width = params.embeddings[0].cols() / h;
    let delta = lr_forward(indices, params, h).1 - f64::from(label);
    let d_out = Matrix::from_fn(1, f * h, |_, r| {
        let (j, field) = (r / f, r % f);
        let row = params.embeddings[field].row(indices[field]);
        delta * row[j * width..(j + 1) * width].iter().fold(0.0, |a, &v| a + v)
    });
    let d_embeddings = indices
        .iter()
        .enumerate()
        .map(|(field, &idx)| {
            let g = (0..width * h)
                .map(|k| delta * params.out_weights[(0, (k / width) * f + field)])
                .collect();
            ((field, idx), g)
        })
        .collect();
    GradientSet {
        d_pin_kernels: Vec::new(),
        d_out_weights: d_out,
        d_bias: delta * width as f64,
        d_embeddings,
    }
}

fn lr_batch_gradient(batch: &[Example], params: &ModelParams, h: usize) -> GradientSet {
    let mut d_out = Matrix::zeros(1, params.out_weights.cols());
    let mut d_bias = 0.0;
    let mut d_emb: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for ex in batch {
        let g = lr_gradient(&ex.indices, ex.label, params, h);
        for (a, b) in d_out.as_mut_slice().iter_mut().zip(g.d_out_weights.as_slice()) {
            *a += b;
        }
        d_bias += g.d_bias;
        for (key, row) in g.d_embeddings {
            let acc = d_emb.entry(key).or_insert_with(|| vec![0.0; row.len()]);
            acc.iter_mut().zip(&row).for_each(|(a, b)| *a += b);
        }
    }
    let n = batch.len() as f64;
    d_out.as_mut_slice().iter_mut().for_each(|v| *v /= n);
    d_emb.values_mut().flatten().for_each(|v| *v /= n);
    GradientSet {
        d_pin_kernels: Vec::new(),
        d_out_weights: d_out,
        d_bias: d_bias / n,
        d_embeddings: d_emb,
    }
}

fn max_param_diff(a: &ModelParams, b: &ModelParams) -> f64 {
    let mut worst = (a.bias - b.bias).abs();
    let pairs = a.embeddings.iter().zip(&b.embeddings).chain([(&a.out_weights, &b.out_weights)]);
    for (x, y) in pairs {
        for (p, q) in x.as_slice().iter().zip(y.as_slice()) {
            worst = worst.max((p - q).abs());
        }
    }
    worst
}

/// Runs the directly coded model through the same schedule as `train`.
fn lr_train(ds: &EncodedDataset, cfg: &TrainConfig) -> ModelParams {
    let mut params = init_params(cfg, &ds.cardinalities).unwrap();
    let mut opt = OptimizerState::new(cfg.optimizer.kind, &params);
    let n = ds.len();
    let per_epoch = n.div_ceil(cfg.batch_size) as u64;
    for step in 0..cfg.max_steps {
        let (epoch, b) = (step / per_epoch, (step % per_epoch) as usize);
        let order = epoch_permutation(cfg.seed, epoch, n);
        let batch: Vec<Example> = order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(n)]
            .iter()
            .map(|&i| ds.examples[i].clone())
            .collect();
        let g = lr_batch_gradient(&batch, &params, cfg.model.subspaces);
        opt.step(&cfg.optimizer, &mut params, &g).unwrap();
    }
    params
}

fn logistic_degeneracy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xacc3);
    let mut notes = Vec::new();
    for h in [1, 2] {
        let config = ModelConfig::new(4, 4, 0, h).unwrap();
        let mut params = ModelParams::init(&config, &[5, 3, 7, 2], &mut rng).unwrap();
        params.out_weights = Matrix::from_fn(1, 4 * h, |_, _| rng.gen_range(-1.0..1.0));
        params.bias = rng.gen_range(-0.5..0.5);
        let mut worst_grad: f64 = 0.0;
        for _ in 0..200 {
            let ix: Vec<usize> = params.embeddings.iter().map(|e| rng.gen_range(0..e.rows())).collect();
            let y = rng.gen_range(0..=1u8);
            let trace = forward(&ix, &params, &config).unwrap();
            let (logit, p) = lr_forward(&ix, &params, h);
            if trace.logit.to_bits() != logit.to_bits() || trace.prediction.to_bits() != p.to_bits() {
                return outcome(false, format!("h={h}: forward differs ({} vs {logit})", trace.logit));
            }
            if log_loss(y, trace.prediction).to_bits() != log_loss(y, p).to_bits() {
                return outcome(false, format!("h={h}: loss differs"));
            }
            let ours = backward(&trace, y, &params, &config).unwrap();
            let theirs = lr_gradient(&ix, y, &params, h);
            worst_grad = worst_grad.max((ours.d_bias - theirs.d_bias).abs());
            for (a, b) in ours.d_out_weights.as_slice().iter().zip(theirs.d_out_weights.as_slice()) {
                worst_grad = worst_grad.max((a - b).abs());
            }
            for (key, g) in &theirs.d_embeddings {
                for (a, b) in ours.d_embeddings[key].iter().zip(g) {
                    worst_grad = worst_grad.max((a - b).abs());
                }
            }
        }
        if worst_grad > 1e-12 {
            return outcome(false, format!("h={h}: gradient differs by {worst_grad:.3e}"));
        }
        notes.push(format!("h={h} grad diff {worst_grad:.1e}"));
    }

    let ds = synth::second_order(3_000, 4, 6, 5);
    let (tr, va, _) = ds.split((0.7, 0.2, 0.1), 5).unwrap();
    for (kind, h) in [(OptimizerKind::Adam, 2), (OptimizerKind::GftrlFtrl, 1)] {
        let mut cfg = TrainConfig::new(ModelConfig::new(4, 4, 0, h).unwrap());
        cfg.optimizer.kind = kind;
        cfg.optimizer.adam.learning_rate = 0.01;
        cfg.optimizer.ftrl.alpha = 0.1;
        cfg.batch_size = 128;
        cfg.eval_every_steps = 1_000;
        cfg.max_steps = 150;
        cfg.patience = 10;
        let ours = train(&tr, &va, &cfg).unwrap().last.params;
        let theirs = lr_train(&tr, &cfg);
        let diff = max_param_diff(&ours, &theirs);
        let auc_ours = evaluate(&ours, &cfg.model, &va).unwrap().auc;
        let auc_theirs = evaluate(&theirs, &cfg.model, &va).unwrap().auc;
        if diff > 1e-12 || (auc_ours - auc_theirs).abs() > 1e-12 {
            return outcome(false, format!("{kind}: trajectory differs by {diff:.3e}"));
        }
        notes.push(format!("{kind} trajectory diff {diff:.1e}"));
    }
    outcome(true, format!("forward and loss bitwise; {}", notes.join(", ")))
}

fn best_auc(ds: &EncodedDataset, layers: usize, h: usize, configure: impl Fn(&mut TrainConfig)) -> (f64, xdeepint::TrainOutcome) {
    let (tr, va, _) = ds.split((0.7, 0.1, 0.2), 1).unwrap();
    let mut cfg = TrainConfig::new(ModelConfig::new(ds.field_count(), 4, layers, h).unwrap());
    cfg.eval_every_steps = 200;
    cfg.max_steps = 2_000;
    cfg.patience = 100;
    configure(&mut cfg);
    let out = train(&tr, &va, &cfg).unwrap();
    (out.best.best_auc, out)
}

fn adam(cfg: &mut TrainConfig) {
    cfg.batch_size = 256;
    cfg.optimizer.kind = OptimizerKind::Adam;
    cfg.optimizer.adam.learning_rate = 0.01;
}

fn interaction_recovery() -> Outcome {
    let ds = synth::second_order(50_000, 4, 8, 1);
    let (deep, _) = best_auc(&ds, 2, 1, adam);
    let (flat, _) = best_auc(&ds, 0, 1, adam);
    let margin = deep - flat;
    outcome(
        margin >= LAYER_MARGIN.max(0.05),
        format!("L=2 auc {deep:.4}, L=0 auc {flat:.4}, margin {margin:.4} (need >= {LAYER_MARGIN})"),
    )
}

fn subspace_crossing() -> Outcome {
    let ds = synth::bit_crossed(50_000, 6, 8, 0.6, 2);
    let (four, _) = best_auc(&ds, 1, 4, adam);
    let (one, _) = best_auc(&ds, 1, 1, adam);
    let margin = four - one;
    outcome(
        margin >= SUBSPACE_MARGIN && four > one,
        format!("h=4 auc {four:.4}, h=1 auc {one:.4}, margin {margin:.4} (need >= {SUBSPACE_MARGIN})"),
    )
}

fn sparsity_behavior() -> Outcome {
    let ds = synth::noisy_fields(50_000, 3, 3, 8, 3);
    let (_, ftrl) = best_auc(&ds, 1, 1, |cfg| {
        cfg.batch_size = 512;
        cfg.optimizer.ftrl.lambda1 = 0.001;
    });
    let r = sparsity_report(&ftrl.last.params);
    let zeroed: usize = r.zero_rows_per_field.iter().sum();
    let in_noise: usize = r.zero_rows_per_field[3..].iter().sum();
    let share = if zeroed == 0 { 0.0 } else { in_noise as f64 / zeroed as f64 };
    let (_, dense) = best_auc(&ds, 1, 1, adam);
    let dense_ratio = sparsity_report(&dense.last.params).feature_sparse_ratio;
    outcome(
        r.feature_sparse_ratio > 0.0 && share >= NOISE_SHARE && dense_ratio == 0.0,
        format!(
            "ftrl ratio {:.4}, zero rows per field {:?}, noise share {share:.2}; adam ratio {dense_ratio}",
            r.feature_sparse_ratio, r.zero_rows_per_field
        ),
    )
}

fn optimizer_hand_examples() -> Outcome {
    let unit = FtrlConfig {
        alpha: 1.0,
        beta: 1.0,
        lambda1: 0.0,
        lambda2: 0.0,
    };
    let mut checks: Vec<(&str, f64, f64)> = Vec::new();

    // g = 3 then 4: n = 9, 25; sigma = 3, 2; z = 3, 3 + 4 + 2 * 0.75
    let mut s = FtrlState::new(1);
    let mut w = [0.0];
    ftrl_apply(&mut s, &unit, &mut w, &[3.0]).unwrap();
    checks.push(("ftrl step 1", w[0], -0.75));
    ftrl_apply(&mut s, &unit, &mut w, &[4.0]).unwrap();
    checks.push(("ftrl step 2 z", s.z[0], 8.5));
    checks.push(("ftrl step 2 n", s.n[0], 25.0));
    checks.push(("ftrl step 2", w[0], -8.5 / 6.0));

    let l1l2 = FtrlConfig { lambda1: 1.0, lambda2: 0.5, ..unit };
    let mut s = FtrlState::new(1);
    let mut w = [0.0];
    ftrl_apply(&mut s, &l1l2, &mut w, &[3.0]).unwrap();
    checks.push(("ftrl l1 l2", w[0], -2.0 / 4.5));

    let strong = FtrlConfig { lambda1: 5.0, ..unit };
    let mut s = FtrlState::new(1);
    let mut w = [0.4];
    ftrl_apply(&mut s, &strong, &mut w, &[3.0]).unwrap();
    // z = 3 - 3 * 0.4 = 1.8, inside the dead zone
    checks.push(("ftrl thresholded", w[0], 0.0));

    // row gradient (3, 4): z = (3, 4), |z| = 5, threshold sqrt(2)
    let group = FtrlConfig { lambda1: 1.0, ..unit };
    let mut gs = GroupFtrlState::new(1, 2);
    let mut table = Matrix::zeros(1, 2);
    group_ftrl_apply(&mut gs, &group, &mut table, [(0, &[3.0, 4.0][..])]).unwrap();
    let t = 2f64.sqrt();
    checks.push(("gftrl row 0", table[(0, 0)], -(3.0 - t * (3.0 / 5.0)) / 4.0));
    checks.push(("gftrl row 1", table[(0, 1)], -(4.0 - t * (4.0 / 5.0)) / 5.0));

    let group = FtrlConfig { lambda1: 4.0, ..unit };
    let mut gs = GroupFtrlState::new(1, 2);
    let mut table = Matrix::filled(1, 2, 0.25);
    group_ftrl_apply(&mut gs, &group, &mut table, [(0, &[3.0, 4.0][..])]).unwrap();
    checks.push(("gftrl zeroed 0", table[(0, 0)], 0.0));
    checks.push(("gftrl zeroed 1", table[(0, 1)], 0.0));

    for (name, got, want) in &checks {
        if got.to_bits() != want.to_bits() {
            return outcome(false, format!("{name}: got {got:e}, expected {want:e}"));
        }
    }
    outcome(true, format!("{} values bitwise", checks.len()))
}

fn auc_exactness() -> Outcome {
    let r = auc_suite(1_000, 200, 0xacc8);
    outcome(r.passed, r.to_string())
}

fn train_twice() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth::bit_crossed(4_000, 4, 6, 1.0, 9);
    fs::write(dir.path().join("data.csv"), synth::to_text(&ds, ',')).unwrap();
    fs::write(dir.path().join("schema.tsv"), synth::schema_text(4)).unwrap();
    fs::write(
        dir.path().join("run.cfg"),
        "data.schema = schema.tsv\ndata.path = data.csv\ndata.min_count = 1\n\
         model.embedding_dim = 4\nmodel.pin_layers = 2\nmodel.subspaces = 2\n\
         train.batch_size = 128\ntrain.eval_every_steps = 20\ntrain.max_steps = 100\ntrain.seed = 7\n",
    )
    .unwrap();
    let run = |out: &str| {
        Command::new(env!("CARGO_BIN_EXE_xdeepint"))
            .args(["train", "--config", "run.cfg", &format!("out.dir={out}")])
            .current_dir(dir.path())
            .output()
            .unwrap()
    };
    for out in ["a", "b"] {
        let o = run(out);
        if !o.status.success() {
            return outcome(false, String::from_utf8_lossy(&o.stderr).into_owned());
        }
    }
    let read = |p: &Path| fs::read(p).unwrap();
    for f in ["best.ckpt", "last.ckpt", "metrics.csv"] {
        if read(&dir.path().join("a").join(f)) != read(&dir.path().join("b").join(f)) {
            return outcome(false, format!("{f} differs between runs"));
        }
    }
    outcome(true, "best.ckpt, last.ckpt and metrics.csv byte-identical")
}

/// Seconds per forward pass, best of several timed rounds.
fn forward_seconds(fields: usize, rng: &mut ChaCha8Rng) -> f64 {
    let config = ModelConfig::new(fields, 8, 3, 1).unwrap();
    let mut params = ModelParams::init(&config, &vec![50; fields], rng).unwrap();
    for w in &mut params.pin_kernels {
        *w = Matrix::from_fn(fields, fields, |_, _| rng.gen_range(-0.1..0.1));
    }
    let inputs: Vec<Vec<usize>> = (0..500).map(|_| (0..fields).map(|_| rng.gen_range(0..50)).collect()).collect();
    let mut best = f64::INFINITY;
    for _ in 0..7 {
        let t = Instant::now();
        let mut sink = 0.0;
        for ix in &inputs {
            sink += forward(ix, &params, &config).unwrap().prediction;
        }
        assert!(sink.is_finite());
        best = best.min(t.elapsed().as_secs_f64() / inputs.len() as f64);
    }
    best
}

fn complexity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xacca);
    let times: Vec<f64> = [8, 16, 32].iter().map(|&f| forward_seconds(f, &mut rng)).collect();
    let limit = 2f64.powf(GROWTH_EXPONENT);
    let ratios = [times[1] / times[0], times[2] / times[1]];
    outcome(
        ratios.iter().all(|&r| r <= limit),
        format!(
            "per-pass {:.2}us / {:.2}us / {:.2}us at F=8/16/32; ratios {:.2}, {:.2} (limit {limit:.2})",
            times[0] * 1e6,
            times[1] * 1e6,
            times[2] * 1e6,
            ratios[0],
            ratios[1]
        ),
    )
}

#[test]
fn acceptance() {
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("polynomial oracle equivalence", Box::new(|| timed(polynomial_equivalence, Duration::from_secs(30)))),
        ("gradient correctness", Box::new(|| timed(gradient_correctness, Duration::from_secs(60)))),
        ("logistic-regression degeneracy", Box::new(logistic_degeneracy)),
        ("synthetic interaction recovery", Box::new(|| timed(interaction_recovery, Duration::from_secs(300)))),
        ("subspace crossing", Box::new(subspace_crossing)),
        ("sparsity behavior", Box::new(sparsity_behavior)),
        ("optimizer hand examples", Box::new(optimizer_hand_examples)),
        ("auc exactness", Box::new(auc_exactness)),
        ("determinism", Box::new(train_twice)),
        ("complexity sanity", Box::new(complexity)),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        let status = if o.passed { "PASS" } else { "FAIL" };
        println!("acceptance {:>2} {status} {name}: {}", i + 1, o.detail);
        if !o.passed {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
