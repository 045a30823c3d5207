//! Polynomial Interaction Network (xDeepInt) for click-through-rate prediction.
//!
//! The pieces, in pipeline order:
//!
//! * [`features`] turns a delimited text table into per-field integer indices.
//! * [`model`] embeds them, optionally splits each embedding into subspaces,
//!   and applies the stacked polynomial interaction layers.
//! * [`gradients`] computes log loss and its gradient by hand.
//! * [`optim`] holds group-lasso FTRL, FTRL-Proximal and Adam.
//! * [`train`] runs mini-batch training with periodic evaluation and
//!   early stopping; [`checkpoint`] persists the result.
//! * [`oracle`] has slow, independent reference implementations used by the
//!   tests and by [`selfcheck`].
//!
//! ```
//! use rand::SeedableRng;
//! use xdeepint::{forward, ModelConfig, ModelParams};
//!
//! let config = ModelConfig::new(3, 4, 2, 2).unwrap();
//! let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
//! let params = ModelParams::init(&config, &[10, 5, 8], &mut rng).unwrap();
//! let trace = forward(&[1, 0, 7], &params, &config).unwrap();
//! assert!(trace.prediction > 0.0 && trace.prediction < 1.0);
//! ```

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod features;
pub mod gradients;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod selfcheck;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use features::{EncodedDataset, Example, FieldKind, FieldSpec, RawTable, Schema, Transform, Vocabulary};
pub use gradients::{backward, batch_gradient, log_loss, GradientSet};
pub use matrix::Matrix;
pub use metrics::{auc, evaluate, EvalResult};
pub use model::{forward, pin_forward, Activation, ForwardTrace, ModelConfig, ModelParams};
pub use optim::{sparsity_report, OptimizerConfig, OptimizerKind, OptimizerState, SparsityReport};
pub use train::{train, TrainConfig, TrainOutcome};
