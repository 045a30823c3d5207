//! Binary checkpoint files.
//!
//! Layout, little-endian throughout, counts as `u64`, reals as `f64`,
//! matrices row-major:
//!
//! ```text
//! "XDPI" u32 version
//! config      F K L h activation
//! embeddings  F x (rows cols data)
//! kernels     L x (rows cols data)
//! head        cols data bias
//! optimizer   kind, then per block accumulators
//! metadata    vocab_hash step best_auc best_logloss evals_since_improvement
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{Activation, ModelConfig, ModelParams};
use crate::optim::{AdamState, FtrlState, GroupFtrlState, OptimizerKind, OptimizerState};

pub const MAGIC: &[u8; 4] = b"XDPI";
pub const VERSION: u32 = 1;

/// Everything needed to evaluate a model or continue training it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    /// Hash of the vocabulary the model was trained against; 0 if unknown.
    pub vocab_hash: u64,
    pub step: u64,
    pub best_auc: f64,
    pub best_logloss: f64,
    pub evals_since_improvement: u64,
}

/// Result of loading a checkpoint against a known vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VocabCheck {
    Match,
    Mismatch { expected: u64, found: u64 },
}

impl Checkpoint {
    pub fn new(model: ModelConfig, params: ModelParams, optimizer: OptimizerState) -> Self {
        Checkpoint {
            model,
            params,
            optimizer,
            vocab_hash: 0,
            step: 0,
            best_auc: f64::NEG_INFINITY,
            best_logloss: f64::INFINITY,
            evals_since_improvement: 0,
        }
    }

    pub fn check_vocab(&self, vocab_hash: u64) -> VocabCheck {
        if self.vocab_hash == vocab_hash {
            VocabCheck::Match
        } else {
            VocabCheck::Mismatch {
                expected: vocab_hash,
                found: self.vocab_hash,
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.0.extend_from_slice(&VERSION.to_le_bytes());

        let m = &self.model;
        for v in [m.field_count, m.embedding_dim, m.pin_layers, m.subspaces] {
            w.count(v);
        }
        w.u64(m.activation.code());

        let p = &self.params;
        for e in &p.embeddings {
            w.matrix(e);
        }
        for k in &p.pin_kernels {
            w.matrix(k);
        }
        w.count(p.out_weights.cols());
        w.reals(p.out_weights.as_slice());
        w.f64(p.bias);

        match &self.optimizer {
            OptimizerState::GftrlFtrl {
                embeddings,
                kernels,
                out_weights,
                bias,
            } => {
                w.u64(0);
                for g in embeddings {
                    w.count(g.rows());
                    w.count(g.width);
                    w.reals(&g.z);
                    w.reals(&g.n);
                }
                for s in kernels.iter().chain([out_weights, bias]) {
                    w.count(s.len());
                    w.reals(&s.z);
                    w.reals(&s.n);
                }
            }
            OptimizerState::Adam {
                embeddings,
                kernels,
                out_weights,
                bias,
            } => {
                w.u64(1);
                for s in embeddings.iter().chain(kernels).chain([out_weights, bias]) {
                    w.u64(s.t);
                    w.count(s.m.len());
                    w.reals(&s.m);
                    w.reals(&s.v);
                }
            }
        }

        w.u64(self.vocab_hash);
        w.u64(self.step);
        w.f64(self.best_auc);
        w.f64(self.best_logloss);
        w.u64(self.evals_since_improvement);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.error_at(0, "bad magic, not a checkpoint file"));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(r.error_at(4, &format!("unsupported version {version}")));
        }

        let cfg_at = r.pos;
        let (f, k, l, h) = (r.count()?, r.count()?, r.count()?, r.count()?);
        let act_at = r.pos;
        let activation = Activation::from_code(r.u64()?).ok_or_else(|| r.error_at(act_at, "unknown activation code"))?;
        let model = ModelConfig::new(f, k, l, h)
            .map(|c| c.with_activation(activation))
            .map_err(|e| r.error_at(cfg_at, &e.to_string()))?;

        let params_at = r.pos;
        let embeddings = (0..f).map(|_| r.matrix()).collect::<Result<Vec<_>>>()?;
        let pin_kernels = (0..l).map(|_| r.matrix()).collect::<Result<Vec<_>>>()?;
        let cols = r.count()?;
        let out_weights = Matrix::from_vec(1, cols, r.reals(cols)?)?;
        let bias = r.f64()?;
        let params = ModelParams {
            embeddings,
            pin_kernels,
            out_weights,
            bias,
        };
        params.check(&model).map_err(|e| r.error_at(params_at, &e.to_string()))?;

        let opt_at = r.pos;
        let optimizer = match r.u64()? {
            0 => {
                let embeddings = params
                    .embeddings
                    .iter()
                    .map(|e| {
                        let at = r.pos;
                        let (rows, width) = (r.count()?, r.count()?);
                        if (rows, width) != e.shape() {
                            return Err(r.error_at(at, "optimizer state does not match embedding table"));
                        }
                        Ok(GroupFtrlState {
                            width,
                            z: r.reals(rows * width)?,
                            n: r.reals(rows * width)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let sizes: Vec<usize> = params.pin_kernels.iter().map(|w| w.as_slice().len()).collect();
                let mut ftrl = |expected: usize| -> Result<FtrlState> {
                    let at = r.pos;
                    let len = r.count()?;
                    if len != expected {
                        return Err(r.error_at(at, "optimizer state length does not match parameters"));
                    }
                    Ok(FtrlState {
                        z: r.reals(len)?,
                        n: r.reals(len)?,
                    })
                };
                let kernels = sizes.iter().map(|&s| ftrl(s)).collect::<Result<Vec<_>>>()?;
                let out_weights = ftrl(cols)?;
                let bias = ftrl(1)?;
                OptimizerState::GftrlFtrl {
                    embeddings,
                    kernels,
                    out_weights,
                    bias,
                }
            }
            1 => {
                let mut adam = |expected: usize| -> Result<AdamState> {
                    let t = r.u64()?;
                    let at = r.pos;
                    let len = r.count()?;
                    if len != expected {
                        return Err(r.error_at(at, "optimizer state length does not match parameters"));
                    }
                    Ok(AdamState {
                        m: r.reals(len)?,
                        v: r.reals(len)?,
                        t,
                    })
                };
                let embeddings = params
                    .embeddings
                    .iter()
                    .map(|e| adam(e.as_slice().len()))
                    .collect::<Result<Vec<_>>>()?;
                let kernels = params
                    .pin_kernels
                    .iter()
                    .map(|w| adam(w.as_slice().len()))
                    .collect::<Result<Vec<_>>>()?;
                let out_weights = adam(cols)?;
                let bias = adam(1)?;
                OptimizerState::Adam {
                    embeddings,
                    kernels,
                    out_weights,
                    bias,
                }
            }
            other => return Err(r.error_at(opt_at, &format!("unknown optimizer code {other}"))),
        };

        let ckpt = Checkpoint {
            model,
            params,
            optimizer,
            vocab_hash: r.u64()?,
            step: r.u64()?,
            best_auc: r.f64()?,
            best_logloss: r.f64()?,
            evals_since_improvement: r.u64()?,
        };
        if r.pos != bytes.len() {
            return Err(r.error_at(r.pos, "trailing bytes after metadata"));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        self.optimizer.kind()
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn count(&mut self, v: usize) {
        self.u64(v as u64);
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn reals(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f64(v);
        }
    }

    fn matrix(&mut self, m: &Matrix) {
        self.count(m.rows());
        self.count(m.cols());
        self.reals(m.as_slice());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn error_at(&self, offset: usize, message: &str) -> Error {
        Error::Checkpoint {
            offset,
            message: message.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| self.error_at(self.bytes.len(), &format!("truncated: needed {n} bytes at offset {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn count(&mut self) -> Result<usize> {
        let at = self.pos;
        let v = self.u64()?;
        // a count can never exceed the bytes left, which guards allocations
        usize::try_from(v)
            .ok()
            .filter(|&c| c <= self.bytes.len())
            .ok_or_else(|| self.error_at(at, &format!("implausible count {v}")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn reals(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.error_at(self.pos, "length overflow"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn matrix(&mut self) -> Result<Matrix> {
        let (rows, cols) = (self.count()?, self.count()?);
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| self.error_at(self.pos, "matrix size overflow"))?;
        Matrix::from_vec(rows, cols, self.reals(len)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(kind: OptimizerKind) -> Checkpoint {
        let cfg = ModelConfig::new(3, 4, 2, 2).unwrap().with_activation(Activation::Tanh);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = ModelParams::init(&cfg, &[3, 7, 2], &mut rng).unwrap();
        params.pin_kernels[1].as_mut_slice()[5] = -0.25;
        params.bias = 0.125;
        let mut opt = OptimizerState::new(kind, &params);
        if let OptimizerState::GftrlFtrl { embeddings, .. } = &mut opt {
            embeddings[1].z[3] = 1.5;
        }
        let mut c = Checkpoint::new(cfg, params, opt);
        c.vocab_hash = 0xdead_beef;
        c.step = 42;
        c.best_auc = 0.71;
        c.best_logloss = 0.5;
        c.evals_since_improvement = 2;
        c
    }

    #[test]
    fn round_trip_is_byte_identical() {
        for kind in [OptimizerKind::GftrlFtrl, OptimizerKind::Adam] {
            let c = sample(kind);
            let bytes = c.to_bytes();
            assert_eq!(&bytes[..4], b"XDPI");
            assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn fresh_checkpoint_round_trips_infinities() {
        let c = sample(OptimizerKind::Adam);
        let fresh = Checkpoint::new(c.model, c.params, c.optimizer);
        assert_eq!(Checkpoint::from_bytes(&fresh.to_bytes()).unwrap(), fresh);
    }

    #[test]
    fn every_truncation_fails_with_offset() {
        let bytes = sample(OptimizerKind::GftrlFtrl).to_bytes();
        for cut in 0..bytes.len() {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(Error::Checkpoint { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut at {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn corrupt_header_and_shapes() {
        let mut bytes = sample(OptimizerKind::Adam).to_bytes();
        bytes[0] = b'Y';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint { offset: 0, .. })));

        let mut bytes = sample(OptimizerKind::Adam).to_bytes();
        bytes[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint { offset: 4, .. })));

        // first embedding table claims 4 columns; make it 5
        let mut bytes = sample(OptimizerKind::Adam).to_bytes();
        let cols_at = 8 + 5 * 8 + 8;
        bytes[cols_at] = 5;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint { .. })));

        let mut bytes = sample(OptimizerKind::Adam).to_bytes();
        bytes.push(0);
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint { .. })));
    }

    #[test]
    fn vocab_guard() {
        let c = sample(OptimizerKind::Adam);
        assert_eq!(c.check_vocab(0xdead_beef), VocabCheck::Match);
        assert_eq!(
            c.check_vocab(7),
            VocabCheck::Mismatch {
                expected: 7,
                found: 0xdead_beef
            }
        );
    }

    #[test]
    fn save_and_load_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let c = sample(OptimizerKind::GftrlFtrl);
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
        assert!(matches!(Checkpoint::load(dir.path().join("none")), Err(Error::Io(_))));
    }
}
