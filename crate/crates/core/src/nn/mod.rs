//! The prediction engine: CNN encoder from 66x66 pixel blocks to 480 edge
//! probabilities, Transformer decoder from the reshaped edge memory to mode
//! tokens, constrained greedy decoding, teacher-forced losses and SGD
//! training with finite-difference gradient verification.

mod gradcheck;
mod graph;
mod infer;
mod io;
mod model;
mod ops;
mod tensor;
mod train;

pub use gradcheck::{gradient_check, gradient_check_with, gradient_norm, GradCheckReport};
pub use infer::{cnn_encode, constrained_decode, decoder_step, DecoderState};
pub use io::{load_weights, save_weights};
pub use tensor::{Scalar, Tensor, TensorF32};
pub use train::{sgd_step, teacher_forced_loss, train_run, GradMap, TrainParams, TrainStage};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{MEM_COLS, MEM_ROWS};

/// Token id of the begin-of-sequence query; mode codes 0..=5 come first.
pub const BOS_TOKEN: usize = 6;
/// Embedding table rows: 6 modes plus BOS.
pub const TOKEN_VOCAB_IN: usize = 7;
/// Output vocabulary: the 6 split modes.
pub const TOKEN_VOCAB_OUT: usize = 6;
/// Feed-forward hidden width as a multiple of the model dimension.
pub const FF_MULT: usize = 4;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("sequence of length {len} exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("bad magic bytes in weights file")]
    BadMagic,
    #[error("weights file truncated or inconsistent with its shape table")]
    TruncatedFile,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Architecture hyperparameters. The defaults are the full-scale model;
/// `reduced` is the desk-scale configuration used for training and
/// gradient tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub decoder_layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub vocab_out: usize,
    pub max_seq: usize,
    pub cnn_stem_channels: usize,
    pub cnn_stage_channels: [usize; 4],
    pub qp_max: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            decoder_layers: 4,
            model_dim: 16,
            heads: 4,
            vocab_out: TOKEN_VOCAB_OUT,
            max_seq: 512,
            cnn_stem_channels: 16,
            cnn_stage_channels: [16, 32, 64, 128],
            qp_max: 63,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration: one decoder layer, two heads, slim CNN.
    pub fn reduced() -> ModelConfig {
        ModelConfig {
            decoder_layers: 1,
            heads: 2,
            cnn_stage_channels: [8, 8, 8, 8],
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.model_dim % self.heads != 0 {
            return Err(NnError::ShapeMismatch(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.vocab_out != TOKEN_VOCAB_OUT {
            return Err(NnError::ShapeMismatch(format!(
                "vocab_out must be {TOKEN_VOCAB_OUT}, got {}",
                self.vocab_out
            )));
        }
        if self.decoder_layers == 0 || self.model_dim == 0 || self.max_seq == 0 {
            return Err(NnError::ShapeMismatch("zero-sized configuration".into()));
        }
        Ok(())
    }

    /// Flattened CNN feature length before the QP concat.
    pub fn cnn_flat_len(&self) -> usize {
        // four stride-2 stages take the 64x64 stem output down to 4x4
        self.cnn_stage_channels[3] * 4 * 4
    }

    pub fn ff_dim(&self) -> usize {
        FF_MULT * self.model_dim
    }

    /// Every tensor the architecture requires, with its exact shape.
    pub fn weight_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let mut shapes = BTreeMap::new();
        let mut add = |name: String, shape: Vec<usize>| {
            shapes.insert(name, shape);
        };
        add("cnn.stem.w".into(), vec![self.cnn_stem_channels, 1, 3, 3]);
        add("cnn.stem.b".into(), vec![self.cnn_stem_channels]);
        let mut prev = self.cnn_stem_channels;
        for (i, &ch) in self.cnn_stage_channels.iter().enumerate() {
            add(format!("cnn.stage{i}.conv1.w"), vec![ch, prev, 3, 3]);
            add(format!("cnn.stage{i}.conv1.b"), vec![ch]);
            add(format!("cnn.stage{i}.conv2.w"), vec![ch, ch, 3, 3]);
            add(format!("cnn.stage{i}.conv2.b"), vec![ch]);
            add(format!("cnn.stage{i}.proj.w"), vec![ch, prev, 1, 1]);
            add(format!("cnn.stage{i}.proj.b"), vec![ch]);
            prev = ch;
        }
        add(
            "cnn.fc.w".into(),
            vec![crate::codec::EDGE_COUNT, self.cnn_flat_len() + 1],
        );
        add("cnn.fc.b".into(), vec![crate::codec::EDGE_COUNT]);

        let d = self.model_dim;
        add("dec.embed".into(), vec![TOKEN_VOCAB_IN, d]);
        for l in 0..self.decoder_layers {
            add(format!("dec.l{l}.self.wq"), vec![d, d]);
            add(format!("dec.l{l}.self.bq"), vec![d]);
            add(format!("dec.l{l}.self.wk"), vec![d, d]);
            add(format!("dec.l{l}.self.bk"), vec![d]);
            add(format!("dec.l{l}.self.wv"), vec![d, d]);
            add(format!("dec.l{l}.self.bv"), vec![d]);
            add(format!("dec.l{l}.self.wo"), vec![d, d]);
            add(format!("dec.l{l}.self.bo"), vec![d]);
            add(format!("dec.l{l}.cross.wq"), vec![d, d]);
            add(format!("dec.l{l}.cross.bq"), vec![d]);
            add(format!("dec.l{l}.cross.wk"), vec![d, MEM_COLS]);
            add(format!("dec.l{l}.cross.bk"), vec![d]);
            add(format!("dec.l{l}.cross.wv"), vec![d, MEM_COLS]);
            add(format!("dec.l{l}.cross.bv"), vec![d]);
            add(format!("dec.l{l}.cross.wo"), vec![d, d]);
            add(format!("dec.l{l}.cross.bo"), vec![d]);
            add(format!("dec.l{l}.ln1.g"), vec![d]);
            add(format!("dec.l{l}.ln1.b"), vec![d]);
            add(format!("dec.l{l}.ln2.g"), vec![d]);
            add(format!("dec.l{l}.ln2.b"), vec![d]);
            add(format!("dec.l{l}.ln3.g"), vec![d]);
            add(format!("dec.l{l}.ln3.b"), vec![d]);
            add(format!("dec.l{l}.ff.w1"), vec![self.ff_dim(), d]);
            add(format!("dec.l{l}.ff.b1"), vec![self.ff_dim()]);
            add(format!("dec.l{l}.ff.w2"), vec![d, self.ff_dim()]);
            add(format!("dec.l{l}.ff.b2"), vec![d]);
        }
        add("dec.out.w".into(), vec![self.vocab_out, d]);
        add("dec.out.b".into(), vec![self.vocab_out]);
        shapes
    }
}

/// Named dense weights plus configuration. Names and shapes are exactly the
/// set `ModelConfig::weight_shapes` demands.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    tensors: BTreeMap<String, TensorF32>,
}

impl ModelWeights {
    /// Seeded random initialization: He-normal for convolutions and linear
    /// maps, unit gamma / zero beta for layer norms, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> ModelWeights {
        config.validate().expect("invalid model config");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape) in config.weight_shapes() {
            let numel: usize = shape.iter().product();
            let t = if name.ends_with(".g") {
                TensorF32::from_vec(&shape, vec![1.0; numel])
            } else if shape.len() == 1 {
                TensorF32::zeros(&shape)
            } else {
                // fan-in: all dims but the first
                let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
                let std = (2.0 / fan_in as f64).sqrt();
                let dist = Normal::new(0.0, std).unwrap();
                TensorF32::from_vec(
                    &shape,
                    (0..numel).map(|_| dist.sample(&mut rng) as f32).collect(),
                )
            };
            tensors.insert(name, t);
        }
        ModelWeights { config, tensors }
    }

    pub fn from_tensors(
        config: ModelConfig,
        tensors: BTreeMap<String, TensorF32>,
    ) -> Result<ModelWeights, NnError> {
        let w = ModelWeights { config, tensors };
        w.validate()?;
        Ok(w)
    }

    /// Every required name present with its exact shape, and nothing else.
    pub fn validate(&self) -> Result<(), NnError> {
        self.config.validate()?;
        let expected = self.config.weight_shapes();
        for (name, shape) in &expected {
            match self.tensors.get(name) {
                None => return Err(NnError::ShapeMismatch(format!("missing tensor {name}"))),
                Some(t) if t.shape() != &shape[..] => {
                    return Err(NnError::ShapeMismatch(format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        t.shape(),
                        shape
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !expected.contains_key(*k)) {
            return Err(NnError::ShapeMismatch(format!("unexpected tensor {extra}")));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> &TensorF32 {
        &self.tensors[name]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut TensorF32 {
        self.tensors.get_mut(name).expect("unknown tensor")
    }

    pub fn tensors(&self) -> &BTreeMap<String, TensorF32> {
        &self.tensors
    }

    /// All-zero weights of the same architecture (degenerate but valid).
    pub fn zeros(config: ModelConfig) -> ModelWeights {
        let tensors = config
            .weight_shapes()
            .into_iter()
            .map(|(n, s)| (n, TensorF32::zeros(&s)))
            .collect();
        ModelWeights { config, tensors }
    }

    /// f64 copies of all tensors, for the gradient-check path.
    pub(crate) fn to_f64(&self) -> BTreeMap<String, Tensor<f64>> {
        self.tensors
            .iter()
            .map(|(n, t)| (n.clone(), t.map_to::<f64>()))
            .collect()
    }
}

/// The 30x16 attention memory: the reshaped edge vector.
pub type DecoderMemory = [[f32; MEM_COLS]; MEM_ROWS];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_and_reduced_configs_are_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::reduced().validate().unwrap();
        assert_eq!(ModelConfig::default().cnn_flat_len(), 128 * 16);
        assert_eq!(ModelConfig::reduced().cnn_flat_len(), 8 * 16);
    }

    #[test]
    fn init_produces_exactly_the_required_tensors() {
        let w = ModelWeights::init(ModelConfig::reduced(), 1);
        w.validate().unwrap();
        assert_eq!(w.tensors().len(), w.config.weight_shapes().len());
        // ln gammas start at one, biases at zero
        assert!(w.get("dec.l0.ln1.g").data().iter().all(|&v| v == 1.0));
        assert!(w.get("cnn.stem.b").data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn validation_rejects_missing_and_extra_tensors() {
        let mut w = ModelWeights::init(ModelConfig::reduced(), 1);
        w.tensors.remove("dec.out.b");
        assert!(w.validate().is_err());
        let mut w = ModelWeights::init(ModelConfig::reduced(), 1);
        w.tensors.insert("bogus".into(), TensorF32::zeros(&[1]));
        assert!(w.validate().is_err());
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = ModelWeights::init(ModelConfig::reduced(), 11);
        let b = ModelWeights::init(ModelConfig::reduced(), 11);
        assert_eq!(a, b);
        let c = ModelWeights::init(ModelConfig::reduced(), 12);
        assert_ne!(a, c);
    }
}
