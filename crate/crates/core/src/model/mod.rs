//! Causal transformer decoder over tokenized packets.
//!
//! Pre-norm blocks (RMSNorm -> multi-head causal attention -> residual,
//! RMSNorm -> SwiGLU feed-forward -> residual), a final RMSNorm and an untied
//! output projection. No biases, no dropout.

mod backward;
mod forward;
mod inference;

use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::Vocabulary;
use crate::embedding::{EmbeddingTables, IndexOutOfRange};
use crate::scalar::Scalar;
use crate::schema::PacketSchema;
use crate::tensor::{add_into, Matrix};

pub use backward::{batch_gradients, gradients, Gradients};
pub use forward::{forward, ForwardTrace};
pub use inference::{packet_nll, predict_label, restricted_prediction, sequence_nll, Prediction};

pub const RMS_EPS: f64 = 1e-5;
pub const DEFAULT_MLP_RATIO: f64 = 8.0 / 3.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no supervised positions in the packet")]
    EmptyMask,
    #[error(transparent)]
    IndexOutOfRange(#[from] IndexOutOfRange),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
}

/// Named architecture sizes (layers, heads, width; seq_len 256).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSize {
    Base,
    Small,
    Middle,
}

impl ModelSize {
    pub const ALL: [ModelSize; 3] = [ModelSize::Base, ModelSize::Small, ModelSize::Middle];

    /// `(n_layers, n_heads, emb_size, seq_len)`.
    pub fn dims(self) -> (usize, usize, usize, usize) {
        match self {
            ModelSize::Base => (6, 8, 128, 256),
            ModelSize::Small => (8, 16, 256, 256),
            ModelSize::Middle => (10, 32, 512, 256),
        }
    }

    /// Learning rate used with this size.
    pub fn default_lr(self) -> f64 {
        match self {
            ModelSize::Middle => 3e-5,
            _ => 1e-4,
        }
    }
}

impl FromStr for ModelSize {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "base" => Ok(ModelSize::Base),
            "small" => Ok(ModelSize::Small),
            "middle" => Ok(ModelSize::Middle),
            other => Err(format!("unknown model size {other:?} (expected base, small or middle)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub emb_size: usize,
    pub seq_len: usize,
    pub mlp_ratio: f64,
    pub vocab_size: usize,
    pub max_numeric_len: usize,
}

impl ModelConfig {
    /// Config whose L, V and M come from `schema`.
    pub fn for_schema(schema: &PacketSchema, n_layers: usize, n_heads: usize, emb_size: usize) -> Self {
        Self {
            n_layers,
            n_heads,
            emb_size,
            seq_len: schema.seq_len,
            mlp_ratio: DEFAULT_MLP_RATIO,
            vocab_size: Vocabulary::new(schema.field_count(), schema.class_count()).size,
            max_numeric_len: schema.max_numeric_len,
        }
    }

    /// Named size bound to a vocabulary. The preset's seq_len (256) is used;
    /// the schema must agree with it for training.
    pub fn preset(size: ModelSize, vocab_size: usize, max_numeric_len: usize) -> Self {
        let (n_layers, n_heads, emb_size, seq_len) = size.dims();
        Self {
            n_layers,
            n_heads,
            emb_size,
            seq_len,
            mlp_ratio: DEFAULT_MLP_RATIO,
            vocab_size,
            max_numeric_len,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.emb_size / self.n_heads
    }

    /// round(mlp_ratio * d), rounded up to a multiple of 8.
    pub fn hidden_size(&self) -> usize {
        let h = (self.mlp_ratio * self.emb_size as f64).round() as usize;
        h.div_ceil(8).max(1) * 8
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.emb_size == 0 {
            return bad("n_layers, n_heads and emb_size must be positive".into());
        }
        if !self.emb_size.is_multiple_of(self.n_heads) {
            return bad(format!("emb_size {} is not divisible by n_heads {}", self.emb_size, self.n_heads));
        }
        if self.seq_len == 0 || self.vocab_size == 0 || self.max_numeric_len == 0 {
            return bad("seq_len, vocab_size and max_numeric_len must be positive".into());
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) {
            return bad(format!("mlp_ratio must be a positive finite number, got {}", self.mlp_ratio));
        }
        Ok(())
    }

    /// L, V and M must agree with the schema.
    pub fn check_schema(&self, schema: &PacketSchema) -> Result<(), ModelError> {
        let vocab = Vocabulary::new(schema.field_count(), schema.class_count());
        if self.seq_len != schema.seq_len || self.vocab_size != vocab.size || self.max_numeric_len != schema.max_numeric_len {
            return Err(ModelError::ShapeMismatch(format!(
                "model (L={}, V={}, M={}) does not match schema (L={}, V={}, M={})",
                self.seq_len, self.vocab_size, self.max_numeric_len, schema.seq_len, vocab.size, schema.max_numeric_len
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub attn_norm: Vec<T>,
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub ffn_norm: Vec<T>,
    pub w_gate: Matrix<T>,
    pub w_up: Matrix<T>,
    pub w_down: Matrix<T>,
}

/// All learnable tensors. Also used for gradients and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub embed: EmbeddingTables<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Vec<T>,
    pub w_out: Matrix<T>,
}

/// Borrowed view of one named tensor.
pub struct TensorView<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.emb_size;
        let h = cfg.hidden_size();
        let layer = LayerParams {
            attn_norm: vec![T::zero(); d],
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            ffn_norm: vec![T::zero(); d],
            w_gate: Matrix::zeros(d, h),
            w_up: Matrix::zeros(d, h),
            w_down: Matrix::zeros(h, d),
        };
        Self {
            embed: EmbeddingTables::zeros(cfg.vocab_size, cfg.max_numeric_len, cfg.seq_len, d),
            layers: vec![layer; cfg.n_layers],
            final_norm: vec![T::zero(); d],
            w_out: Matrix::zeros(d, cfg.vocab_size),
        }
    }

    /// Embeddings and projections ~ N(0, 0.02²); norm gains = 1.
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.emb_size;
        let h = cfg.hidden_size();
        let embed = EmbeddingTables::init(cfg.vocab_size, cfg.max_numeric_len, cfg.seq_len, d, rng);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut sample = |rows, cols| Matrix::from_fn(rows, cols, |_, _| T::of(normal.sample(rng)));
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            layers.push(LayerParams {
                attn_norm: vec![T::one(); d],
                wq: sample(d, d),
                wk: sample(d, d),
                wv: sample(d, d),
                wo: sample(d, d),
                ffn_norm: vec![T::one(); d],
                w_gate: sample(d, h),
                w_up: sample(d, h),
                w_down: sample(h, d),
            });
        }
        let w_out = sample(d, cfg.vocab_size);
        Self {
            embed,
            layers,
            final_norm: vec![T::one(); d],
            w_out,
        }
    }

    /// Every tensor in a fixed canonical order.
    pub fn tensors(&self) -> Vec<TensorView<'_, T>> {
        fn mat<'a, T: Scalar>(name: String, m: &'a Matrix<T>) -> TensorView<'a, T> {
            TensorView {
                name,
                shape: vec![m.rows(), m.cols()],
                data: m.as_slice(),
            }
        }
        fn vec1<'a, T>(name: String, v: &'a [T]) -> TensorView<'a, T> {
            TensorView {
                name,
                shape: vec![v.len()],
                data: v,
            }
        }
        let mut out = vec![
            mat("embed.word".into(), &self.embed.word),
            mat("embed.numeric_pos".into(), &self.embed.numeric_pos),
            mat("embed.field_pos".into(), &self.embed.field_pos),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push(vec1(format!("layers.{i}.attn_norm"), &l.attn_norm));
            out.push(mat(format!("layers.{i}.attn.wq"), &l.wq));
            out.push(mat(format!("layers.{i}.attn.wk"), &l.wk));
            out.push(mat(format!("layers.{i}.attn.wv"), &l.wv));
            out.push(mat(format!("layers.{i}.attn.wo"), &l.wo));
            out.push(vec1(format!("layers.{i}.ffn_norm"), &l.ffn_norm));
            out.push(mat(format!("layers.{i}.ffn.w_gate"), &l.w_gate));
            out.push(mat(format!("layers.{i}.ffn.w_up"), &l.w_up));
            out.push(mat(format!("layers.{i}.ffn.w_down"), &l.w_down));
        }
        out.push(vec1("final_norm".into(), &self.final_norm));
        out.push(mat("w_out".into(), &self.w_out));
        out
    }

    /// Mutable slices in the same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = vec![
            self.embed.word.as_mut_slice(),
            self.embed.numeric_pos.as_mut_slice(),
            self.embed.field_pos.as_mut_slice(),
        ];
        for l in self.layers.iter_mut() {
            out.push(&mut l.attn_norm);
            out.push(l.wq.as_mut_slice());
            out.push(l.wk.as_mut_slice());
            out.push(l.wv.as_mut_slice());
            out.push(l.wo.as_mut_slice());
            out.push(&mut l.ffn_norm);
            out.push(l.w_gate.as_mut_slice());
            out.push(l.w_up.as_mut_slice());
            out.push(l.w_down.as_mut_slice());
        }
        out.push(&mut self.final_norm);
        out.push(self.w_out.as_mut_slice());
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// Shapes must match `cfg`.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        let expected = ModelParams::<T>::zeros(cfg);
        let ours = self.tensors();
        let theirs = expected.tensors();
        if ours.len() != theirs.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "{} tensors, config implies {}",
                ours.len(),
                theirs.len()
            )));
        }
        for (a, b) in ours.iter().zip(&theirs) {
            if a.shape != b.shape {
                return Err(ModelError::ShapeMismatch(format!("{}: shape {:?}, config implies {:?}", a.name, a.shape, b.shape)));
            }
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &ModelParams<T>) {
        let src = other.tensors();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            add_into(dst, s.data);
        }
    }

    pub fn scale(&mut self, k: T) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= k);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    /// Elementwise conversion to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let conv = |m: &Matrix<T>| m.map(|x| U::of(x.as_f64()));
        let convv = |v: &[T]| v.iter().map(|&x| U::of(x.as_f64())).collect::<Vec<U>>();
        ModelParams {
            embed: EmbeddingTables {
                word: conv(&self.embed.word),
                numeric_pos: conv(&self.embed.numeric_pos),
                field_pos: conv(&self.embed.field_pos),
            },
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: convv(&l.attn_norm),
                    wq: conv(&l.wq),
                    wk: conv(&l.wk),
                    wv: conv(&l.wv),
                    wo: conv(&l.wo),
                    ffn_norm: convv(&l.ffn_norm),
                    w_gate: conv(&l.w_gate),
                    w_up: conv(&l.w_up),
                    w_down: conv(&l.w_down),
                })
                .collect(),
            final_norm: convv(&self.final_norm),
            w_out: conv(&self.w_out),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hidden_width_rounds_up_to_multiple_of_eight() {
        let mut cfg = ModelConfig {
            n_layers: 1,
            n_heads: 1,
            emb_size: 128,
            seq_len: 8,
            mlp_ratio: DEFAULT_MLP_RATIO,
            vocab_size: 14,
            max_numeric_len: 3,
        };
        assert_eq!(cfg.hidden_size(), 344);
        cfg.emb_size = 32;
        assert_eq!(cfg.hidden_size(), 88);
        cfg.emb_size = 4;
        assert_eq!(cfg.hidden_size(), 16);
        cfg.emb_size = 512;
        assert_eq!(cfg.hidden_size(), 1368);
    }

    #[test]
    fn presets_match_size_table() {
        assert_eq!(ModelSize::Base.dims(), (6, 8, 128, 256));
        assert_eq!(ModelSize::Small.dims(), (8, 16, 256, 256));
        assert_eq!(ModelSize::Middle.dims(), (10, 32, 512, 256));
        assert_eq!("Middle".parse::<ModelSize>().unwrap(), ModelSize::Middle);
        for size in ModelSize::ALL {
            ModelConfig::preset(size, 34, 10).validate().unwrap();
        }
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut cfg = ModelConfig::preset(ModelSize::Base, 20, 5);
        cfg.mlp_ratio = 0.0;
        assert!(matches!(cfg.validate(), Err(ModelError::InvalidConfig(_))));
        cfg.mlp_ratio = 2.0;
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn tensor_views_line_up_with_mutable_views() {
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            emb_size: 8,
            seq_len: 6,
            mlp_ratio: 2.0,
            vocab_size: 14,
            max_numeric_len: 3,
        };
        let mut p = ModelParams::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let lens: Vec<usize> = p.tensors().iter().map(|t| t.data.len()).collect();
        let lens_mut: Vec<usize> = p.tensors_mut().iter().map(|t| t.len()).collect();
        assert_eq!(lens, lens_mut);
        assert_eq!(p.tensors().len(), 3 + 2 * 9 + 2);
        p.check_shapes(&cfg).unwrap();
        let back: ModelParams<f32> = p.cast::<f64>().cast();
        assert_eq!(back, p);
    }
}
