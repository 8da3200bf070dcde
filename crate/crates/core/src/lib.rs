//! Digit-level causal language model for packet and flow classification.
//!
//! A packet is a list of numeric fields. Each field is written as its digits
//! (ones digit first) followed by a field separator, and the class label is
//! appended as one more token. A small decoder-only transformer is trained
//! to predict every next token; classification reads the label token's
//! distribution restricted to the label range.
//!
//! The numeric core is generic over [`Scalar`] (`f32` and `f64`); training
//! and checkpoints use `f32`, gradient checks use `f64`.

pub mod codec;
pub mod datasets;
pub mod embedding;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod schema;
pub mod tensor;
pub mod trainer;

pub use codec::{build_vocabulary, detokenize, normalize_field, tokenize_packet, tokenize_unlabeled, CodecError, PacketCodec, TokenizedPacket, Vocabulary};
pub use embedding::{embed_sequence, EmbeddingTables};
pub use metrics::{confusion, per_class_prf, unweighted_macro_f1, weighted_f1, ConfusionMatrix, MetricsReport};
pub use model::{forward, gradients, predict_label, ForwardTrace, ModelConfig, ModelError, ModelParams, ModelSize, Prediction};
pub use scalar::Scalar;
pub use schema::{FieldDescriptor, FieldKind, PacketSchema, SchemaError};
pub use trainer::{train, train_with, Checkpoint, TrainConfig, TrainError, TrainOptions};

pub type Params32 = ModelParams<f32>;
pub type Params64 = ModelParams<f64>;
pub type Trace32 = ForwardTrace<f32>;
pub type Trace64 = ForwardTrace<f64>;
