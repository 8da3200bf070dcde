//! Record ingestion, train/test split protocols and a synthetic generator.

mod load;
mod split;
mod synth;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use load::{load_csv, SOURCE_ROW_COLUMN, load_csv_reader, write_records_csv, LoadReport, RejectedRow};
pub use split::{
    car_hacking_counts, cicids2017_counts, file_sha256, make_split, ClassCounts, DatasetManifest, ManifestClass, SourceDigest, SplitMode,
    SplitSpec, CicidsColumn, CAR_HACKING_CLASSES, CICIDS2017_CLASSES,
};
pub use synth::{synth_generate, synth_label, synth_schema, ClassMix, SynthConfig, SYNTH_CLASSES};

use crate::codec::{CodecError, PacketCodec, TokenizedPacket};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("column {0:?} not found in the CSV header")]
    MissingColumn(String),
    #[error("{0} contains no data rows")]
    EmptyFile(String),
    #[error("class {class:?} has {available} rows but {requested} were requested")]
    InsufficientSamples { class: String, available: usize, requested: usize },
    #[error("invalid split spec: {0}")]
    InvalidSpec(String),
}

/// One parsed row: raw field values in schema order plus the class id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledRecord {
    pub fields: Vec<String>,
    pub label: usize,
    pub source_row: usize,
}

/// Encodes records into training packets.
pub fn encode_records(codec: &PacketCodec, records: &[LabeledRecord]) -> Result<Vec<TokenizedPacket>, CodecError> {
    records.iter().map(|r| codec.encode(&r.fields, r.label)).collect()
}
