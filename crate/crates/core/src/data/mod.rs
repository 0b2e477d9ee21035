//! CSV ingestion, encoding, splits, group-balanced batches and a synthetic generator.

mod batch;
mod encode;
mod schema;
mod synth;
mod table;

pub use batch::{BatchSampler, LabeledBatch};
pub(crate) use encode::hex;
pub use encode::{fit_encode, fit_encode_with, EncodedColumn, EncodedDataset, Encoder, Split, SplitFractions};
pub use schema::{BinaryColumn, ColumnKind, ColumnSpec, DatasetSchema, MissingPolicy};
pub use synth::{bayes_posterior, synth_generate, synth_schema, write_synth_csv, SynthSpec};
pub use table::{load_csv, Cell, RawTable};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("csv: {0}")]
    Csv(String),
    #[error("schema: {0}")]
    Schema(String),
    #[error("missing column `{0}` in header")]
    MissingColumn(String),
    #[error("row {row}: column `{column}`: cannot parse `{value}` as a number")]
    Numeric { row: usize, column: String, value: String },
    #[error("row {row}: column `{column}`: value `{value}` is not one of the declared binary values")]
    UnknownCategory { row: usize, column: String, value: String },
    #[error("row {row}: column `{column}` is missing")]
    Missing { row: usize, column: String },
    #[error("row {row}: {msg}")]
    Malformed { row: usize, msg: String },
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("attribute group {0} has no examples")]
    EmptyGroup(u8),
    #[error("invalid synthetic spec: {0}")]
    Synth(String),
}

pub type Result<T> = std::result::Result<T, DataError>;
