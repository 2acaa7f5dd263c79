//! Field schemas, records, delimited ingest, the synthetic generator and batching.

pub mod batch;
pub mod delimited;
pub mod schema;
pub mod synthetic;

pub use batch::{batch_iter, epoch_order, BatchIter};
pub use delimited::{load_delimited, load_delimited_with, write_delimited, DelimitedSpec, Vocabularies, Vocabulary};
pub use schema::{Dataset, DatasetSchema, FieldSchema, Sample, Split};
pub use synthetic::{
    generate_synthetic, split_indices, split_synthetic, CrossTable, SplitData, SyntheticParams, SyntheticSpec,
};
