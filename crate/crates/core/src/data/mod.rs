//! Interaction logs: ingestion, preprocessing, windowing and synthetic students.

mod batch;
mod ingest;
mod preprocess;
pub mod synth;

pub use batch::{batches, window, SequenceBatch, PAD_ID};
pub use ingest::{ingest_csv, ingest_reader, write_csv, RawData, RawInteraction};
pub use preprocess::{preprocess, Dataset, DatasetStats, Step, StudentSequence, Vocab, MIN_INTERACTIONS};
