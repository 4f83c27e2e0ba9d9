//! Checks a request's output against an independent full sort of its input.

use thiserror::Error;

use crate::chunk::Record;
use crate::dataset::{read_chunk, DatasetError, DatasetManifest};
use crate::stages::align_value;
use crate::store::Store;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("output chunk `{0}` is not marked sorted")]
    Unmarked(String),
    #[error("key decreases at output record {0}")]
    OutOfOrder(u64),
    #[error("output holds {got} records, input {expected}")]
    Count { expected: u64, got: u64 },
    #[error("output records differ from the transformed input")]
    Content,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Verified {
    pub records: u64,
    pub chunks: usize,
}

/// Verifies that the chunks `outputs`, in order, hold exactly the input
/// records of `manifest` after `rounds` of alignment, sorted by key.
pub fn verify_output(
    store: &Store,
    manifest: &DatasetManifest,
    outputs: &[String],
    rounds: u64,
) -> Result<Verified, VerifyError> {
    let mut got: Vec<Record> = Vec::new();
    for key in outputs {
        let chunk = read_chunk(store, key)?;
        if !chunk.sorted {
            return Err(VerifyError::Unmarked(key.clone()));
        }
        got.extend(chunk.records);
    }
    if let Some(i) = got.windows(2).position(|w| w[0].key > w[1].key) {
        return Err(VerifyError::OutOfOrder(i as u64 + 1));
    }
    let mut expected: Vec<Record> = manifest
        .read_all(store)?
        .into_iter()
        .map(|r| Record::new(r.key, align_value(&r.value, rounds)))
        .collect();
    if expected.len() != got.len() {
        return Err(VerifyError::Count {
            expected: expected.len() as u64,
            got: got.len() as u64,
        });
    }
    expected.sort_unstable();
    got.sort_unstable();
    if expected != got {
        return Err(VerifyError::Content);
    }
    Ok(Verified {
        records: got.len() as u64,
        chunks: outputs.len(),
    })
}
