//! Datasets: chunk objects listed by a manifest.

use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chunk::{Chunk, ChunkFormatError, Record};
use crate::store::Store;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    /// Object keys of the chunks, in order.
    pub chunks: Vec<String>,
    pub total_records: u64,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("chunk `{key}`: {source}")]
    Chunk {
        key: String,
        source: ChunkFormatError,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("manifest lists {listed} records, chunks hold {found}")]
    CountMismatch { listed: u64, found: u64 },
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| DatasetError::Manifest(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let text = toml::to_string(self).map_err(|e| DatasetError::Manifest(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Reads every chunk, checking that all parse and the count matches.
    pub fn read_all(&self, store: &Store) -> Result<Vec<Record>, DatasetError> {
        let mut out = Vec::new();
        for key in &self.chunks {
            out.extend(read_chunk(store, key)?.records);
        }
        if out.len() as u64 != self.total_records {
            return Err(DatasetError::CountMismatch {
                listed: self.total_records,
                found: out.len() as u64,
            });
        }
        Ok(out)
    }
}

pub fn read_chunk(store: &Store, key: &str) -> Result<Chunk, DatasetError> {
    let bytes = store.read(key)?;
    Chunk::decode(&bytes).map_err(|source| DatasetError::Chunk {
        key: key.to_owned(),
        source,
    })
}

#[derive(Clone, Debug)]
pub struct GenSpec {
    pub name: String,
    pub chunks: usize,
    pub records_per_chunk: usize,
    pub value_len: usize,
    pub seed: u64,
}

/// Writes a seeded random dataset under `input/<name>/`.
pub fn generate(store: &Store, spec: &GenSpec) -> Result<DatasetManifest, DatasetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut chunks = Vec::with_capacity(spec.chunks);
    for c in 0..spec.chunks {
        let records = (0..spec.records_per_chunk)
            .map(|_| {
                let mut value = vec![0u8; spec.value_len];
                rng.fill(&mut value[..]);
                Record::new(rng.gen(), value)
            })
            .collect();
        let key = format!("input/{}/chunk-{c:06}.ptfc", spec.name);
        let bytes = Chunk::new(records).encode().map_err(|source| DatasetError::Chunk {
            key: key.clone(),
            source,
        })?;
        store.write(&key, &bytes)?;
        chunks.push(key);
    }
    Ok(DatasetManifest {
        chunks,
        total_records: (spec.chunks * spec.records_per_chunk) as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(name: &str, seed: u64) -> GenSpec {
        GenSpec {
            name: name.into(),
            chunks: 3,
            records_per_chunk: 50,
            value_len: 8,
            seed,
        }
    }

    #[test]
    fn generation_is_seeded() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path(), None).unwrap();
        let a = generate(&store, &spec("a", 7)).unwrap();
        let b = generate(&store, &spec("b", 7)).unwrap();
        let c = generate(&store, &spec("c", 8)).unwrap();
        assert_eq!(a.total_records, 150);
        assert_eq!(a.read_all(&store).unwrap(), b.read_all(&store).unwrap());
        assert_ne!(a.read_all(&store).unwrap(), c.read_all(&store).unwrap());
    }

    #[test]
    fn manifest_round_trips_and_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path().join("data"), None).unwrap();
        let mut m = generate(&store, &spec("a", 1)).unwrap();
        let path = dir.path().join("a.toml");
        m.save(&path).unwrap();
        assert_eq!(DatasetManifest::load(&path).unwrap(), m);
        m.total_records += 1;
        assert!(matches!(m.read_all(&store), Err(DatasetError::CountMismatch { .. })));
        m.chunks.push("input/a/missing".into());
        assert!(matches!(m.read_all(&store), Err(DatasetError::Io(_))));
    }
}
