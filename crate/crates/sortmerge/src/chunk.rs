//! The chunk file format.
//!
//! ```text
//! "PTFC" | version u16 | record_count u32 | sorted u8 | records...
//! record: key u64 | value_len u32 | value
//! ```
//!
//! All integers are little-endian.

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"PTFC";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 11;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Record {
    pub key: u64,
    pub value: Vec<u8>,
}

impl Record {
    pub fn new(key: u64, value: impl Into<Vec<u8>>) -> Self {
        Self {
            key,
            value: value.into(),
        }
    }

    pub fn encoded_len(&self) -> usize {
        12 + self.value.len()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChunkFormatError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported chunk version {0}")]
    BadVersion(u16),
    #[error("sorted flag must be 0 or 1, got {0}")]
    BadFlag(u8),
    #[error("chunk truncated at byte {0}")]
    Truncated(usize),
    #[error("{0} bytes after the last record")]
    TrailingBytes(usize),
    #[error("chunk marked sorted but key at record {0} decreases")]
    Unsorted(usize),
    #[error("{0} records do not fit a chunk")]
    TooManyRecords(usize),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Chunk {
    pub sorted: bool,
    pub records: Vec<Record>,
}

impl Chunk {
    pub fn new(records: Vec<Record>) -> Self {
        Self {
            sorted: false,
            records,
        }
    }

    /// Sorts by key (stable) and marks the chunk sorted.
    pub fn sorted(mut records: Vec<Record>) -> Self {
        records.sort_by_key(|r| r.key);
        Self {
            sorted: true,
            records,
        }
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.records.iter().map(Record::encoded_len).sum::<usize>()
    }

    pub fn encode(&self) -> Result<Vec<u8>, ChunkFormatError> {
        let count = u32::try_from(self.records.len())
            .map_err(|_| ChunkFormatError::TooManyRecords(self.records.len()))?;
        if self.sorted {
            check_sorted(&self.records)?;
        }
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&count.to_le_bytes());
        out.push(u8::from(self.sorted));
        for r in &self.records {
            out.extend_from_slice(&r.key.to_le_bytes());
            out.extend_from_slice(&(r.value.len() as u32).to_le_bytes());
            out.extend_from_slice(&r.value);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ChunkFormatError> {
        let mut at = 0;
        let mut take = |n: usize| -> Result<&[u8], ChunkFormatError> {
            let s = bytes.get(at..at + n).ok_or(ChunkFormatError::Truncated(bytes.len()))?;
            at += n;
            Ok(s)
        };
        let magic: [u8; 4] = take(4)?.try_into().unwrap();
        if &magic != MAGIC {
            return Err(ChunkFormatError::BadMagic(magic));
        }
        let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(ChunkFormatError::BadVersion(version));
        }
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let sorted = match take(1)?[0] {
            0 => false,
            1 => true,
            f => return Err(ChunkFormatError::BadFlag(f)),
        };
        // Every record needs at least 12 bytes; don't trust the count for
        // the allocation.
        let mut records = Vec::with_capacity(count.min(bytes.len() / 12));
        for _ in 0..count {
            let key = u64::from_le_bytes(take(8)?.try_into().unwrap());
            let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let value = take(len)?.to_vec();
            records.push(Record { key, value });
        }
        if at != bytes.len() {
            return Err(ChunkFormatError::TrailingBytes(bytes.len() - at));
        }
        if sorted {
            check_sorted(&records)?;
        }
        Ok(Self { sorted, records })
    }
}

fn check_sorted(records: &[Record]) -> Result<(), ChunkFormatError> {
    match records.windows(2).position(|w| w[0].key > w[1].key) {
        Some(i) => Err(ChunkFormatError::Unsorted(i + 1)),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encodes_header_and_records() {
        let chunk = Chunk {
            sorted: true,
            records: vec![Record::new(1, b"ab".to_vec()), Record::new(0x0102, Vec::new())],
        };
        let bytes = chunk.encode().unwrap();
        let mut expected = b"PTFC".to_vec();
        expected.extend([1, 0]);
        expected.extend([2, 0, 0, 0]);
        expected.push(1);
        expected.extend([1, 0, 0, 0, 0, 0, 0, 0, 2, 0, 0, 0, b'a', b'b']);
        expected.extend([2, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(bytes, expected);
        assert_eq!(bytes.len(), chunk.encoded_len());
        assert_eq!(Chunk::decode(&bytes).unwrap(), chunk);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = Chunk::new(vec![Record::new(5, b"x".to_vec())]).encode().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Chunk::decode(&bad), Err(ChunkFormatError::BadMagic(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert_eq!(Chunk::decode(&bad), Err(ChunkFormatError::BadVersion(2)));
        let mut bad = bytes.clone();
        bad[10] = 7;
        assert_eq!(Chunk::decode(&bad), Err(ChunkFormatError::BadFlag(7)));
        let mut bad = bytes.clone();
        bad.push(0);
        assert_eq!(Chunk::decode(&bad), Err(ChunkFormatError::TrailingBytes(1)));
        let mut bad = bytes.clone();
        bad[6] = 2;
        assert!(matches!(Chunk::decode(&bad), Err(ChunkFormatError::Truncated(_))));
    }

    #[test]
    fn sorted_flag_is_checked() {
        let records = vec![Record::new(3, Vec::new()), Record::new(2, Vec::new())];
        let mut bytes = Chunk::new(records.clone()).encode().unwrap();
        bytes[10] = 1;
        assert_eq!(Chunk::decode(&bytes), Err(ChunkFormatError::Unsorted(1)));
        let sorted = Chunk::sorted(records);
        assert_eq!(sorted.records[0].key, 2);
        assert!(sorted.encode().is_ok());
    }

    fn arb_records() -> impl Strategy<Value = Vec<Record>> {
        proptest::collection::vec(
            (any::<u64>(), proptest::collection::vec(any::<u8>(), 0..24))
                .prop_map(|(k, v)| Record::new(k, v)),
            0..40,
        )
    }

    proptest! {
        #[test]
        fn round_trips(records in arb_records(), sorted in any::<bool>()) {
            let chunk = if sorted { Chunk::sorted(records) } else { Chunk::new(records) };
            let bytes = chunk.encode().unwrap();
            prop_assert_eq!(Chunk::decode(&bytes).unwrap(), chunk);
        }

        #[test]
        fn every_truncation_is_an_error(records in arb_records()) {
            let bytes = Chunk::new(records).encode().unwrap();
            for cut in 0..bytes.len() {
                prop_assert!(Chunk::decode(&bytes[..cut]).is_err());
            }
        }
    }
}
