//! Feeds, metadata frames and the arity arithmetic shared by gates, stages
//! and pipelines.
//!
//! Every feed carries a small header identifying the batch it belongs to and
//! how many feeds that batch contains at the current point of the pipeline.
//! Inside a local pipeline a second, innermost frame identifies the partition
//! being processed; gates only ever look at the innermost frame.

use std::fmt;

use crate::error::MetadataError;

/// Payload names starting with this character are reserved for the runtime.
pub const RESERVED_PREFIX: char = '!';

/// Name of the single entry carried by a failure marker feed.
pub const FAILURE_ENTRY: &str = "!failed";

/// One `(id, arity)` level of the metadata stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MetadataFrame {
    pub id: u64,
    pub arity: u64,
}

impl MetadataFrame {
    pub fn new(id: u64, arity: u64) -> Result<Self, MetadataError> {
        if arity == 0 {
            return Err(MetadataError::InvalidArity);
        }
        Ok(Self { id, arity })
    }
}

impl fmt::Display for MetadataFrame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.id, self.arity)
    }
}

/// Metadata stack of a feed: the original batch, optionally the partition it
/// is currently travelling in, and the feed's sequence number within the
/// innermost frame.
///
/// Only two levels exist, which the representation enforces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FeedMetadata {
    batch: MetadataFrame,
    partition: Option<MetadataFrame>,
    pub feed_seq: u64,
}

impl FeedMetadata {
    /// Single-frame metadata for a batch entering a pipeline.
    pub fn new(id: u64, arity: u64) -> Result<Self, MetadataError> {
        Ok(Self {
            batch: MetadataFrame::new(id, arity)?,
            partition: None,
            feed_seq: 0,
        })
    }

    pub fn from_frames(
        batch: MetadataFrame,
        partition: Option<MetadataFrame>,
        feed_seq: u64,
    ) -> Result<Self, MetadataError> {
        if batch.arity == 0 || partition.is_some_and(|p| p.arity == 0) {
            return Err(MetadataError::InvalidArity);
        }
        Ok(Self {
            batch,
            partition,
            feed_seq,
        })
    }

    pub fn with_seq(mut self, feed_seq: u64) -> Self {
        self.feed_seq = feed_seq;
        self
    }

    pub fn batch(&self) -> MetadataFrame {
        self.batch
    }

    pub fn partition(&self) -> Option<MetadataFrame> {
        self.partition
    }

    /// The frame gates key their bookkeeping on.
    pub fn innermost(&self) -> MetadataFrame {
        self.partition.unwrap_or(self.batch)
    }

    pub fn depth(&self) -> usize {
        1 + usize::from(self.partition.is_some())
    }

    /// Frames from outermost to innermost.
    pub fn frames(&self) -> impl Iterator<Item = MetadataFrame> + '_ {
        std::iter::once(self.batch).chain(self.partition)
    }

    pub fn push_partition(self, id: u64, arity: u64) -> Result<Self, MetadataError> {
        if self.partition.is_some() {
            return Err(MetadataError::NestingLimit);
        }
        Ok(Self {
            partition: Some(MetadataFrame::new(id, arity)?),
            ..self
        })
    }

    pub fn pop_partition(self) -> Result<(Self, MetadataFrame), MetadataError> {
        let partition = self.partition.ok_or(MetadataError::NoPartitionFrame)?;
        Ok((
            Self {
                partition: None,
                ..self
            },
            partition,
        ))
    }

    pub(crate) fn set_innermost_arity(&mut self, arity: u64) {
        debug_assert!(arity >= 1);
        match &mut self.partition {
            Some(p) => p.arity = arity,
            None => self.batch.arity = arity,
        }
    }

    pub(crate) fn set_batch_arity(&mut self, arity: u64) {
        debug_assert!(arity >= 1);
        self.batch.arity = arity;
    }
}

impl fmt::Display for FeedMetadata {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}", self.batch)?;
        if let Some(p) = self.partition {
            write!(f, ",{p}")?;
        }
        write!(f, "]#{}", self.feed_seq)
    }
}

/// Builds the metadata of a batch with the given id and arity.
pub fn make_metadata(id: u64, arity: u64) -> Result<FeedMetadata, MetadataError> {
    FeedMetadata::new(id, arity)
}

/// Arity of a batch after an aggregate dequeue of size `size`.
pub fn aggregate_arity(arity: u64, size: u64) -> u64 {
    assert!(arity >= 1 && size >= 1, "aggregate_arity({arity}, {size})");
    arity.div_ceil(size)
}

/// Member counts produced by grouping `arity` feeds into aggregates of
/// `size`, in emission order.
pub fn aggregate_sizes(arity: u64, size: u64) -> impl Iterator<Item = u64> {
    let count = aggregate_arity(arity, size);
    (0..count).map(move |i| if i + 1 == count { arity - i * size } else { size })
}

/// Feed-count function of a local pipeline: the composition of
/// `ceil(a / S)` over the aggregate sizes of its gates, in order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct ArityTransform {
    sizes: Vec<u64>,
}

impl ArityTransform {
    pub fn new(sizes: Vec<u64>) -> Self {
        assert!(sizes.iter().all(|&s| s >= 1), "aggregate sizes must be >= 1");
        Self { sizes }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn sizes(&self) -> &[u64] {
        &self.sizes
    }

    pub fn apply(&self, arity: u64) -> u64 {
        self.sizes.iter().fold(arity, |a, &s| aggregate_arity(a, s))
    }

    /// Feeds leaving a downstream pipeline for a batch of `arity` feeds cut
    /// into partitions of `partition_size`.
    pub fn partitioned_total(&self, arity: u64, partition_size: u64) -> u64 {
        aggregate_sizes(arity, partition_size)
            .map(|p| self.apply(p))
            .sum()
    }
}

/// Ordered list of named opaque values.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct Payload {
    entries: Vec<(String, Vec<u8>)>,
}

impl Payload {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn single(name: impl Into<String>, value: impl Into<Vec<u8>>) -> Self {
        Self::new().with(name, value)
    }

    pub fn with(mut self, name: impl Into<String>, value: impl Into<Vec<u8>>) -> Self {
        self.push(name, value);
        self
    }

    pub fn push(&mut self, name: impl Into<String>, value: impl Into<Vec<u8>>) {
        self.entries.push((name.into(), value.into()));
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn take(&mut self, name: &str) -> Option<Vec<u8>> {
        let idx = self.entries.iter().position(|(n, _)| n == name)?;
        Some(self.entries.remove(idx).1)
    }

    pub fn entries(&self) -> &[(String, Vec<u8>)] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<(String, Vec<u8>)> {
        self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn byte_len(&self) -> usize {
        self.entries.iter().map(|(n, v)| n.len() + v.len()).sum()
    }

    /// The feed signature: payload names in order.
    pub fn signature(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn signature_matches(&self, names: &[String]) -> bool {
        self.entries.len() == names.len()
            && self.entries.iter().zip(names).all(|((n, _), s)| n == s)
    }

    /// Marker carried instead of real data by feeds of a failed batch.
    pub fn failure(cause: impl Into<String>) -> Self {
        Self::single(FAILURE_ENTRY, cause.into().into_bytes())
    }

    pub fn failure_cause(&self) -> Option<String> {
        match self.entries.as_slice() {
            [(name, cause)] if name == FAILURE_ENTRY => {
                Some(String::from_utf8_lossy(cause).into_owned())
            }
            _ => None,
        }
    }

    pub fn is_failure(&self) -> bool {
        self.failure_cause().is_some()
    }
}

impl From<Vec<(String, Vec<u8>)>> for Payload {
    fn from(entries: Vec<(String, Vec<u8>)>) -> Self {
        Self { entries }
    }
}

/// One unit of pipelined data.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Feed {
    pub metadata: FeedMetadata,
    pub payload: Payload,
}

impl Feed {
    pub fn new(metadata: FeedMetadata, payload: Payload) -> Self {
        Self { metadata, payload }
    }

    pub fn is_failure(&self) -> bool {
        self.payload.is_failure()
    }
}

/// Group of feeds from the same (sub)batch emitted by one aggregate dequeue.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AggregateFeed {
    pub metadata: FeedMetadata,
    pub members: Vec<Payload>,
}

impl AggregateFeed {
    pub fn failure_cause(&self) -> Option<String> {
        self.members.iter().find_map(Payload::failure_cause)
    }
}

/// What a gate hands to a dequeuer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Delivery {
    Feed(Feed),
    Aggregate(AggregateFeed),
}

impl Delivery {
    pub fn metadata(&self) -> &FeedMetadata {
        match self {
            Delivery::Feed(f) => &f.metadata,
            Delivery::Aggregate(a) => &a.metadata,
        }
    }

    pub fn into_feed(self) -> Option<Feed> {
        match self {
            Delivery::Feed(f) => Some(f),
            Delivery::Aggregate(_) => None,
        }
    }

    pub fn into_aggregate(self) -> Option<AggregateFeed> {
        match self {
            Delivery::Aggregate(a) => Some(a),
            Delivery::Feed(_) => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn make_metadata_builds_single_frame() {
        let m = make_metadata(1, 3).unwrap();
        assert_eq!(m.frames().collect::<Vec<_>>(), vec![MetadataFrame { id: 1, arity: 3 }]);
        assert_eq!(m.depth(), 1);

        let m = make_metadata(9, 2236).unwrap();
        assert_eq!(m.innermost(), MetadataFrame { id: 9, arity: 2236 });

        assert_eq!(make_metadata(1, 0), Err(MetadataError::InvalidArity));
    }

    #[test]
    fn partition_frames_push_and_pop() {
        let m = make_metadata(9, 4).unwrap();
        let p = m.push_partition(100, 25).unwrap();
        assert_eq!(
            p.frames().collect::<Vec<_>>(),
            vec![MetadataFrame { id: 9, arity: 4 }, MetadataFrame { id: 100, arity: 25 }]
        );
        assert_eq!(p.push_partition(1, 1), Err(MetadataError::NestingLimit));

        let (outer, frame) = p.pop_partition().unwrap();
        assert_eq!(outer, m);
        assert_eq!(frame, MetadataFrame { id: 100, arity: 25 });
        assert_eq!(outer.pop_partition(), Err(MetadataError::NoPartitionFrame));

        let single = make_metadata(2, 1).unwrap().push_partition(7, 1).unwrap();
        assert_eq!(single.innermost(), MetadataFrame { id: 7, arity: 1 });
        assert_eq!(
            make_metadata(2, 1).unwrap().push_partition(7, 0),
            Err(MetadataError::InvalidArity)
        );
    }

    #[test]
    fn aggregate_arity_examples() {
        assert_eq!(aggregate_arity(2236, 10), 224);
        assert_eq!(aggregate_arity(4, 10), 1);
        assert_eq!(aggregate_arity(17, 1), 17);
        let sizes: Vec<u64> = aggregate_sizes(2236, 10).collect();
        assert_eq!(sizes.len(), 224);
        assert_eq!(sizes[223], 6);
        assert!(sizes[..223].iter().all(|&s| s == 10));
    }

    #[test]
    fn failure_marker_roundtrip() {
        let p = Payload::failure("stage `x`: boom");
        assert_eq!(p.failure_cause().as_deref(), Some("stage `x`: boom"));
        assert!(!Payload::single("a", b"b".to_vec()).is_failure());
    }

    /// Greedy grouping: take runs of `size` until nothing is left.
    fn grouping_oracle(arity: u64, size: u64) -> Vec<u64> {
        let mut left = arity;
        let mut runs = Vec::new();
        while left > 0 {
            let take = left.min(size);
            runs.push(take);
            left -= take;
        }
        runs
    }

    proptest! {
        #[test]
        fn aggregate_arity_matches_grouping(a in 1u64..20_000, s in 1u64..2_000) {
            let runs = grouping_oracle(a, s);
            prop_assert_eq!(aggregate_arity(a, s), runs.len() as u64);
            prop_assert_eq!(aggregate_sizes(a, s).collect::<Vec<_>>(), runs.clone());
            let last = *runs.last().unwrap();
            prop_assert_eq!(last, if a % s > 0 { a % s } else { s });
        }

        #[test]
        fn push_pop_is_identity(id in any::<u64>(), arity in 1u64.., pid in any::<u64>(), parity in 1u64.., seq in any::<u64>()) {
            let m = make_metadata(id, arity).unwrap().with_seq(seq);
            let pushed = m.push_partition(pid, parity).unwrap();
            prop_assert_eq!(pushed.depth(), 2);
            let (back, frame) = pushed.pop_partition().unwrap();
            prop_assert_eq!(back, m);
            prop_assert_eq!(frame, MetadataFrame { id: pid, arity: parity });
        }
    }
}
