//! Batch-aware dataflow pipelining.
//!
//! Requests enter a pipeline as batches of feeds. Stages transform one feed
//! at a time; gates between stages buffer feeds, track each batch's
//! lifecycle from the two-integer metadata every feed carries, and bound
//! resource usage with credit links. Local pipelines (gates and stages in one
//! process) are joined by global gates that cut batches into partitions and
//! reassemble them, which lets a pipeline scale across processes.

pub mod credit;
pub mod error;
pub mod gate;
pub mod metrics;
pub mod model;
pub mod node;
pub mod pipeline;
pub mod service;
pub mod stage;
pub mod topology;
pub mod trace;
pub mod transport;

pub use credit::{create_link, CreditLink, LinkScope};
pub use error::{CreditError, GateError, MetadataError};
pub use gate::{DequeueMode, Gate, GateConfig, GateOps, GateScope, IdSource};
pub use model::{
    aggregate_arity, make_metadata, AggregateFeed, ArityTransform, Delivery, Feed, FeedMetadata,
    MetadataFrame, Payload,
};
pub use pipeline::{LocalLink, LocalPipeline, PipelineError};
pub use stage::{InputMode, StageDef, StageError, StageInput, StageRunner, Transform, TransformRegistry};
pub use service::{CollectError, RequestTicket, Service, ServiceError, ServiceOptions, TicketStatus};
