//! Stages and the runners that drive them.
//!
//! A stage is a stateless transform producing exactly one output payload per
//! input feed or aggregate. Runners are framework loops: dequeue from the
//! upstream gate, apply the transform, enqueue downstream with the input's
//! metadata. A replicated stage is simply several runners sharing the same
//! pair of gates.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use thiserror::Error;

use crate::error::GateError;
use crate::gate::GateOps;
use crate::model::{Delivery, Feed, Payload};
use crate::trace::{Event, EventKind, Tracer};

/// Input handed to a transform.
#[derive(Clone, Copy, Debug)]
pub enum StageInput<'a> {
    Feed(&'a Payload),
    Aggregate(&'a [Payload]),
}

impl<'a> StageInput<'a> {
    /// Members as a slice; a single feed is a one-element slice.
    pub fn members(&self) -> &'a [Payload] {
        match self {
            StageInput::Feed(p) => std::slice::from_ref(*p),
            StageInput::Aggregate(m) => m,
        }
    }
}

/// User code of a stage. Must be safe to call concurrently and keep no state
/// between calls.
pub trait Transform: Send + Sync {
    fn apply(&self, input: StageInput<'_>) -> Result<Payload, String>;
}

impl<F> Transform for F
where
    F: Fn(StageInput<'_>) -> Result<Payload, String> + Send + Sync,
{
    fn apply(&self, input: StageInput<'_>) -> Result<Payload, String> {
        self(input)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputMode {
    Plain,
    Aggregate(u64),
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error("stage `{0}` needs at least one replica")]
    NoReplicas(String),
    #[error("no transform registered as `{0}`")]
    UnknownTransform(String),
    #[error("transform `{name}`: {reason}")]
    BadParams { name: String, reason: String },
    #[error("stage `{stage}` replica {replica}: {source}")]
    Gate {
        stage: String,
        replica: usize,
        #[source]
        source: GateError,
    },
}

pub struct StageDef {
    pub name: String,
    pub input_mode: InputMode,
    pub transform: Arc<dyn Transform>,
    pub replicas: usize,
}

impl fmt::Debug for StageDef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StageDef")
            .field("name", &self.name)
            .field("input_mode", &self.input_mode)
            .field("replicas", &self.replicas)
            .finish_non_exhaustive()
    }
}

impl StageDef {
    pub fn new(name: impl Into<String>, transform: impl Transform + 'static) -> Self {
        Self {
            name: name.into(),
            input_mode: InputMode::Plain,
            transform: Arc::new(transform),
            replicas: 1,
        }
    }

    pub fn aggregating(mut self, size: u64) -> Self {
        self.input_mode = InputMode::Aggregate(size);
        self
    }

    pub fn replicas(mut self, n: usize) -> Self {
        self.replicas = n;
        self
    }
}

pub struct StageRunner {
    stage: Arc<StageDef>,
    upstream: Arc<dyn GateOps>,
    downstream: Arc<dyn GateOps>,
    replica_index: usize,
    tracer: Tracer,
}

impl fmt::Debug for StageRunner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StageRunner")
            .field("stage", &self.stage.name)
            .field("replica", &self.replica_index)
            .field("upstream", &self.upstream.name())
            .field("downstream", &self.downstream.name())
            .finish()
    }
}

impl StageRunner {
    pub fn new(
        stage: Arc<StageDef>,
        upstream: Arc<dyn GateOps>,
        downstream: Arc<dyn GateOps>,
        replica_index: usize,
        tracer: Tracer,
    ) -> Self {
        Self {
            stage,
            upstream,
            downstream,
            replica_index,
            tracer,
        }
    }

    pub fn replica_index(&self) -> usize {
        self.replica_index
    }

    /// Processes one input. `Ok(false)` once either gate is shut down.
    pub fn run_once(&self) -> Result<bool, StageError> {
        let delivery = match self.upstream.take() {
            Ok(d) => d,
            Err(e) if e.is_closed() => return Ok(false),
            Err(e) => return Err(self.gate_error(e)),
        };
        let md = *delivery.metadata();
        let event = |kind| {
            Event::new(kind, md.batch().id).partition(md.partition().map(|p| p.id))
        };
        self.tracer.record(event(EventKind::StageStart));
        let (metadata, result) = match &delivery {
            Delivery::Feed(f) => match f.payload.failure_cause() {
                Some(cause) => (f.metadata, Err(cause)),
                None => (f.metadata, self.apply(StageInput::Feed(&f.payload))),
            },
            Delivery::Aggregate(a) => match a.failure_cause() {
                Some(cause) => (a.metadata, Err(cause)),
                None => (a.metadata, self.apply(StageInput::Aggregate(&a.members))),
            },
        };
        let payload = result.unwrap_or_else(Payload::failure);
        self.tracer.record(event(EventKind::StageEnd));
        let outcome = match self.downstream.enqueue(Feed::new(metadata, payload)) {
            // An output of the wrong shape fails its batch, not the runner.
            Err(e @ GateError::SignatureError { .. }) => {
                let cause = format!("stage `{}`: {e}", self.stage.name);
                self.downstream.enqueue(Feed::new(metadata, Payload::failure(cause)))
            }
            other => other,
        };
        match outcome {
            Ok(()) => Ok(true),
            Err(e) if e.is_closed() => Ok(false),
            Err(e) => Err(self.gate_error(e)),
        }
    }

    /// Runs until the pipeline shuts down; returns the number of inputs
    /// processed.
    pub fn run_loop(&self) -> Result<u64, StageError> {
        let mut done = 0;
        while self.run_once()? {
            done += 1;
        }
        Ok(done)
    }

    pub fn spawn(self) -> JoinHandle<Result<u64, StageError>> {
        let name = format!("{}#{}", self.stage.name, self.replica_index);
        thread::Builder::new()
            .name(name)
            .spawn(move || self.run_loop())
            .expect("spawn stage runner")
    }

    fn apply(&self, input: StageInput<'_>) -> Result<Payload, String> {
        self.stage
            .transform
            .apply(input)
            .map_err(|e| format!("stage `{}`: {e}", self.stage.name))
    }

    fn gate_error(&self, source: GateError) -> StageError {
        StageError::Gate {
            stage: self.stage.name.clone(),
            replica: self.replica_index,
            source,
        }
    }
}

/// Builds `n` independent runners for `stage`; `endpoints(i)` supplies the
/// gate handles of replica `i`.
pub fn replicate(
    stage: Arc<StageDef>,
    n: usize,
    tracer: &Tracer,
    mut endpoints: impl FnMut(usize) -> (Arc<dyn GateOps>, Arc<dyn GateOps>),
) -> Result<Vec<StageRunner>, StageError> {
    if n == 0 {
        return Err(StageError::NoReplicas(stage.name.clone()));
    }
    Ok((0..n)
        .map(|i| {
            let (up, down) = endpoints(i);
            StageRunner::new(stage.clone(), up, down, i, tracer.clone())
        })
        .collect())
}

/// Parameters of a registered transform, as written in a topology file.
pub type Params = toml::Table;

type Factory = Arc<dyn Fn(&Params) -> Result<Arc<dyn Transform>, String> + Send + Sync>;

/// Named transform factories that topology files refer to.
#[derive(Clone, Default)]
pub struct TransformRegistry {
    factories: HashMap<String, Factory>,
}

impl fmt::Debug for TransformRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut names: Vec<_> = self.factories.keys().collect();
        names.sort();
        f.debug_struct("TransformRegistry").field("names", &names).finish()
    }
}

impl TransformRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F, T>(&mut self, name: impl Into<String>, factory: F)
    where
        F: Fn(&Params) -> Result<T, String> + Send + Sync + 'static,
        T: Transform + 'static,
    {
        self.factories.insert(
            name.into(),
            Arc::new(move |p| factory(p).map(|t| Arc::new(t) as Arc<dyn Transform>)),
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    pub fn build(&self, name: &str, params: &Params) -> Result<Arc<dyn Transform>, StageError> {
        let factory = self
            .factories
            .get(name)
            .ok_or_else(|| StageError::UnknownTransform(name.to_owned()))?;
        factory(params).map_err(|reason| StageError::BadParams {
            name: name.to_owned(),
            reason,
        })
    }
}

/// Reads an optional unsigned integer parameter.
pub fn param_u64(params: &Params, key: &str, default: u64) -> Result<u64, String> {
    match params.get(key) {
        None => Ok(default),
        Some(toml::Value::Integer(v)) if *v >= 0 => Ok(*v as u64),
        Some(other) => Err(format!("`{key}` must be a non-negative integer, got {other}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gate::{Gate, GateConfig};
    use crate::model::make_metadata;

    fn identity() -> impl Transform {
        |input: StageInput<'_>| Ok(input.members()[0].clone())
    }

    fn feeds(batch: u64, n: u64) -> Vec<Feed> {
        (0..n)
            .map(|s| {
                Feed::new(
                    make_metadata(batch, n).unwrap().with_seq(s),
                    Payload::single("v", vec![s as u8]),
                )
            })
            .collect()
    }

    fn runner(stage: StageDef, up: &Arc<Gate>, down: &Arc<Gate>) -> StageRunner {
        StageRunner::new(Arc::new(stage), up.clone(), down.clone(), 0, Tracer::disabled())
    }

    #[test]
    fn identity_passes_payload_and_metadata() {
        let up = Gate::standalone(GateConfig::plain("up"));
        let down = Gate::standalone(GateConfig::plain("down"));
        let input = feeds(1, 1).pop().unwrap();
        up.enqueue(input.clone()).unwrap();
        let r = runner(StageDef::new("id", identity()), &up, &down);
        assert!(r.run_once().unwrap());
        assert_eq!(down.dequeue().unwrap(), input);
    }

    #[test]
    fn aggregate_stage_runs_once_per_aggregate() {
        let up = Gate::standalone(GateConfig::aggregate("up", 10));
        let down = Gate::standalone(GateConfig::plain("down"));
        up.enqueue_all(feeds(1, 2236)).unwrap();
        up.shutdown();
        let count = |input: StageInput<'_>| {
            Ok(Payload::single("n", (input.members().len() as u64).to_le_bytes().to_vec()))
        };
        let r = runner(StageDef::new("count", count).aggregating(10), &up, &down);
        assert_eq!(r.run_loop().unwrap(), 224);
        let first = down.dequeue().unwrap();
        assert_eq!(first.metadata.innermost().arity, 224);
    }

    #[test]
    fn transform_error_becomes_failure_marker() {
        let up = Gate::standalone(GateConfig::plain("up"));
        let down = Gate::standalone(GateConfig::plain("down"));
        up.enqueue_all(feeds(1, 2)).unwrap();
        let picky = |input: StageInput<'_>| {
            let p = input.members()[0].clone();
            if p.get("v") == Some(&[1u8][..]) {
                Err("bad value".to_owned())
            } else {
                Ok(p)
            }
        };
        let r = runner(StageDef::new("picky", picky), &up, &down);
        r.run_once().unwrap();
        assert!(!down.dequeue().unwrap().is_failure());
        r.run_once().unwrap();
        let failed = down.dequeue().unwrap();
        assert_eq!(
            failed.payload.failure_cause().as_deref(),
            Some("stage `picky`: bad value")
        );
    }

    #[test]
    fn misshapen_output_fails_the_batch() {
        let up = Gate::standalone(GateConfig::plain("up"));
        let down = Gate::standalone(GateConfig::plain("down"));
        up.enqueue_all(feeds(1, 2)).unwrap();
        let shifty = |input: StageInput<'_>| {
            let mut p = input.members()[0].clone();
            if p.get("v") == Some(&[1u8][..]) {
                p.push("extra", Vec::new());
            }
            Ok(p)
        };
        let r = runner(StageDef::new("shifty", shifty), &up, &down);
        assert!(r.run_once().unwrap());
        assert!(r.run_once().unwrap());
        let causes: Vec<_> = (0..2)
            .filter_map(|_| down.dequeue().unwrap().payload.failure_cause())
            .collect();
        assert!(!causes.is_empty());
        assert!(causes.iter().all(|c| c.starts_with("stage `shifty`:")), "{causes:?}");
    }

    #[test]
    fn shut_down_empty_pipeline_exits_immediately() {
        let up = Gate::standalone(GateConfig::plain("up"));
        let down = Gate::standalone(GateConfig::plain("down"));
        up.shutdown();
        assert_eq!(runner(StageDef::new("id", identity()), &up, &down).run_loop().unwrap(), 0);
    }

    #[test]
    fn replicas_share_the_work() {
        let up = Gate::standalone(GateConfig::plain("up"));
        let down = Gate::standalone(GateConfig::plain("down"));
        let stage = Arc::new(StageDef::new("id", identity()));
        let runners = replicate(stage, 2, &Tracer::disabled(), |_| {
            (up.clone() as Arc<dyn GateOps>, down.clone() as Arc<dyn GateOps>)
        })
        .unwrap();
        let handles: Vec<_> = runners.into_iter().map(StageRunner::spawn).collect();
        up.enqueue_all(feeds(1, 4)).unwrap();
        let mut out: Vec<u64> = (0..4).map(|_| down.dequeue().unwrap().metadata.feed_seq).collect();
        up.shutdown();
        let total: u64 = handles.into_iter().map(|h| h.join().unwrap().unwrap()).sum();
        assert_eq!(total, 4);
        out.sort();
        assert_eq!(out, vec![0, 1, 2, 3]);
    }

    #[test]
    fn zero_replicas_rejected() {
        let stage = Arc::new(StageDef::new("id", identity()));
        let g = Gate::standalone(GateConfig::plain("g"));
        let err = replicate(stage, 0, &Tracer::disabled(), |_| {
            (g.clone() as Arc<dyn GateOps>, g.clone() as Arc<dyn GateOps>)
        })
        .unwrap_err();
        assert!(matches!(err, StageError::NoReplicas(_)));
    }

    #[test]
    fn registry_builds_by_name() {
        let mut reg = TransformRegistry::new();
        reg.register("id", |_: &Params| Ok(identity()));
        assert!(reg.build("id", &Params::new()).is_ok());
        assert!(matches!(
            reg.build("nope", &Params::new()),
            Err(StageError::UnknownTransform(_))
        ));
    }
}
