//! Running a topology: one [`Service`] per device.
//!
//! The coordinator hosts the global gates (unless a phase places its input
//! gate elsewhere), assigns batch ids, and collects results from the egress
//! gate. Every device runs the local pipeline replicas assigned to it. Each
//! replica has an ingress pump pulling partitions from the global gate in
//! front of its phase and an egress pump pushing results to the next one.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use thiserror::Error;

use crate::credit::{create_link, CreditLink, LinkScope};
use crate::error::{CreditError, GateError};
use crate::gate::{AbortStatus, Gate, GateOps, IdSource};
use crate::model::{Feed, FeedMetadata, Payload};
use crate::pipeline::{LocalPipeline, PipelineError};
use crate::stage::{StageDef, StageError, TransformRegistry};
use crate::topology::{Topology, TopologyError};
use crate::trace::{Event, EventKind, Recorder, Tracer};
use crate::transport::{
    Connection, FrontEnd, FrontError, GateHost, GateServer, RemoteCreditSink, RemoteGate,
    RetryBudget, TransportError,
};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("device `{0}` is not in the topology")]
    UnknownDevice(String),
    #[error("a device name is required for distributed topologies")]
    DeviceRequired,
    #[error("bootstrap failed: {0}")]
    Bootstrap(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Stage(#[from] StageError),
    #[error(transparent)]
    Credit(#[from] CreditError),
    #[error("requests need at least one input")]
    InvalidArity,
    #[error("service is shut down")]
    Closed,
    #[error("device `{0}` does not accept requests")]
    NotCoordinator(String),
    #[error(transparent)]
    Gate(#[from] GateError),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CollectError {
    #[error("request {batch} failed: {cause}")]
    Failed { batch: u64, cause: String },
    #[error("unknown ticket {0}")]
    NotFound(u64),
    #[error("service is shut down")]
    Closed,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TicketStatus {
    Open,
    Complete,
    Failed(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RequestTicket {
    pub batch_id: u64,
    pub arity: u64,
    pub submitted_at_ns: u64,
    pub status: TicketStatus,
}

#[derive(Clone, Debug)]
pub struct ServiceOptions {
    /// Address to listen on instead of the one in the topology.
    pub listen: Option<String>,
    pub retry: RetryBudget,
    pub recorder: Option<Recorder>,
}

impl Default for ServiceOptions {
    fn default() -> Self {
        Self {
            listen: None,
            retry: RetryBudget::default(),
            recorder: None,
        }
    }
}

struct TicketEntry {
    ticket: RequestTicket,
    results: Vec<Feed>,
}

#[derive(Default)]
struct Tickets {
    entries: HashMap<u64, TicketEntry>,
}

/// Counting semaphore bounding partitions held by one replica.
struct Slots {
    state: Mutex<(usize, bool)>,
    cv: Condvar,
}

impl Slots {
    fn new(n: usize) -> Self {
        Self {
            state: Mutex::new((n, false)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> bool {
        let mut st = self.state.lock().unwrap();
        while st.0 == 0 && !st.1 {
            st = self.cv.wait(st).unwrap();
        }
        if st.1 {
            return false;
        }
        st.0 -= 1;
        true
    }

    fn release(&self) {
        self.state.lock().unwrap().0 += 1;
        self.cv.notify_one();
    }

    fn close(&self) {
        self.state.lock().unwrap().1 = true;
        self.cv.notify_all();
    }
}

struct Inner {
    device: Option<String>,
    coordinator: bool,
    topology: Topology,
    tracer: Tracer,
    recorder: Option<Recorder>,
    ids: IdSource,
    /// Global gates hosted here, by index.
    global: Vec<Option<Arc<Gate>>>,
    /// Global links whose two ends both live here.
    local_global_links: Vec<(usize, usize, Arc<CreditLink>)>,
    /// Global gates hosted on other devices, by index and address.
    remote_gates: Vec<(u32, String)>,
    /// Proxies opened by the pumps, closed on teardown.
    proxies: Mutex<Vec<Arc<RemoteGate>>>,
    tickets: Mutex<Tickets>,
    completed: Condvar,
    shut: AtomicBool,
    /// Pump threads still running.
    pumps: Mutex<usize>,
    pumps_done: Condvar,
}

/// A running device of a topology.
pub struct Service {
    inner: Arc<Inner>,
    server: Option<GateServer>,
    /// Each replica's pipeline until its ingress pump drains it.
    pipelines: Vec<Arc<Mutex<Option<LocalPipeline>>>>,
    local_gates: Vec<Vec<Arc<Gate>>>,
    threads: Vec<JoinHandle<()>>,
    slots: Vec<Arc<Slots>>,
}

impl std::fmt::Debug for Service {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Service")
            .field("device", &self.inner.device)
            .field("coordinator", &self.inner.coordinator)
            .field("replicas", &self.local_gates.len())
            .finish_non_exhaustive()
    }
}

fn tracer_for(recorder: Option<&Recorder>, name: &str) -> Tracer {
    recorder.map_or_else(Tracer::disabled, |r| r.tracer(name))
}

impl Service {
    /// Instantiates the part of `topology` that belongs to `device` (`None`
    /// for single-process topologies) and starts it.
    pub fn start(
        topology: &Topology,
        device: Option<&str>,
        registry: &TransformRegistry,
        options: ServiceOptions,
    ) -> Result<Self, ServiceError> {
        topology.validate()?;
        topology.validate_transforms(registry)?;
        let distributed = topology.is_distributed();
        let device = match (distributed, device) {
            (false, _) => None,
            (true, None) => return Err(ServiceError::DeviceRequired),
            (true, Some(d)) => {
                topology
                    .device(d)
                    .ok_or_else(|| ServiceError::UnknownDevice(d.to_owned()))?;
                Some(d.to_owned())
            }
        };
        let me = device.as_deref();
        let coordinator = !distributed || topology.coordinator() == me;
        let recorder = options.recorder.clone();
        let rec = recorder.as_ref();
        let ids = if coordinator {
            IdSource::default()
        } else {
            // Keeps partition ids of gates hosted elsewhere out of the
            // coordinator's range.
            let index = topology.devices.iter().position(|d| Some(d.name.as_str()) == me);
            IdSource::starting_at(((index.unwrap_or(0) as u64) + 1) << 48)
        };

        let hosts = |g: usize| !distributed || topology.global_gate_device(g) == me;
        let mut global = Vec::new();
        for g in 0..topology.global_gate_count() {
            global.push(if hosts(g) {
                let config = topology.global_gate_config(g);
                let tracer = tracer_for(rec, &config.name);
                let gate = Gate::new(config, tracer, Some(ids.clone()))
                    .map_err(ServiceError::Bootstrap)?;
                Some(gate)
            } else {
                None
            });
        }

        let mut host = GateHost::new(me.unwrap_or("local"));
        let mut local_global_links = Vec::new();
        let mut remote_sinks = Vec::new();
        for (id, l) in topology.global_credit_links.iter().enumerate() {
            let id = id as u32;
            let tracer = tracer_for(rec, &format!("global-link{id}"));
            match (&global[l.to], &global[l.from]) {
                (Some(up), Some(down)) => {
                    let link = create_link(id, up, down, l.initial, LinkScope::Global, tracer)?;
                    local_global_links.push((l.to, l.from, link.clone()));
                    host = host.with_link(link);
                }
                (Some(up), None) => {
                    let name = format!(
                        "{}->{}",
                        topology.global_gate_name(l.from),
                        topology.global_gate_name(l.to)
                    );
                    let link = CreditLink::new(id, name, l.initial, LinkScope::Global, tracer)?;
                    up.add_credit_source(link.clone());
                    host = host.with_link(link);
                }
                (None, Some(down)) => remote_sinks.push((id, l.to, down.clone())),
                (None, None) => {}
            }
        }
        for (g, gate) in global.iter().enumerate() {
            if let Some(gate) = gate {
                host = host.with_gate(g as u32, gate.clone());
            }
        }

        let mut inner = Inner {
            device: device.clone(),
            coordinator,
            topology: topology.clone(),
            tracer: tracer_for(rec, "service"),
            recorder: recorder.clone(),
            ids,
            global,
            local_global_links,
            remote_gates: Vec::new(),
            proxies: Mutex::new(Vec::new()),
            tickets: Mutex::new(Tickets::default()),
            completed: Condvar::new(),
            shut: AtomicBool::new(false),
            pumps: Mutex::new(0),
            pumps_done: Condvar::new(),
        };
        if distributed {
            for g in 0..topology.global_gate_count() {
                if inner.global[g].is_none() {
                    inner.remote_gates.push((g as u32, inner.gate_address(g)));
                }
            }
        }
        let inner = Arc::new(inner);

        let mut server = None;
        if let Some(me) = me {
            let host = Arc::new(host);
            if coordinator {
                host.set_frontend(inner.clone());
            }
            let weak = Arc::downgrade(&inner);
            host.set_lost_hook(Arc::new(move |peer: &str, batches: Vec<u64>| {
                if let Some(inner) = weak.upgrade() {
                    inner.connection_lost(peer, batches);
                }
            }));
            let addr = options
                .listen
                .clone()
                .unwrap_or_else(|| topology.device(me).expect("checked").address.clone());
            server = Some(GateServer::bind(&addr, host).map_err(|e| {
                ServiceError::Bootstrap(format!("`{me}` cannot listen on {addr}: {e}"))
            })?);
            for peer in topology.devices.iter().filter(|d| d.name != me) {
                Connection::connect(&peer.address, me, options.retry).map_err(|e| {
                    ServiceError::Bootstrap(format!("`{me}` cannot reach `{}`: {e}", peer.name))
                })?;
            }
            for (id, to, down) in remote_sinks {
                let addr = inner.gate_address(to);
                let sink = RemoteCreditSink::connect(&addr, id, me, options.retry)?;
                down.add_credit_sink(Arc::new(sink));
            }
        }

        let mut service = Self {
            inner,
            server,
            pipelines: Vec::new(),
            local_gates: Vec::new(),
            threads: Vec::new(),
            slots: Vec::new(),
        };
        if let Err(e) = service.start_replicas(registry, options.retry) {
            service.teardown();
            return Err(e);
        }
        if coordinator {
            let inner = service.inner.clone();
            let egress = inner.global.last().cloned().flatten().expect("coordinator hosts egress");
            service.threads.push(
                thread::Builder::new()
                    .name("collector".into())
                    .spawn(move || inner.collect_loop(&egress))
                    .expect("spawn collector"),
            );
        }
        Ok(service)
    }

    fn start_replicas(
        &mut self,
        registry: &TransformRegistry,
        retry: RetryBudget,
    ) -> Result<(), ServiceError> {
        let topo = self.inner.topology.clone();
        let me = self.inner.device.clone();
        let rec = self.inner.recorder.clone();
        for (p, phase) in topo.phases.iter().enumerate() {
            for (r, dev) in topo.replica_devices(p).into_iter().enumerate() {
                if topo.is_distributed() && dev != me {
                    continue;
                }
                let name = topo.replica_name(p, r);
                let stages = phase
                    .stages
                    .iter()
                    .zip(phase.gate_configs())
                    .map(|(s, gate)| {
                        let transform = registry.build(&s.transform, &s.params)?;
                        let mut def = StageDef {
                            name: s.name.clone(),
                            input_mode: crate::stage::InputMode::Plain,
                            transform,
                            replicas: s.replicas,
                        };
                        if let crate::gate::DequeueMode::Aggregate(size) = gate.mode {
                            def = def.aggregating(size);
                        }
                        Ok(Arc::new(def))
                    })
                    .collect::<Result<Vec<_>, StageError>>()?;
                let pipeline = LocalPipeline::start(
                    &name,
                    phase.gate_configs(),
                    stages,
                    &phase.local_links(),
                    rec.as_ref(),
                )?;
                let up = self.inner.global_handle(p, &format!("{name}/in"), retry)?;
                let down = self.inner.global_handle(p + 1, &format!("{name}/out"), retry)?;
                let slots = Arc::new(Slots::new(phase.partitions_in_flight));
                self.local_gates.push(pipeline.gates().to_vec());
                self.spawn_pumps(&name, pipeline, up, down, slots.clone());
                self.slots.push(slots);
            }
        }
        Ok(())
    }

    fn spawn_pumps(
        &mut self,
        name: &str,
        pipeline: LocalPipeline,
        up: Arc<dyn GateOps>,
        down: Arc<dyn GateOps>,
        slots: Arc<Slots>,
    ) {
        *self.inner.pumps.lock().unwrap() += 2;
        let input = pipeline.input().clone();
        let output = pipeline.output().clone();
        let pipeline = Arc::new(Mutex::new(Some(pipeline)));
        self.pipelines.push(pipeline.clone());
        let inner = self.inner.clone();
        let ingress_slots = slots.clone();
        let ingress = move || {
            ingress_pump(&*up, &input, &ingress_slots);
            // Nothing more will arrive; let the pipeline drain into egress.
            let taken = pipeline.lock().unwrap().take();
            if let Some(p) = taken {
                if let Err(e) = p.drain() {
                    log::error!("{e}");
                }
            }
        };
        let egress = move || egress_pump(&output, &*down, &slots);
        for (suffix, body) in [
            ("ingress", Box::new(ingress) as Box<dyn FnOnce() + Send>),
            ("egress", Box::new(egress)),
        ] {
            let inner = inner.clone();
            self.threads.push(
                thread::Builder::new()
                    .name(format!("{name}/{suffix}"))
                    .spawn(move || {
                        body();
                        let mut n = inner.pumps.lock().unwrap();
                        *n -= 1;
                        inner.pumps_done.notify_all();
                    })
                    .expect("spawn pump"),
            );
        }
    }

    pub fn device(&self) -> Option<&str> {
        self.inner.device.as_deref()
    }

    pub fn is_coordinator(&self) -> bool {
        self.inner.coordinator
    }

    pub fn local_addr(&self) -> Option<std::net::SocketAddr> {
        self.server.as_ref().map(GateServer::local_addr)
    }

    /// Request front end, for serving over a [`GateServer`] of its own.
    pub fn frontend(&self) -> Arc<dyn FrontEnd> {
        self.inner.clone()
    }

    pub fn recorder(&self) -> Option<&Recorder> {
        self.inner.recorder.as_ref()
    }

    /// Global gate `g`, if hosted here.
    pub fn global_gate(&self, g: usize) -> Option<&Arc<Gate>> {
        self.inner.global.get(g).and_then(Option::as_ref)
    }

    /// Gates of each local pipeline replica started here.
    pub fn local_gates(&self) -> &[Vec<Arc<Gate>>] {
        &self.local_gates
    }

    pub fn submit(&self, inputs: Vec<Payload>) -> Result<RequestTicket, ServiceError> {
        self.inner.submit(inputs)
    }

    pub fn collect(&self, ticket: &RequestTicket) -> Result<Vec<Payload>, CollectError> {
        self.inner.collect(ticket.batch_id)
    }

    pub fn collect_id(&self, batch_id: u64) -> Result<Vec<Payload>, CollectError> {
        self.inner.collect(batch_id)
    }

    pub fn status(&self, batch_id: u64) -> Option<TicketStatus> {
        let t = self.inner.tickets.lock().unwrap();
        t.entries.get(&batch_id).map(|e| e.ticket.status.clone())
    }

    /// Blocks until the service is shut down (coordinator) or, on other
    /// devices, until the pumps stopped and every gate hosted here closed.
    pub fn wait(&self) {
        let mut n = self.inner.pumps.lock().unwrap();
        loop {
            let hosted_closed = self.inner.global.iter().flatten().all(|g| g.is_shut_down());
            let idle = !self.inner.coordinator && *n == 0 && hosted_closed;
            if self.inner.shut.load(Ordering::SeqCst) || idle {
                break;
            }
            n = self
                .inner
                .pumps_done
                .wait_timeout(n, Duration::from_millis(100))
                .unwrap()
                .0;
        }
    }

    /// Stops every gate, pump and stage on this device.
    pub fn shutdown(mut self) {
        self.teardown();
    }

    fn teardown(&mut self) {
        self.inner.shut_down();
        for s in &self.slots {
            s.close();
        }
        for r in self.inner.proxies.lock().unwrap().iter() {
            r.disconnect();
        }
        for gate in self.local_gates.iter().flatten() {
            gate.shutdown();
        }
        for p in self.pipelines.drain(..) {
            let taken = p.lock().unwrap().take();
            if let Some(p) = taken {
                p.stop();
            }
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        if let Some(mut server) = self.server.take() {
            server.stop();
        }
        if let Some(r) = &self.inner.recorder {
            if let Err(e) = r.finish() {
                log::warn!("flushing run log: {e}");
            }
        }
    }
}

impl Drop for Service {
    fn drop(&mut self) {
        self.teardown();
    }
}

fn ingress_pump(up: &dyn GateOps, input: &Gate, slots: &Slots) {
    while slots.acquire() {
        let delivery = match up.take() {
            Ok(d) => d,
            Err(e) => {
                if !e.is_closed() {
                    log::error!("{}: {e}", up.name());
                }
                return;
            }
        };
        let Some(partition) = delivery.into_aggregate() else {
            log::error!("{}: global gate handed out a single feed", up.name());
            return;
        };
        let md = partition.metadata;
        let feeds = partition
            .members
            .into_iter()
            .enumerate()
            .map(|(k, p)| Feed::new(md.with_seq(k as u64), p))
            .collect();
        if let Err(e) = input.enqueue_all(feeds) {
            if !e.is_closed() {
                log::error!("{}: {e}", input.name());
            }
            return;
        }
    }
}

fn egress_pump(output: &Gate, down: &dyn GateOps, slots: &Slots) {
    loop {
        let feed = match output.dequeue() {
            Ok(f) => f,
            Err(_) => return,
        };
        let key = feed.metadata.innermost().id;
        if let Err(e) = down.enqueue(feed) {
            if !e.is_closed() {
                log::error!("{}: {e}", down.name());
            }
            return;
        }
        if output.has_closed(key) {
            slots.release();
        }
    }
}

impl Inner {
    fn gate_address(&self, g: usize) -> String {
        let dev = self
            .topology
            .global_gate_device(g)
            .expect("distributed topologies place every gate");
        self.topology.device(dev).expect("validated").address.clone()
    }

    fn global_handle(
        &self,
        g: usize,
        name: &str,
        retry: RetryBudget,
    ) -> Result<Arc<dyn GateOps>, ServiceError> {
        if let Some(gate) = &self.global[g] {
            return Ok(gate.clone());
        }
        let me = self.device.as_deref().expect("remote gates only in distributed topologies");
        let remote = RemoteGate::connect(
            format!("{}@{name}", self.topology.global_gate_name(g)),
            &self.gate_address(g),
            g as u32,
            me,
            retry,
        )?;
        let remote = Arc::new(remote);
        self.proxies.lock().unwrap().push(remote.clone());
        Ok(remote)
    }

    fn shut_down(&self) {
        if self.shut.swap(true, Ordering::SeqCst) {
            return;
        }
        for g in self.global.iter().flatten() {
            g.shutdown();
        }
        if self.coordinator {
            let me = self.device.as_deref().unwrap_or("coordinator");
            for (id, addr) in &self.remote_gates {
                let sent = Connection::connect(addr, me, RetryBudget::once()).and_then(|mut c| {
                    c.send(&crate::transport::proto::shutdown(*id))?;
                    c.recv()
                });
                if let Err(e) = sent {
                    log::warn!("shutting down global gate {id} at {addr}: {e}");
                }
            }
        }
        self.completed.notify_all();
        self.pumps_done.notify_all();
    }

    fn submit(&self, inputs: Vec<Payload>) -> Result<RequestTicket, ServiceError> {
        if !self.coordinator {
            return Err(ServiceError::NotCoordinator(self.device.clone().unwrap_or_default()));
        }
        if inputs.is_empty() {
            return Err(ServiceError::InvalidArity);
        }
        if self.shut.load(Ordering::SeqCst) {
            return Err(ServiceError::Closed);
        }
        let ingress = self.global[0].as_ref().expect("coordinator hosts ingress");
        let arity = inputs.len() as u64;
        let batch = self.ids.next();
        let md = FeedMetadata::new(batch, arity).expect("non-empty");
        let ticket = RequestTicket {
            batch_id: batch,
            arity,
            submitted_at_ns: self.recorder.as_ref().map_or(0, Recorder::now_ns),
            status: TicketStatus::Open,
        };
        self.tickets.lock().unwrap().entries.insert(
            batch,
            TicketEntry {
                ticket: ticket.clone(),
                results: Vec::new(),
            },
        );
        self.tracer
            .record(Event::new(EventKind::RequestSubmit, batch).arity(arity));
        let feeds = inputs
            .into_iter()
            .enumerate()
            .map(|(k, p)| Feed::new(md.with_seq(k as u64), p))
            .collect();
        if let Err(e) = ingress.enqueue_all(feeds) {
            self.tickets.lock().unwrap().entries.remove(&batch);
            return Err(if e.is_closed() { ServiceError::Closed } else { e.into() });
        }
        Ok(ticket)
    }

    fn collect_loop(&self, egress: &Gate) {
        while let Ok(feed) = egress.dequeue() {
            let batch = feed.metadata.batch().id;
            let closed = egress.has_closed(batch);
            let mut t = self.tickets.lock().unwrap();
            let Some(entry) = t.entries.get_mut(&batch) else {
                continue;
            };
            entry.results.push(feed);
            if !closed {
                continue;
            }
            entry.results.sort_by_key(|f| f.metadata.feed_seq);
            let failure = entry.results.iter().find_map(|f| f.payload.failure_cause());
            entry.ticket.status = match failure {
                Some(cause) => TicketStatus::Failed(cause),
                None => TicketStatus::Complete,
            };
            self.tracer.record(
                Event::new(EventKind::RequestComplete, batch)
                    .arity(entry.ticket.arity)
                    .count(entry.results.len() as u64),
            );
            drop(t);
            self.completed.notify_all();
        }
    }

    fn collect(&self, batch: u64) -> Result<Vec<Payload>, CollectError> {
        let mut t = self.tickets.lock().unwrap();
        loop {
            let entry = t.entries.get(&batch).ok_or(CollectError::NotFound(batch))?;
            match &entry.ticket.status {
                TicketStatus::Open if self.shut.load(Ordering::SeqCst) => {
                    return Err(CollectError::Closed)
                }
                TicketStatus::Open => t = self.completed.wait(t).unwrap(),
                TicketStatus::Complete => {
                    let entry = t.entries.remove(&batch).expect("present");
                    return Ok(entry.results.into_iter().map(|f| f.payload).collect());
                }
                TicketStatus::Failed(cause) => {
                    let cause = cause.clone();
                    t.entries.remove(&batch);
                    return Err(CollectError::Failed { batch, cause });
                }
            }
        }
    }

    /// Fails the batches whose partitions went to a peer that disappeared.
    fn connection_lost(&self, peer: &str, batches: Vec<u64>) {
        let egress = self.global.last().and_then(Option::as_ref);
        let mut seen = std::collections::HashSet::new();
        for batch in batches {
            if !seen.insert(batch) || egress.is_some_and(|g| g.has_closed(batch)) {
                continue;
            }
            if self.shut.load(Ordering::SeqCst) {
                return;
            }
            log::error!("connection to {peer} lost with batch {batch} in flight");
            let status: Vec<Option<AbortStatus>> = self
                .global
                .iter()
                .map(|g| g.as_ref().map(|g| g.abort_batch(batch)))
                .collect();
            for (up, down, link) in &self.local_global_links {
                let opened = matches!(status[*up], Some(AbortStatus::Opened | AbortStatus::Closed));
                if opened && status[*down] != Some(AbortStatus::Closed) {
                    if let Err(e) = link.release(batch) {
                        log::error!("{e}");
                    }
                }
            }
            let mut t = self.tickets.lock().unwrap();
            if let Some(entry) = t.entries.get_mut(&batch) {
                if entry.ticket.status == TicketStatus::Open {
                    entry.ticket.status = TicketStatus::Failed(format!("connection to {peer} lost"));
                }
            }
            drop(t);
            self.completed.notify_all();
        }
    }
}

impl FrontEnd for Inner {
    fn submit(&self, inputs: Vec<Payload>) -> Result<(u64, u64), FrontError> {
        Inner::submit(self, inputs)
            .map(|t| (t.batch_id, t.arity))
            .map_err(|e| match e {
                ServiceError::Closed => FrontError::Closed,
                other => FrontError::Invalid(other.to_string()),
            })
    }

    fn collect(&self, batch: u64) -> Result<Vec<Payload>, FrontError> {
        Inner::collect(self, batch).map_err(|e| match e {
            CollectError::Failed { cause, .. } => FrontError::Failed(cause),
            CollectError::NotFound(b) => FrontError::NotFound(b),
            CollectError::Closed => FrontError::Closed,
        })
    }

    fn shutdown(&self) {
        self.shut_down();
    }
}
