//! Declarative pipeline topologies.
//!
//! A topology is a list of phases. Each phase is a local pipeline (gates and
//! stages alternating) that may be replicated across devices. Global gates
//! are derived: the gate in front of phase `i` partitions batches for it, and
//! every global gate after the first reassembles the partitions of the phase
//! before it. The last global gate is the egress the service collects from.
//!
//! ```toml
//! [service]
//! coordinator = "coord"          # device hosting ingress, egress and global gates
//!
//! [[device]]
//! name = "coord"
//! address = "127.0.0.1:7400"
//!
//! [[phase]]
//! name = "align"
//! partition_size = 10            # omit to hand each replica whole batches
//! replicas = ["coord", "coord"]  # or a count, placed on the coordinator
//! partitions_in_flight = 2       # partitions one replica holds at a time
//!
//!   [[phase.gate]]
//!   mode = "plain"               # or "aggregate" with `size`
//!   capacity = 64
//!
//!   [[phase.gate]]
//!   mode = "plain"
//!
//!   [[phase.stage]]
//!   name = "align"
//!   transform = "sleep"          # name in the transform registry
//!   params = { ms = 5 }
//!   replicas = 2
//!
//!   [[phase.credit_link]]        # local: gate indices within the phase
//!   from = 1
//!   to = 0
//!   initial = 2
//!
//! [[global_credit_link]]         # global: gate i sits in front of phase i
//! from = 1
//! to = 0
//! initial = 3
//! ```

use std::collections::HashSet;
use std::fmt;
use std::ops::Range;
use std::path::Path;

use serde::{de::IgnoredAny, Deserialize, Serialize};
use toml::Spanned;

use crate::gate::{DequeueMode, GateConfig};
use crate::model::ArityTransform;
use crate::pipeline::LocalLink;
use crate::stage::{Params, TransformRegistry};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TopologyError {
    pub origin: String,
    pub line: Option<usize>,
    pub field: String,
    pub message: String,
}

impl fmt::Display for TopologyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "{}:{line}: {}: {}", self.origin, self.field, self.message),
            None => write!(f, "{}: {}: {}", self.origin, self.field, self.message),
        }
    }
}

impl std::error::Error for TopologyError {}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coordinator: Option<String>,
    /// Buffer bound of the egress gate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub egress_capacity: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub name: String,
    pub address: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Replicas {
    Count(usize),
    Devices(Vec<String>),
}

impl Default for Replicas {
    fn default() -> Self {
        Replicas::Count(1)
    }
}

impl Replicas {
    pub fn len(&self) -> usize {
        match self {
            Replicas::Count(n) => *n,
            Replicas::Devices(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    Plain,
    Aggregate,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateSpec {
    pub mode: GateMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity: Option<usize>,
}

impl GateSpec {
    pub fn plain() -> Self {
        Self {
            mode: GateMode::Plain,
            size: None,
            capacity: None,
        }
    }

    pub fn aggregate(size: u64) -> Self {
        Self {
            mode: GateMode::Aggregate,
            size: Some(size),
            capacity: None,
        }
    }

    pub fn with_capacity(mut self, capacity: usize) -> Self {
        self.capacity = Some(capacity);
        self
    }
}

fn one() -> usize {
    1
}

fn default_in_flight() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub name: String,
    pub transform: String,
    #[serde(default, skip_serializing_if = "Params::is_empty")]
    pub params: Params,
    #[serde(default = "one")]
    pub replicas: usize,
}

impl StageSpec {
    pub fn new(name: impl Into<String>, transform: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            transform: transform.into(),
            params: Params::new(),
            replicas: 1,
        }
    }

    pub fn param(mut self, key: &str, value: impl Into<toml::Value>) -> Self {
        self.params.insert(key.to_owned(), value.into());
        self
    }

    pub fn replicas(mut self, n: usize) -> Self {
        self.replicas = n;
        self
    }
}

/// Credit link from gate `from` (downstream) back to gate `to` (upstream).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub from: usize,
    pub to: usize,
    pub initial: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition_size: Option<u64>,
    #[serde(default)]
    pub replicas: Replicas,
    #[serde(default = "default_in_flight")]
    pub partitions_in_flight: usize,
    /// Device hosting the global gate in front of this phase.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate_device: Option<String>,
    /// Empty means all plain.
    #[serde(default, rename = "gate", skip_serializing_if = "Vec::is_empty")]
    pub gates: Vec<GateSpec>,
    #[serde(rename = "stage")]
    pub stages: Vec<StageSpec>,
    #[serde(default, rename = "credit_link", skip_serializing_if = "Vec::is_empty")]
    pub credit_links: Vec<LinkSpec>,
}

impl PhaseSpec {
    pub fn new(name: impl Into<String>, stages: Vec<StageSpec>) -> Self {
        Self {
            name: name.into(),
            partition_size: None,
            replicas: Replicas::Count(1),
            partitions_in_flight: default_in_flight(),
            gate_device: None,
            gates: Vec::new(),
            stages,
            credit_links: Vec::new(),
        }
    }

    pub fn gates(&self) -> Vec<GateSpec> {
        if self.gates.is_empty() {
            vec![GateSpec::plain(); self.stages.len() + 1]
        } else {
            self.gates.clone()
        }
    }

    /// Gate configurations, names left for the pipeline to assign.
    pub fn gate_configs(&self) -> Vec<GateConfig> {
        self.gates()
            .iter()
            .map(|g| {
                let mut c = match (g.mode, g.size) {
                    (GateMode::Aggregate, Some(s)) => GateConfig::aggregate("", s),
                    _ => GateConfig::plain(""),
                };
                c.capacity = g.capacity;
                c
            })
            .collect()
    }

    pub fn local_links(&self) -> Vec<LocalLink> {
        self.credit_links
            .iter()
            .map(|l| LocalLink {
                upstream: l.to,
                downstream: l.from,
                initial: l.initial,
            })
            .collect()
    }
}

/// How the feed count of one partition changes across a local pipeline.
pub fn arity_transform(phase: &PhaseSpec) -> ArityTransform {
    ArityTransform::new(
        phase
            .gates()
            .iter()
            .filter(|g| g.mode == GateMode::Aggregate)
            .filter_map(|g| g.size)
            .collect(),
    )
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    #[serde(default)]
    pub service: ServiceConfig,
    #[serde(default, rename = "device", skip_serializing_if = "Vec::is_empty")]
    pub devices: Vec<DeviceSpec>,
    #[serde(rename = "phase")]
    pub phases: Vec<PhaseSpec>,
    #[serde(default, rename = "global_credit_link", skip_serializing_if = "Vec::is_empty")]
    pub global_credit_links: Vec<LinkSpec>,
    #[serde(skip)]
    locations: Locations,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct Locations {
    origin: String,
    service: Option<usize>,
    devices: Vec<usize>,
    phases: Vec<PhaseLocations>,
    global_links: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct PhaseLocations {
    line: usize,
    gates: Vec<usize>,
    stages: Vec<usize>,
    links: Vec<usize>,
}

/// Where things are, as a view of the same document.
#[derive(Deserialize)]
struct Skeleton {
    #[serde(default)]
    service: Option<Spanned<IgnoredAny>>,
    #[serde(default)]
    device: Vec<Spanned<IgnoredAny>>,
    #[serde(default)]
    phase: Vec<Spanned<PhaseSkeleton>>,
    #[serde(default)]
    global_credit_link: Vec<Spanned<IgnoredAny>>,
}

#[derive(Deserialize)]
struct PhaseSkeleton {
    #[serde(default)]
    gate: Vec<Spanned<IgnoredAny>>,
    #[serde(default)]
    stage: Vec<Spanned<IgnoredAny>>,
    #[serde(default)]
    credit_link: Vec<Spanned<IgnoredAny>>,
}

fn line_of(src: &str, span: Range<usize>) -> usize {
    src[..span.start.min(src.len())].matches('\n').count() + 1
}

/// Where a topology element lives, for error messages.
#[derive(Clone, Copy, Debug)]
enum Site {
    Service,
    Device(usize),
    Phase(usize),
    Gate(usize, usize),
    Stage(usize, usize),
    Link(usize, usize),
    GlobalLink(usize),
}

impl Site {
    fn path(self) -> String {
        match self {
            Site::Service => "service".into(),
            Site::Device(i) => format!("device[{i}]"),
            Site::Phase(p) => format!("phase[{p}]"),
            Site::Gate(p, i) => format!("phase[{p}].gate[{i}]"),
            Site::Stage(p, i) => format!("phase[{p}].stage[{i}]"),
            Site::Link(p, i) => format!("phase[{p}].credit_link[{i}]"),
            Site::GlobalLink(i) => format!("global_credit_link[{i}]"),
        }
    }
}

impl Topology {
    pub fn new(phases: Vec<PhaseSpec>) -> Self {
        Self {
            phases,
            ..Self::default()
        }
    }

    pub fn with_global_link(mut self, from: usize, to: usize, initial: u64) -> Self {
        self.global_credit_links.push(LinkSpec { from, to, initial });
        self
    }

    /// Parses and validates a topology document. `origin` names it in
    /// error messages.
    pub fn parse(src: &str, origin: &str) -> Result<Self, TopologyError> {
        let syntax = |e: toml::de::Error| {
            let line = e.span().map(|s| line_of(src, s));
            TopologyError {
                origin: origin.to_owned(),
                line,
                field: "document".into(),
                message: e.message().to_owned(),
            }
        };
        let mut topo: Topology = toml::from_str(src).map_err(syntax)?;
        let skel: Skeleton = toml::from_str(src).map_err(syntax)?;
        let line = |s: &Spanned<IgnoredAny>| line_of(src, s.span());
        topo.locations = Locations {
            origin: origin.to_owned(),
            service: skel.service.as_ref().map(line),
            devices: skel.device.iter().map(line).collect(),
            phases: skel
                .phase
                .iter()
                .map(|p| PhaseLocations {
                    line: line_of(src, p.span()),
                    gates: p.get_ref().gate.iter().map(line).collect(),
                    stages: p.get_ref().stage.iter().map(line).collect(),
                    links: p.get_ref().credit_link.iter().map(line).collect(),
                })
                .collect(),
            global_links: skel.global_credit_link.iter().map(line).collect(),
        };
        topo.validate()?;
        Ok(topo)
    }

    pub fn load(path: &Path) -> Result<Self, TopologyError> {
        let origin = path.display().to_string();
        let src = std::fs::read_to_string(path).map_err(|e| TopologyError {
            origin: origin.clone(),
            line: None,
            field: "document".into(),
            message: e.to_string(),
        })?;
        Self::parse(&src, &origin)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("topologies serialize")
    }

    fn site_line(&self, site: Site) -> Option<usize> {
        let l = &self.locations;
        match site {
            Site::Service => l.service,
            Site::Device(i) => l.devices.get(i).copied(),
            Site::Phase(p) => l.phases.get(p).map(|p| p.line),
            Site::Gate(p, i) => l.phases.get(p).and_then(|p| p.gates.get(i).copied()),
            Site::Stage(p, i) => l.phases.get(p).and_then(|p| p.stages.get(i).copied()),
            Site::Link(p, i) => l.phases.get(p).and_then(|p| p.links.get(i).copied()),
            Site::GlobalLink(i) => l.global_links.get(i).copied(),
        }
    }

    fn error(&self, site: Site, field: &str, message: impl Into<String>) -> TopologyError {
        let origin = if self.locations.origin.is_empty() {
            "topology".to_owned()
        } else {
            self.locations.origin.clone()
        };
        TopologyError {
            origin,
            line: self.site_line(site),
            field: format!("{}.{field}", site.path()),
            message: message.into(),
        }
    }

    /// Structural checks: alternation, gate invariants, link ranges and
    /// device references.
    pub fn validate(&self) -> Result<(), TopologyError> {
        if self.phases.is_empty() {
            return Err(TopologyError {
                origin: self.locations.origin.clone(),
                line: None,
                field: "phase".into(),
                message: "at least one phase is required".into(),
            });
        }
        let mut devices = HashSet::new();
        for (i, d) in self.devices.iter().enumerate() {
            if !devices.insert(d.name.as_str()) {
                return Err(self.error(Site::Device(i), "name", format!("duplicate device `{}`", d.name)));
            }
        }
        match (&self.service.coordinator, self.devices.is_empty()) {
            (Some(c), false) if !devices.contains(c.as_str()) => {
                return Err(self.error(Site::Service, "coordinator", format!("unknown device `{c}`")))
            }
            (None, false) => {
                return Err(self.error(Site::Service, "coordinator", "required when devices are listed"))
            }
            (Some(_), true) => {
                return Err(self.error(Site::Service, "coordinator", "names a device but none are listed"))
            }
            _ => {}
        }
        if self.service.egress_capacity == Some(0) {
            return Err(self.error(Site::Service, "egress_capacity", "must be at least 1"));
        }
        let mut names = HashSet::new();
        for (p, phase) in self.phases.iter().enumerate() {
            if !names.insert(phase.name.as_str()) {
                return Err(self.error(Site::Phase(p), "name", format!("duplicate phase `{}`", phase.name)));
            }
            if phase.name.contains(['/', '#']) {
                return Err(self.error(Site::Phase(p), "name", "must not contain `/` or `#`"));
            }
            self.validate_phase(p, phase, &devices)?;
        }
        let n = self.phases.len();
        for (i, l) in self.global_credit_links.iter().enumerate() {
            self.check_link(Site::GlobalLink(i), l, n + 1)?;
        }
        Ok(())
    }

    fn check_link(&self, site: Site, l: &LinkSpec, gates: usize) -> Result<(), TopologyError> {
        if l.from >= gates {
            return Err(self.error(site, "from", format!("gate {} does not exist ({gates} gates)", l.from)));
        }
        if l.to >= l.from {
            return Err(self.error(site, "to", "must name a gate before `from`"));
        }
        if l.initial == 0 {
            return Err(self.error(site, "initial", "zero initial credits would deadlock"));
        }
        Ok(())
    }

    fn validate_phase(
        &self,
        p: usize,
        phase: &PhaseSpec,
        devices: &HashSet<&str>,
    ) -> Result<(), TopologyError> {
        if phase.stages.is_empty() {
            return Err(self.error(Site::Phase(p), "stage", "a phase needs at least one stage"));
        }
        if !phase.gates.is_empty() && phase.gates.len() != phase.stages.len() + 1 {
            return Err(self.error(
                Site::Phase(p),
                "gate",
                format!(
                    "{} stages need {} gates, found {}",
                    phase.stages.len(),
                    phase.stages.len() + 1,
                    phase.gates.len()
                ),
            ));
        }
        if phase.partition_size == Some(0) {
            return Err(self.error(Site::Phase(p), "partition_size", "must be at least 1"));
        }
        if phase.partitions_in_flight == 0 {
            return Err(self.error(Site::Phase(p), "partitions_in_flight", "must be at least 1"));
        }
        if phase.replicas.is_empty() {
            return Err(self.error(Site::Phase(p), "replicas", "needs at least one replica"));
        }
        if let Replicas::Devices(list) = &phase.replicas {
            if let Some(d) = list.iter().find(|d| !devices.contains(d.as_str())) {
                return Err(self.error(Site::Phase(p), "replicas", format!("unknown device `{d}`")));
            }
        }
        if let Some(d) = &phase.gate_device {
            if p == 0 {
                return Err(self.error(Site::Phase(p), "gate_device", "the ingress gate lives on the coordinator"));
            }
            if !devices.contains(d.as_str()) {
                return Err(self.error(Site::Phase(p), "gate_device", format!("unknown device `{d}`")));
            }
        }
        let gates = phase.gates();
        for (i, g) in phase.gates.iter().enumerate() {
            let site = Site::Gate(p, i);
            match (g.mode, g.size) {
                (GateMode::Aggregate, None) => return Err(self.error(site, "size", "aggregate gates need a size")),
                (GateMode::Aggregate, Some(0)) => return Err(self.error(site, "size", "must be at least 1")),
                (GateMode::Plain, Some(_)) => return Err(self.error(site, "size", "only aggregate gates take a size")),
                _ => {}
            }
            if g.capacity.is_some() && g.mode == GateMode::Aggregate {
                return Err(self.error(site, "capacity", "only gates with plain dequeue may bound their buffer"));
            }
            if g.capacity == Some(0) {
                return Err(self.error(site, "capacity", "must be at least 1"));
            }
        }
        if gates.last().is_some_and(|g| g.mode != GateMode::Plain) {
            return Err(self.error(
                Site::Gate(p, gates.len() - 1),
                "mode",
                "the last gate of a phase must be plain",
            ));
        }
        for (i, s) in phase.stages.iter().enumerate() {
            if s.replicas == 0 {
                return Err(self.error(Site::Stage(p, i), "replicas", "needs at least one replica"));
            }
            if s.name.is_empty() || s.name.contains('/') {
                return Err(self.error(Site::Stage(p, i), "name", "must be non-empty without `/`"));
            }
        }
        for (i, l) in phase.credit_links.iter().enumerate() {
            self.check_link(Site::Link(p, i), l, gates.len())?;
        }
        Ok(())
    }

    /// Checks that every stage names a registered transform with acceptable
    /// parameters.
    pub fn validate_transforms(&self, registry: &TransformRegistry) -> Result<(), TopologyError> {
        for (p, phase) in self.phases.iter().enumerate() {
            for (i, s) in phase.stages.iter().enumerate() {
                if let Err(e) = registry.build(&s.transform, &s.params) {
                    let field = if registry.contains(&s.transform) { "params" } else { "transform" };
                    return Err(self.error(Site::Stage(p, i), field, e.to_string()));
                }
            }
        }
        Ok(())
    }

    pub fn is_distributed(&self) -> bool {
        !self.devices.is_empty()
    }

    pub fn coordinator(&self) -> Option<&str> {
        self.service.coordinator.as_deref()
    }

    pub fn device(&self, name: &str) -> Option<&DeviceSpec> {
        self.devices.iter().find(|d| d.name == name)
    }

    /// Device of every replica of phase `p`; `None` in single-process
    /// topologies.
    pub fn replica_devices(&self, p: usize) -> Vec<Option<String>> {
        match &self.phases[p].replicas {
            Replicas::Count(n) => vec![self.service.coordinator.clone(); *n],
            Replicas::Devices(d) => d.iter().cloned().map(Some).collect(),
        }
    }

    /// Number of global gates: one in front of every phase plus egress.
    pub fn global_gate_count(&self) -> usize {
        self.phases.len() + 1
    }

    pub fn global_gate_device(&self, g: usize) -> Option<&str> {
        self.phases
            .get(g)
            .and_then(|p| p.gate_device.as_deref())
            .or(self.coordinator())
    }

    pub fn global_gate_name(&self, g: usize) -> String {
        match self.phases.get(g) {
            Some(p) => format!("global{g}:{}", p.name),
            None => format!("global{g}:egress"),
        }
    }

    /// Global gate `g`: partitions for phase `g`, reassembles phase `g-1`.
    pub fn global_gate_config(&self, g: usize) -> GateConfig {
        let name = self.global_gate_name(g);
        let mut config = match self.phases.get(g) {
            Some(phase) => GateConfig::partition(
                name,
                phase.partition_size.unwrap_or(u64::MAX),
                arity_transform(phase),
            ),
            None => {
                let c = GateConfig::plain(name);
                match self.service.egress_capacity {
                    Some(cap) => c.with_capacity(cap),
                    None => c,
                }
            }
        };
        if g > 0 {
            config = config.reassembling();
        }
        config
    }

    /// Local pipeline name of replica `r` of phase `p`.
    pub fn replica_name(&self, p: usize, r: usize) -> String {
        format!("{}#{r}", self.phases[p].name)
    }

    /// Mode of the last global gate, which is always plain.
    pub fn egress_mode(&self) -> DequeueMode {
        DequeueMode::Plain
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::aggregate_arity;
    use proptest::prelude::*;

    const DOC: &str = r#"
[service]
coordinator = "coord"

[[device]]
name = "coord"
address = "127.0.0.1:7400"

[[device]]
name = "w1"
address = "127.0.0.1:7401"

[[phase]]
name = "align"
partition_size = 25
replicas = ["w1", "coord"]

  [[phase.gate]]
  mode = "plain"
  capacity = 8

  [[phase.gate]]
  mode = "aggregate"
  size = 10

  [[phase.gate]]
  mode = "plain"

  [[phase.stage]]
  name = "align"
  transform = "sleep"
  params = { ms = 5 }
  replicas = 2

  [[phase.stage]]
  name = "sort"
  transform = "identity"

  [[phase.credit_link]]
  from = 2
  to = 0
  initial = 2

[[phase]]
name = "merge"

  [[phase.stage]]
  name = "merge"
  transform = "identity"

[[global_credit_link]]
from = 2
to = 0
initial = 3
"#;

    #[test]
    fn parses_documented_schema() {
        let t = Topology::parse(DOC, "t.toml").unwrap();
        assert_eq!(t.phases.len(), 2);
        assert_eq!(t.replica_devices(0), vec![Some("w1".into()), Some("coord".into())]);
        assert_eq!(t.replica_devices(1), vec![Some("coord".into())]);
        assert_eq!(t.phases[1].gates().len(), 2);
        assert_eq!(t.global_gate_device(1), Some("coord"));
        assert_eq!(t.global_gate_count(), 3);
    }

    #[test]
    fn serialization_roundtrips() {
        let t = Topology::parse(DOC, "t.toml").unwrap();
        let again = Topology::parse(&t.to_toml(), "again").unwrap();
        assert_eq!(again.phases, t.phases);
        assert_eq!(again.devices, t.devices);
        assert_eq!(again.service, t.service);
        assert_eq!(again.global_credit_links, t.global_credit_links);
    }

    #[test]
    fn capacity_on_aggregate_gate_cites_line_and_field() {
        let bad = DOC.replacen("size = 10", "size = 10\n  capacity = 4", 1);
        let err = Topology::parse(&bad, "t.toml").unwrap_err();
        assert_eq!(err.field, "phase[0].gate[1].capacity");
        let gate_line = bad.lines().position(|l| l.contains("mode = \"aggregate\"")).unwrap();
        // Reported at the `[[phase.gate]]` header, one line above `mode`.
        assert_eq!(err.line, Some(gate_line), "{err}");
        assert!(err.to_string().starts_with("t.toml:"), "{err}");
    }

    #[test]
    fn alternation_is_enforced() {
        let bad = DOC.replacen("  [[phase.gate]]\n  mode = \"plain\"\n\n  [[phase.stage]]", "  [[phase.stage]]", 1);
        let err = Topology::parse(&bad, "t.toml").unwrap_err();
        assert_eq!(err.field, "phase[0].gate");
        assert!(err.message.contains("need 3 gates"), "{err}");
    }

    #[test]
    fn unknown_devices_and_fields_are_rejected() {
        let bad = DOC.replacen("[\"w1\", \"coord\"]", "[\"w9\"]", 1);
        assert_eq!(Topology::parse(&bad, "t").unwrap_err().field, "phase[0].replicas");
        let bad = DOC.replacen("partition_size = 25", "partition_size = 25\nbogus = 1", 1);
        let err = Topology::parse(&bad, "t").unwrap_err();
        assert!(err.message.contains("bogus"), "{err}");
        assert!(err.line.is_some());
    }

    #[test]
    fn zero_initial_credit_is_rejected() {
        let bad = DOC.replacen("initial = 3", "initial = 0", 1);
        assert_eq!(Topology::parse(&bad, "t").unwrap_err().field, "global_credit_link[0].initial");
    }

    #[test]
    fn arity_transform_examples() {
        let mut phase = PhaseSpec::new("p", vec![StageSpec::new("s", "identity")]);
        assert_eq!(arity_transform(&phase).apply(25), 25);
        phase.stages.push(StageSpec::new("t", "identity"));
        phase.gates = vec![GateSpec::aggregate(10), GateSpec::plain(), GateSpec::plain()];
        assert_eq!(arity_transform(&phase).apply(25), 3);
        phase.stages.push(StageSpec::new("u", "identity"));
        phase.gates = vec![
            GateSpec::aggregate(10),
            GateSpec::aggregate(1000),
            GateSpec::plain(),
            GateSpec::plain(),
        ];
        assert_eq!(arity_transform(&phase).apply(2236), 1);
    }

    #[test]
    fn global_gates_partition_and_reassemble() {
        let t = Topology::parse(DOC, "t").unwrap();
        let g0 = t.global_gate_config(0);
        assert!(!g0.reassemble);
        match g0.mode {
            DequeueMode::Partition { size, downstream } => {
                assert_eq!(size, 25);
                assert_eq!(downstream.partitioned_total(100, 25), 12);
            }
            other => panic!("{other:?}"),
        }
        let g2 = t.global_gate_config(2);
        assert!(g2.reassemble);
        assert_eq!(g2.mode, DequeueMode::Plain);
    }

    fn simulate(mut a: u64, sizes: &[u64]) -> u64 {
        // Brute force: group items one by one.
        for &s in sizes {
            let mut groups = 0;
            let mut in_group = 0;
            for _ in 0..a {
                if in_group == 0 {
                    groups += 1;
                }
                in_group = (in_group + 1) % s;
            }
            a = groups;
        }
        a
    }

    proptest! {
        #[test]
        fn arity_transform_matches_simulation(
            a in 1u64..3000,
            sizes in prop::collection::vec(1u64..50, 0..4),
        ) {
            let mut phase = PhaseSpec::new("p", vec![StageSpec::new("s", "identity"); sizes.len() + 1]);
            phase.gates = sizes.iter().map(|&s| GateSpec::aggregate(s)).collect();
            phase.gates.push(GateSpec::plain());
            phase.gates.push(GateSpec::plain());
            prop_assert_eq!(arity_transform(&phase).apply(a), simulate(a, &sizes));
            prop_assert_eq!(
                arity_transform(&phase).apply(a),
                sizes.iter().fold(a, |x, &s| aggregate_arity(x, s))
            );
        }
    }
}
