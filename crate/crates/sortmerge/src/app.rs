//! The sort-merge service in its two shapes.
//!
//! Baseline runs three phases, each a separate pass over storage:
//!
//! ```text
//! align: read -> align -> write        (transformed chunks to tmp/)
//! sort:  read -> [B] sort -> write     (sorted runs to tmp/)
//! merge: [all] merge                   (sorted output to out/)
//! ```
//!
//! Fused keeps the transformed chunks in memory:
//!
//! ```text
//! align-sort: read -> align -> [B] sort -> write
//! merge:      [all] merge
//! ```

use std::path::Path;
use std::sync::Arc;

use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use flowgate::service::{CollectError, RequestTicket, Service, ServiceError, ServiceOptions};
use flowgate::topology::{GateSpec, LinkSpec, PhaseSpec, Replicas, StageSpec, Topology};
use flowgate::trace::Recorder;
use flowgate::{Payload, TransformRegistry};

use crate::dataset::DatasetManifest;
use crate::stages::{self, KEY};
use crate::store::Store;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    Fused,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    /// Chunks sorted together into one run.
    pub sort_batch: u64,
    /// Chunks per partition of the align and sort phases; a multiple of
    /// `sort_batch`.
    pub chunks_per_partition: u64,
    /// Local pipelines per parallel phase.
    pub replicas: usize,
    /// Runners per stage inside each local pipeline.
    pub runners: usize,
    pub transform_rounds: u64,
    /// Records per output chunk.
    pub output_records: u64,
    /// Requests in flight end to end.
    pub max_open_requests: u64,
    pub partitions_in_flight: usize,
    /// Partitions open inside one local pipeline.
    pub local_credits: u64,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            sort_batch: 10,
            chunks_per_partition: 20,
            replicas: 2,
            runners: 1,
            transform_rounds: 1,
            output_records: 1000,
            max_open_requests: 2,
            partitions_in_flight: 2,
            local_credits: 2,
        }
    }
}

#[derive(Debug, Error)]
pub enum AppError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Collect(#[from] CollectError),
    #[error("storage: {0}")]
    Storage(#[from] std::io::Error),
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<Self, AppError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AppError::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self =
            toml::from_str(&text).map_err(|e| AppError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), AppError> {
        let bad = |m: &str| Err(AppError::Config(m.to_owned()));
        if self.sort_batch == 0 || self.chunks_per_partition == 0 || self.output_records == 0 {
            return bad("sort_batch, chunks_per_partition and output_records must be positive");
        }
        if self.chunks_per_partition % self.sort_batch != 0 {
            return bad("chunks_per_partition must be a multiple of sort_batch");
        }
        if self.replicas == 0 || self.runners == 0 || self.partitions_in_flight == 0 {
            return bad("replicas, runners and partitions_in_flight must be positive");
        }
        if self.max_open_requests == 0 || self.local_credits == 0 {
            return bad("credit limits must be positive");
        }
        Ok(())
    }

    fn stage(&self, name: &str) -> StageSpec {
        StageSpec::new(name, name).replicas(self.runners)
    }

    fn parallel_phase(&self, name: &str, stages: Vec<StageSpec>, gates: Vec<GateSpec>) -> PhaseSpec {
        let last = gates.len() - 1;
        let mut p = PhaseSpec::new(name, stages);
        p.gates = gates;
        p.partition_size = Some(self.chunks_per_partition);
        p.replicas = Replicas::Count(self.replicas);
        p.partitions_in_flight = self.partitions_in_flight;
        p.credit_links = vec![LinkSpec {
            from: last,
            to: 0,
            initial: self.local_credits,
        }];
        p
    }

    /// The global pipeline of `variant`.
    pub fn topology(&self, variant: Variant) -> Topology {
        let plain = GateSpec::plain;
        let align = self.stage("align").param("rounds", self.transform_rounds as i64);
        let mut phases = match variant {
            Variant::Baseline => vec![
                self.parallel_phase(
                    "align",
                    vec![self.stage("read"), align, self.stage("write")],
                    vec![plain(), plain(), plain(), plain()],
                ),
                self.parallel_phase(
                    "sort",
                    vec![self.stage("read"), self.stage("sort"), self.stage("write")],
                    vec![plain(), GateSpec::aggregate(self.sort_batch), plain(), plain()],
                ),
            ],
            Variant::Fused => vec![self.parallel_phase(
                "align-sort",
                vec![self.stage("read"), align, self.stage("sort"), self.stage("write")],
                vec![
                    plain(),
                    plain(),
                    GateSpec::aggregate(self.sort_batch),
                    plain(),
                    plain(),
                ],
            )],
        };
        let mut merge = PhaseSpec::new(
            "merge",
            vec![StageSpec::new("merge", "merge").param("output_records", self.output_records as i64)],
        );
        // Larger than any request: the merge sees all runs at once. TOML
        // integers are signed.
        merge.gates = vec![GateSpec::aggregate(i64::MAX as u64), plain()];
        phases.push(merge);
        let n = phases.len();
        Topology::new(phases).with_global_link(n, 0, self.max_open_requests)
    }
}

/// Registry with the sort-merge transforms over `store`.
pub fn registry(store: Arc<Store>) -> TransformRegistry {
    let mut r = TransformRegistry::new();
    stages::register(&mut r, store);
    r
}

/// Chunk keys of a dataset as request inputs.
pub fn request_inputs(manifest: &DatasetManifest) -> Vec<Payload> {
    manifest.chunks.iter().map(|k| Payload::single(KEY, k.as_str())).collect()
}

/// A running sort-merge service.
#[derive(Debug)]
pub struct SortMerge {
    service: Service,
    store: Arc<Store>,
    variant: Variant,
}

impl SortMerge {
    pub fn start(
        cfg: &AppConfig,
        variant: Variant,
        data_dir: &Path,
        recorder: Option<Recorder>,
    ) -> Result<Self, AppError> {
        cfg.validate()?;
        let store = Arc::new(Store::open(data_dir, recorder.as_ref())?);
        let service = Service::start(
            &cfg.topology(variant),
            None,
            &registry(store.clone()),
            ServiceOptions {
                recorder,
                ..ServiceOptions::default()
            },
        )?;
        Ok(Self {
            service,
            store,
            variant,
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn service(&self) -> &Service {
        &self.service
    }

    pub fn into_service(self) -> Service {
        self.service
    }

    pub fn submit(&self, manifest: &DatasetManifest) -> Result<RequestTicket, AppError> {
        Ok(self.service.submit(request_inputs(manifest))?)
    }

    /// Waits for a request; returns the keys of its sorted output chunks.
    pub fn collect(&self, ticket: &RequestTicket) -> Result<Vec<String>, AppError> {
        Ok(stages::output_keys(&self.service.collect(ticket)?))
    }

    pub fn shutdown(self) {
        self.service.shutdown();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = AppConfig::default();
        cfg.validate().unwrap();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<AppConfig>(&text).unwrap(), cfg);
        let partial: AppConfig = toml::from_str("sort_batch = 5\n").unwrap();
        assert_eq!(partial.sort_batch, 5);
        assert_eq!(partial.replicas, cfg.replicas);
        assert!(toml::from_str::<AppConfig>("bogus = 1\n").is_err());
    }

    #[test]
    fn partition_must_hold_whole_sort_groups() {
        let cfg = AppConfig {
            sort_batch: 4,
            chunks_per_partition: 6,
            ..AppConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(AppError::Config(_))));
    }

    #[test]
    fn topologies_validate_and_differ_by_one_pass() {
        let cfg = AppConfig::default();
        let registry = registry(Arc::new(
            Store::open(tempfile::tempdir().unwrap().path(), None).unwrap(),
        ));
        let base = cfg.topology(Variant::Baseline);
        let fused = cfg.topology(Variant::Fused);
        for t in [&base, &fused] {
            t.validate().unwrap();
            t.validate_transforms(&registry).unwrap();
            // Serialized form parses back to the same topology.
            let back = Topology::parse(&t.to_toml(), "gen").unwrap();
            assert_eq!(back.phases, t.phases);
            assert_eq!(back.global_credit_links, t.global_credit_links);
        }
        assert_eq!(base.phases.len(), 3);
        assert_eq!(fused.phases.len(), 2);
        let stages = |t: &Topology| -> usize { t.phases.iter().map(|p| p.stages.len()).sum() };
        // Fused drops one write and one read.
        assert_eq!(stages(&base), stages(&fused) + 2);
    }

    #[test]
    fn run_count_follows_grouping_arithmetic() {
        // 2236 chunks sorted in groups of 10 give 224 runs.
        let cfg = AppConfig {
            sort_batch: 10,
            chunks_per_partition: 100,
            ..AppConfig::default()
        };
        let topo = cfg.topology(Variant::Fused);
        let at = flowgate::topology::arity_transform(&topo.phases[0]);
        assert_eq!(at.partitioned_total(2236, 100), 224);
        let base = cfg.topology(Variant::Baseline);
        let align = flowgate::topology::arity_transform(&base.phases[0]);
        let sort = flowgate::topology::arity_transform(&base.phases[1]);
        assert_eq!(sort.partitioned_total(align.partitioned_total(2236, 100), 100), 224);
    }
}
