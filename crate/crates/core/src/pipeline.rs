//! In-process local pipelines: alternating gates and stages hosted by one
//! process, optionally bounded by local credit links.

use std::sync::Arc;
use std::thread::JoinHandle;

use crate::credit::{create_link, CreditLink, LinkScope};
use crate::error::CreditError;
use crate::gate::{DequeueMode, Gate, GateConfig, GateOps, IdSource};
use crate::stage::{replicate, InputMode, StageDef, StageError, StageRunner};
use crate::trace::{Recorder, Tracer};

/// Local credit link between gate indices of one pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LocalLink {
    pub upstream: usize,
    pub downstream: usize,
    pub initial: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("pipeline `{pipeline}`: {detail}")]
    Invalid { pipeline: String, detail: String },
    #[error(transparent)]
    Credit(#[from] CreditError),
    #[error(transparent)]
    Stage(#[from] StageError),
}

/// A running local pipeline.
pub struct LocalPipeline {
    name: String,
    gates: Vec<Arc<Gate>>,
    links: Vec<Arc<CreditLink>>,
    runners: Vec<Vec<JoinHandle<Result<u64, StageError>>>>,
}

impl std::fmt::Debug for LocalPipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LocalPipeline")
            .field("name", &self.name)
            .field("gates", &self.gates.len())
            .field("links", &self.links)
            .finish_non_exhaustive()
    }
}

fn tracer_for(recorder: Option<&Recorder>, name: &str) -> Tracer {
    recorder.map_or_else(Tracer::disabled, |r| r.tracer(name))
}

impl LocalPipeline {
    /// Builds gates named `<name>/g<i>` (scoped to this pipeline), wires the
    /// local links and starts every stage replica.
    pub fn start(
        name: &str,
        gates: Vec<GateConfig>,
        stages: Vec<Arc<StageDef>>,
        links: &[LocalLink],
        recorder: Option<&Recorder>,
    ) -> Result<Self, PipelineError> {
        let invalid = |detail: String| PipelineError::Invalid {
            pipeline: name.to_owned(),
            detail,
        };
        if gates.len() != stages.len() + 1 {
            return Err(invalid(format!(
                "{} stages need {} gates, found {}",
                stages.len(),
                stages.len() + 1,
                gates.len()
            )));
        }
        for (i, stage) in stages.iter().enumerate() {
            let expected = match gates[i].mode {
                DequeueMode::Plain => InputMode::Plain,
                DequeueMode::Aggregate(s) => InputMode::Aggregate(s),
                DequeueMode::Partition { .. } => {
                    return Err(invalid(format!("gate {i} of a local pipeline cannot partition")))
                }
            };
            if stage.input_mode != expected {
                return Err(invalid(format!(
                    "stage `{}` expects {:?} input but gate {i} provides {expected:?}",
                    stage.name, stage.input_mode
                )));
            }
        }
        let gates: Vec<Arc<Gate>> = gates
            .into_iter()
            .enumerate()
            .map(|(i, mut cfg)| {
                cfg.name = format!("{name}/g{i}");
                cfg = cfg.in_local(name);
                let tracer = tracer_for(recorder, &cfg.name);
                Gate::new(cfg, tracer, Some(IdSource::default())).map_err(&invalid)
            })
            .collect::<Result<_, _>>()?;

        let mut created = Vec::new();
        for (id, l) in links.iter().enumerate() {
            if l.upstream >= l.downstream || l.downstream >= gates.len() {
                return Err(invalid(format!(
                    "credit link {} -> {} must point from a gate to a later gate",
                    l.downstream, l.upstream
                )));
            }
            let tracer = tracer_for(recorder, &format!("{name}/link{id}"));
            created.push(create_link(
                id as u32,
                &gates[l.upstream],
                &gates[l.downstream],
                l.initial,
                LinkScope::Local,
                tracer,
            )?);
        }

        let mut runners = Vec::with_capacity(stages.len());
        for (i, stage) in stages.into_iter().enumerate() {
            let tracer = tracer_for(recorder, &format!("{name}/{}", stage.name));
            let n = stage.replicas;
            let up: Arc<dyn GateOps> = gates[i].clone();
            let down: Arc<dyn GateOps> = gates[i + 1].clone();
            let handles = replicate(stage, n, &tracer, |_| (up.clone(), down.clone()))?
                .into_iter()
                .map(StageRunner::spawn)
                .collect();
            runners.push(handles);
        }
        Ok(Self {
            name: name.to_owned(),
            gates,
            links: created,
            runners,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input(&self) -> &Arc<Gate> {
        &self.gates[0]
    }

    pub fn output(&self) -> &Arc<Gate> {
        self.gates.last().expect("pipelines have gates")
    }

    pub fn gates(&self) -> &[Arc<Gate>] {
        &self.gates
    }

    pub fn links(&self) -> &[Arc<CreditLink>] {
        &self.links
    }

    /// Shuts gates down front to back, letting each stage finish what is
    /// already buffered upstream of it. Returns per-stage processed counts.
    pub fn drain(mut self) -> Result<Vec<u64>, StageError> {
        let mut counts = Vec::new();
        for (i, handles) in std::mem::take(&mut self.runners).into_iter().enumerate() {
            self.gates[i].shutdown();
            let mut n = 0;
            for h in handles {
                n += h.join().expect("stage runner panicked")?;
            }
            counts.push(n);
        }
        self.output().shutdown();
        Ok(counts)
    }

    /// Shuts every gate at once and waits for runners to exit.
    pub fn stop(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        for g in &self.gates {
            g.shutdown();
        }
        for handles in std::mem::take(&mut self.runners) {
            for h in handles {
                if let Ok(Err(e)) = h.join() {
                    log::warn!("{}: {e}", self.name);
                }
            }
        }
    }
}

impl Drop for LocalPipeline {
    fn drop(&mut self) {
        if !self.runners.is_empty() {
            self.halt();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_metadata, Feed, Payload};
    use crate::stage::StageInput;

    fn append(tag: u8) -> StageDef {
        StageDef::new(format!("append{tag}"), move |input: StageInput<'_>| {
            let mut v = input.members()[0].get("v").unwrap().to_vec();
            v.push(tag);
            Ok(Payload::single("v", v))
        })
    }

    #[test]
    fn three_stage_pipeline_end_to_end() {
        let p = LocalPipeline::start(
            "p",
            vec![GateConfig::plain(""); 4],
            vec![Arc::new(append(1)), Arc::new(append(2).replicas(2)), Arc::new(append(3))],
            &[LocalLink { upstream: 0, downstream: 3, initial: 1 }],
            None,
        )
        .unwrap();
        for b in 1..=3u64 {
            for s in 0..5 {
                p.input()
                    .enqueue(Feed::new(
                        make_metadata(b, 5).unwrap().with_seq(s),
                        Payload::single("v", vec![b as u8]),
                    ))
                    .unwrap();
            }
        }
        let mut out = Vec::new();
        for _ in 0..15 {
            let f = p.output().dequeue().unwrap();
            out.push((f.metadata.batch().id, f.payload.get("v").unwrap().to_vec()));
        }
        // One credit: batches leave strictly one after another.
        let ids: Vec<u64> = out.iter().map(|(b, _)| *b).collect();
        assert_eq!(ids, [1, 1, 1, 1, 1, 2, 2, 2, 2, 2, 3, 3, 3, 3, 3]);
        assert!(out.iter().all(|(b, v)| v == &vec![*b as u8, 1, 2, 3]));
        assert_eq!(p.drain().unwrap(), vec![15, 15, 15]);
    }

    #[test]
    fn mismatched_stage_input_is_rejected() {
        let err = LocalPipeline::start(
            "p",
            vec![GateConfig::aggregate("", 4), GateConfig::plain("")],
            vec![Arc::new(append(1))],
            &[],
            None,
        )
        .unwrap_err();
        assert!(err.to_string().contains("expects"), "{err}");
    }
}
