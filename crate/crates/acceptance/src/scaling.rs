//! Timing criteria: pipelining benefit and scale-out across two processes.

use std::net::TcpListener;
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use flowgate::node::builtin_transforms;
use flowgate::service::{Service, ServiceOptions};
use flowgate::topology::{DeviceSpec, GateSpec, PhaseSpec, Replicas, StageSpec, Topology};
use flowgate::trace::{EventKind, Recorder, TraceEvent};
use flowgate::transport::RetryBudget;
use flowgate::Payload;

use crate::{ensure, Outcome};

fn inputs(n: usize) -> Vec<Payload> {
    (0..n).map(|i| Payload::single("v", (i as u64).to_le_bytes())).collect()
}

/// Batches completed per second after the first `warmup` completions.
pub fn steady_rate(events: &[TraceEvent], warmup: usize) -> Result<f64, String> {
    let mut done: Vec<u64> = events
        .iter()
        .filter(|e| e.kind == EventKind::RequestComplete)
        .map(|e| e.ts_ns)
        .collect();
    done.sort_unstable();
    ensure!(done.len() >= warmup + 2, "only {} completions", done.len());
    let span = (done[done.len() - 1] - done[warmup]) as f64 / 1e9;
    Ok((done.len() - 1 - warmup) as f64 / span)
}

/// Submits `batches` requests of `feeds` at once and waits for all of them.
fn drive(service: &Service, batches: usize, feeds: usize) -> Result<(), String> {
    let tickets = (0..batches)
        .map(|_| service.submit(inputs(feeds)).map_err(|e| e.to_string()))
        .collect::<Result<Vec<_>, _>>()?;
    for t in &tickets {
        let out = service.collect(t).map_err(|e| e.to_string())?;
        ensure!(!out.is_empty(), "batch {} returned nothing", t.batch_id);
    }
    Ok(())
}

const FEEDS: usize = 40;
const FEED_MS: u64 = 5;
const BARRIER_MS: u64 = 200;
const RUNNERS: usize = 4;

fn two_phase(open: u64) -> Topology {
    let mut par = PhaseSpec::new(
        "par",
        vec![StageSpec::new("work", "sleep").param("ms", FEED_MS as i64).replicas(RUNNERS)],
    );
    par.partitions_in_flight = RUNNERS;
    let mut bar = PhaseSpec::new(
        "bar",
        vec![StageSpec::new("barrier", "sleep").param("ms", BARRIER_MS as i64).replicas(RUNNERS)],
    );
    bar.gates = vec![GateSpec::aggregate(FEEDS as u64), GateSpec::plain()];
    bar.partitions_in_flight = RUNNERS;
    Topology::new(vec![par, bar]).with_global_link(2, 0, open)
}

fn run_two_phase(open: u64, batches: usize, warmup: usize) -> Result<f64, String> {
    let rec = Recorder::in_memory();
    let service = Service::start(
        &two_phase(open),
        None,
        &builtin_transforms(),
        ServiceOptions {
            recorder: Some(rec.clone()),
            ..ServiceOptions::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let result = drive(&service, batches, FEEDS);
    service.shutdown();
    result?;
    steady_rate(&rec.events(), warmup)
}

/// One open batch runs at the summed phase times; four overlap the phases.
pub fn pipelining() -> Outcome {
    let start = Instant::now();
    let parallel = (FEEDS as u64 * FEED_MS) as f64 / RUNNERS as f64 / 1e3;
    let serial = BARRIER_MS as f64 / 1e3;
    let expected_single = 1.0 / (parallel + serial);
    let single = run_two_phase(1, 8, 1)?;
    let multi = run_two_phase(4, 28, 4)?;
    let elapsed = start.elapsed();
    let detail = format!(
        "single {single:.2}/s (model {expected_single:.2}/s), four open {multi:.2}/s, ratio {:.2}, {:.1} s",
        multi / single,
        elapsed.as_secs_f64()
    );
    ensure!(
        (single / expected_single - 1.0).abs() <= 0.2,
        "single-batch rate off the model by more than 20%: {detail}"
    );
    let floor = 0.8 / parallel.max(serial);
    ensure!(multi >= floor, "four-open rate below {floor:.2}/s: {detail}");
    ensure!(multi >= 1.8 * single, "four-open rate below 1.8x single: {detail}");
    ensure!(elapsed < Duration::from_secs(60), "took more than 60 s: {detail}");
    Ok(detail)
}

const SCALE_FEEDS: usize = 20;
const SCALE_PARTITION: u64 = 5;
const SCALE_FEED_MS: u64 = 10;
const SCALE_BARRIER_MS: u64 = 80;

fn free_addr() -> Result<String, String> {
    let l = TcpListener::bind("127.0.0.1:0").map_err(|e| e.to_string())?;
    Ok(l.local_addr().map_err(|e| e.to_string())?.to_string())
}

fn scale_topology(replicas: usize) -> Result<Topology, String> {
    let mut par = PhaseSpec::new(
        "par",
        vec![StageSpec::new("work", "sleep").param("ms", SCALE_FEED_MS as i64)],
    );
    par.partition_size = Some(SCALE_PARTITION);
    par.replicas = Replicas::Devices(vec!["work".into(); replicas]);
    let mut bar = PhaseSpec::new(
        "bar",
        vec![StageSpec::new("barrier", "sleep").param("ms", SCALE_BARRIER_MS as i64)],
    );
    bar.gates = vec![GateSpec::aggregate(SCALE_FEEDS as u64), GateSpec::plain()];
    bar.replicas = Replicas::Devices(vec!["coord".into()]);
    let mut topo = Topology::new(vec![par, bar]).with_global_link(2, 0, 8);
    topo.devices = vec![
        DeviceSpec {
            name: "coord".into(),
            address: free_addr()?,
        },
        DeviceSpec {
            name: "work".into(),
            address: free_addr()?,
        },
    ];
    topo.service.coordinator = Some("coord".into());
    Ok(topo)
}

struct Worker(Child);

impl Drop for Worker {
    fn drop(&mut self) {
        if let Ok(None) = self.0.try_wait() {
            let _ = self.0.kill();
            let _ = self.0.wait();
        }
    }
}

fn run_scaled(node: &Path, replicas: usize, batches: usize, warmup: usize) -> Result<f64, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let topo = scale_topology(replicas)?;
    let path = dir.path().join("topology.toml");
    std::fs::write(&path, topo.to_toml()).map_err(|e| e.to_string())?;
    let mut worker = Worker(
        Command::new(node)
            .arg("run")
            .arg("--topology")
            .arg(&path)
            .arg("--device")
            .arg("work")
            .stdout(Stdio::null())
            .spawn()
            .map_err(|e| format!("spawning {}: {e}", node.display()))?,
    );
    let rec = Recorder::in_memory();
    let coord = Service::start(
        &topo,
        Some("coord"),
        &builtin_transforms(),
        ServiceOptions {
            recorder: Some(rec.clone()),
            retry: RetryBudget {
                attempts: 400,
                delay: Duration::from_millis(25),
            },
            ..ServiceOptions::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let result = drive(&coord, batches, SCALE_FEEDS);
    coord.shutdown();
    let deadline = Instant::now() + Duration::from_secs(20);
    loop {
        match worker.0.try_wait().map_err(|e| e.to_string())? {
            Some(status) if status.success() => break,
            Some(status) => return Err(format!("worker exited with {status}")),
            None if Instant::now() > deadline => return Err("worker did not exit".into()),
            None => thread::sleep(Duration::from_millis(20)),
        }
    }
    result?;
    steady_rate(&rec.events(), warmup)
}

/// Sweeps parallel-phase replicas 1 to 4 on a worker process while the
/// barrier phase stays on the coordinator.
pub fn scale_out(node: &Path) -> Outcome {
    let per_replica = 1e3 / (SCALE_FEEDS as u64 * SCALE_FEED_MS) as f64;
    let cap = 1e3 / SCALE_BARRIER_MS as f64;
    let mut rates = Vec::new();
    for r in 1..=4 {
        rates.push(run_scaled(node, r, 30, 4)?);
    }
    let shown: Vec<String> = rates.iter().map(|r| format!("{r:.2}")).collect();
    let detail = format!(
        "batches/s for 1..4 replicas [{}], model {per_replica:.1}/s per replica, cap {cap:.1}/s",
        shown.join(", ")
    );
    ensure!(
        (rates[0] / per_replica - 1.0).abs() <= 0.2,
        "one replica off the model by more than 20%: {detail}"
    );
    // Ideal scaling is linear in the measured one-replica rate, clamped at
    // the barrier.
    let ideal = |r: usize| (r as f64 * rates[0]).min(cap);
    let mut knee = 4;
    for r in 2..=4 {
        if ideal(r) >= cap {
            knee = r;
            break;
        }
    }
    for r in 2..=knee {
        ensure!(rates[r - 1] > rates[r - 2], "rate fell from {} to {r} replicas: {detail}", r - 1);
    }
    for r in 2..knee {
        let want = ideal(r) - ideal(r - 1);
        let got = rates[r - 1] - rates[r - 2];
        ensure!(
            got >= 0.9 * want,
            "increment to {r} replicas {got:.2}/s, below 0.9 x ideal {want:.2}/s: {detail}"
        );
    }
    for r in knee..=4 {
        ensure!(
            (rates[r - 1] / cap - 1.0).abs() <= 0.2,
            "{r} replicas not on the plateau: {detail}"
        );
    }
    Ok(format!("{detail}, knee at {knee}"))
}
