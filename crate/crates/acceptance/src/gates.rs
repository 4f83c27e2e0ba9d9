//! Gate-level criteria. Each runs unchanged on either backend.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use flowgate::gate::GateOps;
use flowgate::metrics;
use flowgate::model::{make_metadata, Feed, Payload};
use flowgate::node::fnv1a;
use flowgate::stage::{StageDef, StageInput, StageRunner};
use flowgate::trace::{EventKind, TraceEvent, Tracer};

use crate::rig::{Backend, GateDef, Layout, Mode};
use crate::{ensure, Outcome};

const V: &str = "v";

fn batch_feeds(batch: u64, arity: u64, value: impl Fn(u64) -> Vec<u8>) -> Vec<Feed> {
    (0..arity)
        .map(|s| {
            Feed::new(
                make_metadata(batch, arity).expect("arity is positive").with_seq(s),
                Payload::single(V, value(s)),
            )
        })
        .collect()
}

fn seq_value(s: u64) -> Vec<u8> {
    s.to_le_bytes().to_vec()
}

/// Group sizes of `a` items taken `s` at a time, counted one item at a time.
pub fn brute_force_groups(a: u64, s: u64) -> Vec<u64> {
    let mut groups = Vec::new();
    let mut current = 0;
    for _ in 0..a {
        current += 1;
        if current == s {
            groups.push(current);
            current = 0;
        }
    }
    if current > 0 {
        groups.push(current);
    }
    groups
}

/// Aggregate dequeue against the grouping oracle for random `(A, S)`.
pub fn arity_oracle(backend: &Backend, pairs: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases: Vec<(u64, u64)> = (0..pairs)
        .map(|_| (rng.gen_range(1..=10_000), rng.gen_range(1..=1_000)))
        .collect();
    let mut layout = Layout::default();
    let mut gate_of = BTreeMap::new();
    for &(_, s) in &cases {
        gate_of
            .entry(s)
            .or_insert_with(|| layout.gate(format!("agg{s}"), Mode::Aggregate(s)));
    }
    let rig = backend.start(&layout)?;
    let start = Instant::now();
    let mut handles: HashMap<u32, Arc<dyn GateOps>> = HashMap::new();
    let mut feeds_total = 0;
    let mut with_remainder = 0;
    for (i, &(a, s)) in cases.iter().enumerate() {
        let id = gate_of[&s];
        let gate = handles.entry(id).or_insert_with(|| rig.gate(id)).clone();
        let batch = i as u64 + 1;
        // Empty payloads: only counts matter here, and building millions of
        // valued feeds would dominate the runtime.
        let feeds = (0..a)
            .map(|q| Feed::new(make_metadata(batch, a).expect("arity is positive").with_seq(q), Payload::new()))
            .collect();
        gate.enqueue_all(feeds).map_err(|e| format!("A={a} S={s}: {e}"))?;
        let expected = brute_force_groups(a, s);
        for (j, &size) in expected.iter().enumerate() {
            let agg = gate
                .take()
                .map_err(|e| format!("A={a} S={s}: {e}"))?
                .into_aggregate()
                .ok_or("aggregate gate emitted a single feed")?;
            let md = agg.metadata;
            ensure!(
                md.batch().id == batch && md.feed_seq == j as u64 && md.innermost().arity == expected.len() as u64,
                "A={a} S={s}: aggregate {j} has metadata {md:?}"
            );
            ensure!(
                agg.members.len() as u64 == size,
                "A={a} S={s}: aggregate {j} has {} members, oracle {size}",
                agg.members.len()
            );
        }
        feeds_total += a;
        with_remainder += u64::from(a % s != 0);
    }
    let elapsed = start.elapsed();
    drop(handles);
    let events = rig.finish()?;
    metrics::check_exactly_once(&events).map_err(|bad| bad.join("; "))?;
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:.2?}, limit 5 s");
    Ok(format!(
        "{pairs} pairs, {feeds_total} feeds, {with_remainder} with a short last aggregate, {:.2} s",
        elapsed.as_secs_f64()
    ))
}

fn spawn_runners(
    name: &str,
    transform: fn(&[u8]) -> Vec<u8>,
    n: usize,
    up: impl Fn() -> Arc<dyn GateOps>,
    down: impl Fn() -> Arc<dyn GateOps>,
) -> Vec<thread::JoinHandle<Result<u64, flowgate::StageError>>> {
    let def = Arc::new(StageDef::new(name, move |input: StageInput<'_>| {
        let v = input.members()[0].get(V).ok_or("no value")?;
        Ok(Payload::single(V, transform(v)))
    }));
    (0..n)
        .map(|r| StageRunner::new(def.clone(), up(), down(), r, Tracer::disabled()).spawn())
        .collect()
}

fn t_hash(v: &[u8]) -> Vec<u8> {
    let mut out = fnv1a(v).to_le_bytes().to_vec();
    out.extend_from_slice(v);
    out
}

fn t_reverse(v: &[u8]) -> Vec<u8> {
    v.iter().rev().copied().collect()
}

fn t_tag(v: &[u8]) -> Vec<u8> {
    let mut out = v.to_vec();
    out.extend_from_slice(&(v.len() as u32).to_le_bytes());
    out
}

const STAGES: [(&str, fn(&[u8]) -> Vec<u8>); 3] =
    [("hash", t_hash), ("reverse", t_reverse), ("tag", t_tag)];

type Outputs = BTreeMap<u64, Vec<Vec<u8>>>;

/// Runs `batches` through the 3-stage pipeline on gates `g[0..4]` and
/// returns each batch's outputs in feed order.
fn run_pipeline(
    rig: &crate::rig::Rig,
    g: [u32; 4],
    batches: &[(u64, Vec<Feed>)],
    runners: [usize; 3],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Outputs, String> {
    let mut handles = Vec::new();
    for (k, &(name, t)) in STAGES.iter().enumerate() {
        handles.extend(spawn_runners(name, t, runners[k], || rig.gate(g[k]), || rig.gate(g[k + 1])));
    }
    let total: usize = batches.iter().map(|(_, f)| f.len()).sum();
    let consumers = if rng.is_some() { 2 } else { 1 };
    let out = Mutex::new(BTreeMap::<u64, Vec<(u64, Vec<u8>)>>::new());
    let taken = AtomicU64::new(0);
    let produce: Vec<(Vec<Feed>, u64)> = match rng {
        // Each producer sends its batch in a random order with random pauses.
        Some(rng) => batches
            .iter()
            .map(|(_, f)| {
                let mut f = f.clone();
                f.shuffle(rng);
                (f, rng.gen())
            })
            .collect(),
        None => Vec::new(),
    };
    let result = thread::scope(|s| -> Result<(), String> {
        let mut consumer_handles = Vec::new();
        for _ in 0..consumers {
            let gate = rig.gate(g[3]);
            let (out, taken) = (&out, &taken);
            consumer_handles.push(s.spawn(move || -> Result<(), String> {
                while taken.fetch_add(1, Ordering::SeqCst) < total as u64 {
                    let f = gate
                        .take()
                        .map_err(|e| e.to_string())?
                        .into_feed()
                        .ok_or("plain gate emitted an aggregate")?;
                    ensure!(!f.is_failure(), "feed failed: {:?}", f.payload.failure_cause());
                    out.lock().unwrap().entry(f.metadata.batch().id).or_default().push((
                        f.metadata.feed_seq,
                        f.payload.get(V).unwrap_or_default().to_vec(),
                    ));
                }
                Ok(())
            }));
        }
        if produce.is_empty() {
            // Serial: one batch at a time, waiting for it to drain.
            let input = rig.gate(g[0]);
            for (id, feeds) in batches {
                input.enqueue_all(feeds.clone()).map_err(|e| e.to_string())?;
                while out.lock().unwrap().get(id).map_or(0, Vec::len) < feeds.len() {
                    thread::sleep(Duration::from_millis(1));
                }
            }
        } else {
            let mut producers = Vec::new();
            for (feeds, seed) in produce {
                let input = rig.gate(g[0]);
                producers.push(s.spawn(move || -> Result<(), String> {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    for f in feeds {
                        input.enqueue(f).map_err(|e| e.to_string())?;
                        match rng.gen_range(0..4) {
                            0 => thread::sleep(Duration::from_micros(rng.gen_range(0..300))),
                            1 => thread::yield_now(),
                            _ => {}
                        }
                    }
                    Ok(())
                }));
            }
            for p in producers {
                p.join().expect("producer panicked")?;
            }
        }
        for c in consumer_handles {
            c.join().expect("consumer panicked")?;
        }
        Ok(())
    });
    for id in g {
        rig.gate(id).shutdown();
    }
    for h in handles {
        h.join()
            .expect("runner panicked")
            .map_err(|e| e.to_string())?;
    }
    result?;
    Ok(out
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|(b, mut v)| {
            v.sort_by_key(|(s, _)| *s);
            (b, v.into_iter().map(|(_, p)| p).collect())
        })
        .collect())
}

/// Concurrent batches under random schedules match serial execution.
pub fn isolation(backend: &Backend, schedules: usize, seed: u64) -> Outcome {
    const BATCHES: u64 = 8;
    const FEEDS: u64 = 50;
    let mut layout = Layout::default();
    let mut four = |prefix: &str| -> [u32; 4] {
        std::array::from_fn(|i| layout.gate(format!("{prefix}g{i}"), Mode::Plain))
    };
    let serial_gates = four("serial/");
    let schedule_gates: Vec<[u32; 4]> = (0..schedules).map(|k| four(&format!("s{k}/"))).collect();
    let rig = backend.start(&layout)?;
    let start = Instant::now();
    let batches: Vec<(u64, Vec<Feed>)> = (1..=BATCHES)
        .map(|b| {
            (
                b,
                batch_feeds(b, FEEDS, |s| format!("batch {b} feed {s}").into_bytes()),
            )
        })
        .collect();
    let reference = run_pipeline(&rig, serial_gates, &batches, [1, 1, 1], None)?;
    ensure!(reference.len() == BATCHES as usize, "serial run lost a batch");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (k, g) in schedule_gates.iter().enumerate() {
        let runners = [rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=3)];
        let got = run_pipeline(&rig, *g, &batches, runners, Some(&mut rng))?;
        for (b, want) in &reference {
            ensure!(
                got.get(b) == Some(want),
                "schedule {k} (runners {runners:?}): batch {b} differs from serial execution"
            );
        }
    }
    let elapsed = start.elapsed();
    rig.finish()?;
    ensure!(elapsed < Duration::from_secs(30), "took {elapsed:.2?}, limit 30 s");
    Ok(format!(
        "{schedules} schedules of {BATCHES}x{FEEDS} feeds byte-identical to serial, {:.2} s",
        elapsed.as_secs_f64()
    ))
}

fn closes(events: &[TraceEvent], gate: &str) -> usize {
    events
        .iter()
        .filter(|e| e.kind == EventKind::BatchClose && &*e.component == gate)
        .count()
}

/// A credit link of 3 bounds open batches while 10 requests complete.
pub fn flow_control(backend: &Backend) -> Outcome {
    const REQUESTS: u64 = 10;
    const FEEDS: u64 = 5;
    let mut layout = Layout::default();
    let input = layout.gate("in", Mode::Plain);
    let output = layout.gate("out", Mode::Plain);
    layout.link(input, output, 3);
    let rig = backend.start(&layout)?;
    let start = Instant::now();
    let slow = |v: &[u8]| {
        thread::sleep(Duration::from_millis(2));
        v.to_vec()
    };
    let runners = spawn_runners("work", slow, 2, || rig.gate(input), || rig.gate(output));
    let gate = rig.gate(input);
    for b in 1..=REQUESTS {
        gate.enqueue_all(batch_feeds(b, FEEDS, seq_value))
            .map_err(|e| e.to_string())?;
    }
    let out = rig.gate(output);
    let mut done = BTreeMap::<u64, u64>::new();
    for _ in 0..REQUESTS * FEEDS {
        let f = out.take().map_err(|e| e.to_string())?.into_feed().ok_or("aggregate")?;
        *done.entry(f.metadata.batch().id).or_default() += 1;
    }
    let elapsed = start.elapsed();
    drop((gate, out));
    let events = rig.finish()?;
    for r in runners {
        r.join().expect("runner panicked").map_err(|e| e.to_string())?;
    }
    let peak = metrics::max_open_between(&events, "in", "out");
    ensure!(peak <= 3, "{peak} batches open at once, bound 3");
    ensure!(
        done.len() as u64 == REQUESTS && done.values().all(|&n| n == FEEDS),
        "completed {done:?}"
    );
    ensure!(closes(&events, "out") as u64 == REQUESTS, "not every request closed at `out`");
    ensure!(elapsed < Duration::from_secs(30), "took {elapsed:.2?}, limit 30 s");
    Ok(format!("peak open {peak} (bound 3), {REQUESTS}/{REQUESTS} complete, {:.2} s", elapsed.as_secs_f64()))
}

/// Occupancy of a capacity-16 gate under saturating producers.
pub fn buffer_bound(backend: &Backend) -> Outcome {
    const PRODUCERS: u64 = 4;
    const FEEDS: u64 = 400;
    let mut layout = Layout::default();
    let q = layout.add(GateDef {
        name: "q".into(),
        mode: Mode::Plain,
        capacity: Some(16),
        reassemble: false,
    });
    let rig = backend.start(&layout)?;
    let received = thread::scope(|s| -> Result<u64, String> {
        for p in 1..=PRODUCERS {
            let gate = rig.gate(q);
            s.spawn(move || {
                for f in batch_feeds(p, FEEDS, seq_value) {
                    if gate.enqueue(f).is_err() {
                        return;
                    }
                }
            });
        }
        let out = rig.gate(q);
        let mut n = 0;
        for i in 0..PRODUCERS * FEEDS {
            out.take().map_err(|e| e.to_string())?;
            n += 1;
            if i % 4 == 0 {
                thread::sleep(Duration::from_micros(200));
            }
        }
        Ok(n)
    })?;
    let events = rig.finish()?;
    let peak = metrics::max_occupancy(&events, "q");
    ensure!(peak <= 16, "occupancy reached {peak}, capacity 16");
    ensure!(received == PRODUCERS * FEEDS, "received {received} feeds");
    // A bound that is never approached would prove nothing.
    ensure!(peak == 16, "producers never saturated the gate (peak {peak})");
    Ok(format!("peak occupancy {peak} over {received} feeds from {PRODUCERS} producers"))
}

/// Every batch closes at every gate with enqueues = dequeued members =
/// effective arity, through partition, reassembly and aggregation.
pub fn exactly_once(backend: &Backend, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut arities = vec![1u64, 3, 7, 8, 21, 22];
    arities.extend((0..10).map(|_| rng.gen_range(1..=60)));
    let mut layout = Layout::default();
    let ingress = layout.gate("split", Mode::Partition(7));
    let l_in = layout.gate("local/in", Mode::Plain);
    let l_out = layout.gate("local/out", Mode::Plain);
    let agg = layout.add(GateDef {
        name: "join".into(),
        mode: Mode::Aggregate(3),
        capacity: None,
        reassemble: true,
    });
    let egress = layout.gate("out", Mode::Plain);
    layout.link(ingress, egress, 2);
    let rig = backend.start(&layout)?;
    let mut threads = Vec::new();
    for _ in 0..2 {
        // Splits partitions into the local pipeline, as ingress pumps do.
        let (up, down) = (rig.gate(ingress), rig.gate(l_in));
        threads.push(thread::spawn(move || {
            while let Ok(d) = up.take() {
                let Some(p) = d.into_aggregate() else { return };
                let md = p.metadata;
                let feeds = p
                    .members
                    .into_iter()
                    .enumerate()
                    .map(|(k, m)| Feed::new(md.with_seq(k as u64), m))
                    .collect();
                if down.enqueue_all(feeds).is_err() {
                    return;
                }
            }
        }));
        let (up, down) = (rig.gate(l_out), rig.gate(agg));
        threads.push(thread::spawn(move || {
            while let Ok(d) = up.take() {
                let Some(f) = d.into_feed() else { return };
                if down.enqueue(f).is_err() {
                    return;
                }
            }
        }));
    }
    let mut runners = spawn_runners("local", t_hash, 2, || rig.gate(l_in), || rig.gate(l_out));
    let concat = Arc::new(
        StageDef::new("merge", |input: StageInput<'_>| {
            let mut v = Vec::new();
            for m in input.members() {
                v.extend_from_slice(m.get(V).ok_or("no value")?);
            }
            Ok(Payload::single(V, v))
        })
        .aggregating(3),
    );
    for r in 0..2 {
        runners.push(StageRunner::new(concat.clone(), rig.gate(agg), rig.gate(egress), r, Tracer::disabled()).spawn());
    }
    let input = rig.gate(ingress);
    for (i, &a) in arities.iter().enumerate() {
        input
            .enqueue_all(batch_feeds(i as u64 + 1, a, seq_value))
            .map_err(|e| e.to_string())?;
    }
    let out = rig.gate(egress);
    let expected: u64 = arities.iter().map(|a| a.div_ceil(3)).sum();
    for _ in 0..expected {
        let f = out.take().map_err(|e| e.to_string())?.into_feed().ok_or("aggregate")?;
        ensure!(!f.is_failure(), "feed failed: {:?}", f.payload.failure_cause());
    }
    drop((input, out));
    let events = rig.finish()?;
    for t in threads {
        t.join().expect("pump panicked");
    }
    for r in runners {
        r.join().expect("runner panicked").map_err(|e| e.to_string())?;
    }
    let pairs = metrics::check_exactly_once(&events).map_err(|bad| bad.join("; "))?;
    let partitions: u64 = arities.iter().map(|a| a.div_ceil(7)).sum();
    // split, join and out see each batch; the local gates each partition.
    let want = 3 * arities.len() as u64 + 2 * partitions;
    ensure!(pairs as u64 == want, "{pairs} balanced gate/batch pairs, expected {want}");
    ensure!(closes(&events, "out") == arities.len(), "not every batch closed at `out`");
    Ok(format!(
        "{pairs} gate/batch pairs balanced over {} batches and {partitions} partitions",
        arities.len()
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grouping_oracle() {
        assert_eq!(brute_force_groups(10, 3), vec![3, 3, 3, 1]);
        assert_eq!(brute_force_groups(9, 3), vec![3, 3, 3]);
        assert_eq!(brute_force_groups(2, 5), vec![2]);
        assert_eq!(brute_force_groups(2236, 10).len(), 224);
        for a in 1..50 {
            for s in 1..12 {
                let g = brute_force_groups(a, s);
                assert_eq!(g.len() as u64, flowgate::model::aggregate_arity(a, s));
                assert_eq!(g.iter().sum::<u64>(), a);
            }
        }
    }

    #[test]
    fn small_runs_pass_in_process() {
        let b = Backend::InProcess;
        arity_oracle(&b, 20, 1).unwrap();
        isolation(&b, 2, 1).unwrap();
        flow_control(&b).unwrap();
        buffer_bound(&b).unwrap();
        exactly_once(&b, 1).unwrap();
    }
}
