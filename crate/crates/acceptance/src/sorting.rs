//! Sort-merge criteria.

use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use flowgate::metrics;
use flowgate::trace::Recorder;
use flowgate_sortmerge::dataset::{generate, read_chunk};
use flowgate_sortmerge::stages::align_chunk;
use flowgate_sortmerge::store::{io_component, Class};
use flowgate_sortmerge::verify::verify_output;
use flowgate_sortmerge::{AppConfig, DatasetManifest, GenSpec, SortMerge, Store, Variant};

use crate::{ensure, Outcome};

fn dataset(dir: &Path, name: &str, chunks: usize, records: usize, seed: u64) -> Result<DatasetManifest, String> {
    let store = Store::open(dir, None).map_err(|e| e.to_string())?;
    generate(
        &store,
        &GenSpec {
            name: name.into(),
            chunks,
            records_per_chunk: records,
            value_len: 16,
            seed,
        },
    )
    .map_err(|e| e.to_string())
}

/// Concurrent requests over 100 chunks of 10,000 records each, checked
/// against a full sort of each input.
pub fn correctness(requests: usize, chunks: usize, records: usize) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let sets = (0..requests)
        .map(|i| dataset(dir.path(), &format!("r{i}"), chunks, records, 100 + i as u64))
        .collect::<Result<Vec<_>, _>>()?;
    let cfg = AppConfig {
        output_records: records as u64,
        max_open_requests: requests as u64,
        ..AppConfig::default()
    };
    let app = SortMerge::start(&cfg, Variant::Fused, dir.path(), None).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let results = thread::scope(|s| {
        let handles: Vec<_> = sets
            .iter()
            .map(|m| {
                let app = &app;
                s.spawn(move || -> Result<u64, String> {
                    let t = app.submit(m).map_err(|e| e.to_string())?;
                    let out = app.collect(&t).map_err(|e| e.to_string())?;
                    let plain = Store::open(app.store().root(), None).map_err(|e| e.to_string())?;
                    let v = verify_output(&plain, m, &out, cfg.transform_rounds)
                        .map_err(|e| format!("request {}: {e}", t.batch_id))?;
                    Ok(v.records)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("request thread panicked"))
            .collect::<Vec<_>>()
    });
    let elapsed = start.elapsed();
    app.shutdown();
    let mut verified = 0;
    for r in results {
        verified += r?;
    }
    let want = (requests * chunks * records) as u64;
    ensure!(verified == want, "verified {verified} records, expected {want}");
    ensure!(elapsed < Duration::from_secs(120), "took {elapsed:.2?}, limit 2 min");
    Ok(format!(
        "{requests} concurrent requests of {chunks}x{records} records sorted and verified in {:.1} s",
        elapsed.as_secs_f64()
    ))
}

/// Intermediate bytes of both variants on one input, against the size of
/// the transformed dataset computed directly.
pub fn fusion_io(chunks: usize, records: usize) -> Outcome {
    let cfg = AppConfig::default();
    let mut intermediate = Vec::new();
    let mut transformed = None;
    for variant in [Variant::Baseline, Variant::Fused] {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let m = dataset(dir.path(), "d", chunks, records, 7)?;
        let plain = Store::open(dir.path(), None).map_err(|e| e.to_string())?;
        if transformed.is_none() {
            let mut bytes = 0u64;
            for key in &m.chunks {
                let chunk = read_chunk(&plain, key).map_err(|e| e.to_string())?;
                let t = align_chunk(&chunk, cfg.transform_rounds);
                bytes += t.encode().map_err(|e| e.to_string())?.len() as u64;
            }
            transformed = Some(bytes);
        }
        let rec = Recorder::in_memory();
        let app = SortMerge::start(&cfg, variant, dir.path(), Some(rec.clone())).map_err(|e| e.to_string())?;
        let result = app.submit(&m).and_then(|t| app.collect(&t));
        app.shutdown();
        let out = result.map_err(|e| format!("{variant:?}: {e}"))?;
        verify_output(&plain, &m, &out, cfg.transform_rounds).map_err(|e| format!("{variant:?}: {e}"))?;
        let io = metrics::io_by_component(&rec.events());
        let get = |write| io.get(&io_component(Class::Intermediate, write)).copied().unwrap_or(0);
        intermediate.push(get(false) + get(true));
    }
    let transformed = transformed.unwrap_or(0);
    let (base, fused) = (intermediate[0], intermediate[1]);
    ensure!(
        base.checked_sub(fused) == Some(2 * transformed),
        "intermediate bytes Baseline {base}, Fused {fused}; difference should be 2 x {transformed}"
    );
    Ok(format!(
        "intermediate bytes Baseline {base}, Fused {fused}, difference {} = 2 x transformed {transformed}",
        base - fused
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_instances_pass() {
        correctness(2, 20, 50).unwrap();
        fusion_io(20, 30).unwrap();
    }
}
