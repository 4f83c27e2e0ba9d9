//! Runs every acceptance criterion and prints one line per criterion.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use flowgate_acceptance::rig::Backend;
use flowgate_acceptance::{gates, scaling, sorting, wire, Outcome};

type Check = Box<dyn FnOnce() -> Outcome + Send>;

fn node() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_acceptance-node"))
}

fn run(check: Check, limit: Duration) -> Outcome {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check))
            .unwrap_or_else(|_| Err("panicked".into()));
        let _ = tx.send(outcome);
    });
    rx.recv_timeout(limit)
        .unwrap_or_else(|_| Err(format!("no result within {} s", limit.as_secs())))
}

/// Criteria 1 to 5 again, with every gate in a separate process.
fn over_loopback() -> Outcome {
    let b = Backend::Loopback(node());
    let checks: [(&str, fn(&Backend) -> Outcome); 5] = [
        ("arity oracle", |b| gates::arity_oracle(b, 1000, 1)),
        ("isolation", |b| gates::isolation(b, 20, 2)),
        ("flow control", gates::flow_control),
        ("buffer bound", gates::buffer_bound),
        ("exactly once", |b| gates::exactly_once(b, 5)),
    ];
    let mut passed = Vec::new();
    for (name, check) in checks {
        let detail = check(&b).map_err(|e| format!("{name} over loopback: {e}"))?;
        passed.push(detail);
    }
    Ok(format!("over loopback: {}", passed.join("; ")))
}

fn main() -> ExitCode {
    let criteria: Vec<(&str, Check)> = vec![
        ("arity oracle", Box::new(|| gates::arity_oracle(&Backend::InProcess, 1000, 1))),
        ("isolation equivalence", Box::new(|| gates::isolation(&Backend::InProcess, 20, 2))),
        ("flow-control bound", Box::new(|| gates::flow_control(&Backend::InProcess))),
        ("buffer bound", Box::new(|| gates::buffer_bound(&Backend::InProcess))),
        ("exactly-once closure", Box::new(|| gates::exactly_once(&Backend::InProcess, 5))),
        ("pipelining benefit", Box::new(scaling::pipelining)),
        ("scale-out trend", Box::new(|| scaling::scale_out(&node()))),
        ("sort-merge correctness", Box::new(|| sorting::correctness(4, 100, 10_000))),
        ("fusion I/O saving", Box::new(|| sorting::fusion_io(60, 2_000))),
        ("transport transparency", Box::new(over_loopback)),
        ("wire format", Box::new(|| wire::wire_format(500, 3))),
    ];
    // ACCEPTANCE_ONLY=1,10 runs a subset.
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|n| n.trim().parse().ok()).collect());
    let total = criteria.len();
    let mut failed = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(i + 1))) {
            continue;
        }
        match run(check, Duration::from_secs(300)) {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(reason) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {reason}", i + 1);
            }
        }
    }
    let ran = only.map_or(total, |o| o.iter().filter(|&&n| (1..=total).contains(&n)).count());
    println!("{} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
