//! The `flowgate-node` command line: running topologies, hosting bare gates,
//! talking to a running service and summarizing run logs.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::credit::{create_link, LinkScope};
use crate::gate::{Gate, GateConfig, IdSource};
use crate::metrics;
use crate::model::{ArityTransform, Payload};
use crate::service::{Service, ServiceOptions};
use crate::stage::{param_u64, StageInput, TransformRegistry};
use crate::topology::Topology;
use crate::trace::{read_log, Recorder, Tracer};
use crate::transport::{GateHost, GateServer, RetryBudget, ServiceClient};

/// Entry name used for CLI inputs and outputs.
pub const DATA: &str = "data";

#[derive(Debug, Parser)]
#[command(name = "flowgate-node", version, about = "Run and query batch-aware dataflow pipelines")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run this device's part of a topology until shut down.
    Run {
        #[arg(long)]
        topology: PathBuf,
        /// Device name; required for distributed topologies.
        #[arg(long)]
        device: Option<String>,
        /// Listen address overriding the topology's.
        #[arg(long)]
        listen: Option<String>,
        /// Front-end address for single-process topologies.
        #[arg(long, conflicts_with = "device")]
        serve: Option<String>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Host a set of gates for remote stages; exits once all are shut down.
    HostGates {
        #[arg(long)]
        gates: PathBuf,
        #[arg(long, default_value = "127.0.0.1:0")]
        listen: String,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Submit a request; prints the ticket id.
    Submit {
        #[arg(long)]
        addr: String,
        /// One input per occurrence.
        #[arg(long = "input")]
        inputs: Vec<String>,
        /// One input per line of this file.
        #[arg(long)]
        lines: Option<PathBuf>,
    },
    /// Wait for a request and print its outputs, one per line.
    Collect {
        #[arg(long)]
        addr: String,
        #[arg(long)]
        ticket: u64,
    },
    /// Ask a service to shut down.
    Shutdown {
        #[arg(long)]
        addr: String,
    },
    /// Summarize a run log as CSV.
    Report(ReportArgs),
}

#[derive(Debug, clap::Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long, value_enum)]
    pub kind: ReportKind,
    /// Throughput window in seconds.
    #[arg(long, default_value_t = 5.0)]
    pub window: f64,
    /// Component for latency reports: `request`, a phase or a gate name.
    #[arg(long, default_value = metrics::REQUEST)]
    pub component: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ReportKind {
    Throughput,
    Latency,
    Ccdf,
    Io,
    Check,
}

/// Parses the process arguments and runs the command, exiting with status 1
/// on error.
pub fn cli_main() {
    init_logging();
    if let Err(e) = run_cli(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

pub fn init_logging() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .try_init();
}

pub fn run_cli(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            topology,
            device,
            listen,
            serve,
            log,
        } => {
            let topo = Topology::load(&topology)?;
            run_topology(&topo, device.as_deref(), listen.or(serve), log.as_deref(), &builtin_transforms())
        }
        Command::HostGates { gates, listen, log } => host_gates(&gates, &listen, log.as_deref()),
        Command::Submit { addr, inputs, lines } => {
            let mut all: Vec<String> = inputs;
            if let Some(path) = lines {
                let text = std::fs::read_to_string(&path)
                    .with_context(|| format!("reading {}", path.display()))?;
                all.extend(text.lines().map(str::to_owned));
            }
            let payloads = all.into_iter().map(|s| Payload::single(DATA, s)).collect();
            let mut client = ServiceClient::connect(&addr, RetryBudget::default())?;
            let (ticket, arity) = client.submit(payloads)?;
            println!("{ticket}");
            log::info!("ticket {ticket} with {arity} inputs");
            Ok(())
        }
        Command::Collect { addr, ticket } => {
            let mut client = ServiceClient::connect(&addr, RetryBudget::default())?;
            let out = std::io::stdout();
            let mut out = out.lock();
            for p in client.collect(ticket)? {
                for (_, v) in p.entries() {
                    writeln!(out, "{}", String::from_utf8_lossy(v))?;
                }
            }
            Ok(())
        }
        Command::Shutdown { addr } => {
            ServiceClient::connect(&addr, RetryBudget::default())?.shutdown()?;
            Ok(())
        }
        Command::Report(args) => {
            print!("{}", report(&args)?);
            Ok(())
        }
    }
}

/// Starts a service and blocks until it stops. In distributed mode, and for
/// single-process topologies given a front-end address, prints
/// `listening on <addr>` once the service accepts connections.
pub fn run_topology(
    topology: &Topology,
    device: Option<&str>,
    listen: Option<String>,
    log: Option<&Path>,
    registry: &TransformRegistry,
) -> Result<()> {
    let recorder = log
        .map(Recorder::to_file)
        .transpose()
        .context("opening run log")?;
    if !topology.is_distributed() {
        let Some(addr) = listen else {
            bail!("single-process topologies need --serve <addr> to accept requests");
        };
        let service = Arc::new(Service::start(
            topology,
            None,
            registry,
            ServiceOptions {
                recorder,
                ..ServiceOptions::default()
            },
        )?);
        return serve_local(service, &addr);
    }
    let service = Service::start(
        topology,
        device,
        registry,
        ServiceOptions {
            listen,
            recorder,
            ..ServiceOptions::default()
        },
    )?;
    if let Some(addr) = service.local_addr() {
        println!("listening on {addr}");
        let _ = std::io::stdout().flush();
    }
    service.wait();
    service.shutdown();
    Ok(())
}

/// Serves a single-process service's front end over TCP.
pub fn serve_local(service: Arc<Service>, addr: &str) -> Result<()> {
    let host = Arc::new(GateHost::new("local"));
    host.set_frontend(service.frontend());
    let server = GateServer::bind(addr, host).with_context(|| format!("listening on {addr}"))?;
    println!("listening on {}", server.local_addr());
    let _ = std::io::stdout().flush();
    service.wait();
    drop(server);
    match Arc::try_unwrap(service) {
        Ok(s) => s.shutdown(),
        Err(_) => bail!("service still referenced at exit"),
    }
    Ok(())
}

/// Gates hosted by `host-gates`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateSet {
    #[serde(default)]
    pub gate: Vec<HostedGate>,
    #[serde(default)]
    pub link: Vec<HostedLink>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HostedGate {
    pub id: u32,
    pub name: String,
    #[serde(default = "plain")]
    pub mode: String,
    pub size: Option<u64>,
    pub capacity: Option<usize>,
    #[serde(default)]
    pub reassemble: bool,
}

fn plain() -> String {
    "plain".into()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HostedLink {
    pub id: u32,
    pub upstream: u32,
    pub downstream: u32,
    pub initial: u64,
}

impl HostedGate {
    pub fn config(&self) -> Result<GateConfig> {
        let size = || self.size.with_context(|| format!("gate `{}` needs a size", self.name));
        let mut config = match self.mode.as_str() {
            "plain" => GateConfig::plain(&self.name),
            "aggregate" => GateConfig::aggregate(&self.name, size()?),
            "partition" => GateConfig::partition(&self.name, size()?, ArityTransform::identity()),
            other => bail!("gate `{}`: unknown mode `{other}`", self.name),
        };
        if let Some(c) = self.capacity {
            config = config.with_capacity(c);
        }
        if self.reassemble {
            config = config.reassembling();
        }
        Ok(config)
    }
}

impl GateSet {
    pub fn parse(src: &str) -> Result<Self> {
        Ok(toml::from_str(src)?)
    }

    /// Creates the gates and links, returning a host for them.
    pub fn build(&self, recorder: Option<&Recorder>) -> Result<GateHost> {
        let tracer = |name: &str| recorder.map_or_else(Tracer::disabled, |r| r.tracer(name));
        let ids = IdSource::default();
        let mut host = GateHost::new("gates");
        let mut built: Vec<(u32, Arc<Gate>)> = Vec::new();
        for g in &self.gate {
            if built.iter().any(|(id, _)| *id == g.id) {
                bail!("duplicate gate id {}", g.id);
            }
            let gate = Gate::new(g.config()?, tracer(&g.name), Some(ids.clone()))
                .map_err(anyhow::Error::msg)?;
            host = host.with_gate(g.id, gate.clone());
            built.push((g.id, gate));
        }
        let find = |id: u32| {
            built
                .iter()
                .find(|(g, _)| *g == id)
                .map(|(_, g)| g)
                .with_context(|| format!("link refers to unknown gate {id}"))
        };
        for l in &self.link {
            let (up, down) = (find(l.upstream)?, find(l.downstream)?);
            let name = format!("link{}", l.id);
            let link = create_link(l.id, up, down, l.initial, LinkScope::Global, tracer(&name))?;
            host = host.with_link(link);
        }
        Ok(host)
    }
}

fn host_gates(path: &Path, listen: &str, log: Option<&Path>) -> Result<()> {
    let src = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let set = GateSet::parse(&src).with_context(|| format!("parsing {}", path.display()))?;
    let recorder = log.map(Recorder::to_file).transpose().context("opening run log")?;
    let host = Arc::new(set.build(recorder.as_ref())?);
    let server = GateServer::bind(listen, host.clone()).with_context(|| format!("listening on {listen}"))?;
    println!("listening on {}", server.local_addr());
    let _ = std::io::stdout().flush();
    while !host.all_shut_down() {
        thread::sleep(Duration::from_millis(20));
    }
    drop(server);
    if let Some(r) = recorder {
        r.finish()?;
    }
    Ok(())
}

pub fn report(args: &ReportArgs) -> Result<String> {
    let events = read_log(&args.log).with_context(|| format!("reading {}", args.log.display()))?;
    Ok(match args.kind {
        ReportKind::Throughput => {
            if !(args.window > 0.0) {
                bail!(metrics::MetricsError::InvalidWindow);
            }
            let window = (args.window * 1e9) as u64;
            metrics::throughput_csv(&metrics::throughput(&events, window)?)
        }
        ReportKind::Latency => metrics::latency_report(&events, &args.component)?.percentile_csv(),
        ReportKind::Ccdf => metrics::latency_report(&events, &args.component)?.ccdf_csv(),
        ReportKind::Io => metrics::io_csv(&events),
        ReportKind::Check => match metrics::check_exactly_once(&events) {
            Ok(n) => format!("exactly-once: ok ({n} gate/batch pairs)\n"),
            Err(bad) => bail!("exactly-once violated:\n{}", bad.join("\n")),
        },
    })
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// All entries of all members, in order.
fn concat(input: StageInput<'_>) -> Payload {
    let mut out = Payload::new();
    for m in input.members() {
        for (k, v) in m.entries() {
            out.push(k.clone(), v.clone());
        }
    }
    out
}

/// Transforms available to topologies run by `flowgate-node`:
///
/// * `identity`: passes entries through (an aggregate's members are
///   concatenated).
/// * `sleep`: like `identity` after sleeping `ms` milliseconds per call plus
///   `per_member_ms` per member.
/// * `hash`: replaces every value by its FNV-1a hash iterated `rounds` times
///   (default 1), as 8 little-endian bytes.
/// * `count`: one `count` entry holding the number of members.
pub fn builtin_transforms() -> TransformRegistry {
    let mut r = TransformRegistry::new();
    r.register("identity", |_| Ok(|input: StageInput<'_>| Ok(concat(input))));
    r.register("sleep", |params| {
        let ms = param_u64(params, "ms", 0)?;
        let per_member = param_u64(params, "per_member_ms", 0)?;
        Ok(move |input: StageInput<'_>| {
            let n = input.members().len() as u64;
            thread::sleep(Duration::from_millis(ms + per_member * n));
            Ok(concat(input))
        })
    });
    r.register("hash", |params| {
        let rounds = param_u64(params, "rounds", 1)?;
        Ok(move |input: StageInput<'_>| {
            let mut out = Payload::new();
            for m in input.members() {
                for (k, v) in m.entries() {
                    let mut bytes = v.clone();
                    for _ in 0..rounds {
                        bytes = fnv1a(&bytes).to_le_bytes().to_vec();
                    }
                    out.push(k.clone(), bytes);
                }
            }
            Ok(out)
        })
    });
    r.register("count", |_| {
        Ok(|input: StageInput<'_>| {
            Ok(Payload::single("count", (input.members().len() as u64).to_le_bytes().to_vec()))
        })
    });
    r
}
