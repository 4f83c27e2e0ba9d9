//! The `sortmerge` command line.

use std::io::Write as _;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use flowgate::node::{self, ReportArgs};
use flowgate::trace::Recorder;
use flowgate::transport::{RetryBudget, ServiceClient};

use crate::app::{request_inputs, AppConfig, SortMerge, Variant};
use crate::dataset::{generate, DatasetManifest, GenSpec};
use crate::stages::output_keys;
use crate::store::Store;
use crate::verify::verify_output;

#[derive(Debug, Parser)]
#[command(name = "sortmerge", version, about = "Out-of-core sort-merge on flowgate pipelines")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the service until a client asks it to shut down.
    Serve {
        /// App config (TOML); defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "fused")]
        variant: Variant,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, default_value = "127.0.0.1:0")]
        listen: String,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Print the topology a config generates.
    Topology {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "fused")]
        variant: Variant,
    },
    /// Write a seeded random dataset and its manifest.
    GenData {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, default_value = "data")]
        name: String,
        #[arg(long)]
        chunks: usize,
        #[arg(long)]
        records_per_chunk: usize,
        #[arg(long, default_value_t = 16)]
        value_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Manifest path; defaults to `<data-dir>/<name>.toml`.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Submit a dataset for sorting; prints the ticket id.
    Submit {
        #[arg(long)]
        addr: String,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Wait for a request and print its output chunk keys in order.
    Collect {
        #[arg(long)]
        addr: String,
        #[arg(long)]
        ticket: u64,
    },
    /// Check output chunks (keys, one per line) against the input.
    Verify {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        outputs: PathBuf,
        #[arg(long, default_value_t = 1)]
        rounds: u64,
    },
    /// Ask a service to shut down.
    Shutdown {
        #[arg(long)]
        addr: String,
    },
    /// Summarize a run log as CSV.
    Report(ReportArgs),
}

pub fn main() {
    node::init_logging();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn load_config(path: Option<&PathBuf>) -> Result<AppConfig> {
    Ok(match path {
        Some(p) => AppConfig::load(p)?,
        None => AppConfig::default(),
    })
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Serve {
            config,
            variant,
            data_dir,
            listen,
            log,
        } => {
            let cfg = load_config(config.as_ref())?;
            let recorder = log
                .as_deref()
                .map(Recorder::to_file)
                .transpose()
                .context("opening run log")?;
            let app = SortMerge::start(&cfg, variant, &data_dir, recorder)?;
            node::serve_local(Arc::new(app.into_service()), &listen)
        }
        Command::Topology { config, variant } => {
            print!("{}", load_config(config.as_ref())?.topology(variant).to_toml());
            Ok(())
        }
        Command::GenData {
            data_dir,
            name,
            chunks,
            records_per_chunk,
            value_len,
            seed,
            manifest,
        } => {
            let store = Store::open(&data_dir, None)?;
            let m = generate(
                &store,
                &GenSpec {
                    name: name.clone(),
                    chunks,
                    records_per_chunk,
                    value_len,
                    seed,
                },
            )?;
            let path = manifest.unwrap_or_else(|| data_dir.join(format!("{name}.toml")));
            m.save(&path)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Submit { addr, manifest } => {
            let m = DatasetManifest::load(&manifest)
                .with_context(|| format!("reading {}", manifest.display()))?;
            let mut client = ServiceClient::connect(&addr, RetryBudget::default())?;
            let (ticket, _) = client.submit(request_inputs(&m))?;
            println!("{ticket}");
            Ok(())
        }
        Command::Collect { addr, ticket } => {
            let mut client = ServiceClient::connect(&addr, RetryBudget::default())?;
            let keys = output_keys(&client.collect(ticket)?);
            let out = std::io::stdout();
            let mut out = out.lock();
            for k in keys {
                writeln!(out, "{k}")?;
            }
            Ok(())
        }
        Command::Verify {
            data_dir,
            manifest,
            outputs,
            rounds,
        } => {
            let store = Store::open(&data_dir, None)?;
            let m = DatasetManifest::load(&manifest)?;
            let keys: Vec<String> = std::fs::read_to_string(&outputs)
                .with_context(|| format!("reading {}", outputs.display()))?
                .lines()
                .filter(|l| !l.is_empty())
                .map(str::to_owned)
                .collect();
            let v = verify_output(&store, &m, &keys, rounds)?;
            println!("ok: {} records in {} chunks", v.records, v.chunks);
            Ok(())
        }
        Command::Shutdown { addr } => {
            ServiceClient::connect(&addr, RetryBudget::default())?.shutdown()?;
            Ok(())
        }
        Command::Report(args) => {
            print!("{}", node::report(&args)?);
            Ok(())
        }
    }
}
