use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use lims_core::config::Config;
use lims_core::datastore::Datastore;
use lims_core::pipeline::{backfill, parse_modes, Pipeline};
use lims_core::sim::{simulate, SimSpec};

#[derive(Parser)]
#[command(name = "lims", version, about = "Laboratory data capture, archiving and search")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run daemons until interrupted.
    Run {
        #[arg(long, short)]
        config: PathBuf,
        /// monitor, harvest, extract, serve, all, or a comma list.
        #[arg(long, short, default_value = "all")]
        mode: String,
    },
    /// Archive and extract every file under a directory of historical data.
    Backfill {
        #[arg(long, short)]
        config: PathBuf,
        root: PathBuf,
    },
    /// Write simulated instrument files and a manifest of their values.
    Simulate {
        #[arg(long, short)]
        config: PathBuf,
        /// Tool whose translation config shapes the files.
        #[arg(long)]
        tool: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        /// Files per minute; 0 writes them back to back.
        #[arg(long, default_value_t = 0.0)]
        rate: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Row range per aggregate, `min:max`.
        #[arg(long, default_value = "5:20")]
        rows: String,
        #[arg(long)]
        subdir: Option<String>,
        /// Where to write the manifest (default `<out>/manifest.json`).
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Chart stored series as SVG, with the points alongside as CSV.
    Plot {
        #[arg(long, short)]
        config: Option<PathBuf>,
        /// Datastore path, instead of the one named by a config.
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(required = true)]
        file_ids: Vec<i64>,
        /// Keep only series with this name (repeatable).
        #[arg(long = "trace")]
        traces: Vec<String>,
        #[arg(long, short, default_value = "plot.svg")]
        out: PathBuf,
    },
    /// Parse and validate a config file.
    ConfigCheck { config: PathBuf },
}

fn load(path: &Path) -> Result<Config> {
    Config::load(path).map_err(|e| anyhow!("{e}"))
}

fn parse_rows(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s.split_once(':').unwrap_or((s, s));
    let lo: usize = a.trim().parse().with_context(|| format!("bad row range {s:?}"))?;
    let hi: usize = b.trim().parse().with_context(|| format!("bad row range {s:?}"))?;
    if lo == 0 || hi < lo {
        bail!("bad row range {s:?}: need 1 <= min <= max");
    }
    Ok((lo, hi))
}

async fn wait_for_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        let mut term = signal(SignalKind::terminate()).expect("signal handler");
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    let _ = tokio::signal::ctrl_c().await;
}

async fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Run { config, mode } => {
            let cfg = load(&config)?;
            let modes = parse_modes(&mode).map_err(|e| anyhow!(e))?;
            let p = Pipeline::start(&cfg, &modes).await?;
            if let Some(a) = p.harvester_addr() {
                println!("harvester listening on {a}");
            }
            if let Some(a) = p.service_addr() {
                println!("service listening on http://{a}");
            }
            println!("ready");
            wait_for_signal().await;
            tracing::info!("shutting down");
            p.shutdown().await;
        }
        Cmd::Backfill { config, root } => {
            let cfg = load(&config)?;
            let store = Arc::new(Datastore::open(&cfg.store_path)?);
            let report = backfill(&cfg, store.clone(), &root).await?;
            store.checkpoint()?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if !report.errors.is_empty() {
                bail!("{} file(s) failed", report.errors.len());
            }
        }
        Cmd::Simulate {
            config,
            tool,
            out,
            count,
            rate,
            seed,
            rows,
            subdir,
            manifest,
        } => {
            let cfg = load(&config)?;
            let tc = cfg
                .translations
                .iter()
                .find(|t| t.tool_name == tool)
                .ok_or_else(|| anyhow!("no translation config for tool {tool:?}"))?;
            let spec = SimSpec {
                rate_per_min: rate,
                count,
                rows: parse_rows(&rows)?,
                seed,
                subdir,
            };
            let m = simulate(tc, &spec, &out, |p, _| tracing::info!(path = %p.display(), "wrote")).await?;
            let mpath = manifest.unwrap_or_else(|| out.join("manifest.json"));
            m.write(&mpath)?;
            println!("wrote {} file(s); manifest {}", m.files.len(), mpath.display());
        }
        Cmd::Plot {
            config,
            store,
            file_ids,
            traces,
            out,
        } => {
            let path = match (store, config) {
                (Some(s), _) => s,
                (None, Some(c)) => load(&c)?.store_path,
                (None, None) => bail!("give --store or --config"),
            };
            let store = Datastore::open(&path)?;
            let done = lims_cli::plot::plot(&store, &file_ids, &traces, &out)?;
            println!(
                "{} trace(s) -> {} and {}",
                done.traces.len(),
                done.svg.display(),
                done.csv.display()
            );
        }
        Cmd::ConfigCheck { config } => {
            let cfg = load(&config)?;
            println!(
                "ok: {} instrument(s), {} translation(s), {} project(s), store {}",
                cfg.instruments.len(),
                cfg.translations.len(),
                cfg.projects.len(),
                cfg.store_path.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    lims_cli::init_logging();
    let cli = Cli::parse();
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    match rt.block_on(run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
