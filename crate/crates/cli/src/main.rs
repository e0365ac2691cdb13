use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use pae_core::accounting::{
    cost_sweep, parse_seq_sweep, render_costs, CostModelInput, Method, ReportFormat, RunMetrics,
};
use pae_core::config::{RunConfig, Transmit};
use pae_core::device::{decisions, hash_token, padded, DeviceState, RetryPolicy, Sample};
use pae_core::server::{serve_tcp, ConvergenceRule, EpochPlan, Server, ServerConfig};
use pae_core::simulate::{session_spec, Simulation};
use pae_core::transport::{Connection, TransportError};
use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "pae",
    version,
    about = "Additive side-tuning across a device and a server"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Accept device sessions, cache their records and train side networks.
    Serve(ServeArgs),
    /// Run the collaborative epoch against a server and keep the result.
    Device(DeviceArgs),
    /// Classify text with a deployed side network.
    Predict(PredictArgs),
    /// Run device and server in one process and print run metrics.
    Simulate(SimulateArgs),
    /// Print closed-form cost tables.
    Report(ReportArgs),
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 7431)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    bind: String,
    /// Directory for append-only activation logs; memory only if absent.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Total epoch budget, epoch 1 included.
    #[arg(long)]
    epochs: Option<u32>,
    /// Run exactly `--epochs` epochs without the early-stop rule.
    #[arg(long)]
    fixed_epochs: bool,
    /// Key-value file; only the training schedule keys are used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    queue_depth: usize,
    /// Stop after this many connections.
    #[arg(long)]
    max_connections: Option<usize>,
    #[arg(long)]
    multi_session: bool,
}

#[derive(Args)]
struct DeviceArgs {
    /// Server address, `host:port`.
    #[arg(long, default_value = "127.0.0.1:7431")]
    server: String,
    /// `synthetic` or a `label<TAB>text` file.
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    transmit: Option<TransmitArg>,
    /// Where the nonce and deployed side network are kept.
    #[arg(long, default_value = "pae-model")]
    model_dir: PathBuf,
    #[arg(long, default_value_t = 5)]
    max_attempts: u32,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long, default_value = "pae-model")]
    model_dir: PathBuf,
    /// One text per line, optionally prefixed by `label<TAB>`.
    #[arg(long)]
    input: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    transmit: Option<TransmitArg>,
    /// Run once per listed length, e.g. `64,128` or `64..512`.
    #[arg(long)]
    seq_len: Option<String>,
    #[arg(long, default_value = "csv")]
    format: ReportFormat,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, value_enum, default_value = "cost")]
    model: ReportModel,
    #[arg(long, default_value = "seq-len=256")]
    sweep: String,
    #[arg(long, default_value = "table")]
    format: ReportFormat,
    /// Link speed in Mbit/s for transfer-time columns.
    #[arg(long, default_value_t = 100.0)]
    bandwidth: f64,
    /// Epochs charged to the iterative baselines.
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    batches_per_epoch: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransmitArg {
    Pivot,
    Full,
}

impl From<TransmitArg> for Transmit {
    fn from(t: TransmitArg) -> Self {
        match t {
            TransmitArg::Pivot => Transmit::Pivot,
            TransmitArg::Full => Transmit::Full,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportModel {
    Cost,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PAE_LOG", "warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Serve(a) => serve(a),
        Command::Device(a) => device(a),
        Command::Predict(a) => predict(a),
        Command::Simulate(a) => simulate(a),
        Command::Report(a) => report(a),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn serve(a: ServeArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let max_epochs = a.epochs.unwrap_or(cfg.epochs);
    let plan = if a.fixed_epochs {
        EpochPlan::Fixed(max_epochs)
    } else {
        EpochPlan::UntilConverged(ConvergenceRule {
            max_epochs,
            tolerance: cfg.tolerance,
            patience: cfg.patience,
        })
    };
    if let Some(dir) = &a.cache_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut server = Server::new(ServerConfig {
        cache_dir: a.cache_dir,
        plan,
        multi_session: a.multi_session,
    });
    server.set_observer(|ev| {
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "{ev}");
        let _ = out.flush();
    });
    let listener = TcpListener::bind((a.bind.as_str(), a.port))
        .with_context(|| format!("binding {}:{}", a.bind, a.port))?;
    println!("event=listening addr={}", listener.local_addr()?);
    serve_tcp(&mut server, listener, a.queue_depth, a.max_connections)?;
    Ok(())
}

fn device(a: DeviceArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(d) = a.data {
        cfg.data = d;
    }
    if let Some(b) = a.batch {
        cfg.batch = b;
    }
    if let Some(s) = a.seq_len {
        cfg.seq_len = s;
    }
    if let Some(t) = a.transmit {
        cfg.transmit = t.into();
    }
    let sim = Simulation::prepare(cfg)?;
    let addr = a.server.clone();
    let outcome = sim.pipeline().run_session(
        &sim.dataset,
        &session_spec(&sim.config),
        || Connection::connect(&addr).map_err(TransportError::from),
        RetryPolicy {
            max_attempts: a.max_attempts,
            ..Default::default()
        },
    )?;
    for s in &outcome.statuses {
        println!(
            "epoch={} mean_loss={:.9e} steps={}",
            s.epoch, s.mean_loss, s.steps
        );
    }
    let state = DeviceState {
        session_id: sim.config.session_id,
        backbone: sim.config.backbone_config(),
        nonce: sim.nonce.clone(),
        side_net: Some(outcome.side_net),
    };
    state.save(&a.model_dir)?;
    println!(
        "batches={} reconnects={} model_dir={}",
        outcome.batches,
        outcome.reconnects,
        a.model_dir.display()
    );
    Ok(())
}

/// Splits an optional `label<TAB>` prefix off each non-blank line.
fn read_inputs(path: &Path, vocab: usize, seq_len: usize) -> Result<Vec<(Sample, bool)>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (label, body) = match line.split_once('\t') {
            Some((l, b)) => {
                let l = l
                    .trim()
                    .parse()
                    .with_context(|| format!("line {}: bad label", i + 1))?;
                (Some(l), b)
            }
            None => (None, line),
        };
        let raw: Vec<u32> = body
            .split_whitespace()
            .map(|w| hash_token(w, vocab))
            .collect();
        let (tokens, mask) = padded(raw, seq_len);
        out.push((
            Sample {
                id: i as u64,
                tokens,
                mask,
                label: label.unwrap_or(0),
            },
            label.is_some(),
        ));
    }
    Ok(out)
}

fn predict(a: PredictArgs) -> Result<()> {
    let state = DeviceState::load(&a.model_dir)
        .with_context(|| format!("loading {}", a.model_dir.display()))?;
    let backbone = state.load_backbone(&a.model_dir)?;
    let side_net = state.deployed()?;
    let cfg = &state.backbone;
    let inputs = read_inputs(&a.input, cfg.vocab_size, cfg.seq_len)?;
    let mut hits = 0usize;
    let mut labelled = 0usize;
    for chunk in inputs.chunks(64) {
        let samples: Vec<Sample> = chunk.iter().map(|(s, _)| s.clone()).collect();
        let y = pae_core::device::predict(&backbone, side_net, &state.nonce, &samples)?;
        for ((s, has_label), class) in chunk.iter().zip(decisions(&y)) {
            println!("{}\t{class}", s.id + 1);
            if *has_label {
                labelled += 1;
                hits += usize::from(class == s.label);
            }
        }
    }
    if labelled > 0 {
        eprintln!(
            "accuracy={:.6} labelled={labelled}",
            hits as f64 / labelled as f64
        );
    }
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut base = load_config(a.config.as_deref())?;
    if let Some(t) = a.transmit {
        base.transmit = t.into();
    }
    let seq_lens: Vec<usize> = match &a.seq_len {
        Some(spec) => parse_seq_sweep(&format!("seq-len={spec}"))?
            .into_iter()
            .map(|s| s as usize)
            .collect(),
        None => vec![base.seq_len],
    };
    let mut runs: Vec<RunMetrics> = Vec::new();
    for s in seq_lens {
        let cfg = RunConfig {
            seq_len: s,
            ..base.clone()
        };
        let report = Simulation::prepare(cfg)?.run()?;
        runs.push(report.metrics);
    }
    print!("{}", RunMetrics::render(&runs, a.format));
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let ReportModel::Cost = a.model;
    if a.bandwidth.is_nan() || a.bandwidth <= 0.0 {
        bail!("--bandwidth must be positive");
    }
    let seq_lens = parse_seq_sweep(&a.sweep)?;
    let mut base = CostModelInput::opt_1_3b(Method::Pae);
    if let Some(e) = a.epochs {
        base.epochs = e;
    }
    if let Some(b) = a.batches_per_epoch {
        base.batches_per_epoch = b;
    }
    base.validate()?;
    let rows = cost_sweep(
        &base,
        &[
            Method::Pae,
            Method::FullActivationSideTune,
            Method::SplitLearning,
        ],
        &seq_lens,
        a.bandwidth,
    );
    print!("{}", render_costs(&rows, a.format));
    Ok(())
}
