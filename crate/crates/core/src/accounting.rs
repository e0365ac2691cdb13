//! Communication and device-computation cost models, plus run metrics.

use std::fmt::Write as _;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("unknown report format `{0}` (expected csv or table)")]
    Format(String),
    #[error("unknown method `{0}`")]
    Method(String),
    #[error("bad sweep `{0}` (expected seq-len=LO..HI or seq-len=A,B,...)")]
    Sweep(String),
    #[error("csv line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error("invalid cost input: {0}")]
    Input(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Pivot activations once, server-side cache afterwards.
    Pae,
    /// Every token of every layer, every epoch.
    FullActivationSideTune,
    /// U-shaped split learning: activations and gradients at two cuts.
    SplitLearning,
}

impl Method {
    pub const ALL: [Method; 3] = [
        Method::Pae,
        Method::FullActivationSideTune,
        Method::SplitLearning,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Pae => "pae",
            Method::FullActivationSideTune => "full_activation",
            Method::SplitLearning => "split_learning",
        }
    }
}

impl FromStr for Method {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| ReportError::Method(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModelInput {
    pub method: Method,
    pub layers: u64,
    pub seq_len: u64,
    pub hidden: u64,
    pub classes: u64,
    pub batch: u64,
    /// Bytes per transmitted float.
    pub float_width: u64,
    pub epochs: u64,
    pub batches_per_epoch: u64,
    /// Frozen backbone parameter count, for the FLOP model.
    pub backbone_params: u64,
}

impl CostModelInput {
    /// OPT-1.3B shape at 16-bit: 24 layers, hidden 2048, 256 tokens,
    /// batch 8, two classes, 20 epochs.
    pub fn opt_1_3b(method: Method) -> Self {
        Self {
            method,
            layers: 24,
            seq_len: 256,
            hidden: 2048,
            classes: 2,
            batch: 8,
            float_width: 2,
            epochs: 20,
            batches_per_epoch: 1,
            backbone_params: 1_300_000_000,
        }
    }

    pub fn validate(&self) -> Result<(), ReportError> {
        let fields = [
            ("layers", self.layers),
            ("seq_len", self.seq_len),
            ("hidden", self.hidden),
            ("classes", self.classes),
            ("batch", self.batch),
            ("float_width", self.float_width),
            ("epochs", self.epochs),
            ("batches_per_epoch", self.batches_per_epoch),
            ("backbone_params", self.backbone_params),
        ];
        match fields.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(ReportError::Input(format!("{name} must be positive"))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommCost {
    pub per_batch: u64,
    pub per_epoch: u64,
    pub total: u64,
}

pub fn comm_cost(input: &CostModelInput) -> CommCost {
    let i = input;
    let per_batch = match i.method {
        Method::Pae => i.batch * (i.layers * i.hidden + i.classes) * i.float_width,
        Method::FullActivationSideTune => i.batch * i.seq_len * i.hidden * i.layers * i.float_width,
        Method::SplitLearning => 2 * 2 * i.batch * i.seq_len * i.hidden * i.float_width,
    };
    let per_epoch = per_batch * i.batches_per_epoch;
    let total = match i.method {
        Method::Pae => per_epoch,
        _ => per_epoch * i.epochs,
    };
    CommCost {
        per_batch,
        per_epoch,
        total,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompCost {
    pub per_epoch_flops: f64,
    pub total_flops: f64,
}

/// Device forward FLOPs at `2 · params · tokens`.
pub fn comp_cost(input: &CostModelInput) -> CompCost {
    let i = input;
    let per_epoch =
        2.0 * i.backbone_params as f64 * (i.batch * i.seq_len) as f64 * i.batches_per_epoch as f64;
    let total = match i.method {
        Method::Pae => per_epoch,
        _ => per_epoch * i.epochs as f64,
    };
    CompCost {
        per_epoch_flops: per_epoch,
        total_flops: total,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Table,
}

impl FromStr for ReportFormat {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "table" => Ok(ReportFormat::Table),
            _ => Err(ReportError::Format(s.to_string())),
        }
    }
}

/// `seq-len=64..512` (powers of two between the bounds) or
/// `seq-len=64,100,300`.
pub fn parse_seq_sweep(spec: &str) -> Result<Vec<u64>, ReportError> {
    let bad = || ReportError::Sweep(spec.to_string());
    let values = spec.strip_prefix("seq-len=").ok_or_else(bad)?;
    let out: Vec<u64> = if let Some((lo, hi)) = values.split_once("..") {
        let lo: u64 = lo.parse().map_err(|_| bad())?;
        let hi: u64 = hi.parse().map_err(|_| bad())?;
        if lo == 0 || hi < lo {
            return Err(bad());
        }
        std::iter::successors(Some(lo), |v| v.checked_mul(2))
            .take_while(|&v| v <= hi)
            .collect()
    } else {
        values
            .split(',')
            .map(|v| v.trim().parse().map_err(|_| bad()))
            .collect::<Result<_, _>>()?
    };
    if out.is_empty() || out.contains(&0) {
        return Err(bad());
    }
    Ok(out)
}

/// One row of a cost report.
#[derive(Debug, Clone, PartialEq)]
pub struct CostRow {
    pub method: Method,
    pub layers: u64,
    pub seq_len: u64,
    pub hidden: u64,
    pub batch: u64,
    pub float_width: u64,
    pub epochs: u64,
    pub per_batch_bytes: u64,
    pub per_epoch_bytes: u64,
    pub total_bytes: u64,
    pub per_epoch_flops: f64,
    pub total_flops: f64,
    pub bandwidth_mbps: f64,
    /// `total_bytes` over the link at `bandwidth_mbps`.
    pub transfer_secs: f64,
}

pub const COST_COLUMNS: [&str; 14] = [
    "method",
    "layers",
    "seq_len",
    "hidden",
    "batch",
    "float_width",
    "epochs",
    "per_batch_bytes",
    "per_epoch_bytes",
    "total_bytes",
    "per_epoch_flops",
    "total_flops",
    "bandwidth_mbps",
    "transfer_secs",
];

impl CostRow {
    pub fn evaluate(input: &CostModelInput, bandwidth_mbps: f64) -> Self {
        let comm = comm_cost(input);
        let comp = comp_cost(input);
        Self {
            method: input.method,
            layers: input.layers,
            seq_len: input.seq_len,
            hidden: input.hidden,
            batch: input.batch,
            float_width: input.float_width,
            epochs: input.epochs,
            per_batch_bytes: comm.per_batch,
            per_epoch_bytes: comm.per_epoch,
            total_bytes: comm.total,
            per_epoch_flops: comp.per_epoch_flops,
            total_flops: comp.total_flops,
            bandwidth_mbps,
            transfer_secs: comm.total as f64 * 8.0 / (bandwidth_mbps * 1e6),
        }
    }

    fn fields(&self) -> Vec<String> {
        vec![
            self.method.name().to_string(),
            self.layers.to_string(),
            self.seq_len.to_string(),
            self.hidden.to_string(),
            self.batch.to_string(),
            self.float_width.to_string(),
            self.epochs.to_string(),
            self.per_batch_bytes.to_string(),
            self.per_epoch_bytes.to_string(),
            self.total_bytes.to_string(),
            format!("{:e}", self.per_epoch_flops),
            format!("{:e}", self.total_flops),
            self.bandwidth_mbps.to_string(),
            self.transfer_secs.to_string(),
        ]
    }
}

/// Rows for every method at every sequence length in `seq_lens`.
pub fn cost_sweep(
    base: &CostModelInput,
    methods: &[Method],
    seq_lens: &[u64],
    bandwidth_mbps: f64,
) -> Vec<CostRow> {
    let mut rows = Vec::new();
    for &method in methods {
        for &seq_len in seq_lens {
            let input = CostModelInput {
                method,
                seq_len,
                ..*base
            };
            rows.push(CostRow::evaluate(&input, bandwidth_mbps));
        }
    }
    rows
}

fn render(header: &[&str], rows: &[Vec<String>], format: ReportFormat) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            out.push_str(&header.join(","));
            out.push('\n');
            for r in rows {
                out.push_str(&r.join(","));
                out.push('\n');
            }
        }
        ReportFormat::Table => {
            let widths: Vec<usize> = (0..header.len())
                .map(|c| {
                    rows.iter()
                        .map(|r| r[c].len())
                        .chain([header[c].len()])
                        .max()
                        .unwrap_or(0)
                })
                .collect();
            let line = |cells: Vec<&str>| {
                cells
                    .iter()
                    .zip(&widths)
                    .map(|(c, w)| format!("{c:>w$}"))
                    .collect::<Vec<_>>()
                    .join("  ")
            };
            let _ = writeln!(out, "{}", line(header.to_vec()));
            for r in rows {
                let _ = writeln!(out, "{}", line(r.iter().map(String::as_str).collect()));
            }
        }
    }
    out
}

pub fn render_costs(rows: &[CostRow], format: ReportFormat) -> String {
    let cells: Vec<Vec<String>> = rows.iter().map(CostRow::fields).collect();
    render(&COST_COLUMNS, &cells, format)
}

pub fn parse_cost_csv(text: &str) -> Result<Vec<CostRow>, ReportError> {
    let mut lines = text.lines().enumerate();
    let csv_err = |line: usize, message: &str| ReportError::Csv {
        line: line + 1,
        message: message.to_string(),
    };
    match lines.next() {
        Some((_, h)) if h == COST_COLUMNS.join(",") => {}
        _ => return Err(csv_err(0, "unexpected header")),
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != COST_COLUMNS.len() {
                return Err(csv_err(i, "wrong column count"));
            }
            let u = |k: usize| f[k].parse::<u64>().map_err(|_| csv_err(i, COST_COLUMNS[k]));
            let x = |k: usize| f[k].parse::<f64>().map_err(|_| csv_err(i, COST_COLUMNS[k]));
            Ok(CostRow {
                method: f[0].parse()?,
                layers: u(1)?,
                seq_len: u(2)?,
                hidden: u(3)?,
                batch: u(4)?,
                float_width: u(5)?,
                epochs: u(6)?,
                per_batch_bytes: u(7)?,
                per_epoch_bytes: u(8)?,
                total_bytes: u(9)?,
                per_epoch_flops: x(10)?,
                total_flops: x(11)?,
                bandwidth_mbps: x(12)?,
                transfer_secs: x(13)?,
            })
        })
        .collect()
}

/// Counters and timings from one live session.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMetrics {
    pub transmit: String,
    pub seq_len: u64,
    pub samples: u64,
    pub batches: u64,
    /// All bytes the device wrote, frames included.
    pub bytes_sent: u64,
    pub bytes_received: u64,
    /// Activation floats inside record frames.
    pub activation_bytes: u64,
    /// Masked-target floats inside record frames.
    pub target_bytes: u64,
    /// Record bytes that are neither activations nor targets.
    pub record_overhead_bytes: u64,
    /// Non-record frames sent by the device.
    pub control_bytes: u64,
    pub device_forward_passes: u64,
    /// Forward passes observed while the server trained from cache.
    pub forward_passes_during_cached_epochs: u64,
    pub side_steps: u64,
    pub epochs: u64,
    pub epoch_losses: Vec<f64>,
    pub backbone_accuracy: f64,
    pub fused_accuracy: f64,
    pub epoch1_secs: f64,
    pub server_only_secs: f64,
}

pub const METRIC_COLUMNS: [&str; 20] = [
    "transmit",
    "seq_len",
    "samples",
    "batches",
    "bytes_sent",
    "bytes_received",
    "activation_bytes",
    "target_bytes",
    "record_overhead_bytes",
    "control_bytes",
    "device_forward_passes",
    "forward_passes_during_cached_epochs",
    "side_steps",
    "epochs",
    "final_loss",
    "backbone_accuracy",
    "fused_accuracy",
    "epoch1_secs",
    "server_only_secs",
    "epoch_losses",
];

impl RunMetrics {
    /// Activation and target bytes of one average record, which is what
    /// the closed-form model predicts per batch.
    pub fn payload_bytes_per_batch(&self) -> f64 {
        (self.activation_bytes + self.target_bytes) as f64 / self.batches.max(1) as f64
    }

    fn fields(&self) -> Vec<String> {
        vec![
            self.transmit.clone(),
            self.seq_len.to_string(),
            self.samples.to_string(),
            self.batches.to_string(),
            self.bytes_sent.to_string(),
            self.bytes_received.to_string(),
            self.activation_bytes.to_string(),
            self.target_bytes.to_string(),
            self.record_overhead_bytes.to_string(),
            self.control_bytes.to_string(),
            self.device_forward_passes.to_string(),
            self.forward_passes_during_cached_epochs.to_string(),
            self.side_steps.to_string(),
            self.epochs.to_string(),
            self.epoch_losses
                .last()
                .map_or_else(String::new, |l| format!("{l:e}")),
            format!("{:.6}", self.backbone_accuracy),
            format!("{:.6}", self.fused_accuracy),
            format!("{:.6}", self.epoch1_secs),
            format!("{:.6}", self.server_only_secs),
            self.epoch_losses
                .iter()
                .map(|l| format!("{l:e}"))
                .collect::<Vec<_>>()
                .join(";"),
        ]
    }

    pub fn render(runs: &[RunMetrics], format: ReportFormat) -> String {
        let cells: Vec<Vec<String>> = runs.iter().map(RunMetrics::fields).collect();
        render(&METRIC_COLUMNS, &cells, format)
    }
}
