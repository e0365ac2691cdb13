//! Device role: datasets, frozen forward passes, masked targets, the
//! pipelined epoch-1 upload, and fused prediction after deployment.

use crate::backbone::{
    select_pivot, ArchKind, BackboneConfig, BackboneError, BackboneModel, TokenBatch, CLS_TOKEN,
    PAD_TOKEN,
};
use crate::config::{ConfigError, KvFile, Transmit};
use crate::numerics::{Activation, SeededRng, Tensor};
use crate::privacy::{delta_target, fuse_output, one_hot, NonceKey, PrivacyError};
use crate::protocol::{
    Message, MsgActivationRecord, MsgEpochDone, MsgFullActivationRecord, MsgInit, MsgTrainStatus,
    MsgType,
};
use crate::side_network::{side_forward, Optimizer, SideNetError, SideNetwork};
use crate::transport::{Connection, TransportError};
use log::{debug, info, warn};
use std::collections::HashSet;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Arc};
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DeviceError {
    #[error("backbone: {0}")]
    Backbone(#[from] BackboneError),
    #[error("privacy: {0}")]
    Privacy(#[from] PrivacyError),
    #[error("side network: {0}")]
    SideNet(#[from] SideNetError),
    #[error("transport: {0}")]
    Transport(#[from] TransportError),
    #[error("server error {code}: {message}")]
    Server { code: u16, message: String },
    #[error("unexpected {0:?} from server")]
    Unexpected(MsgType),
    #[error("{path}:{line}: {message}")]
    Data {
        path: String,
        line: usize,
        message: String,
    },
    #[error(
        "gave up after {attempts} attempts with {acked_batches} batches acknowledged: {last_error}"
    )]
    Aborted {
        attempts: u32,
        acked_batches: u32,
        last_error: String,
    },
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    /// `L_seq` token ids, trailing padding.
    pub tokens: Vec<u32>,
    pub mask: Vec<bool>,
    pub label: usize,
}

/// Id that closes every synthetic sequence, so the autoregressive pivot
/// always sits on the same token.
pub const END_TOKEN: u32 = 2;

/// Parameters of the synthetic task. Each sample holds `k` marker tokens,
/// `k` uniform on `0..=max_count`, at random positions among ordinary
/// tokens, then [`END_TOKEN`]; the label is `k mod C`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthTask {
    /// Marker ids are `3..3 + markers`; ordinary ids fill the rest.
    pub markers: u32,
    pub max_count: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl SynthTask {
    /// One marker id and counts up to `C − 1`, so the label is the count.
    /// Lengths, terminator included, run from `L_seq/2` to `L_seq − 1`
    /// so a `[CLS]` slot always fits.
    pub fn default_for(seq_len: usize, classes: usize) -> Self {
        let max_len = seq_len.saturating_sub(1).max(2);
        let min_len = seq_len.div_ceil(2).clamp(2, max_len);
        Self {
            markers: 1,
            max_count: (classes - 1).min(min_len - 1),
            min_len,
            max_len,
        }
    }

    pub fn is_marker(&self, t: u32) -> bool {
        (3..3 + self.markers).contains(&t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Synthetic { seed: u64, task: SynthTask },
    DelimitedFile(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub source: DatasetSource,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Checks unique ids, label range, token range and lengths.
    pub fn validate(&self) -> Result<(), String> {
        let mut seen = HashSet::new();
        for s in &self.samples {
            if !seen.insert(s.id) {
                return Err(format!("duplicate sample id {}", s.id));
            }
            if s.label >= self.num_classes {
                return Err(format!("sample {} label {} out of range", s.id, s.label));
            }
            if s.tokens.len() != self.seq_len || s.mask.len() != self.seq_len {
                return Err(format!("sample {} has the wrong length", s.id));
            }
            if s.tokens.iter().any(|&t| t as usize >= self.vocab_size) {
                return Err(format!("sample {} has an out-of-vocabulary token", s.id));
            }
            if !s.mask.iter().any(|&m| m) {
                return Err(format!("sample {} is entirely padding", s.id));
            }
        }
        Ok(())
    }
}

/// Truncates or pads `tokens` to `seq_len`, returning ids and the mask.
pub fn padded(mut tokens: Vec<u32>, seq_len: usize) -> (Vec<u32>, Vec<bool>) {
    tokens.truncate(seq_len);
    let mut mask = vec![true; tokens.len()];
    mask.resize(seq_len, false);
    tokens.resize(seq_len, PAD_TOKEN);
    (tokens, mask)
}

/// Deterministic synthetic classification data with the default task.
///
/// # Panics
/// If `C > vocab`, `vocab < 5` or `seq_len < 3`.
pub fn synth_dataset(seed: u64, n: usize, seq_len: usize, vocab: usize, classes: usize) -> Dataset {
    synth_dataset_with(
        seed,
        n,
        seq_len,
        vocab,
        classes,
        SynthTask::default_for(seq_len, classes),
    )
}

pub fn synth_dataset_with(
    seed: u64,
    n: usize,
    seq_len: usize,
    vocab: usize,
    classes: usize,
    task: SynthTask,
) -> Dataset {
    assert!(classes >= 1 && classes <= vocab, "need 1 <= C <= vocab");
    assert!(seq_len >= 3, "seq_len >= 3");
    assert!(task.min_len >= 2 && task.min_len <= task.max_len && task.max_len <= seq_len);
    assert!(task.markers >= 1 && 3 + (task.markers as usize) < vocab);
    let ordinary = vocab as u64 - 3 - task.markers as u64;
    let mut rng = SeededRng::new(seed);
    let samples = (0..n as u64)
        .map(|id| {
            let span = (task.max_len - task.min_len + 1) as u64;
            let len = task.min_len + rng.below(span) as usize;
            let k = (rng.below(task.max_count as u64 + 1) as usize).min(len - 1);
            let mut raw: Vec<u32> = (0..len - 1)
                .map(|i| {
                    if i < k {
                        3 + rng.below(task.markers as u64) as u32
                    } else {
                        3 + task.markers + rng.below(ordinary) as u32
                    }
                })
                .collect();
            rng.shuffle(&mut raw);
            raw.push(END_TOKEN);
            let (tokens, mask) = padded(raw, seq_len);
            Sample {
                id,
                tokens,
                mask,
                label: k % classes,
            }
        })
        .collect();
    Dataset {
        samples,
        num_classes: classes,
        seq_len,
        vocab_size: vocab,
        source: DatasetSource::Synthetic { seed, task },
    }
}

/// 64-bit FNV-1a.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Token id of a whitespace-separated word. Ids 0 and 1 are reserved for
/// padding and `[CLS]`.
pub fn hash_token(word: &str, vocab: usize) -> u32 {
    2 + (fnv1a(word.as_bytes()) % (vocab as u64 - 2)) as u32
}

/// Reads `label<TAB>text` rows. Blank lines are skipped; sample ids are
/// zero-based row numbers among the non-blank lines.
pub fn ingest_delimited(
    path: &Path,
    classes: usize,
    vocab: usize,
    seq_len: usize,
) -> Result<Dataset, DeviceError> {
    if vocab < 3 {
        return Err(DeviceError::Usage("vocabulary must exceed 2".into()));
    }
    let text = std::fs::read_to_string(path)?;
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |message: String| DeviceError::Data {
            path: path.display().to_string(),
            line: i + 1,
            message,
        };
        if line.trim().is_empty() {
            continue;
        }
        let (label, body) = line
            .split_once('\t')
            .ok_or_else(|| err("expected `label<TAB>text`".into()))?;
        let label: usize = label
            .trim()
            .parse()
            .map_err(|_| err(format!("label `{label}` is not an integer")))?;
        if label >= classes {
            return Err(err(format!("label {label} exceeds {} classes", classes)));
        }
        let raw: Vec<u32> = body
            .split_whitespace()
            .map(|w| hash_token(w, vocab))
            .collect();
        if raw.is_empty() {
            return Err(err("empty text would be all padding".into()));
        }
        let (tokens, mask) = padded(raw, seq_len);
        samples.push(Sample {
            id: samples.len() as u64,
            tokens,
            mask,
            label,
        });
    }
    Ok(Dataset {
        samples,
        num_classes: classes,
        seq_len,
        vocab_size: vocab,
        source: DatasetSource::DelimitedFile(path.to_path_buf()),
    })
}

/// Lays samples out as backbone input. Autoencoding models get `[CLS]` in
/// slot 0 and lose the final position.
pub fn token_batch(samples: &[Sample], arch: ArchKind, seq_len: usize) -> TokenBatch {
    let mut ids = Vec::with_capacity(samples.len() * seq_len);
    let mut mask = Vec::with_capacity(samples.len() * seq_len);
    for s in samples {
        match arch {
            ArchKind::Autoregressive => {
                ids.extend_from_slice(&s.tokens[..seq_len]);
                mask.extend_from_slice(&s.mask[..seq_len]);
            }
            ArchKind::Autoencoding => {
                ids.push(CLS_TOKEN);
                mask.push(true);
                ids.extend_from_slice(&s.tokens[..seq_len - 1]);
                mask.extend_from_slice(&s.mask[..seq_len - 1]);
            }
        }
    }
    TokenBatch::new(samples.len(), seq_len, ids, mask).expect("sizes computed above")
}

/// Pivot activations per layer, rounded through `f32` like the wire does.
pub fn pivot_activations(
    backbone: &BackboneModel,
    batch: &TokenBatch,
    hidden_states: &[Tensor],
) -> Result<Vec<Tensor>, BackboneError> {
    hidden_states
        .iter()
        .map(|h| {
            let p = select_pivot(h, backbone.config().arch_kind, &batch.mask)?;
            Ok(p.map(|v| v as f32 as f64))
        })
        .collect()
}

/// Side-network hyper-parameters the device announces in `MsgInit`.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionSpec {
    pub session_id: u64,
    pub bottleneck: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub activation: Activation,
    pub side_seed: u64,
    pub batch_size: usize,
    pub transmit: Transmit,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    /// Reconnect attempts before giving up.
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_millis(100),
            max_delay: Duration::from_secs(5),
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        self.base_delay
            .saturating_mul(1u32 << attempt.min(16))
            .min(self.max_delay)
    }
}

/// Summary of the device's side of a session.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionOutcome {
    pub side_net: SideNetwork,
    pub statuses: Vec<MsgTrainStatus>,
    pub batches: u32,
    pub reconnects: u32,
    /// Forward passes at the moment `MsgEpochDone` was sent.
    pub forward_passes_at_epoch_done: u64,
}

pub struct DevicePipeline {
    backbone: Arc<BackboneModel>,
    nonce: NonceKey,
    forward_passes: Arc<AtomicU64>,
    queue_depth: usize,
}

impl DevicePipeline {
    pub fn new(backbone: Arc<BackboneModel>, nonce: NonceKey) -> Self {
        Self {
            backbone,
            nonce,
            forward_passes: Arc::default(),
            queue_depth: 4,
        }
    }

    pub fn with_queue_depth(mut self, depth: usize) -> Self {
        self.queue_depth = depth.max(1);
        self
    }

    pub fn backbone(&self) -> &BackboneModel {
        &self.backbone
    }

    pub fn nonce(&self) -> &NonceKey {
        &self.nonce
    }

    /// Samples pushed through the backbone so far.
    pub fn forward_passes(&self) -> u64 {
        self.forward_passes.load(Ordering::SeqCst)
    }

    pub fn forward_counter(&self) -> Arc<AtomicU64> {
        Arc::clone(&self.forward_passes)
    }

    pub fn init_message(&self, spec: &SessionSpec, dataset_size: u64) -> MsgInit {
        let cfg = self.backbone.config();
        MsgInit {
            session_id: spec.session_id,
            num_layers: cfg.num_layers as u32,
            hidden: cfg.hidden_size as u32,
            num_classes: cfg.num_classes as u32,
            arch_kind: cfg.arch_kind,
            seq_len: cfg.seq_len as u32,
            bottleneck: spec.bottleneck as u32,
            learning_rate: spec.learning_rate,
            optimizer: spec.optimizer,
            activation: spec.activation,
            side_seed: spec.side_seed,
            dataset_size,
            batch_size: spec.batch_size as u32,
        }
    }

    /// Forward pass and masking for one batch.
    pub fn compute_record(
        &self,
        session_id: u64,
        batch_index: u32,
        samples: &[Sample],
        transmit: Transmit,
    ) -> Result<Message, DeviceError> {
        let cfg = self.backbone.config();
        let batch = token_batch(samples, cfg.arch_kind, cfg.seq_len);
        let trace = self.backbone.forward(&batch)?;
        self.forward_passes
            .fetch_add(samples.len() as u64, Ordering::SeqCst);
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let delta = delta_target(
            &one_hot(&labels, cfg.num_classes),
            &trace.y_pre,
            &self.nonce,
        )?;
        let delta_y: Vec<f32> = delta.data().iter().map(|&v| v as f32).collect();
        let sample_ids = samples.iter().map(|s| s.id).collect();
        let (l, h, c) = (
            cfg.num_layers as u32,
            cfg.hidden_size as u32,
            cfg.num_classes as u32,
        );
        Ok(match transmit {
            Transmit::Pivot => {
                let mut activations =
                    Vec::with_capacity(cfg.num_layers * samples.len() * cfg.hidden_size);
                for hs in &trace.hidden_states {
                    let p = select_pivot(hs, cfg.arch_kind, &batch.mask)?;
                    activations.extend(p.data().iter().map(|&v| v as f32));
                }
                Message::ActivationRecord(MsgActivationRecord {
                    session_id,
                    epoch: 1,
                    batch_index,
                    num_layers: l,
                    hidden: h,
                    num_classes: c,
                    sample_ids,
                    activations,
                    delta_y,
                })
            }
            Transmit::Full => {
                let lengths = (0..samples.len())
                    .map(|b| batch.sample_mask(b).iter().filter(|&&m| m).count() as u32)
                    .collect();
                let activations = trace
                    .hidden_states
                    .iter()
                    .flat_map(|hs| hs.data().iter().map(|&v| v as f32))
                    .collect();
                Message::FullActivationRecord(MsgFullActivationRecord {
                    session_id,
                    epoch: 1,
                    batch_index,
                    num_layers: l,
                    hidden: h,
                    num_classes: c,
                    seq_len: cfg.seq_len as u32,
                    sample_ids,
                    lengths,
                    activations,
                    delta_y,
                })
            }
        })
    }

    /// Runs the collaborative epoch and waits for the deployed network.
    ///
    /// A compute thread fills a bounded queue while this thread transmits
    /// and waits for each acknowledgement. Transport failures reconnect
    /// through `connect` with exponential backoff and replay the
    /// unacknowledged batch.
    pub fn run_session<F>(
        &self,
        dataset: &Dataset,
        spec: &SessionSpec,
        mut connect: F,
        retry: RetryPolicy,
    ) -> Result<SessionOutcome, DeviceError>
    where
        F: FnMut() -> Result<Connection, TransportError>,
    {
        if spec.batch_size == 0 {
            return Err(DeviceError::Usage("batch size must be positive".into()));
        }
        let init = self.init_message(spec, dataset.len() as u64);
        let mut link = Link {
            conn: None,
            init: &init,
            retry,
            attempts: 0,
            reconnects: 0,
            acked: 0,
        };
        let (tx, rx) = mpsc::sync_channel(self.queue_depth);
        std::thread::scope(|scope| {
            scope.spawn(move || {
                for (k, chunk) in dataset.samples.chunks(spec.batch_size).enumerate() {
                    let rec = self.compute_record(spec.session_id, k as u32, chunk, spec.transmit);
                    let failed = rec.is_err();
                    if tx.send(rec).is_err() || failed {
                        break;
                    }
                }
            });
            link.ensure(&mut connect)?;
            for rec in rx {
                let rec = rec?;
                let index = match &rec {
                    Message::ActivationRecord(r) => r.batch_index,
                    Message::FullActivationRecord(r) => r.batch_index,
                    _ => unreachable!(),
                };
                link.exchange(&mut connect, &rec, |reply| match reply {
                    Message::Ack(a)
                        if a.msg_type == rec.msg_type() as u8 && a.batch_index == index =>
                    {
                        Ok(true)
                    }
                    _ => Err(Box::new(reply)),
                })?;
                link.acked += 1;
                debug!("batch {index} acknowledged");
            }
            Ok::<(), DeviceError>(())
        })?;
        let forward_passes_at_epoch_done = self.forward_passes();
        let done = Message::EpochDone(MsgEpochDone {
            session_id: spec.session_id,
            sample_count: dataset.len() as u64,
        });
        info!(
            "epoch 1 sent: {} batches, {} forward passes; waiting for server",
            link.acked, forward_passes_at_epoch_done
        );
        let mut statuses = Vec::new();
        let mut deployed = None;
        link.exchange(&mut connect, &done, |reply| match reply {
            Message::Ack(a) if a.msg_type == MsgType::EpochDone as u8 => Ok(false),
            Message::TrainStatus(s) => {
                info!("server epoch {} mean loss {:.6e}", s.epoch, s.mean_loss);
                statuses.retain(|t: &MsgTrainStatus| t.epoch < s.epoch);
                statuses.push(s);
                Ok(false)
            }
            Message::DeploySideNet(d) if d.session_id == spec.session_id => {
                deployed = Some(d.side_net);
                Ok(true)
            }
            other => Err(Box::new(other)),
        })?;
        let blob = deployed.expect("exchange returns only after deployment");
        Ok(SessionOutcome {
            side_net: SideNetwork::from_bytes(&blob)?,
            statuses,
            batches: link.acked,
            reconnects: link.reconnects,
            forward_passes_at_epoch_done,
        })
    }
}

/// A connection that re-establishes itself and replays the session init.
struct Link<'a> {
    conn: Option<Connection>,
    init: &'a MsgInit,
    retry: RetryPolicy,
    attempts: u32,
    reconnects: u32,
    acked: u32,
}

impl Link<'_> {
    fn abort(&self, last_error: String) -> DeviceError {
        DeviceError::Aborted {
            attempts: self.attempts,
            acked_batches: self.acked,
            last_error,
        }
    }

    fn handshake(&self, conn: &mut Connection) -> Result<(), DeviceError> {
        conn.send(&Message::Init(self.init.clone()))?;
        match conn.recv()? {
            Message::Ack(a) if a.msg_type == MsgType::Init as u8 => Ok(()),
            Message::Error(e) => Err(DeviceError::Server {
                code: e.code,
                message: e.message,
            }),
            other => Err(DeviceError::Unexpected(other.msg_type())),
        }
    }

    fn ensure<F>(&mut self, connect: &mut F) -> Result<(), DeviceError>
    where
        F: FnMut() -> Result<Connection, TransportError>,
    {
        while self.conn.is_none() {
            let attempt = connect()
                .map_err(DeviceError::from)
                .and_then(|mut c| self.handshake(&mut c).map(|_| c));
            match attempt {
                Ok(c) => {
                    self.conn = Some(c);
                    self.attempts = 0;
                }
                Err(e @ DeviceError::Server { .. }) => return Err(e),
                Err(e) => self.back_off(e)?,
            }
        }
        Ok(())
    }

    fn back_off(&mut self, e: DeviceError) -> Result<(), DeviceError> {
        self.conn = None;
        if self.attempts >= self.retry.max_attempts {
            return Err(self.abort(e.to_string()));
        }
        let wait = self.retry.delay(self.attempts);
        self.attempts += 1;
        self.reconnects += 1;
        warn!(
            "link failure ({e}); retry {}/{} in {wait:?}",
            self.attempts, self.retry.max_attempts
        );
        std::thread::sleep(wait);
        Ok(())
    }

    /// Sends `msg` and feeds replies to `on_reply` until it returns
    /// `Ok(true)`. Replies it rejects become errors.
    fn exchange<F>(
        &mut self,
        connect: &mut F,
        msg: &Message,
        mut on_reply: impl FnMut(Message) -> Result<bool, Box<Message>>,
    ) -> Result<(), DeviceError>
    where
        F: FnMut() -> Result<Connection, TransportError>,
    {
        'send: loop {
            self.ensure(connect)?;
            let conn = self.conn.as_mut().expect("ensured");
            if let Err(e) = conn.send(msg) {
                self.back_off(e.into())?;
                continue;
            }
            loop {
                let reply = match conn.recv() {
                    Ok(r) => r,
                    Err(TransportError::Decode(e)) => return Err(TransportError::Decode(e).into()),
                    Err(e) => {
                        self.back_off(e.into())?;
                        continue 'send;
                    }
                };
                match on_reply(reply).map_err(|m| *m) {
                    Ok(true) => return Ok(()),
                    Ok(false) => {}
                    Err(Message::Error(e)) => {
                        return Err(DeviceError::Server {
                            code: e.code,
                            message: e.message,
                        })
                    }
                    Err(other) => return Err(DeviceError::Unexpected(other.msg_type())),
                }
            }
        }
    }
}

/// Single-connection factory: hands out `conn` once, then reports closure.
pub fn once(conn: Connection) -> impl FnMut() -> Result<Connection, TransportError> {
    let mut slot = Some(conn);
    move || slot.take().ok_or(TransportError::Closed)
}

/// `y_output = y_pre + y_side − R` for a batch of samples.
pub fn predict(
    backbone: &BackboneModel,
    side_net: &SideNetwork,
    nonce: &NonceKey,
    samples: &[Sample],
) -> Result<Tensor, DeviceError> {
    let cfg = backbone.config();
    let batch = token_batch(samples, cfg.arch_kind, cfg.seq_len);
    let trace = backbone.forward(&batch)?;
    let pivots = pivot_activations(backbone, &batch, &trace.hidden_states)?;
    let (y_side, _) = side_forward(side_net, &pivots)?;
    Ok(fuse_output(&trace.y_pre, &y_side, nonce)?)
}

/// Class decisions of a `[B × C]` output.
pub fn decisions(y: &Tensor) -> Vec<usize> {
    (0..y.rows())
        .map(|r| crate::privacy::argmax(y.row(r)))
        .collect()
}

/// Fraction of samples whose argmax matches the label.
pub fn accuracy(y: &Tensor, samples: &[Sample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let hits = decisions(y)
        .iter()
        .zip(samples)
        .filter(|(p, s)| **p == s.label)
        .count();
    hits as f64 / samples.len() as f64
}

const SESSION_FILE: &str = "session.kv";
const NONCE_FILE: &str = "nonce.secret";
const SIDE_NET_FILE: &str = "side_net.paes";
const WEIGHTS_FILE: &str = "backbone.paew";

/// Device-local session directory: backbone description, secret nonce
/// and the deployed side network.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceState {
    pub session_id: u64,
    pub backbone: BackboneConfig,
    pub nonce: NonceKey,
    pub side_net: Option<SideNetwork>,
}

impl DeviceState {
    pub fn save(&self, dir: &Path) -> Result<(), DeviceError> {
        std::fs::create_dir_all(dir)?;
        let b = &self.backbone;
        let mut kv = KvFile::default();
        kv.set("session_id", self.session_id);
        kv.set("arch", b.arch_kind.name());
        kv.set("layers", b.num_layers);
        kv.set("hidden", b.hidden_size);
        kv.set("heads", b.num_heads);
        kv.set("seq_len", b.seq_len);
        kv.set("vocab", b.vocab_size);
        kv.set("classes", b.num_classes);
        kv.set("backbone_seed", b.init_seed);
        kv.set("nonce_seed", self.nonce.seed());
        std::fs::write(dir.join(SESSION_FILE), kv.to_text())?;
        write_secret(
            &dir.join(NONCE_FILE),
            &self
                .nonce
                .values()
                .iter()
                .map(|v| format!("{:016x}\n", v.to_bits()))
                .collect::<String>(),
        )?;
        if let Some(net) = &self.side_net {
            std::fs::write(dir.join(SIDE_NET_FILE), net.to_bytes())?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, DeviceError> {
        let kv = KvFile::load(&dir.join(SESSION_FILE))?;
        let need = |k: &str| -> Result<String, DeviceError> {
            kv.raw(k)
                .map(str::to_string)
                .ok_or_else(|| DeviceError::Usage(format!("{SESSION_FILE} lacks `{k}`")))
        };
        let num = |k: &str| -> Result<u64, DeviceError> {
            need(k)?
                .parse()
                .map_err(|_| DeviceError::Usage(format!("{SESSION_FILE}: bad `{k}`")))
        };
        let arch = ArchKind::from_name(&need("arch")?)
            .ok_or_else(|| DeviceError::Usage(format!("{SESSION_FILE}: bad `arch`")))?;
        let backbone = BackboneConfig {
            num_layers: num("layers")? as usize,
            hidden_size: num("hidden")? as usize,
            num_heads: num("heads")? as usize,
            seq_len: num("seq_len")? as usize,
            vocab_size: num("vocab")? as usize,
            num_classes: num("classes")? as usize,
            arch_kind: arch,
            init_seed: num("backbone_seed")?,
        };
        let session_id = num("session_id")?;
        let values = std::fs::read_to_string(dir.join(NONCE_FILE))?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| u64::from_str_radix(l.trim(), 16).map(f64::from_bits))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| DeviceError::Usage(format!("{NONCE_FILE} is malformed")))?;
        let nonce = NonceKey::from_values(values, session_id)
            .ok_or_else(|| DeviceError::Usage(format!("{NONCE_FILE} is out of range")))?;
        let side_path = dir.join(SIDE_NET_FILE);
        let side_net = if side_path.exists() {
            Some(SideNetwork::from_bytes(&std::fs::read(side_path)?)?)
        } else {
            None
        };
        Ok(Self {
            session_id,
            backbone,
            nonce,
            side_net,
        })
    }

    /// Backbone from imported weights if present, otherwise rebuilt from
    /// its seed.
    pub fn load_backbone(&self, dir: &Path) -> Result<BackboneModel, DeviceError> {
        let weights = dir.join(WEIGHTS_FILE);
        if weights.exists() {
            let m = BackboneModel::from_weight_bytes(&std::fs::read(weights)?)?;
            if *m.config() != self.backbone {
                return Err(DeviceError::Usage(format!(
                    "{WEIGHTS_FILE} does not match {SESSION_FILE}"
                )));
            }
            return Ok(m);
        }
        Ok(crate::backbone::build_backbone(self.backbone.clone())?)
    }

    pub fn deployed(&self) -> Result<&SideNetwork, DeviceError> {
        self.side_net.as_ref().ok_or_else(|| {
            DeviceError::Usage("no deployed side network in session directory".into())
        })
    }
}

fn write_secret(path: &Path, contents: &str) -> io::Result<()> {
    use std::io::Write;
    let mut opts = std::fs::OpenOptions::new();
    opts.write(true).create(true).truncate(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    let mut f = opts.open(path)?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        f.set_permissions(std::fs::Permissions::from_mode(0o600))?;
    }
    f.write_all(contents.as_bytes())
}
