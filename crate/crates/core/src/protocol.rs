//! Framed binary wire protocol between device and server.
//!
//! Frame layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "PAEM"
//! 4       1     version (1)
//! 5       1     msg_type
//! 6       4     payload_len (u32)
//! 10      n     payload
//! 10+n    4     crc32 over msg_type ‖ payload
//! ```
//!
//! PROTOCOL.md at the repository root documents every payload.

use crate::backbone::ArchKind;
use crate::numerics::Activation;
use crate::side_network::Optimizer;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"PAEM";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 10;
pub const TRAILER_LEN: usize = 4;
/// Fixed bytes around every payload.
pub const FRAME_OVERHEAD: usize = HEADER_LEN + TRAILER_LEN;
/// Frames larger than this are refused before allocation.
pub const MAX_PAYLOAD: usize = 1 << 30;
pub const DEFAULT_PORT: u16 = 7431;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("truncated frame: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported protocol version {0}")]
    Version(u8),
    #[error("crc mismatch: frame says {expected:#010x}, computed {actual:#010x}")]
    Crc { expected: u32, actual: u32 },
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("payload of {0} bytes exceeds limit")]
    TooLarge(usize),
    #[error("{0} trailing bytes after frame")]
    TrailingBytes(usize),
    #[error("malformed {msg} payload: {reason}")]
    Malformed { msg: &'static str, reason: String },
}

#[repr(u8)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MsgType {
    Init = 1,
    ActivationRecord = 2,
    EpochDone = 3,
    TrainStatus = 4,
    DeploySideNet = 5,
    Ack = 6,
    Error = 7,
    /// Baseline mode: every token's activation instead of the pivot only.
    FullActivationRecord = 8,
}

impl MsgType {
    pub const ALL: [MsgType; 8] = [
        MsgType::Init,
        MsgType::ActivationRecord,
        MsgType::EpochDone,
        MsgType::TrainStatus,
        MsgType::DeploySideNet,
        MsgType::Ack,
        MsgType::Error,
        MsgType::FullActivationRecord,
    ];

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.iter().copied().find(|t| *t as u8 == v)
    }
}

/// Session setup: what the server needs to build a matching side network.
#[derive(Debug, Clone, PartialEq)]
pub struct MsgInit {
    pub session_id: u64,
    pub num_layers: u32,
    pub hidden: u32,
    pub num_classes: u32,
    pub arch_kind: ArchKind,
    pub seq_len: u32,
    pub bottleneck: u32,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub activation: Activation,
    pub side_seed: u64,
    pub dataset_size: u64,
    pub batch_size: u32,
}

/// One batch of pivot activations plus masked targets.
#[derive(Debug, Clone, PartialEq)]
pub struct MsgActivationRecord {
    pub session_id: u64,
    pub epoch: u32,
    pub batch_index: u32,
    pub num_layers: u32,
    pub hidden: u32,
    pub num_classes: u32,
    pub sample_ids: Vec<u64>,
    /// `L × [B × H]`, layer-major.
    pub activations: Vec<f32>,
    /// `[B × C]`
    pub delta_y: Vec<f32>,
}

impl MsgActivationRecord {
    pub const FIXED_LEN: usize = 8 + 4 * 6;

    pub fn batch(&self) -> usize {
        self.sample_ids.len()
    }

    /// Payload bytes that are not activation or target floats.
    pub fn overhead_bytes(&self) -> usize {
        Self::FIXED_LEN + 8 * self.sample_ids.len()
    }

    /// Activation block of layer `i`, `[B × H]`.
    pub fn layer(&self, i: usize) -> &[f32] {
        let n = self.batch() * self.hidden as usize;
        &self.activations[i * n..(i + 1) * n]
    }
}

/// Full-sequence activations for the baseline transmission mode.
#[derive(Debug, Clone, PartialEq)]
pub struct MsgFullActivationRecord {
    pub session_id: u64,
    pub epoch: u32,
    pub batch_index: u32,
    pub num_layers: u32,
    pub hidden: u32,
    pub num_classes: u32,
    pub seq_len: u32,
    pub sample_ids: Vec<u64>,
    /// Real (non-pad) token count per sample, for server-side pivot selection.
    pub lengths: Vec<u32>,
    /// `L × [B × L_seq × H]`, layer-major.
    pub activations: Vec<f32>,
    pub delta_y: Vec<f32>,
}

impl MsgFullActivationRecord {
    pub const FIXED_LEN: usize = 8 + 4 * 7;

    pub fn batch(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn overhead_bytes(&self) -> usize {
        Self::FIXED_LEN + 12 * self.sample_ids.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MsgEpochDone {
    pub session_id: u64,
    pub sample_count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MsgTrainStatus {
    pub epoch: u32,
    pub mean_loss: f64,
    pub steps: u64,
}

/// The only server→device message that carries parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MsgDeploySideNet {
    pub session_id: u64,
    /// `PAES` blob from [`crate::side_network::SideNetwork::to_bytes`].
    pub side_net: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MsgAck {
    pub msg_type: u8,
    pub batch_index: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MsgError {
    pub code: u16,
    pub message: String,
}

/// Error codes carried by [`MsgError`].
pub mod error_code {
    pub const CONFIG_CONFLICT: u16 = 1;
    pub const NO_SESSION: u16 = 2;
    pub const DIMENSION: u16 = 3;
    pub const DUPLICATE_SAMPLE: u16 = 4;
    pub const SEALED: u16 = 5;
    pub const BAD_EPOCH: u16 = 6;
    pub const COUNT_MISMATCH: u16 = 7;
    pub const UNEXPECTED: u16 = 8;
    pub const INTERNAL: u16 = 9;
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Init(MsgInit),
    ActivationRecord(MsgActivationRecord),
    EpochDone(MsgEpochDone),
    TrainStatus(MsgTrainStatus),
    DeploySideNet(MsgDeploySideNet),
    Ack(MsgAck),
    Error(MsgError),
    FullActivationRecord(MsgFullActivationRecord),
}

impl Message {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Message::Init(_) => MsgType::Init,
            Message::ActivationRecord(_) => MsgType::ActivationRecord,
            Message::EpochDone(_) => MsgType::EpochDone,
            Message::TrainStatus(_) => MsgType::TrainStatus,
            Message::DeploySideNet(_) => MsgType::DeploySideNet,
            Message::Ack(_) => MsgType::Ack,
            Message::Error(_) => MsgType::Error,
            Message::FullActivationRecord(_) => MsgType::FullActivationRecord,
        }
    }

    pub fn error(code: u16, message: impl Into<String>) -> Self {
        Message::Error(MsgError {
            code,
            message: message.into(),
        })
    }
}

/// Field names of every message, in wire order. Kept next to the codec so
/// privacy tests can enumerate what the protocol is able to carry.
pub const SCHEMA: &[(MsgType, &[&str])] = &[
    (
        MsgType::Init,
        &[
            "session_id",
            "num_layers",
            "hidden",
            "num_classes",
            "arch_kind",
            "seq_len",
            "bottleneck",
            "learning_rate",
            "optimizer_kind",
            "beta1",
            "beta2",
            "eps",
            "activation",
            "side_seed",
            "dataset_size",
            "batch_size",
        ],
    ),
    (
        MsgType::ActivationRecord,
        &[
            "session_id",
            "epoch",
            "batch_index",
            "batch",
            "num_layers",
            "hidden",
            "num_classes",
            "sample_ids",
            "activations",
            "delta_y",
        ],
    ),
    (MsgType::EpochDone, &["session_id", "sample_count"]),
    (MsgType::TrainStatus, &["epoch", "mean_loss", "steps"]),
    (
        MsgType::DeploySideNet,
        &["session_id", "side_net_len", "side_net"],
    ),
    (MsgType::Ack, &["msg_type", "batch_index"]),
    (MsgType::Error, &["code", "message_len", "message"]),
    (
        MsgType::FullActivationRecord,
        &[
            "session_id",
            "epoch",
            "batch_index",
            "batch",
            "num_layers",
            "hidden",
            "num_classes",
            "seq_len",
            "sample_ids",
            "lengths",
            "activations",
            "delta_y",
        ],
    ),
];

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn len(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("length exceeds u32"));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    msg: &'static str,
}

impl<'a> Reader<'a> {
    fn bad(&self, reason: impl Into<String>) -> DecodeError {
        DecodeError::Malformed {
            msg: self.msg,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                self.bad(format!(
                    "needs {n} bytes at offset {}, payload is {}",
                    self.pos,
                    self.buf.len()
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, DecodeError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, DecodeError> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.bad("overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn u64s(&mut self, n: usize) -> Result<Vec<u64>, DecodeError> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.bad("overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn u32s(&mut self, n: usize) -> Result<Vec<u32>, DecodeError> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.bad("overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn finish(&self) -> Result<(), DecodeError> {
        if self.pos != self.buf.len() {
            return Err(self.bad(format!("{} unread bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
    fn product(&self, dims: &[usize]) -> Result<usize, DecodeError> {
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| self.bad("dimension overflow"))
    }
}

fn encode_payload(msg: &Message) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    match msg {
        Message::Init(m) => {
            w.u64(m.session_id);
            w.u32(m.num_layers);
            w.u32(m.hidden);
            w.u32(m.num_classes);
            w.u8(m.arch_kind.code());
            w.u32(m.seq_len);
            w.u32(m.bottleneck);
            w.f64(m.learning_rate);
            let (code, b1, b2, eps) = match m.optimizer {
                Optimizer::Sgd => (0, 0.0, 0.0, 0.0),
                Optimizer::Adam { beta1, beta2, eps } => (1, beta1, beta2, eps),
            };
            w.u8(code);
            w.f64(b1);
            w.f64(b2);
            w.f64(eps);
            w.u8(m.activation.code());
            w.u64(m.side_seed);
            w.u64(m.dataset_size);
            w.u32(m.batch_size);
        }
        Message::ActivationRecord(m) => {
            w.u64(m.session_id);
            w.u32(m.epoch);
            w.u32(m.batch_index);
            w.len(m.sample_ids.len());
            w.u32(m.num_layers);
            w.u32(m.hidden);
            w.u32(m.num_classes);
            for id in &m.sample_ids {
                w.u64(*id);
            }
            w.f32s(&m.activations);
            w.f32s(&m.delta_y);
        }
        Message::FullActivationRecord(m) => {
            w.u64(m.session_id);
            w.u32(m.epoch);
            w.u32(m.batch_index);
            w.len(m.sample_ids.len());
            w.u32(m.num_layers);
            w.u32(m.hidden);
            w.u32(m.num_classes);
            w.u32(m.seq_len);
            for id in &m.sample_ids {
                w.u64(*id);
            }
            for l in &m.lengths {
                w.u32(*l);
            }
            w.f32s(&m.activations);
            w.f32s(&m.delta_y);
        }
        Message::EpochDone(m) => {
            w.u64(m.session_id);
            w.u64(m.sample_count);
        }
        Message::TrainStatus(m) => {
            w.u32(m.epoch);
            w.f64(m.mean_loss);
            w.u64(m.steps);
        }
        Message::DeploySideNet(m) => {
            w.u64(m.session_id);
            w.len(m.side_net.len());
            w.0.extend_from_slice(&m.side_net);
        }
        Message::Ack(m) => {
            w.u8(m.msg_type);
            w.u32(m.batch_index);
        }
        Message::Error(m) => {
            w.u16(m.code);
            w.len(m.message.len());
            w.0.extend_from_slice(m.message.as_bytes());
        }
    }
    w.0
}

/// Frames a message.
pub fn encode(msg: &Message) -> Vec<u8> {
    let payload = encode_payload(msg);
    assert!(payload.len() <= MAX_PAYLOAD, "payload exceeds MAX_PAYLOAD");
    let ty = msg.msg_type() as u8;
    let mut out = Vec::with_capacity(FRAME_OVERHEAD + payload.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(ty);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&frame_crc(ty, &payload).to_le_bytes());
    out
}

fn frame_crc(ty: u8, payload: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(&[ty]);
    h.update(payload);
    h.finalize()
}

/// Validates the fixed header and returns `(msg_type byte, payload_len)`.
pub fn parse_header(header: &[u8]) -> Result<(u8, usize), DecodeError> {
    if header.len() < HEADER_LEN {
        return Err(DecodeError::Truncated {
            needed: HEADER_LEN,
            available: header.len(),
        });
    }
    let magic: [u8; 4] = header[..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(DecodeError::BadMagic(magic));
    }
    if header[4] != VERSION {
        return Err(DecodeError::Version(header[4]));
    }
    let len = u32::from_le_bytes(header[6..10].try_into().unwrap()) as usize;
    if len > MAX_PAYLOAD {
        return Err(DecodeError::TooLarge(len));
    }
    Ok((header[5], len))
}

/// Decodes one frame that occupies the whole buffer.
pub fn decode(bytes: &[u8]) -> Result<Message, DecodeError> {
    let (msg, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(DecodeError::TrailingBytes(bytes.len() - used));
    }
    Ok(msg)
}

/// Decodes the frame at the start of `bytes`, returning it and its length.
pub fn decode_prefix(bytes: &[u8]) -> Result<(Message, usize), DecodeError> {
    let (ty, len) = parse_header(bytes)?;
    let total = FRAME_OVERHEAD + len;
    if bytes.len() < total {
        return Err(DecodeError::Truncated {
            needed: total,
            available: bytes.len(),
        });
    }
    let payload = &bytes[HEADER_LEN..HEADER_LEN + len];
    let expected = u32::from_le_bytes(bytes[HEADER_LEN + len..total].try_into().unwrap());
    let actual = frame_crc(ty, payload);
    if expected != actual {
        return Err(DecodeError::Crc { expected, actual });
    }
    let ty = MsgType::from_u8(ty).ok_or(DecodeError::UnknownType(ty))?;
    Ok((decode_payload(ty, payload)?, total))
}

fn decode_payload(ty: MsgType, payload: &[u8]) -> Result<Message, DecodeError> {
    let name = match ty {
        MsgType::Init => "init",
        MsgType::ActivationRecord => "activation_record",
        MsgType::EpochDone => "epoch_done",
        MsgType::TrainStatus => "train_status",
        MsgType::DeploySideNet => "deploy_side_net",
        MsgType::Ack => "ack",
        MsgType::Error => "error",
        MsgType::FullActivationRecord => "full_activation_record",
    };
    let mut r = Reader {
        buf: payload,
        pos: 0,
        msg: name,
    };
    let msg = match ty {
        MsgType::Init => {
            let session_id = r.u64()?;
            let num_layers = r.u32()?;
            let hidden = r.u32()?;
            let num_classes = r.u32()?;
            let arch = r.u8()?;
            let arch_kind =
                ArchKind::from_code(arch).ok_or_else(|| r.bad(format!("arch kind {arch}")))?;
            let seq_len = r.u32()?;
            let bottleneck = r.u32()?;
            let learning_rate = r.f64()?;
            let code = r.u8()?;
            let (beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?);
            let optimizer = match code {
                0 => Optimizer::Sgd,
                1 => Optimizer::Adam { beta1, beta2, eps },
                other => return Err(r.bad(format!("optimizer kind {other}"))),
            };
            let act = r.u8()?;
            let activation =
                Activation::from_code(act).ok_or_else(|| r.bad(format!("activation {act}")))?;
            Message::Init(MsgInit {
                session_id,
                num_layers,
                hidden,
                num_classes,
                arch_kind,
                seq_len,
                bottleneck,
                learning_rate,
                optimizer,
                activation,
                side_seed: r.u64()?,
                dataset_size: r.u64()?,
                batch_size: r.u32()?,
            })
        }
        MsgType::ActivationRecord => {
            let session_id = r.u64()?;
            let epoch = r.u32()?;
            let batch_index = r.u32()?;
            let b = r.u32()? as usize;
            let num_layers = r.u32()?;
            let hidden = r.u32()?;
            let num_classes = r.u32()?;
            let sample_ids = r.u64s(b)?;
            let n_act = r.product(&[num_layers as usize, b, hidden as usize])?;
            let activations = r.f32s(n_act)?;
            let n_dy = r.product(&[b, num_classes as usize])?;
            let delta_y = r.f32s(n_dy)?;
            Message::ActivationRecord(MsgActivationRecord {
                session_id,
                epoch,
                batch_index,
                num_layers,
                hidden,
                num_classes,
                sample_ids,
                activations,
                delta_y,
            })
        }
        MsgType::FullActivationRecord => {
            let session_id = r.u64()?;
            let epoch = r.u32()?;
            let batch_index = r.u32()?;
            let b = r.u32()? as usize;
            let num_layers = r.u32()?;
            let hidden = r.u32()?;
            let num_classes = r.u32()?;
            let seq_len = r.u32()?;
            let sample_ids = r.u64s(b)?;
            let lengths = r.u32s(b)?;
            let n_act = r.product(&[num_layers as usize, b, seq_len as usize, hidden as usize])?;
            let activations = r.f32s(n_act)?;
            let n_dy = r.product(&[b, num_classes as usize])?;
            let delta_y = r.f32s(n_dy)?;
            Message::FullActivationRecord(MsgFullActivationRecord {
                session_id,
                epoch,
                batch_index,
                num_layers,
                hidden,
                num_classes,
                seq_len,
                sample_ids,
                lengths,
                activations,
                delta_y,
            })
        }
        MsgType::EpochDone => Message::EpochDone(MsgEpochDone {
            session_id: r.u64()?,
            sample_count: r.u64()?,
        }),
        MsgType::TrainStatus => Message::TrainStatus(MsgTrainStatus {
            epoch: r.u32()?,
            mean_loss: r.f64()?,
            steps: r.u64()?,
        }),
        MsgType::DeploySideNet => {
            let session_id = r.u64()?;
            let n = r.u32()? as usize;
            Message::DeploySideNet(MsgDeploySideNet {
                session_id,
                side_net: r.take(n)?.to_vec(),
            })
        }
        MsgType::Ack => Message::Ack(MsgAck {
            msg_type: r.u8()?,
            batch_index: r.u32()?,
        }),
        MsgType::Error => {
            let code = r.u16()?;
            let n = r.u32()? as usize;
            let raw = r.take(n)?;
            let message =
                String::from_utf8(raw.to_vec()).map_err(|_| r.bad("message is not UTF-8"))?;
            Message::Error(MsgError { code, message })
        }
    };
    r.finish()?;
    Ok(msg)
}

/// Activation + target float bytes in one pivot record:
/// `B·(L·H + C)·float_width`. Frame and id overhead are excluded.
pub fn activation_record_bytes(
    num_layers: u64,
    hidden: u64,
    num_classes: u64,
    batch: u64,
    float_width: u64,
) -> u64 {
    batch * (num_layers * hidden + num_classes) * float_width
}

/// Same quantity when every token is sent: `B·(L·L_seq·H + C)·float_width`.
pub fn full_activation_record_bytes(
    num_layers: u64,
    seq_len: u64,
    hidden: u64,
    num_classes: u64,
    batch: u64,
    float_width: u64,
) -> u64 {
    batch * (num_layers * seq_len * hidden + num_classes) * float_width
}
