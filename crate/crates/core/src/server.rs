//! Server role: online training during epoch 1, cached training afterwards.

use crate::backbone::ArchKind;
use crate::cache::{ActivationCache, CacheError, CachedRecord};
use crate::numerics::SeededRng;
use crate::protocol::{
    error_code, Message, MsgAck, MsgActivationRecord, MsgDeploySideNet, MsgFullActivationRecord,
    MsgInit, MsgTrainStatus, MsgType,
};
use crate::side_network::{
    train_step, OptimizerState, SideNetError, SideNetwork, SideNetworkConfig,
};
use crate::transport::{Connection, TransportError};
use log::{debug, info, warn};
use std::collections::BTreeMap;
use std::fmt;
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::mpsc;
use thiserror::Error;

/// Mixed into the side-network seed to derive the epoch shuffle stream.
const SHUFFLE_SALT: u64 = 0x5348_5546_464c_4531;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("cache: {0}")]
    Cache(#[from] CacheError),
    #[error("side network: {0}")]
    SideNet(#[from] SideNetError),
    #[error("cached epochs need a sealed cache")]
    Unsealed,
    #[error("transport: {0}")]
    Transport(#[from] TransportError),
}

/// Stop rule for the server-only phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceRule {
    /// Total epochs including the collaborative first epoch.
    pub max_epochs: u32,
    pub tolerance: f64,
    pub patience: u32,
}

impl Default for ConvergenceRule {
    fn default() -> Self {
        Self {
            max_epochs: 20,
            tolerance: 1e-5,
            patience: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EpochPlan {
    /// Exactly this many epochs in total, the live epoch included.
    Fixed(u32),
    UntilConverged(ConvergenceRule),
}

impl Default for EpochPlan {
    fn default() -> Self {
        EpochPlan::UntilConverged(ConvergenceRule::default())
    }
}

#[derive(Debug, Clone)]
pub struct TrainerState {
    pub net: SideNetwork,
    pub opt: OptimizerState,
    /// Epoch currently being trained, starting at 1.
    pub epoch: u32,
    /// Mean loss of each completed epoch.
    pub loss_history: Vec<f64>,
    /// Pre-update loss of every step, in order.
    pub step_losses: Vec<f64>,
    epoch_loss: f64,
    epoch_steps: u64,
    rng: SeededRng,
}

impl TrainerState {
    pub fn new(net: SideNetwork, shuffle_seed: u64) -> Self {
        let opt = OptimizerState::new(&net);
        Self {
            net,
            opt,
            epoch: 1,
            loss_history: Vec::new(),
            step_losses: Vec::new(),
            epoch_loss: 0.0,
            epoch_steps: 0,
            rng: SeededRng::new(shuffle_seed),
        }
    }

    /// Trainer for a session announced by `init`.
    pub fn for_session(init: &MsgInit) -> Result<Self, SideNetError> {
        let net = SideNetwork::new(side_config(init))?;
        Ok(Self::new(net, init.side_seed ^ SHUFFLE_SALT))
    }

    pub fn train_record(&mut self, rec: &CachedRecord) -> Result<f64, SideNetError> {
        let loss = train_step(
            &mut self.net,
            &mut self.opt,
            &rec.layer_tensors(),
            &rec.delta_tensor(),
        )?;
        self.step_losses.push(loss);
        self.epoch_loss += loss;
        self.epoch_steps += 1;
        Ok(loss)
    }

    /// Closes the current epoch and returns its status.
    pub fn finish_epoch(&mut self) -> MsgTrainStatus {
        let mean = if self.epoch_steps == 0 {
            0.0
        } else {
            self.epoch_loss / self.epoch_steps as f64
        };
        let status = MsgTrainStatus {
            epoch: self.epoch,
            mean_loss: mean,
            steps: self.opt.step,
        };
        self.loss_history.push(mean);
        self.epoch += 1;
        self.epoch_loss = 0.0;
        self.epoch_steps = 0;
        status
    }

    pub fn steps(&self) -> u64 {
        self.opt.step
    }
}

pub fn side_config(init: &MsgInit) -> SideNetworkConfig {
    SideNetworkConfig {
        num_layers: init.num_layers as usize,
        hidden: init.hidden as usize,
        bottleneck: init.bottleneck as usize,
        num_classes: init.num_classes as usize,
        learning_rate: init.learning_rate,
        optimizer: init.optimizer,
        activation: init.activation,
        init_seed: init.side_seed,
    }
}

/// Trains from a sealed cache, one shuffled pass per epoch. `on_epoch`
/// sees the status of each finished epoch. Returns the number of epochs run.
pub fn run_cached_epochs(
    state: &mut TrainerState,
    cache: &ActivationCache,
    plan: EpochPlan,
    on_epoch: &mut dyn FnMut(&MsgTrainStatus),
) -> Result<u32, ServerError> {
    if !cache.is_sealed() {
        return Err(ServerError::Unsealed);
    }
    let records = cache.records();
    if records.is_empty() {
        return Ok(0);
    }
    let (total, rule) = match plan {
        EpochPlan::Fixed(n) => (n, None),
        EpochPlan::UntilConverged(rule) => (rule.max_epochs, Some(rule)),
    };
    let budget = total.saturating_sub(state.loss_history.len() as u32);
    let mut stalled = 0;
    let mut order: Vec<usize> = (0..records.len()).collect();
    for run in 0..budget {
        order.sort_unstable();
        state.rng.shuffle(&mut order);
        for &i in &order {
            state.train_record(&records[i])?;
        }
        let prev = state.loss_history.last().copied();
        let status = state.finish_epoch();
        on_epoch(&status);
        if let (Some(rule), Some(prev)) = (rule, prev) {
            if prev - status.mean_loss < rule.tolerance {
                stalled += 1;
            } else {
                stalled = 0;
            }
            if stalled >= rule.patience {
                return Ok(run + 1);
            }
        }
    }
    Ok(budget)
}

/// Gathers pivot rows from a full-sequence record. Padding is assumed to
/// trail, so sample `b` occupies positions `0..lengths[b]`.
pub fn pivot_from_full(
    m: &MsgFullActivationRecord,
    arch: ArchKind,
) -> Result<CachedRecord, String> {
    let (b, s, h, l) = (
        m.batch(),
        m.seq_len as usize,
        m.hidden as usize,
        m.num_layers as usize,
    );
    if m.lengths.len() != b {
        return Err(format!("{} lengths for {b} samples", m.lengths.len()));
    }
    if m.activations.len() != l * b * s * h {
        return Err("activation block size disagrees with header".into());
    }
    let mut acts = Vec::with_capacity(l * b * h);
    for layer in 0..l {
        for (i, &len) in m.lengths.iter().enumerate() {
            let len = len as usize;
            if len == 0 || len > s {
                return Err(format!("sample {i} has length {len}"));
            }
            let pos = match arch {
                ArchKind::Autoregressive => len - 1,
                ArchKind::Autoencoding => 0,
            };
            let start = ((layer * b + i) * s + pos) * h;
            acts.extend_from_slice(&m.activations[start..start + h]);
        }
    }
    Ok(CachedRecord {
        batch_index: m.batch_index,
        sample_ids: m.sample_ids.clone(),
        num_layers: l,
        hidden: h,
        num_classes: m.num_classes as usize,
        activations: acts,
        delta_y: m.delta_y.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ServerConfig {
    /// Where session logs live; `None` keeps caches in memory.
    pub cache_dir: Option<PathBuf>,
    pub plan: EpochPlan,
    pub multi_session: bool,
}

/// Something worth reporting on the status stream.
#[derive(Debug, Clone, PartialEq)]
pub enum ServerEvent {
    SessionStarted {
        session_id: u64,
        parameters: usize,
    },
    Epoch {
        session_id: u64,
        status: MsgTrainStatus,
    },
    Sealed {
        session_id: u64,
        records: usize,
        samples: u64,
    },
    Deployed {
        session_id: u64,
        bytes: usize,
    },
}

impl fmt::Display for ServerEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ServerEvent::SessionStarted {
                session_id,
                parameters,
            } => write!(
                f,
                "event=session_started session={session_id} parameters={parameters}"
            ),
            ServerEvent::Epoch { session_id, status } => write!(
                f,
                "event=epoch session={session_id} epoch={} mean_loss={:.9e} steps={}",
                status.epoch, status.mean_loss, status.steps
            ),
            ServerEvent::Sealed {
                session_id,
                records,
                samples,
            } => write!(
                f,
                "event=sealed session={session_id} records={records} samples={samples}"
            ),
            ServerEvent::Deployed { session_id, bytes } => {
                write!(f, "event=deployed session={session_id} bytes={bytes}")
            }
        }
    }
}

type Observer = Box<dyn FnMut(&ServerEvent) + Send>;

struct Session {
    init: MsgInit,
    trainer: TrainerState,
    cache: ActivationCache,
    /// Set once training finished; the session is then read-only.
    deploy: Option<MsgDeploySideNet>,
    /// Every reply to the sealing `MsgEpochDone`, resent if it repeats.
    outcome: Vec<Message>,
}

/// Protocol state machine. Each inbound message maps to the replies that
/// should be sent back, in order.
pub struct Server {
    config: ServerConfig,
    sessions: BTreeMap<u64, Session>,
    observer: Option<Observer>,
}

fn emit(observer: &mut Option<Observer>, event: ServerEvent) {
    debug!("{event}");
    if let Some(obs) = observer {
        obs(&event);
    }
}

impl Server {
    pub fn new(config: ServerConfig) -> Self {
        Self {
            config,
            sessions: BTreeMap::new(),
            observer: None,
        }
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    pub fn set_observer(&mut self, observer: impl FnMut(&ServerEvent) + Send + 'static) {
        self.observer = Some(Box::new(observer));
    }

    pub fn trainer(&self, session_id: u64) -> Option<&TrainerState> {
        self.sessions.get(&session_id).map(|s| &s.trainer)
    }

    pub fn cache(&self, session_id: u64) -> Option<&ActivationCache> {
        self.sessions.get(&session_id).map(|s| &s.cache)
    }

    pub fn is_finished(&self, session_id: u64) -> bool {
        self.sessions
            .get(&session_id)
            .is_some_and(|s| s.deploy.is_some())
    }

    pub fn handle(&mut self, msg: Message) -> Vec<Message> {
        match msg {
            Message::Init(m) => vec![self.handle_init(m)],
            Message::ActivationRecord(m) => vec![self.handle_record(m)],
            Message::FullActivationRecord(m) => vec![self.handle_full_record(m)],
            Message::EpochDone(m) => self.handle_epoch_done(m.session_id, m.sample_count),
            Message::Error(e) => {
                warn!("peer reported error {}: {}", e.code, e.message);
                Vec::new()
            }
            other => vec![Message::error(
                error_code::UNEXPECTED,
                format!("{:?} is not a device message", other.msg_type()),
            )],
        }
    }

    fn handle_init(&mut self, m: MsgInit) -> Message {
        let ack = Message::Ack(MsgAck {
            msg_type: MsgType::Init as u8,
            batch_index: 0,
        });
        if let Some(existing) = self.sessions.get(&m.session_id) {
            return if existing.init == m {
                ack
            } else {
                Message::error(
                    error_code::CONFIG_CONFLICT,
                    format!("session {} exists with a different config", m.session_id),
                )
            };
        }
        let live = self.sessions.values().any(|s| s.deploy.is_none());
        if live && !self.config.multi_session {
            return Message::error(error_code::CONFIG_CONFLICT, "another session is live");
        }
        let trainer = match TrainerState::for_session(&m) {
            Ok(t) => t,
            Err(e) => return Message::error(error_code::CONFIG_CONFLICT, e.to_string()),
        };
        let cache = match &self.config.cache_dir {
            Some(dir) => match ActivationCache::create(
                ActivationCache::log_path(dir, m.session_id),
                m.session_id,
            ) {
                Ok(c) => c,
                Err(e) => return Message::error(error_code::INTERNAL, e.to_string()),
            },
            None => ActivationCache::in_memory(m.session_id),
        };
        let parameters = trainer.net.parameter_count();
        info!(
            "session {} started: L={} d={} r={} C={} n={}",
            m.session_id, m.num_layers, m.hidden, m.bottleneck, m.num_classes, m.dataset_size
        );
        let session_id = m.session_id;
        self.sessions.insert(
            session_id,
            Session {
                init: m,
                trainer,
                cache,
                deploy: None,
                outcome: Vec::new(),
            },
        );
        emit(
            &mut self.observer,
            ServerEvent::SessionStarted {
                session_id,
                parameters,
            },
        );
        ack
    }

    fn live(&mut self, session_id: u64) -> Result<&mut Session, Box<Message>> {
        match self.sessions.get_mut(&session_id) {
            Some(s) if s.deploy.is_none() => Ok(s),
            Some(_) => Err(Box::new(Message::error(
                error_code::SEALED,
                format!("session {session_id} already finished"),
            ))),
            None => Err(Box::new(Message::error(
                error_code::NO_SESSION,
                format!("no session {session_id}"),
            ))),
        }
    }

    fn handle_record(&mut self, m: MsgActivationRecord) -> Message {
        let s = match self.live(m.session_id) {
            Ok(s) => s,
            Err(e) => return *e,
        };
        let (l, h, c, b) = (
            m.num_layers as usize,
            m.hidden as usize,
            m.num_classes as usize,
            m.batch(),
        );
        if m.num_layers != s.init.num_layers
            || m.hidden != s.init.hidden
            || m.num_classes != s.init.num_classes
            || b == 0
            || m.activations.len() != l * b * h
            || m.delta_y.len() != b * c
        {
            return Message::error(
                error_code::DIMENSION,
                format!(
                    "record dims L={} H={} C={} B={b} do not match session L={} H={} C={}",
                    m.num_layers,
                    m.hidden,
                    m.num_classes,
                    s.init.num_layers,
                    s.init.hidden,
                    s.init.num_classes
                ),
            );
        }
        let rec = CachedRecord::from_msg(&m);
        Self::accept(s, rec, MsgType::ActivationRecord, m.epoch)
    }

    fn handle_full_record(&mut self, m: MsgFullActivationRecord) -> Message {
        let s = match self.live(m.session_id) {
            Ok(s) => s,
            Err(e) => return *e,
        };
        if m.num_layers != s.init.num_layers
            || m.hidden != s.init.hidden
            || m.num_classes != s.init.num_classes
            || m.seq_len != s.init.seq_len
            || m.batch() == 0
            || m.delta_y.len() != m.batch() * m.num_classes as usize
        {
            return Message::error(error_code::DIMENSION, "record dims do not match session");
        }
        let rec = match pivot_from_full(&m, s.init.arch_kind) {
            Ok(r) => r,
            Err(e) => return Message::error(error_code::DIMENSION, e),
        };
        Self::accept(s, rec, MsgType::FullActivationRecord, m.epoch)
    }

    fn accept(s: &mut Session, rec: CachedRecord, ty: MsgType, epoch: u32) -> Message {
        let ack = Message::Ack(MsgAck {
            msg_type: ty as u8,
            batch_index: rec.batch_index,
        });
        if s.cache.is_sealed() {
            return Message::error(error_code::SEALED, "cache is sealed");
        }
        if epoch != 1 {
            return Message::error(
                error_code::BAD_EPOCH,
                format!("records are only accepted in epoch 1, got {epoch}"),
            );
        }
        // A resend of the last batch whose ack was lost.
        if s.cache.records().last() == Some(&rec) {
            debug!("re-acknowledging batch {}", rec.batch_index);
            return ack;
        }
        let expected = s.cache.records().len() as u32;
        if rec.batch_index != expected {
            return Message::error(
                error_code::UNEXPECTED,
                format!("expected batch {expected}, got {}", rec.batch_index),
            );
        }
        if let Err(e) = s.cache.append(rec) {
            let code = match e {
                CacheError::DuplicateSample(_) => error_code::DUPLICATE_SAMPLE,
                CacheError::Sealed => error_code::SEALED,
                _ => error_code::INTERNAL,
            };
            return Message::error(code, e.to_string());
        }
        let rec = s.cache.records().last().expect("just appended");
        if let Err(e) = s.trainer.train_record(rec) {
            return Message::error(error_code::INTERNAL, e.to_string());
        }
        ack
    }

    fn handle_epoch_done(&mut self, session_id: u64, sample_count: u64) -> Vec<Message> {
        let ack = Message::Ack(MsgAck {
            msg_type: MsgType::EpochDone as u8,
            batch_index: 0,
        });
        if let Some(s) = self.sessions.get(&session_id) {
            if s.deploy.is_some() {
                return s.outcome.clone();
            }
        }
        let plan = self.config.plan;
        if let Err(e) = self.live(session_id) {
            return vec![*e];
        }
        let s = self.sessions.get_mut(&session_id).expect("checked live");
        let observer = &mut self.observer;
        if sample_count != s.init.dataset_size || s.cache.sample_count() != sample_count {
            return vec![Message::error(
                error_code::COUNT_MISMATCH,
                format!(
                    "announced {} samples, device reports {sample_count}, cache holds {}",
                    s.init.dataset_size,
                    s.cache.sample_count()
                ),
            )];
        }
        if let Err(e) = s.cache.seal(sample_count) {
            return vec![Message::error(error_code::INTERNAL, e.to_string())];
        }
        emit(
            observer,
            ServerEvent::Sealed {
                session_id,
                records: s.cache.records().len(),
                samples: sample_count,
            },
        );
        let mut replies = vec![ack];
        let first = s.trainer.finish_epoch();
        emit(
            observer,
            ServerEvent::Epoch {
                session_id,
                status: first.clone(),
            },
        );
        replies.push(Message::TrainStatus(first));

        // Device traffic is over; everything below reads the sealed cache.
        let result = run_cached_epochs(&mut s.trainer, &s.cache, plan, &mut |st| {
            emit(
                observer,
                ServerEvent::Epoch {
                    session_id,
                    status: st.clone(),
                },
            );
            replies.push(Message::TrainStatus(st.clone()));
        });
        if let Err(e) = result {
            replies.push(Message::error(error_code::INTERNAL, e.to_string()));
            return replies;
        }
        let deploy = deploy_side_network(session_id, &s.trainer);
        emit(
            observer,
            ServerEvent::Deployed {
                session_id,
                bytes: deploy.side_net.len(),
            },
        );
        s.deploy = Some(deploy.clone());
        replies.push(Message::DeploySideNet(deploy));
        s.outcome = replies.clone();
        replies
    }
}

pub fn deploy_side_network(session_id: u64, state: &TrainerState) -> MsgDeploySideNet {
    MsgDeploySideNet {
        session_id,
        side_net: state.net.to_bytes(),
    }
}

/// Serves one connection until the peer closes it. A receiver thread decodes
/// frames into a bounded queue; the calling thread handles them in order.
pub fn serve_connection(
    server: &mut Server,
    conn: Connection,
    queue_depth: usize,
) -> Result<(), ServerError> {
    let (mut reader, mut writer) = conn.split();
    let (tx, rx) = mpsc::sync_channel(queue_depth.max(1));
    std::thread::scope(|scope| {
        scope.spawn(move || loop {
            match reader.recv() {
                Ok(msg) => {
                    if tx.send(Ok(msg)).is_err() {
                        break;
                    }
                }
                Err(TransportError::Closed) => break,
                Err(e) => {
                    let _ = tx.send(Err(e));
                    break;
                }
            }
        });
        for item in rx {
            match item {
                Ok(msg) => {
                    for reply in server.handle(msg) {
                        writer.send(&reply)?;
                    }
                }
                Err(TransportError::Decode(e)) => {
                    warn!("dropping connection after undecodable frame: {e}");
                    let _ = writer.send(&Message::error(
                        error_code::UNEXPECTED,
                        format!("undecodable frame: {e}"),
                    ));
                }
                Err(e) => debug!("connection ended: {e}"),
            }
        }
        Ok(())
    })
}

/// Accepts connections one at a time. `max_connections` bounds the loop.
pub fn serve_tcp(
    server: &mut Server,
    listener: TcpListener,
    queue_depth: usize,
    max_connections: Option<usize>,
) -> Result<(), ServerError> {
    for (served, stream) in listener.incoming().enumerate() {
        let stream = stream.map_err(TransportError::from)?;
        let peer = stream
            .peer_addr()
            .map(|a| a.to_string())
            .unwrap_or_default();
        info!("connection from {peer}");
        match Connection::tcp(stream) {
            Ok(conn) => {
                if let Err(e) = serve_connection(server, conn, queue_depth) {
                    warn!("connection {peer} failed: {e}");
                }
            }
            Err(e) => warn!("connection {peer} setup failed: {e}"),
        }
        if max_connections.is_some_and(|m| served + 1 >= m) {
            break;
        }
    }
    Ok(())
}
