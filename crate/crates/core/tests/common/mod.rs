#![allow(dead_code)]

use pae_core::backbone::ArchKind;
use pae_core::numerics::{Activation, SeededRng, Tensor};
use pae_core::protocol::*;
use pae_core::server::{serve_connection, Server};
use pae_core::side_network::{
    side_backward, side_forward, side_loss, Optimizer, SideNetwork, SideNetworkConfig,
};
use pae_core::transport::{Connection, TransportError};
use std::io::{self, Read, Write};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};

/// Writes straight to stderr so the line survives the test harness's
/// output capture.
pub fn report_line(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
    let _ = err.flush();
}

pub fn criterion(n: u32, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    report_line(&format!("criterion {n:>2}: {verdict} | {detail}"));
}

pub fn random_activation(rng: &mut SeededRng) -> Activation {
    [Activation::Relu, Activation::Gelu, Activation::Tanh][rng.below(3) as usize]
}

/// Shapes and values for one finite-difference check.
#[derive(Debug, Clone)]
pub struct GradCase {
    pub net: SideNetwork,
    pub acts: Vec<Tensor>,
    pub target: Tensor,
}

impl GradCase {
    pub fn random(seed: u64, max_l: u64, max_d: u64, max_r: u64, max_b: u64, max_c: u64) -> Self {
        let mut rng = SeededRng::new(seed);
        let l = 1 + rng.below(max_l) as usize;
        let d = 1 + rng.below(max_d) as usize;
        let r = 1 + rng.below(max_r.min(d as u64)) as usize;
        let b = 1 + rng.below(max_b) as usize;
        let c = 1 + rng.below(max_c) as usize;
        let cfg = SideNetworkConfig {
            num_layers: l,
            hidden: d,
            bottleneck: r,
            num_classes: c,
            learning_rate: 1e-3,
            optimizer: Optimizer::default(),
            activation: random_activation(&mut rng),
            init_seed: rng.next_u64(),
        };
        let mut net = SideNetwork::new(cfg).unwrap();
        let params: Vec<f64> = (0..net.parameter_count())
            .map(|_| rng.uniform(-1.0, 1.0))
            .collect();
        net.set_flat_params(&params).unwrap();
        let acts = (0..l)
            .map(|_| Tensor::uniform(&[b, d], 1.5, &mut rng))
            .collect();
        let target = Tensor::uniform(&[b, c], 1.0, &mut rng);
        Self { net, acts, target }
    }

    pub fn loss_at(&self, params: &[f64]) -> f64 {
        let mut net = self.net.clone();
        net.set_flat_params(params).unwrap();
        let (y, _) = side_forward(&net, &self.acts).unwrap();
        side_loss(&y, &self.target).unwrap()
    }

    /// Largest relative error over all coordinates; the denominator is
    /// floored at `floor`.
    pub fn max_relative_error(&self, h: f64, floor: f64) -> f64 {
        let (y, state) = side_forward(&self.net, &self.acts).unwrap();
        let analytic = side_backward(&self.net, state, &y, &self.target)
            .unwrap()
            .flatten();
        let base = self.net.flat_params();
        let mut worst = 0.0f64;
        for (i, &a) in analytic.iter().enumerate() {
            let mut p = base.clone();
            p[i] = base[i] + h;
            let up = self.loss_at(&p);
            p[i] = base[i] - h;
            let down = self.loss_at(&p);
            let numeric = (up - down) / (2.0 * h);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(err);
        }
        worst
    }
}

fn f32s(rng: &mut SeededRng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.uniform(-4.0, 4.0) as f32).collect()
}

/// One instance of every message type with random contents.
pub fn sample_messages(rng: &mut SeededRng) -> Vec<Message> {
    let b = 1 + rng.below(4) as usize;
    let (l, h, c, s) = (
        1 + rng.below(3) as u32,
        1 + rng.below(6) as u32,
        1 + rng.below(3) as u32,
        1 + rng.below(5) as u32,
    );
    let ids: Vec<u64> = (0..b).map(|_| rng.next_u64()).collect();
    vec![
        Message::Init(MsgInit {
            session_id: rng.next_u64(),
            num_layers: l,
            hidden: h,
            num_classes: c,
            arch_kind: if rng.below(2) == 0 {
                ArchKind::Autoregressive
            } else {
                ArchKind::Autoencoding
            },
            seq_len: s,
            bottleneck: 1,
            learning_rate: rng.uniform(1e-5, 1e-1),
            optimizer: if rng.below(2) == 0 {
                Optimizer::Sgd
            } else {
                Optimizer::default()
            },
            activation: random_activation(rng),
            side_seed: rng.next_u64(),
            dataset_size: rng.below(1 << 20),
            batch_size: 1 + rng.below(16) as u32,
        }),
        Message::ActivationRecord(MsgActivationRecord {
            session_id: rng.next_u64(),
            epoch: 1,
            batch_index: rng.below(100) as u32,
            num_layers: l,
            hidden: h,
            num_classes: c,
            sample_ids: ids.clone(),
            activations: f32s(rng, b * (l * h) as usize),
            delta_y: f32s(rng, b * c as usize),
        }),
        Message::EpochDone(MsgEpochDone {
            session_id: rng.next_u64(),
            sample_count: rng.below(1 << 30),
        }),
        Message::TrainStatus(MsgTrainStatus {
            epoch: rng.below(50) as u32,
            mean_loss: rng.uniform(0.0, 2.0),
            steps: rng.below(1 << 20),
        }),
        Message::DeploySideNet(MsgDeploySideNet {
            session_id: rng.next_u64(),
            side_net: (0..rng.below(64)).map(|_| rng.below(256) as u8).collect(),
        }),
        Message::Ack(MsgAck {
            msg_type: 2,
            batch_index: rng.below(1000) as u32,
        }),
        Message::Error(MsgError {
            code: rng.below(10) as u16,
            message: format!("failure {}", rng.below(1000)),
        }),
        Message::FullActivationRecord(MsgFullActivationRecord {
            session_id: rng.next_u64(),
            epoch: 1,
            batch_index: rng.below(100) as u32,
            num_layers: l,
            hidden: h,
            num_classes: c,
            seq_len: s,
            sample_ids: ids,
            lengths: (0..b).map(|_| 1 + rng.below(s as u64) as u32).collect(),
            activations: f32s(rng, b * (l * s * h) as usize),
            delta_y: f32s(rng, b * c as usize),
        }),
    ]
}

/// A random corruption of `frame` that leaves it different from the
/// original.
pub fn mutate(frame: &[u8], rng: &mut SeededRng) -> Vec<u8> {
    loop {
        let mut out = frame.to_vec();
        match rng.below(5) {
            0 => {
                let i = rng.below(out.len() as u64) as usize;
                out[i] ^= 1 << rng.below(8);
            }
            1 => {
                for _ in 0..1 + rng.below(4) {
                    let i = rng.below(out.len() as u64) as usize;
                    out[i] = rng.below(256) as u8;
                }
            }
            2 => out.truncate(rng.below(out.len() as u64) as usize),
            3 => out.extend((0..1 + rng.below(8)).map(|_| rng.below(256) as u8)),
            _ => {
                // Rewrite the length field, keeping everything else.
                let len = rng.below(1 << 20) as u32;
                if out.len() >= 10 {
                    out[6..10].copy_from_slice(&len.to_le_bytes());
                }
            }
        }
        if out != frame {
            return out;
        }
    }
}

/// Sending half of an in-process byte pipe that breaks after `budget`
/// bytes, possibly mid-frame.
pub struct PipeWriter {
    tx: Sender<Vec<u8>>,
    budget: Option<usize>,
    tap: Option<Arc<Mutex<Vec<u8>>>>,
}

impl Write for PipeWriter {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = match self.budget {
            Some(0) => return Err(io::ErrorKind::BrokenPipe.into()),
            Some(b) => b.min(buf.len()),
            None => buf.len(),
        };
        if let Some(b) = &mut self.budget {
            *b -= n;
        }
        if let Some(tap) = &self.tap {
            tap.lock().unwrap().extend_from_slice(&buf[..n]);
        }
        self.tx
            .send(buf[..n].to_vec())
            .map_err(|_| io::Error::from(io::ErrorKind::BrokenPipe))?;
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

pub struct PipeReader {
    rx: Receiver<Vec<u8>>,
    buf: Vec<u8>,
    pos: usize,
    budget: Option<usize>,
}

impl Read for PipeReader {
    fn read(&mut self, out: &mut [u8]) -> io::Result<usize> {
        if self.budget == Some(0) {
            return Err(io::ErrorKind::ConnectionReset.into());
        }
        if self.pos == self.buf.len() {
            match self.rx.recv() {
                Ok(chunk) => {
                    self.buf = chunk;
                    self.pos = 0;
                }
                Err(_) => return Ok(0),
            }
        }
        let mut n = out.len().min(self.buf.len() - self.pos);
        if let Some(b) = &mut self.budget {
            n = n.min(*b);
            *b -= n;
        }
        out[..n].copy_from_slice(&self.buf[self.pos..self.pos + n]);
        self.pos += n;
        Ok(n)
    }
}

pub fn pipe(
    write_budget: Option<usize>,
    read_budget: Option<usize>,
    tap: Option<Arc<Mutex<Vec<u8>>>>,
) -> (PipeWriter, PipeReader) {
    let (tx, rx) = mpsc::channel();
    (
        PipeWriter {
            tx,
            budget: write_budget,
            tap,
        },
        PipeReader {
            rx,
            buf: Vec::new(),
            pos: 0,
            budget: read_budget,
        },
    )
}

/// Per-connection fault budgets for the device side: bytes it may send and
/// bytes it may receive before that connection breaks.
#[derive(Debug, Clone, Copy, Default)]
pub struct Faults {
    pub send: Option<usize>,
    pub recv: Option<usize>,
}

/// Serves every connection the returned closure creates, in order, on one
/// [`Server`] running in a background thread. Connection `k` uses
/// `plan[k]`; later ones are clean. The closure's tap collects every byte
/// the device sent.
pub struct Harness {
    pub tap: Arc<Mutex<Vec<u8>>>,
    pub connects: Arc<Mutex<usize>>,
    server: std::thread::JoinHandle<Server>,
}

impl Harness {
    pub fn start(
        server: Server,
        queue_depth: usize,
        plan: Vec<Faults>,
    ) -> (Self, impl FnMut() -> Result<Connection, TransportError>) {
        let (conn_tx, conn_rx) = mpsc::channel::<Connection>();
        let handle = std::thread::spawn(move || {
            let mut server = server;
            for conn in conn_rx {
                let _ = serve_connection(&mut server, conn, queue_depth);
            }
            server
        });
        let tap = Arc::new(Mutex::new(Vec::new()));
        let connects = Arc::new(Mutex::new(0usize));
        let (tap2, connects2) = (Arc::clone(&tap), Arc::clone(&connects));
        let connect = move || {
            let mut k = connects2.lock().unwrap();
            let faults = plan.get(*k).copied().unwrap_or_default();
            *k += 1;
            let (dev_w, srv_r) = pipe(faults.send, None, Some(Arc::clone(&tap2)));
            let (srv_w, dev_r) = pipe(None, faults.recv, None);
            conn_tx
                .send(Connection::new(Box::new(srv_r), Box::new(srv_w)))
                .map_err(|_| TransportError::Closed)?;
            Ok(Connection::new(Box::new(dev_r), Box::new(dev_w)))
        };
        (
            Self {
                tap,
                connects,
                server: handle,
            },
            connect,
        )
    }

    /// Waits for the server thread; call after the connect closure is gone.
    pub fn finish(self) -> (Server, Vec<u8>, usize) {
        let server = self.server.join().expect("server thread panicked");
        let tap = self.tap.lock().unwrap().clone();
        let connects = *self.connects.lock().unwrap();
        (server, tap, connects)
    }
}
