//! Device and server in one process over a loopback transport.

use crate::accounting::RunMetrics;
use crate::backbone::{build_backbone, BackboneModel};
use crate::config::{RunConfig, Transmit};
use crate::device::{
    accuracy, ingest_delimited, once, predict, synth_dataset, token_batch, Dataset, DeviceError,
    DevicePipeline, RetryPolicy, SessionOutcome, SessionSpec,
};
use crate::privacy::{generate_nonce, NonceKey};
use crate::protocol::{MsgActivationRecord, MsgFullActivationRecord, MsgType, FRAME_OVERHEAD};
use crate::server::{
    serve_connection, ConvergenceRule, EpochPlan, Server, ServerConfig, ServerEvent,
};
use crate::transport::Connection;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

/// Everything the device holds for a run.
pub struct Simulation {
    pub config: RunConfig,
    pub dataset: Dataset,
    pub backbone: Arc<BackboneModel>,
    pub nonce: NonceKey,
}

pub struct SimulationReport {
    pub metrics: RunMetrics,
    pub outcome: SessionOutcome,
    /// The server after the session, with its sealed cache and trainer.
    pub server: Server,
}

pub fn load_dataset(config: &RunConfig) -> Result<Dataset, DeviceError> {
    let ds = if config.data == "synthetic" {
        synth_dataset(
            config.data_seed,
            config.samples,
            config.seq_len,
            config.vocab,
            config.classes,
        )
    } else {
        ingest_delimited(
            Path::new(&config.data),
            config.classes,
            config.vocab,
            config.seq_len,
        )?
    };
    Ok(ds)
}

pub fn session_spec(config: &RunConfig) -> SessionSpec {
    SessionSpec {
        session_id: config.session_id,
        bottleneck: config.bottleneck,
        learning_rate: config.learning_rate,
        optimizer: config.optimizer,
        activation: config.activation,
        side_seed: config.side_seed,
        batch_size: config.batch,
        transmit: config.transmit,
    }
}

pub fn server_config(config: &RunConfig) -> ServerConfig {
    ServerConfig {
        cache_dir: None,
        plan: EpochPlan::UntilConverged(ConvergenceRule {
            max_epochs: config.epochs,
            tolerance: config.tolerance,
            patience: config.patience,
        }),
        multi_session: false,
    }
}

impl Simulation {
    pub fn prepare(config: RunConfig) -> Result<Self, DeviceError> {
        config.validate()?;
        let dataset = load_dataset(&config)?;
        let backbone = Arc::new(build_backbone(config.backbone_config())?);
        let nonce = generate_nonce(config.classes, config.nonce_seed, config.session_id);
        Ok(Self {
            config,
            dataset,
            backbone,
            nonce,
        })
    }

    pub fn pipeline(&self) -> DevicePipeline {
        DevicePipeline::new(Arc::clone(&self.backbone), self.nonce.clone())
            .with_queue_depth(self.config.queue_depth)
    }

    pub fn run(&self) -> Result<SimulationReport, DeviceError> {
        self.run_with(Server::new(server_config(&self.config)))
    }

    /// Runs a full session against `server` and collects metrics.
    pub fn run_with(&self, mut server: Server) -> Result<SimulationReport, DeviceError> {
        let pipeline = self.pipeline();
        let counter = pipeline.forward_counter();
        let during_cached = Arc::new(AtomicU64::new(0));
        let sealed_at = Arc::new(Mutex::new(None::<(Instant, u64)>));
        let deployed_at = Arc::new(Mutex::new(None::<Instant>));
        {
            let counter = Arc::clone(&counter);
            let during = Arc::clone(&during_cached);
            let sealed_at = Arc::clone(&sealed_at);
            let deployed_at = Arc::clone(&deployed_at);
            server.set_observer(move |ev| {
                let now = counter.load(Ordering::SeqCst);
                match ev {
                    ServerEvent::Sealed { .. } => {
                        *sealed_at.lock().unwrap() = Some((Instant::now(), now))
                    }
                    ServerEvent::Epoch { .. } | ServerEvent::Deployed { .. } => {
                        if let Some((_, base)) = *sealed_at.lock().unwrap() {
                            during.fetch_max(now - base, Ordering::SeqCst);
                        }
                        if matches!(ev, ServerEvent::Deployed { .. }) {
                            *deployed_at.lock().unwrap() = Some(Instant::now());
                        }
                    }
                    ServerEvent::SessionStarted { .. } => {}
                }
            });
        }

        let (device_end, server_end) = Connection::loopback_pair();
        let sent = device_end.writer.stats();
        let received = device_end.reader.stats();
        let depth = self.config.queue_depth;
        let start = Instant::now();
        let (outcome, server) = std::thread::scope(|scope| {
            let handle = scope.spawn(move || {
                let result = serve_connection(&mut server, server_end, depth);
                (result, server)
            });
            let outcome = pipeline.run_session(
                &self.dataset,
                &session_spec(&self.config),
                once(device_end),
                RetryPolicy {
                    max_attempts: 0,
                    ..Default::default()
                },
            );
            let (served, server) = handle.join().expect("server thread panicked");
            if let Err(e) = served {
                log::warn!("server loop ended with {e}");
            }
            (outcome, server)
        });
        let outcome = outcome?;

        let (l, h, c) = (
            self.config.layers as u64,
            self.config.hidden as u64,
            self.config.classes as u64,
        );
        let s = self.config.seq_len as u64;
        let n = self.dataset.len() as u64;
        let batches = outcome.batches as u64;
        let (ty, float_acts, fixed) = match self.config.transmit {
            Transmit::Pivot => (
                MsgType::ActivationRecord,
                4 * n * l * h,
                batches * MsgActivationRecord::FIXED_LEN as u64 + 8 * n,
            ),
            Transmit::Full => (
                MsgType::FullActivationRecord,
                4 * n * l * s * h,
                batches * MsgFullActivationRecord::FIXED_LEN as u64 + 12 * n,
            ),
        };
        let record_bytes = sent.bytes_of(ty);
        let target_bytes = 4 * n * c;
        let overhead = record_bytes - float_acts - target_bytes;
        debug_assert_eq!(overhead, fixed + sent.frames_of(ty) * FRAME_OVERHEAD as u64);

        let (backbone_accuracy, fused_accuracy) = self.train_accuracy(&outcome)?;
        let sealed = *sealed_at.lock().unwrap();
        let deployed = *deployed_at.lock().unwrap();
        let epoch1_secs = sealed.map_or(0.0, |(t, _)| (t - start).as_secs_f64());
        let server_only_secs = match (sealed, deployed) {
            (Some((a, _)), Some(b)) => (b - a).as_secs_f64(),
            _ => 0.0,
        };
        let metrics = RunMetrics {
            transmit: match self.config.transmit {
                Transmit::Pivot => "pivot".into(),
                Transmit::Full => "full".into(),
            },
            seq_len: s,
            samples: n,
            batches,
            bytes_sent: sent.total_bytes(),
            bytes_received: received.total_bytes(),
            activation_bytes: float_acts,
            target_bytes,
            record_overhead_bytes: overhead,
            control_bytes: sent.total_bytes() - record_bytes,
            device_forward_passes: pipeline.forward_passes(),
            forward_passes_during_cached_epochs: during_cached.load(Ordering::SeqCst),
            side_steps: outcome.statuses.last().map_or(0, |s| s.steps),
            epochs: outcome.statuses.len() as u64,
            epoch_losses: outcome.statuses.iter().map(|s| s.mean_loss).collect(),
            backbone_accuracy,
            fused_accuracy,
            epoch1_secs,
            server_only_secs,
        };
        Ok(SimulationReport {
            metrics,
            outcome,
            server,
        })
    }

    /// Train-set accuracy of the frozen backbone alone and of the fused
    /// output. Uses its own forward passes, not the pipeline's counter.
    fn train_accuracy(&self, outcome: &SessionOutcome) -> Result<(f64, f64), DeviceError> {
        let cfg = self.backbone.config();
        let mut base_hits = 0.0;
        let mut fused_hits = 0.0;
        for chunk in self.dataset.samples.chunks(64) {
            let batch = token_batch(chunk, cfg.arch_kind, cfg.seq_len);
            let y_pre = self.backbone.forward(&batch)?.y_pre;
            base_hits += accuracy(&y_pre, chunk) * chunk.len() as f64;
            let y = predict(&self.backbone, &outcome.side_net, &self.nonce, chunk)?;
            fused_hits += accuracy(&y, chunk) * chunk.len() as f64;
        }
        let n = self.dataset.len().max(1) as f64;
        Ok((base_hits / n, fused_hits / n))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        RunConfig {
            layers: 2,
            hidden: 8,
            heads: 2,
            seq_len: 6,
            vocab: 24,
            bottleneck: 4,
            samples: 20,
            batch: 3,
            epochs: 3,
            ..Default::default()
        }
    }

    #[test]
    fn loopback_session_accounts_every_byte() {
        let sim = Simulation::prepare(tiny()).unwrap();
        let r = sim.run().unwrap();
        let m = &r.metrics;
        assert_eq!(m.batches, 7);
        assert_eq!(m.device_forward_passes, 20);
        assert_eq!(m.forward_passes_during_cached_epochs, 0);
        assert_eq!(m.epochs, 3);
        assert_eq!(m.side_steps, 21);
        assert_eq!(m.activation_bytes, 4 * 20 * 2 * 8);
        assert_eq!(m.record_overhead_bytes, 7 * (14 + 32) + 8 * 20);
        assert!(r.server.is_finished(1));
        assert_eq!(r.server.cache(1).unwrap().records().len(), 7);
    }

    #[test]
    fn empty_dataset_completes_with_no_records() {
        let sim = Simulation::prepare(RunConfig {
            samples: 0,
            ..tiny()
        })
        .unwrap();
        let r = sim.run().unwrap();
        assert_eq!(r.metrics.batches, 0);
        assert_eq!(r.metrics.device_forward_passes, 0);
        assert_eq!(r.outcome.statuses.len(), 1);
    }
}
