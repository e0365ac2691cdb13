mod common;

use common::Harness;
use pae_core::config::RunConfig;
use pae_core::device::{token_batch, RetryPolicy};
use pae_core::privacy::{one_hot, sign_leak_decode};
use pae_core::protocol::{decode_prefix, Message, SCHEMA};
use pae_core::server::Server;
use pae_core::simulate::{server_config, session_spec, Simulation};

fn tapped_session() -> (Simulation, Vec<Message>) {
    tapped_session_with(77)
}

fn tapped_session_with(nonce_seed: u64) -> (Simulation, Vec<Message>) {
    let sim = Simulation::prepare(RunConfig {
        layers: 2,
        hidden: 8,
        heads: 2,
        seq_len: 10,
        vocab: 40,
        bottleneck: 4,
        classes: 3,
        samples: 60,
        batch: 6,
        epochs: 2,
        nonce_seed,
        ..Default::default()
    })
    .unwrap();
    let (harness, connect) = Harness::start(Server::new(server_config(&sim.config)), 2, vec![]);
    sim.pipeline()
        .run_session(
            &sim.dataset,
            &session_spec(&sim.config),
            connect,
            RetryPolicy::default(),
        )
        .unwrap();
    let (_, tap, _) = harness.finish();
    let mut msgs = Vec::new();
    let mut at = 0;
    while at < tap.len() {
        let (m, used) = decode_prefix(&tap[at..]).unwrap();
        msgs.push(m);
        at += used;
    }
    (sim, msgs)
}

fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    haystack.windows(needle.len()).any(|w| w == needle)
}

#[test]
fn schema_has_no_field_for_secrets() {
    for (ty, fields) in SCHEMA {
        for f in *fields {
            for banned in ["token", "label", "nonce", "mask", "text", "y_pre"] {
                assert!(!f.contains(banned), "{ty:?} carries `{f}`");
            }
        }
    }
}

#[test]
fn device_stream_carries_only_init_records_and_epoch_done() {
    let (_, msgs) = tapped_session();
    assert!(matches!(msgs.first(), Some(Message::Init(_))));
    assert!(matches!(msgs.last(), Some(Message::EpochDone(_))));
    assert!(msgs[1..msgs.len() - 1]
        .iter()
        .all(|m| matches!(m, Message::ActivationRecord(_))));
}

#[test]
fn nonce_never_appears_in_the_stream() {
    let (sim, msgs) = tapped_session();
    let bytes: Vec<u8> = msgs.iter().flat_map(pae_core::protocol::encode).collect();
    for &r in sim.nonce.values() {
        assert!(!contains(&bytes, &r.to_le_bytes()));
        assert!(!contains(&bytes, &(r as f32).to_le_bytes()));
    }
}

#[test]
fn token_sequences_never_appear_in_the_stream() {
    let (sim, msgs) = tapped_session();
    let bytes: Vec<u8> = msgs.iter().flat_map(pae_core::protocol::encode).collect();
    let floats: Vec<u8> = msgs
        .iter()
        .filter_map(|m| match m {
            Message::ActivationRecord(r) => Some(r),
            _ => None,
        })
        .flat_map(|r| {
            r.activations
                .iter()
                .chain(&r.delta_y)
                .flat_map(|v| v.to_le_bytes())
        })
        .collect();
    for s in &sim.dataset.samples {
        let real: Vec<u32> = s
            .tokens
            .iter()
            .zip(&s.mask)
            .filter(|(_, m)| **m)
            .map(|(t, _)| *t)
            .collect();
        let le: Vec<u8> = real.iter().flat_map(|t| t.to_le_bytes()).collect();
        assert!(!contains(&bytes, &le));
        for window in real.windows(3) {
            let le: Vec<u8> = window.iter().flat_map(|t| t.to_le_bytes()).collect();
            assert!(!contains(&floats, &le));
        }
        let as_bytes: Vec<u8> = real.iter().map(|&t| t as u8).collect();
        assert!(!contains(&bytes, &as_bytes));
    }
}

/// Sign-decoder hits on the masked and unmasked targets of one session.
fn sign_decode_hits(sim: &Simulation, msgs: &[Message]) -> (usize, usize, usize) {
    let c = sim.config.classes;
    let cfg = sim.backbone.config();
    let (mut rows, mut masked_hits, mut plain_hits) = (0, 0, 0);
    for m in msgs {
        let Message::ActivationRecord(r) = m else {
            continue;
        };
        let samples: Vec<_> = r
            .sample_ids
            .iter()
            .map(|&id| sim.dataset.samples[id as usize].clone())
            .collect();
        let batch = token_batch(&samples, cfg.arch_kind, cfg.seq_len);
        let y_pre = sim.backbone.forward(&batch).unwrap().y_pre;
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let onehot = one_hot(&labels, c);
        for (i, row) in r.delta_y.chunks(c).enumerate() {
            let masked: Vec<f64> = row.iter().map(|&v| v as f64).collect();
            let plain: Vec<f64> = (0..c).map(|k| onehot.row(i)[k] - y_pre.row(i)[k]).collect();
            assert!(masked.iter().zip(&plain).any(|(a, b)| (a - b).abs() > 1e-3));
            rows += 1;
            masked_hits += usize::from(sign_leak_decode(&masked) == labels[i]);
            plain_hits += usize::from(sign_leak_decode(&plain) == labels[i]);
        }
    }
    (rows, masked_hits, plain_hits)
}

#[test]
fn masked_targets_stop_the_sign_decoder_across_sessions() {
    let (mut rows, mut masked, mut plain) = (0, 0, 0);
    for seed in 0..12 {
        let (sim, msgs) = tapped_session_with(seed);
        let (r, m, p) = sign_decode_hits(&sim, &msgs);
        assert_eq!(r, 60);
        rows += r;
        masked += m;
        plain += p;
    }
    assert_eq!(plain, rows);
    assert!(masked < rows, "masked targets leaked every label");
}
