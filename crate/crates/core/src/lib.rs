//! Device-server collaborative fine-tuning with additive side-tuning.
//!
//! A frozen transformer on the device emits one pivot-token activation per
//! layer plus a nonce-masked delta target. The server trains a gated adapter
//! side network on those records, caches them after the first epoch, and
//! returns the trained network. The device fuses it with its secret nonce.

pub mod accounting;
pub mod backbone;
pub mod cache;
pub mod config;
pub mod device;
pub mod numerics;
pub mod privacy;
pub mod protocol;
pub mod server;
pub mod side_network;
pub mod simulate;
pub mod transport;
