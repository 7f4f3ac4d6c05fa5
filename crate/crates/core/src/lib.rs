// Licensed under the Apache License, Version 2.0 <LICENSE-APACHE or
// http://www.apache.org/licenses/LICENSE-2.0> or the MIT license
// <LICENSE-MIT or http://opensource.org/licenses/MIT>, at your
// option. This file may not be copied, modified, or distributed
// except according to those terms.

//! Multicast extension to QUIC.
//!
//! A server publishes content on source-specific multicast *channels* while
//! every client keeps an authenticated unicast connection. Channel packets
//! are AEAD-protected with secrets handed out over unicast, and every
//! multicast datagram is checked against a digest that is anchored to the
//! unicast connection before it is decrypted. Clients that cannot receive
//! multicast are served the same bytes over unicast.
//!
//! The crate is organised bottom-up:
//!
//! * [`wire`]: varints, the nine extension frames, transport parameters,
//!   packet headers and the frames of the unicast substrate.
//! * [`crypto`]: key derivation, packet and header protection, digests and
//!   the trust-anchored [`crypto::IntegrityStore`].
//! * [`channel`]: descriptors, the client-side channel state machine,
//!   packet-number spaces and shared stream reassembly.
//! * [`conn`]: the minimal reliable, encrypted unicast connection.
//! * [`client`] and [`server`]: the sans-IO protocol engines.
//! * [`netsim`]: a deterministic discrete-event star network.
//! * [`scenario`], [`sim`], [`trace`], [`report`], [`verify`]: the scenario
//!   runner behind the `mcquic-sim` binary.

pub mod channel;
pub mod client;
pub mod conn;
pub mod crypto;
pub mod netsim;
pub mod ranges;
pub mod report;
pub mod scenario;
pub mod server;
pub mod sim;
pub mod time;
pub mod trace;
pub mod verify;
pub mod wire;

pub use time::Time;
