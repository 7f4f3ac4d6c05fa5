// Licensed under the Apache License, Version 2.0 <LICENSE-APACHE or
// http://www.apache.org/licenses/LICENSE-2.0> or the MIT license
// <LICENSE-MIT or http://opensource.org/licenses/MIT>, at your
// option. This file may not be copied, modified, or distributed
// except according to those terms.

//! Channel key derivation, packet and header protection, packet digests,
//! and the trust-anchored integrity store.

mod integrity;
mod keys;
mod packet;
mod suite;

pub use integrity::{IntegrityStore, Provenance, Verdict};
pub use keys::{
    derive_channel_keys, derive_header_key, hkdf_expand_label, ChannelKeys, ChannelSecret,
    HeaderKey, KeySchedule, LABEL_HP, LABEL_IV, LABEL_KEY,
};
pub use packet::{
    open_payload, protect_packet, unprotect_header, unprotect_packet, UnprotectedHeader,
    MAX_DATAGRAM_SIZE, MIN_SAMPLE_OFFSET, SAMPLE_LEN,
};
pub use suite::{compute_packet_digest, AeadAlgorithm, HashAlgorithm};

use thiserror::Error;

use crate::wire::{AeadId, HashId};

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum Error {
    #[error("unsupported hash algorithm {0:?}")]
    UnsupportedHash(HashId),

    #[error("unsupported aead {0:?}")]
    UnsupportedAead(AeadId),

    #[error("secret length {0} out of range")]
    SecretLength(usize),

    #[error("datagram of {0} bytes exceeds the maximum size")]
    Oversize(usize),

    #[error("datagram too short for a protected header")]
    Malformed,

    #[error("no secret applies to packet number {0}")]
    NoKey(u64),

    #[error("packet authentication failed")]
    DecryptFailed,

    #[error("conflicting digest for packet number {0}")]
    IntegrityConflict(u64),

    #[error("digest size does not match the channel hash")]
    DigestSize,
}

pub type Result<T> = std::result::Result<T, Error>;
