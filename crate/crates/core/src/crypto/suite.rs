// Licensed under the Apache License, Version 2.0 <LICENSE-APACHE or
// http://www.apache.org/licenses/LICENSE-2.0> or the MIT license
// <LICENSE-MIT or http://opensource.org/licenses/MIT>, at your
// option. This file may not be copied, modified, or distributed
// except according to those terms.

use ring::{aead, digest, hkdf};
use serde::{Deserialize, Serialize};

use super::{Error, Result};
use crate::wire::{AeadId, HashId};

/// Packet digest algorithms. Codes follow the TLS `HashAlgorithm` registry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HashAlgorithm {
    Sha1,
    Sha256,
    Sha384,
}

impl HashAlgorithm {
    pub const ALL: [HashAlgorithm; 3] = [Self::Sha1, Self::Sha256, Self::Sha384];

    pub fn id(self) -> HashId {
        HashId(match self {
            HashAlgorithm::Sha1 => 2,
            HashAlgorithm::Sha256 => 4,
            HashAlgorithm::Sha384 => 5,
        })
    }

    pub fn from_id(id: HashId) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|h| h.id() == id)
            .ok_or(Error::UnsupportedHash(id))
    }

    pub fn digest_len(self) -> usize {
        match self {
            HashAlgorithm::Sha1 => 20,
            HashAlgorithm::Sha256 => 32,
            HashAlgorithm::Sha384 => 48,
        }
    }

    fn ring(self) -> &'static digest::Algorithm {
        match self {
            HashAlgorithm::Sha1 => &digest::SHA1_FOR_LEGACY_USE_ONLY,
            HashAlgorithm::Sha256 => &digest::SHA256,
            HashAlgorithm::Sha384 => &digest::SHA384,
        }
    }

    pub fn digest(self, data: &[u8]) -> Vec<u8> {
        digest::digest(self.ring(), data).as_ref().to_vec()
    }
}

/// Packet protection algorithms, coded as the TLS 1.3 suite that carries
/// them. The suite's hash drives key derivation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AeadAlgorithm {
    Aes128Gcm,
    Aes256Gcm,
    ChaCha20Poly1305,
}

impl AeadAlgorithm {
    pub const ALL: [AeadAlgorithm; 3] = [Self::Aes128Gcm, Self::Aes256Gcm, Self::ChaCha20Poly1305];

    pub fn id(self) -> AeadId {
        AeadId(match self {
            AeadAlgorithm::Aes128Gcm => 0x1301,
            AeadAlgorithm::Aes256Gcm => 0x1302,
            AeadAlgorithm::ChaCha20Poly1305 => 0x1303,
        })
    }

    pub fn from_id(id: AeadId) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.id() == id)
            .ok_or(Error::UnsupportedAead(id))
    }

    pub fn key_len(self) -> usize {
        match self {
            AeadAlgorithm::Aes128Gcm => 16,
            AeadAlgorithm::Aes256Gcm | AeadAlgorithm::ChaCha20Poly1305 => 32,
        }
    }

    pub const fn nonce_len(self) -> usize {
        12
    }

    pub const fn tag_len(self) -> usize {
        16
    }

    pub(crate) fn ring_aead(self) -> &'static aead::Algorithm {
        match self {
            AeadAlgorithm::Aes128Gcm => &aead::AES_128_GCM,
            AeadAlgorithm::Aes256Gcm => &aead::AES_256_GCM,
            AeadAlgorithm::ChaCha20Poly1305 => &aead::CHACHA20_POLY1305,
        }
    }

    pub(crate) fn ring_hp(self) -> &'static aead::quic::Algorithm {
        match self {
            AeadAlgorithm::Aes128Gcm => &aead::quic::AES_128,
            AeadAlgorithm::Aes256Gcm => &aead::quic::AES_256,
            AeadAlgorithm::ChaCha20Poly1305 => &aead::quic::CHACHA20,
        }
    }

    pub(crate) fn ring_hkdf(self) -> hkdf::Algorithm {
        match self {
            AeadAlgorithm::Aes256Gcm => hkdf::HKDF_SHA384,
            _ => hkdf::HKDF_SHA256,
        }
    }
}

/// Digest over the complete datagram as transmitted (protected header and
/// ciphertext), so verification can run before any decryption.
pub fn compute_packet_digest(hash_id: HashId, datagram: &[u8]) -> Result<Vec<u8>> {
    Ok(HashAlgorithm::from_id(hash_id)?.digest(datagram))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_sha256() {
        let d = compute_packet_digest(HashId(4), b"").unwrap();
        assert_eq!(
            hex::encode(d),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn digest_lengths() {
        assert_eq!(compute_packet_digest(HashId(4), b"x").unwrap().len(), 32);
        assert_eq!(compute_packet_digest(HashId(2), b"x").unwrap().len(), 20);
        assert_eq!(
            compute_packet_digest(HashId(99), b"x"),
            Err(Error::UnsupportedHash(HashId(99)))
        );
    }
}
