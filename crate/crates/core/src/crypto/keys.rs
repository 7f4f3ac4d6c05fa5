// Licensed under the Apache License, Version 2.0 <LICENSE-APACHE or
// http://www.apache.org/licenses/LICENSE-2.0> or the MIT license
// <LICENSE-MIT or http://opensource.org/licenses/MIT>, at your
// option. This file may not be copied, modified, or distributed
// except according to those terms.

//! Key derivation. Channel secrets are expanded exactly like TLS 1.3 traffic
//! secrets (HKDF-Expand-Label with an empty context), under labels private to
//! the extension.

use std::fmt;

use ring::{aead, hkdf};

use super::{AeadAlgorithm, Error, Result};
use crate::wire::{MAX_SECRET_LEN, MIN_SECRET_LEN};

pub const LABEL_KEY: &[u8] = b"mcquic key";
pub const LABEL_IV: &[u8] = b"mcquic iv";
pub const LABEL_HP: &[u8] = b"mcquic hp";

struct OkmLen(usize);

impl hkdf::KeyType for OkmLen {
    fn len(&self) -> usize {
        self.0
    }
}

/// HKDF-Expand-Label: `info = u16 length || u8 len(label) || label || u8 0`,
/// with the secret used directly as the pseudorandom key.
pub fn hkdf_expand_label(aead: AeadAlgorithm, secret: &[u8], label: &[u8], out: &mut [u8]) {
    let prk = hkdf::Prk::new_less_safe(aead.ring_hkdf(), secret);
    let len = (out.len() as u16).to_be_bytes();
    let label_len = [label.len() as u8];
    let info = [&len[..], &label_len[..], label, &[0u8][..]];
    // Output lengths used here are far below 255 * HashLen.
    prk.expand(&info, OkmLen(out.len()))
        .and_then(|okm| okm.fill(out))
        .expect("hkdf output length");
}

/// A packet-protection secret and the first packet number it applies to.
#[derive(Clone, PartialEq, Eq)]
pub struct ChannelSecret {
    secret: Vec<u8>,
    pub from_packet_number: u64,
}

impl ChannelSecret {
    pub fn new(secret: &[u8], from_packet_number: u64) -> Result<Self> {
        if !(MIN_SECRET_LEN..=MAX_SECRET_LEN).contains(&secret.len()) {
            return Err(Error::SecretLength(secret.len()));
        }
        Ok(ChannelSecret {
            secret: secret.to_vec(),
            from_packet_number,
        })
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.secret
    }
}

impl fmt::Debug for ChannelSecret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ChannelSecret")
            .field("from_packet_number", &self.from_packet_number)
            .finish_non_exhaustive()
    }
}

/// AEAD key and IV derived from one [`ChannelSecret`].
pub struct ChannelKeys {
    pub aead: AeadAlgorithm,
    pub key: Vec<u8>,
    pub iv: [u8; 12],
    pub derived_from: ChannelSecret,
    sealer: aead::LessSafeKey,
}

impl fmt::Debug for ChannelKeys {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ChannelKeys")
            .field("aead", &self.aead)
            .field("from_packet_number", &self.derived_from.from_packet_number)
            .finish_non_exhaustive()
    }
}

impl Clone for ChannelKeys {
    fn clone(&self) -> Self {
        derive_channel_keys(&self.derived_from, self.aead)
    }
}

impl PartialEq for ChannelKeys {
    fn eq(&self, other: &Self) -> bool {
        self.aead == other.aead && self.key == other.key && self.iv == other.iv
    }
}

impl ChannelKeys {
    fn nonce(&self, pn: u64) -> aead::Nonce {
        let mut n = self.iv;
        for (b, p) in n[4..].iter_mut().zip(pn.to_be_bytes()) {
            *b ^= p;
        }
        aead::Nonce::assume_unique_for_key(n)
    }

    /// Seals `payload` with the packet number as nonce and `aad` (the
    /// unprotected header) as associated data. Returns ciphertext and tag.
    pub fn seal(&self, pn: u64, aad: &[u8], payload: &[u8]) -> Vec<u8> {
        let mut buf = payload.to_vec();
        self.sealer
            .seal_in_place_append_tag(self.nonce(pn), aead::Aad::from(aad), &mut buf)
            .expect("seal");
        buf
    }

    pub fn open(&self, pn: u64, aad: &[u8], ciphertext: &[u8]) -> Result<Vec<u8>> {
        let mut buf = ciphertext.to_vec();
        let n = self
            .sealer
            .open_in_place(self.nonce(pn), aead::Aad::from(aad), &mut buf)
            .map_err(|_| Error::DecryptFailed)?
            .len();
        buf.truncate(n);
        Ok(buf)
    }
}

/// Deterministically expands `secret` into the AEAD key and IV.
pub fn derive_channel_keys(secret: &ChannelSecret, aead: AeadAlgorithm) -> ChannelKeys {
    let mut key = vec![0u8; aead.key_len()];
    let mut iv = [0u8; 12];
    hkdf_expand_label(aead, secret.as_bytes(), LABEL_KEY, &mut key);
    hkdf_expand_label(aead, secret.as_bytes(), LABEL_IV, &mut iv);
    let sealer = aead::LessSafeKey::new(
        aead::UnboundKey::new(aead.ring_aead(), &key).expect("key length matches algorithm"),
    );
    ChannelKeys {
        aead,
        key,
        iv,
        derived_from: secret.clone(),
        sealer,
    }
}

/// Static header-protection key for the lifetime of a channel.
pub struct HeaderKey {
    pub aead: AeadAlgorithm,
    pub key: Vec<u8>,
    hp: aead::quic::HeaderProtectionKey,
}

impl fmt::Debug for HeaderKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HeaderKey")
            .field("aead", &self.aead)
            .finish_non_exhaustive()
    }
}

impl HeaderKey {
    /// Five mask bytes computed from a 16-byte ciphertext sample.
    pub fn mask(&self, sample: &[u8]) -> [u8; 5] {
        self.hp.new_mask(sample).expect("sample length")
    }
}

pub fn derive_header_key(header_secret: &[u8], aead: AeadAlgorithm) -> HeaderKey {
    let mut key = vec![0u8; aead.key_len()];
    hkdf_expand_label(aead, header_secret, LABEL_HP, &mut key);
    let hp = aead::quic::HeaderProtectionKey::new(aead.ring_hp(), &key)
        .expect("key length matches algorithm");
    HeaderKey { aead, key, hp }
}

/// Keys ordered by the packet number they start at. The key for a packet is
/// the one with the largest start not above its packet number.
#[derive(Debug, Default)]
pub struct KeySchedule {
    keys: Vec<ChannelKeys>,
}

impl KeySchedule {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a secret; re-adding an identical secret is a no-op. Returns
    /// whether the schedule changed.
    pub fn insert(&mut self, secret: &ChannelSecret, aead: AeadAlgorithm) -> bool {
        let from = secret.from_packet_number;
        match self
            .keys
            .binary_search_by_key(&from, |k| k.derived_from.from_packet_number)
        {
            Ok(i) if self.keys[i].derived_from == *secret => false,
            Ok(i) => {
                self.keys[i] = derive_channel_keys(secret, aead);
                true
            }
            Err(i) => {
                self.keys.insert(i, derive_channel_keys(secret, aead));
                true
            }
        }
    }

    pub fn select(&self, pn: u64) -> Option<&ChannelKeys> {
        let i = self
            .keys
            .partition_point(|k| k.derived_from.from_packet_number <= pn);
        i.checked_sub(1).map(|i| &self.keys[i])
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn boundaries(&self) -> impl Iterator<Item = u64> + '_ {
        self.keys.iter().map(|k| k.derived_from.from_packet_number)
    }

    /// Forget keys that can no longer apply to packets at or after `pn`.
    pub fn discard_before(&mut self, pn: u64) {
        let i = self
            .keys
            .partition_point(|k| k.derived_from.from_packet_number <= pn);
        if i > 1 {
            self.keys.drain(..i - 1);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn secret(b: u8, from: u64) -> ChannelSecret {
        ChannelSecret::new(&[b; 32], from).unwrap()
    }

    #[test]
    fn deterministic_and_sensitive() {
        let s = secret(1, 0);
        let a = derive_channel_keys(&s, AeadAlgorithm::Aes128Gcm);
        let b = derive_channel_keys(&s, AeadAlgorithm::Aes128Gcm);
        assert_eq!(a, b);
        let mut raw = [1u8; 32];
        raw[31] = 2;
        let c = derive_channel_keys(
            &ChannelSecret::new(&raw, 0).unwrap(),
            AeadAlgorithm::Aes128Gcm,
        );
        assert_ne!(a.key, c.key);
        assert_ne!(a.iv, c.iv);
    }

    #[test]
    fn key_sizes_follow_the_suite() {
        let s = secret(3, 0);
        assert_eq!(
            derive_channel_keys(&s, AeadAlgorithm::Aes128Gcm).key.len(),
            16
        );
        assert_eq!(
            derive_channel_keys(&s, AeadAlgorithm::Aes256Gcm).key.len(),
            32
        );
    }

    #[test]
    fn secret_bounds() {
        assert_eq!(
            ChannelSecret::new(&[0; 15], 0),
            Err(Error::SecretLength(15))
        );
        assert_eq!(
            ChannelSecret::new(&[0; 65], 0),
            Err(Error::SecretLength(65))
        );
        assert!(ChannelSecret::new(&[0; 16], 0).is_ok());
    }

    #[test]
    fn boundary_selection() {
        let mut ks = KeySchedule::new();
        ks.insert(&secret(1, 0), AeadAlgorithm::Aes128Gcm);
        ks.insert(&secret(2, 100), AeadAlgorithm::Aes128Gcm);
        assert_eq!(ks.select(10).unwrap().derived_from.from_packet_number, 0);
        assert_eq!(ks.select(99).unwrap().derived_from.from_packet_number, 0);
        assert_eq!(ks.select(100).unwrap().derived_from.from_packet_number, 100);
        assert!(!ks.insert(&secret(2, 100), AeadAlgorithm::Aes128Gcm));

        let mut late = KeySchedule::new();
        late.insert(&secret(2, 100), AeadAlgorithm::Aes128Gcm);
        assert!(late.select(99).is_none());
    }
}
