// Licensed under the Apache License, Version 2.0 <LICENSE-APACHE or
// http://www.apache.org/licenses/LICENSE-2.0> or the MIT license
// <LICENSE-MIT or http://opensource.org/licenses/MIT>, at your
// option. This file may not be copied, modified, or distributed
// except according to those terms.

//! Expected packet digests, believed only when they arrive over the unicast
//! connection or inside a multicast packet that itself verified.

use std::collections::BTreeMap;

use super::{Error, HashAlgorithm, Result};

/// How a stored digest became trusted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    /// Delivered on the authenticated unicast connection.
    Unicast,
    /// Carried by the verified multicast packet with this number.
    Packet(u64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Verified,
    Unknown,
    Mismatch,
}

/// Per-channel map from packet number to expected digest.
#[derive(Debug)]
pub struct IntegrityStore {
    hash: HashAlgorithm,
    entries: BTreeMap<u64, (Vec<u8>, Provenance)>,
    verified: BTreeMap<u64, ()>,
}

impl IntegrityStore {
    pub fn new(hash: HashAlgorithm) -> Self {
        IntegrityStore {
            hash,
            entries: BTreeMap::new(),
            verified: BTreeMap::new(),
        }
    }

    pub fn hash(&self) -> HashAlgorithm {
        self.hash
    }

    /// Stores digests for `start..start + digests.len()`. `context` is
    /// `None` for untrusted input, which is ignored. A packet-borne context
    /// counts only if that packet verified against this store. Either all
    /// digests are stored or none are; a digest that differs from an
    /// existing entry poisons the frame.
    pub fn add(
        &mut self,
        start: u64,
        digests: &[Vec<u8>],
        context: Option<Provenance>,
    ) -> Result<usize> {
        let Some(provenance) = context else {
            return Ok(0);
        };
        if let Provenance::Packet(p) = provenance {
            if !self.verified.contains_key(&p) {
                return Ok(0);
            }
        }
        if digests.iter().any(|d| d.len() != self.hash.digest_len()) {
            return Err(Error::DigestSize);
        }
        for (pn, d) in (start..).zip(digests) {
            if let Some((existing, _)) = self.entries.get(&pn) {
                if existing != d {
                    return Err(Error::IntegrityConflict(pn));
                }
            }
        }
        let mut added = 0;
        for (pn, d) in (start..).zip(digests) {
            self.entries.entry(pn).or_insert_with(|| {
                added += 1;
                (d.clone(), provenance)
            });
        }
        Ok(added)
    }

    pub fn verify(&mut self, pn: u64, datagram: &[u8]) -> Verdict {
        match self.entries.get(&pn) {
            None => Verdict::Unknown,
            Some((d, _)) if *d == self.hash.digest(datagram) => {
                self.verified.insert(pn, ());
                Verdict::Verified
            }
            Some(_) => Verdict::Mismatch,
        }
    }

    pub fn contains(&self, pn: u64) -> bool {
        self.entries.contains_key(&pn)
    }

    /// Lowest packet number with a stored digest.
    pub fn first(&self) -> Option<u64> {
        self.entries.keys().next().copied()
    }

    pub fn provenance(&self, pn: u64) -> Option<Provenance> {
        self.entries.get(&pn).map(|(_, p)| *p)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Follows packet provenance back to its unicast root. Returns whether
    /// the chain from `pn` ends at a unicast-delivered entry.
    pub fn anchored(&self, mut pn: u64) -> bool {
        // Each hop moves to a strictly earlier-trusted entry, so the walk
        // is bounded by the number of entries.
        for _ in 0..=self.entries.len() {
            match self.provenance(pn) {
                Some(Provenance::Unicast) => return true,
                Some(Provenance::Packet(p)) => pn = p,
                None => return false,
            }
        }
        false
    }

    /// Drops state for packet numbers below `pn`.
    pub fn remove_below(&mut self, pn: u64) {
        self.entries = self.entries.split_off(&pn);
        self.verified = self.verified.split_off(&pn);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(b: u8) -> Vec<u8> {
        vec![b; 32]
    }

    #[test]
    fn untrusted_is_ignored() {
        let mut s = IntegrityStore::new(HashAlgorithm::Sha256);
        assert_eq!(s.add(5, &[d(1)], None), Ok(0));
        assert!(s.is_empty());
    }

    #[test]
    fn trusted_range_and_idempotence() {
        let mut s = IntegrityStore::new(HashAlgorithm::Sha256);
        assert_eq!(
            s.add(5, &[d(1), d(2), d(3)], Some(Provenance::Unicast)),
            Ok(3)
        );
        assert!(s.contains(5) && s.contains(6) && s.contains(7) && !s.contains(8));
        assert_eq!(s.add(5, &[d(1)], Some(Provenance::Unicast)), Ok(0));
        assert_eq!(
            s.add(6, &[d(9)], Some(Provenance::Unicast)),
            Err(Error::IntegrityConflict(6))
        );
    }

    #[test]
    fn chaining_requires_verified_carrier() {
        let mut s = IntegrityStore::new(HashAlgorithm::Sha256);
        let pkt = b"packet ten";
        let dig = HashAlgorithm::Sha256.digest(pkt);
        s.add(10, &[dig], Some(Provenance::Unicast)).unwrap();
        // Not yet verified.
        assert_eq!(s.add(20, &[d(4)], Some(Provenance::Packet(10))), Ok(0));
        assert_eq!(s.verify(10, b"forged"), Verdict::Mismatch);
        assert_eq!(s.verify(11, pkt), Verdict::Unknown);
        assert_eq!(s.verify(10, pkt), Verdict::Verified);
        assert_eq!(s.add(20, &[d(4)], Some(Provenance::Packet(10))), Ok(1));
        assert!(s.anchored(20));
    }

    #[test]
    fn wrong_digest_size() {
        let mut s = IntegrityStore::new(HashAlgorithm::Sha256);
        assert_eq!(
            s.add(0, &[vec![0; 20]], Some(Provenance::Unicast)),
            Err(Error::DigestSize)
        );
    }
}
