// Licensed under the Apache License, Version 2.0 <LICENSE-APACHE or
// http://www.apache.org/licenses/LICENSE-2.0> or the MIT license
// <LICENSE-MIT or http://opensource.org/licenses/MIT>, at your
// option. This file may not be copied, modified, or distributed
// except according to those terms.

//! Channel publication: packetization, protection, digest chaining and
//! key rotation.
//!
//! Packets are built a segment at a time. Packet `p` of a segment carries
//! the digest of packet `p + lead`, so a segment is built back to front and
//! its first `lead` digests form the root that members receive over
//! unicast. Later digests are anchored by packets that already verified.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use bytes::Bytes;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::channel::ChannelDescriptor;
use crate::conn::StreamChunk;
use crate::crypto::{
    derive_channel_keys, derive_header_key, protect_packet, ChannelKeys, ChannelSecret, HeaderKey,
};
use crate::wire::{
    encode_packet_frame, stream_frame_overhead, ChannelId, McFrame, MulticastPacketHeader,
    PacketFrame,
};

const TAG_LEN: usize = 16;
const SECRET_LEN: usize = 32;
/// Spacing of the packets that carry an upcoming secret.
const KEY_CARRIER_SPACING: u64 = 8;
const KEY_CARRIERS: u64 = 4;

/// When secrets change. Every `unicast_only_every`-th rotation is delivered
/// over unicast only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RotationPolicy {
    pub interval: u64,
    pub unicast_only_every: u64,
}

impl Default for RotationPolicy {
    fn default() -> Self {
        RotationPolicy {
            interval: 1024,
            unicast_only_every: 4,
        }
    }
}

impl RotationPolicy {
    pub const MIN_INTERVAL: u64 = 128;

    pub fn validate(&self) -> Result<(), &'static str> {
        if self.interval < Self::MIN_INTERVAL {
            return Err("rotation interval below 128 packets");
        }
        if self.unicast_only_every == 0 {
            return Err("unicast_only_every must be at least 1");
        }
        Ok(())
    }

    /// The rotation boundary at or below `pn`.
    pub fn epoch(&self, pn: u64) -> u64 {
        pn / self.interval * self.interval
    }

    pub fn is_unicast_only(&self, boundary: u64) -> bool {
        boundary > 0 && (boundary / self.interval).is_multiple_of(self.unicast_only_every)
    }

    /// Packets ahead of a boundary at which its secret goes out.
    pub fn lead(&self) -> u64 {
        (self.interval / 4).min(256)
    }

    /// The boundary whose secret packet `pn` carries, if any.
    pub fn carried_boundary(&self, pn: u64) -> Option<u64> {
        let b = self.epoch(pn) + self.interval;
        let first = b - self.lead();
        if pn < first || self.is_unicast_only(b) {
            return None;
        }
        let d = pn - first;
        (d.is_multiple_of(KEY_CARRIER_SPACING) && d / KEY_CARRIER_SPACING < KEY_CARRIERS).then_some(b)
    }

    /// The unicast-only boundary whose secret is sent when `pn` goes out.
    pub fn unicast_boundary(&self, pn: u64) -> Option<u64> {
        let b = self.epoch(pn) + self.interval;
        (pn == b - self.lead() && self.is_unicast_only(b)).then_some(b)
    }
}

#[derive(Clone, Debug)]
pub struct PublisherConfig {
    pub max_datagram_size: usize,
    /// Distance between a packet and the packet whose digest it carries.
    pub integrity_lead: u64,
    pub segment_packets: usize,
    pub rotation: RotationPolicy,
}

impl Default for PublisherConfig {
    fn default() -> Self {
        PublisherConfig {
            max_datagram_size: 1200,
            integrity_lead: 16,
            segment_packets: 128,
            rotation: RotationPolicy::default(),
        }
    }
}

/// One protected channel packet, ready to go out.
#[derive(Clone, Debug)]
pub struct BuiltPacket {
    pub pn: u64,
    pub datagram: Bytes,
    pub chunks: Vec<StreamChunk>,
    /// Integrity and Key frames inside the packet.
    pub carried: Vec<McFrame>,
    /// Clients a re-send is for; empty for first transmissions.
    pub resend_for: BTreeSet<usize>,
}

/// Data to re-send on the channel, for the clients that lost it.
#[derive(Clone, Debug)]
struct Resend {
    chunk: StreamChunk,
    losers: BTreeSet<usize>,
}

pub struct ChannelPublisher {
    desc: ChannelDescriptor,
    config: PublisherConfig,
    hp: HeaderKey,
    rng: ChaCha8Rng,
    secrets: BTreeMap<u64, ChannelSecret>,
    keys: Option<(u64, ChannelKeys)>,
    next_pn: u64,
    queue: VecDeque<StreamChunk>,
    resends: VecDeque<Resend>,
    ready: VecDeque<BuiltPacket>,
    seg_start: u64,
    seg_digests: Vec<Vec<u8>>,
}

impl ChannelPublisher {
    pub fn new(desc: ChannelDescriptor, config: PublisherConfig, seed: u64) -> Self {
        let hp = derive_header_key(&desc.announce.header_secret, desc.aead);
        ChannelPublisher {
            desc,
            config,
            hp,
            rng: ChaCha8Rng::seed_from_u64(seed),
            secrets: BTreeMap::new(),
            keys: None,
            next_pn: 0,
            queue: VecDeque::new(),
            resends: VecDeque::new(),
            ready: VecDeque::new(),
            seg_start: 0,
            seg_digests: Vec::new(),
        }
    }

    pub fn descriptor(&self) -> &ChannelDescriptor {
        &self.desc
    }

    pub fn channel_id(&self) -> &ChannelId {
        self.desc.channel_id()
    }

    pub fn rotation(&self) -> &RotationPolicy {
        &self.config.rotation
    }

    pub fn enqueue(&mut self, chunk: StreamChunk) {
        self.queue.push_back(chunk);
    }

    pub fn resend(&mut self, chunk: StreamChunk, losers: BTreeSet<usize>) {
        self.resends.push_back(Resend { chunk, losers });
    }

    pub fn has_pending(&self) -> bool {
        !self.ready.is_empty() || !self.queue.is_empty() || !self.resends.is_empty()
    }

    /// Packet number of the next packet to go out.
    pub fn next_send_pn(&self) -> u64 {
        self.ready.front().map_or(self.next_pn, |p| p.pn)
    }

    /// Secret for the epoch starting at `boundary`, generated on first use.
    /// Secrets are always drawn in boundary order.
    pub fn secret(&mut self, boundary: u64) -> &ChannelSecret {
        let interval = self.config.rotation.interval;
        let mut b = self.secrets.keys().next_back().map_or(0, |l| l + interval);
        while b <= boundary {
            let mut raw = [0u8; SECRET_LEN];
            self.rng.fill_bytes(&mut raw);
            let s = ChannelSecret::new(&raw, b).expect("fixed secret length");
            self.secrets.insert(b, s);
            b += interval;
        }
        &self.secrets[&boundary]
    }

    /// Every secret a newly joining member needs: the current one and any
    /// already generated for later epochs.
    /// Secrets generated so far, by boundary.
    pub fn known_secrets(&self) -> &BTreeMap<u64, ChannelSecret> {
        &self.secrets
    }

    pub fn handoff_secrets(&mut self) -> Vec<ChannelSecret> {
        let from = self.config.rotation.epoch(self.next_send_pn());
        self.secret(from);
        self.secrets.range(from..).map(|(_, s)| s.clone()).collect()
    }

    /// Digests of the current segment for packets at or after the next one
    /// to go out, capped at the integrity lead.
    pub fn handoff_digests(&self) -> Option<(u64, Vec<Vec<u8>>)> {
        let next = self.ready.front()?.pn;
        let skip = (next - self.seg_start) as usize;
        let n = (self.config.integrity_lead as usize).min(self.seg_digests.len() - skip);
        Some((next, self.seg_digests[skip..skip + n].to_vec()))
    }

    /// Takes the next packet, building a new segment when needed. The
    /// second value is the segment root when the packet starts a segment.
    pub fn next_packet(&mut self) -> Option<(BuiltPacket, Option<McFrame>)> {
        if self.ready.is_empty() {
            self.build_segment();
        }
        let p = self.ready.pop_front()?;
        let root = (p.pn == self.seg_start).then(|| {
            let n = (self.config.integrity_lead as usize).min(self.seg_digests.len());
            McFrame::Integrity {
                channel_id: self.channel_id().clone(),
                start_packet_number: self.seg_start,
                digests: self.seg_digests[..n].to_vec(),
            }
        });
        Some((p, root))
    }

    fn integrity_frame(&self, start: u64, digests: Vec<Vec<u8>>) -> PacketFrame {
        PacketFrame::Mc(McFrame::Integrity {
            channel_id: self.channel_id().clone(),
            start_packet_number: start,
            digests,
        })
    }

    fn frame_len(f: &PacketFrame) -> usize {
        let mut buf = Vec::new();
        encode_packet_frame(&mut buf, f).expect("locally built frame");
        buf.len()
    }

    fn key_frame(&mut self, boundary: u64) -> PacketFrame {
        let secret = self.secret(boundary).as_bytes().to_vec();
        PacketFrame::Mc(McFrame::Key {
            channel_id: self.channel_id().clone(),
            from_packet_number: boundary,
            secret,
        })
    }

    fn take_data(&mut self, room: usize) -> Option<(StreamChunk, BTreeSet<usize>)> {
        let (c, losers) = if let Some(r) = self.resends.front_mut() {
            (&mut r.chunk, Some(&r.losers))
        } else {
            (self.queue.front_mut()?, None)
        };
        let overhead = stream_frame_overhead(c.stream_id, c.offset, c.data.len());
        if room <= overhead {
            return None;
        }
        let len = c.data.len().min(room - overhead);
        if len == 0 && !c.data.is_empty() {
            return None;
        }
        let piece = StreamChunk {
            stream_id: c.stream_id,
            offset: c.offset,
            data: c.data.slice(..len),
            fin: c.fin && len == c.data.len(),
        };
        let losers = losers.cloned().unwrap_or_default();
        if len == c.data.len() {
            if self.resends.is_empty() {
                self.queue.pop_front();
            } else {
                self.resends.pop_front();
            }
        } else {
            c.data = c.data.slice(len..);
            c.offset += len as u64;
        }
        Some((piece, losers))
    }

    fn build_segment(&mut self) {
        let start = self.next_pn;
        let lead = self.config.integrity_lead;
        let dlen = self.desc.hash.digest_len();
        let cid_len = self.channel_id().as_bytes().len();
        let header_len = 2 + cid_len + crate::wire::PN_LEN;

        // Fill packets front to back.
        let mut plan: Vec<(Vec<StreamChunk>, Option<PacketFrame>, BTreeSet<usize>)> = Vec::new();
        while plan.len() < self.config.segment_packets
            && (!self.queue.is_empty() || !self.resends.is_empty())
        {
            let pn = start + plan.len() as u64;
            let key = self
                .config
                .rotation
                .carried_boundary(pn)
                .map(|b| self.key_frame(b));
            let reserve = Self::frame_len(&self.integrity_frame(pn + lead, vec![vec![0; dlen]]));
            let key_len = key.as_ref().map_or(0, Self::frame_len);
            let mut room = self.config.max_datagram_size - header_len - TAG_LEN - reserve - key_len;
            let mut chunks = Vec::new();
            let mut losers = BTreeSet::new();
            while let Some((c, l)) = self.take_data(room) {
                let used =
                    stream_frame_overhead(c.stream_id, c.offset, c.data.len()) + c.data.len();
                room -= used;
                losers.extend(l);
                chunks.push(c);
            }
            if chunks.is_empty() {
                break;
            }
            plan.push((chunks, key, losers));
        }
        if plan.is_empty() {
            return;
        }

        // Protect back to front so each packet can carry a later digest.
        let n = plan.len();
        let end = start + n as u64;
        let mut digests = vec![Vec::new(); n];
        let mut built: Vec<Option<BuiltPacket>> = vec![None; n];
        for i in (0..n).rev() {
            let pn = start + i as u64;
            let (chunks, key, losers) = std::mem::take(&mut plan[i]);
            let mut payload = Vec::new();
            let mut carried = Vec::new();
            if pn + lead < end {
                let f = self.integrity_frame(pn + lead, vec![digests[i + lead as usize].clone()]);
                encode_packet_frame(&mut payload, &f).expect("integrity frame");
                if let PacketFrame::Mc(m) = f {
                    carried.push(m);
                }
            }
            if let Some(f) = key {
                encode_packet_frame(&mut payload, &f).expect("key frame");
                if let PacketFrame::Mc(m) = f {
                    carried.push(m);
                }
            }
            for c in &chunks {
                let f = PacketFrame::Stream {
                    stream_id: c.stream_id,
                    offset: c.offset,
                    data: c.data.clone(),
                    fin: c.fin,
                };
                encode_packet_frame(&mut payload, &f).expect("stream frame");
            }
            let header = MulticastPacketHeader::new(self.channel_id().clone(), pn);
            self.keys_for(pn);
            let keys = &self.keys.as_ref().expect("just derived").1;
            let datagram = protect_packet(keys, &self.hp, &header, &payload)
                .expect("packet within datagram limit");
            digests[i] = self.desc.hash.digest(&datagram);
            built[i] = Some(BuiltPacket {
                pn,
                datagram: datagram.into(),
                chunks,
                carried,
                resend_for: losers,
            });
        }
        self.seg_start = start;
        self.seg_digests = digests;
        self.ready = built.into_iter().map(|p| p.expect("built")).collect();
        self.next_pn = end;
    }

    fn keys_for(&mut self, pn: u64) {
        let epoch = self.config.rotation.epoch(pn);
        if self.keys.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let aead = self.desc.aead;
            let k = derive_channel_keys(self.secret(epoch), aead);
            self.keys = Some((epoch, k));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{unprotect_packet, IntegrityStore, KeySchedule, Provenance, Verdict};
    use crate::wire::{decode_packet_frame, AeadId, Announce, HashId};

    fn publisher(rotation: RotationPolicy) -> ChannelPublisher {
        let desc = ChannelDescriptor::new(Announce {
            channel_id: ChannelId::new(&[0xc0, 1, 2, 3]).unwrap(),
            source_ip: "10.0.0.1".parse().unwrap(),
            group_ip: "232.1.1.1".parse().unwrap(),
            udp_port: 4433,
            aead_id: AeadId(0x1301),
            hash_id: HashId(4),
            header_secret: vec![9; 32],
            max_rate_kbps: 8000,
        })
        .unwrap();
        let config = PublisherConfig {
            rotation,
            ..PublisherConfig::default()
        };
        ChannelPublisher::new(desc, config, 1)
    }

    fn chunk(stream_id: u64, len: usize) -> StreamChunk {
        StreamChunk {
            stream_id,
            offset: 0,
            data: vec![0xab; len].into(),
            fin: true,
        }
    }

    #[test]
    fn three_packets_for_3000_bytes() {
        let mut p = publisher(RotationPolicy::default());
        p.enqueue(chunk(3, 3000));
        let mut pns = Vec::new();
        let mut bytes = 0;
        while let Some((b, _)) = p.next_packet() {
            assert!(b.datagram.len() <= 1200);
            bytes += b.chunks.iter().map(|c| c.data.len()).sum::<usize>();
            pns.push(b.pn);
        }
        assert_eq!(pns, vec![0, 1, 2]);
        assert_eq!(bytes, 3000);
    }

    #[test]
    fn chain_verifies_from_root() {
        let mut p = publisher(RotationPolicy::default());
        p.enqueue(chunk(3, 200_000));
        let hp = derive_header_key(&[9; 32], p.desc.aead);
        let mut store = IntegrityStore::new(p.desc.hash);
        let mut keys = KeySchedule::new();
        for s in p.handoff_secrets() {
            keys.insert(&s, p.desc.aead);
        }
        let mut largest = None;
        let mut count = 0;
        while let Some((b, root)) = p.next_packet() {
            if let Some(McFrame::Integrity {
                start_packet_number,
                digests,
                ..
            }) = root
            {
                store
                    .add(start_packet_number, &digests, Some(Provenance::Unicast))
                    .unwrap();
            }
            assert_eq!(
                store.verify(b.pn, &b.datagram),
                Verdict::Verified,
                "pn {}",
                b.pn
            );
            let (hdr, payload) = unprotect_packet(&hp, &keys, &b.datagram, largest).unwrap();
            largest = Some(hdr.packet_number);
            let mut rest = &payload[..];
            while !rest.is_empty() {
                let (f, n) = decode_packet_frame(rest).unwrap();
                rest = &rest[n..];
                match f {
                    PacketFrame::Mc(McFrame::Integrity {
                        start_packet_number,
                        digests,
                        ..
                    }) => {
                        store
                            .add(
                                start_packet_number,
                                &digests,
                                Some(Provenance::Packet(b.pn)),
                            )
                            .unwrap();
                    }
                    PacketFrame::Mc(McFrame::Key {
                        from_packet_number,
                        secret,
                        ..
                    }) => {
                        let s = ChannelSecret::new(&secret, from_packet_number).unwrap();
                        keys.insert(&s, p.desc.aead);
                    }
                    _ => {}
                }
            }
            count += 1;
        }
        assert!(count > 128);
    }

    #[test]
    fn rotation_schedule() {
        let r = RotationPolicy::default();
        assert_eq!(r.lead(), 256);
        assert_eq!(r.carried_boundary(1024 - 256), Some(1024));
        assert_eq!(r.carried_boundary(1024 - 256 + 8), Some(1024));
        assert_eq!(r.carried_boundary(1024 - 256 + 32), None);
        assert_eq!(r.carried_boundary(4096 - 256), None);
        assert_eq!(r.unicast_boundary(4096 - 256), Some(4096));
        assert_eq!(r.unicast_boundary(1024 - 256), None);
        assert!(RotationPolicy {
            interval: 64,
            unicast_only_every: 4
        }
        .validate()
        .is_err());
    }

    #[test]
    fn secrets_independent_of_request_order() {
        let mut a = publisher(RotationPolicy::default());
        let mut b = publisher(RotationPolicy::default());
        let late = a.secret(3072).as_bytes().to_vec();
        for x in [0, 1024, 2048] {
            b.secret(x);
        }
        assert_eq!(b.secret(3072).as_bytes(), &late[..]);
    }
}
