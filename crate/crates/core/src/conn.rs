// Licensed under the Apache License, Version 2.0 <LICENSE-APACHE or
// http://www.apache.org/licenses/LICENSE-2.0> or the MIT license
// <LICENSE-MIT or http://opensource.org/licenses/MIT>, at your
// option. This file may not be copied, modified, or distributed
// except according to those terms.

//! The unicast connection between a client and the server.
//!
//! Handshake and peer authentication are outside this crate: both ends are
//! constructed with the same per-connection secrets. Packets reuse the
//! multicast packet protection. Frames are carried either on one ordered
//! control stream (all [`ControlFrame`]s, including the extension frames)
//! or as unordered STREAM data. Loss recovery retransmits frames, never
//! packets.

use std::collections::{BTreeMap, VecDeque};
use std::time::Duration;

use bytes::Bytes;

use crate::crypto::{
    derive_channel_keys, derive_header_key, open_payload, protect_packet, unprotect_header,
    AeadAlgorithm, ChannelKeys, ChannelSecret, HeaderKey,
};
use crate::ranges::RangeSet;
use crate::wire::{
    decode_control_frame, decode_packet_frame, encode_control_frame, encode_packet_frame,
    stream_frame_overhead, varint_len, ChannelId, ControlFrame, MulticastPacketHeader, PacketFrame,
    PlainHeader,
};
use crate::Time;

pub const PROTOCOL_VIOLATION: u64 = 0x0a;
pub const NO_ERROR: u64 = 0x00;
pub const FLOW_CONTROL_ERROR: u64 = 0x03;

const PACKET_THRESHOLD: u64 = 3;
const MAX_ACK_RANGES: usize = 32;
const ACK_DELAY_EXPONENT: u32 = 3;
const TAG_LEN: usize = 16;

#[derive(Clone, Debug)]
pub struct ConnConfig {
    pub max_datagram_size: usize,
    pub max_ack_delay: Duration,
    pub initial_rtt: Duration,
}

impl Default for ConnConfig {
    fn default() -> Self {
        ConnConfig {
            max_datagram_size: 1200,
            max_ack_delay: Duration::from_millis(25),
            initial_rtt: Duration::from_millis(100),
        }
    }
}

/// Secrets and identifiers both endpoints agree on before the first packet.
#[derive(Clone, Debug)]
pub struct ConnParams {
    pub local_cid: ChannelId,
    pub peer_cid: ChannelId,
    pub tx_secret: Vec<u8>,
    pub rx_secret: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamChunk {
    pub stream_id: u64,
    pub offset: u64,
    pub data: Bytes,
    pub fin: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ConnEvent {
    Control(ControlFrame),
    Stream(StreamChunk),
    /// The connection closed; no further events follow.
    Closed {
        error_code: u64,
        by_peer: bool,
    },
}

#[derive(Clone, Debug)]
enum Retx {
    Control { offset: u64, len: usize },
    Stream(StreamChunk),
}

#[derive(Debug)]
struct SentPacket {
    time: Time,
    ack_eliciting: bool,
    frames: Vec<Retx>,
}

#[derive(Clone, Copy, Debug)]
struct Rtt {
    latest: Duration,
    smoothed: Duration,
    var: Duration,
    has_sample: bool,
}

impl Rtt {
    fn new(initial: Duration) -> Self {
        Rtt {
            latest: initial,
            smoothed: initial,
            var: initial / 2,
            has_sample: false,
        }
    }

    fn update(&mut self, sample: Duration) {
        self.latest = sample;
        if !self.has_sample {
            self.smoothed = sample;
            self.var = sample / 2;
            self.has_sample = true;
            return;
        }
        let diff = self.smoothed.abs_diff(sample);
        self.var = (self.var * 3 + diff) / 4;
        self.smoothed = (self.smoothed * 7 + sample) / 8;
    }
}

/// Byte counters, split by whether a packet carried STREAM data.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize)]
pub struct ConnStats {
    pub packets_sent: u64,
    pub packets_received: u64,
    pub packets_lost: u64,
    pub bytes_sent: u64,
    pub stream_bytes_sent: u64,
    pub control_bytes_sent: u64,
    pub bytes_received: u64,
    pub undecryptable: u64,
}

#[derive(Debug)]
pub struct Conn {
    config: ConnConfig,
    local_cids: Vec<(u64, ChannelId)>,
    next_local_seq: u64,
    peer_cid: (u64, ChannelId),
    tx_keys: ChannelKeys,
    rx_keys: ChannelKeys,
    tx_hp: HeaderKey,
    rx_hp: HeaderKey,

    next_pn: u64,
    sent: BTreeMap<u64, SentPacket>,
    largest_acked: Option<u64>,
    rtt: Rtt,
    pto_count: u32,
    last_ack_eliciting: Option<Time>,
    loss_time: Option<Time>,

    // Control stream, send side. `ctl_out[0]` is at offset `ctl_base`.
    ctl_out: VecDeque<u8>,
    ctl_base: u64,
    ctl_unsent: u64,
    ctl_acked: RangeSet,
    ctl_lost: RangeSet,

    // Control stream, receive side.
    ctl_pending: BTreeMap<u64, Bytes>,
    ctl_in: Vec<u8>,
    ctl_in_off: u64,

    stream_retx: VecDeque<StreamChunk>,
    stream_new: VecDeque<StreamChunk>,

    received: RangeSet,
    largest_received: Option<(u64, Time)>,
    ack_eliciting_unacked: usize,
    ack_deadline: Option<Time>,

    close_offset: Option<u64>,
    peer_closed: bool,
    closed: bool,
    events: VecDeque<ConnEvent>,
    stats: ConnStats,
}

fn keys(secret: &[u8]) -> (ChannelKeys, HeaderKey) {
    let aead = AeadAlgorithm::Aes128Gcm;
    let s = ChannelSecret::new(secret, 0).expect("connection secret length");
    let mut hp_secret = secret.to_vec();
    hp_secret.reverse();
    (
        derive_channel_keys(&s, aead),
        derive_header_key(&hp_secret, aead),
    )
}

impl Conn {
    pub fn new(config: ConnConfig, params: ConnParams) -> Self {
        let (tx_keys, tx_hp) = keys(&params.tx_secret);
        let (rx_keys, rx_hp) = keys(&params.rx_secret);
        let rtt = Rtt::new(config.initial_rtt);
        Conn {
            config,
            local_cids: vec![(0, params.local_cid)],
            next_local_seq: 1,
            peer_cid: (0, params.peer_cid),
            tx_keys,
            rx_keys,
            tx_hp,
            rx_hp,
            next_pn: 0,
            sent: BTreeMap::new(),
            largest_acked: None,
            rtt,
            pto_count: 0,
            last_ack_eliciting: None,
            loss_time: None,
            ctl_out: VecDeque::new(),
            ctl_base: 0,
            ctl_unsent: 0,
            ctl_acked: RangeSet::new(),
            ctl_lost: RangeSet::new(),
            ctl_pending: BTreeMap::new(),
            ctl_in: Vec::new(),
            ctl_in_off: 0,
            stream_retx: VecDeque::new(),
            stream_new: VecDeque::new(),
            received: RangeSet::new(),
            largest_received: None,
            ack_eliciting_unacked: 0,
            ack_deadline: None,
            close_offset: None,
            peer_closed: false,
            closed: false,
            events: VecDeque::new(),
            stats: ConnStats::default(),
        }
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn is_closing(&self) -> bool {
        self.close_offset.is_some() || self.closed
    }

    pub fn stats(&self) -> ConnStats {
        self.stats
    }

    pub fn smoothed_rtt(&self) -> Duration {
        self.rtt.smoothed
    }

    pub fn rtt_var(&self) -> Duration {
        self.rtt.var
    }

    /// Whether a datagram's header identifier addresses this connection.
    pub fn is_local_cid(&self, id: &ChannelId) -> bool {
        self.local_cids.iter().any(|(_, c)| c == id)
    }

    pub fn local_cids(&self) -> impl Iterator<Item = &ChannelId> {
        self.local_cids.iter().map(|(_, c)| c)
    }

    /// Replaces every current local identifier with `new`, telling the
    /// peer to stop using the old ones.
    pub fn rotate_local_cid(&mut self, new: ChannelId) {
        let seq = self.next_local_seq;
        self.next_local_seq += 1;
        self.local_cids.retain(|(s, _)| *s >= seq);
        self.local_cids.push((seq, new.clone()));
        self.send_control(&ControlFrame::NewConnectionId {
            sequence: seq,
            retire_prior_to: seq,
            connection_id: new,
        });
    }

    pub fn send_control(&mut self, frame: &ControlFrame) {
        if self.is_closing() {
            return;
        }
        let mut buf = Vec::new();
        encode_control_frame(&mut buf, frame).expect("locally built control frame");
        self.ctl_out.extend(buf);
    }

    pub fn send_stream(&mut self, chunk: StreamChunk) {
        if self.is_closing() {
            return;
        }
        self.stream_new.push_back(chunk);
    }

    /// Bytes of STREAM data queued but not yet sent once.
    pub fn queued_stream_bytes(&self) -> usize {
        self.stream_new.iter().map(|c| c.data.len()).sum()
    }

    /// Starts an orderly close. The close frame is delivered reliably, after
    /// which the connection stops.
    pub fn close(&mut self, error_code: u64) {
        if self.is_closing() {
            return;
        }
        self.send_control(&ControlFrame::ConnectionClose { error_code });
        self.close_offset = Some(self.ctl_end());
        self.stream_new.clear();
        self.stream_retx.clear();
    }

    pub fn poll_event(&mut self) -> Option<ConnEvent> {
        self.events.pop_front()
    }

    fn ctl_end(&self) -> u64 {
        self.ctl_base + self.ctl_out.len() as u64
    }

    fn fail(&mut self, now: Time, code: u64) {
        log::debug!("connection error {code:#x} at {now}");
        self.close(code);
    }

    pub fn handle_datagram(&mut self, now: Time, datagram: &[u8]) {
        if self.closed {
            return;
        }
        let Ok(plain) = PlainHeader::parse(datagram) else {
            return;
        };
        if !self.is_local_cid(&plain.channel_id) {
            return;
        }
        let largest = self.largest_received.map(|(pn, _)| pn);
        let payload = unprotect_header(&self.rx_hp, datagram, largest)
            .and_then(|h| open_payload(&self.rx_keys, &h, datagram).map(|p| (h, p)));
        let Ok((header, payload)) = payload else {
            self.stats.undecryptable += 1;
            return;
        };
        let pn = header.packet_number;
        self.stats.packets_received += 1;
        self.stats.bytes_received += datagram.len() as u64;
        if self.received.contains(pn) {
            return;
        }
        // Anything other than the next packet in sequence is acknowledged at once.
        let out_of_order = largest.map_or(pn != 0, |l| pn != l + 1);
        self.received.insert_one(pn);
        if self.largest_received.is_none_or(|(l, _)| pn > l) {
            self.largest_received = Some((pn, now));
        }

        let mut rest = &payload[..];
        let mut ack_eliciting = false;
        while !rest.is_empty() {
            let (frame, n) = match decode_packet_frame(rest) {
                Ok(v) => v,
                Err(_) => return self.fail(now, PROTOCOL_VIOLATION),
            };
            rest = &rest[n..];
            ack_eliciting |= frame.is_ack_eliciting();
            match frame {
                PacketFrame::Padding(_) => {}
                PacketFrame::Ack { ranges, ack_delay } => self.on_ack(now, &ranges, ack_delay),
                PacketFrame::Control { offset, data } => self.on_control_data(now, offset, data),
                PacketFrame::Stream {
                    stream_id,
                    offset,
                    data,
                    fin,
                } => {
                    if self.close_offset.is_none() {
                        self.events.push_back(ConnEvent::Stream(StreamChunk {
                            stream_id,
                            offset,
                            data,
                            fin,
                        }))
                    }
                }
                PacketFrame::Mc(_) => return self.fail(now, PROTOCOL_VIOLATION),
            }
            if self.closed {
                return;
            }
        }
        if ack_eliciting {
            self.ack_eliciting_unacked += 1;
            if self.ack_eliciting_unacked >= 2 || out_of_order {
                self.ack_deadline = Some(now);
            } else if self.ack_deadline.is_none() {
                self.ack_deadline = Some(now + self.config.max_ack_delay);
            }
        }
    }

    fn on_control_data(&mut self, now: Time, offset: u64, data: Bytes) {
        let end = offset + data.len() as u64;
        if end <= self.ctl_in_off {
            return;
        }
        self.ctl_pending.insert(offset, data);
        while let Some(entry) = self.ctl_pending.first_entry() {
            let k = *entry.key();
            if k > self.ctl_in_off {
                break;
            }
            let v = entry.remove();
            let vend = k + v.len() as u64;
            if vend > self.ctl_in_off {
                self.ctl_in
                    .extend_from_slice(&v[(self.ctl_in_off - k) as usize..]);
                self.ctl_in_off = vend;
            }
        }
        loop {
            match decode_control_frame(&self.ctl_in) {
                Ok((frame, n)) => {
                    self.ctl_in.drain(..n);
                    self.on_control_frame(now, frame);
                    if self.closed {
                        return;
                    }
                }
                Err(crate::wire::Error::Incomplete) => break,
                Err(_) => return self.fail(now, PROTOCOL_VIOLATION),
            }
        }
    }

    fn on_control_frame(&mut self, _now: Time, frame: ControlFrame) {
        match frame {
            ControlFrame::ConnectionClose { error_code } => {
                // Acknowledge the close once, then stop.
                self.ack_deadline = Some(Time::ZERO);
                self.stream_new.clear();
                self.stream_retx.clear();
                self.ctl_lost = RangeSet::new();
                self.ctl_unsent = self.ctl_end();
                self.close_offset = Some(self.ctl_end());
                self.events.push_back(ConnEvent::Closed {
                    error_code,
                    by_peer: true,
                });
                self.peer_closed = true;
            }
            ControlFrame::NewConnectionId {
                sequence,
                retire_prior_to,
                connection_id,
            } => {
                if sequence > self.peer_cid.0 && retire_prior_to > self.peer_cid.0 {
                    self.peer_cid = (sequence, connection_id);
                }
            }
            f => self.events.push_back(ConnEvent::Control(f)),
        }
    }
}

impl Conn {
    fn on_ack(&mut self, now: Time, ranges: &[std::ops::RangeInclusive<u64>], ack_delay: u64) {
        let Some(largest) = ranges.first().map(|r| *r.end()) else {
            return;
        };
        if largest >= self.next_pn {
            return self.fail(now, PROTOCOL_VIOLATION);
        }
        let mut newly_acked = Vec::new();
        for r in ranges {
            newly_acked.extend(self.sent.range(r.clone()).map(|(pn, _)| *pn));
        }
        if newly_acked.is_empty() {
            return;
        }
        if self.largest_acked.is_none_or(|l| largest > l) {
            self.largest_acked = Some(largest);
            if let Some(p) = self.sent.get(&largest) {
                if p.ack_eliciting {
                    let sample = now.since(p.time);
                    let delay = Duration::from_micros(ack_delay << ACK_DELAY_EXPONENT)
                        .min(self.config.max_ack_delay);
                    let adjusted = if sample > delay {
                        sample - delay
                    } else {
                        sample
                    };
                    self.rtt.update(adjusted);
                }
            }
        }
        for pn in newly_acked {
            let p = self.sent.remove(&pn).expect("listed above");
            for f in p.frames {
                if let Retx::Control { offset, len } = f {
                    self.ctl_acked.insert(offset..offset + len as u64);
                }
            }
        }
        self.pto_count = 0;
        self.trim_control();
        self.detect_lost(now);
    }

    fn trim_control(&mut self) {
        // Drop the acknowledged prefix of the send buffer.
        if let Some(first) = self.ctl_acked.iter().next() {
            if first.start <= self.ctl_base && first.end > self.ctl_base {
                let n = (first.end - self.ctl_base) as usize;
                self.ctl_out.drain(..n.min(self.ctl_out.len()));
                self.ctl_base = first.end;
                self.ctl_lost.remove_below(self.ctl_base);
            }
        }
        if let Some(close) = self.close_offset {
            if !self.peer_closed && self.ctl_base >= close && !self.closed {
                self.closed = true;
                self.events.push_back(ConnEvent::Closed {
                    error_code: 0,
                    by_peer: false,
                });
            }
        }
    }

    fn loss_delay(&self) -> Duration {
        let base = self.rtt.latest.max(self.rtt.smoothed);
        (base * 9 / 8).max(Duration::from_millis(1))
    }

    fn detect_lost(&mut self, now: Time) {
        self.loss_time = None;
        let Some(largest) = self.largest_acked else {
            return;
        };
        let delay = self.loss_delay();
        let mut lost = Vec::new();
        for (&pn, p) in self.sent.range(..largest) {
            if largest - pn >= PACKET_THRESHOLD || p.time + delay <= now {
                lost.push(pn);
            } else {
                let t = p.time + delay;
                self.loss_time = Some(self.loss_time.map_or(t, |l: Time| l.min(t)));
            }
        }
        for pn in lost {
            self.on_lost(pn);
        }
    }

    fn on_lost(&mut self, pn: u64) {
        let Some(p) = self.sent.remove(&pn) else {
            return;
        };
        self.stats.packets_lost += 1;
        for f in p.frames {
            match f {
                Retx::Control { offset, len } => {
                    let r = offset..offset + len as u64;
                    for gap in self.ctl_acked.gaps(r) {
                        self.ctl_lost.insert(gap);
                    }
                }
                Retx::Stream(c) => self.stream_retx.push_back(c),
            }
        }
    }

    fn pto(&self) -> Duration {
        let base = self.rtt.smoothed
            + (self.rtt.var * 4).max(Duration::from_millis(1))
            + self.config.max_ack_delay;
        base * (1 << self.pto_count.min(10))
    }

    fn pto_deadline(&self) -> Option<Time> {
        if !self.sent.values().any(|p| p.ack_eliciting) {
            return None;
        }
        self.last_ack_eliciting.map(|t| t + self.pto())
    }

    pub fn timeout(&self) -> Option<Time> {
        if self.closed {
            return None;
        }
        [self.ack_deadline, self.loss_time, self.pto_deadline()]
            .into_iter()
            .flatten()
            .min()
    }

    pub fn handle_timeout(&mut self, now: Time) {
        if self.closed {
            return;
        }
        if self.loss_time.is_some_and(|t| t <= now) {
            self.detect_lost(now);
        }
        if self.pto_deadline().is_some_and(|t| t <= now) {
            // Treat everything in flight as lost and resend it.
            let pns: Vec<u64> = self.sent.keys().copied().collect();
            for pn in pns {
                self.on_lost(pn);
            }
            self.pto_count += 1;
            self.last_ack_eliciting = Some(now);
        }
    }

    fn has_data(&self) -> bool {
        !self.ctl_lost.is_empty()
            || self.ctl_unsent < self.ctl_end()
            || !self.stream_retx.is_empty()
            || !self.stream_new.is_empty()
    }

    fn ack_frame(&self, now: Time) -> Option<PacketFrame> {
        let (_, t) = self.largest_received?;
        let ranges: Vec<_> = self
            .received
            .iter()
            .rev()
            .take(MAX_ACK_RANGES)
            .map(|r| r.start..=r.end - 1)
            .collect();
        let delay = now.since(t).as_micros() as u64 >> ACK_DELAY_EXPONENT;
        Some(PacketFrame::Ack {
            ranges,
            ack_delay: delay,
        })
    }

    /// Next datagram to send, if any.
    pub fn poll_transmit(&mut self, now: Time) -> Option<Vec<u8>> {
        if self.closed {
            return None;
        }
        let ack_due = self.ack_deadline.is_some_and(|t| t <= now);
        if self.peer_closed {
            // One last acknowledgement, sent at once, confirms the close.
            self.closed = true;
            self.ack_deadline?;
        } else if !ack_due && !self.has_data() {
            return None;
        }

        let header = MulticastPacketHeader::new(self.peer_cid.1.clone(), self.next_pn);
        let mut room = self.config.max_datagram_size - header.pn_offset() - header.pn_len - TAG_LEN;
        let mut payload = Vec::new();
        let mut frames = Vec::new();
        let mut ack_eliciting = false;
        let mut carries_stream = false;

        if self.ack_deadline.is_some() || self.peer_closed {
            if let Some(ack) = self.ack_frame(now) {
                let mut buf = Vec::new();
                encode_packet_frame(&mut buf, &ack).expect("ack encodes");
                if buf.len() <= room {
                    room -= buf.len();
                    payload.extend(buf);
                    self.ack_deadline = None;
                    self.ack_eliciting_unacked = 0;
                }
            }
        }

        if !self.peer_closed {
            // Lost control data first, then new control data.
            while room > 8 {
                let (offset, avail) = if let Some(r) = self.ctl_lost.iter().next() {
                    (r.start, r.end - r.start)
                } else if self.ctl_unsent < self.ctl_end() {
                    (self.ctl_unsent, self.ctl_end() - self.ctl_unsent)
                } else {
                    break;
                };
                let hdr = 1 + varint_len(offset).unwrap_or(8) + 2;
                let len = (avail as usize).min(room - hdr);
                let start = (offset - self.ctl_base) as usize;
                let data: Vec<u8> = self.ctl_out.range(start..start + len).copied().collect();
                let f = PacketFrame::Control {
                    offset,
                    data: data.into(),
                };
                let before = payload.len();
                encode_packet_frame(&mut payload, &f).expect("control encodes");
                room -= payload.len() - before;
                let r = offset..offset + len as u64;
                self.ctl_lost.remove(r.clone());
                self.ctl_unsent = self.ctl_unsent.max(r.end);
                frames.push(Retx::Control { offset, len });
                ack_eliciting = true;
            }
            // STREAM data: retransmissions before new data.
            loop {
                let from_retx = !self.stream_retx.is_empty();
                let queue = if from_retx {
                    &mut self.stream_retx
                } else {
                    &mut self.stream_new
                };
                let Some(c) = queue.front_mut() else {
                    break;
                };
                let overhead = stream_frame_overhead(c.stream_id, c.offset, c.data.len());
                if room <= overhead + 16 && !c.data.is_empty() {
                    break;
                }
                if room < overhead {
                    break;
                }
                let len = c.data.len().min(room - overhead);
                let piece = StreamChunk {
                    stream_id: c.stream_id,
                    offset: c.offset,
                    data: c.data.slice(..len),
                    fin: c.fin && len == c.data.len(),
                };
                if len == c.data.len() {
                    queue.pop_front();
                } else {
                    c.data = c.data.slice(len..);
                    c.offset += len as u64;
                }
                let f = PacketFrame::Stream {
                    stream_id: piece.stream_id,
                    offset: piece.offset,
                    data: piece.data.clone(),
                    fin: piece.fin,
                };
                let before = payload.len();
                encode_packet_frame(&mut payload, &f).expect("stream encodes");
                room -= payload.len() - before;
                frames.push(Retx::Stream(piece));
                ack_eliciting = true;
                carries_stream = true;
            }
        }
        if payload.is_empty() {
            return None;
        }

        let pn = self.next_pn;
        self.next_pn += 1;
        let datagram = protect_packet(&self.tx_keys, &self.tx_hp, &header, &payload)
            .expect("datagram within size limit");
        self.sent.insert(
            pn,
            SentPacket {
                time: now,
                ack_eliciting,
                frames,
            },
        );
        if ack_eliciting {
            self.last_ack_eliciting = Some(now);
        }
        self.stats.packets_sent += 1;
        self.stats.bytes_sent += datagram.len() as u64;
        if carries_stream {
            self.stats.stream_bytes_sent += datagram.len() as u64;
        } else {
            self.stats.control_bytes_sent += datagram.len() as u64;
        }
        Some(datagram)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair() -> (Conn, Conn) {
        let a = ChannelId::new(&[0xa1; 8]).unwrap();
        let b = ChannelId::new(&[0xb2; 8]).unwrap();
        let cfg = ConnConfig::default();
        let c = Conn::new(
            cfg.clone(),
            ConnParams {
                local_cid: a.clone(),
                peer_cid: b.clone(),
                tx_secret: vec![1; 32],
                rx_secret: vec![2; 32],
            },
        );
        let s = Conn::new(
            cfg,
            ConnParams {
                local_cid: b,
                peer_cid: a,
                tx_secret: vec![2; 32],
                rx_secret: vec![1; 32],
            },
        );
        (c, s)
    }

    /// Moves datagrams both ways, dropping those for which \`drop\` says so.
    fn pump(
        a: &mut Conn,
        b: &mut Conn,
        mut now: Time,
        until: Time,
        mut drop: impl FnMut(usize) -> bool,
    ) -> Time {
        let mut n = 0;
        while now < until {
            let mut moved = false;
            while let Some(d) = a.poll_transmit(now) {
                n += 1;
                if !drop(n) {
                    b.handle_datagram(now + Duration::from_millis(10), &d);
                }
                moved = true;
            }
            while let Some(d) = b.poll_transmit(now) {
                n += 1;
                if !drop(n) {
                    a.handle_datagram(now + Duration::from_millis(10), &d);
                }
                moved = true;
            }
            if !moved {
                now += Duration::from_millis(5);
                a.handle_timeout(now);
                b.handle_timeout(now);
            }
        }
        now
    }

    fn controls(c: &mut Conn) -> Vec<ControlFrame> {
        let mut out = Vec::new();
        while let Some(e) = c.poll_event() {
            if let ConnEvent::Control(f) = e {
                out.push(f);
            }
        }
        out
    }

    #[test]
    fn ordered_control_under_loss() {
        let (mut c, mut s) = pair();
        for i in 0..200 {
            c.send_control(&ControlFrame::MaxData(i));
        }
        pump(&mut c, &mut s, Time::ZERO, Time::from_millis(5000), |n| {
            n % 3 == 0
        });
        let got = controls(&mut s);
        let want: Vec<_> = (0..200).map(ControlFrame::MaxData).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn stream_data_survives_loss() {
        let (mut c, mut s) = pair();
        let data = Bytes::from((0..50_000u32).map(|i| i as u8).collect::<Vec<_>>());
        s.send_stream(StreamChunk {
            stream_id: 3,
            offset: 0,
            data: data.clone(),
            fin: true,
        });
        pump(&mut s, &mut c, Time::ZERO, Time::from_millis(5000), |n| {
            n % 4 == 1
        });
        let mut got = crate::channel::StreamSpaceMap::new();
        let mut out = Vec::new();
        while let Some(e) = c.poll_event() {
            if let ConnEvent::Stream(ch) = e {
                out.extend(
                    got.deliver(
                        3,
                        ch.offset,
                        &ch.data,
                        ch.fin,
                        crate::channel::Origin::Unicast,
                    )
                    .unwrap(),
                );
            }
        }
        assert_eq!(out, data);
        assert!(s.stats().packets_lost > 0);
    }

    #[test]
    fn close_is_delivered() {
        let (mut c, mut s) = pair();
        c.close(NO_ERROR);
        pump(&mut c, &mut s, Time::ZERO, Time::from_millis(2000), |n| {
            n == 1
        });
        assert!(c.is_closed());
        assert!(s.is_closed());
        assert!(matches!(
            s.poll_event(),
            Some(ConnEvent::Closed { by_peer: true, .. })
        ));
    }

    #[test]
    fn foreign_cid_ignored() {
        let (mut c, mut s) = pair();
        c.send_control(&ControlFrame::MaxData(1));
        let d = c.poll_transmit(Time::ZERO).unwrap();
        // Delivered to the sender itself: wrong identifier.
        c.handle_datagram(Time::ZERO, &d);
        assert!(c.poll_event().is_none());
        s.handle_datagram(Time::ZERO, &d);
        assert_eq!(controls(&mut s), vec![ControlFrame::MaxData(1)]);
    }

    #[test]
    fn cid_rotation() {
        let (mut c, mut s) = pair();
        let new = ChannelId::new(&[0xcc; 8]).unwrap();
        c.rotate_local_cid(new.clone());
        pump(&mut c, &mut s, Time::ZERO, Time::from_millis(200), |_| {
            false
        });
        assert!(c.is_local_cid(&new));
        assert!(!c.is_local_cid(&ChannelId::new(&[0xa1; 8]).unwrap()));
        s.send_control(&ControlFrame::MaxData(9));
        pump(
            &mut s,
            &mut c,
            Time::from_millis(200),
            Time::from_millis(400),
            |_| false,
        );
        assert_eq!(controls(&mut c), vec![ControlFrame::MaxData(9)]);
    }
}
