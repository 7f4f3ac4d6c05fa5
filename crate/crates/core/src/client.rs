// Licensed under the Apache License, Version 2.0 <LICENSE-APACHE or
// http://www.apache.org/licenses/LICENSE-2.0> or the MIT license
// <LICENSE-MIT or http://opensource.org/licenses/MIT>, at your
// option. This file may not be copied, modified, or distributed
// except according to those terms.

//! The client endpoint.
//!
//! Multicast datagrams go through: channel lookup, header unprotection,
//! duplicate check, integrity verification, packet number recording,
//! decryption, then frame dispatch exactly as for unicast. Datagrams whose
//! digest or key has not arrived yet are held in a small buffer. A packet
//! number is recorded only once its datagram verified, so forged datagrams
//! cannot suppress the authentic packet with the same number.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::net::IpAddr;
use std::time::Duration;

use bytes::Bytes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ring::digest;
use serde::{Deserialize, Serialize};

use crate::channel::{
    emits_state, reason, transition, ChannelDescriptor, ChannelEvent, ChannelState, Origin,
    PacketNumberSpace, Received, StreamSpaceMap,
};
use crate::conn::{
    Conn, ConnConfig, ConnEvent, ConnParams, StreamChunk, NO_ERROR, PROTOCOL_VIOLATION,
};
use crate::crypto::{
    derive_header_key, open_payload, unprotect_header, ChannelSecret, HeaderKey, IntegrityStore,
    KeySchedule, Provenance, UnprotectedHeader,
};
use crate::ranges::RangeSet;
use crate::trace::{Record, Verdict};
use crate::wire::{
    decode_packet_frame, Announce, ChannelId, ClientLimits, ControlFrame, McFrame, PacketFrame,
    PlainHeader, TransportParams,
};
use crate::Time;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowPolicy {
    /// Raise MAX_DATA to keep up with multicast.
    Extend,
    /// Drop the packet and leave the channel; the server falls back.
    Leave,
}

#[derive(Clone, Debug)]
pub struct FlowConfig {
    pub policy: FlowPolicy,
    pub initial_max_data: u64,
    /// Credit kept ahead of consumed data.
    pub window: u64,
    /// Extra credit added when multicast data overruns the limit.
    pub increment: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            policy: FlowPolicy::Extend,
            initial_max_data: 1 << 20,
            window: 1 << 20,
            increment: 256 << 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowDecision {
    Within,
    Extend(u64),
    Leave,
}

/// Connection-level flow control over all stream data, however it arrives.
#[derive(Clone, Debug)]
pub struct FlowControl {
    pub policy: FlowPolicy,
    pub max_data: u64,
    pub received: u64,
    pub consumed: u64,
    pub window: u64,
    pub increment: u64,
}

impl FlowControl {
    pub fn new(c: &FlowConfig) -> Self {
        FlowControl {
            policy: c.policy,
            max_data: c.initial_max_data,
            received: 0,
            consumed: 0,
            window: c.window,
            increment: c.increment,
        }
    }

    /// Decides what to do with `incoming` new bytes. Unicast data always
    /// extends: the server bounds it from its own, possibly stale, view.
    pub fn adapt(&mut self, incoming: u64, multicast: bool) -> FlowDecision {
        let need = self.received + incoming;
        if need <= self.max_data {
            FlowDecision::Within
        } else if !multicast || self.policy == FlowPolicy::Extend {
            self.max_data = need + self.increment;
            FlowDecision::Extend(self.max_data)
        } else {
            FlowDecision::Leave
        }
    }

    pub fn commit(&mut self, incoming: u64) {
        self.received += incoming;
    }

    /// Records application consumption; returns a new limit to advertise.
    pub fn on_consumed(&mut self, n: u64) -> Option<u64> {
        self.consumed += n;
        if self.max_data - self.consumed.min(self.max_data) < self.window / 2 {
            let new = self.consumed + self.window;
            if new > self.max_data {
                self.max_data = new;
                return Some(new);
            }
        }
        None
    }
}

#[derive(Clone, Debug)]
pub struct ClientConfig {
    /// Node number, used in trace records.
    pub id: usize,
    pub limits: ClientLimits,
    /// Whether the client offers the multicast extension at all.
    pub multicast: bool,
    pub flow: FlowConfig,
    pub ack_bundling: Duration,
    pub hold_packets: usize,
    pub hold_time: Duration,
    /// Spurious or undecryptable datagrams per second that make the client
    /// leave a channel.
    pub spurious_per_sec: usize,
    pub plausible_window: u64,
    pub conn: ConnConfig,
    pub seed: u64,
}

impl ClientConfig {
    pub fn new(id: usize, limits: ClientLimits) -> Self {
        ClientConfig {
            id,
            limits,
            multicast: true,
            flow: FlowConfig::default(),
            ack_bundling: Duration::from_millis(25),
            hold_packets: 64,
            hold_time: Duration::from_secs(2),
            spurious_per_sec: 50,
            plausible_window: 4096,
            conn: ConnConfig::default(),
            seed: id as u64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JoinDecision {
    Accept,
    Decline(u64),
}

/// The client's verdict on a join request, given the rates of the channels
/// it is currently a member of.
pub fn decide_join(
    limits: &ClientLimits,
    member_rates: &[u64],
    desc: &ChannelDescriptor,
) -> JoinDecision {
    let a = &desc.announce;
    let family_ok = if a.group_ip.is_ipv6() {
        limits.allow_ipv6
    } else {
        limits.allow_ipv4
    };
    if !family_ok {
        return JoinDecision::Decline(reason::FAMILY_UNSUPPORTED);
    }
    if !limits.supported_hash_ids.contains(&a.hash_id)
        || !limits.supported_aead_ids.contains(&a.aead_id)
    {
        return JoinDecision::Decline(reason::ALGORITHM_UNSUPPORTED);
    }
    let used: u64 = member_rates.iter().sum();
    if used + a.max_rate_kbps > limits.max_aggregate_rate_kbps {
        return JoinDecision::Decline(reason::RATE_EXCEEDED);
    }
    if member_rates.len() as u64 + 1 > limits.max_channels_joined {
        return JoinDecision::Decline(reason::CHANNEL_LIMIT);
    }
    JoinDecision::Accept
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ClientOutput {
    /// A datagram for the server.
    Transmit(Vec<u8>),
    JoinGroup {
        source: IpAddr,
        group: IpAddr,
    },
    LeaveGroup {
        source: IpAddr,
        group: IpAddr,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum HoldKind {
    Digest,
    Key { keys_seen: usize },
}

#[derive(Debug)]
struct Held {
    header: UnprotectedHeader,
    datagram: Bytes,
    since: Time,
    tag: u64,
    kind: HoldKind,
}

#[derive(Debug)]
struct ChannelEntry {
    desc: ChannelDescriptor,
    state: ChannelState,
    hp: HeaderKey,
    keys: KeySchedule,
    integrity: IntegrityStore,
    space: PacketNumberSpace,
    held: VecDeque<Held>,
    ack_pending: RangeSet,
    ack_deadline: Option<Time>,
    ack_first: Time,
    spurious: VecDeque<Time>,
}

impl ChannelEntry {
    fn new(desc: ChannelDescriptor) -> Self {
        let hp = derive_header_key(&desc.announce.header_secret, desc.aead);
        let integrity = IntegrityStore::new(desc.hash);
        ChannelEntry {
            desc,
            state: ChannelState::Announced,
            hp,
            keys: KeySchedule::new(),
            integrity,
            space: PacketNumberSpace::new(),
            held: VecDeque::new(),
            ack_pending: RangeSet::new(),
            ack_deadline: None,
            ack_first: Time::ZERO,
            spurious: VecDeque::new(),
        }
    }

    fn plausible(&self, pn: u64, window: u64) -> bool {
        match self.space.largest().or_else(|| self.integrity.first()) {
            Some(r) => pn + window >= r && pn <= r + window,
            None => true,
        }
    }
}

/// Digest of one fully received stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamDigest {
    pub len: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, Default)]
pub struct ClientStats {
    pub verdicts: BTreeMap<Verdict, u64>,
    /// Packets decrypted per channel.
    pub decrypted: BTreeMap<ChannelId, u64>,
    pub max_data_updates: u64,
}

pub struct Client {
    config: ClientConfig,
    limits: ClientLimits,
    conn: Conn,
    server_multicast: bool,
    channels: BTreeMap<ChannelId, ChannelEntry>,
    streams: StreamSpaceMap,
    stream_high: HashMap<u64, u64>,
    completed: BTreeMap<u64, StreamDigest>,
    flow: FlowControl,
    outputs: VecDeque<ClientOutput>,
    records: Vec<Record>,
    stats: ClientStats,
    rng: ChaCha8Rng,
    disconnected: bool,
}

impl Client {
    pub fn new(config: ClientConfig, params: ConnParams) -> Self {
        let mut conn = Conn::new(config.conn.clone(), params);
        let flow = FlowControl::new(&config.flow);
        conn.send_control(&ControlFrame::Hello(TransportParams {
            multicast_supported: false,
            client_limits: config.multicast.then(|| config.limits.clone()),
            initial_max_data: Some(flow.max_data),
        }));
        let mut records = Vec::new();
        if config.multicast {
            records.push(Record::Limits {
                c: config.id,
                limits: config.limits.clone(),
            });
        }
        Client {
            limits: config.limits.clone(),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0xc1_1e47),
            config,
            conn,
            server_multicast: false,
            channels: BTreeMap::new(),
            streams: StreamSpaceMap::new(),
            stream_high: HashMap::new(),
            completed: BTreeMap::new(),
            flow,
            outputs: VecDeque::new(),
            records,
            stats: ClientStats::default(),
            disconnected: false,
        }
    }

    pub fn id(&self) -> usize {
        self.config.id
    }

    pub fn limits(&self) -> &ClientLimits {
        &self.limits
    }

    pub fn server_supports_multicast(&self) -> bool {
        self.server_multicast
    }

    pub fn channel_state(&self, id: &ChannelId) -> Option<ChannelState> {
        self.channels.get(id).map(|e| e.state)
    }

    pub fn channel_states(&self) -> impl Iterator<Item = (&ChannelId, ChannelState)> {
        self.channels.iter().map(|(k, e)| (k, e.state))
    }

    pub fn key_schedule(&self, id: &ChannelId) -> Option<&KeySchedule> {
        self.channels.get(id).map(|e| &e.keys)
    }

    pub fn integrity(&self, id: &ChannelId) -> Option<&IntegrityStore> {
        self.channels.get(id).map(|e| &e.integrity)
    }

    pub fn stats(&self) -> &ClientStats {
        &self.stats
    }

    pub fn conn(&self) -> &Conn {
        &self.conn
    }

    pub fn flow(&self) -> &FlowControl {
        &self.flow
    }

    pub fn completed_streams(&self) -> &BTreeMap<u64, StreamDigest> {
        &self.completed
    }

    /// Application bytes delivered, by the origin that completed them.
    pub fn bytes_from(&self, origin: &Origin) -> u64 {
        self.streams.bytes_from(origin)
    }

    /// Sum of nominal rates of channels the client is, or is becoming, a
    /// member of.
    pub fn member_rate_kbps(&self) -> u64 {
        self.member_rates().iter().sum()
    }

    fn member_rates(&self) -> Vec<u64> {
        self.channels
            .values()
            .filter(|e| e.state.is_member())
            .map(|e| e.desc.max_rate_kbps())
            .collect()
    }

    pub fn drain_records(&mut self) -> std::vec::Drain<'_, Record> {
        self.records.drain(..)
    }

    pub fn is_closed(&self) -> bool {
        self.conn.is_closed()
    }

    /// Closes the unicast connection. Group memberships are left untouched.
    pub fn disconnect(&mut self, _now: Time) {
        if !self.disconnected {
            self.disconnected = true;
            self.conn.close(NO_ERROR);
            self.records.push(Record::Disconnect { c: self.config.id });
        }
    }

    fn protocol_violation(&mut self, what: &str) {
        log::warn!("client {}: protocol violation: {what}", self.config.id);
        self.conn.close(PROTOCOL_VIOLATION);
    }

    fn note(&mut self, now: Time, ch: &ChannelId, pn: Option<u64>, v: Verdict, dl: u64, tag: u64) {
        *self.stats.verdicts.entry(v).or_default() += 1;
        self.records.push(Record::Rx {
            c: self.config.id,
            ch: ch.clone(),
            pn,
            v,
            dl,
            tag,
            inj: false,
        });
        if !v.is_spurious() {
            return;
        }
        let limit = self.config.spurious_per_sec;
        let Some(e) = self.channels.get_mut(ch) else {
            return;
        };
        e.spurious.push_back(now);
        while e
            .spurious
            .front()
            .is_some_and(|t| now.since(*t) >= Duration::from_secs(1))
        {
            e.spurious.pop_front();
        }
        if e.spurious.len() > limit && e.state.is_member() {
            self.leave(now, ch, reason::SPURIOUS_TRAFFIC);
        }
    }

    /// Applies a state machine event and reports it. Illegal events close
    /// the connection.
    fn apply(&mut self, ch: &ChannelId, event: ChannelEvent, reason: u64) -> bool {
        let Some(e) = self.channels.get_mut(ch) else {
            return false;
        };
        let old = e.state;
        let new = match transition(old, event) {
            Ok(s) => s,
            Err(err) => {
                self.protocol_violation(&err.to_string());
                return false;
            }
        };
        e.state = new;
        self.records.push(Record::Transition {
            c: self.config.id,
            ch: ch.clone(),
            old: Some(old),
            event,
            new,
        });
        if emits_state(old, event, new) {
            self.conn.send_control(&ControlFrame::Mc(McFrame::State {
                channel_id: ch.clone(),
                new_state: new,
                reason_code: reason,
            }));
            self.records.push(Record::StateTx {
                c: self.config.id,
                ch: ch.clone(),
                state: new,
                reason,
            });
        }
        true
    }

    fn group_of(&self, ch: &ChannelId) -> Option<(IpAddr, IpAddr)> {
        self.channels
            .get(ch)
            .map(|e| (e.desc.announce.source_ip, e.desc.announce.group_ip))
    }

    /// Client-initiated leave.
    fn leave(&mut self, now: Time, ch: &ChannelId, reason: u64) {
        self.flush_channel_ack(now, ch);
        if self.apply(ch, ChannelEvent::Left, reason) {
            self.drop_membership(ch);
        }
    }

    fn drop_membership(&mut self, ch: &ChannelId) {
        if let Some((source, group)) = self.group_of(ch) {
            self.outputs
                .push_back(ClientOutput::LeaveGroup { source, group });
        }
        if let Some(e) = self.channels.get_mut(ch) {
            e.held.clear();
            e.ack_pending = RangeSet::new();
            e.ack_deadline = None;
        }
    }

    /// Replaces the declared limits and leaves channels, highest rate first,
    /// until the joined set complies.
    pub fn update_limits(&mut self, now: Time, new: ClientLimits) {
        if new.validate().is_err() {
            return;
        }
        self.limits = new.clone();
        self.conn.send_control(&ControlFrame::Mc(McFrame::Limits {
            limits: new.clone(),
        }));
        self.records.push(Record::Limits {
            c: self.config.id,
            limits: new,
        });
        loop {
            let mut members: Vec<(u64, ChannelId)> = self
                .channels
                .iter()
                .filter(|(_, e)| e.state.is_member())
                .map(|(k, e)| (e.desc.max_rate_kbps(), k.clone()))
                .collect();
            let sum: u64 = members.iter().map(|m| m.0).sum();
            if sum <= self.limits.max_aggregate_rate_kbps
                && members.len() as u64 <= self.limits.max_channels_joined
            {
                break;
            }
            members.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
            let (_, id) = members.remove(0);
            self.leave(now, &id, reason::LIMITS_UPDATE);
        }
    }

    pub fn handle_datagram(&mut self, now: Time, datagram: &[u8], tag: u64) {
        let Ok(plain) = PlainHeader::parse(datagram) else {
            return;
        };
        let id = plain.channel_id;
        match self.channels.get(&id) {
            Some(e) if e.state.is_member() => {
                self.on_multicast(now, &id, Bytes::copy_from_slice(datagram), tag);
            }
            _ if self.conn.is_local_cid(&id) => {
                self.conn.handle_datagram(now, datagram);
                self.process_conn_events(now);
            }
            Some(_) => self.note(now, &id, None, Verdict::Unmatched, 0, tag),
            None => {}
        }
    }

    fn on_multicast(&mut self, now: Time, ch: &ChannelId, d: Bytes, tag: u64) {
        let window = self.config.plausible_window;
        let e = self.channels.get_mut(ch).expect("member channel");
        let header = match unprotect_header(&e.hp, &d, e.space.largest()) {
            Ok(h) => h,
            Err(_) => return self.note(now, ch, None, Verdict::Malformed, 0, tag),
        };
        let pn = header.packet_number;
        if e.space.contains(pn) {
            return self.note(now, ch, Some(pn), Verdict::Duplicate, 0, tag);
        }
        match e.integrity.verify(pn, &d) {
            crate::crypto::Verdict::Mismatch => {
                self.note(now, ch, Some(pn), Verdict::Mismatch, 0, tag)
            }
            crate::crypto::Verdict::Unknown => {
                if e.plausible(pn, window) {
                    let held = Held {
                        header,
                        datagram: d,
                        since: now,
                        tag,
                        kind: HoldKind::Digest,
                    };
                    self.hold(now, ch, held);
                    self.note(now, ch, Some(pn), Verdict::Unknown, 0, tag);
                } else {
                    self.note(now, ch, Some(pn), Verdict::Implausible, 0, tag);
                }
            }
            crate::crypto::Verdict::Verified => {
                self.accept_verified(now, ch, header, d, tag);
                self.process_held(now, ch);
            }
        }
    }

    fn hold(&mut self, now: Time, ch: &ChannelId, held: Held) {
        let cap = self.config.hold_packets;
        let e = self.channels.get_mut(ch).expect("member channel");
        e.held.push_back(held);
        if e.held.len() > cap {
            let old = e.held.pop_front().expect("non-empty");
            self.note(
                now,
                ch,
                Some(old.header.packet_number),
                Verdict::Evicted,
                0,
                old.tag,
            );
        }
    }

    fn accept_verified(
        &mut self,
        now: Time,
        ch: &ChannelId,
        header: UnprotectedHeader,
        d: Bytes,
        tag: u64,
    ) {
        let e = self.channels.get_mut(ch).expect("member channel");
        let pn = header.packet_number;
        if e.space.record(pn) == Received::Duplicate {
            return self.note(now, ch, Some(pn), Verdict::Duplicate, 0, tag);
        }
        self.try_decrypt(now, ch, header, d, tag, now);
    }

    /// Decrypts and dispatches, or holds the packet until a key arrives.
    fn try_decrypt(
        &mut self,
        now: Time,
        ch: &ChannelId,
        header: UnprotectedHeader,
        d: Bytes,
        tag: u64,
        since: Time,
    ) {
        let e = self.channels.get_mut(ch).expect("member channel");
        let pn = header.packet_number;
        let payload = e
            .keys
            .select(pn)
            .and_then(|k| open_payload(k, &header, &d).ok());
        match payload {
            Some(p) => {
                *self.stats.decrypted.entry(ch.clone()).or_default() += 1;
                self.dispatch(now, ch, pn, &p, tag);
            }
            None => {
                let keys_seen = e.keys.len();
                let held = Held {
                    header,
                    datagram: d,
                    since,
                    tag,
                    kind: HoldKind::Key { keys_seen },
                };
                self.hold(now, ch, held);
                self.note(now, ch, Some(pn), Verdict::NoKey, 0, tag);
            }
        }
    }

    /// Retries held packets after digests or keys were added.
    fn process_held(&mut self, now: Time, ch: &ChannelId) {
        loop {
            let Some(e) = self.channels.get_mut(ch) else {
                return;
            };
            if !e.state.is_member() {
                return;
            }
            let ready = e.held.iter().position(|h| match h.kind {
                HoldKind::Digest => e.integrity.contains(h.header.packet_number),
                HoldKind::Key { keys_seen } => e.keys.len() != keys_seen,
            });
            let Some(i) = ready else {
                return;
            };
            let h = e.held.remove(i).expect("position is valid");
            let pn = h.header.packet_number;
            match h.kind {
                HoldKind::Digest => {
                    if e.space.contains(pn) {
                        self.note(now, ch, Some(pn), Verdict::Duplicate, 0, h.tag);
                        continue;
                    }
                    match e.integrity.verify(pn, &h.datagram) {
                        crate::crypto::Verdict::Verified => {
                            self.accept_verified(now, ch, h.header, h.datagram, h.tag)
                        }
                        _ => self.note(now, ch, Some(pn), Verdict::Mismatch, 0, h.tag),
                    }
                }
                HoldKind::Key { .. } => {
                    self.try_decrypt(now, ch, h.header, h.datagram, h.tag, h.since)
                }
            }
        }
    }

    fn stream_increment(&self, frames: &[PacketFrame]) -> u64 {
        let mut high: HashMap<u64, u64> = HashMap::new();
        for f in frames {
            if let PacketFrame::Stream {
                stream_id,
                offset,
                data,
                ..
            } = f
            {
                let end = offset + data.len() as u64;
                let h = high
                    .entry(*stream_id)
                    .or_insert_with(|| self.stream_high.get(stream_id).copied().unwrap_or(0));
                *h = (*h).max(end);
            }
        }
        high.iter()
            .map(|(id, h)| h - self.stream_high.get(id).copied().unwrap_or(0))
            .sum()
    }

    fn commit_streams(&mut self, frames: &[PacketFrame]) {
        for f in frames {
            if let PacketFrame::Stream {
                stream_id,
                offset,
                data,
                ..
            } = f
            {
                let h = self.stream_high.entry(*stream_id).or_default();
                *h = (*h).max(offset + data.len() as u64);
            }
        }
    }

    fn deliver_stream(
        &mut self,
        stream_id: u64,
        offset: u64,
        data: &[u8],
        fin: bool,
        origin: Origin,
    ) -> u64 {
        match self.streams.deliver(stream_id, offset, data, fin, origin) {
            Ok(out) => {
                let n = out.len() as u64;
                if self.streams.is_complete(stream_id) && !self.completed.contains_key(&stream_id) {
                    let all = self.streams.data(stream_id).unwrap_or_default();
                    let d = StreamDigest {
                        len: all.len() as u64,
                        sha256: hex::encode(digest::digest(&digest::SHA256, all)),
                    };
                    self.records.push(Record::StreamDone {
                        c: self.config.id,
                        stream: stream_id,
                        len: d.len,
                        sha256: d.sha256.clone(),
                    });
                    self.completed.insert(stream_id, d);
                    self.streams.release(stream_id);
                }
                n
            }
            Err(e) => {
                self.protocol_violation(&e.to_string());
                0
            }
        }
    }

    fn consumed(&mut self, n: u64) {
        if let Some(m) = self.flow.on_consumed(n) {
            self.stats.max_data_updates += 1;
            self.conn.send_control(&ControlFrame::MaxData(m));
        }
    }

    fn dispatch(&mut self, now: Time, ch: &ChannelId, pn: u64, payload: &[u8], tag: u64) {
        let mut frames = Vec::new();
        let mut rest = payload;
        while !rest.is_empty() {
            match decode_packet_frame(rest) {
                Ok((f, n)) => {
                    frames.push(f);
                    rest = &rest[n..];
                }
                Err(_) => return self.note(now, ch, Some(pn), Verdict::Malformed, 0, tag),
            }
        }
        let incoming = self.stream_increment(&frames);
        match self.flow.adapt(incoming, true) {
            FlowDecision::Within => {}
            FlowDecision::Extend(m) => {
                self.stats.max_data_updates += 1;
                self.conn.send_control(&ControlFrame::MaxData(m));
            }
            FlowDecision::Leave => {
                self.note(now, ch, Some(pn), Verdict::FlowBlocked, 0, tag);
                return self.leave(now, ch, reason::FLOW_CONTROL);
            }
        }
        self.flow.commit(incoming);
        self.commit_streams(&frames);

        let origin = Origin::Channel(ch.clone());
        let mut dl = 0;
        let mut conflict = false;
        let mut new_material = false;
        for f in frames {
            match f {
                PacketFrame::Stream {
                    stream_id,
                    offset,
                    data,
                    fin,
                } => dl += self.deliver_stream(stream_id, offset, &data, fin, origin.clone()),
                PacketFrame::Mc(McFrame::Integrity {
                    channel_id,
                    start_packet_number,
                    digests,
                }) if channel_id == *ch => {
                    let e = self.channels.get_mut(ch).expect("member channel");
                    match e.integrity.add(
                        start_packet_number,
                        &digests,
                        Some(Provenance::Packet(pn)),
                    ) {
                        Ok(n) => {
                            new_material |= n > 0;
                            self.records.push(Record::Digests {
                                c: self.config.id,
                                ch: ch.clone(),
                                start: start_packet_number,
                                n: digests.len() as u64,
                                via_pn: Some(pn),
                            });
                        }
                        Err(_) => conflict = true,
                    }
                }
                PacketFrame::Mc(McFrame::Key {
                    channel_id,
                    from_packet_number,
                    secret,
                }) if channel_id == *ch => {
                    new_material |= self.install_key(ch, from_packet_number, &secret);
                }
                _ => {}
            }
        }
        self.note(now, ch, Some(pn), Verdict::Verified, dl, tag);
        self.consumed(dl);
        if conflict {
            return self.leave(now, ch, reason::INTEGRITY_CONFLICT);
        }
        let bundling = self.config.ack_bundling;
        let e = self.channels.get_mut(ch).expect("member channel");
        if !e.state.is_member() {
            return;
        }
        e.ack_pending.insert_one(pn);
        if e.ack_deadline.is_none() {
            e.ack_deadline = Some(now + bundling);
            e.ack_first = now;
        }
        if e.state == ChannelState::JoinPending {
            self.apply(ch, ChannelEvent::PacketsFlowing, reason::NONE);
        }
        if new_material {
            self.process_held(now, ch);
        }
    }

    fn install_key(&mut self, ch: &ChannelId, from: u64, secret: &[u8]) -> bool {
        let Ok(s) = ChannelSecret::new(secret, from) else {
            return false;
        };
        let e = self.channels.get_mut(ch).expect("known channel");
        let aead = e.desc.aead;
        if e.keys.insert(&s, aead) {
            self.records.push(Record::Key {
                c: self.config.id,
                ch: ch.clone(),
                from,
            });
            true
        } else {
            false
        }
    }

    fn process_conn_events(&mut self, now: Time) {
        while let Some(ev) = self.conn.poll_event() {
            match ev {
                ConnEvent::Control(ControlFrame::Hello(tp)) => {
                    self.server_multicast = tp.multicast_supported;
                }
                ConnEvent::Control(ControlFrame::Mc(f)) => self.on_unicast_frame(now, f),
                ConnEvent::Control(_) => {}
                ConnEvent::Stream(StreamChunk {
                    stream_id,
                    offset,
                    data,
                    fin,
                }) => {
                    let frame = PacketFrame::Stream {
                        stream_id,
                        offset,
                        data: data.clone(),
                        fin,
                    };
                    let incoming = self.stream_increment(std::slice::from_ref(&frame));
                    if let FlowDecision::Extend(m) = self.flow.adapt(incoming, false) {
                        self.stats.max_data_updates += 1;
                        self.conn.send_control(&ControlFrame::MaxData(m));
                    }
                    self.flow.commit(incoming);
                    self.commit_streams(std::slice::from_ref(&frame));
                    let dl = self.deliver_stream(stream_id, offset, &data, fin, Origin::Unicast);
                    self.consumed(dl);
                }
                ConnEvent::Closed { error_code, .. } => {
                    self.records.push(Record::ConnClosed {
                        c: self.config.id,
                        code: error_code,
                    });
                }
            }
        }
    }

    fn on_unicast_frame(&mut self, now: Time, f: McFrame) {
        let id = self.config.id;
        match f {
            McFrame::Announce(a) => self.on_announce(a),
            McFrame::Join { channel_id } => {
                let Some(e) = self.channels.get(&channel_id) else {
                    return self.protocol_violation("join for unknown channel");
                };
                if e.state.is_member() {
                    return self.protocol_violation("join for member channel");
                }
                let members = self.member_rates();
                match decide_join(&self.limits, &members, &e.desc) {
                    JoinDecision::Accept => {
                        if self.apply(&channel_id, ChannelEvent::JoinRequested, reason::NONE) {
                            let (source, group) = self.group_of(&channel_id).expect("known");
                            self.outputs
                                .push_back(ClientOutput::JoinGroup { source, group });
                        }
                    }
                    JoinDecision::Decline(r) => {
                        self.apply(&channel_id, ChannelEvent::JoinDeclined, r);
                    }
                }
            }
            McFrame::Leave {
                channel_id,
                reason_code,
            } => {
                let Some(e) = self.channels.get(&channel_id) else {
                    return self.protocol_violation("leave for unknown channel");
                };
                let was_member = e.state.is_member();
                if was_member {
                    self.flush_channel_ack(now, &channel_id);
                }
                if self.apply(&channel_id, ChannelEvent::LeaveRequested, reason_code) && was_member
                {
                    self.drop_membership(&channel_id);
                }
            }
            McFrame::Retire { channel_id } => {
                if !self.channels.contains_key(&channel_id) {
                    return self.protocol_violation("retire for unknown channel");
                }
                if self.apply(&channel_id, ChannelEvent::Retire, reason::NONE) {
                    self.channels.remove(&channel_id);
                }
            }
            McFrame::Key {
                channel_id,
                from_packet_number,
                secret,
            } => {
                if !self.channels.contains_key(&channel_id) {
                    return self.protocol_violation("key for unknown channel");
                }
                if self.install_key(&channel_id, from_packet_number, &secret) {
                    self.process_held(now, &channel_id);
                }
            }
            McFrame::Integrity {
                channel_id,
                start_packet_number,
                digests,
            } => {
                let Some(e) = self.channels.get_mut(&channel_id) else {
                    return self.protocol_violation("integrity for unknown channel");
                };
                match e
                    .integrity
                    .add(start_packet_number, &digests, Some(Provenance::Unicast))
                {
                    Ok(_) => {
                        self.records.push(Record::Digests {
                            c: id,
                            ch: channel_id.clone(),
                            start: start_packet_number,
                            n: digests.len() as u64,
                            via_pn: None,
                        });
                        self.process_held(now, &channel_id);
                    }
                    Err(crate::crypto::Error::IntegrityConflict(_)) => {
                        if e.state.is_member() {
                            self.leave(now, &channel_id, reason::INTEGRITY_CONFLICT);
                        }
                    }
                    Err(_) => self.protocol_violation("digest size"),
                }
            }
            McFrame::State { .. } | McFrame::Ack { .. } | McFrame::Limits { .. } => {
                self.protocol_violation("client-only frame from server")
            }
        }
    }

    fn on_announce(&mut self, a: Announce) {
        let id = a.channel_id.clone();
        if let Some(e) = self.channels.get(&id) {
            if e.desc.announce != a {
                return self.protocol_violation("announce changed");
            }
            self.apply(&id, ChannelEvent::Announce, reason::NONE);
            return;
        }
        let desc = match ChannelDescriptor::new(a) {
            Ok(d) => d,
            Err(e) => {
                log::info!("client {}: ignoring announce: {e}", self.config.id);
                return;
            }
        };
        if self.conn.is_local_cid(&id) {
            let mut raw = [0u8; 8];
            loop {
                self.rng.fill(&mut raw);
                let new = ChannelId::new(&raw).expect("8 bytes");
                if new != id {
                    self.conn.rotate_local_cid(new);
                    break;
                }
            }
        }
        self.records.push(Record::Announced {
            c: self.config.id,
            ch: id.clone(),
            rate_kbps: desc.max_rate_kbps(),
        });
        self.records.push(Record::Transition {
            c: self.config.id,
            ch: id.clone(),
            old: None,
            event: ChannelEvent::Announce,
            new: ChannelState::Announced,
        });
        self.channels.insert(id, ChannelEntry::new(desc));
    }

    fn flush_channel_ack(&mut self, now: Time, ch: &ChannelId) {
        let Some(e) = self.channels.get_mut(ch) else {
            return;
        };
        e.ack_deadline = None;
        if e.ack_pending.is_empty() {
            return;
        }
        let pending = std::mem::take(&mut e.ack_pending);
        let delay = now.since(e.ack_first).as_micros() as u64;
        let ranges: Vec<_> = pending.iter().rev().map(|r| r.start..=r.end - 1).collect();
        self.records.push(Record::AckTx {
            c: self.config.id,
            ch: ch.clone(),
            ranges: ranges.iter().map(|r| (*r.start(), *r.end())).collect(),
        });
        self.conn.send_control(&ControlFrame::Mc(McFrame::Ack {
            channel_id: ch.clone(),
            ack_ranges: ranges,
            ack_delay: delay,
        }));
    }

    /// Emits one MC_ACK per channel whose bundling delay has passed.
    pub fn flush_acks(&mut self, now: Time) {
        let due: Vec<ChannelId> = self
            .channels
            .iter()
            .filter(|(_, e)| e.ack_deadline.is_some_and(|t| t <= now))
            .map(|(k, _)| k.clone())
            .collect();
        for ch in due {
            self.flush_channel_ack(now, &ch);
        }
    }

    fn expire_held(&mut self, now: Time) {
        let hold_time = self.config.hold_time;
        let ids: Vec<ChannelId> = self.channels.keys().cloned().collect();
        for ch in ids {
            while let Some(e) = self.channels.get_mut(&ch) {
                let i = e.held.iter().position(|h| now.since(h.since) >= hold_time);
                let Some(i) = i else {
                    break;
                };
                let h = e.held.remove(i).expect("position is valid");
                self.note(
                    now,
                    &ch,
                    Some(h.header.packet_number),
                    Verdict::Expired,
                    0,
                    h.tag,
                );
            }
        }
    }

    pub fn poll_timeout(&self) -> Option<Time> {
        let hold = self.config.hold_time;
        let channel = self
            .channels
            .values()
            .flat_map(|e| {
                e.ack_deadline
                    .into_iter()
                    .chain(e.held.iter().map(|h| h.since + hold))
            })
            .min();
        [self.conn.timeout(), channel].into_iter().flatten().min()
    }

    pub fn handle_timeout(&mut self, now: Time) {
        self.conn.handle_timeout(now);
        self.process_conn_events(now);
        self.flush_acks(now);
        self.expire_held(now);
    }

    pub fn poll_output(&mut self, now: Time) -> Option<ClientOutput> {
        if let Some(o) = self.outputs.pop_front() {
            return Some(o);
        }
        let d = self.conn.poll_transmit(now)?;
        self.process_conn_events(now);
        Some(ClientOutput::Transmit(d))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::{AeadId, HashId};

    fn limits(rate: u64) -> ClientLimits {
        ClientLimits {
            allow_ipv4: true,
            allow_ipv6: false,
            supported_hash_ids: vec![HashId(4)],
            supported_aead_ids: vec![AeadId(0x1301)],
            max_aggregate_rate_kbps: rate,
            max_channels_announced: 8,
            max_channels_joined: 4,
        }
    }

    fn desc(group: &str, rate: u64) -> ChannelDescriptor {
        let group_ip: IpAddr = group.parse().unwrap();
        ChannelDescriptor::new(Announce {
            channel_id: ChannelId::new(&[7, 7]).unwrap(),
            source_ip: if group_ip.is_ipv4() {
                "10.0.0.1".parse().unwrap()
            } else {
                "2001:db8::1".parse().unwrap()
            },
            group_ip,
            udp_port: 5000,
            aead_id: AeadId(0x1301),
            hash_id: HashId(4),
            header_secret: vec![3; 32],
            max_rate_kbps: rate,
        })
        .unwrap()
    }

    #[test]
    fn join_decisions() {
        let d = desc("232.0.0.1", 40_000);
        assert_eq!(decide_join(&limits(50_000), &[], &d), JoinDecision::Accept);
        assert_eq!(
            decide_join(&limits(30_000), &[], &d),
            JoinDecision::Decline(reason::RATE_EXCEEDED)
        );
        assert_eq!(
            decide_join(&limits(50_000), &[], &desc("ff3e::1", 1000)),
            JoinDecision::Decline(reason::FAMILY_UNSUPPORTED)
        );
        assert_eq!(
            decide_join(&limits(50_000), &[20_000], &d),
            JoinDecision::Decline(reason::RATE_EXCEEDED)
        );
        let mut l = limits(500_000);
        l.max_channels_joined = 1;
        assert_eq!(
            decide_join(&l, &[1000], &d),
            JoinDecision::Decline(reason::CHANNEL_LIMIT)
        );
    }

    fn flow(policy: FlowPolicy) -> FlowControl {
        FlowControl::new(&FlowConfig {
            policy,
            initial_max_data: 1_000_000,
            window: 1_000_000,
            increment: 100_000,
        })
    }

    #[test]
    fn flow_extend() {
        let mut f = flow(FlowPolicy::Extend);
        let d = f.adapt(1_200_000, true);
        assert!(matches!(d, FlowDecision::Extend(m) if m >= 1_200_000));
        assert!(f.max_data >= 1_200_000);
    }

    #[test]
    fn flow_leave() {
        let mut f = flow(FlowPolicy::Leave);
        assert_eq!(f.adapt(1_200_000, true), FlowDecision::Leave);
        assert_eq!(f.max_data, 1_000_000);
        assert!(matches!(f.adapt(1_200_000, false), FlowDecision::Extend(_)));
    }

    #[test]
    fn flow_within() {
        let mut f = flow(FlowPolicy::Leave);
        assert_eq!(f.adapt(500_000, true), FlowDecision::Within);
        f.commit(500_000);
        assert_eq!(f.on_consumed(100_000), None);
        assert_eq!(f.on_consumed(450_000), Some(1_550_000));
    }
}
