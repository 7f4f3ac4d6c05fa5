// Licensed under the Apache License, Version 2.0 <LICENSE-APACHE or
// http://www.apache.org/licenses/LICENSE-2.0> or the MIT license
// <LICENSE-MIT or http://opensource.org/licenses/MIT>, at your
// option. This file may not be copied, modified, or distributed
// except according to those terms.

//! The server endpoint: channel publication, per-client membership and
//! budgeting, loss detection from MC_ACK, retransmission and unicast
//! fallback.
//!
//! A stream published on a channel is *addressed* to every client assigned
//! to that channel. The server tracks, per client and addressed stream, the
//! bytes known to be at the client and fills every gap over unicast when the
//! client cannot take them from the channel.

mod publisher;
mod view;

pub use publisher::{BuiltPacket, ChannelPublisher, PublisherConfig, RotationPolicy};
pub use view::{ClientChannel, ClientView};

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::net::IpAddr;
use std::time::Duration;

use bytes::Bytes;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ring::digest;

use crate::channel::{reason, ChannelDescriptor, ChannelState};
use crate::conn::{Conn, ConnConfig, ConnEvent, ConnParams, StreamChunk, PROTOCOL_VIOLATION};
use crate::ranges::RangeSet;
use crate::trace::{Path, Record};
use crate::wire::{Announce, ChannelId, ClientLimits, ControlFrame, McFrame, TransportParams};
use crate::Time;

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub seed: u64,
    /// Whether the server offers the multicast extension.
    pub multicast: bool,
    pub publisher: PublisherConfig,
    pub join_timeout: Duration,
    pub reorder_threshold: u64,
    pub multicast_retx_fraction: f64,
    pub heavy_loss_fraction: f64,
    pub heavy_loss_window: Duration,
    /// Resolved packets needed in the window before heavy loss is judged.
    pub heavy_loss_min_packets: usize,
    /// The clients' acknowledgement bundling delay, used in loss timing.
    pub ack_bundling: Duration,
    /// Losses on different channels closer than this point at the client.
    pub local_loss_window: Duration,
    pub initial_max_data: u64,
    pub conn: ConnConfig,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            seed: 0,
            multicast: true,
            publisher: PublisherConfig::default(),
            join_timeout: Duration::from_secs(3),
            reorder_threshold: 3,
            multicast_retx_fraction: 0.5,
            heavy_loss_fraction: 0.05,
            heavy_loss_window: Duration::from_secs(10),
            heavy_loss_min_packets: 100,
            ack_bundling: Duration::from_millis(25),
            local_loss_window: Duration::from_millis(200),
            initial_max_data: 1 << 24,
            conn: ConnConfig::default(),
        }
    }
}

/// Alternative channels carrying the same content, such as several
/// qualities of one video.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Program {
    pub name: String,
    pub channels: Vec<ChannelId>,
}

/// A stream of `bytes` published on `channel` at `at`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamPlan {
    pub channel: ChannelId,
    pub at: Time,
    pub bytes: u64,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("channel {0}: {1}")]
    Channel(ChannelId, String),
    #[error("duplicate channel {0}")]
    Duplicate(ChannelId),
    #[error("program {0} names unknown channel {1}")]
    UnknownChannel(String, ChannelId),
    #[error("channel {0} is in more than one program")]
    SharedChannel(ChannelId),
    #[error("{0}")]
    Invalid(&'static str),
}

#[derive(Debug)]
pub enum ServerOutput {
    Unicast {
        client: usize,
        datagram: Vec<u8>,
    },
    Multicast {
        source: IpAddr,
        group: IpAddr,
        datagram: Vec<u8>,
    },
}

/// Deterministic content of a published stream.
pub fn stream_content(seed: u64, stream_id: u64, len: u64) -> Bytes {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stream_id.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut v = vec![0u8; len as usize];
    rng.fill_bytes(&mut v);
    v.into()
}

/// Whether a client's declared algorithms cover the channel's.
pub fn algorithms_supported(limits: &ClientLimits, desc: &ChannelDescriptor) -> bool {
    limits.supported_hash_ids.contains(&desc.announce.hash_id)
        && limits.supported_aead_ids.contains(&desc.announce.aead_id)
}

/// Picks the highest-rate candidate that fits the client's remaining budget
/// and channel allowance, given the rates of channels it is already in.
pub fn select_channel<'a>(
    limits: &ClientLimits,
    candidates: &[&'a ChannelDescriptor],
    member_rates: &[u64],
) -> Option<&'a ChannelDescriptor> {
    let used: u64 = member_rates.iter().sum();
    if member_rates.len() as u64 >= limits.max_channels_joined {
        return None;
    }
    let remaining = limits.max_aggregate_rate_kbps.saturating_sub(used);
    candidates
        .iter()
        .filter(|d| d.max_rate_kbps() <= remaining)
        .filter(|d| {
            if d.is_ipv6() {
                limits.allow_ipv6
            } else {
                limits.allow_ipv4
            }
        })
        .filter(|d| algorithms_supported(limits, d))
        .max_by_key(|d| (d.max_rate_kbps(), std::cmp::Reverse(d.channel_id().clone())))
        .copied()
}

struct StreamInfo {
    channel: ChannelId,
    data: Bytes,
    /// Bytes that have gone out on the channel at least once.
    sent: RangeSet,
}

impl StreamInfo {
    fn open(&self) -> bool {
        !self.sent.covers(0..self.data.len() as u64)
    }
}

/// Per-packet loss bookkeeping until every responsible client resolved it.
struct PnInfo {
    chunks: Vec<(u64, std::ops::Range<u64>)>,
    carried: Vec<McFrame>,
    responsible: BTreeSet<usize>,
    pending: BTreeSet<usize>,
    losers: BTreeSet<usize>,
}

#[derive(Clone, Debug, Default, serde::Serialize)]
pub struct ChannelStats {
    pub packets: u64,
    pub bytes: u64,
    pub resend_packets: u64,
    pub resend_bytes: u64,
    pub retx_multicast: u64,
    pub retx_unicast: u64,
    pub retx_unicast_bytes: u64,
    /// Packets built while no client was joined, and not sent.
    pub idle_packets: u64,
}

struct ChannelRt {
    publisher: ChannelPublisher,
    program: usize,
    next_send: Time,
    pns: BTreeMap<u64, PnInfo>,
    stats: ChannelStats,
}

pub struct Server {
    config: ServerConfig,
    programs: Vec<Program>,
    order: Vec<ChannelId>,
    channels: BTreeMap<ChannelId, ChannelRt>,
    rates: BTreeMap<ChannelId, u64>,
    clients: BTreeMap<usize, ClientView>,
    streams: BTreeMap<u64, StreamInfo>,
    plan: VecDeque<StreamPlan>,
    next_stream_id: u64,
    join_deadlines: BTreeSet<(Time, usize, ChannelId)>,
    outputs: VecDeque<ServerOutput>,
    records: Vec<Record>,
}

impl Server {
    pub fn new(
        config: ServerConfig,
        announces: Vec<Announce>,
        programs: Vec<Program>,
        mut plan: Vec<StreamPlan>,
    ) -> Result<Self, ConfigError> {
        config
            .publisher
            .rotation
            .validate()
            .map_err(ConfigError::Invalid)?;
        if !(0.0..=1.0).contains(&config.multicast_retx_fraction) {
            return Err(ConfigError::Invalid(
                "multicast_retx_fraction outside [0, 1]",
            ));
        }
        let mut channels = BTreeMap::new();
        let mut rates = BTreeMap::new();
        let mut order = Vec::new();
        for (i, a) in announces.into_iter().enumerate() {
            let id = a.channel_id.clone();
            let desc = ChannelDescriptor::new(a)
                .map_err(|e| ConfigError::Channel(id.clone(), e.to_string()))?;
            if channels.contains_key(&id) {
                return Err(ConfigError::Duplicate(id));
            }
            rates.insert(id.clone(), desc.max_rate_kbps());
            let seed = config.seed ^ (0x5ec7_0000 + i as u64);
            let publisher = ChannelPublisher::new(desc, config.publisher.clone(), seed);
            order.push(id.clone());
            channels.insert(
                id,
                ChannelRt {
                    publisher,
                    program: usize::MAX,
                    next_send: Time::ZERO,
                    pns: BTreeMap::new(),
                    stats: ChannelStats::default(),
                },
            );
        }
        for (pi, p) in programs.iter().enumerate() {
            for id in &p.channels {
                let rt = channels
                    .get_mut(id)
                    .ok_or_else(|| ConfigError::UnknownChannel(p.name.clone(), id.clone()))?;
                if rt.program != usize::MAX {
                    return Err(ConfigError::SharedChannel(id.clone()));
                }
                rt.program = pi;
            }
        }
        let mut programs = programs;
        // A channel outside any program is a program of its own.
        for id in &order {
            let rt = channels.get_mut(id).expect("known");
            if rt.program == usize::MAX {
                rt.program = programs.len();
                programs.push(Program {
                    name: id.to_string(),
                    channels: vec![id.clone()],
                });
            }
        }
        for s in &plan {
            if !channels.contains_key(&s.channel) {
                return Err(ConfigError::UnknownChannel(
                    "workload".into(),
                    s.channel.clone(),
                ));
            }
        }
        plan.sort_by_key(|s| s.at);
        Ok(Server {
            config,
            programs,
            order,
            channels,
            rates,
            clients: BTreeMap::new(),
            streams: BTreeMap::new(),
            plan: plan.into(),
            next_stream_id: 3,
            join_deadlines: BTreeSet::new(),
            outputs: VecDeque::new(),
            records: Vec::new(),
        })
    }

    pub fn add_client(&mut self, node: usize, params: ConnParams) {
        let mut conn = Conn::new(self.config.conn.clone(), params);
        conn.send_control(&ControlFrame::Hello(TransportParams {
            multicast_supported: self.config.multicast,
            client_limits: None,
            initial_max_data: Some(self.config.initial_max_data),
        }));
        self.clients.insert(node, ClientView::new(node, conn));
    }

    pub fn client(&self, node: usize) -> Option<&ClientView> {
        self.clients.get(&node)
    }

    pub fn clients(&self) -> impl Iterator<Item = &ClientView> {
        self.clients.values()
    }

    pub fn channel_ids(&self) -> &[ChannelId] {
        &self.order
    }

    pub fn descriptor(&self, id: &ChannelId) -> Option<&ChannelDescriptor> {
        self.channels.get(id).map(|c| c.publisher.descriptor())
    }

    pub fn publisher(&self, id: &ChannelId) -> Option<&ChannelPublisher> {
        self.channels.get(id).map(|c| &c.publisher)
    }

    pub fn channel_stats(&self, id: &ChannelId) -> Option<&ChannelStats> {
        self.channels.get(id).map(|c| &c.stats)
    }

    pub fn programs(&self) -> &[Program] {
        &self.programs
    }

    /// Published streams as (stream id, channel, SHA-256).
    pub fn published(&self) -> impl Iterator<Item = (u64, &ChannelId, u64)> {
        self.streams
            .iter()
            .map(|(id, s)| (*id, &s.channel, s.data.len() as u64))
    }

    pub fn drain_records(&mut self) -> std::vec::Drain<'_, Record> {
        self.records.drain(..)
    }

    /// Whether all planned streams have been published and sent.
    pub fn publishing_done(&self) -> bool {
        self.plan.is_empty() && self.channels.values().all(|c| !c.publisher.has_pending())
    }

    /// Whether every published stream addressed to a connected client is
    /// known to be at that client.
    pub fn delivery_settled(&self) -> bool {
        self.clients.values().filter(|c| c.connected).all(|c| {
            c.queued_bytes() == 0
                && c.addressed.iter().all(|(id, cov)| {
                    let len = self.streams[id].data.len() as u64;
                    cov.covers(0..len)
                })
        })
    }

    fn unicast_mc(&mut self, node: usize, f: McFrame) {
        if let Some(cv) = self.clients.get_mut(&node) {
            if cv.connected {
                cv.conn.send_control(&ControlFrame::Mc(f));
            }
        }
    }

    fn loss_threshold(&self, node: usize) -> Duration {
        let srtt = self.clients[&node].conn.smoothed_rtt();
        let var = self.clients[&node].conn.rtt_var();
        srtt * 2 + var * 4 + self.config.ack_bundling * 2 + Duration::from_millis(20)
    }

    // ---- connection events ----

    pub fn handle_datagram(&mut self, now: Time, from: usize, datagram: &[u8]) {
        let Some(cv) = self.clients.get_mut(&from) else {
            return;
        };
        cv.conn.handle_datagram(now, datagram);
        self.process_events(now, from);
    }

    fn process_events(&mut self, now: Time, node: usize) {
        loop {
            let Some(cv) = self.clients.get_mut(&node) else {
                return;
            };
            let Some(ev) = cv.conn.poll_event() else {
                break;
            };
            match ev {
                ConnEvent::Control(ControlFrame::Hello(tp)) => self.on_hello(now, node, tp),
                ConnEvent::Control(ControlFrame::MaxData(v)) => cv.set_peer_max_data(v),
                ConnEvent::Control(ControlFrame::Mc(f)) => self.on_mc_frame(now, node, f),
                ConnEvent::Control(_) | ConnEvent::Stream(_) => {}
                ConnEvent::Closed { .. } => self.on_disconnect(now, node),
            }
        }
        if let Some(cv) = self.clients.get_mut(&node) {
            cv.pump();
        }
    }

    fn on_hello(&mut self, now: Time, node: usize, tp: TransportParams) {
        let cv = self.clients.get_mut(&node).expect("known client");
        if cv.hello {
            return;
        }
        cv.hello = true;
        if let Some(m) = tp.initial_max_data {
            cv.set_peer_max_data(m);
        }
        match tp.client_limits {
            Some(limits) if self.config.multicast => {
                cv.multicast = true;
                cv.limits = Some(limits.clone());
                self.records.push(Record::LimitsRx { c: node, limits });
                self.announce_all(node);
            }
            _ => {}
        }
        for p in 0..self.programs.len() {
            self.assign_program(now, node, p, None);
        }
    }

    /// Announces every channel the client could be asked to join, up to
    /// its announce allowance.
    fn announce_all(&mut self, node: usize) {
        let cv = self.clients.get_mut(&node).expect("known client");
        let limits = cv.limits.clone().expect("multicast client");
        let mut count = cv.channels.len() as u64;
        for id in &self.order {
            let desc = self.channels[id].publisher.descriptor();
            if cv.channels.contains_key(id) {
                continue;
            }
            if !algorithms_supported(&limits, desc) {
                log::info!("client {node}: not announcing {id}, algorithms unsupported");
                continue;
            }
            if count >= limits.max_channels_announced {
                log::info!("client {node}: announce allowance reached");
                break;
            }
            count += 1;
            cv.channels.insert(id.clone(), ClientChannel::default());
            cv.conn
                .send_control(&ControlFrame::Mc(McFrame::Announce(desc.announce.clone())));
        }
    }

    /// Chooses what serves `program` for the client and starts it. Only
    /// channels below `below` kbps are considered when set.
    fn assign_program(&mut self, now: Time, node: usize, program: usize, below: Option<u64>) {
        let cv = &self.clients[&node];
        let current = cv.assignment.get(&program).cloned();
        let candidates: Vec<&ChannelDescriptor> = self.programs[program]
            .channels
            .iter()
            .filter(|id| cv.channels.get(*id).is_some_and(|c| !c.declined))
            .map(|id| self.channels[id].publisher.descriptor())
            .filter(|d| below.is_none_or(|b| d.max_rate_kbps() < b))
            .collect();
        let choice = match (&cv.limits, cv.multicast) {
            (Some(l), true) => {
                let members = cv.member_rates(&self.rates, current.as_ref());
                select_channel(l, &candidates, &members).map(|d| d.channel_id().clone())
            }
            _ => None,
        };
        let (target, multicast) = match choice {
            Some(id) => (id, true),
            None => {
                let lowest = self.programs[program]
                    .channels
                    .iter()
                    .min_by_key(|id| (self.rates[*id], (*id).clone()))
                    .expect("programs are non-empty")
                    .clone();
                (lowest, false)
            }
        };
        if let Some(old) = current {
            if old == target {
                if !multicast {
                    let r = reason::RATE_EXCEEDED;
                    self.fallback(now, node, &old, r, true);
                }
                return;
            }
            self.unassign(now, node, &old);
        }
        let cv = self.clients.get_mut(&node).expect("known client");
        cv.assignment.insert(program, target.clone());
        cv.channel(&target).assigned = true;
        self.address_open_streams(node, &target);
        if multicast {
            self.send_join(now, node, &target);
        } else {
            let r = if self.clients[&node].multicast {
                reason::RATE_EXCEEDED
            } else {
                reason::NONE
            };
            self.fallback(now, node, &target, r, false);
        }
    }

    /// Addresses streams still going out on `ch` to the client and sends
    /// the parts already sent over unicast.
    fn address_open_streams(&mut self, node: usize, ch: &ChannelId) {
        let cv = self.clients.get_mut(&node).expect("known client");
        for (id, s) in self
            .streams
            .iter()
            .filter(|(_, s)| &s.channel == ch && s.open())
        {
            if cv.addressed.contains_key(id) {
                continue;
            }
            cv.addressed.insert(*id, RangeSet::new());
            self.records.push(Record::Addressed {
                c: node,
                stream: *id,
            });
            for r in s.sent.iter() {
                cv.send_uncovered(*id, r, &s.data);
            }
        }
        cv.pump();
    }

    /// Ends service of `ch`, completing its addressed streams over unicast.
    fn unassign(&mut self, now: Time, node: usize, ch: &ChannelId) {
        let cc = self.clients.get_mut(&node).expect("known").channel(ch);
        let was_member = cc.member;
        cc.assigned = false;
        cc.fallback = false;
        if was_member {
            self.send_leave(now, node, ch, reason::SERVER_INSTRUCTED);
        }
        let cv = self.clients.get_mut(&node).expect("known");
        let open: Vec<u64> = cv
            .addressed
            .keys()
            .copied()
            .filter(|id| &self.streams[id].channel == ch)
            .collect();
        for id in open {
            let s = &self.streams[&id];
            cv.send_uncovered(id, 0..s.data.len() as u64, &s.data);
        }
        cv.pump();
    }

    fn send_join(&mut self, now: Time, node: usize, ch: &ChannelId) {
        let rt = self.channels.get_mut(ch).expect("known channel");
        let secrets = rt.publisher.handoff_secrets();
        let digests = rt.publisher.handoff_digests();
        let cv = self.clients.get_mut(&node).expect("known");
        for s in secrets {
            cv.conn.send_control(&ControlFrame::Mc(McFrame::Key {
                channel_id: ch.clone(),
                from_packet_number: s.from_packet_number,
                secret: s.as_bytes().to_vec(),
            }));
        }
        if let Some((start, digests)) = digests {
            cv.conn.send_control(&ControlFrame::Mc(McFrame::Integrity {
                channel_id: ch.clone(),
                start_packet_number: start,
                digests,
            }));
        }
        cv.conn.send_control(&ControlFrame::Mc(McFrame::Join {
            channel_id: ch.clone(),
        }));
        let cc = cv.channel(ch);
        cc.member = true;
        cc.receiving = false;
        cc.fallback = false;
        cc.first_acked = None;
        cc.join_sent = Some(now);
        self.join_deadlines
            .insert((now + self.config.join_timeout, node, ch.clone()));
        self.records.push(Record::JoinTx {
            c: node,
            ch: ch.clone(),
        });
    }

    fn send_leave(&mut self, now: Time, node: usize, ch: &ChannelId, reason_code: u64) {
        let cv = self.clients.get_mut(&node).expect("known");
        cv.channel(ch).member = false;
        cv.conn.send_control(&ControlFrame::Mc(McFrame::Leave {
            channel_id: ch.clone(),
            reason_code,
        }));
        self.records.push(Record::LeaveTx {
            c: node,
            ch: ch.clone(),
            reason: reason_code,
        });
        self.drop_responsibility(now, node, ch);
    }

    /// Serves the channel's content to the client over unicast from now on.
    /// `instruct` sends a Leave when the client is still a member.
    fn fallback(
        &mut self,
        now: Time,
        node: usize,
        ch: &ChannelId,
        reason_code: u64,
        instruct: bool,
    ) {
        let cc = self.clients.get_mut(&node).expect("known").channel(ch);
        if cc.fallback {
            return;
        }
        cc.fallback = true;
        let member = cc.member;
        self.records.push(Record::Fallback {
            c: node,
            ch: ch.clone(),
            reason: reason_code,
        });
        if member {
            if instruct {
                self.send_leave(now, node, ch, reason_code);
            } else {
                self.clients
                    .get_mut(&node)
                    .expect("known")
                    .channel(ch)
                    .member = false;
                self.drop_responsibility(now, node, ch);
            }
        }
        // Fill every gap in what already went out on the channel.
        let cv = self.clients.get_mut(&node).expect("known");
        let ids: Vec<u64> = cv
            .addressed
            .keys()
            .copied()
            .filter(|id| &self.streams[id].channel == ch)
            .collect();
        for id in ids {
            let s = &self.streams[&id];
            for r in s.sent.iter() {
                cv.send_uncovered(id, r, &s.data);
            }
        }
        cv.pump();
    }

    /// Removes the client from every unresolved packet on `ch`.
    fn drop_responsibility(&mut self, now: Time, node: usize, ch: &ChannelId) {
        let cc = self.clients.get_mut(&node).expect("known").channel(ch);
        let pns: Vec<u64> = std::mem::take(&mut cc.outstanding).into_keys().collect();
        let rt = self.channels.get_mut(ch).expect("known channel");
        let mut touched: Vec<u64> = Vec::new();
        for (pn, info) in rt.pns.iter_mut() {
            if info.responsible.remove(&node) {
                info.pending.remove(&node);
                info.losers.remove(&node);
                touched.push(*pn);
            }
        }
        debug_assert!(pns.iter().all(|p| touched.contains(p)));
        for pn in touched {
            self.maybe_decide(now, ch, pn);
        }
    }

    fn on_disconnect(&mut self, now: Time, node: usize) {
        let cv = self.clients.get_mut(&node).expect("known");
        if !cv.connected {
            return;
        }
        cv.connected = false;
        cv.clear_queue();
        let ids: Vec<ChannelId> = cv.channels.keys().cloned().collect();
        for ch in ids {
            let cc = self.clients.get_mut(&node).expect("known").channel(&ch);
            cc.member = false;
            self.drop_responsibility(now, node, &ch);
        }
        self.join_deadlines.retain(|(_, n, _)| *n != node);
    }

    fn on_mc_frame(&mut self, now: Time, node: usize, f: McFrame) {
        match f {
            McFrame::State {
                channel_id,
                new_state,
                reason_code,
            } => self.on_state(now, node, &channel_id, new_state, reason_code),
            McFrame::Ack {
                channel_id,
                ack_ranges,
                ..
            } => self.on_mc_ack(now, node, &channel_id, &ack_ranges),
            McFrame::Limits { limits } => {
                if limits.validate().is_err() {
                    return self.violation(node, "invalid limits");
                }
                let cv = self.clients.get_mut(&node).expect("known");
                cv.limits = Some(limits.clone());
                self.records.push(Record::LimitsRx { c: node, limits });
                if self.clients[&node].multicast {
                    self.announce_all(node);
                }
            }
            _ => self.violation(node, "server-only frame from client"),
        }
    }

    fn violation(&mut self, node: usize, what: &str) {
        log::warn!("client {node}: protocol violation: {what}");
        let cv = self.clients.get_mut(&node).expect("known");
        cv.conn.close(PROTOCOL_VIOLATION);
    }

    fn on_state(&mut self, now: Time, node: usize, ch: &ChannelId, state: ChannelState, r: u64) {
        let cv = self.clients.get_mut(&node).expect("known");
        let Some(cc) = cv.channels.get_mut(ch) else {
            return self.violation(node, "state for unannounced channel");
        };
        cc.reported = Some(state);
        match state {
            ChannelState::Joined => cc.receiving = true,
            ChannelState::Left if cc.member => {
                // The client left on its own.
                let program = self.channels[ch].program;
                let assigned = cc.assigned;
                if assigned && r == reason::LIMITS_UPDATE {
                    cc.member = false;
                    self.drop_responsibility(now, node, ch);
                    let rate = self.rates[ch];
                    self.assign_program(now, node, program, Some(rate));
                } else if assigned {
                    self.fallback(now, node, ch, r, false);
                } else {
                    cc.member = false;
                    self.drop_responsibility(now, node, ch);
                }
            }
            ChannelState::DeclinedJoin if cc.member => {
                cc.member = false;
                cc.declined = true;
                self.drop_responsibility(now, node, ch);
                if self.clients[&node].channels[ch].assigned {
                    let program = self.channels[ch].program;
                    let rate = self.rates[ch];
                    self.clients
                        .get_mut(&node)
                        .expect("known")
                        .channel(ch)
                        .assigned = false;
                    self.clients
                        .get_mut(&node)
                        .expect("known")
                        .assignment
                        .remove(&program);
                    self.unassign_addressed(node, ch);
                    self.assign_program(now, node, program, Some(rate));
                }
            }
            _ => {}
        }
    }

    /// Completes addressed streams of a channel the client never received.
    fn unassign_addressed(&mut self, node: usize, ch: &ChannelId) {
        let cv = self.clients.get_mut(&node).expect("known");
        let ids: Vec<u64> = cv
            .addressed
            .keys()
            .copied()
            .filter(|id| &self.streams[id].channel == ch)
            .collect();
        for id in ids {
            let s = &self.streams[&id];
            cv.send_uncovered(id, 0..s.data.len() as u64, &s.data);
        }
        cv.pump();
    }

    fn on_mc_ack(
        &mut self,
        now: Time,
        node: usize,
        ch: &ChannelId,
        ranges: &[std::ops::RangeInclusive<u64>],
    ) {
        let Some(cc) = self.clients[&node].channels.get(ch) else {
            return self.violation(node, "ack for unannounced channel");
        };
        if cc.join_sent.is_none() {
            return self.violation(node, "ack for channel never joined");
        }
        let Some(rt) = self.channels.get_mut(ch) else {
            return;
        };
        let cv = self.clients.get_mut(&node).expect("known");
        let cc = cv.channels.get_mut(ch).expect("checked");
        cc.last_ack = Some(now);
        if cc.member {
            cc.receiving = true;
        }
        if cc.first_acked.is_none() {
            cc.first_acked = ranges.iter().map(|r| *r.start()).min();
        }
        let mut resolved = Vec::new();
        let mut acked_chunks = Vec::new();
        for r in ranges {
            cc.largest_acked = Some(cc.largest_acked.map_or(*r.end(), |l| l.max(*r.end())));
            for (pn, info) in rt.pns.range_mut(r.clone()) {
                acked_chunks.extend(info.chunks.iter().cloned());
                if info.pending.remove(&node) || info.losers.remove(&node) {
                    resolved.push(*pn);
                }
            }
            let keys: Vec<u64> = cc.outstanding.range(r.clone()).map(|(k, _)| *k).collect();
            for k in keys {
                cc.outstanding.remove(&k);
                cc.repaired.remove(&k);
                cc.history.push_back((now, k, false));
                cc.acked += 1;
            }
            cc.unlose(r);
        }
        for (id, range) in acked_chunks {
            cv.on_multicast_acked(id, range);
        }
        cv.pump();
        // Packets well below the largest acknowledged are lost.
        if let Some(largest) = cc_largest(&self.clients[&node], ch) {
            let limit = largest.saturating_sub(self.config.reorder_threshold);
            let cc = &self.clients[&node].channels[ch];
            let lost: Vec<u64> = cc
                .outstanding
                .range(..limit)
                .map(|(k, _)| *k)
                .filter(|k| !cc.repaired.contains(k))
                .collect();
            for pn in lost {
                self.lost(now, node, ch, pn);
            }
        }
        for pn in resolved {
            self.maybe_decide(now, ch, pn);
        }
        self.check_heavy_loss(now, node, ch);
    }

    fn lost(&mut self, now: Time, node: usize, ch: &ChannelId, pn: u64) {
        let local_window = self.config.local_loss_window;
        let cv = self.clients.get_mut(&node).expect("known");
        let cc = cv.channels.get_mut(ch).expect("known channel");
        if cc.outstanding.remove(&pn).is_none() {
            return;
        }
        cc.repaired.remove(&pn);
        if cc.first_acked.is_some_and(|f| pn > f) {
            cc.history.push_back((now, pn, true));
        }
        cc.lost += 1;
        cc.last_loss = Some(now);
        let elsewhere = cv
            .channels
            .iter()
            .any(|(id, c)| id != ch && c.last_loss.is_some_and(|t| now.since(t) <= local_window));
        if elsewhere {
            self.records.push(Record::LossFlag {
                ch: ch.clone(),
                pn,
                c: Some(node),
                upstream: false,
            });
        }
        let rt = self.channels.get_mut(ch).expect("known channel");
        let Some(info) = rt.pns.get_mut(&pn) else {
            return;
        };
        if info.pending.remove(&node) {
            info.losers.insert(node);
        }
        // Frames the packet carried keep the client's chain and keys whole.
        let carried = info.carried.clone();
        let cc = self.clients.get_mut(&node).expect("known").channel(ch);
        for f in &carried {
            if let McFrame::Integrity {
                start_packet_number: s,
                digests,
                ..
            } = f
            {
                let covered = *s..*s + digests.len() as u64;
                let held: Vec<u64> = cc.outstanding.range(covered).map(|(k, _)| *k).collect();
                cc.repaired.extend(held);
            }
        }
        for f in carried {
            self.unicast_mc(node, f);
        }
        self.maybe_decide(now, ch, pn);
    }

    fn check_heavy_loss(&mut self, now: Time, node: usize, ch: &ChannelId) {
        let (min, frac, window) = (
            self.config.heavy_loss_min_packets,
            self.config.heavy_loss_fraction,
            self.config.heavy_loss_window,
        );
        let settle = self.loss_threshold(node);
        let cc = self.clients.get_mut(&node).expect("known").channel(ch);
        if !cc.member || cc.fallback {
            return;
        }
        let (n, f) = cc.loss_fraction(now, window, settle);
        if n >= min && f > frac {
            self.fallback(now, node, ch, reason::HIGH_LOSS, true);
        }
    }

    /// Chooses the retransmission path once every responsible client has
    /// acknowledged or lost the packet.
    fn maybe_decide(&mut self, now: Time, ch: &ChannelId, pn: u64) {
        let fraction = self.config.multicast_retx_fraction;
        let rt = self.channels.get_mut(ch).expect("known channel");
        let Some(info) = rt.pns.get(&pn) else {
            return;
        };
        if !info.pending.is_empty() {
            return;
        }
        let info = rt.pns.remove(&pn).expect("present");
        if info.losers.is_empty() {
            return;
        }
        let responsible = info.responsible.len() as u64;
        let lost = info.losers.len() as u64;
        if responsible > 1 && lost == responsible {
            self.records.push(Record::LossFlag {
                ch: ch.clone(),
                pn,
                c: None,
                upstream: true,
            });
        }
        let multicast = lost as f64 >= fraction * responsible as f64;
        self.records.push(Record::Retx {
            ch: ch.clone(),
            pn,
            path: if multicast {
                Path::Multicast
            } else {
                Path::Unicast
            },
            lost,
            responsible,
        });
        if multicast {
            rt.stats.retx_multicast += 1;
            for (id, r) in &info.chunks {
                let s = &self.streams[id];
                let chunk = StreamChunk {
                    stream_id: *id,
                    offset: r.start,
                    data: s.data.slice(r.start as usize..r.end as usize),
                    fin: r.end == s.data.len() as u64,
                };
                rt.publisher.resend(chunk, info.losers.clone());
            }
        } else {
            rt.stats.retx_unicast += 1;
            let mut bytes = 0;
            for node in &info.losers {
                let cv = self.clients.get_mut(node).expect("known");
                for (id, r) in &info.chunks {
                    bytes += cv.send_uncovered(*id, r.clone(), &self.streams[id].data);
                }
                cv.pump();
            }
            self.channels
                .get_mut(ch)
                .expect("known")
                .stats
                .retx_unicast_bytes += bytes;
        }
        let _ = now;
    }

    // ---- publication ----

    fn publish(&mut self, plan: StreamPlan) {
        let id = self.next_stream_id;
        self.next_stream_id += 4;
        let data = stream_content(self.config.seed, id, plan.bytes);
        let sha = hex::encode(digest::digest(&digest::SHA256, &data));
        self.records.push(Record::Publish {
            ch: plan.channel.clone(),
            stream: id,
            len: plan.bytes,
            sha256: sha,
        });
        for cv in self.clients.values_mut() {
            let assigned = cv.channels.get(&plan.channel).is_some_and(|c| c.assigned)
                || (!cv.multicast && cv.assignment.values().any(|c| c == &plan.channel));
            if cv.connected && assigned {
                cv.addressed.insert(id, RangeSet::new());
                self.records.push(Record::Addressed {
                    c: cv.node,
                    stream: id,
                });
            }
        }
        let rt = self.channels.get_mut(&plan.channel).expect("validated");
        rt.publisher.enqueue(StreamChunk {
            stream_id: id,
            offset: 0,
            data: data.clone(),
            fin: true,
        });
        self.streams.insert(
            id,
            StreamInfo {
                channel: plan.channel,
                data,
                sent: RangeSet::new(),
            },
        );
    }

    fn send_channel_packet(&mut self, now: Time, ch: &ChannelId) -> bool {
        let rt = self.channels.get_mut(ch).expect("known channel");
        let Some((pkt, root)) = rt.publisher.next_packet() else {
            return false;
        };
        let len = pkt.datagram.len() as u64;
        let rate = rt.publisher.descriptor().max_rate_kbps();
        // kbps is bits per millisecond.
        let gap_us = (len * 8 * 1000).div_ceil(rate);
        rt.next_send = rt.next_send.max(now) + Duration::from_micros(gap_us);
        let resend = !pkt.resend_for.is_empty();
        let rotation = *rt.publisher.rotation();
        let a = &rt.publisher.descriptor().announce;
        let (source, group) = (a.source_ip, a.group_ip);
        let members: Vec<usize> = self
            .clients
            .values()
            .filter(|cv| cv.connected && cv.channels.get(ch).is_some_and(|c| c.member))
            .map(|cv| cv.node)
            .collect();
        if pkt.pn > 0 && pkt.pn % rotation.interval == 0 {
            self.records.push(Record::Rotate {
                ch: ch.clone(),
                boundary: pkt.pn,
                unicast_only: rotation.is_unicast_only(pkt.pn),
            });
        }
        // Nobody is joined: the packet is built and paced but not sent.
        if !members.is_empty() {
            let rt = self.channels.get_mut(ch).expect("known channel");
            rt.stats.packets += 1;
            rt.stats.bytes += len;
            if resend {
                rt.stats.resend_packets += 1;
                rt.stats.resend_bytes += len;
            }
            self.records.push(Record::McTx {
                ch: ch.clone(),
                pn: pkt.pn,
                len,
                resend,
            });
            self.outputs.push_back(ServerOutput::Multicast {
                source,
                group,
                datagram: pkt.datagram.to_vec(),
            });
        } else {
            self.channels
                .get_mut(ch)
                .expect("known channel")
                .stats
                .idle_packets += 1;
        }
        for c in &pkt.chunks {
            let s = self.streams.get_mut(&c.stream_id).expect("published");
            s.sent.insert(c.offset..c.offset + c.data.len() as u64);
        }

        if let Some(root) = root {
            for n in &members {
                self.unicast_mc(*n, root.clone());
            }
        }
        if let Some(b) = rotation.unicast_boundary(pkt.pn) {
            let rt = self.channels.get_mut(ch).expect("known channel");
            let secret = rt.publisher.secret(b).as_bytes().to_vec();
            for n in &members {
                self.unicast_mc(
                    *n,
                    McFrame::Key {
                        channel_id: ch.clone(),
                        from_packet_number: b,
                        secret: secret.clone(),
                    },
                );
            }
        }
        // Members still waiting for reception get the chain over unicast
        // until their first acknowledgement or Joined state.
        for n in &members {
            if !self.clients[n].channels[ch].receiving {
                for f in &pkt.carried {
                    if matches!(f, McFrame::Integrity { .. }) {
                        self.unicast_mc(*n, f.clone());
                    }
                }
            }
        }
        // A resend also carries digests and possibly new data, so every
        // member answers for it, not only those it was resent for.
        let responsible: BTreeSet<usize> = members.iter().copied().collect();
        for n in &responsible {
            let cc = self.clients.get_mut(n).expect("known").channel(ch);
            cc.outstanding.insert(pkt.pn, now);
        }
        let chunks: Vec<(u64, std::ops::Range<u64>)> = pkt
            .chunks
            .iter()
            .map(|c| (c.stream_id, c.offset..c.offset + c.data.len() as u64))
            .collect();
        if !responsible.is_empty() {
            let rt = self.channels.get_mut(ch).expect("known channel");
            rt.pns.insert(
                pkt.pn,
                PnInfo {
                    chunks: chunks.clone(),
                    carried: pkt.carried.clone(),
                    pending: responsible.clone(),
                    responsible,
                    losers: BTreeSet::new(),
                },
            );
        }
        // Clients in fallback get the same data over unicast.
        for cv in self.clients.values_mut() {
            if (!cv.connected
                || !cv
                    .channels
                    .get(ch)
                    .is_some_and(|c| c.fallback && c.assigned))
                && !(cv.connected && !cv.multicast && cv.assignment.values().any(|c| c == ch)) {
                    continue;
                }
            for (id, r) in &chunks {
                cv.send_uncovered(*id, r.clone(), &self.streams[id].data);
            }
            cv.pump();
        }
        true
    }

    // ---- timers ----

    pub fn poll_timeout(&self) -> Option<Time> {
        let mut t: Option<Time> = None;
        let mut consider = |x: Time| t = Some(t.map_or(x, |y| y.min(x)));
        for cv in self.clients.values() {
            if let Some(x) = cv.conn.timeout() {
                consider(x);
            }
        }
        if let Some(p) = self.plan.front() {
            consider(p.at);
        }
        for rt in self.channels.values() {
            if rt.publisher.has_pending() {
                consider(rt.next_send);
            }
        }
        if let Some((x, _, _)) = self.join_deadlines.first() {
            consider(*x);
        }
        for cv in self.clients.values() {
            for cc in cv.channels.values() {
                if cc.receiving {
                    if let Some((_, sent)) = cc.outstanding.first_key_value() {
                        consider(*sent + self.loss_threshold(cv.node));
                    }
                }
            }
        }
        t
    }

    pub fn handle_timeout(&mut self, now: Time) {
        let nodes: Vec<usize> = self.clients.keys().copied().collect();
        for n in &nodes {
            let cv = self.clients.get_mut(n).expect("known");
            cv.conn.handle_timeout(now);
            self.process_events(now, *n);
        }
        while self.plan.front().is_some_and(|p| p.at <= now) {
            let p = self.plan.pop_front().expect("non-empty");
            self.publish(p);
        }
        let ids: Vec<ChannelId> = self.order.clone();
        for ch in &ids {
            while self.channels[ch].next_send <= now && self.channels[ch].publisher.has_pending() {
                if !self.send_channel_packet(now, ch) {
                    break;
                }
            }
        }
        while let Some((t, n, ch)) = self.join_deadlines.first().cloned() {
            if t > now {
                break;
            }
            self.join_deadlines.pop_first();
            let cc = &self.clients[&n].channels[&ch];
            if cc.member
                && !cc.receiving
                && cc
                    .join_sent
                    .is_some_and(|s| s + self.config.join_timeout <= now)
            {
                self.fallback(now, n, &ch, reason::JOIN_TIMEOUT, true);
            }
        }
        for n in &nodes {
            let thresh = self.loss_threshold(*n);
            let chans: Vec<ChannelId> = self.clients[n].channels.keys().cloned().collect();
            for ch in chans {
                let cc = &self.clients[n].channels[&ch];
                if !cc.receiving {
                    continue;
                }
                let lost: Vec<u64> = cc
                    .outstanding
                    .iter()
                    .take_while(|(_, t)| **t + thresh <= now)
                    .map(|(pn, _)| *pn)
                    .collect();
                if lost.is_empty() {
                    continue;
                }
                for pn in lost {
                    self.lost(now, *n, &ch, pn);
                }
                self.check_heavy_loss(now, *n, &ch);
            }
        }
    }

    pub fn poll_output(&mut self, now: Time) -> Option<ServerOutput> {
        if let Some(o) = self.outputs.pop_front() {
            return Some(o);
        }
        let nodes: Vec<usize> = self.clients.keys().copied().collect();
        for n in nodes {
            let cv = self.clients.get_mut(&n).expect("known");
            if let Some(d) = cv.conn.poll_transmit(now) {
                self.process_events(now, n);
                return Some(ServerOutput::Unicast {
                    client: n,
                    datagram: d,
                });
            }
        }
        None
    }
}

fn cc_largest(cv: &ClientView, ch: &ChannelId) -> Option<u64> {
    cv.channels.get(ch).and_then(|c| c.largest_acked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::{AeadId, HashId};

    fn desc(id: u8, rate: u64, hash: u16) -> ChannelDescriptor {
        ChannelDescriptor::new(Announce {
            channel_id: ChannelId::new(&[id; 4]).unwrap(),
            source_ip: "10.0.0.1".parse().unwrap(),
            group_ip: format!("232.0.0.{id}").parse().unwrap(),
            udp_port: 5000,
            aead_id: AeadId(0x1301),
            hash_id: HashId(hash),
            header_secret: vec![1; 32],
            max_rate_kbps: rate,
        })
        .unwrap()
    }

    fn limits(budget: u64) -> ClientLimits {
        ClientLimits {
            allow_ipv4: true,
            allow_ipv6: true,
            supported_hash_ids: vec![HashId(4)],
            supported_aead_ids: vec![AeadId(0x1301)],
            max_aggregate_rate_kbps: budget,
            max_channels_announced: 16,
            max_channels_joined: 4,
        }
    }

    #[test]
    fn select_by_budget() {
        let uhd = desc(1, 40_000, 4);
        let hd = desc(2, 8000, 4);
        let c = [&uhd, &hd];
        let pick = |b| select_channel(&limits(b), &c, &[]).map(|d| d.max_rate_kbps());
        assert_eq!(pick(50_000), Some(40_000));
        assert_eq!(pick(30_000), Some(8000));
        assert_eq!(pick(1000), None);
        assert_eq!(
            select_channel(&limits(50_000), &c, &[20_000]).map(|d| d.max_rate_kbps()),
            Some(8000)
        );
    }

    #[test]
    fn unsupported_hash_not_eligible() {
        let sha1 = desc(1, 1000, 2);
        assert!(!algorithms_supported(&limits(50_000), &sha1));
        assert_eq!(select_channel(&limits(50_000), &[&sha1], &[]), None);
    }

    #[test]
    fn content_is_deterministic() {
        assert_eq!(stream_content(1, 3, 100), stream_content(1, 3, 100));
        assert_ne!(stream_content(1, 3, 100), stream_content(1, 7, 100));
    }
}
