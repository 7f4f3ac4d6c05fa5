// Licensed under the Apache License, Version 2.0 <LICENSE-APACHE or
// http://www.apache.org/licenses/LICENSE-2.0> or the MIT license
// <LICENSE-MIT or http://opensource.org/licenses/MIT>, at your
// option. This file may not be copied, modified, or distributed
// except according to those terms.

//! A deterministic discrete-event star network.
//!
//! The server attaches to a router through the uplink; every client
//! attaches through its own access link. Each link direction draws loss and
//! jitter from its own seeded generator, so adding or removing clients, or
//! an attacker, leaves every other link's random sequence unchanged.
//! Multicast crosses the uplink once and is copied by the router onto the
//! access link of every current member.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::net::IpAddr;
use std::time::Duration;

use bytes::Bytes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::Time;

pub type NodeId = usize;
pub const SERVER: NodeId = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    #[serde(default = "default_delay_ms")]
    pub delay_ms: f64,
    #[serde(default)]
    pub jitter_ms: f64,
    #[serde(default)]
    pub loss: f64,
}

fn default_delay_ms() -> f64 {
    10.0
}

impl Default for LinkConfig {
    fn default() -> Self {
        LinkConfig {
            delay_ms: default_delay_ms(),
            jitter_ms: 0.0,
            loss: 0.0,
        }
    }
}

impl LinkConfig {
    fn delay(&self) -> Duration {
        Duration::from_micros((self.delay_ms * 1000.0).round() as u64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeConfig {
    pub link: LinkConfig,
    pub multicast_capable: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    /// Random bytes behind a well-formed channel header.
    Random,
    /// A recently observed authentic datagram with one bit flipped.
    Bitflip,
    /// A recently observed authentic datagram, unchanged.
    Replay,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackerConfig {
    pub source: IpAddr,
    pub group: IpAddr,
    /// Identifier placed in the header of random datagrams.
    pub channel_id: Vec<u8>,
    pub rate_per_sec: f64,
    pub kinds: Vec<AttackKind>,
    pub start: Time,
    pub stop: Time,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub seed: u64,
    pub uplink: LinkConfig,
    pub clients: Vec<NodeConfig>,
    pub membership_latency: Duration,
    pub attackers: Vec<AttackerConfig>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Via {
    Unicast { from: NodeId },
    Multicast { source: IpAddr, group: IpAddr },
}

/// Events handed to the driver.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NetEvent {
    Deliver {
        node: NodeId,
        datagram: Bytes,
        via: Via,
        injected: bool,
    },
    Timer {
        node: NodeId,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkCounters {
    pub sent_packets: u64,
    pub sent_bytes: u64,
    pub delivered_packets: u64,
    pub delivered_bytes: u64,
    pub dropped_packets: u64,
    pub dropped_bytes: u64,
}

impl LinkCounters {
    pub fn conserved(&self) -> bool {
        self.sent_packets == self.delivered_packets + self.dropped_packets
            && self.sent_bytes == self.delivered_bytes + self.dropped_bytes
    }
}

/// One direction of one link.
#[derive(Debug)]
struct Link {
    config: LinkConfig,
    rng: ChaCha8Rng,
    /// Separate stream for attacker traffic.
    inject_rng: ChaCha8Rng,
    counters: LinkCounters,
    /// Latest arrival time handed out; links do not reorder.
    last_arrival: Time,
}

impl Link {
    fn new(config: LinkConfig, seed: u64, index: u64) -> Self {
        let s = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        Link {
            config,
            rng: ChaCha8Rng::seed_from_u64(s),
            inject_rng: ChaCha8Rng::seed_from_u64(s ^ 0x5bd1_e995_5bd1_e995),
            counters: LinkCounters::default(),
            last_arrival: Time::ZERO,
        }
    }

    /// Returns the traversal delay, or `None` when the packet is lost.
    /// Jitter varies the delay but never lets a packet overtake an earlier
    /// one; injected packets are not ordered against genuine ones.
    fn traverse(&mut self, now: Time, len: usize, injected: bool) -> Option<Duration> {
        let rng = if injected {
            &mut self.inject_rng
        } else {
            &mut self.rng
        };
        let lost = self.config.loss > 0.0 && rng.gen::<f64>() < self.config.loss;
        let jitter = if self.config.jitter_ms > 0.0 {
            Duration::from_micros((rng.gen::<f64>() * self.config.jitter_ms * 1000.0) as u64)
        } else {
            Duration::ZERO
        };
        self.counters.sent_packets += 1;
        self.counters.sent_bytes += len as u64;
        if lost {
            self.counters.dropped_packets += 1;
            self.counters.dropped_bytes += len as u64;
            None
        } else {
            self.counters.delivered_packets += 1;
            self.counters.delivered_bytes += len as u64;
            let mut at = now + self.config.delay() + jitter;
            if !injected {
                at = at.max(self.last_arrival);
                self.last_arrival = at;
            }
            Some(at.since(now))
        }
    }
}

#[derive(Debug)]
enum Internal {
    Net(NetEvent),
    /// A datagram reaching the router, to be delivered onward.
    AtRouter {
        to: NodeId,
        from: NodeId,
        datagram: Bytes,
    },
    MulticastAtRouter {
        source: IpAddr,
        group: IpAddr,
        datagram: Bytes,
        injected: bool,
    },
    Membership {
        node: NodeId,
        key: (IpAddr, IpAddr),
        join: bool,
    },
    Attack {
        index: usize,
    },
}

#[derive(Debug)]
struct Scheduled {
    time: Time,
    seq: u64,
    event: Internal,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed: the heap pops the earliest event, ties by insertion.
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

#[derive(Debug)]
struct Attacker {
    config: AttackerConfig,
    rng: ChaCha8Rng,
    next_kind: usize,
    sent: u64,
}

/// Totals for attack traffic, counted at the router before fan-out.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackCounters {
    pub random: u64,
    pub bitflip: u64,
    pub replay: u64,
}

const OBSERVED_WINDOW: usize = 64;

#[derive(Debug)]
pub struct SimNetwork {
    now: Time,
    seq: u64,
    queue: BinaryHeap<Scheduled>,
    uplink_down: Link,
    uplink_up: Link,
    down: Vec<Link>,
    up: Vec<Link>,
    capable: Vec<bool>,
    membership_latency: Duration,
    members: BTreeMap<(IpAddr, IpAddr), BTreeSet<NodeId>>,
    attackers: Vec<Attacker>,
    observed: BTreeMap<(IpAddr, IpAddr), VecDeque<Bytes>>,
    attack_counters: AttackCounters,
}

impl SimNetwork {
    pub fn new(config: NetConfig) -> Self {
        let seed = config.seed;
        let n = config.clients.len();
        let mut net = SimNetwork {
            now: Time::ZERO,
            seq: 0,
            queue: BinaryHeap::new(),
            uplink_down: Link::new(config.uplink.clone(), seed, 0),
            uplink_up: Link::new(config.uplink.clone(), seed, 1),
            down: (0..n)
                .map(|i| Link::new(config.clients[i].link.clone(), seed, 2 + 2 * i as u64))
                .collect(),
            up: (0..n)
                .map(|i| Link::new(config.clients[i].link.clone(), seed, 3 + 2 * i as u64))
                .collect(),
            capable: config.clients.iter().map(|c| c.multicast_capable).collect(),
            membership_latency: config.membership_latency,
            members: BTreeMap::new(),
            attackers: Vec::new(),
            observed: BTreeMap::new(),
            attack_counters: AttackCounters::default(),
        };
        for (index, a) in config.attackers.into_iter().enumerate() {
            let start = a.start;
            net.attackers.push(Attacker {
                rng: ChaCha8Rng::seed_from_u64(seed ^ 0xa77a_c4e5 ^ index as u64),
                config: a,
                next_kind: 0,
                sent: 0,
            });
            net.schedule(start, Internal::Attack { index });
        }
        net
    }

    pub fn now(&self) -> Time {
        self.now
    }

    pub fn client_count(&self) -> usize {
        self.down.len()
    }

    fn schedule(&mut self, time: Time, event: Internal) {
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(Scheduled { time, seq, event });
    }

    pub fn set_timer(&mut self, node: NodeId, at: Time) {
        self.schedule(at.max(self.now), Internal::Net(NetEvent::Timer { node }));
    }

    /// Client nodes are numbered from 1.
    fn client_index(node: NodeId) -> usize {
        node - 1
    }

    pub fn send_unicast(&mut self, from: NodeId, to: NodeId, datagram: Bytes) {
        let len = datagram.len();
        let first = if from == SERVER {
            self.uplink_down.traverse(self.now, len, false)
        } else {
            self.up[Self::client_index(from)].traverse(self.now, len, false)
        };
        if let Some(d) = first {
            let t = self.now + d;
            self.schedule(t, Internal::AtRouter { to, from, datagram });
        }
    }

    /// Sends one copy towards the router; it is replicated there.
    pub fn send_multicast(&mut self, source: IpAddr, group: IpAddr, datagram: Bytes) {
        if let Some(d) = self.uplink_down.traverse(self.now, datagram.len(), false) {
            let t = self.now + d;
            self.schedule(
                t,
                Internal::MulticastAtRouter {
                    source,
                    group,
                    datagram,
                    injected: false,
                },
            );
        }
    }

    /// Requests membership. Takes effect after the membership latency, and
    /// never on nodes whose network does not carry multicast.
    pub fn join_group(&mut self, node: NodeId, source: IpAddr, group: IpAddr) {
        let t = self.now + self.membership_latency;
        self.schedule(
            t,
            Internal::Membership {
                node,
                key: (source, group),
                join: true,
            },
        );
    }

    pub fn leave_group(&mut self, node: NodeId, source: IpAddr, group: IpAddr) {
        let t = self.now + self.membership_latency;
        self.schedule(
            t,
            Internal::Membership {
                node,
                key: (source, group),
                join: false,
            },
        );
    }

    pub fn is_member(&self, node: NodeId, source: IpAddr, group: IpAddr) -> bool {
        self.members
            .get(&(source, group))
            .is_some_and(|m| m.contains(&node))
    }

    /// Advances to the next externally visible event. `None` once the
    /// queue is empty or the next event lies beyond `until`.
    pub fn next_event(&mut self, until: Time) -> Option<(Time, NetEvent)> {
        loop {
            if self.queue.peek()?.time > until {
                return None;
            }
            let s = self.queue.pop()?;
            debug_assert!(s.time >= self.now);
            self.now = s.time;
            match s.event {
                Internal::Net(e) => return Some((s.time, e)),
                Internal::AtRouter { to, from, datagram } => {
                    let second = if to == SERVER {
                        self.uplink_up.traverse(self.now, datagram.len(), false)
                    } else {
                        self.down[Self::client_index(to)].traverse(self.now, datagram.len(), false)
                    };
                    if let Some(d) = second {
                        let t = self.now + d;
                        self.schedule(
                            t,
                            Internal::Net(NetEvent::Deliver {
                                node: to,
                                datagram,
                                via: Via::Unicast { from },
                                injected: false,
                            }),
                        );
                    }
                }
                Internal::MulticastAtRouter {
                    source,
                    group,
                    datagram,
                    injected,
                } => self.fan_out(source, group, datagram, injected),
                Internal::Membership { node, key, join } => {
                    if join {
                        if self.capable[Self::client_index(node)] {
                            self.members.entry(key).or_default().insert(node);
                        }
                    } else if let Some(m) = self.members.get_mut(&key) {
                        m.remove(&node);
                    }
                }
                Internal::Attack { index } => self.attack(index),
            }
        }
    }

    fn fan_out(&mut self, source: IpAddr, group: IpAddr, datagram: Bytes, injected: bool) {
        let key = (source, group);
        if !injected {
            let obs = self.observed.entry(key).or_default();
            obs.push_back(datagram.clone());
            if obs.len() > OBSERVED_WINDOW {
                obs.pop_front();
            }
        }
        let members: Vec<NodeId> = self
            .members
            .get(&key)
            .map(|m| m.iter().copied().collect())
            .unwrap_or_default();
        for node in members {
            if let Some(d) =
                self.down[Self::client_index(node)].traverse(self.now, datagram.len(), injected)
            {
                let t = self.now + d;
                self.schedule(
                    t,
                    Internal::Net(NetEvent::Deliver {
                        node,
                        datagram: datagram.clone(),
                        via: Via::Multicast { source, group },
                        injected,
                    }),
                );
            }
        }
    }

    fn attack(&mut self, index: usize) {
        let now = self.now;
        let a = &mut self.attackers[index];
        if now >= a.config.stop || a.config.kinds.is_empty() || a.config.rate_per_sec <= 0.0 {
            return;
        }
        let key = (a.config.source, a.config.group);
        let kind = a.config.kinds[a.next_kind % a.config.kinds.len()];
        a.next_kind += 1;
        let observed = self.observed.get(&key);
        let datagram = match kind {
            AttackKind::Random => Some(random_datagram(&mut a.rng, &a.config.channel_id)),
            AttackKind::Bitflip | AttackKind::Replay => {
                observed.filter(|o| !o.is_empty()).map(|o| {
                    let mut d = o[a.rng.gen_range(0..o.len())].to_vec();
                    if kind == AttackKind::Bitflip {
                        let bit = a.rng.gen_range(0..d.len() * 8);
                        d[bit / 8] ^= 1 << (bit % 8);
                    }
                    Bytes::from(d)
                })
            }
        };
        let interval = Duration::from_secs_f64(1.0 / a.config.rate_per_sec);
        a.sent += 1;
        if let Some(d) = datagram {
            match kind {
                AttackKind::Random => self.attack_counters.random += 1,
                AttackKind::Bitflip => self.attack_counters.bitflip += 1,
                AttackKind::Replay => self.attack_counters.replay += 1,
            }
            // The attacker sits next to the router.
            self.fan_out(key.0, key.1, d, true);
        }
        self.schedule(now + interval, Internal::Attack { index });
    }

    pub fn attack_counters(&self) -> AttackCounters {
        self.attack_counters
    }

    /// Counters for every link direction, labelled.
    pub fn link_counters(&self) -> Vec<(String, LinkCounters)> {
        let mut out = vec![
            ("uplink.down".to_string(), self.uplink_down.counters),
            ("uplink.up".to_string(), self.uplink_up.counters),
        ];
        for i in 0..self.down.len() {
            out.push((format!("client{}.down", i + 1), self.down[i].counters));
            out.push((format!("client{}.up", i + 1), self.up[i].counters));
        }
        out
    }

    /// Bytes the server put on the wire.
    pub fn server_egress_bytes(&self) -> u64 {
        self.uplink_down.counters.sent_bytes
    }
}

fn random_datagram(rng: &mut ChaCha8Rng, channel_id: &[u8]) -> Bytes {
    let len = rng.gen_range(64..1200);
    let mut d = vec![0u8; len];
    rng.fill(&mut d[..]);
    d[0] = 0x40 | (d[0] & 0x1f);
    d[1] = channel_id.len() as u8;
    d[2..2 + channel_id.len()].copy_from_slice(channel_id);
    Bytes::from(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net(n: usize, loss: f64, capable: bool) -> SimNetwork {
        SimNetwork::new(NetConfig {
            seed: 7,
            uplink: LinkConfig {
                delay_ms: 1.0,
                ..LinkConfig::default()
            },
            clients: (0..n)
                .map(|_| NodeConfig {
                    link: LinkConfig {
                        delay_ms: 5.0,
                        jitter_ms: 0.0,
                        loss,
                    },
                    multicast_capable: capable,
                })
                .collect(),
            membership_latency: Duration::from_millis(10),
            attackers: Vec::new(),
        })
    }

    fn drain(net: &mut SimNetwork) -> Vec<(Time, NetEvent)> {
        std::iter::from_fn(|| net.next_event(Time::MAX)).collect()
    }

    fn group() -> (IpAddr, IpAddr) {
        ("10.0.0.1".parse().unwrap(), "232.0.0.1".parse().unwrap())
    }

    #[test]
    fn fan_out_to_members() {
        let mut n = net(3, 0.0, true);
        let (s, g) = group();
        for node in 1..=3 {
            n.join_group(node, s, g);
        }
        drain(&mut n);
        n.send_multicast(s, g, Bytes::from_static(b"x"));
        let ev = drain(&mut n);
        assert_eq!(ev.len(), 3);
        assert!(ev.iter().all(|(t, _)| *t == Time::from_millis(16)));
        assert_eq!(n.link_counters()[0].1.sent_packets, 1);
    }

    #[test]
    fn non_capable_never_receive() {
        let mut n = net(1, 0.0, false);
        let (s, g) = group();
        n.join_group(1, s, g);
        drain(&mut n);
        n.send_multicast(s, g, Bytes::from_static(b"x"));
        assert!(drain(&mut n).is_empty());
    }

    #[test]
    fn leave_stops_delivery() {
        let mut n = net(1, 0.0, true);
        let (s, g) = group();
        n.join_group(1, s, g);
        drain(&mut n);
        n.leave_group(1, s, g);
        drain(&mut n);
        n.send_multicast(s, g, Bytes::from_static(b"x"));
        assert!(drain(&mut n).is_empty());
    }

    #[test]
    fn total_loss() {
        let mut n = net(1, 1.0, true);
        for _ in 0..10 {
            n.send_unicast(SERVER, 1, Bytes::from_static(b"y"));
        }
        assert!(drain(&mut n).is_empty());
        assert!(n.link_counters().iter().all(|(_, c)| c.conserved()));
    }

    #[test]
    fn ties_in_insertion_order() {
        let mut n = net(2, 0.0, true);
        n.set_timer(2, Time::from_millis(1));
        n.set_timer(1, Time::from_millis(1));
        let ev = drain(&mut n);
        assert_eq!(ev[0].1, NetEvent::Timer { node: 2 });
        assert_eq!(ev[1].1, NetEvent::Timer { node: 1 });
    }

    #[test]
    fn lossy_links_are_reproducible_and_conserve() {
        let run = || {
            let mut n = net(4, 0.3, true);
            for i in 0..200 {
                n.send_unicast(SERVER, 1 + i % 4, Bytes::from(vec![0; 100]));
            }
            let ev = drain(&mut n);
            assert!(n.link_counters().iter().all(|(_, c)| c.conserved()));
            ev.len()
        };
        assert_eq!(run(), run());
    }
}
