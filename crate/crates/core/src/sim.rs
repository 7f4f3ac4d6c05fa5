// Licensed under the Apache License, Version 2.0 <LICENSE-APACHE or
// http://www.apache.org/licenses/LICENSE-2.0> or the MIT license
// <LICENSE-MIT or http://opensource.org/licenses/MIT>, at your
// option. This file may not be copied, modified, or distributed
// except according to those terms.

//! Scenario runner: wires a [`Server`] and its [`Client`]s to a
//! [`SimNetwork`], drives them to the end of the scenario and streams every
//! record through the trace writer and the [`Checker`].

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{self, Write};
use std::net::IpAddr;
use std::time::Duration;

use bytes::Bytes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::client::{Client, ClientConfig, ClientOutput, FlowConfig};
use crate::conn::ConnParams;
use crate::netsim::{AttackerConfig, NetConfig, NetEvent, NodeConfig, NodeId, SimNetwork, SERVER};
use crate::scenario::{parse_aead, parse_channel_id, parse_hash, Scenario, ScenarioError};
use crate::server::{
    ConfigError, Program, PublisherConfig, RotationPolicy, Server, ServerConfig, ServerOutput,
    StreamPlan,
};
use crate::trace::{ChannelInfo, Line, Record, TraceWriter};
use crate::verify::{Checker, VerifyReport};
use crate::wire::{Announce, ChannelId, ClientLimits};
use crate::Time;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("server configuration: {0}")]
    Server(#[from] ConfigError),
    #[error("trace output: {0}")]
    Io(#[from] io::Error),
}

#[derive(Default)]
pub struct SimOptions {
    /// Replaces the scenario seed.
    pub seed: Option<u64>,
    /// Keep a copy of every multicast datagram the server sends.
    pub capture_multicast: bool,
    /// Keep every trace line in the outcome.
    pub keep_lines: bool,
    pub trace: Option<Box<dyn Write>>,
}

#[derive(Clone, Debug)]
pub struct Captured {
    pub t: Time,
    pub source: IpAddr,
    pub group: IpAddr,
    pub datagram: Bytes,
}

pub struct RunOutcome {
    /// The scenario as run, with the seed override applied.
    pub scenario: Scenario,
    pub server: Server,
    /// Clients in node order: `clients[i]` is node `i + 1`.
    pub clients: Vec<Client>,
    pub net: SimNetwork,
    pub trace_hash: String,
    pub trace_lines: u64,
    pub verify: VerifyReport,
    pub captured: Vec<Captured>,
    pub lines: Vec<Line>,
    pub end: Time,
}

impl RunOutcome {
    pub fn client(&self, node: NodeId) -> &Client {
        &self.clients[node - 1]
    }
}

#[derive(Clone, Debug)]
enum Action {
    Disconnect,
    Limits(ClientLimits),
}

struct Sink {
    writer: TraceWriter,
    checker: Checker,
    keep: Option<Vec<Line>>,
}

impl Sink {
    fn emit(&mut self, t: Time, record: Record) -> io::Result<()> {
        let line = Line { t, record };
        self.writer.write_line(&line)?;
        self.checker.observe(&line);
        if let Some(k) = self.keep.as_mut() {
            k.push(line);
        }
        Ok(())
    }
}

struct Sim {
    net: SimNetwork,
    server: Server,
    clients: Vec<Client>,
    actions: Vec<BTreeMap<Time, Vec<Action>>>,
    armed: Vec<BTreeSet<Time>>,
    injected: HashSet<u64>,
    next_tag: u64,
    capture: Option<Vec<Captured>>,
    end: Time,
}

fn random_bytes(rng: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    let mut v = vec![0u8; n];
    rng.fill(&mut v[..]);
    v
}

fn announces(s: &Scenario, rng: &mut ChaCha8Rng) -> Vec<Announce> {
    s.channels
        .iter()
        .map(|c| Announce {
            channel_id: parse_channel_id(&c.id).expect("validated"),
            source_ip: c.source,
            group_ip: c.group,
            udp_port: c.port,
            aead_id: parse_aead(&c.aead).expect("validated").id(),
            hash_id: parse_hash(&c.hash).expect("validated").id(),
            header_secret: match &c.header_secret {
                Some(h) => hex::decode(h).expect("validated"),
                None => random_bytes(rng, 32),
            },
            max_rate_kbps: c.rate_kbps,
        })
        .collect()
}

fn programs(s: &Scenario) -> Vec<Program> {
    let mut out: Vec<Program> = Vec::new();
    for c in &s.channels {
        let Some(name) = &c.program else { continue };
        let id = parse_channel_id(&c.id).expect("validated");
        match out.iter_mut().find(|p| &p.name == name) {
            Some(p) => p.channels.push(id),
            None => out.push(Program {
                name: name.clone(),
                channels: vec![id],
            }),
        }
    }
    out
}

fn plan(s: &Scenario) -> Vec<StreamPlan> {
    let mut out = Vec::new();
    for st in &s.streams {
        let channel = parse_channel_id(&st.channel).expect("validated");
        for k in 0..st.count as u64 {
            out.push(StreamPlan {
                channel: channel.clone(),
                at: Time::from_millis(st.at_ms + k * st.every_ms),
                bytes: st.bytes,
            });
        }
    }
    out
}

fn max_bundling(s: &Scenario) -> Duration {
    let ms = s
        .client_groups
        .iter()
        .map(|g| g.ack_bundling_ms)
        .max()
        .unwrap_or(25);
    Duration::from_millis(ms)
}

impl Sim {
    fn build(s: &Scenario) -> Result<Self, SimError> {
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
        let end = Time::ZERO + s.duration();
        let sv = &s.server;
        let config = ServerConfig {
            seed: s.seed,
            multicast: sv.multicast,
            publisher: PublisherConfig {
                max_datagram_size: sv.max_datagram_size,
                integrity_lead: sv.integrity_lead,
                segment_packets: sv.segment_packets,
                rotation: RotationPolicy {
                    interval: sv.rotation_interval,
                    unicast_only_every: sv.unicast_only_every,
                },
            },
            join_timeout: Duration::from_millis(sv.join_timeout_ms),
            reorder_threshold: sv.reorder_threshold,
            multicast_retx_fraction: sv.multicast_retx_fraction,
            heavy_loss_fraction: sv.heavy_loss_fraction,
            heavy_loss_window: Duration::from_millis(sv.heavy_loss_window_ms),
            heavy_loss_min_packets: sv.heavy_loss_min_packets,
            ack_bundling: max_bundling(s),
            ..ServerConfig::default()
        };
        let conn_config = config.conn.clone();
        let mut server = Server::new(config, announces(s, &mut rng), programs(s), plan(s))?;

        let mut nodes = Vec::new();
        let mut clients = Vec::new();
        let mut actions = Vec::new();
        for (gi, g) in s.client_groups.iter().enumerate() {
            let limits = g.limits.to_limits(&format!("client_groups[{gi}].limits"))?;
            for _ in 0..g.count {
                let node = clients.len() + 1;
                let ccid = ChannelId::new(&random_bytes(&mut rng, 8)).expect("8 bytes");
                let scid = ChannelId::new(&random_bytes(&mut rng, 8)).expect("8 bytes");
                let up = random_bytes(&mut rng, 32);
                let down = random_bytes(&mut rng, 32);
                server.add_client(
                    node,
                    ConnParams {
                        local_cid: scid.clone(),
                        peer_cid: ccid.clone(),
                        tx_secret: down.clone(),
                        rx_secret: up.clone(),
                    },
                );
                let mut cc = ClientConfig::new(node, limits.clone());
                cc.multicast = g.multicast;
                cc.ack_bundling = Duration::from_millis(g.ack_bundling_ms);
                cc.spurious_per_sec = g.spurious_per_sec;
                cc.conn = conn_config.clone();
                cc.seed = rng.gen();
                if let Some(m) = g.initial_max_data {
                    cc.flow = FlowConfig {
                        policy: g.flow_policy,
                        initial_max_data: m,
                        window: m,
                        ..FlowConfig::default()
                    };
                } else {
                    cc.flow.policy = g.flow_policy;
                }
                clients.push(Client::new(
                    cc,
                    ConnParams {
                        local_cid: ccid,
                        peer_cid: scid,
                        tx_secret: up,
                        rx_secret: down,
                    },
                ));
                nodes.push(NodeConfig {
                    link: g.link.clone(),
                    multicast_capable: g.multicast_capable,
                });
                let mut a: BTreeMap<Time, Vec<Action>> = BTreeMap::new();
                if let Some(ms) = g.disconnect_at_ms {
                    a.entry(Time::from_millis(ms))
                        .or_default()
                        .push(Action::Disconnect);
                }
                for u in &g.limit_updates {
                    let mut l = limits.clone();
                    l.max_aggregate_rate_kbps = u.max_rate_kbps;
                    a.entry(Time::from_millis(u.at_ms))
                        .or_default()
                        .push(Action::Limits(l));
                }
                actions.push(a);
            }
        }
        let attackers = s
            .attackers
            .iter()
            .map(|a| {
                let c = &s.channels[s.channel_index(&a.channel).expect("validated")];
                AttackerConfig {
                    source: c.source,
                    group: c.group,
                    channel_id: parse_channel_id(&c.id)
                        .expect("validated")
                        .as_bytes()
                        .to_vec(),
                    rate_per_sec: a.rate_per_sec,
                    kinds: a.kinds.clone(),
                    start: Time::from_millis(a.start_ms),
                    stop: a.stop_ms.map_or(end, Time::from_millis),
                }
            })
            .collect();
        let net = SimNetwork::new(NetConfig {
            seed: s.seed,
            uplink: s.network.uplink.clone(),
            clients: nodes,
            membership_latency: Duration::from_millis(s.network.membership_latency_ms),
            attackers,
        });
        let n = clients.len();
        Ok(Sim {
            net,
            server,
            clients,
            actions,
            armed: vec![BTreeSet::new(); n + 1],
            injected: HashSet::new(),
            next_tag: 0,
            capture: None,
            end,
        })
    }

    fn arm(&mut self, node: NodeId, at: Time) {
        let now = self.net.now();
        let at = if at <= now {
            now + Duration::from_micros(1)
        } else {
            at
        };
        if at > self.end {
            return;
        }
        let armed = &mut self.armed[node];
        if armed.first().is_some_and(|f| *f <= at) {
            return;
        }
        armed.insert(at);
        self.net.set_timer(node, at);
    }

    fn poll_timeout(&self, node: NodeId) -> Option<Time> {
        let engine = if node == SERVER {
            self.server.poll_timeout()
        } else {
            self.clients[node - 1].poll_timeout()
        };
        let action = if node == SERVER {
            None
        } else {
            self.actions[node - 1].keys().next().copied()
        };
        [engine, action].into_iter().flatten().min()
    }

    /// Sends pending output of `node`, rearms its timer and drains its
    /// records into the sink.
    fn settle(&mut self, now: Time, node: NodeId, sink: &mut Sink) -> io::Result<()> {
        if node == SERVER {
            while let Some(o) = self.server.poll_output(now) {
                match o {
                    ServerOutput::Unicast { client, datagram } => {
                        self.net.send_unicast(SERVER, client, datagram.into());
                    }
                    ServerOutput::Multicast {
                        source,
                        group,
                        datagram,
                    } => {
                        let d = Bytes::from(datagram);
                        if let Some(c) = self.capture.as_mut() {
                            c.push(Captured {
                                t: now,
                                source,
                                group,
                                datagram: d.clone(),
                            });
                        }
                        self.net.send_multicast(source, group, d);
                    }
                }
            }
            let records: Vec<Record> = self.server.drain_records().collect();
            for r in records {
                sink.emit(now, r)?;
            }
        } else {
            let c = &mut self.clients[node - 1];
            while let Some(o) = c.poll_output(now) {
                match o {
                    ClientOutput::Transmit(d) => self.net.send_unicast(node, SERVER, d.into()),
                    ClientOutput::JoinGroup { source, group } => {
                        self.net.join_group(node, source, group)
                    }
                    ClientOutput::LeaveGroup { source, group } => {
                        self.net.leave_group(node, source, group)
                    }
                }
            }
            let records: Vec<Record> = c.drain_records().collect();
            for mut r in records {
                if let Record::Rx { tag, inj, .. } = &mut r {
                    *inj = self.injected.contains(tag);
                }
                sink.emit(now, r)?;
            }
        }
        if let Some(at) = self.poll_timeout(node) {
            self.arm(node, at);
        }
        Ok(())
    }

    fn on_timer(&mut self, now: Time, node: NodeId) {
        self.armed[node].retain(|t| *t > now);
        if node == SERVER {
            if self.server.poll_timeout().is_some_and(|t| t <= now) {
                self.server.handle_timeout(now);
            }
            return;
        }
        let due: Vec<Time> = self.actions[node - 1]
            .range(..=now)
            .map(|(t, _)| *t)
            .collect();
        for t in due {
            for a in self.actions[node - 1].remove(&t).expect("present") {
                let c = &mut self.clients[node - 1];
                match a {
                    Action::Disconnect => c.disconnect(now),
                    Action::Limits(l) => c.update_limits(now, l),
                }
            }
        }
        let c = &mut self.clients[node - 1];
        if c.poll_timeout().is_some_and(|t| t <= now) {
            c.handle_timeout(now);
        }
    }

    fn deliver(
        &mut self,
        now: Time,
        node: NodeId,
        datagram: &[u8],
        from_net: Option<NodeId>,
        injected: bool,
    ) {
        if node == SERVER {
            self.server
                .handle_datagram(now, from_net.expect("unicast to server"), datagram);
            return;
        }
        let tag = self.next_tag;
        self.next_tag += 1;
        if injected {
            self.injected.insert(tag);
        }
        self.clients[node - 1].handle_datagram(now, datagram, tag);
    }

    fn run(&mut self, sink: &mut Sink) -> io::Result<()> {
        for node in 0..self.armed.len() {
            self.settle(Time::ZERO, node, sink)?;
        }
        while let Some((t, ev)) = self.net.next_event(self.end) {
            let node = match ev {
                NetEvent::Timer { node } => {
                    self.on_timer(t, node);
                    node
                }
                NetEvent::Deliver {
                    node,
                    datagram,
                    via,
                    injected,
                } => {
                    let from = match via {
                        crate::netsim::Via::Unicast { from } => Some(from),
                        crate::netsim::Via::Multicast { .. } => None,
                    };
                    self.deliver(t, node, &datagram, from, injected);
                    node
                }
            };
            self.settle(t, node, sink)?;
        }
        Ok(())
    }
}

/// Runs a scenario to completion.
pub fn run(scenario: &Scenario, options: SimOptions) -> Result<RunOutcome, SimError> {
    let mut scenario = scenario.clone();
    if let Some(seed) = options.seed {
        scenario.seed = seed;
    }
    scenario.validate()?;
    let mut sim = Sim::build(&scenario)?;
    if options.capture_multicast {
        sim.capture = Some(Vec::new());
    }
    let mut sink = Sink {
        writer: TraceWriter::new(options.trace),
        checker: Checker::new(),
        keep: options.keep_lines.then(Vec::new),
    };
    let channels = scenario
        .channels
        .iter()
        .map(|c| ChannelInfo {
            id: parse_channel_id(&c.id).expect("validated"),
            rate_kbps: c.rate_kbps,
        })
        .collect();
    sink.emit(
        Time::ZERO,
        Record::Run {
            scenario: scenario.name.clone(),
            seed: scenario.seed,
            clients: sim.clients.len(),
            channels,
            ack_bundling_us: max_bundling(&scenario).as_micros() as u64,
            multicast_retx_fraction: scenario.server.multicast_retx_fraction,
        },
    )?;
    sim.run(&mut sink)?;
    let end = sim.end;
    sink.emit(
        end,
        Record::Links {
            links: sim.net.link_counters(),
            attacks: sim.net.attack_counters(),
        },
    )?;
    let Sink {
        mut writer,
        checker,
        keep,
    } = sink;
    let verify = checker.finish();
    let end_line = Line {
        t: end,
        record: Record::End {
            violations: verify.violations(),
        },
    };
    writer.write_line(&end_line)?;
    let mut lines = keep.unwrap_or_default();
    if options.keep_lines {
        lines.push(end_line);
    }
    let trace_lines = writer.lines();
    let trace_hash = writer.finish()?;
    Ok(RunOutcome {
        scenario,
        server: sim.server,
        clients: sim.clients,
        net: sim.net,
        trace_hash,
        trace_lines,
        verify,
        captured: sim.capture.unwrap_or_default(),
        lines,
        end,
    })
}
