// Licensed under the Apache License, Version 2.0 <LICENSE-APACHE or
// http://www.apache.org/licenses/LICENSE-2.0> or the MIT license
// <LICENSE-MIT or http://opensource.org/licenses/MIT>, at your
// option. This file may not be copied, modified, or distributed
// except according to those terms.

//! Run summary, as JSON and as a short text table.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::channel::{ChannelState, Origin};
use crate::conn::ConnStats;
use crate::server::ChannelStats;
use crate::sim::RunOutcome;
use crate::trace::Verdict;
use crate::verify::CheckResult;

#[derive(Clone, Debug, Serialize)]
pub struct ClientReport {
    pub node: usize,
    pub multicast_offered: bool,
    pub disconnected: bool,
    /// Stream bytes completed from channel packets.
    pub multicast_bytes: u64,
    /// Stream bytes completed over the unicast connection.
    pub unicast_bytes: u64,
    pub addressed_streams: usize,
    pub addressed_bytes: u64,
    pub completed_streams: usize,
    /// Every addressed stream arrived intact.
    pub complete: bool,
    pub fallback: bool,
    pub channels: BTreeMap<String, ChannelState>,
    pub verdicts: BTreeMap<Verdict, u64>,
    /// The server side of the unicast connection.
    pub server_conn: ConnStats,
}

#[derive(Clone, Debug, Serialize)]
pub struct ChannelReport {
    pub id: String,
    pub rate_kbps: u64,
    pub members: usize,
    #[serde(flatten)]
    pub stats: ChannelStats,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub duration_ms: u64,
    pub clients: Vec<ClientReport>,
    pub channels: Vec<ChannelReport>,
    pub streams_published: usize,
    pub server_egress_bytes: u64,
    /// Bytes a unicast-only server would have sent: the payload of every
    /// addressed stream, once per client.
    pub unicast_equivalent_bytes: u64,
    pub savings: f64,
    pub control_bytes: u64,
    pub trace_hash: String,
    pub trace_lines: u64,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
    pub warnings: Vec<String>,
}

impl RunReport {
    pub fn new(o: &RunOutcome) -> Self {
        let lengths: BTreeMap<u64, u64> =
            o.server.published().map(|(id, _, len)| (id, len)).collect();
        let mut clients = Vec::new();
        for c in &o.clients {
            let view = o.server.client(c.id()).expect("client known to server");
            let addressed_bytes = view.addressed.keys().map(|s| lengths[s]).sum();
            let done = c.completed_streams();
            let complete = view
                .addressed
                .keys()
                .all(|s| done.get(s).is_some_and(|d| d.len == lengths[s]));
            let multicast_bytes = o
                .server
                .channel_ids()
                .iter()
                .map(|id| c.bytes_from(&Origin::Channel(id.clone())))
                .sum();
            clients.push(ClientReport {
                node: c.id(),
                multicast_offered: view.multicast,
                disconnected: !view.connected,
                multicast_bytes,
                unicast_bytes: c.bytes_from(&Origin::Unicast),
                addressed_streams: view.addressed.len(),
                addressed_bytes,
                completed_streams: done.len(),
                complete,
                fallback: view.channels.values().any(|ch| ch.fallback),
                channels: c
                    .channel_states()
                    .map(|(id, s)| (id.to_string(), s))
                    .collect(),
                verdicts: c.stats().verdicts.clone(),
                server_conn: view.conn.stats(),
            });
        }
        let channels = o
            .server
            .channel_ids()
            .iter()
            .map(|id| ChannelReport {
                id: id.to_string(),
                rate_kbps: o.server.descriptor(id).expect("known").max_rate_kbps(),
                members: o
                    .server
                    .clients()
                    .filter(|v| v.channels.get(id).is_some_and(|c| c.member))
                    .count(),
                stats: o.server.channel_stats(id).expect("known").clone(),
            })
            .collect();
        let egress = o.net.server_egress_bytes();
        let unicast_equivalent: u64 = clients.iter().map(|c| c.addressed_bytes).sum();
        let savings = if unicast_equivalent == 0 {
            0.0
        } else {
            1.0 - egress as f64 / unicast_equivalent as f64
        };
        RunReport {
            scenario: o.scenario.name.clone(),
            seed: o.scenario.seed,
            duration_ms: o.scenario.duration_ms,
            control_bytes: clients
                .iter()
                .map(|c| c.server_conn.control_bytes_sent)
                .sum(),
            clients,
            channels,
            streams_published: lengths.len(),
            server_egress_bytes: egress,
            unicast_equivalent_bytes: unicast_equivalent,
            savings,
            trace_hash: o.trace_hash.clone(),
            trace_lines: o.trace_lines,
            passed: o.verify.passed(),
            checks: o.verify.checks.clone(),
            warnings: o.verify.warnings.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "scenario {} (seed {}, {} ms)",
            self.scenario, self.seed, self.duration_ms
        );
        let complete = self.clients.iter().filter(|c| c.complete).count();
        let fallback = self.clients.iter().filter(|c| c.fallback).count();
        let _ = writeln!(
            s,
            "clients {}: {complete} complete, {fallback} fell back; {} streams published",
            self.clients.len(),
            self.streams_published
        );
        for c in &self.channels {
            let _ = writeln!(
                s,
                "channel {} @{} kbps: {} members, {} packets, {} resent, retx {} multicast / {} unicast",
                c.id,
                c.rate_kbps,
                c.members,
                c.stats.packets,
                c.stats.resend_packets,
                c.stats.retx_multicast,
                c.stats.retx_unicast
            );
        }
        let _ = writeln!(
            s,
            "server egress {} B vs unicast {} B: savings {:.1}%",
            self.server_egress_bytes,
            self.unicast_equivalent_bytes,
            self.savings * 100.0
        );
        for c in &self.checks {
            let status = if c.passed() { "ok" } else { "FAIL" };
            let _ = writeln!(
                s,
                "check {:<20} {status} ({} violations)",
                c.name, c.violations
            );
            for e in &c.examples {
                let _ = writeln!(s, "    {e}");
            }
        }
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        let _ = writeln!(
            s,
            "trace {} lines, sha256 {}",
            self.trace_lines, self.trace_hash
        );
        s
    }
}
