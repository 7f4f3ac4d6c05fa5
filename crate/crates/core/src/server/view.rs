// Licensed under the Apache License, Version 2.0 <LICENSE-APACHE or
// http://www.apache.org/licenses/LICENSE-2.0> or the MIT license
// <LICENSE-MIT or http://opensource.org/licenses/MIT>, at your
// option. This file may not be copied, modified, or distributed
// except according to those terms.

//! What the server knows about each client.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::ops::Range;

use bytes::Bytes;

use crate::channel::ChannelState;
use crate::conn::{Conn, StreamChunk};
use crate::ranges::RangeSet;
use crate::wire::{ChannelId, ClientLimits};
use crate::Time;

/// Server-side state of one client on one channel. Changes only when a
/// frame arrives from the client or a timer fires.
#[derive(Debug, Default)]
pub struct ClientChannel {
    /// Last state the client reported.
    pub reported: Option<ChannelState>,
    /// Joined, or asked to join, and so responsible for acknowledging.
    pub member: bool,
    /// Content is duplicated onto the unicast connection.
    pub fallback: bool,
    /// The channel carries content this client is assigned.
    pub assigned: bool,
    pub join_sent: Option<Time>,
    /// Reception confirmed by a Joined state or an acknowledgement.
    pub receiving: bool,
    pub declined: bool,
    pub largest_acked: Option<u64>,
    /// Lowest packet number of the first acknowledgement. Earlier packets
    /// went out before reception began and do not count as heavy loss.
    pub first_acked: Option<u64>,
    pub last_ack: Option<Time>,
    /// Packets this client is responsible for, with send times.
    pub outstanding: BTreeMap<u64, Time>,
    /// Outstanding packets whose digests were resent over unicast. These
    /// cannot be acknowledged before the repair lands, so only the time
    /// threshold declares them lost.
    pub repaired: BTreeSet<u64>,
    /// (time, pn, lost) per resolved packet, for the heavy-loss check.
    pub history: VecDeque<(Time, u64, bool)>,
    pub last_loss: Option<Time>,
    pub lost: u64,
    pub acked: u64,
}

impl ClientChannel {
    /// Loss fraction over the window ending `settle` before `now`. Recent
    /// verdicts are left out while a late acknowledgement may still clear them.
    pub fn loss_fraction(
        &mut self,
        now: Time,
        window: std::time::Duration,
        settle: std::time::Duration,
    ) -> (usize, f64) {
        while self
            .history
            .front()
            .is_some_and(|(t, _, _)| now.since(*t) > window + settle)
        {
            self.history.pop_front();
        }
        let settled = self
            .history
            .iter()
            .filter(|(t, _, _)| now.since(*t) >= settle);
        let (n, lost) = settled.fold((0, 0), |(n, l), (_, _, x)| (n + 1, l + *x as usize));
        (n, if n == 0 { 0.0 } else { lost as f64 / n as f64 })
    }

    /// A late acknowledgement clears an earlier loss verdict.
    pub fn unlose(&mut self, range: &std::ops::RangeInclusive<u64>) -> u64 {
        let mut n = 0;
        for (_, pn, lost) in self.history.iter_mut() {
            if *lost && range.contains(pn) {
                *lost = false;
                n += 1;
            }
        }
        self.lost -= n;
        self.acked += n;
        n
    }
}

pub struct ClientView {
    pub node: usize,
    pub conn: Conn,
    pub hello: bool,
    pub multicast: bool,
    pub connected: bool,
    pub limits: Option<ClientLimits>,
    pub channels: BTreeMap<ChannelId, ClientChannel>,
    /// Channel serving each program.
    pub assignment: BTreeMap<usize, ChannelId>,
    /// Stream bytes known to be at the client, per addressed stream.
    pub addressed: BTreeMap<u64, RangeSet>,
    peer_max_data: u64,
    fc_high: HashMap<u64, u64>,
    fc_used: u64,
    queue: VecDeque<StreamChunk>,
    pub unicast_stream_bytes: u64,
}

impl ClientView {
    pub fn new(node: usize, conn: Conn) -> Self {
        ClientView {
            node,
            conn,
            hello: false,
            multicast: false,
            connected: true,
            limits: None,
            channels: BTreeMap::new(),
            assignment: BTreeMap::new(),
            addressed: BTreeMap::new(),
            peer_max_data: 0,
            fc_high: HashMap::new(),
            fc_used: 0,
            queue: VecDeque::new(),
            unicast_stream_bytes: 0,
        }
    }

    pub fn channel(&mut self, id: &ChannelId) -> &mut ClientChannel {
        self.channels.entry(id.clone()).or_default()
    }

    /// Rates of channels the client is a member of, other than `except`.
    pub fn member_rates(
        &self,
        rates: &BTreeMap<ChannelId, u64>,
        except: Option<&ChannelId>,
    ) -> Vec<u64> {
        self.channels
            .iter()
            .filter(|(id, c)| c.member && Some(*id) != except)
            .map(|(id, _)| rates[id])
            .collect()
    }

    pub fn set_peer_max_data(&mut self, v: u64) {
        self.peer_max_data = self.peer_max_data.max(v);
    }

    pub fn flow_credit(&self) -> u64 {
        self.peer_max_data.saturating_sub(self.fc_used)
    }

    fn raise(&mut self, stream_id: u64, end: u64) {
        let h = self.fc_high.entry(stream_id).or_default();
        if end > *h {
            self.fc_used += end - *h;
            *h = end;
        }
    }

    /// Counts multicast data the client acknowledged against flow control.
    pub fn on_multicast_acked(&mut self, stream_id: u64, range: Range<u64>) {
        self.raise(stream_id, range.end);
        if let Some(c) = self.addressed.get_mut(&stream_id) {
            c.insert(range);
        }
    }

    /// Queues the parts of `range` the client is not known to have.
    /// Returns the number of bytes queued.
    pub fn send_uncovered(&mut self, stream_id: u64, range: Range<u64>, data: &Bytes) -> u64 {
        let len = data.len() as u64;
        let Some(covered) = self.addressed.get_mut(&stream_id) else {
            return 0;
        };
        let gaps = covered.gaps(range);
        let mut n = 0;
        for g in gaps {
            if g.is_empty() {
                continue;
            }
            covered.insert(g.clone());
            n += g.end - g.start;
            self.queue.push_back(StreamChunk {
                stream_id,
                offset: g.start,
                data: data.slice(g.start as usize..g.end as usize),
                fin: g.end == len,
            });
        }
        n
    }

    /// Moves queued stream data into the connection as flow control allows.
    pub fn pump(&mut self) {
        loop {
            let credit = self.flow_credit();
            let Some(c) = self.queue.front_mut() else {
                break;
            };
            let high = self.fc_high.get(&c.stream_id).copied().unwrap_or(0);
            let end = c.offset + c.data.len() as u64;
            let allowed = high + credit;
            if allowed < end && allowed <= c.offset {
                break;
            }
            let take_end = end.min(allowed);
            let n = (take_end - c.offset) as usize;
            let piece = StreamChunk {
                stream_id: c.stream_id,
                offset: c.offset,
                data: c.data.slice(..n),
                fin: c.fin && take_end == end,
            };
            if take_end == end {
                self.queue.pop_front();
            } else {
                c.data = c.data.slice(n..);
                c.offset = take_end;
            }
            self.raise(piece.stream_id, take_end);
            self.unicast_stream_bytes += n as u64;
            self.conn.send_stream(piece);
        }
    }

    pub fn queued_bytes(&self) -> u64 {
        self.queue.iter().map(|c| c.data.len() as u64).sum()
    }

    pub fn clear_queue(&mut self) {
        self.queue.clear();
    }
}
