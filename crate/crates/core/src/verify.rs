// Licensed under the Apache License, Version 2.0 <LICENSE-APACHE or
// http://www.apache.org/licenses/LICENSE-2.0> or the MIT license
// <LICENSE-MIT or http://opensource.org/licenses/MIT>, at your
// option. This file may not be copied, modified, or distributed
// except according to those terms.

//! Offline invariant checkers over a trace. They see only trace lines, never
//! engine state, so a trace can be audited independently of the run that
//! produced it.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::time::Duration;

use serde::Serialize;

use crate::channel::ChannelState;
use crate::ranges::RangeSet;
use crate::trace::{Line, Path, Record, Verdict};
use crate::wire::{ChannelId, ClientLimits};
use crate::Time;

/// Names of the checks, in report order.
pub const CHECKS: [&str; 6] = [
    "budget",
    "ack_completeness",
    "anchoring",
    "conservation",
    "delivery",
    "retransmission_path",
];

const MAX_LISTED: usize = 20;

#[derive(Clone, Debug, Default, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub violations: u64,
    /// The first few violations.
    pub examples: Vec<String>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct VerifyReport {
    pub lines: u64,
    pub checks: Vec<CheckResult>,
    pub warnings: Vec<String>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn violations(&self) -> Vec<String> {
        self.checks
            .iter()
            .flat_map(|c| c.examples.iter().map(move |e| format!("{}: {e}", c.name)))
            .collect()
    }
}

type Key = (usize, ChannelId);

#[derive(Default)]
struct Budget {
    rates: HashMap<Key, u64>,
    limits: HashMap<usize, ClientLimits>,
    members: HashMap<usize, BTreeSet<ChannelId>>,
    server_limits: HashMap<usize, ClientLimits>,
    server_members: HashMap<usize, BTreeSet<ChannelId>>,
    /// Clients whose limits changed; checked once the timestamp moves on.
    deferred: BTreeSet<usize>,
}

impl Budget {
    fn sum(&self, c: usize, set: &BTreeSet<ChannelId>) -> u64 {
        set.iter()
            .map(|ch| self.rates.get(&(c, ch.clone())).copied().unwrap_or(0))
            .sum()
    }

    fn client_ok(&self, c: usize) -> Result<(), String> {
        let (Some(l), Some(m)) = (self.limits.get(&c), self.members.get(&c)) else {
            return Ok(());
        };
        let sum = self.sum(c, m);
        if sum > l.max_aggregate_rate_kbps || m.len() as u64 > l.max_channels_joined {
            return Err(format!(
                "client {c}: {} channels at {sum} kbps exceed {} kbps / {} channels",
                m.len(),
                l.max_aggregate_rate_kbps,
                l.max_channels_joined
            ));
        }
        Ok(())
    }
}

pub struct Checker {
    results: BTreeMap<&'static str, CheckResult>,
    warnings: Vec<String>,
    lines: u64,
    last_t: Time,
    bundling: Duration,
    retx_fraction: f64,
    budget: Budget,
    pending_acks: HashMap<Key, BTreeMap<u64, Time>>,
    digests: HashMap<Key, RangeSet>,
    verified: HashMap<Key, RangeSet>,
    /// Digests claimed to come from a packet whose verified receipt must be
    /// recorded at the same instant.
    awaiting: BTreeSet<(usize, ChannelId, u64)>,
    published: HashMap<u64, (u64, String)>,
    addressed: BTreeSet<(usize, u64)>,
    done: HashMap<(usize, u64), (u64, String)>,
    departed: HashSet<usize>,
    saw_run: bool,
}

impl Default for Checker {
    fn default() -> Self {
        Self::new()
    }
}

impl Checker {
    pub fn new() -> Self {
        let results = CHECKS
            .iter()
            .map(|n| {
                (
                    *n,
                    CheckResult {
                        name: n.to_string(),
                        ..CheckResult::default()
                    },
                )
            })
            .collect();
        Checker {
            results,
            warnings: Vec::new(),
            lines: 0,
            last_t: Time::ZERO,
            bundling: Duration::from_millis(25),
            retx_fraction: 0.5,
            budget: Budget::default(),
            pending_acks: HashMap::new(),
            digests: HashMap::new(),
            verified: HashMap::new(),
            awaiting: BTreeSet::new(),
            published: HashMap::new(),
            addressed: BTreeSet::new(),
            done: HashMap::new(),
            departed: HashSet::new(),
            saw_run: false,
        }
    }

    fn fail(&mut self, check: &'static str, msg: String) {
        let r = self.results.get_mut(check).expect("known check");
        r.violations += 1;
        if r.examples.len() < MAX_LISTED {
            r.examples.push(msg);
        }
    }

    fn advance(&mut self, t: Time) {
        if t == self.last_t {
            return;
        }
        for (c, ch, pn) in std::mem::take(&mut self.awaiting) {
            let msg = format!(
                "at {}: client {c} took digests from {ch}#{pn} without verifying it",
                self.last_t
            );
            self.fail("anchoring", msg);
        }
        for c in std::mem::take(&mut self.budget.deferred) {
            if let Err(e) = self.budget.client_ok(c) {
                self.fail("budget", format!("at {}: {e}", self.last_t));
            }
        }
        self.last_t = t;
    }

    pub fn observe(&mut self, line: &Line) {
        self.lines += 1;
        let t = line.t;
        if t < self.last_t {
            self.warnings
                .push(format!("line {}: time goes backwards", self.lines));
        }
        self.advance(t);
        match &line.record {
            Record::Run {
                ack_bundling_us,
                multicast_retx_fraction,
                ..
            } => {
                self.saw_run = true;
                self.bundling = Duration::from_micros(*ack_bundling_us);
                self.retx_fraction = *multicast_retx_fraction;
            }
            Record::Limits { c, limits } => {
                self.budget.limits.insert(*c, limits.clone());
                self.budget.deferred.insert(*c);
            }
            Record::LimitsRx { c, limits } => {
                self.budget.server_limits.insert(*c, limits.clone());
            }
            Record::Announced { c, ch, rate_kbps } => {
                self.budget.rates.insert((*c, ch.clone()), *rate_kbps);
            }
            Record::Transition {
                c, ch, old, new, ..
            } => {
                let was = old.is_some_and(ChannelState::is_member);
                let m = self.budget.members.entry(*c).or_default();
                if new.is_member() {
                    m.insert(ch.clone());
                } else {
                    m.remove(ch);
                }
                if new.is_member() && !was {
                    if let Err(e) = self.budget.client_ok(*c) {
                        self.fail("budget", format!("at {t}: {e}"));
                    }
                }
            }
            Record::StateTx { c, ch, state, .. } => {
                if !state.is_member() {
                    self.budget.server_members.entry(*c).or_default().remove(ch);
                }
            }
            Record::JoinTx { c, ch } => {
                let set = self.budget.server_members.entry(*c).or_default();
                set.insert(ch.clone());
                let set = set.clone();
                let sum = self.budget.sum(*c, &set);
                if let Some(l) = self.budget.server_limits.get(c) {
                    if sum > l.max_aggregate_rate_kbps || set.len() as u64 > l.max_channels_joined {
                        let msg = format!(
                            "at {t}: join of {ch} for client {c} brings it to {sum} kbps over {} kbps",
                            l.max_aggregate_rate_kbps
                        );
                        self.fail("budget", msg);
                    }
                }
            }
            Record::LeaveTx { c, ch, .. } | Record::Fallback { c, ch, .. } => {
                self.budget.server_members.entry(*c).or_default().remove(ch);
            }
            Record::Rx {
                c,
                ch,
                pn,
                v,
                dl,
                inj,
                ..
            } => {
                if *dl > 0 && *v != Verdict::Verified {
                    self.fail(
                        "anchoring",
                        format!("at {t}: client {c} delivered {dl} bytes from a {v:?} packet"),
                    );
                }
                if *inj && (*dl > 0 || *v == Verdict::Verified) {
                    self.fail(
                        "anchoring",
                        format!("at {t}: client {c} accepted an injected datagram"),
                    );
                }
                if *v == Verdict::Verified {
                    let pn = pn.expect("verified packets have numbers");
                    let key = (*c, ch.clone());
                    if !self.digests.get(&key).is_some_and(|d| d.contains(pn)) {
                        self.fail(
                            "anchoring",
                            format!(
                                "at {t}: client {c} verified {ch}#{pn} without a trusted digest"
                            ),
                        );
                    }
                    self.awaiting.remove(&(*c, ch.clone(), pn));
                    self.verified.entry(key.clone()).or_default().insert_one(pn);
                    self.pending_acks.entry(key).or_default().insert(pn, t);
                }
            }
            Record::Digests {
                c,
                ch,
                start,
                n,
                via_pn,
            } => {
                let key = (*c, ch.clone());
                if let Some(p) = via_pn {
                    let prior = self.verified.get(&key).is_some_and(|v| v.contains(*p));
                    if !prior {
                        self.awaiting.insert((*c, ch.clone(), *p));
                    }
                }
                self.digests
                    .entry(key)
                    .or_default()
                    .insert(*start..start + n);
            }
            Record::AckTx { c, ch, ranges } => {
                let key = (*c, ch.clone());
                let bundling = self.bundling;
                let mut late = Vec::new();
                if let Some(p) = self.pending_acks.get_mut(&key) {
                    for (lo, hi) in ranges {
                        let acked: Vec<u64> = p.range(*lo..=*hi).map(|(k, _)| *k).collect();
                        for k in acked {
                            let rx = p.remove(&k).expect("present");
                            if t.since(rx) > bundling {
                                late.push(k);
                            }
                        }
                    }
                    let stale: Vec<u64> = p
                        .iter()
                        .filter(|(_, rx)| t.since(**rx) > bundling)
                        .map(|(k, _)| *k)
                        .collect();
                    for k in stale {
                        p.remove(&k);
                        late.push(k);
                    }
                }
                for k in late {
                    self.fail(
                        "ack_completeness",
                        format!("at {t}: client {c} acked {ch}#{k} after the bundling delay"),
                    );
                }
            }
            Record::Disconnect { c } | Record::ConnClosed { c, .. } => {
                self.departed.insert(*c);
                self.pending_acks.retain(|(cc, _), _| cc != c);
            }
            Record::Publish {
                stream,
                len,
                sha256,
                ..
            } => {
                self.published.insert(*stream, (*len, sha256.clone()));
            }
            Record::Addressed { c, stream } => {
                self.addressed.insert((*c, *stream));
            }
            Record::StreamDone {
                c,
                stream,
                len,
                sha256,
            } => {
                match self.published.get(stream) {
                    Some((l, s)) if l == len && s == sha256 => {}
                    Some(_) => self.fail(
                        "delivery",
                        format!(
                            "at {t}: client {c} completed stream {stream} with different content"
                        ),
                    ),
                    None => self.fail(
                        "delivery",
                        format!("at {t}: client {c} completed unpublished stream {stream}"),
                    ),
                }
                self.done.insert((*c, *stream), (*len, sha256.clone()));
            }
            Record::Retx {
                ch,
                pn,
                path,
                lost,
                responsible,
            } => {
                let multicast = *lost as f64 >= self.retx_fraction * *responsible as f64;
                let expected = if multicast {
                    Path::Multicast
                } else {
                    Path::Unicast
                };
                if *path != expected || *lost == 0 || lost > responsible {
                    self.fail(
                        "retransmission_path",
                        format!("at {t}: {ch}#{pn} lost by {lost}/{responsible} went {path:?}"),
                    );
                }
            }
            Record::Links { links, .. } => {
                for (name, l) in links {
                    if !l.conserved() {
                        self.fail("conservation", format!("link {name}: {l:?}"));
                    }
                }
            }
            _ => {}
        }
    }

    pub fn finish(mut self) -> VerifyReport {
        let end = self.last_t;
        self.advance(Time::MAX);
        if self.lines == 0 {
            self.warnings.push("empty trace".into());
        } else if !self.saw_run {
            self.warnings.push("trace has no run record".into());
        }
        let bundling = self.bundling;
        let mut late = Vec::new();
        for ((c, ch), p) in &self.pending_acks {
            for (pn, rx) in p {
                if end.since(*rx) > bundling {
                    late.push(format!("client {c} never acked {ch}#{pn}"));
                }
            }
        }
        late.sort();
        for m in late {
            self.fail("ack_completeness", m);
        }
        let missing: Vec<(usize, u64)> = self
            .addressed
            .iter()
            .filter(|(c, s)| !self.departed.contains(c) && !self.done.contains_key(&(*c, *s)))
            .copied()
            .collect();
        for (c, s) in missing {
            self.fail("delivery", format!("client {c} never completed stream {s}"));
        }
        VerifyReport {
            lines: self.lines,
            checks: self.results.into_values().collect(),
            warnings: self.warnings,
        }
    }
}

/// Checks a whole trace.
pub fn verify_lines<'a>(lines: impl IntoIterator<Item = &'a Line>) -> VerifyReport {
    let mut c = Checker::new();
    for l in lines {
        c.observe(l);
    }
    c.finish()
}
