// Licensed under the Apache License, Version 2.0 <LICENSE-APACHE or
// http://www.apache.org/licenses/LICENSE-2.0> or the MIT license
// <LICENSE-MIT or http://opensource.org/licenses/MIT>, at your
// option. This file may not be copied, modified, or distributed
// except according to those terms.

//! Line-delimited JSON trace. Every line is one [`Line`]: a timestamp in
//! microseconds plus a flattened [`Record`]. The trace hash is the SHA-256
//! of the exact bytes of all lines, newline-terminated.

use std::io::{self, BufRead, Write};

use ring::digest;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelEvent, ChannelState};
use crate::netsim::{AttackCounters, LinkCounters};
use crate::wire::{ChannelId, ClientLimits};
use crate::Time;

/// Disposition of one multicast datagram at a client.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// Verified and decrypted; its frames were processed.
    Verified,
    /// Held until its digest arrives.
    Unknown,
    /// Verified but held until a key for it arrives.
    NoKey,
    Duplicate,
    Mismatch,
    Malformed,
    /// Packet number far outside the window of plausible packets.
    Implausible,
    /// Dropped from the hold buffer after the time limit.
    Expired,
    /// Dropped from the full hold buffer.
    Evicted,
    /// Handed to a channel the client is not a member of.
    Unmatched,
    /// Verified and decrypted but dropped by flow control.
    FlowBlocked,
}

impl Verdict {
    /// Whether the datagram counts towards the spurious-traffic limit.
    pub fn is_spurious(self) -> bool {
        matches!(
            self,
            Verdict::Mismatch | Verdict::Malformed | Verdict::Implausible | Verdict::Expired
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Path {
    Multicast,
    Unicast,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelInfo {
    pub id: ChannelId,
    pub rate_kbps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "ev", rename_all = "snake_case")]
pub enum Record {
    Run {
        scenario: String,
        seed: u64,
        clients: usize,
        channels: Vec<ChannelInfo>,
        ack_bundling_us: u64,
        multicast_retx_fraction: f64,
    },
    Limits {
        c: usize,
        limits: ClientLimits,
    },
    Announced {
        c: usize,
        ch: ChannelId,
        rate_kbps: u64,
    },
    Transition {
        c: usize,
        ch: ChannelId,
        old: Option<ChannelState>,
        event: ChannelEvent,
        new: ChannelState,
    },
    StateTx {
        c: usize,
        ch: ChannelId,
        state: ChannelState,
        reason: u64,
    },
    Rx {
        c: usize,
        ch: ChannelId,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        pn: Option<u64>,
        v: Verdict,
        /// Stream bytes handed to the application because of this packet.
        dl: u64,
        #[serde(skip)]
        tag: u64,
        #[serde(default)]
        inj: bool,
    },
    Digests {
        c: usize,
        ch: ChannelId,
        start: u64,
        n: u64,
        /// Carrying packet number, or absent when delivered over unicast.
        #[serde(skip_serializing_if = "Option::is_none", default)]
        via_pn: Option<u64>,
    },
    Key {
        c: usize,
        ch: ChannelId,
        from: u64,
    },
    AckTx {
        c: usize,
        ch: ChannelId,
        ranges: Vec<(u64, u64)>,
    },
    StreamDone {
        c: usize,
        stream: u64,
        len: u64,
        sha256: String,
    },
    Disconnect {
        c: usize,
    },
    ConnClosed {
        c: usize,
        code: u64,
    },
    JoinTx {
        c: usize,
        ch: ChannelId,
    },
    LeaveTx {
        c: usize,
        ch: ChannelId,
        reason: u64,
    },
    Fallback {
        c: usize,
        ch: ChannelId,
        reason: u64,
    },
    McTx {
        ch: ChannelId,
        pn: u64,
        len: u64,
        #[serde(skip_serializing_if = "std::ops::Not::not", default)]
        resend: bool,
    },
    Retx {
        ch: ChannelId,
        pn: u64,
        path: Path,
        lost: u64,
        responsible: u64,
    },
    Rotate {
        ch: ChannelId,
        boundary: u64,
        unicast_only: bool,
    },
    /// Loss pattern hint: every responsible client lost `pn` (upstream), or
    /// client `c` lost packets on several channels at once.
    LossFlag {
        ch: ChannelId,
        pn: u64,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        c: Option<usize>,
        upstream: bool,
    },
    Publish {
        ch: ChannelId,
        stream: u64,
        len: u64,
        sha256: String,
    },
    /// Stream `stream` is owed to client `c`.
    Addressed {
        c: usize,
        stream: u64,
    },
    /// Limits as received by the server.
    LimitsRx {
        c: usize,
        limits: ClientLimits,
    },
    Links {
        links: Vec<(String, LinkCounters)>,
        attacks: AttackCounters,
    },
    End {
        violations: Vec<String>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub t: Time,
    #[serde(flatten)]
    pub record: Record,
}

/// Serialises lines, hashing them and optionally writing them out.
pub struct TraceWriter {
    hash: digest::Context,
    out: Option<Box<dyn Write>>,
    lines: u64,
    buf: Vec<u8>,
}

impl TraceWriter {
    pub fn new(out: Option<Box<dyn Write>>) -> Self {
        TraceWriter {
            hash: digest::Context::new(&digest::SHA256),
            out,
            lines: 0,
            buf: Vec::with_capacity(256),
        }
    }

    pub fn record(&mut self, t: Time, record: Record) -> io::Result<()> {
        self.write_line(&Line { t, record })
    }

    pub fn write_line(&mut self, line: &Line) -> io::Result<()> {
        self.buf.clear();
        serde_json::to_writer(&mut self.buf, line)?;
        self.buf.push(b'\n');
        self.hash.update(&self.buf);
        self.lines += 1;
        if let Some(o) = self.out.as_mut() {
            o.write_all(&self.buf)?;
        }
        Ok(())
    }

    pub fn lines(&self) -> u64 {
        self.lines
    }

    /// Flushes the sink and returns the hex trace hash.
    pub fn finish(self) -> io::Result<String> {
        if let Some(mut o) = self.out {
            o.flush()?;
        }
        Ok(hex::encode(self.hash.finish()))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ParseError {
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn parse_line(s: &str) -> Result<Line, serde_json::Error> {
    serde_json::from_str(s)
}

/// Reads a whole trace. Blank lines are ignored.
pub fn read_trace(r: impl BufRead) -> Result<Vec<Line>, ParseError> {
    let mut out = Vec::new();
    for (i, l) in r.lines().enumerate() {
        let l = l?;
        if l.trim().is_empty() {
            continue;
        }
        out.push(parse_line(&l).map_err(|source| ParseError::Json {
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}

/// Hash of a trace file's content, as computed while writing it.
pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(digest::digest(&digest::SHA256, bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_hash() {
        let mut w = TraceWriter::new(None);
        let r = Record::Key {
            c: 1,
            ch: ChannelId::new(&[1, 2]).unwrap(),
            from: 1024,
        };
        w.record(Time::from_millis(3), r.clone()).unwrap();
        let line = r#"{"t":3000,"ev":"key","c":1,"ch":"0102","from":1024}"#;
        assert_eq!(
            w.finish().unwrap(),
            hash_bytes(format!("{line}\n").as_bytes())
        );
        let parsed = parse_line(line).unwrap();
        assert_eq!(parsed.record, r);
    }

    #[test]
    fn bad_line_reports_position() {
        let input = "{\"t\":1,\"ev\":\"disconnect\",\"c\":1}\n\nnot json\n";
        match read_trace(input.as_bytes()) {
            Err(ParseError::Json { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }
}
