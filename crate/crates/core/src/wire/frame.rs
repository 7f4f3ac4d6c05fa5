// Licensed under the Apache License, Version 2.0 <LICENSE-APACHE or
// http://www.apache.org/licenses/LICENSE-2.0> or the MIT license
// <LICENSE-MIT or http://opensource.org/licenses/MIT>, at your
// option. This file may not be copied, modified, or distributed
// except according to those terms.

//! The nine multicast extension frames.

use std::fmt;
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};
use std::ops::RangeInclusive;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::params::{read_client_limits, truncation_is_malformed, write_client_limits};
use super::{AeadId, ClientLimits, Error, HashId, Reader, Result, WriteExt};
use crate::channel::ChannelState;

/// First codepoint of the extension block. The nine frames take consecutive
/// values in declaration order, all encoded as 4-byte varints.
pub const MC_FRAME_BASE: u64 = 0x6d_6300;

pub const MC_ANNOUNCE: u64 = MC_FRAME_BASE;
pub const MC_JOIN: u64 = MC_FRAME_BASE + 1;
pub const MC_LEAVE: u64 = MC_FRAME_BASE + 2;
pub const MC_RETIRE: u64 = MC_FRAME_BASE + 3;
pub const MC_STATE: u64 = MC_FRAME_BASE + 4;
pub const MC_INTEGRITY: u64 = MC_FRAME_BASE + 5;
pub const MC_KEY: u64 = MC_FRAME_BASE + 6;
pub const MC_ACK: u64 = MC_FRAME_BASE + 7;
pub const MC_LIMITS: u64 = MC_FRAME_BASE + 8;

pub const MC_FRAME_TYPES: [u64; 9] = [
    MC_ANNOUNCE,
    MC_JOIN,
    MC_LEAVE,
    MC_RETIRE,
    MC_STATE,
    MC_INTEGRITY,
    MC_KEY,
    MC_ACK,
    MC_LIMITS,
];

pub fn is_mc_frame_type(t: u64) -> bool {
    (MC_ANNOUNCE..=MC_LIMITS).contains(&t)
}

pub const MIN_SECRET_LEN: usize = 16;
pub const MAX_SECRET_LEN: usize = 64;
pub const MAX_DIGEST_LEN: usize = 64;

/// Channel identifier. Same format as a QUIC connection ID: 1 to 20 opaque
/// bytes, carried where a packet would carry its destination connection ID.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ChannelId(Vec<u8>);

impl ChannelId {
    pub const MAX_LEN: usize = 20;

    pub fn new(bytes: &[u8]) -> Result<Self> {
        if bytes.is_empty() || bytes.len() > Self::MAX_LEN {
            return Err(Error::Encoding("channel id length out of range"));
        }
        Ok(ChannelId(bytes.to_vec()))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub(crate) fn write(&self, out: &mut Vec<u8>) {
        out.put_u8(self.0.len() as u8);
        out.extend_from_slice(&self.0);
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self> {
        let len = r.u8()? as usize;
        if len == 0 || len > Self::MAX_LEN {
            return Err(Error::Malformed("channel id length"));
        }
        Ok(ChannelId(r.bytes(len)?.to_vec()))
    }
}

impl fmt::Debug for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ChannelId({})", hex::encode(&self.0))
    }
}

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(&self.0))
    }
}

impl std::str::FromStr for ChannelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bytes = hex::decode(s).map_err(|_| Error::Encoding("channel id is not hex"))?;
        ChannelId::new(&bytes)
    }
}

impl Serialize for ChannelId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(&self.0))
    }
}

impl<'de> Deserialize<'de> for ChannelId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub(crate) mod hexbytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}

pub(crate) mod hexlist {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[Vec<u8>], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(hex::encode))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<u8>>, D::Error> {
        let v = Vec::<String>::deserialize(d)?;
        v.into_iter()
            .map(|s| hex::decode(s).map_err(serde::de::Error::custom))
            .collect()
    }
}

/// Everything a client needs to later join and decrypt one SSM channel.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Announce {
    pub channel_id: ChannelId,
    pub source_ip: IpAddr,
    pub group_ip: IpAddr,
    pub udp_port: u16,
    pub aead_id: AeadId,
    pub hash_id: HashId,
    #[serde(with = "hexbytes")]
    pub header_secret: Vec<u8>,
    pub max_rate_kbps: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum McFrame {
    Announce(Announce),
    Join {
        channel_id: ChannelId,
    },
    Leave {
        channel_id: ChannelId,
        reason_code: u64,
    },
    Retire {
        channel_id: ChannelId,
    },
    State {
        channel_id: ChannelId,
        new_state: ChannelState,
        reason_code: u64,
    },
    Integrity {
        channel_id: ChannelId,
        start_packet_number: u64,
        #[serde(with = "hexlist")]
        digests: Vec<Vec<u8>>,
    },
    Key {
        channel_id: ChannelId,
        from_packet_number: u64,
        #[serde(with = "hexbytes")]
        secret: Vec<u8>,
    },
    /// Ranges are strictly descending and separated by at least one
    /// unacknowledged packet number, as in a regular ACK frame.
    Ack {
        channel_id: ChannelId,
        ack_ranges: Vec<RangeInclusive<u64>>,
        ack_delay: u64,
    },
    Limits {
        limits: ClientLimits,
    },
}

impl McFrame {
    pub fn channel_id(&self) -> Option<&ChannelId> {
        match self {
            McFrame::Announce(a) => Some(&a.channel_id),
            McFrame::Join { channel_id }
            | McFrame::Leave { channel_id, .. }
            | McFrame::Retire { channel_id }
            | McFrame::State { channel_id, .. }
            | McFrame::Integrity { channel_id, .. }
            | McFrame::Key { channel_id, .. }
            | McFrame::Ack { channel_id, .. } => Some(channel_id),
            McFrame::Limits { .. } => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            McFrame::Announce(_) => "MC_ANNOUNCE",
            McFrame::Join { .. } => "MC_JOIN",
            McFrame::Leave { .. } => "MC_LEAVE",
            McFrame::Retire { .. } => "MC_RETIRE",
            McFrame::State { .. } => "MC_STATE",
            McFrame::Integrity { .. } => "MC_INTEGRITY",
            McFrame::Key { .. } => "MC_KEY",
            McFrame::Ack { .. } => "MC_ACK",
            McFrame::Limits { .. } => "MC_LIMITS",
        }
    }
}

pub fn frame_type(f: &McFrame) -> u64 {
    match f {
        McFrame::Announce(_) => MC_ANNOUNCE,
        McFrame::Join { .. } => MC_JOIN,
        McFrame::Leave { .. } => MC_LEAVE,
        McFrame::Retire { .. } => MC_RETIRE,
        McFrame::State { .. } => MC_STATE,
        McFrame::Integrity { .. } => MC_INTEGRITY,
        McFrame::Key { .. } => MC_KEY,
        McFrame::Ack { .. } => MC_ACK,
        McFrame::Limits { .. } => MC_LIMITS,
    }
}

fn write_ip(out: &mut Vec<u8>, ip: &IpAddr) {
    match ip {
        IpAddr::V4(a) => out.extend_from_slice(&a.octets()),
        IpAddr::V6(a) => out.extend_from_slice(&a.octets()),
    }
}

fn check_secret(s: &[u8]) -> Result<()> {
    if !(MIN_SECRET_LEN..=MAX_SECRET_LEN).contains(&s.len()) {
        return Err(Error::Encoding("secret length out of range"));
    }
    Ok(())
}

pub(crate) fn write_frame(out: &mut Vec<u8>, f: &McFrame) -> Result<()> {
    out.put_varint(frame_type(f))?;
    match f {
        McFrame::Announce(a) => {
            a.channel_id.write(out);
            let family = match (a.source_ip, a.group_ip) {
                (IpAddr::V4(_), IpAddr::V4(_)) => 4,
                (IpAddr::V6(_), IpAddr::V6(_)) => 6,
                _ => return Err(Error::Encoding("mixed address families in announce")),
            };
            check_secret(&a.header_secret)?;
            out.put_u8(family);
            write_ip(out, &a.source_ip);
            write_ip(out, &a.group_ip);
            out.put_u16(a.udp_port);
            out.put_u16(a.aead_id.0);
            out.put_u16(a.hash_id.0);
            out.put_vbytes(&a.header_secret)?;
            out.put_varint(a.max_rate_kbps)?;
        }
        McFrame::Join { channel_id } | McFrame::Retire { channel_id } => channel_id.write(out),
        McFrame::Leave {
            channel_id,
            reason_code,
        } => {
            channel_id.write(out);
            out.put_varint(*reason_code)?;
        }
        McFrame::State {
            channel_id,
            new_state,
            reason_code,
        } => {
            channel_id.write(out);
            out.put_u8(new_state.code());
            out.put_varint(*reason_code)?;
        }
        McFrame::Integrity {
            channel_id,
            start_packet_number,
            digests,
        } => {
            let size = digests
                .first()
                .map(Vec::len)
                .ok_or(Error::Encoding("integrity frame without digests"))?;
            if size == 0 || size > MAX_DIGEST_LEN || digests.iter().any(|d| d.len() != size) {
                return Err(Error::Encoding("inconsistent digest sizes"));
            }
            channel_id.write(out);
            out.put_varint(*start_packet_number)?;
            out.put_u8(size as u8);
            out.put_varint((size * digests.len()) as u64)?;
            for d in digests {
                out.extend_from_slice(d);
            }
        }
        McFrame::Key {
            channel_id,
            from_packet_number,
            secret,
        } => {
            check_secret(secret)?;
            channel_id.write(out);
            out.put_varint(*from_packet_number)?;
            out.put_vbytes(secret)?;
        }
        McFrame::Ack {
            channel_id,
            ack_ranges,
            ack_delay,
        } => {
            channel_id.write(out);
            write_ack_ranges(out, ack_ranges, *ack_delay)?;
        }
        McFrame::Limits { limits } => write_client_limits(out, limits)?,
    }
    Ok(())
}

/// Largest, delay, range count, first range, then (gap, length) pairs.
pub(crate) fn write_ack_ranges(
    out: &mut Vec<u8>,
    ranges: &[RangeInclusive<u64>],
    delay: u64,
) -> Result<()> {
    let first = ranges
        .first()
        .ok_or(Error::Encoding("ack without ranges"))?;
    if first.start() > first.end() {
        return Err(Error::Encoding("inverted ack range"));
    }
    out.put_varint(*first.end())?;
    out.put_varint(delay)?;
    out.put_varint(ranges.len() as u64 - 1)?;
    out.put_varint(first.end() - first.start())?;
    let mut prev_smallest = *first.start();
    for r in &ranges[1..] {
        if r.start() > r.end() {
            return Err(Error::Encoding("inverted ack range"));
        }
        // Ranges must leave at least one missing packet number between them.
        if r.end().checked_add(2).is_none_or(|e| e > prev_smallest) {
            return Err(Error::Encoding("ack ranges not strictly descending"));
        }
        out.put_varint(prev_smallest - r.end() - 2)?;
        out.put_varint(r.end() - r.start())?;
        prev_smallest = *r.start();
    }
    Ok(())
}

pub(crate) fn read_ack_ranges(r: &mut Reader<'_>) -> Result<(Vec<RangeInclusive<u64>>, u64)> {
    let largest = r.varint()?;
    let delay = r.varint()?;
    let count = r.count(2)?;
    let first = r.varint()?;
    let mut smallest = largest
        .checked_sub(first)
        .ok_or(Error::Malformed("ack range underflow"))?;
    let mut ranges = Vec::with_capacity(count + 1);
    ranges.push(smallest..=largest);
    for _ in 0..count {
        let gap = r.varint()?;
        let len = r.varint()?;
        let hi = smallest
            .checked_sub(gap)
            .and_then(|v| v.checked_sub(2))
            .ok_or(Error::Malformed("ack gap underflow"))?;
        let lo = hi
            .checked_sub(len)
            .ok_or(Error::Malformed("ack range underflow"))?;
        ranges.push(lo..=hi);
        smallest = lo;
    }
    Ok((ranges, delay))
}

fn read_ip(r: &mut Reader<'_>, family: u8) -> Result<IpAddr> {
    Ok(match family {
        4 => {
            let b = r.bytes(4)?;
            IpAddr::V4(Ipv4Addr::new(b[0], b[1], b[2], b[3]))
        }
        _ => {
            let mut a = [0u8; 16];
            a.copy_from_slice(r.bytes(16)?);
            IpAddr::V6(Ipv6Addr::from(a))
        }
    })
}

fn read_secret(r: &mut Reader<'_>) -> Result<Vec<u8>> {
    let s = r.vbytes()?;
    if !(MIN_SECRET_LEN..=MAX_SECRET_LEN).contains(&s.len()) {
        return Err(Error::Malformed("secret length"));
    }
    Ok(s.to_vec())
}

/// Frame body decoder with truncation reported as [`Error::Incomplete`], for
/// callers that parse a byte stream that may still be growing.
pub(crate) fn read_frame(r: &mut Reader<'_>) -> Result<McFrame> {
    let t = r.varint()?;
    if !is_mc_frame_type(t) {
        return Err(Error::NotMcFrame(t));
    }
    let f = match t {
        MC_ANNOUNCE => {
            let channel_id = ChannelId::read(r)?;
            let family = r.u8()?;
            if family != 4 && family != 6 {
                return Err(Error::Malformed("address family"));
            }
            let source_ip = read_ip(r, family)?;
            let group_ip = read_ip(r, family)?;
            McFrame::Announce(Announce {
                channel_id,
                source_ip,
                group_ip,
                udp_port: r.u16()?,
                aead_id: AeadId(r.u16()?),
                hash_id: HashId(r.u16()?),
                header_secret: read_secret(r)?,
                max_rate_kbps: r.varint()?,
            })
        }
        MC_JOIN => McFrame::Join {
            channel_id: ChannelId::read(r)?,
        },
        MC_LEAVE => McFrame::Leave {
            channel_id: ChannelId::read(r)?,
            reason_code: r.varint()?,
        },
        MC_RETIRE => McFrame::Retire {
            channel_id: ChannelId::read(r)?,
        },
        MC_STATE => McFrame::State {
            channel_id: ChannelId::read(r)?,
            new_state: ChannelState::from_code(r.u8()?)
                .ok_or(Error::Malformed("unknown channel state"))?,
            reason_code: r.varint()?,
        },
        MC_INTEGRITY => {
            let channel_id = ChannelId::read(r)?;
            let start_packet_number = r.varint()?;
            let size = r.u8()? as usize;
            if size == 0 || size > MAX_DIGEST_LEN {
                return Err(Error::Malformed("digest size"));
            }
            let area = r.vbytes()?;
            if area.is_empty() || area.len() % size != 0 {
                return Err(Error::Malformed(
                    "digest area not a multiple of digest size",
                ));
            }
            McFrame::Integrity {
                channel_id,
                start_packet_number,
                digests: area.chunks(size).map(<[u8]>::to_vec).collect(),
            }
        }
        MC_KEY => McFrame::Key {
            channel_id: ChannelId::read(r)?,
            from_packet_number: r.varint()?,
            secret: read_secret(r)?,
        },
        MC_ACK => {
            let channel_id = ChannelId::read(r)?;
            let (ack_ranges, ack_delay) = read_ack_ranges(r)?;
            McFrame::Ack {
                channel_id,
                ack_ranges,
                ack_delay,
            }
        }
        _ => McFrame::Limits {
            limits: read_client_limits(r)?,
        },
    };
    Ok(f)
}

pub fn encode_frame(f: &McFrame) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_frame(&mut out, f)?;
    Ok(out)
}

/// Decodes one frame from the front of `bytes`; trailing bytes are left for
/// the caller. Unknown codepoints yield [`Error::NotMcFrame`]; a truncated or
/// inconsistent body is [`Error::Malformed`].
pub fn decode_frame(bytes: &[u8]) -> Result<(McFrame, usize)> {
    let mut r = Reader::new(bytes);
    match read_frame(&mut r) {
        Ok(f) => Ok((f, r.pos())),
        Err(Error::Incomplete) if bytes.is_empty() => Err(Error::Incomplete),
        Err(e) => Err(truncation_is_malformed(e)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cid(b: &[u8]) -> ChannelId {
        ChannelId::new(b).unwrap()
    }

    #[test]
    fn retire_layout() {
        let enc = encode_frame(&McFrame::Retire {
            channel_id: cid(&[0x01]),
        })
        .unwrap();
        let mut expect = crate::wire::encode_varint(MC_RETIRE).unwrap();
        expect.extend_from_slice(&[0x01, 0x01]);
        assert_eq!(enc, expect);
    }

    #[test]
    fn integrity_length_arithmetic() {
        let f = McFrame::Integrity {
            channel_id: cid(&[7]),
            start_packet_number: 5,
            digests: vec![vec![0xaa; 32], vec![0xbb; 32]],
        };
        let enc = encode_frame(&f).unwrap();
        // type(4) + cid len(1) + cid(1) + start(1) + digest size(1) + area len(2) + 64
        assert_eq!(enc.len(), 4 + 1 + 1 + 1 + 1 + 2 + 64);
        assert_eq!(decode_frame(&enc).unwrap(), (f, enc.len()));
    }

    #[test]
    fn empty_ack_rejected() {
        let f = McFrame::Ack {
            channel_id: cid(&[1]),
            ack_ranges: vec![],
            ack_delay: 0,
        };
        assert!(matches!(encode_frame(&f), Err(Error::Encoding(_))));
    }

    #[test]
    fn touching_ack_ranges_rejected() {
        let f = McFrame::Ack {
            channel_id: cid(&[1]),
            ack_ranges: vec![5..=7, 3..=4],
            ack_delay: 0,
        };
        assert!(encode_frame(&f).is_err());
        let ok = McFrame::Ack {
            channel_id: cid(&[1]),
            ack_ranges: vec![7..=8, 1..=3],
            ack_delay: 10,
        };
        let enc = encode_frame(&ok).unwrap();
        assert_eq!(decode_frame(&enc).unwrap().0, ok);
    }

    #[test]
    fn digest_area_not_multiple_is_malformed() {
        let mut enc = encode_frame(&McFrame::Integrity {
            channel_id: cid(&[1]),
            start_packet_number: 0,
            digests: vec![vec![1; 20]],
        })
        .unwrap();
        // Claim a 32-byte digest size over a 20-byte area.
        let size_pos = 4 + 2 + 1;
        enc[size_pos] = 32;
        assert!(matches!(decode_frame(&enc), Err(Error::Malformed(_))));
    }

    #[test]
    fn truncated_body_is_malformed_and_trailing_bytes_untouched() {
        let f = McFrame::Join {
            channel_id: cid(&[1, 2, 3]),
        };
        let mut enc = encode_frame(&f).unwrap();
        let n = enc.len();
        assert!(matches!(
            decode_frame(&enc[..n - 1]),
            Err(Error::Malformed(_))
        ));
        enc.extend_from_slice(&[0xde, 0xad]);
        assert_eq!(decode_frame(&enc).unwrap(), (f, n));
    }

    #[test]
    fn unknown_codepoint_falls_through() {
        assert_eq!(decode_frame(&[0x08, 0x00]), Err(Error::NotMcFrame(0x08)));
    }

    #[test]
    fn codepoints_distinct_and_outside_standard_range() {
        let set: std::collections::BTreeSet<_> = MC_FRAME_TYPES.iter().collect();
        assert_eq!(set.len(), 9);
        for t in MC_FRAME_TYPES {
            assert!(t > 0x30);
            assert_eq!(crate::wire::varint_len(t), Some(4));
        }
    }
}
