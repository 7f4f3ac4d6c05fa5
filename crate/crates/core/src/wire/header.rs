// Licensed under the Apache License, Version 2.0 <LICENSE-APACHE or
// http://www.apache.org/licenses/LICENSE-2.0> or the MIT license
// <LICENSE-MIT or http://opensource.org/licenses/MIT>, at your
// option. This file may not be copied, modified, or distributed
// except according to those terms.

//! Short packet header shared by multicast channel packets and the unicast
//! substrate:
//!
//! ```text
//! flags (1) | id length (1) | channel or connection id (1..20) | packet number (1..4)
//! ```
//!
//! The low five bits of `flags` and the packet number bytes are covered by
//! header protection.

use super::{ChannelId, Error, Reader, Result};

pub const FIXED_BIT: u8 = 0x40;
pub const PROTECTED_FLAG_BITS: u8 = 0x1f;
/// Packet number length used on multicast channels. Receivers may join at
/// any point, so the widest encoding is always used.
pub const PN_LEN: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MulticastPacketHeader {
    pub channel_id: ChannelId,
    pub packet_number: u64,
    /// Encoded packet number length, 1..=4.
    pub pn_len: usize,
}

impl MulticastPacketHeader {
    pub fn new(channel_id: ChannelId, packet_number: u64) -> Self {
        MulticastPacketHeader {
            channel_id,
            packet_number,
            pn_len: PN_LEN,
        }
    }

    pub fn pn_offset(&self) -> usize {
        2 + self.channel_id.as_bytes().len()
    }

    /// Unprotected header bytes.
    pub fn encode(&self) -> Result<Vec<u8>> {
        if !(1..=4).contains(&self.pn_len) {
            return Err(Error::Encoding("packet number length"));
        }
        let mut out = Vec::with_capacity(self.pn_offset() + self.pn_len);
        out.push(FIXED_BIT | (self.pn_len as u8 - 1));
        self.channel_id.write(&mut out);
        let pn = self.packet_number.to_be_bytes();
        out.extend_from_slice(&pn[8 - self.pn_len..]);
        Ok(out)
    }
}

/// The parts of a header readable before header protection is removed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlainHeader {
    pub channel_id: ChannelId,
    pub pn_offset: usize,
}

impl PlainHeader {
    pub fn parse(datagram: &[u8]) -> Result<Self> {
        let mut r = Reader::new(datagram);
        let flags = r.u8().map_err(|_| Error::Malformed("empty datagram"))?;
        if flags & FIXED_BIT == 0 {
            return Err(Error::Malformed("fixed bit clear"));
        }
        let channel_id = ChannelId::read(&mut r).map_err(|_| Error::Malformed("header id"))?;
        Ok(PlainHeader {
            channel_id,
            pn_offset: r.pos(),
        })
    }
}

/// Recovers a full packet number from its truncated encoding, choosing the
/// candidate closest to the next expected value.
pub fn decode_packet_number(largest: Option<u64>, truncated: u64, pn_len: usize) -> u64 {
    let expected = largest.map_or(0, |l| l + 1);
    let bits = pn_len as u32 * 8;
    let win = 1u64 << bits;
    let hwin = win / 2;
    let mask = win - 1;
    let candidate = (expected & !mask) | truncated;
    if candidate + hwin <= expected && candidate < (1u64 << 62) - win {
        candidate + win
    } else if candidate > expected + hwin && candidate >= win {
        candidate - win
    } else {
        candidate
    }
}
