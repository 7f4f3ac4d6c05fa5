// Licensed under the Apache License, Version 2.0 <LICENSE-APACHE or
// http://www.apache.org/licenses/LICENSE-2.0> or the MIT license
// <LICENSE-MIT or http://opensource.org/licenses/MIT>, at your
// option. This file may not be copied, modified, or distributed
// except according to those terms.

//! Multicast packet protection: AEAD over the payload with the unprotected
//! header as associated data, then QUIC-style header protection.

use super::{ChannelKeys, Error, HeaderKey, KeySchedule, Result};
use crate::wire::{
    decode_packet_number, ChannelId, MulticastPacketHeader, PlainHeader, PROTECTED_FLAG_BITS,
};

pub const MAX_DATAGRAM_SIZE: usize = 1500;
pub const SAMPLE_LEN: usize = 16;
/// The sample starts this many bytes after the packet number offset,
/// whatever the packet number length.
pub const MIN_SAMPLE_OFFSET: usize = 4;

const TAG_LEN: usize = 16;

/// A header with protection removed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnprotectedHeader {
    pub channel_id: ChannelId,
    pub packet_number: u64,
    pub pn_len: usize,
    /// Header bytes as they were before protection; the AEAD associated data.
    pub header: Vec<u8>,
}

/// Seals `payload` and applies header protection. Payloads too short to
/// yield a sample are padded with zero bytes (PADDING frames).
pub fn protect_packet(
    keys: &ChannelKeys,
    hp: &HeaderKey,
    header: &MulticastPacketHeader,
    payload: &[u8],
) -> Result<Vec<u8>> {
    let hdr = header.encode().map_err(|_| Error::Malformed)?;
    let min_payload = (MIN_SAMPLE_OFFSET + SAMPLE_LEN).saturating_sub(header.pn_len + TAG_LEN);
    let mut plain = payload.to_vec();
    if plain.len() < min_payload {
        plain.resize(min_payload, 0);
    }
    let total = hdr.len() + plain.len() + TAG_LEN;
    if total > MAX_DATAGRAM_SIZE {
        return Err(Error::Oversize(total));
    }
    let mut out = hdr.clone();
    out.extend_from_slice(&keys.seal(header.packet_number, &hdr, &plain));

    let pn_offset = header.pn_offset();
    let sample_at = pn_offset + MIN_SAMPLE_OFFSET;
    let mask = hp.mask(&out[sample_at..sample_at + SAMPLE_LEN]);
    out[0] ^= mask[0] & PROTECTED_FLAG_BITS;
    for i in 0..header.pn_len {
        out[pn_offset + i] ^= mask[1 + i];
    }
    Ok(out)
}

/// Removes header protection. `largest` is the largest packet number seen
/// on the channel, used to expand a truncated packet number.
pub fn unprotect_header(
    hp: &HeaderKey,
    datagram: &[u8],
    largest: Option<u64>,
) -> Result<UnprotectedHeader> {
    if datagram.len() > MAX_DATAGRAM_SIZE {
        return Err(Error::Oversize(datagram.len()));
    }
    let plain = PlainHeader::parse(datagram).map_err(|_| Error::Malformed)?;
    let pn_offset = plain.pn_offset;
    let sample_at = pn_offset + MIN_SAMPLE_OFFSET;
    if datagram.len() < sample_at + SAMPLE_LEN {
        return Err(Error::Malformed);
    }
    let mask = hp.mask(&datagram[sample_at..sample_at + SAMPLE_LEN]);
    let flags = datagram[0] ^ (mask[0] & PROTECTED_FLAG_BITS);
    let pn_len = usize::from(flags & 0x03) + 1;
    let mut header = datagram[..pn_offset + pn_len].to_vec();
    header[0] = flags;
    let mut truncated = 0u64;
    for i in 0..pn_len {
        header[pn_offset + i] ^= mask[1 + i];
        truncated = (truncated << 8) | u64::from(header[pn_offset + i]);
    }
    Ok(UnprotectedHeader {
        channel_id: plain.channel_id,
        packet_number: decode_packet_number(largest, truncated, pn_len),
        pn_len,
        header,
    })
}

/// Decrypts the payload of a datagram whose header was already unprotected.
pub fn open_payload(
    keys: &ChannelKeys,
    header: &UnprotectedHeader,
    datagram: &[u8],
) -> Result<Vec<u8>> {
    keys.open(
        header.packet_number,
        &header.header,
        &datagram[header.header.len()..],
    )
}

/// Header unprotection followed by decryption with the scheduled key.
pub fn unprotect_packet(
    hp: &HeaderKey,
    schedule: &KeySchedule,
    datagram: &[u8],
    largest: Option<u64>,
) -> Result<(UnprotectedHeader, Vec<u8>)> {
    let header = unprotect_header(hp, datagram, largest)?;
    let keys = schedule
        .select(header.packet_number)
        .ok_or(Error::NoKey(header.packet_number))?;
    let payload = open_payload(keys, &header, datagram)?;
    Ok((header, payload))
}
