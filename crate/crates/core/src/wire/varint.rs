// Licensed under the Apache License, Version 2.0 <LICENSE-APACHE or
// http://www.apache.org/licenses/LICENSE-2.0> or the MIT license
// <LICENSE-MIT or http://opensource.org/licenses/MIT>, at your
// option. This file may not be copied, modified, or distributed
// except according to those terms.

//! QUIC variable-length integers: the two high bits of the first byte give the
//! encoded length (1, 2, 4 or 8 bytes).

use super::{Error, Result};

pub const VARINT_MAX: u64 = (1 << 62) - 1;

/// Minimal encoded length of `v`, or `None` if it does not fit.
pub fn varint_len(v: u64) -> Option<usize> {
    match v {
        0..=63 => Some(1),
        64..=16_383 => Some(2),
        16_384..=1_073_741_823 => Some(4),
        1_073_741_824..=VARINT_MAX => Some(8),
        _ => None,
    }
}

pub(crate) fn write_varint(out: &mut Vec<u8>, v: u64) -> Result<()> {
    match varint_len(v).ok_or(Error::Encoding("varint out of range"))? {
        1 => out.push(v as u8),
        2 => out.extend_from_slice(&((v as u16) | 0x4000).to_be_bytes()),
        4 => out.extend_from_slice(&((v as u32) | 0x8000_0000).to_be_bytes()),
        _ => out.extend_from_slice(&(v | 0xc000_0000_0000_0000).to_be_bytes()),
    }
    Ok(())
}

/// Minimal-length encoding of `value`.
pub fn encode_varint(value: u64) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8);
    write_varint(&mut out, value)?;
    Ok(out)
}

/// Decodes one varint from the front of `bytes`, returning the value and the
/// number of bytes consumed. Non-minimal encodings are accepted.
pub fn decode_varint(bytes: &[u8]) -> Result<(u64, usize)> {
    let first = *bytes.first().ok_or(Error::Incomplete)?;
    let len = 1usize << (first >> 6);
    if bytes.len() < len {
        return Err(Error::Incomplete);
    }
    let mut v = u64::from(first & 0x3f);
    for b in &bytes[1..len] {
        v = (v << 8) | u64::from(*b);
    }
    Ok((v, len))
}
