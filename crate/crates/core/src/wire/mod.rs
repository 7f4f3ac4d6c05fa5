// Licensed under the Apache License, Version 2.0 <LICENSE-APACHE or
// http://www.apache.org/licenses/LICENSE-2.0> or the MIT license
// <LICENSE-MIT or http://opensource.org/licenses/MIT>, at your
// option. This file may not be copied, modified, or distributed
// except according to those terms.

//! Bit-exact codecs. Every layout here is documented in `docs/wire.md`.

mod frame;
mod header;
mod params;
mod transport;
mod varint;

pub use frame::{
    decode_frame, encode_frame, frame_type, is_mc_frame_type, Announce, ChannelId, McFrame,
    MAX_DIGEST_LEN, MAX_SECRET_LEN, MC_FRAME_TYPES, MIN_SECRET_LEN,
};
pub use header::{
    decode_packet_number, MulticastPacketHeader, PlainHeader, FIXED_BIT, PN_LEN,
    PROTECTED_FLAG_BITS,
};
pub use params::{
    decode_client_limits, decode_transport_params, encode_client_limits, encode_transport_params,
    AeadId, ClientLimits, HashId, TransportParams, TP_INITIAL_MAX_DATA, TP_MULTICAST_CLIENT,
    TP_MULTICAST_SERVER,
};
pub use transport::{
    decode_control_frame, decode_packet_frame, encode_control_frame, encode_packet_frame,
    stream_frame_overhead, ControlFrame, PacketFrame,
};
pub use varint::{decode_varint, encode_varint, varint_len, VARINT_MAX};

use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum Error {
    /// Input ended before the item was complete.
    #[error("incomplete input")]
    Incomplete,

    /// The bytes cannot be a valid item. Connection-fatal for frames.
    #[error("malformed: {0}")]
    Malformed(&'static str),

    /// Not one of the extension codepoints; the caller should try the
    /// standard frame decoder.
    #[error("not a multicast frame (type {0:#x})")]
    NotMcFrame(u64),

    /// The value cannot be encoded.
    #[error("cannot encode: {0}")]
    Encoding(&'static str),

    #[error("duplicate transport parameter {0:#x}")]
    DuplicateParam(u64),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Cursor over an input buffer. All reads fail with [`Error::Incomplete`]
/// when the buffer runs out.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn u8(&mut self) -> Result<u8> {
        let b = *self.buf.get(self.pos).ok_or(Error::Incomplete)?;
        self.pos += 1;
        Ok(b)
    }

    pub fn u16(&mut self) -> Result<u16> {
        let b = self.bytes(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    pub fn varint(&mut self) -> Result<u64> {
        let (v, n) = decode_varint(&self.buf[self.pos..])?;
        self.pos += n;
        Ok(v)
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Incomplete);
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    /// A varint length followed by that many bytes.
    pub fn vbytes(&mut self) -> Result<&'a [u8]> {
        let n = self.varint()?;
        if n > self.remaining() as u64 {
            return Err(Error::Incomplete);
        }
        self.bytes(n as usize)
    }

    /// A varint element count, checked against a per-element minimum size so
    /// hostile counts cannot drive huge allocations.
    pub fn count(&mut self, min_elem: usize) -> Result<usize> {
        let n = self.varint()?;
        if n.saturating_mul(min_elem as u64) > self.remaining() as u64 {
            return Err(Error::Incomplete);
        }
        Ok(n as usize)
    }
}

pub(crate) trait WriteExt {
    fn put_u8(&mut self, v: u8);
    fn put_u16(&mut self, v: u16);
    fn put_varint(&mut self, v: u64) -> Result<()>;
    fn put_vbytes(&mut self, b: &[u8]) -> Result<()>;
}

impl WriteExt for Vec<u8> {
    fn put_u8(&mut self, v: u8) {
        self.push(v);
    }

    fn put_u16(&mut self, v: u16) {
        self.extend_from_slice(&v.to_be_bytes());
    }

    fn put_varint(&mut self, v: u64) -> Result<()> {
        varint::write_varint(self, v)
    }

    fn put_vbytes(&mut self, b: &[u8]) -> Result<()> {
        self.put_varint(b.len() as u64)?;
        self.extend_from_slice(b);
        Ok(())
    }
}
