// Licensed under the Apache License, Version 2.0 <LICENSE-APACHE or
// http://www.apache.org/licenses/LICENSE-2.0> or the MIT license
// <LICENSE-MIT or http://opensource.org/licenses/MIT>, at your
// option. This file may not be copied, modified, or distributed
// except according to those terms.

//! The small frame set of the unicast substrate.
//!
//! Packet payloads carry [`PacketFrame`]s. The unicast connection also runs
//! an ordered, reliable *control stream* (carried in `CONTROL` frames) whose
//! bytes are a sequence of [`ControlFrame`]s: the handshake parameters, flow
//! control updates and every multicast frame exchanged over unicast.

use std::ops::RangeInclusive;

use bytes::Bytes;

use super::frame::{read_ack_ranges, read_frame, write_ack_ranges, write_frame};
use super::params::truncation_is_malformed;
use super::{
    decode_transport_params, encode_transport_params, ChannelId, Error, McFrame, Reader, Result,
    TransportParams, WriteExt,
};

pub const PADDING: u64 = 0x00;
pub const ACK: u64 = 0x02;
pub const CONTROL: u64 = 0x06;
pub const STREAM_BASE: u64 = 0x08;
pub const MAX_DATA: u64 = 0x10;
pub const NEW_CONNECTION_ID: u64 = 0x18;
pub const CONNECTION_CLOSE: u64 = 0x1c;
pub const HELLO: u64 = 0x6d_6310;

const STREAM_FIN: u64 = 0x01;
const STREAM_LEN: u64 = 0x02;
const STREAM_OFF: u64 = 0x04;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PacketFrame {
    /// A run of padding bytes.
    Padding(usize),
    Ack {
        ranges: Vec<RangeInclusive<u64>>,
        ack_delay: u64,
    },
    Control {
        offset: u64,
        data: Bytes,
    },
    Stream {
        stream_id: u64,
        offset: u64,
        data: Bytes,
        fin: bool,
    },
    /// Only `MC_INTEGRITY` and `MC_KEY` appear directly in packets, and only
    /// on multicast channels.
    Mc(McFrame),
}

impl PacketFrame {
    pub fn is_ack_eliciting(&self) -> bool {
        !matches!(self, PacketFrame::Padding(_) | PacketFrame::Ack { .. })
    }
}

/// Encoded size of a STREAM frame header for the given fields.
pub fn stream_frame_overhead(stream_id: u64, offset: u64, len: usize) -> usize {
    1 + super::varint_len(stream_id).unwrap_or(8)
        + super::varint_len(offset).unwrap_or(8)
        + super::varint_len(len as u64).unwrap_or(8)
}

pub fn encode_packet_frame(out: &mut Vec<u8>, f: &PacketFrame) -> Result<()> {
    match f {
        PacketFrame::Padding(n) => out.resize(out.len() + n, 0),
        PacketFrame::Ack { ranges, ack_delay } => {
            out.put_varint(ACK)?;
            write_ack_ranges(out, ranges, *ack_delay)?;
        }
        PacketFrame::Control { offset, data } => {
            out.put_varint(CONTROL)?;
            out.put_varint(*offset)?;
            out.put_vbytes(data)?;
        }
        PacketFrame::Stream {
            stream_id,
            offset,
            data,
            fin,
        } => {
            let mut t = STREAM_BASE | STREAM_OFF | STREAM_LEN;
            if *fin {
                t |= STREAM_FIN;
            }
            out.put_varint(t)?;
            out.put_varint(*stream_id)?;
            out.put_varint(*offset)?;
            out.put_vbytes(data)?;
        }
        PacketFrame::Mc(m) => write_frame(out, m)?,
    }
    Ok(())
}

/// Decodes one packet frame. Packet payloads are complete, so any
/// truncation is malformed.
pub fn decode_packet_frame(bytes: &[u8]) -> Result<(PacketFrame, usize)> {
    if bytes.is_empty() {
        return Err(Error::Incomplete);
    }
    if u64::from(bytes[0]) == PADDING {
        let n = bytes
            .iter()
            .take_while(|b| u64::from(**b) == PADDING)
            .count();
        return Ok((PacketFrame::Padding(n), n));
    }
    let mut r = Reader::new(bytes);
    match read_frame(&mut r) {
        Ok(m) => return Ok((PacketFrame::Mc(m), r.pos())),
        Err(Error::NotMcFrame(_)) => {}
        Err(e) => return Err(truncation_is_malformed(e)),
    }
    let mut r = Reader::new(bytes);
    let f = read_packet_frame(&mut r).map_err(truncation_is_malformed)?;
    Ok((f, r.pos()))
}

fn read_packet_frame(r: &mut Reader<'_>) -> Result<PacketFrame> {
    let t = r.varint()?;
    Ok(match t {
        ACK => {
            let (ranges, ack_delay) = read_ack_ranges(r)?;
            PacketFrame::Ack { ranges, ack_delay }
        }
        CONTROL => {
            let offset = r.varint()?;
            let data = r.vbytes()?;
            check_stream_bound(offset, data.len())?;
            PacketFrame::Control {
                offset,
                data: Bytes::copy_from_slice(data),
            }
        }
        0x08..=0x0f => {
            let stream_id = r.varint()?;
            let offset = if t & STREAM_OFF != 0 { r.varint()? } else { 0 };
            let data = if t & STREAM_LEN != 0 {
                r.vbytes()?
            } else {
                let n = r.remaining();
                r.bytes(n)?
            };
            check_stream_bound(offset, data.len())?;
            PacketFrame::Stream {
                stream_id,
                offset,
                data: Bytes::copy_from_slice(data),
                fin: t & STREAM_FIN != 0,
            }
        }
        _ => return Err(Error::Malformed("unknown frame type")),
    })
}

fn check_stream_bound(offset: u64, len: usize) -> Result<()> {
    if offset
        .checked_add(len as u64)
        .is_none_or(|e| e > super::VARINT_MAX)
    {
        return Err(Error::Malformed("stream offset overflow"));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ControlFrame {
    /// One message of the two-message handshake.
    Hello(TransportParams),
    MaxData(u64),
    NewConnectionId {
        sequence: u64,
        retire_prior_to: u64,
        connection_id: ChannelId,
    },
    ConnectionClose {
        error_code: u64,
    },
    Mc(McFrame),
}

pub fn encode_control_frame(out: &mut Vec<u8>, f: &ControlFrame) -> Result<()> {
    match f {
        ControlFrame::Hello(p) => {
            out.put_varint(HELLO)?;
            out.put_vbytes(&encode_transport_params(p)?)?;
        }
        ControlFrame::MaxData(v) => {
            out.put_varint(MAX_DATA)?;
            out.put_varint(*v)?;
        }
        ControlFrame::NewConnectionId {
            sequence,
            retire_prior_to,
            connection_id,
        } => {
            if retire_prior_to > sequence {
                return Err(Error::Encoding("retire_prior_to beyond sequence"));
            }
            out.put_varint(NEW_CONNECTION_ID)?;
            out.put_varint(*sequence)?;
            out.put_varint(*retire_prior_to)?;
            connection_id.write(out);
        }
        ControlFrame::ConnectionClose { error_code } => {
            out.put_varint(CONNECTION_CLOSE)?;
            out.put_varint(*error_code)?;
        }
        ControlFrame::Mc(m) => write_frame(out, m)?,
    }
    Ok(())
}

/// Decodes one control frame from an ordered byte stream. Returns
/// [`Error::Incomplete`] when more bytes are needed.
pub fn decode_control_frame(bytes: &[u8]) -> Result<(ControlFrame, usize)> {
    let mut r = Reader::new(bytes);
    match read_frame(&mut r) {
        Ok(m) => return Ok((ControlFrame::Mc(m), r.pos())),
        Err(Error::NotMcFrame(_)) => {}
        Err(e) => return Err(e),
    }
    let mut r = Reader::new(bytes);
    let t = r.varint()?;
    let f = match t {
        HELLO => ControlFrame::Hello(decode_transport_params(r.vbytes()?)?),
        MAX_DATA => ControlFrame::MaxData(r.varint()?),
        NEW_CONNECTION_ID => {
            let sequence = r.varint()?;
            let retire_prior_to = r.varint()?;
            if retire_prior_to > sequence {
                return Err(Error::Malformed("retire_prior_to beyond sequence"));
            }
            ControlFrame::NewConnectionId {
                sequence,
                retire_prior_to,
                connection_id: ChannelId::read(&mut r)?,
            }
        }
        CONNECTION_CLOSE => ControlFrame::ConnectionClose {
            error_code: r.varint()?,
        },
        _ => return Err(Error::Malformed("unknown control frame type")),
    };
    Ok((f, r.pos()))
}
