// Licensed under the Apache License, Version 2.0 <LICENSE-APACHE or
// http://www.apache.org/licenses/LICENSE-2.0> or the MIT license
// <LICENSE-MIT or http://opensource.org/licenses/MIT>, at your
// option. This file may not be copied, modified, or distributed
// except according to those terms.

//! Multicast transport parameters and the client limits they carry.

use serde::{Deserialize, Serialize};

use super::{Error, Reader, Result, WriteExt};

/// Standard `initial_max_data` parameter, used by the unicast substrate.
pub const TP_INITIAL_MAX_DATA: u64 = 0x04;
/// Server parameter: present (empty value) when the server supports multicast.
pub const TP_MULTICAST_SERVER: u64 = 0x6d_6301;
/// Client parameter: carries the encoded [`ClientLimits`].
pub const TP_MULTICAST_CLIENT: u64 = 0x6d_6302;

/// Hash algorithm code, numbered as in the TLS `HashAlgorithm` registry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HashId(pub u16);

/// AEAD code, numbered as the TLS 1.3 cipher suite carrying that AEAD.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AeadId(pub u16);

/// What a client is willing to do over multicast.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientLimits {
    pub allow_ipv4: bool,
    pub allow_ipv6: bool,
    pub supported_hash_ids: Vec<HashId>,
    pub supported_aead_ids: Vec<AeadId>,
    pub max_aggregate_rate_kbps: u64,
    pub max_channels_announced: u64,
    pub max_channels_joined: u64,
}

impl ClientLimits {
    pub fn validate(&self) -> std::result::Result<(), &'static str> {
        if !self.allow_ipv4 && !self.allow_ipv6 {
            return Err("no address family allowed");
        }
        if self.supported_hash_ids.is_empty() {
            return Err("empty hash list");
        }
        if self.supported_aead_ids.is_empty() {
            return Err("empty aead list");
        }
        if self.max_channels_joined > self.max_channels_announced {
            return Err("max_channels_joined exceeds max_channels_announced");
        }
        Ok(())
    }
}

const FLAG_IPV4: u8 = 0x01;
const FLAG_IPV6: u8 = 0x02;

pub(crate) fn write_client_limits(out: &mut Vec<u8>, l: &ClientLimits) -> Result<()> {
    l.validate().map_err(Error::Encoding)?;
    let mut flags = 0;
    if l.allow_ipv4 {
        flags |= FLAG_IPV4;
    }
    if l.allow_ipv6 {
        flags |= FLAG_IPV6;
    }
    out.put_u8(flags);
    out.put_varint(l.supported_hash_ids.len() as u64)?;
    for h in &l.supported_hash_ids {
        out.put_u16(h.0);
    }
    out.put_varint(l.supported_aead_ids.len() as u64)?;
    for a in &l.supported_aead_ids {
        out.put_u16(a.0);
    }
    out.put_varint(l.max_aggregate_rate_kbps)?;
    out.put_varint(l.max_channels_announced)?;
    out.put_varint(l.max_channels_joined)?;
    Ok(())
}

pub(crate) fn read_client_limits(r: &mut Reader<'_>) -> Result<ClientLimits> {
    let flags = r.u8()?;
    if flags & !(FLAG_IPV4 | FLAG_IPV6) != 0 {
        return Err(Error::Malformed("reserved limit flags set"));
    }
    let n = r.count(2)?;
    let mut hashes = Vec::with_capacity(n);
    for _ in 0..n {
        hashes.push(HashId(r.u16()?));
    }
    let n = r.count(2)?;
    let mut aeads = Vec::with_capacity(n);
    for _ in 0..n {
        aeads.push(AeadId(r.u16()?));
    }
    let limits = ClientLimits {
        allow_ipv4: flags & FLAG_IPV4 != 0,
        allow_ipv6: flags & FLAG_IPV6 != 0,
        supported_hash_ids: hashes,
        supported_aead_ids: aeads,
        max_aggregate_rate_kbps: r.varint()?,
        max_channels_announced: r.varint()?,
        max_channels_joined: r.varint()?,
    };
    limits.validate().map_err(Error::Malformed)?;
    Ok(limits)
}

pub fn encode_client_limits(l: &ClientLimits) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_client_limits(&mut out, l)?;
    Ok(out)
}

/// Decodes limits that must fill `bytes` exactly.
pub fn decode_client_limits(bytes: &[u8]) -> Result<ClientLimits> {
    let mut r = Reader::new(bytes);
    let l = read_client_limits(&mut r).map_err(truncation_is_malformed)?;
    if r.remaining() != 0 {
        return Err(Error::Malformed("trailing bytes after limits"));
    }
    Ok(l)
}

/// Transport parameters exchanged in the two-message handshake.
///
/// An absent multicast parameter on either side disables every multicast
/// code path for the connection.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TransportParams {
    /// Sent by servers.
    pub multicast_supported: bool,
    /// Sent by clients; presence implies support.
    pub client_limits: Option<ClientLimits>,
    pub initial_max_data: Option<u64>,
}

pub fn encode_transport_params(p: &TransportParams) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    if let Some(v) = p.initial_max_data {
        let enc = super::encode_varint(v)?;
        out.put_varint(TP_INITIAL_MAX_DATA)?;
        out.put_vbytes(&enc)?;
    }
    if p.multicast_supported {
        out.put_varint(TP_MULTICAST_SERVER)?;
        out.put_varint(0)?;
    }
    if let Some(l) = &p.client_limits {
        let enc = encode_client_limits(l)?;
        out.put_varint(TP_MULTICAST_CLIENT)?;
        out.put_vbytes(&enc)?;
    }
    Ok(out)
}

/// Decodes a parameter list. Unknown identifiers are skipped; any repeated
/// identifier is a protocol error.
pub fn decode_transport_params(bytes: &[u8]) -> Result<TransportParams> {
    let mut r = Reader::new(bytes);
    let mut seen = std::collections::BTreeSet::new();
    let mut p = TransportParams::default();
    while r.remaining() > 0 {
        let id = r.varint().map_err(truncation_is_malformed)?;
        let value = r.vbytes().map_err(truncation_is_malformed)?;
        if !seen.insert(id) {
            return Err(Error::DuplicateParam(id));
        }
        match id {
            TP_INITIAL_MAX_DATA => {
                let (v, n) = super::decode_varint(value).map_err(truncation_is_malformed)?;
                if n != value.len() {
                    return Err(Error::Malformed("initial_max_data length"));
                }
                p.initial_max_data = Some(v);
            }
            TP_MULTICAST_SERVER => {
                if !value.is_empty() {
                    return Err(Error::Malformed(
                        "server multicast parameter carries a value",
                    ));
                }
                p.multicast_supported = true;
            }
            TP_MULTICAST_CLIENT => p.client_limits = Some(decode_client_limits(value)?),
            _ => {}
        }
    }
    Ok(p)
}

pub(crate) fn truncation_is_malformed(e: Error) -> Error {
    match e {
        Error::Incomplete => Error::Malformed("truncated"),
        e => e,
    }
}
