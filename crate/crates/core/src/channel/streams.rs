// Licensed under the Apache License, Version 2.0 <LICENSE-APACHE or
// http://www.apache.org/licenses/LICENSE-2.0> or the MIT license
// <LICENSE-MIT or http://opensource.org/licenses/MIT>, at your
// option. This file may not be copied, modified, or distributed
// except according to those terms.

//! Stream reassembly shared by the unicast connection and every channel.

use std::collections::{BTreeMap, HashMap, HashSet};

use bytes::Bytes;

use super::{Error, Result};
use crate::wire::ChannelId;

/// Where a piece of stream data arrived from.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Origin {
    Unicast,
    Channel(ChannelId),
}

#[derive(Debug, Default)]
struct RecvStream {
    /// Delivered prefix, kept for overlap comparison until the stream is
    /// released.
    data: Vec<u8>,
    pending: BTreeMap<u64, Bytes>,
    final_size: Option<u64>,
}

impl RecvStream {
    fn check_overlap(&self, stream_id: u64, offset: u64, data: &[u8]) -> Result<()> {
        let end = offset + data.len() as u64;
        let delivered = self.data.len() as u64;
        if offset < delivered {
            let n = (end.min(delivered) - offset) as usize;
            let o = offset as usize;
            if self.data[o..o + n] != data[..n] {
                return Err(Error::StreamCorruption { stream_id, offset });
            }
        }
        for (&k, v) in self.pending.range(..end) {
            let vend = k + v.len() as u64;
            if vend <= offset {
                continue;
            }
            let lo = k.max(offset);
            let hi = vend.min(end);
            let a = &v[(lo - k) as usize..(hi - k) as usize];
            let b = &data[(lo - offset) as usize..(hi - offset) as usize];
            if a != b {
                return Err(Error::StreamCorruption {
                    stream_id,
                    offset: lo,
                });
            }
        }
        Ok(())
    }

    fn drain(&mut self) -> Vec<u8> {
        let start = self.data.len();
        while let Some(entry) = self.pending.first_entry() {
            let k = *entry.key();
            let len = self.data.len() as u64;
            if k > len {
                break;
            }
            let v = entry.remove();
            let vend = k + v.len() as u64;
            if vend > len {
                self.data.extend_from_slice(&v[(len - k) as usize..]);
            }
        }
        self.data[start..].to_vec()
    }
}

/// Reassembly state per stream ID, fed from any origin.
#[derive(Debug, Default)]
pub struct StreamSpaceMap {
    streams: HashMap<u64, RecvStream>,
    released: HashSet<u64>,
    bytes_by_origin: HashMap<Origin, u64>,
}

impl StreamSpaceMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Accepts `data` at `offset` and returns the bytes that became
    /// contiguously deliverable. Data for released streams is ignored.
    pub fn deliver(
        &mut self,
        stream_id: u64,
        offset: u64,
        data: &[u8],
        fin: bool,
        origin: Origin,
    ) -> Result<Vec<u8>> {
        if self.released.contains(&stream_id) {
            return Ok(Vec::new());
        }
        let s = self.streams.entry(stream_id).or_default();
        let end = offset + data.len() as u64;
        match s.final_size {
            Some(f) if end > f || (fin && end != f) => return Err(Error::FinalSize(stream_id)),
            None if fin && end < s.data.len() as u64 => return Err(Error::FinalSize(stream_id)),
            _ => {}
        }
        if fin && s.pending.iter().any(|(k, v)| k + v.len() as u64 > end) {
            return Err(Error::FinalSize(stream_id));
        }
        s.check_overlap(stream_id, offset, data)?;
        if fin {
            s.final_size = Some(end);
        }
        let delivered = s.data.len() as u64;
        if end > delivered {
            let skip = delivered.saturating_sub(offset) as usize;
            let at = offset + skip as u64;
            let chunk = Bytes::copy_from_slice(&data[skip..]);
            match s.pending.get(&at) {
                Some(old) if old.len() >= chunk.len() => {}
                _ => {
                    s.pending.insert(at, chunk);
                }
            }
        }
        let out = s.drain();
        *self.bytes_by_origin.entry(origin).or_default() += out.len() as u64;
        Ok(out)
    }

    pub fn delivered_len(&self, stream_id: u64) -> u64 {
        self.streams
            .get(&stream_id)
            .map_or(0, |s| s.data.len() as u64)
    }

    pub fn is_complete(&self, stream_id: u64) -> bool {
        self.released.contains(&stream_id)
            || self
                .streams
                .get(&stream_id)
                .is_some_and(|s| s.final_size == Some(s.data.len() as u64))
    }

    /// Full delivered contents of a stream that has not been released.
    pub fn data(&self, stream_id: u64) -> Option<&[u8]> {
        self.streams.get(&stream_id).map(|s| s.data.as_slice())
    }

    /// Drops a stream's buffers; later data for it is ignored.
    pub fn release(&mut self, stream_id: u64) {
        self.streams.remove(&stream_id);
        self.released.insert(stream_id);
    }

    /// Newly delivered bytes credited to the origin that completed them.
    pub fn bytes_from(&self, origin: &Origin) -> u64 {
        self.bytes_by_origin.get(origin).copied().unwrap_or(0)
    }
}
