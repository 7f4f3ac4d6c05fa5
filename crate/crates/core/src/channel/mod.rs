// Licensed under the Apache License, Version 2.0 <LICENSE-APACHE or
// http://www.apache.org/licenses/LICENSE-2.0> or the MIT license
// <LICENSE-MIT or http://opensource.org/licenses/MIT>, at your
// option. This file may not be copied, modified, or distributed
// except according to those terms.

//! Channel bookkeeping shared by both endpoints.

mod descriptor;
mod space;
mod state;
mod streams;

pub use descriptor::{is_ssm_group, ChannelDescriptor};
pub use space::{PacketNumberSpace, Received};
pub use state::{emits_state, transition, ChannelEvent, ChannelState};
pub use streams::{Origin, StreamSpaceMap};

use thiserror::Error;

/// Reason codes carried in MC_LEAVE and MC_STATE.
pub mod reason {
    pub const NONE: u64 = 0;
    pub const SERVER_INSTRUCTED: u64 = 1;
    pub const RATE_EXCEEDED: u64 = 2;
    pub const HIGH_LOSS: u64 = 3;
    pub const SPURIOUS_TRAFFIC: u64 = 4;
    pub const FLOW_CONTROL: u64 = 5;
    pub const FAMILY_UNSUPPORTED: u64 = 6;
    pub const ALGORITHM_UNSUPPORTED: u64 = 7;
    pub const CHANNEL_LIMIT: u64 = 8;
    pub const JOIN_TIMEOUT: u64 = 9;
    pub const INTEGRITY_CONFLICT: u64 = 10;
    pub const LIMITS_UPDATE: u64 = 11;

    pub fn name(code: u64) -> &'static str {
        match code {
            NONE => "none",
            SERVER_INSTRUCTED => "server_instructed",
            RATE_EXCEEDED => "rate_exceeded",
            HIGH_LOSS => "high_loss",
            SPURIOUS_TRAFFIC => "spurious_traffic",
            FLOW_CONTROL => "flow_control",
            FAMILY_UNSUPPORTED => "family_unsupported",
            ALGORITHM_UNSUPPORTED => "algorithm_unsupported",
            CHANNEL_LIMIT => "channel_limit",
            JOIN_TIMEOUT => "join_timeout",
            INTEGRITY_CONFLICT => "integrity_conflict",
            LIMITS_UPDATE => "limits_update",
            _ => "unknown",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum Error {
    #[error("illegal transition from {state:?} on {event:?}")]
    IllegalTransition {
        state: ChannelState,
        event: ChannelEvent,
    },

    #[error("invalid channel descriptor: {0}")]
    InvalidDescriptor(&'static str),

    #[error("conflicting data on stream {stream_id} at offset {offset}")]
    StreamCorruption { stream_id: u64, offset: u64 },

    #[error("final size violation on stream {0}")]
    FinalSize(u64),
}

pub type Result<T> = std::result::Result<T, Error>;
