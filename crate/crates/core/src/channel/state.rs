// Licensed under the Apache License, Version 2.0 <LICENSE-APACHE or
// http://www.apache.org/licenses/LICENSE-2.0> or the MIT license
// <LICENSE-MIT or http://opensource.org/licenses/MIT>, at your
// option. This file may not be copied, modified, or distributed
// except according to those terms.

//! The client-side channel lifecycle.
//!
//! ```text
//!             announce
//!                |
//!                v
//!   +------> Announced --join_declined--> DeclinedJoin <--+
//!   |            |                          |    ^        |
//!   |    join_requested                     |    |        |
//!   |            v                          |    |        |
//!   |       JoinPending <--join_requested---+----|--- Left
//!   |            |                               |   ^
//!   |   join_accepted / packets_flowing          |   |
//!   |            v                               |   |
//!   |         Joined ---leave_requested / left---+---+
//!   |
//!   +-- {Announced, DeclinedJoin, Left} --retire--> Retired
//! ```
//!
//! A server-initiated leave that crosses a client-side decline is absorbed:
//! `leave_requested` and `left` are self-loops in DeclinedJoin and Left.

use serde::{Deserialize, Serialize};

use super::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelState {
    Announced,
    JoinPending,
    Joined,
    DeclinedJoin,
    Left,
    Retired,
}

impl ChannelState {
    pub const ALL: [ChannelState; 6] = [
        Self::Announced,
        Self::JoinPending,
        Self::Joined,
        Self::DeclinedJoin,
        Self::Left,
        Self::Retired,
    ];

    /// Wire code used in MC_STATE.
    pub fn code(self) -> u8 {
        match self {
            ChannelState::Announced => 0,
            ChannelState::JoinPending => 1,
            ChannelState::Joined => 2,
            ChannelState::DeclinedJoin => 3,
            ChannelState::Left => 4,
            ChannelState::Retired => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.code() == code)
    }

    /// Whether the client is, or is about to be, a group member.
    pub fn is_member(self) -> bool {
        matches!(self, ChannelState::JoinPending | ChannelState::Joined)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelEvent {
    Announce,
    JoinRequested,
    JoinAccepted,
    JoinDeclined,
    PacketsFlowing,
    LeaveRequested,
    Left,
    Retire,
}

impl ChannelEvent {
    pub const ALL: [ChannelEvent; 8] = [
        Self::Announce,
        Self::JoinRequested,
        Self::JoinAccepted,
        Self::JoinDeclined,
        Self::PacketsFlowing,
        Self::LeaveRequested,
        Self::Left,
        Self::Retire,
    ];
}

pub fn transition(state: ChannelState, event: ChannelEvent) -> Result<ChannelState> {
    use ChannelEvent as E;
    use ChannelState as S;
    let next = match (state, event) {
        (S::Announced, E::Announce) => S::Announced,
        (S::Announced | S::DeclinedJoin | S::Left, E::JoinRequested) => S::JoinPending,
        (S::Announced | S::DeclinedJoin | S::Left, E::JoinDeclined) => S::DeclinedJoin,
        (S::Announced | S::DeclinedJoin | S::Left, E::Retire) => S::Retired,
        (S::DeclinedJoin, E::Announce) => S::DeclinedJoin,
        (S::Left, E::Announce) => S::Left,
        (S::DeclinedJoin, E::LeaveRequested | E::Left) => S::DeclinedJoin,
        (S::Left, E::LeaveRequested | E::Left) => S::Left,
        (S::JoinPending | S::Joined, E::JoinAccepted | E::PacketsFlowing) => S::Joined,
        (S::JoinPending | S::Joined, E::LeaveRequested | E::Left) => S::Left,
        _ => return Err(Error::IllegalTransition { state, event }),
    };
    Ok(next)
}

/// Whether a transition is reported to the server with MC_STATE. Every state
/// change is reported; a repeated decline is reported again so that the
/// server learns the answer to every MC_JOIN.
pub fn emits_state(prev: ChannelState, event: ChannelEvent, next: ChannelState) -> bool {
    prev != next || event == ChannelEvent::JoinDeclined
}
