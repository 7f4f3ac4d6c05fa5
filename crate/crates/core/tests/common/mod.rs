// Licensed under the Apache License, Version 2.0 <LICENSE-APACHE or
// http://www.apache.org/licenses/LICENSE-2.0> or the MIT license
// <LICENSE-MIT or http://opensource.org/licenses/MIT>, at your
// option. This file may not be copied, modified, or distributed
// except according to those terms.

//! Strategies and helpers shared by the integration tests.

#![allow(dead_code)]

pub mod golden;

use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};
use std::ops::RangeInclusive;

use bytes::Bytes;
use proptest::collection::vec;
use proptest::prelude::*;

use mcquic::channel::ChannelState;
use mcquic::scenario::{self, Scenario};
use mcquic::sim::{self, RunOutcome, SimOptions};
use mcquic::wire::{
    AeadId, Announce, ChannelId, ClientLimits, ControlFrame, HashId, McFrame, PacketFrame,
    TransportParams, MAX_DIGEST_LEN, MAX_SECRET_LEN, MIN_SECRET_LEN, VARINT_MAX,
};

pub fn varint() -> impl Strategy<Value = u64> {
    prop_oneof![
        0..64u64,
        64..16384u64,
        16384..(1u64 << 30),
        (1u64 << 30)..=VARINT_MAX,
    ]
}

pub fn channel_id() -> impl Strategy<Value = ChannelId> {
    vec(any::<u8>(), 1..=ChannelId::MAX_LEN).prop_map(|b| ChannelId::new(&b).unwrap())
}

pub fn secret() -> impl Strategy<Value = Vec<u8>> {
    vec(any::<u8>(), MIN_SECRET_LEN..=MAX_SECRET_LEN)
}

/// Source and group of one family.
pub fn ip_pair() -> impl Strategy<Value = (IpAddr, IpAddr)> {
    prop_oneof![
        (any::<u32>(), any::<u32>())
            .prop_map(|(a, b)| (Ipv4Addr::from(a).into(), Ipv4Addr::from(b).into())),
        (any::<u128>(), any::<u128>())
            .prop_map(|(a, b)| (Ipv6Addr::from(a).into(), Ipv6Addr::from(b).into())),
    ]
}

pub fn state() -> impl Strategy<Value = ChannelState> {
    (0..=5u8).prop_map(|c| ChannelState::from_code(c).unwrap())
}

pub fn limits() -> impl Strategy<Value = ClientLimits> {
    (
        prop_oneof![Just((true, false)), Just((false, true)), Just((true, true))],
        vec(any::<u16>(), 1..8),
        vec(any::<u16>(), 1..8),
        varint(),
        varint(),
        any::<u64>(),
    )
        .prop_map(|((v4, v6), h, a, rate, announced, j)| ClientLimits {
            allow_ipv4: v4,
            allow_ipv6: v6,
            supported_hash_ids: h.into_iter().map(HashId).collect(),
            supported_aead_ids: a.into_iter().map(AeadId).collect(),
            max_aggregate_rate_kbps: rate,
            max_channels_announced: announced,
            max_channels_joined: j % (announced + 1),
        })
}

/// Descending ack ranges with at least one missing number between them,
/// built upwards from a random base.
pub fn ack_ranges() -> impl Strategy<Value = Vec<RangeInclusive<u64>>> {
    (0..1u64 << 40, vec((0..1000u64, 2..1000u64), 1..20)).prop_map(|(base, parts)| {
        let mut out = Vec::new();
        let mut next = base;
        for (len, gap) in parts {
            out.push(next..=next + len);
            next += len + gap;
        }
        out.reverse();
        out
    })
}

pub fn digests() -> impl Strategy<Value = Vec<Vec<u8>>> {
    (1..=MAX_DIGEST_LEN, 1..16usize).prop_flat_map(|(size, n)| vec(vec(any::<u8>(), size), n))
}

pub fn announce() -> impl Strategy<Value = Announce> {
    (
        channel_id(),
        ip_pair(),
        any::<u16>(),
        any::<u16>(),
        any::<u16>(),
        secret(),
        varint(),
    )
        .prop_map(|(id, (s, g), port, aead, hash, hs, rate)| Announce {
            channel_id: id,
            source_ip: s,
            group_ip: g,
            udp_port: port,
            aead_id: AeadId(aead),
            hash_id: HashId(hash),
            header_secret: hs,
            max_rate_kbps: rate,
        })
}

/// Frame kinds, in type order.
pub const MC_KINDS: [&str; 9] = [
    "MC_ANNOUNCE",
    "MC_JOIN",
    "MC_LEAVE",
    "MC_RETIRE",
    "MC_STATE",
    "MC_INTEGRITY",
    "MC_KEY",
    "MC_ACK",
    "MC_LIMITS",
];

pub fn mc_frame_of(kind: usize) -> BoxedStrategy<McFrame> {
    match kind {
        0 => announce().prop_map(McFrame::Announce).boxed(),
        1 => channel_id()
            .prop_map(|channel_id| McFrame::Join { channel_id })
            .boxed(),
        2 => (channel_id(), varint())
            .prop_map(|(channel_id, reason_code)| McFrame::Leave {
                channel_id,
                reason_code,
            })
            .boxed(),
        3 => channel_id()
            .prop_map(|channel_id| McFrame::Retire { channel_id })
            .boxed(),
        4 => (channel_id(), state(), varint())
            .prop_map(|(channel_id, new_state, reason_code)| McFrame::State {
                channel_id,
                new_state,
                reason_code,
            })
            .boxed(),
        5 => (channel_id(), varint(), digests())
            .prop_map(
                |(channel_id, start_packet_number, digests)| McFrame::Integrity {
                    channel_id,
                    start_packet_number,
                    digests,
                },
            )
            .boxed(),
        6 => (channel_id(), varint(), secret())
            .prop_map(|(channel_id, from_packet_number, secret)| McFrame::Key {
                channel_id,
                from_packet_number,
                secret,
            })
            .boxed(),
        7 => (channel_id(), ack_ranges(), varint())
            .prop_map(|(channel_id, ack_ranges, ack_delay)| McFrame::Ack {
                channel_id,
                ack_ranges,
                ack_delay,
            })
            .boxed(),
        8 => limits()
            .prop_map(|limits| McFrame::Limits { limits })
            .boxed(),
        _ => unreachable!("nine frame kinds"),
    }
}

pub fn mc_frame() -> impl Strategy<Value = McFrame> {
    (0..MC_KINDS.len()).prop_flat_map(mc_frame_of)
}

pub fn transport_params() -> impl Strategy<Value = TransportParams> {
    (
        any::<bool>(),
        proptest::option::of(limits()),
        proptest::option::of(varint()),
    )
        .prop_map(
            |(multicast_supported, client_limits, initial_max_data)| TransportParams {
                multicast_supported,
                client_limits,
                initial_max_data,
            },
        )
}

fn bytes_up_to(n: usize) -> impl Strategy<Value = Bytes> {
    vec(any::<u8>(), 0..n).prop_map(Bytes::from)
}

pub fn packet_frame() -> impl Strategy<Value = PacketFrame> {
    prop_oneof![
        (1..64usize).prop_map(PacketFrame::Padding),
        (ack_ranges(), varint())
            .prop_map(|(ranges, ack_delay)| PacketFrame::Ack { ranges, ack_delay }),
        (0..1u64 << 40, bytes_up_to(300))
            .prop_map(|(offset, data)| PacketFrame::Control { offset, data }),
        (varint(), 0..1u64 << 40, bytes_up_to(300), any::<bool>()).prop_map(
            |(stream_id, offset, data, fin)| PacketFrame::Stream {
                stream_id,
                offset,
                data,
                fin
            }
        ),
        mc_frame_of(5).prop_map(PacketFrame::Mc),
        mc_frame_of(6).prop_map(PacketFrame::Mc),
    ]
}

pub fn control_frame() -> impl Strategy<Value = ControlFrame> {
    prop_oneof![
        transport_params().prop_map(ControlFrame::Hello),
        varint().prop_map(ControlFrame::MaxData),
        (varint(), varint(), channel_id()).prop_map(|(a, b, connection_id)| {
            let (retire_prior_to, sequence) = (a.min(b), a.max(b));
            ControlFrame::NewConnectionId {
                sequence,
                retire_prior_to,
                connection_id,
            }
        }),
        varint().prop_map(|error_code| ControlFrame::ConnectionClose { error_code }),
        mc_frame().prop_map(ControlFrame::Mc),
    ]
}

pub fn bundled(name: &str) -> Scenario {
    scenario::bundled(name).unwrap_or_else(|e| panic!("{name}: {e}"))
}

pub fn run(s: &Scenario) -> RunOutcome {
    sim::run(s, SimOptions::default()).unwrap_or_else(|e| panic!("{}: {e}", s.name))
}

pub fn run_lines(s: &Scenario) -> RunOutcome {
    let options = SimOptions {
        keep_lines: true,
        ..SimOptions::default()
    };
    sim::run(s, options).unwrap_or_else(|e| panic!("{}: {e}", s.name))
}
