// Licensed under the Apache License, Version 2.0 <LICENSE-APACHE or
// http://www.apache.org/licenses/LICENSE-2.0> or the MIT license
// <LICENSE-MIT or http://opensource.org/licenses/MIT>, at your
// option. This file may not be copied, modified, or distributed
// except according to those terms.

//! Encodings and key material checked against reference values produced by
//! an independent implementation (`data/gen_golden.py`). Each check panics
//! on a mismatch and returns the number of vectors it covered.

use mcquic::crypto::{
    compute_packet_digest, derive_channel_keys, derive_header_key, protect_packet,
    unprotect_packet, ChannelSecret, KeySchedule,
};
use mcquic::scenario::parse_aead;
use mcquic::wire::{
    decode_frame, decode_transport_params, decode_varint, encode_frame, encode_transport_params,
    encode_varint, ChannelId, ClientLimits, HashId, McFrame, MulticastPacketHeader,
    TransportParams,
};
use serde_json::Value;

fn golden() -> Value {
    serde_json::from_str(include_str!("../data/golden.json")).unwrap()
}

fn hex_field(v: &Value, k: &str) -> Vec<u8> {
    hex::decode(v[k].as_str().unwrap()).unwrap()
}

pub fn varints() -> usize {
    let all = golden()["varints"].as_array().unwrap().clone();
    for v in &all {
        let value = v["value"].as_u64().unwrap();
        let bytes = hex_field(v, "hex");
        assert_eq!(encode_varint(value).unwrap(), bytes, "{value}");
        assert_eq!(decode_varint(&bytes).unwrap(), (value, bytes.len()));
    }
    all.len()
}

pub fn frames() -> usize {
    let all = golden()["frames"].as_array().unwrap().clone();
    for v in &all {
        let frame: McFrame = serde_json::from_value(v["frame"].clone()).unwrap();
        let bytes = hex_field(v, "hex");
        assert_eq!(encode_frame(&frame).unwrap(), bytes, "{}", frame.name());
        assert_eq!(decode_frame(&bytes).unwrap(), (frame, bytes.len()));
    }
    all.len()
}

pub fn transport_params() -> usize {
    let all = golden()["transport_params"].as_array().unwrap().clone();
    for v in &all {
        let p = &v["params"];
        let params = TransportParams {
            multicast_supported: p["multicast_supported"].as_bool().unwrap(),
            client_limits: serde_json::from_value::<Option<ClientLimits>>(
                p["client_limits"].clone(),
            )
            .unwrap(),
            initial_max_data: p["initial_max_data"].as_u64(),
        };
        let bytes = hex_field(v, "hex");
        assert_eq!(encode_transport_params(&params).unwrap(), bytes);
        assert_eq!(decode_transport_params(&bytes).unwrap(), params);
    }
    all.len()
}

pub fn packet_protection() -> usize {
    let vectors = golden()["crypto"].as_array().unwrap().clone();
    assert_eq!(vectors.len(), 12);
    for v in &vectors {
        let aead = parse_aead(v["aead"].as_str().unwrap()).unwrap();
        let pn = v["packet_number"].as_u64().unwrap();
        let secret = ChannelSecret::new(&hex_field(v, "secret"), 0).unwrap();
        let keys = derive_channel_keys(&secret, aead);
        assert_eq!(keys.key, hex_field(v, "key"));
        assert_eq!(keys.iv.to_vec(), hex_field(v, "iv"));
        let hp = derive_header_key(&hex_field(v, "header_secret"), aead);
        assert_eq!(hp.key, hex_field(v, "hp_key"));
        assert_eq!(
            hp.mask(&hex_field(v, "sample")).to_vec(),
            hex_field(v, "mask")
        );

        let id = ChannelId::new(&hex_field(v, "channel_id")).unwrap();
        let header = MulticastPacketHeader::new(id, pn);
        let payload = hex_field(v, "payload");
        let protected = protect_packet(&keys, &hp, &header, &payload).unwrap();
        assert_eq!(
            protected,
            hex_field(v, "protected"),
            "{} pn {pn}",
            v["aead"]
        );
        assert_eq!(
            compute_packet_digest(HashId(4), &protected).unwrap(),
            hex_field(v, "sha256")
        );

        let mut schedule = KeySchedule::new();
        schedule.insert(&secret, aead);
        let largest = pn.checked_sub(1);
        let (h, plain) = unprotect_packet(&hp, &schedule, &protected, largest).unwrap();
        assert_eq!(h.packet_number, pn);
        assert_eq!(plain, payload);
    }
    vectors.len()
}

pub fn check_all() -> usize {
    varints() + frames() + transport_params() + packet_protection()
}
