// Licensed under the Apache License, Version 2.0 <LICENSE-APACHE or
// http://www.apache.org/licenses/LICENSE-2.0> or the MIT license
// <LICENSE-MIT or http://opensource.org/licenses/MIT>, at your
// option. This file may not be copied, modified, or distributed
// except according to those terms.

#![no_main]

use libfuzzer_sys::fuzz_target;
use mcquic::crypto::{
    derive_header_key, unprotect_packet, AeadAlgorithm, ChannelSecret, KeySchedule,
};

// Keys of the first aes128gcm golden vector, so its datagram opens.
const SECRET: [u8; 32] = [
    0x01, 0x02, 0x03, 0x04, 0x05, 0x06, 0x07, 0x08, 0x09, 0x0a, 0x0b, 0x0c, 0x0d, 0x0e, 0x0f, 0x10,
    0x11, 0x12, 0x13, 0x14, 0x15, 0x16, 0x17, 0x18, 0x19, 0x1a, 0x1b, 0x1c, 0x1d, 0x1e, 0x1f, 0x20,
];

fuzz_target!(|data: &[u8]| {
    let aead = AeadAlgorithm::Aes128Gcm;
    let header_secret: Vec<u8> = (0x64..0x84).collect();
    let hp = derive_header_key(&header_secret, aead);
    let mut schedule = KeySchedule::new();
    schedule.insert(&ChannelSecret::new(&SECRET, 0).unwrap(), aead);
    let largest = data.first().map(|b| u64::from(*b) << 8);
    let _ = unprotect_packet(&hp, &schedule, data, None);
    let _ = unprotect_packet(&hp, &schedule, data, largest);
});
