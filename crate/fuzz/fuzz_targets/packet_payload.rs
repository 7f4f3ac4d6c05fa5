// Licensed under the Apache License, Version 2.0 <LICENSE-APACHE or
// http://www.apache.org/licenses/LICENSE-2.0> or the MIT license
// <LICENSE-MIT or http://opensource.org/licenses/MIT>, at your
// option. This file may not be copied, modified, or distributed
// except according to those terms.

#![no_main]

use libfuzzer_sys::fuzz_target;
use mcquic::wire::{decode_packet_frame, encode_packet_frame, PacketFrame};

fuzz_target!(|data: &[u8]| {
    let mut rest = data;
    while let Ok((f, n)) = decode_packet_frame(rest) {
        assert!(n > 0 && n <= rest.len());
        let mut enc = Vec::new();
        encode_packet_frame(&mut enc, &f).expect("decoded frame encodes");
        if !matches!(f, PacketFrame::Padding(_)) {
            assert_eq!(decode_packet_frame(&enc).unwrap(), (f, enc.len()));
        }
        rest = &rest[n..];
    }
});
