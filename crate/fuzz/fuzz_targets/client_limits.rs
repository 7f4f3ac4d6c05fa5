// Licensed under the Apache License, Version 2.0 <LICENSE-APACHE or
// http://www.apache.org/licenses/LICENSE-2.0> or the MIT license
// <LICENSE-MIT or http://opensource.org/licenses/MIT>, at your
// option. This file may not be copied, modified, or distributed
// except according to those terms.

#![no_main]

use libfuzzer_sys::fuzz_target;
use mcquic::wire::{decode_client_limits, encode_client_limits};

fuzz_target!(|data: &[u8]| {
    if let Ok(l) = decode_client_limits(data) {
        assert!(l.max_channels_joined <= l.max_channels_announced);
        let enc = encode_client_limits(&l).expect("decoded limits encode");
        assert_eq!(decode_client_limits(&enc).unwrap(), l);
    }
});
