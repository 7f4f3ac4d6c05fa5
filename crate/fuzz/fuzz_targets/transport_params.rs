// Licensed under the Apache License, Version 2.0 <LICENSE-APACHE or
// http://www.apache.org/licenses/LICENSE-2.0> or the MIT license
// <LICENSE-MIT or http://opensource.org/licenses/MIT>, at your
// option. This file may not be copied, modified, or distributed
// except according to those terms.

#![no_main]

use libfuzzer_sys::fuzz_target;
use mcquic::wire::{decode_transport_params, encode_transport_params};

fuzz_target!(|data: &[u8]| {
    if let Ok(p) = decode_transport_params(data) {
        let enc = encode_transport_params(&p).expect("decoded params encode");
        assert_eq!(decode_transport_params(&enc).unwrap(), p);
    }
});
