// Licensed under the Apache License, Version 2.0 <LICENSE-APACHE or
// http://www.apache.org/licenses/LICENSE-2.0> or the MIT license
// <LICENSE-MIT or http://opensource.org/licenses/MIT>, at your
// option. This file may not be copied, modified, or distributed
// except according to those terms.

#![no_main]

use libfuzzer_sys::fuzz_target;
use mcquic::wire::{decode_varint, encode_varint};

fuzz_target!(|data: &[u8]| {
    if let Ok((v, n)) = decode_varint(data) {
        assert!(n <= data.len());
        // Non-minimal encodings are accepted; the canonical one is never longer.
        let enc = encode_varint(v).unwrap();
        assert!(enc.len() <= n);
        assert_eq!(decode_varint(&enc).unwrap(), (v, enc.len()));
    }
});
