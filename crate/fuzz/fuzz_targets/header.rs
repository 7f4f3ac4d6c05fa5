// Licensed under the Apache License, Version 2.0 <LICENSE-APACHE or
// http://www.apache.org/licenses/LICENSE-2.0> or the MIT license
// <LICENSE-MIT or http://opensource.org/licenses/MIT>, at your
// option. This file may not be copied, modified, or distributed
// except according to those terms.

#![no_main]

use libfuzzer_sys::fuzz_target;
use mcquic::wire::PlainHeader;

fuzz_target!(|data: &[u8]| {
    if let Ok(h) = PlainHeader::parse(data) {
        assert!(h.pn_offset <= data.len());
    }
});
