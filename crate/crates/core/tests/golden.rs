// Licensed under the Apache License, Version 2.0 <LICENSE-APACHE or
// http://www.apache.org/licenses/LICENSE-2.0> or the MIT license
// <LICENSE-MIT or http://opensource.org/licenses/MIT>, at your
// option. This file may not be copied, modified, or distributed
// except according to those terms.

mod common;

use common::golden;

#[test]
fn varints() {
    assert_eq!(golden::varints(), 12);
}

#[test]
fn frames() {
    assert_eq!(golden::frames(), 11);
}

#[test]
fn transport_params() {
    assert_eq!(golden::transport_params(), 2);
}

#[test]
fn packet_protection() {
    assert_eq!(golden::packet_protection(), 12);
}
