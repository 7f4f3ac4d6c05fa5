// Licensed under the Apache License, Version 2.0 <LICENSE-APACHE or
// http://www.apache.org/licenses/LICENSE-2.0> or the MIT license
// <LICENSE-MIT or http://opensource.org/licenses/MIT>, at your
// option. This file may not be copied, modified, or distributed
// except according to those terms.

use std::ops::RangeInclusive;

use crate::ranges::RangeSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Received {
    New,
    Duplicate,
}

/// Received packet numbers of one channel.
#[derive(Clone, Debug, Default)]
pub struct PacketNumberSpace {
    received: RangeSet,
    /// Packet numbers below this are forgotten and treated as duplicates.
    floor: u64,
}

impl PacketNumberSpace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn largest(&self) -> Option<u64> {
        self.received.last()
    }

    pub fn contains(&self, pn: u64) -> bool {
        pn < self.floor || self.received.contains(pn)
    }

    pub fn record(&mut self, pn: u64) -> Received {
        if self.contains(pn) {
            return Received::Duplicate;
        }
        self.received.insert_one(pn);
        Received::New
    }

    /// Up to `max` ranges, highest first, in the form MC_ACK carries.
    pub fn ack_ranges(&self, max: usize) -> Vec<RangeInclusive<u64>> {
        self.received
            .iter()
            .rev()
            .take(max)
            .map(|r| r.start..=r.end - 1)
            .collect()
    }

    /// Forgets state below `pn`; those numbers stay duplicates.
    pub fn forget_below(&mut self, pn: u64) {
        if pn > self.floor {
            self.floor = pn;
            self.received.remove_below(pn);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn duplicates_and_reordering() {
        let mut s = PacketNumberSpace::new();
        assert_eq!(s.record(0), Received::New);
        assert_eq!(s.record(5), Received::New);
        assert_eq!(s.record(5), Received::Duplicate);
        assert_eq!(s.record(7), Received::New);
        assert_eq!(s.record(3), Received::New);
        assert_eq!(s.ack_ranges(10), vec![7..=7, 5..=5, 3..=3, 0..=0]);
        assert_eq!(s.ack_ranges(2), vec![7..=7, 5..=5]);
    }

    #[test]
    fn forgotten_are_duplicates() {
        let mut s = PacketNumberSpace::new();
        s.record(10);
        s.forget_below(8);
        assert_eq!(s.record(3), Received::Duplicate);
        assert_eq!(s.record(9), Received::New);
    }

    proptest! {
        #[test]
        fn spaces_are_independent(pns in prop::collection::vec((0usize..3, 0u64..50), 0..200)) {
            let mut spaces = vec![PacketNumberSpace::new(); 3];
            let mut seen = std::collections::HashSet::new();
            for (ch, pn) in pns {
                let expect = if seen.insert((ch, pn)) { Received::New } else { Received::Duplicate };
                prop_assert_eq!(spaces[ch].record(pn), expect);
            }
        }
    }
}
