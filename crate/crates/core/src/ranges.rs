// Licensed under the Apache License, Version 2.0 <LICENSE-APACHE or
// http://www.apache.org/licenses/LICENSE-2.0> or the MIT license
// <LICENSE-MIT or http://opensource.org/licenses/MIT>, at your
// option. This file may not be copied, modified, or distributed
// except according to those terms.

//! Sets of non-overlapping half-open `u64` ranges.
//!
//! Used for received packet numbers, acknowledged ranges and stream byte
//! coverage. Adjacent ranges are always merged, so two sets holding the
//! same values compare equal.

use std::collections::BTreeMap;
use std::ops::Range;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RangeSet {
    // start -> end (exclusive)
    inner: BTreeMap<u64, u64>,
}

impl RangeSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.is_empty()
    }

    /// Number of disjoint ranges.
    pub fn len(&self) -> usize {
        self.inner.len()
    }

    /// Number of values covered.
    pub fn count(&self) -> u64 {
        self.inner.iter().map(|(s, e)| e - s).sum()
    }

    pub fn first(&self) -> Option<u64> {
        self.inner.keys().next().copied()
    }

    /// Largest value contained in the set.
    pub fn last(&self) -> Option<u64> {
        self.inner.values().next_back().map(|e| e - 1)
    }

    pub fn contains(&self, v: u64) -> bool {
        match self.inner.range(..=v).next_back() {
            Some((_, &e)) => v < e,
            None => false,
        }
    }

    /// True if every value of `r` is in the set.
    pub fn covers(&self, r: Range<u64>) -> bool {
        if r.is_empty() {
            return true;
        }
        match self.inner.range(..=r.start).next_back() {
            Some((_, &e)) => r.end <= e,
            None => false,
        }
    }

    pub fn insert_one(&mut self, v: u64) {
        self.insert(v..v + 1);
    }

    pub fn insert(&mut self, r: Range<u64>) {
        if r.is_empty() {
            return;
        }
        let mut start = r.start;
        let mut end = r.end;

        // Merge with a predecessor that overlaps or touches.
        if let Some((&s, &e)) = self.inner.range(..=start).next_back() {
            if e >= start {
                start = s;
                end = end.max(e);
                self.inner.remove(&s);
            }
        }
        // Absorb successors.
        let succ: Vec<(u64, u64)> = self
            .inner
            .range(start..=end)
            .map(|(&s, &e)| (s, e))
            .collect();
        for (s, e) in succ {
            end = end.max(e);
            self.inner.remove(&s);
        }
        self.inner.insert(start, end);
    }

    pub fn remove(&mut self, r: Range<u64>) {
        if r.is_empty() {
            return;
        }
        let hits: Vec<(u64, u64)> = self
            .inner
            .range(..r.end)
            .filter(|(_, &e)| e > r.start)
            .map(|(&s, &e)| (s, e))
            .collect();
        for (s, e) in hits {
            self.inner.remove(&s);
            if s < r.start {
                self.inner.insert(s, r.start);
            }
            if e > r.end {
                self.inner.insert(r.end, e);
            }
        }
    }

    /// Ranges in ascending order.
    pub fn iter(&self) -> impl DoubleEndedIterator<Item = Range<u64>> + '_ {
        self.inner.iter().map(|(&s, &e)| s..e)
    }

    /// The parts of `within` that are not in the set, ascending.
    pub fn gaps(&self, within: Range<u64>) -> Vec<Range<u64>> {
        let mut out = Vec::new();
        let mut cursor = within.start;
        for r in self.iter() {
            if r.end <= cursor {
                continue;
            }
            if r.start >= within.end {
                break;
            }
            if r.start > cursor {
                out.push(cursor..r.start.min(within.end));
            }
            cursor = cursor.max(r.end);
            if cursor >= within.end {
                break;
            }
        }
        if cursor < within.end {
            out.push(cursor..within.end);
        }
        out
    }

    /// Drop everything below `v`.
    pub fn remove_below(&mut self, v: u64) {
        self.remove(0..v);
    }
}

impl FromIterator<u64> for RangeSet {
    fn from_iter<T: IntoIterator<Item = u64>>(iter: T) -> Self {
        let mut set = RangeSet::new();
        for v in iter {
            set.insert_one(v);
        }
        set
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    #[test]
    fn merges_adjacent() {
        let mut s = RangeSet::new();
        s.insert(0..5);
        s.insert(5..10);
        assert_eq!(s.len(), 1);
        s.insert(20..30);
        s.insert(8..21);
        assert_eq!(s.iter().collect::<Vec<_>>(), vec![0..30]);
    }

    #[test]
    fn gaps_and_remove() {
        let s: RangeSet = [1, 2, 3, 7, 8].into_iter().collect();
        assert_eq!(s.gaps(0..10), vec![0..1, 4..7, 9..10]);
        let mut t = s.clone();
        t.remove(2..8);
        assert_eq!(t.iter().collect::<Vec<_>>(), vec![1..2, 8..9]);
        assert!(s.covers(1..4));
        assert!(!s.covers(1..5));
        assert_eq!(s.last(), Some(8));
    }

    proptest! {
        #[test]
        fn behaves_like_a_set(ops in proptest::collection::vec((any::<bool>(), 0u64..200, 0u64..20), 0..60)) {
            let mut s = RangeSet::new();
            let mut model = BTreeSet::new();
            for (ins, start, len) in ops {
                if ins {
                    s.insert(start..start + len);
                    model.extend(start..start + len);
                } else {
                    s.remove(start..start + len);
                    for v in start..start + len { model.remove(&v); }
                }
            }
            for v in 0..230 {
                prop_assert_eq!(s.contains(v), model.contains(&v));
            }
            prop_assert_eq!(s.count(), model.len() as u64);
            // Canonical form: no two ranges touch.
            let rs: Vec<_> = s.iter().collect();
            for w in rs.windows(2) {
                prop_assert!(w[0].end < w[1].start);
            }
        }
    }
}
