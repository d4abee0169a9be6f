// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};

use super::KvCacheError;

pub type PageId = u32;

/// A run of slots inside one page.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "(u32, u32, u32)", into = "(u32, u32, u32)")]
pub struct SlotRange {
    pub page: PageId,
    pub slot_begin: u32,
    pub slot_count: u32,
}

impl From<(u32, u32, u32)> for SlotRange {
    fn from((page, slot_begin, slot_count): (u32, u32, u32)) -> Self {
        Self {
            page,
            slot_begin,
            slot_count,
        }
    }
}

impl From<SlotRange> for (u32, u32, u32) {
    fn from(r: SlotRange) -> Self {
        (r.page, r.slot_begin, r.slot_count)
    }
}

/// Run-length encoded addresses of KV slots for a contiguous token run.
///
/// Triples are listed in token order; the first triple holds the slot of
/// `token_begin`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KvAddrInfo {
    pub token_begin: usize,
    pub token_count: usize,
    pub ranges: Vec<SlotRange>,
}

impl KvAddrInfo {
    pub fn empty(token_begin: usize) -> Self {
        Self {
            token_begin,
            token_count: 0,
            ranges: Vec::new(),
        }
    }

    /// Builds the compressed form from a per-position slot list, merging
    /// adjacent slots of the same page.
    pub fn from_slots(token_begin: usize, slots: impl IntoIterator<Item = (PageId, u32)>) -> Self {
        let mut ranges: Vec<SlotRange> = Vec::new();
        let mut count = 0;
        for (page, slot) in slots {
            count += 1;
            if let Some(last) = ranges.last_mut() {
                if last.page == page && last.slot_begin + last.slot_count == slot {
                    last.slot_count += 1;
                    continue;
                }
            }
            ranges.push(SlotRange {
                page,
                slot_begin: slot,
                slot_count: 1,
            });
        }
        Self {
            token_begin,
            token_count: count,
            ranges,
        }
    }

    /// Slots in token order.
    pub fn slots(&self) -> impl Iterator<Item = (PageId, u32)> + '_ {
        self.ranges
            .iter()
            .flat_map(|r| (r.slot_begin..r.slot_begin + r.slot_count).map(move |s| (r.page, s)))
    }

    pub fn validate(&self, page_size: usize) -> Result<(), KvCacheError> {
        let mut total = 0usize;
        let mut seen = std::collections::HashSet::new();
        for r in &self.ranges {
            if r.slot_count == 0 || (r.slot_begin + r.slot_count) as usize > page_size {
                return Err(KvCacheError::BadAddress(format!(
                    "range {:?} outside page of {page_size} slots",
                    r
                )));
            }
            for s in r.slot_begin..r.slot_begin + r.slot_count {
                if !seen.insert((r.page, s)) {
                    return Err(KvCacheError::BadAddress(format!(
                        "slot ({}, {s}) addressed twice",
                        r.page
                    )));
                }
            }
            total += r.slot_count as usize;
        }
        if total != self.token_count {
            return Err(KvCacheError::BadAddress(format!(
                "ranges cover {total} slots but token_count is {}",
                self.token_count
            )));
        }
        Ok(())
    }

    /// Binary form: `token_begin:u64, token_count:u64, n:u32, n x (page,
    /// slot_begin, slot_count):u32`, little-endian.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 12 * self.ranges.len());
        out.extend_from_slice(&(self.token_begin as u64).to_le_bytes());
        out.extend_from_slice(&(self.token_count as u64).to_le_bytes());
        out.extend_from_slice(&(self.ranges.len() as u32).to_le_bytes());
        for r in &self.ranges {
            out.extend_from_slice(&r.page.to_le_bytes());
            out.extend_from_slice(&r.slot_begin.to_le_bytes());
            out.extend_from_slice(&r.slot_count.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, KvCacheError> {
        let bad = |what: &str| KvCacheError::BadAddress(format!("truncated address: {what}"));
        let u64_at = |o: usize| -> Option<u64> {
            bytes.get(o..o + 8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
        };
        let u32_at = |o: usize| -> Option<u32> {
            bytes.get(o..o + 4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        };
        let token_begin = u64_at(0).ok_or_else(|| bad("header"))? as usize;
        let token_count = u64_at(8).ok_or_else(|| bad("header"))? as usize;
        let n = u32_at(16).ok_or_else(|| bad("header"))? as usize;
        if bytes.len() != 20 + 12 * n {
            return Err(bad("range list"));
        }
        let ranges = (0..n)
            .map(|i| {
                let o = 20 + 12 * i;
                SlotRange {
                    page: u32_at(o).unwrap(),
                    slot_begin: u32_at(o + 4).unwrap(),
                    slot_count: u32_at(o + 8).unwrap(),
                }
            })
            .collect();
        Ok(Self {
            token_begin,
            token_count,
            ranges,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn merges_contiguous_slots() {
        let a = KvAddrInfo::from_slots(4, [(3, 0), (3, 1), (3, 2), (7, 0), (7, 1)]);
        assert_eq!(a.token_count, 5);
        assert_eq!(a.ranges, vec![(3, 0, 3).into(), (7, 0, 2).into()]);
        a.validate(16).unwrap();
        assert_eq!(a.slots().count(), 5);
    }

    #[test]
    fn validate_rejects_bad_counts() {
        let mut a = KvAddrInfo::from_slots(0, [(1, 0), (1, 1)]);
        a.token_count = 3;
        assert!(a.validate(16).is_err());
        let b = KvAddrInfo::from_slots(0, [(1, 15), (1, 16)]);
        assert!(b.validate(16).is_err());
    }

    #[test]
    fn json_shape() {
        let a = KvAddrInfo::from_slots(2, [(5, 1), (5, 2)]);
        let v = serde_json::to_value(&a).unwrap();
        assert_eq!(
            v,
            serde_json::json!({"token_begin": 2, "token_count": 2, "ranges": [[5, 1, 2]]})
        );
    }

    proptest! {
        #[test]
        fn encode_decode_identity(begin in 0usize..10_000, runs in prop::collection::vec((0u32..1000, 0u32..16, 1u32..16), 0..20)) {
            let ranges: Vec<SlotRange> = runs.into_iter().map(SlotRange::from).collect();
            let token_count = ranges.iter().map(|r| r.slot_count as usize).sum();
            let a = KvAddrInfo { token_begin: begin, token_count, ranges };
            let b = KvAddrInfo::decode(&a.encode()).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
