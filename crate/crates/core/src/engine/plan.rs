// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    /// Already cached on the sender; streamed straight from the cache.
    DirectSend,
    /// Computed by the sender, each layer streamed once computed.
    PrefillThenSend,
    /// Computed by the sender only so later positions can attend to it.
    PrefillOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub begin: usize,
    pub end: usize,
    pub kind: SegmentKind,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferPlan {
    pub segments: Vec<Segment>,
}

impl TransferPlan {
    /// Tokens the sender must compute.
    pub fn prefill_range(&self) -> Option<(usize, usize)> {
        let mut it = self.segments.iter().filter(|s| s.kind != SegmentKind::DirectSend);
        let first = it.next()?;
        let last = it.next_back().unwrap_or(first);
        Some((first.begin, last.end))
    }

    pub fn sent_tokens(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| s.kind != SegmentKind::PrefillOnly)
            .map(|s| s.end - s.begin)
            .sum()
    }

    pub fn is_direct_only(&self) -> bool {
        self.segments.iter().all(|s| s.kind == SegmentKind::DirectSend)
    }
}

/// Splits `[min(m, begin), end)` into segments given a sender-side cached
/// prefix of length `m` and a requested range `[begin, end)`.
pub fn compute_transfer_plan(m: usize, begin: usize, end: usize) -> TransferPlan {
    let mut segments: Vec<Segment> = Vec::new();
    let mut push = |b: usize, e: usize, kind| {
        if b < e {
            segments.push(Segment { begin: b, end: e, kind });
        }
    };
    push(begin, end.min(m), SegmentKind::DirectSend);
    push(m, begin.min(end), SegmentKind::PrefillOnly);
    push(m.max(begin), end, SegmentKind::PrefillThenSend);
    segments.sort_by_key(|s| s.begin);
    TransferPlan { segments }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use SegmentKind::*;

    fn seg(begin: usize, end: usize, kind: SegmentKind) -> Segment {
        Segment { begin, end, kind }
    }

    #[test]
    fn case_one_sender_ahead() {
        let p = compute_transfer_plan(600, 200, 999);
        assert_eq!(p.segments, vec![seg(200, 600, DirectSend), seg(600, 999, PrefillThenSend)]);
        assert_eq!(p.prefill_range(), Some((600, 999)));
    }

    #[test]
    fn case_two_receiver_ahead() {
        let p = compute_transfer_plan(200, 600, 999);
        assert_eq!(p.segments, vec![seg(200, 600, PrefillOnly), seg(600, 999, PrefillThenSend)]);
        assert_eq!(p.sent_tokens(), 399);
        assert_eq!(p.prefill_range(), Some((200, 999)));
    }

    #[test]
    fn fresh_and_fully_cached() {
        let p = compute_transfer_plan(0, 0, 99);
        assert_eq!(p.segments, vec![seg(0, 99, PrefillThenSend)]);
        let p = compute_transfer_plan(120, 10, 100);
        assert_eq!(p.segments, vec![seg(10, 100, DirectSend)]);
        assert!(p.is_direct_only());
        assert_eq!(compute_transfer_plan(5, 7, 7).segments, vec![seg(5, 7, PrefillOnly)]);
        assert!(compute_transfer_plan(9, 7, 7).segments.is_empty());
    }

    fn classify(m: usize, begin: usize, end: usize, pos: usize) -> Option<SegmentKind> {
        if pos < begin.min(m) || pos >= end {
            None
        } else if pos < m {
            Some(DirectSend)
        } else if pos < begin {
            Some(PrefillOnly)
        } else {
            Some(PrefillThenSend)
        }
    }

    proptest! {
        #[test]
        fn plan_partitions_like_brute_force(m in 0usize..60, a in 0usize..60, b in 0usize..60) {
            let (begin, end) = (a.min(b), a.max(b));
            let plan = compute_transfer_plan(m, begin, end);
            let mut covered = [None; 64];
            for w in plan.segments.windows(2) {
                prop_assert_eq!(w[0].end, w[1].begin);
                prop_assert_ne!(w[0].kind, w[1].kind);
            }
            for s in &plan.segments {
                prop_assert!(s.begin < s.end);
                for slot in &mut covered[s.begin..s.end] {
                    *slot = Some(s.kind);
                }
            }
            for (p, got) in covered.iter().enumerate() {
                prop_assert_eq!(*got, classify(m, begin, end, p), "pos {}", p);
            }
            let sent: usize = plan.sent_tokens();
            prop_assert_eq!(sent, end - begin);
        }
    }
}
