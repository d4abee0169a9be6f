// SPDX-License-Identifier: Apache-2.0

//! Emulated one-sided remote writes.
//!
//! A sender streams one [`frame::WriteFrame`] per (layer, contiguous range)
//! as soon as that layer's KV exists. The receiver side is an agent that
//! applies frames into pre-registered slots and acks them without involving
//! the receiving engine's step loop. Two backends share the codec: a virtual
//! time channel for simulation and TCP for multi-process service mode.

pub mod frame;
pub mod mem;
pub mod tcp;

use crate::kvcache::{LayerWrite, Rank, SendTag};
use crate::toymodel::cost::CostModel;
pub use frame::{AckFrame, AckStatus, Frame, FrameError, WriteFrame};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TransportError {
    #[error("frame error: {0}")]
    Frame(#[from] FrameError),
    #[error("checksum still failing after retransmit (tag {tag}, layer {layer})")]
    ChecksumMismatch { tag: SendTag, layer: u32 },
    #[error("receiver rejected write (tag {tag}, layer {layer})")]
    UnknownAddress { tag: SendTag, layer: u32 },
    #[error("layer {got} enqueued before layer {expected}")]
    LayerOrder { expected: u32, got: u32 },
    #[error("peer {0} unreachable: {1}")]
    PeerUnreachable(Rank, String),
}

impl WriteFrame {
    pub fn from_layer_write(w: &LayerWrite, dim: usize) -> Self {
        WriteFrame {
            tag: w.tag,
            layer: w.layer,
            addr: w.addr.clone(),
            dim: dim as u32,
            words: w.words.clone(),
        }
    }

    pub fn tokens(&self) -> usize {
        self.addr.token_count
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JobState {
    Queued,
    Streaming,
    Acked,
    Failed,
}

/// Sender-side progress of one transfer across all layers.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferJob {
    pub dest: Rank,
    pub tag: SendTag,
    enqueued: Vec<f64>,
    acked: Vec<bool>,
    layers: usize,
    state: JobState,
}

impl TransferJob {
    pub fn new(dest: Rank, tag: SendTag, layers: usize) -> Self {
        Self {
            dest,
            tag,
            enqueued: Vec::with_capacity(layers),
            acked: vec![false; layers],
            layers,
            state: JobState::Queued,
        }
    }

    pub fn state(&self) -> JobState {
        self.state
    }

    /// Records that layer `layer` was handed to the channel at `t`. Layers
    /// must arrive in order.
    pub fn enqueue(&mut self, layer: u32, t: f64) -> Result<(), TransportError> {
        let expected = self.enqueued.len() as u32;
        if layer != expected {
            return Err(TransportError::LayerOrder { expected, got: layer });
        }
        self.enqueued.push(t);
        self.state = JobState::Streaming;
        Ok(())
    }

    pub fn enqueue_time(&self, layer: u32) -> Option<f64> {
        self.enqueued.get(layer as usize).copied()
    }

    pub fn ack(&mut self, layer: u32, ok: bool) -> JobState {
        if !ok {
            self.state = JobState::Failed;
        } else if self.state != JobState::Failed {
            if let Some(a) = self.acked.get_mut(layer as usize) {
                *a = true;
            }
            if self.acked.iter().all(|&a| a) && self.enqueued.len() == self.layers {
                self.state = JobState::Acked;
            }
        }
        self.state
    }
}

/// Per-layer timings of a two-stream (compute, communication) schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapSchedule {
    pub compute_end: Vec<f64>,
    pub transfer_start: Vec<f64>,
    pub transfer_end: Vec<f64>,
    pub makespan: f64,
}

/// Layer `l`'s transfer starts once its compute ends and the previous
/// transfer has drained; compute runs back to back.
pub fn overlap_schedule(compute_spans: &[f64], transfer_spans: &[f64]) -> OverlapSchedule {
    assert_eq!(compute_spans.len(), transfer_spans.len());
    let mut compute_end = Vec::with_capacity(compute_spans.len());
    let mut transfer_start = Vec::with_capacity(compute_spans.len());
    let mut transfer_end = Vec::with_capacity(compute_spans.len());
    let (mut c, mut x) = (0.0f64, 0.0f64);
    for (&t, &xs) in compute_spans.iter().zip(transfer_spans) {
        c += t;
        let start = c.max(x);
        x = start + xs;
        compute_end.push(c);
        transfer_start.push(start);
        transfer_end.push(x);
    }
    OverlapSchedule {
        makespan: c.max(x),
        compute_end,
        transfer_start,
        transfer_end,
    }
}

/// Schedule for `layers` equal layers of prefill with per-layer transfer of
/// `n_transfer` tokens under the cost model.
pub fn prefill_overlap(cost: &CostModel, layers: usize, n_new: usize, n_total: usize, n_transfer: usize) -> OverlapSchedule {
    let t = cost.prefill_time(n_new, n_total);
    let x = cost.transfer_time(n_transfer);
    overlap_schedule(&vec![t; layers], &vec![x; layers])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_spans_expose_only_last_tail() {
        let s = overlap_schedule(&[2.0; 8], &[1.5; 8]);
        assert!((s.makespan - (8.0 * 2.0 + 1.5)).abs() < 1e-12);
        for l in 0..8 {
            assert!(s.transfer_start[l] >= s.compute_end[l]);
        }
        let s = overlap_schedule(&[2.0; 8], &[0.0; 8]);
        assert_eq!(s.makespan, 16.0);
    }

    #[test]
    fn transfer_bound_schedule() {
        let s = overlap_schedule(&[1.0; 4], &[3.0; 4]);
        assert_eq!(s.makespan, 1.0 + 4.0 * 3.0);
    }

    #[test]
    fn long_context_still_overlaps() {
        let c = CostModel::default();
        let ratio = c.transfer_time(5000) / c.prefill_time(500, 5000);
        assert!((ratio * 100.0 - 55.4).abs() < 1.0, "{ratio}");
        let s = prefill_overlap(&c, 32, 500, 5000, 5000);
        let t = c.prefill_time(500, 5000);
        assert!((s.makespan - (32.0 * t + c.transfer_time(5000))).abs() < 1e-9);
    }

    #[test]
    fn job_lifecycle() {
        let mut j = TransferJob::new(1, 7, 2);
        assert_eq!(j.state(), JobState::Queued);
        assert!(j.enqueue(1, 0.0).is_err());
        j.enqueue(0, 1.0).unwrap();
        assert_eq!(j.ack(0, true), JobState::Streaming);
        j.enqueue(1, 2.0).unwrap();
        assert_eq!(j.ack(1, true), JobState::Acked);
        let mut k = TransferJob::new(1, 8, 1);
        k.enqueue(0, 0.0).unwrap();
        assert_eq!(k.ack(0, false), JobState::Failed);
    }
}
