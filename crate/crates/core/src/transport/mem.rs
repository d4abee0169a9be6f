// SPDX-License-Identifier: Apache-2.0

//! Virtual-time backend: one FIFO channel per ordered engine pair.

use std::collections::BTreeMap;

use super::frame::{self, AckFrame, AckStatus, Frame, FrameError, WriteFrame};
use crate::kvcache::{Rank, SendTag};
use crate::toymodel::cost::CostModel;

/// Applies a received write at the receiver. Returns `Ok(true)` for a
/// deduplicated retransmission.
pub trait FrameSink {
    fn apply(&mut self, frame: &WriteFrame) -> Result<bool, String>;
}

impl<F: FnMut(&WriteFrame) -> Result<bool, String>> FrameSink for F {
    fn apply(&mut self, frame: &WriteFrame) -> Result<bool, String> {
        self(frame)
    }
}

/// Receiver agent logic shared by every backend: decode, verify, apply, ack.
pub fn receive(bytes: &[u8], sink: &mut impl FrameSink) -> Option<AckFrame> {
    match frame::decode(bytes) {
        Ok(Frame::Write(f)) => {
            let status = match sink.apply(&f) {
                Ok(_) => AckStatus::Ok,
                Err(_) => AckStatus::Rejected,
            };
            Some(AckFrame {
                tag: f.tag,
                layer: f.layer,
                status,
            })
        }
        Err(FrameError::ChecksumMismatch) => {
            let (tag, layer) = frame::decode_write_header(bytes)?;
            Some(AckFrame {
                tag,
                layer,
                status: AckStatus::ChecksumMismatch,
            })
        }
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Flip a bit of one payload word before the checksum is computed, so
    /// the receiver accepts bad data.
    CorruptPayload { word: usize, bit: u32 },
    /// Flip a payload byte after encoding, so the checksum catches it.
    CorruptWire { byte: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaultRule {
    pub tag: Option<SendTag>,
    pub layer: Option<u32>,
    pub fault: Fault,
    /// How many matching frames to corrupt.
    pub times: usize,
}

#[derive(Debug, Clone, Default)]
pub struct FaultInjector {
    rules: Vec<FaultRule>,
}

impl FaultInjector {
    pub fn new(rules: Vec<FaultRule>) -> Self {
        Self { rules }
    }

    pub fn is_empty(&self) -> bool {
        self.rules.iter().all(|r| r.times == 0)
    }

    fn take(&mut self, tag: SendTag, layer: u32) -> Option<Fault> {
        let rule = self.rules.iter_mut().find(|r| {
            r.times > 0 && r.tag.is_none_or(|t| t == tag) && r.layer.is_none_or(|l| l == layer)
        })?;
        rule.times -= 1;
        Some(rule.fault)
    }

    /// Encodes `f`, applying at most one matching fault.
    pub fn encode(&mut self, f: &WriteFrame) -> Vec<u8> {
        match self.take(f.tag, f.layer) {
            Some(Fault::CorruptPayload { word, bit }) if !f.words.is_empty() => {
                let mut g = f.clone();
                let i = word % g.words.len();
                g.words[i] ^= 1 << (bit % 64);
                frame::encode_write(&g)
            }
            Some(Fault::CorruptWire { byte }) if !f.words.is_empty() => {
                let mut bytes = frame::encode_write(f);
                let p0 = bytes.len() - 4 - f.payload_bytes();
                bytes[p0 + byte % f.payload_bytes()] ^= 0x5a;
                bytes
            }
            _ => frame::encode_write(f),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferRecord {
    pub src: Rank,
    pub dst: Rank,
    pub tag: SendTag,
    pub layer: u32,
    pub tokens: usize,
    pub attempt: u8,
    pub ready_ms: f64,
    pub start_ms: f64,
    pub delivered_ms: f64,
}

/// A frame on the wire, due at `delivered_ms`.
#[derive(Debug, Clone, PartialEq)]
pub struct InFlight {
    pub src: Rank,
    pub dst: Rank,
    pub tag: SendTag,
    pub layer: u32,
    pub attempt: u8,
    pub delivered_ms: f64,
    pub bytes: Vec<u8>,
}

/// Deterministic network: a frame of `n` tokens occupies its channel for the
/// cost model's per-layer transfer time `X(n)`.
#[derive(Debug, Clone)]
pub struct VirtualNetwork {
    cost: CostModel,
    free_at: BTreeMap<(Rank, Rank), f64>,
    pub faults: FaultInjector,
    log: Vec<TransferRecord>,
}

impl VirtualNetwork {
    pub fn new(cost: CostModel) -> Self {
        Self {
            cost,
            free_at: BTreeMap::new(),
            faults: FaultInjector::default(),
            log: Vec::new(),
        }
    }

    pub fn log(&self) -> &[TransferRecord] {
        &self.log
    }

    pub fn submit(&mut self, src: Rank, dst: Rank, ready_ms: f64, f: &WriteFrame, attempt: u8) -> InFlight {
        let bytes = if attempt == 0 {
            self.faults.encode(f)
        } else {
            frame::encode_write(f)
        };
        let free = self.free_at.entry((src, dst)).or_insert(0.0);
        let start_ms = ready_ms.max(*free);
        let delivered_ms = start_ms + self.cost.transfer_time(f.tokens());
        *free = delivered_ms;
        self.log.push(TransferRecord {
            src,
            dst,
            tag: f.tag,
            layer: f.layer,
            tokens: f.tokens(),
            attempt,
            ready_ms,
            start_ms,
            delivered_ms,
        });
        InFlight {
            src,
            dst,
            tag: f.tag,
            layer: f.layer,
            attempt,
            delivered_ms,
            bytes,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kvcache::KvAddrInfo;

    fn frame(n: u32) -> WriteFrame {
        WriteFrame {
            tag: 1,
            layer: 0,
            addr: KvAddrInfo::from_slots(0, (0..n).map(|s| (0, s))),
            dim: 2,
            words: (0..2 * n as u64).collect(),
        }
    }

    #[test]
    fn delivery_follows_cost_formula() {
        let c = CostModel::default();
        let mut net = VirtualNetwork::new(c);
        let a = net.submit(0, 1, 10.0, &frame(16), 0);
        assert!((a.delivered_ms - (10.0 + c.gamma * 16.0 + c.delta)).abs() < 1e-12);
        // Back-to-back frames queue on the channel.
        let b = net.submit(0, 1, 10.0, &frame(16), 0);
        assert!((b.delivered_ms - (a.delivered_ms + c.transfer_time(16))).abs() < 1e-12);
        // Other pairs are independent.
        let d = net.submit(1, 0, 10.0, &frame(16), 0);
        assert_eq!(d.delivered_ms, a.delivered_ms);
    }

    #[test]
    fn faults_and_receive() {
        let mut inj = FaultInjector::new(vec![FaultRule {
            tag: None,
            layer: None,
            fault: Fault::CorruptWire { byte: 3 },
            times: 1,
        }]);
        let f = frame(4);
        let mut applied = Vec::new();
        let mut sink = |w: &WriteFrame| {
            applied.push(w.clone());
            Ok(false)
        };
        let ack = receive(&inj.encode(&f), &mut sink).unwrap();
        assert_eq!(ack.status, AckStatus::ChecksumMismatch);
        let ack = receive(&inj.encode(&f), &mut sink).unwrap();
        assert_eq!(ack.status, AckStatus::Ok);
        assert_eq!(applied, vec![f.clone()]);

        let mut inj = FaultInjector::new(vec![FaultRule {
            tag: Some(1),
            layer: Some(0),
            fault: Fault::CorruptPayload { word: 5, bit: 3 },
            times: 1,
        }]);
        let mut got = None;
        let mut sink = |w: &WriteFrame| {
            got = Some(w.clone());
            Ok(false)
        };
        assert_eq!(receive(&inj.encode(&f), &mut sink).unwrap().status, AckStatus::Ok);
        let g = got.unwrap();
        assert_eq!(g.words[5], f.words[5] ^ 8);
        assert!(inj.is_empty());
    }
}
