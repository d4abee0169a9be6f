// SPDX-License-Identifier: Apache-2.0

//! Wire format.
//!
//! All integers are little-endian.
//!
//! ```text
//! common header (8 bytes)
//!   0  [u8; 4]  magic "KVTR" (0x4B565452 read big-endian)
//!   4  u16      version = 1
//!   6  u16      kind: 0 = write, 1 = ack
//!
//! write frame
//!   8  u64      tag
//!  16  u32      layer
//!  20  u64      token_begin
//!  28  u32      n_ranges
//!  32  u32      dim (words per entry)
//!  36  u32      payload_len (bytes)
//!  40  n_ranges x (page u32, slot_begin u32, slot_count u32)
//!   .. payload: entries slot-major, each dim u64 words
//!   .. u32      CRC-32 (IEEE) of payload
//!
//! ack frame
//!   8  u64      tag
//!  16  u32      layer
//!  20  u8       status: 0 ok, 1 checksum mismatch, 2 rejected
//! ```

use std::io::{Read, Write};

use crate::kvcache::{KvAddrInfo, SendTag, SlotRange};

pub const MAGIC: [u8; 4] = *b"KVTR";
pub const VERSION: u16 = 1;
const KIND_WRITE: u16 = 0;
const KIND_ACK: u16 = 1;
const WRITE_FIXED: usize = 40;
const ACK_LEN: usize = 21;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    BadVersion(u16),
    #[error("unknown frame kind {0}")]
    BadKind(u16),
    #[error("frame truncated")]
    Truncated,
    #[error("payload checksum mismatch")]
    ChecksumMismatch,
    #[error("payload of {got} bytes, ranges need {expected}")]
    PayloadLength { expected: usize, got: usize },
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for FrameError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            FrameError::Truncated
        } else {
            FrameError::Io(e.to_string())
        }
    }
}

/// One layer of KV for a run of receiver slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WriteFrame {
    pub tag: SendTag,
    pub layer: u32,
    pub addr: KvAddrInfo,
    pub dim: u32,
    pub words: Vec<u64>,
}

impl WriteFrame {
    pub fn payload_bytes(&self) -> usize {
        self.words.len() * 8
    }

    /// Key used to drop retransmitted duplicates.
    pub fn dedupe_key(&self) -> (SendTag, u32, Vec<SlotRange>) {
        (self.tag, self.layer, self.addr.ranges.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum AckStatus {
    Ok = 0,
    ChecksumMismatch = 1,
    Rejected = 2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AckFrame {
    pub tag: SendTag,
    pub layer: u32,
    pub status: AckStatus,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    Write(WriteFrame),
    Ack(AckFrame),
}

fn payload_bytes(words: &[u64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(words.len() * 8);
    for w in words {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out
}

fn header(kind: u16, out: &mut Vec<u8>) {
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&kind.to_le_bytes());
}

/// Encodes a write frame, checksumming the payload as given.
pub fn encode_write(f: &WriteFrame) -> Vec<u8> {
    let payload = payload_bytes(&f.words);
    let mut out = Vec::with_capacity(WRITE_FIXED + 12 * f.addr.ranges.len() + payload.len() + 4);
    header(KIND_WRITE, &mut out);
    out.extend_from_slice(&f.tag.to_le_bytes());
    out.extend_from_slice(&f.layer.to_le_bytes());
    out.extend_from_slice(&(f.addr.token_begin as u64).to_le_bytes());
    out.extend_from_slice(&(f.addr.ranges.len() as u32).to_le_bytes());
    out.extend_from_slice(&f.dim.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    for r in &f.addr.ranges {
        out.extend_from_slice(&r.page.to_le_bytes());
        out.extend_from_slice(&r.slot_begin.to_le_bytes());
        out.extend_from_slice(&r.slot_count.to_le_bytes());
    }
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out
}

pub fn encode_ack(a: &AckFrame) -> Vec<u8> {
    let mut out = Vec::with_capacity(ACK_LEN);
    header(KIND_ACK, &mut out);
    out.extend_from_slice(&a.tag.to_le_bytes());
    out.extend_from_slice(&a.layer.to_le_bytes());
    out.push(a.status as u8);
    out
}

fn u16_at(b: &[u8], o: usize) -> u16 {
    u16::from_le_bytes(b[o..o + 2].try_into().unwrap())
}

fn u32_at(b: &[u8], o: usize) -> u32 {
    u32::from_le_bytes(b[o..o + 4].try_into().unwrap())
}

fn u64_at(b: &[u8], o: usize) -> u64 {
    u64::from_le_bytes(b[o..o + 8].try_into().unwrap())
}

/// Reads one frame from a byte stream.
pub fn read_frame(r: &mut impl Read) -> Result<Frame, FrameError> {
    let mut head = [0u8; 8];
    r.read_exact(&mut head)?;
    let magic: [u8; 4] = head[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(FrameError::BadMagic(magic));
    }
    let version = u16_at(&head, 4);
    if version != VERSION {
        return Err(FrameError::BadVersion(version));
    }
    match u16_at(&head, 6) {
        KIND_ACK => {
            let mut rest = [0u8; ACK_LEN - 8];
            r.read_exact(&mut rest)?;
            let status = match rest[12] {
                0 => AckStatus::Ok,
                1 => AckStatus::ChecksumMismatch,
                _ => AckStatus::Rejected,
            };
            Ok(Frame::Ack(AckFrame {
                tag: u64_at(&rest, 0),
                layer: u32_at(&rest, 8),
                status,
            }))
        }
        KIND_WRITE => {
            let mut fixed = [0u8; WRITE_FIXED - 8];
            r.read_exact(&mut fixed)?;
            let tag = u64_at(&fixed, 0);
            let layer = u32_at(&fixed, 8);
            let token_begin = u64_at(&fixed, 12) as usize;
            let n_ranges = u32_at(&fixed, 20) as usize;
            let dim = u32_at(&fixed, 24);
            let payload_len = u32_at(&fixed, 28) as usize;
            let mut body = vec![0u8; 12 * n_ranges + payload_len + 4];
            r.read_exact(&mut body)?;
            let ranges: Vec<SlotRange> = (0..n_ranges)
                .map(|i| SlotRange {
                    page: u32_at(&body, 12 * i),
                    slot_begin: u32_at(&body, 12 * i + 4),
                    slot_count: u32_at(&body, 12 * i + 8),
                })
                .collect();
            let token_count: usize = ranges.iter().map(|r| r.slot_count as usize).sum();
            let expected = token_count * dim as usize * 8;
            if payload_len != expected {
                return Err(FrameError::PayloadLength {
                    expected,
                    got: payload_len,
                });
            }
            let p0 = 12 * n_ranges;
            let payload = &body[p0..p0 + payload_len];
            if crc32fast::hash(payload) != u32_at(&body, p0 + payload_len) {
                return Err(FrameError::ChecksumMismatch);
            }
            let words = payload
                .chunks_exact(8)
                .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(Frame::Write(WriteFrame {
                tag,
                layer,
                addr: KvAddrInfo {
                    token_begin,
                    token_count,
                    ranges,
                },
                dim,
                words,
            }))
        }
        k => Err(FrameError::BadKind(k)),
    }
}

/// Reads the raw bytes of one frame without verifying its checksum.
pub fn read_raw(r: &mut impl Read) -> Result<Vec<u8>, FrameError> {
    let mut out = vec![0u8; 8];
    r.read_exact(&mut out)?;
    if out[..4] != MAGIC {
        return Err(FrameError::BadMagic(out[..4].try_into().unwrap()));
    }
    let rest = match u16_at(&out, 6) {
        KIND_ACK => ACK_LEN - 8,
        KIND_WRITE => {
            out.resize(WRITE_FIXED, 0);
            r.read_exact(&mut out[8..])?;
            let n_ranges = u32_at(&out, 28) as usize;
            let payload_len = u32_at(&out, 36) as usize;
            let body = 12 * n_ranges + payload_len + 4;
            let at = out.len();
            out.resize(at + body, 0);
            r.read_exact(&mut out[at..])?;
            return Ok(out);
        }
        k => return Err(FrameError::BadKind(k)),
    };
    let at = out.len();
    out.resize(at + rest, 0);
    r.read_exact(&mut out[at..])?;
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Frame, FrameError> {
    let mut cur = bytes;
    let f = read_frame(&mut cur)?;
    if cur.is_empty() {
        Ok(f)
    } else {
        Err(FrameError::Io(format!("{} trailing bytes", cur.len())))
    }
}

/// Like [`decode`] but recovers the header of a write frame whose checksum
/// failed, so the receiver can name the frame in its nack.
pub fn decode_write_header(bytes: &[u8]) -> Option<(SendTag, u32)> {
    (bytes.len() >= WRITE_FIXED && bytes[..4] == MAGIC && u16_at(bytes, 6) == KIND_WRITE)
        .then(|| (u64_at(bytes, 8), u32_at(bytes, 16)))
}

pub fn write_frame(w: &mut impl Write, bytes: &[u8]) -> Result<(), FrameError> {
    w.write_all(bytes)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(n: u32) -> WriteFrame {
        let addr = KvAddrInfo::from_slots(3, (0..n).map(|s| (7, s)));
        WriteFrame {
            tag: 0xabcdef,
            layer: 2,
            addr,
            dim: 8,
            words: (0..n as u64 * 8).map(|i| i.wrapping_mul(0x9e37_79b9)).collect(),
        }
    }

    #[test]
    fn sixteen_slot_frame_size_and_round_trip() {
        let f = sample(16);
        assert_eq!(f.payload_bytes(), 1024);
        let bytes = encode_write(&f);
        assert_eq!(bytes.len(), 40 + 12 + 1024 + 4);
        assert_eq!(&bytes[..4], &[0x4B, 0x56, 0x54, 0x52]);
        assert_eq!(decode(&bytes).unwrap(), Frame::Write(f));
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let f = sample(4);
        let mut bytes = encode_write(&f);
        bytes[60] ^= 1;
        assert_eq!(decode(&bytes).unwrap_err(), FrameError::ChecksumMismatch);
        assert_eq!(decode_write_header(&bytes), Some((0xabcdef, 2)));
    }

    #[test]
    fn header_errors() {
        let mut bytes = encode_write(&sample(1));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(FrameError::BadMagic(_))));
        let mut bytes = encode_write(&sample(1));
        bytes[4] = 9;
        assert_eq!(decode(&bytes).unwrap_err(), FrameError::BadVersion(9));
        let bytes = encode_write(&sample(2));
        assert_eq!(decode(&bytes[..bytes.len() - 1]).unwrap_err(), FrameError::Truncated);
    }

    #[test]
    fn raw_reads_split_a_stream() {
        let a = encode_write(&sample(3));
        let b = encode_ack(&AckFrame { tag: 1, layer: 0, status: AckStatus::Ok });
        let stream = [a.clone(), b.clone()].concat();
        let mut cur = &stream[..];
        assert_eq!(read_raw(&mut cur).unwrap(), a);
        assert_eq!(read_raw(&mut cur).unwrap(), b);
        assert!(cur.is_empty());
    }

    #[test]
    fn ack_round_trip() {
        for status in [AckStatus::Ok, AckStatus::ChecksumMismatch, AckStatus::Rejected] {
            let a = AckFrame { tag: 9, layer: 31, status };
            assert_eq!(decode(&encode_ack(&a)).unwrap(), Frame::Ack(a));
        }
    }

    proptest! {
        #[test]
        fn codec_identity(tag: u64, layer in 0u32..64, runs in prop::collection::vec((0u32..100, 0u32..8, 1u32..8), 0..6), seed: u64) {
            let ranges: Vec<SlotRange> = runs.into_iter().map(SlotRange::from).collect();
            let token_count: usize = ranges.iter().map(|r| r.slot_count as usize).sum();
            let words = (0..token_count as u64 * 3).map(|i| i ^ seed).collect();
            let f = WriteFrame { tag, layer, addr: KvAddrInfo { token_begin: 5, token_count, ranges }, dim: 3, words };
            prop_assert_eq!(decode(&encode_write(&f)).unwrap(), Frame::Write(f));
        }
    }
}
