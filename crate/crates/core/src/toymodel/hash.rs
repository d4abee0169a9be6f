// SPDX-License-Identifier: Apache-2.0

//! Stable 64-bit hashing used by the toy model.
//!
//! Every value the model produces is FNV-1a over a canonical little-endian
//! byte encoding, passed through the murmur3 `fmix64` finalizer so that low
//! bits (used for `mod vocab` sampling) avalanche.

pub const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
pub const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Streaming FNV-1a state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fnv1a(u64);

impl Default for Fnv1a {
    fn default() -> Self {
        Self(FNV_OFFSET)
    }
}

impl Fnv1a {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_state(state: u64) -> Self {
        Self(state)
    }

    #[inline]
    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
    }

    #[inline]
    pub fn write_u32(&mut self, v: u32) {
        self.write(&v.to_le_bytes());
    }

    #[inline]
    pub fn write_u64(&mut self, v: u64) {
        self.write(&v.to_le_bytes());
    }

    #[inline]
    pub fn state(&self) -> u64 {
        self.0
    }

    #[inline]
    pub fn finish(&self) -> u64 {
        fmix64(self.0)
    }
}

/// murmur3 64-bit finalizer.
#[inline]
pub fn fmix64(mut k: u64) -> u64 {
    k ^= k >> 33;
    k = k.wrapping_mul(0xff51_afd7_ed55_8ccd);
    k ^= k >> 33;
    k = k.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    k ^= k >> 33;
    k
}

/// Hash of a tag byte followed by a list of words.
#[inline]
pub fn hash_words(tag: u8, words: &[u64]) -> u64 {
    let mut h = Fnv1a::new();
    h.write(&[tag]);
    for &w in words {
        h.write_u64(w);
    }
    h.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_vectors() {
        // Published FNV-1a 64 test vectors.
        let mut h = Fnv1a::new();
        h.write(b"");
        assert_eq!(h.state(), 0xcbf29ce484222325);
        let mut h = Fnv1a::new();
        h.write(b"a");
        assert_eq!(h.state(), 0xaf63dc4c8601ec8c);
        let mut h = Fnv1a::new();
        h.write(b"foobar");
        assert_eq!(h.state(), 0x85944171f73967e8);
    }

    #[test]
    fn streaming_equals_one_shot() {
        let mut a = Fnv1a::new();
        a.write(b"hello ");
        a.write(b"world");
        let mut b = Fnv1a::new();
        b.write(b"hello world");
        assert_eq!(a, b);
    }
}
