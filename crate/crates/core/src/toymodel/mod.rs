// SPDX-License-Identifier: Apache-2.0

//! Deterministic stand-in for a transformer.
//!
//! KV entries, attention outputs and greedy next-token choice are pure
//! functions of the token prefix and the [`ModelConfig`]. Attention at
//! position `i` of layer `l` reads every KV entry `j <= i` of that layer, so a
//! single corrupted transferred entry changes the generated tokens.
//!
//! Hash layout (all integers little-endian, FNV-1a then `fmix64`):
//!
//! | value            | bytes hashed                                             |
//! |------------------|----------------------------------------------------------|
//! | KV word `j`      | `seed:u64, t_0:u32 .. t_i:u32, layer:u32, j:u32`         |
//! | embedding        | `'E', seed:u64, token:u32, pos:u64`                      |
//! | query            | `'Q', x:u64, layer:u64`                                  |
//! | KV digest        | `'D', w_0:u64 .. w_{d-1}:u64`                            |
//! | attention        | `'A', q:u64, sum:u64` where `sum` wraps over digests     |
//! | next hidden      | `'X', x:u64, attn:u64`                                   |
//! | next token       | `'T', x_L:u64`, reduced `mod vocab`                      |

pub mod cost;
pub mod hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cost::CostModel;
use hash::{hash_words, Fnv1a};

pub type Token = u32;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(&'static str),
    #[error("kv context has {got} positions, expected {expected}")]
    ContextShape { expected: usize, got: usize },
    #[error("empty token list")]
    EmptyTokens,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub dim: usize,
    pub vocab: u32,
    pub hash_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            dim: 8,
            vocab: 256,
            hash_seed: 0x6d69_6372_6f73_7276,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers == 0 {
            return Err(ModelError::InvalidConfig("layers must be >= 1"));
        }
        if self.dim == 0 {
            return Err(ModelError::InvalidConfig("dim must be >= 1"));
        }
        if self.vocab < 2 {
            return Err(ModelError::InvalidConfig("vocab must be >= 2"));
        }
        Ok(())
    }
}

/// KV data for one token position at one layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct KvEntry(pub Vec<u64>);

impl KvEntry {
    pub fn words(&self) -> &[u64] {
        &self.0
    }
}

/// Result of [`ToyModel::forward_step`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForwardOutput {
    /// New entries, indexed `[layer][pos - begin]`.
    pub new_kv: Vec<Vec<KvEntry>>,
    pub last_hidden: u64,
    pub next_token: Token,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyModel {
    config: ModelConfig,
}

impl ToyModel {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> usize {
        self.config.layers
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// FNV state after hashing the seed only.
    pub fn seed_state(&self) -> u64 {
        let mut h = Fnv1a::new();
        h.write_u64(self.config.hash_seed);
        h.state()
    }

    /// Advances a prefix state by one token.
    #[inline]
    pub fn advance_state(state: u64, token: Token) -> u64 {
        let mut h = Fnv1a::from_state(state);
        h.write_u32(token);
        h.state()
    }

    /// Prefix state covering `tokens[..=i]` for each `i` in `from..to`.
    pub fn prefix_states(&self, tokens: &[Token], from: usize, to: usize) -> Vec<u64> {
        let mut state = self.seed_state();
        let mut out = Vec::with_capacity(to.saturating_sub(from));
        for (i, &t) in tokens[..to].iter().enumerate() {
            state = Self::advance_state(state, t);
            if i >= from {
                out.push(state);
            }
        }
        out
    }

    /// Writes the KV words for `layer` given the prefix state into `out`.
    #[inline]
    pub fn fill_kv(&self, prefix_state: u64, layer: usize, out: &mut [u64]) {
        let mut base = Fnv1a::from_state(prefix_state);
        base.write_u32(layer as u32);
        for (j, w) in out.iter_mut().enumerate() {
            let mut h = base;
            h.write_u32(j as u32);
            *w = h.finish();
        }
    }

    /// KV entry for the last position of `prefix`, hashed from scratch.
    pub fn kv_entry(&self, prefix: &[Token], layer: usize) -> KvEntry {
        assert!(!prefix.is_empty(), "kv_entry needs a non-empty prefix");
        let mut h = Fnv1a::new();
        h.write_u64(self.config.hash_seed);
        for &t in prefix {
            h.write_u32(t);
        }
        h.write_u32(layer as u32);
        let words = (0..self.config.dim)
            .map(|j| {
                let mut w = h;
                w.write_u32(j as u32);
                w.finish()
            })
            .collect();
        KvEntry(words)
    }

    #[inline]
    pub fn embed(&self, token: Token, pos: usize) -> u64 {
        let mut h = Fnv1a::new();
        h.write(b"E");
        h.write_u64(self.config.hash_seed);
        h.write_u32(token);
        h.write_u64(pos as u64);
        h.finish()
    }

    #[inline]
    pub fn digest(words: &[u64]) -> u64 {
        hash_words(b'D', words)
    }

    /// One layer of the hidden recurrence at a position whose digest sum
    /// over all `j <= i` is `kv_sum`.
    #[inline]
    pub fn layer_out(hidden: u64, layer: usize, kv_sum: u64) -> u64 {
        let q = hash_words(b'Q', &[hidden, layer as u64]);
        let attn = hash_words(b'A', &[q, kv_sum]);
        hash_words(b'X', &[hidden, attn])
    }

    #[inline]
    pub fn sample(&self, last_hidden: u64) -> Token {
        (hash_words(b'T', &[last_hidden]) % self.config.vocab as u64) as Token
    }

    /// Prefills `tokens[begin..]` given KV entries of `tokens[..begin]`.
    ///
    /// `kv_context` is indexed `[layer][pos]` and must hold `begin` entries
    /// per layer.
    pub fn forward_step(
        &self,
        tokens: &[Token],
        kv_context: &[Vec<KvEntry>],
        begin: usize,
    ) -> Result<ForwardOutput, ModelError> {
        if tokens.is_empty() || begin >= tokens.len() {
            return Err(ModelError::EmptyTokens);
        }
        let layers = self.config.layers;
        if begin > 0 {
            if kv_context.len() != layers {
                return Err(ModelError::ContextShape {
                    expected: layers,
                    got: kv_context.len(),
                });
            }
            if let Some(bad) = kv_context.iter().find(|l| l.len() != begin) {
                return Err(ModelError::ContextShape {
                    expected: begin,
                    got: bad.len(),
                });
            }
        }
        let states = self.prefix_states(tokens, begin, tokens.len());
        let mut hidden: Vec<u64> = (begin..tokens.len())
            .map(|i| self.embed(tokens[i], i))
            .collect();
        let mut new_kv = Vec::with_capacity(layers);
        #[allow(clippy::needless_range_loop)]
        for layer in 0..layers {
            let mut sum = 0u64;
            if begin > 0 {
                for e in &kv_context[layer] {
                    sum = sum.wrapping_add(Self::digest(e.words()));
                }
            }
            let mut entries = Vec::with_capacity(states.len());
            for (k, &state) in states.iter().enumerate() {
                let mut words = vec![0u64; self.config.dim];
                self.fill_kv(state, layer, &mut words);
                sum = sum.wrapping_add(Self::digest(&words));
                hidden[k] = Self::layer_out(hidden[k], layer, sum);
                entries.push(KvEntry(words));
            }
            new_kv.push(entries);
        }
        let last_hidden = *hidden.last().expect("non-empty range");
        Ok(ForwardOutput {
            new_kv,
            last_hidden,
            next_token: self.sample(last_hidden),
        })
    }

    /// Whole-prompt greedy generation; the reference every serving path must
    /// reproduce token for token.
    pub fn generate(&self, prompt: &[Token], max_tokens: usize) -> Vec<Token> {
        assert!(!prompt.is_empty());
        let layers = self.config.layers;
        let mut tokens = prompt.to_vec();
        let mut sums = vec![0u64; layers];
        let mut out = Vec::with_capacity(max_tokens);
        let mut state = self.seed_state();
        let mut next = 0;
        while out.len() < max_tokens {
            // Feed one position at a time; equivalent to a full prefill since
            // the recurrence at position i only reads positions <= i.
            let mut hidden = 0;
            #[allow(clippy::needless_range_loop)]
            for i in next..tokens.len() {
                state = Self::advance_state(state, tokens[i]);
                hidden = self.embed(tokens[i], i);
                let mut words = vec![0u64; self.config.dim];
                for (layer, sum) in sums.iter_mut().enumerate() {
                    self.fill_kv(state, layer, &mut words);
                    *sum = sum.wrapping_add(Self::digest(&words));
                    hidden = Self::layer_out(hidden, layer, *sum);
                }
            }
            next = tokens.len();
            let t = self.sample(hidden);
            out.push(t);
            tokens.push(t);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> ToyModel {
        ToyModel::new(ModelConfig::default()).unwrap()
    }

    fn random_prompt(rng: &mut ChaCha8Rng, max_len: usize) -> Vec<Token> {
        let len = rng.random_range(1..=max_len);
        (0..len).map(|_| rng.random_range(0..256)).collect()
    }

    /// Oracle KV context computed entry by entry from scratch.
    fn oracle_context(m: &ToyModel, tokens: &[Token], upto: usize) -> Vec<Vec<KvEntry>> {
        (0..m.layers())
            .map(|l| (0..upto).map(|i| m.kv_entry(&tokens[..=i], l)).collect())
            .collect()
    }

    #[test]
    fn config_validation() {
        let bad = ModelConfig {
            layers: 0,
            ..Default::default()
        };
        assert!(ToyModel::new(bad).is_err());
        let bad = ModelConfig {
            vocab: 1,
            ..Default::default()
        };
        assert!(ToyModel::new(bad).is_err());
    }

    #[test]
    fn kv_entry_is_deterministic() {
        let m = model();
        assert_eq!(m.kv_entry(&[7], 0), m.kv_entry(&[7], 0));
        let other = model();
        assert_eq!(m.kv_entry(&[1, 2, 3], 2), other.kv_entry(&[1, 2, 3], 2));
        assert_eq!(m.kv_entry(&[1], 3).words().len(), 8);
    }

    #[test]
    fn incremental_states_match_from_scratch() {
        let m = model();
        let tokens = [9, 8, 7, 6, 5];
        let states = m.prefix_states(&tokens, 0, tokens.len());
        for (i, &s) in states.iter().enumerate() {
            for l in 0..m.layers() {
                let mut w = vec![0; m.dim()];
                m.fill_kv(s, l, &mut w);
                assert_eq!(w, m.kv_entry(&tokens[..=i], l).0);
            }
        }
    }

    #[test]
    fn extending_prefix_changes_entry() {
        // Brute-force collision scan over 1000 random prefixes.
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..1000 {
            let p = random_prompt(&mut rng, 32);
            let x = rng.random_range(0..256);
            let mut q = p.clone();
            q.push(x);
            let a = m.kv_entry(&p, 1);
            let b = m.kv_entry(&q, 1);
            assert_ne!(a, b);
            seen.insert(a);
        }
        assert!(seen.len() > 990);
    }

    #[test]
    fn split_prefill_matches_whole_prefill() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let p = random_prompt(&mut rng, 64);
            let whole = m.forward_step(&p, &[], 0).unwrap();
            let s = rng.random_range(0..p.len());
            let ctx = oracle_context(&m, &p, s);
            let split = m.forward_step(&p, &ctx, s).unwrap();
            assert_eq!(whole.next_token, split.next_token);
            assert_eq!(whole.last_hidden, split.last_hidden);
            for l in 0..m.layers() {
                assert_eq!(&whole.new_kv[l][s..], &split.new_kv[l][..]);
            }
        }
    }

    #[test]
    fn generate_matches_forward_step() {
        let m = model();
        let p = vec![3, 1, 4, 1, 5, 9, 2, 6];
        let toks = m.generate(&p, 5);
        let mut seq = p.clone();
        for &t in &toks {
            let out = m.forward_step(&seq, &[], 0).unwrap();
            assert_eq!(out.next_token, t);
            seq.push(t);
        }
    }

    #[test]
    fn single_token_prompt() {
        let m = model();
        let a = m.forward_step(&[42], &[], 0).unwrap();
        let b = m.forward_step(&[42], &[], 0).unwrap();
        assert_eq!(a, b);
        assert!(a.next_token < 256);
    }

    #[test]
    fn bit_flip_in_context_changes_next_token() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let trials = 500;
        let mut diverged = 0;
        for _ in 0..trials {
            let mut p = random_prompt(&mut rng, 48);
            if p.len() < 2 {
                p.push(1);
            }
            let s = rng.random_range(1..p.len());
            let good = oracle_context(&m, &p, s);
            let mut bad = good.clone();
            let l = rng.random_range(0..m.layers());
            let pos = rng.random_range(0..s);
            let w = rng.random_range(0..m.dim());
            let bit = rng.random_range(0..64);
            bad[l][pos].0[w] ^= 1 << bit;
            let a = m.forward_step(&p, &good, s).unwrap().next_token;
            let b = m.forward_step(&p, &bad, s).unwrap().next_token;
            if a != b {
                diverged += 1;
            }
        }
        assert!(diverged * 100 >= trials * 99, "diverged {diverged}/{trials}");
    }

    #[test]
    fn context_shape_is_checked() {
        let m = model();
        let err = m.forward_step(&[1, 2, 3], &[], 2).unwrap_err();
        assert!(matches!(err, ModelError::ContextShape { .. }));
    }
}
