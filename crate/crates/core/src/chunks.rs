//! Token sequences, fixed-size chunking and position-dependent chunk keys.
//!
//! A chunk's identity is a digest over its parent's key and its own tokens, so
//! two chunks with identical tokens but different prefixes never collide. The
//! root of every chain is the all-zero key.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;
use xxhash_rust::xxh3::Xxh3;

/// Identifier of a single token.
pub type TokenId = u32;

/// Ordered list of token ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(pub Vec<TokenId>);

impl TokenSeq {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        Self(tokens)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[TokenId] {
        &self.0
    }
}

impl From<Vec<TokenId>> for TokenSeq {
    fn from(v: Vec<TokenId>) -> Self {
        Self(v)
    }
}

/// A full-size slice of a sequence. Partial tails are never chunks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub tokens: TokenSeq,
    pub index: usize,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ChunkError {
    #[error("chunk_size must be positive")]
    ZeroChunkSize,
    #[error("chunk_size {chunk_size} is not a multiple of gpu_block_size {block_size}")]
    BlockMisaligned { chunk_size: usize, block_size: usize },
    #[error("invalid chunk key {0:?}: expected 32 lowercase hex characters")]
    BadKey(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CacheConfig {
    /// Tokens per cached chunk.
    pub chunk_size: usize,
    /// Tokens per device block. Informational; the engine never allocates blocks.
    pub gpu_block_size: usize,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            chunk_size: 256,
            gpu_block_size: 16,
        }
    }
}

impl CacheConfig {
    pub fn new(chunk_size: usize, gpu_block_size: usize) -> Result<Self, ChunkError> {
        let cfg = Self {
            chunk_size,
            gpu_block_size,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ChunkError> {
        if self.chunk_size == 0 || self.gpu_block_size == 0 {
            return Err(ChunkError::ZeroChunkSize);
        }
        if !self.chunk_size.is_multiple_of(self.gpu_block_size) {
            return Err(ChunkError::BlockMisaligned {
                chunk_size: self.chunk_size,
                block_size: self.gpu_block_size,
            });
        }
        Ok(())
    }
}

/// Split `seq` into full chunks plus the remaining tail (shorter than a chunk).
pub fn chunkify(seq: &TokenSeq, cfg: &CacheConfig) -> (Vec<Chunk>, TokenSeq) {
    let size = cfg.chunk_size;
    let full = seq.len() / size;
    let chunks = seq.0[..full * size]
        .chunks_exact(size)
        .enumerate()
        .map(|(index, tokens)| Chunk {
            tokens: TokenSeq(tokens.to_vec()),
            index,
        })
        .collect();
    (chunks, TokenSeq(seq.0[full * size..].to_vec()))
}

/// 128-bit position-dependent chunk digest.
///
/// Rendered as 32 lowercase hex characters; numeric order equals hex order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct ChunkKey(pub u128);

impl ChunkKey {
    /// Parent sentinel for the first chunk of every chain.
    pub const ROOT: ChunkKey = ChunkKey(0);

    pub fn is_root(self) -> bool {
        self == Self::ROOT
    }

    pub fn to_hex(self) -> String {
        format!("{:032x}", self.0)
    }
}

impl fmt::Display for ChunkKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

impl FromStr for ChunkKey {
    type Err = ChunkError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let valid = s.len() == 32 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b));
        if !valid {
            return Err(ChunkError::BadKey(s.to_string()));
        }
        u128::from_str_radix(s, 16)
            .map(ChunkKey)
            .map_err(|_| ChunkError::BadKey(s.to_string()))
    }
}

impl Serialize for ChunkKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ChunkKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Digest of (parent key bytes ‖ little-endian token bytes) with XXH3-128.
pub fn chunk_key(parent: ChunkKey, tokens: &[TokenId]) -> ChunkKey {
    let mut h = Xxh3::new();
    h.update(&parent.0.to_be_bytes());
    for t in tokens {
        h.update(&t.to_le_bytes());
    }
    ChunkKey(h.digest128())
}

/// One link of a key chain: the chunk key and the key it hangs under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainLink {
    pub key: ChunkKey,
    pub parent: ChunkKey,
}

/// Keys of every full chunk of `tokens`, each chained to its predecessor.
pub fn key_chain(tokens: &[TokenId], cfg: &CacheConfig) -> Vec<ChainLink> {
    let mut parent = ChunkKey::ROOT;
    tokens
        .chunks_exact(cfg.chunk_size)
        .map(|chunk| {
            let key = chunk_key(parent, chunk);
            let link = ChainLink { key, parent };
            parent = key;
            link
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn seq(n: usize) -> TokenSeq {
        TokenSeq((0..n as u32).collect())
    }

    #[test]
    fn chunkify_600_tokens() {
        let (chunks, tail) = chunkify(&seq(600), &CacheConfig::default());
        assert_eq!(chunks.len(), 2);
        assert_eq!(chunks.iter().map(|c| c.tokens.len()).sum::<usize>(), 512);
        assert_eq!(tail.len(), 88);
        assert_eq!(chunks[1].index, 1);
    }

    #[test]
    fn chunkify_empty_and_exact() {
        let cfg = CacheConfig::default();
        let (chunks, tail) = chunkify(&seq(0), &cfg);
        assert!(chunks.is_empty() && tail.is_empty());
        let (chunks, tail) = chunkify(&seq(256), &cfg);
        assert_eq!(chunks.len(), 1);
        assert!(tail.is_empty());
    }

    #[test]
    fn config_validation() {
        assert!(CacheConfig::new(256, 16).is_ok());
        assert_eq!(CacheConfig::new(0, 16), Err(ChunkError::ZeroChunkSize));
        assert!(matches!(
            CacheConfig::new(250, 16),
            Err(ChunkError::BlockMisaligned { .. })
        ));
    }

    #[test]
    fn same_parent_same_tokens_share_a_key() {
        let c1 = chunk_key(ChunkKey::ROOT, &[1, 2, 3]);
        assert_eq!(chunk_key(c1, &[4, 5, 6]), chunk_key(c1, &[4, 5, 6]));
        // equal tokens under a different parent land on a distinct node
        let other = chunk_key(ChunkKey::ROOT, &[9, 9, 9]);
        assert_ne!(chunk_key(c1, &[4, 5, 6]), chunk_key(other, &[4, 5, 6]));
    }

    #[test]
    fn root_key_is_stable() {
        // frozen digest: keys are persisted in manifests and must not drift
        let k = chunk_key(ChunkKey::ROOT, &[1, 2, 3, 4]);
        assert_eq!(k, chunk_key(ChunkKey::ROOT, &[1, 2, 3, 4]));
        assert_eq!(k.to_hex().len(), 32);
        assert_eq!(k.to_hex(), format!("{k}"));
        assert_eq!(k.to_hex().parse::<ChunkKey>().unwrap(), k);
        assert_eq!(ChunkKey::ROOT.to_hex(), "0".repeat(32));
    }

    #[test]
    fn no_collisions_over_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut seen = HashSet::new();
        let mut inputs = HashSet::new();
        for _ in 0..1000 {
            let parent = ChunkKey(rng.random());
            let tokens: Vec<u32> = (0..16).map(|_| rng.random_range(0..32_000)).collect();
            if inputs.insert((parent, tokens.clone())) {
                assert!(seen.insert(chunk_key(parent, &tokens)));
            }
        }
    }

    #[test]
    fn chain_links_parents() {
        let cfg = CacheConfig::new(4, 2).unwrap();
        let links = key_chain(&(0..12).collect::<Vec<_>>(), &cfg);
        assert_eq!(links.len(), 3);
        assert_eq!(links[0].parent, ChunkKey::ROOT);
        assert_eq!(links[1].parent, links[0].key);
        assert_eq!(links[2].parent, links[1].key);
    }

    #[test]
    fn bad_hex_rejected() {
        assert!("xyz".parse::<ChunkKey>().is_err());
        assert!("A".repeat(32).parse::<ChunkKey>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]

        #[test]
        fn chunkify_round_trips(len in 0usize..=1024, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = TokenSeq((0..len).map(|_| rng.random()).collect());
            let cfg = CacheConfig::default();
            let (chunks, tail) = chunkify(&s, &cfg);
            prop_assert!(tail.len() < cfg.chunk_size);
            prop_assert!(chunks.iter().all(|c| c.tokens.len() == cfg.chunk_size));
            let mut joined: Vec<u32> = chunks.iter().flat_map(|c| c.tokens.0.clone()).collect();
            joined.extend_from_slice(tail.as_slice());
            prop_assert_eq!(joined, s.0);
        }

        #[test]
        fn any_single_change_moves_the_key(
            tokens in prop::collection::vec(any::<u32>(), 1..64),
            parent in any::<u128>(),
            pos in any::<prop::sample::Index>(),
            delta in 1u32..,
        ) {
            let base = chunk_key(ChunkKey(parent), &tokens);
            let mut changed = tokens.clone();
            let i = pos.index(changed.len());
            changed[i] = changed[i].wrapping_add(delta);
            prop_assert_ne!(base, chunk_key(ChunkKey(parent), &changed));
            prop_assert_ne!(base, chunk_key(ChunkKey(parent.wrapping_add(1)), &tokens));
        }
    }
}
