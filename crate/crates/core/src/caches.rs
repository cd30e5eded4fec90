//! KV commit logs and the restorable decode cache.
//!
//! A [`KvCache`] is append-only: each committed block is stored with its
//! content digest and entries are never mutated. The decode cache holds the
//! causal decoder's temporal state; it is snapshotted before a draft is
//! decoded for scoring and restored if the draft is rejected.

use serde::{Deserialize, Serialize};

use crate::digest::{Digest, Hasher};
use crate::error::{Error, Result};
use crate::types::{LatentBlock, Producer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CacheOwner {
    Drafter,
    Target,
}

impl CacheOwner {
    fn name(self) -> &'static str {
        match self {
            CacheOwner::Drafter => "drafter",
            CacheOwner::Target => "target",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvEntry {
    pub block_index: usize,
    pub producer: Producer,
    pub digest: Digest,
    payload: LatentBlock,
}

impl KvEntry {
    pub fn payload(&self) -> &LatentBlock {
        &self.payload
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    owner: CacheOwner,
    entries: Vec<KvEntry>,
}

impl KvCache {
    pub fn new(owner: CacheOwner) -> Self {
        Self {
            owner,
            entries: Vec::new(),
        }
    }

    pub fn owner(&self) -> CacheOwner {
        self.owner
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[KvEntry] {
        &self.entries
    }

    pub fn last(&self) -> Option<&KvEntry> {
        self.entries.last()
    }

    /// Append `block`. Its index must equal the current length.
    pub fn commit(&mut self, block: LatentBlock) -> Result<()> {
        if block.block_index != self.entries.len() {
            return Err(Error::Contiguity {
                owner: self.owner.name(),
                expected: self.entries.len(),
                got: block.block_index,
            });
        }
        self.entries.push(KvEntry {
            block_index: block.block_index,
            producer: block.producer,
            digest: block.digest(),
            payload: block,
        });
        Ok(())
    }

    /// Recompute every payload digest and check it against the recorded one.
    pub fn verify(&self) -> Result<()> {
        for (i, e) in self.entries.iter().enumerate() {
            if e.block_index != i {
                return Err(Error::Contiguity {
                    owner: self.owner.name(),
                    expected: i,
                    got: e.block_index,
                });
            }
            if e.payload.digest() != e.digest {
                return Err(Error::EntryMutated { index: i });
            }
        }
        Ok(())
    }

    pub fn producers(&self) -> Vec<Producer> {
        self.entries.iter().map(|e| e.producer).collect()
    }

    pub fn digests(&self) -> Vec<Digest> {
        self.entries.iter().map(|e| e.digest).collect()
    }

    /// Rebuild a cache by committing `blocks` in order.
    pub fn replay<I>(owner: CacheOwner, blocks: I) -> Result<Self>
    where
        I: IntoIterator<Item = LatentBlock>,
    {
        let mut cache = Self::new(owner);
        for b in blocks {
            cache.commit(b)?;
        }
        Ok(cache)
    }
}

/// Free-function form of [`KvCache::commit`].
pub fn kv_commit(cache: &mut KvCache, block: LatentBlock) -> Result<()> {
    cache.commit(block)
}

/// Temporal state of a causal decoder: the next block it expects and the
/// content carried over from the last decoded latent frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeCache {
    pub next_block: usize,
    pub frame_len: usize,
    pub history: Vec<f64>,
}

impl DecodeCache {
    pub fn new(frame_len: usize) -> Self {
        Self {
            next_block: 0,
            frame_len,
            history: Vec::new(),
        }
    }

    pub fn digest(&self) -> Digest {
        let mut h = Hasher::new("specvid.decode-cache");
        h.u64(self.next_block as u64)
            .u64(self.frame_len as u64)
            .f64s(&self.history);
        h.finish()
    }
}

/// Deep copy of a [`DecodeCache`], tagged with the block it was captured at.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeCacheSnapshot {
    captured_at: usize,
    digest: Digest,
    state: DecodeCache,
}

impl DecodeCacheSnapshot {
    pub fn captured_at(&self) -> usize {
        self.captured_at
    }

    pub fn digest(&self) -> Digest {
        self.digest
    }
}

pub fn decode_snapshot(state: &DecodeCache) -> DecodeCacheSnapshot {
    DecodeCacheSnapshot {
        captured_at: state.next_block,
        digest: state.digest(),
        state: state.clone(),
    }
}

pub fn decode_restore(state: &mut DecodeCache, snapshot: &DecodeCacheSnapshot) -> Result<()> {
    if state.frame_len != snapshot.state.frame_len {
        return Err(Error::IncompatibleSnapshot(format!(
            "frame length {} vs snapshot {}",
            state.frame_len, snapshot.state.frame_len
        )));
    }
    state.clone_from(&snapshot.state);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::LatentShape;
    use proptest::prelude::*;

    fn block(index: usize, v: f64) -> LatentBlock {
        LatentBlock {
            block_index: index,
            shape: LatentShape {
                frames: 1,
                channels: 1,
                height: 2,
                width: 2,
            },
            data: vec![v; 4],
            producer: if index % 2 == 0 {
                Producer::Target
            } else {
                Producer::Draft
            },
            noise_seed: index as u64,
        }
    }

    #[test]
    fn commit_grows_by_one_and_keeps_prior_digests() {
        let mut kv = KvCache::new(CacheOwner::Target);
        kv_commit(&mut kv, block(0, 1.0)).unwrap();
        assert_eq!(kv.len(), 1);
        let d0 = kv.entries()[0].digest;
        kv_commit(&mut kv, block(1, 2.0)).unwrap();
        assert_eq!(kv.len(), 2);
        assert_eq!(kv.entries()[0].digest, d0);
        kv.verify().unwrap();
    }

    #[test]
    fn non_contiguous_commit_is_rejected() {
        let mut kv = KvCache::new(CacheOwner::Drafter);
        kv.commit(block(0, 1.0)).unwrap();
        let err = kv.commit(block(2, 1.0)).unwrap_err();
        assert!(matches!(
            err,
            Error::Contiguity {
                expected: 1,
                got: 2,
                ..
            }
        ));
        assert_eq!(kv.len(), 1);
    }

    #[test]
    fn restore_returns_to_captured_state() {
        let mut st = DecodeCache::new(4);
        st.history = vec![1.0, 2.0, 3.0, 4.0];
        st.next_block = 3;
        let snap = decode_snapshot(&st);
        st.history[0] = 99.0;
        st.next_block = 4;
        decode_restore(&mut st, &snap).unwrap();
        assert_eq!(st.digest(), snap.digest());
        assert_eq!(snap.captured_at(), 3);
    }

    #[test]
    fn immediate_restore_is_noop() {
        let mut st = DecodeCache::new(2);
        st.history = vec![0.5, -0.5];
        let before = st.digest();
        let snap = decode_snapshot(&st);
        decode_restore(&mut st, &snap).unwrap();
        assert_eq!(st.digest(), before);
    }

    #[test]
    fn incompatible_snapshot_is_rejected() {
        let snap = decode_snapshot(&DecodeCache::new(4));
        let mut other = DecodeCache::new(8);
        assert!(matches!(
            decode_restore(&mut other, &snap),
            Err(Error::IncompatibleSnapshot(_))
        ));
    }

    #[derive(Debug, Clone)]
    enum Op {
        Mutate(usize, f64),
        Advance,
        Snapshot,
        Restore,
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (0usize..4, -10.0f64..10.0).prop_map(|(i, v)| Op::Mutate(i, v)),
            Just(Op::Advance),
            Just(Op::Snapshot),
            Just(Op::Restore),
        ]
    }

    proptest! {
        // Snapshots restored in LIFO order, checked against a naive model
        // that keeps full copies of the state.
        #[test]
        fn lifo_snapshots_match_full_copy_model(ops in prop::collection::vec(op(), 1..60)) {
            let mut st = DecodeCache::new(4);
            st.history = vec![0.0; 4];
            let mut model = st.clone();
            let mut stack: Vec<DecodeCacheSnapshot> = Vec::new();
            let mut model_stack: Vec<DecodeCache> = Vec::new();
            for op in ops {
                match op {
                    Op::Mutate(i, v) => {
                        st.history[i] = v;
                        model.history[i] = v;
                    }
                    Op::Advance => {
                        st.next_block += 1;
                        model.next_block += 1;
                    }
                    Op::Snapshot => {
                        stack.push(decode_snapshot(&st));
                        model_stack.push(model.clone());
                    }
                    Op::Restore => {
                        if let (Some(s), Some(m)) = (stack.pop(), model_stack.pop()) {
                            decode_restore(&mut st, &s).unwrap();
                            prop_assert_eq!(st.digest(), s.digest());
                            // Idempotent.
                            decode_restore(&mut st, &s).unwrap();
                            prop_assert_eq!(st.digest(), s.digest());
                            model = m;
                        }
                    }
                }
                prop_assert_eq!(&st, &model);
            }
        }

        #[test]
        fn replaying_entries_reconstructs_cache(n in 0usize..12, seed in any::<u64>()) {
            let blocks: Vec<LatentBlock> = (0..n)
                .map(|i| block(i, (seed.wrapping_mul(i as u64 + 1) % 1000) as f64))
                .collect();
            let mut kv = KvCache::new(CacheOwner::Target);
            let mut seen = Vec::new();
            for b in blocks {
                kv.commit(b).unwrap();
                // append-only: earlier digests never change
                prop_assert_eq!(&kv.digests()[..seen.len()], &seen[..]);
                seen = kv.digests();
            }
            let replayed = KvCache::replay(
                CacheOwner::Target,
                kv.entries().iter().map(|e| e.payload().clone()),
            ).unwrap();
            prop_assert_eq!(replayed, kv);
        }
    }
}
