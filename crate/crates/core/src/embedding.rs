//! Row-sharded embedding table.
//!
//! Row `id` lives on worker `id mod n`. Rows are created lazily on first
//! lookup from a generator keyed by `(seed, id)`, so a sharded table and an
//! unsharded one built with the same seed hold identical rows no matter in
//! which order ids are first touched.

use std::collections::{BTreeMap, HashSet};
use std::io::{self, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub type FeatureId = u64;

/// Half-width of the uniform range used for fresh rows.
pub const INIT_SCALE: f64 = 0.01;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("worker count must be at least 1")]
    NoWorkers,
    #[error("id {id} belongs to shard {expected}, not shard {owner}")]
    WrongShard {
        id: FeatureId,
        owner: usize,
        expected: usize,
    },
    #[error("gradient for id {id} has length {got}, table dim is {dim}")]
    DimMismatch {
        id: FeatureId,
        got: usize,
        dim: usize,
    },
    #[error("checkpoint: {0}")]
    Io(#[from] io::Error),
}

pub fn shard_of(id: FeatureId, n: usize) -> Result<usize, EmbeddingError> {
    if n == 0 {
        return Err(EmbeddingError::NoWorkers);
    }
    Ok((id % n as u64) as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardMap {
    num_workers: usize,
}

impl ShardMap {
    pub fn new(num_workers: usize) -> Result<Self, EmbeddingError> {
        if num_workers == 0 {
            return Err(EmbeddingError::NoWorkers);
        }
        Ok(Self { num_workers })
    }

    pub fn num_workers(&self) -> usize {
        self.num_workers
    }

    pub fn owner(&self, id: FeatureId) -> usize {
        (id % self.num_workers as u64) as usize
    }
}

/// Deterministic fresh row for `id`.
pub fn init_row(seed: u64, id: FeatureId, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    (0..dim)
        .map(|_| rng.random_range(-INIT_SCALE..INIT_SCALE))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Support,
    Query,
    Both,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub ids: Vec<FeatureId>,
    pub vectors: Vec<Vec<f64>>,
    pub origin: Origin,
}

/// First-appearance-order deduplication.
pub fn dedup_ids(ids: impl IntoIterator<Item = FeatureId>) -> Vec<FeatureId> {
    let mut seen = HashSet::new();
    ids.into_iter().filter(|id| seen.insert(*id)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingShard {
    owner: usize,
    map: ShardMap,
    dim: usize,
    seed: u64,
    rows: BTreeMap<FeatureId, Vec<f64>>,
}

impl EmbeddingShard {
    pub fn new(owner: usize, map: ShardMap, dim: usize, seed: u64) -> Self {
        assert!(owner < map.num_workers(), "owner out of range");
        Self {
            owner,
            map,
            dim,
            seed,
            rows: BTreeMap::new(),
        }
    }

    /// Single-shard table holding every id.
    pub fn unsharded(dim: usize, seed: u64) -> Self {
        Self::new(0, ShardMap { num_workers: 1 }, dim, seed)
    }

    /// Unsharded table holding the materialized rows of every shard.
    pub fn merge(shards: &[EmbeddingShard]) -> Result<Self, EmbeddingError> {
        let first = shards.first().ok_or(EmbeddingError::NoWorkers)?;
        let mut out = Self::unsharded(first.dim, first.seed);
        for s in shards {
            if s.dim != first.dim {
                return Err(EmbeddingError::DimMismatch {
                    id: s.rows.keys().next().copied().unwrap_or(0),
                    got: s.dim,
                    dim: first.dim,
                });
            }
            out.rows
                .extend(s.rows.iter().map(|(id, r)| (*id, r.clone())));
        }
        Ok(out)
    }

    pub fn owner(&self) -> usize {
        self.owner
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn shard_map(&self) -> ShardMap {
        self.map
    }

    pub fn rows(&self) -> &BTreeMap<FeatureId, Vec<f64>> {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn check_owner(&self, id: FeatureId) -> Result<(), EmbeddingError> {
        let expected = self.map.owner(id);
        if expected != self.owner {
            return Err(EmbeddingError::WrongShard {
                id,
                owner: self.owner,
                expected,
            });
        }
        Ok(())
    }

    /// Current value of a row without materializing it.
    pub fn peek(&self, id: FeatureId) -> Vec<f64> {
        self.rows
            .get(&id)
            .cloned()
            .unwrap_or_else(|| init_row(self.seed, id, self.dim))
    }

    fn row_mut(&mut self, id: FeatureId) -> &mut Vec<f64> {
        let (seed, dim) = (self.seed, self.dim);
        self.rows
            .entry(id)
            .or_insert_with(|| init_row(seed, id, dim))
    }

    pub fn local_lookup(
        &mut self,
        ids: &[FeatureId],
        origin: Origin,
    ) -> Result<EmbeddingBatch, EmbeddingError> {
        for &id in ids {
            self.check_owner(id)?;
        }
        let ids = dedup_ids(ids.iter().copied());
        let vectors = ids.iter().map(|&id| self.row_mut(id).clone()).collect();
        Ok(EmbeddingBatch {
            ids,
            vectors,
            origin,
        })
    }

    /// `row[id] -= lr * sum(grads for id)`.
    ///
    /// Duplicates are summed before the update, in a canonical order (by id,
    /// then by the gradient values' total order), so any permutation of
    /// `grads` gives bit-identical rows.
    pub fn apply_sparse_grads(
        &mut self,
        grads: &[(FeatureId, Vec<f64>)],
        lr: f64,
    ) -> Result<(), EmbeddingError> {
        for (id, g) in grads {
            self.check_owner(*id)?;
            if g.len() != self.dim {
                return Err(EmbeddingError::DimMismatch {
                    id: *id,
                    got: g.len(),
                    dim: self.dim,
                });
            }
        }
        let mut sorted: Vec<&(FeatureId, Vec<f64>)> = grads.iter().collect();
        sorted.sort_by(|a, b| {
            a.0.cmp(&b.0).then_with(|| {
                a.1.iter()
                    .zip(&b.1)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
        });
        let mut i = 0;
        while i < sorted.len() {
            let id = sorted[i].0;
            let mut sum = sorted[i].1.clone();
            i += 1;
            while i < sorted.len() && sorted[i].0 == id {
                for (s, v) in sum.iter_mut().zip(&sorted[i].1) {
                    *s += v;
                }
                i += 1;
            }
            let row = self.row_mut(id);
            for (r, s) in row.iter_mut().zip(&sum) {
                *r -= lr * s;
            }
        }
        Ok(())
    }

    /// Little-endian dump: `dim u32, count u64, (id u64, dim x f64)*`.
    pub fn dump<W: Write>(&self, mut w: W) -> Result<(), EmbeddingError> {
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.rows.len() as u64).to_le_bytes())?;
        for (id, row) in &self.rows {
            w.write_all(&id.to_le_bytes())?;
            for v in row {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn restore<R: Read>(
        owner: usize,
        map: ShardMap,
        seed: u64,
        mut r: R,
    ) -> Result<Self, EmbeddingError> {
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        let dim = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b8)?;
        let count = u64::from_le_bytes(b8);
        let mut shard = Self::new(owner, map, dim, seed);
        for _ in 0..count {
            r.read_exact(&mut b8)?;
            let id = u64::from_le_bytes(b8);
            shard.check_owner(id)?;
            let mut row = Vec::with_capacity(dim);
            for _ in 0..dim {
                r.read_exact(&mut b8)?;
                row.push(f64::from_le_bytes(b8));
            }
            shard.rows.insert(id, row);
        }
        Ok(shard)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modulo_mapping() {
        assert_eq!(shard_of(7, 4).unwrap(), 3);
        assert_eq!(shard_of(8, 4).unwrap(), 0);
        assert!(matches!(shard_of(1, 0), Err(EmbeddingError::NoWorkers)));
    }

    #[test]
    fn exhaustive_balance() {
        let mut counts = [0usize; 4];
        for id in 0..10_000u64 {
            counts[shard_of(id, 4).unwrap()] += 1;
        }
        assert_eq!(counts, [2500; 4]);
    }

    #[test]
    fn lookup_dedups() {
        let mut s = EmbeddingShard::unsharded(3, 1);
        let b = s.local_lookup(&[4, 4, 9], Origin::Both).unwrap();
        assert_eq!(b.ids, vec![4, 9]);
        assert_eq!(b.vectors.len(), 2);
    }

    #[test]
    fn lookup_rejects_foreign_id() {
        let mut s = EmbeddingShard::new(1, ShardMap::new(2).unwrap(), 2, 0);
        assert!(matches!(
            s.local_lookup(&[2], Origin::Support),
            Err(EmbeddingError::WrongShard {
                id: 2,
                owner: 1,
                expected: 0
            })
        ));
    }

    #[test]
    fn init_is_seeded() {
        let mut a = EmbeddingShard::unsharded(4, 77);
        let mut b = EmbeddingShard::unsharded(4, 77);
        let ra = a.local_lookup(&[123], Origin::Query).unwrap();
        let rb = b.local_lookup(&[123], Origin::Query).unwrap();
        assert_eq!(ra, rb);
        assert!(ra.vectors[0].iter().all(|v| v.abs() <= INIT_SCALE));
        assert_ne!(init_row(77, 123, 4), init_row(78, 123, 4));
        assert_ne!(init_row(77, 123, 4), init_row(77, 124, 4));
    }

    #[test]
    fn sgd_arithmetic() {
        let mut s = EmbeddingShard::unsharded(2, 0);
        s.rows.insert(1, vec![1.0, 1.0]);
        s.apply_sparse_grads(&[(1, vec![0.0, 0.0])], 0.5).unwrap();
        assert_eq!(s.rows[&1], vec![1.0, 1.0]);
        s.apply_sparse_grads(&[(1, vec![2.0, 4.0])], 0.5).unwrap();
        assert_eq!(s.rows[&1], vec![0.0, -1.0]);
        let after = s.local_lookup(&[1], Origin::Both).unwrap();
        assert_eq!(after.vectors[0], vec![0.0, -1.0]);
    }

    #[test]
    fn duplicates_summed() {
        let mut a = EmbeddingShard::unsharded(1, 0);
        a.rows.insert(5, vec![10.0]);
        let mut b = a.clone();
        a.apply_sparse_grads(&[(5, vec![1.0]), (5, vec![2.0])], 1.0)
            .unwrap();
        b.apply_sparse_grads(&[(5, vec![1.0])], 1.0).unwrap();
        b.apply_sparse_grads(&[(5, vec![2.0])], 1.0).unwrap();
        assert_eq!(a.rows[&5], vec![7.0]);
        assert_eq!(a.rows, b.rows);
    }

    #[test]
    fn dim_mismatch_rejected() {
        let mut s = EmbeddingShard::unsharded(2, 0);
        assert!(matches!(
            s.apply_sparse_grads(&[(1, vec![1.0])], 1.0),
            Err(EmbeddingError::DimMismatch { .. })
        ));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let map = ShardMap::new(3).unwrap();
        let mut s = EmbeddingShard::new(2, map, 3, 5);
        s.local_lookup(&[2, 5, 8, 11], Origin::Both).unwrap();
        s.apply_sparse_grads(&[(5, vec![1.0, 2.0, 3.0])], 0.1)
            .unwrap();
        let mut buf = Vec::new();
        s.dump(&mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 8 + 4 * (8 + 3 * 8));
        assert_eq!(&buf[..4], &3u32.to_le_bytes());
        let back = EmbeddingShard::restore(2, map, 5, buf.as_slice()).unwrap();
        assert_eq!(back, s);
        assert!(EmbeddingShard::restore(1, map, 5, buf.as_slice()).is_err());
    }
}
