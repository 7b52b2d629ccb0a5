//! Identity-balanced batches: `P` identities with `K` instances each.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct PkSampler {
    p: usize,
    k: usize,
    /// Dataset indices per identity, in identity order.
    groups: Vec<Vec<usize>>,
    rng: ChaCha8Rng,
}

impl PkSampler {
    pub fn new(labels: &[usize], p: usize, k: usize, seed: u64) -> Result<Self> {
        let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            by_id.entry(l).or_default().push(i);
        }
        let groups: Vec<Vec<usize>> = by_id.into_values().collect();
        if p < 2 || k < 2 {
            return Err(Error::InvalidArgument(format!(
                "batches need at least 2 identities and 2 instances, got P={p} K={k}"
            )));
        }
        if groups.len() < p {
            return Err(Error::InvalidArgument(format!(
                "P={p} exceeds the {} identities available",
                groups.len()
            )));
        }
        if let Some(g) = groups.iter().find(|g| g.len() < k) {
            return Err(Error::InvalidArgument(format!(
                "K={k} exceeds the {} instances of identity {}",
                g.len(),
                labels[g[0]]
            )));
        }
        Ok(Self {
            p,
            k,
            groups,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    /// One pass: each identity contributes `floor(n / K)` disjoint chunks of
    /// `K` shuffled instances; batches draw `P` distinct identities that still
    /// hold chunks. A final short group is padded with random other identities,
    /// so every identity appears at least once.
    pub fn epoch(&mut self) -> Vec<Vec<usize>> {
        let k = self.k;
        let mut chunks: Vec<Vec<Vec<usize>>> = self
            .groups
            .iter()
            .map(|g| {
                let mut g = g.clone();
                g.shuffle(&mut self.rng);
                g.chunks_exact(k).map(<[usize]>::to_vec).collect()
            })
            .collect();
        let mut batches = Vec::new();
        loop {
            let mut live: Vec<usize> = (0..chunks.len()).filter(|&i| !chunks[i].is_empty()).collect();
            if live.is_empty() {
                break;
            }
            live.shuffle(&mut self.rng);
            let mut chosen: Vec<usize> = live.into_iter().take(self.p).collect();
            while chosen.len() < self.p {
                let extra = self.rng.gen_range(0..self.groups.len());
                if !chosen.contains(&extra) {
                    chosen.push(extra);
                }
            }
            let mut batch = Vec::with_capacity(self.batch_size());
            for id in chosen {
                match chunks[id].pop() {
                    Some(c) => batch.extend(c),
                    None => batch.extend(self.groups[id].choose_multiple(&mut self.rng, k).copied()),
                }
            }
            batches.push(batch);
        }
        batches
    }
}

/// Endless batch stream over a sampler; a fresh shuffled epoch starts
/// whenever the previous one is exhausted.
#[derive(Clone, Debug)]
pub struct CyclingSampler {
    sampler: PkSampler,
    queue: VecDeque<Vec<usize>>,
}

impl CyclingSampler {
    pub fn new(sampler: PkSampler) -> Self {
        Self {
            sampler,
            queue: VecDeque::new(),
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.queue.is_empty() {
            self.queue.extend(self.sampler.epoch());
        }
        self.queue.pop_front().expect("an epoch yields at least one batch")
    }
}

/// Per identity, `val_per_identity` instances to validation and the rest to
/// training. Returns `(train, val)` index lists in ascending order.
pub fn split_train_val(labels: &[usize], val_per_identity: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_id.entry(l).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (id, mut idx) in by_id {
        if idx.len() <= val_per_identity {
            return Err(Error::TooFewInstances {
                identity: id,
                count: idx.len(),
                required: val_per_identity + 1,
            });
        }
        idx.shuffle(&mut rng);
        val.extend_from_slice(&idx[..val_per_identity]);
        train.extend_from_slice(&idx[val_per_identity..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;
    use proptest::prelude::*;

    fn labels(ids: usize, per: usize) -> Vec<usize> {
        (0..ids * per).map(|i| i / per).collect()
    }

    fn check_batch(batch: &[usize], labels: &[usize], p: usize, k: usize) {
        assert_eq!(batch.len(), p * k);
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &i in batch {
            *counts.entry(labels[i]).or_default() += 1;
        }
        assert_eq!(counts.len(), p);
        assert!(counts.values().all(|&c| c == k));
    }

    #[test]
    fn batch_sizes() {
        assert_eq!(PkSampler::new(&labels(20, 4), 16, 4, 0).unwrap().batch_size(), 64);
        assert_eq!(PkSampler::new(&labels(20, 4), 4, 4, 0).unwrap().batch_size(), 16);
    }

    #[test]
    fn infeasible_configs_rejected() {
        assert!(PkSampler::new(&labels(3, 4), 4, 4, 0).is_err());
        assert!(PkSampler::new(&labels(8, 3), 4, 4, 0).is_err());
        assert!(PkSampler::new(&labels(8, 4), 1, 4, 0).is_err());
    }

    #[test]
    fn split_counts_and_disjointness() {
        let l = labels(10, 10);
        let (train, val) = split_train_val(&l, 4, 3).unwrap();
        assert_eq!((train.len(), val.len()), (60, 40));
        let t: HashSet<_> = train.iter().collect();
        assert!(val.iter().all(|i| !t.contains(i)));
        assert_eq!(split_train_val(&l, 4, 3).unwrap(), (train, val));
    }

    #[test]
    fn split_names_short_identity() {
        let mut l = labels(3, 6);
        l.truncate(16);
        match split_train_val(&l, 4, 0) {
            Err(Error::TooFewInstances { identity, count, required }) => {
                assert_eq!((identity, count, required), (2, 4, 5))
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cycling_reshuffles_between_epochs() {
        let l = labels(8, 4);
        let mut s = CyclingSampler::new(PkSampler::new(&l, 4, 4, 1).unwrap());
        let first: Vec<_> = (0..2).map(|_| s.next_batch()).collect();
        let second: Vec<_> = (0..2).map(|_| s.next_batch()).collect();
        assert_ne!(first, second);
    }

    proptest! {
        #[test]
        fn every_batch_is_pk_and_epoch_covers_all(
            ids in 4usize..30, extra in 0usize..9, p in 2usize..5, k in 2usize..5, seed in any::<u64>()
        ) {
            prop_assume!(ids >= p);
            let per: Vec<usize> = (0..ids).map(|i| k + (i * 7 + extra) % (extra + 1)).collect();
            let l: Vec<usize> = per.iter().enumerate().flat_map(|(i, &n)| std::iter::repeat(i).take(n)).collect();
            let mut s = PkSampler::new(&l, p, k, seed).unwrap();
            for _ in 0..2 {
                let batches = s.epoch();
                let mut seen = HashSet::new();
                for b in &batches {
                    check_batch(b, &l, p, k);
                    seen.extend(b.iter().map(|&i| l[i]));
                }
                prop_assert_eq!(seen.len(), ids);
            }
        }
    }
}
