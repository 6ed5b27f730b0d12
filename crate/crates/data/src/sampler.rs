//! PK batch sampling: P identities with K images each.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub struct PkSampler {
    groups: Vec<(i64, Vec<usize>)>,
    p: usize,
    k: usize,
    rng: ChaCha8Rng,
}

impl PkSampler {
    /// `labels[i]` is the identity of sample `i`.
    pub fn new(labels: &[i64], p: usize, k: usize, seed: u64) -> Result<Self> {
        if p < 2 || k < 2 {
            return Err(Error::Validation(format!(
                "PK sampling needs P >= 2 and K >= 2, got P={p}, K={k}"
            )));
        }
        let mut by_id: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        for (i, &id) in labels.iter().enumerate() {
            by_id.entry(id).or_default().push(i);
        }
        if by_id.len() < p {
            return Err(Error::Validation(format!(
                "PK sampling needs {p} identities, the data has {}",
                by_id.len()
            )));
        }
        Ok(Self {
            groups: by_id.into_iter().collect(),
            p,
            k,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    /// Sample indices for the next batch, grouped by identity. Identities
    /// with fewer than K images are sampled with replacement.
    pub fn next_batch(&mut self) -> Vec<usize> {
        let chosen: Vec<&(i64, Vec<usize>)> = self.groups.choose_multiple(&mut self.rng, self.p).collect();
        let mut out = Vec::with_capacity(self.batch_size());
        for (_, members) in chosen {
            if members.len() >= self.k {
                out.extend(members.choose_multiple(&mut self.rng, self.k).copied());
            } else {
                for _ in 0..self.k {
                    out.push(*members.choose(&mut self.rng).expect("non-empty group"));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_have_p_identities_of_k() {
        let labels: Vec<i64> = (0..60).map(|i| i % 6).collect();
        let mut s = PkSampler::new(&labels, 4, 4, 3).unwrap();
        for _ in 0..20 {
            let b = s.next_batch();
            assert_eq!(b.len(), 16);
            let mut counts = BTreeMap::new();
            for &i in &b {
                *counts.entry(labels[i]).or_insert(0) += 1;
            }
            assert_eq!(counts.len(), 4);
            assert!(counts.values().all(|&c| c == 4));
        }
    }

    #[test]
    fn small_identities_are_resampled() {
        let labels = [1, 1, 2, 3, 3, 3, 4];
        let mut s = PkSampler::new(&labels, 4, 4, 0).unwrap();
        assert_eq!(s.next_batch().len(), 16);
        assert!(PkSampler::new(&labels, 5, 4, 0).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let labels: Vec<i64> = (0..40).map(|i| i % 8).collect();
        let mut a = PkSampler::new(&labels, 4, 4, 9).unwrap();
        let mut b = PkSampler::new(&labels, 4, 4, 9).unwrap();
        for _ in 0..5 {
            assert_eq!(a.next_batch(), b.next_batch());
        }
    }
}
