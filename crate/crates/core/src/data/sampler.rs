//! P×K identity batches for triplet mining.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Yields batches of `p` distinct identities with `k` items each.
///
/// One epoch visits the identities in a shuffled order, `p` at a time; the
/// final group is topped up with other identities. Items are drawn without
/// replacement when an identity has at least `k` of them and with
/// replacement otherwise.
#[derive(Clone, Debug)]
pub struct PkSampler {
    groups: Vec<Vec<usize>>,
    p: usize,
    k: usize,
    rng: ChaCha8Rng,
}

/// Indices into the sampler's item space with the identity label of each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PkBatch {
    pub items: Vec<usize>,
    /// Position of the identity in the sampler's group list.
    pub labels: Vec<usize>,
}

impl PkSampler {
    /// `groups[l]` lists the items of identity `l`.
    pub fn new(groups: Vec<Vec<usize>>, p: usize, k: usize, seed: u64) -> Result<Self> {
        if p < 2 || k < 2 {
            return Err(Error::invalid("pk_sampler", format!("P = {p} and K = {k} must both be at least 2")));
        }
        if let Some(l) = groups.iter().position(Vec::is_empty) {
            return Err(Error::invalid("pk_sampler", format!("identity {l} has no items")));
        }
        if groups.len() < p {
            return Err(Error::invalid(
                "pk_sampler",
                format!("{} identities available, batch needs P = {}", groups.len(), p),
            ));
        }
        Ok(Self {
            groups,
            p,
            k,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.groups.len().div_ceil(self.p)
    }

    fn draw(&mut self, label: usize, out: &mut PkBatch) {
        let items = &self.groups[label];
        if items.len() >= self.k {
            out.items.extend(items.choose_multiple(&mut self.rng, self.k).copied());
        } else {
            for _ in 0..self.k {
                out.items.push(items[self.rng.gen_range(0..items.len())]);
            }
        }
        out.labels.extend(std::iter::repeat(label).take(self.k));
    }

    pub fn epoch(&mut self) -> Vec<PkBatch> {
        let mut order: Vec<usize> = (0..self.groups.len()).collect();
        order.shuffle(&mut self.rng);
        let mut batches = Vec::new();
        for chunk in order.chunks(self.p) {
            let mut ids = chunk.to_vec();
            while ids.len() < self.p {
                let extra = self.rng.gen_range(0..self.groups.len());
                if !ids.contains(&extra) {
                    ids.push(extra);
                }
            }
            let mut batch = PkBatch {
                items: Vec::with_capacity(self.p * self.k),
                labels: Vec::with_capacity(self.p * self.k),
            };
            for id in ids {
                self.draw(id, &mut batch);
            }
            batches.push(batch);
        }
        batches
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn groups(n: usize, per: usize) -> Vec<Vec<usize>> {
        (0..n).map(|i| (i * per..(i + 1) * per).collect()).collect()
    }

    #[test]
    fn batch_composition() {
        let mut s = PkSampler::new(groups(10, 3), 7, 4, 1).unwrap();
        assert_eq!(s.batch_size(), 28);
        let epoch = s.epoch();
        assert_eq!(epoch.len(), 2);
        let mut seen = BTreeSet::new();
        for b in &epoch {
            assert_eq!(b.items.len(), 28);
            let labels: BTreeSet<usize> = b.labels.iter().copied().collect();
            assert_eq!(labels.len(), 7);
            for (&item, &l) in b.items.iter().zip(&b.labels) {
                assert_eq!(item / 3, l);
            }
            seen.extend(labels);
        }
        assert_eq!(seen.len(), 10);
    }

    #[test]
    fn without_replacement_when_possible() {
        let mut s = PkSampler::new(groups(4, 5), 2, 4, 9).unwrap();
        for b in s.epoch() {
            for chunk in b.items.chunks(4) {
                let distinct: BTreeSet<_> = chunk.iter().collect();
                assert_eq!(distinct.len(), 4);
            }
        }
    }

    #[test]
    fn seeded() {
        let a = PkSampler::new(groups(6, 4), 3, 2, 5).unwrap().epoch();
        let b = PkSampler::new(groups(6, 4), 3, 2, 5).unwrap().epoch();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_too_few_identities() {
        assert!(PkSampler::new(groups(3, 4), 4, 2, 0).is_err());
        assert!(PkSampler::new(groups(3, 4), 1, 2, 0).is_err());
    }
}
