//! PK batch construction.
//!
//! An epoch shuffles the training identities and walks through them without
//! replacement, `P` at a time. Each identity contributes `K` of its samples,
//! drawn without replacement while they last and then topped up uniformly
//! with replacement. When the identity count is not a multiple of `P`, the
//! last batch is filled with identities already used earlier in the epoch and
//! marked `padded`.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_P: usize = 18;
pub const DEFAULT_K: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Dataset row indices, grouped in `p` consecutive blocks of `k`.
    pub sample_indices: Vec<usize>,
    pub labels: Vec<u32>,
    pub p: usize,
    pub k: usize,
    /// Some identities were re-drawn to complete the final batch.
    pub padded: bool,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.sample_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_indices.is_empty()
    }

    /// Checks the P x K structure against the dataset.
    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.sample_indices.len() != self.p * self.k || self.labels.len() != self.sample_indices.len() {
            return bad(format!("batch has {} entries, expected {}", self.sample_indices.len(), self.p * self.k));
        }
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for (&i, &l) in self.sample_indices.iter().zip(&self.labels) {
            let Some(s) = dataset.samples().get(i) else {
                return bad(format!("index {i} outside the dataset"));
            };
            if s.identity != l {
                return bad(format!("label {l} does not match sample {i}"));
            }
            *counts.entry(l).or_default() += 1;
        }
        if counts.len() != self.p || counts.values().any(|&c| c != self.k) {
            return bad(format!("identity counts {counts:?} are not {} x {}", self.p, self.k));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpochPlan {
    pub batches: Vec<Batch>,
    pub seed: u64,
}

impl EpochPlan {
    pub fn identities(&self) -> BTreeSet<u32> {
        self.batches.iter().flat_map(|b| b.labels.iter().copied()).collect()
    }
}

/// Plans one epoch over the train split.
pub fn build_epoch(dataset: &Dataset, p: usize, k: usize, seed: u64) -> Result<EpochPlan> {
    if p < 2 || k < 2 {
        return Err(Error::InvalidArgument(format!("P and K must be at least 2, got P={p} K={k}")));
    }
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.samples().iter().enumerate() {
        if s.split == Split::Train {
            groups.entry(s.identity).or_default().push(i);
        }
    }
    if groups.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    if groups.len() < p {
        return Err(Error::TooFewIdentities { found: groups.len(), needed: p });
    }

    let mut rng = rng::seeded(seed);
    let mut order: Vec<u32> = groups.keys().copied().collect();
    order.shuffle(&mut rng);

    let mut batches = Vec::with_capacity(order.len().div_ceil(p));
    for (c, chunk) in order.chunks(p).enumerate() {
        let mut ids = chunk.to_vec();
        let padded = ids.len() < p;
        if padded {
            let mut used = order[..c * p].to_vec();
            used.shuffle(&mut rng);
            ids.extend_from_slice(&used[..p - chunk.len()]);
        }
        let mut sample_indices = Vec::with_capacity(p * k);
        let mut labels = Vec::with_capacity(p * k);
        for id in ids {
            let mut pool = groups[&id].clone();
            pool.shuffle(&mut rng);
            let take = pool.len().min(k);
            let mut block = pool[..take].to_vec();
            while block.len() < k {
                block.push(*pool.choose(&mut rng).expect("identity has samples"));
            }
            labels.extend(std::iter::repeat_n(id, k));
            sample_indices.extend(block);
        }
        batches.push(Batch { sample_indices, labels, p, k, padded });
    }
    Ok(EpochPlan { batches, seed })
}
