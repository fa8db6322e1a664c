use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DatasetManifest;
use crate::error::{Error, Result};
use crate::numeric::mix_seed;
use crate::types::Granularity;

/// Per-batch sample quotas for each granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub n_full: usize,
    pub n_weak: usize,
    pub n_unlabeled: usize,
}

impl BatchSpec {
    pub fn new(n_full: usize, n_weak: usize, n_unlabeled: usize) -> Self {
        BatchSpec {
            n_full,
            n_weak,
            n_unlabeled,
        }
    }

    pub fn total(&self) -> usize {
        self.n_full + self.n_weak + self.n_unlabeled
    }

    pub fn quota(&self, g: Granularity) -> usize {
        match g {
            Granularity::Full => self.n_full,
            Granularity::Weak => self.n_weak,
            Granularity::Unlabeled => self.n_unlabeled,
        }
    }
}

/// Manifest indices grouped by granularity, in manifest order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pools {
    pub full: Vec<usize>,
    pub weak: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

impl Pools {
    pub fn from_manifest(manifest: &DatasetManifest) -> Self {
        let pick = |g| {
            manifest
                .records
                .iter()
                .enumerate()
                .filter(|(_, r)| r.granularity == g)
                .map(|(i, _)| i)
                .collect()
        };
        Pools {
            full: pick(Granularity::Full),
            weak: pick(Granularity::Weak),
            unlabeled: pick(Granularity::Unlabeled),
        }
    }

    pub fn get(&self, g: Granularity) -> &[usize] {
        match g {
            Granularity::Full => &self.full,
            Granularity::Weak => &self.weak,
            Granularity::Unlabeled => &self.unlabeled,
        }
    }
}

fn tag(g: Granularity) -> u64 {
    match g {
        Granularity::Full => 1,
        Granularity::Weak => 2,
        Granularity::Unlabeled => 3,
    }
}

/// Batch for training step `step`: quota draws per pool, without replacement
/// within an epoch and reshuffled every epoch. A pure function of its inputs.
pub fn compose_batch(pools: &Pools, spec: &BatchSpec, seed: u64, step: u64) -> Result<Vec<(usize, Granularity)>> {
    let mut batch = Vec::with_capacity(spec.total());
    for g in Granularity::ALL {
        let quota = spec.quota(g);
        if quota == 0 {
            continue;
        }
        let pool = pools.get(g);
        if pool.is_empty() {
            return Err(Error::Invalid(format!("{g:?} quota {quota} but the pool is empty")));
        }
        let n = pool.len() as u64;
        let mut epoch = u64::MAX;
        let mut perm: Vec<usize> = Vec::new();
        for k in 0..quota as u64 {
            let draw = step * quota as u64 + k;
            let e = draw / n;
            if e != epoch {
                perm = pool.to_vec();
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, tag(g), e])));
                epoch = e;
            }
            batch.push((perm[(draw % n) as usize], g));
        }
    }
    Ok(batch)
}
