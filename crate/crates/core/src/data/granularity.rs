use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::DatasetManifest;
use crate::error::{Error, Result};
use crate::evaluation::EvalToken;
use crate::types::{Granularity, GroundTruthBox};

/// Boxes withheld from weak and unlabeled samples. Readable only with an
/// [`EvalToken`]; every read trips a flag so tests can prove training never looked.
#[derive(Debug, Default)]
pub struct HiddenTruth {
    boxes: BTreeMap<String, Vec<GroundTruthBox>>,
    accessed: AtomicBool,
}

impl HiddenTruth {
    pub fn new(boxes: BTreeMap<String, Vec<GroundTruthBox>>) -> Self {
        HiddenTruth {
            boxes,
            accessed: AtomicBool::new(false),
        }
    }

    pub fn reveal(&self, _token: &EvalToken) -> &BTreeMap<String, Vec<GroundTruthBox>> {
        self.accessed.store(true, Ordering::SeqCst);
        &self.boxes
    }

    pub fn was_accessed(&self) -> bool {
        self.accessed.load(Ordering::SeqCst)
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Copies the contents without marking them read (for persisting the sidecar).
    pub(crate) fn entries_for_storage(&self) -> &BTreeMap<String, Vec<GroundTruthBox>> {
        &self.boxes
    }
}

/// Randomly partitions records into full / weak / unlabeled by `ratios`.
/// Weak records lose their boxes, unlabeled records lose boxes and labels;
/// removed boxes go to the returned sidecar.
pub fn assign_granularity(
    manifest: &DatasetManifest,
    ratios: [f64; 3],
    seed: u64,
) -> Result<(DatasetManifest, HiddenTruth)> {
    if ratios.iter().any(|&r| !(0.0..=1.0).contains(&r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::Invalid(format!("granularity ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    let n = manifest.len();
    let n_full = ((ratios[0] * n as f64).round() as usize).min(n);
    let n_weak = ((ratios[1] * n as f64).round() as usize).min(n - n_full);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut tags = vec![Granularity::Unlabeled; n];
    for (rank, &i) in order.iter().enumerate() {
        tags[i] = if rank < n_full {
            Granularity::Full
        } else if rank < n_full + n_weak {
            Granularity::Weak
        } else {
            Granularity::Unlabeled
        };
    }
    let mut out = manifest.clone();
    let mut hidden = BTreeMap::new();
    for (rec, tag) in out.records.iter_mut().zip(tags) {
        let boxes = rec
            .boxes
            .take()
            .ok_or_else(|| Error::Invalid(format!("record {} has no boxes to partition", rec.id)))?;
        rec.granularity = tag;
        match tag {
            Granularity::Full => rec.boxes = Some(boxes),
            Granularity::Weak => {
                hidden.insert(rec.id.clone(), boxes);
            }
            Granularity::Unlabeled => {
                rec.labels = None;
                hidden.insert(rec.id.clone(), boxes);
            }
        }
    }
    Ok((out, HiddenTruth::new(hidden)))
}
