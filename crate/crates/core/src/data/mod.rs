//! Synthetic data, granularity partitioning, augmentation and batch composition.

mod augment;
mod batch;
mod granularity;
mod io;
mod synth;

pub use augment::{augment, flip_horizontal, resize_sample, translate, AugmentParams};
pub use batch::{compose_batch, BatchSpec, Pools};
pub use granularity::{assign_granularity, HiddenTruth};
pub use io::{read_dataset, write_dataset};
pub use synth::{generate_synthetic, render_lesion, SHAPE_FAMILIES};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Granularity, GroundTruthBox, Image, Sample};

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub path: String,
    pub granularity: Granularity,
    /// Present iff granularity is `full`.
    pub boxes: Option<Vec<GroundTruthBox>>,
    /// Present iff granularity is `full` or `weak`.
    pub labels: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: String,
    pub seed: u64,
    pub num_classes: usize,
    pub image_size: usize,
    pub records: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn count(&self, g: Granularity) -> usize {
        self.records.iter().filter(|r| r.granularity == g).count()
    }
}

/// Manifest, decoded images and the evaluation-only sidecar.
#[derive(Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<Image>,
    pub hidden: HiddenTruth,
}

impl Dataset {
    /// Builds the training view of record `i` (labels limited by its granularity).
    pub fn sample(&self, i: usize) -> Result<Sample> {
        let r = &self.manifest.records[i];
        let image = self.images[i].clone();
        match r.granularity {
            Granularity::Full => {
                let boxes = r
                    .boxes
                    .clone()
                    .ok_or_else(|| Error::Invalid(format!("full record {} has no boxes", r.id)))?;
                Sample::full(r.id.clone(), image, boxes, self.manifest.num_classes)
            }
            Granularity::Weak => {
                let labels = r
                    .labels
                    .as_ref()
                    .ok_or_else(|| Error::Invalid(format!("weak record {} has no labels", r.id)))?;
                Sample::weak(r.id.clone(), image, labels.iter().map(|&v| v as f64).collect())
            }
            Granularity::Unlabeled => Ok(Sample::unlabeled(r.id.clone(), image)),
        }
    }

    /// Re-labels a fully annotated dataset into full / weak / unlabeled parts.
    pub fn partition(self, ratios: [f64; 3], seed: u64) -> Result<Dataset> {
        let (manifest, hidden) = assign_granularity(&self.manifest, ratios, seed)?;
        Ok(Dataset {
            manifest,
            images: self.images,
            hidden,
        })
    }

    pub fn samples(&self) -> Result<Vec<Sample>> {
        (0..self.manifest.len()).map(|i| self.sample(i)).collect()
    }
}
