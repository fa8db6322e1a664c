//! Domain types shared across modules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Annotation granularity of a training image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    /// Boxes and classes.
    Full,
    /// Image-level multi-label indicators only.
    Weak,
    /// Nothing.
    Unlabeled,
}

impl Granularity {
    pub const ALL: [Granularity; 3] = [Granularity::Full, Granularity::Weak, Granularity::Unlabeled];

    pub fn has_image_labels(self) -> bool {
        matches!(self, Granularity::Full | Granularity::Weak)
    }
}

/// Axis-aligned box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxF {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoxF {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        BoxF {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_well_ordered(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> BoxF {
        BoxF::new(self.x_min * sx, self.y_min * sy, self.x_max * sx, self.y_max * sy)
    }

    /// Intersection over union; 0 when the boxes do not overlap.
    pub fn iou(&self, other: &BoxF) -> f64 {
        let iw = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let ih = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        let inter = iw * ih;
        if inter <= 0.0 {
            return 0.0;
        }
        inter / (self.area() + other.area() - inter)
    }
}

/// An annotated lesion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub class_id: usize,
}

impl GroundTruthBox {
    pub fn new(bbox: BoxF, class_id: usize) -> Self {
        GroundTruthBox {
            x_min: bbox.x_min,
            y_min: bbox.y_min,
            x_max: bbox.x_max,
            y_max: bbox.y_max,
            class_id,
        }
    }

    pub fn bbox(&self) -> BoxF {
        BoxF::new(self.x_min, self.y_min, self.x_max, self.y_max)
    }

    /// Checks ordering, image bounds and class range.
    pub fn validate(&self, width: usize, height: usize, num_classes: usize) -> Result<()> {
        if !self.bbox().is_well_ordered() {
            return Err(Error::Invalid(format!("box not well ordered: {self:?}")));
        }
        if self.x_min < 0.0 || self.y_min < 0.0 || self.x_max > width as f64 || self.y_max > height as f64 {
            return Err(Error::Invalid(format!(
                "box {self:?} outside {width}x{height} image"
            )));
        }
        if self.class_id >= num_classes {
            return Err(Error::UnknownClass {
                class_id: self.class_id,
                num_classes,
            });
        }
        Ok(())
    }
}

/// A scored detection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoxF,
    pub class_id: usize,
    pub score: f64,
}

/// Row-major grayscale image with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }
}

/// Image labels derived from boxes: `y_c = 1` iff a box of class `c` exists.
pub fn labels_from_boxes(boxes: &[GroundTruthBox], num_classes: usize) -> Vec<f64> {
    let mut y = vec![0.0; num_classes];
    for b in boxes {
        if b.class_id < num_classes {
            y[b.class_id] = 1.0;
        }
    }
    y
}

/// One training or evaluation image with whatever labels its granularity permits.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub granularity: Granularity,
    boxes: Option<Vec<GroundTruthBox>>,
    image_labels: Option<Vec<f64>>,
}

impl Sample {
    pub fn full(id: impl Into<String>, image: Image, boxes: Vec<GroundTruthBox>, num_classes: usize) -> Result<Self> {
        for b in &boxes {
            b.validate(image.width, image.height, num_classes)?;
        }
        let labels = labels_from_boxes(&boxes, num_classes);
        Ok(Sample {
            id: id.into(),
            image,
            granularity: Granularity::Full,
            boxes: Some(boxes),
            image_labels: Some(labels),
        })
    }

    pub fn weak(id: impl Into<String>, image: Image, labels: Vec<f64>) -> Result<Self> {
        if labels.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Invalid("image labels must be binary".into()));
        }
        Ok(Sample {
            id: id.into(),
            image,
            granularity: Granularity::Weak,
            boxes: None,
            image_labels: Some(labels),
        })
    }

    pub fn unlabeled(id: impl Into<String>, image: Image) -> Self {
        Sample {
            id: id.into(),
            image,
            granularity: Granularity::Unlabeled,
            boxes: None,
            image_labels: None,
        }
    }

    pub fn boxes(&self) -> Option<&[GroundTruthBox]> {
        self.boxes.as_deref()
    }

    pub fn image_labels(&self) -> Option<&[f64]> {
        self.image_labels.as_deref()
    }

    /// Replaces image and boxes together (augmentation keeps labels).
    pub(crate) fn with_image_and_boxes(&self, image: Image, boxes: Option<Vec<GroundTruthBox>>) -> Sample {
        Sample {
            id: self.id.clone(),
            image,
            granularity: self.granularity,
            boxes,
            image_labels: self.image_labels.clone(),
        }
    }
}

/// Which image-level pooling feeds the weak loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Local-attention weighted pooling of the global attention map.
    Daa,
    /// Plain global average pooling (no path into the local head).
    GlobalAverage,
}

/// All run configuration. Serialized flat so a TOML file can mirror it key by key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub num_classes: usize,
    /// Prototype EMA coefficient after the first update.
    pub beta: f64,
    /// Inter-class margin.
    pub delta: f64,
    /// Teacher EMA decay.
    pub lambda: f64,
    pub alpha: f64,
    pub epsilon: f64,
    pub gamma: f64,

    pub image_size: usize,
    pub pyramid_levels: usize,
    pub channels: usize,
    pub anchor_scales: usize,
    /// Smallest anchor side at each level, in multiples of the level stride.
    pub anchor_base: f64,
    pub prior_prob: f64,
    pub pos_iou: f64,
    pub neg_iou: f64,

    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub lr_patience: usize,
    pub lr_min_delta: f64,
    pub lr_floor: f64,

    pub batch_full: usize,
    pub batch_weak: usize,
    pub batch_unlabeled: usize,

    pub weight_focal: f64,
    pub weight_reg: f64,
    pub weight_bce: f64,
    pub weight_intra: f64,
    pub weight_inter: f64,
    pub weight_sfl: f64,
    pub enable_weak: bool,
    pub enable_gpa: bool,
    pub enable_distill: bool,
    pub pooling: Pooling,
    /// Steps of box-only training before the auxiliary losses switch on (0 = cold start).
    pub warm_start_steps: u64,

    pub augment: bool,
    pub flip_prob: f64,
    pub max_shift: f64,

    pub steps: u64,
    pub eval_interval: u64,
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub max_dets: usize,

    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            num_classes: 3,
            beta: 0.7,
            delta: 1.0,
            lambda: 0.99,
            alpha: 0.9,
            epsilon: 0.05,
            gamma: 2.0,
            image_size: 128,
            pyramid_levels: 3,
            channels: 32,
            anchor_scales: 3,
            anchor_base: 2.0,
            prior_prob: 0.01,
            pos_iou: 0.5,
            neg_iou: 0.4,
            learning_rate: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            lr_patience: 3,
            lr_min_delta: 1e-4,
            lr_floor: 1e-8,
            batch_full: 2,
            batch_weak: 2,
            batch_unlabeled: 2,
            weight_focal: 1.0,
            weight_reg: 1.0,
            weight_bce: 1.0,
            weight_intra: 1.0,
            weight_inter: 1.0,
            weight_sfl: 1.0,
            enable_weak: true,
            enable_gpa: true,
            enable_distill: true,
            pooling: Pooling::Daa,
            warm_start_steps: 0,
            augment: true,
            flip_prob: 0.5,
            max_shift: 0.05,
            steps: 5000,
            eval_interval: 250,
            score_thresh: 0.05,
            nms_iou: 0.5,
            max_dets: 100,
            seed: 0,
        }
    }
}

impl Config {
    /// Plain supervised detector: every auxiliary loss off.
    pub fn supervised_only(mut self) -> Self {
        self.enable_weak = false;
        self.enable_gpa = false;
        self.enable_distill = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(m.to_string()));
        if self.num_classes == 0 || self.num_classes > 9 {
            return bad("num_classes must be in 1..=9");
        }
        if self.pyramid_levels < 2 {
            return bad("pyramid_levels must be >= 2");
        }
        if self.anchor_scales == 0 || self.channels < 2 {
            return bad("anchor_scales and channels must be positive");
        }
        let div = 1usize << (self.pyramid_levels + 2);
        if self.image_size == 0 || self.image_size % div != 0 {
            return Err(Error::Invalid(format!(
                "image_size {} must be a positive multiple of {div}",
                self.image_size
            )));
        }
        if !(0.0..1.0).contains(&self.lambda) {
            return bad("lambda must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad("beta must be in [0, 1]");
        }
        if self.delta <= 0.0 {
            return bad("delta must be positive");
        }
        if self.batch_full + self.batch_weak + self.batch_unlabeled == 0 {
            return bad("batch quotas are all zero");
        }
        if self.learning_rate <= 0.0 {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }
}
