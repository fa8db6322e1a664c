use crate::types::BoxF;

/// Anchor geometry of one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelAnchors {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    /// Square anchor sides, one per anchor slot.
    pub sizes: Vec<f64>,
}

impl LevelAnchors {
    pub fn len(&self) -> usize {
        self.height * self.width * self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// All anchors of an image, flattened in (level, y, x, anchor) order.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub levels: Vec<LevelAnchors>,
    pub boxes: Vec<BoxF>,
    offsets: Vec<usize>,
}

impl AnchorSet {
    /// Level `m` has stride `8·2^m`; its anchors have sides `base·stride·2^(k/A)`.
    pub fn new(image_size: usize, num_levels: usize, anchors_per_loc: usize, base: f64) -> Self {
        let mut levels = Vec::with_capacity(num_levels);
        let mut boxes = Vec::new();
        let mut offsets = Vec::with_capacity(num_levels);
        for m in 0..num_levels {
            let stride = 8usize << m;
            let n = image_size / stride;
            let sizes: Vec<f64> = (0..anchors_per_loc)
                .map(|k| base * stride as f64 * 2f64.powf(k as f64 / anchors_per_loc as f64))
                .collect();
            offsets.push(boxes.len());
            for y in 0..n {
                for x in 0..n {
                    let cx = (x as f64 + 0.5) * stride as f64;
                    let cy = (y as f64 + 0.5) * stride as f64;
                    for &s in &sizes {
                        boxes.push(BoxF::new(cx - s / 2.0, cy - s / 2.0, cx + s / 2.0, cy + s / 2.0));
                    }
                }
            }
            levels.push(LevelAnchors {
                stride,
                height: n,
                width: n,
                sizes,
            });
        }
        AnchorSet {
            levels,
            boxes,
            offsets,
        }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn anchors_per_loc(&self) -> usize {
        self.levels[0].sizes.len()
    }

    #[inline]
    pub fn index(&self, level: usize, y: usize, x: usize, a: usize) -> usize {
        let l = &self.levels[level];
        self.offsets[level] + (y * l.width + x) * l.sizes.len() + a
    }

    /// Inverse of [`AnchorSet::index`].
    pub fn locate(&self, index: usize) -> (usize, usize, usize, usize) {
        let level = self.offsets.partition_point(|&o| o <= index) - 1;
        let l = &self.levels[level];
        let local = index - self.offsets[level];
        let a = local % l.sizes.len();
        let cell = local / l.sizes.len();
        (level, cell / l.width, cell % l.width, a)
    }
}
