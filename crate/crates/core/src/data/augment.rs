use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::Resize;
use crate::types::{BoxF, GroundTruthBox, Image, Sample};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip_prob: f64,
    /// Maximum translation as a fraction of the image side.
    pub max_shift: f64,
    /// Output side length (images are square).
    pub size: usize,
}

/// Mirrors the image and boxes about the vertical axis.
pub fn flip_horizontal(sample: &Sample) -> Sample {
    let img = &sample.image;
    let mut out = Image::zeros(img.width, img.height);
    for y in 0..img.height {
        for x in 0..img.width {
            out.set(img.width - 1 - x, y, img.get(x, y));
        }
    }
    let w = img.width as f64;
    let boxes = sample.boxes().map(|bs| {
        bs.iter()
            .map(|b| GroundTruthBox::new(BoxF::new(w - b.x_max, b.y_min, w - b.x_min, b.y_max), b.class_id))
            .collect()
    });
    sample.with_image_and_boxes(out, boxes)
}

fn clip_axis(lo: f64, hi: f64, limit: f64) -> (f64, f64) {
    let mut lo = lo.clamp(0.0, limit);
    let mut hi = hi.clamp(0.0, limit);
    // keep at least one pixel so the lesion (and its label) survives
    if hi - lo < 1.0 {
        if lo >= limit - 1.0 {
            lo = limit - 1.0;
            hi = limit;
        } else {
            hi = lo + 1.0;
        }
    }
    (lo, hi)
}

/// Integer translation with edge replication; boxes are shifted and clipped.
pub fn translate(sample: &Sample, dx: i64, dy: i64) -> Sample {
    let img = &sample.image;
    let (w, h) = (img.width as i64, img.height as i64);
    let mut out = Image::zeros(img.width, img.height);
    for y in 0..h {
        let sy = (y - dy).clamp(0, h - 1) as usize;
        for x in 0..w {
            let sx = (x - dx).clamp(0, w - 1) as usize;
            out.set(x as usize, y as usize, img.get(sx, sy));
        }
    }
    let boxes = sample.boxes().map(|bs| {
        bs.iter()
            .map(|b| {
                let (x0, x1) = clip_axis(b.x_min + dx as f64, b.x_max + dx as f64, w as f64);
                let (y0, y1) = clip_axis(b.y_min + dy as f64, b.y_max + dy as f64, h as f64);
                GroundTruthBox::new(BoxF::new(x0, y0, x1, y1), b.class_id)
            })
            .collect()
    });
    sample.with_image_and_boxes(out, boxes)
}

/// Bilinear resize to `size × size` with boxes scaled accordingly.
pub fn resize_sample(sample: &Sample, size: usize) -> Sample {
    let img = &sample.image;
    if img.width == size && img.height == size {
        return sample.clone();
    }
    let op = Resize::new(img.height, img.width, size, size);
    let out = Image {
        width: size,
        height: size,
        data: op.apply(&img.data),
    };
    let sx = size as f64 / img.width as f64;
    let sy = size as f64 / img.height as f64;
    let boxes = sample
        .boxes()
        .map(|bs| bs.iter().map(|b| GroundTruthBox::new(b.bbox().scaled(sx, sy), b.class_id)).collect());
    sample.with_image_and_boxes(out, boxes)
}

/// Random flip and shift drawn from `seed`, then resize to the configured size.
pub fn augment(sample: &Sample, seed: u64, params: &AugmentParams) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flip = rng.random_bool(params.flip_prob.clamp(0.0, 1.0));
    let max_dx = (params.max_shift * sample.image.width as f64).round() as i64;
    let max_dy = (params.max_shift * sample.image.height as f64).round() as i64;
    let dx = rng.random_range(-max_dx..=max_dx);
    let dy = rng.random_range(-max_dy..=max_dy);
    let mut s = if flip { flip_horizontal(sample) } else { sample.clone() };
    if dx != 0 || dy != 0 {
        s = translate(&s, dx, dy);
    }
    resize_sample(&s, params.size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;
    use crate::parallel::Exec;
    use crate::types::labels_from_boxes;

    fn samples() -> Vec<Sample> {
        generate_synthetic(4, 40, 64, 3, "t", Exec::Parallel)
            .unwrap()
            .samples()
            .unwrap()
    }

    #[test]
    fn flip_is_involution_and_reflects() {
        for s in samples().iter().take(10) {
            let f = flip_horizontal(s);
            assert_eq!(flip_horizontal(&f), *s);
            for (a, b) in s.boxes().unwrap().iter().zip(f.boxes().unwrap()) {
                assert_eq!(b.x_min, 64.0 - a.x_max);
            }
        }
    }

    #[test]
    fn translated_boxes_clipped_and_ordered() {
        let params = AugmentParams {
            flip_prob: 0.5,
            max_shift: 0.05,
            size: 64,
        };
        for (i, s) in samples().iter().enumerate() {
            for k in 0..20u64 {
                let a = augment(s, i as u64 * 100 + k, &params);
                for b in a.boxes().unwrap() {
                    b.validate(64, 64, 3).unwrap();
                }
                assert_eq!(
                    labels_from_boxes(a.boxes().unwrap(), 3),
                    labels_from_boxes(s.boxes().unwrap(), 3)
                );
            }
        }
        // boxes pushed fully off the edge keep one pixel
        let s = &samples()[0];
        let t = translate(s, 63, 63);
        for b in t.boxes().unwrap() {
            b.validate(64, 64, 3).unwrap();
        }
    }

    #[test]
    fn resize_scales_boxes() {
        let s = &samples()[1];
        let r = resize_sample(s, 32);
        assert_eq!((r.image.width, r.image.height), (32, 32));
        for (a, b) in s.boxes().unwrap().iter().zip(r.boxes().unwrap()) {
            assert_eq!(b.x_max, a.x_max / 2.0);
        }
    }
}
