use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, DatasetManifest, HiddenTruth, SampleRecord};
use crate::error::{Error, Result};
use crate::numeric::mix_seed;
use crate::parallel::Exec;
use crate::types::{labels_from_boxes, BoxF, Granularity, GroundTruthBox, Image};

/// Shape family per class id, in class order.
pub const SHAPE_FAMILIES: [&str; 9] = [
    "disc",
    "frame",
    "cross",
    "ring",
    "block",
    "hstripes",
    "vstripes",
    "checker",
    "triangle",
];

const MIN_SIDE: f64 = 14.0;
const MAX_SIDE_FRAC: f64 = 0.86;
const MAX_LESIONS: usize = 4;

/// Coverage of the class-`class_id` shape at normalized box coordinates `(u, v) ∈ [0,1]²`.
fn shape_mask(class_id: usize, u: f64, v: f64) -> bool {
    let du = 2.0 * u - 1.0;
    let dv = 2.0 * v - 1.0;
    let rho = (du * du + dv * dv).sqrt();
    match class_id {
        0 => rho <= 1.0,
        1 => du.abs().max(dv.abs()) >= 0.6,
        2 => du.abs() <= 0.3 || dv.abs() <= 0.3,
        3 => (0.55..=1.0).contains(&rho),
        4 => true,
        5 => ((v * 6.0).floor() as i64) % 2 == 0,
        6 => ((u * 6.0).floor() as i64) % 2 == 0,
        7 => (((u * 4.0).floor() + (v * 4.0).floor()) as i64) % 2 == 0,
        _ => du.abs() <= v,
    }
}

/// Paints one lesion of the given class into `image` additively.
pub fn render_lesion(image: &mut Image, bbox: &BoxF, class_id: usize, amplitude: f64) {
    let x0 = bbox.x_min.floor().max(0.0) as usize;
    let y0 = bbox.y_min.floor().max(0.0) as usize;
    let x1 = (bbox.x_max.ceil() as usize).min(image.width);
    let y1 = (bbox.y_max.ceil() as usize).min(image.height);
    for y in y0..y1 {
        let v = (y as f64 + 0.5 - bbox.y_min) / bbox.height();
        if !(0.0..=1.0).contains(&v) {
            continue;
        }
        for x in x0..x1 {
            let u = (x as f64 + 0.5 - bbox.x_min) / bbox.width();
            if (0.0..=1.0).contains(&u) && shape_mask(class_id, u, v) {
                let p = image.get(x, y) + amplitude;
                image.set(x, y, p);
            }
        }
    }
}

fn background<R: Rng>(rng: &mut R, size: usize) -> Image {
    let mut img = Image::zeros(size, size);
    let base: f64 = rng.random_range(0.15..0.3);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.02..0.08),
                rng.random_range(0.01..0.06),
                rng.random_range(0.01..0.06),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    for y in 0..size {
        for x in 0..size {
            let mut v = base;
            for &(amp, fx, fy, ph) in &waves {
                v += amp * (fx * x as f64 * std::f64::consts::TAU / 8.0 + fy * y as f64 * std::f64::consts::TAU / 8.0 + ph).sin();
            }
            v += rng.random_range(-0.06..0.06);
            img.set(x, y, v);
        }
    }
    img
}

fn quantize(img: &mut Image) {
    for v in &mut img.data {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
}

/// Image `index` of the dataset generated from `seed`.
fn generate_one(seed: u64, index: usize, size: usize, num_classes: usize) -> (Image, Vec<GroundTruthBox>) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, index as u64]));
    let mut img = background(&mut rng, size);
    let count = rng.random_range(0..=MAX_LESIONS);
    let max_side = size as f64 * MAX_SIDE_FRAC;
    let mut boxes: Vec<GroundTruthBox> = Vec::with_capacity(count);
    for _ in 0..count {
        for _attempt in 0..30 {
            let class_id = rng.random_range(0..num_classes);
            let side = (rng.random_range(MIN_SIDE.ln()..max_side.ln())).exp();
            let aspect: f64 = rng.random_range(0.8..1.25);
            let w = (side * aspect).round().clamp(MIN_SIDE, size as f64 - 1.0);
            let h = (side / aspect).round().clamp(MIN_SIDE, size as f64 - 1.0);
            let x0 = rng.random_range(0..=(size - w as usize)) as f64;
            let y0 = rng.random_range(0..=(size - h as usize)) as f64;
            let b = BoxF::new(x0, y0, x0 + w, y0 + h);
            // reject heavy overlap
            if boxes.iter().any(|o| o.bbox().iou(&b) > 0.2) {
                continue;
            }
            let amplitude = rng.random_range(0.3..0.55);
            render_lesion(&mut img, &b, class_id, amplitude);
            boxes.push(GroundTruthBox::new(b, class_id));
            break;
        }
    }
    quantize(&mut img);
    (img, boxes)
}

/// Generates `n_images` fully annotated images; a pure function of the arguments.
pub fn generate_synthetic(
    seed: u64,
    n_images: usize,
    image_size: usize,
    num_classes: usize,
    split: &str,
    exec: Exec,
) -> Result<Dataset> {
    if num_classes == 0 || num_classes > SHAPE_FAMILIES.len() {
        return Err(Error::Invalid(format!("num_classes must be in 1..=9, got {num_classes}")));
    }
    if image_size < 2 * MIN_SIDE as usize {
        return Err(Error::Invalid(format!("image_size {image_size} too small")));
    }
    let generated = exec.map_range(n_images, |i| generate_one(seed, i, image_size, num_classes));
    let mut images = Vec::with_capacity(n_images);
    let mut records = Vec::with_capacity(n_images);
    for (i, (img, boxes)) in generated.into_iter().enumerate() {
        let id = format!("{split}-{i:05}");
        let labels = labels_from_boxes(&boxes, num_classes).iter().map(|&v| v as u8).collect();
        records.push(SampleRecord {
            path: format!("images/{id}.png"),
            id,
            granularity: Granularity::Full,
            boxes: Some(boxes),
            labels: Some(labels),
        });
        images.push(img);
    }
    Ok(Dataset {
        manifest: DatasetManifest {
            split: split.to_string(),
            seed,
            num_classes,
            image_size,
            records,
        },
        images,
        hidden: HiddenTruth::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_empty() {
        let a = generate_synthetic(7, 12, 128, 3, "train", Exec::Parallel).unwrap();
        let b = generate_synthetic(7, 12, 128, 3, "train", Exec::Sequential).unwrap();
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(a.images, b.images);
        let e = generate_synthetic(7, 0, 128, 3, "train", Exec::Parallel).unwrap();
        assert!(e.manifest.is_empty());
        assert!(generate_synthetic(7, 1, 8, 3, "x", Exec::Parallel).is_err());
        assert!(generate_synthetic(7, 1, 128, 10, "x", Exec::Parallel).is_err());
    }

    #[test]
    fn boxes_valid_and_images_in_range() {
        let d = generate_synthetic(3, 50, 128, 9, "t", Exec::Parallel).unwrap();
        for (r, img) in d.manifest.records.iter().zip(&d.images) {
            let boxes = r.boxes.as_ref().unwrap();
            assert!(boxes.len() <= MAX_LESIONS);
            for b in boxes {
                b.validate(128, 128, 9).unwrap();
            }
            assert!(img.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn all_size_buckets_populated() {
        let d = generate_synthetic(1, 1000, 128, 3, "t", Exec::Parallel).unwrap();
        let mut buckets = [0usize; 3];
        for r in &d.manifest.records {
            for b in r.boxes.as_ref().unwrap() {
                let a = b.bbox().area();
                let k = if a < 32.0 * 32.0 {
                    0
                } else if a <= 96.0 * 96.0 {
                    1
                } else {
                    2
                };
                buckets[k] += 1;
            }
        }
        assert!(buckets.iter().all(|&n| n > 0), "{buckets:?}");
    }
}
