use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetManifest, HiddenTruth, SampleRecord};
use crate::error::{Error, Result};
use crate::types::{GroundTruthBox, Image};

const MANIFEST: &str = "manifest.jsonl";
const META: &str = "meta.json";
const HIDDEN: &str = "hidden.jsonl";

#[derive(Serialize, Deserialize)]
struct Meta {
    split: String,
    seed: u64,
    num_classes: usize,
    image_size: usize,
}

#[derive(Serialize, Deserialize)]
struct HiddenRecord {
    id: String,
    boxes: Vec<GroundTruthBox>,
}

fn io_err(ctx: &str, path: &Path) -> impl FnOnce(std::io::Error) -> Error {
    let context = format!("{ctx} {}", path.display());
    move |e| Error::io(context, e)
}

fn save_png(img: &Image, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::save_buffer(path, &bytes, img.width as u32, img.height as u32, image::ExtendedColorType::L8)?;
    Ok(())
}

fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path)?.to_luma8();
    Ok(Image {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img.as_raw().iter().map(|&b| b as f64 / 255.0).collect(),
    })
}

/// Writes images as 8-bit PNG, one manifest line per sample, and the sidecar.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir.join("images")).map_err(io_err("creating", dir))?;
    let m = &dataset.manifest;
    let meta = Meta {
        split: m.split.clone(),
        seed: m.seed,
        num_classes: m.num_classes,
        image_size: m.image_size,
    };
    fs::write(dir.join(META), serde_json::to_string_pretty(&meta)?).map_err(io_err("writing", &dir.join(META)))?;
    let path = dir.join(MANIFEST);
    let mut w = BufWriter::new(File::create(&path).map_err(io_err("creating", &path))?);
    for (rec, img) in m.records.iter().zip(&dataset.images) {
        writeln!(w, "{}", serde_json::to_string(rec)?).map_err(io_err("writing", &path))?;
        save_png(img, &dir.join(&rec.path))?;
    }
    w.flush().map_err(io_err("writing", &path))?;
    let path = dir.join(HIDDEN);
    let mut w = BufWriter::new(File::create(&path).map_err(io_err("creating", &path))?);
    for (id, boxes) in dataset.hidden.entries_for_storage() {
        let rec = HiddenRecord {
            id: id.clone(),
            boxes: boxes.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&rec)?).map_err(io_err("writing", &path))?;
    }
    w.flush().map_err(io_err("writing", &path))?;
    Ok(())
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(io_err("opening", path))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(io_err("reading", path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join(META);
    let meta: Meta = serde_json::from_str(&fs::read_to_string(&meta_path).map_err(io_err("reading", &meta_path))?)?;
    let records: Vec<SampleRecord> = read_lines(&dir.join(MANIFEST))?;
    let images = records
        .iter()
        .map(|r| load_png(&dir.join(&r.path)))
        .collect::<Result<Vec<_>>>()?;
    let hidden_path = dir.join(HIDDEN);
    let hidden = if hidden_path.exists() {
        read_lines::<HiddenRecord>(&hidden_path)?
            .into_iter()
            .map(|h| (h.id, h.boxes))
            .collect()
    } else {
        BTreeMap::new()
    };
    Ok(Dataset {
        manifest: DatasetManifest {
            split: meta.split,
            seed: meta.seed,
            num_classes: meta.num_classes,
            image_size: meta.image_size,
            records,
        },
        images,
        hidden: HiddenTruth::new(hidden),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{assign_granularity, generate_synthetic};
    use crate::evaluation::EvalToken;
    use crate::parallel::Exec;

    #[test]
    fn write_read_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_synthetic(3, 8, 64, 3, "train", Exec::Parallel).unwrap();
        let (m, hidden) = assign_granularity(&d.manifest, [0.25, 0.5, 0.25], 2).unwrap();
        let d = Dataset {
            manifest: m,
            images: d.images,
            hidden,
        };
        write_dataset(dir.path(), &d).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.manifest, d.manifest);
        assert_eq!(back.images, d.images);
        let t = EvalToken::new();
        assert_eq!(back.hidden.reveal(&t), d.hidden.reveal(&t));
        let text = std::fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert_eq!(text.lines().count(), 8);
    }
}
