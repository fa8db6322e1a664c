//! Average-precision evaluation: AP at IoU 0.40…0.75 (step 0.05), their mean,
//! and size-stratified AP with COCO area buckets.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::detection_order;
use crate::error::{Error, Result};
use crate::parallel::Exec;
use crate::types::{BoxF, Detection, GroundTruthBox};

/// The eight IoU thresholds averaged into mAP.
pub const IOU_THRESHOLDS: [f64; 8] = [0.40, 0.45, 0.50, 0.55, 0.60, 0.65, 0.70, 0.75];

/// COCO area cutoffs (pixels²) between small/medium and medium/large.
pub const SMALL_AREA: f64 = 32.0 * 32.0;
pub const LARGE_AREA: f64 = 96.0 * 96.0;

/// Capability required to read withheld ground truth. Only evaluation code should construct one.
#[derive(Debug)]
pub struct EvalToken(());

impl EvalToken {
    #[allow(clippy::new_without_default)]
    pub fn new() -> Self {
        EvalToken(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AreaRange {
    All,
    Small,
    Medium,
    Large,
}

impl AreaRange {
    pub fn bounds(self) -> (f64, f64) {
        match self {
            AreaRange::All => (0.0, f64::INFINITY),
            AreaRange::Small => (0.0, SMALL_AREA),
            AreaRange::Medium => (SMALL_AREA, LARGE_AREA),
            AreaRange::Large => (LARGE_AREA, f64::INFINITY),
        }
    }

    fn contains(self, area: f64) -> bool {
        let (lo, hi) = self.bounds();
        area >= lo && area <= hi
    }
}

/// IoU of two well-ordered boxes.
pub fn iou(a: &BoxF, b: &BoxF) -> Result<f64> {
    if !a.is_well_ordered() || !b.is_well_ordered() {
        return Err(Error::Invalid(format!("degenerate box in iou: {a:?} / {b:?}")));
    }
    Ok(a.iou(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MatchFlag {
    Tp,
    Fp,
    Ignored,
}

/// Greedy matching of one image's detections (already sorted) against ground truths.
/// Non-ignored ground truths are preferred; a detection that can only match an
/// ignored one, or is unmatched and outside the area range, is ignored.
fn match_sorted(dets: &[&Detection], gts: &[BoxF], gt_ignore: &[bool], thr: f64, range: AreaRange) -> Vec<MatchFlag> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let best = |want_ignored: bool, taken: &[bool]| -> Option<usize> {
                let mut best: Option<(usize, f64)> = None;
                for (g, gt) in gts.iter().enumerate() {
                    if taken[g] || gt_ignore[g] != want_ignored {
                        continue;
                    }
                    let v = d.bbox.iou(gt);
                    if v >= thr && best.is_none_or(|(_, b)| v > b) {
                        best = Some((g, v));
                    }
                }
                best.map(|(g, _)| g)
            };
            if let Some(g) = best(false, &taken) {
                taken[g] = true;
                MatchFlag::Tp
            } else if let Some(g) = best(true, &taken) {
                taken[g] = true;
                MatchFlag::Ignored
            } else if range.contains(d.bbox.area()) {
                MatchFlag::Fp
            } else {
                MatchFlag::Ignored
            }
        })
        .collect()
}

/// Greedy TP/FP flags for same-class detections against ground-truth boxes.
/// Detections are processed by descending score; flags follow input order.
pub fn match_detections(dets: &[Detection], gts: &[BoxF], iou_thresh: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| detection_order(&dets[a], &dets[b]));
    let sorted: Vec<&Detection> = order.iter().map(|&i| &dets[i]).collect();
    let flags = match_sorted(&sorted, gts, &vec![false; gts.len()], iou_thresh, AreaRange::All);
    let mut out = vec![false; dets.len()];
    for (k, &i) in order.iter().enumerate() {
        out[i] = flags[k] == MatchFlag::Tp;
    }
    out
}

/// All-point interpolated AP (area under the precision envelope).
/// With no ground truth: 1 if there are no detections, else 0.
pub fn average_precision(flags: &[bool], scores: &[f64], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return if flags.is_empty() { 1.0 } else { 0.0 };
    }
    let mut order: Vec<usize> = (0..flags.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let sorted: Vec<bool> = order.iter().map(|&i| flags[i]).collect();
    ap_from_sorted(&sorted, n_gt)
}

fn ap_from_sorted(flags: &[bool], n_gt: usize) -> f64 {
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    for (i, &f) in flags.iter().enumerate() {
        if f {
            tp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    ap
}

/// Detections and ground truth of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEval {
    pub image_id: String,
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<GroundTruthBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub thresholds: Vec<f64>,
    /// `[class][threshold]`; `None` for classes without ground truth.
    pub per_class_ap: Vec<Vec<Option<f64>>>,
    pub map: f64,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    pub gt_counts: Vec<usize>,
    pub det_counts: Vec<usize>,
}

impl EvalResult {
    /// Class-mean AP at threshold index `t`.
    pub fn ap_at(&self, t: usize) -> f64 {
        let vals: Vec<f64> = self.per_class_ap.iter().filter_map(|c| c[t]).collect();
        mean(&vals).unwrap_or(0.0)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["kind", "class_id", "iou_threshold", "value"])?;
        for (c, row) in self.per_class_ap.iter().enumerate() {
            for (t, ap) in row.iter().enumerate() {
                let v = ap.map(|v| format!("{v:.6}")).unwrap_or_default();
                w.write_record(["class_ap", &c.to_string(), &format!("{:.2}", self.thresholds[t]), &v])?;
            }
        }
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        let last = self.thresholds.len() - 1;
        for (name, v) in [
            ("mAP", Some(self.map)),
            ("AP40", Some(self.ap_at(0))),
            ("AP75", Some(self.ap_at(last))),
            ("APs", self.ap_small),
            ("APm", self.ap_medium),
            ("APl", self.ap_large),
        ] {
            w.write_record([name, "", "", &opt(v)])?;
        }
        w.flush().map_err(|e| Error::io("writing eval csv", e))?;
        Ok(())
    }

    /// Human-readable table.
    pub fn table(&self) -> String {
        let pct = |v: Option<f64>| v.map(|v| format!("{:5.1}", 100.0 * v)).unwrap_or_else(|| "    -".into());
        let mut s = String::from("class   n_gt  n_det ");
        for t in &self.thresholds {
            s.push_str(&format!(" AP{:<3.0}", t * 100.0));
        }
        s.push('\n');
        for (c, row) in self.per_class_ap.iter().enumerate() {
            s.push_str(&format!("{c:<6} {:5} {:6} ", self.gt_counts[c], self.det_counts[c]));
            for v in row {
                s.push_str(&format!(" {}", pct(*v)));
            }
            s.push('\n');
        }
        let last = self.thresholds.len() - 1;
        s.push_str(&format!(
            "mAP {} | AP40 {} | AP75 {} | APs {} | APm {} | APl {}\n",
            pct(Some(self.map)),
            pct(Some(self.ap_at(0))),
            pct(Some(self.ap_at(last))),
            pct(self.ap_small),
            pct(self.ap_medium),
            pct(self.ap_large)
        ));
        s
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// AP for one class, threshold and area range, pooled over images.
/// Returns `None` when the range holds no ground truth of that class.
fn class_ap(images: &[&ImageEval], class: usize, thr: f64, range: AreaRange) -> Option<f64> {
    let mut n_gt = 0;
    let mut pooled: Vec<(f64, &str, BoxF, bool)> = Vec::new();
    for img in images {
        let gts: Vec<BoxF> = img
            .ground_truth
            .iter()
            .filter(|g| g.class_id == class)
            .map(|g| g.bbox())
            .collect();
        let ignore: Vec<bool> = gts.iter().map(|g| !range.contains(g.area())).collect();
        n_gt += ignore.iter().filter(|&&i| !i).count();
        let mut dets: Vec<&Detection> = img.detections.iter().filter(|d| d.class_id == class).collect();
        dets.sort_by(|a, b| detection_order(a, b));
        let flags = match_sorted(&dets, &gts, &ignore, thr, range);
        for (d, f) in dets.iter().zip(flags) {
            if f != MatchFlag::Ignored {
                pooled.push((d.score, &img.image_id, d.bbox, f == MatchFlag::Tp));
            }
        }
    }
    if n_gt == 0 {
        return None;
    }
    pooled.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then_with(|| a.1.cmp(b.1))
            .then(a.2.x_min.total_cmp(&b.2.x_min))
            .then(a.2.y_min.total_cmp(&b.2.y_min))
            .then(a.2.x_max.total_cmp(&b.2.x_max))
            .then(a.2.y_max.total_cmp(&b.2.y_max))
            .then(a.3.cmp(&b.3).reverse())
    });
    let flags: Vec<bool> = pooled.iter().map(|p| p.3).collect();
    Some(ap_from_sorted(&flags, n_gt))
}

/// Scores detections against ground truth for every class and threshold.
pub fn evaluate(images: &[ImageEval], num_classes: usize, exec: Exec) -> Result<EvalResult> {
    for img in images {
        for c in img
            .detections
            .iter()
            .map(|d| d.class_id)
            .chain(img.ground_truth.iter().map(|g| g.class_id))
        {
            if c >= num_classes {
                return Err(Error::UnknownClass {
                    class_id: c,
                    num_classes,
                });
            }
        }
    }
    let mut sorted: Vec<&ImageEval> = images.iter().collect();
    sorted.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let ranges = [AreaRange::All, AreaRange::Small, AreaRange::Medium, AreaRange::Large];
    let nt = IOU_THRESHOLDS.len();
    let jobs: Vec<(usize, usize, usize)> = (0..ranges.len())
        .flat_map(|r| (0..num_classes).flat_map(move |c| (0..nt).map(move |t| (r, c, t))))
        .collect();
    let aps = exec.map(&jobs, |&(r, c, t)| class_ap(&sorted, c, IOU_THRESHOLDS[t], ranges[r]));
    let at = |r: usize, c: usize, t: usize| aps[(r * num_classes + c) * nt + t];

    let per_class_ap: Vec<Vec<Option<f64>>> = (0..num_classes).map(|c| (0..nt).map(|t| at(0, c, t)).collect()).collect();
    let bucket = |r: usize| -> Option<f64> {
        let class_means: Vec<f64> = (0..num_classes)
            .filter_map(|c| {
                let v: Vec<f64> = (0..nt).filter_map(|t| at(r, c, t)).collect();
                mean(&v)
            })
            .collect();
        mean(&class_means)
    };
    let mut gt_counts = vec![0; num_classes];
    let mut det_counts = vec![0; num_classes];
    for img in images {
        for g in &img.ground_truth {
            gt_counts[g.class_id] += 1;
        }
        for d in &img.detections {
            det_counts[d.class_id] += 1;
        }
    }
    Ok(EvalResult {
        thresholds: IOU_THRESHOLDS.to_vec(),
        map: bucket(0).unwrap_or(0.0),
        ap_small: bucket(1),
        ap_medium: bucket(2),
        ap_large: bucket(3),
        per_class_ap,
        gt_counts,
        det_counts,
    })
}

/// One line of a detections file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub class_id: usize,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub score: f64,
}

impl DetectionRecord {
    pub fn new(image_id: &str, d: &Detection) -> Self {
        DetectionRecord {
            image_id: image_id.to_string(),
            class_id: d.class_id,
            x_min: d.bbox.x_min,
            y_min: d.bbox.y_min,
            x_max: d.bbox.x_max,
            y_max: d.bbox.y_max,
            score: d.score,
        }
    }

    pub fn detection(&self) -> Detection {
        Detection {
            bbox: BoxF::new(self.x_min, self.y_min, self.x_max, self.y_max),
            class_id: self.class_id,
            score: self.score,
        }
    }
}

pub fn write_detections(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r)?).map_err(|e| Error::io("writing detections", e))?;
    }
    w.flush().map_err(|e| Error::io("writing detections", e))?;
    Ok(())
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    let f = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io("reading detections", e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(b: [f64; 4], c: usize, s: f64) -> Detection {
        Detection {
            bbox: BoxF::new(b[0], b[1], b[2], b[3]),
            class_id: c,
            score: s,
        }
    }

    #[test]
    fn iou_examples() {
        let a = BoxF::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &BoxF::new(3.0, 3.0, 4.0, 4.0)).unwrap(), 0.0);
        assert!((iou(&a, &BoxF::new(1.0, 1.0, 3.0, 3.0)).unwrap() - 1.0 / 7.0).abs() < 1e-12);
        assert!(iou(&a, &BoxF::new(1.0, 1.0, 1.0, 3.0)).is_err());
    }

    #[test]
    fn matching_examples() {
        let g = [BoxF::new(0.0, 0.0, 10.0, 10.0)];
        assert_eq!(match_detections(&[det([0.0, 0.0, 10.0, 10.0], 0, 0.9)], &g, 0.5), vec![true]);
        let two = [det([0.0, 0.0, 10.0, 10.0], 0, 0.6), det([0.0, 0.0, 10.0, 9.0], 0, 0.9)];
        assert_eq!(match_detections(&two, &g, 0.5), vec![false, true]);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true, true], &[0.9, 0.8], 2), 1.0);
        assert_eq!(average_precision(&[], &[], 3), 0.0);
        let ap = average_precision(&[true, false, true], &[0.9, 0.8, 0.7], 2);
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(average_precision(&[], &[], 0), 1.0);
        assert_eq!(average_precision(&[false], &[0.5], 0), 0.0);
    }

    fn gtb(b: [f64; 4], c: usize) -> GroundTruthBox {
        GroundTruthBox::new(BoxF::new(b[0], b[1], b[2], b[3]), c)
    }

    #[test]
    fn perfect_and_empty() {
        let gts = vec![gtb([0.0, 0.0, 20.0, 20.0], 0), gtb([30.0, 30.0, 80.0, 80.0], 1), gtb([0.0, 0.0, 120.0, 110.0], 1)];
        let perfect = ImageEval {
            image_id: "a".into(),
            detections: gts.iter().map(|g| det([g.x_min, g.y_min, g.x_max, g.y_max], g.class_id, 0.9)).collect(),
            ground_truth: gts.clone(),
        };
        let r = evaluate(&[perfect], 3, Exec::Parallel).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!((r.ap_small, r.ap_medium, r.ap_large), (Some(1.0), Some(1.0), Some(1.0)));
        assert!(r.per_class_ap[2].iter().all(Option::is_none));
        let empty = ImageEval {
            image_id: "a".into(),
            detections: vec![],
            ground_truth: gts,
        };
        assert_eq!(evaluate(&[empty], 3, Exec::Parallel).unwrap().map, 0.0);
    }

    #[test]
    fn unknown_class_rejected() {
        let img = ImageEval {
            image_id: "a".into(),
            detections: vec![det([0.0, 0.0, 1.0, 1.0], 5, 0.5)],
            ground_truth: vec![],
        };
        assert!(matches!(evaluate(&[img], 3, Exec::Sequential), Err(Error::UnknownClass { .. })));
    }

    #[test]
    fn detections_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let recs = vec![DetectionRecord::new("x", &det([1.0, 2.0, 3.5, 4.25], 1, 0.123456789))];
        write_detections(&p, &recs).unwrap();
        assert_eq!(read_detections(&p).unwrap(), recs);
    }
}
