//! Precision/recall based metrics: per-class AP with all-points
//! interpolation, mAP, the COCO-style threshold sweep with size buckets,
//! and average recall.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::AnnotationRecord;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

/// One scored box, also the record type of detection dumps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    pub image_id: usize,
    pub class: usize,
    pub score: f32,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

/// IoU thresholds of the COCO-style sweep: `0.50, 0.55, ..., 0.95`.
pub fn coco_thresholds() -> Vec<f32> {
    (0..10).map(|i| 0.5 + 0.05 * i as f32).collect()
}

/// Ground-truth area cutoffs `(small_max, large_min)` in square pixels.
pub const DEFAULT_AREA_CUTOFFS: (f32, f32) = (16.0 * 16.0, 48.0 * 48.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

impl SizeBucket {
    pub fn of(area: f32, cutoffs: (f32, f32)) -> SizeBucket {
        if area < cutoffs.0 {
            SizeBucket::Small
        } else if area <= cutoffs.1 {
            SizeBucket::Medium
        } else {
            SizeBucket::Large
        }
    }
}

/// Matching outcome of one ranked detection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Outcome {
    Tp,
    Fp,
    Ignored,
}

struct Matched {
    outcomes: Vec<Outcome>,
    num_pos: usize,
}

/// Greedy matching of `class` detections in descending score order to the
/// best still-unmatched ground truth of the same image with IoU >= `thr`.
/// With `bucket`, ground truths outside it are ignored, as are unmatched
/// detections outside it.
fn match_class(
    dets: &[Detection],
    gts: &[AnnotationRecord],
    class: usize,
    thr: f32,
    bucket: Option<(SizeBucket, (f32, f32))>,
    max_per_image: Option<usize>,
) -> Matched {
    let in_bucket = |b: &BBox| bucket.map_or(true, |(k, cut)| SizeBucket::of(b.area(), cut) == k);
    let mut by_image: HashMap<usize, Vec<(BBox, bool, bool)>> = HashMap::new();
    let mut num_pos = 0;
    for g in gts.iter().filter(|g| g.class == class) {
        let ignore = !in_bucket(&g.bbox);
        num_pos += usize::from(!ignore);
        by_image.entry(g.image_id).or_default().push((g.bbox, ignore, false));
    }
    let mut order: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].class == class).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    if let Some(k) = max_per_image {
        let mut seen: HashMap<usize, usize> = HashMap::new();
        order.retain(|&i| {
            let n = seen.entry(dets[i].image_id).or_default();
            *n += 1;
            *n <= k
        });
    }
    let mut outcomes = Vec::with_capacity(order.len());
    for i in order {
        let d = &dets[i];
        let mut best: Option<(usize, f32, bool)> = None;
        if let Some(cands) = by_image.get(&d.image_id) {
            for (j, (g, ignore, used)) in cands.iter().enumerate() {
                if *used {
                    continue;
                }
                let v = iou(&d.bbox, g);
                if v < thr {
                    continue;
                }
                // prefer counted ground truths over ignored ones, then higher IoU
                let better = match best {
                    None => true,
                    Some((_, bv, bi)) => (bi && !ignore) || (bi == *ignore && v > bv),
                };
                if better {
                    best = Some((j, v, *ignore));
                }
            }
        }
        let outcome = match best {
            Some((j, _, ignore)) => {
                by_image.get_mut(&d.image_id).expect("candidate image")[j].2 = true;
                if ignore {
                    Outcome::Ignored
                } else {
                    Outcome::Tp
                }
            }
            None if !in_bucket(&d.bbox) => Outcome::Ignored,
            None => Outcome::Fp,
        };
        outcomes.push(outcome);
    }
    Matched { outcomes, num_pos }
}

/// Area under the precision/recall curve with precision replaced by its
/// running maximum from the right.
pub fn ap_from_ranked(is_tp: &[bool], num_pos: usize) -> Option<f32> {
    if num_pos == 0 {
        return None;
    }
    let mut recall = Vec::with_capacity(is_tp.len());
    let mut precision = Vec::with_capacity(is_tp.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &t in is_tp {
        if t {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_pos as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0f64;
    let mut prev_r = 0.0f64;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    Some(ap as f32)
}

fn ap_of(m: &Matched) -> Option<f32> {
    let ranked: Vec<bool> = m
        .outcomes
        .iter()
        .filter(|o| **o != Outcome::Ignored)
        .map(|o| *o == Outcome::Tp)
        .collect();
    ap_from_ranked(&ranked, m.num_pos)
}

/// AP of one class; `None` when the class has no ground truth.
pub fn voc_ap(dets: &[Detection], gts: &[AnnotationRecord], class: usize, iou_thresh: f32) -> Option<f32> {
    ap_of(&match_class(dets, gts, class, iou_thresh, None, None))
}

/// Arithmetic mean of the defined APs.
pub fn mean_ap(aps: &[Option<f32>]) -> Option<f32> {
    let defined: Vec<f32> = aps.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f32>() / defined.len() as f32)
}

/// Per-class APs at one threshold.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub iou_threshold: f32,
    /// `(class, AP)` for classes `1..=num_classes`.
    pub per_class: Vec<(usize, Option<f32>)>,
    pub map: Option<f32>,
}

pub fn evaluate(dets: &[Detection], gts: &[AnnotationRecord], num_classes: usize, iou_thresh: f32) -> EvalReport {
    let per_class: Vec<_> = (1..=num_classes)
        .map(|c| (c, voc_ap(dets, gts, c, iou_thresh)))
        .collect();
    let aps: Vec<_> = per_class.iter().map(|(_, a)| *a).collect();
    EvalReport {
        iou_threshold: iou_thresh,
        map: mean_ap(&aps),
        per_class,
    }
}

/// COCO-style summary.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CocoReport {
    pub thresholds: Vec<f32>,
    /// mAP at each threshold.
    pub map_per_threshold: Vec<Option<f32>>,
    /// Mean of the per-threshold mAPs.
    pub map: Option<f32>,
    pub small: Option<f32>,
    pub medium: Option<f32>,
    pub large: Option<f32>,
    /// Average recall with at most 1, 10 and 100 detections per image and class.
    pub ar: [Option<f32>; 3],
}

fn sweep(
    dets: &[Detection],
    gts: &[AnnotationRecord],
    num_classes: usize,
    thresholds: &[f32],
    bucket: Option<(SizeBucket, (f32, f32))>,
) -> Vec<Option<f32>> {
    thresholds
        .iter()
        .map(|&t| {
            let aps: Vec<_> = (1..=num_classes)
                .map(|c| ap_of(&match_class(dets, gts, c, t, bucket, None)))
                .collect();
            mean_ap(&aps)
        })
        .collect()
}

fn mean_defined(v: &[Option<f32>]) -> Option<f32> {
    mean_ap(v)
}

fn average_recall(
    dets: &[Detection],
    gts: &[AnnotationRecord],
    num_classes: usize,
    thresholds: &[f32],
    k: usize,
) -> Option<f32> {
    let mut recalls = Vec::new();
    for &t in thresholds {
        for c in 1..=num_classes {
            let m = match_class(dets, gts, c, t, None, Some(k));
            if m.num_pos > 0 {
                let tp = m.outcomes.iter().filter(|o| **o == Outcome::Tp).count();
                recalls.push(Some(tp as f32 / m.num_pos as f32));
            }
        }
    }
    mean_ap(&recalls)
}

/// mAP averaged over `thresholds`, plus size-bucketed mAP and AR@{1,10,100}.
pub fn coco_sweep_with(
    dets: &[Detection],
    gts: &[AnnotationRecord],
    num_classes: usize,
    thresholds: &[f32],
    cutoffs: (f32, f32),
) -> CocoReport {
    let map_per_threshold = sweep(dets, gts, num_classes, thresholds, None);
    let bucket = |b| mean_defined(&sweep(dets, gts, num_classes, thresholds, Some((b, cutoffs))));
    CocoReport {
        thresholds: thresholds.to_vec(),
        map: mean_defined(&map_per_threshold),
        map_per_threshold,
        small: bucket(SizeBucket::Small),
        medium: bucket(SizeBucket::Medium),
        large: bucket(SizeBucket::Large),
        ar: [1, 10, 100].map(|k| average_recall(dets, gts, num_classes, thresholds, k)),
    }
}

/// [`coco_sweep_with`] over the ten standard thresholds and default cutoffs.
pub fn coco_sweep(dets: &[Detection], gts: &[AnnotationRecord], num_classes: usize) -> CocoReport {
    coco_sweep_with(dets, gts, num_classes, &coco_thresholds(), DEFAULT_AREA_CUTOFFS)
}

/// Writes one JSON object per line.
pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for d in dets {
        serde_json::to_writer(&mut out, d)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let d: Detection =
            serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        if !(0.0..=1.0).contains(&d.score) || !d.bbox.is_valid() {
            return Err(Error::format(
                path,
                format!("line {}: score or box out of range", i + 1),
            ));
        }
        out.push(d);
    }
    Ok(out)
}

/// Plain-text table of per-class AP and mAP.
pub fn format_report(report: &EvalReport, class_names: &[&str]) -> String {
    let mut s = format!("IoU threshold {:.2}\n", report.iou_threshold);
    for (c, ap) in &report.per_class {
        let name = class_names.get(c.wrapping_sub(1)).copied().unwrap_or("?");
        match ap {
            Some(ap) => s.push_str(&format!("{c:>3} {name:<10} AP {ap:.3}\n")),
            None => s.push_str(&format!("{c:>3} {name:<10} AP   n/a\n")),
        }
    }
    match report.map {
        Some(m) => s.push_str(&format!("mAP {m:.3}\n")),
        None => s.push_str("mAP n/a\n"),
    }
    s
}
