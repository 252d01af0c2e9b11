//! Detection evaluation: IOU matching, precision-recall curves, average
//! precision, and the small classification backbone used by the detector.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::image::{BoundingBox, DatasetManifest, Image};
use crate::nn::{Conv2d, Layer, Linear, MaxPool2d, PadMode, Sequential};
use crate::tensor::FeatureMap;

/// IOU at or above which a detection counts as correct.
pub const IOU_THRESHOLD: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRecord {
    pub image_id: String,
    pub bbox: BoundingBox,
    pub score: f64,
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        (inter / union).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// True positive flag per detection, in input order.
    pub is_tp: Vec<bool>,
    pub gt_matched: Vec<bool>,
}

/// Descending score, ties in input order.
fn score_order(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let s: Vec<f64> = scores.collect();
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    idx
}

/// Greedy matching for one image: in descending score order each detection
/// takes its best unmatched ground-truth box if their IOU reaches
/// `threshold`.
pub fn match_detections(dets: &[DetectionRecord], gts: &[BoundingBox], threshold: f64) -> MatchResult {
    let mut is_tp = vec![false; dets.len()];
    let mut gt_matched = vec![false; gts.len()];
    for i in score_order(dets.iter().map(|d| d.score)) {
        let best = gts
            .iter()
            .enumerate()
            .filter(|(j, _)| !gt_matched[*j])
            .map(|(j, g)| (j, iou(&dets[i].bbox, g)))
            .fold(None, |acc: Option<(usize, f64)>, (j, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((j, v)),
            });
        if let Some((j, v)) = best {
            if v >= threshold {
                gt_matched[j] = true;
                is_tp[i] = true;
            }
        }
    }
    MatchResult { is_tp, gt_matched }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    /// One point per distinct score, highest threshold first.
    pub points: Vec<PrPoint>,
    pub ap: f64,
}

/// Area under the precision envelope of points ordered by recall.
pub fn all_point_ap(points: &[PrPoint]) -> f64 {
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, p) in points.iter().enumerate() {
        let envelope = points[i..].iter().map(|q| q.precision).fold(0.0, f64::max);
        ap += (p.recall - prev_recall) * envelope;
        prev_recall = p.recall;
    }
    ap.clamp(0.0, 1.0)
}

/// Precision and recall at every distinct score over all images. Ground
/// truth is keyed by image id.
pub fn pr_curve(dets: &[DetectionRecord], gts: &BTreeMap<String, Vec<BoundingBox>>) -> Result<PrCurve> {
    pr_curve_at(dets, gts, IOU_THRESHOLD)
}

/// [`pr_curve`] with a custom IOU threshold.
pub fn pr_curve_at(
    dets: &[DetectionRecord],
    gts: &BTreeMap<String, Vec<BoundingBox>>,
    threshold: f64,
) -> Result<PrCurve> {
    let total_gt: usize = gts.values().map(Vec::len).sum();
    if total_gt == 0 {
        return Err(Error::Eval("no ground-truth boxes; average precision is undefined".into()));
    }
    let mut per_image: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        per_image.entry(d.image_id.as_str()).or_default().push(i);
    }
    let mut is_tp = vec![false; dets.len()];
    for (id, idx) in &per_image {
        let image_dets: Vec<DetectionRecord> = idx.iter().map(|&i| dets[i].clone()).collect();
        let empty = Vec::new();
        let m = match_detections(&image_dets, gts.get(*id).unwrap_or(&empty), threshold);
        for (k, &i) in idx.iter().enumerate() {
            is_tp[i] = m.is_tp[k];
        }
    }

    let order = score_order(dets.iter().map(|d| d.score));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (pos, &i) in order.iter().enumerate() {
        if is_tp[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_score = order.get(pos + 1).is_none_or(|&j| dets[j].score != dets[i].score);
        if last_of_score {
            points.push(PrPoint {
                threshold: dets[i].score,
                precision: tp as f64 / (tp + fp) as f64,
                recall: tp as f64 / total_gt as f64,
            });
        }
    }
    let ap = all_point_ap(&points);
    Ok(PrCurve { points, ap })
}

fn detections_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Detections {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

#[derive(Deserialize)]
struct DetectionRow {
    image_id: String,
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
    score: f64,
}

/// Reads `image_id,x_min,y_min,x_max,y_max,score` rows.
pub fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| detections_err(path, e.to_string()))?;
    let mut out = Vec::new();
    for (n, row) in rdr.deserialize::<DetectionRow>().enumerate() {
        let row = row.map_err(|e| detections_err(path, e.to_string()))?;
        let line = n + 2;
        if !(0.0..=1.0).contains(&row.score) {
            return Err(detections_err(path, format!("line {line}: score {} outside [0, 1]", row.score)));
        }
        let bbox = BoundingBox::new(row.x_min, row.y_min, row.x_max, row.y_max, 0)
            .map_err(|e| detections_err(path, format!("line {line}: {e}")))?;
        out.push(DetectionRecord {
            image_id: row.image_id,
            bbox,
            score: row.score,
        });
    }
    Ok(out)
}

/// Ground truth keyed by manifest path, with detection image ids resolved
/// against it: exact path first, then file name, then file stem.
pub fn resolve_ground_truth(
    manifest: &DatasetManifest,
    dets: &[DetectionRecord],
) -> Result<(BTreeMap<String, Vec<BoundingBox>>, Vec<DetectionRecord>)> {
    let mut gts = BTreeMap::new();
    let mut by_key: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for e in &manifest.content {
        let full = e.path.to_string_lossy().into_owned();
        gts.insert(full.clone(), e.boxes.clone());
        let name = e.path.file_name().map(|s| s.to_string_lossy().into_owned());
        let stem = e.path.file_stem().map(|s| s.to_string_lossy().into_owned());
        for key in [name, stem].into_iter().flatten() {
            by_key.entry(key).or_default().push(full.clone());
        }
    }
    let mut resolved = Vec::with_capacity(dets.len());
    for d in dets {
        let id = if gts.contains_key(&d.image_id) {
            d.image_id.clone()
        } else {
            match by_key.get(&d.image_id).map(Vec::as_slice) {
                Some([one]) => one.clone(),
                Some(_) => return Err(Error::Eval(format!("image_id {:?} is ambiguous", d.image_id))),
                None => return Err(Error::Eval(format!("image_id {:?} is not in the manifest", d.image_id))),
            }
        };
        resolved.push(DetectionRecord { image_id: id, ..d.clone() });
    }
    Ok((gts, resolved))
}

pub fn write_pr_csv(curve: &PrCurve, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Eval(e.to_string());
    w.write_record(["threshold", "precision", "recall"]).map_err(err)?;
    for p in &curve.points {
        w.write_record([p.threshold.to_string(), p.precision.to_string(), p.recall.to_string()])
            .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Eval(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn write_ap_json(curve: &PrCurve, path: &Path) -> Result<()> {
    let doc = serde_json::json!({ "ap": curve.ap });
    write_atomic(path, format!("{}\n", serde_json::to_string_pretty(&doc).expect("json")).as_bytes())
}

/// Classification head of the detector.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorBackbone {
    pub net: Sequential,
    /// `(layer kind, output shape)` for a 32x32x3 input.
    pub shapes: Vec<(String, (usize, usize, usize))>,
}

pub const BACKBONE_INPUT: (usize, usize, usize) = (3, 32, 32);

pub fn build_detector_backbone(seed: u64) -> DetectorBackbone {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = || Layer::MaxPool(MaxPool2d { kernel: 3, stride: 2, padding: 1 });
    let layers = vec![
        Layer::Conv(Conv2d::same(3, 32, 5, PadMode::Zero).init(&mut rng)),
        Layer::Relu,
        pool(),
        Layer::Conv(Conv2d::same(32, 64, 3, PadMode::Zero).init(&mut rng)),
        Layer::Relu,
        pool(),
        Layer::Conv(Conv2d::same(64, 32, 3, PadMode::Zero).init(&mut rng)),
        Layer::Relu,
        pool(),
        Layer::Flatten,
        Layer::Linear(Linear::new(32 * 4 * 4, 200).init(&mut rng)),
        Layer::Relu,
        Layer::Linear(Linear::new(200, 2).init(&mut rng)),
        Layer::Softmax,
    ];
    let net = Sequential::new(layers);
    let (c, h, w) = BACKBONE_INPUT;
    let keep: Vec<usize> = (0..net.len()).collect();
    let pass = net
        .run(&FeatureMap::zeros(c, h, w), &keep, false)
        .expect("backbone accepts its input size");
    let shapes = net
        .layers
        .iter()
        .zip(&pass.kept)
        .map(|(l, f)| (l.kind().to_string(), f.shape()))
        .collect();
    DetectorBackbone { net, shapes }
}

impl DetectorBackbone {
    /// Class probabilities for a 32x32 image.
    pub fn forward(&self, img: &Image) -> Result<Vec<f64>> {
        let (_, h, w) = BACKBONE_INPUT;
        if img.width() != w || img.height() != h {
            return Err(Error::Shape(format!(
                "backbone input must be {w}x{h}, got {}x{}",
                img.width(),
                img.height()
            )));
        }
        Ok(self.net.forward(&FeatureMap::from_image(&img.to_rgb()))?.into_data())
    }

    pub fn shape_report(&self) -> String {
        let (c, h, w) = BACKBONE_INPUT;
        let mut s = format!("input {h}x{w}x{c}\n");
        for (kind, (c, h, w)) in &self.shapes {
            s.push_str(&format!("{kind} {h}x{w}x{c}\n"));
        }
        s
    }
}
