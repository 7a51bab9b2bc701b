//! Image-level pedestrian detection from the window classifier: image
//! pyramid, sliding windows, non-maximum suppression, and PASCAL-style
//! average precision.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{crop, resize_bilinear};
use crate::model::{ModelWeights, PEDESTRIAN, POSITIVE};
use crate::tensor::Tensor;

/// Axis-aligned box, top-left corner plus extent, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) && self.w > 0.0 && self.h > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    /// Positive-class softmax score.
    pub score: f64,
}

/// Intersection over union, 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let ih = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).min(1.0)
    }
}

#[derive(Debug, Clone)]
pub struct PyramidLevel {
    /// Multiply level coordinates by this to get source coordinates.
    pub scale: f64,
    pub image: Tensor,
}

/// Successively downscaled copies of `image`. Level `k` is
/// `floor(H / f^k) x floor(W / f^k)`; generation stops before either side
/// falls below `min_size = (height, width)`.
pub fn image_pyramid(image: &Tensor, scale_factor: f64, min_size: (usize, usize)) -> Result<Vec<PyramidLevel>> {
    if !(scale_factor > 1.0 && scale_factor.is_finite()) {
        return Err(Error::Argument(format!("pyramid scale factor must be > 1, got {scale_factor}")));
    }
    let (_, h, w) = image.chw()?;
    let mut levels = Vec::new();
    for k in 0.. {
        let scale = scale_factor.powi(k);
        let lh = (h as f64 / scale).floor() as usize;
        let lw = (w as f64 / scale).floor() as usize;
        if lh < min_size.0 || lw < min_size.1 || lh == 0 || lw == 0 {
            break;
        }
        let level = if k == 0 { image.clone() } else { resize_bilinear(image, lh, lw)? };
        levels.push(PyramidLevel { scale, image: level });
    }
    Ok(levels)
}

/// Every fully contained `window = (height, width)` crop at the given
/// stride, row-major, with its box in level coordinates.
pub fn sliding_windows(level: &Tensor, window: (usize, usize), stride: usize) -> Result<Vec<(BBox, Tensor)>> {
    if stride == 0 {
        return Err(Error::Argument("window stride must be >= 1".into()));
    }
    let (_, h, w) = level.chw()?;
    let (wh, ww) = window;
    if h < wh || w < ww {
        return Ok(Vec::new());
    }
    let mut out = Vec::with_capacity(((h - wh) / stride + 1) * ((w - ww) / stride + 1));
    for y in (0..=h - wh).step_by(stride) {
        for x in (0..=w - ww).step_by(stride) {
            let bbox = BBox::new(x as f64, y as f64, ww as f64, wh as f64);
            out.push((bbox, crop(level, x, y, ww, wh)?));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectParams {
    pub scale_factor: f64,
    pub stride: usize,
    /// Windows must score strictly above this to be kept.
    pub score_floor: f64,
    pub nms_iou: f64,
}

impl Default for DetectParams {
    fn default() -> Self {
        DetectParams {
            scale_factor: 1.2,
            stride: 16,
            score_floor: 0.5,
            nms_iou: 0.5,
        }
    }
}

/// Scores every pyramid window with the pedestrian classifier and returns
/// the NMS survivors in descending score order, in source coordinates.
pub fn detect(weights: &ModelWeights, image: &Tensor, params: &DetectParams) -> Result<Vec<Detection>> {
    weights.expect_model(PEDESTRIAN)?;
    let [_, wh, ww] = weights.spec().input_shape();
    let (_, img_h, img_w) = image.chw()?;
    let mut candidates = Vec::new();
    for level in image_pyramid(image, params.scale_factor, (wh, ww))? {
        for (bbox, window) in sliding_windows(&level.image, (wh, ww), params.stride)? {
            let score = weights.predict(&window)?.data()[POSITIVE];
            if score > params.score_floor {
                candidates.push(Detection {
                    bbox: to_source(&bbox, level.scale, img_w as f64, img_h as f64),
                    score,
                });
            }
        }
    }
    Ok(nms(&candidates, params.nms_iou))
}

fn to_source(b: &BBox, scale: f64, img_w: f64, img_h: f64) -> BBox {
    let x = (b.x * scale).min(img_w);
    let y = (b.y * scale).min(img_h);
    let x2 = ((b.x + b.w) * scale).min(img_w);
    let y2 = ((b.y + b.h) * scale).min(img_h);
    BBox::new(x, y, x2 - x, y2 - y)
}

/// Frame-level pedestrian score: the best surviving detection, 0 if none.
pub fn frame_score(detections: &[Detection]) -> f64 {
    detections.iter().map(|d| d.score).fold(0.0, f64::max)
}

/// Indices kept by greedy NMS, in keep order. Score ties go to the earlier
/// input.
pub fn nms_indices(detections: &[Detection], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score));
    let mut suppressed = vec![false; detections.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&detections[i].bbox, &detections[j].bbox) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Greedy non-maximum suppression: discards every detection overlapping a
/// higher-scored survivor by IoU strictly above `iou_threshold`.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    nms_indices(detections, iou_threshold).into_iter().map(|i| detections[i]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: Option<f64>,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApResult {
    pub ap: f64,
    /// One point per ranked detection, in descending score order.
    pub curve: Vec<PrPoint>,
    pub true_positives: usize,
    pub false_positives: usize,
    pub ground_truths: usize,
}

/// Outcome of ranking and matching detections against ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedMatch {
    /// `(score, is_true_positive)` in rank order.
    pub ranked: Vec<(f64, bool)>,
    pub ground_truths: usize,
}

/// Ranks detections from all images by descending score (stable in input
/// order) and matches each to the highest-IoU still-unmatched ground truth
/// of its image when that IoU is at least `match_iou`.
pub fn match_detections(detections: &[Vec<Detection>], ground_truth: &[Vec<BBox>], match_iou: f64) -> Result<RankedMatch> {
    if detections.len() != ground_truth.len() {
        return Err(Error::Argument(format!(
            "{} detection lists for {} ground-truth lists",
            detections.len(),
            ground_truth.len()
        )));
    }
    let mut flat: Vec<(usize, &Detection)> = detections
        .iter()
        .enumerate()
        .flat_map(|(img, dets)| dets.iter().map(move |d| (img, d)))
        .collect();
    flat.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut matched: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![false; g.len()]).collect();
    let mut ranked = Vec::with_capacity(flat.len());
    for (img, det) in flat {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in ground_truth[img].iter().enumerate() {
            if matched[img][gi] {
                continue;
            }
            let o = iou(&det.bbox, gt);
            if best.is_none_or(|(_, b)| o > b) {
                best = Some((gi, o));
            }
        }
        let tp = match best {
            Some((gi, o)) if o >= match_iou => {
                matched[img][gi] = true;
                true
            }
            _ => false,
        };
        ranked.push((det.score, tp));
    }
    Ok(RankedMatch {
        ranked,
        ground_truths: ground_truth.iter().map(Vec::len).sum(),
    })
}

/// All-points interpolated average precision.
///
/// `AP = (1/G) * sum over true-positive ranks of the max precision at that
/// rank or any later one`, where `G` is the number of ground-truth boxes.
/// With no ground truth, AP is 0 and recall is reported as 0.
pub fn average_precision(detections: &[Vec<Detection>], ground_truth: &[Vec<BBox>], match_iou: f64) -> Result<ApResult> {
    let RankedMatch { ranked, ground_truths } = match_detections(detections, ground_truth, match_iou)?;
    let mut curve = Vec::with_capacity(ranked.len());
    let mut tp = 0usize;
    for (k, &(score, is_tp)) in ranked.iter().enumerate() {
        tp += usize::from(is_tp);
        curve.push(PrPoint {
            threshold: score,
            precision: Some(tp as f64 / (k + 1) as f64),
            recall: if ground_truths == 0 { 0.0 } else { tp as f64 / ground_truths as f64 },
        });
    }
    let mut ap = 0.0;
    if ground_truths > 0 {
        let mut envelope = vec![0.0; curve.len()];
        let mut running = 0.0f64;
        for k in (0..curve.len()).rev() {
            running = running.max(curve[k].precision.unwrap_or(0.0));
            envelope[k] = running;
        }
        // Each TP rank adds 1/G of recall; dividing once keeps a perfect
        // ranking at exactly 1.
        let mut total = 0.0;
        for (k, &(_, is_tp)) in ranked.iter().enumerate() {
            if is_tp {
                total += envelope[k];
            }
        }
        ap = total / ground_truths as f64;
    }
    Ok(ApResult {
        ap,
        curve,
        true_positives: tp,
        false_positives: ranked.len() - tp,
        ground_truths,
    })
}

/// `threshold,precision,recall` CSV; undefined precision is left empty.
pub fn pr_curve_csv(curve: &[PrPoint]) -> String {
    let mut out = String::from("threshold,precision,recall\n");
    for p in curve {
        let prec = p.precision.map(|v| v.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{}", p.threshold, prec, p.recall).unwrap();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

/// One line of a detection dump or ground-truth file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image: String,
    pub boxes: Vec<BoxRecord>,
}

impl ImageRecord {
    pub fn from_detections(image: impl Into<String>, detections: &[Detection]) -> Self {
        ImageRecord {
            image: image.into(),
            boxes: detections
                .iter()
                .map(|d| BoxRecord {
                    x: d.bbox.x,
                    y: d.bbox.y,
                    w: d.bbox.w,
                    h: d.bbox.h,
                    score: Some(d.score),
                })
                .collect(),
        }
    }

    pub fn bboxes(&self) -> Vec<BBox> {
        self.boxes.iter().map(|b| BBox::new(b.x, b.y, b.w, b.h)).collect()
    }
}

pub fn to_jsonl(records: &[ImageRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialise"));
        out.push('\n');
    }
    out
}

/// Reads a JSON-lines ground-truth (or detection) file keyed by image name.
pub fn read_jsonl(path: &Path) -> Result<HashMap<String, Vec<BBox>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ImageRecord = serde_json::from_str(line)
            .map_err(|e| Error::Argument(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.insert(rec.image.clone(), rec.bboxes());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_eye_net, ModelWeights};

    fn det(x: f64, y: f64, w: f64, h: f64, score: f64) -> Detection {
        Detection { bbox: BBox::new(x, y, w, h), score }
    }

    #[test]
    fn iou_cases() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 1.0, 1.0)), 0.0);
        assert_eq!(iou(&a, &BBox::new(2.0, 0.0, 2.0, 2.0)), 0.0);
        let b = BBox::new(1.0, 1.0, 2.0, 2.0);
        assert_eq!(iou(&a, &b), 1.0 / 7.0);
        assert_eq!(iou(&b, &a), iou(&a, &b));
    }

    #[test]
    fn pyramid_levels() {
        assert_eq!(image_pyramid(&Tensor::zeros(&[1, 128, 64]), 1.2, (128, 64)).unwrap().len(), 1);
        let levels = image_pyramid(&Tensor::zeros(&[1, 256, 128]), 2.0, (128, 64)).unwrap();
        let shapes: Vec<_> = levels.iter().map(|l| l.image.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![1, 256, 128], vec![1, 128, 64]]);
        assert_eq!(levels[1].scale, 2.0);
        assert!(image_pyramid(&Tensor::zeros(&[1, 100, 64]), 1.2, (128, 64)).unwrap().is_empty());
        assert!(image_pyramid(&Tensor::zeros(&[1, 200, 64]), 1.0, (128, 64)).is_err());
    }

    #[test]
    fn window_counts() {
        assert_eq!(sliding_windows(&Tensor::zeros(&[1, 128, 64]), (128, 64), 16).unwrap().len(), 1);
        let w = sliding_windows(&Tensor::zeros(&[1, 144, 80]), (128, 64), 16).unwrap();
        let origins: Vec<_> = w.iter().map(|(b, _)| (b.x, b.y)).collect();
        assert_eq!(origins, vec![(0.0, 0.0), (16.0, 0.0), (0.0, 16.0), (16.0, 16.0)]);
        assert!(sliding_windows(&Tensor::zeros(&[1, 100, 80]), (128, 64), 16).unwrap().is_empty());
    }

    #[test]
    fn nms_basics() {
        let single = [det(0.0, 0.0, 4.0, 4.0, 0.3)];
        assert_eq!(nms(&single, 0.5), single.to_vec());
        let pair = [det(0.0, 0.0, 4.0, 4.0, 0.8), det(0.0, 0.0, 4.0, 4.0, 0.9)];
        assert_eq!(nms(&pair, 0.5), vec![pair[1]]);
        let tie = [det(0.0, 0.0, 4.0, 4.0, 0.7), det(0.0, 0.0, 4.0, 4.0, 0.7)];
        assert_eq!(nms_indices(&tie, 0.5), vec![0]);
    }

    #[test]
    fn ap_simple_cases() {
        let gt = vec![vec![BBox::new(0.0, 0.0, 10.0, 10.0)]];
        let perfect = average_precision(&[vec![det(0.0, 0.0, 10.0, 10.0, 0.9)]], &gt, 0.5).unwrap();
        assert_eq!(perfect.ap, 1.0);
        let none = average_precision(&[vec![]], &gt, 0.5).unwrap();
        assert_eq!(none.ap, 0.0);
        assert!(none.curve.is_empty());
    }

    #[test]
    fn ap_fp_before_tp() {
        // FP at rank 1, TP at rank 2, one GT: AP = 1/2.
        let gt = vec![vec![BBox::new(0.0, 0.0, 10.0, 10.0)]];
        let dets = vec![vec![det(50.0, 50.0, 10.0, 10.0, 0.9), det(0.0, 0.0, 10.0, 10.0, 0.8)]];
        let r = average_precision(&dets, &gt, 0.5).unwrap();
        assert_eq!(r.ap, 0.5);
        assert_eq!(r.curve[1].recall, 1.0);
    }

    #[test]
    fn duplicate_detection_is_fp() {
        let gt = vec![vec![BBox::new(0.0, 0.0, 10.0, 10.0)]];
        let dets = vec![vec![det(0.0, 0.0, 10.0, 10.0, 0.9), det(0.0, 0.0, 10.0, 10.0, 0.8)]];
        let r = average_precision(&dets, &gt, 0.5).unwrap();
        assert_eq!((r.true_positives, r.false_positives), (1, 1));
        assert_eq!(r.ap, 1.0);
    }

    #[test]
    fn csv_format() {
        let csv = pr_curve_csv(&[
            PrPoint { threshold: 0.9, precision: Some(1.0), recall: 0.5 },
            PrPoint { threshold: 0.4, precision: None, recall: 0.5 },
        ]);
        assert_eq!(csv, "threshold,precision,recall\n0.9,1,0.5\n0.4,,0.5\n");
    }

    #[test]
    fn jsonl_schema() {
        let rec = ImageRecord::from_detections("a.pgm", &[det(1.0, 2.0, 3.0, 4.0, 0.75)]);
        assert_eq!(to_jsonl(&[rec]), "{\"image\":\"a.pgm\",\"boxes\":[{\"x\":1.0,\"y\":2.0,\"w\":3.0,\"h\":4.0,\"score\":0.75}]}\n");
        let gt: ImageRecord = serde_json::from_str(r#"{"image":"b","boxes":[{"x":0,"y":0,"w":5,"h":6}]}"#).unwrap();
        assert_eq!(gt.bboxes(), vec![BBox::new(0.0, 0.0, 5.0, 6.0)]);
    }

    #[test]
    fn detect_rejects_eye_model() {
        let w = ModelWeights::zeros(build_eye_net());
        assert!(matches!(
            detect(&w, &Tensor::zeros(&[1, 128, 64]), &DetectParams::default()),
            Err(Error::SpecMismatch { .. })
        ));
    }

    #[test]
    fn frame_score_of_empty_is_zero() {
        assert_eq!(frame_score(&[]), 0.0);
        assert_eq!(frame_score(&[det(0.0, 0.0, 1.0, 1.0, 0.6), det(0.0, 0.0, 1.0, 1.0, 0.8)]), 0.8);
    }
}
