//! COCO-style average precision and the responsible-feature heatmap.
//!
//! AP uses greedy highest-IoU matching in score order and 101-point
//! interpolated precision, averaged over IoU thresholds 0.50:0.05:0.95 and
//! over classes that have ground truth. Size-restricted metrics (`AP_S/M/L`)
//! use area cutoffs scaled from the COCO 32^2 / 96^2 convention by the ratio
//! of the evaluated image area to a nominal 640x480 COCO image; out-of-bucket
//! ground truth is ignored rather than counted against the detector.

use serde::{Deserialize, Serialize};

use crate::aggregation::Voter;
use crate::assignment::{GroundTruth, PyramidSpec};
use crate::geometry::BBox;
use crate::image::encode_ppm;
use crate::par;

/// IoU thresholds behind the averaged AP column.
pub const IOU_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

/// Recall sampling points of the interpolated protocol.
pub const RECALL_POINTS: usize = 101;

/// One detection as consumed by evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetRecord {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// Detections and ground truth of one image.
#[derive(Debug, Clone, Default)]
pub struct EvalImage {
    pub dets: Vec<DetRecord>,
    pub gts: Vec<GroundTruth>,
}

/// Area cutoffs separating small / medium / large objects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeBuckets {
    pub small_max_area: f64,
    pub medium_max_area: f64,
}

/// Nominal source-image area the 32^2 / 96^2 cutoffs were designed for.
const NOMINAL_IMAGE_AREA: f64 = 640.0 * 480.0;

impl SizeBuckets {
    /// Cutoffs scaled to the evaluated image area.
    pub fn for_image_area(area: f64) -> Self {
        let f = area / NOMINAL_IMAGE_AREA;
        Self {
            small_max_area: 32.0 * 32.0 * f,
            medium_max_area: 96.0 * 96.0 * f,
        }
    }

    fn range(&self, bucket: Bucket) -> (f64, f64) {
        match bucket {
            Bucket::All => (0.0, f64::INFINITY),
            Bucket::Small => (0.0, self.small_max_area),
            Bucket::Medium => (self.small_max_area, self.medium_max_area),
            Bucket::Large => (self.medium_max_area, f64::INFINITY),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bucket {
    All,
    Small,
    Medium,
    Large,
}

/// Averaged metrics; `None` marks a bucket with no ground truth anywhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_s: Option<f64>,
    pub ap_m: Option<f64>,
    pub ap_l: Option<f64>,
    pub per_class: Vec<ClassAp>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
}

impl ApReport {
    pub fn lines(&self) -> Vec<String> {
        fn fmt(v: Option<f64>) -> String {
            match v {
                Some(v) => format!("{v:.4}"),
                None => "-".to_string(),
            }
        }
        let mut out = vec![
            format!("AP   = {}", fmt(self.ap)),
            format!("AP50 = {}", fmt(self.ap50)),
            format!("AP75 = {}", fmt(self.ap75)),
            format!("AP_S = {}", fmt(self.ap_s)),
            format!("AP_M = {}", fmt(self.ap_m)),
            format!("AP_L = {}", fmt(self.ap_l)),
        ];
        for c in &self.per_class {
            out.push(format!(
                "class {} AP = {} AP50 = {}",
                c.class_id,
                fmt(c.ap),
                fmt(c.ap50)
            ));
        }
        out
    }
}

/// Outcome of matching one detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchFlag {
    TruePositive,
    FalsePositive,
    /// Matched only out-of-bucket ground truth, or unmatched and itself out of
    /// bucket; excluded from the precision-recall curve.
    Ignored,
}

/// Greedy matcher for one image and one class, detections visited in the
/// given order (callers pass score-descending order).
///
/// Each detection takes the unmatched, non-ignored ground truth of highest
/// IoU at or above the threshold. Detections that can only reach ignored
/// ground truth are ignored themselves, as are unmatched detections whose own
/// area falls outside the bucket.
fn match_one_class(
    dets: &[(usize, &DetRecord)],
    gts: &[(usize, &GroundTruth)],
    gt_ignored: &[bool],
    iou_threshold: f64,
    det_in_bucket: impl Fn(&DetRecord) -> bool,
) -> Vec<(MatchFlag, Option<usize>)> {
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::with_capacity(dets.len());
    for (_, det) in dets {
        let mut best: Option<(f64, usize)> = None;
        let mut best_ignored: Option<(f64, usize)> = None;
        for (g, (_, gt)) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let v = det.bbox.iou(&gt.bbox);
            if v < iou_threshold {
                continue;
            }
            let slot = if gt_ignored[g] { &mut best_ignored } else { &mut best };
            if slot.map_or(true, |(bv, _)| v > bv) {
                *slot = Some((v, g));
            }
        }
        match (best, best_ignored) {
            (Some((_, g)), _) => {
                taken[g] = true;
                out.push((MatchFlag::TruePositive, Some(gts[g].0)));
            }
            (None, Some((_, g))) => {
                taken[g] = true;
                out.push((MatchFlag::Ignored, None));
            }
            (None, None) => {
                if det_in_bucket(det) {
                    out.push((MatchFlag::FalsePositive, None));
                } else {
                    out.push((MatchFlag::Ignored, None));
                }
            }
        }
    }
    out
}

/// Per-detection true/false-positive flags for one image and one class, in
/// the input order of `dets`. Matching is greedy in score order; every
/// detection takes the unmatched ground truth of highest IoU >= threshold.
pub fn match_detections(dets: &[DetRecord], gts: &[GroundTruth], iou_threshold: f64) -> Vec<bool> {
    match_detection_indices(dets, gts, iou_threshold)
        .into_iter()
        .map(|m| m.is_some())
        .collect()
}

/// Like [`match_detections`] but reports which ground-truth instance each
/// true positive matched.
pub fn match_detection_indices(
    dets: &[DetRecord],
    gts: &[GroundTruth],
    iou_threshold: f64,
) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let ordered: Vec<(usize, &DetRecord)> = order.iter().map(|&k| (k, &dets[k])).collect();
    let gt_refs: Vec<(usize, &GroundTruth)> = gts.iter().enumerate().collect();
    let ignored = vec![false; gts.len()];
    let matched = match_one_class(&ordered, &gt_refs, &ignored, iou_threshold, |_| true);
    let mut out = vec![None; dets.len()];
    for ((det_idx, _), (_, gt)) in ordered.iter().zip(&matched) {
        out[*det_idx] = *gt;
    }
    out
}

/// 101-point interpolated average precision from flagged detections.
///
/// `scored_flags` holds (score, is-true-positive) pairs across the dataset;
/// `gt_count` is the number of ground-truth instances. Returns `None` when
/// there is no ground truth (the class is excluded from means).
pub fn average_precision(scored_flags: &[(f64, bool)], gt_count: usize) -> Option<f64> {
    if gt_count == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scored_flags.len()).collect();
    order.sort_by(|&a, &b| {
        scored_flags[b]
            .0
            .total_cmp(&scored_flags[a].0)
            .then(a.cmp(&b))
    });

    // precision and recall after each rank
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(order.len());
    let mut recall = Vec::with_capacity(order.len());
    for (rank, &k) in order.iter().enumerate() {
        if scored_flags[k].1 {
            tp += 1;
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / gt_count as f64);
    }

    // make precision monotone non-increasing from the right
    for k in (1..precision.len()).rev() {
        if precision[k] > precision[k - 1] {
            precision[k - 1] = precision[k];
        }
    }

    // sample at the 101 recall points; precision at recall r is the max
    // precision among ranks whose recall reaches r
    let mut total = 0.0;
    let mut idx = 0;
    for point in 0..RECALL_POINTS {
        let r = point as f64 / (RECALL_POINTS - 1) as f64;
        while idx < recall.len() && recall[idx] < r - 1e-12 {
            idx += 1;
        }
        if idx < precision.len() {
            total += precision[idx];
        }
    }
    Some(total / RECALL_POINTS as f64)
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.flatten().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Full dataset summary across IoU thresholds, classes and size buckets.
pub fn summarize(images: &[EvalImage], num_classes: usize, buckets: &SizeBuckets) -> ApReport {
    // canonical detection order: score desc, then box coordinates, so the
    // report is independent of detection file order
    let canonical: Vec<EvalImage> = images
        .iter()
        .map(|img| {
            let mut dets = img.dets.clone();
            dets.sort_by(|a, b| {
                b.score
                    .total_cmp(&a.score)
                    .then(a.class_id.cmp(&b.class_id))
                    .then(a.bbox.x1.total_cmp(&b.bbox.x1))
                    .then(a.bbox.y1.total_cmp(&b.bbox.y1))
                    .then(a.bbox.x2.total_cmp(&b.bbox.x2))
                    .then(a.bbox.y2.total_cmp(&b.bbox.y2))
            });
            EvalImage {
                dets,
                gts: img.gts.clone(),
            }
        })
        .collect();

    let all_buckets = [Bucket::All, Bucket::Small, Bucket::Medium, Bucket::Large];
    // ap[class][threshold][bucket]
    let per_class_results: Vec<Vec<Vec<Option<f64>>>> = par::map_indices(num_classes, |class_id| {
        IOU_THRESHOLDS
            .iter()
            .map(|&thr| {
                all_buckets
                    .iter()
                    .map(|&bucket| {
                        let (lo, hi) = buckets.range(bucket);
                        let mut flags: Vec<(f64, bool)> = Vec::new();
                        let mut gt_count = 0usize;
                        for img in &canonical {
                            let dets: Vec<(usize, &DetRecord)> = img
                                .dets
                                .iter()
                                .enumerate()
                                .filter(|(_, d)| d.class_id == class_id)
                                .collect();
                            let gts: Vec<(usize, &GroundTruth)> = img
                                .gts
                                .iter()
                                .enumerate()
                                .filter(|(_, g)| g.class_id == class_id)
                                .collect();
                            let gt_ignored: Vec<bool> = gts
                                .iter()
                                .map(|(_, g)| {
                                    let a = g.bbox.area();
                                    !(a >= lo && a < hi)
                                })
                                .collect();
                            gt_count += gt_ignored.iter().filter(|&&ig| !ig).count();
                            let matched = match_one_class(&dets, &gts, &gt_ignored, thr, |d| {
                                let a = d.bbox.area();
                                a >= lo && a < hi
                            });
                            for ((_, det), (flag, _)) in dets.iter().zip(&matched) {
                                match flag {
                                    MatchFlag::TruePositive => flags.push((det.score, true)),
                                    MatchFlag::FalsePositive => flags.push((det.score, false)),
                                    MatchFlag::Ignored => {}
                                }
                            }
                        }
                        average_precision(&flags, gt_count)
                    })
                    .collect()
            })
            .collect()
    });

    let bucket_mean = |bucket_idx: usize| {
        mean_of(
            per_class_results
                .iter()
                .flat_map(|thr| thr.iter().map(move |b| b[bucket_idx])),
        )
    };
    let threshold_mean = |thr_idx: usize| {
        mean_of(per_class_results.iter().map(|thr| thr[thr_idx][0]))
    };

    let per_class = per_class_results
        .iter()
        .enumerate()
        .map(|(class_id, thr)| ClassAp {
            class_id,
            ap: mean_of(thr.iter().map(|b| b[0])),
            ap50: thr[0][0],
        })
        .collect();

    ApReport {
        ap: bucket_mean(0),
        ap50: threshold_mean(0),
        ap75: threshold_mean(5),
        ap_s: bucket_mean(1),
        ap_m: bucket_mean(2),
        ap_l: bucket_mean(3),
        per_class,
    }
}

/// Accumulates voter positions of true-positive detections in a frame
/// normalized to the matched ground-truth box.
///
/// The grid spans [-0.5, 1.5) in box-normalized coordinates along each axis,
/// i.e. the box itself occupies the central half with half a box width of
/// margin on every side. Out-of-range voters clamp to the border cells so the
/// accumulated mass stays equal to the number of detections added.
#[derive(Debug, Clone)]
pub struct HeatmapAccumulator {
    pub resolution: usize,
    pub cells: Vec<f64>,
    pub detections_added: usize,
}

impl HeatmapAccumulator {
    pub fn new(resolution: usize) -> Self {
        Self {
            resolution,
            cells: vec![0.0; resolution * resolution],
            detections_added: 0,
        }
    }

    pub fn add_detection(&mut self, voters: &[Voter], gt_box: &BBox, pyramid: &PyramidSpec) {
        let res = self.resolution;
        for voter in voters {
            let grid = pyramid.grid(voter.source.level);
            let p = grid.center(voter.source.i, voter.source.j);
            let nx = (p.x - gt_box.x1) / gt_box.width();
            let ny = (p.y - gt_box.y1) / gt_box.height();
            let u = (((nx + 0.5) / 2.0) * res as f64).floor() as isize;
            let v = (((ny + 0.5) / 2.0) * res as f64).floor() as isize;
            let u = u.clamp(0, res as isize - 1) as usize;
            let v = v.clamp(0, res as isize - 1) as usize;
            self.cells[v * res + u] += voter.weight;
        }
        self.detections_added += 1;
    }

    pub fn total_mass(&self) -> f64 {
        self.cells.iter().sum()
    }

    /// Renders the accumulator as RGB pixels: a 4-stop sequential colormap
    /// (dark violet to yellow) scaled by the peak cell, with the unit
    /// ground-truth box outlined in white.
    pub fn render(&self) -> Vec<[u8; 3]> {
        let res = self.resolution;
        let peak = self.cells.iter().cloned().fold(0.0f64, f64::max);
        let mut rgb: Vec<[u8; 3]> = self
            .cells
            .iter()
            .map(|&v| colormap(if peak > 0.0 { v / peak } else { 0.0 }))
            .collect();
        // box occupies [res/4, 3*res/4); draw its border
        let lo = res / 4;
        let hi = 3 * res / 4;
        for k in lo..hi {
            for (x, y) in [(k, lo), (k, hi - 1), (lo, k), (hi - 1, k)] {
                rgb[y * res + x] = [255, 255, 255];
            }
        }
        rgb
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        encode_ppm(self.resolution, self.resolution, &self.render())
    }
}

/// Piecewise-linear 4-stop sequential colormap.
fn colormap(v: f64) -> [u8; 3] {
    const STOPS: [(f64, [f64; 3]); 4] = [
        (0.0, [13.0, 8.0, 60.0]),
        (0.34, [126.0, 23.0, 158.0]),
        (0.67, [237.0, 121.0, 83.0]),
        (1.0, [240.0, 249.0, 33.0]),
    ];
    let v = v.clamp(0.0, 1.0);
    for pair in STOPS.windows(2) {
        let (a, ca) = pair[0];
        let (b, cb) = pair[1];
        if v <= b {
            let t = (v - a) / (b - a);
            return [
                (ca[0] + t * (cb[0] - ca[0])).round() as u8,
                (ca[1] + t * (cb[1] - ca[1])).round() as u8,
                (ca[2] + t * (cb[2] - ca[2])).round() as u8,
            ];
        }
    }
    [240, 249, 33]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assignment::Location;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(x1: f64, y1: f64, x2: f64, y2: f64, class_id: usize, score: f64) -> DetRecord {
        DetRecord {
            bbox: BBox::new(x1, y1, x2, y2),
            class_id,
            score,
        }
    }

    fn gt(x1: f64, y1: f64, x2: f64, y2: f64, class_id: usize, instance_id: usize) -> GroundTruth {
        GroundTruth {
            bbox: BBox::new(x1, y1, x2, y2),
            class_id,
            instance_id,
        }
    }

    #[test]
    fn identical_detection_is_tp() {
        let dets = [det(0.0, 0.0, 10.0, 10.0, 0, 0.9)];
        let gts = [gt(0.0, 0.0, 10.0, 10.0, 0, 0)];
        assert_eq!(match_detections(&dets, &gts, 0.5), vec![true]);
    }

    #[test]
    fn duplicate_detection_is_fp() {
        let dets = [
            det(0.0, 0.0, 10.0, 10.0, 0, 0.6),
            det(0.0, 0.0, 10.0, 10.0, 0, 0.9),
        ];
        let gts = [gt(0.0, 0.0, 10.0, 10.0, 0, 0)];
        // higher-scored one wins even though it is listed second
        assert_eq!(match_detections(&dets, &gts, 0.5), vec![false, true]);
    }

    /// Exhaustive greedy oracle, written independently of the match internals.
    fn oracle_match(dets: &[DetRecord], gts: &[GroundTruth], thr: f64) -> Vec<bool> {
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
        let mut used = vec![false; gts.len()];
        let mut flags = vec![false; dets.len()];
        for &d in &order {
            let mut best: Option<(f64, usize)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if used[g] {
                    continue;
                }
                let v = dets[d].bbox.iou(&gt.bbox);
                if v >= thr && best.map_or(true, |(bv, _)| v > bv) {
                    best = Some((v, g));
                }
            }
            if let Some((_, g)) = best {
                used[g] = true;
                flags[d] = true;
            }
        }
        flags
    }

    #[test]
    fn matching_agrees_with_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let dets: Vec<DetRecord> = (0..5)
                .map(|_| {
                    let x = rng.gen_range(0.0..40.0);
                    let y = rng.gen_range(0.0..40.0);
                    det(
                        x,
                        y,
                        x + rng.gen_range(5.0..30.0),
                        y + rng.gen_range(5.0..30.0),
                        0,
                        rng.gen_range(0.0..1.0),
                    )
                })
                .collect();
            let gts: Vec<GroundTruth> = (0..3)
                .map(|k| {
                    let x = rng.gen_range(0.0..40.0);
                    let y = rng.gen_range(0.0..40.0);
                    gt(
                        x,
                        y,
                        x + rng.gen_range(5.0..30.0),
                        y + rng.gen_range(5.0..30.0),
                        0,
                        k,
                    )
                })
                .collect();
            assert_eq!(match_detections(&dets, &gts, 0.5), oracle_match(&dets, &gts, 0.5));
        }
    }

    #[test]
    fn ap_trivial_cases() {
        // all TPs covering all ground truth
        let flags = vec![(0.9, true), (0.8, true)];
        assert_eq!(average_precision(&flags, 2), Some(1.0));
        // no detections at all
        assert_eq!(average_precision(&[], 3), Some(0.0));
        // no ground truth: undefined
        assert_eq!(average_precision(&[(0.5, false)], 0), None);
    }

    #[test]
    fn ap_tp_then_fp_reference_value() {
        // 1 TP then 1 FP over 2 GTs: precision 1 up to recall 0.5, then 0;
        // 51 of the 101 recall points see precision 1
        let flags = vec![(0.9, true), (0.8, false)];
        let ap = average_precision(&flags, 2).unwrap();
        assert!((ap - 51.0 / 101.0).abs() < 1e-12);
    }

    #[test]
    fn ap_is_rank_invariant() {
        let flags = vec![(0.9, true), (0.5, false), (0.4, true), (0.2, false)];
        let squashed: Vec<(f64, bool)> = flags
            .iter()
            .map(|&(s, t)| (s.powf(0.1) * 0.3, t))
            .collect();
        assert_eq!(average_precision(&flags, 3), average_precision(&squashed, 3));
    }

    #[test]
    fn duplicate_fp_never_raises_ap() {
        let flags = vec![(0.9, true), (0.6, false), (0.3, true)];
        let base = average_precision(&flags, 2).unwrap();
        for score in [0.95, 0.7, 0.5, 0.1] {
            let mut more = flags.clone();
            more.push((score, false));
            assert!(average_precision(&more, 2).unwrap() <= base + 1e-12);
        }
    }

    fn toy_buckets() -> SizeBuckets {
        SizeBuckets::for_image_area(128.0 * 128.0)
    }

    #[test]
    fn perfect_detector_scores_one() {
        // one object per bucket so every size metric is defined
        let b = toy_buckets();
        let small_side = (b.small_max_area * 0.5).sqrt();
        let large_side = (b.medium_max_area * 2.0).sqrt();
        let mut images = Vec::new();
        for class_id in 0..2 {
            let gts = vec![
                gt(1.0, 1.0, 1.0 + small_side, 1.0 + small_side, class_id, 0),
                gt(30.0, 30.0, 50.0, 50.0, class_id, 1),
                gt(60.0, 60.0, 60.0 + large_side, 60.0 + large_side, class_id, 2),
            ];
            let dets = gts
                .iter()
                .map(|g| DetRecord {
                    bbox: g.bbox,
                    class_id: g.class_id,
                    score: 0.9,
                })
                .collect();
            images.push(EvalImage { dets, gts });
        }
        let report = summarize(&images, 2, &b);
        assert_eq!(report.ap, Some(1.0));
        assert_eq!(report.ap50, Some(1.0));
        assert_eq!(report.ap75, Some(1.0));
        assert_eq!(report.ap_s, Some(1.0));
        assert_eq!(report.ap_m, Some(1.0));
        assert_eq!(report.ap_l, Some(1.0));
    }

    #[test]
    fn empty_predictions_score_zero() {
        let images = vec![EvalImage {
            dets: vec![],
            gts: vec![gt(10.0, 10.0, 40.0, 40.0, 0, 0)],
        }];
        let report = summarize(&images, 1, &toy_buckets());
        assert_eq!(report.ap, Some(0.0));
        assert_eq!(report.ap50, Some(0.0));
    }

    #[test]
    fn report_is_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut images = Vec::new();
        for _ in 0..6 {
            let gts: Vec<GroundTruth> = (0..3)
                .map(|k| {
                    let x = rng.gen_range(0.0..80.0);
                    let y = rng.gen_range(0.0..80.0);
                    gt(x, y, x + rng.gen_range(8.0..40.0), y + rng.gen_range(8.0..40.0), k % 2, k)
                })
                .collect();
            let dets: Vec<DetRecord> = gts
                .iter()
                .flat_map(|g| {
                    let jitter = rng.gen_range(-3.0..3.0);
                    vec![DetRecord {
                        bbox: BBox::new(g.bbox.x1 + jitter, g.bbox.y1, g.bbox.x2, g.bbox.y2),
                        class_id: g.class_id,
                        score: rng.gen_range(0.1..1.0),
                    }]
                })
                .collect();
            images.push(EvalImage { dets, gts });
        }
        let base = summarize(&images, 2, &toy_buckets());
        let shuffled: Vec<EvalImage> = images
            .iter()
            .map(|img| {
                let mut dets = img.dets.clone();
                dets.reverse();
                EvalImage {
                    dets,
                    gts: img.gts.clone(),
                }
            })
            .collect();
        assert_eq!(summarize(&shuffled, 2, &toy_buckets()), base);
    }

    #[test]
    fn heatmap_mass_equals_tp_count() {
        let pyramid = PyramidSpec::for_image(128, 128, 2, 4, 10.0).unwrap();
        let mut acc = HeatmapAccumulator::new(64);
        let gt_box = BBox::new(20.0, 20.0, 60.0, 60.0);
        let voters = vec![
            Voter {
                source: Location { level: 3, i: 4, j: 4 },
                weight: 0.6,
            },
            Voter {
                source: Location { level: 3, i: 5, j: 4 },
                weight: 0.4,
            },
        ];
        acc.add_detection(&voters, &gt_box, &pyramid);
        acc.add_detection(
            &[Voter {
                source: Location { level: 2, i: 9, j: 9 },
                weight: 1.0,
            }],
            &gt_box,
            &pyramid,
        );
        assert!((acc.total_mass() - 2.0).abs() < 1e-12);
        assert_eq!(acc.detections_added, 2);
    }

    #[test]
    fn heatmap_centers_single_center_voter() {
        let pyramid = PyramidSpec::for_image(128, 128, 3, 3, 10.0).unwrap();
        let mut acc = HeatmapAccumulator::new(64);
        // level-3 cell (4,4) has center (36, 36); make it the box center
        let gt_box = BBox::new(26.0, 26.0, 46.0, 46.0);
        acc.add_detection(
            &[Voter {
                source: Location { level: 3, i: 4, j: 4 },
                weight: 1.0,
            }],
            &gt_box,
            &pyramid,
        );
        // normalized (0.5, 0.5) lands at cell (32, 32)
        assert_eq!(acc.cells[32 * 64 + 32], 1.0);
    }

    #[test]
    fn heatmap_render_has_outline_and_is_deterministic() {
        let mut acc = HeatmapAccumulator::new(64);
        acc.cells[40 * 64 + 33] = 2.0;
        let a = acc.to_ppm();
        let b = acc.to_ppm();
        assert_eq!(a, b);
        let rgb = acc.render();
        assert_eq!(rgb[16 * 64 + 16], [255, 255, 255]);
        assert_eq!(rgb[47 * 64 + 47], [255, 255, 255]);
    }
}
