//! COCO-style average recall and average precision.
//!
//! Size bins use the COCO areas (small < 32², medium < 96², large otherwise)
//! on box area for box metrics and on mask area for segment metrics.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::mask::BinaryMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SizeBin {
    Small,
    Medium,
    Large,
}

impl SizeBin {
    pub const ALL: [SizeBin; 3] = [SizeBin::Small, SizeBin::Medium, SizeBin::Large];

    pub fn of_area(area: f64) -> SizeBin {
        if area < 32.0 * 32.0 {
            SizeBin::Small
        } else if area < 96.0 * 96.0 {
            SizeBin::Medium
        } else {
            SizeBin::Large
        }
    }

    pub fn suffix(self) -> &'static str {
        match self {
            SizeBin::Small => "s",
            SizeBin::Medium => "m",
            SizeBin::Large => "l",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.iou_thresholds;
        if t.is_empty() || t.iter().any(|&x| !(x > 0.0 && x < 1.0)) || t.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("IoU thresholds must be strictly increasing in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Recall averaged over IoU thresholds, overall and per size bin.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RecallSummary {
    pub ar: f64,
    pub ar_s: f64,
    pub ar_m: f64,
    pub ar_l: f64,
}

/// One image's proposals (score-sorted) against its ground truth, as an
/// IoU matrix `iou[p][g]` plus GT areas for binning.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RecallInstance {
    pub ious: Vec<Vec<f64>>,
    pub gt_areas: Vec<f64>,
}

impl RecallInstance {
    pub fn from_boxes(proposals: &[BBox], gt: &[BBox], budget: usize) -> Self {
        let n = proposals.len().min(budget);
        RecallInstance {
            ious: proposals[..n].iter().map(|p| gt.iter().map(|g| iou(p, g)).collect()).collect(),
            gt_areas: gt.iter().map(BBox::area).collect(),
        }
    }

    pub fn from_masks(proposals: &[BinaryMask], gt: &[BinaryMask], budget: usize) -> Result<Self> {
        let n = proposals.len().min(budget);
        let ious = proposals[..n]
            .iter()
            .map(|p| gt.iter().map(|g| mask_iou(p, g)).collect::<Result<Vec<_>>>())
            .collect::<Result<_>>()?;
        Ok(RecallInstance {
            ious,
            gt_areas: gt.iter().map(|g| g.area() as f64).collect(),
        })
    }
}

/// Greedy one-to-one matching: proposals in order each take the unmatched
/// GT with the highest IoU ≥ `t` (ties to the lower GT index). Returns the
/// matched flag per GT.
fn match_proposals(ious: &[Vec<f64>], n_gt: usize, t: f64) -> Vec<bool> {
    let mut matched = vec![false; n_gt];
    for row in ious {
        let mut best: Option<(usize, f64)> = None;
        for (g, &v) in row.iter().enumerate() {
            if !matched[g] && v >= t && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            matched[g] = true;
        }
    }
    matched
}

/// AR over a set of images. Recall at each threshold pools matched and total
/// GT across images; a bin without GT reports 0.
pub fn average_recall(instances: &[RecallInstance], cfg: &EvalConfig) -> RecallSummary {
    let mut hits: BTreeMap<Option<SizeBin>, usize> = BTreeMap::new();
    let mut totals: BTreeMap<Option<SizeBin>, usize> = BTreeMap::new();
    for inst in instances {
        for &a in &inst.gt_areas {
            *totals.entry(None).or_default() += cfg.iou_thresholds.len();
            *totals.entry(Some(SizeBin::of_area(a))).or_default() += cfg.iou_thresholds.len();
        }
        for &t in &cfg.iou_thresholds {
            let m = match_proposals(&inst.ious, inst.gt_areas.len(), t);
            for (g, &hit) in m.iter().enumerate() {
                if hit {
                    *hits.entry(None).or_default() += 1;
                    *hits.entry(Some(SizeBin::of_area(inst.gt_areas[g]))).or_default() += 1;
                }
            }
        }
    }
    let ratio = |k: Option<SizeBin>| match totals.get(&k) {
        Some(&n) if n > 0 => *hits.get(&k).unwrap_or(&0) as f64 / n as f64,
        _ => 0.0,
    };
    RecallSummary {
        ar: ratio(None),
        ar_s: ratio(Some(SizeBin::Small)),
        ar_m: ratio(Some(SizeBin::Medium)),
        ar_l: ratio(Some(SizeBin::Large)),
    }
}

/// Box AR for score-sorted proposals per image under a proposal budget.
pub fn box_average_recall(proposals: &[Vec<BBox>], gt: &[Vec<BBox>], budget: usize, cfg: &EvalConfig) -> Result<RecallSummary> {
    if proposals.len() != gt.len() {
        return Err(Error::InvalidArgument(format!(
            "{} proposal lists for {} images",
            proposals.len(),
            gt.len()
        )));
    }
    let inst: Vec<_> = proposals
        .iter()
        .zip(gt)
        .map(|(p, g)| RecallInstance::from_boxes(p, g, budget))
        .collect();
    Ok(average_recall(&inst, cfg))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub image: usize,
    pub class: usize,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub image: usize,
    pub class: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PrecisionSummary {
    pub ap: f64,
    pub ap50: f64,
    pub ap_s: f64,
    pub ap_m: f64,
    pub ap_l: f64,
}

/// 101-point interpolated AP from a score-ordered TP/FP sequence.
pub fn interpolated_ap(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / num_gt as f64);
    }
    // precision envelope, non-increasing
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    let mut idx = 0;
    for r in 0..=100 {
        let r = r as f64 / 100.0;
        while idx < recall.len() && recall[idx] < r - 1e-12 {
            idx += 1;
        }
        if idx < recall.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}

/// AP for one class at one threshold, with GT outside `bin` ignored and
/// unmatched detections outside `bin` ignored. Returns `None` when the class
/// has no counted GT.
fn class_ap(dets: &[&Detection], gts: &[&GroundTruth], t: f64, bin: Option<SizeBin>) -> Option<f64> {
    let in_bin = |b: &BBox| bin.is_none_or(|s| SizeBin::of_area(b.area()) == s);
    let num_gt = gts.iter().filter(|g| in_bin(&g.bbox)).count();
    if num_gt == 0 {
        return None;
    }
    let mut by_image: BTreeMap<usize, Vec<(usize, &GroundTruth)>> = BTreeMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_image.entry(g.image).or_default().push((i, g));
    }
    let mut matched = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(dets.len());
    for d in dets {
        let candidates = by_image.get(&d.image).map(Vec::as_slice).unwrap_or(&[]);
        // counted GT first, ignored GT only as a fallback
        let pick = |counted: bool| {
            let mut best: Option<(usize, f64)> = None;
            for &(i, g) in candidates {
                if matched[i] || in_bin(&g.bbox) != counted {
                    continue;
                }
                let v = iou(&d.bbox, &g.bbox);
                if v >= t && best.is_none_or(|(_, b)| v > b) {
                    best = Some((i, v));
                }
            }
            best.map(|(i, _)| i)
        };
        match pick(true) {
            Some(i) => {
                matched[i] = true;
                tp.push(true);
            }
            None => match pick(false) {
                Some(i) => matched[i] = true,
                None if in_bin(&d.bbox) => tp.push(false),
                None => {}
            },
        }
    }
    Some(interpolated_ap(&tp, num_gt))
}

/// COCO AP (mean over classes and thresholds), AP@0.5, and AP per size bin.
/// Detections are ranked by descending score, ties in input order.
pub fn average_precision(detections: &[Detection], gt: &[GroundTruth], cfg: &EvalConfig) -> PrecisionSummary {
    let mut classes: BTreeMap<usize, (Vec<&Detection>, Vec<&GroundTruth>)> = BTreeMap::new();
    for g in gt {
        classes.entry(g.class).or_default().1.push(g);
    }
    for d in detections {
        if let Some(e) = classes.get_mut(&d.class) {
            e.0.push(d);
        }
    }
    for (dets, _) in classes.values_mut() {
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    }
    let mean_over = |thresholds: &[f64], bin: Option<SizeBin>| {
        let mut vals = Vec::new();
        for (dets, gts) in classes.values() {
            let per_t: Vec<f64> = thresholds.iter().filter_map(|&t| class_ap(dets, gts, t, bin)).collect();
            if !per_t.is_empty() {
                vals.push(per_t.iter().sum::<f64>() / per_t.len() as f64);
            }
        }
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    PrecisionSummary {
        ap: mean_over(&cfg.iou_thresholds, None),
        ap50: mean_over(&[0.5], None),
        ap_s: mean_over(&cfg.iou_thresholds, Some(SizeBin::Small)),
        ap_m: mean_over(&cfg.iou_thresholds, Some(SizeBin::Medium)),
        ap_l: mean_over(&cfg.iou_thresholds, Some(SizeBin::Large)),
    }
}

/// Pixelwise IoU of two masks on the same grid; 0 when both are empty.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::ShapeMismatch {
            op: "mask_iou",
            lhs: vec![a.height, a.width],
            rhs: vec![b.height, b.width],
        });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (x, y) = (x != 0, y != 0);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2)
    }

    #[test]
    fn recall_examples() {
        let cfg = EvalConfig::default();
        let gt = vec![b(0., 0., 10., 10.), b(20., 20., 30., 30.), b(40., 40., 50., 50.)];
        let exact = box_average_recall(std::slice::from_ref(&gt), std::slice::from_ref(&gt), 100, &cfg).unwrap();
        assert_eq!(exact.ar, 1.0);
        let none = box_average_recall(&[vec![]], std::slice::from_ref(&gt), 100, &cfg).unwrap();
        assert_eq!(none.ar, 0.0);
        // third proposal at IoU 0.6: 10×10 box shifted to share 75 of 125 pixels
        let p = b(42.5, 40., 52.5, 50.);
        assert!((iou(&p, &gt[2]) - 0.6).abs() < 1e-12);
        let r = box_average_recall(&[vec![gt[0], gt[1], p]], &[gt], 100, &cfg).unwrap();
        assert!((r.ar - 23.0 / 30.0).abs() < 1e-12);
    }

    #[test]
    fn ap_with_trailing_false_positive() {
        let gt = [GroundTruth {
            image: 0,
            class: 1,
            bbox: b(0., 0., 10., 10.),
        }];
        let dets = [
            Detection {
                image: 0,
                class: 1,
                score: 0.9,
                bbox: b(0., 0., 10., 10.),
            },
            Detection {
                image: 0,
                class: 1,
                score: 0.5,
                bbox: b(50., 50., 60., 60.),
            },
        ];
        let s = average_precision(&dets, &gt, &EvalConfig::default());
        assert_eq!(s.ap50, 1.0);
        assert_eq!(s.ap, 1.0);
    }

    #[test]
    fn mask_iou_half_overlap() {
        let mut a = BinaryMask::new(8, 4);
        let mut c = BinaryMask::new(8, 4);
        for y in 0..4 {
            for x in 0..4 {
                a.set(x, y, true);
                c.set(x + 2, y, true);
            }
        }
        assert!((mask_iou(&a, &c).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(mask_iou(&BinaryMask::new(8, 4), &BinaryMask::new(8, 4)).unwrap(), 0.0);
    }

    #[test]
    fn thresholds_validated() {
        assert!(EvalConfig {
            iou_thresholds: vec![0.5, 0.5]
        }
        .validate()
        .is_err());
        assert!(EvalConfig::default().validate().is_ok());
    }
}
