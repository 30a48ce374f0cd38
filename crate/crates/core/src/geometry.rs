//! Detection geometry: boxes, anchors, IoU, delta coding, clipping and NMS.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Axis-aligned rectangle in input-image pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.width() > 0.0 && self.height() > 0.0)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Intersection over union; zero when either box has no area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a.is_degenerate() || b.is_degenerate() {
        return 0.0;
    }
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Largest |tw|, |th| accepted by [`decode_deltas`] before exponentiation.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000/16)

/// Regression targets of `target` relative to `anchor`:
/// `(Δcx/w_a, Δcy/h_a, ln(w_t/w_a), ln(h_t/h_a))`.
pub fn encode_deltas(anchor: &BBox, target: &BBox) -> Result<[f64; 4]> {
    if anchor.is_degenerate() {
        return Err(Error::DegenerateBox(anchor.to_array()));
    }
    if target.is_degenerate() {
        return Err(Error::DegenerateBox(target.to_array()));
    }
    let (ax, ay) = anchor.center();
    let (tx, ty) = target.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    Ok([
        (tx - ax) / aw,
        (ty - ay) / ah,
        (target.width() / aw).ln(),
        (target.height() / ah).ln(),
    ])
}

/// Inverse of [`encode_deltas`]. Log-scale terms are clamped to
/// ±[`MAX_LOG_SCALE`] so untrained regressors cannot overflow.
pub fn decode_deltas(anchor: &BBox, deltas: &[f64; 4]) -> Result<BBox> {
    if anchor.is_degenerate() {
        return Err(Error::DegenerateBox(anchor.to_array()));
    }
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let tw = deltas[2].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE);
    let th = deltas[3].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE);
    Ok(BBox::from_center(
        ax + deltas[0] * aw,
        ay + deltas[1] * ah,
        aw * tw.exp(),
        ah * th.exp(),
    ))
}

/// Clamps a box to `[0, width] × [0, height]`.
pub fn clip_box(b: &BBox, width: usize, height: usize) -> BBox {
    let (w, h) = (width as f64, height as f64);
    BBox::new(b.x1.clamp(0.0, w), b.y1.clamp(0.0, h), b.x2.clamp(0.0, w), b.y2.clamp(0.0, h))
}

/// Greedy non-maximum suppression. Boxes are visited by descending score
/// (ties by lower index); a box is dropped when its IoU with any kept box
/// exceeds `iou_threshold`. Returns at most `max_keep` original indices.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64, max_keep: usize) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "one score per box");
    let order = argsort_desc(scores);
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.len() >= max_keep {
            break;
        }
        if keep.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_threshold) {
            keep.push(i);
        }
    }
    keep
}

/// Indices ordered by descending score, ties broken by lower index.
pub fn argsort_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Aspect ratios (w/h) used at every anchor position.
pub const ANCHOR_RATIOS: [f64; 3] = [0.5, 1.0, 2.0];

/// Anchor side length on pyramid level `k` given the side on P2.
pub fn level_anchor_scale(base_scale: f64, level: usize) -> f64 {
    base_scale * f64::powi(2.0, level as i32 - 2)
}

/// Anchors of one feature map, flattened as `(row, col, scale, ratio)` with
/// ratio varying fastest.
#[derive(Debug, Clone)]
pub struct AnchorGrid {
    pub level: usize,
    pub stride: f64,
    pub scales: Vec<f64>,
    pub ratios: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub boxes: Vec<BBox>,
}

impl AnchorGrid {
    pub fn anchors_per_cell(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// `(anchor-in-cell, row, col)` of a flat anchor index.
    pub fn locate(&self, index: usize) -> (usize, usize, usize) {
        let a = self.anchors_per_cell();
        let cell = index / a;
        (index % a, cell / self.width, cell % self.width)
    }

    /// Tiles `scales × ratios` anchors centred at `((j+0.5)·stride, (i+0.5)·stride)`.
    /// Boxes crossing the image border are kept.
    pub fn tile(level: usize, stride: f64, height: usize, width: usize, scales: &[f64], ratios: &[f64]) -> Self {
        let mut shapes = Vec::with_capacity(scales.len() * ratios.len());
        for &s in scales {
            for &r in ratios {
                shapes.push((s * r.sqrt(), s / r.sqrt()));
            }
        }
        let mut boxes = Vec::with_capacity(height * width * shapes.len());
        for i in 0..height {
            for j in 0..width {
                let (cx, cy) = ((j as f64 + 0.5) * stride, (i as f64 + 0.5) * stride);
                boxes.extend(shapes.iter().map(|&(w, h)| BBox::from_center(cx, cy, w, h)));
            }
        }
        AnchorGrid {
            level,
            stride,
            scales: scales.to_vec(),
            ratios: ratios.to_vec(),
            height,
            width,
            boxes,
        }
    }
}

/// One single-scale, three-ratio anchor grid per pyramid level (P2..P6).
/// The anchor side on `P_k` is `base_scale·2^(k−2)`.
pub fn generate_anchors(level_shapes: &BTreeMap<usize, (usize, usize)>, base_scale: f64) -> Result<BTreeMap<usize, AnchorGrid>> {
    level_shapes
        .iter()
        .map(|(&k, &(h, w))| {
            if !(2..=6).contains(&k) {
                return Err(Error::UnknownLevel(k));
            }
            let stride = f64::powi(2.0, k as i32);
            let grid = AnchorGrid::tile(k, stride, h, w, &[level_anchor_scale(base_scale, k)], &ANCHOR_RATIOS);
            Ok((k, grid))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_points() {
        let a = BBox::new(0., 0., 2., 2.);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(5., 5., 6., 6.)), 0.0);
        assert!((iou(&a, &BBox::new(1., 1., 3., 3.)) - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(iou(&a, &BBox::new(1., 1., 1., 3.)), 0.0);
    }

    #[test]
    fn anchor_shapes() {
        let g = AnchorGrid::tile(4, 16.0, 1, 1, &[128.0], &[1.0]);
        let b = g.boxes[0];
        assert_eq!((b.width(), b.height()), (128.0, 128.0));
        let shifted = BBox::from_center(100.0, 100.0, 128.0, 128.0);
        assert_eq!(shifted, BBox::new(36., 36., 164., 164.));
        let g = AnchorGrid::tile(4, 16.0, 1, 1, &[128.0], &[2.0]);
        let b = g.boxes[0];
        assert!((b.width() - 181.019).abs() < 1e-3);
        assert!((b.height() - 90.510).abs() < 1e-3);
        assert!((b.area() - 128.0 * 128.0).abs() < 1e-3);
    }

    #[test]
    fn unknown_level_rejected() {
        let shapes = BTreeMap::from([(7, (1, 1))]);
        assert!(matches!(generate_anchors(&shapes, 32.0), Err(Error::UnknownLevel(7))));
    }

    #[test]
    fn encode_identity_and_log_ratio() {
        let a = BBox::from_center(50., 50., 100., 40.);
        assert_eq!(encode_deltas(&a, &a).unwrap(), [0.0; 4]);
        let t = BBox::from_center(50., 50., 200., 40.);
        let d = encode_deltas(&a, &t).unwrap();
        assert!((d[2] - 2f64.ln()).abs() < 1e-12);
        assert!(encode_deltas(&BBox::new(0., 0., 0., 5.), &t).is_err());
    }

    #[test]
    fn nms_identical_pair() {
        let b = BBox::new(0., 0., 10., 10.);
        assert_eq!(nms(&[b, b], &[0.9, 0.8], 0.7, 10), vec![0]);
        assert_eq!(nms(&[b], &[0.1], 0.7, 10), vec![0]);
    }

    #[test]
    fn clip_stays_inside() {
        let c = clip_box(&BBox::new(-5., 3., 140., 200.), 128, 128);
        assert_eq!(c, BBox::new(0., 3., 128., 128.));
    }
}
