//! Brute-force oracles and randomized sweeps shared by the oracle tests and
//! the acceptance run. Each sweep returns the number of cases checked or the
//! first disagreement.
#![allow(dead_code)]

use std::collections::BTreeMap;

use fpn::detector::{assign_roi_level, roi_pool};
use fpn::geometry::{generate_anchors, iou, nms, BBox, ANCHOR_RATIOS};
use fpn::metrics::{average_precision, box_average_recall, Detection, EvalConfig, GroundTruth, SizeBin};
use fpn::tensor::{conv2d, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Sweep = Result<usize, String>;

pub fn pyramid_shapes(h: usize, w: usize, levels: std::ops::RangeInclusive<usize>) -> BTreeMap<usize, (usize, usize)> {
    levels.map(|k| (k, (h >> k, w >> k))).collect()
}

pub fn random_box(rng: &mut ChaCha8Rng, extent: f64) -> BBox {
    let x1 = rng.random_range(0.0..extent * 0.8);
    let y1 = rng.random_range(0.0..extent * 0.8);
    let w = rng.random_range(1.0..extent * 0.5);
    let h = rng.random_range(1.0..extent * 0.5);
    BBox::new(x1, y1, x1 + w, y1 + h)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

// ---- convolution ----

#[allow(clippy::too_many_arguments)]
pub fn naive_conv(
    x: &[f64],
    (n, cin, h, w): (usize, usize, usize, usize),
    wt: &[f64],
    (cout, k): (usize, usize),
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    for b in 0..n {
        for o in 0..cout {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bias[o];
                    for c in 0..cin {
                        for di in 0..k {
                            for dj in 0..k {
                                let y = (i * stride + di) as isize - pad as isize;
                                let xx = (j * stride + dj) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                acc += x[((b * cin + c) * h + y as usize) * w + xx as usize] * wt[((o * cin + c) * k + di) * k + dj];
                            }
                        }
                    }
                    out[((b * cout + o) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

/// conv2d against nested loops, to 1e-6, over random shapes, kernels,
/// strides and paddings.
pub fn conv2d_sweep(seed: u64, cases: usize) -> Sweep {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut done = 0;
    while done < cases {
        let n = rng.random_range(1..=2);
        let cin = rng.random_range(1..=4);
        let cout = rng.random_range(1..=4);
        let h = rng.random_range(1..=9);
        let w = rng.random_range(1..=9);
        let k = [1, 3, 5][rng.random_range(0..3)];
        let stride = rng.random_range(1..=2);
        let pad = rng.random_range(0..=k / 2 + 1);
        if h + 2 * pad < k || w + 2 * pad < k {
            continue;
        }
        let x = uniform(&mut rng, n * cin * h * w);
        let wt = uniform(&mut rng, cout * cin * k * k);
        let b = uniform(&mut rng, cout);
        let (want, oh, ow) = naive_conv(&x, (n, cin, h, w), &wt, (cout, k), &b, stride, pad);
        let xt = Tensor::<f64>::from_vec(x, &[n, cin, h, w]).unwrap();
        let wtt = Tensor::<f64>::from_vec(wt, &[cout, cin, k, k]).unwrap();
        let bt = Tensor::<f64>::from_vec(b, &[cout]).unwrap();
        let got = conv2d(&xt, &wtt, Some(&bt), stride, pad).map_err(|e| e.to_string())?;
        let label = format!("n{n} c{cin}->{cout} {h}x{w} k{k} s{stride} p{pad}");
        if got.shape() != [n, cout, oh, ow] {
            return Err(format!("{label}: shape {:?}", got.shape()));
        }
        if let Some((g, e)) = got.to_vec().iter().zip(&want).find(|(g, e)| (*g - *e).abs() >= 1e-6) {
            return Err(format!("{label}: {g} vs {e}"));
        }
        done += 1;
    }
    Ok(done)
}

// ---- RoI pooling ----

/// Bin membership written directly from the overlap condition: cell `c`
/// belongs to bin `p` of a quantized span `[start, start+len)` when the cell
/// overlaps `[start + p·len/P, start + (p+1)·len/P)` with positive length.
pub fn naive_roi_pool(x: &[f64], (c, h, w): (usize, usize, usize), b: &BBox, stride: f64, p: usize) -> Vec<f64> {
    let span = |lo: f64, hi: f64| {
        let start = (lo / stride).floor() as i64;
        let end = (hi / stride).ceil() as i64;
        (start, (end - start).max(1))
    };
    let (ys, ylen) = span(b.y1, b.y2);
    let (xs, xlen) = span(b.x1, b.x2);
    let inside = |cell: i64, start: i64, len: i64, bin: i64| {
        let pp = p as i64;
        pp * (cell - start) < (bin + 1) * len && pp * (cell + 1 - start) > bin * len
    };
    let mut out = vec![0.0; c * p * p];
    for ch in 0..c {
        for py in 0..p as i64 {
            for px in 0..p as i64 {
                let mut best: Option<f64> = None;
                for yy in 0..h as i64 {
                    if !inside(yy, ys, ylen, py) {
                        continue;
                    }
                    for xx in 0..w as i64 {
                        if inside(xx, xs, xlen, px) {
                            let v = x[(ch * h + yy as usize) * w + xx as usize];
                            best = Some(best.map_or(v, |m: f64| m.max(v)));
                        }
                    }
                }
                out[(ch * p + py as usize) * p + px as usize] = best.unwrap_or(0.0);
            }
        }
    }
    out
}

/// roi_pool against the overlap oracle, exactly, for boxes that straddle the
/// map borders as well as interior ones.
pub fn roi_pool_sweep(seed: u64, cases: usize) -> Sweep {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut done = 0;
    while done < cases {
        let (c, h, w) = (rng.random_range(1..=3), rng.random_range(1..=12), rng.random_range(1..=12));
        let stride = [4.0, 8.0, 16.0][rng.random_range(0..3)];
        let p = rng.random_range(1..=7);
        let x = uniform(&mut rng, c * h * w);
        let (iw, ih) = (w as f64 * stride, h as f64 * stride);
        let x1 = rng.random_range(-0.2 * iw..0.9 * iw);
        let y1 = rng.random_range(-0.2 * ih..0.9 * ih);
        let b = BBox::new(x1, y1, x1 + rng.random_range(0.5..1.2 * iw), y1 + rng.random_range(0.5..1.2 * ih));
        if b.x2 <= 0.0 || b.y2 <= 0.0 {
            continue;
        }
        let t = Tensor::<f64>::from_vec(x.clone(), &[1, c, h, w]).unwrap();
        let got = roi_pool(&t, &[(0, b)], stride, p).map_err(|e| e.to_string())?.to_vec();
        if got != naive_roi_pool(&x, (c, h, w), &b, stride, p) {
            return Err(format!("{b:?} stride {stride} on {h}x{w}, P={p}"));
        }
        done += 1;
    }
    Ok(done)
}

// ---- NMS ----

/// Classic formulation: take the best remaining box, delete everything that
/// overlaps it too much, repeat.
pub fn nms_oracle(boxes: &[BBox], scores: &[f64], t: f64, max_keep: usize) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..boxes.len()).collect();
    let mut keep = Vec::new();
    while !remaining.is_empty() && keep.len() < max_keep {
        let mut best = 0;
        for (pos, &i) in remaining.iter().enumerate() {
            let b = remaining[best];
            if scores[i] > scores[b] || (scores[i] == scores[b] && i < b) {
                best = pos;
            }
        }
        let top = remaining.remove(best);
        keep.push(top);
        remaining.retain(|&i| {
            let ix = (boxes[i].x2.min(boxes[top].x2) - boxes[i].x1.max(boxes[top].x1)).max(0.0);
            let iy = (boxes[i].y2.min(boxes[top].y2) - boxes[i].y1.max(boxes[top].y1)).max(0.0);
            let inter = ix * iy;
            let union = boxes[i].area() + boxes[top].area() - inter;
            inter / union <= t
        });
    }
    keep
}

pub fn nms_sweep(seed: u64, cases: usize) -> Sweep {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let n = rng.random_range(0..40);
        let boxes: Vec<BBox> = (0..n).map(|_| random_box(&mut rng, 60.0)).collect();
        // coarse scores so ties occur
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64 / 8.0).collect();
        let t = rng.random_range(0.1..0.9);
        let max_keep = rng.random_range(1..50);
        if nms(&boxes, &scores, t, max_keep) != nms_oracle(&boxes, &scores, t, max_keep) {
            return Err(format!("case {case}: {n} boxes at threshold {t}"));
        }
    }
    Ok(cases)
}

// ---- anchors ----

pub fn anchor_sweep(seed: u64, cases: usize) -> Sweep {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cases {
        let h = 32 * rng.random_range(1..=6);
        let w = 32 * rng.random_range(1..=6);
        let base = rng.random_range(4.0..40.0);
        let grids = generate_anchors(&pyramid_shapes(h, w, 2..=6), base).map_err(|e| e.to_string())?;
        for (&k, g) in &grids {
            let stride = (1usize << k) as f64;
            let side = base * (1usize << (k - 2)) as f64;
            let mut want = Vec::new();
            for i in 0..h >> k {
                for j in 0..w >> k {
                    for r in ANCHOR_RATIOS {
                        let (aw, ah) = (side * r.sqrt(), side / r.sqrt());
                        let (cx, cy) = (stride * (j as f64 + 0.5), stride * (i as f64 + 0.5));
                        want.push(BBox::new(cx - aw / 2.0, cy - ah / 2.0, cx + aw / 2.0, cy + ah / 2.0));
                    }
                }
            }
            if g.boxes != want {
                return Err(format!("level {k} of {h}x{w} at base {base}"));
            }
        }
    }
    Ok(cases)
}

// ---- RoI level assignment ----

/// Smallest-first search for the level: the largest integer k with
/// 224·2^(k−4) ≤ sqrt(wh), clamped to 2..=5.
pub fn level_oracle(b: &BBox) -> usize {
    let area = b.width() * b.height();
    let mut k = -20i32;
    while area >= (224.0 * f64::powi(2.0, k + 1 - 4)).powi(2) {
        k += 1;
    }
    k.clamp(2, 5) as usize
}

pub fn roi_level_sweep(seed: u64, cases: usize) -> Sweep {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cases {
        let w = f64::powf(2.0, rng.random_range(1.0..11.0));
        let h = f64::powf(2.0, rng.random_range(1.0..11.0));
        let b = BBox::new(3.0, 5.0, 3.0 + w, 5.0 + h);
        let got = assign_roi_level(&b, 4, 224.).map_err(|e| e.to_string())?;
        if got != level_oracle(&b) {
            return Err(format!("{w}x{h}: level {got}, oracle {}", level_oracle(&b)));
        }
    }
    Ok(cases)
}

// ---- AR and AP ----

fn metric_box(rng: &mut ChaCha8Rng) -> BBox {
    let side = [12.0, 24.0, 40.0, 70.0, 110.0][rng.random_range(0..5)] * rng.random_range(0.8..1.25);
    let (x, y) = (rng.random_range(0.0..200.0), rng.random_range(0.0..200.0));
    BBox::new(x, y, x + side * rng.random_range(0.6..1.6), y + side)
}

fn jitter(rng: &mut ChaCha8Rng, b: &BBox) -> BBox {
    let s = 0.25 * b.width().min(b.height());
    BBox::new(
        b.x1 + rng.random_range(-s..s),
        b.y1 + rng.random_range(-s..s),
        b.x2 + rng.random_range(-s..s),
        b.y2 + rng.random_range(-s..s),
    )
}

/// Recall at every threshold by exhaustive bookkeeping: walk proposals in
/// order, each claims the best still-free GT it covers.
pub fn oracle_recall(props: &[Vec<BBox>], gts: &[Vec<BBox>], budget: usize, bin: Option<SizeBin>) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for t in EvalConfig::default().iou_thresholds {
        for (p, g) in props.iter().zip(gts) {
            let mut taken = vec![false; g.len()];
            for prop in p.iter().take(budget) {
                let mut choice = None;
                let mut best = -1.0;
                for (j, gt) in g.iter().enumerate() {
                    let v = iou(prop, gt);
                    if !taken[j] && v >= t && v > best {
                        best = v;
                        choice = Some(j);
                    }
                }
                if let Some(j) = choice {
                    taken[j] = true;
                }
            }
            for (j, gt) in g.iter().enumerate() {
                if bin.is_none_or(|b| SizeBin::of_area(gt.area()) == b) {
                    total += 1;
                    hit += taken[j] as usize;
                }
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// Five-image instances: jittered copies of each GT plus clutter, in a fixed
/// random order standing in for the score ranking.
pub fn recall_sweep(seed: u64, cases: usize) -> Sweep {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = EvalConfig::default();
    for case in 0..cases {
        let mut props = Vec::new();
        let mut gts = Vec::new();
        for _ in 0..5 {
            let g: Vec<BBox> = (0..rng.random_range(0..5)).map(|_| metric_box(&mut rng)).collect();
            let mut p: Vec<BBox> = g.iter().flat_map(|b| [jitter(&mut rng, b), jitter(&mut rng, b)]).collect();
            p.extend((0..rng.random_range(0..6)).map(|_| metric_box(&mut rng)));
            for i in (1..p.len()).rev() {
                p.swap(i, rng.random_range(0..=i));
            }
            props.push(p);
            gts.push(g);
        }
        let budget = rng.random_range(1..12);
        let got = box_average_recall(&props, &gts, budget, &cfg).map_err(|e| e.to_string())?;
        let pairs = [
            (got.ar, None),
            (got.ar_s, Some(SizeBin::Small)),
            (got.ar_m, Some(SizeBin::Medium)),
            (got.ar_l, Some(SizeBin::Large)),
        ];
        for (v, bin) in pairs {
            let want = oracle_recall(&props, &gts, budget, bin);
            if (v - want).abs() > 1e-12 {
                return Err(format!("case {case}, bin {bin:?}: {v} vs {want}"));
            }
        }
    }
    Ok(cases)
}

/// AP over all sizes: detections sorted by score, greedy matching to the best
/// free same-class GT, 101-point precision taken as the maximum precision at
/// any recall at least r.
pub fn oracle_ap(dets: &[Detection], gts: &[GroundTruth], ts: &[f64]) -> f64 {
    let mut classes: Vec<usize> = gts.iter().map(|g| g.class).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut per_class = Vec::new();
    for &c in &classes {
        let mut d: Vec<&Detection> = dets.iter().filter(|d| d.class == c).collect();
        d.sort_by(|a, b| b.score.total_cmp(&a.score));
        let g: Vec<&GroundTruth> = gts.iter().filter(|g| g.class == c).collect();
        let mut aps = Vec::new();
        for &t in ts {
            let mut taken = vec![false; g.len()];
            let mut points = Vec::new();
            let mut tp = 0.0;
            for (rank, det) in d.iter().enumerate() {
                let mut choice = None;
                let mut best = -1.0;
                for (j, gt) in g.iter().enumerate() {
                    let v = iou(&det.bbox, &gt.bbox);
                    if gt.image == det.image && !taken[j] && v >= t && v > best {
                        best = v;
                        choice = Some(j);
                    }
                }
                if let Some(j) = choice {
                    taken[j] = true;
                    tp += 1.0;
                }
                points.push((tp / g.len() as f64, tp / (rank + 1) as f64));
            }
            let sum: f64 = (0..=100)
                .map(|r| {
                    let r = r as f64 / 100.0;
                    points
                        .iter()
                        .filter(|(rec, _)| *rec >= r - 1e-12)
                        .map(|(_, p)| *p)
                        .fold(0.0, f64::max)
                })
                .sum();
            aps.push(sum / 101.0);
        }
        per_class.push(aps.iter().sum::<f64>() / aps.len() as f64);
    }
    if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().sum::<f64>() / per_class.len() as f64
    }
}

/// Five-image, two-class instances with misclassified and clutter detections.
pub fn precision_sweep(seed: u64, cases: usize) -> Sweep {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = EvalConfig::default();
    for case in 0..cases {
        let mut dets = Vec::new();
        let mut gts = Vec::new();
        for image in 0..5 {
            for _ in 0..rng.random_range(0..4) {
                let g = GroundTruth {
                    image,
                    class: rng.random_range(1..=2),
                    bbox: metric_box(&mut rng),
                };
                for _ in 0..rng.random_range(0..3) {
                    let class = if rng.random_bool(0.8) { g.class } else { 3 - g.class };
                    dets.push(Detection {
                        image,
                        class,
                        score: rng.random(),
                        bbox: jitter(&mut rng, &g.bbox),
                    });
                }
                gts.push(g);
            }
            for _ in 0..rng.random_range(0..3) {
                dets.push(Detection {
                    image,
                    class: rng.random_range(1..=2),
                    score: rng.random(),
                    bbox: metric_box(&mut rng),
                });
            }
        }
        let got = average_precision(&dets, &gts, &cfg);
        for (v, ts) in [(got.ap, cfg.iou_thresholds.clone()), (got.ap50, vec![0.5])] {
            let want = oracle_ap(&dets, &gts, &ts);
            if (v - want).abs() > 1e-12 {
                return Err(format!("case {case} at {} thresholds: {v} vs {want}", ts.len()));
            }
        }
    }
    Ok(cases)
}
