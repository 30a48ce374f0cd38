//! Region-based detector on a feature pyramid: RoI-to-level assignment,
//! quantized RoI max pooling, a two-layer fully connected head, RoI sampling
//! and the detection loss.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::fpn::FeaturePyramid;
use crate::geometry::{encode_deltas, iou, BBox};
use crate::tensor::{Float, ParamStore, Tensor};

/// Pyramid level for a box of width `w` and height `h`:
/// `floor(k0 + log2(sqrt(w·h) / canonical))`, clamped to 2..=5.
pub fn assign_roi_level(b: &BBox, k0: i32, canonical: f64) -> Result<usize> {
    Ok(unclamped_roi_level(b, k0, canonical)?.clamp(2, 5) as usize)
}

/// The level formula before clamping.
pub fn unclamped_roi_level(b: &BBox, k0: i32, canonical: f64) -> Result<i32> {
    if b.is_degenerate() {
        return Err(Error::DegenerateBox(b.to_array()));
    }
    let scale = (b.width() * b.height()).sqrt();
    Ok((k0 as f64 + (scale / canonical).log2()).floor() as i32)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Roi {
    pub bbox: BBox,
    pub image: usize,
    pub level: usize,
}

/// Integer bin boundaries `[start, end)` of a quantized RoI, one per output row
/// (or column), clipped to `[0, extent)`.
pub fn roi_bins(lo: f64, hi: f64, stride: f64, extent: usize, bins: usize) -> Vec<(usize, usize)> {
    let start = (lo / stride).floor() as i64;
    let end = (hi / stride).ceil() as i64;
    let len = (end - start).max(1);
    let p = bins as i64;
    (0..p)
        .map(|b| {
            let s = start + (b * len).div_euclid(p);
            let e = start + ((b + 1) * len + p - 1).div_euclid(p);
            let s = s.clamp(0, extent as i64) as usize;
            let e = e.clamp(0, extent as i64) as usize;
            (s, e.max(s))
        })
        .collect()
}

/// Max-pools each box (image index, box) from an N×C×H×W map into a
/// C×out×out grid. Box edges are quantized outward to feature cells
/// (`floor(x1/stride)`, `ceil(x2/stride)`, at least one cell); empty bins
/// after clipping give 0. The result has shape R×C×out×out.
pub fn roi_pool<T: Float>(features: &Tensor<T>, rois: &[(usize, BBox)], stride: f64, out: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = match *features.shape() {
        [n, c, h, w] => [n, c, h, w],
        _ => {
            return Err(Error::InvalidShape {
                op: "roi_pool",
                shape: features.shape().to_vec(),
                reason: "expected N×C×H×W".into(),
            })
        }
    };
    if rois.is_empty() {
        return Err(Error::InvalidArgument("roi_pool needs at least one box".into()));
    }
    let x = features.data();
    let per_roi = c * out * out;
    let mut pooled = vec![T::zero(); rois.len() * per_roi];
    let mut argmax = vec![usize::MAX; pooled.len()];
    for (r, &(img, b)) in rois.iter().enumerate() {
        if img >= n {
            return Err(Error::InvalidArgument(format!("roi image index {img} out of range")));
        }
        if b.is_degenerate() {
            return Err(Error::DegenerateBox(b.to_array()));
        }
        if b.x2 / stride <= 0.0 || b.y2 / stride <= 0.0 || (b.x1 / stride).floor() >= w as f64 || (b.y1 / stride).floor() >= h as f64 {
            return Err(Error::BoxOutsideFeatureMap(b.to_array()));
        }
        let ybins = roi_bins(b.y1, b.y2, stride, h, out);
        let xbins = roi_bins(b.x1, b.x2, stride, w, out);
        for ch in 0..c {
            let plane = (img * c + ch) * h * w;
            for (py, &(ys, ye)) in ybins.iter().enumerate() {
                for (px, &(xs, xe)) in xbins.iter().enumerate() {
                    let o = r * per_roi + (ch * out + py) * out + px;
                    let mut best: Option<usize> = None;
                    for yy in ys..ye {
                        for xx in xs..xe {
                            let idx = plane + yy * w + xx;
                            if best.is_none_or(|bi| x[idx] > x[bi]) {
                                best = Some(idx);
                            }
                        }
                    }
                    if let Some(bi) = best {
                        pooled[o] = x[bi];
                        argmax[o] = bi;
                    }
                }
            }
        }
    }
    drop(x);
    let len = features.numel();
    Tensor::from_op(
        pooled,
        &[rois.len(), c, out, out],
        vec![features.clone()],
        Box::new(move |g| {
            let mut dx = vec![T::zero(); len];
            for (&src, &gv) in argmax.iter().zip(g) {
                if src != usize::MAX {
                    dx[src] += gv;
                }
            }
            vec![Some(dx)]
        }),
    )
}

/// Two hidden fully connected layers with ReLU, then sibling class-score and
/// class-specific box-delta layers. Shared by RoIs of every level.
#[derive(Debug, Clone)]
pub struct DetectorHead<T: Float> {
    pub num_classes: usize,
    pub pool_size: usize,
    fc1: (Tensor<T>, Tensor<T>),
    fc2: (Tensor<T>, Tensor<T>),
    cls: (Tensor<T>, Tensor<T>),
    reg: (Tensor<T>, Tensor<T>),
}

#[derive(Debug, Clone)]
pub struct DetectorOutput<T: Float> {
    /// R×(num_classes+1); column 0 is background.
    pub logits: Tensor<T>,
    /// R×(4·num_classes); class c ≥ 1 owns columns 4(c−1)..4c.
    pub deltas: Tensor<T>,
}

impl<T: Float> DetectorHead<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore<T>,
        prefix: &str,
        d: usize,
        pool_size: usize,
        fc_dim: usize,
        num_classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fin = d * pool_size * pool_size;
        let gain = std::f64::consts::SQRT_2;
        let mut layer = |name: &str, o: usize, i: usize, std: Option<f64>| -> Result<(Tensor<T>, Tensor<T>)> {
            let w = match std {
                Some(s) => store.add(
                    format!("{prefix}.{name}.weight"),
                    crate::tensor::init_normal(&[o, i], s, rng),
                    &[o, i],
                )?,
                None => store.add_weight(format!("{prefix}.{name}.weight"), &[o, i], gain, rng)?,
            };
            Ok((w, store.add_zeros(format!("{prefix}.{name}.bias"), &[o])?))
        };
        Ok(DetectorHead {
            num_classes,
            pool_size,
            fc1: layer("fc1", fc_dim, fin, None)?,
            fc2: layer("fc2", fc_dim, fc_dim, None)?,
            cls: layer("cls", num_classes + 1, fc_dim, Some(0.01))?,
            reg: layer("reg", 4 * num_classes, fc_dim, Some(0.001))?,
        })
    }

    /// Head applied to pooled R×C×P×P features.
    pub fn forward_pooled(&self, pooled: &Tensor<T>) -> Result<DetectorOutput<T>> {
        let r = pooled.shape()[0];
        let flat = pooled.reshape(&[r, pooled.numel() / r])?;
        let h = flat.fully_connected(&self.fc1.0, Some(&self.fc1.1))?.relu();
        let h = h.fully_connected(&self.fc2.0, Some(&self.fc2.1))?.relu();
        Ok(DetectorOutput {
            logits: h.fully_connected(&self.cls.0, Some(&self.cls.1))?,
            deltas: h.fully_connected(&self.reg.0, Some(&self.reg.1))?,
        })
    }
}

/// Pools every RoI from its assigned level and runs the shared head.
/// Outputs are in the order of `rois`.
pub fn detector_forward<T: Float>(pyramid: &FeaturePyramid<T>, rois: &[Roi], head: &DetectorHead<T>) -> Result<DetectorOutput<T>> {
    if rois.is_empty() {
        return Err(Error::InvalidArgument("detector_forward needs at least one RoI".into()));
    }
    let mut pooled = Vec::new();
    let mut order = Vec::with_capacity(rois.len());
    let mut levels: Vec<usize> = rois.iter().map(|r| r.level).collect();
    levels.sort_unstable();
    levels.dedup();
    for k in levels {
        let feat = pyramid.get(k)?;
        let members: Vec<usize> = (0..rois.len()).filter(|&i| rois[i].level == k).collect();
        let boxes: Vec<(usize, BBox)> = members.iter().map(|&i| (rois[i].image, rois[i].bbox)).collect();
        pooled.push(roi_pool(feat, &boxes, f64::powi(2.0, k as i32), head.pool_size)?);
        order.extend(members);
    }
    let pooled = if pooled.len() == 1 {
        pooled.pop().expect("one level")
    } else {
        Tensor::concat(&pooled)?
    };
    let out = head.forward_pooled(&pooled)?;
    // row `p` of `out` belongs to RoI `order[p]`
    let mut inverse = vec![0; order.len()];
    for (p, &i) in order.iter().enumerate() {
        inverse[i] = p;
    }
    if inverse.iter().enumerate().all(|(i, &p)| i == p) {
        return Ok(out);
    }
    Ok(DetectorOutput {
        logits: out.logits.select_rows(&inverse)?,
        deltas: out.deltas.select_rows(&inverse)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingConfig {
    pub per_image: usize,
    pub fg_fraction: f64,
    pub fg_iou: f64,
    pub bg_iou_lo: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            per_image: 512,
            fg_fraction: 0.25,
            fg_iou: 0.5,
            bg_iou_lo: 0.1,
        }
    }
}

/// A training RoI with its class (0 = background) and regression target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledRoi {
    pub bbox: BBox,
    pub label: usize,
    pub target: Option<[f64; 4]>,
    pub max_iou: f64,
}

/// Labels every candidate (proposals plus ground-truth boxes): foreground with
/// the class of its best box when IoU ≥ `fg_iou`, background when IoU lies in
/// `[bg_iou_lo, fg_iou)`; others are dropped. Without ground truth every
/// candidate is background.
pub fn label_rois(proposals: &[BBox], gt: &[(BBox, usize)], cfg: &SamplingConfig) -> Result<(Vec<LabeledRoi>, Vec<LabeledRoi>)> {
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for b in proposals.iter().chain(gt.iter().map(|(b, _)| b)) {
        if b.is_degenerate() {
            continue;
        }
        let best = gt
            .iter()
            .enumerate()
            .map(|(i, (g, _))| (i, iou(b, g)))
            .fold(None, |acc: Option<(usize, f64)>, (i, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((i, v)),
            });
        match best {
            Some((g, v)) if v >= cfg.fg_iou => fg.push(LabeledRoi {
                bbox: *b,
                label: gt[g].1,
                target: Some(encode_deltas(b, &gt[g].0)?),
                max_iou: v,
            }),
            Some((_, v)) if v >= cfg.bg_iou_lo => bg.push(LabeledRoi {
                bbox: *b,
                label: 0,
                target: None,
                max_iou: v,
            }),
            None => bg.push(LabeledRoi {
                bbox: *b,
                label: 0,
                target: None,
                max_iou: 0.0,
            }),
            Some(_) => {}
        }
    }
    Ok((fg, bg))
}

/// Random subset of [`label_rois`]: foreground capped at
/// `fg_fraction·per_image`, background fills the remainder.
pub fn sample_rois(proposals: &[BBox], gt: &[(BBox, usize)], cfg: &SamplingConfig, rng: &mut impl Rng) -> Result<Vec<LabeledRoi>> {
    let (fg, bg) = label_rois(proposals, gt, cfg)?;
    let n_fg = fg.len().min((cfg.fg_fraction * cfg.per_image as f64).floor() as usize);
    let n_bg = bg.len().min(cfg.per_image - n_fg);
    let mut pick = |pool: &[LabeledRoi], n: usize| {
        let mut idx = sample(rng, pool.len(), n).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| pool[i]).collect::<Vec<_>>()
    };
    let mut out = pick(&fg, n_fg);
    out.extend(pick(&bg, n_bg));
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct DetectorLoss<T: Float> {
    pub total: Tensor<T>,
    pub classification: f64,
    pub regression: f64,
}

/// Softmax cross-entropy over all RoIs plus smooth-L1 on the deltas of each
/// foreground RoI's own class, divided by the number of RoIs.
pub fn detector_loss<T: Float>(out: &DetectorOutput<T>, rois: &[LabeledRoi]) -> Result<DetectorLoss<T>> {
    let labels: Vec<usize> = rois.iter().map(|r| r.label).collect();
    let cls = out.logits.softmax_cross_entropy(&labels)?;
    let classification = cls.item()?.as_f64();
    let ncols = out.deltas.shape()[1];
    let mut idx = Vec::new();
    let mut targets = Vec::new();
    for (i, r) in rois.iter().enumerate() {
        if let (Some(t), true) = (r.target, r.label > 0) {
            for (c, &tc) in t.iter().enumerate() {
                idx.push(i * ncols + 4 * (r.label - 1) + c);
                targets.push(T::lit(tc));
            }
        }
    }
    if idx.is_empty() {
        return Ok(DetectorLoss {
            total: cls,
            classification,
            regression: 0.0,
        });
    }
    let reg = out
        .deltas
        .gather(&idx)?
        .smooth_l1(&targets)?
        .scale(T::one() / T::lit(rois.len() as f64));
    let regression = reg.item()?.as_f64();
    Ok(DetectorLoss {
        total: cls.add(&reg)?,
        classification,
        regression,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_points() {
        let sq = |s: f64| BBox::new(0., 0., s, s);
        assert_eq!(assign_roi_level(&sq(224.), 4, 224.).unwrap(), 4);
        assert_eq!(assign_roi_level(&sq(112.), 4, 224.).unwrap(), 3);
        assert_eq!(unclamped_roi_level(&sq(10.), 4, 224.).unwrap(), -1);
        assert_eq!(assign_roi_level(&sq(10.), 4, 224.).unwrap(), 2);
        assert_eq!(assign_roi_level(&sq(448.), 4, 224.).unwrap(), 5);
        assert!(assign_roi_level(&BBox::new(0., 0., 0., 4.), 4, 224.).is_err());
    }

    #[test]
    fn bins_cover_small_regions() {
        let bins = roi_bins(0.0, 12.0, 4.0, 16, 7);
        assert_eq!(bins.len(), 7);
        assert!(bins.iter().all(|&(s, e)| e > s));
        assert_eq!(bins.first().unwrap().0, 0);
        assert_eq!(bins.last().unwrap().1, 3);
    }

    #[test]
    fn roi_outside_map_is_an_error() {
        let f = Tensor::<f32>::zeros(&[1, 1, 4, 4]).unwrap();
        let r = roi_pool(&f, &[(0, BBox::new(100., 100., 120., 120.))], 4.0, 7);
        assert!(matches!(r, Err(Error::BoxOutsideFeatureMap(_))));
    }

    #[test]
    fn no_ground_truth_gives_background_only() {
        let props = [BBox::new(0., 0., 10., 10.), BBox::new(3., 3., 9., 20.)];
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let s = sample_rois(&props, &[], &SamplingConfig::default(), &mut rng).unwrap();
        assert_eq!(s.len(), 2);
        assert!(s.iter().all(|r| r.label == 0 && r.target.is_none()));
    }
}
