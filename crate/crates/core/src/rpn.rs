//! Region proposal network over a feature pyramid.
//!
//! One head (3×3 conv + ReLU, then sibling 1×1 objectness and box-delta
//! convolutions) slides over every level. Objectness is one sigmoid logit per
//! anchor. Labels come purely from IoU against ground truth over the anchors
//! of all levels pooled together.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{argsort_desc, clip_box, decode_deltas, encode_deltas, iou, nms, AnchorGrid, BBox};
use crate::tensor::{conv2d, Float, ParamStore, Tensor};

/// Objectness and box-delta convolutions shared by every level it is applied to.
#[derive(Debug, Clone)]
pub struct RpnHead<T: Float> {
    pub anchors_per_cell: usize,
    conv_w: Tensor<T>,
    conv_b: Tensor<T>,
    cls_w: Tensor<T>,
    cls_b: Tensor<T>,
    reg_w: Tensor<T>,
    reg_b: Tensor<T>,
}

/// Raw head outputs for one level: logits N×A×H×W and deltas N×4A×H×W.
#[derive(Debug, Clone)]
pub struct LevelOutput<T: Float> {
    pub logits: Tensor<T>,
    pub deltas: Tensor<T>,
}

pub type RpnOutput<T> = BTreeMap<usize, LevelOutput<T>>;

impl<T: Float> RpnHead<T> {
    pub fn new(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_channels: usize,
        hidden: usize,
        anchors_per_cell: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let a = anchors_per_cell;
        Ok(RpnHead {
            anchors_per_cell: a,
            conv_w: store.add_weight(
                format!("{prefix}.conv.weight"),
                &[hidden, in_channels, 3, 3],
                std::f64::consts::SQRT_2,
                rng,
            )?,
            conv_b: store.add_zeros(format!("{prefix}.conv.bias"), &[hidden])?,
            cls_w: store.add(
                format!("{prefix}.cls.weight"),
                crate::tensor::init_normal(&[a, hidden, 1, 1], 0.01, rng),
                &[a, hidden, 1, 1],
            )?,
            cls_b: store.add_zeros(format!("{prefix}.cls.bias"), &[a])?,
            reg_w: store.add(
                format!("{prefix}.reg.weight"),
                crate::tensor::init_normal(&[4 * a, hidden, 1, 1], 0.01, rng),
                &[4 * a, hidden, 1, 1],
            )?,
            reg_b: store.add_zeros(format!("{prefix}.reg.bias"), &[4 * a])?,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.conv_w.shape()[1]
    }

    pub fn forward(&self, features: &Tensor<T>) -> Result<LevelOutput<T>> {
        if features.shape().get(1) != Some(&self.in_channels()) {
            return Err(Error::ShapeMismatch {
                op: "rpn_forward",
                lhs: features.shape().to_vec(),
                rhs: self.conv_w.shape().to_vec(),
            });
        }
        let h = conv2d(features, &self.conv_w, Some(&self.conv_b), 1, 1)?.relu();
        Ok(LevelOutput {
            logits: conv2d(&h, &self.cls_w, Some(&self.cls_b), 1, 0)?,
            deltas: conv2d(&h, &self.reg_w, Some(&self.reg_b), 1, 0)?,
        })
    }
}

/// Either one head for all levels or one head per level.
#[derive(Debug, Clone)]
pub enum RpnHeads<T: Float> {
    Shared(RpnHead<T>),
    PerLevel(BTreeMap<usize, RpnHead<T>>),
}

impl<T: Float> RpnHeads<T> {
    pub fn head_for(&self, level: usize) -> Result<&RpnHead<T>> {
        match self {
            RpnHeads::Shared(h) => Ok(h),
            RpnHeads::PerLevel(m) => m.get(&level).ok_or(Error::UnknownLevel(level)),
        }
    }
}

/// Applies the head(s) to each feature level.
pub fn rpn_forward<T: Float>(features: &BTreeMap<usize, Tensor<T>>, heads: &RpnHeads<T>) -> Result<RpnOutput<T>> {
    features.iter().map(|(&k, f)| Ok((k, heads.head_for(k)?.forward(f)?))).collect()
}

/// Anchors of every level, pooled in ascending level order.
#[derive(Debug, Clone)]
pub struct AnchorSet {
    pub grids: BTreeMap<usize, AnchorGrid>,
}

impl AnchorSet {
    pub fn new(grids: BTreeMap<usize, AnchorGrid>) -> Self {
        AnchorSet { grids }
    }

    pub fn len(&self) -> usize {
        self.grids.values().map(AnchorGrid::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.grids.values().flat_map(|g| g.boxes.iter().copied()).collect()
    }

    /// `(level, index within level)` for each pooled index.
    pub fn locations(&self) -> Vec<(usize, usize)> {
        self.grids.iter().flat_map(|(&k, g)| (0..g.len()).map(move |i| (k, i))).collect()
    }
}

/// Flat NCHW offset of an anchor's objectness logit in its level output.
pub fn logit_offset(grid: &AnchorGrid, image: usize, anchor: usize) -> usize {
    let a_per = grid.anchors_per_cell();
    let (a, i, j) = grid.locate(anchor);
    ((image * a_per + a) * grid.height + i) * grid.width + j
}

/// Flat NCHW offset of delta component `c` (0..4) of an anchor.
pub fn delta_offset(grid: &AnchorGrid, image: usize, anchor: usize, c: usize) -> usize {
    let a_per = grid.anchors_per_cell();
    let (a, i, j) = grid.locate(anchor);
    ((image * 4 * a_per + 4 * a + c) * grid.height + i) * grid.width + j
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug, Clone)]
pub struct AnchorLabels {
    pub labels: Vec<AnchorLabel>,
    /// Ground-truth index for positives (the anchor's highest-IoU box).
    pub matched: Vec<Option<usize>>,
    pub max_iou: Vec<f64>,
}

impl AnchorLabels {
    pub fn positives(&self) -> Vec<usize> {
        self.indices(AnchorLabel::Positive)
    }

    pub fn negatives(&self) -> Vec<usize> {
        self.indices(AnchorLabel::Negative)
    }

    fn indices(&self, which: AnchorLabel) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == which).then_some(i))
            .collect()
    }
}

/// IoU-based labels: negative when max IoU < `negative_iou`; positive when
/// IoU > `positive_iou` with some box, or when the anchor attains a box's
/// highest IoU (all tied anchors); otherwise ignored.
pub fn assign_anchor_labels(anchors: &[BBox], gt: &[BBox], positive_iou: f64, negative_iou: f64) -> Result<AnchorLabels> {
    if anchors.is_empty() {
        return Err(Error::InvalidArgument("no anchors to label".into()));
    }
    let n = anchors.len();
    let mut max_iou = vec![0.0; n];
    let mut argmax = vec![None; n];
    let mut gt_best = vec![0.0f64; gt.len()];
    let ious: Vec<Vec<f64>> = anchors.iter().map(|a| gt.iter().map(|g| iou(a, g)).collect()).collect();
    for (i, row) in ious.iter().enumerate() {
        for (g, &v) in row.iter().enumerate() {
            if v > max_iou[i] {
                max_iou[i] = v;
                argmax[i] = Some(g);
            }
            gt_best[g] = gt_best[g].max(v);
        }
    }
    let mut labels = vec![AnchorLabel::Ignore; n];
    for i in 0..n {
        if max_iou[i] < negative_iou {
            labels[i] = AnchorLabel::Negative;
        }
        if max_iou[i] > positive_iou {
            labels[i] = AnchorLabel::Positive;
        }
    }
    for (i, row) in ious.iter().enumerate() {
        if row.iter().zip(&gt_best).any(|(&v, &best)| best > 0.0 && v == best) {
            labels[i] = AnchorLabel::Positive;
        }
    }
    let matched = labels
        .iter()
        .zip(&argmax)
        .map(|(&l, &m)| if l == AnchorLabel::Positive { m } else { None })
        .collect();
    Ok(AnchorLabels { labels, matched, max_iou })
}

/// Per-image anchor subsample: up to `batch/2` positives, negatives fill the rest.
pub fn sample_anchors(labels: &AnchorLabels, batch: usize, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
    let pos = labels.positives();
    let neg = labels.negatives();
    let n_pos = pos.len().min(batch / 2);
    let mut pos_s: Vec<usize> = sample(rng, pos.len(), n_pos).into_iter().map(|i| pos[i]).collect();
    let n_neg = neg.len().min(batch - n_pos);
    let mut neg_s: Vec<usize> = sample(rng, neg.len(), n_neg).into_iter().map(|i| neg[i]).collect();
    pos_s.sort_unstable();
    neg_s.sort_unstable();
    (pos_s, neg_s)
}

#[derive(Debug, Clone)]
pub struct RpnLoss<T: Float> {
    pub total: Tensor<T>,
    pub classification: f64,
    pub regression: f64,
    pub num_positive: usize,
    pub num_sampled: usize,
}

/// Per level: logit indices, logit targets, delta indices, delta targets.
type LevelTargets<T> = (Vec<usize>, Vec<T>, Vec<usize>, Vec<T>);

/// Sampled objectness BCE plus smooth-L1 on positive deltas, both summed
/// over images and divided by the number of sampled anchors.
pub fn rpn_loss<T: Float>(
    output: &RpnOutput<T>,
    anchors: &AnchorSet,
    labels: &[AnchorLabels],
    gt: &[Vec<BBox>],
    batch_anchors: usize,
    rng: &mut impl Rng,
) -> Result<RpnLoss<T>> {
    let locations = anchors.locations();
    let pooled = anchors.boxes();
    let mut per_level: BTreeMap<usize, LevelTargets<T>> = BTreeMap::new();
    let mut num_positive = 0;
    let mut num_sampled = 0;
    for (img, lab) in labels.iter().enumerate() {
        if lab.labels.len() != pooled.len() {
            return Err(Error::InvalidArgument("anchor labels not aligned with anchors".into()));
        }
        let (pos, neg) = sample_anchors(lab, batch_anchors, rng);
        num_positive += pos.len();
        num_sampled += pos.len() + neg.len();
        for (&a, target) in pos.iter().map(|a| (a, T::one())).chain(neg.iter().map(|a| (a, T::zero()))) {
            let (k, local) = locations[a];
            let grid = &anchors.grids[&k];
            let e = per_level.entry(k).or_default();
            e.0.push(logit_offset(grid, img, local));
            e.1.push(target);
        }
        for &a in &pos {
            let (k, local) = locations[a];
            let grid = &anchors.grids[&k];
            let g = lab.matched[a].expect("positive anchors are matched");
            let t = encode_deltas(&pooled[a], &gt[img][g])?;
            let e = per_level.entry(k).or_default();
            for (c, &tc) in t.iter().enumerate() {
                e.2.push(delta_offset(grid, img, local, c));
                e.3.push(T::lit(tc));
            }
        }
    }
    if num_sampled == 0 {
        return Err(Error::InvalidArgument("no anchors sampled".into()));
    }
    let norm = T::one() / T::lit(num_sampled as f64);
    let mut cls_terms = Vec::new();
    let mut reg_terms = Vec::new();
    for (k, (li, lt, di, dt)) in &per_level {
        let out = output.get(k).ok_or(Error::UnknownLevel(*k))?;
        if !li.is_empty() {
            // mean over this level's samples, re-weighted to a global mean
            let w = T::lit(li.len() as f64) * norm;
            cls_terms.push(out.logits.gather(li)?.bce_with_logits(lt)?.scale(w));
        }
        if !di.is_empty() {
            reg_terms.push(out.deltas.gather(di)?.smooth_l1(dt)?.scale(norm));
        }
    }
    let sum = |terms: Vec<Tensor<T>>| -> Result<Option<Tensor<T>>> {
        let mut it = terms.into_iter();
        let Some(mut acc) = it.next() else { return Ok(None) };
        for t in it {
            acc = acc.add(&t)?;
        }
        Ok(Some(acc))
    };
    let cls = sum(cls_terms)?.expect("at least one sampled anchor");
    let classification = cls.item()?.as_f64();
    let (total, regression) = match sum(reg_terms)? {
        Some(reg) => {
            let r = reg.item()?.as_f64();
            (cls.add(&reg)?, r)
        }
        None => (cls, 0.0),
    };
    Ok(RpnLoss {
        total,
        classification,
        regression,
        num_positive,
        num_sampled,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalConfig {
    pub pre_nms_top_n: Option<usize>,
    pub nms_threshold: Option<f64>,
    pub post_nms_top_n: Option<usize>,
    /// Boxes with a side shorter than this (after clipping) are dropped.
    pub min_size: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            pre_nms_top_n: Some(1000),
            nms_threshold: Some(0.7),
            post_nms_top_n: Some(1000),
            min_size: 1.0,
        }
    }
}

/// Proposals for one image of the batch, sorted by descending objectness.
pub fn generate_proposals<T: Float>(
    output: &RpnOutput<T>,
    anchors: &AnchorSet,
    image: usize,
    image_size: (usize, usize),
    cfg: &ProposalConfig,
) -> Result<Vec<Proposal>> {
    let (img_h, img_w) = image_size;
    let mut boxes = Vec::new();
    let mut scores = Vec::new();
    for (k, grid) in &anchors.grids {
        let out = output.get(k).ok_or(Error::UnknownLevel(*k))?;
        let logits = out.logits.data();
        let deltas = out.deltas.data();
        let level_scores: Vec<f64> = (0..grid.len())
            .map(|a| crate::tensor::sigmoid_f64(logits[logit_offset(grid, image, a)].as_f64()))
            .collect();
        let order = argsort_desc(&level_scores);
        let take = cfg.pre_nms_top_n.unwrap_or(order.len()).min(order.len());
        for &a in &order[..take] {
            let d = [0, 1, 2, 3].map(|c| deltas[delta_offset(grid, image, a, c)].as_f64());
            let b = clip_box(&decode_deltas(&grid.boxes[a], &d)?, img_w, img_h);
            if b.width() < cfg.min_size || b.height() < cfg.min_size {
                continue;
            }
            boxes.push(b);
            scores.push(level_scores[a]);
        }
    }
    let keep = match cfg.nms_threshold {
        Some(t) => nms(&boxes, &scores, t, cfg.post_nms_top_n.unwrap_or(usize::MAX)),
        None => {
            let mut order = argsort_desc(&scores);
            order.truncate(cfg.post_nms_top_n.unwrap_or(usize::MAX));
            order
        }
    };
    Ok(keep
        .into_iter()
        .map(|i| Proposal {
            bbox: boxes[i],
            score: scores[i],
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_ground_truth_means_all_negative() {
        let anchors = vec![BBox::new(0., 0., 10., 10.), BBox::new(5., 5., 20., 20.)];
        let l = assign_anchor_labels(&anchors, &[], 0.7, 0.3).unwrap();
        assert!(l.labels.iter().all(|&x| x == AnchorLabel::Negative));
    }

    #[test]
    fn empty_anchor_list_is_an_error() {
        assert!(assign_anchor_labels(&[], &[BBox::new(0., 0., 1., 1.)], 0.7, 0.3).is_err());
    }

    #[test]
    fn argmax_ties_all_positive() {
        let gt = BBox::new(0., 0., 10., 10.);
        let anchors = vec![
            BBox::new(-5., 0., 5., 10.),
            BBox::new(5., 0., 15., 10.),
            BBox::new(50., 50., 60., 60.),
        ];
        let l = assign_anchor_labels(&anchors, &[gt], 0.7, 0.3).unwrap();
        assert_eq!(l.labels, vec![AnchorLabel::Positive, AnchorLabel::Positive, AnchorLabel::Negative]);
    }

    #[test]
    fn sampling_caps_positives_at_half() {
        let labels = AnchorLabels {
            labels: (0..100)
                .map(|i| if i < 60 { AnchorLabel::Positive } else { AnchorLabel::Negative })
                .collect(),
            matched: vec![Some(0); 100],
            max_iou: vec![0.0; 100],
        };
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let (p, n) = sample_anchors(&labels, 64, &mut rng);
        assert_eq!((p.len(), n.len()), (32, 32));
    }
}
