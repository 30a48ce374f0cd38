//! Fully convolutional segment proposals on a feature pyramid.
//!
//! Two small MLPs slide over every level: one with a 5×5 input window for
//! objects at whole octaves of the base scale and one with a 7×7 window for
//! the half octaves in between. Each predicts an objectness score and a
//! square mask covering a fixed image region centred on the cell. Training
//! evaluates the MLPs only at sampled cells by gathering their input windows,
//! which is equivalent to the dense convolution at those cells.

use std::collections::BTreeMap;
use std::f64::consts::SQRT_2;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fpn::FeaturePyramid;
use crate::geometry::{argsort_desc, BBox};
use crate::tensor::{conv2d, init_normal, sigmoid_f64, Float, ParamStore, Tensor};

/// Which of the two MLPs handles a scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MaskHeadKind {
    /// 5×5 window, whole-octave scales.
    Full,
    /// 7×7 window, half-octave scales.
    Half,
}

impl MaskHeadKind {
    pub fn kernel(self) -> usize {
        match self {
            MaskHeadKind::Full => 5,
            MaskHeadKind::Half => 7,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MaskHeadKind::Full => "full",
            MaskHeadKind::Half => "half",
        }
    }
}

/// Scale bookkeeping: canonical object sizes and image regions per level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskGeometry {
    /// Canonical object scale on P2 (whole octaves follow as ×2 per level).
    pub base_scale: f64,
    /// Region side relative to the canonical object scale.
    pub padding_factor: f64,
}

impl Default for MaskGeometry {
    fn default() -> Self {
        MaskGeometry {
            base_scale: 32.0,
            padding_factor: 1.25,
        }
    }
}

/// Number of grid scales: whole and half octaves from P2 through P6.
pub const SCALE_GRID_POINTS: usize = 9;

impl MaskGeometry {
    pub fn stride(level: usize) -> f64 {
        f64::powi(2.0, level as i32)
    }

    /// Canonical object scale handled by `(level, head)`.
    pub fn canonical_scale(&self, level: usize, head: MaskHeadKind) -> f64 {
        let s = self.base_scale * f64::powi(2.0, level as i32 - 2);
        match head {
            MaskHeadKind::Full => s,
            MaskHeadKind::Half => s * SQRT_2,
        }
    }

    /// Side of the square image region a mask predicted at `(level, head)` covers.
    pub fn region_size(&self, level: usize, head: MaskHeadKind) -> f64 {
        self.canonical_scale(level, head) * self.padding_factor
    }

    /// Region of cell `(i, j)` on `level`, centred at the cell's image location.
    pub fn region(&self, level: usize, head: MaskHeadKind, i: usize, j: usize) -> BBox {
        let s = Self::stride(level);
        let r = self.region_size(level, head);
        BBox::from_center((j as f64 + 0.5) * s, (i as f64 + 0.5) * s, r, r)
    }

    /// Maps a mask of extent `w × h` to the `(level, head)` whose canonical
    /// scale is nearest to `max(w, h)` in log space (exact midpoints go to the
    /// smaller scale). Scales outside the grid's half-step margin give `None`.
    pub fn scale_to_level(&self, w: f64, h: f64) -> Result<Option<(usize, MaskHeadKind)>> {
        if !(w > 0.0 && h > 0.0) {
            return Err(Error::InvalidArgument(format!("mask extent {w}×{h} must be positive")));
        }
        let x = 2.0 * (w.max(h) / self.base_scale).log2();
        let last = (SCALE_GRID_POINTS - 1) as f64;
        if !(-0.5..=last + 0.5).contains(&x) {
            return Ok(None);
        }
        let idx = ((x - 0.5).ceil()).clamp(0.0, last) as usize;
        let head = if idx.is_multiple_of(2) {
            MaskHeadKind::Full
        } else {
            MaskHeadKind::Half
        };
        Ok(Some((2 + idx / 2, head)))
    }

    /// Heads that exist on `level`: the 5×5 MLP everywhere, the 7×7 MLP
    /// on levels that own a half-octave grid point.
    pub fn heads_on(&self, level: usize) -> &'static [MaskHeadKind] {
        let idx = 2 * (level - 2);
        if idx + 1 < SCALE_GRID_POINTS {
            &[MaskHeadKind::Full, MaskHeadKind::Half]
        } else {
            &[MaskHeadKind::Full]
        }
    }
}

/// Binary image-sized mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v as u8;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Tight pixel bounds `[x1, x2) × [y1, y2)` of the set pixels.
    pub fn bounds(&self) -> Option<BBox> {
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    x1 = x1.min(x);
                    y1 = y1.min(y);
                    x2 = x2.max(x + 1);
                    y2 = y2.max(y + 1);
                }
            }
        }
        (x1 != usize::MAX).then(|| BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64))
    }

    /// Fraction of the axis-aligned square `[x0,x1)×[y0,y1)` covered by set
    /// pixels; each pixel occupies a unit square.
    pub fn coverage(&self, x0: f64, y0: f64, x1: f64, y1: f64) -> f64 {
        let area = (x1 - x0) * (y1 - y0);
        if area <= 0.0 {
            return 0.0;
        }
        let px0 = x0.floor().max(0.0) as usize;
        let py0 = y0.floor().max(0.0) as usize;
        let px1 = (x1.ceil().max(0.0) as usize).min(self.width);
        let py1 = (y1.ceil().max(0.0) as usize).min(self.height);
        let mut covered = 0.0;
        for py in py0..py1 {
            let oy = (y1.min(py as f64 + 1.0) - y0.max(py as f64)).max(0.0);
            if oy == 0.0 {
                continue;
            }
            for px in px0..px1 {
                if self.get(px, py) {
                    covered += oy * (x1.min(px as f64 + 1.0) - x0.max(px as f64)).max(0.0);
                }
            }
        }
        covered / area
    }
}

/// Rasterizes `mask` onto a `res×res` grid over `region`: a grid cell is set
/// when more than half of its image footprint is covered.
pub fn rasterize(mask: &BinaryMask, region: &BBox, res: usize) -> Vec<u8> {
    let cw = region.width() / res as f64;
    let ch = region.height() / res as f64;
    let mut out = vec![0u8; res * res];
    for v in 0..res {
        for u in 0..res {
            let x0 = region.x1 + u as f64 * cw;
            let y0 = region.y1 + v as f64 * ch;
            out[v * res + u] = (mask.coverage(x0, y0, x0 + cw, y0 + ch) > 0.5) as u8;
        }
    }
    out
}

/// Score and mask MLP shared across levels, stored as convolution kernels.
#[derive(Debug, Clone)]
pub struct MaskHead<T: Float> {
    pub kind: MaskHeadKind,
    pub resolution: usize,
    hidden_w: Tensor<T>,
    hidden_b: Tensor<T>,
    mask_w: Tensor<T>,
    mask_b: Tensor<T>,
    score_w: Tensor<T>,
    score_b: Tensor<T>,
}

/// Dense outputs for one level and head: score logits N×1×H×W and mask
/// logits N×res²×H×W.
#[derive(Debug, Clone)]
pub struct MaskLevelOutput<T: Float> {
    pub scores: Tensor<T>,
    pub masks: Tensor<T>,
}

pub type MaskOutputs<T> = BTreeMap<(usize, MaskHeadKind), MaskLevelOutput<T>>;

impl<T: Float> MaskHead<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore<T>,
        prefix: &str,
        kind: MaskHeadKind,
        d: usize,
        hidden: usize,
        resolution: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let k = kind.kernel();
        let r2 = resolution * resolution;
        let p = format!("{prefix}.{}", kind.name());
        Ok(MaskHead {
            kind,
            resolution,
            hidden_w: store.add_weight(format!("{p}.hidden.weight"), &[hidden, d, k, k], SQRT_2, rng)?,
            hidden_b: store.add_zeros(format!("{p}.hidden.bias"), &[hidden])?,
            mask_w: store.add_weight(format!("{p}.mask.weight"), &[r2, hidden, 1, 1], 1.0, rng)?,
            mask_b: store.add_zeros(format!("{p}.mask.bias"), &[r2])?,
            score_w: store.add(
                format!("{p}.score.weight"),
                init_normal(&[1, hidden, 1, 1], 0.01, rng),
                &[1, hidden, 1, 1],
            )?,
            score_b: store.add_zeros(format!("{p}.score.bias"), &[1])?,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.hidden_w.shape()[1]
    }

    /// Dense evaluation over a whole feature map (same padding).
    pub fn forward_dense(&self, features: &Tensor<T>) -> Result<MaskLevelOutput<T>> {
        let k = self.kind.kernel();
        let h = conv2d(features, &self.hidden_w, Some(&self.hidden_b), 1, k / 2)?.relu();
        Ok(MaskLevelOutput {
            scores: conv2d(&h, &self.score_w, Some(&self.score_b), 1, 0)?,
            masks: conv2d(&h, &self.mask_w, Some(&self.mask_b), 1, 0)?,
        })
    }

    /// Evaluation at selected cells `(image, row, col)`; returns score logits
    /// S×1 and mask logits S×res².
    pub fn forward_cells(&self, features: &Tensor<T>, cells: &[(usize, usize, usize)]) -> Result<(Tensor<T>, Tensor<T>)> {
        let windows = extract_windows(features, cells, self.kind.kernel())?;
        let hidden = self.hidden_w.shape()[0];
        let w1 = self.hidden_w.reshape(&[hidden, windows.shape()[1]])?;
        let h = windows.fully_connected(&w1, Some(&self.hidden_b))?.relu();
        let r2 = self.resolution * self.resolution;
        let wm = self.mask_w.reshape(&[r2, hidden])?;
        let ws = self.score_w.reshape(&[1, hidden])?;
        Ok((
            h.fully_connected(&ws, Some(&self.score_b))?,
            h.fully_connected(&wm, Some(&self.mask_b))?,
        ))
    }
}

/// Gathers the k×k neighbourhood (zero padded) of each `(image, row, col)`
/// into rows of an S×(C·k·k) matrix, channel-major then row then column.
pub fn extract_windows<T: Float>(features: &Tensor<T>, cells: &[(usize, usize, usize)], k: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = match *features.shape() {
        [n, c, h, w] => [n, c, h, w],
        _ => {
            return Err(Error::InvalidShape {
                op: "extract_windows",
                shape: features.shape().to_vec(),
                reason: "expected N×C×H×W".into(),
            })
        }
    };
    if cells.is_empty() || cells.iter().any(|&(b, i, j)| b >= n || i >= h || j >= w) {
        return Err(Error::InvalidArgument("extract_windows: cell outside the feature map".into()));
    }
    let x = features.data();
    let row_len = c * k * k;
    let half = (k / 2) as isize;
    // source index per output element, usize::MAX for padding
    let mut src = vec![usize::MAX; cells.len() * row_len];
    for (s, &(b, i, j)) in cells.iter().enumerate() {
        for ch in 0..c {
            for dy in 0..k {
                let y = i as isize + dy as isize - half;
                for dx in 0..k {
                    let xx = j as isize + dx as isize - half;
                    if y >= 0 && y < h as isize && xx >= 0 && xx < w as isize {
                        src[s * row_len + (ch * k + dy) * k + dx] = ((b * c + ch) * h + y as usize) * w + xx as usize;
                    }
                }
            }
        }
    }
    let out = src.iter().map(|&i| if i == usize::MAX { T::zero() } else { x[i] }).collect();
    drop(x);
    let len = features.numel();
    Tensor::from_op(
        out,
        &[cells.len(), row_len],
        vec![features.clone()],
        Box::new(move |g| {
            let mut dx = vec![T::zero(); len];
            for (&i, &gv) in src.iter().zip(g) {
                if i != usize::MAX {
                    dx[i] += gv;
                }
            }
            vec![Some(dx)]
        }),
    )
}

/// Both MLPs.
#[derive(Debug, Clone)]
pub struct MaskHeads<T: Float> {
    pub full: MaskHead<T>,
    pub half: MaskHead<T>,
    pub geometry: MaskGeometry,
}

impl<T: Float> MaskHeads<T> {
    pub fn get(&self, kind: MaskHeadKind) -> &MaskHead<T> {
        match kind {
            MaskHeadKind::Full => &self.full,
            MaskHeadKind::Half => &self.half,
        }
    }

    pub fn resolution(&self) -> usize {
        self.full.resolution
    }
}

/// Dense score and mask logits for every level and applicable head.
pub fn mask_head_forward<T: Float>(pyramid: &FeaturePyramid<T>, heads: &MaskHeads<T>) -> Result<MaskOutputs<T>> {
    let d = heads.full.in_channels();
    if pyramid.d != d {
        return Err(Error::InvalidArgument(format!(
            "mask heads expect a pyramid with d = {d}, got {}",
            pyramid.d
        )));
    }
    let mut out = BTreeMap::new();
    for (&k, feat) in &pyramid.levels {
        for &kind in heads.geometry.heads_on(k) {
            out.insert((k, kind), heads.get(kind).forward_dense(feat)?);
        }
    }
    Ok(out)
}

/// A positive cell: the object it predicts and its target grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PositiveCell {
    pub row: usize,
    pub col: usize,
    pub object: usize,
    pub mask: Vec<u8>,
}

/// Targets for one image: positive cells per `(level, head)`. Every other
/// cell of an existing `(level, head)` pair is negative.
#[derive(Debug, Clone, Default)]
pub struct MaskTargets {
    pub positives: BTreeMap<(usize, MaskHeadKind), Vec<PositiveCell>>,
    pub level_shapes: BTreeMap<usize, (usize, usize)>,
    /// Objects whose scale falls outside the grid and were skipped.
    pub skipped_objects: Vec<usize>,
}

impl MaskTargets {
    pub fn num_positive(&self) -> usize {
        self.positives.values().map(Vec::len).sum()
    }
}

/// (row, col) → (distance to centre, object index) for one level and head.
type Claims = BTreeMap<(usize, usize), (f64, usize)>;

/// Routes each object to its `(level, head)`, marks every cell whose image
/// location lies within `2^k` pixels (per axis) of the object's centre as
/// positive, and rasterizes the mask over the cell's region. A cell claimed by
/// several objects keeps the one with the nearest centre.
pub fn build_mask_targets(
    objects: &[(BBox, &BinaryMask)],
    level_shapes: &BTreeMap<usize, (usize, usize)>,
    geometry: &MaskGeometry,
    resolution: usize,
) -> Result<MaskTargets> {
    let mut claims: BTreeMap<(usize, MaskHeadKind), Claims> = BTreeMap::new();
    let mut skipped = Vec::new();
    for (o, (bbox, mask)) in objects.iter().enumerate() {
        check_mask_consistency(bbox, mask)?;
        let Some((k, head)) = geometry.scale_to_level(bbox.width(), bbox.height())? else {
            skipped.push(o);
            continue;
        };
        let Some(&(h, w)) = level_shapes.get(&k) else {
            skipped.push(o);
            continue;
        };
        let stride = MaskGeometry::stride(k);
        let (cx, cy) = bbox.center();
        let entry = claims.entry((k, head)).or_default();
        for i in 0..h {
            let dy = ((i as f64 + 0.5) * stride - cy).abs();
            if dy > stride {
                continue;
            }
            for j in 0..w {
                let dx = ((j as f64 + 0.5) * stride - cx).abs();
                if dx > stride {
                    continue;
                }
                let dist = dx.hypot(dy);
                let e = entry.entry((i, j)).or_insert((dist, o));
                if dist < e.0 {
                    *e = (dist, o);
                }
            }
        }
    }
    let mut positives = BTreeMap::new();
    for ((k, head), cells) in claims {
        let list = cells
            .into_iter()
            .map(|((i, j), (_, o))| PositiveCell {
                row: i,
                col: j,
                object: o,
                mask: rasterize(objects[o].1, &geometry.region(k, head, i, j), resolution),
            })
            .collect();
        positives.insert((k, head), list);
    }
    Ok(MaskTargets {
        positives,
        level_shapes: level_shapes.clone(),
        skipped_objects: skipped,
    })
}

fn check_mask_consistency(bbox: &BBox, mask: &BinaryMask) -> Result<()> {
    let Some(b) = mask.bounds() else {
        return Err(Error::InvalidArgument("ground-truth mask is empty".into()));
    };
    let tol = 1.0;
    if b.x1 < bbox.x1 - tol || b.y1 < bbox.y1 - tol || b.x2 > bbox.x2 + tol || b.y2 > bbox.y2 + tol {
        return Err(Error::InvalidArgument(format!(
            "mask extent {:?} exceeds its box {:?}",
            b.to_array(),
            bbox.to_array()
        )));
    }
    Ok(())
}

/// One sampled cell for the mask loss.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledCell {
    pub image: usize,
    pub level: usize,
    pub head: MaskHeadKind,
    pub row: usize,
    pub col: usize,
    /// Target grid for positives, `None` for negatives.
    pub mask: Option<Vec<u8>>,
}

/// Samples up to `per_image` cells per image at a 1:3 positive:negative ratio
/// (positives capped at a quarter; negatives fill the rest).
pub fn sample_mask_cells(targets: &[MaskTargets], geometry: &MaskGeometry, per_image: usize, rng: &mut impl Rng) -> Vec<SampledCell> {
    let mut out = Vec::new();
    for (img, t) in targets.iter().enumerate() {
        let mut pos = Vec::new();
        for (&(k, head), cells) in &t.positives {
            for c in cells {
                pos.push(SampledCell {
                    image: img,
                    level: k,
                    head,
                    row: c.row,
                    col: c.col,
                    mask: Some(c.mask.clone()),
                });
            }
        }
        // negatives enumerated lazily by flat index over all (level, head, cell)
        let mut groups = Vec::new();
        let mut total = 0;
        for (&k, &(h, w)) in &t.level_shapes {
            for &head in geometry.heads_on(k) {
                groups.push((k, head, h, w, total));
                total += h * w;
            }
        }
        let is_pos = |k: usize, head: MaskHeadKind, i: usize, j: usize| {
            t.positives
                .get(&(k, head))
                .is_some_and(|v| v.iter().any(|c| c.row == i && c.col == j))
        };
        let mut neg_index = Vec::new();
        for &(k, head, h, w, off) in &groups {
            for cell in 0..h * w {
                if !is_pos(k, head, cell / w, cell % w) {
                    neg_index.push(off + cell);
                }
            }
        }
        let n_pos = pos.len().min(per_image / 4);
        let n_neg = neg_index.len().min(per_image - n_pos);
        let mut pi = sample(rng, pos.len(), n_pos).into_vec();
        pi.sort_unstable();
        out.extend(pi.into_iter().map(|i| pos[i].clone()));
        let mut ni = sample(rng, neg_index.len(), n_neg).into_vec();
        ni.sort_unstable();
        for i in ni {
            let flat = neg_index[i];
            let &(k, head, _, w, off) = groups.iter().rev().find(|g| g.4 <= flat).expect("flat index inside a group");
            let cell = flat - off;
            out.push(SampledCell {
                image: img,
                level: k,
                head,
                row: cell / w,
                col: cell % w,
                mask: None,
            });
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct MaskLoss<T: Float> {
    pub total: Tensor<T>,
    pub score: f64,
    pub mask: f64,
    pub num_positive: usize,
}

/// `mask_weight · (mean per-pixel BCE over positives' masks) + mean BCE over
/// sampled scores`.
pub fn mask_loss<T: Float>(
    pyramid: &FeaturePyramid<T>,
    heads: &MaskHeads<T>,
    cells: &[SampledCell],
    mask_weight: f64,
) -> Result<MaskLoss<T>> {
    if cells.is_empty() {
        return Err(Error::InvalidArgument("no mask cells sampled".into()));
    }
    let r2 = heads.resolution() * heads.resolution();
    let total_cells = cells.len() as f64;
    let total_pos = cells.iter().filter(|c| c.mask.is_some()).count();
    let mut groups: BTreeMap<(usize, MaskHeadKind), Vec<&SampledCell>> = BTreeMap::new();
    for c in cells {
        groups.entry((c.level, c.head)).or_default().push(c);
    }
    let mut score_terms = Vec::new();
    let mut mask_terms = Vec::new();
    for ((k, head), members) in groups {
        let feat = pyramid.get(k)?;
        let coords: Vec<_> = members.iter().map(|c| (c.image, c.row, c.col)).collect();
        let (scores, masks) = heads.get(head).forward_cells(feat, &coords)?;
        let st: Vec<T> = members
            .iter()
            .map(|c| if c.mask.is_some() { T::one() } else { T::zero() })
            .collect();
        let w = T::lit(members.len() as f64 / total_cells);
        score_terms.push(scores.bce_with_logits(&st)?.scale(w));
        let pos_rows: Vec<usize> = (0..members.len()).filter(|&i| members[i].mask.is_some()).collect();
        if !pos_rows.is_empty() {
            let mt: Vec<T> = pos_rows
                .iter()
                .flat_map(|&i| members[i].mask.as_ref().expect("positive").iter().map(|&v| T::lit(v as f64)))
                .collect();
            debug_assert_eq!(mt.len(), pos_rows.len() * r2);
            let picked = masks.select_rows(&pos_rows)?;
            let w = T::lit(mask_weight * pos_rows.len() as f64 / total_pos as f64);
            mask_terms.push(picked.bce_with_logits(&mt)?.scale(w));
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
    let score_t = sum(score_terms)?.expect("cells sampled");
    let score = score_t.item()?.as_f64();
    let (total, mask) = match sum(mask_terms)? {
        Some(m) => {
            let v = m.item()?.as_f64();
            (score_t.add(&m)?, v)
        }
        None => (score_t, 0.0),
    };
    Ok(MaskLoss {
        total,
        score,
        mask,
        num_positive: total_pos,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskProposal {
    pub score: f64,
    pub region: BBox,
    /// `res×res` grid thresholded at 0.5.
    pub mask: Vec<u8>,
    pub resolution: usize,
    pub level: usize,
    pub head: MaskHeadKind,
    pub row: usize,
    pub col: usize,
}

impl MaskProposal {
    /// Paints the grid onto an image-sized mask: a pixel is set when its
    /// centre falls in a set grid cell.
    pub fn paint(&self, width: usize, height: usize) -> BinaryMask {
        let mut m = BinaryMask::new(width, height);
        let res = self.resolution as f64;
        let (rw, rh) = (self.region.width(), self.region.height());
        let x_lo = self.region.x1.max(0.0).floor() as usize;
        let y_lo = self.region.y1.max(0.0).floor() as usize;
        let x_hi = (self.region.x2.ceil().max(0.0) as usize).min(width);
        let y_hi = (self.region.y2.ceil().max(0.0) as usize).min(height);
        for y in y_lo..y_hi {
            let v = ((y as f64 + 0.5 - self.region.y1) / rh * res).floor();
            if !(0.0..res).contains(&v) {
                continue;
            }
            for x in x_lo..x_hi {
                let u = ((x as f64 + 0.5 - self.region.x1) / rw * res).floor();
                if (0.0..res).contains(&u) && self.mask[v as usize * self.resolution + u as usize] != 0 {
                    m.set(x, y, true);
                }
            }
        }
        m
    }

    /// Box of the painted mask, or the region when the mask is empty.
    pub fn bbox(&self, width: usize, height: usize) -> BBox {
        self.paint(width, height).bounds().unwrap_or(self.region)
    }
}

/// The `top_n` highest-scoring cells over every level and head of one image;
/// no suppression. Ties keep `(level, head, row, col)` order.
pub fn generate_mask_proposals<T: Float>(
    outputs: &MaskOutputs<T>,
    geometry: &MaskGeometry,
    image: usize,
    top_n: usize,
) -> Result<Vec<MaskProposal>> {
    let mut entries = Vec::new();
    let mut scores = Vec::new();
    for (&(k, head), out) in outputs {
        let (h, w) = (out.scores.shape()[2], out.scores.shape()[3]);
        let s = out.scores.data();
        for cell in 0..h * w {
            entries.push((k, head, cell / w, cell % w));
            scores.push(sigmoid_f64(s[image * h * w + cell].as_f64()));
        }
    }
    let order = argsort_desc(&scores);
    let mut result = Vec::with_capacity(top_n.min(order.len()));
    for &e in order.iter().take(top_n) {
        let (k, head, i, j) = entries[e];
        let out = &outputs[&(k, head)];
        let (h, w) = (out.masks.shape()[2], out.masks.shape()[3]);
        let r2 = out.masks.shape()[1];
        let res = (r2 as f64).sqrt().round() as usize;
        let m = out.masks.data();
        let mask = (0..r2)
            .map(|c| (m[((image * r2 + c) * h + i) * w + j].as_f64() > 0.0) as u8)
            .collect();
        result.push(MaskProposal {
            score: scores[e],
            region: geometry.region(k, head, i, j),
            mask,
            resolution: res,
            level: k,
            head,
            row: i,
            col: j,
        });
    }
    Ok(result)
}
