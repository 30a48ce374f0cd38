//! Finite-difference checks of every differentiable operation and of the
//! composed networks, in 64-bit.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneConfig};
use crate::detector::{roi_pool, DetectorHead};
use crate::error::Result;
use crate::fpn::{PyramidBuilder, PyramidVariant};
use crate::geometry::{generate_anchors, BBox};
use crate::mask::{extract_windows, MaskHead, MaskHeadKind};
use crate::rpn::{assign_anchor_labels, rpn_forward, rpn_loss, AnchorSet, RpnHead, RpnHeads};
use crate::tensor::{conv2d, grad_check_ladder, ParamStore, Tensor};

/// Tolerance for single operations.
pub const OP_TOLERANCE: f64 = 1e-6;
/// Tolerance for composed networks.
pub const COMPOSITION_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

type T64 = Tensor<f64>;

fn leaf(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> T64 {
    let n = shape.iter().product();
    Tensor::leaf((0..n).map(|_| rng.random_range(lo..hi)).collect(), shape).expect("valid shape")
}

fn constant(rng: &mut ChaCha8Rng, shape: &[usize]) -> T64 {
    let n = shape.iter().product();
    // magnitudes bounded away from zero keep every gradient entry well scaled
    let v = (0..n)
        .map(|_| {
            let m = rng.random_range(0.5..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(v, shape).expect("valid shape")
}

/// `Σ out ⊙ R` for a fixed random `R`.
fn project(out: &T64, r: &T64) -> Result<T64> {
    Ok(out.mul(r)?.sum())
}

fn subset(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    let mut v = rand::seq::index::sample(rng, n, k).into_vec();
    v.sort_unstable();
    v
}

struct Suite {
    rng: ChaCha8Rng,
    out: Vec<CheckOutcome>,
    steps: Vec<f64>,
}

impl Suite {
    fn check(&mut self, name: &str, x: &T64, tol: f64, max_coords: usize, f: impl Fn(&T64) -> Result<T64>) -> Result<()> {
        let coords = subset(&mut self.rng, x.numel(), max_coords);
        let err = grad_check_ladder(f, x, &self.steps, Some(&coords))?;
        self.out.push(CheckOutcome {
            name: name.to_string(),
            max_rel_error: err,
            tolerance: tol,
        });
        Ok(())
    }

    fn op(&mut self, name: &str, x: &T64, f: impl Fn(&T64) -> Result<T64>) -> Result<()> {
        self.check(name, x, OP_TOLERANCE, usize::MAX, f)
    }
}

/// Runs all checks; each outcome records its own tolerance.
pub fn run_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut s = Suite {
        rng: ChaCha8Rng::seed_from_u64(seed),
        out: Vec::new(),
        steps: vec![1e-3, 1e-5],
    };
    op_checks(&mut s)?;
    s.steps = vec![1e-3, 1e-4, 1e-5, 1e-6];
    composition_checks(&mut s)?;
    Ok(s.out)
}

fn op_checks(s: &mut Suite) -> Result<()> {
    let shape = [2, 3, 4];
    let a = leaf(&mut s.rng, &shape, -2.0, 2.0);
    let b = constant(&mut s.rng, &shape);
    let r = constant(&mut s.rng, &shape);
    s.op("add", &a, |x| project(&x.add(&b)?, &r))?;
    s.op("sub", &a, |x| project(&b.sub(x)?, &r))?;
    s.op("mul", &a, |x| project(&x.mul(&b)?, &r))?;
    s.op("scale", &a, |x| project(&x.scale(-1.7), &r))?;
    s.op("square", &a, |x| project(&x.square(), &r))?;
    s.op("relu", &a, |x| project(&x.relu(), &r))?;
    s.op("sigmoid", &a, |x| project(&x.sigmoid(), &r))?;
    s.op("sum", &a, |x| Ok(x.sum().scale(1.3)))?;
    s.op("mean", &a, |x| Ok(x.mean().scale(2.1)))?;
    s.op("reshape", &a, |x| project(&x.reshape(&[6, 4])?, &r.reshape(&[6, 4])?))?;

    let img = leaf(&mut s.rng, &[2, 3, 4, 6], -1.0, 1.0);
    let r_up = constant(&mut s.rng, &[2, 3, 8, 12]);
    s.op("nearest_upsample2x", &img, |x| project(&x.nearest_upsample2x()?, &r_up))?;
    let r_down = constant(&mut s.rng, &[2, 3, 2, 3]);
    s.op("max_subsample2x", &img, |x| project(&x.max_subsample2x()?, &r_down))?;

    let xin = leaf(&mut s.rng, &[5, 7], -1.0, 1.0);
    let w = leaf(&mut s.rng, &[4, 7], -1.0, 1.0);
    let bias = leaf(&mut s.rng, &[4], -1.0, 1.0);
    let r_fc = constant(&mut s.rng, &[5, 4]);
    s.op("fully_connected/input", &xin, |x| {
        project(&x.fully_connected(&w, Some(&bias))?, &r_fc)
    })?;
    s.op("fully_connected/weight", &w, |w| {
        project(&xin.fully_connected(w, Some(&bias))?, &r_fc)
    })?;
    s.op("fully_connected/bias", &bias, |b| {
        project(&xin.fully_connected(&w, Some(b))?, &r_fc)
    })?;

    let idx = [3, 0, 7, 7, 20, 34];
    let r_g = constant(&mut s.rng, &[idx.len()]);
    s.op("gather", &xin, |x| project(&x.gather(&idx)?, &r_g))?;
    let rows = [4, 1, 1];
    let r_rows = constant(&mut s.rng, &[3, 7]);
    s.op("select_rows", &xin, |x| project(&x.select_rows(&rows)?, &r_rows))?;
    let other = leaf(&mut s.rng, &[2, 7], -1.0, 1.0);
    let r_cat = constant(&mut s.rng, &[7, 7]);
    s.op("concat", &xin, |x| project(&Tensor::concat(&[x.clone(), other.clone()])?, &r_cat))?;

    for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
        let x = leaf(&mut s.rng, &[2, 3, 7, 6], -1.0, 1.0);
        let w = leaf(&mut s.rng, &[4, 3, 3, 3], -1.0, 1.0);
        let b = leaf(&mut s.rng, &[4], -1.0, 1.0);
        let probe = conv2d(&x.detach(), &w.detach(), None, stride, pad)?;
        let r = constant(&mut s.rng, probe.shape());
        s.op(&format!("conv2d/input s{stride} p{pad}"), &x, |x| {
            project(&conv2d(x, &w, Some(&b), stride, pad)?, &r)
        })?;
        s.op(&format!("conv2d/weight s{stride} p{pad}"), &w, |w| {
            project(&conv2d(&x, w, Some(&b), stride, pad)?, &r)
        })?;
        s.op(&format!("conv2d/bias s{stride} p{pad}"), &b, |b| {
            project(&conv2d(&x, &w, Some(b), stride, pad)?, &r)
        })?;
    }
    let x1 = leaf(&mut s.rng, &[1, 5, 4, 4], -1.0, 1.0);
    let w1 = leaf(&mut s.rng, &[3, 5, 1, 1], -1.0, 1.0);
    let r1 = constant(&mut s.rng, &[1, 3, 4, 4]);
    s.op("conv2d/pointwise input", &x1, |x| project(&conv2d(x, &w1, None, 1, 0)?, &r1))?;
    s.op("conv2d/pointwise weight", &w1, |w| project(&conv2d(&x1, w, None, 1, 0)?, &r1))?;

    let logits = leaf(&mut s.rng, &[4, 5], -2.0, 2.0);
    s.op("softmax_cross_entropy", &logits, |x| x.softmax_cross_entropy(&[0, 4, 2, 2]))?;
    let probs = leaf(&mut s.rng, &[6], 0.1, 0.9);
    let targets = [1.0, 0.0, 1.0, 0.0, 0.3, 0.8];
    s.op("binary_cross_entropy", &probs, |x| x.binary_cross_entropy(&targets))?;
    let z = leaf(&mut s.rng, &[6], -3.0, 3.0);
    s.op("bce_with_logits", &z, |x| x.bce_with_logits(&targets))?;
    // differences on both sides of the quadratic/linear switch
    let d = Tensor::leaf(vec![0.2, -0.6, 1.7, -2.4, 0.05, 3.0], &[6])?;
    s.op("smooth_l1", &d, |x| x.smooth_l1(&[0.0; 6]))?;

    let feat = leaf(&mut s.rng, &[2, 3, 8, 8], -1.0, 1.0);
    let rois = [
        (0, BBox::new(2.0, 3.0, 20.0, 17.0)),
        (1, BBox::new(0.0, 0.0, 31.0, 31.0)),
        (1, BBox::new(10.0, 12.0, 14.0, 15.0)),
    ];
    let r_pool = constant(&mut s.rng, &[3, 3, 2, 2]);
    s.op("roi_pool", &feat, |x| project(&roi_pool(x, &rois, 4.0, 2)?, &r_pool))?;
    let cells = [(0, 0, 0), (1, 3, 5), (0, 7, 7), (1, 4, 4)];
    let r_win = constant(&mut s.rng, &[4, 3 * 25]);
    s.op("extract_windows", &feat, |x| project(&extract_windows(x, &cells, 5)?, &r_win))?;
    Ok(())
}

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        stem_channels: 4,
        stage_channels: [4, 6, 6, 8],
        blocks_per_stage: [1, 1, 1, 1],
    }
}

fn composition_checks(s: &mut Suite) -> Result<()> {
    let mut init = ChaCha8Rng::seed_from_u64(s.rng.random());
    let d = 4;
    let cfg = tiny_backbone();
    let image = leaf(&mut s.rng, &[1, 3, 32, 32], -1.0, 1.0);
    for variant in PyramidVariant::ALL {
        let mut store = ParamStore::<f64>::new();
        let backbone = Backbone::new(&mut store, &cfg, &mut init)?;
        let pyramid = PyramidBuilder::new(&mut store, "fpn", cfg.stage_channels, d, variant, false, &mut init)?;
        let apc = if variant == PyramidVariant::FinestOnly { 15 } else { 3 };
        let heads = RpnHeads::Shared(RpnHead::new(&mut store, "rpn", d, d, apc, &mut init)?);
        let forward = |x: &T64| -> Result<T64> {
            let p = pyramid.forward(&backbone.forward(x)?)?;
            let out = rpn_forward(&p.levels, &heads)?;
            let mut acc: Option<T64> = None;
            for (k, o) in &out {
                let weight = 1.0 + *k as f64 * 0.25;
                let term = o.logits.sum().scale(weight).add(&o.deltas.square().sum())?;
                acc = Some(match acc {
                    Some(a) => a.add(&term)?,
                    None => term,
                });
            }
            Ok(acc.expect("at least one level"))
        };
        let name = format!("backbone→pyramid({})→rpn head", variant.cli_name());
        s.check(&format!("{name} / image"), &image, COMPOSITION_TOLERANCE, 60, forward)?;
        for pname in [
            "backbone.stem.weight",
            "fpn.lateral.5.weight",
            "fpn.output.2.weight",
            "rpn.conv.weight",
        ] {
            let p = store.get(pname).expect("parameter registered").clone();
            s.check(&format!("{name} / {pname}"), &p, COMPOSITION_TOLERANCE, 40, |_| forward(&image))?;
        }
    }

    // full proposal loss with sampled anchors
    let mut store = ParamStore::<f64>::new();
    let backbone = Backbone::new(&mut store, &cfg, &mut init)?;
    let pyramid = PyramidBuilder::new(&mut store, "fpn", cfg.stage_channels, d, PyramidVariant::FullFpn, false, &mut init)?;
    let heads = RpnHeads::Shared(RpnHead::new(&mut store, "rpn", d, d, 3, &mut init)?);
    let gt = vec![vec![BBox::new(2.0, 3.0, 14.0, 17.0), BBox::new(12.0, 10.0, 31.0, 30.0)]];
    let shapes: BTreeMap<usize, (usize, usize)> = pyramid.forward(&backbone.forward(&image.detach())?)?.level_shapes();
    let anchors = AnchorSet::new(generate_anchors(&shapes, 8.0)?);
    let labels = vec![assign_anchor_labels(&anchors.boxes(), &gt[0], 0.7, 0.3)?];
    let loss = |x: &T64| -> Result<T64> {
        let p = pyramid.forward(&backbone.forward(x)?)?;
        let out = rpn_forward(&p.levels, &heads)?;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        Ok(rpn_loss(&out, &anchors, &labels, &gt, 64, &mut rng)?.total)
    };
    s.check("rpn loss / image", &image, COMPOSITION_TOLERANCE, 60, loss)?;
    let p = store.get("rpn.reg.weight").expect("registered").clone();
    s.check("rpn loss / rpn.reg.weight", &p, COMPOSITION_TOLERANCE, 40, |_| loss(&image))?;

    // detector head on pooled features and mask head at cells
    let mut store = ParamStore::<f64>::new();
    let head = DetectorHead::new(&mut store, "det", 3, 2, 8, 3, &mut init)?;
    let feat = leaf(&mut s.rng, &[1, 3, 8, 8], -1.0, 1.0);
    let rois = [(0, BBox::new(0.0, 0.0, 16.0, 20.0)), (0, BBox::new(8.0, 4.0, 30.0, 30.0))];
    let det_loss = |x: &T64| -> Result<T64> {
        let out = head.forward_pooled(&roi_pool(x, &rois, 4.0, 2)?)?;
        out.logits.softmax_cross_entropy(&[2, 0])?.add(&out.deltas.square().sum())
    };
    s.check(
        "roi_pool→detector head / features",
        &feat,
        COMPOSITION_TOLERANCE,
        usize::MAX,
        det_loss,
    )?;
    let w = store.get("det.fc1.weight").expect("registered").clone();
    s.check("roi_pool→detector head / det.fc1.weight", &w, COMPOSITION_TOLERANCE, 60, |_| {
        det_loss(&feat)
    })?;

    let mut store = ParamStore::<f64>::new();
    let mh = MaskHead::new(&mut store, "mask", MaskHeadKind::Half, 3, 6, 3, &mut init)?;
    let cells = [(0, 1, 2), (0, 6, 6)];
    let mask_loss = |x: &T64| -> Result<T64> {
        let (sc, m) = mh.forward_cells(x, &cells)?;
        sc.bce_with_logits(&[1.0, 0.0])?
            .add(&m.bce_with_logits(&[1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0].repeat(2))?)
    };
    s.check("mask head cells / features", &feat, COMPOSITION_TOLERANCE, usize::MAX, mask_loss)?;
    let w = store.get("mask.half.hidden.weight").expect("registered").clone();
    s.check("mask head cells / mask.half.hidden.weight", &w, COMPOSITION_TOLERANCE, 60, |_| {
        mask_loss(&feat)
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_within_tolerance() {
        let out = run_suite(7).unwrap();
        for o in &out {
            println!("{:<60} {:.3e} < {:.0e}", o.name, o.max_rel_error, o.tolerance);
        }
        assert!(out.iter().all(CheckOutcome::passed));
    }
}
