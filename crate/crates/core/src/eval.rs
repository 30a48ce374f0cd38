//! Evaluation of trained networks and the metrics report format.
//!
//! A report is plain text, one `name = value` pair per line, values printed
//! with six decimals. Wall-clock timing is kept out of the report (it goes
//! to a separate file) so that reports of identical runs are byte-identical.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use crate::config::RunConfig;
use crate::data::{Scene, ShapeClass};
use crate::error::{Error, Result};
use crate::geometry::{clip_box, decode_deltas, nms, BBox};
use crate::mask::{generate_mask_proposals, BinaryMask};
use crate::metrics::{average_precision, average_recall, box_average_recall, Detection, GroundTruth, RecallInstance};
use crate::model::{image_batch, Checkpoint, DetectorNetwork, MaskNetwork, RpnNetwork, Task};
use crate::rpn::generate_proposals;
use crate::tensor::{no_grad, sigmoid_f64};

pub const METRICS_FILE: &str = "metrics.txt";
pub const TIMING_FILE: &str = "timing.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub task: Task,
    pub images: usize,
    pub metrics: Vec<(String, f64)>,
}

impl MetricsReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(k, _)| k == name).map(|&(_, v)| v)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("task = {}\nimages = {}\n", self.task.name(), self.images);
        for (k, v) in &self.metrics {
            writeln!(s, "{k} = {v:.6}").expect("write to String");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            what: "metrics report",
            reason,
        };
        let mut task = None;
        let mut images = None;
        let mut metrics = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| bad(format!("expected `name = value`, got `{line}`")))?;
            match k {
                "task" => task = Some(v.parse::<Task>().map_err(|e| bad(e.to_string()))?),
                "images" => images = Some(v.parse().map_err(|_| bad(format!("bad image count `{v}`")))?),
                _ => metrics.push((k.to_string(), v.parse().map_err(|_| bad(format!("bad value `{v}`")))?)),
            }
        }
        Ok(MetricsReport {
            task: task.ok_or_else(|| bad("missing task".into()))?,
            images: images.ok_or_else(|| bad("missing images".into()))?,
            metrics,
        })
    }
}

/// A report plus mean wall-clock inference time per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub seconds_per_image: f64,
}

impl Evaluation {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(METRICS_FILE);
        fs::write(&p, self.report.to_text()).map_err(|e| Error::io(&p, e))?;
        let t = dir.join(TIMING_FILE);
        fs::write(&t, format!("seconds_per_image = {:.6}\n", self.seconds_per_image)).map_err(|e| Error::io(&t, e))
    }
}

fn budget_name(b: usize) -> String {
    if b.is_multiple_of(1000) {
        format!("{}k", b / 1000)
    } else {
        b.to_string()
    }
}

fn recall_metrics(out: &mut Vec<(String, f64)>, prefix: &str, budget: usize, s: crate::metrics::RecallSummary) {
    let b = budget_name(budget);
    out.push((format!("{prefix}_{b}"), s.ar));
    out.push((format!("{prefix}_s_{b}"), s.ar_s));
    out.push((format!("{prefix}_m_{b}"), s.ar_m));
    out.push((format!("{prefix}_l_{b}"), s.ar_l));
}

/// Score-sorted proposals for every scene under the largest budget.
pub fn proposals_for(cfg: &RunConfig, net: &RpnNetwork, scenes: &[Scene]) -> Result<(Vec<Vec<BBox>>, f64)> {
    let max_budget = *cfg.eval.proposal_budgets.iter().max().expect("validated non-empty");
    let pc = cfg.rpn.proposal_config(max_budget);
    let t0 = Instant::now();
    let props = no_grad(|| {
        scenes
            .iter()
            .map(|s| {
                let (out, anchors) = net.forward(&image_batch(&[s])?)?;
                Ok(generate_proposals(&out, &anchors, 0, (s.height, s.width), &pc)?
                    .into_iter()
                    .map(|p| p.bbox)
                    .collect())
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok((props, per_image(t0, scenes.len())))
}

fn per_image(t0: Instant, n: usize) -> f64 {
    t0.elapsed().as_secs_f64() / n.max(1) as f64
}

/// Box AR for every configured budget, overall and per size bin.
pub fn proposal_report(cfg: &RunConfig, proposals: &[Vec<BBox>], scenes: &[Scene]) -> Result<MetricsReport> {
    let gt: Vec<Vec<BBox>> = scenes.iter().map(Scene::boxes).collect();
    let ec = cfg.eval.metrics();
    let mut metrics = Vec::new();
    for &b in &cfg.eval.proposal_budgets {
        recall_metrics(&mut metrics, "ar", b, box_average_recall(proposals, &gt, b, &ec)?);
    }
    Ok(MetricsReport {
        task: Task::Proposals,
        images: scenes.len(),
        metrics,
    })
}

pub fn evaluate_proposals(cfg: &RunConfig, net: &RpnNetwork, scenes: &[Scene]) -> Result<Evaluation> {
    let (props, secs) = proposals_for(cfg, net, scenes)?;
    Ok(Evaluation {
        report: proposal_report(cfg, &props, scenes)?,
        seconds_per_image: secs,
    })
}

/// Class-specific boxes from detector outputs: score threshold, per-class
/// NMS, then the best `max_detections` overall.
pub fn detect(cfg: &RunConfig, det: &DetectorNetwork, scene: &Scene, proposals: &[BBox]) -> Result<Vec<Detection>> {
    let dc = &cfg.detector;
    if proposals.is_empty() {
        return Ok(Vec::new());
    }
    no_grad(|| {
        let pyramid = det.pyramid(&image_batch(&[scene])?)?;
        let boxes: Vec<(usize, BBox)> = proposals.iter().map(|&b| (0, b)).collect();
        let out = det.forward_rois(&pyramid, &boxes)?;
        let logits = out.logits.to_f64_vec();
        let deltas = out.deltas.to_f64_vec();
        let nc = det.head.num_classes;
        let mut dets = Vec::new();
        for c in 1..=nc {
            let mut cb = Vec::new();
            let mut cs = Vec::new();
            for (r, p) in proposals.iter().enumerate() {
                let row = &logits[r * (nc + 1)..(r + 1) * (nc + 1)];
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                let prob = (row[c] - m).exp() / z;
                if prob < dc.score_threshold {
                    continue;
                }
                let d: [f64; 4] = std::array::from_fn(|i| deltas[r * 4 * nc + 4 * (c - 1) + i]);
                let b = clip_box(&decode_deltas(p, &d)?, scene.width, scene.height);
                if b.is_degenerate() {
                    continue;
                }
                cb.push(b);
                cs.push(prob);
            }
            for i in nms(&cb, &cs, dc.nms_threshold, dc.max_detections) {
                dets.push(Detection {
                    image: scene.id,
                    class: c,
                    score: cs[i],
                    bbox: cb[i],
                });
            }
        }
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        dets.truncate(dc.max_detections);
        Ok(dets)
    })
}

pub fn evaluate_detection(cfg: &RunConfig, det: &DetectorNetwork, proposer: &RpnNetwork, scenes: &[Scene]) -> Result<Evaluation> {
    let t0 = Instant::now();
    let props = crate::train::compute_proposals(cfg, proposer, scenes, cfg.detector.test_proposals)?;
    let mut dets = Vec::new();
    for (s, p) in scenes.iter().zip(&props) {
        dets.extend(detect(cfg, det, s, p)?);
    }
    let secs = per_image(t0, scenes.len());
    let gt: Vec<GroundTruth> = scenes
        .iter()
        .flat_map(|s| {
            s.objects.iter().map(|o| GroundTruth {
                image: s.id,
                class: o.class.label(),
                bbox: o.bbox,
            })
        })
        .collect();
    let p = average_precision(&dets, &gt, &cfg.eval.metrics());
    Ok(Evaluation {
        report: MetricsReport {
            task: Task::Detection,
            images: scenes.len(),
            metrics: vec![
                ("ap".into(), p.ap),
                ("ap50".into(), p.ap50),
                ("ap_s".into(), p.ap_s),
                ("ap_m".into(), p.ap_m),
                ("ap_l".into(), p.ap_l),
            ],
        },
        seconds_per_image: secs,
    })
}

/// Image-sized segment proposals for one scene, best first.
pub fn mask_proposals(cfg: &RunConfig, net: &MaskNetwork, scene: &Scene, count: usize) -> Result<Vec<(f64, BinaryMask)>> {
    no_grad(|| {
        let out = net.forward_dense(&image_batch(&[scene])?)?;
        Ok(
            generate_mask_proposals(&out, &net.heads.geometry, 0, count.min(cfg.mask.proposals))?
                .into_iter()
                .map(|p| (p.score, p.paint(scene.width, scene.height)))
                .collect(),
        )
    })
}

pub fn evaluate_masks(cfg: &RunConfig, net: &MaskNetwork, scenes: &[Scene]) -> Result<Evaluation> {
    let max_budget = *cfg.eval.proposal_budgets.iter().max().expect("validated non-empty");
    let ec = cfg.eval.metrics();
    let t0 = Instant::now();
    let props = scenes
        .iter()
        .map(|s| mask_proposals(cfg, net, s, max_budget))
        .collect::<Result<Vec<_>>>()?;
    let secs = per_image(t0, scenes.len());
    let mut metrics = Vec::new();
    for &b in &cfg.eval.proposal_budgets {
        let inst = scenes
            .iter()
            .zip(&props)
            .map(|(s, p)| {
                let masks: Vec<BinaryMask> = p.iter().take(b).map(|(_, m)| m.clone()).collect();
                let gt: Vec<BinaryMask> = s.objects.iter().map(|o| o.mask.clone()).collect();
                RecallInstance::from_masks(&masks, &gt, b)
            })
            .collect::<Result<Vec<_>>>()?;
        recall_metrics(&mut metrics, "segment_ar", b, average_recall(&inst, &ec));
    }
    Ok(Evaluation {
        report: MetricsReport {
            task: Task::Masks,
            images: scenes.len(),
            metrics,
        },
        seconds_per_image: secs,
    })
}

/// Rebuilds the network a checkpoint belongs to and evaluates it.
pub fn evaluate_checkpoint(cfg: &RunConfig, ck: &Checkpoint, task: Task, scenes: &[Scene]) -> Result<Evaluation> {
    cfg.validate()?;
    ck.expect_task(task)?;
    match task {
        Task::Proposals => {
            let net = RpnNetwork::new(cfg)?;
            ck.restore(&net.store)?;
            evaluate_proposals(cfg, &net, scenes)
        }
        Task::Detection => {
            let det = DetectorNetwork::new(cfg)?;
            ck.restore(&det.store)?;
            let proposer = RpnNetwork::new(cfg)?;
            if ck.proposer.is_empty() {
                return Err(Error::TaskMismatch {
                    requested: task.name().into(),
                    reason: "checkpoint has no proposal network".into(),
                });
            }
            proposer.store.load_records(&ck.proposer)?;
            evaluate_detection(cfg, &det, &proposer, scenes)
        }
        Task::Masks => {
            let net = MaskNetwork::new(cfg)?;
            ck.restore(&net.store)?;
            evaluate_masks(cfg, &net, scenes)
        }
    }
}

/// Per-pixel accuracy of the thresholded mask predictions at a scene's
/// positive cells, and the number of those cells.
pub fn mask_training_accuracy(cfg: &RunConfig, net: &MaskNetwork, scene: &Scene) -> Result<(f64, usize)> {
    no_grad(|| {
        let pyramid = net.pyramid(&image_batch(&[scene])?)?;
        let objs: Vec<_> = scene.objects.iter().map(|o| (o.bbox, &o.mask)).collect();
        let targets = crate::mask::build_mask_targets(&objs, &pyramid.level_shapes(), &net.heads.geometry, cfg.mask.resolution)?;
        let (mut agree, mut total) = (0usize, 0usize);
        for (&(k, head), cells) in &targets.positives {
            let coords: Vec<_> = cells.iter().map(|c| (0, c.row, c.col)).collect();
            let (_, masks) = net.heads.get(head).forward_cells(pyramid.get(k)?, &coords)?;
            let m = masks.to_f64_vec();
            for (c, cell) in cells.iter().enumerate() {
                let r2 = cell.mask.len();
                for (p, &t) in cell.mask.iter().enumerate() {
                    agree += ((sigmoid_f64(m[c * r2 + p]) > 0.5) == (t != 0)) as usize;
                    total += 1;
                }
            }
        }
        if total == 0 {
            return Err(Error::InvalidArgument("scene has no positive mask cells".into()));
        }
        Ok((agree as f64 / total as f64, targets.num_positive()))
    })
}

/// Fraction of a scene's labelled RoIs (foreground and background sets before
/// sampling) whose arg-max class equals the label.
pub fn detector_training_accuracy(cfg: &RunConfig, det: &DetectorNetwork, scene: &Scene, proposals: &[BBox]) -> Result<f64> {
    let (fg, bg) = crate::detector::label_rois(proposals, &scene.labeled_boxes(), &cfg.detector.sampling())?;
    let rois: Vec<_> = fg.iter().chain(&bg).collect();
    if rois.is_empty() {
        return Err(Error::InvalidArgument("scene has no labelled RoIs".into()));
    }
    no_grad(|| {
        let pyramid = det.pyramid(&image_batch(&[scene])?)?;
        let boxes: Vec<(usize, BBox)> = rois.iter().map(|r| (0, r.bbox)).collect();
        let out = det.forward_rois(&pyramid, &boxes)?;
        let logits = out.logits.to_f64_vec();
        let nc = ShapeClass::ALL.len() + 1;
        let correct = rois
            .iter()
            .enumerate()
            .filter(|(i, r)| {
                let row = &logits[i * nc..(i + 1) * nc];
                let arg = (0..nc).fold(0, |best, c| if row[c] > row[best] { c } else { best });
                arg == r.label
            })
            .count();
        Ok(correct as f64 / rois.len() as f64)
    })
}
