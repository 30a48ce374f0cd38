//! Training loops for the proposal, detection and mask networks.
//!
//! Every source of randomness is a function of the master seed and the step
//! index: the image order comes from a per-epoch shuffle and the anchor, RoI
//! and cell sampling from a per-step stream. A run resumed from a checkpoint
//! therefore continues exactly as the uninterrupted run would.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{derive_seed, RunConfig, TrainConfig};
use crate::data::Scene;
use crate::detector::{detector_loss, sample_rois, LabeledRoi};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::mask::{build_mask_targets, mask_loss, sample_mask_cells};
use crate::model::{image_batch, Checkpoint, DetectorNetwork, MaskNetwork, RpnNetwork, Task};
use crate::rpn::{assign_anchor_labels, generate_proposals, rpn_loss};
use crate::tensor::{no_grad, ParamStore, Sgd, Tensor};

/// One logged step.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub terms: Vec<(&'static str, f64)>,
}

impl LossRow {
    pub fn to_line(&self) -> String {
        let mut s = format!("step={} lr={:e} total={:.6}", self.step, self.lr, self.total);
        for (k, v) in &self.terms {
            write!(s, " {k}={v:.6}").expect("write to String");
        }
        s
    }
}

/// Rows whose step is a multiple of `every`.
pub fn format_log(rows: &[LossRow], every: usize) -> String {
    let every = every.max(1);
    rows.iter().filter(|r| r.step % every == 0).map(|r| r.to_line() + "\n").collect()
}

/// Image order and per-step sampling streams.
#[derive(Debug, Clone)]
pub struct Schedule {
    n_images: usize,
    batch: usize,
    order_seed: u64,
    sample_seed: u64,
}

impl Schedule {
    pub fn new(seed: u64, n_images: usize, batch: usize) -> Self {
        Schedule {
            n_images,
            batch,
            order_seed: derive_seed(seed, "order"),
            sample_seed: derive_seed(seed, "sample"),
        }
    }

    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.order_seed);
        rng.set_stream(epoch as u64);
        let mut v: Vec<usize> = (0..self.n_images).collect();
        v.shuffle(&mut rng);
        v
    }

    /// Images of step `step`: consecutive positions in the concatenation of
    /// per-epoch shuffles.
    pub fn batch(&self, step: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        let mut cached: Option<(usize, Vec<usize>)> = None;
        for p in step * self.batch..(step + 1) * self.batch {
            let epoch = p / self.n_images;
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                cached = Some((epoch, self.epoch_order(epoch)));
            }
            out.push(cached.as_ref().expect("filled above").1[p % self.n_images]);
        }
        out
    }

    pub fn sampler(&self, step: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.sample_seed);
        rng.set_stream(step as u64);
        rng
    }
}

/// Where a training run starts and where it writes.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions<'a> {
    pub resume: Option<&'a Checkpoint>,
    /// Directory for `checkpoint.bin`, `loss.log` and `config.toml`.
    pub out_dir: Option<&'a Path>,
}

/// A finished run: final step, optimizer state and the loss log.
#[derive(Debug, Clone)]
pub struct TrainRun<N> {
    pub network: N,
    pub optimizer: Sgd<f32>,
    pub step: usize,
    pub losses: Vec<LossRow>,
}

type StepFn<'a> = dyn FnMut(&[usize], &mut ChaCha8Rng) -> Result<(Tensor<f32>, Vec<(&'static str, f64)>)> + 'a;

fn run_loop(
    tc: &TrainConfig,
    schedule: &Schedule,
    store: &ParamStore<f32>,
    optimizer: &mut Sgd<f32>,
    start: usize,
    step_fn: &mut StepFn<'_>,
) -> Result<Vec<LossRow>> {
    store.zero_grad();
    let mut rows = Vec::new();
    for step in start..tc.steps {
        let batch = schedule.batch(step);
        let mut rng = schedule.sampler(step);
        let (loss, terms) = step_fn(&batch, &mut rng)?;
        let total = loss.item()? as f64;
        if !total.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss is {total} ({terms:?})"),
            });
        }
        loss.backward()?;
        let lr = tc.lr_at(step);
        optimizer.step(store, lr)?;
        rows.push(LossRow { step, lr, total, terms });
    }
    Ok(rows)
}

fn prepare(cfg: &RunConfig, scenes: &[Scene], store: &ParamStore<f32>, task: Task, opts: &TrainOptions) -> Result<(Sgd<f32>, usize)> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let mut optimizer = Sgd::new(cfg.train.momentum, cfg.train.weight_decay);
    let mut start = 0;
    if let Some(ck) = opts.resume {
        ck.expect_task(task)?;
        ck.restore(store)?;
        optimizer.load_records(&ck.velocity);
        start = ck.step;
    }
    Ok((optimizer, start))
}

fn finish(cfg: &RunConfig, checkpoint: &Checkpoint, losses: &[LossRow], opts: &TrainOptions) -> Result<()> {
    let Some(dir) = opts.out_dir else { return Ok(()) };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    checkpoint.save(&dir.join("checkpoint.bin"))?;
    cfg.save(&dir.join("config.toml"))?;
    let log = dir.join("loss.log");
    let mut text = String::new();
    if opts.resume.is_some() {
        text = fs::read_to_string(&log).unwrap_or_default();
    }
    text.push_str(&format_log(losses, cfg.train.log_every));
    fs::write(&log, text).map_err(|e| Error::io(&log, e))
}

fn batch_scenes<'a>(scenes: &'a [Scene], idx: &[usize]) -> Vec<&'a Scene> {
    idx.iter().map(|&i| &scenes[i]).collect()
}

pub fn train_rpn(cfg: &RunConfig, scenes: &[Scene], opts: &TrainOptions) -> Result<TrainRun<RpnNetwork>> {
    let net = RpnNetwork::new(cfg)?;
    let (mut optimizer, start) = prepare(cfg, scenes, &net.store, Task::Proposals, opts)?;
    let schedule = Schedule::new(cfg.seed, scenes.len(), cfg.train.batch_size);
    let rc = &cfg.rpn;
    let mut step = |idx: &[usize], rng: &mut ChaCha8Rng| {
        let batch = batch_scenes(scenes, idx);
        let (out, anchors) = net.forward(&image_batch(&batch)?)?;
        let boxes = anchors.boxes();
        let gt: Vec<Vec<BBox>> = batch.iter().map(|s| s.boxes()).collect();
        let labels = gt
            .iter()
            .map(|g| assign_anchor_labels(&boxes, g, rc.positive_iou, rc.negative_iou))
            .collect::<Result<Vec<_>>>()?;
        let l = rpn_loss(&out, &anchors, &labels, &gt, rc.anchors_per_image, rng)?;
        Ok((l.total, vec![("cls", l.classification), ("reg", l.regression)]))
    };
    let losses = run_loop(&cfg.train, &schedule, &net.store, &mut optimizer, start, &mut step)?;
    let ck = Checkpoint::capture(Task::Proposals, cfg.train.steps.max(start), &net.store, &optimizer);
    finish(cfg, &ck, &losses, opts)?;
    Ok(TrainRun {
        network: net,
        optimizer,
        step: ck.step,
        losses,
    })
}

/// Proposals of `net` for every scene, best first, at most `count` each.
pub fn compute_proposals(cfg: &RunConfig, net: &RpnNetwork, scenes: &[Scene], count: usize) -> Result<Vec<Vec<BBox>>> {
    let pc = cfg.rpn.proposal_config(count);
    no_grad(|| {
        scenes
            .iter()
            .map(|s| {
                let (out, anchors) = net.forward(&image_batch(&[s])?)?;
                Ok(generate_proposals(&out, &anchors, 0, (s.height, s.width), &pc)?
                    .into_iter()
                    .map(|p| p.bbox)
                    .collect())
            })
            .collect()
    })
}

/// Trains the RoI detector on a fixed set of proposals from `proposer`.
pub fn train_detector(cfg: &RunConfig, scenes: &[Scene], proposer: &RpnNetwork, opts: &TrainOptions) -> Result<TrainRun<DetectorNetwork>> {
    let net = DetectorNetwork::new(cfg)?;
    let (mut optimizer, start) = prepare(cfg, scenes, &net.store, Task::Detection, opts)?;
    let proposals = compute_proposals(cfg, proposer, scenes, cfg.detector.train_proposals)?;
    let schedule = Schedule::new(cfg.seed, scenes.len(), cfg.train.batch_size);
    let sampling = cfg.detector.sampling();
    let mut step = |idx: &[usize], rng: &mut ChaCha8Rng| {
        let batch = batch_scenes(scenes, idx);
        let pyramid = net.pyramid(&image_batch(&batch)?)?;
        let mut rois: Vec<LabeledRoi> = Vec::new();
        let mut boxes = Vec::new();
        for (b, (&i, s)) in idx.iter().zip(&batch).enumerate() {
            let sampled = sample_rois(&proposals[i], &s.labeled_boxes(), &sampling, rng)?;
            boxes.extend(sampled.iter().map(|r| (b, r.bbox)));
            rois.extend(sampled);
        }
        let out = net.forward_rois(&pyramid, &boxes)?;
        let l = detector_loss(&out, &rois)?;
        Ok((l.total, vec![("cls", l.classification), ("reg", l.regression)]))
    };
    let losses = run_loop(&cfg.train, &schedule, &net.store, &mut optimizer, start, &mut step)?;
    let mut ck = Checkpoint::capture(Task::Detection, cfg.train.steps.max(start), &net.store, &optimizer);
    ck.proposer = proposer.store.to_records();
    finish(cfg, &ck, &losses, opts)?;
    Ok(TrainRun {
        network: net,
        optimizer,
        step: ck.step,
        losses,
    })
}

pub fn train_masks(cfg: &RunConfig, scenes: &[Scene], opts: &TrainOptions) -> Result<TrainRun<MaskNetwork>> {
    let net = MaskNetwork::new(cfg)?;
    let (mut optimizer, start) = prepare(cfg, scenes, &net.store, Task::Masks, opts)?;
    let schedule = Schedule::new(cfg.seed, scenes.len(), cfg.train.batch_size);
    let mc = &cfg.mask;
    let mut step = |idx: &[usize], rng: &mut ChaCha8Rng| {
        let batch = batch_scenes(scenes, idx);
        let pyramid = net.pyramid(&image_batch(&batch)?)?;
        let shapes = pyramid.level_shapes();
        let targets = batch
            .iter()
            .map(|s| {
                let objs: Vec<_> = s.objects.iter().map(|o| (o.bbox, &o.mask)).collect();
                build_mask_targets(&objs, &shapes, &net.heads.geometry, mc.resolution)
            })
            .collect::<Result<Vec<_>>>()?;
        let cells = sample_mask_cells(&targets, &net.heads.geometry, mc.samples_per_image, rng);
        let l = mask_loss(&pyramid, &net.heads, &cells, mc.mask_weight)?;
        Ok((l.total, vec![("score", l.score), ("mask", l.mask)]))
    };
    let losses = run_loop(&cfg.train, &schedule, &net.store, &mut optimizer, start, &mut step)?;
    let ck = Checkpoint::capture(Task::Masks, cfg.train.steps.max(start), &net.store, &optimizer);
    finish(cfg, &ck, &losses, opts)?;
    Ok(TrainRun {
        network: net,
        optimizer,
        step: ck.step,
        losses,
    })
}
