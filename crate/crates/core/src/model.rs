//! Networks assembled from a run configuration, and their checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::Backbone;
use crate::config::{derive_seed, RpnSource, RunConfig};
use crate::data::{Scene, ShapeClass};
use crate::detector::{assign_roi_level, detector_forward, DetectorHead, DetectorOutput, Roi};
use crate::error::{Error, Result};
use crate::fpn::{FeaturePyramid, PyramidBuilder};
use crate::geometry::{generate_anchors, level_anchor_scale, AnchorGrid, BBox, ANCHOR_RATIOS};
use crate::mask::{mask_head_forward, MaskGeometry, MaskHead, MaskHeadKind, MaskHeads, MaskOutputs};
use crate::rpn::{rpn_forward, AnchorSet, RpnHead, RpnHeads, RpnOutput};
use crate::tensor::serialize::{self, Record};
use crate::tensor::{ParamStore, Sgd, Tensor};

/// Mean and scale applied to [0, 1] pixels before the backbone.
pub const PIXEL_MEAN: f32 = 0.5;
pub const PIXEL_SCALE: f32 = 4.0;

/// Stacks scenes into a normalized N×3×H×W batch.
pub fn image_batch(scenes: &[&Scene]) -> Result<Tensor<f32>> {
    let first = scenes.first().ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(scenes.len() * 3 * h * w);
    for s in scenes {
        if (s.height, s.width) != (h, w) {
            return Err(Error::InvalidArgument("images in a batch must share a size".into()));
        }
        data.extend(s.pixels.iter().map(|&p| (p - PIXEL_MEAN) * PIXEL_SCALE));
    }
    Tensor::from_vec(data, &[scenes.len(), 3, h, w])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Proposals,
    Detection,
    Masks,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Proposals => "proposals",
            Task::Detection => "detection",
            Task::Masks => "masks",
        }
    }

    fn code(self) -> f32 {
        match self {
            Task::Proposals => 1.0,
            Task::Detection => 2.0,
            Task::Masks => 3.0,
        }
    }

    fn from_code(v: f32) -> Option<Task> {
        [Task::Proposals, Task::Detection, Task::Masks].into_iter().find(|t| t.code() == v)
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proposals" => Ok(Task::Proposals),
            "detection" => Ok(Task::Detection),
            "masks" => Ok(Task::Masks),
            _ => Err(Error::InvalidArgument(format!("unknown task `{s}`"))),
        }
    }
}

fn init_rng(cfg: &RunConfig, purpose: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, purpose))
}

/// Backbone plus region proposal head, on the pyramid or a single C_k.
#[derive(Debug)]
pub struct RpnNetwork {
    pub store: ParamStore<f32>,
    pub backbone: Backbone<f32>,
    pub pyramid: Option<PyramidBuilder<f32>>,
    pub heads: RpnHeads<f32>,
    pub source: RpnSource,
    pub anchor_base_scale: f64,
}

impl RpnNetwork {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let mut rng = init_rng(cfg, "init.rpn");
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, &cfg.backbone, &mut rng)?;
        let ch = cfg.backbone.stage_channels;
        let d = cfg.fpn.d;
        let (pyramid, in_ch, apc) = match cfg.rpn.source {
            RpnSource::Pyramid => {
                let p = PyramidBuilder::new(&mut store, "fpn", ch, d, cfg.fpn.variant, true, &mut rng)?;
                // a lone exposed level carries every anchor scale
                let apc = if p.with_p6 { ANCHOR_RATIOS.len() } else { 5 * ANCHOR_RATIOS.len() };
                (Some(p), d, apc)
            }
            RpnSource::C4 => (None, ch[2], 5 * ANCHOR_RATIOS.len()),
            RpnSource::C5 => (None, ch[3], 5 * ANCHOR_RATIOS.len()),
        };
        let head = RpnHead::new(&mut store, "rpn", in_ch, d, apc, &mut rng)?;
        Ok(RpnNetwork {
            store,
            backbone,
            pyramid,
            heads: RpnHeads::Shared(head),
            source: cfg.rpn.source,
            anchor_base_scale: cfg.rpn.anchor_base_scale,
        })
    }

    /// Feature maps the head reads, keyed by level.
    pub fn features(&self, images: &Tensor<f32>) -> Result<BTreeMap<usize, Tensor<f32>>> {
        let c = self.backbone.forward(images)?;
        Ok(match (&self.pyramid, self.source) {
            (Some(p), _) => p.forward(&c)?.levels,
            (None, RpnSource::C5) => BTreeMap::from([(5, c.c5)]),
            (None, _) => BTreeMap::from([(4, c.c4)]),
        })
    }

    /// Anchors for the given feature shapes: one scale per level on a
    /// multi-level pyramid, all five scales on a single map.
    pub fn anchors(&self, shapes: &BTreeMap<usize, (usize, usize)>) -> Result<AnchorSet> {
        if shapes.len() > 1 {
            return Ok(AnchorSet::new(generate_anchors(shapes, self.anchor_base_scale)?));
        }
        let (&k, &(h, w)) = shapes
            .iter()
            .next()
            .ok_or_else(|| Error::InvalidArgument("no feature maps".into()))?;
        let scales: Vec<f64> = (2..=6).map(|l| level_anchor_scale(self.anchor_base_scale, l)).collect();
        let grid = AnchorGrid::tile(k, f64::powi(2.0, k as i32), h, w, &scales, &ANCHOR_RATIOS);
        Ok(AnchorSet::new(BTreeMap::from([(k, grid)])))
    }

    pub fn forward(&self, images: &Tensor<f32>) -> Result<(RpnOutput<f32>, AnchorSet)> {
        let feats = self.features(images)?;
        let shapes = feats.iter().map(|(&k, t)| (k, (t.shape()[2], t.shape()[3]))).collect();
        let anchors = self.anchors(&shapes)?;
        Ok((rpn_forward(&feats, &self.heads)?, anchors))
    }
}

/// Backbone, pyramid without P6, and the RoI head.
#[derive(Debug)]
pub struct DetectorNetwork {
    pub store: ParamStore<f32>,
    pub backbone: Backbone<f32>,
    pub pyramid: PyramidBuilder<f32>,
    pub head: DetectorHead<f32>,
    pub k0: i32,
    pub canonical_size: f64,
}

impl DetectorNetwork {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let mut rng = init_rng(cfg, "init.det");
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, &cfg.backbone, &mut rng)?;
        let pyramid = PyramidBuilder::new(
            &mut store,
            "fpn",
            cfg.backbone.stage_channels,
            cfg.fpn.d,
            cfg.fpn.variant,
            false,
            &mut rng,
        )?;
        let dc = &cfg.detector;
        let head = DetectorHead::new(
            &mut store,
            "det",
            cfg.fpn.d,
            dc.pool_size,
            dc.fc_dim,
            ShapeClass::ALL.len(),
            &mut rng,
        )?;
        Ok(DetectorNetwork {
            store,
            backbone,
            pyramid,
            head,
            k0: dc.k0,
            canonical_size: dc.canonical_size,
        })
    }

    pub fn pyramid(&self, images: &Tensor<f32>) -> Result<FeaturePyramid<f32>> {
        self.pyramid.forward(&self.backbone.forward(images)?)
    }

    /// Level for a box, moved to the nearest level the pyramid exposes.
    pub fn level_for(&self, pyramid: &FeaturePyramid<f32>, b: &BBox) -> Result<usize> {
        let k = assign_roi_level(b, self.k0, self.canonical_size)?;
        pyramid
            .levels
            .keys()
            .copied()
            .min_by_key(|&l| (l as i64 - k as i64).abs())
            .ok_or_else(|| Error::InvalidArgument("empty pyramid".into()))
    }

    /// Head outputs for `(image, box)` pairs in order.
    pub fn forward_rois(&self, pyramid: &FeaturePyramid<f32>, boxes: &[(usize, BBox)]) -> Result<DetectorOutput<f32>> {
        let rois = boxes
            .iter()
            .map(|&(image, bbox)| {
                Ok(Roi {
                    bbox,
                    image,
                    level: self.level_for(pyramid, &bbox)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        detector_forward(pyramid, &rois, &self.head)
    }
}

/// Backbone, pyramid with P6, and the two mask MLPs.
#[derive(Debug)]
pub struct MaskNetwork {
    pub store: ParamStore<f32>,
    pub backbone: Backbone<f32>,
    pub pyramid: PyramidBuilder<f32>,
    pub heads: MaskHeads<f32>,
}

impl MaskNetwork {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let mut rng = init_rng(cfg, "init.mask");
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, &cfg.backbone, &mut rng)?;
        let mc = &cfg.mask;
        let pyramid = PyramidBuilder::new(
            &mut store,
            "fpn",
            cfg.backbone.stage_channels,
            mc.d,
            cfg.fpn.variant,
            true,
            &mut rng,
        )?;
        let full = MaskHead::new(&mut store, "mask", MaskHeadKind::Full, mc.d, mc.hidden, mc.resolution, &mut rng)?;
        let half = MaskHead::new(&mut store, "mask", MaskHeadKind::Half, mc.d, mc.hidden, mc.resolution, &mut rng)?;
        Ok(MaskNetwork {
            store,
            backbone,
            pyramid,
            heads: MaskHeads {
                full,
                half,
                geometry: MaskGeometry {
                    base_scale: mc.base_scale,
                    padding_factor: mc.padding_factor,
                },
            },
        })
    }

    pub fn pyramid(&self, images: &Tensor<f32>) -> Result<FeaturePyramid<f32>> {
        self.pyramid.forward(&self.backbone.forward(images)?)
    }

    pub fn forward_dense(&self, images: &Tensor<f32>) -> Result<MaskOutputs<f32>> {
        mask_head_forward(&self.pyramid(images)?, &self.heads)
    }
}

/// Prefix under which a detector checkpoint embeds its proposal network.
pub const PROPOSER_PREFIX: &str = "proposer.";

/// Parameters, optimizer state and training position.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub task: Task,
    pub step: usize,
    pub params: Vec<Record>,
    pub velocity: Vec<Record>,
    /// Proposal network parameters (detection checkpoints only).
    pub proposer: Vec<Record>,
}

impl Checkpoint {
    pub fn capture(task: Task, step: usize, store: &ParamStore<f32>, optimizer: &Sgd<f32>) -> Self {
        Checkpoint {
            task,
            step,
            params: store.to_records(),
            velocity: optimizer.to_records(store),
            proposer: Vec::new(),
        }
    }

    pub fn to_records(&self) -> Vec<Record> {
        let mut out = vec![
            Record {
                name: "meta.task".into(),
                shape: vec![1],
                values: vec![self.task.code()],
            },
            Record {
                name: "meta.step".into(),
                shape: vec![1],
                values: vec![self.step as f32],
            },
        ];
        out.extend(self.params.iter().cloned());
        out.extend(self.velocity.iter().cloned());
        out.extend(self.proposer.iter().map(|r| Record {
            name: format!("{PROPOSER_PREFIX}{}", r.name),
            ..r.clone()
        }));
        out
    }

    pub fn from_records(records: Vec<Record>) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            what: "checkpoint",
            reason: reason.into(),
        };
        let meta = |name: &str| {
            records
                .iter()
                .find(|r| r.name == name)
                .and_then(|r| r.values.first().copied())
                .ok_or_else(|| bad(&format!("missing {name}")))
        };
        let task = Task::from_code(meta("meta.task")?).ok_or_else(|| bad("unknown task code"))?;
        let step = meta("meta.step")? as usize;
        let mut ck = Checkpoint {
            task,
            step,
            params: Vec::new(),
            velocity: Vec::new(),
            proposer: Vec::new(),
        };
        for r in records {
            if r.name.starts_with("meta.") {
                continue;
            } else if r.name.starts_with("optim.") {
                ck.velocity.push(r);
            } else if let Some(rest) = r.name.strip_prefix(PROPOSER_PREFIX) {
                ck.proposer.push(Record {
                    name: rest.to_string(),
                    ..r
                });
            } else {
                ck.params.push(r);
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        serialize::save(path, &self.to_records())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_records(serialize::load(path)?)
    }

    pub fn expect_task(&self, task: Task) -> Result<()> {
        if self.task != task {
            return Err(Error::TaskMismatch {
                requested: task.name().into(),
                reason: format!("checkpoint was trained for {}", self.task.name()),
            });
        }
        Ok(())
    }

    /// Loads parameters into a store; every stored name must exist and vice versa.
    pub fn restore(&self, store: &ParamStore<f32>) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Format {
                what: "checkpoint",
                reason: format!("{} parameters stored, network has {}", self.params.len(), store.len()),
            });
        }
        store.load_records(&self.params)
    }
}
