//! Run configuration, stored as TOML next to every run's outputs.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::{generate_dataset, DataSpec, Scene};
use crate::detector::SamplingConfig;
use crate::error::{Error, Result};
use crate::fpn::PyramidVariant;
use crate::metrics::EvalConfig;
use crate::rpn::ProposalConfig;

/// Which features the RPN reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RpnSource {
    /// Every pyramid level, one shared head.
    Pyramid,
    /// The single C4 map, all anchor scales at stride 16.
    C4,
    /// The single C5 map, all anchor scales at stride 32.
    C5,
}

impl RpnSource {
    pub fn name(self) -> &'static str {
        match self {
            RpnSource::Pyramid => "pyramid",
            RpnSource::C4 => "c4",
            RpnSource::C5 => "c5",
        }
    }
}

impl FromStr for RpnSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pyramid" => Ok(RpnSource::Pyramid),
            "c4" => Ok(RpnSource::C4),
            "c5" => Ok(RpnSource::C5),
            _ => Err(Error::InvalidArgument(format!("unknown rpn source `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_images: usize,
    pub eval_images: usize,
    pub image_size: usize,
    pub min_object_size: f64,
    pub max_object_size: f64,
    pub max_objects: usize,
    pub noise_std: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = DataSpec::default();
        DataConfig {
            train_images: 500,
            eval_images: 100,
            image_size: s.image_size,
            min_object_size: s.min_object_size,
            max_object_size: s.max_object_size,
            max_objects: s.max_objects,
            noise_std: s.noise_std,
        }
    }
}

impl DataConfig {
    pub fn spec(&self) -> DataSpec {
        DataSpec {
            image_size: self.image_size,
            min_object_size: self.min_object_size,
            max_object_size: self.max_object_size,
            max_objects: self.max_objects,
            noise_std: self.noise_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PyramidConfig {
    pub d: usize,
    pub variant: PyramidVariant,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        PyramidConfig {
            d: 64,
            variant: PyramidVariant::FullFpn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RpnConfig {
    pub source: RpnSource,
    /// Anchor side on P2; P_k uses `base · 2^(k-2)`.
    pub anchor_base_scale: f64,
    pub positive_iou: f64,
    pub negative_iou: f64,
    pub anchors_per_image: usize,
    pub nms_threshold: f64,
    pub min_size: f64,
    /// Top-scoring boxes kept per level before NMS at test time.
    pub pre_nms_per_level: usize,
    pub post_nms: usize,
}

impl Default for RpnConfig {
    fn default() -> Self {
        RpnConfig {
            source: RpnSource::Pyramid,
            anchor_base_scale: 16.0,
            positive_iou: 0.7,
            negative_iou: 0.3,
            anchors_per_image: 256,
            nms_threshold: 0.7,
            min_size: 1.0,
            pre_nms_per_level: 1000,
            post_nms: 1000,
        }
    }
}

impl RpnConfig {
    pub fn proposal_config(&self, post_nms: usize) -> ProposalConfig {
        ProposalConfig {
            pre_nms_top_n: Some(self.pre_nms_per_level),
            nms_threshold: Some(self.nms_threshold),
            post_nms_top_n: Some(post_nms),
            min_size: self.min_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// RoI side that maps to level `k0`.
    pub canonical_size: f64,
    pub k0: i32,
    pub pool_size: usize,
    pub fc_dim: usize,
    pub rois_per_image: usize,
    pub fg_fraction: f64,
    pub fg_iou: f64,
    pub bg_iou_lo: f64,
    pub train_proposals: usize,
    pub test_proposals: usize,
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub max_detections: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            canonical_size: 56.0,
            k0: 4,
            pool_size: 7,
            fc_dim: 256,
            rois_per_image: 128,
            fg_fraction: 0.25,
            fg_iou: 0.5,
            bg_iou_lo: 0.1,
            train_proposals: 2000,
            test_proposals: 1000,
            score_threshold: 0.05,
            nms_threshold: 0.5,
            max_detections: 100,
        }
    }
}

impl DetectorConfig {
    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig {
            per_image: self.rois_per_image,
            fg_fraction: self.fg_fraction,
            fg_iou: self.fg_iou,
            bg_iou_lo: self.bg_iou_lo,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    /// Pyramid width of the segment proposal network.
    pub d: usize,
    pub hidden: usize,
    pub resolution: usize,
    /// Canonical mask scale on P2.
    pub base_scale: f64,
    pub padding_factor: f64,
    pub samples_per_image: usize,
    pub mask_weight: f64,
    pub proposals: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            d: 64,
            hidden: 128,
            resolution: 14,
            base_scale: 8.0,
            padding_factor: 1.25,
            samples_per_image: 128,
            mask_weight: 10.0,
            proposals: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Step at which the learning rate is multiplied by `decay_factor`.
    pub decay_step: usize,
    pub decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Linear warm-up length in steps (0 disables).
    pub warmup_steps: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch_size: 2,
            lr: 0.01,
            decay_step: 2250,
            decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_steps: 100,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        let base = if step >= self.decay_step {
            self.lr * self.decay_factor
        } else {
            self.lr
        };
        if step < self.warmup_steps {
            base * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            base
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub iou_thresholds: Vec<f64>,
    pub proposal_budgets: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            iou_thresholds: EvalConfig::default().iou_thresholds,
            proposal_budgets: vec![100, 1000],
        }
    }
}

impl EvalSection {
    pub fn metrics(&self) -> EvalConfig {
        EvalConfig {
            iou_thresholds: self.iou_thresholds.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub fpn: PyramidConfig,
    pub rpn: RpnConfig,
    pub detector: DetectorConfig,
    pub mask: MaskConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {v}")))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.spec().validate()?;
        self.backbone.validate()?;
        if self.fpn.d == 0 || self.mask.d == 0 || self.mask.hidden == 0 || self.detector.fc_dim == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        positive("rpn.anchor_base_scale", self.rpn.anchor_base_scale)?;
        positive("detector.canonical_size", self.detector.canonical_size)?;
        positive("mask.base_scale", self.mask.base_scale)?;
        positive("train.lr", self.train.lr)?;
        if !(0.0..1.0).contains(&self.rpn.negative_iou) || self.rpn.negative_iou > self.rpn.positive_iou || self.rpn.positive_iou > 1.0 {
            return Err(Error::Config("rpn IoU thresholds must satisfy 0 ≤ negative ≤ positive ≤ 1".into()));
        }
        if self.detector.bg_iou_lo.partial_cmp(&self.detector.fg_iou) != Some(std::cmp::Ordering::Less)
            || !(0.0..=1.0).contains(&self.detector.fg_fraction)
        {
            return Err(Error::Config("detector sampling thresholds are inconsistent".into()));
        }
        if self.train.batch_size == 0
            || self.rpn.anchors_per_image == 0
            || self.detector.rois_per_image == 0
            || self.mask.samples_per_image < 4
        {
            return Err(Error::Config("batch and sample sizes must be positive".into()));
        }
        if self.mask.resolution == 0 || self.detector.pool_size == 0 {
            return Err(Error::Config("output resolutions must be positive".into()));
        }
        if self.eval.proposal_budgets.is_empty() || self.eval.proposal_budgets.contains(&0) {
            return Err(Error::Config("eval.proposal_budgets must be non-empty and positive".into()));
        }
        self.eval.metrics().validate()
    }

    /// The synthetic training split implied by the master seed.
    pub fn train_scenes(&self) -> Result<Vec<Scene>> {
        generate_dataset(self.data.train_images, derive_seed(self.seed, "data.train"), &self.data.spec())
    }

    /// The synthetic evaluation split, disjoint in seed from the training one.
    pub fn eval_scenes(&self) -> Result<Vec<Scene>> {
        generate_dataset(self.data.eval_images, derive_seed(self.seed, "data.eval"), &self.data.spec())
    }
}

/// Independent seed for one purpose (`"data.train"`, `"init"`, `"sample"`, …)
/// derived from the master seed.
pub fn derive_seed(master: u64, purpose: &str) -> u64 {
    // FNV-1a over the purpose, then a splitmix64 finalizer over the mix
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = master ^ h.rotate_left(17);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
