//! Small residual network producing the bottom-up hierarchy C2..C5.
//!
//! A stride-2 3×3 stem and a 2×2 max subsample bring the input to stride 4;
//! four stages of basic residual blocks (two 3×3 convolutions plus a skip)
//! follow, the first block of stages 3–5 downsampling by 2. There is no
//! normalization layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{conv2d, Float, ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    /// Output channels of the conv2..conv5 stages.
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: [usize; 4],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stem_channels: 16,
            stage_channels: [16, 32, 64, 128],
            blocks_per_stage: [1, 1, 1, 1],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stem_channels == 0 || self.stage_channels.contains(&0) {
            return Err(Error::Config("backbone channel counts must be positive".into()));
        }
        if self.blocks_per_stage.contains(&0) {
            return Err(Error::Config("backbone.blocks_per_stage entries must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Outputs of the last residual block of each stage.
#[derive(Debug, Clone)]
pub struct BottomUpFeatures<T: Float> {
    pub c2: Tensor<T>,
    pub c3: Tensor<T>,
    pub c4: Tensor<T>,
    pub c5: Tensor<T>,
}

impl<T: Float> BottomUpFeatures<T> {
    pub fn get(&self, level: usize) -> Result<&Tensor<T>> {
        match level {
            2 => Ok(&self.c2),
            3 => Ok(&self.c3),
            4 => Ok(&self.c4),
            5 => Ok(&self.c5),
            k => Err(Error::UnknownLevel(k)),
        }
    }
}

#[derive(Debug, Clone)]
struct Conv<T: Float> {
    weight: Tensor<T>,
    bias: Tensor<T>,
    stride: usize,
    padding: usize,
}

impl<T: Float> Conv<T> {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Conv {
            weight: store.add_weight(format!("{name}.weight"), &[cout, cin, k, k], gain, rng)?,
            bias: store.add_zeros(format!("{name}.bias"), &[cout])?,
            stride,
            padding: k / 2,
        })
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, &self.weight, Some(&self.bias), self.stride, self.padding)
    }
}

#[derive(Debug, Clone)]
struct ResidualBlock<T: Float> {
    conv1: Conv<T>,
    conv2: Conv<T>,
    projection: Option<Conv<T>>,
}

impl<T: Float> ResidualBlock<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.conv1.forward(x)?.relu();
        let h = self.conv2.forward(&h)?;
        let skip = match &self.projection {
            Some(p) => p.forward(x)?,
            None => x.clone(),
        };
        Ok(h.add(&skip)?.relu())
    }
}

#[derive(Debug, Clone)]
pub struct Backbone<T: Float> {
    stem: Conv<T>,
    stages: Vec<Vec<ResidualBlock<T>>>,
}

const HE_GAIN: f64 = std::f64::consts::SQRT_2;

impl<T: Float> Backbone<T> {
    /// Registers parameters under `backbone.*`.
    pub fn new(store: &mut ParamStore<T>, cfg: &BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let stem = Conv::new(store, "backbone.stem", 3, cfg.stem_channels, 3, 2, HE_GAIN, rng)?;
        let mut stages = Vec::with_capacity(4);
        let mut cin = cfg.stem_channels;
        for (s, (&cout, &blocks)) in cfg.stage_channels.iter().zip(&cfg.blocks_per_stage).enumerate() {
            let level = s + 2;
            let mut stage = Vec::with_capacity(blocks);
            for b in 0..blocks {
                let stride = if b == 0 && level > 2 { 2 } else { 1 };
                let name = format!("backbone.stage{level}.block{b}");
                let conv1 = Conv::new(store, &format!("{name}.conv1"), cin, cout, 3, stride, HE_GAIN, rng)?;
                let conv2 = Conv::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, 1.0, rng)?;
                let projection = if stride != 1 || cin != cout {
                    Some(Conv::new(store, &format!("{name}.proj"), cin, cout, 1, stride, 1.0, rng)?)
                } else {
                    None
                };
                stage.push(ResidualBlock { conv1, conv2, projection });
                cin = cout;
            }
            stages.push(stage);
        }
        Ok(Backbone { stem, stages })
    }

    pub fn forward(&self, image: &Tensor<T>) -> Result<BottomUpFeatures<T>> {
        match *image.shape() {
            [_, 3, h, w] if h % 32 == 0 && w % 32 == 0 => {}
            _ => {
                return Err(Error::InvalidShape {
                    op: "backbone_forward",
                    shape: image.shape().to_vec(),
                    reason: "expected N×3×H×W with H and W multiples of 32".into(),
                })
            }
        }
        let mut x = self.stem.forward(image)?.relu().max_subsample2x()?;
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                x = block.forward(&x)?;
            }
            outs.push(x.clone());
        }
        let mut it = outs.into_iter();
        let mut next = || it.next().expect("four stages");
        Ok(BottomUpFeatures {
            c2: next(),
            c3: next(),
            c4: next(),
            c5: next(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn residual_block_with_zero_convs_is_identity_on_nonnegative_input() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = |name: &str| Conv::new(&mut store, name, 4, 4, 3, 1, 0.0, &mut rng).unwrap();
        let block = ResidualBlock {
            conv1: conv("a"),
            conv2: conv("b"),
            projection: None,
        };
        let x: Vec<f64> = (0..4 * 5 * 5).map(|i| (i % 7) as f64 * 0.3).collect();
        let xt = Tensor::from_vec(x.clone(), &[1, 4, 5, 5]).unwrap();
        assert_eq!(block.forward(&xt).unwrap().to_vec(), x);
    }

    #[test]
    fn rejects_non_multiple_of_32() {
        let mut store = ParamStore::<f32>::new();
        let bb = Backbone::new(&mut store, &BackboneConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let img = Tensor::<f32>::zeros(&[1, 3, 48, 64]).unwrap();
        assert!(bb.forward(&img).is_err());
    }
}
