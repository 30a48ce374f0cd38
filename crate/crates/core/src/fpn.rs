//! Feature pyramid construction from bottom-up features.
//!
//! The full network starts from a 1×1 convolution on C5, then for k = 4, 3, 2
//! adds a 1×1 lateral projection of C_k to the ×2 nearest-upsampled coarser
//! map. Each merged map is smoothed by a 3×3 convolution (padding 1) to give
//! P_k. These layers are linear. P6, when requested, is a 2×2 max subsample
//! of P5 and carries no parameters.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BottomUpFeatures;
use crate::error::{Error, Result};
use crate::tensor::{conv2d, Float, ParamStore, Tensor};

/// Structural variants compared in the pyramid ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PyramidVariant {
    /// Lateral and top-down connections.
    FullFpn,
    /// Laterals and 3×3 outputs on each C_k, no top-down path.
    BottomUpOnly,
    /// Top-down path seeded by C5 alone, no laterals for k < 5.
    TopDownNoLateral,
    /// Full top-down computation; only P2 is exposed.
    FinestOnly,
}

impl PyramidVariant {
    pub const ALL: [PyramidVariant; 4] = [
        PyramidVariant::FullFpn,
        PyramidVariant::BottomUpOnly,
        PyramidVariant::TopDownNoLateral,
        PyramidVariant::FinestOnly,
    ];

    fn lateral_levels(self) -> &'static [usize] {
        match self {
            PyramidVariant::TopDownNoLateral => &[5],
            _ => &[2, 3, 4, 5],
        }
    }

    fn output_levels(self) -> &'static [usize] {
        match self {
            PyramidVariant::FinestOnly => &[2],
            _ => &[2, 3, 4, 5],
        }
    }

    /// Short CLI name.
    pub fn cli_name(self) -> &'static str {
        match self {
            PyramidVariant::FullFpn => "fpn",
            PyramidVariant::BottomUpOnly => "bottomup",
            PyramidVariant::TopDownNoLateral => "nolateral",
            PyramidVariant::FinestOnly => "finest",
        }
    }
}

impl fmt::Display for PyramidVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

impl FromStr for PyramidVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fpn" | "full_fpn" => Ok(PyramidVariant::FullFpn),
            "bottomup" | "bottom_up_only" => Ok(PyramidVariant::BottomUpOnly),
            "nolateral" | "top_down_no_lateral" => Ok(PyramidVariant::TopDownNoLateral),
            "finest" | "finest_only" => Ok(PyramidVariant::FinestOnly),
            other => Err(Error::InvalidArgument(format!("unknown pyramid variant `{other}`"))),
        }
    }
}

/// Feature maps keyed by level k, each with `d` channels at stride 2^k.
#[derive(Debug, Clone)]
pub struct FeaturePyramid<T: Float> {
    pub levels: BTreeMap<usize, Tensor<T>>,
    pub d: usize,
    pub has_p6: bool,
    /// Number of ×2 upsampling operations executed while building.
    pub upsample_ops: usize,
}

impl<T: Float> FeaturePyramid<T> {
    pub fn get(&self, level: usize) -> Result<&Tensor<T>> {
        self.levels.get(&level).ok_or(Error::UnknownLevel(level))
    }

    /// `k → (H_k, W_k)` for every level.
    pub fn level_shapes(&self) -> BTreeMap<usize, (usize, usize)> {
        self.levels.iter().map(|(&k, t)| (k, (t.shape()[2], t.shape()[3]))).collect()
    }

    pub fn batch(&self) -> usize {
        self.levels.values().next().map_or(0, |t| t.shape()[0])
    }
}

#[derive(Debug, Clone)]
struct Conv<T: Float> {
    weight: Tensor<T>,
    bias: Tensor<T>,
}

impl<T: Float> Conv<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let pad = self.weight.shape()[2] / 2;
        conv2d(x, &self.weight, Some(&self.bias), 1, pad)
    }
}

/// Learned layers of a pyramid variant (`fpn.lateral.<k>.*`, `fpn.output.<k>.*`).
#[derive(Debug, Clone)]
pub struct PyramidBuilder<T: Float> {
    pub variant: PyramidVariant,
    pub d: usize,
    pub with_p6: bool,
    lateral: BTreeMap<usize, Conv<T>>,
    output: BTreeMap<usize, Conv<T>>,
}

impl<T: Float> PyramidBuilder<T> {
    /// `in_channels[k-2]` is the channel count of C_k.
    pub fn new(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_channels: [usize; 4],
        d: usize,
        variant: PyramidVariant,
        with_p6: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if d == 0 {
            return Err(Error::Config("pyramid d must be positive".into()));
        }
        let mut lateral = BTreeMap::new();
        for &k in variant.lateral_levels() {
            let cin = in_channels[k - 2];
            lateral.insert(
                k,
                Conv {
                    weight: store.add_weight(format!("{prefix}.lateral.{k}.weight"), &[d, cin, 1, 1], 1.0, rng)?,
                    bias: store.add_zeros(format!("{prefix}.lateral.{k}.bias"), &[d])?,
                },
            );
        }
        let mut output = BTreeMap::new();
        for &k in variant.output_levels() {
            output.insert(
                k,
                Conv {
                    weight: store.add_weight(format!("{prefix}.output.{k}.weight"), &[d, d, 3, 3], 1.0, rng)?,
                    bias: store.add_zeros(format!("{prefix}.output.{k}.bias"), &[d])?,
                },
            );
        }
        Ok(PyramidBuilder {
            variant,
            d,
            with_p6: with_p6 && variant != PyramidVariant::FinestOnly,
            lateral,
            output,
        })
    }

    fn lateral(&self, k: usize, c: &BottomUpFeatures<T>) -> Result<Tensor<T>> {
        self.lateral[&k].forward(c.get(k)?)
    }

    fn merge(&self, top_down: &Tensor<T>, lateral: &Tensor<T>) -> Result<Tensor<T>> {
        top_down.add(lateral).map_err(|_| Error::ShapeMismatch {
            op: "pyramid merge",
            lhs: top_down.shape().to_vec(),
            rhs: lateral.shape().to_vec(),
        })
    }

    pub fn forward(&self, c: &BottomUpFeatures<T>) -> Result<FeaturePyramid<T>> {
        let mut levels = BTreeMap::new();
        let mut upsample_ops = 0;
        match self.variant {
            PyramidVariant::BottomUpOnly => {
                for k in 2..=5 {
                    levels.insert(k, self.output[&k].forward(&self.lateral(k, c)?)?);
                }
            }
            PyramidVariant::FullFpn | PyramidVariant::TopDownNoLateral | PyramidVariant::FinestOnly => {
                let mut merged = self.lateral(5, c)?;
                let mut merged_maps = BTreeMap::from([(5, merged.clone())]);
                for k in (2..=4).rev() {
                    let up = merged.nearest_upsample2x()?;
                    upsample_ops += 1;
                    merged = match self.lateral.contains_key(&k) {
                        true => self.merge(&up, &self.lateral(k, c)?)?,
                        false => up,
                    };
                    merged_maps.insert(k, merged.clone());
                }
                for (&k, conv) in &self.output {
                    levels.insert(k, conv.forward(&merged_maps[&k])?);
                }
            }
        }
        if self.with_p6 {
            let p6 = levels[&5].max_subsample2x()?;
            levels.insert(6, p6);
        }
        Ok(FeaturePyramid {
            levels,
            d: self.d,
            has_p6: self.with_p6,
            upsample_ops,
        })
    }

    /// Number of 1×1 lateral convolutions (including the one on C5).
    pub fn lateral_count(&self) -> usize {
        self.lateral.len()
    }

    /// Overwrite a lateral or output convolution; used to build hand-checked cases.
    pub fn set_layer(&self, kind: LayerKind, level: usize, weight: &[T], bias: &[T]) -> Result<()> {
        let conv = match kind {
            LayerKind::Lateral => self.lateral.get(&level),
            LayerKind::Output => self.output.get(&level),
        }
        .ok_or(Error::UnknownLevel(level))?;
        if weight.len() != conv.weight.numel() || bias.len() != conv.bias.numel() {
            return Err(Error::InvalidArgument("layer override has the wrong size".into()));
        }
        conv.weight.data_mut().copy_from_slice(weight);
        conv.bias.data_mut().copy_from_slice(bias);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Lateral,
    Output,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in PyramidVariant::ALL {
            assert_eq!(v.cli_name().parse::<PyramidVariant>().unwrap(), v);
        }
        assert!("nope".parse::<PyramidVariant>().is_err());
    }
}
