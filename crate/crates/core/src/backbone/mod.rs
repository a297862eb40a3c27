//! U-shaped encoder/decoder: stage specifications, the SSA transformer
//! variant and the convolutional variant.

pub mod attention;
pub mod cnn;
pub mod transformer;

use serde::{Deserialize, Serialize};

use crate::bridge::BridgeConfig;
use crate::error::{Error, Result};
use crate::nn::Layout;
use crate::tensor::{Scalar, Var};

pub use attention::{scaled_dot_attention, ShuntedAttention, SsaBlock, SsaFfn, TokenAggregation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Transformer,
    Cnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub in_channels: usize,
    pub num_classes: usize,
    pub channels: [usize; 4],
    pub depths: [usize; 4],
    /// Blocks per decoder stage; mirrors `depths` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decoder_depths: Option<[usize; 4]>,
    pub heads: [usize; 4],
    /// MTA rate pair per stage, one rate per half of the heads.
    pub mta_rates: [[usize; 2]; 4],
    pub mlp_ratio: usize,
    /// Upper bound on group-norm groups (convolutional variant).
    pub norm_groups: usize,
    pub bridge: BridgeConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Transformer,
            in_channels: 3,
            num_classes: 9,
            channels: [64, 128, 256, 512],
            depths: [2, 4, 4, 1],
            decoder_depths: None,
            heads: [2, 4, 8, 16],
            mta_rates: [[8, 4], [4, 2], [2, 1], [1, 1]],
            mlp_ratio: 4,
            norm_groups: 4,
            bridge: BridgeConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSpec {
    /// 1-based.
    pub index: usize,
    pub stride: usize,
    pub channels: usize,
    pub depth: usize,
    pub decoder_depth: usize,
    pub heads: usize,
    pub rates: [usize; 2],
}

impl ModelConfig {
    /// 32x32-input configuration used by gradient and shape tests.
    pub fn tiny() -> Self {
        Self { channels: [4, 8, 16, 32], depths: [1, 1, 1, 1], heads: [2, 2, 2, 2], mlp_ratio: 2, bridge: BridgeConfig::tiny(), ..Self::default() }
    }

    /// Small convolutional variant for binary vessel patches.
    pub fn vessel_cnn() -> Self {
        Self {
            variant: Variant::Cnn,
            num_classes: 2,
            channels: [8, 16, 32, 64],
            depths: [1, 1, 1, 1],
            heads: [2, 2, 2, 2],
            mlp_ratio: 2,
            bridge: BridgeConfig { fold_width: 8, mcpa_rates: [8, 4], global_rates: [4, 2], ffn_ratio: 2, ..BridgeConfig::default() },
            ..Self::default()
        }
    }

    pub fn decoder_depths(&self) -> [usize; 4] {
        self.decoder_depths.unwrap_or(self.depths)
    }

    /// Fills every optional field with its effective value.
    pub fn resolved(&self) -> Self {
        Self { decoder_depths: Some(self.decoder_depths()), ..self.clone() }
    }

    pub fn strides(&self) -> [usize; 4] {
        match self.variant {
            Variant::Transformer => [4, 8, 16, 32],
            Variant::Cnn => [1, 2, 4, 8],
        }
    }

    /// Input height and width must be multiples of this.
    pub fn divisor(&self) -> usize {
        self.strides()[3]
    }

    pub fn stages(&self) -> [StageSpec; 4] {
        let strides = self.strides();
        let dd = self.decoder_depths();
        std::array::from_fn(|i| StageSpec {
            index: i + 1,
            stride: strides[i],
            channels: self.channels[i],
            depth: self.depths[i],
            decoder_depth: dd[i],
            heads: self.heads[i],
            rates: self.mta_rates[i],
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.num_classes < 2 {
            return Err(Error::config("model needs at least one input channel and two classes"));
        }
        for s in self.stages() {
            if s.channels == 0 || s.heads == 0 || s.channels % s.heads != 0 {
                return Err(Error::config(format!("stage {}: channels {} not divisible by heads {}", s.index, s.channels, s.heads)));
            }
            if self.variant == Variant::Transformer && s.heads % 2 != 0 {
                return Err(Error::config(format!("stage {}: head count {} must be even to split between two MTA rates", s.index, s.heads)));
            }
            if s.rates.contains(&0) {
                return Err(Error::config(format!("stage {}: MTA rates must be positive", s.index)));
            }
        }
        for i in 1..4 {
            if self.channels[i] != 2 * self.channels[i - 1] {
                return Err(Error::config(format!("stage {} channels must double the previous stage", i + 1)));
            }
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config("mlp_ratio must be positive"));
        }
        self.bridge.validate(&self.channels)
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let d = self.divisor();
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::config(format!("input {h}x{w} is not divisible by {d}")));
        }
        Ok(())
    }

    /// `(h, w)` grid of every stage for an `h x w` input.
    pub fn grids(&self, h: usize, w: usize) -> Result<[(usize, usize); 4]> {
        self.check_input(h, w)?;
        let s = self.strides();
        Ok(std::array::from_fn(|i| (h / s[i], w / s[i])))
    }
}

/// Token sequence `[N, h*w, C]` at one encoder scale.
#[derive(Clone, Copy, Debug)]
pub struct Scale<'t, T: Scalar> {
    pub x: Var<'t, T>,
    pub h: usize,
    pub w: usize,
}

impl<'t, T: Scalar> Scale<'t, T> {
    pub fn new(x: Var<'t, T>, h: usize, w: usize) -> Result<Self> {
        let s = x.shape();
        if s.len() != 3 || s[1] != h * w {
            return Err(Error::shape(format!("tokens {s:?} do not factor as {h}x{w}")));
        }
        Ok(Self { x, h, w })
    }

    pub fn channels(&self) -> usize {
        self.x.shape()[2]
    }

    pub fn layout(&self) -> Layout {
        Layout::grid(self.h, self.w)
    }

    pub fn with(&self, x: Var<'t, T>) -> Result<Self> {
        Self::new(x, self.h, self.w)
    }
}

/// Encoder outputs F1..F4.
#[derive(Clone, Debug)]
pub struct MultiScaleFeatures<'t, T: Scalar> {
    pub scales: [Scale<'t, T>; 4],
}

impl<'t, T: Scalar> MultiScaleFeatures<'t, T> {
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.scales.iter().map(|s| s.x.shape()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_ledger() {
        let cfg = ModelConfig::default();
        let g = cfg.grids(224, 224).unwrap();
        let lens: Vec<usize> = g.iter().map(|(h, w)| h * w).collect();
        assert_eq!(lens, vec![3136, 784, 196, 49]);
        for (s, (h, w)) in cfg.strides().iter().zip(g) {
            assert_eq!(h * w * s * s, 224 * 224);
        }
        let e = cfg.check_input(50, 50).unwrap_err().to_string();
        assert!(e.contains("32"), "{e}");
        assert_eq!(ModelConfig::vessel_cnn().grids(48, 48).unwrap()[3], (6, 6));
    }

    #[test]
    fn presets_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
        ModelConfig::vessel_cnn().validate().unwrap();
        let bad = ModelConfig { heads: [3, 4, 8, 16], ..ModelConfig::default() };
        assert!(bad.validate().is_err());
    }
}
