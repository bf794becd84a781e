use serde::{Deserialize, Serialize};

use crate::capsule::CapsuleConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneFamily {
    /// Depthwise-separable residual blocks, relu activations.
    XceptionMini,
    /// Fused expansion blocks (3×3 expand, 1×1 project), swish activations.
    Effv2Mini,
}

impl BackboneFamily {
    pub fn name(self) -> &'static str {
        match self {
            BackboneFamily::XceptionMini => "xception",
            BackboneFamily::Effv2Mini => "effv2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub family: BackboneFamily,
    pub stem_channels: usize,
    pub block_count: usize,
    pub final_channels: usize,
    pub downsample_factor: usize,
}

impl BackboneSpec {
    /// Full-width Xception-style preset: 2048 output channels at stride 32.
    pub fn full_xception() -> Self {
        BackboneSpec {
            family: BackboneFamily::XceptionMini,
            stem_channels: 32,
            block_count: 8,
            final_channels: 2048,
            downsample_factor: 32,
        }
    }

    /// Full-width EfficientNetV2-B0-style preset: 1280 output channels at
    /// stride 32.
    pub fn full_effv2b0() -> Self {
        BackboneSpec {
            family: BackboneFamily::Effv2Mini,
            stem_channels: 32,
            block_count: 6,
            final_channels: 1280,
            downsample_factor: 32,
        }
    }

    pub fn toy_xception() -> Self {
        BackboneSpec {
            family: BackboneFamily::XceptionMini,
            stem_channels: 16,
            block_count: 2,
            final_channels: 64,
            downsample_factor: 32,
        }
    }

    pub fn toy_effv2() -> Self {
        BackboneSpec {
            family: BackboneFamily::Effv2Mini,
            stem_channels: 16,
            block_count: 2,
            final_channels: 40,
            downsample_factor: 32,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "full-xception" => Some(Self::full_xception()),
            "full-effv2b0" => Some(Self::full_effv2b0()),
            "toy-xception" => Some(Self::toy_xception()),
            "toy-effv2" => Some(Self::toy_effv2()),
            _ => None,
        }
    }

    /// Number of stride-2 stages.
    pub fn reductions(&self) -> u32 {
        self.downsample_factor.trailing_zeros()
    }

    /// Channels of the backbone's final feature map.
    pub fn output_channels(&self) -> usize {
        if self.block_count == 0 {
            self.stem_channels
        } else {
            self.final_channels
        }
    }

    pub fn output_extent(&self, input_size: usize) -> Result<usize> {
        self.validate()?;
        if input_size == 0 || !input_size.is_multiple_of(self.downsample_factor) {
            return Err(Error::InvalidArgument(format!(
                "input size {input_size} is not divisible by downsample factor {}",
                self.downsample_factor
            )));
        }
        Ok(input_size / self.downsample_factor)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.downsample_factor.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "downsample factor {} is not a power of two",
                self.downsample_factor
            )));
        }
        if self.stem_channels == 0 || self.final_channels == 0 {
            return Err(Error::InvalidArgument("channel counts must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Learned per-channel spatial weighting.
    SrNet,
    /// Global average pooling baseline.
    Gap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub pooling: Pooling,
    pub out_capsules: usize,
    pub out_dim: usize,
    pub routing_iters: usize,
    pub dropout_rate: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            pooling: Pooling::SrNet,
            out_capsules: 10,
            out_dim: 16,
            routing_iters: 3,
            dropout_rate: 0.5,
        }
    }
}

impl HeadConfig {
    pub fn capsule_config(&self, in_capsules: usize) -> CapsuleConfig {
        CapsuleConfig {
            in_capsules,
            in_dim: 1,
            out_capsules: self.out_capsules,
            out_dim: self.out_dim,
            routing_iters: self.routing_iters,
        }
    }
}

/// Everything needed to rebuild a model; stored in checkpoint metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub backbone_a: BackboneSpec,
    pub backbone_b: Option<BackboneSpec>,
    pub head: HeadConfig,
    pub class_count: usize,
    pub input_size: usize,
    #[serde(default = "one")]
    pub input_channels: usize,
}

fn one() -> usize {
    1
}

impl ModelSpec {
    /// 64×64 grayscale input, toy Xception (64) + toy EffV2 (40) → 104
    /// concatenated channels.
    pub fn toy(class_count: usize) -> Self {
        ModelSpec {
            backbone_a: BackboneSpec::toy_xception(),
            backbone_b: Some(BackboneSpec::toy_effv2()),
            head: HeadConfig::default(),
            class_count,
            input_size: 64,
            input_channels: 1,
        }
    }

    /// Full-width presets at 512×512: 2048 + 1280 → 3328 channels.
    pub fn full(class_count: usize) -> Self {
        ModelSpec {
            backbone_a: BackboneSpec::full_xception(),
            backbone_b: Some(BackboneSpec::full_effv2b0()),
            head: HeadConfig::default(),
            class_count,
            input_size: 512,
            input_channels: 1,
        }
    }

    pub fn preset(name: &str, class_count: usize) -> Option<Self> {
        match name {
            "toy" => Some(Self::toy(class_count)),
            "full" => Some(Self::full(class_count)),
            "toy-xception-only" => Some(ModelSpec {
                backbone_b: None,
                ..Self::toy(class_count)
            }),
            _ => None,
        }
    }

    pub fn concat_channels(&self) -> usize {
        self.backbone_a.output_channels()
            + self.backbone_b.map_or(0, |b| b.output_channels())
    }

    /// Spatial extent of the concatenated feature map.
    pub fn feature_extent(&self) -> Result<usize> {
        let a = self.backbone_a.output_extent(self.input_size)?;
        if let Some(b) = &self.backbone_b {
            if b.downsample_factor != self.backbone_a.downsample_factor {
                return Err(Error::InvalidArgument(format!(
                    "backbones disagree on downsample factor: {} vs {}",
                    self.backbone_a.downsample_factor, b.downsample_factor
                )));
            }
            b.output_extent(self.input_size)?;
        }
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        self.feature_extent()?;
        if self.class_count < 2 {
            return Err(Error::InvalidArgument("class_count must be >= 2".into()));
        }
        if self.input_channels == 0 {
            return Err(Error::InvalidArgument("input_channels must be >= 1".into()));
        }
        self.head.capsule_config(self.concat_channels()).validate()
    }
}
