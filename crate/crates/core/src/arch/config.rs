use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const NUM_STAGES: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockStyle {
    /// Residual blocks with integrated downsampling.
    StuResidual,
    /// Two plain Conv-IN-LeakyReLU units per stage (nnU-Net).
    NnunetPlain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownsampleStyle {
    /// First residual block of the stage strides; its 1x1x1 shortcut strides to match.
    InFirstResidual,
    /// A dedicated strided convolution precedes the stage's blocks.
    SeparateConv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleStyle {
    #[serde(rename = "nearest_plus_1x1x1")]
    NearestPlus1x1x1,
    #[serde(rename = "trilinear_plus_1x1x1")]
    TrilinearPlus1x1x1,
    TransposeConv,
}

/// Full description of a six-stage encoder-decoder.
///
/// `updown_ratios[i]` is the per-axis (D, H, W) factor between stage `i` and
/// stage `i + 1`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchConfig {
    pub num_stages: usize,
    pub depths: Vec<usize>,
    pub widths: Vec<usize>,
    pub updown_ratios: Vec<[usize; 3]>,
    pub in_channels: usize,
    pub num_classes: usize,
    pub block_style: BlockStyle,
    pub downsample_style: DownsampleStyle,
    pub upsample_style: UpsampleStyle,
    pub deep_supervision: bool,
}

/// Single-style ablation switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    ConvDownsample,
    TransposeUp,
    TrilinearUp,
}

/// Depth and width multipliers for compound scaling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalePlan {
    pub depth: f64,
    pub width: f64,
}

impl ScalePlan {
    pub fn new(depth: f64, width: f64) -> Self {
        ScalePlan { depth, width }
    }

    pub const IDENTITY: ScalePlan = ScalePlan { depth: 1.0, width: 1.0 };
}

fn round_half_up(v: f64) -> i64 {
    (v + 0.5).floor() as i64
}

const TOTALSEG_CLASSES: usize = 105;

impl ArchConfig {
    fn stu(depth: usize, widths: [usize; 6]) -> Self {
        ArchConfig {
            num_stages: NUM_STAGES,
            depths: vec![depth; NUM_STAGES],
            widths: widths.to_vec(),
            updown_ratios: vec![[2, 2, 2]; NUM_STAGES - 1],
            in_channels: 1,
            num_classes: TOTALSEG_CLASSES,
            block_style: BlockStyle::StuResidual,
            downsample_style: DownsampleStyle::InFirstResidual,
            upsample_style: UpsampleStyle::NearestPlus1x1x1,
            deep_supervision: true,
        }
    }

    pub fn stu_net_s() -> Self {
        Self::stu(1, [16, 32, 64, 128, 256, 256])
    }

    pub fn stu_net_b() -> Self {
        Self::stu(1, [32, 64, 128, 256, 512, 512])
    }

    pub fn stu_net_l() -> Self {
        Self::stu(2, [64, 128, 256, 512, 1024, 1024])
    }

    pub fn stu_net_h() -> Self {
        Self::stu(3, [96, 192, 384, 768, 1536, 1536])
    }

    /// nnU-Net with its default feature cap of 320.
    pub fn nnunet() -> Self {
        ArchConfig {
            widths: vec![32, 64, 128, 256, 320, 320],
            block_style: BlockStyle::NnunetPlain,
            downsample_style: DownsampleStyle::SeparateConv,
            upsample_style: UpsampleStyle::TransposeConv,
            ..Self::stu(1, [0; 6])
        }
    }

    /// nnU-Net with the feature cap raised to 512.
    pub fn nnunet_star() -> Self {
        ArchConfig { widths: vec![32, 64, 128, 256, 512, 512], ..Self::nnunet() }
    }

    /// Looks up a built-in configuration by name (`stu-net-b`, `nnunet-star`, ...).
    pub fn preset(name: &str) -> Option<Self> {
        let key = name.to_ascii_lowercase().replace(['_', ' '], "-");
        Some(match key.as_str() {
            "stu-net-s" | "s" => Self::stu_net_s(),
            "stu-net-b" | "b" => Self::stu_net_b(),
            "stu-net-l" | "l" => Self::stu_net_l(),
            "stu-net-h" | "h" => Self::stu_net_h(),
            "nnunet" | "nnu-net" => Self::nnunet(),
            "nnunet-star" | "nnu-net*" | "nnunet*" => Self::nnunet_star(),
            _ => return None,
        })
    }

    /// Display name of a built-in configuration this config equals, if any.
    pub fn preset_name(&self) -> Option<&'static str> {
        [
            ("STU-Net-S", Self::stu_net_s()),
            ("STU-Net-B", Self::stu_net_b()),
            ("STU-Net-L", Self::stu_net_l()),
            ("STU-Net-H", Self::stu_net_h()),
            ("nnU-Net", Self::nnunet()),
            ("nnU-Net*", Self::nnunet_star()),
        ]
        .into_iter()
        .find(|(_, c)| c == self)
        .map(|(n, _)| n)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_stages != NUM_STAGES {
            return Err(Error::config("num_stages", format!("must be {NUM_STAGES}, got {}", self.num_stages)));
        }
        if self.depths.len() != NUM_STAGES {
            return Err(Error::config("depths", format!("needs {NUM_STAGES} entries, got {}", self.depths.len())));
        }
        if self.widths.len() != NUM_STAGES {
            return Err(Error::config("widths", format!("needs {NUM_STAGES} entries, got {}", self.widths.len())));
        }
        if let Some(i) = self.depths.iter().position(|&d| d == 0) {
            return Err(Error::config("depths", format!("entry {i} is 0; every stage needs at least one block")));
        }
        if let Some(i) = self.widths.iter().position(|&w| w == 0) {
            return Err(Error::config("widths", format!("entry {i} is 0")));
        }
        if let Some(i) = self.widths.windows(2).position(|w| w[1] < w[0]) {
            return Err(Error::config("widths", format!("must be non-decreasing; entry {} shrinks", i + 1)));
        }
        if self.updown_ratios.len() != NUM_STAGES - 1 {
            return Err(Error::config(
                "updown_ratios",
                format!("needs {} entries, got {}", NUM_STAGES - 1, self.updown_ratios.len()),
            ));
        }
        for (i, r) in self.updown_ratios.iter().enumerate() {
            if *r != [2, 2, 2] && *r != [2, 2, 1] {
                return Err(Error::config("updown_ratios", format!("entry {i} is {r:?}; allowed (2,2,2) or (2,2,1)")));
            }
        }
        if self.in_channels == 0 {
            return Err(Error::config("in_channels", "must be at least 1"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes", "must be at least 1"));
        }
        if self.block_style == BlockStyle::NnunetPlain && self.downsample_style != DownsampleStyle::SeparateConv {
            return Err(Error::config(
                "downsample_style",
                "nnunet_plain downsamples with its first strided convolution; use separate_conv",
            ));
        }
        Ok(())
    }

    /// Cumulative down-sampling factor per axis between input and bottleneck.
    pub fn total_downsample(&self) -> [usize; 3] {
        let mut f = [1; 3];
        for r in &self.updown_ratios {
            for ax in 0..3 {
                f[ax] *= r[ax];
            }
        }
        f
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ArchConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    /// SHA-256 of the compact JSON form.
    pub fn digest(&self) -> String {
        let compact = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(compact))
    }
}

/// Multiplies every stage's depth and width by the plan's coefficients
/// (round half up). All other fields are untouched.
pub fn scale(base: &ArchConfig, plan: ScalePlan) -> Result<ArchConfig> {
    if !(plan.depth > 0.0 && plan.depth.is_finite()) {
        return Err(Error::config("depth", format!("coefficient must be positive, got {}", plan.depth)));
    }
    if !(plan.width > 0.0 && plan.width.is_finite()) {
        return Err(Error::config("width", format!("coefficient must be positive, got {}", plan.width)));
    }
    let apply = |field: &str, values: &[usize], k: f64| -> Result<Vec<usize>> {
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let r = round_half_up(k * v as f64);
                if r < 1 {
                    Err(Error::config(field, format!("stage {i} scales to {r}, below 1")))
                } else {
                    Ok(r as usize)
                }
            })
            .collect()
    };
    let mut out = base.clone();
    out.depths = apply("depths", &base.depths, plan.depth)?;
    out.widths = apply("widths", &base.widths, plan.width)?;
    out.validate()?;
    Ok(out)
}

/// Returns `config` with exactly one style switch changed.
pub fn variant(config: &ArchConfig, which: Variant) -> ArchConfig {
    let mut out = config.clone();
    match which {
        Variant::ConvDownsample => out.downsample_style = DownsampleStyle::SeparateConv,
        Variant::TransposeUp => out.upsample_style = UpsampleStyle::TransposeConv,
        Variant::TrilinearUp => out.upsample_style = UpsampleStyle::TrilinearPlus1x1x1,
    }
    out
}
