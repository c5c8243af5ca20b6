use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::arch::{ShortcutNorm, StemStyle, StridePlacement, Structure};
use crate::error::Result;

/// Which spatial grid a transposed convolution's multiply-accumulates are counted over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransposeBasis {
    /// `Cin * Cout * k^3` per input voxel.
    Input,
    /// `Cin * Cout * k^3` per output voxel.
    Output,
}

/// Counting rules plus the structural choices they were calibrated with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Convention {
    /// Operations per multiply-accumulate (1 or 2).
    pub mac_factor: u8,
    /// Count instance norm at 5 ops per element and leaky ReLU at 1.
    pub include_norm_act: bool,
    /// Count one op per element for bias additions and residual additions.
    pub count_adds: bool,
    pub conv_bias: bool,
    pub deep_supervision: bool,
    pub downsample_norm_variant: ShortcutNorm,
    pub downsample_stride: StridePlacement,
    pub stem: StemStyle,
    pub transpose_flops_basis: TransposeBasis,
}

pub const NORM_OPS_PER_ELEMENT: u64 = 5;
pub const ACT_OPS_PER_ELEMENT: u64 = 1;

const FROZEN_JSON: &str = include_str!("../../data/flops_convention.json");

impl Convention {
    pub fn structure(&self) -> Structure {
        Structure {
            conv_bias: self.conv_bias,
            stem: self.stem,
            downsample_stride: self.downsample_stride,
            downsample_norm_variant: self.downsample_norm_variant,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Convention = serde_json::from_str(text)?;
        if c.mac_factor != 1 && c.mac_factor != 2 {
            return Err(crate::Error::config("mac_factor", format!("must be 1 or 2, got {}", c.mac_factor)));
        }
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("convention serializes")
    }

    /// Every combination of the nine binary choices.
    pub fn candidates() -> Vec<Convention> {
        let mut out = Vec::with_capacity(512);
        for bits in 0u32..512 {
            let b = |i: u32| bits >> i & 1 == 1;
            out.push(Convention {
                mac_factor: if b(0) { 2 } else { 1 },
                include_norm_act: b(1),
                count_adds: b(2),
                conv_bias: !b(3),
                deep_supervision: !b(4),
                downsample_norm_variant: if b(5) { ShortcutNorm::NormedShortcut } else { ShortcutNorm::PlainShortcut },
                downsample_stride: if b(6) { StridePlacement::SecondConv } else { StridePlacement::FirstConv },
                stem: if b(7) { StemStyle::ConvNormAct } else { StemStyle::ResidualProjection },
                transpose_flops_basis: if b(8) { TransposeBasis::Input } else { TransposeBasis::Output },
            });
        }
        out
    }
}

/// The committed convention every report uses.
pub fn frozen() -> &'static Convention {
    static CELL: OnceLock<Convention> = OnceLock::new();
    CELL.get_or_init(|| Convention::from_json(FROZEN_JSON).expect("committed convention file parses"))
}

/// Raw text of the committed convention file.
pub fn frozen_json() -> &'static str {
    FROZEN_JSON
}
