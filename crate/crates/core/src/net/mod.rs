//! Autodiff core, the convolutional backbone and the multi-head pose
//! predictor.

mod adam;
mod kernels;
mod model;
pub mod tape;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::GRID_HALF_EXTENT;

pub use crate::ensemble::{EnsemblePrediction, HeadPrediction, Prediction};
pub use adam::{Adam, AdamConfig};
pub use model::{count_params, Forward, HeadOutput, Model, ParamCount, ParamSpec};
pub use tape::{Gradients, RotationKind, Tape, Var};

/// Training and inference recipe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Direct point regression trained with MSE.
    PlaneInVol,
    /// Mean-variance estimation: direct points plus variances, Gaussian NLL.
    Mve,
    /// Four rotation heads and a direct head fused into one Gaussian.
    Qaerts,
    /// Evidential regression with a Normal-Inverse-Gamma output.
    Edl,
    /// MVE with dropout kept active for repeated stochastic inference.
    Mcd,
    /// Deep ensemble of independently seeded MVE models.
    De,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::PlaneInVol,
        Method::Mve,
        Method::Qaerts,
        Method::Edl,
        Method::Mcd,
        Method::De,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::PlaneInVol => "planeinvol",
            Method::Mve => "mve",
            Method::Qaerts => "qaerts",
            Method::Edl => "edl",
            Method::Mcd => "mcd",
            Method::De => "de",
        }
    }

    /// Pose heads the method's network carries, in declaration order.
    pub fn heads(self) -> &'static [HeadKind] {
        match self {
            Method::Qaerts => &HeadKind::ALL,
            _ => &[HeadKind::Direct],
        }
    }

    pub fn has_variance_heads(self) -> bool {
        matches!(
            self,
            Method::Mve | Method::Qaerts | Method::Mcd | Method::De
        )
    }

    pub fn is_evidential(self) -> bool {
        self == Method::Edl
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown method {s:?} (expected planeinvol, mve, qaerts, edl, mcd or de)"
                ))
            })
    }
}

/// One pose-producing head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Quaternion,
    AxisAngle,
    Euler,
    Matrix,
    Direct,
}

impl HeadKind {
    pub const ALL: [HeadKind; 5] = [
        HeadKind::Quaternion,
        HeadKind::AxisAngle,
        HeadKind::Euler,
        HeadKind::Matrix,
        HeadKind::Direct,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Quaternion => "quaternion",
            HeadKind::AxisAngle => "axis_angle",
            HeadKind::Euler => "euler",
            HeadKind::Matrix => "matrix",
            HeadKind::Direct => "direct",
        }
    }

    pub fn rotation(self) -> Option<RotationKind> {
        match self {
            HeadKind::Quaternion => Some(RotationKind::Quaternion),
            HeadKind::AxisAngle => Some(RotationKind::AxisAngle),
            HeadKind::Euler => Some(RotationKind::Euler),
            HeadKind::Matrix => Some(RotationKind::Matrix),
            HeadKind::Direct => None,
        }
    }

    /// Number of raw outputs of the head's linear layer.
    pub fn width(self) -> usize {
        self.rotation().map_or(9, RotationKind::width)
    }
}

/// Backbone and embedding shape. The head set follows from the [`Method`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Side of the square input image.
    pub input_size: usize,
    /// Output channels of each conv layer, grouped per block. Every block
    /// ends with a 2x2 max pool.
    pub blocks: Vec<Vec<usize>>,
    /// Side of the adaptive average pool applied after the last block.
    pub pool: usize,
    /// Width of the hidden fully connected layer.
    pub fc_hidden: usize,
    /// Embedding dimension `D` fed to the heads.
    pub embedding_dim: usize,
    /// Dropout rate after each fully connected layer.
    pub dropout: f64,
    /// Grid half-extent used to scale normalized outputs to voxels.
    pub half_extent: f64,
}

impl Default for ModelConfig {
    /// Desk-scale network: four two-conv blocks on 32x32 inputs, `D = 128`.
    fn default() -> Self {
        Self {
            input_size: 32,
            blocks: vec![vec![8, 8], vec![16, 16], vec![32, 32], vec![32, 32]],
            pool: 2,
            fc_hidden: 7168,
            embedding_dim: 128,
            dropout: 0.0,
            half_extent: GRID_HALF_EXTENT,
        }
    }
}

impl ModelConfig {
    /// VGG-16 feature extractor on 160x160 inputs with a 4096-wide hidden
    /// layer and `D = 512`. Constructible for counting; far too slow to
    /// train here.
    pub fn paper_scale() -> Self {
        Self {
            input_size: 160,
            blocks: vec![
                vec![64, 64],
                vec![128, 128],
                vec![256, 256, 256],
                vec![512, 512, 512],
                vec![512, 512, 512],
            ],
            pool: 3,
            fc_hidden: 4096,
            embedding_dim: 512,
            dropout: 0.0,
            half_extent: GRID_HALF_EXTENT,
        }
    }

    /// Spatial side after all pooling stages.
    pub fn feature_side(&self) -> usize {
        self.blocks.iter().fold(self.input_size, |s, _| s / 2)
    }

    pub fn feature_channels(&self) -> usize {
        self.blocks
            .last()
            .and_then(|b| b.last())
            .copied()
            .unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.embedding_dim == 0 || self.fc_hidden == 0 {
            return bad("embedding dim and fc width must be > 0".into());
        }
        if self.blocks.is_empty() || self.blocks.iter().any(|b| b.is_empty() || b.contains(&0)) {
            return bad(format!(
                "conv blocks {:?} must be non-empty with positive widths",
                self.blocks
            ));
        }
        if self.pool == 0 || self.feature_side() < self.pool {
            return bad(format!(
                "input {} shrinks to {} after {} blocks, below pool size {}",
                self.input_size,
                self.feature_side(),
                self.blocks.len(),
                self.pool
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        if !(self.half_extent > 0.0 && self.half_extent.is_finite()) {
            return bad(format!("half extent {} must be positive", self.half_extent));
        }
        Ok(())
    }
}
