use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }
}

/// How feature vectors from several structures are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    #[default]
    Hadamard,
    Addition,
}

/// Which spatial structures participate in the spatial feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SpatialVariant {
    /// 3-D grid fused with the XY, YZ and XZ planes.
    #[default]
    Hybrid,
    GridOnly,
    PlanesOnly,
}

impl SpatialVariant {
    pub fn uses_grid(self) -> bool {
        matches!(self, SpatialVariant::Hybrid | SpatialVariant::GridOnly)
    }

    pub fn uses_planes(self) -> bool {
        matches!(self, SpatialVariant::Hybrid | SpatialVariant::PlanesOnly)
    }
}

/// Architecture of an explorable model. Defaults follow the full-size
/// configuration (64³ grid, 256² planes, 16-vertex lines, 64/16 channels,
/// three hidden layers of width 128).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub spatial_grid_res: usize,
    pub plane_res: usize,
    pub line_res: usize,
    #[serde(rename = "spatial_dim_C", alias = "spatial_dim")]
    pub spatial_dim: usize,
    #[serde(rename = "param_dim_Cp", alias = "param_dim")]
    pub param_dim: usize,
    pub decoder_hidden: usize,
    pub decoder_layers: usize,
    pub activation: Activation,
    pub fusion: Fusion,
    pub spatial_variant: SpatialVariant,
    #[serde(rename = "n_params_m", alias = "n_params")]
    pub n_params: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            spatial_grid_res: 64,
            plane_res: 256,
            line_res: 16,
            spatial_dim: 64,
            param_dim: 16,
            decoder_hidden: 128,
            decoder_layers: 3,
            activation: Activation::Relu,
            fusion: Fusion::Hadamard,
            spatial_variant: SpatialVariant::Hybrid,
            n_params: 1,
        }
    }
}

impl ArchConfig {
    /// Compact configuration used for 32³ desk-scale ensembles.
    pub fn desk(n_params: usize) -> Self {
        Self {
            spatial_grid_res: 16,
            plane_res: 64,
            line_res: 8,
            spatial_dim: 16,
            param_dim: 16,
            decoder_hidden: 64,
            decoder_layers: 3,
            n_params,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let res = [
            ("spatial_grid_res", self.spatial_grid_res),
            ("plane_res", self.plane_res),
            ("line_res", self.line_res),
        ];
        for (name, r) in res {
            if r < 2 {
                return Err(Error::Config(format!("{name} must be at least 2, got {r}")));
            }
        }
        let counts = [
            ("spatial_dim_C", self.spatial_dim),
            ("param_dim_Cp", self.param_dim),
            ("decoder_hidden", self.decoder_hidden),
            ("n_params_m", self.n_params),
        ];
        for (name, c) in counts {
            if c < 1 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Width of the concatenated ensemble feature fed to the decoder.
    pub fn ensemble_width(&self) -> usize {
        self.spatial_dim + self.param_dim
    }
}
