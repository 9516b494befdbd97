//! JSON run configuration shared by every CLI subcommand.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tile::TileBounds;
use crate::error::{Error, Result};
use crate::ilt::IltConfig;
use crate::litho::{Corners, RelaxConfig, DEFAULT_RESIST_THRESHOLD};
use crate::metrics::EpeConfig;
use crate::model::{BackboneConfig, InferConfig};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelGenConfig {
    pub count: usize,
    pub size: usize,
    pub sigma_nm: f64,
    pub pixel_size_nm: f64,
}

impl Default for KernelGenConfig {
    fn default() -> Self {
        Self {
            count: 4,
            size: 35,
            sigma_nm: 30.0,
            pixel_size_nm: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CornerConfig {
    /// Relative dose excursion of the inner and outer corners.
    pub dose_delta: f64,
    pub i_th: f64,
}

impl Default for CornerConfig {
    fn default() -> Self {
        Self {
            dose_delta: 0.02,
            i_th: DEFAULT_RESIST_THRESHOLD,
        }
    }
}

impl CornerConfig {
    pub fn corners(&self, kernel_label: &str) -> Result<Corners> {
        Corners::dose(kernel_label, self.i_th, self.dose_delta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub kernels: KernelGenConfig,
    pub tiles: TileBounds,
    pub dataset_size: usize,
    pub ilt: IltConfig,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub epe: EpeConfig,
    pub corners: CornerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            kernels: KernelGenConfig::default(),
            tiles: TileBounds::default(),
            dataset_size: 200,
            ilt: IltConfig::default(),
            backbone: BackboneConfig::default(),
            train: TrainConfig::default(),
            infer: InferConfig::default(),
            epe: EpeConfig::default(),
            corners: CornerConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&raw).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    /// Loads `path` if given, else defaults; `seed` overrides the file.
    pub fn resolve(path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.tiles.validate()?;
        self.ilt.validate()?;
        self.backbone.validate()?;
        self.train.validate()?;
        self.infer.validate()?;
        self.epe.validate()?;
        RelaxConfig::validate(&self.ilt.relax)?;
        crate::metrics::check_corner_order(&self.corners.corners(&self.ilt.nominal.kernel_label)?)?;
        if self.kernels.count == 0 || self.kernels.size.is_multiple_of(2) {
            return Err(Error::InvalidConfig("kernel count must be >= 1 and size odd".into()));
        }
        Ok(())
    }

    /// Writes the full configuration, every default spelled out.
    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}
