use std::path::{Path, PathBuf};

use adt_core::autodiff::AdamConfig;
use adt_core::error::{Error, Result};
use adt_core::field::Grid2D;
use adt_core::operators::PdeParams;
use adt_core::residual::DEFAULT_HIDDEN;
use adt_core::solver::SolverConfig;
use adt_core::synth::Benchmark;
use adt_core::tensor::Tensor;
use adt_core::topology::{AtlWeights, SkeletonConfig};
use serde::{Deserialize, Serialize};

/// The three switches of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Toggles {
    pub spatial_on: bool,
    pub growth_cnn_on: bool,
    pub topology_on: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            spatial_on: true,
            growth_cnn_on: true,
            topology_on: true,
        }
    }
}

/// Initial physics coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhysicsInit {
    pub diffusion: f64,
    pub cross: f64,
    /// Initial growth rate; the midpoint of `[0, k_max]` when absent.
    pub growth: Option<f64>,
    pub carrying_capacity: f64,
    pub k_max: f64,
    /// Learn the growth rate as a per-pixel field rather than one scalar.
    pub spatial_growth: bool,
}

impl Default for PhysicsInit {
    fn default() -> Self {
        PhysicsInit {
            diffusion: 1.0,
            cross: 0.0,
            growth: None,
            carrying_capacity: 1.0,
            k_max: 2.0,
            spatial_growth: false,
        }
    }
}

impl PhysicsInit {
    pub fn template(&self, grid: Grid2D, classes: usize, tumor: usize, channels: usize, spatial: bool) -> Result<PdeParams> {
        if !(self.k_max >= 0.0 && self.k_max.is_finite()) {
            return Err(Error::InvalidConfig(format!("k_max = {} must be finite and ≥ 0", self.k_max)));
        }
        let (d, chi) = if spatial { (self.diffusion, self.cross) } else { (0.0, 0.0) };
        let mut p = PdeParams::constant(classes, tumor, channels)
            .with_diffusion(d)
            .with_cross(chi)
            .with_growth(self.growth.unwrap_or(0.5 * self.k_max));
        p.growth_clamp = self.k_max;
        if self.spatial_growth {
            p.growth_rate = Tensor::filled(grid.plane_shape(), p.growth_rate.item());
        }
        p.carrying_capacity = Tensor::scalar(self.carrying_capacity);
        Ok(p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda_topo: f64,
    /// Realised as decoupled weight decay on network leaves.
    pub lambda_reg: f64,
    pub lambda_tv: f64,
    pub atl: AtlWeights,
    pub skeleton: SkeletonConfig,
    pub optimizer: AdamConfig,
    pub epochs: usize,
    pub folds: usize,
    pub seed: u64,
    pub toggles: Toggles,
    pub hidden: usize,
    /// Train on at most this many pairs of each fold's training split.
    pub max_train_pairs: Option<usize>,
    pub physics: PhysicsInit,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_topo: 0.1,
            lambda_reg: 0.0,
            lambda_tv: 0.0,
            atl: AtlWeights::default(),
            skeleton: SkeletonConfig::default(),
            optimizer: AdamConfig::default(),
            epochs: 4,
            folds: 5,
            seed: 0,
            toggles: Toggles::default(),
            hidden: DEFAULT_HIDDEN,
            max_train_pairs: None,
            physics: PhysicsInit::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_topo", self.lambda_topo),
            ("lambda_reg", self.lambda_reg),
            ("lambda_tv", self.lambda_tv),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} = {v} must be finite and ≥ 0")));
            }
        }
        let p = &self.physics;
        for (name, v) in [("k_max", p.k_max), ("carrying_capacity", p.carrying_capacity), ("diffusion", p.diffusion)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} = {v} must be finite and ≥ 0")));
            }
        }
        if self.folds < 2 {
            return Err(Error::InvalidConfig(format!("folds = {} must be ≥ 2", self.folds)));
        }
        if self.hidden == 0 {
            return Err(Error::InvalidConfig("hidden width must be ≥ 1".into()));
        }
        Ok(())
    }

    /// ATL weight after the topology toggle.
    pub fn effective_lambda_topo(&self) -> f64 {
        if self.toggles.topology_on {
            self.lambda_topo
        } else {
            0.0
        }
    }

    /// Optimizer settings with `lambda_reg` folded into the decay.
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            weight_decay: self.optimizer.weight_decay + self.lambda_reg,
            ..self.optimizer.clone()
        }
    }
}

/// Where an experiment's pairs come from: a dataset directory or a generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub dir: Option<PathBuf>,
    pub benchmark: Option<Benchmark>,
    pub count: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            benchmark: None,
            count: 200,
            seed: 0,
        }
    }
}

/// Contents of a `--config` file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub solver: SolverConfig,
    pub data: DataConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let cfg: ExperimentConfig = serde_json::from_str(&s)?;
        cfg.train.validate()?;
        cfg.solver.validate()?;
        Ok(cfg)
    }
}
