use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_positive, finish_field, sample_rng, sample_treatment, treatment_damping, Benchmark, Provenance, SamplePair, SoftVoronoi};
use crate::error::{Error, Result};
use crate::field::Grid2D;
use crate::provenance::config_hash;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TumorBlob {
    /// Maximum distance of the tumour centre from the grid centre.
    pub center_jitter: f64,
    pub sigma0: f64,
    pub sigma1: f64,
    pub amplitude: f64,
    /// Gaussian level below which the blob is cut to zero (rescaled so the
    /// profile stays continuous); gives the blob a compact support.
    pub cutoff: f64,
}

impl Default for TumorBlob {
    fn default() -> Self {
        TumorBlob {
            center_jitter: 6.0,
            sigma0: 3.0,
            sigma1: 6.0,
            amplitude: 0.95,
            cutoff: 0.5,
        }
    }
}

impl TumorBlob {
    /// `a · max(0, (exp(−r²/2σ²) − c)/(1 − c))`.
    pub fn profile(&self, r2: f64, sigma: f64) -> f64 {
        let g = (-r2 / (2.0 * sigma * sigma)).exp();
        self.amplitude * ((g - self.cutoff) / (1.0 - self.cutoff)).max(0.0)
    }
}

/// Class `classes − 1` is the tumour; class 0 is background and the rest are organs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VoronoiConfig {
    pub size: usize,
    pub spacing: f64,
    pub classes: usize,
    pub sites_per_class: usize,
    pub tau: f64,
    pub tumor: TumorBlob,
    /// Fraction in `[0, 1)` by which tissue near the tumour is pushed outward.
    pub displacement: f64,
}

impl Default for VoronoiConfig {
    fn default() -> Self {
        VoronoiConfig {
            size: 64,
            spacing: 1.0,
            classes: 5,
            sites_per_class: 3,
            tau: 3.0,
            tumor: TumorBlob::default(),
            displacement: 0.25,
        }
    }
}

impl VoronoiConfig {
    pub fn validate(&self) -> Result<()> {
        Grid2D::new(self.size, self.size, self.spacing)?;
        if self.classes < 3 {
            return Err(Error::InvalidConfig("voronoi needs at least background, one organ and tumour".into()));
        }
        if self.sites_per_class == 0 {
            return Err(Error::InvalidConfig("sites_per_class must be ≥ 1".into()));
        }
        check_positive("tau", self.tau)?;
        check_positive("sigma0", self.tumor.sigma0)?;
        if !(self.tumor.sigma1 > self.tumor.sigma0) {
            return Err(Error::InvalidConfig("sigma1 must exceed sigma0".into()));
        }
        if !(0.0..=1.0).contains(&self.tumor.amplitude) || !(self.tumor.center_jitter >= 0.0) {
            return Err(Error::InvalidConfig("tumour amplitude must lie in [0, 1], jitter ≥ 0".into()));
        }
        if !(0.0..1.0).contains(&self.tumor.cutoff) {
            return Err(Error::InvalidConfig("tumour cutoff must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.displacement) {
            return Err(Error::InvalidConfig("displacement must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

pub fn generate_voronoi_pair(cfg: &VoronoiConfig, seed: u64) -> Result<SamplePair> {
    voronoi_pair_at(cfg, seed, 0)
}

/// Pair `index` of the stream keyed by `seed`.
pub fn voronoi_pair_at(cfg: &VoronoiConfig, seed: u64, index: u64) -> Result<SamplePair> {
    cfg.validate()?;
    let grid = Grid2D::new(cfg.size, cfg.size, cfg.spacing)?;
    let mut rng = sample_rng(seed, index);
    let organs = SoftVoronoi::sample(&mut rng, cfg.classes - 1, cfg.sites_per_class, grid, cfg.tau);
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let radius = cfg.tumor.center_jitter * rng.gen::<f64>().sqrt();
    let cy = (cfg.size as f64 - 1.0) / 2.0 + radius * angle.sin();
    let cx = (cfg.size as f64 - 1.0) / 2.0 + radius * angle.cos();
    let treatment = sample_treatment(&mut rng);

    let t = &cfg.tumor;
    let sigma1 = t.sigma0 + (t.sigma1 - t.sigma0) * treatment_damping(&treatment);
    let reach = 2.0 * sigma1;
    let shape = Shape::new(cfg.classes, cfg.size, cfg.size);
    let (mut t0, mut t1) = (Tensor::zeros(shape), Tensor::zeros(shape));
    let tumor = cfg.classes - 1;
    let mut q = vec![0.0; organs.classes()];
    for y in 0..cfg.size {
        for x in 0..cfg.size {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let r2 = dy * dy + dx * dx;

            organs.eval(y as f64, x as f64, &mut q);
            let g0 = t.profile(r2, t.sigma0);
            for (k, &v) in q.iter().enumerate() {
                t0.set(k, y, x, (1.0 - g0) * v);
            }
            t0.set(tumor, y, x, g0);

            // tissue at radius r came from radius r·(1 − s·exp(−r²/2L²))
            let shrink = 1.0 - cfg.displacement * (-r2 / (2.0 * reach * reach)).exp();
            organs.eval(cy + dy * shrink, cx + dx * shrink, &mut q);
            let g1 = t.profile(r2, sigma1);
            for (k, &v) in q.iter().enumerate() {
                t1.set(k, y, x, (1.0 - g1) * v);
            }
            t1.set(tumor, y, x, g1);
        }
    }
    Ok(SamplePair {
        baseline: finish_field(grid, &t0)?,
        target: finish_field(grid, &t1)?,
        treatment,
        provenance: Provenance {
            generator: "voronoi".into(),
            config_hash: config_hash(&Benchmark::Voronoi(cfg.clone()))?,
            seed,
            index,
        },
    })
}
