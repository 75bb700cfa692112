use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_positive, finish_field, sample_rng, sample_treatment, treatment_damping, Benchmark, Provenance, SamplePair, SoftVoronoi};
use crate::error::{Error, Result};
use crate::field::{ClassMask, Grid2D};
use crate::metrics::squared_edt;
use crate::provenance::config_hash;
use crate::tensor::{Shape, Tensor};

pub const CLASSES: usize = 4;
pub const VESSEL_CLASS: usize = 0;
pub const TUMOR_CLASS: usize = 3;
const LOBES: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WalkConfig {
    pub steps: usize,
    pub branch_prob: f64,
    /// Half-width of the uniform heading change per step (radians).
    pub turn_spread: f64,
    pub branch_angle: f64,
    pub max_branches: usize,
}

impl Default for WalkConfig {
    fn default() -> Self {
        WalkConfig {
            steps: 48,
            branch_prob: 0.06,
            turn_spread: 0.25,
            branch_angle: 0.6,
            max_branches: 6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VesselTumor {
    pub d_max: f64,
    pub sigma0: f64,
    pub sigma1: f64,
    pub amplitude: f64,
    /// Decay length of the vessel-proximity growth weight.
    pub rho: f64,
}

impl Default for VesselTumor {
    fn default() -> Self {
        VesselTumor {
            d_max: 4.0,
            sigma0: 3.0,
            sigma1: 6.0,
            amplitude: 0.95,
            rho: 3.0,
        }
    }
}

/// Classes: 0 vessel, 1–2 lobes (background merged in), 3 tumour.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VesselConfig {
    pub size: usize,
    pub spacing: f64,
    pub walk: WalkConfig,
    pub radius: f64,
    pub grown_radius: f64,
    pub lobe_sites: usize,
    pub lobe_tau: f64,
    pub tumor: VesselTumor,
}

impl Default for VesselConfig {
    fn default() -> Self {
        VesselConfig {
            size: 64,
            spacing: 1.0,
            walk: WalkConfig::default(),
            radius: 1.0,
            grown_radius: 2.0,
            lobe_sites: 3,
            lobe_tau: 3.0,
            tumor: VesselTumor::default(),
        }
    }
}

impl VesselConfig {
    pub fn validate(&self) -> Result<()> {
        Grid2D::new(self.size, self.size, self.spacing)?;
        if self.size < 3 {
            return Err(Error::InvalidConfig("vessel grid must be at least 3×3".into()));
        }
        if self.walk.steps == 0 {
            return Err(Error::InvalidConfig("zero-length vessel walk".into()));
        }
        if !(0.0..=1.0).contains(&self.walk.branch_prob) || !(self.walk.turn_spread >= 0.0) {
            return Err(Error::InvalidConfig("branch probability in [0, 1], turn spread ≥ 0".into()));
        }
        if !(self.radius >= 1.0 && self.grown_radius > self.radius) {
            return Err(Error::InvalidConfig("need grown_radius > radius ≥ 1".into()));
        }
        if self.lobe_sites == 0 {
            return Err(Error::InvalidConfig("lobe_sites must be ≥ 1".into()));
        }
        check_positive("lobe_tau", self.lobe_tau)?;
        let t = &self.tumor;
        check_positive("sigma0", t.sigma0)?;
        check_positive("rho", t.rho)?;
        if !(t.sigma1 > t.sigma0) || !(t.d_max >= 0.0) || !(0.0..=1.0).contains(&t.amplitude) {
            return Err(Error::InvalidConfig("need sigma1 > sigma0, d_max ≥ 0, amplitude in [0, 1]".into()));
        }
        Ok(())
    }

    /// Walk start: top row, middle column.
    pub fn root(&self) -> (usize, usize) {
        (0, (self.size - 1) / 2)
    }
}

fn reflect(v: f64, hi: f64) -> (f64, bool) {
    if v < 0.0 {
        (-v, true)
    } else if v > hi {
        (2.0 * hi - v, true)
    } else {
        (v, false)
    }
}

/// Branching random walk of unit steps from the root, heading down the grid.
/// Walls reflect both the position and the heading.
pub fn walk_skeleton(cfg: &VesselConfig, rng: &mut ChaCha8Rng) -> Result<ClassMask> {
    cfg.validate()?;
    let w = &cfg.walk;
    let n = cfg.size;
    let hi = (n - 1) as f64;
    let mut mask = ClassMask::empty(n, n);
    let (ry, rx) = cfg.root();
    mask.set(ry, rx, true);
    let mut walkers = vec![(ry as f64, rx as f64, std::f64::consts::FRAC_PI_2, w.steps)];
    let mut branches = 0;
    while let Some((mut y, mut x, mut heading, steps)) = walkers.pop() {
        for s in 0..steps {
            heading += rng.gen_range(-w.turn_spread..=w.turn_spread);
            let (ny, fy) = reflect(y + heading.sin(), hi);
            if fy {
                heading = -heading;
            }
            let (nx, fx) = reflect(x + heading.cos(), hi);
            if fx {
                heading = std::f64::consts::PI - heading;
            }
            y = ny;
            x = nx;
            mask.set(y.round() as usize, x.round() as usize, true);
            if branches < w.max_branches && rng.gen_bool(w.branch_prob) {
                let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                walkers.push((y, x, heading + side * w.branch_angle, steps - s - 1));
                branches += 1;
            }
        }
    }
    Ok(mask)
}

/// A vessel pair together with the construction details it was built from.
#[derive(Clone, Debug)]
pub struct VesselDetail {
    pub pair: SamplePair,
    pub skeleton: ClassMask,
    pub tumor_seed: (usize, usize),
}

pub fn generate_vessel_pair(cfg: &VesselConfig, seed: u64) -> Result<SamplePair> {
    vessel_pair_at(cfg, seed, 0)
}

pub fn vessel_pair_at(cfg: &VesselConfig, seed: u64, index: u64) -> Result<SamplePair> {
    Ok(vessel_detail_at(cfg, seed, index)?.pair)
}

fn disk_offsets(r: f64) -> Vec<(isize, isize)> {
    let ri = r.floor() as isize;
    let mut v = Vec::new();
    for dy in -ri..=ri {
        for dx in -ri..=ri {
            if ((dy * dy + dx * dx) as f64) <= r * r {
                v.push((dy, dx));
            }
        }
    }
    v
}

pub fn vessel_detail_at(cfg: &VesselConfig, seed: u64, index: u64) -> Result<VesselDetail> {
    cfg.validate()?;
    let n = cfg.size;
    let grid = Grid2D::new(n, n, cfg.spacing)?;
    let mut rng = sample_rng(seed, index);
    let skeleton = walk_skeleton(cfg, &mut rng)?;
    let lobes = SoftVoronoi::sample(&mut rng, LOBES, cfg.lobe_sites, grid, cfg.lobe_tau);

    let on: Vec<usize> = (0..n * n).filter(|&i| skeleton.bits()[i]).collect();
    let anchor = on[rng.gen_range(0..on.len())];
    let offsets = disk_offsets(cfg.tumor.d_max);
    let (oy, ox) = offsets[rng.gen_range(0..offsets.len())];
    let clamp = |v: isize| v.clamp(0, n as isize - 1) as usize;
    let tumor_seed = (clamp((anchor / n) as isize + oy), clamp((anchor % n) as isize + ox));
    let treatment = sample_treatment(&mut rng);

    let dist: Vec<f64> = squared_edt(&skeleton).into_iter().map(f64::sqrt).collect();
    let t = &cfg.tumor;
    let sigma1 = t.sigma0 + (t.sigma1 - t.sigma0) * treatment_damping(&treatment);
    let shape = Shape::new(CLASSES, n, n);
    let (mut t0, mut t1) = (Tensor::zeros(shape), Tensor::zeros(shape));
    let mut q = [0.0; LOBES];
    let (cy, cx) = (tumor_seed.0 as f64, tumor_seed.1 as f64);
    for y in 0..n {
        for x in 0..n {
            let d = dist[y * n + x];
            let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            lobes.eval(y as f64, x as f64, &mut q);
            let g0 = t.amplitude * (-r2 / (2.0 * t.sigma0 * t.sigma0)).exp();
            let g1 = g0 + (1.0 - g0) * t.amplitude * (-r2 / (2.0 * sigma1 * sigma1)).exp() * (-d / t.rho).exp();
            for (out, r, g) in [(&mut t0, cfg.radius, g0), (&mut t1, cfg.grown_radius, g1)] {
                // anti-aliased tube; the tumour sits beneath the vessel
                let v = (r + 0.5 - d).clamp(0.0, 1.0);
                out.set(VESSEL_CLASS, y, x, v);
                out.set(TUMOR_CLASS, y, x, (1.0 - v) * g);
                for (k, &qk) in q.iter().enumerate() {
                    out.set(1 + k, y, x, (1.0 - v) * (1.0 - g) * qk);
                }
            }
        }
    }
    let pair = SamplePair {
        baseline: finish_field(grid, &t0)?,
        target: finish_field(grid, &t1)?,
        treatment,
        provenance: Provenance {
            generator: "vessel".into(),
            config_hash: config_hash(&Benchmark::Vessel(cfg.clone()))?,
            seed,
            index,
        },
    };
    Ok(VesselDetail {
        pair,
        skeleton,
        tumor_seed,
    })
}
