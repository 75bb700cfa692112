//! Seeded synthetic benchmarks: soft Voronoi organs with a growing tumour,
//! and branching vessel trees with vessel-guided tumour growth.
//!
//! Every generator is a pure function of `(config, seed, index)`. Randomness
//! comes from ChaCha8 (a counter-based stream cipher with fixed constants),
//! keyed by the seed with the sample index as stream id, so results do not
//! depend on platform or on the order samples are generated in.

mod dataset;
mod vessel;
mod voronoi;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adtf::quantize;
use crate::error::{Error, Result};
use crate::field::{project_field, Grid2D, SimplexField};
use crate::operators::TreatmentContext;
use crate::tensor::Tensor;

pub use dataset::{fold_of, read_dataset, split_folds, write_dataset, Dataset, DatasetManifest, PairEntry, MANIFEST_FILE};
pub use vessel::{
    generate_vessel_pair, vessel_detail_at, vessel_pair_at, walk_skeleton, VesselConfig, VesselDetail, VesselTumor, WalkConfig,
    CLASSES as VESSEL_CLASSES, TUMOR_CLASS as VESSEL_TUMOR_CLASS, VESSEL_CLASS,
};
pub use voronoi::{generate_voronoi_pair, voronoi_pair_at, TumorBlob, VoronoiConfig};

/// Treatment channel order used by both generators.
pub const TREATMENT_CHANNELS: [&str; 3] = ["surgery", "radio", "chemo"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub config_hash: String,
    pub seed: u64,
    pub index: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub baseline: SimplexField,
    pub target: SimplexField,
    pub treatment: TreatmentContext,
    pub provenance: Provenance,
}

impl SamplePair {
    pub fn validate(&self) -> Result<()> {
        if self.baseline.grid() != self.target.grid() || self.baseline.num_classes() != self.target.num_classes() {
            return Err(Error::ShapeMismatch("baseline and target differ in grid or class count".into()));
        }
        self.treatment.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "benchmark", rename_all = "snake_case")]
pub enum Benchmark {
    Voronoi(VoronoiConfig),
    Vessel(VesselConfig),
}

impl Benchmark {
    pub fn name(&self) -> &'static str {
        match self {
            Benchmark::Voronoi(_) => "voronoi",
            Benchmark::Vessel(_) => "vessel",
        }
    }

    pub fn tumor_class(&self) -> usize {
        match self {
            Benchmark::Voronoi(c) => c.classes - 1,
            Benchmark::Vessel(_) => vessel::TUMOR_CLASS,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Benchmark::Voronoi(c) => c.classes,
            Benchmark::Vessel(_) => vessel::CLASSES,
        }
    }

    pub fn pair(&self, seed: u64, index: u64) -> Result<SamplePair> {
        match self {
            Benchmark::Voronoi(c) => voronoi_pair_at(c, seed, index),
            Benchmark::Vessel(c) => vessel_pair_at(c, seed, index),
        }
    }

    /// Pairs `0..count`.
    pub fn generate(&self, seed: u64, count: usize) -> Result<Vec<SamplePair>> {
        (0..count as u64).map(|i| self.pair(seed, i)).collect()
    }
}

pub(crate) fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// No surgery; radio and chemo each switched on with probability ½ at a
/// uniform intensity.
pub(crate) fn sample_treatment(rng: &mut ChaCha8Rng) -> TreatmentContext {
    let mut ch = vec![0.0; TREATMENT_CHANNELS.len()];
    for c in ch.iter_mut().skip(1) {
        if rng.gen_bool(0.5) {
            *c = rng.gen_range(0.2..1.0);
        }
    }
    TreatmentContext::new(ch).expect("intensities lie in [0, 1]")
}

/// Growth multiplier in `(0, 1]` applied to the tumour spread under treatment.
pub(crate) fn treatment_damping(ctx: &TreatmentContext) -> f64 {
    1.0 - 0.3 * ctx.channels[1] - 0.3 * ctx.channels[2]
}

/// Soft Voronoi partition: `softmax_k(−min_site_dist_k(x)/τ)` evaluated at
/// arbitrary (possibly warped) coordinates.
#[derive(Clone, Debug)]
pub(crate) struct SoftVoronoi {
    sites: Vec<Vec<(f64, f64)>>,
    tau: f64,
}

impl SoftVoronoi {
    pub fn sample(rng: &mut ChaCha8Rng, classes: usize, per_class: usize, grid: Grid2D, tau: f64) -> Self {
        let sites = (0..classes)
            .map(|_| {
                (0..per_class)
                    .map(|_| (rng.gen_range(0.0..grid.height as f64), rng.gen_range(0.0..grid.width as f64)))
                    .collect()
            })
            .collect();
        SoftVoronoi { sites, tau }
    }

    pub fn classes(&self) -> usize {
        self.sites.len()
    }

    pub fn eval(&self, y: f64, x: f64, out: &mut [f64]) {
        for (o, sites) in out.iter_mut().zip(&self.sites) {
            let d = sites
                .iter()
                .map(|&(sy, sx)| ((sy - y).powi(2) + (sx - x).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            *o = -d / self.tau;
        }
        let m = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for o in out.iter_mut() {
            *o = (*o - m).exp();
            z += *o;
        }
        for o in out.iter_mut() {
            *o /= z;
        }
    }
}

/// Projects and rounds to storage precision so that the in-memory pair is
/// exactly what a dataset round trip reproduces.
pub(crate) fn finish_field(grid: Grid2D, raw: &Tensor) -> Result<SimplexField> {
    let p = project_field(grid, raw)?;
    SimplexField::new(grid, quantize(p.values()))
}

pub(crate) fn check_positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
    }
    Ok(())
}
