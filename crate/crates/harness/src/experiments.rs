use std::collections::HashMap;
use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use adt_core::error::{Error, Result};
use adt_core::metrics::Stat;
use adt_core::provenance::config_hash;
use adt_core::solver::SolverConfig;
use adt_core::synth::{read_dataset, Benchmark, SamplePair};
use serde::Serialize;

use crate::config::{DataConfig, ExperimentConfig, Toggles, TrainConfig};
use crate::train::{reevaluate, train, Data, ExperimentResult, FoldOutcome, TrainOutput};

pub const COLLAPSED: &str = "COLLAPSED";
pub const UNDEFINED: &str = "UNDEFINED";

/// Pairs in memory plus what is needed to regenerate them at another size.
#[derive(Clone, Debug)]
pub struct Source {
    pub pairs: Vec<SamplePair>,
    pub tumor_class: usize,
    pub benchmark: Option<Benchmark>,
    pub seed: u64,
}

impl Source {
    pub fn load(cfg: &DataConfig) -> Result<Source> {
        if let Some(dir) = &cfg.dir {
            let ds = read_dataset(dir)?;
            if ds.is_empty() {
                return Err(Error::InvalidConfig(format!("dataset {} has no pairs", dir.display())));
            }
            return Ok(Source {
                tumor_class: ds.manifest.tumor_class,
                benchmark: ds.manifest.benchmark.clone(),
                seed: ds.pairs[0].provenance.seed,
                pairs: ds.pairs,
            });
        }
        match &cfg.benchmark {
            Some(b) => Source::generate(b.clone(), cfg.seed, cfg.count),
            None => Err(Error::InvalidConfig("data config needs either `dir` or `benchmark`".into())),
        }
    }

    pub fn generate(benchmark: Benchmark, seed: u64, count: usize) -> Result<Source> {
        if count == 0 {
            return Err(Error::InvalidConfig("count must be ≥ 1".into()));
        }
        Ok(Source {
            pairs: benchmark.generate(seed, count)?,
            tumor_class: benchmark.tumor_class(),
            benchmark: Some(benchmark),
            seed,
        })
    }

    pub fn data(&self) -> Data<'_> {
        Data {
            pairs: &self.pairs,
            tumor_class: self.tumor_class,
        }
    }

    /// Same generator and seed on a `size × size` grid.
    pub fn resized(&self, size: usize) -> Result<Source> {
        let mut b = self
            .benchmark
            .clone()
            .ok_or_else(|| Error::InvalidConfig("resolution sweep needs generator settings in the data source".into()))?;
        match &mut b {
            Benchmark::Voronoi(c) => c.size = size,
            Benchmark::Vessel(c) => c.size = size,
        }
        Source::generate(b, self.seed, self.pairs.len())
    }
}

/// Memoises cross-validated trainings by (configs, data) so sweeps and the
/// ablation table share fits.
#[derive(Default)]
pub struct Runner {
    cache: Mutex<HashMap<(String, u64), Arc<TrainOutput>>>,
}

impl Runner {
    pub fn new() -> Runner {
        Runner::default()
    }

    pub fn train(&self, data: Data<'_>, cfg: &TrainConfig, solver: &SolverConfig) -> Result<Arc<TrainOutput>> {
        let key = (config_hash(&(cfg, solver))?, data.fingerprint());
        if let Some(hit) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let out = Arc::new(train(data, cfg, solver)?);
        self.cache.lock().expect("cache lock").insert(key, out.clone());
        Ok(out)
    }

    pub fn cached(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Dt,
    JacobiIters,
    Relaxation,
    Resolution,
    Chi,
    CarryingCapacity,
    LambdaTv,
    KMax,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 8] = [
        SweepAxis::Dt,
        SweepAxis::JacobiIters,
        SweepAxis::Relaxation,
        SweepAxis::Resolution,
        SweepAxis::Chi,
        SweepAxis::CarryingCapacity,
        SweepAxis::LambdaTv,
        SweepAxis::KMax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Dt => "dt",
            SweepAxis::JacobiIters => "jacobi_iters",
            SweepAxis::Relaxation => "relaxation",
            SweepAxis::Resolution => "resolution",
            SweepAxis::Chi => "chi",
            SweepAxis::CarryingCapacity => "carrying_capacity",
            SweepAxis::LambdaTv => "lambda_tv",
            SweepAxis::KMax => "k_max",
        }
    }

    /// Axes that only change how a trained model is rolled out.
    pub fn solver_only(self) -> bool {
        matches!(self, SweepAxis::Dt | SweepAxis::JacobiIters | SweepAxis::Relaxation)
    }

    /// `exp` with this axis set to `value`. Resolution is applied to the data,
    /// not the configs, and leaves them unchanged.
    pub fn apply(self, value: f64, exp: &ExperimentConfig) -> Result<ExperimentConfig> {
        let mut e = exp.clone();
        match self {
            SweepAxis::Dt => e.solver.dt = value,
            SweepAxis::JacobiIters => e.solver.jacobi_iters = as_count(self, value)?,
            SweepAxis::Relaxation => e.solver.relaxation = value,
            SweepAxis::Resolution => {
                as_count(self, value)?;
            }
            SweepAxis::Chi => e.train.physics.cross = value,
            SweepAxis::CarryingCapacity => e.train.physics.carrying_capacity = value,
            SweepAxis::LambdaTv => e.train.lambda_tv = value,
            SweepAxis::KMax => e.train.physics.k_max = value,
        }
        e.solver.validate()?;
        e.train.validate()?;
        Ok(e)
    }
}

fn as_count(axis: SweepAxis, v: f64) -> Result<usize> {
    if v >= 1.0 && v.fract() == 0.0 && v < u32::MAX as f64 {
        Ok(v as usize)
    } else {
        Err(Error::InvalidConfig(format!("{} value {v} must be a positive integer", axis.name())))
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SweepAxis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = SweepAxis::ALL.iter().map(|a| a.name()).collect();
                Error::InvalidConfig(format!("unknown sweep axis `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

/// Comma-separated numbers, e.g. `0.1,0.3`.
pub fn parse_values(s: &str) -> Result<Vec<f64>> {
    let vals: Vec<f64> = s
        .split(',')
        .map(|t| {
            let t = t.trim();
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::InvalidConfig(format!("`{t}` is not a finite number")))
        })
        .collect::<Result<_>>()?;
    if vals.is_empty() {
        return Err(Error::InvalidConfig("no sweep values".into()));
    }
    Ok(vals)
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub dsc: Stat,
    pub hd95: Stat,
    /// Folds whose training diverged or whose held-out rollout failed.
    pub collapsed: usize,
    pub folds: usize,
}

impl SweepRow {
    fn from_headlines(value: f64, folds: &[Option<crate::train::Headline>], diverged: usize) -> SweepRow {
        let collapsed = folds.iter().filter(|h| h.is_none()).count().max(diverged);
        SweepRow {
            value,
            dsc: Stat::of(folds.iter().map(|h| h.as_ref().map(|h| h.dsc_macro))),
            hd95: Stat::of(folds.iter().map(|h| h.as_ref().and_then(|h| h.hd95_macro))),
            collapsed,
            folds: folds.len(),
        }
    }

    fn from_result(value: f64, r: &ExperimentResult) -> SweepRow {
        let heads: Vec<_> = r.folds.iter().map(|f| f.headline).collect();
        SweepRow::from_headlines(value, &heads, r.folds.iter().filter(|f| f.diverged.is_some()).count())
    }

    pub fn is_collapsed(&self) -> bool {
        !self.dsc.mean.is_some_and(f64::is_finite)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

fn cell(out: &mut String, v: Option<f64>, collapsed: bool) {
    match v {
        _ if collapsed => out.push_str(COLLAPSED),
        Some(x) if x.is_finite() => write!(out, "{x}").expect("write to string"),
        _ => out.push_str(UNDEFINED),
    }
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("value,dsc_mean,dsc_std,hd95_mean,hd95_std,collapsed_folds\n");
        for r in &self.rows {
            let c = r.is_collapsed();
            write!(s, "{},", r.value).expect("write to string");
            for v in [r.dsc.mean, r.dsc.std, r.hd95.mean, r.hd95.std] {
                cell(&mut s, v, c);
                s.push(',');
            }
            writeln!(s, "{}", r.collapsed).expect("write to string");
        }
        s
    }

    pub fn row(&self, value: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.value == value)
    }
}

/// One row per value with every other setting held at `exp`. Solver-only
/// axes roll out the fits of `exp` itself; the rest retrain.
pub fn sensitivity_sweep(runner: &Runner, source: &Source, axis: SweepAxis, values: &[f64], exp: &ExperimentConfig) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(Error::InvalidConfig("no sweep values".into()));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &v in values {
        let e = axis.apply(v, exp)?;
        let row = if axis.solver_only() {
            let base = runner.train(source.data(), &exp.train, &exp.solver)?;
            let heads = reevaluate(&base.fits, source.data(), &exp.train, &e.solver)?;
            let diverged = base.fits.iter().filter(|f| f.diverged.is_some()).count();
            SweepRow::from_headlines(v, &heads, diverged)
        } else if axis == SweepAxis::Resolution {
            let resized = source.resized(as_count(axis, v)?)?;
            SweepRow::from_result(v, &runner.train(resized.data(), &e.train, &e.solver)?.result)
        } else {
            SweepRow::from_result(v, &runner.train(source.data(), &e.train, &e.solver)?.result)
        };
        rows.push(row);
    }
    Ok(SweepTable { axis, rows })
}

/// The four toggle settings of the ablation table, weakest first.
pub const ABLATIONS: [(&str, Toggles); 4] = [
    (
        "no_spatial",
        Toggles {
            spatial_on: false,
            growth_cnn_on: true,
            topology_on: false,
        },
    ),
    (
        "spatial_only",
        Toggles {
            spatial_on: true,
            growth_cnn_on: false,
            topology_on: false,
        },
    ),
    (
        "spatial_topology",
        Toggles {
            spatial_on: true,
            growth_cnn_on: false,
            topology_on: true,
        },
    ),
    ("full", Toggles {
        spatial_on: true,
        growth_cnn_on: true,
        topology_on: true,
    }),
];

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub name: &'static str,
    pub toggles: Toggles,
    pub dsc: Stat,
    pub hd95: Stat,
    pub dsc_tumor: Stat,
    pub folds: Vec<FoldOutcome>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,spatial,growth_cnn,topology,dsc_mean,dsc_std,hd95_mean,hd95_std,tumor_dsc_mean\n");
        for r in &self.rows {
            let t = r.toggles;
            write!(s, "{},{},{},{},", r.name, t.spatial_on, t.growth_cnn_on, t.topology_on).expect("write to string");
            let c = r.dsc.mean.is_none();
            for v in [r.dsc.mean, r.dsc.std, r.hd95.mean, r.hd95.std] {
                cell(&mut s, v, c);
                s.push(',');
            }
            cell(&mut s, r.dsc_tumor.mean, c);
            s.push('\n');
        }
        s
    }
}

pub fn ablation_run(runner: &Runner, source: &Source, base: &TrainConfig, solver: &SolverConfig) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(ABLATIONS.len());
    for (name, toggles) in ABLATIONS {
        let cfg = TrainConfig {
            toggles,
            ..base.clone()
        };
        let out = runner.train(source.data(), &cfg, solver)?;
        let r = &out.result;
        rows.push(AblationRow {
            name,
            toggles,
            dsc: r.dsc(),
            hd95: r.hd95(),
            dsc_tumor: r.across_folds(|h| Some(h.dsc_tumor)),
            folds: r.folds.clone(),
        });
    }
    Ok(AblationTable { rows })
}
