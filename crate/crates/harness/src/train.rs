use std::path::Path;
use std::time::Instant;

use adt_core::autodiff::{optimizer_step, AdamState, ParamSet};
use adt_core::error::{Error, Result};
use adt_core::field::SimplexField;
use adt_core::metrics::{aggregate, evaluate_masks, MetricReport, Stat};
use adt_core::model::{Model, Trainable};
use adt_core::operators::{InterventionSchedule, PdeParams};
use adt_core::provenance::fnv1a64;
use adt_core::residual::ResidualNet;
use adt_core::solver::{rollout, GradientRollout, SolverConfig};
use adt_core::synth::{split_folds, SamplePair};
use adt_core::topology::SkeletonConfig;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::losses::{target_masks, total_loss_on_tape};

/// Pairs plus the class layout they were generated with.
#[derive(Clone, Copy, Debug)]
pub struct Data<'a> {
    pub pairs: &'a [SamplePair],
    pub tumor_class: usize,
}

impl Data<'_> {
    fn classes(&self) -> usize {
        self.pairs[0].baseline.num_classes()
    }

    fn channels(&self) -> usize {
        self.pairs[0].treatment.channels.len()
    }

    /// FNV-1a over every stored value; identifies the data in cache keys.
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::new();
        for p in self.pairs {
            for f in [&p.baseline, &p.target] {
                bytes.extend(f.values().data().iter().flat_map(|v| v.to_le_bytes()));
            }
            bytes.extend(p.treatment.channels.iter().flat_map(|v| v.to_le_bytes()));
        }
        fnv1a64(&bytes)
    }
}

/// Physics template and initial parameter set for one fold.
pub fn initial_model(data: Data<'_>, cfg: &TrainConfig, fold: usize) -> Result<(PdeParams, ParamSet)> {
    let t = cfg.toggles;
    let template = cfg
        .physics
        .template(data.pairs[0].baseline.grid(), data.classes(), data.tumor_class, data.channels(), t.spatial_on)?;
    let residual = if t.growth_cnn_on {
        Some(ResidualNet::init(
            cfg.seed.wrapping_add(fold as u64),
            data.classes(),
            data.channels(),
            cfg.hidden,
        )?)
    } else {
        None
    };
    let model = Model {
        params: template.clone(),
        residual,
    };
    let set = model.to_param_set(
        Trainable {
            spatial: t.spatial_on,
            reaction: true,
        },
        true,
    )?;
    Ok((template, set))
}

#[derive(Clone, Debug)]
pub struct FoldFit {
    pub fold: usize,
    pub template: PdeParams,
    pub params: ParamSet,
    /// Mean training loss of every completed epoch.
    pub history: Vec<f64>,
    /// Reason training stopped early, if it did.
    pub diverged: Option<String>,
    /// Optimizer steps that skipped a leaf for a non-finite gradient.
    pub skipped_leaves: usize,
}

impl FoldFit {
    pub fn model(&self) -> Result<Model> {
        Model::from_param_set(&self.params, &self.template)
    }

    /// Writes the checkpoint into `dir` and the physics template into
    /// `dir/template/`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.params.save(dir)?;
        let t = dir.join(TEMPLATE_DIR);
        std::fs::create_dir_all(&t).map_err(|e| Error::io(&t, e))?;
        self.template.save_json(&t.join(TEMPLATE_FILE))
    }
}

const TEMPLATE_DIR: &str = "template";
const TEMPLATE_FILE: &str = "pde.json";

/// Loads a model saved by [`FoldFit::save`], given its directory or the
/// checkpoint file inside it.
pub fn load_model(path: &Path) -> Result<Model> {
    let dir = if path.is_dir() {
        path
    } else {
        path.parent().unwrap_or(Path::new("."))
    };
    let set = ParamSet::load(dir)?;
    let template = PdeParams::load_json(&dir.join(TEMPLATE_DIR).join(TEMPLATE_FILE))?;
    Model::from_param_set(&set, &template)
}

/// Trains on the pairs at `train_idx`, visiting them in a seeded shuffled
/// order each epoch.
pub fn fit(data: Data<'_>, train_idx: &[usize], cfg: &TrainConfig, solver: &SolverConfig, fold: usize) -> Result<FoldFit> {
    cfg.validate()?;
    solver.validate()?;
    let (template, mut set) = initial_model(data, cfg, fold)?;
    let adam = cfg.adam();
    let mut state = AdamState::new(&set);
    let schedule = InterventionSchedule::empty();
    let masks: Vec<_> = train_idx.iter().map(|&i| target_masks(&data.pairs[i].target)).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut diverged = None;
    let mut skipped = 0;
    let mut order: Vec<usize> = (0..train_idx.len()).collect();
    'epochs: for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(((fold as u64) << 32) | epoch as u64);
        order.shuffle(&mut rng);
        let mut losses = Vec::with_capacity(order.len());
        for &j in &order {
            let pair = &data.pairs[train_idx[j]];
            let run = GradientRollout {
                template: &template,
                ctx: &pair.treatment,
                schedule: &schedule,
                cfg: solver,
            };
            set.zero_grads();
            let out = run.loss_and_grad(&pair.baseline, &mut set, |tape, p| {
                total_loss_on_tape(tape, p, &pair.target, &masks[j], cfg)
            });
            match out {
                Ok((l, _)) if l.is_finite() => {
                    skipped += optimizer_step(&mut set, &mut state, &adam).len();
                    losses.push(l);
                }
                Ok((l, _)) => {
                    diverged = Some(format!("non-finite loss {l} in epoch {epoch}"));
                    break 'epochs;
                }
                Err(e @ Error::Unstable { .. }) => {
                    diverged = Some(format!("{e} in epoch {epoch}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        history.push(losses.iter().sum::<f64>() / losses.len().max(1) as f64);
    }
    Ok(FoldFit {
        fold,
        template,
        params: set,
        history,
        diverged,
        skipped_leaves: skipped,
    })
}

/// Final rollout state from `p0`.
pub fn predict(model: &Model, pair: &SamplePair, solver: &SolverConfig) -> Result<SimplexField> {
    let traj = rollout(
        &pair.baseline,
        &model.params,
        &pair.treatment,
        &InterventionSchedule::empty(),
        solver,
        model.residual.as_ref(),
    )?;
    Ok(traj.final_state().clone())
}

pub fn sample_name(index: usize) -> String {
    format!("pair_{index:04}")
}

/// Per-class rows for one prediction.
pub fn score(index: usize, pred: &SimplexField, target: &SimplexField, skel: &SkeletonConfig) -> Result<Vec<adt_core::metrics::MetricRow>> {
    evaluate_masks(
        &sample_name(index),
        &target_masks(pred),
        &target_masks(target),
        target.grid().spacing,
        skel,
    )
}

/// Rolls out every listed pair and scores the argmax masks against the
/// target's. A failed rollout fails the whole evaluation.
pub fn evaluate(model: &Model, data: Data<'_>, indices: &[usize], solver: &SolverConfig, skel: &SkeletonConfig) -> Result<MetricReport> {
    let rows: Vec<Vec<_>> = indices
        .par_iter()
        .map(|&i| {
            let pair = &data.pairs[i];
            let pred = predict(model, pair, solver)?;
            score(i, &pred, &pair.target, skel)
        })
        .collect::<Result<_>>()?;
    aggregate(&rows.concat())
}

/// A numerically unstable rollout is data (a collapsed run), not a failure.
pub fn collapsed_as_none<T>(r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::Unstable { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Headline numbers of one evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Headline {
    pub dsc_macro: f64,
    pub dsc_tumor: f64,
    pub hd95_macro: Option<f64>,
    pub hd95_tumor: Option<f64>,
    pub cldice_macro: f64,
}

impl Headline {
    pub fn of(report: &MetricReport, tumor: usize) -> Headline {
        let m = report.class_summary(None).expect("macro row");
        let t = report.class_summary(Some(tumor));
        Headline {
            dsc_macro: m.dsc.mean.unwrap_or(0.0),
            dsc_tumor: t.and_then(|t| t.dsc.mean).unwrap_or(0.0),
            hd95_macro: m.hd95.mean,
            hd95_tumor: t.and_then(|t| t.hd95.mean),
            cldice_macro: m.cldice.mean.unwrap_or(0.0),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub fold: usize,
    pub history: Vec<f64>,
    pub diverged: Option<String>,
    /// `None` when the held-out rollout failed.
    pub report: Option<MetricReport>,
    pub headline: Option<Headline>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub folds: Vec<FoldOutcome>,
    pub config: serde_json::Value,
    pub seconds: f64,
}

impl ExperimentResult {
    /// Mean ± population std over folds of one headline number; collapsed
    /// folds count as excluded.
    pub fn across_folds(&self, f: impl Fn(&Headline) -> Option<f64>) -> Stat {
        Stat::of(self.folds.iter().map(|o| o.headline.as_ref().and_then(&f)))
    }

    pub fn dsc(&self) -> Stat {
        self.across_folds(|h| Some(h.dsc_macro))
    }

    pub fn hd95(&self) -> Stat {
        self.across_folds(|h| h.hd95_macro)
    }
}

pub struct TrainOutput {
    pub fits: Vec<FoldFit>,
    pub result: ExperimentResult,
}

/// Cross-validated training: one fit per fold (folds run in parallel),
/// each evaluated on its held-out pairs.
pub fn train(data: Data<'_>, cfg: &TrainConfig, solver: &SolverConfig) -> Result<TrainOutput> {
    if data.pairs.is_empty() {
        return Err(Error::InvalidConfig("training needs a non-empty dataset".into()));
    }
    cfg.validate()?;
    let start = Instant::now();
    let n = data.pairs.len();
    let per_fold: Vec<(FoldFit, FoldOutcome)> = (0..cfg.folds)
        .into_par_iter()
        .map(|fold| {
            let t0 = Instant::now();
            let (mut train_idx, test_idx) = split_folds(n, cfg.folds, fold);
            if let Some(m) = cfg.max_train_pairs {
                train_idx.truncate(m);
            }
            let fit = fit(data, &train_idx, cfg, solver, fold)?;
            let report = collapsed_as_none(evaluate(&fit.model()?, data, &test_idx, solver, &cfg.skeleton))?;
            let headline = report.as_ref().map(|r| Headline::of(r, data.tumor_class));
            let outcome = FoldOutcome {
                fold,
                history: fit.history.clone(),
                diverged: fit.diverged.clone(),
                report,
                headline,
                seconds: t0.elapsed().as_secs_f64(),
            };
            Ok((fit, outcome))
        })
        .collect::<Result<_>>()?;
    let (fits, folds): (Vec<_>, Vec<_>) = per_fold.into_iter().unzip();
    Ok(TrainOutput {
        fits,
        result: ExperimentResult {
            folds,
            config: serde_json::to_value(cfg)?,
            seconds: start.elapsed().as_secs_f64(),
        },
    })
}

/// Held-out evaluation of already fitted folds under another solver setting.
pub fn reevaluate(fits: &[FoldFit], data: Data<'_>, cfg: &TrainConfig, solver: &SolverConfig) -> Result<Vec<Option<Headline>>> {
    fits.par_iter()
        .map(|fit| {
            let (_, test_idx) = split_folds(data.pairs.len(), cfg.folds, fit.fold);
            let report = collapsed_as_none(evaluate(&fit.model()?, data, &test_idx, solver, &cfg.skeleton))?;
            Ok(report.map(|r| Headline::of(&r, data.tumor_class)))
        })
        .collect()
}
