//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `ADT_ACCEPT=1,5,7` restricts the run to the listed criteria.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use adt_core::adtf::{decode, encode, quantize, read_tensor, write_tensor};
use adt_core::autodiff::{optimizer_step, AdamConfig, AdamState, LeafSpec, ParamSet, Tape};
use adt_core::error::Result;
use adt_core::field::{class_mass, project_field, ClassMask, Grid2D, SimplexField, SIMPLEX_TOL};
use adt_core::gradcheck::{check_leaves, LeafCheck};
use adt_core::metrics::{cldice_metric, dsc, hd95};
use adt_core::model::{Model, Trainable};
use adt_core::operators::{laplacian, EventKind, InterventionEvent, InterventionSchedule, PdeParams, TreatmentContext};
use adt_core::residual::ResidualNet;
use adt_core::solver::{helmholtz_solve_jacobi, rollout, rollout_with, GradientRollout, SolverConfig};
use adt_core::synth::{Benchmark, VoronoiConfig};
use adt_core::tensor::{Shape, Tensor};
use adt_core::topology::{atl_on_tape, overlap_loss, soft_skeleton, AtlWeights, SkeletonConfig};
use adt_harness::config::{ExperimentConfig, TrainConfig};
use adt_harness::experiments::{ablation_run, sensitivity_sweep, Runner, Source, SweepAxis};
use adt_harness::train::{evaluate, train};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ROLLOUTS: usize = 100;
const STEP_SIZES: [f64; 5] = [0.05, 0.1, 0.2, 0.3, 0.5];
const MAX_NORM: f64 = 1.0 + 1e-6;
const JACOBI_TOL: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-3;
const GRAD_PASS_RATE: f64 = 0.95;
const GRAD_LEAVES: usize = 200;
const GRAD_CONFIGS: usize = 20;
const DRIFT_TOL: f64 = 1e-5;
const ONE_HOT_TOL: f64 = 1e-9;
const ATL_TARGET: f64 = 1e-3;
const ATL_STEPS: usize = 500;
const DT_MARGIN: f64 = 0.02;
const KMAX_MARGIN: f64 = 0.02;
const FULL_OVER_SPATIAL: f64 = 0.02;
const SPATIAL_OVER_NONE: f64 = 0.01;
const FULL_DSC_MIN: f64 = 0.85;
const FULL_HD95_MAX: f64 = 5.0;
const PAIRS: usize = 200;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

fn random_field(rng: &mut ChaCha8Rng, n: usize, k: usize) -> SimplexField {
    let raw = Tensor::from_fn(Shape::new(k, n, n), |_, _, _| rng.gen::<f64>());
    project_field(Grid2D::square(n).unwrap(), &raw).unwrap()
}

fn max_abs(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn simplex_feasibility() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_sum, mut min_entry, mut states) = (0.0f64, f64::INFINITY, 0usize);
    for i in 0..ROLLOUTS {
        let n = rng.gen_range(8..=64);
        let k = rng.gen_range(2..=5);
        let dt = STEP_SIZES[rng.gen_range(0..STEP_SIZES.len())];
        let steps = rng.gen_range(10..=20);
        let p0 = random_field(&mut rng, n, k);
        let mut params = PdeParams::constant(k, k - 1, 2)
            .with_diffusion(rng.gen_range(0.0..2.0))
            .with_cross(rng.gen_range(-0.3..0.3));
        params.growth_clamp = 3.0;
        params.kill_rates = Tensor::from_vec(Shape::new(2, 1, 1), vec![rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]);
        let params = params.with_growth(rng.gen_range(0.0..3.0));
        let ctx = TreatmentContext::new(vec![rng.gen(), rng.gen()])?;
        let net = (i % 2 == 0).then(|| ResidualNet::init(i as u64, k, 2, 4)).transpose()?;
        let event = InterventionEvent {
            time: rng.gen_range(0.0..dt * steps as f64),
            region: Some(ClassMask::from_fn(n, n, |y, x| y < n / 2 && x < n / 2)),
            target_class: k - 1,
            kind: EventKind::Dose,
            magnitude: rng.gen(),
        };
        let schedule = InterventionSchedule::new(vec![event])?;
        let cfg = SolverConfig {
            dt,
            horizon: dt * steps as f64,
            ..SolverConfig::default()
        };
        rollout_with(&p0, &params, &ctx, &schedule, &cfg, net.as_ref(), |_, s| {
            let (e, m) = s.simplex_violation();
            worst_sum = worst_sum.max(e);
            min_entry = min_entry.min(m);
            states += 1;
        })?;
    }
    Ok(Outcome::new(
        worst_sum <= SIMPLEX_TOL && min_entry >= -SIMPLEX_TOL,
        format!("{states} states, max |sum-1| {worst_sum:.1e}, min entry {min_entry:.1e}"),
    ))
}

fn stability() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p0 = random_field(&mut rng, 64, 3);
    let params = PdeParams::constant(3, 2, 0).with_diffusion(1.0);
    let mut worst = 0.0f64;
    let mut finite = true;
    for dt in STEP_SIZES {
        let cfg = SolverConfig {
            dt,
            horizon: 20.0 * dt,
            ..SolverConfig::default()
        };
        let t = rollout(&p0, &params, &TreatmentContext::none(0), &InterventionSchedule::empty(), &cfg, None)?;
        for s in &t.states {
            finite &= s.values().all_finite();
            worst = worst.max(max_abs(s.values().data().iter().copied()));
        }
    }
    // explicit Euler, no projection, same dt = 0.5 and D = 1
    let g = p0.grid();
    let mut u = p0.plane(0).to_vec();
    let mut control = 0.0f64;
    for _ in 0..40 {
        let l = laplacian(&u, g);
        for (x, d) in u.iter_mut().zip(l) {
            *x += 0.5 * d;
        }
        control = control.max(max_abs(u.iter().copied()));
    }
    let control_violates = !control.is_finite() || control > MAX_NORM;
    Ok(Outcome::new(
        finite && worst <= MAX_NORM && control_violates,
        format!("IMEX max-norm {worst:.6} over dt {STEP_SIZES:?}; explicit Euler reaches {control:.3e}"),
    ))
}

/// Dense `I − Δt D ∇²` with zero-flux walls, solved by Gaussian elimination.
fn dense_solve(n: usize, d: f64, dt: f64, rhs: &[f64]) -> Vec<f64> {
    let m = n * n;
    let mut a = vec![vec![0.0; m]; m];
    let mut b = rhs.to_vec();
    for y in 0..n {
        for x in 0..n {
            let i = y * n + x;
            a[i][i] = 1.0;
            let nbrs = [(y > 0, i.wrapping_sub(n)), (y + 1 < n, i + n), (x > 0, i.wrapping_sub(1)), (x + 1 < n, i + 1)];
            for (ok, j) in nbrs {
                if ok {
                    a[i][i] += dt * d;
                    a[i][j] -= dt * d;
                }
            }
        }
    }
    for c in 0..m {
        let p = (c..m).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..m {
            let f = a[r][c] / a[c][c];
            for k in c..m {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; m];
    for r in (0..m).rev() {
        let s: f64 = (r + 1..m).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

fn jacobi_vs_dense() -> Result<Outcome> {
    let n = 8;
    let g = Grid2D::square(n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let d = rng.gen_range(0.05..1.0);
        let dt = rng.gen_range(0.05..0.5);
        let rhs: Vec<f64> = (0..n * n).map(|_| rng.gen()).collect();
        let exact = dense_solve(n, d, dt, &rhs);
        let approx = helmholtz_solve_jacobi(&rhs, &Tensor::scalar(d), dt, 200, 0.9, g)?;
        worst = worst.max(max_abs(exact.iter().zip(&approx).map(|(a, b)| a - b)));
    }
    Ok(Outcome::new(worst < JACOBI_TOL, format!("20 draws, max-abs gap {worst:.2e}")))
}

fn gradient_case(seed: u64) -> Result<Vec<LeafCheck>> {
    let (n, k) = (16, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits: Vec<f64> = (0..k * n * n).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let mut v = vec![0.0; k * n * n];
    for i in 0..n * n {
        let z: f64 = (0..k).map(|c| logits[c * n * n + i].exp()).sum();
        for c in 0..k {
            v[c * n * n + i] = logits[c * n * n + i].exp() / z;
        }
    }
    let p0 = SimplexField::new(Grid2D::square(n)?, Tensor::from_vec(Shape::new(k, n, n), v))?;
    let mut params = PdeParams::constant(k, k - 1, 2).with_growth(rng.gen_range(0.3..1.5));
    params.diff = Tensor::from_fn(Shape::new(k, 1, 1), |_, _, _| rng.gen_range(0.05..0.5));
    params.cross = Tensor::from_fn(Shape::new(1, k, k), |_, i, j| if i == j { 0.0 } else { rng.gen_range(-0.15..0.15) });
    params.carrying_capacity = Tensor::scalar(rng.gen_range(0.6..0.95));
    params.kill_rates = Tensor::from_vec(Shape::new(2, 1, 1), vec![rng.gen_range(0.0..0.4), rng.gen_range(0.0..0.4)]);
    let ctx = TreatmentContext::new(vec![rng.gen(), rng.gen()])?;
    let model = Model {
        params: params.clone(),
        residual: Some(ResidualNet::init(seed, k, 2, 4)?),
    };
    let set = model.to_param_set(Trainable::default(), true)?;
    let w = Tensor::from_fn(p0.values().shape(), |_, _, _| rng.gen_range(-1.0..1.0));
    let cfg = SolverConfig {
        dt: 0.1,
        horizon: 0.3,
        ..SolverConfig::default()
    };
    let sched = InterventionSchedule::empty();
    let run = GradientRollout {
        template: &params,
        ctx: &ctx,
        schedule: &sched,
        cfg: &cfg,
    };
    // leaf first, then entry, so small leaves are sampled as often as weights
    let leaves: Vec<_> = set.leaves().iter().filter(|l| l.trainable).collect();
    let mut entries = Vec::new();
    while entries.len() < GRAD_LEAVES / GRAD_CONFIGS {
        let l = leaves[rng.gen_range(0..leaves.len())];
        let i = rng.gen_range(0..l.value.len());
        let w = l.value.shape().width;
        if l.name == "chi" && i / w == i % w {
            continue;
        }
        entries.push((l.name.clone(), i));
    }
    check_leaves(&run, &p0, &set, &w, &entries, 1e-6)
}

fn gradients() -> Result<Outcome> {
    let mut checks = Vec::new();
    for s in 0..GRAD_CONFIGS as u64 {
        checks.extend(gradient_case(100 + s)?);
    }
    let failed: Vec<&LeafCheck> = checks.iter().filter(|c| !c.passes(GRAD_TOL)).collect();
    let unexplained = failed.iter().filter(|c| !c.active_set_changed).count();
    let rate = 1.0 - failed.len() as f64 / checks.len() as f64;
    let worst = checks.iter().filter(|c| c.passes(GRAD_TOL)).map(|c| c.rel_err).fold(0.0, f64::max);
    Ok(Outcome::new(
        checks.len() >= GRAD_LEAVES && rate >= GRAD_PASS_RATE && unexplained == 0,
        format!(
            "{} leaves, pass rate {:.3}, {} failures ({} unexplained), worst passing rel err {worst:.1e}",
            checks.len(),
            rate,
            failed.len(),
            unexplained
        ),
    ))
}

fn conservation() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p0 = random_field(&mut rng, 64, 3);
    let cfg = SolverConfig {
        dt: 0.1,
        horizon: 10.0,
        ..SolverConfig::default()
    };
    let mut worst = 0.0f64;
    for d in [[0.5, 0.5, 0.5], [0.2, 0.5, 1.0]] {
        let mut params = PdeParams::constant(3, 2, 0);
        params.diff = Tensor::from_vec(Shape::new(3, 1, 1), d.to_vec());
        let t = rollout(&p0, &params, &TreatmentContext::none(0), &InterventionSchedule::empty(), &cfg, None)?;
        for k in 0..3 {
            let m0 = class_mass(&p0, k);
            worst = worst.max((class_mass(t.final_state(), k) - m0).abs() / m0);
        }
    }
    Ok(Outcome::new(
        cfg.n_steps() == 100 && worst < DRIFT_TOL,
        format!("{} steps on 64², max relative drift {worst:.2e}", cfg.n_steps()),
    ))
}

/// Zhang-Suen thinning of a zero-padded binary image.
fn thinning(bits: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut img = bits.to_vec();
    let at = |img: &[bool], y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && img[y as usize * w + x as usize];
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut kill = Vec::new();
            for y in 0..h as isize {
                for x in 0..w as isize {
                    if !at(&img, y, x) {
                        continue;
                    }
                    let n = [
                        at(&img, y - 1, x),
                        at(&img, y - 1, x + 1),
                        at(&img, y, x + 1),
                        at(&img, y + 1, x + 1),
                        at(&img, y + 1, x),
                        at(&img, y + 1, x - 1),
                        at(&img, y, x - 1),
                        at(&img, y - 1, x - 1),
                    ];
                    let b = n.iter().filter(|&&v| v).count();
                    let a = (0..8).filter(|&i| !n[i] && n[(i + 1) % 8]).count();
                    let cond = if pass == 0 {
                        !(n[0] && n[2] && n[4]) && !(n[2] && n[4] && n[6])
                    } else {
                        !(n[0] && n[2] && n[6]) && !(n[0] && n[4] && n[6])
                    };
                    if (2..=6).contains(&b) && a == 1 && cond {
                        kill.push(y as usize * w + x as usize);
                    }
                }
            }
            changed |= !kill.is_empty();
            for i in kill {
                img[i] = false;
            }
        }
        if !changed {
            return img;
        }
    }
}

fn one_hot_contract() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let g = Grid2D::square(8)?;
    let mut ok = true;
    let mut smallest_soft = f64::INFINITY;
    for k in 2..6 {
        let labels: Vec<usize> = (0..64).map(|_| rng.gen_range(0..k)).collect();
        let hard = SimplexField::one_hot(g, k, &labels)?;
        ok &= overlap_loss(&hard)?.abs() <= ONE_HOT_TOL;
        let mut v = hard.values().clone();
        let i = rng.gen_range(0..64);
        let a = rng.gen_range(1e-3..0.5);
        let (from, to) = (labels[i], (labels[i] + 1) % k);
        v.data_mut()[from * 64 + i] = 1.0 - a;
        v.data_mut()[to * 64 + i] = a;
        let soft = overlap_loss(&SimplexField::new(g, v)?)?;
        smallest_soft = smallest_soft.min(soft);
    }
    ok &= smallest_soft > ONE_HOT_TOL;
    Ok((ok, format!("one-hot overlap 0, smallest soft overlap {smallest_soft:.1e}")))
}

fn atl_descent() -> Result<(bool, String)> {
    let (n, k) = (16, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let init = Tensor::from_fn(Shape::new(k, n, n), |_, _, _| 1.0 / 3.0 + 1e-3 * rng.gen_range(-1.0..1.0));
    let mut set = ParamSet::new();
    set.register("field", init, LeafSpec::default())?;
    // no target is given, so no class carries a centreline term
    let masks: Vec<ClassMask> = (0..k).map(|_| ClassMask::empty(n, n)).collect();
    let w = AtlWeights::default();
    let skel = SkeletonConfig::default();
    let adam = AdamConfig {
        lr_physics: 1e-2,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(&set);
    let mut reached = None;
    let mut last = f64::NAN;
    for step in 0..=ATL_STEPS {
        let mut tape = Tape::new();
        let x = tape.param(&set, "field")?;
        let p = tape.simplex(x);
        let p_val = SimplexField::new(Grid2D::square(n)?, tape.value(p).clone())?;
        last = overlap_loss(&p_val)?;
        if last < ATL_TARGET {
            reached = Some(step);
            break;
        }
        let l = atl_on_tape(&mut tape, p, &masks, &w, &skel)?;
        set.zero_grads();
        tape.backward(l)?.accumulate_into(&tape, &mut set);
        optimizer_step(&mut set, &mut state, &adam);
    }
    Ok(match reached {
        Some(s) => (true, format!("ATL descent reaches overlap {last:.1e} after {s} steps")),
        None => (false, format!("ATL descent stuck at overlap {last:.1e} after {ATL_STEPS} steps")),
    })
}

fn bar_skeleton() -> (bool, String) {
    let (h, w) = (11, 30);
    let (rows, cols) = (4..7, 5..25);
    let bar = ClassMask::from_fn(h, w, |y, x| rows.contains(&y) && cols.contains(&x));
    let soft = soft_skeleton(bar.to_plane().data(), h, w, &SkeletonConfig::default());
    let thin = thinning(bar.bits(), h, w);
    let mut mismatches = 0;
    for y in 0..h {
        // two columns at each end are exempt: endpoint rules differ
        for x in cols.start + 2..cols.end - 2 {
            let i = y * w + x;
            mismatches += usize::from(soft[i] != if thin[i] { 1.0 } else { 0.0 });
        }
    }
    (mismatches == 0, format!("bar skeleton mismatches on interior: {mismatches}"))
}

fn topology() -> Result<Outcome> {
    let parts = [one_hot_contract()?, atl_descent()?, bar_skeleton()];
    Ok(Outcome::new(
        parts.iter().all(|p| p.0),
        parts.iter().map(|p| p.1.as_str()).collect::<Vec<_>>().join("; "),
    ))
}

fn metric_goldens() -> Result<Outcome> {
    let a = ClassMask::from_fn(8, 8, |y, x| (2..4).contains(&y) && (2..6).contains(&x));
    let b = ClassMask::from_fn(8, 8, |y, x| (2..4).contains(&y) && (2..4).contains(&x));
    let half = dsc(&a, &b)?;
    let p = ClassMask::from_fn(16, 16, |y, x| (y, x) == (2, 2));
    let q = ClassMask::from_fn(16, 16, |y, x| (y, x) == (5, 6));
    let offset = hd95(&p, &q, 1.0)?;
    let disk = ClassMask::from_fn(24, 24, |y, x| (y as isize - 12).pow(2) + (x as isize - 12).pow(2) <= 36);
    let (sd, sh, sc) = (dsc(&disk, &disk)?, hd95(&disk, &disk, 1.0)?, cldice_metric(&disk, &disk, &SkeletonConfig::default())?);
    Ok(Outcome::new(
        half == 2.0 / 3.0 && offset == Some(5.0) && sd == 1.0 && sh == Some(0.0) && sc >= 0.98,
        format!("dsc {half}, hd95 {offset:?}, self: dsc {sd} hd95 {sh:?} clDice {sc:.4}"),
    ))
}

struct Study {
    runner: Runner,
    source: Source,
    exp: ExperimentConfig,
}

impl Study {
    fn new() -> Result<Study> {
        let source = Source::generate(Benchmark::Voronoi(VoronoiConfig::default()), 0, PAIRS)?;
        Ok(Study {
            runner: Runner::new(),
            source,
            exp: ExperimentConfig::default(),
        })
    }
}

fn mean(s: &adt_core::metrics::Stat) -> f64 {
    s.mean.unwrap_or(f64::NAN)
}

fn sensitivity(study: &Study) -> Result<Outcome> {
    let dt = sensitivity_sweep(&study.runner, &study.source, SweepAxis::Dt, &[0.1, 0.3], &study.exp)?;
    let km = sensitivity_sweep(&study.runner, &study.source, SweepAxis::KMax, &[2.0, 10.0], &study.exp)?;
    let (d1, d3) = (mean(&dt.rows[0].dsc), mean(&dt.rows[1].dsc));
    let (k2, k10) = (mean(&km.rows[0].dsc), mean(&km.rows[1].dsc));
    let dt_ok = d1 - d3 >= DT_MARGIN;
    let km_ok = k2 - k10 >= KMAX_MARGIN;
    Ok(Outcome::new(
        dt_ok && km_ok,
        format!(
            "DSC dt 0.1 {d1:.4} vs 0.3 {d3:.4} (margin {:+.4}, {}); k_max 2 {k2:.4} vs 10 {k10:.4} (margin {:+.4}, {})",
            d1 - d3,
            if dt_ok { "ok" } else { "short" },
            k2 - k10,
            if km_ok { "ok" } else { "short" }
        ),
    ))
}

fn ablation(study: &Study) -> Result<Outcome> {
    let t = ablation_run(&study.runner, &study.source, &study.exp.train, &study.exp.solver)?;
    let get = |name: &str| t.row(name).expect("ablation row");
    let (full, spatial, none) = (get("full"), get("spatial_only"), get("no_spatial"));
    let (f, s, n) = (mean(&full.dsc), mean(&spatial.dsc), mean(&none.dsc));
    let hd = mean(&full.hd95);
    let checks = [
        f - s >= FULL_OVER_SPATIAL,
        s - n >= SPATIAL_OVER_NONE,
        f >= FULL_DSC_MIN,
        hd <= FULL_HD95_MAX,
    ];
    Ok(Outcome::new(
        checks.iter().all(|&c| c),
        format!(
            "DSC full {f:.4} spatial-only {s:.4} no-spatial {n:.4} (margins {:+.4} / {:+.4}); spatial+topology {:.4}; full HD95 {hd:.3}",
            f - s,
            s - n,
            mean(&get("spatial_topology").dsc)
        ),
    ))
}

fn determinism() -> Result<Outcome> {
    let b = Benchmark::Voronoi(VoronoiConfig {
        size: 16,
        ..VoronoiConfig::default()
    });
    let gen = |threads| -> Result<_> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("thread pool");
        pool.install(|| {
            let src = Source::generate(b.clone(), 3, 10)?;
            let cfg = TrainConfig {
                epochs: 2,
                folds: 2,
                ..TrainConfig::default()
            };
            let solver = SolverConfig::default();
            let out = train(src.data(), &cfg, &solver)?;
            let model = out.fits[0].model()?;
            let all: Vec<usize> = (0..src.pairs.len()).collect();
            let report = evaluate(&model, src.data(), &all, &solver, &cfg.skeleton)?;
            let bits: Vec<u64> = src
                .pairs
                .iter()
                .flat_map(|p| p.baseline.values().data().iter().chain(p.target.values().data()).map(|v| v.to_bits()).collect::<Vec<_>>())
                .collect();
            let params: Vec<u64> = out
                .fits
                .iter()
                .flat_map(|f| f.params.leaves().iter().flat_map(|l| l.value.data().iter().map(|v| v.to_bits())).collect::<Vec<_>>())
                .collect();
            let folds = serde_json::to_string(&out.result.folds.iter().map(|f| (&f.history, &f.report)).collect::<Vec<_>>())?;
            Ok((bits, params, folds, report.to_csv()))
        })
    };
    let (a, b2) = (gen(1)?, gen(3)?);
    let same_data = a.0 == b2.0;
    let same_fit = a.1 == b2.1 && a.2 == b2.2;
    let same_eval = a.3 == b2.3;

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = quantize(&Tensor::from_fn(Shape::new(4, 13, 17), |_, _, _| rng.gen::<f64>()));
    let dir = tempfile::tempdir().map_err(|e| adt_core::error::Error::io(std::path::Path::new("tmp"), e))?;
    let path = dir.path().join("x.adtf");
    write_tensor(&path, &x, 0.5)?;
    let (y, h) = read_tensor(&path)?;
    let (z, _) = decode(&encode(&x, 0.5), &path)?;
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let round_trip = bits(&x) == bits(&y) && bits(&x) == bits(&z) && h == 0.5;
    Ok(Outcome::new(
        same_data && same_fit && same_eval && round_trip,
        format!("generation {same_data}, training {same_fit}, evaluation {same_eval} (1 vs 3 threads); ADTF round trip {round_trip}"),
    ))
}

fn main() -> ExitCode {
    let only: Option<Vec<usize>> = std::env::var("ADT_ACCEPT")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |i: usize| only.as_ref().is_none_or(|v| v.contains(&i));
    let mut study: Option<Study> = None;
    let mut failures = 0;

    let plain: [(usize, &str, u64, fn() -> Result<Outcome>); 7] = [
        (1, "simplex feasibility", 120, simplex_feasibility),
        (2, "IMEX stability", 60, stability),
        (3, "Jacobi vs dense solve", 30, jacobi_vs_dense),
        (4, "gradient check", 300, gradients),
        (5, "mass conservation", 30, conservation),
        (6, "topology loss contracts", 120, topology),
        (7, "metric golden values", 5, metric_goldens),
    ];
    let mut run = |i: usize, name: &str, budget: u64, f: &mut dyn FnMut() -> Result<Outcome>| {
        let t0 = Instant::now();
        let r = f();
        let took = t0.elapsed();
        let in_time = took <= Duration::from_secs(budget);
        let (pass, detail) = match r {
            Ok(o) => (o.pass && in_time, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failures += 1;
        }
        println!(
            "[{}] {i:>2} {name}: {detail} ({:.1}s of {budget}s)",
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64()
        );
    };
    for (i, name, budget, f) in plain {
        if wanted(i) {
            run(i, name, budget, &mut || f());
        }
    }
    for (i, name, budget) in [(8, "sensitivity orderings", 1800), (9, "ablation ordering", 2700)] {
        if !wanted(i) {
            continue;
        }
        run(i, name, budget, &mut || {
            if study.is_none() {
                study = Some(Study::new()?);
            }
            let s = study.as_ref().expect("study");
            if i == 8 {
                sensitivity(s)
            } else {
                ablation(s)
            }
        });
    }
    if wanted(10) {
        run(10, "determinism and round trips", 300, &mut determinism);
    }
    println!("{failures} criteria failed");
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
