//! Implicit–explicit time stepping.
//!
//! One step from `p^n`:
//! 1. `rhs_k = p_k + Δt [cross_k(p) + reaction_k(p) + residual_k(p)]`
//! 2. `p̃_k` = `m` weighted-Jacobi sweeps on `(I − Δt ∇·(D_k ∇·)) u = rhs_k`,
//!    shifted uniformly so that its mass equals that of `rhs_k`
//! 3. events with `t_e ∈ (t, t + Δt]`
//! 4. per-pixel projection onto the simplex.
//!
//! The untracked API records each step on a throwaway tape of constants, so
//! its values are exactly those seen by the gradient path.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adtf;
use crate::autodiff::{ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::field::{Grid2D, SimplexField};
use crate::model::StepGraph;
use crate::operators::{InterventionEvent, InterventionSchedule, PdeParams, TreatmentContext};
use crate::provenance;
use crate::residual::{self, ResidualNet};
use crate::tensor::Tensor;

/// Rollouts longer than this recompute activations from checkpoints.
pub const FULL_RETENTION_STEPS: usize = 50;
/// Checkpoint spacing (in steps) for long rollouts.
pub const CHECKPOINT_STRIDE: usize = 5;
/// Largest grid (in pixels) that snapshots every step by default.
pub const DENSE_SNAPSHOT_PIXELS: usize = 64 * 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub dt: f64,
    pub horizon: f64,
    pub jacobi_iters: usize,
    pub relaxation: f64,
    /// Snapshot every this many steps; grid-dependent default when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snapshot_stride: Option<usize>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            dt: 0.1,
            horizon: 1.0,
            jacobi_iters: 2,
            relaxation: 0.9,
            snapshot_stride: None,
        }
    }
}

impl SolverConfig {
    pub fn n_steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt = {} must be positive", self.dt));
        }
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return bad(format!("horizon = {} must be finite and ≥ 0", self.horizon));
        }
        if !(1..=64).contains(&self.jacobi_iters) {
            return bad(format!("jacobi_iters = {} outside 1..=64", self.jacobi_iters));
        }
        if !(self.relaxation > 0.0 && self.relaxation <= 1.0) {
            return bad(format!("relaxation = {} outside (0, 1]", self.relaxation));
        }
        if self.snapshot_stride == Some(0) {
            return bad("snapshot_stride must be ≥ 1".into());
        }
        Ok(())
    }

    pub fn stride_for(&self, grid: Grid2D) -> usize {
        self.snapshot_stride.unwrap_or(if grid.pixels() <= DENSE_SNAPSHOT_PIXELS {
            1
        } else {
            5
        })
    }

    /// Start time of step `n`.
    pub fn time_of(&self, n: usize) -> f64 {
        n as f64 * self.dt
    }
}

/// `m` weighted-Jacobi sweeps on `(I − Δt ∇·(D∇·)) u = rhs`, starting at `rhs`.
pub fn helmholtz_solve_jacobi(
    rhs: &[f64],
    d: &Tensor,
    dt: f64,
    iters: usize,
    omega: f64,
    grid: Grid2D,
) -> Result<Vec<f64>> {
    if !(dt > 0.0) || iters == 0 {
        return Err(Error::InvalidConfig(format!("dt = {dt}, m = {iters}")));
    }
    if rhs.len() != grid.pixels() || (d.len() != 1 && d.len() != grid.pixels()) {
        return Err(Error::ShapeMismatch("rhs or diffusivity does not match grid".into()));
    }
    let mut tape = Tape::new();
    let r = tape.constant(Tensor::from_vec(grid.plane_shape(), rhs.to_vec()));
    let dv = tape.constant(if d.len() == 1 {
        Tensor::scalar(d.data()[0])
    } else {
        Tensor::from_vec(grid.plane_shape(), d.data().to_vec())
    });
    let mut u = r;
    for _ in 0..iters {
        u = tape.jacobi(u, r, dv, dt, omega, grid.spacing);
    }
    Ok(tape.value(u).data().to_vec())
}

fn ensure_finite(tape: &Tape, v: Var, step: usize, stage: &'static str) -> Result<()> {
    if tape.value(v).all_finite() {
        Ok(())
    } else {
        Err(Error::Unstable { step, stage })
    }
}

/// Records one step on `tape`. `step` only labels stability errors.
pub fn step_on_tape(
    tape: &mut Tape,
    graph: &StepGraph,
    p: Var,
    events: &[&InterventionEvent],
    cfg: &SolverConfig,
    step: usize,
) -> Result<Var> {
    let k = graph.classes;
    let shape = tape.shape(p);
    let planes: Vec<Var> = (0..k).map(|c| tape.plane(p, c)).collect();

    let mut explicit: Vec<Option<Var>> = vec![None; k];
    for c in 0..k {
        let mut acc: Option<Var> = None;
        for j in 0..k {
            if let Some(chi) = graph.chi[c * k + j] {
                let f = tape.cross_flux(planes[c], planes[j], chi, graph.spacing);
                acc = Some(match acc {
                    Some(a) => tape.add(a, f),
                    None => f,
                });
            }
        }
        if c == graph.tumor {
            let pt = planes[c];
            let growth = tape.mul(graph.alpha, pt);
            let ratio = tape.div(pt, graph.kappa);
            let neg = tape.neg(ratio);
            let room = tape.offset(neg, 1.0);
            let mut r = tape.mul(growth, room);
            if let Some(kill) = graph.kill {
                let killed = tape.mul(kill, pt);
                r = tape.sub(r, killed);
            }
            acc = Some(match acc {
                Some(a) => tape.add(a, r),
                None => r,
            });
        }
        explicit[c] = acc;
    }

    let mut rhs = p;
    if explicit.iter().any(Option::is_some) || graph.residual.is_some() {
        let zero = tape.constant(Tensor::zeros(crate::tensor::Shape::plane(shape.height, shape.width)));
        let parts: Vec<Var> = explicit.iter().map(|e| e.unwrap_or(zero)).collect();
        let mut e = tape.stack(&parts);
        if let Some(vars) = &graph.residual {
            let r = residual::residual_on_tape(tape, p, graph.ctx_planes, vars);
            e = tape.add(e, r);
        }
        let scaled = tape.scale(e, cfg.dt);
        rhs = tape.add(p, scaled);
    }
    ensure_finite(tape, rhs, step, "explicit")?;

    let mut state = rhs;
    if graph.diff.iter().any(Option::is_some) {
        let mut solved = Vec::with_capacity(k);
        for c in 0..k {
            let r = tape.plane(rhs, c);
            let mut u = r;
            if let Some(d) = graph.diff[c] {
                for _ in 0..cfg.jacobi_iters {
                    u = tape.jacobi(u, r, d, cfg.dt, cfg.relaxation, graph.spacing);
                }
                // A truncated solve leaks mass; the uniform shift is the
                // smallest L2 correction back onto the rhs mass.
                let (before, after) = (tape.sum(r), tape.sum(u));
                let gap = tape.sub(before, after);
                let shift = tape.scale(gap, 1.0 / (shape.height * shape.width) as f64);
                u = tape.add(u, shift);
            }
            solved.push(u);
        }
        state = tape.stack(&solved);
        ensure_finite(tape, state, step, "implicit")?;
    }

    for ev in events {
        let region = ev.region.as_ref().map(|m| m.bits().to_vec());
        state = tape.intervene(state, region, ev.target_class, ev.fraction());
    }
    ensure_finite(tape, state, step, "intervention")?;

    let out = tape.simplex(state);
    ensure_finite(tape, out, step, "projection")?;
    Ok(out)
}

fn step_events<'a>(schedule: &'a InterventionSchedule, cfg: &SolverConfig, n: usize) -> Vec<(usize, &'a InterventionEvent)> {
    schedule
        .in_interval(cfg.time_of(n), cfg.time_of(n + 1))
        .collect()
}

fn check_inputs(
    p: &SimplexField,
    params: &PdeParams,
    schedule: &InterventionSchedule,
    cfg: &SolverConfig,
    residual: Option<&ResidualNet>,
    ctx: &TreatmentContext,
) -> Result<()> {
    cfg.validate()?;
    if params.num_classes() != p.num_classes() {
        return Err(Error::ShapeMismatch(format!(
            "parameters for {} classes, field has {}",
            params.num_classes(),
            p.num_classes()
        )));
    }
    schedule.validate_for(p.grid(), p.num_classes())?;
    if let Some(net) = residual {
        if net.classes() != p.num_classes() || net.channels() != ctx.channels.len() {
            return Err(Error::ShapeMismatch("residual network does not match field or context".into()));
        }
    }
    Ok(())
}

/// Advances `p` from time `t` by one step.
pub fn imex_step(
    p: &SimplexField,
    params: &PdeParams,
    ctx: &TreatmentContext,
    schedule: &InterventionSchedule,
    cfg: &SolverConfig,
    residual: Option<&ResidualNet>,
    t: f64,
) -> Result<SimplexField> {
    check_inputs(p, params, schedule, cfg, residual, ctx)?;
    let mut tape = Tape::new();
    let graph = StepGraph::constants(&mut tape, params, residual, ctx, p.grid())?;
    let events: Vec<&InterventionEvent> = schedule.in_interval(t, t + cfg.dt).map(|(_, e)| e).collect();
    let x = tape.constant(p.values().clone());
    let out = step_on_tape(&mut tape, &graph, x, &events, cfg, 0)?;
    Ok(SimplexField::from_projected(p.grid(), tape.value(out).clone()))
}

/// An applied event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    /// Position in the schedule.
    pub index: usize,
    pub time: f64,
    /// Step in which the event fired.
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<SimplexField>,
    pub events: Vec<EventRecord>,
}

impl Trajectory {
    pub fn final_state(&self) -> &SimplexField {
        self.states.last().expect("trajectory holds the baseline")
    }
}

/// Runs `cfg.n_steps()` steps, snapshotting at the configured stride and
/// always at the end.
pub fn rollout(
    p0: &SimplexField,
    params: &PdeParams,
    ctx: &TreatmentContext,
    schedule: &InterventionSchedule,
    cfg: &SolverConfig,
    residual: Option<&ResidualNet>,
) -> Result<Trajectory> {
    rollout_with(p0, params, ctx, schedule, cfg, residual, |_, _| {})
}

/// [`rollout`] that also hands every intermediate state to `observe`
/// (step index after the update, state).
pub fn rollout_with(
    p0: &SimplexField,
    params: &PdeParams,
    ctx: &TreatmentContext,
    schedule: &InterventionSchedule,
    cfg: &SolverConfig,
    residual: Option<&ResidualNet>,
    mut observe: impl FnMut(usize, &SimplexField),
) -> Result<Trajectory> {
    check_inputs(p0, params, schedule, cfg, residual, ctx)?;
    let grid = p0.grid();
    let n = cfg.n_steps();
    let stride = cfg.stride_for(grid);
    let mut traj = Trajectory {
        times: vec![0.0],
        states: vec![p0.clone()],
        events: Vec::new(),
    };
    let mut current = p0.values().clone();
    for step in 0..n {
        let evs = step_events(schedule, cfg, step);
        let mut tape = Tape::new();
        let graph = StepGraph::constants(&mut tape, params, residual, ctx, grid)?;
        let x = tape.constant(current);
        let refs: Vec<&InterventionEvent> = evs.iter().map(|(_, e)| *e).collect();
        let out = step_on_tape(&mut tape, &graph, x, &refs, cfg, step)?;
        traj.events.extend(evs.iter().map(|(i, e)| EventRecord {
            index: *i,
            time: e.time,
            step,
        }));
        current = tape.value(out).clone();
        let done = step + 1;
        let field = SimplexField::from_projected(grid, current.clone());
        observe(done, &field);
        if done % stride == 0 || done == n {
            traj.times.push(cfg.time_of(done));
            traj.states.push(field);
        }
    }
    Ok(traj)
}

#[derive(Serialize, Deserialize)]
struct TrajectoryManifest {
    version: u64,
    times: Vec<f64>,
    states: Vec<String>,
    events: Vec<EventRecord>,
    config: SolverConfig,
    config_hash: String,
}

impl Trajectory {
    /// Writes `manifest.json` and `state_{i:04}.adtf` files into `dir`.
    pub fn save(&self, dir: &Path, cfg: &SolverConfig) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut names = Vec::with_capacity(self.states.len());
        for (i, s) in self.states.iter().enumerate() {
            let name = format!("state_{i:04}.adtf");
            adtf::write_field(&dir.join(&name), s)?;
            names.push(name);
        }
        let manifest = TrajectoryManifest {
            version: 1,
            times: self.times.clone(),
            states: names,
            events: self.events.clone(),
            config: cfg.clone(),
            config_hash: provenance::config_hash(cfg)?,
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    /// Reads a trajectory directory. States come back at `f32` precision.
    pub fn load(dir: &Path) -> Result<(Self, SolverConfig)> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: TrajectoryManifest = serde_json::from_str(&text)?;
        if m.version != 1 {
            return Err(Error::Version {
                path,
                found: m.version,
            });
        }
        let states = m
            .states
            .iter()
            .map(|n| adtf::read_field(&dir.join(n)))
            .collect::<Result<Vec<_>>>()?;
        Ok((
            Trajectory {
                times: m.times,
                states,
                events: m.events,
            },
            m.config,
        ))
    }
}

/// Differentiable rollout from a fixed baseline.
pub struct GradientRollout<'a> {
    pub template: &'a PdeParams,
    pub ctx: &'a TreatmentContext,
    pub schedule: &'a InterventionSchedule,
    pub cfg: &'a SolverConfig,
}

impl GradientRollout<'_> {
    fn run_segment(
        &self,
        tape: &mut Tape,
        set: &ParamSet,
        start: Var,
        grid: Grid2D,
        steps: std::ops::Range<usize>,
    ) -> Result<Var> {
        let graph = StepGraph::tracked(tape, set, self.template, self.ctx, grid)?;
        let mut p = start;
        for step in steps {
            let evs: Vec<&InterventionEvent> = step_events(self.schedule, self.cfg, step)
                .into_iter()
                .map(|(_, e)| e)
                .collect();
            p = step_on_tape(tape, &graph, p, &evs, self.cfg, step)?;
        }
        Ok(p)
    }

    /// Final state of the rollout driven by the current values in `set`.
    pub fn forward(&self, p0: &SimplexField, set: &ParamSet) -> Result<SimplexField> {
        let mut tape = Tape::new();
        let x = tape.constant(p0.values().clone());
        let out = self.run_segment(&mut tape, set, x, p0.grid(), 0..self.cfg.n_steps())?;
        Ok(SimplexField::from_projected(p0.grid(), tape.value(out).clone()))
    }

    /// Evaluates `loss(final state)` and adds its parameter gradients into
    /// `set`. Rollouts up to [`FULL_RETENTION_STEPS`] keep one tape; longer
    /// ones store a state every [`CHECKPOINT_STRIDE`] steps and recompute
    /// each segment during the reverse sweep.
    pub fn loss_and_grad(
        &self,
        p0: &SimplexField,
        set: &mut ParamSet,
        loss: impl Fn(&mut Tape, Var) -> Result<Var>,
    ) -> Result<(f64, SimplexField)> {
        self.cfg.validate()?;
        let grid = p0.grid();
        let n = self.cfg.n_steps();
        if n <= FULL_RETENTION_STEPS {
            let mut tape = Tape::new();
            let x = tape.constant(p0.values().clone());
            let out = self.run_segment(&mut tape, set, x, grid, 0..n)?;
            let l = loss(&mut tape, out)?;
            let value = tape.value(l).item();
            let final_state = SimplexField::from_projected(grid, tape.value(out).clone());
            tape.backward(l)?.accumulate_into(&tape, set);
            return Ok((value, final_state));
        }

        let bounds: Vec<usize> = (0..n).step_by(CHECKPOINT_STRIDE).chain([n]).collect();
        let mut checkpoints = vec![p0.values().clone()];
        for w in bounds.windows(2).take(bounds.len() - 2) {
            let mut tape = Tape::new();
            let x = tape.constant(checkpoints.last().unwrap().clone());
            let out = self.run_segment(&mut tape, set, x, grid, w[0]..w[1])?;
            checkpoints.push(tape.value(out).clone());
        }

        let mut seed;
        let value;
        let final_state;
        {
            let last = bounds.len() - 2;
            let mut tape = Tape::new();
            let x = tape.constant(checkpoints[last].clone());
            let out = self.run_segment(&mut tape, set, x, grid, bounds[last]..bounds[last + 1])?;
            let l = loss(&mut tape, out)?;
            value = tape.value(l).item();
            final_state = SimplexField::from_projected(grid, tape.value(out).clone());
            let grads = tape.backward(l)?;
            grads.accumulate_into(&tape, set);
            seed = grads.wrt(&tape, x);
        }
        for seg in (0..bounds.len() - 2).rev() {
            let mut tape = Tape::new();
            let x = tape.constant(checkpoints[seg].clone());
            let out = self.run_segment(&mut tape, set, x, grid, bounds[seg]..bounds[seg + 1])?;
            let grads = tape.backward_seeded(out, seed);
            grads.accumulate_into(&tape, set);
            seed = grads.wrt(&tape, x);
        }
        Ok((value, final_state))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::field::project_field;
    use crate::model::{register_physics, Trainable};
    use crate::operators::EventKind;
    use crate::tensor::Shape;

    fn random_field(h: usize, w: usize, k: usize, seed: u64) -> SimplexField {
        let g = Grid2D::new(h, w, 1.0).unwrap();
        let mut s = seed.wrapping_add(0x9e3779b97f4a7c15);
        let raw = Tensor::from_fn(g.shape(k), |_, _, _| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64
        });
        project_field(g, &raw).unwrap()
    }

    #[test]
    fn jacobi_identity_cases() {
        let g = Grid2D::new(6, 5, 1.0).unwrap();
        let rhs: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).sin()).collect();
        for m in [1, 3, 10] {
            let out = helmholtz_solve_jacobi(&rhs, &Tensor::scalar(0.0), 0.1, m, 0.9, g).unwrap();
            for (a, b) in out.iter().zip(&rhs) {
                assert!((a - b).abs() <= 1e-15);
            }
            let c = vec![0.7; 30];
            let out = helmholtz_solve_jacobi(&c, &Tensor::scalar(0.4), 0.3, m, 0.8, g).unwrap();
            assert!(out.iter().all(|v| (v - 0.7).abs() <= 1e-15));
        }
    }

    #[test]
    fn zero_dynamics_is_identity() {
        let p = random_field(6, 6, 3, 1);
        let params = PdeParams::constant(3, 2, 0);
        let out = imex_step(
            &p,
            &params,
            &TreatmentContext::none(0),
            &InterventionSchedule::empty(),
            &SolverConfig::default(),
            None,
            0.0,
        )
        .unwrap();
        assert!(out.values().max_abs_diff(p.values()) <= 1e-12);
    }

    #[test]
    fn empty_rollout_keeps_baseline() {
        let p = random_field(4, 4, 2, 2);
        let cfg = SolverConfig {
            horizon: 0.0,
            ..SolverConfig::default()
        };
        let params = PdeParams::constant(2, 1, 0).with_diffusion(0.2);
        let traj = rollout(&p, &params, &TreatmentContext::none(0), &InterventionSchedule::empty(), &cfg, None).unwrap();
        assert_eq!(traj.states, vec![p]);
        assert_eq!(traj.times, vec![0.0]);
    }

    #[test]
    fn resection_fires_once_and_drops_tumour() {
        let p = random_field(8, 8, 3, 3);
        let params = PdeParams::constant(3, 2, 0).with_diffusion(0.05).with_growth(0.5);
        let sched = InterventionSchedule::new(vec![InterventionEvent {
            time: 0.5,
            kind: EventKind::Resection,
            region: None,
            magnitude: 1.0,
            target_class: 2,
        }])
        .unwrap();
        let mut masses = Vec::new();
        let traj = rollout_with(
            &p,
            &params,
            &TreatmentContext::none(0),
            &sched,
            &SolverConfig::default(),
            None,
            |_, s| masses.push(crate::field::class_mass(s, 2)),
        )
        .unwrap();
        assert_eq!(traj.events.len(), 1);
        assert_eq!(traj.events[0].step, 4);
        assert!(masses[3] > 1.0);
        assert!(masses[4] < 1e-9);
        assert_eq!(traj.states.len(), 11);
    }

    #[test]
    fn stability_error_names_stage() {
        let p = random_field(4, 4, 2, 4);
        let mut params = PdeParams::constant(2, 1, 0).with_growth(1.0);
        params.growth_clamp = 1.0;
        params.carrying_capacity = Tensor::scalar(1e-300_f64.max(f64::MIN_POSITIVE));
        // κ below the validity range is rejected before stepping
        assert!(imex_step(&p, &params, &TreatmentContext::none(0), &InterventionSchedule::empty(), &SolverConfig::default(), None, 0.0).is_err());
        let mut tape = Tape::new();
        let ok = PdeParams::constant(2, 1, 0);
        let graph = StepGraph::constants(&mut tape, &ok, None, &TreatmentContext::none(0), p.grid()).unwrap();
        let mut bad = p.values().clone();
        bad.data_mut()[0] = f64::NAN;
        let x = tape.constant(bad);
        match step_on_tape(&mut tape, &graph, x, &[], &SolverConfig::default(), 7) {
            Err(Error::Unstable { step: 7, stage }) => assert_eq!(stage, "explicit"),
            other => panic!("unexpected {:?}", other.map(|v| v.index())),
        }
    }

    #[test]
    fn tracked_and_untracked_values_agree_bitwise() {
        let p = random_field(8, 8, 3, 5);
        let mut params = PdeParams::constant(3, 2, 2).with_diffusion(0.2).with_cross(0.1).with_growth(0.7);
        params.kill_rates = Tensor::from_vec(Shape::new(2, 1, 1), vec![0.3, 0.1]);
        let ctx = TreatmentContext::new(vec![1.0, 0.5]).unwrap();
        let net = ResidualNet::init(3, 3, 2, 4).unwrap();
        let cfg = SolverConfig::default();
        let sched = InterventionSchedule::empty();
        let traj = rollout(&p, &params, &ctx, &sched, &cfg, Some(&net)).unwrap();
        let mut set = ParamSet::new();
        register_physics(&mut set, &params, Trainable::default()).unwrap();
        net.register(&mut set, true).unwrap();
        let gr = GradientRollout {
            template: &params,
            ctx: &ctx,
            schedule: &sched,
            cfg: &cfg,
        };
        let tracked = gr.forward(&p, &set).unwrap();
        assert_eq!(tracked.values(), traj.final_state().values());
    }

    #[test]
    fn step_node_count_is_stable() {
        // K = 3, tumour 2, all couplings active, one treatment channel, residual on
        let p = random_field(6, 6, 3, 6);
        let params = PdeParams::constant(3, 2, 1).with_diffusion(0.1).with_cross(0.1).with_growth(0.5);
        let ctx = TreatmentContext::new(vec![1.0]).unwrap();
        let net = ResidualNet::init(0, 3, 1, 4).unwrap();
        let mut tape = Tape::new();
        let graph = StepGraph::constants(&mut tape, &params, Some(&net), &ctx, p.grid()).unwrap();
        let x = tape.constant(p.values().clone());
        let before = tape.len();
        step_on_tape(&mut tape, &graph, x, &[], &SolverConfig::default(), 0).unwrap();
        assert_eq!(tape.len() - before, STEP_NODES_K3_RESIDUAL);
    }

    /// Nodes recorded by one step for the configuration in
    /// `step_node_count_is_stable`: 3 planes, 6 cross fluxes + 3 adds,
    /// 7 reaction nodes, zero plane + stack, 6 residual nodes, add + scale +
    /// add, 3 × (plane + 2 sweeps + 5 mass-fix nodes) + stack, projection.
    const STEP_NODES_K3_RESIDUAL: usize = 3 + 9 + 7 + 2 + 6 + 3 + 25 + 1;

    #[test]
    fn checkpointed_gradient_matches_full_retention() {
        let p = random_field(6, 6, 3, 8);
        let params = PdeParams::constant(3, 2, 0).with_diffusion(0.2).with_cross(0.05).with_growth(0.6);
        let ctx = TreatmentContext::none(0);
        let sched = InterventionSchedule::empty();
        let target = random_field(6, 6, 3, 9);
        let loss = |t: &mut Tape, out: Var| {
            let q = t.constant(target.values().clone());
            let d = t.sub(out, q);
            let sq = t.mul(d, d);
            Ok(t.sum(sq))
        };
        let grads = |steps: usize| {
            let cfg = SolverConfig {
                dt: 0.01,
                horizon: steps as f64 * 0.01,
                ..SolverConfig::default()
            };
            let mut set = ParamSet::new();
            register_physics(&mut set, &params, Trainable::default()).unwrap();
            let gr = GradientRollout {
                template: &params,
                ctx: &ctx,
                schedule: &sched,
                cfg: &cfg,
            };
            let (l, _) = gr.loss_and_grad(&p, &mut set, loss).unwrap();
            (l, set)
        };
        // 53 steps takes the checkpointed path; compare with a forced full tape
        let (l_ckpt, set_ckpt) = grads(53);
        let cfg = SolverConfig {
            dt: 0.01,
            horizon: 0.53,
            ..SolverConfig::default()
        };
        let mut set = ParamSet::new();
        register_physics(&mut set, &params, Trainable::default()).unwrap();
        let gr = GradientRollout {
            template: &params,
            ctx: &ctx,
            schedule: &sched,
            cfg: &cfg,
        };
        let mut tape = Tape::new();
        let x = tape.constant(p.values().clone());
        let out = gr.run_segment(&mut tape, &set, x, p.grid(), 0..53).unwrap();
        let l = loss(&mut tape, out).unwrap();
        tape.backward(l).unwrap().accumulate_into(&tape, &mut set);
        assert_eq!(tape.value(l).item(), l_ckpt);
        for name in ["diff", "chi", "alpha"] {
            let a = set.grad(name).unwrap();
            let b = set_ckpt.grad(name).unwrap();
            let scale = a.max_abs().max(1e-12);
            assert!(a.max_abs_diff(b) / scale < 1e-10, "{name}");
        }
    }

    #[test]
    fn trajectory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = random_field(5, 5, 2, 10);
        let params = PdeParams::constant(2, 1, 0).with_diffusion(0.3);
        let cfg = SolverConfig {
            horizon: 0.3,
            ..SolverConfig::default()
        };
        let traj = rollout(&p, &params, &TreatmentContext::none(0), &InterventionSchedule::empty(), &cfg, None).unwrap();
        traj.save(dir.path(), &cfg).unwrap();
        let (back, cfg2) = Trajectory::load(dir.path()).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(back.times, traj.times);
        for (a, b) in back.states.iter().zip(&traj.states) {
            assert!(a.values().max_abs_diff(b.values()) < 1e-7);
        }
    }
}
