//! Central-difference checks of rollout gradients.
//!
//! The loss is `⟨w, p(T)⟩` for a fixed weight field `w`. A mismatch is
//! explained when the ±ε rollouts take different branches of a piecewise
//! operator: a different zero pattern after some projection, or the growth
//! rate or carrying capacity crossing its clamp.

use crate::autodiff::{ParamSet, Tape};
use crate::error::{Error, Result};
use crate::field::SimplexField;
use crate::model::{Model, ALPHA, KAPPA, KAPPA_FLOOR};
use crate::solver::{rollout_with, GradientRollout};
use crate::tensor::Tensor;

/// Denominator floor of the relative error; near-zero gradients are
/// compared on an absolute scale below it.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct LeafCheck {
    pub leaf: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    /// The ±ε rollouts differ in some projection zero pattern or clamp.
    pub active_set_changed: bool,
}

impl LeafCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_err < tol
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn loss_of(p: &SimplexField, w: &Tensor) -> f64 {
    p.values().data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

/// Loss under `set` together with the projection zero pattern of every
/// state and the clamp flags. The untracked rollout is bitwise identical to
/// the tracked one.
fn probe(run: &GradientRollout<'_>, p0: &SimplexField, set: &ParamSet, w: &Tensor) -> Result<(f64, Vec<bool>)> {
    let model = Model::from_param_set(set, run.template)?;
    let mut pattern = Vec::new();
    let traj = rollout_with(p0, &model.params, run.ctx, run.schedule, run.cfg, model.residual.as_ref(), |_, s| {
        pattern.extend(s.values().data().iter().map(|&v| v == 0.0));
    })?;
    let k_max = run.template.growth_clamp;
    if let Some(a) = set.value(ALPHA) {
        pattern.extend(a.data().iter().map(|&v| v <= 0.0 || v >= k_max));
    }
    if let Some(k) = set.value(KAPPA) {
        pattern.extend(k.data().iter().map(|&v| v <= KAPPA_FLOOR));
    }
    Ok((loss_of(traj.final_state(), w), pattern))
}

/// Checks `(leaf name, flat index)` entries of `set` against central
/// differences with step `eps · max(1, |θ|)`.
pub fn check_leaves(
    run: &GradientRollout<'_>,
    p0: &SimplexField,
    set: &ParamSet,
    w: &Tensor,
    entries: &[(String, usize)],
    eps: f64,
) -> Result<Vec<LeafCheck>> {
    if w.shape() != p0.values().shape() {
        return Err(Error::ShapeMismatch(format!("weights {} vs field {}", w.shape(), p0.values().shape())));
    }
    let mut work = set.clone();
    work.zero_grads();
    run.loss_and_grad(p0, &mut work, |tape: &mut Tape, p| {
        let wv = tape.constant(w.clone());
        Ok(tape.dot(p, wv))
    })?;
    let mut out = Vec::with_capacity(entries.len());
    for (name, index) in entries {
        let value = set
            .value(name)
            .ok_or_else(|| Error::InvalidParams(format!("no leaf `{name}`")))?;
        if *index >= value.len() {
            return Err(Error::InvalidParams(format!("`{name}` has no entry {index}")));
        }
        let analytic = work.grad(name).map_or(0.0, |g| g.data()[*index]);
        let theta = value.data()[*index];
        let h = eps * theta.abs().max(1.0);
        let shifted = |delta: f64| {
            let mut s = set.clone();
            let mut v = value.clone();
            v.data_mut()[*index] = theta + delta;
            s.set_value(name, v)?;
            probe(run, p0, &s, w)
        };
        let (lp, sp) = shifted(h)?;
        let (lm, sm) = shifted(-h)?;
        let numeric = (lp - lm) / (2.0 * h);
        out.push(LeafCheck {
            leaf: name.clone(),
            index: *index,
            analytic,
            numeric,
            rel_err: rel_err(analytic, numeric),
            active_set_changed: sp != sm,
        });
    }
    Ok(out)
}
