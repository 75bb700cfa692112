use adt_core::autodiff::{Tape, Var};
use adt_core::error::{Error, Result};
use adt_core::field::{argmax_mask, ClassMask, SimplexField};
use adt_core::tensor::pairwise_dot;
use adt_core::topology::atl_on_tape;

use crate::config::TrainConfig;

pub const DICE_EPS: f64 = 1e-6;

/// `1 − (1/K) Σ_k (2⟨p_k, q_k⟩ + ε) / (⟨p_k, p_k⟩ + ⟨q_k, q_k⟩ + ε)`.
pub fn seg_loss_on_tape(tape: &mut Tape, p: Var, target: &SimplexField) -> Result<Var> {
    let s = tape.shape(p);
    let q = target.values();
    if s != q.shape() {
        return Err(Error::ShapeMismatch(format!("prediction {s} vs target {}", q.shape())));
    }
    let k = s.channels;
    let mut acc: Option<Var> = None;
    for c in 0..k {
        let qc = target.plane(c);
        let qq = pairwise_dot(qc, qc);
        let pc = tape.plane(p, c);
        let qv = tape.constant(q.plane_tensor(c));
        let pq = tape.dot(pc, qv);
        let num = tape.scale(pq, 2.0);
        let num = tape.offset(num, DICE_EPS);
        let pp = tape.dot(pc, pc);
        let den = tape.offset(pp, qq + DICE_EPS);
        let r = tape.div(num, den);
        acc = Some(match acc {
            Some(a) => tape.add(a, r),
            None => r,
        });
    }
    let mean = tape.scale(acc.expect("at least one class"), 1.0 / k as f64);
    let neg = tape.neg(mean);
    Ok(tape.offset(neg, 1.0))
}

pub fn seg_loss(pred: &SimplexField, target: &SimplexField) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.values().clone());
    let l = seg_loss_on_tape(&mut tape, p, target)?;
    Ok(tape.value(l).item())
}

/// Argmax masks of every class of `target`.
pub fn target_masks(target: &SimplexField) -> Vec<ClassMask> {
    (0..target.num_classes())
        .map(|k| argmax_mask(target, k).expect("class index in range"))
        .collect()
}

/// `seg + λ_topo·ATL + λ_tv·TV`. The `λ_reg‖θ‖²` term is applied by the
/// optimizer as weight decay and is not part of this value.
pub fn total_loss_on_tape(
    tape: &mut Tape,
    p: Var,
    target: &SimplexField,
    masks: &[ClassMask],
    cfg: &TrainConfig,
) -> Result<Var> {
    let mut loss = seg_loss_on_tape(tape, p, target)?;
    let topo = cfg.effective_lambda_topo();
    if topo > 0.0 {
        let atl = atl_on_tape(tape, p, masks, &cfg.atl, &cfg.skeleton)?;
        let atl = tape.scale(atl, topo);
        loss = tape.add(loss, atl);
    }
    if cfg.lambda_tv > 0.0 {
        let tv = tape.total_variation(p);
        let tv = tape.scale(tv, cfg.lambda_tv);
        loss = tape.add(loss, tv);
    }
    Ok(loss)
}

pub fn total_loss(pred: &SimplexField, target: &SimplexField, cfg: &TrainConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.values().clone());
    let l = total_loss_on_tape(&mut tape, p, target, &target_masks(target), cfg)?;
    Ok(tape.value(l).item())
}
