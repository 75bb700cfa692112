//! Soft skeletons, clDice and the pairwise overlap penalty.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::field::{ClassMask, SimplexField};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SkeletonConfig {
    pub iterations: usize,
    pub epsilon: f64,
}

impl Default for SkeletonConfig {
    fn default() -> Self {
        SkeletonConfig {
            iterations: 10,
            epsilon: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AtlWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub cl_classes: Vec<usize>,
}

impl Default for AtlWeights {
    fn default() -> Self {
        AtlWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            cl_classes: Vec::new(),
        }
    }
}

impl AtlWeights {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite() && self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return Err(Error::InvalidConfig("ATL weights must be finite and ≥ 0".into()));
        }
        if let Some(&k) = self.cl_classes.iter().find(|&&k| k >= classes) {
            return Err(Error::InvalidConfig(format!("centreline class {k} out of range")));
        }
        Ok(())
    }
}

fn soft_open(tape: &mut Tape, x: Var) -> Var {
    let e = tape.min_pool(x);
    tape.max_pool(e)
}

/// Iterative soft thinning of every plane of `x` (clamped to `[0, 1]`).
pub fn soft_skeleton_on_tape(tape: &mut Tape, x: Var, cfg: &SkeletonConfig) -> Var {
    let mut img = tape.clamp(x, 0.0, 1.0);
    let opened = soft_open(tape, img);
    let gap = tape.sub(img, opened);
    let mut skel = tape.relu(gap);
    for _ in 0..cfg.iterations {
        img = tape.min_pool(img);
        let opened = soft_open(tape, img);
        let gap = tape.sub(img, opened);
        let delta = tape.relu(gap);
        let claimed = tape.mul(skel, delta);
        let fresh = tape.sub(delta, claimed);
        let fresh = tape.relu(fresh);
        skel = tape.add(skel, fresh);
    }
    skel
}

/// Soft skeleton of one plane.
pub fn soft_skeleton(plane: &[f64], height: usize, width: usize, cfg: &SkeletonConfig) -> Vec<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_vec(Shape::plane(height, width), plane.to_vec()));
    let s = soft_skeleton_on_tape(&mut tape, x, cfg);
    tape.value(s).data().to_vec()
}

/// `1 − 2XY/(X + Y + ε)` from the two skeleton agreement ratios.
fn harmonic(tape: &mut Tape, x: Var, y: Var, eps: f64) -> Var {
    let xy = tape.mul(x, y);
    let num = tape.scale(xy, 2.0);
    let s = tape.add(x, y);
    let den = tape.offset(s, eps);
    let q = tape.div(num, den);
    let nq = tape.neg(q);
    tape.offset(nq, 1.0)
}

/// clDice loss of a soft plane `p` against a binary target; the target
/// skeleton is computed with the same soft operator.
pub fn cldice_on_tape(tape: &mut Tape, p: Var, q: &ClassMask, cfg: &SkeletonConfig) -> Var {
    let qt = q.to_plane();
    let sq = soft_skeleton(qt.data(), q.height(), q.width(), cfg);
    let sq_sum = crate::tensor::pairwise_sum(&sq);
    let sq_v = tape.constant(Tensor::from_vec(qt.shape(), sq));
    let qv = tape.constant(qt);
    let sp = soft_skeleton_on_tape(tape, p, cfg);
    let num_x = tape.dot(sp, qv);
    let sp_sum = tape.sum(sp);
    let den_x = tape.offset(sp_sum, cfg.epsilon);
    let x = tape.div(num_x, den_x);
    let num_y = tape.dot(sq_v, p);
    let y = tape.scale(num_y, 1.0 / (sq_sum + cfg.epsilon));
    harmonic(tape, x, y, cfg.epsilon)
}

pub fn cldice_loss(p: &[f64], q: &ClassMask, cfg: &SkeletonConfig) -> Result<f64> {
    if p.len() != q.bits().len() {
        return Err(Error::ShapeMismatch("prediction and mask differ in size".into()));
    }
    let mut tape = Tape::new();
    let pv = tape.constant(Tensor::from_vec(Shape::plane(q.height(), q.width()), p.to_vec()));
    let l = cldice_on_tape(&mut tape, pv, q, cfg);
    Ok(tape.value(l).item())
}

/// `2/(K(K−1)) Σ_{i<j} mean(p_i p_j)` over the `K` planes of `p`.
pub fn overlap_on_tape(tape: &mut Tape, p: Var) -> Result<Var> {
    let s = tape.shape(p);
    let k = s.channels;
    if k < 2 {
        return Err(Error::Domain(format!("overlap needs at least 2 classes, got {k}")));
    }
    let planes: Vec<Var> = (0..k).map(|c| tape.plane(p, c)).collect();
    let mut acc: Option<Var> = None;
    for i in 0..k {
        for j in i + 1..k {
            let d = tape.dot(planes[i], planes[j]);
            acc = Some(match acc {
                Some(a) => tape.add(a, d),
                None => d,
            });
        }
    }
    let coef = 2.0 / ((k * (k - 1)) as f64 * s.plane_len() as f64);
    Ok(tape.scale(acc.expect("k ≥ 2"), coef))
}

pub fn overlap_loss(p: &SimplexField) -> Result<f64> {
    let mut tape = Tape::new();
    let pv = tape.constant(p.values().clone());
    let l = overlap_on_tape(&mut tape, pv)?;
    Ok(tape.value(l).item())
}

/// `λ₁ Σ_{k ∈ cl} clDice(p_k, q_k) + λ₂ overlap(p)`; `masks[k]` is the
/// target of class `k`. Zero-weight terms are not recorded.
pub fn atl_on_tape(
    tape: &mut Tape,
    p: Var,
    masks: &[ClassMask],
    w: &AtlWeights,
    cfg: &SkeletonConfig,
) -> Result<Var> {
    let k = tape.shape(p).channels;
    w.validate(k)?;
    let mut acc = tape.scalar(0.0);
    if w.lambda1 > 0.0 {
        for &c in &w.cl_classes {
            let mask = masks
                .get(c)
                .ok_or_else(|| Error::InvalidConfig(format!("no target mask for class {c}")))?;
            let pc = tape.plane(p, c);
            let l = cldice_on_tape(tape, pc, mask, cfg);
            let l = tape.scale(l, w.lambda1);
            acc = tape.add(acc, l);
        }
    }
    if w.lambda2 > 0.0 {
        let o = overlap_on_tape(tape, p)?;
        let o = tape.scale(o, w.lambda2);
        acc = tape.add(acc, o);
    }
    Ok(acc)
}

pub fn atl_loss(p: &SimplexField, masks: &[ClassMask], w: &AtlWeights, cfg: &SkeletonConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let pv = tape.constant(p.values().clone());
    let l = atl_on_tape(&mut tape, pv, masks, w, cfg)?;
    Ok(tape.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Grid2D;
    use proptest::prelude::*;

    fn bar(h: usize, w: usize) -> ClassMask {
        ClassMask::from_fn(h, w, |y, x| (5..8).contains(&y) && (4..24).contains(&x))
    }

    #[test]
    fn zeros_and_single_pixel() {
        let cfg = SkeletonConfig::default();
        assert!(soft_skeleton(&[0.0; 49], 7, 7, &cfg).iter().all(|&v| v == 0.0));
        let mut one = vec![0.0; 49];
        one[24] = 1.0;
        assert_eq!(soft_skeleton(&one, 7, 7, &cfg), one);
    }

    #[test]
    fn bar_skeleton_is_centre_row() {
        let m = bar(13, 28);
        let s = soft_skeleton(m.to_plane().data(), 13, 28, &SkeletonConfig::default());
        for y in 0..13 {
            for x in 0..28 {
                let expect = if y == 6 && (5..23).contains(&x) { 1.0 } else { 0.0 };
                assert_eq!(s[y * 28 + x], expect, "({y}, {x})");
            }
        }
    }

    #[test]
    fn cldice_examples() {
        let cfg = SkeletonConfig::default();
        let m = bar(13, 28);
        assert!(cldice_loss(m.to_plane().data(), &m, &cfg).unwrap() <= 0.02);
        let other = ClassMask::from_fn(13, 28, |y, x| y < 2 && x < 10);
        assert!((cldice_loss(m.to_plane().data(), &other, &cfg).unwrap() - 1.0).abs() < 1e-9);

        let a = ClassMask::from_fn(5, 5, |y, x| (y, x) == (2, 3));
        let eps = cfg.epsilon;
        let x = 1.0 / (1.0 + eps);
        let expected = 1.0 - 2.0 * x * x / (x + x + eps);
        assert!((cldice_loss(a.to_plane().data(), &a, &cfg).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn empty_target_gives_unit_loss() {
        let cfg = SkeletonConfig::default();
        let p = vec![0.5; 25];
        let l = cldice_loss(&p, &ClassMask::empty(5, 5), &cfg).unwrap();
        assert!((l - 1.0).abs() < 1e-9);
    }

    #[test]
    fn overlap_examples() {
        let g = Grid2D::new(4, 4, 1.0).unwrap();
        let labels: Vec<usize> = (0..16).map(|i| i % 3).collect();
        assert_eq!(overlap_loss(&SimplexField::one_hot(g, 3, &labels).unwrap()).unwrap(), 0.0);
        assert!((overlap_loss(&SimplexField::uniform(g, 4).unwrap()).unwrap() - 0.0625).abs() < 1e-15);
        assert!((overlap_loss(&SimplexField::uniform(g, 2).unwrap()).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn atl_examples() {
        let g = Grid2D::new(4, 4, 1.0).unwrap();
        let cfg = SkeletonConfig::default();
        let u = SimplexField::uniform(g, 4).unwrap();
        let masks: Vec<ClassMask> = (0..4).map(|_| ClassMask::empty(4, 4)).collect();
        let zero = AtlWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            cl_classes: vec![0],
        };
        assert_eq!(atl_loss(&u, &masks, &zero, &cfg).unwrap(), 0.0);
        let w = AtlWeights {
            lambda1: 0.5,
            lambda2: 2.0,
            cl_classes: vec![],
        };
        assert!((atl_loss(&u, &masks, &w, &cfg).unwrap() - 0.125).abs() < 1e-15);

        let labels: Vec<usize> = (0..16).map(|i| usize::from(i < 4)).collect();
        let p = SimplexField::one_hot(g, 2, &labels).unwrap();
        let disjoint = vec![ClassMask::from_fn(4, 4, |y, _| y == 3), ClassMask::empty(4, 4)];
        let w = AtlWeights {
            lambda1: 1.5,
            lambda2: 0.0,
            cl_classes: vec![1],
        };
        let disjoint = vec![disjoint[1].clone(), disjoint[0].clone()];
        assert!((atl_loss(&p, &disjoint, &w, &cfg).unwrap() - 1.5).abs() < 1e-9);
    }

    fn arb_plane(h: usize, w: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(prop_oneof![Just(0.0), Just(1.0), 0.0f64..1.0], h * w)
    }

    proptest! {
        #[test]
        fn skeleton_below_input(v in arb_plane(9, 11)) {
            let s = soft_skeleton(&v, 9, 11, &SkeletonConfig::default());
            for (a, b) in s.iter().zip(&v) {
                prop_assert!(*a <= b + 1e-6);
                prop_assert!(*a >= 0.0);
            }
        }

        #[test]
        fn cldice_in_unit_interval(v in arb_plane(8, 8), bits in proptest::collection::vec(any::<bool>(), 64)) {
            let m = ClassMask::new(8, 8, bits);
            let l = cldice_loss(&v, &m, &SkeletonConfig::default()).unwrap();
            prop_assert!((0.0..=1.0).contains(&l));
        }

        #[test]
        fn thin_paths_are_fixed_points(steps in proptest::collection::vec(0u8..3, 4..30), y0 in 3usize..13) {
            // monotone 8-connected path moving right, optionally diagonally
            let (h, w) = (16, 40);
            let mut bits = vec![false; h * w];
            let (mut y, mut x) = (y0 as isize, 2usize);
            bits[y as usize * w + x] = true;
            for s in steps {
                x += 1;
                let ny = (y + s as isize - 1).clamp(1, h as isize - 2);
                y = ny;
                bits[y as usize * w + x] = true;
            }
            let m = ClassMask::new(h, w, bits);
            let plane = m.to_plane();
            let s = soft_skeleton(plane.data(), h, w, &SkeletonConfig::default());
            prop_assert_eq!(s, plane.data().to_vec());
        }
    }
}
