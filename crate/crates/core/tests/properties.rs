use adt_core::field::{project_field, Grid2D, SIMPLEX_TOL};
use adt_core::model::{Model, Trainable};
use adt_core::operators::{InterventionSchedule, PdeParams, TreatmentContext};
use adt_core::solver::{rollout_with, GradientRollout, SolverConfig};
use adt_core::synth::{fold_of, split_folds};
use adt_core::tensor::{Shape, Tensor};
use proptest::prelude::*;

fn raw_field(k: usize, n: usize, v: &[f64]) -> Tensor {
    Tensor::from_fn(Shape::new(k, n, n), |c, y, x| v[(c * n * n + y * n + x) % v.len()])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn every_rollout_state_is_on_the_simplex(
        n in 4usize..12,
        k in 2usize..6,
        dt in prop::sample::select(vec![0.05, 0.1, 0.2, 0.3, 0.5]),
        steps in 1usize..8,
        d in 0.0f64..2.0,
        chi in -0.5f64..0.5,
        alpha in 0.0f64..3.0,
        seed in prop::collection::vec(0.0f64..1.0, 64),
    ) {
        let p0 = project_field(Grid2D::square(n).unwrap(), &raw_field(k, n, &seed)).unwrap();
        let mut params = PdeParams::constant(k, k - 1, 0).with_diffusion(d).with_cross(chi);
        params.growth_clamp = 3.0;
        let params = params.with_growth(alpha);
        let cfg = SolverConfig { dt, horizon: dt * steps as f64, ..SolverConfig::default() };
        let mut worst: f64 = 0.0;
        rollout_with(&p0, &params, &TreatmentContext::none(0), &InterventionSchedule::empty(), &cfg, None, |_, s| {
            let (sum_err, min) = s.simplex_violation();
            worst = worst.max(sum_err).max(-min);
        }).unwrap();
        prop_assert!(worst <= SIMPLEX_TOL, "violation {worst:e}");
    }

    #[test]
    fn backward_is_linear_in_the_loss(
        a in prop::collection::vec(-1.0f64..1.0, 3 * 36),
        b in prop::collection::vec(-1.0f64..1.0, 3 * 36),
        seed in prop::collection::vec(0.0f64..1.0, 3 * 36),
    ) {
        let n = 6;
        let p0 = project_field(Grid2D::square(n).unwrap(), &raw_field(3, n, &seed)).unwrap();
        let template = PdeParams::constant(3, 2, 0).with_diffusion(0.3).with_cross(0.1).with_growth(0.8);
        let model = Model { params: template.clone(), residual: None };
        let set = model.to_param_set(Trainable::default(), false).unwrap();
        let ctx = TreatmentContext::none(0);
        let sched = InterventionSchedule::empty();
        let cfg = SolverConfig { horizon: 0.3, ..SolverConfig::default() };
        let run = GradientRollout { template: &template, ctx: &ctx, schedule: &sched, cfg: &cfg };
        let grads = |w: Tensor| {
            let mut s = set.clone();
            s.zero_grads();
            run.loss_and_grad(&p0, &mut s, |tape, p| {
                let wv = tape.constant(w.clone());
                Ok(tape.dot(p, wv))
            }).unwrap();
            s
        };
        let shape = Shape::new(3, n, n);
        let (wa, wb) = (Tensor::from_vec(shape, a.clone()), Tensor::from_vec(shape, b.clone()));
        let sum = Tensor::from_vec(shape, a.iter().zip(&b).map(|(x, y)| x + y).collect());
        let (ga, gb, gs) = (grads(wa), grads(wb), grads(sum));
        for leaf in set.leaves() {
            let (x, y, z) = (ga.grad(&leaf.name).unwrap(), gb.grad(&leaf.name).unwrap(), gs.grad(&leaf.name).unwrap());
            for i in 0..z.len() {
                let lhs = x.data()[i] + y.data()[i];
                prop_assert!((lhs - z.data()[i]).abs() <= 1e-9 * (1.0 + lhs.abs()), "{}[{i}]", leaf.name);
            }
        }
    }

    #[test]
    fn folds_partition_by_index_modulo(n in 5usize..300, fold in 0usize..5) {
        let (train, test) = split_folds(n, 5, fold);
        prop_assert_eq!(train.len() + test.len(), n);
        prop_assert!(test.iter().all(|&i| fold_of(i, 5) == fold && i % 5 == fold));
        prop_assert!(train.iter().all(|&i| i % 5 != fold));
    }
}
