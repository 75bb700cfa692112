//! Binding between physics/residual parameters and tape handles.
//!
//! A [`StepGraph`] holds the per-rollout handles the stepper needs (per-class
//! diffusivities, couplings, clamped growth rate, ...). It is built either
//! from plain values (untracked) or from a [`ParamSet`] (tracked). Terms whose
//! coefficients are frozen at zero are left out of the graph entirely, so the
//! reaction-only ablation costs nothing for the spatial operators.

use crate::autodiff::{Constraint, LeafSpec, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::field::Grid2D;
use crate::operators::{PdeParams, TreatmentContext};
use crate::residual::{self, ResidualNet, ResidualVars};
use crate::tensor::{Shape, Tensor};

pub const DIFF: &str = "diff";
pub const CHI: &str = "chi";
pub const ALPHA: &str = "alpha";
pub const KAPPA: &str = "kappa";
pub const KILL: &str = "kill";

/// Lower clamp for a learned carrying capacity; keeps `p/κ` well scaled.
pub const KAPPA_FLOOR: f64 = 1e-2;

/// Which physics leaves are learnable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    /// Diffusivities and couplings.
    pub spatial: bool,
    /// Growth rate, carrying capacity and kill rates.
    pub reaction: bool,
}

impl Default for Trainable {
    fn default() -> Self {
        Trainable {
            spatial: true,
            reaction: true,
        }
    }
}

/// Registers the physics leaves of `params` in `set`.
pub fn register_physics(set: &mut ParamSet, params: &PdeParams, trainable: Trainable) -> Result<()> {
    let spec = |c: Constraint, on: bool, t: &Tensor| {
        let mut s = LeafSpec::physics(c);
        s.trainable = on;
        s.spatial = t.shape().plane_len() > 1;
        s
    };
    let free = (f64::NEG_INFINITY, f64::INFINITY);
    set.register(
        DIFF,
        params.diff.clone(),
        spec(Constraint::Range { lo: 0.0, hi: f64::INFINITY }, trainable.spatial, &params.diff),
    )?;
    set.register(
        CHI,
        params.cross.clone(),
        LeafSpec {
            spatial: false,
            ..spec(Constraint::ZeroDiagonal { lo: free.0, hi: free.1 }, trainable.spatial, &params.cross)
        },
    )?;
    set.register(
        ALPHA,
        params.growth_rate.clone(),
        spec(
            Constraint::Range {
                lo: 0.0,
                hi: params.growth_clamp,
            },
            trainable.reaction,
            &params.growth_rate,
        ),
    )?;
    set.register(
        KAPPA,
        params.carrying_capacity.clone(),
        spec(
            Constraint::Range {
                lo: KAPPA_FLOOR,
                hi: 1.0,
            },
            trainable.reaction,
            &params.carrying_capacity,
        ),
    )?;
    set.register(
        KILL,
        params.kill_rates.clone(),
        spec(Constraint::Range { lo: 0.0, hi: f64::INFINITY }, trainable.reaction, &params.kill_rates),
    )?;
    Ok(())
}

/// Physics parameters currently held in `set`; non-learnable settings
/// (growth clamp, tumour class) come from `template`.
pub fn physics_from_params(set: &ParamSet, template: &PdeParams) -> Result<PdeParams> {
    let get = |name: &str| {
        set.value(name)
            .cloned()
            .ok_or_else(|| Error::InvalidParams(format!("missing parameter `{name}`")))
    };
    Ok(PdeParams {
        diff: get(DIFF)?,
        cross: get(CHI)?,
        growth_rate: get(ALPHA)?,
        carrying_capacity: get(KAPPA)?,
        growth_clamp: template.growth_clamp,
        kill_rates: get(KILL)?,
        tumor_class: template.tumor_class,
    })
}

/// Everything a trained model consists of.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub params: PdeParams,
    pub residual: Option<ResidualNet>,
}

impl Model {
    pub fn to_param_set(&self, trainable: Trainable, residual_trainable: bool) -> Result<ParamSet> {
        let mut set = ParamSet::new();
        register_physics(&mut set, &self.params, trainable)?;
        if let Some(net) = &self.residual {
            net.register(&mut set, residual_trainable)?;
        }
        Ok(set)
    }

    pub fn from_param_set(set: &ParamSet, template: &PdeParams) -> Result<Self> {
        Ok(Model {
            params: physics_from_params(set, template)?,
            residual: ResidualNet::from_params(set)?,
        })
    }
}

/// Per-rollout tape handles consumed by the stepper.
pub struct StepGraph {
    pub classes: usize,
    pub tumor: usize,
    pub spacing: f64,
    /// Per-class diffusivity (scalar or plane); `None` when frozen at zero.
    pub diff: Vec<Option<Var>>,
    /// Row-major `K × K` couplings; `None` on the diagonal and for frozen zeros.
    pub chi: Vec<Option<Var>>,
    /// Growth rate clamped to `[0, k_max]`.
    pub alpha: Var,
    pub kappa: Var,
    /// `Σ_c β_c · channel_c`; `None` without treatment channels.
    pub kill: Option<Var>,
    pub residual: Option<ResidualVars>,
    /// Treatment channels as constant planes, for the residual input.
    pub ctx_planes: Option<Var>,
}

fn is_zero(t: &Tensor) -> bool {
    t.data().iter().all(|&v| v == 0.0)
}

/// Handle for class `k` of a `K × 1 × 1` or `K × H × W` leaf.
fn class_coeff(tape: &mut Tape, leaf: Var, k: usize) -> Var {
    if tape.shape(leaf).plane_len() == 1 {
        tape.element(leaf, k)
    } else {
        tape.plane(leaf, k)
    }
}

impl StepGraph {
    fn check(params: &PdeParams, ctx: &TreatmentContext, grid: Grid2D) -> Result<()> {
        ctx.validate()?;
        if ctx.channels.len() != params.num_channels() {
            return Err(Error::ShapeMismatch(format!(
                "{} treatment channels, {} kill rates",
                ctx.channels.len(),
                params.num_channels()
            )));
        }
        params.validate(grid, params.num_classes())
    }

    fn finish(
        tape: &mut Tape,
        params: &PdeParams,
        ctx: &TreatmentContext,
        grid: Grid2D,
        diff: Vec<Option<Var>>,
        chi: Vec<Option<Var>>,
        alpha_raw: Var,
        kappa: Var,
        kill_leaf: Var,
        residual: Option<ResidualVars>,
    ) -> Self {
        let alpha = tape.clamp(alpha_raw, 0.0, params.growth_clamp);
        let kill = if ctx.channels.is_empty() {
            None
        } else {
            let c = tape.constant(ctx.as_tensor());
            let prod = tape.mul(kill_leaf, c);
            Some(tape.sum(prod))
        };
        let ctx_planes = (residual.is_some() && !ctx.channels.is_empty())
            .then(|| tape.constant(residual::context_planes(ctx, grid.height, grid.width)));
        StepGraph {
            classes: params.num_classes(),
            tumor: params.tumor_class,
            spacing: grid.spacing,
            diff,
            chi,
            alpha,
            kappa,
            kill,
            residual,
            ctx_planes,
        }
    }

    /// Untracked handles; zero diffusivities and couplings are omitted.
    pub fn constants(
        tape: &mut Tape,
        params: &PdeParams,
        residual: Option<&ResidualNet>,
        ctx: &TreatmentContext,
        grid: Grid2D,
    ) -> Result<Self> {
        Self::check(params, ctx, grid)?;
        let k = params.num_classes();
        let per_pixel = params.diff.shape().plane_len() > 1;
        let diff = (0..k)
            .map(|c| {
                if per_pixel {
                    let plane = params.diff.plane_tensor(c);
                    (!is_zero(&plane)).then(|| tape.constant(plane))
                } else {
                    let d = params.diff.data()[c];
                    (d != 0.0).then(|| tape.scalar(d))
                }
            })
            .collect();
        let chi = (0..k * k)
            .map(|i| {
                let v = params.cross.data()[i];
                (i / k != i % k && v != 0.0).then(|| tape.scalar(v))
            })
            .collect();
        let alpha = tape.constant(params.growth_rate.clone());
        let kappa = tape.constant(params.carrying_capacity.clone());
        let kill = tape.constant(params.kill_rates.clone());
        let res = residual.map(|net| ResidualVars::constants(tape, net));
        Ok(Self::finish(tape, params, ctx, grid, diff, chi, alpha, kappa, kill, res))
    }

    /// Tracked handles bound to the leaves of `set`.
    pub fn tracked(
        tape: &mut Tape,
        set: &ParamSet,
        template: &PdeParams,
        ctx: &TreatmentContext,
        grid: Grid2D,
    ) -> Result<Self> {
        let params = physics_from_params(set, template)?;
        Self::check(&params, ctx, grid)?;
        let k = params.num_classes();
        let frozen = |name: &str| !set.leaf(name).map(|l| l.trainable).unwrap_or(false);
        let diff_leaf = tape.param(set, DIFF)?;
        let diff_frozen = frozen(DIFF);
        let diff = (0..k)
            .map(|c| {
                let zero = if params.diff.shape().plane_len() > 1 {
                    is_zero(&params.diff.plane_tensor(c))
                } else {
                    params.diff.data()[c] == 0.0
                };
                (!(diff_frozen && zero)).then(|| class_coeff(tape, diff_leaf, c))
            })
            .collect();
        let chi_leaf = tape.param(set, CHI)?;
        let chi_frozen = frozen(CHI);
        let chi = (0..k * k)
            .map(|i| {
                let zero = params.cross.data()[i] == 0.0;
                (i / k != i % k && !(chi_frozen && zero)).then(|| tape.element(chi_leaf, i))
            })
            .collect();
        let alpha = tape.param(set, ALPHA)?;
        let kappa = tape.param(set, KAPPA)?;
        let kill = tape.param(set, KILL)?;
        let res = if set.contains(residual::W1) {
            Some(ResidualVars::params(tape, set)?)
        } else {
            None
        };
        Ok(Self::finish(tape, &params, ctx, grid, diff, chi, alpha, kappa, kill, res))
    }
}

/// `K × 1 × 1` tensor from per-class values.
pub fn per_class(values: &[f64]) -> Tensor {
    Tensor::from_vec(Shape::new(values.len(), 1, 1), values.to_vec())
}
