//! Small convolutional corrector added to the explicit part of each step.
//!
//! `r̂ = γ · conv2(tanh(conv1([p; ctx])))`, with the treatment vector
//! broadcast as constant planes. Each output row of `conv2` is kept at
//! L1 norm (weights plus bias) at most 1, so `|r̂| ≤ γ` pointwise.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Constraint, LeafSpec, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::field::SimplexField;
use crate::operators::TreatmentContext;
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_HIDDEN: usize = 8;
pub const DEFAULT_GAMMA: f64 = 0.1;

pub const W1: &str = "res.w1";
pub const B1: &str = "res.b1";
pub const W2: &str = "res.w2";
pub const B2: &str = "res.b2";
pub const GAMMA: &str = "res.gamma";

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualNet {
    /// `hidden × (K + C) × 9`
    pub w1: Tensor,
    /// `hidden × 1 × 1`
    pub b1: Tensor,
    /// `K × hidden × 9`
    pub w2: Tensor,
    /// `K × 1 × 1`
    pub b2: Tensor,
    pub gamma: f64,
}

/// Uniform init half-width for a 3×3 convolution over `cin` inputs.
pub fn fan_in_scale(cin: usize) -> f64 {
    1.0 / ((9 * cin) as f64).sqrt()
}

impl ResidualNet {
    pub fn zeros(classes: usize, channels: usize, hidden: usize) -> Self {
        ResidualNet {
            w1: Tensor::zeros(Shape::new(hidden, classes + channels, 9)),
            b1: Tensor::zeros(Shape::new(hidden, 1, 1)),
            w2: Tensor::zeros(Shape::new(classes, hidden, 9)),
            b2: Tensor::zeros(Shape::new(classes, 1, 1)),
            gamma: DEFAULT_GAMMA,
        }
    }

    /// Fan-in scaled uniform weights, zero biases, `γ = 0.1`; the output
    /// rows are then brought inside the L1 bound.
    pub fn init(seed: u64, classes: usize, channels: usize, hidden: usize) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::InvalidConfig("residual hidden width must be ≥ 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = ResidualNet::zeros(classes, channels, hidden);
        let s1 = fan_in_scale(classes + channels);
        let s2 = fan_in_scale(hidden);
        let d1 = Uniform::new_inclusive(-s1, s1);
        for v in net.w1.data_mut() {
            *v = d1.sample(&mut rng);
        }
        let d2 = Uniform::new_inclusive(-s2, s2);
        for v in net.w2.data_mut() {
            *v = d2.sample(&mut rng);
        }
        net.constrain();
        Ok(net)
    }

    pub fn classes(&self) -> usize {
        self.w2.shape().channels
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape().channels
    }

    pub fn channels(&self) -> usize {
        self.w1.shape().height - self.classes()
    }

    /// Rescales each `conv2` row to L1 norm ≤ 1 and clamps `γ ≥ 0`.
    pub fn constrain(&mut self) {
        let row = self.w2.shape().height * 9;
        for c in 0..self.classes() {
            let w = &mut self.w2.data_mut()[c * row..(c + 1) * row];
            let norm: f64 = w.iter().map(|v| v.abs()).sum::<f64>() + self.b2.data()[c].abs();
            if norm > 1.0 {
                let f = 1.0 / norm;
                w.iter_mut().for_each(|v| *v *= f);
                self.b2.data_mut()[c] *= f;
            }
        }
        self.gamma = self.gamma.max(0.0);
    }

    /// Adds the five leaves to `set` as network parameters.
    pub fn register(&self, set: &mut ParamSet, trainable: bool) -> Result<()> {
        let spec = |c: Constraint| {
            let s = LeafSpec::network().with_constraint(c);
            if trainable {
                s
            } else {
                s.frozen()
            }
        };
        set.register(W1, self.w1.clone(), spec(Constraint::Free))?;
        set.register(B1, self.b1.clone(), spec(Constraint::Free))?;
        set.register(W2, self.w2.clone(), spec(Constraint::RowL1 { max: 1.0 }))?;
        set.register(B2, self.b2.clone(), spec(Constraint::Free))?;
        set.register(
            GAMMA,
            Tensor::scalar(self.gamma),
            spec(Constraint::Range {
                lo: 0.0,
                hi: f64::INFINITY,
            }),
        )?;
        Ok(())
    }

    /// Reads the network back from `set`; `None` when it holds no residual.
    pub fn from_params(set: &ParamSet) -> Result<Option<Self>> {
        if !set.contains(W1) {
            return Ok(None);
        }
        let get = |name: &str| {
            set.value(name)
                .cloned()
                .ok_or_else(|| Error::InvalidParams(format!("missing parameter `{name}`")))
        };
        let net = ResidualNet {
            w1: get(W1)?,
            b1: get(B1)?,
            w2: get(W2)?,
            b2: get(B2)?,
            gamma: get(GAMMA)?.item(),
        };
        net.check()?;
        Ok(Some(net))
    }

    fn check(&self) -> Result<()> {
        let (h, k) = (self.hidden(), self.classes());
        let w1 = self.w1.shape();
        if w1.width != 9 || w1.height < k {
            return Err(Error::ShapeMismatch(format!("conv1 weights {w1}")));
        }
        if self.b1.shape() != Shape::new(h, 1, 1)
            || self.w2.shape() != Shape::new(k, h, 9)
            || self.b2.shape() != Shape::new(k, 1, 1)
        {
            return Err(Error::ShapeMismatch("residual layer shapes disagree".into()));
        }
        Ok(())
    }
}

/// Tape handles of the network leaves.
#[derive(Clone, Copy, Debug)]
pub struct ResidualVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub gamma: Var,
}

impl ResidualVars {
    pub fn params(tape: &mut Tape, set: &ParamSet) -> Result<Self> {
        Ok(ResidualVars {
            w1: tape.param(set, W1)?,
            b1: tape.param(set, B1)?,
            w2: tape.param(set, W2)?,
            b2: tape.param(set, B2)?,
            gamma: tape.param(set, GAMMA)?,
        })
    }

    pub fn constants(tape: &mut Tape, net: &ResidualNet) -> Self {
        ResidualVars {
            w1: tape.constant(net.w1.clone()),
            b1: tape.constant(net.b1.clone()),
            w2: tape.constant(net.w2.clone()),
            b2: tape.constant(net.b2.clone()),
            gamma: tape.scalar(net.gamma),
        }
    }
}

/// Treatment vector broadcast to `C` constant planes.
pub fn context_planes(ctx: &TreatmentContext, height: usize, width: usize) -> Tensor {
    Tensor::from_fn(Shape::new(ctx.channels.len(), height, width), |c, _, _| ctx.channels[c])
}

/// Records the corrector on `tape`. `ctx` holds `C` planes (possibly zero).
pub fn residual_on_tape(tape: &mut Tape, p: Var, ctx: Option<Var>, vars: &ResidualVars) -> Var {
    let input = match ctx {
        Some(c) => tape.stack(&[p, c]),
        None => p,
    };
    let h = tape.conv3x3(input, vars.w1, vars.b1);
    let a = tape.tanh(h);
    let o = tape.conv3x3(a, vars.w2, vars.b2);
    tape.mul(o, vars.gamma)
}

/// Evaluates the corrector on a field.
pub fn residual_forward(p: &SimplexField, ctx: &TreatmentContext, net: &ResidualNet) -> Result<Tensor> {
    net.check()?;
    let k = p.num_classes();
    if net.classes() != k || net.channels() != ctx.channels.len() {
        return Err(Error::ShapeMismatch(format!(
            "network expects {} classes and {} channels, got {k} and {}",
            net.classes(),
            net.channels(),
            ctx.channels.len()
        )));
    }
    let g = p.grid();
    let mut tape = Tape::new();
    let pv = tape.constant(p.values().clone());
    let cv = (!ctx.channels.is_empty()).then(|| tape.constant(context_planes(ctx, g.height, g.width)));
    let vars = ResidualVars::constants(&mut tape, net);
    let out = residual_on_tape(&mut tape, pv, cv, &vars);
    Ok(tape.value(out).clone())
}
