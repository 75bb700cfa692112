//! Coarse-grained reverse-mode tape.
//!
//! Nodes are whole tensors (planes, stacked class fields, weight blocks)
//! rather than scalars. Each primitive has a hand-written adjoint in
//! [`crate::kernels`] or below, and every forward value is produced by the
//! same code the untracked API uses.

use std::str::FromStr;

use crate::autodiff::params::ParamSet;
use crate::error::{Error, Result};
use crate::kernels::{self, Coeff, CoeffGrad};
use crate::tensor::{pairwise_dot, pairwise_sum, Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Relu(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Dot(Var, Var),
    Plane(Var, usize),
    Stack(Vec<Var>),
    Element(Var, usize),
    Diffuse {
        u: Var,
        d: Var,
        spacing: f64,
    },
    CrossFlux {
        pk: Var,
        pj: Var,
        chi: Var,
        spacing: f64,
    },
    Jacobi {
        u: Var,
        rhs: Var,
        d: Var,
        dt: f64,
        omega: f64,
        spacing: f64,
    },
    Simplex(Var),
    Conv {
        x: Var,
        w: Var,
        b: Var,
    },
    Pool {
        x: Var,
        arg: Vec<u32>,
    },
    Intervene {
        p: Var,
        region: Option<Vec<bool>>,
        tumor: usize,
        fraction: f64,
    },
    TotalVariation(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Abs(..) => "abs",
            Op::Clamp(..) => "clamp",
            Op::Sum(..) => "sum",
            Op::Dot(..) => "dot",
            Op::Plane(..) => "plane",
            Op::Stack(..) => "stack",
            Op::Element(..) => "element",
            Op::Diffuse { .. } => "diffuse",
            Op::CrossFlux { .. } => "cross_flux",
            Op::Jacobi { .. } => "jacobi",
            Op::Simplex(..) => "simplex",
            Op::Conv { .. } => "conv3x3",
            Op::Pool { .. } => "pool3x3",
            Op::Intervene { .. } => "intervene",
            Op::TotalVariation(..) => "total_variation",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    param: Option<usize>,
}

/// Attribute-free primitives addressable by name through [`Tape::apply`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Tanh,
    Relu,
    Abs,
    Sum,
    Dot,
    Simplex,
    TotalVariation,
}

impl FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "add" => Primitive::Add,
            "sub" => Primitive::Sub,
            "mul" => Primitive::Mul,
            "div" => Primitive::Div,
            "neg" => Primitive::Neg,
            "tanh" => Primitive::Tanh,
            "relu" => Primitive::Relu,
            "abs" => Primitive::Abs,
            "sum" => Primitive::Sum,
            "dot" => Primitive::Dot,
            "simplex" => Primitive::Simplex,
            "total_variation" => Primitive::TotalVariation,
            other => return Err(Error::UnsupportedOp(other.to_string())),
        })
    }
}

/// Record of tensor operations for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    if a == b || b == 1 {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else {
        None
    }
}

fn broadcast_shape(a: Shape, b: Shape) -> Option<Shape> {
    Some(Shape::new(
        broadcast_dim(a.channels, b.channels)?,
        broadcast_dim(a.height, b.height)?,
        broadcast_dim(a.width, b.width)?,
    ))
}

/// Flat index into `src` for output position `(c, y, x)` under broadcasting.
#[inline]
fn bcast_index(src: Shape, c: usize, y: usize, x: usize) -> usize {
    let c = if src.channels == 1 { 0 } else { c };
    let y = if src.height == 1 { 0 } else { y };
    let x = if src.width == 1 { 0 } else { x };
    (c * src.height + y) * src.width + x
}

fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (sa, sb) = (a.shape(), b.shape());
    if sa == sb {
        return a.zip_map(b, f);
    }
    let out = broadcast_shape(sa, sb)
        .unwrap_or_else(|| panic!("cannot broadcast {sa} with {sb}"));
    if sb.is_scalar() {
        let s = b.item();
        return Tensor::from_vec(out, a.data().iter().map(|&v| f(v, s)).collect());
    }
    if sa.is_scalar() {
        let s = a.item();
        return Tensor::from_vec(out, b.data().iter().map(|&v| f(s, v)).collect());
    }
    let (ad, bd) = (a.data(), b.data());
    Tensor::from_fn(out, |c, y, x| {
        f(ad[bcast_index(sa, c, y, x)], bd[bcast_index(sb, c, y, x)])
    })
}

/// Sums `g` (of the broadcast output shape) down to `target`.
fn reduce_to(g: &Tensor, target: Shape) -> Tensor {
    let gs = g.shape();
    if gs == target {
        return g.clone();
    }
    if target.is_scalar() {
        return Tensor::scalar(g.sum());
    }
    let mut out = Tensor::zeros(target);
    let gd = g.data();
    let od = out.data_mut();
    let mut i = 0;
    for c in 0..gs.channels {
        for y in 0..gs.height {
            for x in 0..gs.width {
                od[bcast_index(target, c, y, x)] += gd[i];
                i += 1;
            }
        }
    }
    out
}

fn coeff_of(t: &Tensor) -> Coeff<'_> {
    if t.shape().is_scalar() {
        Coeff::Scalar(t.item())
    } else {
        Coeff::Field(t.data())
    }
}

fn coeff_grad_tensor(g: CoeffGrad, shape: Shape) -> Tensor {
    match g {
        CoeffGrad::Scalar(s) => Tensor::scalar(s),
        CoeffGrad::Field(f) => Tensor::from_vec(shape, f),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Names of the recorded operations, in order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Untracked input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Leaf bound to the parameter `name` of `params`; its gradient is
    /// accumulated by [`Gradients::accumulate_into`].
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<Var> {
        let id = params
            .id(name)
            .ok_or_else(|| Error::InvalidParams(format!("unknown parameter `{name}`")))?;
        let value = params.value_by_id(id).clone();
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].param = Some(id);
        Ok(v)
    }

    /// Applies a named attribute-free primitive.
    pub fn apply(&mut self, op: &str, inputs: &[Var]) -> Result<Var> {
        let prim: Primitive = op.parse()?;
        let arity = match prim {
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div | Primitive::Dot => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::UnsupportedOp(format!(
                "{op} with {} inputs (expects {arity})",
                inputs.len()
            )));
        }
        let a = inputs[0];
        Ok(match prim {
            Primitive::Add => self.add(a, inputs[1]),
            Primitive::Sub => self.sub(a, inputs[1]),
            Primitive::Mul => self.mul(a, inputs[1]),
            Primitive::Div => self.div(a, inputs[1]),
            Primitive::Dot => self.dot(a, inputs[1]),
            Primitive::Neg => self.neg(a),
            Primitive::Tanh => self.tanh(a),
            Primitive::Relu => self.relu(a),
            Primitive::Abs => self.abs(a),
            Primitive::Sum => self.sum(a),
            Primitive::Simplex => self.simplex(a),
            Primitive::TotalVariation => self.total_variation(a),
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_binary(self.value(a), self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_binary(self.value(a), self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_binary(self.value(a), self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_binary(self.value(a), self.value(b), |x, y| x / y);
        self.push(v, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn offset(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::Offset(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    /// Pairwise sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Inner product of two equally shaped tensors, as a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "dot shape mismatch");
        let v = Tensor::scalar(pairwise_dot(va.data(), vb.data()));
        self.push(v, Op::Dot(a, b))
    }

    pub fn plane(&mut self, a: Var, c: usize) -> Var {
        let v = self.value(a).plane_tensor(c);
        self.push(v, Op::Plane(a, c))
    }

    pub fn stack(&mut self, parts: &[Var]) -> Var {
        let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::stack(&refs);
        self.push(v, Op::Stack(parts.to_vec()))
    }

    /// Single entry (flat index) as a scalar.
    pub fn element(&mut self, a: Var, index: usize) -> Var {
        let v = Tensor::scalar(self.value(a).data()[index]);
        self.push(v, Op::Element(a, index))
    }

    /// `∇·(D ∇u)` on a plane, zero-flux boundaries; `d` scalar or plane.
    pub fn diffuse(&mut self, u: Var, d: Var, spacing: f64) -> Var {
        let (uv, dv) = (self.value(u), self.value(d));
        let s = uv.shape();
        assert_eq!(s.channels, 1, "diffuse acts on a single plane");
        let out = kernels::diffuse(uv.data(), coeff_of(dv), s.height, s.width, spacing);
        self.push(Tensor::from_vec(s, out), Op::Diffuse { u, d, spacing })
    }

    /// `−∇·(χ p_k ∇p_j)` on planes with scalar `χ`.
    pub fn cross_flux(&mut self, pk: Var, pj: Var, chi: Var, spacing: f64) -> Var {
        let s = self.shape(pk);
        assert_eq!(s, self.shape(pj), "cross_flux plane mismatch");
        assert_eq!(s.channels, 1, "cross_flux acts on single planes");
        let out = kernels::cross_flux(
            self.value(pk).data(),
            self.value(pj).data(),
            self.value(chi).item(),
            s.height,
            s.width,
            spacing,
        );
        self.push(
            Tensor::from_vec(s, out),
            Op::CrossFlux {
                pk,
                pj,
                chi,
                spacing,
            },
        )
    }

    /// One weighted-Jacobi sweep for `(I − Δt ∇·(D∇·)) u = rhs`.
    pub fn jacobi(&mut self, u: Var, rhs: Var, d: Var, dt: f64, omega: f64, spacing: f64) -> Var {
        let s = self.shape(u);
        assert_eq!(s, self.shape(rhs), "jacobi plane mismatch");
        assert_eq!(s.channels, 1, "jacobi acts on a single plane");
        let out = kernels::jacobi_sweep(
            self.value(u).data(),
            self.value(rhs).data(),
            coeff_of(self.value(d)),
            dt,
            omega,
            s.height,
            s.width,
            spacing,
        );
        self.push(
            Tensor::from_vec(s, out),
            Op::Jacobi {
                u,
                rhs,
                d,
                dt,
                omega,
                spacing,
            },
        )
    }

    /// Per-pixel Euclidean projection of a `K × H × W` tensor onto the simplex.
    pub fn simplex(&mut self, a: Var) -> Var {
        let v = crate::field::project_values(self.value(a));
        self.push(v, Op::Simplex(a))
    }

    /// 3×3 convolution with replicate padding; `w`: `cout × cin × 9`, `b`: `cout × 1 × 1`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let s = xv.shape();
        let ws = wv.shape();
        assert_eq!(ws.height, s.channels, "conv input channel mismatch");
        assert_eq!(ws.width, 9, "conv weights must hold 9 taps");
        assert_eq!(bv.len(), ws.channels, "conv bias length mismatch");
        let out = kernels::conv3x3(xv.data(), s.channels, wv.data(), bv.data(), s.height, s.width);
        self.push(
            Tensor::from_vec(Shape::new(ws.channels, s.height, s.width), out),
            Op::Conv { x, w, b },
        )
    }

    pub fn max_pool(&mut self, x: Var) -> Var {
        self.pool(x, true)
    }

    pub fn min_pool(&mut self, x: Var) -> Var {
        self.pool(x, false)
    }

    fn pool(&mut self, x: Var, take_max: bool) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let (out, arg) = kernels::pool3x3(xv.data(), s.channels, s.height, s.width, take_max);
        self.push(Tensor::from_vec(s, out), Op::Pool { x, arg })
    }

    /// Removes `fraction` of the tumour probability inside `region` (all
    /// pixels when `None`), redistributing it over the other classes.
    pub fn intervene(&mut self, p: Var, region: Option<Vec<bool>>, tumor: usize, fraction: f64) -> Var {
        let pv = self.value(p);
        let s = pv.shape();
        let n = s.plane_len();
        let mut out = pv.clone();
        let data = out.data_mut();
        let mut pix = vec![0.0; s.channels];
        for i in 0..n {
            if region.as_ref().is_some_and(|r| !r[i]) {
                continue;
            }
            for c in 0..s.channels {
                pix[c] = data[c * n + i];
            }
            kernels::intervene_pixel(&mut pix, tumor, fraction);
            for c in 0..s.channels {
                data[c * n + i] = pix[c];
            }
        }
        self.push(
            out,
            Op::Intervene {
                p,
                region,
                tumor,
                fraction,
            },
        )
    }

    /// Sum of anisotropic total variation over every plane of `a`.
    pub fn total_variation(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.shape();
        let tv: Vec<f64> = (0..s.channels)
            .map(|c| kernels::total_variation(v.plane(c), s.height, s.width))
            .collect();
        self.push(Tensor::scalar(pairwise_sum(&tv)), Op::TotalVariation(a))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let s = self.shape(loss);
        if !s.is_scalar() {
            return Err(Error::NonScalarLoss(s.to_string()));
        }
        Ok(self.backward_seeded(loss, Tensor::scalar(1.0)))
    }

    /// Reverse pass from `out` with an explicit upstream gradient.
    pub fn backward_seeded(&self, out: Var, seed: Tensor) -> Gradients {
        assert_eq!(seed.shape(), self.shape(out), "seed shape mismatch");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, reduce_to(g, val(*a).shape()));
                acc(*b, reduce_to(g, val(*b).shape()));
            }
            Op::Sub(a, b) => {
                acc(*a, reduce_to(g, val(*a).shape()));
                acc(*b, reduce_to(&g.map(|x| -x), val(*b).shape()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let ga = broadcast_binary(g, vb, |x, y| x * y);
                let gb = broadcast_binary(g, va, |x, y| x * y);
                acc(*a, reduce_to(&ga, va.shape()));
                acc(*b, reduce_to(&gb, vb.shape()));
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let ga = broadcast_binary(g, vb, |x, y| x / y);
                // d(a/b)/db = −out / b
                let gb_full = broadcast_binary(
                    &g.zip_map(&node.value, |x, o| -x * o),
                    vb,
                    |x, y| x / y,
                );
                acc(*a, reduce_to(&ga, va.shape()));
                acc(*b, reduce_to(&gb_full, vb.shape()));
            }
            Op::Neg(a) => acc(*a, g.map(|x| -x)),
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::Offset(a) => acc(*a, g.clone()),
            Op::Tanh(a) => acc(*a, g.zip_map(&node.value, |x, o| x * (1.0 - o * o))),
            Op::Relu(a) => acc(*a, g.zip_map(val(*a), |x, i| if i > 0.0 { x } else { 0.0 })),
            Op::Abs(a) => acc(
                *a,
                g.zip_map(val(*a), |x, i| {
                    if i > 0.0 {
                        x
                    } else if i < 0.0 {
                        -x
                    } else {
                        0.0
                    }
                }),
            ),
            Op::Clamp(a, lo, hi) => acc(
                *a,
                g.zip_map(val(*a), |x, i| if i >= *lo && i <= *hi { x } else { 0.0 }),
            ),
            Op::Sum(a) => acc(*a, Tensor::filled(val(*a).shape(), g.item())),
            Op::Dot(a, b) => {
                let s = g.item();
                acc(*a, val(*b).map(|x| x * s));
                acc(*b, val(*a).map(|x| x * s));
            }
            Op::Plane(a, c) => {
                let mut t = Tensor::zeros(val(*a).shape());
                t.plane_mut(*c).copy_from_slice(g.data());
                acc(*a, t);
            }
            Op::Stack(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let ps = val(p).shape();
                    let len = ps.len();
                    acc(p, Tensor::from_vec(ps, g.data()[offset..offset + len].to_vec()));
                    offset += len;
                }
            }
            Op::Element(a, i) => {
                let mut t = Tensor::zeros(val(*a).shape());
                t.data_mut()[*i] = g.item();
                acc(*a, t);
            }
            Op::Diffuse { u, d, spacing } => {
                let (uv, dv) = (val(*u), val(*d));
                let s = uv.shape();
                let (du, dd) = kernels::diffuse_backward(
                    uv.data(),
                    coeff_of(dv),
                    g.data(),
                    s.height,
                    s.width,
                    *spacing,
                );
                acc(*u, Tensor::from_vec(s, du));
                acc(*d, coeff_grad_tensor(dd, dv.shape()));
            }
            Op::CrossFlux {
                pk,
                pj,
                chi,
                spacing,
            } => {
                let s = val(*pk).shape();
                let (dpk, dpj, dchi) = kernels::cross_flux_backward(
                    val(*pk).data(),
                    val(*pj).data(),
                    val(*chi).item(),
                    g.data(),
                    s.height,
                    s.width,
                    *spacing,
                );
                acc(*pk, Tensor::from_vec(s, dpk));
                acc(*pj, Tensor::from_vec(s, dpj));
                acc(*chi, Tensor::scalar(dchi));
            }
            Op::Jacobi {
                u,
                rhs,
                d,
                dt,
                omega,
                spacing,
            } => {
                let s = val(*u).shape();
                let dv = val(*d);
                let (du, drhs, dd) = kernels::jacobi_sweep_backward(
                    val(*u).data(),
                    val(*rhs).data(),
                    coeff_of(dv),
                    *dt,
                    *omega,
                    g.data(),
                    s.height,
                    s.width,
                    *spacing,
                );
                acc(*u, Tensor::from_vec(s, du));
                acc(*rhs, Tensor::from_vec(s, drhs));
                acc(*d, coeff_grad_tensor(dd, dv.shape()));
            }
            Op::Simplex(a) => {
                let s = node.value.shape();
                let n = s.plane_len();
                let k = s.channels;
                let mut out = Tensor::zeros(s);
                let (od, gd) = (node.value.data(), g.data());
                let mut po = vec![0.0; k];
                let mut pg = vec![0.0; k];
                let mut pd = vec![0.0; k];
                let dst = out.data_mut();
                for i in 0..n {
                    for c in 0..k {
                        po[c] = od[c * n + i];
                        pg[c] = gd[c * n + i];
                    }
                    kernels::simplex_backward_pixel(&po, &pg, &mut pd);
                    for c in 0..k {
                        dst[c * n + i] = pd[c];
                    }
                }
                acc(*a, out);
            }
            Op::Conv { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let s = xv.shape();
                let ws = wv.shape();
                let (dx, dw, db) = kernels::conv3x3_backward(
                    xv.data(),
                    s.channels,
                    wv.data(),
                    ws.channels,
                    g.data(),
                    s.height,
                    s.width,
                );
                acc(*x, Tensor::from_vec(s, dx));
                acc(*w, Tensor::from_vec(ws, dw));
                acc(*b, Tensor::from_vec(val(*b).shape(), db));
            }
            Op::Pool { x, arg } => {
                let mut t = Tensor::zeros(val(*x).shape());
                let td = t.data_mut();
                for (o, &src) in arg.iter().enumerate() {
                    td[src as usize] += g.data()[o];
                }
                acc(*x, t);
            }
            Op::Intervene {
                p,
                region,
                tumor,
                fraction,
            } => {
                let pv = val(*p);
                let s = pv.shape();
                let n = s.plane_len();
                let k = s.channels;
                let mut t = g.clone();
                let (pd, gd) = (pv.data(), g.data());
                let mut pp = vec![0.0; k];
                let mut pg = vec![0.0; k];
                let mut dd = vec![0.0; k];
                let td = t.data_mut();
                for i in 0..n {
                    if region.as_ref().is_some_and(|r| !r[i]) {
                        continue;
                    }
                    for c in 0..k {
                        pp[c] = pd[c * n + i];
                        pg[c] = gd[c * n + i];
                    }
                    kernels::intervene_pixel_backward(&pp, *tumor, *fraction, &pg, &mut dd);
                    for c in 0..k {
                        td[c * n + i] = dd[c];
                    }
                }
                acc(*p, t);
            }
            Op::TotalVariation(a) => {
                let av = val(*a);
                let s = av.shape();
                let mut t = Tensor::zeros(s);
                for c in 0..s.channels {
                    let d = kernels::total_variation_backward(av.plane(c), g.item(), s.height, s.width);
                    t.plane_mut(c).copy_from_slice(&d);
                }
                acc(*a, t);
            }
        }
    }
}

/// Result of a reverse pass: one optional gradient per tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `v`, zero-shaped when `v` did not influence the output.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
    }

    /// Adds gradients of parameter leaves into the matching trainable slots.
    pub fn accumulate_into(&self, tape: &Tape, params: &mut ParamSet) {
        for (idx, node) in tape.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, &self.grads[idx]) {
                params.accumulate_grad(id, g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(build: impl Fn(&mut Tape, Var) -> Var, x0: &Tensor, tol: f64) {
        let mut tape = Tape::new();
        let x = tape.constant(x0.clone());
        let y = build(&mut tape, x);
        let g = tape.backward(y).unwrap().wrt(&tape, x);
        let eps = 1e-6;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += delta;
                let mut t = Tape::new();
                let xv = t.constant(xp);
                let out = build(&mut t, xv);
                t.value(out).item()
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            assert!(
                (fd - g.data()[i]).abs() <= tol * (1.0 + fd.abs()),
                "entry {i}: fd {fd} vs ad {}",
                g.data()[i]
            );
        }
    }

    fn sample(shape: Shape, seed: u64) -> Tensor {
        let mut s = seed;
        Tensor::from_fn(shape, |_, _, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64) / ((1u64 << 53) as f64)
        })
    }

    #[test]
    fn add_value_matches_direct_sum() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(Shape::plane(1, 3), vec![1.0, 2.0, 3.0]));
        let b = tape.constant(Tensor::from_vec(Shape::plane(1, 3), vec![0.5, -2.0, 4.0]));
        let c = tape.add(a, b);
        assert_eq!(tape.value(c).data(), &[1.5, 0.0, 7.0]);
    }

    #[test]
    fn quadratic_gradient_is_twice_theta() {
        let mut params = ParamSet::new();
        let theta = Tensor::from_vec(Shape::plane(1, 4), vec![0.5, -1.0, 2.0, 0.0]);
        params.register("theta", theta.clone(), Default::default()).unwrap();
        let mut tape = Tape::new();
        let t = tape.param(&params, "theta").unwrap();
        let sq = tape.mul(t, t);
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap().accumulate_into(&tape, &mut params);
        assert_eq!(params.grad("theta").unwrap().data(), &[1.0, -2.0, 4.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(Shape::plane(2, 2)));
        assert!(matches!(tape.backward(a), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unknown_primitive_is_named_in_error() {
        let mut tape = Tape::new();
        let a = tape.scalar(1.0);
        match tape.apply("softmax", &[a]) {
            Err(Error::UnsupportedOp(name)) => assert_eq!(name, "softmax"),
            other => panic!("unexpected {:?}", other.map(|v| v.index())),
        }
        let b = tape.apply("tanh", &[a]).unwrap();
        assert_eq!(tape.value(b).item(), 1.0f64.tanh());
    }

    #[test]
    fn simplex_gradient_on_interior_point_removes_mean() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(Shape::new(3, 1, 1), vec![0.2, 0.3, 0.5]));
        let p = tape.simplex(x);
        let gout = Tensor::from_vec(Shape::new(3, 1, 1), vec![1.0, -2.0, 4.0]);
        let g = tape.backward_seeded(p, gout).wrt(&tape, x);
        assert_eq!(g.data(), &[0.0, -3.0, 3.0]);
    }

    #[test]
    fn broadcast_ops_match_finite_differences() {
        let x0 = sample(Shape::new(2, 3, 4), 1);
        let w = sample(Shape::new(2, 1, 1), 2);
        let sc = sample(Shape::SCALAR, 3);
        fd_check(
            |t, x| {
                let wv = t.constant(w.clone());
                let s = t.constant(sc.clone());
                let a = t.mul(x, wv);
                let b = t.div(a, s);
                let c = t.sub(b, x);
                let d = t.tanh(c);
                let e = t.add(d, wv);
                let f = t.div(s, e);
                t.sum(f)
            },
            &x0,
            1e-6,
        );
        // broadcast operand itself
        fd_check(
            |t, wv| {
                let x = t.constant(x0.clone());
                let a = t.mul(x, wv);
                let b = t.div(x, wv);
                let c = t.add(a, b);
                t.sum(c)
            },
            &w,
            1e-6,
        );
    }

    #[test]
    fn spatial_ops_match_finite_differences() {
        let u0 = sample(Shape::plane(4, 5), 9);
        let d = sample(Shape::plane(4, 5), 10);
        let pj = sample(Shape::plane(4, 5), 11);
        fd_check(
            |t, u| {
                let dv = t.constant(d.clone());
                let chi = t.scalar(0.7);
                let pjv = t.constant(pj.clone());
                let a = t.diffuse(u, dv, 1.0);
                let b = t.cross_flux(u, pjv, chi, 1.0);
                let c = t.jacobi(a, u, dv, 0.2, 0.9, 1.0);
                let e = t.add(b, c);
                let f = t.mul(e, e);
                let tv = t.total_variation(e);
                let s = t.sum(f);
                t.add(s, tv)
            },
            &u0,
            1e-5,
        );
    }

    #[test]
    fn pool_and_conv_match_finite_differences() {
        let x0 = sample(Shape::new(2, 4, 4), 21);
        let w = sample(Shape::new(3, 2, 9), 22).map(|v| v - 0.5);
        let b = sample(Shape::new(3, 1, 1), 23);
        fd_check(
            |t, x| {
                let wv = t.constant(w.clone());
                let bv = t.constant(b.clone());
                let c = t.conv3x3(x, wv, bv);
                let m = t.max_pool(c);
                let n = t.min_pool(m);
                let r = t.relu(n);
                let sq = t.mul(r, r);
                t.sum(sq)
            },
            &x0,
            1e-5,
        );
    }

    #[test]
    fn gradients_are_deterministic() {
        let x0 = sample(Shape::new(3, 4, 4), 31);
        let run = || {
            let mut t = Tape::new();
            let x = t.constant(x0.clone());
            let p = t.simplex(x);
            let q = t.mul(p, x);
            let s = t.sum(q);
            t.backward(s).unwrap().wrt(&t, x)
        };
        assert_eq!(run(), run());
    }
}
