//! Plane-level numeric kernels and their adjoints.
//!
//! Every spatial operator is written as a loop over grid faces. A face joins
//! two 4-neighbours; faces on the domain boundary do not exist, which is the
//! zero-flux (mirrored ghost cell) boundary condition. The tape calls these
//! same functions for its forward values, so tracked and untracked runs agree
//! bit for bit.

/// Diffusivity (or any face-averaged coefficient): spatially constant or per pixel.
#[derive(Clone, Copy, Debug)]
pub enum Coeff<'a> {
    Scalar(f64),
    Field(&'a [f64]),
}

impl Coeff<'_> {
    #[inline]
    fn face(&self, i: usize, j: usize) -> f64 {
        match self {
            Coeff::Scalar(d) => *d,
            Coeff::Field(f) => 0.5 * (f[i] + f[j]),
        }
    }
}

/// Gradient with respect to a [`Coeff`], matching its variant.
#[derive(Clone, Debug, PartialEq)]
pub enum CoeffGrad {
    Scalar(f64),
    Field(Vec<f64>),
}

impl CoeffGrad {
    fn zeros_like(c: &Coeff<'_>) -> Self {
        match c {
            Coeff::Scalar(_) => CoeffGrad::Scalar(0.0),
            Coeff::Field(f) => CoeffGrad::Field(vec![0.0; f.len()]),
        }
    }

    #[inline]
    fn add_face(&mut self, i: usize, j: usize, v: f64) {
        match self {
            CoeffGrad::Scalar(s) => *s += v,
            CoeffGrad::Field(f) => {
                f[i] += 0.5 * v;
                f[j] += 0.5 * v;
            }
        }
    }
}

/// Calls `f(i, j)` for every interior face, horizontal faces first, in a
/// fixed row-major order.
#[inline]
pub fn for_each_face(height: usize, width: usize, mut f: impl FnMut(usize, usize)) {
    for y in 0..height {
        let row = y * width;
        for x in 0..width - 1 {
            f(row + x, row + x + 1);
        }
    }
    for y in 0..height - 1 {
        let row = y * width;
        for x in 0..width {
            f(row + x, row + width + x);
        }
    }
}

/// `∇·(D ∇u)` with face-averaged `D`.
pub fn diffuse(u: &[f64], d: Coeff<'_>, height: usize, width: usize, spacing: f64) -> Vec<f64> {
    let inv_h2 = 1.0 / (spacing * spacing);
    let mut out = vec![0.0; u.len()];
    for_each_face(height, width, |i, j| {
        let flux = d.face(i, j) * inv_h2 * (u[j] - u[i]);
        out[i] += flux;
        out[j] -= flux;
    });
    out
}

/// Adjoint of [`diffuse`]: `(∂/∂u, ∂/∂D)` contracted with `g`.
pub fn diffuse_backward(
    u: &[f64],
    d: Coeff<'_>,
    g: &[f64],
    height: usize,
    width: usize,
    spacing: f64,
) -> (Vec<f64>, CoeffGrad) {
    let inv_h2 = 1.0 / (spacing * spacing);
    let mut du = vec![0.0; u.len()];
    let mut dd = CoeffGrad::zeros_like(&d);
    for_each_face(height, width, |i, j| {
        let dg = g[i] - g[j];
        let w = d.face(i, j) * inv_h2;
        du[j] += w * dg;
        du[i] -= w * dg;
        dd.add_face(i, j, dg * (u[j] - u[i]) * inv_h2);
    });
    (du, dd)
}

/// `−∇·(χ p_k ∇p_j)` with face-averaged `p_k` and a scalar coupling `χ`.
pub fn cross_flux(
    pk: &[f64],
    pj: &[f64],
    chi: f64,
    height: usize,
    width: usize,
    spacing: f64,
) -> Vec<f64> {
    let scale = chi / (spacing * spacing);
    let mut out = vec![0.0; pk.len()];
    for_each_face(height, width, |i, j| {
        let flux = scale * 0.5 * (pk[i] + pk[j]) * (pj[j] - pj[i]);
        out[i] -= flux;
        out[j] += flux;
    });
    out
}

/// Adjoint of [`cross_flux`]: returns `(d p_k, d p_j, d χ)`.
pub fn cross_flux_backward(
    pk: &[f64],
    pj: &[f64],
    chi: f64,
    g: &[f64],
    height: usize,
    width: usize,
    spacing: f64,
) -> (Vec<f64>, Vec<f64>, f64) {
    let inv_h2 = 1.0 / (spacing * spacing);
    let mut dpk = vec![0.0; pk.len()];
    let mut dpj = vec![0.0; pj.len()];
    let mut dchi = 0.0;
    for_each_face(height, width, |i, j| {
        let gf = g[j] - g[i];
        let avg = 0.5 * (pk[i] + pk[j]);
        let diff = pj[j] - pj[i];
        dchi += gf * avg * diff * inv_h2;
        let a = gf * chi * inv_h2;
        dpk[i] += 0.5 * a * diff;
        dpk[j] += 0.5 * a * diff;
        dpj[j] += a * avg;
        dpj[i] -= a * avg;
    });
    (dpk, dpj, dchi)
}

/// Neighbour-weighted sum `Σ w_ij u_j` and weight total `Σ w_ij` per pixel.
fn jacobi_parts(
    u: &[f64],
    d: Coeff<'_>,
    height: usize,
    width: usize,
    spacing: f64,
) -> (Vec<f64>, Vec<f64>) {
    let inv_h2 = 1.0 / (spacing * spacing);
    let mut nb = vec![0.0; u.len()];
    let mut wsum = vec![0.0; u.len()];
    for_each_face(height, width, |i, j| {
        let w = d.face(i, j) * inv_h2;
        nb[i] += w * u[j];
        nb[j] += w * u[i];
        wsum[i] += w;
        wsum[j] += w;
    });
    (nb, wsum)
}

/// One weighted-Jacobi sweep for `(I − Δt ∇·(D∇·)) u = rhs`:
/// `u' = (1−ω) u + ω (rhs + Δt Σ w_ij u_j) / (1 + Δt Σ w_ij)`.
#[allow(clippy::too_many_arguments)]
pub fn jacobi_sweep(
    u: &[f64],
    rhs: &[f64],
    d: Coeff<'_>,
    dt: f64,
    omega: f64,
    height: usize,
    width: usize,
    spacing: f64,
) -> Vec<f64> {
    let (nb, wsum) = jacobi_parts(u, d, height, width, spacing);
    (0..u.len())
        .map(|i| (1.0 - omega) * u[i] + omega * (rhs[i] + dt * nb[i]) / (1.0 + dt * wsum[i]))
        .collect()
}

/// Adjoint of [`jacobi_sweep`]: returns `(d u, d rhs, d D)`.
#[allow(clippy::too_many_arguments)]
pub fn jacobi_sweep_backward(
    u: &[f64],
    rhs: &[f64],
    d: Coeff<'_>,
    dt: f64,
    omega: f64,
    g: &[f64],
    height: usize,
    width: usize,
    spacing: f64,
) -> (Vec<f64>, Vec<f64>, CoeffGrad) {
    let inv_h2 = 1.0 / (spacing * spacing);
    let (nb, wsum) = jacobi_parts(u, d, height, width, spacing);
    let n = u.len();
    let mut a = vec![0.0; n];
    let mut target = vec![0.0; n];
    for i in 0..n {
        let diag = 1.0 + dt * wsum[i];
        a[i] = omega * g[i] / diag;
        target[i] = (rhs[i] + dt * nb[i]) / diag;
    }
    let drhs = a.clone();
    let mut du: Vec<f64> = g.iter().map(|&gi| (1.0 - omega) * gi).collect();
    let mut dd = CoeffGrad::zeros_like(&d);
    for_each_face(height, width, |i, j| {
        let w = d.face(i, j) * inv_h2;
        du[j] += a[i] * dt * w;
        du[i] += a[j] * dt * w;
        let dw = dt * (a[i] * (u[j] - target[i]) + a[j] * (u[i] - target[j]));
        dd.add_face(i, j, dw * inv_h2);
    });
    (du, drhs, dd)
}

/// `out[y][x] += w · src[clamp(y+dy)][clamp(x+dx)]` (replicate padding).
#[inline]
fn shifted_axpy(out: &mut [f64], src: &[f64], w: f64, dy: isize, dx: isize, h: usize, wd: usize) {
    for y in 0..h {
        let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
        let orow = &mut out[y * wd..(y + 1) * wd];
        let srow = &src[sy * wd..(sy + 1) * wd];
        match dx {
            0 => {
                for (o, s) in orow.iter_mut().zip(srow) {
                    *o += w * s;
                }
            }
            1 => {
                for (o, s) in orow[..wd - 1].iter_mut().zip(&srow[1..]) {
                    *o += w * s;
                }
                orow[wd - 1] += w * srow[wd - 1];
            }
            -1 => {
                orow[0] += w * srow[0];
                for (o, s) in orow[1..].iter_mut().zip(&srow[..wd - 1]) {
                    *o += w * s;
                }
            }
            _ => unreachable!("3x3 taps only"),
        }
    }
}

/// Adjoint of [`shifted_axpy`] with respect to `src`.
#[inline]
fn shifted_axpy_adjoint(
    dsrc: &mut [f64],
    g: &[f64],
    w: f64,
    dy: isize,
    dx: isize,
    h: usize,
    wd: usize,
) {
    for y in 0..h {
        let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
        let grow = &g[y * wd..(y + 1) * wd];
        let drow = &mut dsrc[sy * wd..(sy + 1) * wd];
        match dx {
            0 => {
                for (d, gv) in drow.iter_mut().zip(grow) {
                    *d += w * gv;
                }
            }
            1 => {
                for (d, gv) in drow[1..].iter_mut().zip(&grow[..wd - 1]) {
                    *d += w * gv;
                }
                drow[wd - 1] += w * grow[wd - 1];
            }
            -1 => {
                drow[0] += w * grow[0];
                for (d, gv) in drow[..wd - 1].iter_mut().zip(&grow[1..]) {
                    *d += w * gv;
                }
            }
            _ => unreachable!("3x3 taps only"),
        }
    }
}

/// `Σ_{y,x} g[y][x] · src[clamp(y+dy)][clamp(x+dx)]`.
#[inline]
fn shifted_dot(g: &[f64], src: &[f64], dy: isize, dx: isize, h: usize, wd: usize) -> f64 {
    let mut acc = 0.0;
    for y in 0..h {
        let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
        let grow = &g[y * wd..(y + 1) * wd];
        let srow = &src[sy * wd..(sy + 1) * wd];
        let mut row = 0.0;
        match dx {
            0 => {
                for (a, b) in grow.iter().zip(srow) {
                    row += a * b;
                }
            }
            1 => {
                for (a, b) in grow[..wd - 1].iter().zip(&srow[1..]) {
                    row += a * b;
                }
                row += grow[wd - 1] * srow[wd - 1];
            }
            -1 => {
                row += grow[0] * srow[0];
                for (a, b) in grow[1..].iter().zip(&srow[..wd - 1]) {
                    row += a * b;
                }
            }
            _ => unreachable!("3x3 taps only"),
        }
        acc += row;
    }
    acc
}

const TAPS: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// 3×3 convolution (cross-correlation) with replicate padding.
/// `x`: `cin` planes; `weight`: `cout × cin × 9` (taps row-major); `bias`: `cout`.
pub fn conv3x3(
    x: &[f64],
    cin: usize,
    weight: &[f64],
    bias: &[f64],
    height: usize,
    width: usize,
) -> Vec<f64> {
    let n = height * width;
    let cout = bias.len();
    debug_assert_eq!(weight.len(), cout * cin * 9);
    let mut out = vec![0.0; cout * n];
    for o in 0..cout {
        let oplane = &mut out[o * n..(o + 1) * n];
        oplane.fill(bias[o]);
        for i in 0..cin {
            let src = &x[i * n..(i + 1) * n];
            for (t, &(dy, dx)) in TAPS.iter().enumerate() {
                let w = weight[(o * cin + i) * 9 + t];
                if w != 0.0 {
                    shifted_axpy(oplane, src, w, dy, dx, height, width);
                }
            }
        }
    }
    out
}

/// Adjoint of [`conv3x3`]: returns `(d x, d weight, d bias)`.
pub fn conv3x3_backward(
    x: &[f64],
    cin: usize,
    weight: &[f64],
    cout: usize,
    g: &[f64],
    height: usize,
    width: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = height * width;
    let mut dx = vec![0.0; cin * n];
    let mut dw = vec![0.0; weight.len()];
    let mut db = vec![0.0; cout];
    for o in 0..cout {
        let gplane = &g[o * n..(o + 1) * n];
        db[o] = crate::tensor::pairwise_sum(gplane);
        for i in 0..cin {
            let src = &x[i * n..(i + 1) * n];
            let dsrc = &mut dx[i * n..(i + 1) * n];
            for (t, &(sy, sx)) in TAPS.iter().enumerate() {
                let widx = (o * cin + i) * 9 + t;
                dw[widx] = shifted_dot(gplane, src, sy, sx, height, width);
                let w = weight[widx];
                if w != 0.0 {
                    shifted_axpy_adjoint(dsrc, gplane, w, sy, sx, height, width);
                }
            }
        }
    }
    (dx, dw, db)
}

/// 3×3 min- or max-pool over each plane, windows clipped to the grid.
/// Returns the pooled values and the flat index each output selected
/// (first in scan order on ties).
pub fn pool3x3(x: &[f64], planes: usize, height: usize, width: usize, take_max: bool) -> (Vec<f64>, Vec<u32>) {
    let n = height * width;
    let mut out = vec![0.0; x.len()];
    let mut arg = vec![0u32; x.len()];
    for c in 0..planes {
        let base = c * n;
        for y in 0..height {
            let y0 = y.saturating_sub(1);
            let y1 = (y + 1).min(height - 1);
            for xx in 0..width {
                let x0 = xx.saturating_sub(1);
                let x1 = (xx + 1).min(width - 1);
                let mut best_i = base + y0 * width + x0;
                let mut best = x[best_i];
                for sy in y0..=y1 {
                    for sx in x0..=x1 {
                        let idx = base + sy * width + sx;
                        let v = x[idx];
                        let better = if take_max { v > best } else { v < best };
                        if better {
                            best = v;
                            best_i = idx;
                        }
                    }
                }
                out[base + y * width + xx] = best;
                arg[base + y * width + xx] = best_i as u32;
            }
        }
    }
    (out, arg)
}

/// Adjoint of the simplex projection at one pixel: on the active set `A` of
/// strictly positive outputs, `g − mean_A(g)`; zero elsewhere.
pub fn simplex_backward_pixel(out: &[f64], g: &[f64], dst: &mut [f64]) {
    let mut count = 0usize;
    let mut sum = 0.0;
    for (o, gv) in out.iter().zip(g) {
        if *o > 0.0 {
            count += 1;
            sum += gv;
        }
    }
    let mean = if count > 0 { sum / count as f64 } else { 0.0 };
    for ((d, o), gv) in dst.iter_mut().zip(out).zip(g) {
        *d = if *o > 0.0 { gv - mean } else { 0.0 };
    }
}

/// Removes `fraction · p_T` of tumour probability at one pixel and hands it
/// to the other classes in proportion to their current share (uniformly when
/// they are all zero). Sum and nonnegativity are preserved exactly up to
/// rounding.
pub fn intervene_pixel(p: &mut [f64], tumor: usize, fraction: f64) {
    let removed = fraction * p[tumor];
    if removed == 0.0 {
        return;
    }
    let others: f64 = p
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != tumor)
        .map(|(_, v)| *v)
        .sum();
    let k_other = (p.len() - 1) as f64;
    for (k, v) in p.iter_mut().enumerate() {
        if k == tumor {
            *v -= removed;
        } else if others > 0.0 {
            *v += removed * *v / others;
        } else {
            *v = removed / k_other;
        }
    }
}

/// Vector-Jacobian product of [`intervene_pixel`] evaluated at input `p`.
pub fn intervene_pixel_backward(p: &[f64], tumor: usize, fraction: f64, g: &[f64], dst: &mut [f64]) {
    let removed = fraction * p[tumor];
    let others: f64 = p
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != tumor)
        .map(|(_, v)| *v)
        .sum();
    let k_other = (p.len() - 1) as f64;
    if fraction == 0.0 {
        dst.copy_from_slice(g);
        return;
    }
    if others > 0.0 {
        // out_k = p_k (1 + r/S), r = f p_T, S = Σ_{j≠T} p_j
        let ratio = removed / others;
        let mut weighted = 0.0;
        for k in 0..p.len() {
            if k != tumor {
                weighted += g[k] * p[k];
            }
        }
        let mut dt = (1.0 - fraction) * g[tumor];
        for k in 0..p.len() {
            if k != tumor {
                dst[k] = g[k] * (1.0 + ratio) - ratio * weighted / others;
                dt += g[k] * fraction * p[k] / others;
            }
        }
        dst[tumor] = dt;
    } else {
        // out_k = f p_T / (K − 1) for k ≠ T, independent of the (zero) others
        let mut dt = (1.0 - fraction) * g[tumor];
        for k in 0..p.len() {
            if k != tumor {
                dst[k] = 0.0;
                dt += g[k] * fraction / k_other;
            }
        }
        dst[tumor] = dt;
    }
}

/// Anisotropic total variation `Σ |forward differences|` of one plane.
pub fn total_variation(u: &[f64], height: usize, width: usize) -> f64 {
    let mut terms = Vec::with_capacity(2 * u.len());
    for_each_face(height, width, |i, j| terms.push((u[j] - u[i]).abs()));
    crate::tensor::pairwise_sum(&terms)
}

pub fn total_variation_backward(u: &[f64], g: f64, height: usize, width: usize) -> Vec<f64> {
    let mut du = vec![0.0; u.len()];
    for_each_face(height, width, |i, j| {
        let s = (u[j] - u[i]).signum() * if u[j] == u[i] { 0.0 } else { 1.0 };
        du[j] += g * s;
        du[i] -= g * s;
    });
    du
}
