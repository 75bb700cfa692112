//! Simplex-constrained multi-class probability fields on regular 2-D grids.
//!
//! A [`SimplexField`] stores one probability plane per class (class-major).
//! Every pixel holds a point of the probability simplex: entries are
//! nonnegative and sum to one, up to [`SIMPLEX_TOL`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{pairwise_sum, Shape, Tensor};

/// Tolerance of the per-pixel simplex check applied after projected operations.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// A regular `height × width` grid with isotropic step `spacing`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    pub height: usize,
    pub width: usize,
    pub spacing: f64,
}

impl Grid2D {
    pub fn new(height: usize, width: usize, spacing: f64) -> Result<Self> {
        let g = Grid2D {
            height,
            width,
            spacing,
        };
        g.validate()?;
        Ok(g)
    }

    /// Unit-spaced square grid.
    pub fn square(n: usize) -> Result<Self> {
        Grid2D::new(n, n, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 {
            return Err(Error::InvalidGrid(format!(
                "{}x{} grid: both extents must be at least 2",
                self.height, self.width
            )));
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "spacing {} must be positive and finite",
                self.spacing
            )));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn plane_shape(&self) -> Shape {
        Shape::plane(self.height, self.width)
    }

    pub fn shape(&self, channels: usize) -> Shape {
        Shape::new(channels, self.height, self.width)
    }

    /// Area element `h²`.
    pub fn cell_area(&self) -> f64 {
        self.spacing * self.spacing
    }
}

/// Per-pixel class probabilities; immutable once constructed.
#[derive(Clone, Debug, PartialEq)]
pub struct SimplexField {
    grid: Grid2D,
    values: Tensor,
}

impl SimplexField {
    /// Wraps `values` (shape `K × H × W`) after checking the simplex invariants.
    pub fn new(grid: Grid2D, values: Tensor) -> Result<Self> {
        grid.validate()?;
        let shape = values.shape();
        if shape.height != grid.height || shape.width != grid.width {
            return Err(Error::ShapeMismatch(format!(
                "field {shape} does not match {}x{} grid",
                grid.height, grid.width
            )));
        }
        if shape.channels < 2 {
            return Err(Error::Domain(format!(
                "simplex fields need at least 2 classes, got {}",
                shape.channels
            )));
        }
        let field = SimplexField { grid, values };
        field.check(SIMPLEX_TOL)?;
        Ok(field)
    }

    /// Wraps values known to be on the simplex (output of a projection).
    pub(crate) fn from_projected(grid: Grid2D, values: Tensor) -> Self {
        debug_assert!(SimplexField {
            grid,
            values: values.clone()
        }
        .check(SIMPLEX_TOL)
        .is_ok());
        SimplexField { grid, values }
    }

    pub fn uniform(grid: Grid2D, classes: usize) -> Result<Self> {
        SimplexField::new(
            grid,
            Tensor::filled(grid.shape(classes), 1.0 / classes as f64),
        )
    }

    /// One-hot field from a per-pixel label map (row-major, length `H·W`).
    pub fn one_hot(grid: Grid2D, classes: usize, labels: &[usize]) -> Result<Self> {
        if labels.len() != grid.pixels() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {} pixels",
                labels.len(),
                grid.pixels()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Domain(format!("label {bad} >= {classes} classes")));
        }
        let n = grid.pixels();
        let mut t = Tensor::zeros(grid.shape(classes));
        for (i, &l) in labels.iter().enumerate() {
            t.data_mut()[l * n + i] = 1.0;
        }
        SimplexField::new(grid, t)
    }

    pub fn grid(&self) -> Grid2D {
        self.grid
    }

    pub fn num_classes(&self) -> usize {
        self.values.shape().channels
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    pub fn plane(&self, k: usize) -> &[f64] {
        self.values.plane(k)
    }

    /// Probability vector at pixel `(y, x)`.
    pub fn pixel(&self, y: usize, x: usize) -> Vec<f64> {
        (0..self.num_classes())
            .map(|k| self.values.get(k, y, x))
            .collect()
    }

    /// Checks nonnegativity and unit sums per pixel within `tol`.
    pub fn check(&self, tol: f64) -> Result<()> {
        let n = self.grid.pixels();
        let k = self.num_classes();
        let data = self.values.data();
        for i in 0..n {
            let mut s = 0.0;
            for c in 0..k {
                let v = data[c * n + i];
                if !v.is_finite() {
                    return Err(Error::Domain(format!("non-finite value at pixel {i}")));
                }
                if v < -tol {
                    return Err(Error::Domain(format!(
                        "negative probability {v} at pixel {i}, class {c}"
                    )));
                }
                s += v;
            }
            if (s - 1.0).abs() > tol {
                return Err(Error::Domain(format!("pixel {i} sums to {s}")));
            }
        }
        Ok(())
    }

    /// Largest deviation of any pixel sum from one, and the most negative entry.
    pub fn simplex_violation(&self) -> (f64, f64) {
        simplex_violation(&self.values)
    }
}

/// `(max |Σ_k v_k − 1|, min v)` over the pixels of a `K × H × W` tensor.
pub fn simplex_violation(values: &Tensor) -> (f64, f64) {
    let shape = values.shape();
    let n = shape.plane_len();
    let data = values.data();
    let mut worst_sum = 0.0f64;
    let mut min_entry = f64::INFINITY;
    for i in 0..n {
        let mut s = 0.0;
        for c in 0..shape.channels {
            let v = data[c * n + i];
            s += v;
            min_entry = min_entry.min(v);
        }
        worst_sum = worst_sum.max((s - 1.0).abs());
    }
    (worst_sum, min_entry)
}

/// Boolean mask over a grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl ClassMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), height * width, "mask length mismatch");
        ClassMask {
            height,
            width,
            bits,
        }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        ClassMask::new(height, width, vec![false; height * width])
    }

    pub fn full(height: usize, width: usize) -> Self {
        ClassMask::new(height, width, vec![true; height * width])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        ClassMask::new(height, width, bits)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// 0/1 plane as `f64`.
    pub fn to_plane(&self) -> Tensor {
        Tensor::from_vec(
            Shape::plane(self.height, self.width),
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
    }

    /// Pixels strictly above `threshold`.
    pub fn from_plane(plane: &[f64], height: usize, width: usize, threshold: f64) -> Self {
        ClassMask::new(height, width, plane.iter().map(|&v| v > threshold).collect())
    }
}

/// Euclidean projection of `v` onto the probability simplex (sort-based
/// threshold algorithm).
pub fn project_simplex(v: &[f64]) -> Result<Vec<f64>> {
    if v.len() < 2 {
        return Err(Error::Domain(format!(
            "simplex projection needs at least 2 coordinates, got {}",
            v.len()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain("non-finite input to simplex projection".into()));
    }
    let mut out = v.to_vec();
    let mut scratch = Vec::with_capacity(v.len());
    project_in_place(&mut out, &mut scratch);
    Ok(out)
}

/// Threshold `θ` such that `max(v − θ, 0)` lies on the simplex.
pub(crate) fn simplex_threshold(v: &[f64], sorted: &mut Vec<f64>) -> f64 {
    sorted.clear();
    sorted.extend_from_slice(v);
    sorted.sort_unstable_by(|a, b| b.partial_cmp(a).expect("finite input"));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - 1.0) / (j + 1) as f64;
        if u - candidate > 0.0 {
            theta = candidate;
        } else {
            break;
        }
    }
    theta
}

pub(crate) fn project_in_place(v: &mut [f64], scratch: &mut Vec<f64>) {
    let theta = simplex_threshold(v, scratch);
    for x in v.iter_mut() {
        *x = (*x - theta).max(0.0);
    }
}

/// Per-pixel projection of a `K × H × W` tensor; no validation of finiteness.
pub(crate) fn project_values(raw: &Tensor) -> Tensor {
    let shape = raw.shape();
    let n = shape.plane_len();
    let k = shape.channels;
    let mut out = raw.clone();
    let data = out.data_mut();
    let mut pix = vec![0.0; k];
    let mut scratch = Vec::with_capacity(k);
    for i in 0..n {
        for c in 0..k {
            pix[c] = data[c * n + i];
        }
        project_in_place(&mut pix, &mut scratch);
        for c in 0..k {
            data[c * n + i] = pix[c];
        }
    }
    out
}

/// Projects every pixel of an unconstrained `K × H × W` tensor onto the simplex.
pub fn project_field(grid: Grid2D, raw: &Tensor) -> Result<SimplexField> {
    grid.validate()?;
    let shape = raw.shape();
    if shape.height != grid.height || shape.width != grid.width {
        return Err(Error::ShapeMismatch(format!(
            "raw field {shape} does not match {}x{} grid",
            grid.height, grid.width
        )));
    }
    if shape.channels < 2 {
        return Err(Error::Domain("projection needs at least 2 classes".into()));
    }
    if !raw.all_finite() {
        return Err(Error::Domain("non-finite entry in raw field".into()));
    }
    Ok(SimplexField::from_projected(grid, project_values(raw)))
}

/// Pixels where class `k` attains the maximum, ties going to the lowest index.
pub fn argmax_mask(p: &SimplexField, k: usize) -> Result<ClassMask> {
    let classes = p.num_classes();
    if k >= classes {
        return Err(Error::Domain(format!("class {k} out of range 0..{classes}")));
    }
    let labels = argmax_labels(p);
    let g = p.grid();
    Ok(ClassMask::new(
        g.height,
        g.width,
        labels.iter().map(|&l| l == k).collect(),
    ))
}

/// Per-pixel winning class (lowest index on ties).
pub fn argmax_labels(p: &SimplexField) -> Vec<usize> {
    labels_of(p.values())
}

pub(crate) fn labels_of(values: &Tensor) -> Vec<usize> {
    let shape = values.shape();
    let n = shape.plane_len();
    let data = values.data();
    (0..n)
        .map(|i| {
            let mut best = 0;
            let mut best_v = data[i];
            for c in 1..shape.channels {
                let v = data[c * n + i];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            best
        })
        .collect()
}

/// `Σ_x p_k(x) · h²` with fixed-order pairwise summation.
pub fn class_mass(p: &SimplexField, k: usize) -> f64 {
    pairwise_sum(p.plane(k)) * p.grid().cell_area()
}
