//! Discrete differential calculus on a uniform, collocated pixel grid.
//!
//! Storage is row-major: pixel `(row, col)` lives at `row * width + col`.
//! The `x` direction runs along columns, `y` along rows, and the physical
//! coordinate of a pixel is `(col * h, row * h)`.
//!
//! All primal operators are forward differences divided by `h` with a Neumann
//! closure (the difference is zero in the last column for `∂x` and the last
//! row for `∂y`). The divergences are the exact negative adjoints under the
//! inner product `h² Σ a·b`, where the `xy` plane of a [`SymTensorField`]
//! contributes twice.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Shape and spacing shared by every field on the same grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub spacing: f64,
}

impl Grid {
    pub fn new(width: usize, height: usize, spacing: f64) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(Error::InvalidGrid(format!(
                "grid must be at least 2x2, got {width}x{height}"
            )));
        }
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "spacing must be positive, got {spacing}"
            )));
        }
        Ok(Self {
            width,
            height,
            spacing,
        })
    }

    /// Square grid with unit spacing. Panics on sizes below 2.
    pub fn square(n: usize) -> Self {
        Self::new(n, n, 1.0).expect("square grid needs n >= 2")
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    /// Area element `h²`.
    #[inline]
    pub fn cell_area(&self) -> f64 {
        self.spacing * self.spacing
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn ensure_same(&self, other: &Grid) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                found: other.dims(),
            });
        }
        if self.spacing != other.spacing {
            return Err(Error::InvalidGrid(format!(
                "spacing mismatch: {} vs {}",
                self.spacing, other.spacing
            )));
        }
        Ok(())
    }

    /// True when the pixel lies within `band` pixels of the border.
    #[inline]
    pub fn in_band(&self, row: usize, col: usize, band: usize) -> bool {
        row < band || col < band || row + band >= self.height || col + band >= self.width
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

fn check_len(grid: &Grid, values: &[f64]) -> Result<()> {
    if values.len() != grid.len() {
        return Err(Error::InvalidGrid(format!(
            "plane has {} values, grid needs {}",
            values.len(),
            grid.len()
        )));
    }
    Ok(())
}

/// Common view over the multi-plane fields so norms, inner products and
/// projections can be written once.
pub trait PlaneField: Clone {
    /// Multiplicity of each plane in inner products and pointwise norms.
    const WEIGHTS: &'static [f64];

    fn grid(&self) -> Grid;
    fn planes(&self) -> Vec<&[f64]>;
    fn planes_mut(&mut self) -> Vec<&mut [f64]>;
    fn zeros(grid: Grid) -> Self;

    /// Pointwise (weighted) Euclidean norm at pixel `i`.
    fn pointwise_norm(&self, i: usize) -> f64 {
        self.planes()
            .iter()
            .zip(Self::WEIGHTS)
            .map(|(p, w)| w * p[i] * p[i])
            .sum::<f64>()
            .sqrt()
    }

    /// `h² Σ a·b` with plane weights.
    fn inner(&self, other: &Self) -> f64 {
        let area = self.grid().cell_area();
        let mut acc = 0.0;
        for ((a, b), w) in self.planes().iter().zip(other.planes()).zip(Self::WEIGHTS) {
            acc += w * a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>();
        }
        area * acc
    }

    fn norm(&self) -> f64 {
        self.inner(self).sqrt()
    }

    fn max_abs(&self) -> f64 {
        self.planes()
            .iter()
            .flat_map(|p| p.iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for plane in out.planes_mut() {
            plane.iter_mut().for_each(|v| *v *= factor);
        }
        out
    }

    /// `self + factor * other`.
    fn add_scaled(&self, other: &Self, factor: f64) -> Self {
        let mut out = self.clone();
        for (a, b) in out.planes_mut().into_iter().zip(other.planes()) {
            a.iter_mut().zip(b.iter()).for_each(|(x, y)| *x += factor * y);
        }
        out
    }

    fn sub(&self, other: &Self) -> Self {
        self.add_scaled(other, -1.0)
    }

    fn validate(&self) -> Result<()> {
        let grid = self.grid();
        for plane in self.planes() {
            check_len(&grid, plane)?;
            check_finite(plane)?;
        }
        Ok(())
    }
}

/// Discretized scalar image `u`, `f` or potential `v`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        check_len(&grid, &values)?;
        check_finite(&values)?;
        Ok(Self { grid, values })
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        Self {
            grid,
            values: vec![value; grid.len()],
        }
    }

    /// Builds a field from `f(row, col)`.
    pub fn from_fn(grid: Grid, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.len());
        for row in 0..grid.height {
            for col in 0..grid.width {
                values.push(f(row, col));
            }
        }
        Self { grid, values }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[self.grid.index(row, col)]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

impl PlaneField for ScalarField {
    const WEIGHTS: &'static [f64] = &[1.0];

    fn grid(&self) -> Grid {
        self.grid
    }
    fn planes(&self) -> Vec<&[f64]> {
        vec![&self.values]
    }
    fn planes_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.values]
    }
    fn zeros(grid: Grid) -> Self {
        Self::constant(grid, 0.0)
    }
}

/// Two-component field: the auxiliary `w` of TGV-type models or a dual `p`.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    pub grid: Grid,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl VectorField {
    pub fn new(grid: Grid, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let out = Self { grid, x, y };
        out.validate()?;
        Ok(out)
    }

    /// Samples `f(x, y) -> (w1, w2)` at the physical pixel coordinates.
    pub fn sample(grid: Grid, mut f: impl FnMut(f64, f64) -> (f64, f64)) -> Self {
        let mut out = Self::zeros(grid);
        for row in 0..grid.height {
            for col in 0..grid.width {
                let i = grid.index(row, col);
                let (a, b) = f(col as f64 * grid.spacing, row as f64 * grid.spacing);
                out.x[i] = a;
                out.y[i] = b;
            }
        }
        out
    }
}

impl PlaneField for VectorField {
    const WEIGHTS: &'static [f64] = &[1.0, 1.0];

    fn grid(&self) -> Grid {
        self.grid
    }
    fn planes(&self) -> Vec<&[f64]> {
        vec![&self.x, &self.y]
    }
    fn planes_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.x, &mut self.y]
    }
    fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            x: vec![0.0; grid.len()],
            y: vec![0.0; grid.len()],
        }
    }
}

/// Symmetric 2×2 tensor per pixel, `xy` stored once and weighted twice.
#[derive(Clone, Debug, PartialEq)]
pub struct SymTensorField {
    pub grid: Grid,
    pub xx: Vec<f64>,
    pub yy: Vec<f64>,
    pub xy: Vec<f64>,
}

impl SymTensorField {
    pub fn new(grid: Grid, xx: Vec<f64>, yy: Vec<f64>, xy: Vec<f64>) -> Result<Self> {
        let out = Self { grid, xx, yy, xy };
        out.validate()?;
        Ok(out)
    }
}

impl PlaneField for SymTensorField {
    const WEIGHTS: &'static [f64] = &[1.0, 1.0, 2.0];

    fn grid(&self) -> Grid {
        self.grid
    }
    fn planes(&self) -> Vec<&[f64]> {
        vec![&self.xx, &self.yy, &self.xy]
    }
    fn planes_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.xx, &mut self.yy, &mut self.xy]
    }
    fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            xx: vec![0.0; grid.len()],
            yy: vec![0.0; grid.len()],
            xy: vec![0.0; grid.len()],
        }
    }
}

/// General 2×2 tensor per pixel. For `full_grad(w)`, `xy = ∂y w₁` and
/// `yx = ∂x w₂`.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorField {
    pub grid: Grid,
    pub xx: Vec<f64>,
    pub xy: Vec<f64>,
    pub yx: Vec<f64>,
    pub yy: Vec<f64>,
}

impl TensorField {
    pub fn new(grid: Grid, xx: Vec<f64>, xy: Vec<f64>, yx: Vec<f64>, yy: Vec<f64>) -> Result<Self> {
        let out = Self { grid, xx, xy, yx, yy };
        out.validate()?;
        Ok(out)
    }

    /// Symmetric part `(T + Tᵀ)/2`.
    pub fn symmetrize(&self) -> SymTensorField {
        SymTensorField {
            grid: self.grid,
            xx: self.xx.clone(),
            yy: self.yy.clone(),
            xy: self
                .xy
                .iter()
                .zip(&self.yx)
                .map(|(a, b)| 0.5 * (a + b))
                .collect(),
        }
    }
}

impl PlaneField for TensorField {
    const WEIGHTS: &'static [f64] = &[1.0, 1.0, 1.0, 1.0];

    fn grid(&self) -> Grid {
        self.grid
    }
    fn planes(&self) -> Vec<&[f64]> {
        vec![&self.xx, &self.xy, &self.yx, &self.yy]
    }
    fn planes_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.xx, &mut self.xy, &mut self.yx, &mut self.yy]
    }
    fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            xx: vec![0.0; grid.len()],
            xy: vec![0.0; grid.len()],
            yx: vec![0.0; grid.len()],
            yy: vec![0.0; grid.len()],
        }
    }
}

// Slice kernels. These are what the solver calls inside its loop; the
// field-level functions below are thin allocating wrappers.

/// Forward difference along x, zero in the last column.
pub fn dx_fwd_into(grid: &Grid, u: &[f64], out: &mut [f64]) {
    let (w, inv_h) = (grid.width, 1.0 / grid.spacing);
    for (row_in, row_out) in u.chunks_exact(w).zip(out.chunks_exact_mut(w)) {
        for c in 0..w - 1 {
            row_out[c] = (row_in[c + 1] - row_in[c]) * inv_h;
        }
        row_out[w - 1] = 0.0;
    }
}

/// Forward difference along y, zero in the last row.
pub fn dy_fwd_into(grid: &Grid, u: &[f64], out: &mut [f64]) {
    let (w, h, inv_h) = (grid.width, grid.height, 1.0 / grid.spacing);
    for r in 0..h - 1 {
        let base = r * w;
        for c in 0..w {
            out[base + c] = (u[base + w + c] - u[base + c]) * inv_h;
        }
    }
    out[(h - 1) * w..].iter_mut().for_each(|v| *v = 0.0);
}

/// Adds `factor * (−dx_fwdᵀ p)` to `out`, i.e. the backward-difference
/// divergence along x scaled by `factor`.
pub fn add_dx_bwd(grid: &Grid, p: &[f64], factor: f64, out: &mut [f64]) {
    let w = grid.width;
    let s = factor / grid.spacing;
    for (row_p, row_out) in p.chunks_exact(w).zip(out.chunks_exact_mut(w)) {
        row_out[0] += s * row_p[0];
        for c in 1..w - 1 {
            row_out[c] += s * (row_p[c] - row_p[c - 1]);
        }
        row_out[w - 1] -= s * row_p[w - 2];
    }
}

/// Same as [`add_dx_bwd`] along y.
pub fn add_dy_bwd(grid: &Grid, p: &[f64], factor: f64, out: &mut [f64]) {
    let (w, h) = (grid.width, grid.height);
    let s = factor / grid.spacing;
    for c in 0..w {
        out[c] += s * p[c];
    }
    for r in 1..h - 1 {
        let base = r * w;
        for c in 0..w {
            out[base + c] += s * (p[base + c] - p[base - w + c]);
        }
    }
    let last = (h - 1) * w;
    for c in 0..w {
        out[last + c] -= s * p[last - w + c];
    }
}

pub fn grad_fwd_into(grid: &Grid, u: &[f64], gx: &mut [f64], gy: &mut [f64]) {
    dx_fwd_into(grid, u, gx);
    dy_fwd_into(grid, u, gy);
}

/// `out = factor * div_bwd(p)`.
pub fn div_bwd_into(grid: &Grid, px: &[f64], py: &[f64], factor: f64, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    add_dx_bwd(grid, px, factor, out);
    add_dy_bwd(grid, py, factor, out);
}

/// Writes `(xx, yy, xy)` of the symmetrised gradient of `(w1, w2)`.
/// `scratch` must hold one plane.
pub fn sym_grad_into(
    grid: &Grid,
    w1: &[f64],
    w2: &[f64],
    xx: &mut [f64],
    yy: &mut [f64],
    xy: &mut [f64],
    scratch: &mut [f64],
) {
    dx_fwd_into(grid, w1, xx);
    dy_fwd_into(grid, w2, yy);
    dy_fwd_into(grid, w1, xy);
    dx_fwd_into(grid, w2, scratch);
    xy.iter_mut()
        .zip(scratch.iter())
        .for_each(|(a, b)| *a = 0.5 * (*a + b));
}

/// `(o1, o2) = factor * sym_div(q)`, the negative adjoint of [`sym_grad_into`]
/// with `xy` weighted twice.
pub fn sym_div_into(
    grid: &Grid,
    xx: &[f64],
    yy: &[f64],
    xy: &[f64],
    factor: f64,
    o1: &mut [f64],
    o2: &mut [f64],
) {
    o1.iter_mut().for_each(|v| *v = 0.0);
    o2.iter_mut().for_each(|v| *v = 0.0);
    add_dx_bwd(grid, xx, factor, o1);
    add_dy_bwd(grid, xy, factor, o1);
    add_dx_bwd(grid, xy, factor, o2);
    add_dy_bwd(grid, yy, factor, o2);
}

pub fn full_grad_into(
    grid: &Grid,
    w1: &[f64],
    w2: &[f64],
    xx: &mut [f64],
    xy: &mut [f64],
    yx: &mut [f64],
    yy: &mut [f64],
) {
    dx_fwd_into(grid, w1, xx);
    dy_fwd_into(grid, w1, xy);
    dx_fwd_into(grid, w2, yx);
    dy_fwd_into(grid, w2, yy);
}

#[allow(clippy::too_many_arguments)]
pub fn full_div_into(
    grid: &Grid,
    xx: &[f64],
    xy: &[f64],
    yx: &[f64],
    yy: &[f64],
    factor: f64,
    o1: &mut [f64],
    o2: &mut [f64],
) {
    o1.iter_mut().for_each(|v| *v = 0.0);
    o2.iter_mut().for_each(|v| *v = 0.0);
    add_dx_bwd(grid, xx, factor, o1);
    add_dy_bwd(grid, xy, factor, o1);
    add_dx_bwd(grid, yx, factor, o2);
    add_dy_bwd(grid, yy, factor, o2);
}

pub fn grad_fwd(u: &ScalarField) -> VectorField {
    let mut out = VectorField::zeros(u.grid);
    grad_fwd_into(&u.grid, &u.values, &mut out.x, &mut out.y);
    out
}

pub fn div_bwd(p: &VectorField) -> ScalarField {
    let mut out = ScalarField::zeros(p.grid);
    div_bwd_into(&p.grid, &p.x, &p.y, 1.0, &mut out.values);
    out
}

pub fn sym_grad(w: &VectorField) -> SymTensorField {
    let mut out = SymTensorField::zeros(w.grid);
    let mut scratch = vec![0.0; w.grid.len()];
    sym_grad_into(
        &w.grid,
        &w.x,
        &w.y,
        &mut out.xx,
        &mut out.yy,
        &mut out.xy,
        &mut scratch,
    );
    out
}

pub fn sym_div(q: &SymTensorField) -> VectorField {
    let mut out = VectorField::zeros(q.grid);
    sym_div_into(&q.grid, &q.xx, &q.yy, &q.xy, 1.0, &mut out.x, &mut out.y);
    out
}

pub fn full_grad(w: &VectorField) -> TensorField {
    let mut out = TensorField::zeros(w.grid);
    full_grad_into(
        &w.grid,
        &w.x,
        &w.y,
        &mut out.xx,
        &mut out.xy,
        &mut out.yx,
        &mut out.yy,
    );
    out
}

pub fn full_div(t: &TensorField) -> VectorField {
    let mut out = VectorField::zeros(t.grid);
    full_div_into(
        &t.grid, &t.xx, &t.xy, &t.yx, &t.yy, 1.0, &mut out.x, &mut out.y,
    );
    out
}

/// `h² Σ_pixels |v_i|`, with the Frobenius norm for tensor fields.
pub fn radon_norm<F: PlaneField>(field: &F) -> f64 {
    let grid = field.grid();
    let sum: f64 = (0..grid.len()).map(|i| field.pointwise_norm(i)).sum();
    grid.cell_area() * sum
}

/// Power-iteration estimate of `‖A‖₂`.
///
/// `apply_adjoint` must be the adjoint of `apply` with respect to the plain
/// Euclidean inner product on the domain; the range may carry any weights as
/// long as the pair is consistent. Stops when the estimate changes by less
/// than `1e-12` relative or after 20000 iterations.
pub fn op_norm_estimate<A, B>(domain_dim: usize, mut apply: A, mut apply_adjoint: B) -> f64
where
    A: FnMut(&[f64]) -> Vec<f64>,
    B: FnMut(&[f64]) -> Vec<f64>,
{
    const MAX_ITERS: usize = 20_000;
    const REL_TOL: f64 = 1e-12;

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut x: Vec<f64> = (0..domain_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let n0 = norm(&x);
    if n0 == 0.0 {
        return 0.0;
    }
    x.iter_mut().for_each(|v| *v /= n0);

    let mut estimate = 0.0_f64;
    for _ in 0..MAX_ITERS {
        let ax = apply(&x);
        let mut y = apply_adjoint(&ax);
        let ny = norm(&y);
        if ny == 0.0 {
            return 0.0;
        }
        let next = ny.sqrt();
        y.iter_mut().for_each(|v| *v /= ny);
        x = y;
        let converged = (next - estimate).abs() <= REL_TOL * next;
        estimate = next;
        if converged {
            break;
        }
    }
    estimate
}
