//! Measurements taken on solutions: PSNR, the singular-part surrogate,
//! jump masks, mollified approximation traces and the Korn ratio.

use crate::energy::band_max_abs;
use crate::error::{Error, Result};
use crate::grid::{full_grad, grad_fwd, radon_norm, sym_grad, Grid, PlaneField, ScalarField, VectorField};

/// `10·log10(peak²/MSE)`. Returns `f64::INFINITY` when the fields coincide.
pub fn psnr(u: &ScalarField, reference: &ScalarField, peak: f64) -> Result<f64> {
    u.grid.ensure_same(&reference.grid)?;
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(Error::InvalidParameter(format!("peak must be positive, got {peak}")));
    }
    let mse = u
        .values
        .iter()
        .zip(&reference.values)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / u.values.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// `|Du − w|(Ω)`, which bounds the singular part of `Du` for optimal pairs.
pub fn singular_surrogate(u: &ScalarField, w: &VectorField) -> Result<f64> {
    u.grid.ensure_same(&w.grid)?;
    Ok(radon_norm(&grad_fwd(u).sub(w)))
}

/// Pixels whose forward-difference jump `|Du|·h` exceeds `threshold`.
#[derive(Clone, Debug, PartialEq)]
pub struct JumpMask {
    pub grid: Grid,
    pub mask: Vec<bool>,
    pub threshold: f64,
}

impl JumpMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Half the dynamic range of `u`.
pub fn default_jump_threshold(u: &ScalarField) -> f64 {
    let (lo, hi) = u.min_max();
    0.5 * (hi - lo)
}

pub fn jump_mask(u: &ScalarField, threshold: f64) -> Result<JumpMask> {
    if threshold.is_nan() || threshold < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "jump threshold must be nonnegative, got {threshold}"
        )));
    }
    let g = grad_fwd(u);
    let h = u.grid.spacing;
    let mask = (0..u.grid.len())
        .map(|i| g.pointwise_norm(i) * h > threshold)
        .collect();
    Ok(JumpMask {
        grid: u.grid,
        mask,
        threshold,
    })
}

/// Mean of `u` over `inside` minus its mean over `outside`.
pub fn contrast_measure(u: &ScalarField, inside: &[bool], outside: &[bool]) -> Result<f64> {
    // Shifting by one sample keeps constant fields at exactly zero.
    let shift = u.values[0];
    let mean_over = |mask: &[bool]| -> Result<f64> {
        if mask.len() != u.values.len() {
            return Err(Error::InvalidParameter(format!(
                "region mask has {} entries, field has {}",
                mask.len(),
                u.values.len()
            )));
        }
        let (sum, count) = u
            .values
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .fold((0.0, 0usize), |(s, c), (v, _)| (s + (v - shift), c + 1));
        if count == 0 {
            return Err(Error::InvalidParameter("empty region mask".into()));
        }
        Ok(sum / count as f64)
    };
    Ok(mean_over(inside)? - mean_over(outside)?)
}

/// Rectangular pixel window, rows `row0..row1` and columns `col0..col1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub row0: usize,
    pub row1: usize,
    pub col0: usize,
    pub col1: usize,
}

impl Window {
    pub fn full(grid: &Grid) -> Self {
        Self {
            row0: 0,
            row1: grid.height,
            col0: 0,
            col1: grid.width,
        }
    }

    /// Window shrunk by `margin` pixels on every side.
    pub fn interior(grid: &Grid, margin: usize) -> Self {
        Self {
            row0: margin,
            row1: grid.height.saturating_sub(margin),
            col0: margin,
            col1: grid.width.saturating_sub(margin),
        }
    }

    fn indices(self, grid: Grid) -> impl Iterator<Item = usize> {
        (self.row0..self.row1).flat_map(move |r| (self.col0..self.col1).map(move |c| grid.index(r, c)))
    }
}

fn window_sum(grid: Grid, window: Window, f: impl Fn(usize) -> f64) -> f64 {
    grid.cell_area() * window.indices(grid).map(f).sum::<f64>()
}

/// One smoothing scale of [`strict_mollify`].
#[derive(Clone, Debug, PartialEq)]
pub struct TraceEntry {
    pub scale: f64,
    /// `‖u_ε − u‖₁` on the window.
    pub u_l1: f64,
    /// `‖w_ε − w‖₁` on the window.
    pub w_l1: f64,
    /// `|Du_ε − w_ε|` on the window.
    pub first_order: f64,
    /// `|Ew_ε|` on the window.
    pub second_order: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApproxTrace {
    pub window: Window,
    pub entries: Vec<TraceEntry>,
    /// Unsmoothed `‖u‖₁`, `‖w‖₁`, `|Du − w|` and `|Ew|` on the same window.
    pub u_l1_norm: f64,
    pub w_l1_norm: f64,
    pub first_order: f64,
    pub second_order: f64,
}

/// Normalized triangular weights `max(0, 1 − |j|h/ε)` for `j = −r..=r`.
pub fn triangular_kernel(scale: f64, spacing: f64) -> Vec<f64> {
    let ratio = scale / spacing;
    let radius = (ratio.ceil() as usize).saturating_sub(1);
    let raw: Vec<f64> = (-(radius as isize)..=radius as isize)
        .map(|j| (1.0 - j.unsigned_abs() as f64 / ratio).max(0.0))
        .collect();
    let mass: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / mass).collect()
}

/// Separable convolution; pixels whose stencil leaves the grid keep their value.
fn mollify_plane(grid: Grid, values: &[f64], kernel: &[f64]) -> Vec<f64> {
    let r = kernel.len() / 2;
    let (w, h) = (grid.width, grid.height);
    let mut pass = values.to_vec();
    for row in 0..h {
        for col in r..w - r {
            let base = row * w + col - r;
            pass[row * w + col] = kernel.iter().enumerate().map(|(j, k)| k * values[base + j]).sum();
        }
    }
    let mut out = pass.clone();
    for row in r..h - r {
        for col in 0..w {
            out[row * w + col] = kernel
                .iter()
                .enumerate()
                .map(|(j, k)| k * pass[(row + j - r) * w + col])
                .sum();
        }
    }
    out
}

/// Mollifies `(u, w)` at each scale and records the four approximation
/// quantities on the interior window that no kernel reaches past.
///
/// Scales are lengths in the units of the grid spacing and must be strictly
/// decreasing.
pub fn strict_mollify(u: &ScalarField, w: &VectorField, scales: &[f64]) -> Result<ApproxTrace> {
    u.grid.ensure_same(&w.grid)?;
    let grid = u.grid;
    if scales.is_empty() {
        return Err(Error::InvalidParameter("no smoothing scales given".into()));
    }
    if scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidParameter("smoothing scales must be positive".into()));
    }
    if scales.windows(2).any(|p| p[1] >= p[0]) {
        return Err(Error::InvalidParameter("smoothing scales must be strictly decreasing".into()));
    }
    let kernels: Vec<Vec<f64>> = scales.iter().map(|&s| triangular_kernel(s, grid.spacing)).collect();
    let limit = grid.width.min(grid.height) / 2;
    let support = kernels[0].len();
    if support > limit {
        return Err(Error::KernelTooLarge { support, limit });
    }
    // One extra pixel so forward differences stay inside the smoothed region.
    let window = Window::interior(&grid, support / 2 + 1);

    let reference_first = grad_fwd(u).sub(w);
    let reference_second = sym_grad(w);
    let mut trace = ApproxTrace {
        window,
        entries: Vec::with_capacity(scales.len()),
        u_l1_norm: window_sum(grid, window, |i| u.values[i].abs()),
        w_l1_norm: window_sum(grid, window, |i| w.pointwise_norm(i)),
        first_order: window_sum(grid, window, |i| reference_first.pointwise_norm(i)),
        second_order: window_sum(grid, window, |i| reference_second.pointwise_norm(i)),
    };

    for (&scale, kernel) in scales.iter().zip(&kernels) {
        let us = ScalarField {
            grid,
            values: mollify_plane(grid, &u.values, kernel),
        };
        let ws = VectorField {
            grid,
            x: mollify_plane(grid, &w.x, kernel),
            y: mollify_plane(grid, &w.y, kernel),
        };
        let first = grad_fwd(&us).sub(&ws);
        let second = sym_grad(&ws);
        let dw = ws.sub(w);
        trace.entries.push(TraceEntry {
            scale,
            u_l1: window_sum(grid, window, |i| (us.values[i] - u.values[i]).abs()),
            w_l1: window_sum(grid, window, |i| dw.pointwise_norm(i)),
            first_order: window_sum(grid, window, |i| first.pointwise_norm(i)),
            second_order: window_sum(grid, window, |i| second.pointwise_norm(i)),
        });
    }
    Ok(trace)
}

/// `(Σ‖∇w‖_F^q / Σ‖Ew‖_F^q)^{1/q}` for `w` vanishing on the one-pixel band.
pub fn korn_ratio(w: &VectorField, q: f64) -> Result<f64> {
    let max_abs = band_max_abs(w, 1);
    if max_abs > 0.0 {
        return Err(Error::BoundaryViolation { max_abs });
    }
    korn_ratio_in(w, q, Window::full(&w.grid))
}

/// Korn ratio restricted to `window`, without the boundary condition.
pub fn korn_ratio_in(w: &VectorField, q: f64, window: Window) -> Result<f64> {
    if !(q >= 1.0 && q.is_finite()) {
        return Err(Error::InvalidParameter(format!("Korn exponent must be >= 1, got {q}")));
    }
    let grid = w.grid;
    let full = full_grad(w);
    let sym = sym_grad(w);
    let num = window_sum(grid, window, |i| full.pointwise_norm(i).powf(q));
    let den = window_sum(grid, window, |i| sym.pointwise_norm(i).powf(q));
    if den == 0.0 {
        return Err(Error::DegenerateProbe);
    }
    Ok((num / den).powf(1.0 / q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::tv_energy;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn square(n: usize, lo: usize, hi: usize) -> ScalarField {
        ScalarField::from_fn(Grid::square(n), |r, c| {
            if (lo..hi).contains(&r) && (lo..hi).contains(&c) {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn psnr_limits_and_formula() {
        let g = Grid::square(8);
        let a = ScalarField::from_fn(g, |r, c| (r * 8 + c) as f64 / 64.0);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);

        let b = a.add_scaled(&ScalarField::constant(g, 1.0), 2.0);
        assert!(psnr(&b, &a, 2.0).unwrap().abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = ScalarField::from_fn(g, |_, _| rng.gen_range(0.0..1.0));
        let mut mse = 0.0;
        for i in 0..64 {
            mse += (a.values[i] - c.values[i]).powi(2);
        }
        mse /= 64.0;
        let expect = 10.0 * (1.0 / mse).log10();
        assert!((psnr(&c, &a, 1.0).unwrap() - expect).abs() < 1e-12);
        assert!(psnr(&c, &a, 0.0).is_err());
    }

    #[test]
    fn psnr_drops_with_noise_level() {
        let g = Grid::square(32);
        let clean = ScalarField::from_fn(g, |r, _| r as f64 / 31.0);
        let mut means = Vec::new();
        for sigma in [0.02, 0.05, 0.1, 0.2] {
            let mut acc = 0.0;
            for seed in 0..20 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let noisy = ScalarField::from_fn(g, |r, c| {
                    clean.at(r, c) + sigma * rng.sample::<f64, _>(rand_distr::StandardNormal)
                });
                acc += psnr(&noisy, &clean, 1.0).unwrap();
            }
            means.push(acc / 20.0);
        }
        assert!(means.windows(2).all(|p| p[1] < p[0]), "{means:?}");
    }

    #[test]
    fn surrogate_basics() {
        let u = square(16, 4, 12);
        assert_eq!(singular_surrogate(&u, &grad_fwd(&u)).unwrap(), 0.0);
        let zero = VectorField::zeros(u.grid);
        assert_eq!(singular_surrogate(&u, &zero).unwrap(), tv_energy(&u));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = VectorField::sample(u.grid, |_, _| (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        assert!(singular_surrogate(&u, &w).unwrap() > 0.0);
    }

    #[test]
    fn jump_mask_marks_square_edges() {
        let u = square(16, 4, 12);
        let m = jump_mask(&u, default_jump_threshold(&u)).unwrap();
        assert_eq!(m.threshold, 0.5);
        for r in 0..16 {
            for c in 0..16 {
                let v = u.at(r, c);
                let edge = (c + 1 < 16 && u.at(r, c + 1) != v) || (r + 1 < 16 && u.at(r + 1, c) != v);
                assert_eq!(m.mask[u.grid.index(r, c)], edge, "pixel ({r},{c})");
            }
        }
        assert!(m.count() > 0);
        assert_eq!(jump_mask(&u, f64::INFINITY).unwrap().count(), 0);
    }

    #[test]
    fn jump_mask_ignores_smooth_ramp() {
        let u = ScalarField::from_fn(Grid::square(32), |_, c| c as f64 / 31.0);
        assert_eq!(jump_mask(&u, 0.5).unwrap().count(), 0);
        assert!(jump_mask(&u, -1.0).is_err());
    }

    #[test]
    fn contrast_of_indicator() {
        let u = square(16, 4, 12);
        let inside: Vec<bool> = u.values.iter().map(|&v| v == 1.0).collect();
        let outside: Vec<bool> = inside.iter().map(|b| !b).collect();
        assert_eq!(contrast_measure(&u, &inside, &outside).unwrap(), 1.0);
        let flat = ScalarField::constant(u.grid, 0.3);
        assert_eq!(contrast_measure(&flat, &inside, &outside).unwrap(), 0.0);
        assert!(contrast_measure(&u, &vec![false; 256], &outside).is_err());
        assert!(contrast_measure(&u, &inside[..10], &outside).is_err());
    }

    #[test]
    fn kernel_mass_and_shape() {
        for s in [0.5, 1.0, 1.5, 2.0, 3.7, 8.0] {
            let k = triangular_kernel(s, 1.0);
            assert_eq!(k.len() % 2, 1);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            assert!(k.iter().all(|&v| v > 0.0));
        }
        assert_eq!(triangular_kernel(1.0, 1.0), vec![1.0]);
        let k = triangular_kernel(2.0, 1.0);
        assert_eq!(k.len(), 3);
        assert!((k[0] - 0.25).abs() < 1e-15 && (k[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn mollify_preserves_affine_interior() {
        let g = Grid::square(24);
        let u = ScalarField::from_fn(g, |r, c| 0.3 * r as f64 - 0.1 * c as f64 + 2.0);
        let out = mollify_plane(g, &u.values, &triangular_kernel(3.0, 1.0));
        for i in 0..g.len() {
            assert!((out[i] - u.values[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn smooth_blob_trace_is_close_at_fine_scale() {
        let n = 64;
        let g = Grid::square(n);
        let c = (n - 1) as f64 / 2.0;
        let u = ScalarField::from_fn(g, |r, col| {
            let d2 = (r as f64 - c).powi(2) + (col as f64 - c).powi(2);
            (-d2 / 200.0).exp()
        });
        let w = grad_fwd(&u).scaled(0.5);
        let t = strict_mollify(&u, &w, &[6.0, 4.0, 2.0, 1.5]).unwrap();
        let last = t.entries.last().unwrap();
        assert!(last.u_l1 < 0.01 * t.u_l1_norm);
        assert!(last.w_l1 < 0.01 * t.w_l1_norm);
        assert!((last.first_order - t.first_order).abs() < 0.01 * t.first_order);
        assert!((last.second_order - t.second_order).abs() < 0.01 * t.second_order);
    }

    #[test]
    fn indicator_trace_decreases() {
        let u = square(64, 20, 44);
        let w = VectorField::zeros(u.grid);
        let t = strict_mollify(&u, &w, &[8.0, 6.0, 4.0, 3.0, 2.0, 1.5]).unwrap();
        for p in t.entries.windows(2) {
            assert!(p[1].u_l1 <= p[0].u_l1 + 1e-12);
        }
        assert_eq!(t.entries[0].w_l1, 0.0);
        for e in &t.entries {
            assert!(e.first_order <= t.first_order + 1e-9);
        }
    }

    #[test]
    fn mollify_rejects_bad_scales() {
        let u = square(16, 4, 12);
        let w = VectorField::zeros(u.grid);
        assert!(strict_mollify(&u, &w, &[]).is_err());
        assert!(strict_mollify(&u, &w, &[2.0, 3.0]).is_err());
        assert!(strict_mollify(&u, &w, &[2.0, -1.0]).is_err());
        assert!(matches!(
            strict_mollify(&u, &w, &[6.0]),
            Err(Error::KernelTooLarge { support: 11, limit: 8 })
        ));
    }

    fn zero_band(mut w: VectorField) -> VectorField {
        let g = w.grid;
        for r in 0..g.height {
            for c in 0..g.width {
                if g.in_band(r, c, 1) {
                    let i = g.index(r, c);
                    w.x[i] = 0.0;
                    w.y[i] = 0.0;
                }
            }
        }
        w
    }

    #[test]
    fn korn_ratio_hand_stencil() {
        let n = 8;
        let g = Grid::square(n);
        let w = zero_band(VectorField::sample(g, |x, _| (x, 0.0)));
        // Independent evaluation: w2 = 0 so ‖∇w‖² = a² + b² and
        // ‖Ew‖² = a² + b²/2 with a = ∂x w1, b = ∂y w1.
        let w1 = |r: usize, c: usize| if r == 0 || c == 0 || r == n - 1 || c == n - 1 { 0.0 } else { c as f64 };
        let (mut num, mut den) = (0.0, 0.0);
        for r in 0..n {
            for c in 0..n {
                let a = if c + 1 < n { w1(r, c + 1) - w1(r, c) } else { 0.0 };
                let b = if r + 1 < n { w1(r + 1, c) - w1(r, c) } else { 0.0 };
                num += a * a + b * b;
                den += a * a + 0.5 * b * b;
            }
        }
        let expect = (num / den).sqrt();
        assert!((korn_ratio(&w, 2.0).unwrap() - expect).abs() < 1e-12);
        assert!(expect > 1.0);
    }

    #[test]
    fn korn_ratio_of_stretch_is_one_inside() {
        let g = Grid::square(16);
        let w = VectorField::sample(g, |x, y| (x, y));
        let r = korn_ratio_in(&w, 2.0, Window::interior(&g, 1)).unwrap();
        assert!((r - 1.0).abs() < 1e-14);
        assert!(matches!(korn_ratio(&w, 2.0), Err(Error::BoundaryViolation { .. })));
    }

    #[test]
    fn korn_ratio_at_least_one() {
        let g = Grid::square(20);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..30 {
            let w = zero_band(VectorField::sample(g, |_, _| (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))));
            for q in [1.0, 1.5, 2.0, 4.0] {
                assert!(korn_ratio(&w, q).unwrap() >= 1.0 - 1e-10);
            }
        }
    }

    #[test]
    fn korn_ratio_degenerate_probe() {
        let g = Grid::square(8);
        let w = VectorField::zeros(g);
        assert!(matches!(korn_ratio(&w, 2.0), Err(Error::DegenerateProbe)));
        assert!(korn_ratio(&w, 0.5).is_err());
    }
}
