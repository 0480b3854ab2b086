//! Primal-dual (Chambolle–Pock) solver for `min_u Φ(u) + R(u)` with every
//! regularizer of [`crate::energy`].
//!
//! All models share one saddle structure
//!
//! ```text
//! min_{u,aux} max_{p,q}  ⟨K(u,aux), (p,q)⟩ + Φ(u) − δ_{|p|≤α}(p) − δ_{Q_β}(q)
//! ```
//!
//! with `K(u,w) = (Du − w, Bw)` for `B ∈ {E, D}`, `K(u,v) = (Du − Dv, D(Dv))`
//! for ICTV and `K u = Du` for TV. `Q_β` is the pointwise Frobenius ball, or
//! the global `L^{q'}` ball for TGV^{2,q}_0.
//!
//! Iterations use the x-then-y form so that `‖z^{k+1} − z^k‖_M` with
//! `M = [[I/τ, −K*], [−K, I/σ]]` is nonincreasing; that quantity, divided by
//! the largest `‖z‖` seen so far, is the reported residual.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use crate::energy::{fidelity_energy, regularizer_energy, Auxiliary, FidelitySpec, ModelKind, ModelSpec};
use crate::error::{Error, Result};
use crate::grid::{
    add_dx_bwd, add_dy_bwd, div_bwd_into, full_div_into, full_grad_into, grad_fwd, grad_fwd_into,
    op_norm_estimate, sym_div_into, sym_grad_into, Grid, PlaneField, ScalarField, SymTensorField,
    VectorField,
};

/// Safety factor applied to the estimated operator norm.
const NORM_MARGIN: f64 = 1.02;

/// Squared norms within a few ulps of the radius count as feasible, which
/// keeps the projections idempotent.
const FEASIBLE_SLACK: f64 = 1.0 + 8.0 * f64::EPSILON;

#[derive(Clone, Debug, PartialEq)]
pub struct SolverOpts {
    pub max_iters: usize,
    /// Stop once the normalized fixed-point residual drops below this.
    pub tol: f64,
    /// Primal step. Derived from the operator norm when `None`.
    pub tau: Option<f64>,
    /// Dual step. Derived from the operator norm when `None`.
    pub sigma: Option<f64>,
    pub theta: f64,
    /// `tau / sigma` used when both steps are derived. `None` picks the
    /// ratio of the primal scale (rms of `|Df|`) to the dual radius.
    pub step_ratio: Option<f64>,
}

impl Default for SolverOpts {
    fn default() -> Self {
        Self {
            max_iters: 5000,
            tol: 1e-5,
            tau: None,
            sigma: None,
            theta: 1.0,
            step_ratio: None,
        }
    }
}

impl SolverOpts {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be positive".into()));
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(Error::InvalidParameter(format!("tol must be positive, got {}", self.tol)));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::InvalidParameter(format!("theta must lie in [0,1], got {}", self.theta)));
        }
        if let Some(r) = self.step_ratio {
            if !(r.is_finite() && r > 0.0) {
                return Err(Error::InvalidParameter("step_ratio must be positive".into()));
            }
        }
        for step in [self.tau, self.sigma].into_iter().flatten() {
            if !(step.is_finite() && step > 0.0) {
                return Err(Error::InvalidParameter(format!("step sizes must be positive, got {step}")));
            }
        }
        Ok(())
    }

    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_step_ratio(mut self, ratio: f64) -> Self {
        self.step_ratio = Some(ratio);
        self
    }
}

/// Result of a solve.
#[derive(Clone, Debug)]
pub struct SolveReport {
    pub model: ModelSpec,
    pub u: ScalarField,
    /// Second-order variable; `grad_fwd(v)` for ICTV, absent for TV.
    pub w: Option<VectorField>,
    /// ICTV potential, zero mean.
    pub v: Option<ScalarField>,
    pub energy: f64,
    pub residual_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub tau: f64,
    pub sigma: f64,
    pub op_norm: f64,
}

// ---------------------------------------------------------------------------
// Proximal maps and projections

/// Prox of `step · weight · |· − f|²`: `(u + 2 s w f) / (1 + 2 s w)`.
pub fn prox_l2_fidelity(u: &ScalarField, f: &ScalarField, step: f64, weight: f64) -> Result<ScalarField> {
    u.grid.ensure_same(&f.grid)?;
    let mut out = u.clone();
    prox_l2_into(&mut out.values, &f.values, step * weight);
    Ok(out)
}

/// Prox of `step · weight · |· − f|`: soft shrinkage of `u − f`.
pub fn prox_l1_fidelity(u: &ScalarField, f: &ScalarField, step: f64, weight: f64) -> Result<ScalarField> {
    u.grid.ensure_same(&f.grid)?;
    let mut out = u.clone();
    prox_l1_into(&mut out.values, &f.values, step * weight);
    Ok(out)
}

fn prox_l2_into(u: &mut [f64], f: &[f64], k: f64) {
    let c = 2.0 * k;
    let d = 1.0 / (1.0 + c);
    u.iter_mut().zip(f).for_each(|(a, b)| *a = b + (*a - b) * d);
}

fn prox_l1_into(u: &mut [f64], f: &[f64], k: f64) {
    u.iter_mut().zip(f).for_each(|(a, b)| *a = b + shrink(*a - b, k));
}

#[inline]
fn shrink(t: f64, k: f64) -> f64 {
    if t > k {
        t - k
    } else if t < -k {
        t + k
    } else {
        0.0
    }
}

fn project_planes_pointwise(planes: &mut [Vec<f64>], weights: &[f64], radius: f64) {
    let r2 = radius * radius;
    let n = planes[0].len();
    match planes {
        [a, b] if weights == [1.0, 1.0] => {
            for i in 0..n {
                let n2 = a[i] * a[i] + b[i] * b[i];
                if n2 > r2 * FEASIBLE_SLACK {
                    let s = radius / n2.sqrt();
                    a[i] *= s;
                    b[i] *= s;
                }
            }
        }
        _ => {
            for i in 0..n {
                let n2: f64 = planes.iter().zip(weights).map(|(p, w)| w * p[i] * p[i]).sum();
                if n2 > r2 * FEASIBLE_SLACK {
                    let s = radius / n2.sqrt();
                    planes.iter_mut().for_each(|p| p[i] *= s);
                }
            }
        }
    }
}

/// Scales every pixel's vector or tensor into the pointwise ball of the given
/// radius (Frobenius norm, `xy` counted twice for symmetric tensors).
pub fn project_pointwise_ball<F: PlaneField>(field: &F, radius: f64) -> F {
    let mut out = field.clone();
    let n = out.grid().len();
    let mut planes = out.planes_mut();
    let r2 = radius * radius;
    for i in 0..n {
        let n2: f64 = planes.iter().zip(F::WEIGHTS).map(|(p, w)| w * p[i] * p[i]).sum();
        if n2 > r2 * FEASIBLE_SLACK {
            let s = radius / n2.sqrt();
            planes.iter_mut().for_each(|p| p[i] *= s);
        }
    }
    out
}

/// Solves `t + λ t^s = a` for `t ∈ [0, a]`, `s > 0`.
fn radial_root(a: f64, lambda: f64, s: f64) -> f64 {
    if a <= 0.0 {
        return 0.0;
    }
    if s == 1.0 {
        return a / (1.0 + lambda);
    }
    if s == 2.0 {
        return 2.0 * a / (1.0 + (1.0 + 4.0 * lambda * a).sqrt());
    }
    let (mut lo, mut hi) = (0.0, a);
    let mut t = a.min((a / lambda).powf(1.0 / s));
    for _ in 0..100 {
        let ts = t.powf(s);
        let phi = t + lambda * ts - a;
        if phi > 0.0 {
            hi = t;
        } else {
            lo = t;
        }
        let dphi = 1.0 + lambda * s * ts / t.max(f64::MIN_POSITIVE);
        let mut next = t - phi / dphi;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - t).abs() <= 1e-15 * a {
            return next;
        }
        t = next;
    }
    t
}

/// Euclidean projection of pixel magnitudes `a_i` onto
/// `{ (area · Σ t_i^{q'})^{1/q'} ≤ radius }`, returned as per-pixel factors
/// `t_i / a_i`.
fn global_lq_factors(magnitudes: &[f64], area: f64, radius: f64, q_dual: f64) -> Result<Option<Vec<f64>>> {
    let target = radius.powf(q_dual);
    let measure = |lambda: f64| -> f64 {
        let s = q_dual - 1.0;
        area * magnitudes
            .iter()
            .map(|&a| radial_root(a, lambda, s).powf(q_dual))
            .sum::<f64>()
    };
    let g0 = area * magnitudes.iter().map(|a| a.powf(q_dual)).sum::<f64>();
    if g0 <= target {
        return Ok(None);
    }

    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    let (mut g_lo, mut g_hi) = (g0, measure(hi));
    let mut doublings = 0;
    while g_hi > target {
        lo = hi;
        g_lo = g_hi;
        hi *= 2.0;
        g_hi = measure(hi);
        doublings += 1;
        if doublings > 200 || !g_hi.is_finite() {
            return Err(Error::RootFind);
        }
    }

    // Illinois-modified regula falsi on g(λ) − target, keeping g(hi) ≤ target.
    let mut side = 0i8;
    let mut converged = false;
    for _ in 0..200 {
        if target - g_hi <= 1e-12 * target || hi - lo <= 1e-15 * hi {
            converged = true;
            break;
        }
        let (f_lo, f_hi) = (g_lo - target, g_hi - target);
        let mut mid = (lo * f_hi - hi * f_lo) / (f_hi - f_lo);
        if !(mid > lo && mid < hi) {
            mid = 0.5 * (lo + hi);
        }
        let g_mid = measure(mid);
        if g_mid > target {
            lo = mid;
            g_lo = g_mid;
            if side == -1 {
                g_hi = target + 0.5 * (g_hi - target);
            }
            side = -1;
        } else {
            hi = mid;
            g_hi = g_mid;
            if side == 1 {
                g_lo = target + 0.5 * (g_lo - target);
            }
            side = 1;
        }
    }
    if !converged {
        return Err(Error::RootFind);
    }
    let s = q_dual - 1.0;
    Ok(Some(
        magnitudes
            .iter()
            .map(|&a| if a > 0.0 { radial_root(a, hi, s) / a } else { 0.0 })
            .collect(),
    ))
}

fn project_planes_global_lq(
    planes: &mut [Vec<f64>],
    weights: &[f64],
    area: f64,
    radius: f64,
    q_dual: f64,
) -> Result<()> {
    let n = planes[0].len();
    let magnitude = |i: usize, planes: &[Vec<f64>]| -> f64 {
        planes
            .iter()
            .zip(weights)
            .map(|(p, w)| w * p[i] * p[i])
            .sum::<f64>()
            .sqrt()
    };
    if q_dual == 2.0 {
        let total: f64 = area
            * (0..n)
                .map(|i| planes.iter().zip(weights).map(|(p, w)| w * p[i] * p[i]).sum::<f64>())
                .sum::<f64>();
        let norm = total.sqrt();
        if norm > radius {
            let s = radius / norm;
            planes.iter_mut().for_each(|p| p.iter_mut().for_each(|v| *v *= s));
        }
        return Ok(());
    }
    let magnitudes: Vec<f64> = (0..n).map(|i| magnitude(i, planes)).collect();
    if let Some(factors) = global_lq_factors(&magnitudes, area, radius, q_dual)? {
        for p in planes.iter_mut() {
            p.iter_mut().zip(&factors).for_each(|(v, s)| *v *= s);
        }
    }
    Ok(())
}

/// Euclidean projection onto `{ z : (h² Σ ‖z_i‖_F^{q'})^{1/q'} ≤ radius }`.
pub fn project_global_lq_dual_ball(q: &SymTensorField, radius: f64, q_dual: f64) -> Result<SymTensorField> {
    if !(q_dual.is_finite() && q_dual > 1.0) {
        return Err(Error::InvalidParameter(format!(
            "dual exponent must lie in (1, inf), got {q_dual}"
        )));
    }
    let mut planes = vec![q.xx.clone(), q.yy.clone(), q.xy.clone()];
    project_planes_global_lq(
        &mut planes,
        SymTensorField::WEIGHTS,
        q.grid.cell_area(),
        radius,
        q_dual,
    )?;
    let [xx, yy, xy]: [Vec<f64>; 3] = planes.try_into().expect("three planes");
    Ok(SymTensorField { grid: q.grid, xx, yy, xy })
}

// ---------------------------------------------------------------------------
// Saddle-point engine

#[derive(Clone, Copy, Debug, PartialEq)]
enum SecondOrder {
    None,
    Sym,
    Full,
    Hessian,
}

/// Flattened linear structure of one model on one grid.
struct Operator {
    grid: Grid,
    kind: ModelKind,
    second: SecondOrder,
    aux_planes: usize,
    scratch: Vec<Vec<f64>>,
}

impl Operator {
    fn new(grid: Grid, kind: ModelKind) -> Self {
        let (second, aux_planes) = match kind {
            ModelKind::Tv => (SecondOrder::None, 0),
            ModelKind::Tgv2 | ModelKind::Tgv2q { .. } => (SecondOrder::Sym, 2),
            ModelKind::NsTgv2 => (SecondOrder::Full, 2),
            ModelKind::Ictv => (SecondOrder::Hessian, 1),
        };
        Self {
            grid,
            kind,
            second,
            aux_planes,
            scratch: vec![vec![0.0; grid.len()]; 2],
        }
    }

    fn primal_planes(&self) -> usize {
        1 + self.aux_planes
    }

    fn dual_weights(&self) -> &'static [f64] {
        match self.second {
            SecondOrder::None => &[1.0, 1.0],
            SecondOrder::Sym => &[1.0, 1.0, 1.0, 1.0, 2.0],
            SecondOrder::Full | SecondOrder::Hessian => &[1.0; 6],
        }
    }

    fn dual_planes(&self) -> usize {
        self.dual_weights().len()
    }

    /// `out = K x`.
    fn apply(&mut self, x: &[Vec<f64>], out: &mut [Vec<f64>]) {
        let g = self.grid;
        let (p, q) = out.split_at_mut(2);
        let [px, py] = p else { unreachable!() };
        grad_fwd_into(&g, &x[0], px, py);
        match self.second {
            SecondOrder::None => {}
            SecondOrder::Sym | SecondOrder::Full => {
                let (w1, w2) = (&x[1], &x[2]);
                px.iter_mut().zip(w1).for_each(|(a, b)| *a -= b);
                py.iter_mut().zip(w2).for_each(|(a, b)| *a -= b);
                if self.second == SecondOrder::Sym {
                    let [xx, yy, xy] = q else { unreachable!() };
                    sym_grad_into(&g, w1, w2, xx, yy, xy, &mut self.scratch[0]);
                } else {
                    let [xx, xy, yx, yy] = q else { unreachable!() };
                    full_grad_into(&g, w1, w2, xx, xy, yx, yy);
                }
            }
            SecondOrder::Hessian => {
                let (s0, s1) = self.scratch.split_at_mut(1);
                let (gx, gy) = (&mut s0[0], &mut s1[0]);
                grad_fwd_into(&g, &x[1], gx, gy);
                px.iter_mut().zip(gx.iter()).for_each(|(a, b)| *a -= b);
                py.iter_mut().zip(gy.iter()).for_each(|(a, b)| *a -= b);
                let [xx, xy, yx, yy] = q else { unreachable!() };
                full_grad_into(&g, gx, gy, xx, xy, yx, yy);
            }
        }
    }

    /// `out = K* y`.
    fn apply_adjoint(&mut self, y: &[Vec<f64>], out: &mut [Vec<f64>]) {
        let g = self.grid;
        let (px, py) = (&y[0], &y[1]);
        div_bwd_into(&g, px, py, -1.0, &mut out[0]);
        match self.second {
            SecondOrder::None => {}
            SecondOrder::Sym | SecondOrder::Full => {
                let (o1, o2) = out[1..].split_at_mut(1);
                let (o1, o2) = (&mut o1[0], &mut o2[0]);
                if self.second == SecondOrder::Sym {
                    sym_div_into(&g, &y[2], &y[3], &y[4], -1.0, o1, o2);
                } else {
                    full_div_into(&g, &y[2], &y[3], &y[4], &y[5], -1.0, o1, o2);
                }
                o1.iter_mut().zip(px).for_each(|(a, b)| *a -= b);
                o2.iter_mut().zip(py).for_each(|(a, b)| *a -= b);
            }
            SecondOrder::Hessian => {
                let (s0, s1) = self.scratch.split_at_mut(1);
                let (tx, ty) = (&mut s0[0], &mut s1[0]);
                full_div_into(&g, &y[2], &y[3], &y[4], &y[5], 1.0, tx, ty);
                tx.iter_mut().zip(px).for_each(|(a, b)| *a += b);
                ty.iter_mut().zip(py).for_each(|(a, b)| *a += b);
                let v = &mut out[1];
                v.iter_mut().for_each(|a| *a = 0.0);
                add_dx_bwd(&g, tx, 1.0, v);
                add_dy_bwd(&g, ty, 1.0, v);
            }
        }
    }

    /// Norm of `K`, or of `K` restricted to the auxiliary planes when `u` is
    /// frozen.
    fn norm_estimate(&mut self, frozen_u: bool) -> f64 {
        let key = (
            self.kind.name(),
            frozen_u,
            self.grid.width,
            self.grid.height,
            self.grid.spacing.to_bits(),
        );
        type NormKey = (&'static str, bool, usize, usize, u64);
        static CACHE: OnceLock<Mutex<HashMap<NormKey, f64>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        if let Some(&v) = cache.lock().expect("norm cache").get(&key) {
            return v;
        }

        let n = self.grid.len();
        let np = self.primal_planes();
        let nd = self.dual_planes();
        let skip = usize::from(frozen_u);
        let weights = self.dual_weights();
        let this = std::cell::RefCell::new(self);
        let unflatten = |flat: &[f64], planes: usize, lead_zero: usize| -> Vec<Vec<f64>> {
            let mut out = vec![vec![0.0; n]; lead_zero];
            out.extend(flat.chunks_exact(n).take(planes - lead_zero).map(|c| c.to_vec()));
            out
        };
        let estimate = op_norm_estimate(
            (np - skip) * n,
            |x| {
                let xs = unflatten(x, np, skip);
                let mut out = vec![vec![0.0; n]; nd];
                this.borrow_mut().apply(&xs, &mut out);
                // Fold the dual weights in so the adjoint below is Euclidean.
                out.iter()
                    .zip(weights)
                    .flat_map(|(p, w)| p.iter().map(move |v| v * w.sqrt()))
                    .collect()
            },
            |y| {
                let ys: Vec<Vec<f64>> = y
                    .chunks_exact(n)
                    .zip(weights)
                    .map(|(c, w)| c.iter().map(|v| v / w.sqrt()).collect())
                    .collect();
                let mut out = vec![vec![0.0; n]; np];
                this.borrow_mut().apply_adjoint(&ys, &mut out);
                out.into_iter().skip(skip).flatten().collect()
            },
        );
        cache.lock().expect("norm cache").insert(key, estimate);
        estimate
    }
}

enum UStep<'a> {
    Fidelity { f: &'a [f64], spec: FidelitySpec },
    Frozen,
}

fn weighted_sq_norm(planes: &[Vec<f64>], weights: &[f64]) -> f64 {
    planes
        .iter()
        .zip(weights)
        .map(|(p, w)| w * p.iter().map(|v| v * v).sum::<f64>())
        .sum()
}

struct Engine<'a> {
    op: Operator,
    model: ModelSpec,
    u_step: UStep<'a>,
    u0: &'a [f64],
}

struct EngineOutput {
    x: Vec<Vec<f64>>,
    residuals: Vec<f64>,
    iterations: usize,
    converged: bool,
    tau: f64,
    sigma: f64,
    op_norm: f64,
}

impl Engine<'_> {
    fn frozen(&self) -> bool {
        matches!(self.u_step, UStep::Frozen)
    }

    /// Energy of `x` given `Kx`.
    fn energy(&self, x: &[Vec<f64>], kx: &[Vec<f64>]) -> f64 {
        let area = self.op.grid.cell_area();
        let n = self.op.grid.len();
        let fid = match &self.u_step {
            UStep::Frozen => 0.0,
            UStep::Fidelity { f, spec } => {
                let s: f64 = if spec.p == 1.0 {
                    x[0].iter().zip(*f).map(|(a, b)| (a - b).abs()).sum()
                } else {
                    x[0].iter().zip(*f).map(|(a, b)| (a - b) * (a - b)).sum()
                };
                spec.weight * area * s
            }
        };
        let first: f64 = (0..n)
            .map(|i| (kx[0][i] * kx[0][i] + kx[1][i] * kx[1][i]).sqrt())
            .sum();
        let weights = self.op.dual_weights();
        let pointwise_second = |i: usize| -> f64 {
            kx[2..]
                .iter()
                .zip(&weights[2..])
                .map(|(p, w)| w * p[i] * p[i])
                .sum::<f64>()
                .sqrt()
        };
        let second = match (self.op.second, self.model.kind) {
            (SecondOrder::None, _) => 0.0,
            (_, ModelKind::Tgv2q { q, .. }) => {
                (area * (0..n).map(|i| pointwise_second(i).powf(q)).sum::<f64>()).powf(1.0 / q)
            }
            _ => area * (0..n).map(pointwise_second).sum::<f64>(),
        };
        fid + self.model.alpha * area * first + self.model.beta * second
    }

    fn prox_primal(&self, x: &mut [Vec<f64>], tau: f64) {
        match &self.u_step {
            UStep::Frozen => x[0].copy_from_slice(self.u0),
            UStep::Fidelity { f, spec } => {
                if spec.p == 1.0 {
                    prox_l1_into(&mut x[0], f, tau * spec.weight);
                } else {
                    prox_l2_into(&mut x[0], f, tau * spec.weight);
                }
            }
        }
        match self.model.kind {
            ModelKind::Tgv2q { band, .. } => {
                let g = self.op.grid;
                for row in 0..g.height {
                    for col in 0..g.width {
                        if g.in_band(row, col, band) {
                            let i = g.index(row, col);
                            x[1][i] = 0.0;
                            x[2][i] = 0.0;
                        }
                    }
                }
            }
            ModelKind::Ictv => {
                let mean = x[1].iter().sum::<f64>() / x[1].len() as f64;
                x[1].iter_mut().for_each(|v| *v -= mean);
            }
            _ => {}
        }
    }

    fn prox_dual(&self, y: &mut [Vec<f64>]) -> Result<()> {
        let (p, q) = y.split_at_mut(2);
        project_planes_pointwise(p, &[1.0, 1.0], self.model.alpha);
        if self.op.second == SecondOrder::None {
            return Ok(());
        }
        let weights = &self.op.dual_weights()[2..];
        match self.model.kind {
            ModelKind::Tgv2q { q: exponent, .. } => project_planes_global_lq(
                q,
                weights,
                self.op.grid.cell_area(),
                self.model.beta,
                exponent / (exponent - 1.0),
            ),
            _ => {
                project_planes_pointwise(q, weights, self.model.beta);
                Ok(())
            }
        }
    }

    /// Balances primal and dual progress: rms gradient magnitude of the data
    /// over the typical pointwise size of the dual variables.
    fn auto_step_ratio(&self) -> f64 {
        let g = self.op.grid;
        let n = g.len();
        let mut gx = vec![0.0; n];
        let mut gy = vec![0.0; n];
        grad_fwd_into(&g, self.u0, &mut gx, &mut gy);
        let rms = (gx.iter().chain(&gy).map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        let beta = match self.model.kind {
            ModelKind::Tv => 0.0,
            ModelKind::Tgv2q { q, .. } => {
                let q_dual = q / (q - 1.0);
                self.model.beta / (n as f64 * g.cell_area()).powf(1.0 / q_dual)
            }
            _ => self.model.beta,
        };
        let dual = self.model.alpha.max(beta);
        if rms > 0.0 {
            (rms / dual).clamp(1e-4, 1e4)
        } else {
            1.0
        }
    }

    fn steps(&mut self, opts: &SolverOpts) -> Result<(f64, f64, f64)> {
        let norm = self.op.norm_estimate(self.frozen());
        let safe = NORM_MARGIN * norm.max(f64::MIN_POSITIVE);
        let (tau, sigma) = match (opts.tau, opts.sigma) {
            (Some(t), Some(s)) => (t, s),
            (Some(t), None) => (t, 1.0 / (t * safe * safe)),
            (None, Some(s)) => (1.0 / (s * safe * safe), s),
            (None, None) => {
                let ratio = opts.step_ratio.unwrap_or_else(|| self.auto_step_ratio());
                (ratio / safe, 1.0 / (ratio * safe))
            }
        };
        let product = tau * sigma * norm * norm;
        if product > 1.0 + 1e-12 {
            return Err(Error::StepSize { product });
        }
        Ok((tau, sigma, norm))
    }

    fn run(mut self, x0: Vec<Vec<f64>>, opts: &SolverOpts) -> Result<EngineOutput> {
        opts.validate()?;
        let (tau, sigma, op_norm) = self.steps(opts)?;
        let n = self.op.grid.len();
        let np = self.op.primal_planes();
        let nd = self.op.dual_planes();
        let weights = self.op.dual_weights();
        let primal_weights = vec![1.0; np];
        let skip = usize::from(self.frozen());
        let theta = opts.theta;

        let mut x = x0;
        let mut x_old = x.clone();
        let mut y = vec![vec![0.0; n]; nd];
        let mut y_old = y.clone();
        let mut kx = vec![vec![0.0; n]; nd];
        let mut kx_old = kx.clone();
        let mut kty = vec![vec![0.0; n]; np];

        self.prox_primal(&mut x, tau);
        self.op.apply(&x, &mut kx);
        let mut best_energy = self.energy(&x, &kx);
        let mut best_x = x.clone();
        let mut scale_max = 0.0_f64;
        let mut residuals = Vec::new();
        let mut converged = false;
        let mut iterations = 0;

        for k in 0..opts.max_iters {
            iterations = k + 1;
            self.op.apply_adjoint(&y, &mut kty);
            std::mem::swap(&mut x, &mut x_old);
            for ((xi, xo), ki) in x.iter_mut().zip(&x_old).zip(&kty) {
                for ((a, b), c) in xi.iter_mut().zip(xo).zip(ki) {
                    *a = b - tau * c;
                }
            }
            self.prox_primal(&mut x, tau);

            std::mem::swap(&mut kx, &mut kx_old);
            self.op.apply(&x, &mut kx);

            std::mem::swap(&mut y, &mut y_old);
            for (((yi, yo), kn), ko) in y.iter_mut().zip(&y_old).zip(&kx).zip(&kx_old) {
                for (((a, b), c), d) in yi.iter_mut().zip(yo).zip(kn).zip(ko) {
                    *a = b + sigma * ((1.0 + theta) * c - theta * d);
                }
            }
            self.prox_dual(&mut y)?;

            let mut dx2 = 0.0;
            for (a, b) in x[skip..].iter().zip(&x_old[skip..]) {
                dx2 += a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
            }
            let mut dy2 = 0.0;
            let mut cross = 0.0;
            for ((((yn, yo), kn), ko), w) in y.iter().zip(&y_old).zip(&kx).zip(&kx_old).zip(weights) {
                let mut sy = 0.0;
                let mut sc = 0.0;
                for i in 0..n {
                    let d = yn[i] - yo[i];
                    sy += d * d;
                    sc += (kn[i] - ko[i]) * d;
                }
                dy2 += w * sy;
                cross += w * sc;
            }
            let m2 = (dx2 / tau + dy2 / sigma - 2.0 * cross).max(0.0);
            let scale = (weighted_sq_norm(&x[skip..], &primal_weights[skip..]) / tau
                + weighted_sq_norm(&y, weights) / sigma)
                .sqrt();
            scale_max = scale_max.max(scale);
            let residual = if m2 == 0.0 { 0.0 } else { m2.sqrt() / scale_max };

            let energy = self.energy(&x, &kx);
            if !energy.is_finite() || !residual.is_finite() {
                return Err(Error::Diverged { iteration: iterations });
            }
            if energy < best_energy {
                best_energy = energy;
                for (b, a) in best_x.iter_mut().zip(&x) {
                    b.copy_from_slice(a);
                }
            }
            residuals.push(residual);
            if residual < opts.tol {
                converged = true;
                break;
            }
        }

        Ok(EngineOutput {
            x: best_x,
            residuals,
            iterations,
            converged,
            tau,
            sigma,
            op_norm,
        })
    }
}

/// Optional starting point for the auxiliary variable.
#[derive(Clone, Debug, Default)]
pub enum WarmStart {
    #[default]
    Cold,
    W(VectorField),
    V(ScalarField),
}

fn initial_primal(op: &Operator, u0: &[f64], warm: &WarmStart) -> Result<Vec<Vec<f64>>> {
    let n = op.grid.len();
    let mut x = vec![u0.to_vec()];
    match (op.aux_planes, warm) {
        (0, _) => {}
        (2, WarmStart::W(w)) => {
            w.grid.ensure_same(&op.grid)?;
            x.push(w.x.clone());
            x.push(w.y.clone());
        }
        (1, WarmStart::V(v)) => {
            v.grid.ensure_same(&op.grid)?;
            x.push(v.values.clone());
        }
        (planes, WarmStart::Cold) => x.extend((0..planes).map(|_| vec![0.0; n])),
        _ => {
            return Err(Error::InvalidParameter(
                "warm start does not match the model's auxiliary variable".into(),
            ))
        }
    }
    Ok(x)
}

fn build_report(
    model: &ModelSpec,
    grid: Grid,
    out: EngineOutput,
    f: Option<(&ScalarField, &FidelitySpec)>,
) -> Result<SolveReport> {
    let mut planes = out.x.into_iter();
    let u = ScalarField {
        grid,
        values: planes.next().expect("u plane"),
    };
    let (w, v) = match model.kind {
        ModelKind::Tv => (None, None),
        ModelKind::Ictv => {
            let v = ScalarField {
                grid,
                values: planes.next().expect("v plane"),
            };
            (Some(grad_fwd(&v)), Some(v))
        }
        _ => {
            let x = planes.next().expect("w1 plane");
            let y = planes.next().expect("w2 plane");
            (Some(VectorField { grid, x, y }), None)
        }
    };
    let aux = match (&w, &v) {
        (_, Some(v)) => Auxiliary::V(v),
        (Some(w), None) => Auxiliary::W(w),
        _ => Auxiliary::None,
    };
    let mut energy = regularizer_energy(&u, aux, model)?;
    if let Some((f, spec)) = f {
        energy += fidelity_energy(&u, f, spec)?;
    }
    Ok(SolveReport {
        model: *model,
        u,
        w,
        v,
        energy,
        residual_history: out.residuals,
        iterations: out.iterations,
        converged: out.converged,
        tau: out.tau,
        sigma: out.sigma,
        op_norm: out.op_norm,
    })
}

/// Minimizes `weight·h²Σ|u − f|^p + R(u)` over `u` and the model's
/// auxiliary variable. Only `p ∈ {1, 2}` is supported.
pub fn solve(f: &ScalarField, model: &ModelSpec, fid: &FidelitySpec, opts: &SolverOpts) -> Result<SolveReport> {
    solve_from(f, model, fid, opts, &WarmStart::Cold)
}

pub fn solve_from(
    f: &ScalarField,
    model: &ModelSpec,
    fid: &FidelitySpec,
    opts: &SolverOpts,
    warm: &WarmStart,
) -> Result<SolveReport> {
    model.validate()?;
    if fid.p != 1.0 && fid.p != 2.0 {
        return Err(Error::InvalidParameter(format!(
            "solver supports fidelity exponents 1 and 2, got {}",
            fid.p
        )));
    }
    FidelitySpec::new(fid.p, fid.weight)?;
    let op = Operator::new(f.grid, model.kind);
    let x0 = initial_primal(&op, &f.values, warm)?;
    let engine = Engine {
        op,
        model: *model,
        u_step: UStep::Fidelity {
            f: &f.values,
            spec: *fid,
        },
        u0: &f.values,
    };
    let out = engine.run(x0, opts)?;
    build_report(model, f.grid, out, Some((f, fid)))
}

/// Evaluates the regularizer at a frozen `u` by minimizing over the
/// auxiliary variable alone.
pub fn inner_min_w(u: &ScalarField, model: &ModelSpec, opts: &SolverOpts) -> Result<SolveReport> {
    inner_min_from(u, model, opts, &WarmStart::Cold)
}

pub fn inner_min_from(u: &ScalarField, model: &ModelSpec, opts: &SolverOpts, warm: &WarmStart) -> Result<SolveReport> {
    model.validate()?;
    opts.validate()?;
    if model.kind == ModelKind::Tv {
        return Ok(SolveReport {
            model: *model,
            u: u.clone(),
            w: None,
            v: None,
            energy: regularizer_energy(u, Auxiliary::None, model)?,
            residual_history: Vec::new(),
            iterations: 0,
            converged: true,
            tau: 0.0,
            sigma: 0.0,
            op_norm: 0.0,
        });
    }
    let op = Operator::new(u.grid, model.kind);
    let x0 = initial_primal(&op, &u.values, warm)?;
    let engine = Engine {
        op,
        model: *model,
        u_step: UStep::Frozen,
        u0: &u.values,
    };
    let out = engine.run(x0, opts)?;
    build_report(model, u.grid, out, None)
}
