//! Quick self-checks of the operator algebra, the model ordering and the
//! proximal maps, used by the `verify` subcommand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::energy::{tv_energy, ModelKind, ModelSpec};
use crate::error::Result;
use crate::grid::{
    div_bwd, full_div, full_grad, grad_fwd, sym_div, sym_grad, Grid, PlaneField, ScalarField, SymTensorField,
    TensorField, VectorField,
};
use crate::solver::{
    inner_min_w, project_global_lq_dual_ball, project_pointwise_ball, prox_l1_fidelity, prox_l2_fidelity,
    SolverOpts,
};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerificationReport {
    pub checks: Vec<Check>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn push(&mut self, name: &'static str, passed: bool, detail: String) {
        self.checks.push(Check { name, passed, detail });
    }
}

fn planes<F: PlaneField>(grid: Grid, rng: &mut ChaCha8Rng) -> F {
    let mut f = F::zeros(grid);
    for p in f.planes_mut() {
        p.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    }
    f
}

/// Worst `|⟨Ax, y⟩ + ⟨x, A*y⟩| / (‖Ax‖‖y‖ + ‖x‖‖A*y‖)` over `trials` pairs.
fn adjoint_gap<X: PlaneField, Y: PlaneField>(
    grid: Grid,
    trials: usize,
    rng: &mut ChaCha8Rng,
    apply: impl Fn(&X) -> Y,
    adjoint: impl Fn(&Y) -> X,
) -> f64 {
    (0..trials)
        .map(|_| {
            let x: X = planes(grid, rng);
            let y: Y = planes(grid, rng);
            let (ax, aty) = (apply(&x), adjoint(&y));
            (ax.inner(&y) + x.inner(&aty)).abs() / (ax.norm() * y.norm() + x.norm() * aty.norm())
        })
        .fold(0.0, f64::max)
}

fn check_adjoints(report: &mut VerificationReport, rng: &mut ChaCha8Rng) {
    let grid = Grid::new(24, 20, 0.7).expect("static grid");
    let gaps = [
        ("adjoint grad/div", adjoint_gap(grid, 30, rng, |u: &ScalarField| grad_fwd(u), div_bwd)),
        ("adjoint sym_grad/sym_div", adjoint_gap(grid, 30, rng, |w: &VectorField| sym_grad(w), |q: &SymTensorField| sym_div(q))),
        ("adjoint full_grad/full_div", adjoint_gap(grid, 30, rng, |w: &VectorField| full_grad(w), |t: &TensorField| full_div(t))),
    ];
    for (name, gap) in gaps {
        report.push(name, gap <= 1e-12, format!("worst relative gap {gap:.2e}"));
    }
}

fn check_kernel(report: &mut VerificationReport, rng: &mut ChaCha8Rng) {
    let grid = Grid::new(20, 18, 0.5).expect("static grid");
    let mut worst = 0.0_f64;
    let mut sym_gap = 0.0_f64;
    for _ in 0..20 {
        let s = rng.gen_range(-2.0..2.0);
        let (c1, c2) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let w = VectorField::sample(grid, |x, y| (-s * y + c1, s * x + c2));
        let e = sym_grad(&w);
        for r in 0..grid.height - 1 {
            for c in 0..grid.width - 1 {
                let i = grid.index(r, c);
                worst = worst.max(e.xx[i].abs()).max(e.yy[i].abs()).max(e.xy[i].abs());
            }
        }
        let v: VectorField = planes(grid, rng);
        sym_gap = sym_gap.max(full_grad(&v).symmetrize().sub(&sym_grad(&v)).max_abs());
    }
    report.push("kernel of E", worst <= 1e-13, format!("max interior |Ew| {worst:.2e}"));
    report.push("symmetrized full gradient", sym_gap == 0.0, format!("max difference {sym_gap:.2e}"));
}

fn check_ordering(report: &mut VerificationReport, rng: &mut ChaCha8Rng) -> Result<()> {
    let grid = Grid::square(16);
    let opts = SolverOpts::default().with_max_iters(20_000);
    let (alpha, beta) = (1.0, 2.0);
    let mut ok = true;
    let mut detail = Vec::new();
    for _ in 0..2 {
        let (a, b) = (rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05));
        let u = ScalarField::from_fn(grid, |r, c| {
            a * r as f64 + b * c as f64 + if r > 5 && c > 4 && r < 12 { 0.5 } else { 0.0 } + rng.gen_range(0.0..0.1)
        });
        let tv = alpha * tv_energy(&u);
        let mut e = Vec::new();
        for kind in [ModelKind::Tgv2, ModelKind::NsTgv2, ModelKind::Ictv] {
            e.push(inner_min_w(&u, &ModelSpec::new(kind, alpha, beta)?, &opts)?.energy);
        }
        let eps = 2.0 * opts.tol * tv;
        ok &= e[0] <= e[1] + eps && e[1] <= e[2] + eps && e[2] <= tv + eps;
        detail.push(format!("{:.5} <= {:.5} <= {:.5} <= {:.5}", e[0], e[1], e[2], tv));
    }
    report.push("ordering TGV <= nsTGV <= ICTV <= TV", ok, detail.join("; "));
    Ok(())
}

/// Minimizer of a convex scalar function on `[lo, hi]` by bisection on the
/// sign of a symmetric difference.
fn scalar_argmin(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let d = 1e-7 * (1.0 + mid.abs());
        if f(mid + d) > f(mid - d) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

fn check_prox(report: &mut VerificationReport, rng: &mut ChaCha8Rng) -> Result<()> {
    let grid = Grid::square(6);
    let u: ScalarField = planes(grid, rng);
    let f: ScalarField = planes(grid, rng);
    let (step, weight) = (0.7, 1.3);

    let l2 = prox_l2_fidelity(&u, &f, step, weight)?;
    let l1 = prox_l1_fidelity(&u, &f, step, weight)?;
    let (mut e2, mut e1) = (0.0_f64, 0.0_f64);
    for i in 0..grid.len() {
        let (a, b) = (u.values[i], f.values[i]);
        let x2 = scalar_argmin(|x| 0.5 * (x - a).powi(2) + step * weight * (x - b).powi(2), -4.0, 4.0);
        let x1 = scalar_argmin(|x| 0.5 * (x - a).powi(2) + step * weight * (x - b).abs(), -4.0, 4.0);
        e2 = e2.max((x2 - l2.values[i]).abs());
        e1 = e1.max((x1 - l1.values[i]).abs());
    }
    report.push("prox L2 fidelity", e2 < 1e-6, format!("max deviation from scalar oracle {e2:.2e}"));
    report.push("prox L1 fidelity", e1 < 1e-6, format!("max deviation from scalar oracle {e1:.2e}"));

    let t: TensorField = planes(grid, rng);
    let p = project_pointwise_ball(&t.scaled(3.0), 1.0);
    let feasible = (0..grid.len()).all(|i| p.pointwise_norm(i) <= 1.0 + 1e-12);
    let idempotent = project_pointwise_ball(&p, 1.0) == p;
    report.push(
        "pointwise ball projection",
        feasible && idempotent,
        format!("feasible {feasible}, idempotent {idempotent}"),
    );

    let s: SymTensorField = planes(grid, rng);
    let big = s.scaled(10.0);
    let (radius, q_dual) = (1.0, 3.0);
    let z = project_global_lq_dual_ball(&big, radius, q_dual)?;
    let norm = |z: &SymTensorField| {
        (grid.cell_area() * (0..grid.len()).map(|i| z.pointwise_norm(i).powf(q_dual)).sum::<f64>()).powf(1.0 / q_dual)
    };
    let on_boundary = (norm(&z) - radius).abs() < 1e-9;
    // Optimality: no feasible point along random directions is closer.
    let d0 = big.sub(&z).norm();
    let mut closer = false;
    for _ in 0..50 {
        let dir: SymTensorField = planes(grid, rng);
        let cand = z.add_scaled(&dir, 1e-3);
        let n = norm(&cand);
        let cand = if n > radius { cand.scaled(radius / n) } else { cand };
        closer |= big.sub(&cand).norm() < d0 - 1e-12;
    }
    report.push(
        "global L^q' ball projection",
        on_boundary && !closer,
        format!("boundary {on_boundary}, improved by probe {closer}"),
    );
    Ok(())
}

/// Runs every check with a fixed seed.
pub fn run_verification() -> Result<VerificationReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7e57);
    let mut report = VerificationReport::default();
    check_adjoints(&mut report, &mut rng);
    check_kernel(&mut report, &mut rng);
    check_prox(&mut report, &mut rng)?;
    check_ordering(&mut report, &mut rng)?;
    Ok(report)
}
