mod common;

use std::time::Instant;

use tgv_core::energy::{FidelitySpec, ModelKind, ModelSpec};
use tgv_core::solver::{solve, SolverOpts};
use tgv_core::{Grid, ScalarField};

#[test]
fn tgv2_l2_energy_matches_slow_oracle() {
    let n = 16;
    let f = common::oracle_image();
    let t = Instant::now();
    let oracle = common::tgv2_l2_oracle(&f, n, 1.0, 0.1, 0.2);
    let t_oracle = t.elapsed();
    let field = ScalarField::new(Grid::square(n), f).unwrap();
    let model = ModelSpec::new(ModelKind::Tgv2, 0.1, 0.2).unwrap();
    let r = solve(&field, &model, &FidelitySpec::l2(), &SolverOpts::default()).unwrap();
    let rel = (r.energy - oracle.energy).abs() / oracle.energy;
    println!("solver {} oracle {} rel {rel:.2e} oracle time {t_oracle:?}", r.energy, oracle.energy);
    assert!(rel < 5e-3);
}

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tgv_core::solver::project_global_lq_dual_ball;
use tgv_core::SymTensorField;

/// Dense matrix of `(u, w) ↦ (Du − w, Ew)` on an `n×n` grid with `h = 1`,
/// the off-diagonal row scaled by √2 so the range norm is Euclidean.
fn dense_tgv_operator(n: usize) -> DMatrix<f64> {
    let fd = common::Fd { rows: n, cols: n };
    let m = n * n;
    let mut k = DMatrix::zeros(5 * m, 3 * m);
    for j in 0..3 * m {
        let mut e = vec![0.0; 3 * m];
        e[j] = 1.0;
        let (u, w) = e.split_at(m);
        let (w1, w2) = w.split_at(m);
        let (ux, uy) = (fd.dx(u), fd.dy(u));
        let (w1x, w1y, w2x, w2y) = (fd.dx(w1), fd.dy(w1), fd.dx(w2), fd.dy(w2));
        for i in 0..m {
            k[(i, j)] = ux[i] - w1[i];
            k[(m + i, j)] = uy[i] - w2[i];
            k[(2 * m + i, j)] = w1x[i];
            k[(3 * m + i, j)] = w2y[i];
            k[(4 * m + i, j)] = std::f64::consts::SQRT_2 * 0.5 * (w1y[i] + w2x[i]);
        }
    }
    k
}

#[test]
fn operator_norm_matches_dense_svd() {
    let n = 8;
    let k = dense_tgv_operator(n);
    let exact = k.singular_values().max();
    let f = ScalarField::from_fn(Grid::square(n), |r, c| ((r * c) % 5) as f64);
    let model = ModelSpec::new(ModelKind::Tgv2, 1.0, 1.0).unwrap();
    let r = solve(&f, &model, &FidelitySpec::l2(), &SolverOpts::default().with_max_iters(1)).unwrap();
    let rel = (r.op_norm - exact).abs() / exact;
    println!("power {} svd {exact} rel {rel:.2e}", r.op_norm);
    assert!(rel < 1e-6);
    // The step sizes must respect the true norm, not only the estimate.
    assert!(r.tau * r.sigma * exact * exact <= 1.0 + 1e-6);

    // TV alone: the gradient block.
    let d = k.view((0, 0), (2 * n * n, n * n)).into_owned();
    let exact_tv = d.singular_values().max();
    let r = solve(&f, &ModelSpec::tv(1.0).unwrap(), &FidelitySpec::l2(), &SolverOpts::default().with_max_iters(1)).unwrap();
    assert!((r.op_norm - exact_tv).abs() / exact_tv < 1e-6, "{} vs {exact_tv}", r.op_norm);
}

/// Frank–Wolfe with exact line search for `min ½‖z − y‖² s.t. ‖z‖_{q'} ≤ radius`
/// where `‖z‖_{q'} = (Σ_i |z_i|^{q'})^{1/q'}` over pixel vectors. Only the
/// linear minimization oracle over the ball is used.
fn frank_wolfe_projection(y: &[[f64; 3]], radius: f64, q_dual: f64, iters: usize) -> Vec<[f64; 3]> {
    let q = q_dual / (q_dual - 1.0);
    let mut z = vec![[0.0; 3]; y.len()];
    for _ in 0..iters {
        let g: Vec<[f64; 3]> = z.iter().zip(y).map(|(a, b)| [a[0] - b[0], a[1] - b[1], a[2] - b[2]]).collect();
        let gn: Vec<f64> = g.iter().map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()).collect();
        let gq = gn.iter().map(|v| v.powf(q)).sum::<f64>().powf(1.0 / q);
        if gq == 0.0 {
            break;
        }
        // argmin over the ball of ⟨g, s⟩
        let s: Vec<[f64; 3]> = g
            .iter()
            .zip(&gn)
            .map(|(v, &n)| {
                if n == 0.0 {
                    [0.0; 3]
                } else {
                    let m = -radius * (n / gq).powf(q - 1.0) / n;
                    [m * v[0], m * v[1], m * v[2]]
                }
            })
            .collect();
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..y.len() {
            for k in 0..3 {
                let d = s[i][k] - z[i][k];
                num -= g[i][k] * d;
                den += d * d;
            }
        }
        if den == 0.0 {
            break;
        }
        let gamma = (num / den).clamp(0.0, 1.0);
        for i in 0..y.len() {
            for k in 0..3 {
                z[i][k] += gamma * (s[i][k] - z[i][k]);
            }
        }
    }
    z
}

#[test]
fn global_ball_projection_matches_frank_wolfe() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let grid = Grid::new(4, 2, 1.0).unwrap();
    for trial in 0..5 {
        let mut planes = vec![vec![0.0; 8]; 3];
        for p in planes.iter_mut() {
            p.iter_mut().for_each(|v| *v = rng.gen_range(-2.0..2.0));
        }
        let field = SymTensorField::new(grid, planes[0].clone(), planes[1].clone(), planes[2].clone()).unwrap();
        let radius = 0.5 + trial as f64 * 0.3;
        let p = project_global_lq_dual_ball(&field, radius, 3.0).unwrap();
        // Euclidean coordinates: the off-diagonal entry counts twice.
        let s2 = std::f64::consts::SQRT_2;
        let y: Vec<[f64; 3]> = (0..8).map(|i| [planes[0][i], planes[1][i], s2 * planes[2][i]]).collect();
        let z = frank_wolfe_projection(&y, radius, 3.0, 200_000);
        let mut worst = 0.0_f64;
        for i in 0..8 {
            worst = worst
                .max((z[i][0] - p.xx[i]).abs())
                .max((z[i][1] - p.yy[i]).abs())
                .max((z[i][2] / s2 - p.xy[i]).abs());
        }
        assert!(worst < 1e-6, "trial {trial}: deviation {worst:.2e}");
    }
}
