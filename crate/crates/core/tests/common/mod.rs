//! Slow reference computations shared by integration tests. Nothing here
//! calls into the library's operators.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Forward differences with zero in the last column/row, `h = 1`.
pub struct Fd {
    pub rows: usize,
    pub cols: usize,
}

impl Fd {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn dx(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for r in 0..self.rows {
            for c in 0..self.cols - 1 {
                out[r * self.cols + c] = u[r * self.cols + c + 1] - u[r * self.cols + c];
            }
        }
        out
    }

    pub fn dy(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for r in 0..self.rows - 1 {
            for c in 0..self.cols {
                out[r * self.cols + c] = u[(r + 1) * self.cols + c] - u[r * self.cols + c];
            }
        }
        out
    }

    /// Adds the transpose of `dx` applied to `g` into `out`.
    pub fn dx_t_add(&self, g: &[f64], out: &mut [f64]) {
        for r in 0..self.rows {
            for c in 0..self.cols - 1 {
                let i = r * self.cols + c;
                out[i + 1] += g[i];
                out[i] -= g[i];
            }
        }
    }

    pub fn dy_t_add(&self, g: &[f64], out: &mut [f64]) {
        for r in 0..self.rows - 1 {
            for c in 0..self.cols {
                let i = r * self.cols + c;
                out[i + self.cols] += g[i];
                out[i] -= g[i];
            }
        }
    }
}

/// The fixed 16×16 test image: a raised square, a gentle ramp and uniform
/// noise.
pub fn oracle_image() -> Vec<f64> {
    let n = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut f = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            let square = if (4..12).contains(&r) && (4..12).contains(&c) { 0.5 } else { 0.0 };
            f.push(square + 0.02 * c as f64 + rng.gen_range(-0.1..0.1));
        }
    }
    f
}

pub struct OracleResult {
    pub energy: f64,
    pub u: Vec<f64>,
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
}

struct Tgv2L2<'a> {
    fd: Fd,
    f: &'a [f64],
    weight: f64,
    alpha: f64,
    beta: f64,
}

impl Tgv2L2<'_> {
    /// Exact energy of `x = (u, w1, w2)` when `mu == 0`, smoothed otherwise.
    fn value_grad(&self, x: &[f64], mu: f64, grad: Option<&mut [f64]>) -> f64 {
        let n = self.fd.len();
        let (u, w) = x.split_at(n);
        let (w1, w2) = w.split_at(n);
        let (ux, uy) = (self.fd.dx(u), self.fd.dy(u));
        let (w1x, w1y, w2x, w2y) = (self.fd.dx(w1), self.fd.dy(w1), self.fd.dx(w2), self.fd.dy(w2));
        let mu2 = mu * mu;
        let mut e = 0.0;
        let mut ga1 = vec![0.0; n];
        let mut ga2 = vec![0.0; n];
        let mut gxx = vec![0.0; n];
        let mut gyy = vec![0.0; n];
        let mut gxy = vec![0.0; n];
        for i in 0..n {
            let d = u[i] - self.f[i];
            e += self.weight * d * d;
            let (a1, a2) = (ux[i] - w1[i], uy[i] - w2[i]);
            let na = (a1 * a1 + a2 * a2 + mu2).sqrt();
            e += self.alpha * na;
            if na > 0.0 {
                ga1[i] = self.alpha * a1 / na;
                ga2[i] = self.alpha * a2 / na;
            }
            let (bxx, byy, bxy) = (w1x[i], w2y[i], 0.5 * (w1y[i] + w2x[i]));
            let nb = (bxx * bxx + byy * byy + 2.0 * bxy * bxy + mu2).sqrt();
            e += self.beta * nb;
            if nb > 0.0 {
                gxx[i] = self.beta * bxx / nb;
                gyy[i] = self.beta * byy / nb;
                gxy[i] = self.beta * 2.0 * bxy / nb;
            }
        }
        if let Some(g) = grad {
            g.iter_mut().for_each(|v| *v = 0.0);
            let (gu, gw) = g.split_at_mut(n);
            let (g1, g2) = gw.split_at_mut(n);
            for i in 0..n {
                gu[i] = 2.0 * self.weight * (u[i] - self.f[i]);
                g1[i] = -ga1[i];
                g2[i] = -ga2[i];
            }
            self.fd.dx_t_add(&ga1, gu);
            self.fd.dy_t_add(&ga2, gu);
            // xy = (dy w1 + dx w2) / 2
            let half: Vec<f64> = gxy.iter().map(|v| 0.5 * v).collect();
            self.fd.dx_t_add(&gxx, g1);
            self.fd.dy_t_add(&half, g1);
            self.fd.dy_t_add(&gyy, g2);
            self.fd.dx_t_add(&half, g2);
        }
        e
    }
}

/// Minimizes `weight·Σ(u−f)² + α Σ|Du − w| + β Σ|Ew|` on an `n×n` grid with
/// `h = 1` by accelerated gradient descent on a smoothed objective, lowering
/// the smoothing in stages. Returns the best exact energy seen.
pub fn tgv2_l2_oracle(f: &[f64], n: usize, weight: f64, alpha: f64, beta: f64) -> OracleResult {
    let p = Tgv2L2 {
        fd: Fd { rows: n, cols: n },
        f,
        weight,
        alpha,
        beta,
    };
    let len = n * n;
    let mut x = vec![0.0; 3 * len];
    x[..len].copy_from_slice(f);
    let mut best = (p.value_grad(&x, 0.0, None), x.clone());
    let mut g = vec![0.0; 3 * len];
    let mut mu = 1e-1;
    while mu >= 1e-7 {
        let lip = 2.0 * weight + (16.0 * alpha + 8.0 * beta) / mu;
        let step = 1.0 / lip;
        let mut y = x.clone();
        let mut x_prev = x.clone();
        let mut t = 1.0_f64;
        let mut prev_val = f64::INFINITY;
        for _ in 0..60_000 {
            let _ = p.value_grad(&y, mu, Some(&mut g));
            for i in 0..x.len() {
                x[i] = y[i] - step * g[i];
            }
            let val = p.value_grad(&x, mu, None);
            // Function-value restart keeps the momentum from overshooting.
            let t_next = if val > prev_val {
                1.0
            } else {
                0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt())
            };
            let m = if val > prev_val { 0.0 } else { (t - 1.0) / t_next };
            for i in 0..x.len() {
                y[i] = x[i] + m * (x[i] - x_prev[i]);
            }
            x_prev.copy_from_slice(&x);
            t = t_next;
            prev_val = val;
        }
        let exact = p.value_grad(&x, 0.0, None);
        if exact < best.0 {
            best = (exact, x.clone());
        }
        mu /= 10.0;
    }
    let x = best.1;
    OracleResult {
        energy: best.0,
        u: x[..len].to_vec(),
        w1: x[len..2 * len].to_vec(),
        w2: x[2 * len..].to_vec(),
    }
}
