//! Model catalog: every regularizer and fidelity energy, evaluated for given
//! primal and auxiliary variables.

use crate::error::{Error, Result};
use crate::grid::{
    full_grad, grad_fwd, radon_norm, sym_grad, PlaneField, ScalarField, SymTensorField,
    VectorField,
};

/// Which regularizer to use.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ModelKind {
    Tv,
    Tgv2,
    NsTgv2,
    /// L^q penalty on `Ew` with `w` held at zero on a boundary band of
    /// `band` pixels.
    Tgv2q { q: f64, band: usize },
    Ictv,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Tv => "tv",
            ModelKind::Tgv2 => "tgv2",
            ModelKind::NsTgv2 => "nstgv2",
            ModelKind::Tgv2q { .. } => "tgv2q",
            ModelKind::Ictv => "ictv",
        }
    }

    pub fn tgv2q(q: f64) -> Self {
        ModelKind::Tgv2q { q, band: 1 }
    }
}

/// Regularizer with its weights. `alpha` multiplies the first-order term,
/// `beta` the second-order one (ignored by TV).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub alpha: f64,
    pub beta: f64,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, alpha: f64, beta: f64) -> Result<Self> {
        let spec = Self { kind, alpha, beta };
        spec.validate()?;
        Ok(spec)
    }

    pub fn tv(alpha: f64) -> Result<Self> {
        Self::new(ModelKind::Tv, alpha, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if self.kind != ModelKind::Tv && !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if let ModelKind::Tgv2q { q, .. } = self.kind {
            if !(q.is_finite() && q > 1.0) {
                return Err(Error::InvalidParameter(format!("q must exceed 1, got {q}")));
            }
        }
        Ok(())
    }
}

/// `weight · |t|^p` fidelity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FidelitySpec {
    pub p: f64,
    pub weight: f64,
}

impl FidelitySpec {
    pub fn new(p: f64, weight: f64) -> Result<Self> {
        if !(p.is_finite() && p >= 1.0) {
            return Err(Error::InvalidParameter(format!("fidelity exponent must be >= 1, got {p}")));
        }
        if !(weight.is_finite() && weight > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "fidelity weight must be positive, got {weight}"
            )));
        }
        Ok(Self { p, weight })
    }

    pub fn l1() -> Self {
        Self { p: 1.0, weight: 1.0 }
    }

    /// `|t|²`.
    pub fn l2() -> Self {
        Self { p: 2.0, weight: 1.0 }
    }

    /// `|t|²/2`.
    pub fn half_l2() -> Self {
        Self { p: 2.0, weight: 0.5 }
    }
}

impl Default for FidelitySpec {
    fn default() -> Self {
        Self::l2()
    }
}

/// `weight · h² · Σ |u − f|^p`.
pub fn fidelity_energy(u: &ScalarField, f: &ScalarField, spec: &FidelitySpec) -> Result<f64> {
    u.grid.ensure_same(&f.grid)?;
    let sum: f64 = if spec.p == 1.0 {
        u.values.iter().zip(&f.values).map(|(a, b)| (a - b).abs()).sum()
    } else if spec.p == 2.0 {
        u.values.iter().zip(&f.values).map(|(a, b)| (a - b) * (a - b)).sum()
    } else {
        u.values
            .iter()
            .zip(&f.values)
            .map(|(a, b)| (a - b).abs().powf(spec.p))
            .sum()
    };
    Ok(spec.weight * u.grid.cell_area() * sum)
}

/// Discrete total variation `|Du|(Ω)` without the `alpha` weight.
pub fn tv_energy(u: &ScalarField) -> f64 {
    radon_norm(&grad_fwd(u))
}

fn first_order_term(u: &ScalarField, w: &VectorField) -> Result<f64> {
    u.grid.ensure_same(&w.grid)?;
    Ok(radon_norm(&grad_fwd(u).sub(w)))
}

/// `α |Du − w|(Ω) + β |Ew|(Ω)`.
pub fn tgv2_energy_given_w(u: &ScalarField, w: &VectorField, alpha: f64, beta: f64) -> Result<f64> {
    Ok(alpha * first_order_term(u, w)? + beta * radon_norm(&sym_grad(w)))
}

/// `α |Du − w|(Ω) + β |Dw|(Ω)`.
pub fn nstgv2_energy_given_w(u: &ScalarField, w: &VectorField, alpha: f64, beta: f64) -> Result<f64> {
    Ok(alpha * first_order_term(u, w)? + beta * radon_norm(&full_grad(w)))
}

/// `(h² Σ ‖T_i‖_F^q)^{1/q}` for a symmetric tensor field.
pub fn lq_norm(t: &SymTensorField, q: f64) -> f64 {
    let grid = t.grid;
    let sum: f64 = (0..grid.len()).map(|i| t.pointwise_norm(i).powf(q)).sum();
    (grid.cell_area() * sum).powf(1.0 / q)
}

/// Largest `|w|` component on the outer `band` pixels.
pub fn band_max_abs(w: &VectorField, band: usize) -> f64 {
    let grid = w.grid;
    let mut max_abs = 0.0_f64;
    for row in 0..grid.height {
        for col in 0..grid.width {
            if grid.in_band(row, col, band) {
                let i = grid.index(row, col);
                max_abs = max_abs.max(w.x[i].abs()).max(w.y[i].abs());
            }
        }
    }
    max_abs
}

/// `α |Du − w|(Ω) + β ‖Ew‖_{L^q}` with `w` required to vanish on the
/// boundary band.
pub fn tgv2q_energy_given_w(
    u: &ScalarField,
    w: &VectorField,
    alpha: f64,
    beta: f64,
    q: f64,
    band: usize,
) -> Result<f64> {
    let max_abs = band_max_abs(w, band);
    if max_abs > 0.0 {
        return Err(Error::BoundaryViolation { max_abs });
    }
    Ok(alpha * first_order_term(u, w)? + beta * lq_norm(&sym_grad(w), q))
}

/// `α |Du − Dv|(Ω) + β |D(Dv)|(Ω)`.
pub fn ictv_energy_given_v(u: &ScalarField, v: &ScalarField, alpha: f64, beta: f64) -> Result<f64> {
    u.grid.ensure_same(&v.grid)?;
    let gv = grad_fwd(v);
    Ok(alpha * first_order_term(u, &gv)? + beta * radon_norm(&full_grad(&gv)))
}

/// Auxiliary variable carried alongside `u`.
#[derive(Clone, Debug, PartialEq)]
pub enum Auxiliary<'a> {
    None,
    W(&'a VectorField),
    V(&'a ScalarField),
}

/// Regularizer value for whichever auxiliary variable the model uses.
pub fn regularizer_energy(u: &ScalarField, aux: Auxiliary<'_>, model: &ModelSpec) -> Result<f64> {
    let (a, b) = (model.alpha, model.beta);
    match (model.kind, aux) {
        (ModelKind::Tv, _) => Ok(a * tv_energy(u)),
        (ModelKind::Tgv2, Auxiliary::W(w)) => tgv2_energy_given_w(u, w, a, b),
        (ModelKind::NsTgv2, Auxiliary::W(w)) => nstgv2_energy_given_w(u, w, a, b),
        (ModelKind::Tgv2q { q, band }, Auxiliary::W(w)) => tgv2q_energy_given_w(u, w, a, b, q, band),
        (ModelKind::Ictv, Auxiliary::V(v)) => ictv_energy_given_v(u, v, a, b),
        (kind, _) => Err(Error::InvalidParameter(format!(
            "wrong auxiliary variable for model {}",
            kind.name()
        ))),
    }
}

/// Scales the q = 1 weight so the L^q penalty dominates the L¹ one on an image
/// with `n_pixels` pixels (Hölder): `beta_base · n_pixels^{(q−1)/q}`.
pub fn beta_scaling(beta_base: f64, q: f64, n_pixels: usize) -> f64 {
    beta_base * (n_pixels as f64).powf((q - 1.0) / q)
}
