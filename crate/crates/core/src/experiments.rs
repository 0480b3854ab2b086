//! Synthetic inputs, parameter sweeps and report files.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{contrast_measure, default_jump_threshold, jump_mask, psnr, singular_surrogate};
use crate::energy::{beta_scaling, FidelitySpec, ModelKind, ModelSpec};
use crate::error::{Error, Result};
use crate::grid::{Grid, PlaneField, ScalarField, VectorField};
use crate::pgm::{write_atomic, PgmFormat, PgmImage};
use crate::solver::{solve, SolveReport, SolverOpts};

/// Centered square on a square domain.
///
/// Pixel `(r, c)` is inside when both `|r − m|` and `|c − m|` are below
/// `half_width`, with `m = (size − 1)/2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhantomSpec {
    pub size: usize,
    pub half_width: f64,
    pub contrast: f64,
    pub background: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            size: 129,
            half_width: 32.0,
            contrast: 1.0,
            background: 0.0,
        }
    }
}

impl PhantomSpec {
    pub fn new(size: usize, half_width: f64) -> Result<Self> {
        let spec = Self {
            size,
            half_width,
            ..Self::default()
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let center = (self.size as f64 - 1.0) / 2.0;
        if self.size < 3 || self.half_width.is_nan() || self.half_width <= 0.0 || self.half_width > center {
            return Err(Error::InvalidParameter(format!(
                "square of half-width {} does not fit strictly inside a {}-pixel domain",
                self.half_width, self.size
            )));
        }
        if !self.contrast.is_finite() || !self.background.is_finite() {
            return Err(Error::InvalidParameter("phantom levels must be finite".into()));
        }
        Ok(())
    }

    fn inside(&self, row: usize, col: usize) -> bool {
        let center = (self.size as f64 - 1.0) / 2.0;
        (row as f64 - center).abs() < self.half_width && (col as f64 - center).abs() < self.half_width
    }
}

pub fn make_phantom(spec: &PhantomSpec) -> Result<ScalarField> {
    spec.validate()?;
    let level = spec.background + spec.contrast;
    Ok(ScalarField::from_fn(Grid::square(spec.size), |r, c| {
        if spec.inside(r, c) {
            level
        } else {
            spec.background
        }
    }))
}

/// Inside and outside masks of the phantom square.
pub fn phantom_regions(spec: &PhantomSpec) -> Result<(Vec<bool>, Vec<bool>)> {
    spec.validate()?;
    let n = spec.size;
    let inside: Vec<bool> = (0..n * n).map(|i| spec.inside(i / n, i % n)).collect();
    let outside = inside.iter().map(|b| !b).collect();
    Ok((inside, outside))
}

/// Smooth test image in `[0, 1]`: a raised bump `sin²(πx)·sin²(πy)` with
/// flat borders plus a constant disk step. Flat-region regularizers
/// staircase the bump.
pub fn staircase_image(n: usize) -> Result<ScalarField> {
    let grid = Grid::new(n, n, 1.0)?;
    let s = (n - 1) as f64;
    let pi = std::f64::consts::PI;
    Ok(ScalarField::from_fn(grid, |r, c| {
        let (x, y) = (c as f64 / s, r as f64 / s);
        let bump = ((pi * x).sin() * (pi * y).sin()).powi(2);
        let disk = (x - 0.68).powi(2) + (y - 0.35).powi(2) < 0.12 * 0.12;
        0.1 + 0.6 * bump + if disk { 0.25 } else { 0.0 }
    }))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseKind {
    None,
    Gaussian { sigma: f64 },
    /// Each pixel is replaced by the image minimum or maximum with
    /// probability `fraction`.
    SaltPepper { fraction: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn gaussian(sigma: f64, seed: u64) -> Self {
        Self {
            kind: NoiseKind::Gaussian { sigma },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            NoiseKind::Gaussian { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                Err(Error::InvalidParameter(format!("noise sigma must be >= 0, got {sigma}")))
            }
            NoiseKind::SaltPepper { fraction } if !(0.0..=1.0).contains(&fraction) => Err(
                Error::InvalidParameter(format!("flip fraction must be in [0, 1], got {fraction}")),
            ),
            _ => Ok(()),
        }
    }
}

pub fn add_noise(f: &ScalarField, spec: &NoiseSpec) -> Result<ScalarField> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = f.clone();
    match spec.kind {
        NoiseKind::None => {}
        NoiseKind::Gaussian { sigma } => {
            for v in &mut out.values {
                *v += sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        NoiseKind::SaltPepper { fraction } => {
            let (lo, hi) = f.min_max();
            for v in &mut out.values {
                if rng.gen_bool(fraction) {
                    *v = if rng.gen_bool(0.5) { hi } else { lo };
                }
            }
        }
    }
    Ok(out)
}

/// What each sweep row is measured against.
#[derive(Clone, Debug)]
pub struct Instruments {
    /// Clean image for PSNR.
    pub reference: ScalarField,
    pub peak: f64,
    /// Inside/outside masks for the contrast column.
    pub regions: Option<(Vec<bool>, Vec<bool>)>,
    pub jump_threshold: f64,
}

impl Instruments {
    /// Peak 1 and the default jump threshold of `reference`.
    pub fn new(reference: ScalarField) -> Self {
        let jump_threshold = default_jump_threshold(&reference);
        Self {
            reference,
            peak: 1.0,
            regions: None,
            jump_threshold,
        }
    }

    pub fn with_regions(mut self, inside: Vec<bool>, outside: Vec<bool>) -> Self {
        self.regions = Some((inside, outside));
        self
    }
}

/// One CSV row. Column order follows field order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub model: String,
    pub q: Option<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub energy: f64,
    pub psnr: f64,
    pub singular_surrogate: f64,
    pub jump_pixels: usize,
    pub contrast: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
}

pub const CSV_COLUMNS: [&str; 11] = [
    "model",
    "q",
    "alpha",
    "beta",
    "energy",
    "psnr",
    "singular_surrogate",
    "jump_pixels",
    "contrast",
    "iterations",
    "converged",
];

#[derive(Clone, Debug)]
pub struct SweepReport {
    pub fidelity: FidelitySpec,
    pub rows: Vec<SweepRow>,
    /// Solver output behind each row, in row order.
    pub solutions: Vec<SolveReport>,
    /// Inputs echoed into the manifest, in insertion order.
    pub inputs: Vec<(String, String)>,
}

impl SweepReport {
    pub fn all_converged(&self) -> bool {
        self.rows.iter().all(|r| r.converged)
    }
}

fn measure(report: &SolveReport, inst: &Instruments) -> Result<SweepRow> {
    let u = &report.u;
    let zero;
    let w = match &report.w {
        Some(w) => w,
        None => {
            zero = VectorField::zeros(u.grid);
            &zero
        }
    };
    let contrast = match &inst.regions {
        Some((inside, outside)) => Some(contrast_measure(u, inside, outside)?),
        None => None,
    };
    let q = match report.model.kind {
        ModelKind::Tgv2q { q, .. } => Some(q),
        _ => None,
    };
    Ok(SweepRow {
        model: report.model.kind.name().to_string(),
        q,
        alpha: report.model.alpha,
        beta: report.model.beta,
        energy: report.energy,
        psnr: psnr(u, &inst.reference, inst.peak)?,
        singular_surrogate: singular_surrogate(u, w)?,
        jump_pixels: jump_mask(u, inst.jump_threshold)?.count(),
        contrast,
        iterations: report.iterations,
        converged: report.converged,
    })
}

fn run_models(
    f: &ScalarField,
    models: &[ModelSpec],
    fid: &FidelitySpec,
    opts: &SolverOpts,
    inst: &Instruments,
) -> Result<(Vec<SweepRow>, Vec<SolveReport>)> {
    f.grid.ensure_same(&inst.reference.grid)?;
    let results: Vec<Result<(SweepRow, SolveReport)>> = models
        .par_iter()
        .map(|m| {
            let report = solve(f, m, fid, opts)?;
            Ok((measure(&report, inst)?, report))
        })
        .collect();
    let mut rows = Vec::with_capacity(models.len());
    let mut solutions = Vec::with_capacity(models.len());
    for r in results {
        let (row, sol) = r?;
        rows.push(row);
        solutions.push(sol);
    }
    Ok((rows, solutions))
}

fn common_inputs(f: &ScalarField, fid: &FidelitySpec, opts: &SolverOpts) -> Vec<(String, String)> {
    vec![
        ("width".into(), f.grid.width.to_string()),
        ("height".into(), f.grid.height.to_string()),
        ("spacing".into(), f.grid.spacing.to_string()),
        ("fidelity_p".into(), fid.p.to_string()),
        ("fidelity_weight".into(), fid.weight.to_string()),
        ("max_iters".into(), opts.max_iters.to_string()),
        ("tol".into(), opts.tol.to_string()),
        ("theta".into(), opts.theta.to_string()),
    ]
}

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Solves `kind` once per β (in parallel). Rows come out ordered by β
/// descending.
pub fn beta_sweep(
    f: &ScalarField,
    alpha: f64,
    betas: &[f64],
    kind: ModelKind,
    fid: &FidelitySpec,
    opts: &SolverOpts,
    inst: &Instruments,
) -> Result<SweepReport> {
    let mut sorted = betas.to_vec();
    if sorted.iter().any(|b| !b.is_finite()) {
        return Err(Error::InvalidParameter("beta values must be finite".into()));
    }
    sorted.sort_by(|a, b| b.total_cmp(a));
    let models = sorted
        .iter()
        .map(|&b| ModelSpec::new(kind, alpha, b))
        .collect::<Result<Vec<_>>>()?;
    let (rows, solutions) = run_models(f, &models, fid, opts, inst)?;
    let mut inputs = vec![
        ("experiment".into(), "beta_sweep".into()),
        ("model".into(), kind.name().into()),
        ("alpha".into(), alpha.to_string()),
        ("betas".into(), join(&sorted)),
    ];
    if let ModelKind::Tgv2q { q, band } = kind {
        inputs.push(("q".into(), q.to_string()));
        inputs.push(("band".into(), band.to_string()));
    }
    inputs.extend(common_inputs(f, fid, opts));
    Ok(SweepReport {
        fidelity: *fid,
        rows,
        solutions,
        inputs,
    })
}

/// TV followed by one TGV-type solve per exponent, with β scaled by
/// `beta_scaling(beta_base, q, pixels)`. `q = 1` selects plain TGV².
pub fn q_comparison(
    f: &ScalarField,
    alpha: f64,
    beta_base: f64,
    qs: &[f64],
    fid: &FidelitySpec,
    opts: &SolverOpts,
    inst: &Instruments,
) -> Result<SweepReport> {
    let pixels = f.grid.len();
    let mut models = vec![ModelSpec::tv(alpha)?];
    for &q in qs {
        let kind = if q == 1.0 { ModelKind::Tgv2 } else { ModelKind::tgv2q(q) };
        models.push(ModelSpec::new(kind, alpha, beta_scaling(beta_base, q, pixels))?);
    }
    let (mut rows, solutions) = run_models(f, &models, fid, opts, inst)?;
    for (row, &q) in rows.iter_mut().skip(1).zip(qs) {
        row.q = Some(q);
    }
    let mut inputs = vec![
        ("experiment".into(), "q_comparison".into()),
        ("alpha".into(), alpha.to_string()),
        ("beta_base".into(), beta_base.to_string()),
        ("qs".into(), join(qs)),
    ];
    inputs.extend(common_inputs(f, fid, opts));
    Ok(SweepReport {
        fidelity: *fid,
        rows,
        solutions,
        inputs,
    })
}

pub fn rows_to_csv(rows: &[SweepRow]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(CSV_COLUMNS)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn parse_csv(data: &[u8]) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_reader(data);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_COLUMNS {
        return Err(Error::InvalidParameter(format!("unexpected CSV header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn read_report_csv(path: &Path) -> Result<Vec<SweepRow>> {
    parse_csv(&fs::read(path)?)
}

/// Writes `report.csv`, `manifest.txt` and one 16-bit PGM per solution
/// (`u_00.pgm`, ...) into `dir`, each through a temporary file.
pub fn emit_report(report: &SweepReport, dir: &Path, extra: &[(String, String)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_atomic(&dir.join("report.csv"), &rows_to_csv(&report.rows)?)?;

    let mut manifest = String::new();
    for (k, v) in report.inputs.iter().chain(extra) {
        manifest.push_str(&format!("{k} = {v}\n"));
    }
    manifest.push_str(&format!("rows = {}\n", report.rows.len()));
    write_atomic(&dir.join("manifest.txt"), manifest.as_bytes())?;

    for (k, sol) in report.solutions.iter().enumerate() {
        let image = PgmImage::from_field(&sol.u, u16::MAX)?;
        write_atomic(&dir.join(format!("u_{k:02}.pgm")), &image.encode(PgmFormat::Raw))?;
    }
    Ok(())
}
