//! Argument handling and dispatch for the `tgv` binary.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use tgv_core::analysis::strict_mollify;
use tgv_core::energy::{FidelitySpec, ModelKind, ModelSpec};
use tgv_core::experiments::{
    add_noise, beta_sweep, emit_report, make_phantom, phantom_regions, q_comparison, staircase_image, Instruments,
    NoiseKind, NoiseSpec, PhantomSpec, SweepReport,
};
use tgv_core::pgm::{read_image, write_atomic, write_image, PgmFormat, PgmImage};
use tgv_core::solver::{solve, SolverOpts};
use tgv_core::verify::run_verification;
use tgv_core::{Error as CoreError, ScalarField};

/// Environment variable consulted when no thread count is given.
pub const THREADS_ENV: &str = "TGV_THREADS";

pub const DEFAULT_SWEEP_BETAS: [f64; 8] = [60.0, 50.0, 40.0, 30.0, 20.0, 5.0, 2.0, 0.1];
pub const DEFAULT_COMPARE_ALPHA: f64 = 0.08;
pub const DEFAULT_COMPARE_BETA_BASE: f64 = 0.32;
/// TGV^{2,q} solves need more iterations than the other models.
pub const DEFAULT_COMPARE_MAX_ITERS: usize = 10_000;

/// Scales `8, 4` followed by `1 + 2^{1-k}`, `k = 0..=9`.
pub fn default_scales() -> Vec<f64> {
    let mut s = vec![8.0, 4.0];
    s.extend((0..10).map(|k| 1.0 + 2f64.powi(1 - k)));
    s
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Range(String),
    #[error("{0}")]
    MissingInput(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    NotConverged(String),
    #[error("{0}")]
    VerifyFailed(String),
    #[error("{0}")]
    Pgm(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Range(_) => 3,
            CliError::MissingInput(_) => 4,
            CliError::Io(_) => 5,
            CliError::NotConverged(_) => 6,
            CliError::VerifyFailed(_) => 7,
            CliError::Pgm(_) => 8,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let msg = e.to_string();
        match e {
            CoreError::InvalidParameter(_)
            | CoreError::StepSize { .. }
            | CoreError::KernelTooLarge { .. }
            | CoreError::BoundaryViolation { .. } => CliError::Range(msg),
            CoreError::Pgm(_) | CoreError::InvalidGrid(_) | CoreError::NonFinite { .. } => CliError::Pgm(msg),
            CoreError::Io(_) | CoreError::Csv(_) => CliError::Io(msg),
            _ => CliError::Failed(msg),
        }
    }
}

/// Comma-separated list of reals.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatList(pub Vec<f64>);

impl FromStr for FloatList {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|e| format!("'{t}': {e}")))
            .collect::<Result<Vec<_>, _>>()
            .map(FloatList)
    }
}

impl fmt::Display for FloatList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(f64::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

macro_rules! settings {
    ($($field:ident : $ty:ty => $help:literal,)*) => {
        /// Every tunable. Each field is both a `--flag` and a config-file key.
        #[derive(Args, Clone, Debug, Default, PartialEq)]
        pub struct Settings {
            $(
                #[arg(long, allow_negative_numbers = true, help = $help)]
                pub $field: Option<$ty>,
            )*
        }

        impl Settings {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];

            fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
                match key {
                    $(stringify!($field) => {
                        self.$field = Some(value.parse::<$ty>().map_err(|e| {
                            CliError::Usage(format!("bad value '{value}' for key '{key}': {e}"))
                        })?);
                    })*
                    _ => return Err(CliError::Usage(format!("unknown config key '{key}'"))),
                }
                Ok(())
            }

            /// Values in `over` win.
            pub fn overlay(self, over: Settings) -> Settings {
                Settings { $($field: over.$field.or(self.$field),)* }
            }
        }
    };
}

settings! {
    model: String => "Regularizer: tv, tgv2, nstgv2, tgv2q or ictv",
    alpha: f64 => "Weight of the first-order term",
    beta: f64 => "Weight of the second-order term",
    q: f64 => "Exponent of the tgv2q second-order norm (> 1)",
    band: usize => "Width of the zero band for tgv2q",
    fidelity_p: f64 => "Fidelity exponent (1 or 2)",
    fidelity_weight: f64 => "Fidelity weight",
    max_iters: usize => "Iteration cap",
    tol: f64 => "Residual tolerance",
    theta: f64 => "Extrapolation parameter in [0, 1]",
    step_ratio: f64 => "Primal/dual step ratio tau/sigma (automatic if unset)",
    input: PathBuf => "Input PGM image",
    output: PathBuf => "Output file",
    out_dir: PathBuf => "Output directory for sweep reports",
    size: usize => "Side length of synthetic inputs",
    half_width: f64 => "Half-width of the phantom square",
    contrast: f64 => "Phantom contrast",
    background: f64 => "Phantom background level",
    noise: String => "Noise model: none, gaussian or salt-pepper",
    noise_level: f64 => "Gaussian sigma or salt-pepper fraction",
    seed: u64 => "Noise seed",
    betas: FloatList => "Comma-separated beta values",
    qs: FloatList => "Comma-separated exponents (1 selects tgv2)",
    beta_base: f64 => "Unscaled beta for compare-q",
    scales: FloatList => "Comma-separated decreasing mollifier scales",
    threads: usize => "Worker threads (also TGV_THREADS)",
}

#[derive(Parser, Debug)]
#[command(name = "tgv", version, about = "Second-order total-variation denoising and experiments")]
struct Cli {
    /// Config file of `key = value` lines; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand, Debug)]
enum Sub {
    /// Denoise one PGM image.
    Denoise(Settings),
    /// Solve once per beta and write a report.
    SweepBeta(Settings),
    /// Compare TV with the tgv2/tgv2q family on a noisy input.
    CompareQ(Settings),
    /// Trace mollified approximations of a solution pair.
    Approx(Settings),
    /// Run the built-in invariant checks.
    Verify(Settings),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Denoise,
    SweepBeta,
    CompareQ,
    Approx,
    Verify,
}

/// Fully resolved and validated run description.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub model: ModelSpec,
    pub fidelity: FidelitySpec,
    pub opts: SolverOpts,
    pub settings: Settings,
    pub threads: Option<usize>,
}

/// Parses `key = value` lines. Blank lines and `#` comments are ignored;
/// dashes in keys are read as underscores.
pub fn parse_config(text: &str) -> Result<Settings, CliError> {
    let mut s = Settings::default();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected 'key = value'", n + 1)))?;
        s.set(&key.trim().replace('-', "_"), value.trim())?;
    }
    Ok(s)
}

fn model_kind(name: &str, q: Option<f64>, band: Option<usize>) -> Result<ModelKind, CliError> {
    Ok(match name {
        "tv" => ModelKind::Tv,
        "tgv2" => ModelKind::Tgv2,
        "nstgv2" => ModelKind::NsTgv2,
        "ictv" => ModelKind::Ictv,
        "tgv2q" => ModelKind::Tgv2q {
            q: q.unwrap_or(2.0),
            band: band.unwrap_or(1),
        },
        other => return Err(CliError::Usage(format!("unknown model '{other}'"))),
    })
}

fn range(msg: String) -> CliError {
    CliError::Range(msg)
}

fn validate(command: Command, s: &Settings) -> Result<(ModelSpec, FidelitySpec, SolverOpts), CliError> {
    if let Some(q) = s.q {
        if !(q > 1.0 && q.is_finite()) {
            return Err(range(format!("q must be > 1, got {q}")));
        }
    }
    if s.band == Some(0) {
        return Err(range("band must be at least 1".into()));
    }
    let (alpha, beta) = match command {
        Command::Denoise => (0.1, 0.2),
        Command::CompareQ => (DEFAULT_COMPARE_ALPHA, DEFAULT_COMPARE_BETA_BASE),
        _ => (10.0, 5.0),
    };
    let kind = model_kind(s.model.as_deref().unwrap_or("tgv2"), s.q, s.band)?;
    let model = ModelSpec::new(kind, s.alpha.unwrap_or(alpha), s.beta.unwrap_or(beta))?;
    let weight = if command == Command::CompareQ { 0.5 } else { 1.0 };
    let fidelity = FidelitySpec::new(s.fidelity_p.unwrap_or(2.0), s.fidelity_weight.unwrap_or(weight))?;
    if fidelity.p != 1.0 && fidelity.p != 2.0 {
        return Err(range(format!("fidelity_p must be 1 or 2, got {}", fidelity.p)));
    }
    let mut opts = SolverOpts::default();
    if command == Command::CompareQ {
        opts.max_iters = DEFAULT_COMPARE_MAX_ITERS;
    }
    if let Some(v) = s.max_iters {
        opts.max_iters = v;
    }
    if let Some(v) = s.tol {
        opts.tol = v;
    }
    if let Some(v) = s.theta {
        opts.theta = v;
    }
    opts.step_ratio = s.step_ratio;
    opts.validate()?;
    if let Some(r) = s.step_ratio {
        if !(r > 0.0 && r.is_finite()) {
            return Err(range(format!("step_ratio must be positive, got {r}")));
        }
    }
    for (name, list) in [("betas", &s.betas), ("scales", &s.scales)] {
        if let Some(FloatList(v)) = list {
            if v.is_empty() || v.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
                return Err(range(format!("{name} must be positive")));
            }
        }
    }
    if let Some(FloatList(v)) = &s.qs {
        if v.iter().any(|x| !(*x >= 1.0 && x.is_finite())) {
            return Err(range("qs must be >= 1".into()));
        }
    }
    if s.threads == Some(0) {
        return Err(range("threads must be positive".into()));
    }
    Ok((model, fidelity, opts))
}

fn threads_from_env() -> Result<Option<usize>, CliError> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(range(format!("{THREADS_ENV} must be a positive integer, got '{v}'"))),
        },
        Err(_) => Ok(None),
    }
}

/// Parses `argv` (including the program name), merges the config file and
/// validates everything.
pub fn parse_args<I, T>(argv: I) -> Result<RunConfig, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(|e| CliError::Usage(e.to_string()))?;
    let (command, flags) = match cli.command {
        Sub::Denoise(s) => (Command::Denoise, s),
        Sub::SweepBeta(s) => (Command::SweepBeta, s),
        Sub::CompareQ(s) => (Command::CompareQ, s),
        Sub::Approx(s) => (Command::Approx, s),
        Sub::Verify(s) => (Command::Verify, s),
    };
    let file = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::MissingInput(format!("cannot read config {}: {e}", path.display())))?;
            parse_config(&text)?
        }
        None => Settings::default(),
    };
    let settings = file.overlay(flags);
    let (model, fidelity, opts) = validate(command, &settings)?;
    let threads = match settings.threads {
        Some(n) => Some(n),
        None => threads_from_env()?,
    };
    Ok(RunConfig {
        command,
        model,
        fidelity,
        opts,
        settings,
        threads,
    })
}

fn load_input(path: &Path) -> Result<PgmImage, CliError> {
    if !path.exists() {
        return Err(CliError::MissingInput(format!("input not found: {}", path.display())));
    }
    Ok(read_image(path)?)
}

fn noise_spec(s: &Settings, default_kind: &str, default_level: f64) -> Result<NoiseSpec, CliError> {
    let level = s.noise_level.unwrap_or(default_level);
    let kind = match s.noise.as_deref().unwrap_or(default_kind) {
        "none" => NoiseKind::None,
        "gaussian" => NoiseKind::Gaussian { sigma: level },
        "salt-pepper" | "salt_pepper" => NoiseKind::SaltPepper { fraction: level },
        other => return Err(CliError::Usage(format!("unknown noise model '{other}'"))),
    };
    let spec = NoiseSpec {
        kind,
        seed: s.seed.unwrap_or(2024),
    };
    spec.validate()?;
    Ok(spec)
}

/// The half width defaults to a quarter of the side, 32 at the default 129.
fn phantom_spec(s: &Settings) -> Result<PhantomSpec, CliError> {
    let size = s.size.unwrap_or(129);
    let spec = PhantomSpec {
        size,
        half_width: s.half_width.unwrap_or(size.saturating_sub(1) as f64 / 4.0),
        contrast: s.contrast.unwrap_or(1.0),
        background: s.background.unwrap_or(0.0),
    };
    spec.validate()?;
    Ok(spec)
}

fn noise_entries(spec: &NoiseSpec) -> Vec<(String, String)> {
    let (kind, level) = match spec.kind {
        NoiseKind::None => ("none", 0.0),
        NoiseKind::Gaussian { sigma } => ("gaussian", sigma),
        NoiseKind::SaltPepper { fraction } => ("salt-pepper", fraction),
    };
    vec![
        ("noise".into(), kind.into()),
        ("noise_level".into(), level.to_string()),
        ("seed".into(), spec.seed.to_string()),
    ]
}

fn convergence(report: &SweepReport) -> Result<(), CliError> {
    if report.all_converged() {
        Ok(())
    } else {
        let n = report.rows.iter().filter(|r| !r.converged).count();
        Err(CliError::NotConverged(format!("{n} of {} solves hit the iteration cap", report.rows.len())))
    }
}

fn run_denoise(cfg: &RunConfig) -> Result<(), CliError> {
    let s = &cfg.settings;
    let input = s
        .input
        .as_ref()
        .ok_or_else(|| CliError::MissingInput("denoise needs --input".into()))?;
    let output = s
        .output
        .as_ref()
        .ok_or_else(|| CliError::Usage("denoise needs --output".into()))?;
    let image = load_input(input)?;
    let f = image.to_field()?;
    let r = solve(&f, &cfg.model, &cfg.fidelity, &cfg.opts)?;
    write_image(&PgmImage::from_field(&r.u, image.maxval)?, output, PgmFormat::Raw)?;
    println!(
        "model={} energy={:.9e} iterations={} converged={}",
        cfg.model.kind.name(),
        r.energy,
        r.iterations,
        r.converged
    );
    if !r.converged {
        return Err(CliError::NotConverged(format!("no convergence within {} iterations", cfg.opts.max_iters)));
    }
    Ok(())
}

fn run_sweep_beta(cfg: &RunConfig) -> Result<(), CliError> {
    let s = &cfg.settings;
    let mut extra = Vec::new();
    let (clean, regions) = match &s.input {
        Some(path) => {
            extra.push(("input".into(), path.display().to_string()));
            (load_input(path)?.to_field()?, None)
        }
        None => {
            let spec = phantom_spec(s)?;
            extra.push(("phantom_size".into(), spec.size.to_string()));
            extra.push(("phantom_half_width".into(), spec.half_width.to_string()));
            extra.push(("phantom_contrast".into(), spec.contrast.to_string()));
            extra.push(("phantom_background".into(), spec.background.to_string()));
            (make_phantom(&spec)?, Some(phantom_regions(&spec)?))
        }
    };
    let noise = noise_spec(s, "none", 0.1)?;
    extra.extend(noise_entries(&noise));
    let f = add_noise(&clean, &noise)?;
    let mut inst = Instruments::new(clean);
    inst.regions = regions;
    let betas = s.betas.clone().map_or(DEFAULT_SWEEP_BETAS.to_vec(), |l| l.0);
    let report = beta_sweep(&f, cfg.model.alpha, &betas, cfg.model.kind, &cfg.fidelity, &cfg.opts, &inst)?;
    let dir = s.out_dir.clone().unwrap_or_else(|| PathBuf::from("sweep-beta"));
    emit_report(&report, &dir, &extra)?;
    for row in &report.rows {
        println!(
            "beta={} energy={:.6e} psnr={:.3} singular={:.6e} contrast={}",
            row.beta,
            row.energy,
            row.psnr,
            row.singular_surrogate,
            row.contrast.map_or("-".to_string(), |c| format!("{c:.4}"))
        );
    }
    convergence(&report)
}

fn run_compare_q(cfg: &RunConfig) -> Result<(), CliError> {
    let s = &cfg.settings;
    let mut extra = Vec::new();
    let clean = match &s.input {
        Some(path) => {
            extra.push(("input".into(), path.display().to_string()));
            load_input(path)?.to_field()?
        }
        None => {
            let n = s.size.unwrap_or(128);
            extra.push(("synthetic_size".into(), n.to_string()));
            staircase_image(n)?
        }
    };
    let noise = noise_spec(s, "gaussian", 0.1)?;
    extra.extend(noise_entries(&noise));
    let f = add_noise(&clean, &noise)?;
    let qs = s.qs.clone().map_or(vec![1.0, 1.5, 2.0], |l| l.0);
    let beta_base = s.beta_base.unwrap_or(DEFAULT_COMPARE_BETA_BASE);
    let report = q_comparison(&f, cfg.model.alpha, beta_base, &qs, &cfg.fidelity, &cfg.opts, &Instruments::new(clean))?;
    let dir = s.out_dir.clone().unwrap_or_else(|| PathBuf::from("compare-q"));
    emit_report(&report, &dir, &extra)?;
    for row in &report.rows {
        println!(
            "model={} q={} beta={:.4} psnr={:.3}",
            row.model,
            row.q.map_or("-".to_string(), |q| q.to_string()),
            row.beta,
            row.psnr
        );
    }
    convergence(&report)
}

fn run_approx(cfg: &RunConfig) -> Result<(), CliError> {
    let s = &cfg.settings;
    if cfg.model.kind == ModelKind::Tv {
        return Err(range("approx needs a model with a second-order variable".into()));
    }
    let u: ScalarField = match &s.input {
        Some(path) => load_input(path)?.to_field()?,
        None => make_phantom(&phantom_spec(s)?)?,
    };
    let r = solve(&u, &cfg.model, &cfg.fidelity, &cfg.opts)?;
    let w = r.w.clone().expect("second-order model returns w");
    let scales = s.scales.clone().map_or_else(default_scales, |l| l.0);
    let trace = strict_mollify(&u, &w, &scales)?;

    let rel = |a: f64, b: f64| if b == 0.0 { a } else { a / b };
    let mut csv = String::from("scale,u_l1,w_l1,first_order,second_order,u_l1_rel,w_l1_rel,first_order_rel,second_order_rel\n");
    for e in &trace.entries {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            e.scale,
            e.u_l1,
            e.w_l1,
            e.first_order,
            e.second_order,
            rel(e.u_l1, trace.u_l1_norm),
            rel(e.w_l1, trace.w_l1_norm),
            rel(e.first_order - trace.first_order, trace.first_order),
            rel(e.second_order - trace.second_order, trace.second_order),
        ));
    }
    let output = s.output.clone().unwrap_or_else(|| PathBuf::from("approx.csv"));
    write_atomic(&output, csv.as_bytes())?;
    println!(
        "unsmoothed: |u|_1={:.6e} |w|_1={:.6e} |Du-w|={:.6e} |Ew|={:.6e}",
        trace.u_l1_norm, trace.w_l1_norm, trace.first_order, trace.second_order
    );
    if !r.converged {
        return Err(CliError::NotConverged(format!("no convergence within {} iterations", cfg.opts.max_iters)));
    }
    Ok(())
}

fn run_verify() -> Result<(), CliError> {
    let report = run_verification()?;
    for c in &report.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if report.passed() {
        Ok(())
    } else {
        let n = report.checks.iter().filter(|c| !c.passed).count();
        Err(CliError::VerifyFailed(format!("{n} check(s) failed")))
    }
}

pub fn run(cfg: &RunConfig) -> Result<(), CliError> {
    let work = || match cfg.command {
        Command::Denoise => run_denoise(cfg),
        Command::SweepBeta => run_sweep_beta(cfg),
        Command::CompareQ => run_compare_q(cfg),
        Command::Approx => run_approx(cfg),
        Command::Verify => run_verify(),
    };
    match cfg.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Failed(e.to_string()))?
            .install(work),
        None => work(),
    }
}

/// Parses, runs and returns the process exit code, printing a one-line
/// message on failure.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let argv: Vec<std::ffi::OsString> = argv.into_iter().map(Into::into).collect();
    // Help and version requests are not errors.
    if let Err(e) = Cli::try_parse_from(&argv) {
        if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) {
            print!("{e}");
            return 0;
        }
    }
    match parse_args(&argv).and_then(|cfg| run(&cfg)) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string();
            eprintln!("error: {}", msg.lines().next().unwrap_or(""));
            e.exit_code()
        }
    }
}
