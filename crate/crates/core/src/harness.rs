//! Experiment runner: configuration parsing, dispatch to the modules,
//! log-log scaling fits and deterministic output files.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use num_complex::Complex64;
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::bl::{alpha_search, blreg_lower_bound_with, is_finite_blreg, AlphaSearch, BlDatum, BlregOptions};
use crate::catalog;
use crate::extension::{
    local_constancy_profile, slice_decompose, Amplitude, Density, ExtensionEvaluator, Level, LocalConstancyOptions,
    SliceQuadrature, TrigPolynomial, Window, WindowedDensity,
};
use crate::kakeya::{kakeya_ratio_sweep, kakeya_ratio_sweep_unchecked, SweepOptions};
use crate::linalg::LinearMap;
use crate::manifold::{Ensemble, NestedFamily};
use crate::quad::{tensor_grid, QuadratureSpec, Rule};
use crate::rng::stream;
use crate::wavepacket::{audit_cover, CoverOptions};
use crate::{par, Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    BlCheck,
    BlAlpha,
    BlregEstimate,
    EnsembleVerify,
    CoverAudit,
    SliceAudit,
    RestrictionScaling,
    KakeyaSweep,
}

impl Kind {
    pub const ALL: [Kind; 8] = [
        Kind::BlCheck,
        Kind::BlAlpha,
        Kind::BlregEstimate,
        Kind::EnsembleVerify,
        Kind::CoverAudit,
        Kind::SliceAudit,
        Kind::RestrictionScaling,
        Kind::KakeyaSweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Kind::BlCheck => "bl-check",
            Kind::BlAlpha => "bl-alpha",
            Kind::BlregEstimate => "blreg-estimate",
            Kind::EnsembleVerify => "ensemble-verify",
            Kind::CoverAudit => "cover-audit",
            Kind::SliceAudit => "slice-audit",
            Kind::RestrictionScaling => "restriction-scaling",
            Kind::KakeyaSweep => "kakeya-sweep",
        }
    }

    /// Kinds whose result depends on random numbers and therefore need a seed.
    pub fn randomized(self) -> bool {
        !matches!(self, Kind::BlCheck)
    }
}

impl FromStr for Kind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Kind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Kind::ALL.iter().map(|k| k.name()).collect();
            Error::Config(format!("unknown kind `{s}`; expected one of {}", names.join(", ")))
        })
    }
}

impl std::fmt::Display for Kind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: Kind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub payload: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_path: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    kind: Option<Kind>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    payload: Value,
    #[serde(default)]
    output_path: Option<String>,
}

/// Typed view of a configuration, used only to validate the payload with
/// line and column information.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(dead_code)]
struct Envelope<P> {
    #[serde(default)]
    kind: Option<Kind>,
    #[serde(default)]
    seed: Option<u64>,
    payload: P,
    #[serde(default)]
    output_path: Option<String>,
}

fn from_text<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path == "." {
            Error::Config(inner.to_string())
        } else {
            Error::Config(format!("field `{path}`: {inner}"))
        }
    })
}

fn from_value<T: DeserializeOwned>(v: &Value) -> Result<T> {
    serde_path_to_error::deserialize(v.clone())
        .map_err(|e| Error::Config(format!("field `payload.{}`: {}", e.path(), e.inner())))
}

fn check_text<P: DeserializeOwned>(text: &str) -> Result<()> {
    from_text::<Envelope<P>>(text).map(|_| ())
}

impl ExperimentConfig {
    /// Parses and validates a JSON configuration. Errors name the offending
    /// field and, for syntax or type errors, the line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        Self::parse(text, None)
    }

    /// As [`ExperimentConfig::from_json`], with the kind supplied separately.
    /// A `kind` field in the text is then optional but must agree.
    pub fn from_json_for(text: &str, kind: Kind) -> Result<Self> {
        Self::parse(text, Some(kind))
    }

    fn parse(text: &str, expected: Option<Kind>) -> Result<Self> {
        let raw: RawConfig = from_text(text)?;
        let kind = match (raw.kind, expected) {
            (Some(a), Some(b)) if a != b => {
                return Err(Error::Config(format!("config is for kind `{a}` but `{b}` was requested")))
            }
            (Some(a), _) | (None, Some(a)) => a,
            (None, None) => return Err(Error::Config("missing field `kind`".into())),
        };
        let cfg = ExperimentConfig { kind, seed: raw.seed, payload: raw.payload, output_path: raw.output_path };
        match cfg.kind {
            Kind::BlCheck => check_text::<BlCheckPayload>(text)?,
            Kind::BlAlpha => check_text::<BlAlphaPayload>(text)?,
            Kind::BlregEstimate => check_text::<BlregPayload>(text)?,
            Kind::EnsembleVerify => check_text::<EnsembleVerifyPayload>(text)?,
            Kind::CoverAudit => check_text::<CoverAuditPayload>(text)?,
            Kind::SliceAudit => check_text::<SliceAuditPayload>(text)?,
            Kind::RestrictionScaling => check_text::<ScalingPayload>(text)?,
            Kind::KakeyaSweep => check_text::<KakeyaPayload>(text)?,
        }
        Ok(cfg)
    }

    /// SHA-256 of the canonical (key-sorted) JSON form.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(&json!({
            "kind": self.kind,
            "seed": self.seed,
            "payload": self.payload,
        }))
        .expect("json values serialise");
        format!("{:x}", Sha256::digest(canon.as_bytes()))
    }

    fn require_seed(&self) -> Result<u64> {
        match self.seed {
            Some(s) => Ok(s),
            None if self.kind.randomized() => Err(Error::Config(format!("kind `{}` needs a seed", self.kind))),
            None => Ok(0),
        }
    }
}

/// Result of one experiment before it is written to disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub summary: Value,
    pub csv: Option<String>,
    pub passed: bool,
}

/// Maps an error to the process exit status: 2 for configuration problems,
/// 3 for exhausted budgets, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::InvalidInput(_)
        | Error::DimensionMismatch(_)
        | Error::NotSurjective { .. }
        | Error::InvalidExponent(_)
        | Error::Precondition(_)
        | Error::SupportViolation(_)
        | Error::OutsideDomain(_) => 2,
        Error::Budget(_) | Error::UnresolvedOscillation(_) => 3,
        Error::NonConvergence(_) | Error::SingularFrame(_) | Error::Io(_) => 1,
    }
}

/// Exit status for a completed run.
pub fn outcome_code(o: &Outcome) -> i32 {
    if o.passed {
        0
    } else {
        4
    }
}

/// Runs the experiment and returns the summary and optional CSV table.
pub fn execute(cfg: &ExperimentConfig) -> Result<Outcome> {
    let seed = cfg.require_seed()?;
    let p = &cfg.payload;
    let (result, tolerances, csv, passed) = match cfg.kind {
        Kind::BlCheck => run_bl_check(from_value(p)?)?,
        Kind::BlAlpha => run_bl_alpha(from_value(p)?, seed)?,
        Kind::BlregEstimate => run_blreg(from_value(p)?, seed)?,
        Kind::EnsembleVerify => run_ensemble_verify(from_value(p)?, seed)?,
        Kind::CoverAudit => run_cover_audit(from_value(p)?, seed)?,
        Kind::SliceAudit => run_slice_audit(from_value(p)?, seed)?,
        Kind::RestrictionScaling => run_scaling(from_value(p)?, seed)?,
        Kind::KakeyaSweep => run_kakeya(from_value(p)?, seed)?,
    };
    let summary = json!({
        "kind": cfg.kind,
        "version": VERSION,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "tolerances": tolerances,
        "result": result,
        "passed": passed,
    });
    Ok(Outcome { summary, csv, passed })
}

/// Runs the experiment and writes `summary.json` (and `sweep.csv` for
/// sweeps) into `out_dir`, each through a temporary file and a rename.
pub fn run(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Outcome> {
    let outcome = execute(cfg)?;
    fs::create_dir_all(out_dir)?;
    let mut text = serde_json::to_string_pretty(&outcome.summary).expect("json values serialise");
    text.push('\n');
    write_atomic(&out_dir.join("summary.json"), text.as_bytes())?;
    if let Some(csv) = &outcome.csv {
        write_atomic(&out_dir.join("sweep.csv"), csv.as_bytes())?;
    }
    Ok(outcome)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// 17 significant digits, so every f64 round-trips.
pub fn csv_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    s
}

// ---------------------------------------------------------------- fitting

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Least-squares line through `(ln x, ln y)`.
pub fn fit_loglog(xs: &[f64], ys: &[f64]) -> Result<ScalingFit> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch(format!("{} scales but {} measurements", xs.len(), ys.len())));
    }
    if xs.len() < 3 {
        return Err(Error::InvalidInput(format!("a fit needs at least 3 points, got {}", xs.len())));
    }
    if xs.iter().chain(ys).any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::InvalidInput("fit values must be positive and finite".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let m = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / m;
    let my = ly.iter().sum::<f64>() / m;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidInput("fit scales are all equal".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0) };
    Ok(ScalingFit { xs: xs.to_vec(), ys: ys.to_vec(), slope, intercept, r_squared })
}

// ------------------------------------------------ multilinear restriction

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalingOptions {
    /// Gauss-Legendre points per axis for every extension operator.
    pub quad_points: usize,
    pub samples: usize,
    /// Half side length of the unit directions of `B_delta`.
    pub box_half_width: f64,
    pub degree: i32,
    pub terms: usize,
    /// Scale of the Cauchy component of the sampling density.
    pub cauchy_scale: f64,
    /// Weight of the uniform component of the sampling density.
    pub defensive: f64,
}

impl Default for ScalingOptions {
    fn default() -> Self {
        ScalingOptions {
            quad_points: 64,
            samples: 16_384,
            box_half_width: 0.5,
            degree: 2,
            terms: 6,
            cauchy_scale: 2.0,
            defensive: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingRow {
    pub scale: f64,
    pub value: f64,
    pub std_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingRun {
    pub fit: ScalingFit,
    pub predicted: Option<f64>,
    pub rows: Vec<ScalingRow>,
}

/// `(n - k)(n - k + 1) / (2(k - 1))`.
pub fn predicted_delta_exponent(n: usize, k: usize) -> f64 {
    let m = (n - k) as f64;
    m * (m + 1.0) / (2.0 * (k as f64 - 1.0))
}

/// Sampling density on Q_R: a mixture of the uniform law and a product of
/// truncated Cauchy laws centred at the origin.
struct XSampler {
    n: usize,
    r: f64,
    scale: f64,
    defensive: f64,
}

impl XSampler {
    fn new(n: usize, r: f64, opts: &ScalingOptions) -> Result<Self> {
        if !(opts.cauchy_scale > 0.0) || !(opts.defensive > 0.0 && opts.defensive <= 1.0) {
            return Err(Error::InvalidInput("cauchy_scale must be positive and defensive in (0, 1]".into()));
        }
        Ok(XSampler { n, r, scale: opts.cauchy_scale, defensive: opts.defensive })
    }

    fn cauchy_density(&self, t: f64) -> f64 {
        let a = (self.r / self.scale).atan();
        1.0 / (2.0 * a * self.scale * (1.0 + (t / self.scale).powi(2)))
    }

    fn density(&self, x: &[f64]) -> f64 {
        let uni = (2.0 * self.r).powi(-(self.n as i32));
        let cau: f64 = x.iter().map(|&t| self.cauchy_density(t)).product();
        self.defensive * uni + (1.0 - self.defensive) * cau
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, f64) {
        let x: Vec<f64> = if rng.gen::<f64>() < self.defensive {
            (0..self.n).map(|_| rng.gen_range(-self.r..self.r)).collect()
        } else {
            let a = (self.r / self.scale).atan();
            (0..self.n).map(|_| self.scale * (rng.gen_range(-a..a)).tan()).collect()
        };
        let q = self.density(&x);
        (x, q)
    }

    fn points(&self, count: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = stream(seed, &[0x5ca1e]);
        (0..count).map(|_| self.draw(&mut rng)).unzip()
    }
}

/// Generic test density on a family's full parameter domain: a random
/// trigonometric polynomial, bounded by 1, times a bump on 90% of the domain.
fn generic_density(family: &NestedFamily, opts: &ScalingOptions, seed: u64, j: usize) -> WindowedDensity {
    let d = family.dim(0);
    let rad = family.radius(0);
    let mut rng = stream(seed, &[0xde45, j as u64]);
    let poly = TrigPolynomial::random(d, opts.degree, opts.terms, 2.0 * std::f64::consts::PI, &mut rng);
    WindowedDensity { window: Window::Bump { center: vec![0.0; d], half_widths: vec![0.9 * rad; d] }, poly: Some(poly) }
}

/// Bump adapted to the box with half sides `h (1, .., 1, delta, .., delta^{n-k})`.
fn box_density(d: usize, k: usize, delta: f64, h: f64) -> WindowedDensity {
    let half_widths = (0..d)
        .map(|i| if i + 1 < k { h } else { h * delta.powi((i + 2 - k) as i32) })
        .collect();
    WindowedDensity { window: Window::Bump { center: vec![0.0; d], half_widths }, poly: None }
}

fn l2_norm<D: Density + ?Sized>(f: &D, amp: &Amplitude, m: usize) -> f64 {
    let region = match f.support() {
        Some(s) => s.intersect(&amp.support()),
        None => amp.support(),
    };
    if region.is_empty() {
        return 0.0;
    }
    let (nodes, w) = tensor_grid(&region, &vec![m; region.dim()], Rule::GaussLegendre);
    nodes
        .iter()
        .zip(&w)
        .map(|(u, wq)| wq * (f.eval(u) * amp.eval(u)).norm_sqr())
        .sum::<f64>()
        .sqrt()
}

fn full_amplitude(family: &NestedFamily) -> Amplitude {
    Amplitude::indicator(vec![0.0; family.dim(0)], family.radius(0))
}

fn evaluator<D: Density>(family: &NestedFamily, f: &D, m: usize, r: f64) -> Result<ExtensionEvaluator> {
    let ev = ExtensionEvaluator::new_single(
        &Level { family, level: 0 },
        &full_amplitude(family),
        f,
        &QuadratureSpec::gauss(m),
    )?;
    let need = r * (family.ambient_dim() as f64).sqrt();
    if ev.max_resolved_norm() < need {
        return Err(Error::UnresolvedOscillation(format!(
            "{m} points per axis resolve |x| <= {:.1}, Q_R needs {need:.1}",
            ev.max_resolved_norm()
        )));
    }
    Ok(ev)
}

fn powered_values(ev: &ExtensionEvaluator, xs: &[Vec<f64>], q: f64) -> Vec<f64> {
    par::map(xs, |x| ev.value_unchecked(x).norm().powf(q))
}

fn mc_mean(values: &[f64]) -> (f64, f64) {
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
    (mean, (var / m).sqrt())
}

fn check_transverse(ens: &Ensemble) -> Result<()> {
    let verdict = is_finite_blreg(&ens.datum()?, 1e-8)?;
    if !verdict.finite {
        return Err(Error::Precondition(format!(
            "ensemble is not transverse: alpha = {}",
            verdict.witness.alpha
        )));
    }
    Ok(())
}

/// Normalised `int_{Q_R} prod_j |E f_j|^{q_j}` with `f_k` supported in the
/// anisotropic box `B_delta` and generic `f_j` for `j < k`, for each delta.
/// Uses the same sample points for every delta.
pub fn restriction_scaling_experiment(
    ens: &Ensemble,
    r: f64,
    deltas: &[f64],
    opts: &ScalingOptions,
    seed: u64,
) -> Result<ScalingRun> {
    check_transverse(ens)?;
    if !(r >= 1.0) {
        return Err(Error::InvalidInput(format!("R = {r} must be at least 1")));
    }
    if deltas.iter().any(|&d| !(d > 0.0 && d < 1.0)) || deltas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidInput("delta values must lie in (0, 1) and decrease".into()));
    }
    let fams = ens.families();
    let k = fams.len();
    let last = &fams[k - 1];
    let n = ens.ambient_dim();
    let q = ens.exponents();
    let sampler = XSampler::new(n, r, opts)?;
    let (xs, dens) = sampler.points(opts.samples, seed);
    let mut fixed: Vec<f64> = dens.iter().map(|d| 1.0 / d).collect();
    let mut norm = 1.0;
    for (j, fam) in fams[..k - 1].iter().enumerate() {
        let f = generic_density(fam, opts, seed, j);
        let ev = evaluator(fam, &f, opts.quad_points, r)?;
        norm *= l2_norm(&f, &full_amplitude(fam), opts.quad_points).powf(q[j]);
        for (v, e) in fixed.iter_mut().zip(powered_values(&ev, &xs, q[j])) {
            *v *= e;
        }
    }
    let mut rows = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let f = box_density(last.dim(0), k, delta, opts.box_half_width);
        let ev = evaluator(last, &f, opts.quad_points, r)?;
        let nk = norm * l2_norm(&f, &full_amplitude(last), opts.quad_points).powf(q[k - 1]);
        let vals: Vec<f64> =
            powered_values(&ev, &xs, q[k - 1]).iter().zip(&fixed).map(|(a, b)| a * b / nk).collect();
        let (value, std_error) = mc_mean(&vals);
        rows.push(ScalingRow { scale: delta, value, std_error });
    }
    let fit = fit_loglog(&deltas.to_vec(), &rows.iter().map(|r| r.value).collect::<Vec<_>>())?;
    Ok(ScalingRun { fit, predicted: Some(predicted_delta_exponent(n, k)), rows })
}

/// Normalised multilinear integral over Q_R for fixed generic densities, as
/// a function of R.
pub fn r_growth_experiment(ens: &Ensemble, r_list: &[f64], opts: &ScalingOptions, seed: u64) -> Result<ScalingRun> {
    check_transverse(ens)?;
    r_growth_experiment_unchecked(ens, r_list, opts, seed)
}

/// As [`r_growth_experiment`] without the transversality precondition; used
/// for degenerate controls.
pub fn r_growth_experiment_unchecked(
    ens: &Ensemble,
    r_list: &[f64],
    opts: &ScalingOptions,
    seed: u64,
) -> Result<ScalingRun> {
    if r_list.iter().any(|&r| !(r >= 1.0)) {
        return Err(Error::InvalidInput("R values must be at least 1".into()));
    }
    if r_list.windows(2).any(|w| (w[1] / w[0] - 2.0).abs() > 1e-12) {
        return Err(Error::InvalidInput("R values must be dyadic and increasing".into()));
    }
    let rmax = r_list.iter().copied().fold(1.0, f64::max);
    let n = ens.ambient_dim();
    let q = ens.exponents();
    let mut evs = Vec::new();
    let mut norm = 1.0;
    for (j, fam) in ens.families().iter().enumerate() {
        let f = generic_density(fam, opts, seed, j);
        evs.push(evaluator(fam, &f, opts.quad_points, rmax)?);
        norm *= l2_norm(&f, &full_amplitude(fam), opts.quad_points).powf(q[j]);
    }
    let mut rows = Vec::with_capacity(r_list.len());
    for (i, &r) in r_list.iter().enumerate() {
        let sampler = XSampler::new(n, r, opts)?;
        let (xs, dens) = sampler.points(opts.samples, seed ^ (i as u64 + 1).wrapping_mul(0x9e37_79b9));
        let mut vals: Vec<f64> = dens.iter().map(|d| 1.0 / (d * norm)).collect();
        for (ev, &qj) in evs.iter().zip(q) {
            for (v, e) in vals.iter_mut().zip(powered_values(ev, &xs, qj)) {
                *v *= e;
            }
        }
        let (value, std_error) = mc_mean(&vals);
        rows.push(ScalingRow { scale: r, value, std_error });
    }
    let fit = fit_loglog(&r_list.to_vec(), &rows.iter().map(|r| r.value).collect::<Vec<_>>())?;
    Ok(ScalingRun { fit, predicted: None, rows })
}

// ----------------------------------------------------------- payload specs

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatumSpec {
    LoomisWhitney,
    DuplicatedKernel,
    Identity { n: usize },
    Explicit { maps: Vec<Vec<Vec<f64>>>, exponents: Vec<f64> },
}

impl DatumSpec {
    pub fn build(&self) -> Result<BlDatum> {
        match self {
            DatumSpec::LoomisWhitney => Ok(catalog::loomis_whitney()),
            DatumSpec::DuplicatedKernel => Ok(catalog::duplicated_kernel()),
            DatumSpec::Identity { n } => {
                if *n == 0 {
                    return Err(Error::Config("identity datum needs n >= 1".into()));
                }
                Ok(catalog::identity_datum(*n))
            }
            DatumSpec::Explicit { maps, exponents } => {
                let maps = maps.iter().map(|m| LinearMap::from_rows(m)).collect::<Result<Vec<_>>>()?;
                BlDatum::new(maps, exponents.clone())
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FamilySpec {
    LinearChain { d0: usize, codims: Vec<usize> },
    ParaboloidChain { n: usize, k: usize },
    CurvedChain { kappa: f64 },
    Explicit { family: NestedFamily },
}

impl FamilySpec {
    pub fn build(&self) -> Result<NestedFamily> {
        match self {
            FamilySpec::LinearChain { d0, codims } => {
                if *d0 == 0 || codims.iter().sum::<usize>() >= *d0 || codims.contains(&0) {
                    return Err(Error::Config("linear chain needs positive codimensions summing below d0".into()));
                }
                Ok(catalog::linear_chain(*d0, codims))
            }
            FamilySpec::ParaboloidChain { n, k } => {
                if !(*n >= 2 && *k >= 1 && k <= n) {
                    return Err(Error::Config("paraboloid chain needs 1 <= k <= n, n >= 2".into()));
                }
                Ok(catalog::paraboloid_chain(*n, *k))
            }
            FamilySpec::CurvedChain { kappa } => Ok(catalog::curved_chain(*kappa)),
            FamilySpec::Explicit { family } => Ok(family.clone()),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EnsembleSpec {
    /// Paraboloid patches at `points` plus the nested chain through the origin.
    Paraboloid { n: usize, k: usize, points: Vec<Vec<f64>>, patch_radius: f64 },
    /// The three coordinate planes of R^3, or three copies of `{x_3 = 0}`
    /// when `coincident`.
    CoordinatePlanes {
        #[serde(default = "one")]
        radius: f64,
        #[serde(default)]
        coincident: bool,
    },
    Explicit { ensemble: Ensemble },
}

fn one() -> f64 {
    1.0
}

impl EnsembleSpec {
    pub fn build(&self) -> Result<Ensemble> {
        match self {
            EnsembleSpec::Paraboloid { n, k, points, patch_radius } => {
                if !(*k >= 2 && k <= n) {
                    return Err(Error::Config("paraboloid ensemble needs 2 <= k <= n".into()));
                }
                if points.len() + 1 != *k || points.iter().any(|p| p.len() + 1 != *n) {
                    return Err(Error::Config(format!("need {} patch centres in R^{}", k - 1, n - 1)));
                }
                if points.iter().any(|p| p.iter().any(|c| c.abs() + patch_radius >= 1.0)) || !(*patch_radius > 0.0) {
                    return Err(Error::Config("patches must lie inside (-1, 1)^{n-1}".into()));
                }
                catalog::paraboloid_ensemble(*n, *k, points, *patch_radius)
            }
            EnsembleSpec::CoordinatePlanes { radius, coincident } => {
                let fams = (0..3)
                    .map(|j| NestedFamily::new(catalog::coordinate_plane(if *coincident { 2 } else { j }, *radius), Vec::new()))
                    .collect::<Result<Vec<_>>>()?;
                Ensemble::with_balanced_exponents(fams)
            }
            EnsembleSpec::Explicit { ensemble } => Ok(ensemble.clone()),
        }
    }
}

fn check_sorted(name: &str, v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::Config(format!("`{name}` is empty")));
    }
    if v.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
        return Err(Error::Config(format!("`{name}` must contain positive values")));
    }
    if v.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config(format!("`{name}` must be strictly increasing")));
    }
    Ok(())
}

type Report = (Value, Value, Option<String>, bool);

// ----------------------------------------------------------------- bl-check

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BlCheckPayload {
    datum: DatumSpec,
    #[serde(default = "default_tol")]
    tol: f64,
    #[serde(default)]
    expect_finite: Option<bool>,
}

fn default_tol() -> f64 {
    1e-8
}

fn run_bl_check(p: BlCheckPayload) -> Result<Report> {
    let datum = p.datum.build()?;
    let v = is_finite_blreg(&datum, p.tol)?;
    let passed = p.expect_finite.map_or(true, |e| e == v.finite);
    let result = json!({
        "alpha": v.witness.alpha,
        "finite": v.finite,
        "certified": v.certified,
        "exhaustive": v.witness.exhaustive,
        "witness_dim": v.witness.witness.dim(),
        "witness_basis": v.witness.witness.vectors(),
    });
    Ok((result, json!({ "tol": p.tol }), None, passed))
}

// ----------------------------------------------------------------- bl-alpha

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BlAlphaPayload {
    datum: DatumSpec,
    #[serde(default = "default_depth")]
    depth: usize,
    #[serde(default = "default_budget")]
    random_budget: usize,
    #[serde(default)]
    expect_alpha: Option<f64>,
}

fn default_depth() -> usize {
    4
}

fn default_budget() -> usize {
    16
}

fn run_bl_alpha(p: BlAlphaPayload, seed: u64) -> Result<Report> {
    let datum = p.datum.build()?;
    let opts = AlphaSearch { depth: p.depth, random_budget: p.random_budget, seed, ..AlphaSearch::default() };
    let w = alpha_search(&datum, &opts)?;
    let passed = p.expect_alpha.map_or(true, |a| (a - w.alpha).abs() <= 1e-9);
    let result = json!({
        "alpha": w.alpha,
        "exhaustive": w.exhaustive,
        "witness_dim": w.witness.dim(),
        "witness_basis": w.witness.vectors(),
    });
    let tol = json!({ "depth": p.depth, "random_budget": p.random_budget, "lattice_cap": opts.lattice_cap });
    Ok((result, tol, None, passed))
}

// ----------------------------------------------------------- blreg-estimate

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BlregPayload {
    datum: DatumSpec,
    r_list: Vec<f64>,
    #[serde(default = "default_iters")]
    iters: usize,
    #[serde(default = "default_ppu")]
    points_per_unit: usize,
    #[serde(default = "default_grid_cap")]
    grid_cap: usize,
    #[serde(default = "default_restarts")]
    restarts: usize,
    #[serde(default)]
    max_slope: Option<f64>,
}

fn default_iters() -> usize {
    200
}

fn default_ppu() -> usize {
    2
}

fn default_grid_cap() -> usize {
    4_000_000
}

fn default_restarts() -> usize {
    3
}

fn run_blreg(p: BlregPayload, seed: u64) -> Result<Report> {
    check_sorted("r_list", &p.r_list)?;
    let datum = p.datum.build()?;
    let opts = BlregOptions { points_per_unit: p.points_per_unit, grid_cap: p.grid_cap, restarts: p.restarts };
    let mut rows = Vec::new();
    let mut ys = Vec::new();
    for &r in &p.r_list {
        let b = blreg_lower_bound_with(&datum, r, p.iters, seed, &opts)?;
        ys.push(b);
        rows.push(vec![csv_float(r), csv_float(b)]);
    }
    let fit = if p.r_list.len() >= 3 { Some(fit_loglog(&p.r_list, &ys)?) } else { None };
    let passed = match (p.max_slope, &fit) {
        (Some(m), Some(f)) => f.slope <= m,
        (Some(_), None) => false,
        _ => true,
    };
    let result = json!({ "lower_bounds": ys, "fit": fit });
    let tol = json!({
        "iters": p.iters, "points_per_unit": p.points_per_unit, "grid_cap": p.grid_cap,
        "restarts": p.restarts, "max_slope": p.max_slope,
    });
    Ok((result, tol, Some(csv_table(&["r", "lower_bound"], &rows)), passed))
}

// ---------------------------------------------------------- ensemble-verify

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EnsembleVerifyPayload {
    ensemble: EnsembleSpec,
    #[serde(default = "default_tol")]
    tol: f64,
    /// Scales per family for the neighbourhood inclusion check.
    #[serde(default)]
    mu: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_omega_samples")]
    samples: usize,
    #[serde(default)]
    expect_transverse: Option<bool>,
}

fn default_omega_samples() -> usize {
    2000
}

fn run_ensemble_verify(p: EnsembleVerifyPayload, seed: u64) -> Result<Report> {
    let ens = p.ensemble.build()?;
    let datum = ens.datum()?;
    let v = is_finite_blreg(&datum, p.tol)?;
    let mut omega = Vec::new();
    let mut omega_ok = true;
    if let Some(mus) = &p.mu {
        if mus.len() != ens.families().len() {
            return Err(Error::Config(format!("`mu` needs one list per family ({})", ens.families().len())));
        }
        for (j, (fam, mu)) in ens.families().iter().zip(mus).enumerate() {
            let rep = fam.verify_omega_inclusions(mu, p.samples, seed ^ j as u64)?;
            omega_ok &= rep.violations == 0;
            omega.push(serde_json::to_value(rep).expect("report serialises"));
        }
    }
    let passed = omega_ok && p.expect_transverse.map_or(true, |e| e == v.finite);
    let result = json!({
        "alpha": v.witness.alpha,
        "transverse": v.finite,
        "certified": v.certified,
        "exponents": ens.exponents(),
        "maps": datum.maps().iter().map(|m| Vec::<Vec<f64>>::from(m.clone())).collect::<Vec<_>>(),
        "omega": omega,
    });
    Ok((result, json!({ "tol": p.tol, "samples": p.samples }), None, passed))
}

// -------------------------------------------------------------- cover-audit

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CoverAuditPayload {
    family: FamilySpec,
    r_list: Vec<f64>,
    /// `mu_t = mu_factors[t] * R^{-1/2}`.
    mu_factors: Vec<f64>,
    #[serde(default = "default_cover_samples")]
    samples: usize,
    #[serde(default)]
    cover: Option<CoverOptionsSpec>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CoverOptionsSpec {
    c_cover: f64,
    max_cells: usize,
}

fn default_cover_samples() -> usize {
    10_000
}

fn run_cover_audit(p: CoverAuditPayload, seed: u64) -> Result<Report> {
    check_sorted("r_list", &p.r_list)?;
    let fam = p.family.build()?;
    if p.mu_factors.len() != fam.depth() {
        return Err(Error::Config(format!("`mu_factors` needs {} entries", fam.depth())));
    }
    let opts = p.cover.map_or_else(CoverOptions::default, |c| CoverOptions { c_cover: c.c_cover, max_cells: c.max_cells });
    let mut rows = Vec::new();
    let mut audits = Vec::new();
    let mut passed = true;
    for &r in &p.r_list {
        let mu: Vec<f64> = p.mu_factors.iter().map(|f| f / r.sqrt()).collect();
        let a = audit_cover(&fam, r, &mu, &opts, p.samples, seed)?;
        passed &= a.passed();
        rows.push(vec![
            csv_float(r),
            a.cells.to_string(),
            a.ell_star.to_string(),
            a.samples.to_string(),
            a.uncovered.to_string(),
            a.max_overlap.to_string(),
            a.overlap_bound.to_string(),
            a.inflation_checked.to_string(),
            a.inflation_violations.to_string(),
        ]);
        audits.push(json!({ "r": r, "mu": mu, "audit": a }));
    }
    let violations: usize = audits.iter().map(|a| a["audit"]["inflation_violations"].as_u64().unwrap_or(0) as usize).sum();
    let uncovered: usize = audits.iter().map(|a| a["audit"]["uncovered"].as_u64().unwrap_or(0) as usize).sum();
    let result = json!({ "violations": violations, "uncovered": uncovered, "audits": audits });
    let header = [
        "r", "cells", "ell_star", "samples", "uncovered", "max_overlap", "overlap_bound", "inflation_checked",
        "inflation_violations",
    ];
    let tol = json!({ "c_cover": opts.c_cover, "max_cells": opts.max_cells, "samples": p.samples });
    Ok((result, tol, Some(csv_table(&header, &rows)), passed))
}

// -------------------------------------------------------------- slice-audit

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SliceAuditPayload {
    family: FamilySpec,
    level: usize,
    mu: Vec<f64>,
    amplitude: Amplitude,
    density: DensitySpec,
    /// Sample points are drawn from Q_r.
    r: f64,
    #[serde(default = "default_x_samples")]
    x_samples: usize,
    #[serde(default = "default_direct_points")]
    direct_points: usize,
    #[serde(default = "default_slice_points")]
    s_points: usize,
    #[serde(default = "default_slice_points")]
    eta_points: usize,
    #[serde(default = "default_slice_tolerance")]
    tolerance: f64,
    #[serde(default)]
    local_constancy: Option<LocalConstancySpec>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LocalConstancySpec {
    r: f64,
    max_order: usize,
    /// Density on the level parameter domain.
    density: DensitySpec,
    #[serde(default = "default_lc_ratio")]
    max_ratio: f64,
}

fn default_x_samples() -> usize {
    20
}

fn default_direct_points() -> usize {
    96
}

fn default_slice_points() -> usize {
    64
}

fn default_slice_tolerance() -> f64 {
    1e-6
}

fn default_lc_ratio() -> f64 {
    0.5
}

/// Window times an optional seeded trigonometric polynomial.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DensitySpec {
    Gaussian {
        center: Vec<f64>,
        sigmas: Vec<f64>,
        cutoff: f64,
        #[serde(default)]
        degree: i32,
        #[serde(default)]
        terms: usize,
    },
    Bump {
        center: Vec<f64>,
        half_widths: Vec<f64>,
        #[serde(default)]
        degree: i32,
        #[serde(default)]
        terms: usize,
    },
}

impl DensitySpec {
    pub fn build(&self, seed: u64) -> Result<WindowedDensity> {
        let (window, degree, terms) = match self {
            DensitySpec::Gaussian { center, sigmas, cutoff, degree, terms } => {
                if center.len() != sigmas.len() || sigmas.iter().any(|s| !(*s > 0.0)) || !(*cutoff > 0.0) {
                    return Err(Error::Config("gaussian density needs positive sigmas matching the centre".into()));
                }
                (Window::Gaussian { center: center.clone(), sigmas: sigmas.clone(), cutoff: *cutoff }, *degree, *terms)
            }
            DensitySpec::Bump { center, half_widths, degree, terms } => {
                if center.len() != half_widths.len() || half_widths.iter().any(|s| !(*s > 0.0)) {
                    return Err(Error::Config("bump density needs positive half widths matching the centre".into()));
                }
                (Window::Bump { center: center.clone(), half_widths: half_widths.clone() }, *degree, *terms)
            }
        };
        let poly = if terms > 0 {
            let mut rng = stream(seed, &[0xd3e5]);
            Some(TrigPolynomial::random(window.dim(), degree, terms, 1.0, &mut rng))
        } else {
            None
        };
        Ok(WindowedDensity { window, poly })
    }
}

fn run_slice_audit(p: SliceAuditPayload, seed: u64) -> Result<Report> {
    let fam = p.family.build()?;
    let f = p.density.build(seed)?;
    let quad = SliceQuadrature {
        s: QuadratureSpec::gauss(p.s_points),
        eta: QuadratureSpec::gauss(p.eta_points),
        ..SliceQuadrature::default()
    };
    let dec = slice_decompose(&fam, p.level, &p.amplitude, &f, &p.mu, &quad)?;
    let direct = ExtensionEvaluator::new_single(fam.surface(), &p.amplitude, &f, &QuadratureSpec::gauss(p.direct_points))?;
    let mut rng = stream(seed, &[0x511ce]);
    let n = fam.ambient_dim();
    let xs: Vec<Vec<f64>> = (0..p.x_samples).map(|_| (0..n).map(|_| rng.gen_range(-p.r..p.r)).collect()).collect();
    let exact = xs.iter().map(|x| direct.value(x)).collect::<Result<Vec<Complex64>>>()?;
    let approx = dec.eval_many(&xs);
    let worst = exact
        .iter()
        .zip(&approx)
        .map(|(a, b)| (a - b).norm() / a.norm().max(1e-300))
        .fold(0.0, f64::max);
    let mut passed = worst <= p.tolerance;
    let mut result = json!({
        "max_relative_error": worst,
        "constant": dec.constant,
        "slices": dec.slices.len(),
    });
    let mut tol = json!({
        "tolerance": p.tolerance, "direct_points": p.direct_points, "s_points": p.s_points,
        "eta_points": p.eta_points, "x_samples": p.x_samples,
    });
    if let Some(lc) = &p.local_constancy {
        let g = lc.density.build(seed ^ 0x1c)?;
        let opts = LocalConstancyOptions { seed, ..LocalConstancyOptions::default() };
        let errors = local_constancy_profile(&fam, p.level, &p.amplitude, &g, lc.r, &p.mu, lc.max_order, &opts)?;
        let ratios: Vec<f64> = errors.windows(2).map(|w| w[1] / w[0]).collect();
        passed &= ratios.iter().all(|&q| q <= lc.max_ratio);
        result["local_constancy"] = json!({ "errors": errors, "ratios": ratios });
        tol["local_constancy"] = json!({
            "r": lc.r, "max_order": lc.max_order, "max_ratio": lc.max_ratio,
            "eta_samples": opts.eta_samples, "x_samples": opts.x_samples,
            "quad_points": opts.quad.points_per_axis,
        });
    }
    Ok((result, tol, None, passed))
}

// ------------------------------------------------------ restriction-scaling

#[derive(Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
enum ScalingPayload {
    Delta {
        ensemble: EnsembleSpec,
        r: f64,
        delta_list: Vec<f64>,
        #[serde(default)]
        options: ScalingOptions,
        /// Largest accepted `|slope - predicted|`.
        #[serde(default)]
        slope_tolerance: Option<f64>,
    },
    RGrowth {
        ensemble: EnsembleSpec,
        r_list: Vec<f64>,
        #[serde(default)]
        options: ScalingOptions,
        /// Skip the transversality precondition (degenerate controls).
        #[serde(default)]
        control: bool,
        #[serde(default)]
        max_slope: Option<f64>,
        #[serde(default)]
        min_slope: Option<f64>,
    },
}

fn scaling_csv(column: &str, run: &ScalingRun) -> String {
    let rows: Vec<Vec<String>> =
        run.rows.iter().map(|r| vec![csv_float(r.scale), csv_float(r.value), csv_float(r.std_error)]).collect();
    csv_table(&[column, "value", "std_error"], &rows)
}

fn run_scaling(p: ScalingPayload, seed: u64) -> Result<Report> {
    match p {
        ScalingPayload::Delta { ensemble, r, mut delta_list, options, slope_tolerance } => {
            let ens = ensemble.build()?;
            let mut sorted = delta_list.clone();
            sorted.reverse();
            check_sorted("delta_list", &sorted)?;
            delta_list.sort_by(|a, b| b.total_cmp(a));
            let run = restriction_scaling_experiment(&ens, r, &delta_list, &options, seed)?;
            let predicted = run.predicted.unwrap_or(0.0);
            let passed = slope_tolerance.map_or(true, |t| (run.fit.slope - predicted).abs() <= t);
            let result = json!({ "fit": run.fit, "predicted": predicted, "rows": run.rows });
            let tol = json!({ "options": options, "slope_tolerance": slope_tolerance, "r": r });
            Ok((result, tol, Some(scaling_csv("delta", &run)), passed))
        }
        ScalingPayload::RGrowth { ensemble, r_list, options, control, max_slope, min_slope } => {
            check_sorted("r_list", &r_list)?;
            let ens = ensemble.build()?;
            let run = if control {
                r_growth_experiment_unchecked(&ens, &r_list, &options, seed)?
            } else {
                r_growth_experiment(&ens, &r_list, &options, seed)?
            };
            let s = run.fit.slope;
            let passed = max_slope.map_or(true, |m| s <= m) && min_slope.map_or(true, |m| s >= m);
            let result = json!({ "fit": run.fit, "rows": run.rows, "control": control });
            let tol = json!({ "options": options, "max_slope": max_slope, "min_slope": min_slope });
            Ok((result, tol, Some(scaling_csv("r", &run)), passed))
        }
    }
}

// ------------------------------------------------------------- kakeya-sweep

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct KakeyaPayload {
    datum: DatumSpec,
    r_list: Vec<f64>,
    lambda_list: Vec<f64>,
    #[serde(default = "default_nu")]
    nu: f64,
    #[serde(default = "default_families")]
    families_per_point: usize,
    #[serde(default = "default_families")]
    slabs_per_family: usize,
    #[serde(default = "default_kakeya_samples")]
    samples: usize,
    #[serde(default)]
    control: bool,
    #[serde(default)]
    max_slope: Option<f64>,
    #[serde(default)]
    min_slope: Option<f64>,
}

fn default_nu() -> f64 {
    0.05
}

fn default_families() -> usize {
    3
}

fn default_kakeya_samples() -> usize {
    200_000
}

fn run_kakeya(p: KakeyaPayload, seed: u64) -> Result<Report> {
    check_sorted("r_list", &p.r_list)?;
    check_sorted("lambda_list", &p.lambda_list)?;
    let datum = p.datum.build()?;
    let opts = SweepOptions {
        nu: p.nu,
        r_list: p.r_list.clone(),
        lambda_list: p.lambda_list.clone(),
        families_per_point: p.families_per_point,
        slabs_per_family: p.slabs_per_family,
        sampler_samples: p.samples,
        seed,
    };
    let sweep = if p.control { kakeya_ratio_sweep_unchecked(&datum, &opts)? } else { kakeya_ratio_sweep(&datum, &opts)? };
    let maxes = sweep.max_by_r();
    let (xs, ys): (Vec<f64>, Vec<f64>) = maxes.iter().copied().unzip();
    let fit = if xs.len() >= 3 { Some(fit_loglog(&xs, &ys)?) } else { None };
    let slope = fit.as_ref().map(|f| f.slope);
    let passed = match slope {
        Some(s) => p.max_slope.map_or(true, |m| s <= m) && p.min_slope.map_or(true, |m| s >= m),
        None => p.max_slope.is_none() && p.min_slope.is_none(),
    };
    let rows: Vec<Vec<String>> = sweep
        .rows
        .iter()
        .map(|r| vec![csv_float(r.r), csv_float(r.lambda), r.family_id.to_string(), csv_float(r.ratio), csv_float(r.std_error)])
        .collect();
    let result = json!({ "fit": fit, "max_by_r": maxes, "nu_realised": sweep.nu_realised, "control": p.control });
    let tol = json!({
        "nu": p.nu, "families_per_point": p.families_per_point, "slabs_per_family": p.slabs_per_family,
        "samples": p.samples, "max_slope": p.max_slope, "min_slope": p.min_slope,
    });
    Ok((result, tol, Some(csv_table(&["r", "lambda", "family_id", "ratio", "std_error"], &rows)), passed))
}
