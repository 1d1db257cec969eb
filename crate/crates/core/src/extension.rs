//! Extension operators `E f(x) = int e^{i x.Sigma(u)} f(u) a(u) du` by tensor
//! quadrature, the slice decomposition over a nested neighbourhood, and the
//! local-constancy expansion of translated slices.

use std::f64::consts::PI;

use nalgebra::DVector;
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bump::bump;
use crate::manifold::{NestedFamily, Surface};
use crate::quad::{tensor_grid, BoxRegion, QuadratureSpec};
use crate::rng::stream;
use crate::{par, Error, Result};

/// A parametrised submanifold `U -> R^n` on a sup-norm ball.
pub trait Parametrisation: Sync {
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    fn domain_radius(&self) -> f64;
    fn eval(&self, u: &[f64]) -> DVector<f64>;
    /// Operator norm of the Jacobian at `u`.
    fn jacobian_norm(&self, u: &[f64]) -> f64;
}

impl Parametrisation for Surface {
    fn in_dim(&self) -> usize {
        self.param().in_dim()
    }
    fn out_dim(&self) -> usize {
        self.ambient_dim()
    }
    fn domain_radius(&self) -> f64 {
        self.param().domain_radius
    }
    fn eval(&self, u: &[f64]) -> DVector<f64> {
        Surface::eval(self, u)
    }
    fn jacobian_norm(&self, u: &[f64]) -> f64 {
        self.jacobian(u).singular_values().max()
    }
}

/// `Sigma_l = Sigma_0 o sigma_l` for a level of a nested family.
pub struct Level<'a> {
    pub family: &'a NestedFamily,
    pub level: usize,
}

impl Parametrisation for Level<'_> {
    fn in_dim(&self) -> usize {
        self.family.dim(self.level)
    }
    fn out_dim(&self) -> usize {
        self.family.ambient_dim()
    }
    fn domain_radius(&self) -> f64 {
        self.family.radius(self.level)
    }
    fn eval(&self, u: &[f64]) -> DVector<f64> {
        self.family.big_sigma(self.level, u)
    }
    fn jacobian_norm(&self, u: &[f64]) -> f64 {
        self.family.big_sigma_jacobian(self.level, u).singular_values().max()
    }
}

/// Complex density on a parameter domain.
pub trait Density: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, u: &[f64]) -> Complex64;
    /// Closed box outside which the density vanishes, if known.
    fn support(&self) -> Option<BoxRegion> {
        None
    }
}

impl<D: Density + ?Sized> Density for &D {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval(&self, u: &[f64]) -> Complex64 {
        (**self).eval(u)
    }
    fn support(&self) -> Option<BoxRegion> {
        (**self).support()
    }
}

impl<D: Density + ?Sized> Density for Box<D> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval(&self, u: &[f64]) -> Complex64 {
        (**self).eval(u)
    }
    fn support(&self) -> Option<BoxRegion> {
        (**self).support()
    }
}

/// Density given by a closure.
pub struct FnDensity<F> {
    dim: usize,
    support: Option<BoxRegion>,
    f: F,
}

impl<F: Fn(&[f64]) -> Complex64 + Sync> FnDensity<F> {
    pub fn new(dim: usize, support: Option<BoxRegion>, f: F) -> Self {
        FnDensity { dim, support, f }
    }
}

impl<F: Fn(&[f64]) -> Complex64 + Sync> Density for FnDensity<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, u: &[f64]) -> Complex64 {
        (self.f)(u)
    }
    fn support(&self) -> Option<BoxRegion> {
        self.support.clone()
    }
}

/// Values on a uniform tensor grid (endpoints included), multilinearly
/// interpolated, zero outside the grid box.
#[derive(Clone, Debug)]
pub struct GridDensity {
    region: BoxRegion,
    counts: Vec<usize>,
    values: Vec<Complex64>,
}

impl GridDensity {
    pub fn sample(region: BoxRegion, counts: Vec<usize>, f: impl Fn(&[f64]) -> Complex64) -> Result<Self> {
        if counts.len() != region.dim() || counts.iter().any(|&c| c < 2) {
            return Err(Error::InvalidInput("grid needs at least 2 points per axis".into()));
        }
        let total: usize = counts.iter().product();
        let d = region.dim();
        let mut values = Vec::with_capacity(total);
        let mut idx = vec![0usize; d];
        let mut u = vec![0.0; d];
        for _ in 0..total {
            for i in 0..d {
                u[i] = region.lo[i] + (region.hi[i] - region.lo[i]) * idx[i] as f64 / (counts[i] - 1) as f64;
            }
            values.push(f(&u));
            for i in (0..d).rev() {
                idx[i] += 1;
                if idx[i] < counts[i] {
                    break;
                }
                idx[i] = 0;
            }
        }
        Ok(GridDensity { region, counts, values })
    }
}

impl Density for GridDensity {
    fn dim(&self) -> usize {
        self.region.dim()
    }

    fn eval(&self, u: &[f64]) -> Complex64 {
        let d = self.region.dim();
        if !self.region.contains(u) {
            return Complex64::new(0.0, 0.0);
        }
        let mut base = vec![0usize; d];
        let mut frac = vec![0.0; d];
        for i in 0..d {
            let t = (u[i] - self.region.lo[i]) / (self.region.hi[i] - self.region.lo[i]) * (self.counts[i] - 1) as f64;
            let b = (t.floor() as usize).min(self.counts[i] - 2);
            base[i] = b;
            frac[i] = t - b as f64;
        }
        let mut acc = Complex64::new(0.0, 0.0);
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut flat = 0usize;
            for i in 0..d {
                let bit = (corner >> (d - 1 - i)) & 1;
                w *= if bit == 1 { frac[i] } else { 1.0 - frac[i] };
                flat = flat * self.counts[i] + base[i] + bit;
            }
            if w != 0.0 {
                acc += self.values[flat] * w;
            }
        }
        acc
    }

    fn support(&self) -> Option<BoxRegion> {
        Some(self.region.clone())
    }
}

/// `sum_j c_j e^{i k_j . u}` with `sum |c_j| <= 1`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrigPolynomial {
    pub frequencies: Vec<Vec<f64>>,
    pub coefficients: Vec<(f64, f64)>,
}

impl TrigPolynomial {
    /// Random polynomial with integer frequencies of sup-norm at most
    /// `degree`, scaled by `2 pi / period`.
    pub fn random<R: Rng + ?Sized>(dim: usize, degree: i32, terms: usize, period: f64, rng: &mut R) -> Self {
        let mut frequencies = Vec::with_capacity(terms);
        let mut raw = Vec::with_capacity(terms);
        for _ in 0..terms {
            frequencies.push((0..dim).map(|_| rng.gen_range(-degree..=degree) as f64 * 2.0 * PI / period).collect());
            raw.push((rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        }
        let total: f64 = raw.iter().map(|(a, b): &(f64, f64)| a.hypot(*b)).sum();
        let coefficients = raw.into_iter().map(|(a, b)| (a / total, b / total)).collect();
        TrigPolynomial { frequencies, coefficients }
    }

    pub fn eval(&self, u: &[f64]) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for (k, &(re, im)) in self.frequencies.iter().zip(&self.coefficients) {
            let ph: f64 = k.iter().zip(u).map(|(a, b)| a * b).sum();
            acc += Complex64::new(re, im) * Complex64::from_polar(1.0, ph);
        }
        acc
    }
}

/// Product of a window and an optional trigonometric polynomial.
#[derive(Clone, Debug)]
pub struct WindowedDensity {
    pub window: Window,
    pub poly: Option<TrigPolynomial>,
}

/// Separable window supported on a box.
#[derive(Clone, Debug)]
pub enum Window {
    /// Tensor bump `prod bump((u_i - c_i)/h_i)`.
    Bump { center: Vec<f64>, half_widths: Vec<f64> },
    /// Gaussian `exp(-|(u_i - c_i)/sigma_i|^2 / 2)` cut off at `cutoff * sigma_i`.
    Gaussian { center: Vec<f64>, sigmas: Vec<f64>, cutoff: f64 },
}

impl Window {
    pub fn dim(&self) -> usize {
        match self {
            Window::Bump { center, .. } | Window::Gaussian { center, .. } => center.len(),
        }
    }

    pub fn eval(&self, u: &[f64]) -> f64 {
        match self {
            Window::Bump { center, half_widths } => {
                let mut v = 1.0;
                for ((x, c), h) in u.iter().zip(center).zip(half_widths) {
                    v *= bump((x - c) / h);
                    if v == 0.0 {
                        break;
                    }
                }
                v
            }
            Window::Gaussian { center, sigmas, cutoff } => {
                let mut q = 0.0;
                for ((x, c), s) in u.iter().zip(center).zip(sigmas) {
                    let t = (x - c) / s;
                    if t.abs() >= *cutoff {
                        return 0.0;
                    }
                    q += t * t;
                }
                (-0.5 * q).exp()
            }
        }
    }

    pub fn support(&self) -> BoxRegion {
        match self {
            Window::Bump { center, half_widths } => BoxRegion::new(
                center.iter().zip(half_widths).map(|(c, h)| c - h).collect(),
                center.iter().zip(half_widths).map(|(c, h)| c + h).collect(),
            ),
            Window::Gaussian { center, sigmas, cutoff } => BoxRegion::new(
                center.iter().zip(sigmas).map(|(c, s)| c - cutoff * s).collect(),
                center.iter().zip(sigmas).map(|(c, s)| c + cutoff * s).collect(),
            ),
        }
    }
}

impl Density for WindowedDensity {
    fn dim(&self) -> usize {
        self.window.dim()
    }
    fn eval(&self, u: &[f64]) -> Complex64 {
        let w = self.window.eval(u);
        if w == 0.0 {
            return Complex64::new(0.0, 0.0);
        }
        match &self.poly {
            Some(p) => p.eval(u) * w,
            None => Complex64::new(w, 0.0),
        }
    }
    fn support(&self) -> Option<BoxRegion> {
        Some(self.window.support())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AmplitudeKind {
    SmoothBump,
    Indicator,
}

/// Cut-off `a` with `0 <= a <= 1`, supported in the sup-ball of `radius`
/// about `center`. A smooth bump equals 1 on the inner ball of radius
/// `(1 - width) * radius`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Amplitude {
    pub kind: AmplitudeKind,
    pub center: Vec<f64>,
    pub radius: f64,
    #[serde(default = "default_width")]
    pub width: f64,
}

fn default_width() -> f64 {
    1.0
}

impl Amplitude {
    pub fn bump(center: Vec<f64>, radius: f64) -> Self {
        Amplitude { kind: AmplitudeKind::SmoothBump, center, radius, width: 1.0 }
    }

    pub fn plateau(center: Vec<f64>, radius: f64, width: f64) -> Self {
        Amplitude { kind: AmplitudeKind::SmoothBump, center, radius, width }
    }

    pub fn indicator(center: Vec<f64>, radius: f64) -> Self {
        Amplitude { kind: AmplitudeKind::Indicator, center, radius, width: 1.0 }
    }

    pub fn eval(&self, u: &[f64]) -> f64 {
        match self.kind {
            AmplitudeKind::Indicator => {
                if u.iter().zip(&self.center).all(|(x, c)| (x - c).abs() < self.radius) {
                    1.0
                } else {
                    0.0
                }
            }
            AmplitudeKind::SmoothBump => {
                let flat = 1.0 - self.width;
                let mut v = 1.0;
                for (x, c) in u.iter().zip(&self.center) {
                    let t = ((x - c).abs() / self.radius - flat) / self.width;
                    if t > 0.0 {
                        v *= bump(t);
                        if v == 0.0 {
                            break;
                        }
                    }
                }
                v
            }
        }
    }

    pub fn support(&self) -> BoxRegion {
        BoxRegion::cube(&self.center, self.radius)
    }

    fn validate(&self, dim: usize, domain_radius: f64) -> Result<()> {
        if self.center.len() != dim {
            return Err(Error::DimensionMismatch(format!("amplitude centre in R^{}, domain R^{dim}", self.center.len())));
        }
        if !(self.radius > 0.0) || !(self.width > 0.0 && self.width <= 1.0) {
            return Err(Error::InvalidInput("amplitude radius must be positive and width in (0, 1]".into()));
        }
        if self.center.iter().any(|c| c.abs() + self.radius > domain_radius) {
            return Err(Error::SupportViolation("amplitude support leaves the parameter domain".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub value: Complex64,
    /// `|I_M - I_{M/2}|` plus a rounding floor.
    pub error: f64,
}

/// Precomputed nodes `Sigma(u_q)` and weights `w_q f(u_q) a(u_q)`.
#[derive(Clone, Debug)]
pub struct ExtensionEvaluator {
    n: usize,
    points: Vec<f64>,
    weights: Vec<Complex64>,
    l1: f64,
    max_norm: f64,
    coarse: Option<Box<ExtensionEvaluator>>,
}

impl ExtensionEvaluator {
    pub fn new<P, D>(param: &P, amp: &Amplitude, f: &D, quad: &QuadratureSpec) -> Result<Self>
    where
        P: Parametrisation + ?Sized,
        D: Density + ?Sized,
    {
        quad.validate()?;
        let mut ev = Self::build(param, amp, f, quad.points_per_axis, quad)?;
        let coarse = Self::build(param, amp, f, quad.points_per_axis.div_ceil(2), quad)?;
        ev.coarse = Some(Box::new(coarse));
        Ok(ev)
    }

    /// Evaluator without the half-resolution companion; `eval` then reports
    /// only the rounding floor as its error.
    pub fn new_single<P, D>(param: &P, amp: &Amplitude, f: &D, quad: &QuadratureSpec) -> Result<Self>
    where
        P: Parametrisation + ?Sized,
        D: Density + ?Sized,
    {
        quad.validate()?;
        Self::build(param, amp, f, quad.points_per_axis, quad)
    }

    fn build<P, D>(param: &P, amp: &Amplitude, f: &D, m: usize, quad: &QuadratureSpec) -> Result<Self>
    where
        P: Parametrisation + ?Sized,
        D: Density + ?Sized,
    {
        let d = param.in_dim();
        if f.dim() != d {
            return Err(Error::DimensionMismatch(format!("density on R^{}, parameter domain R^{d}", f.dim())));
        }
        amp.validate(d, param.domain_radius())?;
        let mut region = amp.support();
        if let Some(s) = f.support() {
            region = region.intersect(&s);
        }
        let n = param.out_dim();
        if region.is_empty() {
            return Ok(ExtensionEvaluator { n, points: Vec::new(), weights: Vec::new(), l1: 0.0, max_norm: f64::INFINITY, coarse: None });
        }
        let (nodes, w) = tensor_grid(&region, &vec![m; d], quad.rule);
        let mut points = Vec::with_capacity(nodes.len() * n);
        let mut weights = Vec::with_capacity(nodes.len());
        let mut l1 = 0.0;
        let mut grad: f64 = 0.0;
        for (u, wq) in nodes.iter().zip(&w) {
            let a = amp.eval(u);
            let fv = if a == 0.0 { Complex64::new(0.0, 0.0) } else { f.eval(u) };
            let val = fv * (a * wq);
            if val.norm() == 0.0 {
                continue;
            }
            l1 += val.norm();
            grad = grad.max(param.jacobian_norm(u));
            points.extend(param.eval(u).iter());
            weights.push(val);
        }
        let half = region.half_widths().into_iter().fold(0.0, f64::max);
        // M >= 4 |x| sup|dSigma| h / pi
        let max_norm = if grad * half > 0.0 { m as f64 * PI / (4.0 * grad * half) } else { f64::INFINITY };
        Ok(ExtensionEvaluator { n, points, weights, l1, max_norm, coarse: None })
    }

    /// Largest |x| for which the grid resolves the oscillation.
    pub fn max_resolved_norm(&self) -> f64 {
        self.max_norm
    }

    /// Quadrature value of `int |f| a`.
    pub fn l1(&self) -> f64 {
        self.l1
    }

    pub fn nodes(&self) -> usize {
        self.weights.len()
    }

    pub fn value_unchecked(&self, x: &[f64]) -> Complex64 {
        let n = self.n;
        let mut re = 0.0;
        let mut im = 0.0;
        for (p, w) in self.points.chunks_exact(n).zip(&self.weights) {
            let ph: f64 = p.iter().zip(x).map(|(a, b)| a * b).sum();
            let (s, c) = ph.sin_cos();
            re += w.re * c - w.im * s;
            im += w.re * s + w.im * c;
        }
        Complex64::new(re, im)
    }

    pub fn check_resolution(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n {
            return Err(Error::DimensionMismatch(format!("x in R^{}, surface in R^{}", x.len(), self.n)));
        }
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nx > self.max_norm * (1.0 + 1e-12) {
            return Err(Error::UnresolvedOscillation(format!(
                "|x| = {nx:.3} exceeds the resolved range {:.3}",
                self.max_norm
            )));
        }
        Ok(())
    }

    pub fn value(&self, x: &[f64]) -> Result<Complex64> {
        self.check_resolution(x)?;
        Ok(self.value_unchecked(x))
    }

    pub fn eval(&self, x: &[f64]) -> Result<Evaluation> {
        let value = self.value(x)?;
        let floor = 1e-14 * self.l1.max(f64::MIN_POSITIVE);
        let error = match &self.coarse {
            Some(c) => (value - c.value_unchecked(x)).norm() + floor,
            None => floor,
        };
        Ok(Evaluation { value, error })
    }

    pub fn eval_many(&self, xs: &[Vec<f64>]) -> Result<Vec<Evaluation>> {
        par::map(xs, |x| self.eval(x)).into_iter().collect()
    }
}

/// One-shot evaluation of the extension operator at `x`.
pub fn extend<P, D>(param: &P, amp: &Amplitude, f: &D, x: &[f64], quad: &QuadratureSpec) -> Result<Evaluation>
where
    P: Parametrisation + ?Sized,
    D: Density + ?Sized,
{
    ExtensionEvaluator::new(param, amp, f, quad)?.eval(x)
}

#[derive(Clone, Debug)]
pub struct SliceQuadrature {
    pub s: QuadratureSpec,
    pub eta: QuadratureSpec,
    /// Points per axis of the grid used to check the support precondition.
    pub support_check: usize,
}

impl Default for SliceQuadrature {
    fn default() -> Self {
        SliceQuadrature { s: QuadratureSpec::gauss(64), eta: QuadratureSpec::gauss(64), support_check: 17 }
    }
}

/// One slice at a fixed offset `eta`: pulled-back density, weighted
/// amplitude and recentred surface sampled on the s-grid.
#[derive(Clone, Debug)]
pub struct Slice {
    pub eta: Vec<f64>,
    pub weight: f64,
    /// `Sigma(Phi(0; eta))`.
    pub anchor: DVector<f64>,
    pub s_nodes: Vec<Vec<f64>>,
    pub s_weights: Vec<f64>,
    /// `f(Phi(s; eta))`.
    pub density: Vec<Complex64>,
    /// `a(Phi(s; eta)) |det D Phi(s; eta)| / C`.
    pub amplitude: Vec<f64>,
    /// `Sigma(Phi(s; eta)) - Sigma(Phi(0; eta))`.
    pub surface: Vec<DVector<f64>>,
}

pub struct SliceDecomposition {
    pub level: usize,
    pub constant: f64,
    pub slices: Vec<Slice>,
}

impl SliceDecomposition {
    /// `C int e^{i x.Sigma(Phi(0;eta))} E_{S_l(eta)} f_{l,eta}(x) d eta`.
    pub fn eval(&self, x: &[f64]) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for sl in &self.slices {
            let mut inner = Complex64::new(0.0, 0.0);
            for q in 0..sl.s_weights.len() {
                let w = sl.s_weights[q] * sl.amplitude[q];
                if w == 0.0 {
                    continue;
                }
                let ph: f64 = sl.surface[q].iter().zip(x).map(|(a, b)| a * b).sum();
                inner += sl.density[q] * Complex64::from_polar(w, ph);
            }
            let ph0: f64 = sl.anchor.iter().zip(x).map(|(a, b)| a * b).sum();
            acc += inner * Complex64::from_polar(sl.weight, ph0);
        }
        acc * self.constant
    }

    pub fn eval_many(&self, xs: &[Vec<f64>]) -> Vec<Complex64> {
        par::map(xs, |x| self.eval(x))
    }
}

fn jacobian_det(family: &NestedFamily, l: usize, s: &[f64], eta: &[f64]) -> f64 {
    family.phi_jacobian_fd(0, l, s, eta, 1e-5).determinant().abs()
}

/// Box in U_l containing the s-support of `f a o Phi(.; eta)` for every
/// admissible eta, clipped to the domain.
fn slice_s_box(family: &NestedFamily, l: usize, region: &BoxRegion, mu: &[f64]) -> BoxRegion {
    let c18 = family.c_cover.powf(0.125);
    let margin: f64 = (1..=l).map(|t| c18 * mu[t - 1] * (family.codim(t) as f64).sqrt()).sum();
    let dl = family.dim(l);
    let r = family.radius(l) * (1.0 - 1e-9);
    BoxRegion::new(
        (0..dl).map(|i| (region.lo[i] - margin).max(-r)).collect(),
        (0..dl).map(|i| (region.hi[i] + margin).min(r)).collect(),
    )
}

fn eta_box(family: &NestedFamily, l: usize, mu: &[f64]) -> BoxRegion {
    let c18 = family.c_cover.powf(0.125);
    let mut lo = Vec::new();
    let mut hi = Vec::new();
    for t in 1..=l {
        let h = (c18 * mu[t - 1]).min(family.eta_bound * (1.0 - 1e-9));
        for _ in 0..family.codim(t) {
            lo.push(-h);
            hi.push(h);
        }
    }
    BoxRegion::new(lo, hi)
}

fn check_slice_scales(family: &NestedFamily, l: usize, mu: &[f64]) -> Result<()> {
    if l == 0 || l > family.depth() {
        return Err(Error::InvalidInput(format!("slice level must lie in 1..={}", family.depth())));
    }
    if mu.len() < l {
        return Err(Error::DimensionMismatch(format!("{} scales for level {l}", mu.len())));
    }
    family.check_scales(&mu[..l])?;
    let cap = family.c_cover * family.mu_threshold;
    if mu[..l].iter().any(|&m| m > cap) {
        return Err(Error::Precondition(format!("scales exceed C*mu_threshold = {cap}")));
    }
    Ok(())
}

/// Verifies that `f a` vanishes outside N_{0,l}(mu; 1) on a sampling grid.
fn check_support<D: Density + ?Sized>(
    family: &NestedFamily,
    l: usize,
    amp: &Amplitude,
    f: &D,
    mu: &[f64],
    per_axis: usize,
) -> Result<()> {
    let mut region = amp.support();
    if let Some(s) = f.support() {
        region = region.intersect(&s);
    }
    if region.is_empty() {
        return Ok(());
    }
    let d = region.dim();
    let (nodes, _) = tensor_grid(&region, &vec![per_axis; d], crate::quad::Rule::Midpoint);
    let bad = par::map(&nodes, |u| {
        let v = f.eval(u).norm() * amp.eval(u);
        v > 0.0 && !family.in_neighbourhood(0, l, u, mu, 1.0)
    });
    if let Some(i) = bad.iter().position(|&b| b) {
        return Err(Error::SupportViolation(format!(
            "f a is nonzero at {:?}, outside the mu-neighbourhood",
            nodes[i]
        )));
    }
    Ok(())
}

/// Decomposes `E f` on the neighbourhood of level `l` into extensions over
/// the translated slices `S_l(eta)`.
pub fn slice_decompose<D: Density + ?Sized>(
    family: &NestedFamily,
    l: usize,
    amp: &Amplitude,
    f: &D,
    mu: &[f64],
    quad: &SliceQuadrature,
) -> Result<SliceDecomposition> {
    check_slice_scales(family, l, mu)?;
    quad.s.validate()?;
    quad.eta.validate()?;
    amp.validate(family.dim(0), family.radius(0))?;
    check_support(family, l, amp, f, mu, quad.support_check)?;

    let mut region = amp.support();
    if let Some(s) = f.support() {
        region = region.intersect(&s);
    }
    let sigma0 = family.surface();
    let (eta_nodes, eta_weights) = tensor_grid(&eta_box(family, l, mu), &vec![quad.eta.points_per_axis; family.offset_dim(0, l)], quad.eta.rule);
    let s_box = slice_s_box(family, l, &region, mu);
    let (s_nodes, s_weights) = tensor_grid(&s_box, &vec![quad.s.points_per_axis; family.dim(l)], quad.s.rule);
    let zero_s = vec![0.0; family.dim(l)];

    let raw = par::map_range(eta_nodes.len(), |e| -> Result<Slice> {
        let eta = &eta_nodes[e];
        let base = family.phi(0, l, &zero_s, eta)?;
        let anchor = sigma0.eval(base.as_slice());
        let mut density = Vec::with_capacity(s_nodes.len());
        let mut amplitude = Vec::with_capacity(s_nodes.len());
        let mut surface = Vec::with_capacity(s_nodes.len());
        for s in &s_nodes {
            let u = match family.phi(0, l, s, eta) {
                Ok(u) => u,
                Err(_) => {
                    density.push(Complex64::new(0.0, 0.0));
                    amplitude.push(0.0);
                    surface.push(DVector::zeros(anchor.len()));
                    continue;
                }
            };
            let a = amp.eval(u.as_slice());
            let fv = if a == 0.0 { Complex64::new(0.0, 0.0) } else { f.eval(u.as_slice()) };
            let wa = if a == 0.0 || fv.norm() == 0.0 { 0.0 } else { a * jacobian_det(family, l, s, eta) };
            density.push(fv);
            amplitude.push(wa);
            surface.push(sigma0.eval(u.as_slice()) - &anchor);
        }
        Ok(Slice {
            eta: eta.clone(),
            weight: eta_weights[e],
            anchor,
            s_nodes: s_nodes.clone(),
            s_weights: s_weights.clone(),
            density,
            amplitude,
            surface,
        })
    });
    let mut slices: Vec<Slice> = raw.into_iter().collect::<Result<_>>()?;
    let constant = slices.iter().flat_map(|s| s.amplitude.iter().copied()).fold(1.0, f64::max);
    for sl in &mut slices {
        for a in &mut sl.amplitude {
            *a /= constant;
        }
    }
    Ok(SliceDecomposition { level: l, constant, slices })
}

#[derive(Clone, Debug)]
pub struct LocalConstancyOptions {
    pub eta_samples: usize,
    pub x_samples: usize,
    pub seed: u64,
    pub quad: QuadratureSpec,
}

impl Default for LocalConstancyOptions {
    fn default() -> Self {
        LocalConstancyOptions { eta_samples: 8, x_samples: 16, seed: 0, quad: QuadratureSpec::gauss(48) }
    }
}

/// Multi-indices of length `n` with `|alpha| <= order`, graded.
pub fn multi_indices(n: usize, order: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for total in 0..=order {
        let mut cur = vec![0usize; n];
        fill(&mut out, &mut cur, 0, total);
    }
    out
}

fn fill(out: &mut Vec<Vec<usize>>, cur: &mut Vec<usize>, pos: usize, left: usize) {
    if pos == cur.len() - 1 {
        cur[pos] = left;
        out.push(cur.clone());
        return;
    }
    for v in (0..=left).rev() {
        cur[pos] = v;
        fill(out, cur, pos + 1, left - v);
    }
    cur[pos] = 0;
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

/// Truncation errors of the local-constancy expansion for orders
/// `0..=max_order`: the maximum over sampled `x` in Q_R and `eta` in P_l(mu)
/// of `|E_{S_l(eta)} g(x) - sum_{|alpha|<=N} B_alpha(x) E_{S_l}[a^alpha g](x)|`.
pub fn local_constancy_profile<D: Density + ?Sized>(
    family: &NestedFamily,
    l: usize,
    amp: &Amplitude,
    g: &D,
    r: f64,
    mu: &[f64],
    max_order: usize,
    opts: &LocalConstancyOptions,
) -> Result<Vec<f64>> {
    check_slice_scales(family, l, mu)?;
    let cap = family.c_cover * family.mu_threshold;
    let mumax = mu[..l].iter().copied().fold(0.0, f64::max);
    if !(mumax < (1.0 / r).min(cap)) {
        return Err(Error::Precondition(format!(
            "scales must lie below min(1/R, C*mu_threshold) = {}",
            (1.0 / r).min(cap)
        )));
    }
    opts.quad.validate()?;
    amp.validate(family.dim(0), family.radius(0))?;
    if g.dim() != family.dim(l) {
        return Err(Error::DimensionMismatch(format!("density on R^{}, level {l} has dim {}", g.dim(), family.dim(l))));
    }
    let n = family.ambient_dim();
    let sigma0 = family.surface();
    let mut rng = stream(opts.seed, &[]);
    let ebox = eta_box(family, l, mu);
    let etas: Vec<Vec<f64>> = (0..opts.eta_samples)
        .map(|_| ebox.lo.iter().zip(&ebox.hi).map(|(a, b)| rng.gen_range(*a..=*b)).collect())
        .collect();
    let xs: Vec<Vec<f64>> = (0..opts.x_samples).map(|_| (0..n).map(|_| rng.gen_range(-r..=r)).collect()).collect();

    let mut region = slice_s_box(family, l, &amp.support(), mu);
    if let Some(s) = g.support() {
        region = region.intersect(&s);
    }
    if region.is_empty() {
        return Ok(vec![0.0; max_order + 1]);
    }
    let (nodes, weights) = tensor_grid(&region, &vec![opts.quad.points_per_axis; family.dim(l)], opts.quad.rule);
    let zero_s = vec![0.0; family.dim(l)];
    let zero_eta = vec![0.0; family.offset_dim(0, l)];
    let origin = sigma0.eval(family.phi(0, l, &zero_s, &zero_eta)?.as_slice());
    let base_surface: Vec<DVector<f64>> = nodes
        .iter()
        .map(|s| Ok(sigma0.eval(family.phi(0, l, s, &zero_eta)?.as_slice()) - &origin))
        .collect::<Result<_>>()?;
    let gvals: Vec<Complex64> = nodes.iter().map(|s| g.eval(s)).collect();

    struct EtaData {
        err: Vec<DVector<f64>>,
        amp: Vec<f64>,
    }
    let mut per_eta = Vec::with_capacity(etas.len());
    for eta in &etas {
        let anchor = sigma0.eval(family.phi(0, l, &zero_s, eta)?.as_slice());
        let mut err = Vec::with_capacity(nodes.len());
        let mut am = Vec::with_capacity(nodes.len());
        for (q, s) in nodes.iter().enumerate() {
            let u = family.phi(0, l, s, eta)?;
            let surf = sigma0.eval(u.as_slice()) - &anchor;
            err.push(surf - &base_surface[q]);
            let a = amp.eval(u.as_slice());
            am.push(if a == 0.0 { 0.0 } else { a * jacobian_det(family, l, s, eta) });
        }
        per_eta.push(EtaData { err, amp: am });
    }
    let c_slice = per_eta.iter().flat_map(|d| d.amp.iter().copied()).fold(1.0, f64::max);
    let sup_err = per_eta
        .iter()
        .flat_map(|d| d.err.iter().zip(&d.amp).filter(|(_, a)| **a > 0.0).map(|(e, _)| e.amax()))
        .fold(0.0, f64::max);
    let c = (4.0 * r * sup_err).max(f64::MIN_POSITIVE);
    let alphas = multi_indices(n, max_order);

    let mut worst = vec![0.0f64; max_order + 1];
    for data in &per_eta {
        let rows = par::map(&xs, |x| {
            let base: Vec<Complex64> = (0..nodes.len())
                .map(|q| {
                    let ph: f64 = base_surface[q].iter().zip(x).map(|(a, b)| a * b).sum();
                    gvals[q] * Complex64::from_polar(weights[q] * data.amp[q] / c_slice, ph)
                })
                .collect();
            let exact: Complex64 = (0..nodes.len())
                .map(|q| {
                    let ph: f64 = data.err[q].iter().zip(x).map(|(a, b)| a * b).sum();
                    base[q] * Complex64::from_polar(1.0, ph)
                })
                .sum();
            let mut partial = vec![Complex64::new(0.0, 0.0); max_order + 1];
            for alpha in &alphas {
                let order: usize = alpha.iter().sum();
                // E_{S_l}[a^alpha g](x) with a^alpha = a prod (R E_j / C)^alpha_j
                let term: Complex64 = (0..nodes.len())
                    .map(|q| {
                        let mut m = 1.0;
                        for (j, &aj) in alpha.iter().enumerate() {
                            if aj > 0 {
                                m *= (r * data.err[q][j] / c).powi(aj as i32);
                            }
                        }
                        base[q] * m
                    })
                    .sum();
                // B_alpha(x) = prod (i C x_j / R)^alpha_j / alpha_j!
                let mut b = Complex64::new(1.0, 0.0);
                for (j, &aj) in alpha.iter().enumerate() {
                    if aj > 0 {
                        b *= Complex64::new(0.0, c * x[j] / r).powi(aj as i32) / factorial(aj);
                    }
                }
                for p in partial.iter_mut().skip(order) {
                    *p += b * term;
                }
            }
            partial.iter().map(|p| (exact - p).norm()).collect::<Vec<f64>>()
        });
        for row in rows {
            for (w, v) in worst.iter_mut().zip(row) {
                *w = w.max(v);
            }
        }
    }
    Ok(worst)
}

pub fn local_constancy_error<D: Density + ?Sized>(
    family: &NestedFamily,
    l: usize,
    amp: &Amplitude,
    g: &D,
    r: f64,
    mu: &[f64],
    order: usize,
    opts: &LocalConstancyOptions,
) -> Result<f64> {
    Ok(local_constancy_profile(family, l, amp, g, r, mu, order, opts)?[order])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multi_index_count() {
        assert_eq!(multi_indices(3, 3).len(), 20);
        assert_eq!(multi_indices(2, 0), vec![vec![0, 0]]);
    }

    #[test]
    fn plateau_amplitude_is_one_inside() {
        let a = Amplitude::plateau(vec![0.0, 0.0], 0.5, 0.4);
        assert_eq!(a.eval(&[0.25, -0.29]), 1.0);
        assert!(a.eval(&[0.45, 0.0]) < 1.0);
        assert_eq!(a.eval(&[0.5, 0.0]), 0.0);
    }

    #[test]
    fn grid_density_interpolates_linear_functions() {
        let region = BoxRegion::new(vec![-1.0, -1.0], vec![1.0, 1.0]);
        let g = GridDensity::sample(region, vec![5, 7], |u| Complex64::new(u[0] + 2.0 * u[1], 0.0)).unwrap();
        let v = g.eval(&[0.123, -0.456]);
        assert!((v.re - (0.123 - 0.912)).abs() < 1e-14);
    }
}
