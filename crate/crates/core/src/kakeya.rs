//! Slab functionals `int_{Q_R} prod_j |sum_T c_T chi_T|^{p_j}` and random
//! slab-family sweeps.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bl::{is_finite_blreg, BlDatum};
use crate::linalg::{kernel, LinearMap, Subspace};
use crate::rng::stream;
use crate::{par, Error, Result};

/// `{x : |L x - v|_inf < width}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Slab {
    map: LinearMap,
    offset: Vec<f64>,
    width: f64,
}

impl Slab {
    pub fn new(map: LinearMap, offset: Vec<f64>, width: f64) -> Result<Self> {
        if offset.len() != map.rows() {
            return Err(Error::DimensionMismatch(format!("offset in R^{}, map into R^{}", offset.len(), map.rows())));
        }
        if !(width > 0.0) {
            return Err(Error::InvalidInput(format!("slab width {width} must be positive")));
        }
        if !map.is_surjective(1e-10) {
            return Err(Error::NotSurjective { index: 0, rank: map.rank(1e-10), target: map.rows() });
        }
        Ok(Slab { map, offset, width })
    }

    pub fn map(&self) -> &LinearMap {
        &self.map
    }

    pub fn offset(&self) -> &[f64] {
        &self.offset
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn ambient_dim(&self) -> usize {
        self.map.cols()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        let m = self.map.matrix();
        (0..m.nrows()).all(|i| {
            let mut s = -self.offset[i];
            for (j, xj) in x.iter().enumerate() {
                s += m[(i, j)] * xj;
            }
            s.abs() < self.width
        })
    }

    /// `(t L, t v, t width)` describes the same slab; this is `{t x : x in T}`.
    pub fn dilate(&self, t: f64) -> Slab {
        Slab { map: self.map.clone(), offset: self.offset.iter().map(|v| v * t).collect(), width: self.width * t }
    }
}

pub fn slab_indicator(s: &Slab, x: &[f64]) -> u8 {
    u8::from(s.contains(x))
}

/// Weighted slabs of a common width.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SlabFamily {
    slabs: Vec<Slab>,
    coefficients: Vec<f64>,
    /// Direction perturbation radius used to generate the family.
    #[serde(default)]
    pub nu: f64,
}

impl SlabFamily {
    pub fn new(slabs: Vec<Slab>, coefficients: Vec<f64>) -> Result<Self> {
        if slabs.len() != coefficients.len() {
            return Err(Error::DimensionMismatch(format!("{} slabs, {} coefficients", slabs.len(), coefficients.len())));
        }
        if coefficients.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::InvalidInput("slab coefficients must be finite and nonnegative".into()));
        }
        if let Some(first) = slabs.first() {
            let (m, n, w) = (first.map.rows(), first.ambient_dim(), first.width);
            if slabs.iter().any(|s| s.map.rows() != m || s.ambient_dim() != n) {
                return Err(Error::DimensionMismatch("slabs of a family must share their shape".into()));
            }
            if slabs.iter().any(|s| (s.width - w).abs() > 1e-12 * w) {
                return Err(Error::InvalidInput("slabs of a family must share one width".into()));
            }
        }
        Ok(SlabFamily { slabs, coefficients, nu: 0.0 })
    }

    pub fn single(slab: Slab) -> Self {
        SlabFamily { slabs: vec![slab], coefficients: vec![1.0], nu: 0.0 }
    }

    pub fn slabs(&self) -> &[Slab] {
        &self.slabs
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn coefficients_mut(&mut self) -> &mut [f64] {
        &mut self.coefficients
    }

    pub fn total(&self) -> f64 {
        self.coefficients.iter().sum()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.slabs.iter().zip(&self.coefficients).filter(|(s, _)| s.contains(x)).map(|(_, c)| c).sum()
    }

    pub fn dilate(&self, t: f64) -> SlabFamily {
        SlabFamily { slabs: self.slabs.iter().map(|s| s.dilate(t)).collect(), coefficients: self.coefficients.clone(), nu: self.nu }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Sampler {
    /// Midpoint rule on `points_per_axis^n` cells of Q_R.
    Grid { points_per_axis: usize },
    /// Jittered stratified sampling inside the first family's slabs.
    MonteCarlo { samples: usize, seed: u64 },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

const GRID_CAP: f64 = 1.5e8;
const SHARDS: usize = 64;

fn integrand(families: &[SlabFamily], p: &[f64], x: &[f64]) -> f64 {
    let mut v = 1.0;
    for (f, &pj) in families.iter().zip(p) {
        let s = f.eval(x);
        if s == 0.0 {
            return 0.0;
        }
        v *= s.powf(pj);
    }
    v
}

fn validate(families: &[SlabFamily], p: &[f64], r: f64) -> Result<usize> {
    if families.is_empty() || families.len() != p.len() {
        return Err(Error::DimensionMismatch(format!("{} families, {} exponents", families.len(), p.len())));
    }
    if p.iter().any(|&q| !(q > 0.0 && q <= 1.0)) {
        return Err(Error::InvalidExponent("exponents must lie in (0, 1]".into()));
    }
    if !(r > 0.0) {
        return Err(Error::InvalidInput(format!("R = {r} must be positive")));
    }
    let n = families
        .iter()
        .flat_map(|f| f.slabs.first())
        .map(|s| s.ambient_dim())
        .next()
        .unwrap_or(0);
    if families.iter().flat_map(|f| f.slabs.iter()).any(|s| s.ambient_dim() != n) {
        return Err(Error::DimensionMismatch("slabs live in different ambient spaces".into()));
    }
    Ok(n)
}

/// Estimates `int_{[-R,R]^n} prod_j |sum_T c_T chi_T(x)|^{p_j} dx`.
pub fn multilinear_slab_integral(families: &[SlabFamily], p: &[f64], r: f64, sampler: &Sampler) -> Result<Estimate> {
    let n = validate(families, p, r)?;
    if n == 0 || families.iter().any(|f| f.total() == 0.0 || f.slabs.is_empty()) {
        return Ok(Estimate::default());
    }
    match *sampler {
        Sampler::Grid { points_per_axis: m } => grid_integral(families, p, r, n, m),
        Sampler::MonteCarlo { samples, seed } => stratified_integral(families, p, r, n, samples, seed),
    }
}

fn grid_integral(families: &[SlabFamily], p: &[f64], r: f64, n: usize, m: usize) -> Result<Estimate> {
    if m == 0 {
        return Err(Error::Budget("grid sampler needs at least one point per axis".into()));
    }
    if (m as f64).powi(n as i32) > GRID_CAP {
        return Err(Error::Budget(format!("{m}^{n} grid points exceed the cap {GRID_CAP:e}")));
    }
    let h = 2.0 * r / m as f64;
    let rows = m.pow(n as u32 - 1);
    let partial = par::map_range(rows, |row| {
        let mut x = vec![0.0; n];
        let mut rem = row;
        for a in (0..n - 1).rev() {
            x[a] = -r + h * ((rem % m) as f64 + 0.5);
            rem /= m;
        }
        let mut s = 0.0;
        for i in 0..m {
            x[n - 1] = -r + h * (i as f64 + 0.5);
            s += integrand(families, p, &x);
        }
        s
    });
    let total: f64 = partial.iter().sum();
    Ok(Estimate { value: total * h.powi(n as i32), std_error: 0.0 })
}

/// Parametrisation `x = L^+(v + y) + K t` of a slab, with `y` in the width box
/// and `t` in a box containing `K^T Q_R`.
struct SlabChart {
    pinv: DMatrix<f64>,
    kern: DMatrix<f64>,
    offset: DVector<f64>,
    y_half: f64,
    t_half: Vec<f64>,
    volume: f64,
}

impl SlabChart {
    fn new(slab: &Slab, r: f64) -> Result<Self> {
        let l = slab.map.matrix();
        let (m, n) = l.shape();
        let gram = l * l.transpose();
        let ginv = gram
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::SingularFrame("slab map has singular Gram matrix".into()))?;
        let pinv = l.transpose() * ginv;
        let k: Subspace = kernel(&slab.map, 1e-10);
        let kern = k.basis().clone();
        let t_half: Vec<f64> = (0..kern.ncols()).map(|c| r * kern.column(c).iter().map(|v| v.abs()).sum::<f64>()).collect();
        let jac = gram.determinant().sqrt();
        let volume = (2.0 * slab.width).powi(m as i32) * t_half.iter().map(|t| 2.0 * t).product::<f64>() / jac;
        let _ = n;
        Ok(SlabChart { pinv, kern, offset: DVector::from_column_slice(&slab.offset), y_half: slab.width, t_half, volume })
    }

    fn dim(&self) -> usize {
        self.pinv.ncols() + self.kern.ncols()
    }

    /// Maps a point of the unit cube to the slab.
    fn point(&self, w: &[f64]) -> DVector<f64> {
        let m = self.pinv.ncols();
        let y = DVector::from_iterator(m, w[..m].iter().map(|a| (2.0 * a - 1.0) * self.y_half));
        let t = DVector::from_iterator(self.kern.ncols(), w[m..].iter().zip(&self.t_half).map(|(a, h)| (2.0 * a - 1.0) * h));
        &self.pinv * (&self.offset + y) + &self.kern * t
    }

    /// Whether `x` (assumed in Q_R) lies in the chart image.
    fn covers(&self, slab: &Slab, x: &[f64]) -> bool {
        if !slab.contains(x) {
            return false;
        }
        let xv = DVector::from_column_slice(x);
        let t = self.kern.transpose() * xv;
        t.iter().zip(&self.t_half).all(|(a, h)| a.abs() < *h || *h == 0.0)
    }
}

fn stratified_integral(families: &[SlabFamily], p: &[f64], r: f64, n: usize, samples: usize, seed: u64) -> Result<Estimate> {
    if samples == 0 {
        return Err(Error::Budget("Monte-Carlo sampler needs a positive sample count".into()));
    }
    let first = &families[0];
    let active: Vec<usize> = (0..first.slabs.len()).filter(|&i| first.coefficients[i] > 0.0).collect();
    let charts: Vec<SlabChart> = active.iter().map(|&i| SlabChart::new(&first.slabs[i], r)).collect::<Result<_>>()?;
    let share = (samples / active.len()).max(1);
    let k = ((share as f64).powf(1.0 / n as f64) + 1e-9).floor().max(1.0) as usize;
    let per = k.pow(n as u32);
    let dens: Vec<f64> = charts.iter().map(|c| per as f64 / c.volume).collect();

    let mut value = 0.0;
    let mut var = 0.0;
    for (ci, chart) in charts.iter().enumerate() {
        let d = chart.dim();
        debug_assert_eq!(d, n);
        let shard = per.div_ceil(SHARDS);
        let out = par::map_range(SHARDS, |sh| {
            let lo = sh * shard;
            let hi = ((sh + 1) * shard).min(per);
            let mut rng = stream(seed, &[ci as u64, sh as u64]);
            let mut w = vec![0.0; d];
            let mut sum = 0.0;
            let mut pairs = 0.0;
            let mut prev: Option<(usize, f64)> = None;
            for idx in lo..hi {
                let mut rem = idx;
                for a in (0..d).rev() {
                    w[a] = ((rem % k) as f64 + rng.gen::<f64>()) / k as f64;
                    rem /= k;
                }
                let x = chart.point(&w);
                let g = if x.iter().all(|v| v.abs() <= r) {
                    let xs = x.as_slice();
                    let f = integrand(families, p, xs);
                    if f == 0.0 {
                        0.0
                    } else {
                        let q: f64 = charts
                            .iter()
                            .zip(&active)
                            .zip(&dens)
                            .filter(|((c, &i), _)| c.covers(&first.slabs[i], xs))
                            .map(|(_, dn)| dn)
                            .sum();
                        if q > 0.0 {
                            f * dens[ci] / q
                        } else {
                            0.0
                        }
                    }
                } else {
                    0.0
                };
                sum += g;
                // pair neighbouring strata along the last axis
                if idx % 2 == 1 && k > 1 {
                    if let Some((j, gp)) = prev {
                        if j + 1 == idx {
                            pairs += (g - gp) * (g - gp);
                        }
                    }
                }
                prev = Some((idx, g));
            }
            (sum, pairs)
        });
        let scale = chart.volume / per as f64;
        for (s, pr) in out {
            value += s * scale;
            var += pr * scale * scale;
        }
    }
    Ok(Estimate { value, std_error: var.sqrt() })
}

/// Orthogonal matrix `(I - A/2)^{-1}(I + A/2)` for a random skew `A` with
/// operator norm at most `angle`.
fn random_rotation<R: Rng + ?Sized>(n: usize, angle: f64, rng: &mut R) -> DMatrix<f64> {
    if angle == 0.0 || n < 2 {
        return DMatrix::identity(n, n);
    }
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = rng.gen_range(-1.0..1.0);
            a[(i, j)] = v;
            a[(j, i)] = -v;
        }
    }
    let norm = a.clone().singular_values().max();
    if norm > 0.0 {
        a *= angle / norm;
    }
    let id = DMatrix::<f64>::identity(n, n);
    let lhs = &id - &a * 0.5;
    let rhs = &id + &a * 0.5;
    lhs.lu().solve(&rhs).unwrap_or(id)
}

#[derive(Clone, Debug)]
pub struct SweepOptions {
    pub nu: f64,
    pub r_list: Vec<f64>,
    pub lambda_list: Vec<f64>,
    pub families_per_point: usize,
    pub slabs_per_family: usize,
    pub sampler_samples: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub r: f64,
    pub lambda: f64,
    pub family_id: usize,
    pub ratio: f64,
    pub std_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Sweep {
    pub rows: Vec<SweepRow>,
    /// Largest kernel displacement (projection operator-norm distance) realised.
    pub nu_realised: f64,
}

impl Sweep {
    /// `(R, max ratio over lambda and families)` in increasing R.
    pub fn max_by_r(&self) -> Vec<(f64, f64)> {
        let mut rs: Vec<f64> = self.rows.iter().map(|r| r.r).collect();
        rs.sort_by(f64::total_cmp);
        rs.dedup();
        rs.into_iter()
            .map(|r| (r, self.rows.iter().filter(|x| x.r == r).map(|x| x.ratio).fold(0.0, f64::max)))
            .collect()
    }
}

/// Ratios `int / (lambda^n prod (sum c_T)^{p_j})` for random families whose
/// core planes are nu-perturbations of the kernels, requiring a finite datum.
pub fn kakeya_ratio_sweep(datum: &BlDatum, opts: &SweepOptions) -> Result<Sweep> {
    let verdict = is_finite_blreg(datum, 1e-8)?;
    if !verdict.finite {
        return Err(Error::Precondition(format!("datum is not finite: alpha = {}", verdict.witness.alpha)));
    }
    kakeya_ratio_sweep_unchecked(datum, opts)
}

/// As [`kakeya_ratio_sweep`] without the finiteness precondition; used for
/// degenerate controls.
pub fn kakeya_ratio_sweep_unchecked(datum: &BlDatum, opts: &SweepOptions) -> Result<Sweep> {
    if opts.r_list.is_empty() || opts.lambda_list.is_empty() || opts.families_per_point == 0 || opts.slabs_per_family == 0 {
        return Err(Error::InvalidInput("sweep needs R values, widths, families and slabs".into()));
    }
    if !(opts.nu >= 0.0) {
        return Err(Error::InvalidInput("nu must be nonnegative".into()));
    }
    for &r in &opts.r_list {
        for &lam in &opts.lambda_list {
            if !(lam > 0.0 && lam < r) {
                return Err(Error::Precondition(format!("width {lam} must lie in (0, R = {r})")));
            }
        }
    }
    let n = datum.ambient_dim();
    let kernels = datum.kernels();
    let mut rows = Vec::new();
    let mut nu_realised: f64 = 0.0;
    for (ri, &r) in opts.r_list.iter().enumerate() {
        for (li, &lam) in opts.lambda_list.iter().enumerate() {
            for fam in 0..opts.families_per_point {
                let mut rng = stream(opts.seed, &[ri as u64, li as u64, fam as u64]);
                // common point through which the first slab of every family passes
                let inner = (r - lam).max(0.0);
                let star: Vec<f64> = (0..n).map(|_| rng.gen_range(-inner..=inner)).collect();
                let mut families = Vec::with_capacity(datum.len());
                for (j, l) in datum.maps().iter().enumerate() {
                    let rot = random_rotation(n, opts.nu * rng.gen::<f64>(), &mut rng);
                    let lr = LinearMap::new(l.matrix() * &rot);
                    let kr = kernel(&lr, 1e-10);
                    nu_realised = nu_realised.max(kr.distance(&kernels[j]));
                    let mut slabs = Vec::with_capacity(opts.slabs_per_family);
                    let mut coeffs = Vec::with_capacity(opts.slabs_per_family);
                    for s in 0..opts.slabs_per_family {
                        let through: Vec<f64> = if s == 0 { star.clone() } else { (0..n).map(|_| rng.gen_range(-inner..=inner)).collect() };
                        let v: Vec<f64> = lr.apply(&DVector::from_column_slice(&through)).iter().copied().collect();
                        slabs.push(Slab::new(lr.clone(), v, lam)?);
                        coeffs.push(if opts.slabs_per_family == 1 { 1.0 } else { rng.gen_range(0.0..=1.0) });
                    }
                    let mut f = SlabFamily::new(slabs, coeffs)?;
                    f.nu = opts.nu;
                    families.push(f);
                }
                let est = multilinear_slab_integral(
                    &families,
                    datum.exponents(),
                    r,
                    &Sampler::MonteCarlo { samples: opts.sampler_samples, seed: opts.seed ^ ((ri as u64) << 40 | (li as u64) << 20 | fam as u64) },
                )?;
                let norm: f64 = lam.powi(n as i32)
                    * families.iter().zip(datum.exponents()).map(|(f, p)| f.total().powf(*p)).product::<f64>();
                rows.push(SweepRow { r, lambda: lam, family_id: fam, ratio: est.value / norm, std_error: est.std_error / norm });
            }
        }
    }
    Ok(Sweep { rows, nu_realised })
}
