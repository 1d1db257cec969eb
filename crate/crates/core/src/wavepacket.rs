//! Anisotropic wave-packet covers of a nested neighbourhood, Fourier-series
//! packets on each parallelepiped, and their slabs.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::bump::{plateau, plateau_sup};
use crate::extension::{Amplitude, Density, ExtensionEvaluator};
use crate::kakeya::Slab;
use crate::linalg::LinearMap;
use crate::manifold::NestedFamily;
use crate::quad::{tensor_grid, BoxRegion, QuadratureSpec, Rule};
use crate::rng::stream;
use crate::{par, Error, Result};

#[derive(Clone, Debug)]
pub struct CoverOptions {
    /// The cover constant; cells have half-widths `sqrt(c) * D`.
    pub c_cover: f64,
    pub max_cells: usize,
}

impl Default for CoverOptions {
    fn default() -> Self {
        CoverOptions { c_cover: 4.0, max_cells: 200_000 }
    }
}

/// Parallelepiped `u + Lambda [-1, 1]^d`.
#[derive(Clone, Debug)]
pub struct Cell {
    pub anchor: Vec<f64>,
    pub center: DVector<f64>,
    pub shape: DMatrix<f64>,
    inverse: DMatrix<f64>,
    reach: f64,
}

impl Cell {
    fn new(anchor: Vec<f64>, center: DVector<f64>, shape: DMatrix<f64>) -> Result<Self> {
        let inverse = shape
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::SingularFrame(format!("cell shape at {anchor:?} is singular")))?;
        let reach = shape.row_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
        Ok(Cell { anchor, center, shape, inverse, reach })
    }

    /// `Lambda^{-1}(u - u_theta)`.
    pub fn coords(&self, u: &[f64]) -> DVector<f64> {
        &self.inverse * (DVector::from_column_slice(u) - &self.center)
    }

    pub fn contains_scaled(&self, u: &[f64], scale: f64) -> bool {
        // cheap sup-norm rejection before the solve
        if u.iter().zip(self.center.iter()).any(|(a, c)| (a - c).abs() > scale * self.reach) {
            return false;
        }
        self.coords(u).amax() <= scale
    }

    /// Sup-norm half-width of the bounding box of `scale * theta`.
    pub fn reach(&self) -> f64 {
        self.reach
    }

    pub fn volume(&self) -> f64 {
        self.shape.determinant().abs() * 2f64.powi(self.shape.nrows() as i32)
    }
}

#[derive(Clone, Debug)]
pub struct WavePacketCover {
    pub r: f64,
    pub mu: Vec<f64>,
    pub ell_star: usize,
    pub c_cover: f64,
    pub cells: Vec<Cell>,
}

/// `min{l : mu_l > R^{-1/2}} - 1`, or the depth when no scale exceeds it.
pub fn ell_star(r: f64, mu: &[f64]) -> usize {
    let t = r.powf(-0.5);
    mu.iter().position(|&m| m > t).unwrap_or(mu.len())
}

/// Membership in the chart image `W = Phi_{0,r}(U_r x offsets)`.
pub fn in_chart(family: &NestedFamily, u: &[f64]) -> bool {
    if !family.in_domain(0, u) {
        return false;
    }
    family.depth() == 0 || family.phi_inverse(0, family.depth(), u).is_ok()
}

fn lattice(radius: f64, step: f64, dim: usize, cap: usize) -> Result<Vec<Vec<f64>>> {
    let kmax = ((radius / step) * (1.0 - 1e-12)).floor() as i64;
    let side = (2 * kmax + 1) as usize;
    let total = (side as f64).powi(dim as i32);
    if total > cap as f64 * 64.0 {
        return Err(Error::Budget(format!("anchor lattice has {total:.0} points")));
    }
    let total = side.pow(dim as u32);
    let mut out = Vec::with_capacity(total);
    for idx in 0..total {
        let mut rem = idx;
        let mut p = vec![0.0; dim];
        for a in (0..dim).rev() {
            p[a] = ((rem % side) as i64 - kmax) as f64 * step;
            rem /= side;
        }
        out.push(p);
    }
    Ok(out)
}

pub fn build_cover(family: &NestedFamily, r: f64, mu: &[f64], opts: &CoverOptions) -> Result<WavePacketCover> {
    if !(r >= 1.0) {
        return Err(Error::Precondition(format!("R = {r} must be at least 1")));
    }
    family.check_scales(mu)?;
    if let Some(&m1) = mu.first() {
        if m1 < 1.0 / r {
            return Err(Error::Precondition(format!("mu_1 = {m1} is below 1/R")));
        }
    }
    if let Some(&mr) = mu.last() {
        if mr > family.mu_threshold {
            return Err(Error::Precondition(format!("mu_r = {mr} exceeds the threshold {}", family.mu_threshold)));
        }
    }
    if !(opts.c_cover >= 1.0) {
        return Err(Error::InvalidInput("cover constant must be at least 1".into()));
    }
    let ls = ell_star(r, mu);
    let depth = family.depth();
    let d = family.dim(0);
    let ds = family.dim(ls);
    let step = r.powf(-0.5);
    let sq = opts.c_cover.sqrt();
    let grid = lattice(family.radius(ls), step, ds, opts.max_cells)?;
    let keep = par::map(&grid, |s| family.in_neighbourhood(ls, depth, s, mu, 2.0 * opts.c_cover));
    let anchors: Vec<Vec<f64>> = grid.into_iter().zip(keep).filter(|(_, k)| *k).map(|(s, _)| s).collect();
    if anchors.len() > opts.max_cells {
        return Err(Error::Budget(format!("{} cells exceed the cap {}", anchors.len(), opts.max_cells)));
    }
    let mut scale = Vec::with_capacity(d);
    for t in 1..=ls {
        scale.extend(std::iter::repeat(mu[t - 1]).take(family.codim(t)));
    }
    scale.extend(std::iter::repeat(step).take(ds));
    let dmat = DMatrix::from_diagonal(&DVector::from_vec(scale));
    let cells = par::map(&anchors, |s| -> Result<Cell> {
        if ls == 0 {
            Cell::new(s.clone(), DVector::from_column_slice(s), DMatrix::identity(d, d) * (sq * step))
        } else {
            let dm = family.derivative_matrices(ls, s)?;
            Cell::new(s.clone(), family.sigma(ls, s), dm.lambda * &dmat * sq)
        }
    });
    let cells = cells.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(WavePacketCover { r, mu: mu.to_vec(), ell_star: ls, c_cover: opts.c_cover, cells })
}

impl WavePacketCover {
    pub fn dim(&self) -> usize {
        self.cells.first().map_or(0, |c| c.center.len())
    }

    /// Number of cells with `u` in `scale * theta`.
    pub fn count(&self, u: &[f64], scale: f64) -> usize {
        self.cells.iter().filter(|c| c.contains_scaled(u, scale)).count()
    }

    pub fn overlap_count(&self, u: &[f64]) -> usize {
        self.count(u, 4.0)
    }

    /// `sum_theta psi_theta(u)`.
    pub fn partition_sum(&self, u: &[f64]) -> f64 {
        self.cells
            .iter()
            .filter(|c| c.contains_scaled(u, 2.0))
            .map(|c| plateau_sup(c.coords(u).as_slice()))
            .sum()
    }
}

/// Uniform-ish draws from N_r(mu) inside the chart.
pub fn sample_neighbourhood(family: &NestedFamily, mu: &[f64], count: usize, seed: u64) -> Vec<Vec<f64>> {
    let depth = family.depth();
    par::map_range(count, |i| {
        let mut rng = stream(seed, &[0x5a3, i as u64]);
        for _ in 0..1000 {
            let u: Vec<f64> = if depth == 0 {
                let r0 = family.radius(0);
                (0..family.dim(0)).map(|_| rng.gen_range(-r0..r0)).collect()
            } else {
                match family.sample_tube(0, depth, mu, 1.0, 1.0, &mut rng) {
                    Some((_, _, x)) => x.iter().copied().collect(),
                    None => continue,
                }
            };
            if family.neighbourhood_membership(&u, mu, 1.0) && in_chart(family, &u) {
                return Some(u);
            }
        }
        None
    })
    .into_iter()
    .flatten()
    .collect()
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct CoverAudit {
    pub samples: usize,
    pub uncovered: usize,
    pub max_overlap: usize,
    pub overlap_bound: usize,
    pub inflation_checked: usize,
    pub inflation_violations: usize,
    pub cells: usize,
    pub ell_star: usize,
}

impl CoverAudit {
    pub fn passed(&self) -> bool {
        self.uncovered == 0 && self.max_overlap <= self.overlap_bound && self.inflation_violations == 0
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct InflationReport {
    pub checked: usize,
    pub violations: usize,
}

/// Samples `4 theta ∩ W` for random cells and counts points outside
/// N_r(C^2 mu).
pub fn support_inflation_check(cover: &WavePacketCover, family: &NestedFamily, samples: usize, seed: u64) -> InflationReport {
    if cover.cells.is_empty() {
        return InflationReport::default();
    }
    let c2 = cover.c_cover * cover.c_cover;
    let d = cover.dim();
    let outcomes = par::map_range(samples, |i| {
        let mut rng = stream(seed, &[0x1f1, i as u64]);
        let cell = &cover.cells[rng.gen_range(0..cover.cells.len())];
        let z = DVector::from_iterator(d, (0..d).map(|_| rng.gen_range(-4.0..=4.0)));
        let u = &cell.center + &cell.shape * z;
        if !in_chart(family, u.as_slice()) {
            return (0, 0);
        }
        let ok = family.in_neighbourhood(0, family.depth(), u.as_slice(), &cover.mu, c2);
        (1, usize::from(!ok))
    });
    let mut rep = InflationReport::default();
    for (c, v) in outcomes {
        rep.checked += c;
        rep.violations += v;
    }
    rep
}

/// Cover, overlap and support-inflation audit on `samples` points.
pub fn audit_cover(family: &NestedFamily, r: f64, mu: &[f64], opts: &CoverOptions, samples: usize, seed: u64) -> Result<CoverAudit> {
    let cover = build_cover(family, r, mu, opts)?;
    let pts = sample_neighbourhood(family, mu, samples, seed);
    let counts = par::map(&pts, |u| (cover.count(u, 1.0), cover.overlap_count(u)));
    let centres = par::map(&cover.cells, |c| cover.overlap_count(c.center.as_slice()));
    let inflation = support_inflation_check(&cover, family, samples, seed ^ 0x9e37);
    Ok(CoverAudit {
        samples: pts.len(),
        uncovered: counts.iter().filter(|c| c.0 == 0).count(),
        max_overlap: counts.iter().map(|c| c.1).chain(centres).max().unwrap_or(0),
        overlap_bound: 2 * 3usize.pow(cover.dim() as u32),
        inflation_checked: inflation.checked,
        inflation_violations: inflation.violations,
        cells: cover.cells.len(),
        ell_star: cover.ell_star,
    })
}

#[derive(Clone, Debug)]
pub struct DecomposeOptions {
    /// FFT points per axis on the period cell `[-pi, pi)^d`.
    pub grid: usize,
    /// Relative L2 norm of the discarded tail per cell.
    pub threshold: f64,
    /// Points per axis of the support precondition check.
    pub support_check: usize,
}

impl Default for DecomposeOptions {
    fn default() -> Self {
        DecomposeOptions { grid: 64, threshold: 1e-8, support_check: 17 }
    }
}

/// `f_{theta,v}(u) = coefficient * e^{i m.z} psi~(z)` with `z = Lambda^{-1}(u - u_theta)`
/// and `v = Lambda^{-T} m`.
#[derive(Clone, Debug, Serialize)]
pub struct WavePacket {
    pub cell: usize,
    pub index: Vec<i64>,
    pub frequency: Vec<f64>,
    #[serde(serialize_with = "ser_complex")]
    pub coefficient: Complex64,
}

fn ser_complex<S: serde::Serializer>(c: &Complex64, s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeTuple;
    let mut t = s.serialize_tuple(2)?;
    t.serialize_element(&c.re)?;
    t.serialize_element(&c.im)?;
    t.end()
}

fn enlarged(z: &[f64]) -> f64 {
    let mut v = 1.0;
    for &t in z {
        if t.abs() >= 4.0 {
            return 0.0;
        }
        v *= plateau(0.5 * t);
    }
    v
}

impl WavePacket {
    pub fn eval(&self, cover: &WavePacketCover, u: &[f64]) -> Complex64 {
        let cell = &cover.cells[self.cell];
        let z = cell.coords(u);
        let w = enlarged(z.as_slice());
        if w == 0.0 {
            return Complex64::new(0.0, 0.0);
        }
        let ph: f64 = self.index.iter().zip(z.iter()).map(|(m, t)| *m as f64 * t).sum();
        self.coefficient * Complex64::from_polar(w, ph)
    }

    /// `(2 pi)^{-d} |det Lambda|^{-1} (f_theta psi_theta)^(v)`, the coefficient in
    /// the `e^{i v.u}` normalisation.
    pub fn fourier_coefficient(&self, cover: &WavePacketCover) -> Complex64 {
        let c = &cover.cells[self.cell];
        let ph: f64 = self.frequency.iter().zip(c.center.iter()).map(|(a, b)| a * b).sum();
        self.coefficient * Complex64::from_polar(1.0, -ph)
    }
}

/// A single packet as a density on U_0.
pub struct PacketDensity<'a> {
    pub cover: &'a WavePacketCover,
    pub packet: &'a WavePacket,
}

impl Density for PacketDensity<'_> {
    fn dim(&self) -> usize {
        self.cover.dim()
    }
    fn eval(&self, u: &[f64]) -> Complex64 {
        self.packet.eval(self.cover, u)
    }
    fn support(&self) -> Option<BoxRegion> {
        let c = &self.cover.cells[self.packet.cell];
        Some(BoxRegion::cube(c.center.as_slice(), 4.0 * c.reach))
    }
}

#[derive(Clone, Debug)]
pub struct Decomposition {
    pub packets: Vec<WavePacket>,
    /// Packet ranges per cell.
    pub offsets: Vec<usize>,
    pub kept: usize,
    pub total_modes: usize,
    /// Packet indices packed `d` per packet, for fast reconstruction.
    flat_index: Vec<i32>,
}

impl Decomposition {
    pub fn cell_packets(&self, cell: usize) -> &[WavePacket] {
        &self.packets[self.offsets[cell]..self.offsets[cell + 1]]
    }

    /// `sum_{theta, v} f_{theta,v}(u)`.
    pub fn reconstruct(&self, cover: &WavePacketCover, u: &[f64]) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for (i, cell) in cover.cells.iter().enumerate() {
            let packets = self.cell_packets(i);
            if packets.is_empty() || !cell.contains_scaled(u, 4.0) {
                continue;
            }
            let z = cell.coords(u);
            let w = enlarged(z.as_slice());
            if w == 0.0 {
                continue;
            }
            let d = z.len();
            let lo = self.offsets[i];
            let idx = &self.flat_index[lo * d..(lo + packets.len()) * d];
            let kmax = idx.iter().map(|k| k.unsigned_abs()).max().unwrap_or(0) as i32;
            // per-axis tables of e^{i k z_a}
            let tables: Vec<Vec<Complex64>> = z
                .iter()
                .map(|&za| (-kmax..=kmax).map(|k| Complex64::from_polar(1.0, k as f64 * za)).collect())
                .collect();
            let mut s = Complex64::new(0.0, 0.0);
            for (p, ks) in packets.iter().zip(idx.chunks_exact(d)) {
                let mut e = p.coefficient;
                for (t, &k) in tables.iter().zip(ks) {
                    e *= t[(k + kmax) as usize];
                }
                s += e;
            }
            acc += s * w;
        }
        acc
    }

    /// `sum ||f_{theta,v}||_2^2`.
    pub fn packet_energy(&self, cover: &WavePacketCover) -> f64 {
        let d = cover.dim() as i32;
        let psi2 = enlarged_l2_squared().powi(d);
        self.packets
            .iter()
            .map(|p| p.coefficient.norm_sqr() * cover.cells[p.cell].shape.determinant().abs() * psi2)
            .sum()
    }

    /// JSON rows `{cell, anchor, index, modulus}`.
    pub fn inventory(&self, cover: &WavePacketCover) -> serde_json::Value {
        let rows: Vec<serde_json::Value> = self
            .packets
            .iter()
            .map(|p| {
                serde_json::json!({
                    "cell": p.cell,
                    "anchor": cover.cells[p.cell].anchor,
                    "index": p.index,
                    "modulus": p.coefficient.norm(),
                })
            })
            .collect();
        serde_json::Value::Array(rows)
    }
}

/// `int psi~(t)^2 dt` on the line.
fn enlarged_l2_squared() -> f64 {
    let (x, w) = crate::quad::rule_nodes(Rule::GaussLegendre, 256, 2.0, 4.0);
    let tail: f64 = x.iter().zip(&w).map(|(t, w)| plateau(0.5 * t).powi(2) * w).sum();
    2.0 * (2.0 + tail)
}

fn check_packet_support<D: Density + ?Sized>(cover: &WavePacketCover, family: &NestedFamily, f: &D, per_axis: usize) -> Result<()> {
    let region = f
        .support()
        .ok_or_else(|| Error::InvalidInput("wave-packet decomposition needs a density with known support".into()))?;
    let (nodes, _) = tensor_grid(&region, &vec![per_axis; region.dim()], Rule::Midpoint);
    let bad = par::map(&nodes, |u| {
        f.eval(u).norm() > 0.0 && !(family.neighbourhood_membership(u, &cover.mu, 1.0) && in_chart(family, u))
    });
    if let Some(i) = bad.iter().position(|&b| b) {
        return Err(Error::SupportViolation(format!("density is nonzero at {:?}, outside N_r(mu) ∩ W", nodes[i])));
    }
    Ok(())
}

fn fft_nd(data: &mut [Complex64], n: usize, d: usize) {
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let mut line = vec![Complex64::new(0.0, 0.0); n];
    for axis in 0..d {
        let stride = n.pow((d - 1 - axis) as u32);
        let blocks = data.len() / n;
        for b in 0..blocks {
            let lo = b % stride;
            let hi = b / stride;
            let base = hi * stride * n + lo;
            for k in 0..n {
                line[k] = data[base + k * stride];
            }
            fft.process(&mut line);
            for k in 0..n {
                data[base + k * stride] = line[k];
            }
        }
    }
}

/// Decomposes `f` into packets `f_{theta,v}`: smooth partition `f psi_theta / sum psi`,
/// Fourier series of each piece in `Lambda_theta` coordinates, and truncation of
/// each cell to the fewest modes whose discarded tail has relative L2 norm at
/// most `threshold`.
pub fn decompose<D: Density + ?Sized>(
    cover: &WavePacketCover,
    family: &NestedFamily,
    f: &D,
    opts: &DecomposeOptions,
) -> Result<Decomposition> {
    if opts.grid < 8 || opts.grid % 2 != 0 {
        return Err(Error::InvalidInput("FFT grid must be even and at least 8".into()));
    }
    let d = cover.dim();
    if f.dim() != d {
        return Err(Error::DimensionMismatch(format!("density on R^{}, cover in R^{d}", f.dim())));
    }
    check_packet_support(cover, family, f, opts.support_check)?;
    let n = opts.grid;
    let total = n.pow(d as u32);
    let h = 2.0 * PI / n as f64;
    let norm = h.powi(d as i32) / (2.0 * PI).powi(d as i32);
    let support = f.support();

    let per_cell = par::map_range(cover.cells.len(), |ci| -> Vec<WavePacket> {
        let cell = &cover.cells[ci];
        if let Some(s) = &support {
            let reach = 2.0 * cell.reach;
            if (0..d).any(|a| cell.center[a] + reach < s.lo[a] || cell.center[a] - reach > s.hi[a]) {
                return Vec::new();
            }
        }
        let mut data = vec![Complex64::new(0.0, 0.0); total];
        let mut any = false;
        let mut z = vec![0.0; d];
        for (j, slot) in data.iter_mut().enumerate() {
            let mut rem = j;
            for a in (0..d).rev() {
                z[a] = -PI + h * (rem % n) as f64;
                rem /= n;
            }
            let psi = plateau_sup(&z);
            if psi == 0.0 {
                continue;
            }
            let u = &cell.center + &cell.shape * DVector::from_column_slice(&z);
            if !family.in_domain(0, u.as_slice()) {
                continue;
            }
            let fv = f.eval(u.as_slice());
            if fv.norm() == 0.0 {
                continue;
            }
            let sum = cover.partition_sum(u.as_slice());
            if sum > 0.0 {
                *slot = fv * (psi / sum);
                any = true;
            }
        }
        if !any {
            return Vec::new();
        }
        fft_nd(&mut data, n, d);
        let shape_t_inv = cell.inverse.transpose();
        let mut modes: Vec<(f64, usize)> = data.iter().enumerate().map(|(j, c)| (c.norm_sqr(), j)).collect();
        modes.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let energy: f64 = modes.iter().map(|m| m.0).sum();
        let budget = opts.threshold * opts.threshold * energy;
        let mut tail: f64 = 0.0;
        let mut cut = modes.len();
        // drop the smallest modes while the discarded tail stays within budget
        for (k, m) in modes.iter().enumerate().rev() {
            if tail + m.0 > budget {
                cut = k + 1;
                break;
            }
            tail += m.0;
            cut = k;
        }
        modes.truncate(cut);
        modes.sort_by_key(|m| m.1);
        modes
            .into_iter()
            .map(|(_, j)| {
                let mut rem = j;
                let mut idx = vec![0i64; d];
                for a in (0..d).rev() {
                    let k = (rem % n) as i64;
                    idx[a] = if k >= (n / 2) as i64 { k - n as i64 } else { k };
                    rem /= n;
                }
                let sign = if idx.iter().sum::<i64>().rem_euclid(2) == 0 { 1.0 } else { -1.0 };
                let m = DVector::from_iterator(d, idx.iter().map(|&k| k as f64));
                let v = &shape_t_inv * m;
                WavePacket { cell: ci, index: idx, frequency: v.iter().copied().collect(), coefficient: data[j] * (norm * sign) }
            })
            .collect()
    });
    let mut packets = Vec::new();
    let mut offsets = vec![0];
    for p in per_cell {
        packets.extend(p);
        offsets.push(packets.len());
    }
    let kept = packets.len();
    let flat_index = packets.iter().flat_map(|p| p.index.iter().map(|&k| k as i32)).collect();
    Ok(Decomposition { packets, offsets, kept, total_modes: total * cover.cells.len(), flat_index })
}

#[derive(Clone, Debug, Serialize)]
pub struct PacketReport {
    pub relative_l2_error: f64,
    pub parseval_ratio: f64,
    pub packets: usize,
    pub cells_used: usize,
}

/// Relative L2 reconstruction error and `sum ||f_T||^2 / ||f||^2`, using a
/// midpoint grid of `per_axis` points on the support box of `f`.
pub fn packet_report<D: Density + ?Sized>(cover: &WavePacketCover, dec: &Decomposition, f: &D, per_axis: usize) -> Result<PacketReport> {
    let region = f.support().ok_or_else(|| Error::InvalidInput("density needs a support box".into()))?;
    let (nodes, weights) = tensor_grid(&region, &vec![per_axis; region.dim()], Rule::Midpoint);
    let terms = par::map_range(nodes.len(), |i| {
        let fv = f.eval(&nodes[i]);
        let rv = dec.reconstruct(cover, &nodes[i]);
        ((fv - rv).norm_sqr() * weights[i], fv.norm_sqr() * weights[i])
    });
    let (num, den) = terms.iter().fold((0.0, 0.0), |a, t| (a.0 + t.0, a.1 + t.1));
    if den == 0.0 {
        return Err(Error::InvalidInput("density has zero L2 norm".into()));
    }
    let cells_used = (0..cover.cells.len()).filter(|&c| !dec.cell_packets(c).is_empty()).count();
    Ok(PacketReport {
        relative_l2_error: (num / den).sqrt(),
        parseval_ratio: dec.packet_energy(cover) / den,
        packets: dec.kept,
        cells_used,
    })
}

/// `T_{theta,v} = {x : |dSigma_l*(s_theta)^T x + dsigma_l*(s_theta)^T v|_inf < R^{1/2 + eps/(100 n)}}`.
pub fn packet_slab(cover: &WavePacketCover, family: &NestedFamily, packet: &WavePacket, eps: f64) -> Result<Slab> {
    let cell = &cover.cells[packet.cell];
    let ls = cover.ell_star;
    let n = family.ambient_dim();
    let jac = family.big_sigma_jacobian(ls, &cell.anchor);
    let dsig = family.sigma_jacobian(ls, &cell.anchor);
    let v = DVector::from_column_slice(&packet.frequency);
    let vstar = dsig.transpose() * v;
    let eps0 = eps / (100.0 * n as f64);
    Slab::new(LinearMap::new(jac.transpose()), vstar.iter().map(|x| -x).collect(), cover.r.powf(0.5 + eps0))
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct LocalisationReport {
    pub inside_max: f64,
    pub outside_max: f64,
    pub inside_samples: usize,
    pub outside_samples: usize,
}

impl LocalisationReport {
    pub fn ratio(&self) -> f64 {
        if self.inside_max == 0.0 {
            0.0
        } else {
            self.outside_max / self.inside_max
        }
    }
}

#[derive(Clone, Debug)]
pub struct LocalisationOptions {
    pub samples: usize,
    pub seed: u64,
    pub eps: f64,
    /// Minimum distance from the core plane, in slab widths, of the outside samples.
    pub gap: f64,
    /// Upper limit on the distance, in widths; infinite by default.
    pub gap_max: f64,
    pub quad: QuadratureSpec,
}

impl Default for LocalisationOptions {
    fn default() -> Self {
        LocalisationOptions { samples: 400, seed: 0, eps: 0.1, gap: 4.0, gap_max: f64::INFINITY, quad: QuadratureSpec::gauss(160) }
    }
}

/// Euclidean distance from `x` to the core plane `{L x = v}` of a slab.
pub fn core_plane_distance(slab: &Slab, x: &[f64]) -> f64 {
    let l = slab.map().matrix();
    let resid = l * DVector::from_column_slice(x) - DVector::from_column_slice(slab.offset());
    let gram = l * l.transpose();
    match gram.lu().solve(&resid) {
        Some(y) => (l.transpose() * y).norm(),
        None => f64::INFINITY,
    }
}

/// Max of `|E f_T|` over sampled `x` in Q_R inside `T` and over sampled `x` in
/// Q_R at distance at least `gap` widths from the core plane.
pub fn localisation_decay(
    cover: &WavePacketCover,
    family: &NestedFamily,
    amp: &Amplitude,
    packet: &WavePacket,
    opts: &LocalisationOptions,
) -> Result<LocalisationReport> {
    let slab = packet_slab(cover, family, packet, opts.eps)?;
    let density = PacketDensity { cover, packet };
    let ev = ExtensionEvaluator::new_single(family.surface(), amp, &density, &opts.quad)?;
    let n = family.ambient_dim();
    let r = cover.r;
    if ev.nodes() > 0 && ev.max_resolved_norm() < r * (n as f64).sqrt() {
        return Err(Error::UnresolvedOscillation(format!(
            "quadrature resolves |x| <= {:.2}, Q_R needs {:.2}",
            ev.max_resolved_norm(),
            r * (n as f64).sqrt()
        )));
    }
    let w = slab.width();
    let mut rng = stream(opts.seed, &[0x10c]);
    let mut inside = Vec::new();
    let mut outside = Vec::new();
    // least-norm point of the core plane, when it lies in Q_R
    let l = slab.map().matrix();
    if let Some(y) = (l * l.transpose()).lu().solve(&DVector::from_column_slice(slab.offset())) {
        let x0 = l.transpose() * y;
        if x0.amax() <= r {
            inside.push(x0.iter().copied().collect::<Vec<f64>>());
        }
    }
    let mut tries = 0usize;
    while (inside.len() < opts.samples || outside.len() < opts.samples) && tries < 400 * opts.samples {
        tries += 1;
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-r..=r)).collect();
        if slab.contains(&x) {
            if inside.len() < opts.samples {
                inside.push(x);
            }
        } else if outside.len() < opts.samples {
            let dist = core_plane_distance(&slab, &x);
            if dist >= opts.gap * w && dist < opts.gap_max * w {
                outside.push(x);
            }
        }
    }
    let vin = par::map(&inside, |x| ev.value_unchecked(x).norm());
    let vout = par::map(&outside, |x| ev.value_unchecked(x).norm());
    Ok(LocalisationReport {
        inside_max: vin.into_iter().fold(0.0, f64::max),
        outside_max: vout.into_iter().fold(0.0, f64::max),
        inside_samples: inside.len(),
        outside_samples: outside.len(),
    })
}
