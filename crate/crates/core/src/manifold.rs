//! Nested chains of polynomial-graph parametrisations and the maps Phi_{k,l}
//! that straighten out their tubular neighbourhoods.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bl::BlDatum;
use crate::linalg::LinearMap;
use crate::poly::GraphParam;
use crate::rng::stream;
use crate::{par, Error, Result};

/// `Sigma_0(u) = base + frame * (u, psi(u))`. With the default identity frame
/// and zero base this is the plain graph.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "RawSurface", into = "RawSurface")]
pub struct Surface {
    graph: GraphParam,
    base: DVector<f64>,
    frame: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawSurface {
    #[serde(flatten)]
    graph: GraphParam,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    base: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frame: Option<Vec<Vec<f64>>>,
}

impl TryFrom<RawSurface> for Surface {
    type Error = Error;
    fn try_from(r: RawSurface) -> Result<Self> {
        let n = r.graph.out_dim();
        let base = r.base.unwrap_or_else(|| vec![0.0; n]);
        let frame = match r.frame {
            None => DMatrix::identity(n, n),
            Some(rows) => {
                if rows.len() != n || rows.iter().any(|row| row.len() != n) {
                    return Err(Error::Config(format!("surface frame must be {n}x{n}")));
                }
                DMatrix::from_fn(n, n, |i, j| rows[i][j])
            }
        };
        Surface::with_frame(r.graph, base, frame)
    }
}

impl From<Surface> for RawSurface {
    fn from(s: Surface) -> Self {
        let n = s.ambient_dim();
        let identity = s.frame == DMatrix::identity(n, n);
        let origin = s.base.iter().all(|&b| b == 0.0);
        RawSurface {
            base: (!origin).then(|| s.base.iter().copied().collect()),
            frame: (!identity).then(|| s.frame.row_iter().map(|r| r.iter().copied().collect()).collect()),
            graph: s.graph,
        }
    }
}

impl Surface {
    pub fn graph(graph: GraphParam) -> Self {
        let n = graph.out_dim();
        Surface { graph, base: DVector::zeros(n), frame: DMatrix::identity(n, n) }
    }

    pub fn with_frame(graph: GraphParam, base: Vec<f64>, frame: DMatrix<f64>) -> Result<Self> {
        let n = graph.out_dim();
        if base.len() != n || frame.nrows() != n || frame.ncols() != n {
            return Err(Error::DimensionMismatch(format!("surface in R^{n} needs a {n}-vector base and {n}x{n} frame")));
        }
        let s = frame.singular_values();
        if s.min() <= 1e-10 * s.max() {
            return Err(Error::SingularFrame("surface frame is not invertible".into()));
        }
        Ok(Surface { graph, base: DVector::from_vec(base), frame })
    }

    pub fn ambient_dim(&self) -> usize {
        self.graph.out_dim()
    }

    pub fn param(&self) -> &GraphParam {
        &self.graph
    }

    pub fn eval(&self, u: &[f64]) -> DVector<f64> {
        &self.base + &self.frame * self.graph.eval(u)
    }

    pub fn jacobian(&self, u: &[f64]) -> DMatrix<f64> {
        &self.frame * self.graph.jacobian(u)
    }
}

fn default_c_cover() -> f64 {
    1e4
}

fn default_rho() -> f64 {
    0.1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RawFamily {
    sigma0: Surface,
    #[serde(default)]
    chain: Vec<GraphParam>,
    #[serde(default)]
    mu_threshold: Option<f64>,
    #[serde(default = "default_c_cover")]
    c_cover: f64,
    #[serde(default = "default_rho")]
    rho: f64,
    #[serde(default)]
    eta_bound: Option<f64>,
}

/// A surface `Sigma_0` on `U_0` together with links `gamma_l: U_l -> U_{l-1}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "RawFamily", into = "RawFamily")]
pub struct NestedFamily {
    sigma0: Surface,
    chain: Vec<GraphParam>,
    /// Threshold width for the neighbourhood scales.
    pub mu_threshold: f64,
    /// Admissible constant for the neighbourhood inclusions.
    pub c_cover: f64,
    pub rho: f64,
    /// Sup-norm bound on each offset block accepted by [`NestedFamily::phi`].
    pub eta_bound: f64,
}

impl TryFrom<RawFamily> for NestedFamily {
    type Error = Error;
    fn try_from(r: RawFamily) -> Result<Self> {
        let mut f = NestedFamily::new(r.sigma0, r.chain)?;
        if let Some(m) = r.mu_threshold {
            f.mu_threshold = m;
        }
        if let Some(e) = r.eta_bound {
            f.eta_bound = e;
        }
        f.c_cover = r.c_cover;
        f.rho = r.rho;
        f.check_constants()?;
        Ok(f)
    }
}

impl From<NestedFamily> for RawFamily {
    fn from(f: NestedFamily) -> Self {
        RawFamily {
            sigma0: f.sigma0,
            chain: f.chain,
            mu_threshold: Some(f.mu_threshold),
            c_cover: f.c_cover,
            rho: f.rho,
            eta_bound: Some(f.eta_bound),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DerivativeMatrices {
    pub dsigma: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct DistanceOptions {
    /// Seeds per parameter axis for the global search.
    pub grid_per_axis: usize,
    pub max_seeds: usize,
}

impl Default for DistanceOptions {
    fn default() -> Self {
        DistanceOptions { grid_per_axis: 64, max_seeds: 4096 }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct OmegaReport {
    pub lower_checked: usize,
    pub upper_checked: usize,
    pub skipped: usize,
    pub violations: usize,
}

impl NestedFamily {
    pub fn new(sigma0: Surface, chain: Vec<GraphParam>) -> Result<Self> {
        let r0 = sigma0.param().domain_radius;
        let f = NestedFamily {
            sigma0,
            chain,
            mu_threshold: 0.05 * r0,
            c_cover: default_c_cover(),
            rho: default_rho(),
            eta_bound: 0.25 * r0,
        };
        f.validate()?;
        Ok(f)
    }

    fn check_constants(&self) -> Result<()> {
        if !(self.c_cover >= 1.0) {
            return Err(Error::InvalidInput(format!("c_cover = {} must be at least 1", self.c_cover)));
        }
        if !(self.mu_threshold > 0.0 && self.rho > 0.0 && self.eta_bound > 0.0) {
            return Err(Error::InvalidInput("mu_threshold, rho and eta_bound must be positive".into()));
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let mut prev = self.sigma0.param().in_dim();
        for (i, link) in self.chain.iter().enumerate() {
            let l = i + 1;
            if link.out_dim() != prev {
                return Err(Error::DimensionMismatch(format!(
                    "link {l} maps into R^{}, expected R^{prev}",
                    link.out_dim()
                )));
            }
            if link.codim() == 0 {
                return Err(Error::InvalidInput(format!("link {l} has codimension 0")));
            }
            // gamma_l(closure U_l) must stay strictly inside U_{l-1}
            let outer = self.radius(l - 1);
            let d = link.in_dim();
            let g = 9usize;
            let pts = g.pow(d as u32);
            for idx in 0..pts {
                let mut rem = idx;
                let s: Vec<f64> = (0..d)
                    .map(|_| {
                        let i = rem % g;
                        rem /= g;
                        link.domain_radius * (2.0 * i as f64 / (g - 1) as f64 - 1.0)
                    })
                    .collect();
                let y = link.eval(&s);
                if y.amax() >= outer {
                    return Err(Error::InvalidInput(format!(
                        "link {l} leaves its target domain at s = {s:?}"
                    )));
                }
            }
            prev = link.in_dim();
        }
        self.check_constants()
    }

    pub fn surface(&self) -> &Surface {
        &self.sigma0
    }

    pub fn chain(&self) -> &[GraphParam] {
        &self.chain
    }

    pub fn ambient_dim(&self) -> usize {
        self.sigma0.ambient_dim()
    }

    /// Number of links r.
    pub fn depth(&self) -> usize {
        self.chain.len()
    }

    /// Dimension d_l of U_l.
    pub fn dim(&self, l: usize) -> usize {
        if l == 0 {
            self.sigma0.param().in_dim()
        } else {
            self.chain[l - 1].in_dim()
        }
    }

    /// Codimension m_l of M_{l-1,l} inside U_{l-1}, for l >= 1.
    pub fn codim(&self, l: usize) -> usize {
        self.chain[l - 1].codim()
    }

    /// Total offset dimension from level k down to level l.
    pub fn offset_dim(&self, k: usize, l: usize) -> usize {
        (k + 1..=l).map(|t| self.codim(t)).sum()
    }

    pub fn radius(&self, l: usize) -> f64 {
        if l == 0 {
            self.sigma0.param().domain_radius
        } else {
            self.chain[l - 1].domain_radius
        }
    }

    pub fn in_domain(&self, l: usize, s: &[f64]) -> bool {
        s.len() == self.dim(l) && s.iter().all(|x| x.abs() < self.radius(l))
    }

    fn check_level(&self, l: usize) -> Result<()> {
        if l > self.depth() {
            return Err(Error::InvalidInput(format!("level {l} exceeds depth {}", self.depth())));
        }
        Ok(())
    }

    fn check_point(&self, l: usize, s: &[f64]) -> Result<()> {
        if s.len() != self.dim(l) {
            return Err(Error::DimensionMismatch(format!("point of length {} in U_{l} of dim {}", s.len(), self.dim(l))));
        }
        if !self.in_domain(l, s) {
            return Err(Error::OutsideDomain(format!("{s:?} not in U_{l}")));
        }
        Ok(())
    }

    /// gamma_{k,l}(s) = gamma_{k+1} o ... o gamma_l (s).
    pub fn gamma_between(&self, k: usize, l: usize, s: &[f64]) -> DVector<f64> {
        let mut x = DVector::from_column_slice(s);
        for t in (k + 1..=l).rev() {
            x = self.chain[t - 1].eval(x.as_slice());
        }
        x
    }

    pub fn sigma(&self, l: usize, s: &[f64]) -> DVector<f64> {
        self.gamma_between(0, l, s)
    }

    /// Jacobian of gamma_{k,l} at s, a d_k x d_l matrix.
    pub fn gamma_jacobian(&self, k: usize, l: usize, s: &[f64]) -> DMatrix<f64> {
        let mut x = DVector::from_column_slice(s);
        let mut jac = DMatrix::identity(s.len(), s.len());
        for t in (k + 1..=l).rev() {
            jac = self.chain[t - 1].jacobian(x.as_slice()) * jac;
            x = self.chain[t - 1].eval(x.as_slice());
        }
        jac
    }

    pub fn sigma_jacobian(&self, l: usize, s: &[f64]) -> DMatrix<f64> {
        self.gamma_jacobian(0, l, s)
    }

    /// Sigma_l = Sigma_0 o sigma_l.
    pub fn big_sigma(&self, l: usize, s: &[f64]) -> DVector<f64> {
        self.sigma0.eval(self.sigma(l, s).as_slice())
    }

    pub fn big_sigma_jacobian(&self, l: usize, s: &[f64]) -> DMatrix<f64> {
        let u = self.sigma(l, s);
        self.sigma0.jacobian(u.as_slice()) * self.sigma_jacobian(l, s)
    }

    /// Orthonormal frame G_l(s) of the normal space of M_{l-1,l} at gamma_l(s).
    pub fn normal_frame(&self, l: usize, s: &[f64]) -> Result<DMatrix<f64>> {
        if l == 0 || l > self.depth() {
            return Err(Error::InvalidInput(format!("normal frame needs 1 <= l <= {}", self.depth())));
        }
        self.check_point(l, s)?;
        Ok(self.normal_frame_unchecked(l, s))
    }

    fn normal_frame_unchecked(&self, l: usize, s: &[f64]) -> DMatrix<f64> {
        let link = &self.chain[l - 1];
        let d = link.in_dim();
        let m = link.codim();
        let dpsi = link.psi.jacobian(s);
        let mut cols: Vec<DVector<f64>> = (0..m)
            .map(|c| DVector::from_fn(d + m, |i, _| if i < d { -dpsi[(c, i)] } else if i - d == c { 1.0 } else { 0.0 }))
            .collect();
        // modified Gram-Schmidt, two passes
        for _ in 0..2 {
            for c in 0..m {
                for p in 0..c {
                    let proj = cols[p].dot(&cols[c]);
                    let q = cols[p].clone();
                    cols[c] -= q * proj;
                }
                let nrm = cols[c].norm();
                cols[c] /= nrm;
            }
        }
        DMatrix::from_columns(&cols)
    }

    fn split_eta<'a>(&self, k: usize, l: usize, eta: &'a [f64]) -> Vec<&'a [f64]> {
        let mut blocks = Vec::with_capacity(l - k);
        let mut off = 0;
        for t in k + 1..=l {
            let m = self.codim(t);
            blocks.push(&eta[off..off + m]);
            off += m;
        }
        blocks
    }

    /// Phi_{k,l}(s; eta) with eta = (eta_{k+1}, ..., eta_l).
    pub fn phi(&self, k: usize, l: usize, s: &[f64], eta: &[f64]) -> Result<DVector<f64>> {
        self.check_level(l)?;
        if k > l {
            return Err(Error::InvalidInput(format!("phi needs k <= l, got {k} > {l}")));
        }
        self.check_point(l, s)?;
        if eta.len() != self.offset_dim(k, l) {
            return Err(Error::DimensionMismatch(format!(
                "offset of length {} for levels {k}..{l}, expected {}",
                eta.len(),
                self.offset_dim(k, l)
            )));
        }
        if eta.iter().any(|e| !(e.abs() < self.eta_bound)) {
            return Err(Error::OutsideDomain(format!("offset outside validity box |eta| < {}", self.eta_bound)));
        }
        let blocks = self.split_eta(k, l, eta);
        let mut x = DVector::from_column_slice(s);
        for t in (k + 1..=l).rev() {
            let g = self.normal_frame_unchecked(t, x.as_slice());
            let e = DVector::from_column_slice(blocks[t - k - 1]);
            x = self.chain[t - 1].eval(x.as_slice()) + g * e;
            if !self.in_domain(t - 1, x.as_slice()) {
                return Err(Error::OutsideDomain(format!("Phi leaves U_{}", t - 1)));
            }
        }
        Ok(x)
    }

    fn phi_raw(&self, k: usize, l: usize, z: &[f64]) -> DVector<f64> {
        let dl = self.dim(l);
        let (s, eta) = z.split_at(dl);
        let blocks = self.split_eta(k, l, eta);
        let mut x = DVector::from_column_slice(s);
        for t in (k + 1..=l).rev() {
            let g = self.normal_frame_unchecked(t, x.as_slice());
            let e = DVector::from_column_slice(blocks[t - k - 1]);
            x = self.chain[t - 1].eval(x.as_slice()) + g * e;
        }
        x
    }

    /// Jacobian of (s, eta) -> Phi_{k,l}(s; eta) by central differences.
    pub fn phi_jacobian_fd(&self, k: usize, l: usize, s: &[f64], eta: &[f64], h: f64) -> DMatrix<f64> {
        let mut z: Vec<f64> = s.to_vec();
        z.extend_from_slice(eta);
        let n = z.len();
        let rows = self.dim(k);
        let mut jac = DMatrix::zeros(rows, n);
        for j in 0..n {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[j] += h;
            zm[j] -= h;
            let col = (self.phi_raw(k, l, &zp) - self.phi_raw(k, l, &zm)) / (2.0 * h);
            jac.set_column(j, &col);
        }
        jac
    }

    /// Inverts Phi_{k,l} by Newton iteration from (x restricted to its first
    /// d_l coordinates, 0). Returns (s, eta).
    pub fn phi_inverse(&self, k: usize, l: usize, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_level(l)?;
        if k > l {
            return Err(Error::InvalidInput(format!("phi_inverse needs k <= l, got {k} > {l}")));
        }
        if x.len() != self.dim(k) {
            return Err(Error::DimensionMismatch(format!("point of length {} in U_{k}", x.len())));
        }
        let dl = self.dim(l);
        let target = DVector::from_column_slice(x);
        let mut z: Vec<f64> = x[..dl].to_vec();
        z.extend(std::iter::repeat(0.0).take(self.offset_dim(k, l)));
        let scale = target.amax().max(1.0);
        let mut converged = false;
        for _ in 0..50 {
            let f = self.phi_raw(k, l, &z) - &target;
            if f.norm() <= 1e-13 * scale {
                converged = true;
                break;
            }
            let (s, eta) = z.split_at(dl);
            let jac = self.phi_jacobian_fd(k, l, s, eta, 1e-6);
            let step = jac
                .lu()
                .solve(&f)
                .ok_or_else(|| Error::NonConvergence("singular Jacobian in phi_inverse".into()))?;
            for (zi, si) in z.iter_mut().zip(step.iter()) {
                *zi -= si;
            }
            if z.iter().any(|v| !v.is_finite() || v.abs() > 1e6) {
                return Err(Error::NonConvergence("Newton iterate diverged".into()));
            }
        }
        if !converged {
            let f = self.phi_raw(k, l, &z) - &target;
            if f.norm() > 1e-12 * scale {
                return Err(Error::NonConvergence(format!("residual {:e} after 50 iterations", f.norm())));
            }
        }
        let (s, eta) = z.split_at(dl);
        if !self.in_domain(l, s) || eta.iter().any(|e| !(e.abs() < self.eta_bound)) {
            return Err(Error::OutsideDomain("preimage outside the chart".into()));
        }
        Ok((s.to_vec(), eta.to_vec()))
    }

    /// dsigma_l(s), B_l(s) = [B_{1,l} ... B_{l,l}] and Lambda_l = [B | dsigma].
    pub fn derivative_matrices(&self, l: usize, s: &[f64]) -> Result<DerivativeMatrices> {
        self.check_level(l)?;
        self.check_point(l, s)?;
        let d0 = self.dim(0);
        let dsigma = self.sigma_jacobian(l, s);
        let mut b = DMatrix::zeros(d0, self.offset_dim(0, l));
        let mut col = 0;
        for k in 1..=l {
            let y = self.gamma_between(k, l, s);
            let g = self.normal_frame_unchecked(k, y.as_slice());
            let base = self.gamma_between(k - 1, l, s);
            let block = self.sigma_jacobian(k - 1, base.as_slice()) * g;
            b.view_mut((0, col), (d0, block.ncols())).copy_from(&block);
            col += block.ncols();
        }
        let mut lambda = DMatrix::zeros(d0, d0);
        lambda.view_mut((0, 0), (d0, b.ncols())).copy_from(&b);
        lambda.view_mut((0, b.ncols()), (d0, dsigma.ncols())).copy_from(&dsigma);
        let sv = lambda.singular_values();
        if sv.min() <= 1e-10 * sv.max() {
            return Err(Error::SingularFrame(format!("Lambda_{l} is singular at {s:?}")));
        }
        Ok(DerivativeMatrices { dsigma, b, lambda })
    }

    /// Euclidean distance from `u` in U_k to M_{k,t} = gamma_{k,t}(U_t).
    pub fn distance(&self, k: usize, t: usize, u: &[f64], opts: &DistanceOptions) -> f64 {
        let dt = self.dim(t);
        let r = self.radius(t);
        let g = {
            let mut g = opts.grid_per_axis.max(2);
            while g > 2 && (g as f64).powi(dt as i32) > opts.max_seeds as f64 {
                g -= 1;
            }
            g
        };
        let total = g.pow(dt as u32);
        let mut seeds: Vec<(f64, Vec<f64>)> = Vec::with_capacity(total + 1);
        let proj: Vec<f64> = u[..dt].iter().map(|x| x.clamp(-r, r)).collect();
        let target = DVector::from_column_slice(u);
        let resid = |s: &[f64]| (self.gamma_between(k, t, s) - &target).norm();
        seeds.push((resid(&proj), proj));
        for idx in 0..total {
            let mut rem = idx;
            let s: Vec<f64> = (0..dt)
                .map(|_| {
                    let i = rem % g;
                    rem /= g;
                    r * (2.0 * (i as f64 + 0.5) / g as f64 - 1.0)
                })
                .collect();
            seeds.push((resid(&s), s));
        }
        seeds.sort_by(|a, b| a.0.total_cmp(&b.0));
        seeds.truncate(4);
        seeds.into_iter().map(|(_, s)| self.refine_distance(k, t, &target, s)).fold(f64::INFINITY, f64::min)
    }

    /// Distance from `u` to M_{k,t} searched only within `radius` of the
    /// coordinate projection, which suffices to decide `dist < radius`
    /// because the first d_t coordinates of gamma_{k,t}(s) equal s.
    pub fn local_distance(&self, k: usize, t: usize, u: &[f64], radius: f64) -> f64 {
        let dt = self.dim(t);
        let r = self.radius(t);
        let target = DVector::from_column_slice(u);
        let proj: Vec<f64> = u[..dt].iter().map(|x| x.clamp(-r, r)).collect();
        let mut best = self.refine_distance(k, t, &target, proj.clone());
        let g = 3usize;
        let total = g.pow(dt as u32);
        for idx in 0..total {
            let mut rem = idx;
            let s: Vec<f64> = (0..dt)
                .map(|a| {
                    let i = rem % g;
                    rem /= g;
                    (proj[a] + radius * (i as f64 - 1.0) * 0.5).clamp(-r, r)
                })
                .collect();
            best = best.min(self.refine_distance(k, t, &target, s));
        }
        best
    }

    fn refine_distance(&self, k: usize, t: usize, target: &DVector<f64>, mut s: Vec<f64>) -> f64 {
        let r = self.radius(t);
        let mut res = self.gamma_between(k, t, &s) - target;
        let mut val = res.norm();
        let mut lambda = 1e-12;
        for _ in 0..60 {
            let j = self.gamma_jacobian(k, t, &s);
            let jt = j.transpose();
            let mut a = &jt * &j;
            for i in 0..a.nrows() {
                a[(i, i)] += lambda;
            }
            let g = &jt * &res;
            let Some(step) = a.lu().solve(&g) else { break };
            let cand: Vec<f64> = s.iter().zip(step.iter()).map(|(x, d)| (x - d).clamp(-r, r)).collect();
            let cres = self.gamma_between(k, t, &cand) - target;
            let cval = cres.norm();
            if cval < val {
                let moved = s.iter().zip(&cand).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                s = cand;
                res = cres;
                val = cval;
                lambda = (lambda * 0.1).max(1e-14);
                if moved < 1e-12 {
                    break;
                }
            } else {
                lambda *= 100.0;
                if lambda > 1e6 {
                    break;
                }
            }
        }
        val
    }

    /// Membership of `u` in the neighbourhood set N_{k,l}(mu; rho): inside U_k
    /// and within rho * mu_t of M_{k,t} for every k < t <= l.
    pub fn in_neighbourhood(&self, k: usize, l: usize, u: &[f64], mu: &[f64], rho: f64) -> bool {
        if !self.in_domain(k, u) {
            return false;
        }
        (k + 1..=l).all(|t| {
            let thr = rho * mu[t - 1];
            self.local_distance(k, t, u, thr) < thr
        })
    }

    /// Membership in N_{0,r}(mu; rho).
    pub fn neighbourhood_membership(&self, u: &[f64], mu: &[f64], rho: f64) -> bool {
        self.in_neighbourhood(0, self.depth(), u, mu, rho)
    }

    pub fn check_scales(&self, mu: &[f64]) -> Result<()> {
        if mu.len() != self.depth() {
            return Err(Error::DimensionMismatch(format!("{} scales for depth {}", mu.len(), self.depth())));
        }
        if mu.iter().any(|m| !(*m > 0.0)) || mu.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Precondition("scales must be positive and non-decreasing".into()));
        }
        Ok(())
    }

    /// Random point of Phi_{k,l}(U_l x box), with offsets uniform in
    /// `[-spread*mu_t, spread*mu_t]`. Returns None when Phi rejects the draw.
    pub fn sample_tube<R: Rng + ?Sized>(
        &self,
        k: usize,
        l: usize,
        mu: &[f64],
        spread: f64,
        inner: f64,
        rng: &mut R,
    ) -> Option<(Vec<f64>, Vec<f64>, DVector<f64>)> {
        let r = self.radius(l) * inner;
        let s: Vec<f64> = (0..self.dim(l)).map(|_| rng.gen_range(-r..r)).collect();
        let mut eta = Vec::with_capacity(self.offset_dim(k, l));
        for t in k + 1..=l {
            let h = spread * mu[t - 1];
            for _ in 0..self.codim(t) {
                eta.push(rng.gen_range(-h..=h));
            }
        }
        self.phi(k, l, &s, &eta).ok().map(|x| (s, eta, x))
    }

    /// Samples both inclusions N(mu;1) in Omega(mu) in N(mu;C) for all
    /// 0 <= k < l <= r.
    pub fn verify_omega_inclusions(&self, mu: &[f64], samples: usize, seed: u64) -> Result<OmegaReport> {
        self.check_scales(mu)?;
        let cap = self.c_cover * self.mu_threshold;
        if mu.iter().any(|&m| m > cap) {
            return Err(Error::Precondition(format!("scales exceed C*mu_threshold = {cap}")));
        }
        let c18 = self.c_cover.powf(0.125);
        let r = self.depth();
        let mut report = OmegaReport::default();
        for l in 1..=r {
            for k in 0..l {
                let outcomes = par::map_range(samples, |i| {
                    let mut rng = stream(seed, &[k as u64, l as u64, i as u64]);
                    let mut out = (0usize, 0usize, 0usize, 0usize);
                    // lower inclusion: neighbourhood points invert into the box
                    match self.sample_tube(k, l, mu, 1.5, 0.9, &mut rng) {
                        Some((_, _, x)) if self.in_neighbourhood(k, l, x.as_slice(), mu, 1.0) => {
                            out.0 += 1;
                            let ok = match self.phi_inverse(k, l, x.as_slice()) {
                                Ok((_, eta)) => {
                                    let mut off = 0;
                                    (k + 1..=l).all(|t| {
                                        let m = self.codim(t);
                                        let blk = &eta[off..off + m];
                                        off += m;
                                        blk.iter().all(|e| e.abs() <= c18 * mu[t - 1] * (1.0 + 1e-9))
                                    })
                                }
                                Err(_) => false,
                            };
                            if !ok {
                                out.3 += 1;
                            }
                        }
                        _ => out.2 += 1,
                    }
                    // upper inclusion: the parametrised box lies in the C-neighbourhood
                    match self.sample_tube(k, l, mu, c18, 0.9, &mut rng) {
                        Some((_, _, x)) => {
                            out.1 += 1;
                            if !self.in_neighbourhood(k, l, x.as_slice(), mu, self.c_cover) {
                                out.3 += 1;
                            }
                        }
                        None => out.2 += 1,
                    }
                    out
                });
                for o in outcomes {
                    report.lower_checked += o.0;
                    report.upper_checked += o.1;
                    report.skipped += o.2;
                    report.violations += o.3;
                }
            }
        }
        Ok(report)
    }
}

/// k nested families with exponents q_j in (0, 2].
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "RawEnsemble", into = "RawEnsemble")]
pub struct Ensemble {
    families: Vec<NestedFamily>,
    exponents: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawEnsemble {
    families: Vec<NestedFamily>,
    exponents: Vec<f64>,
}

impl TryFrom<RawEnsemble> for Ensemble {
    type Error = Error;
    fn try_from(r: RawEnsemble) -> Result<Self> {
        Ensemble::new(r.families, r.exponents)
    }
}

impl From<Ensemble> for RawEnsemble {
    fn from(e: Ensemble) -> Self {
        RawEnsemble { families: e.families, exponents: e.exponents }
    }
}

impl Ensemble {
    pub fn new(families: Vec<NestedFamily>, exponents: Vec<f64>) -> Result<Self> {
        let k = families.len();
        if k == 0 {
            return Err(Error::InvalidInput("ensemble needs at least one family".into()));
        }
        let n = families[0].ambient_dim();
        if families.iter().any(|f| f.ambient_dim() != n) {
            return Err(Error::DimensionMismatch("families live in different ambient spaces".into()));
        }
        if k < 2 || k > n {
            return Err(Error::InvalidInput(format!("need 2 <= k <= n, got k = {k}, n = {n}")));
        }
        if exponents.len() != k {
            return Err(Error::DimensionMismatch(format!("{k} families but {} exponents", exponents.len())));
        }
        if let Some(q) = exponents.iter().find(|q| !(**q > 0.0 && **q <= 2.0)) {
            return Err(Error::InvalidExponent(format!("q = {q} outside (0, 2]")));
        }
        Ok(Ensemble { families, exponents })
    }

    /// Same families with every exponent equal to `2/(k-1)`.
    pub fn with_balanced_exponents(families: Vec<NestedFamily>) -> Result<Self> {
        let k = families.len();
        let q = 2.0 / (k as f64 - 1.0).max(1.0);
        Ensemble::new(families, vec![q; k])
    }

    pub fn families(&self) -> &[NestedFamily] {
        &self.families
    }

    pub fn exponents(&self) -> &[f64] {
        &self.exponents
    }

    pub fn ambient_dim(&self) -> usize {
        self.families[0].ambient_dim()
    }

    /// Maps `(d Sigma_{j,r_j}(0))^T` with exponents `q_j/2`.
    pub fn datum(&self) -> Result<BlDatum> {
        let maps: Vec<LinearMap> = self
            .families
            .iter()
            .map(|f| {
                let s0 = vec![0.0; f.dim(f.depth())];
                LinearMap::new(f.big_sigma_jacobian(f.depth(), &s0).transpose())
            })
            .collect();
        let p = self.exponents.iter().map(|q| q / 2.0).collect();
        BlDatum::new(maps, p)
    }
}

pub fn ensemble_datum(ens: &Ensemble) -> Result<BlDatum> {
    ens.datum()
}
