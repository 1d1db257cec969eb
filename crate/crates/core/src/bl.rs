//! Brascamp-Lieb data, the finiteness exponent alpha, and regularised
//! constants restricted to unit-lattice step functions.

use std::cmp::Ordering;
use std::collections::HashMap;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{self, dim_image, kernel, LinearMap, Subspace, DEFAULT_TOL};
use crate::rng::stream;
use crate::{Error, Result};

/// Surjective maps `L_j: R^n -> R^{n_j}` with exponents `p_j` in (0, 1].
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "RawDatum", into = "RawDatum")]
pub struct BlDatum {
    ambient: usize,
    maps: Vec<LinearMap>,
    exponents: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawDatum {
    maps: Vec<LinearMap>,
    exponents: Vec<f64>,
}

impl TryFrom<RawDatum> for BlDatum {
    type Error = Error;
    fn try_from(r: RawDatum) -> Result<Self> {
        BlDatum::new(r.maps, r.exponents)
    }
}

impl From<BlDatum> for RawDatum {
    fn from(d: BlDatum) -> Self {
        RawDatum { maps: d.maps, exponents: d.exponents }
    }
}

impl BlDatum {
    pub fn new(maps: Vec<LinearMap>, exponents: Vec<f64>) -> Result<Self> {
        Self::build(maps, exponents, true)
    }

    /// Like [`BlDatum::new`] but allows exponents above 1. Used when the
    /// exponent is dictated by a geometric normalisation rather than chosen.
    pub fn new_unbounded(maps: Vec<LinearMap>, exponents: Vec<f64>) -> Result<Self> {
        Self::build(maps, exponents, false)
    }

    fn build(maps: Vec<LinearMap>, exponents: Vec<f64>, cap_at_one: bool) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::InvalidInput("datum needs at least one map".into()));
        }
        if maps.len() != exponents.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} maps but {} exponents",
                maps.len(),
                exponents.len()
            )));
        }
        let n = maps[0].cols();
        for (j, m) in maps.iter().enumerate() {
            if m.cols() != n {
                return Err(Error::DimensionMismatch(format!("map {j} acts on R^{}, expected R^{n}", m.cols())));
            }
            let rank = m.rank(DEFAULT_TOL);
            if rank != m.rows() {
                return Err(Error::NotSurjective { index: j, rank, target: m.rows() });
            }
        }
        for (j, &p) in exponents.iter().enumerate() {
            let ok = p > 0.0 && p.is_finite() && (!cap_at_one || p <= 1.0);
            if !ok {
                return Err(Error::InvalidExponent(format!("p_{j} = {p}")));
            }
        }
        Ok(BlDatum { ambient: n, maps, exponents })
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient
    }

    pub fn maps(&self) -> &[LinearMap] {
        &self.maps
    }

    pub fn exponents(&self) -> &[f64] {
        &self.exponents
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn kernels(&self) -> Vec<Subspace> {
        self.maps.iter().map(|m| kernel(m, DEFAULT_TOL)).collect()
    }

    /// Sum of exponent-weighted target dimensions; equals n under scaling.
    pub fn scaling_sum(&self) -> f64 {
        self.maps.iter().zip(&self.exponents).map(|(m, p)| p * m.rows() as f64).sum()
    }
}

/// `dim V - sum_j p_j dim(L_j V)`.
pub fn bl_functional(v: &Subspace, datum: &BlDatum) -> Result<f64> {
    if v.ambient_dim() != datum.ambient {
        return Err(Error::DimensionMismatch(format!(
            "subspace of R^{} for datum on R^{}",
            v.ambient_dim(),
            datum.ambient
        )));
    }
    let mut acc = v.dim() as f64;
    for (m, p) in datum.maps.iter().zip(&datum.exponents) {
        acc -= p * dim_image(m, v, DEFAULT_TOL)? as f64;
    }
    Ok(acc)
}

#[derive(Clone, Debug)]
pub struct AlphaWitness {
    pub alpha: f64,
    pub witness: Subspace,
    pub exhaustive: bool,
}

/// Tuning for [`alpha_search`]; [`alpha_lower_bound`] uses the defaults.
#[derive(Clone, Debug)]
pub struct AlphaSearch {
    pub depth: usize,
    pub random_budget: usize,
    pub seed: u64,
    pub lattice_cap: usize,
}

impl Default for AlphaSearch {
    fn default() -> Self {
        AlphaSearch { depth: 4, random_budget: 4, seed: 0, lattice_cap: 256 }
    }
}

const TIE: f64 = 1e-9;

pub fn alpha_lower_bound(datum: &BlDatum, depth: usize, random_budget: usize, seed: u64) -> Result<AlphaWitness> {
    alpha_search(datum, &AlphaSearch { depth, random_budget, seed, ..AlphaSearch::default() })
}

pub fn alpha_search(datum: &BlDatum, opts: &AlphaSearch) -> Result<AlphaWitness> {
    if opts.depth == 0 {
        return Err(Error::InvalidInput("depth must be at least 1".into()));
    }
    let n = datum.ambient;
    let kernels = datum.kernels();
    let (lattice, exhaustive) = candidate_lattice(n, &kernels, opts.depth, opts.lattice_cap)?;

    let mut best: Option<(f64, Subspace)> = None;
    let mut consider = |v: Subspace, val: f64| {
        let replace = match &best {
            None => true,
            Some((b, w)) => better(val, &v, *b, w),
        };
        if replace {
            best = Some((val, v));
        }
    };
    for v in &lattice {
        let val = bl_functional(v, datum)?;
        consider(v.clone(), val);
    }

    let pool: Vec<DVector<f64>> =
        kernels.iter().flat_map(|k| k.basis().column_iter().map(|c| c.into_owned()).collect::<Vec<_>>()).collect();
    for d in 1..n {
        for b in 0..opts.random_budget {
            let mut rng = stream(opts.seed, &[d as u64, b as u64]);
            let v0 = Subspace::random(n, d, &mut rng);
            let (v, val) = greedy_align(v0, datum, &pool)?;
            consider(v, val);
        }
    }
    let (alpha, witness) = best.expect("lattice always contains the zero subspace");
    Ok(AlphaWitness { alpha, witness, exhaustive })
}

/// Order on candidates: larger functional, then lower dimension, then
/// lexicographically smaller projection matrix.
fn better(val: f64, v: &Subspace, best_val: f64, best: &Subspace) -> bool {
    if val > best_val + TIE {
        return true;
    }
    if val < best_val - TIE {
        return false;
    }
    match v.dim().cmp(&best.dim()) {
        Ordering::Less => true,
        Ordering::Greater => false,
        Ordering::Equal => lex_cmp(v, best) == Ordering::Less,
    }
}

fn lex_cmp(a: &Subspace, b: &Subspace) -> Ordering {
    let pa = a.projection();
    let pb = b.projection();
    for (x, y) in pa.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()).zip(
        pb.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()),
    ) {
        if (x - y).abs() > TIE {
            return x.total_cmp(&y);
        }
    }
    Ordering::Equal
}

fn greedy_align(mut v: Subspace, datum: &BlDatum, pool: &[DVector<f64>]) -> Result<(Subspace, f64)> {
    let n = v.ambient_dim();
    let d = v.dim();
    let mut val = bl_functional(&v, datum)?;
    let max_steps = 4 * n * n + 4;
    for _ in 0..max_steps {
        let mut improved = false;
        'swap: for i in 0..d {
            for w in pool {
                let mut cols: Vec<Vec<f64>> = v
                    .basis()
                    .column_iter()
                    .enumerate()
                    .filter(|(c, _)| *c != i)
                    .map(|(_, c)| c.iter().copied().collect())
                    .collect();
                cols.push(w.iter().copied().collect());
                let cand = linalg::orthonormalize(n, &cols, DEFAULT_TOL)?;
                if cand.dim() != d {
                    continue;
                }
                let cv = bl_functional(&cand, datum)?;
                if cv > val + TIE {
                    v = cand;
                    val = cv;
                    improved = true;
                    break 'swap;
                }
            }
        }
        if !improved {
            break;
        }
    }
    Ok((v, val))
}

struct LatticeSet {
    items: Vec<Subspace>,
    by_dim: HashMap<usize, Vec<usize>>,
}

impl LatticeSet {
    fn new() -> Self {
        LatticeSet { items: Vec::new(), by_dim: HashMap::new() }
    }

    fn contains(&self, v: &Subspace) -> bool {
        self.by_dim
            .get(&v.dim())
            .map(|ids| ids.iter().any(|&i| self.items[i].projection_distance_frobenius(v) < 1e-6))
            .unwrap_or(false)
    }

    fn insert(&mut self, v: Subspace) -> bool {
        if self.contains(&v) {
            return false;
        }
        self.by_dim.entry(v.dim()).or_default().push(self.items.len());
        self.items.push(v);
        true
    }
}

/// Closure of `{0, R^n, kernels, sum of kernels}` under pairwise sums and
/// intersections, iterated `depth` times. The flag is true when a round adds
/// nothing new before the depth or size cap is reached.
pub fn candidate_lattice(n: usize, kernels: &[Subspace], depth: usize, cap: usize) -> Result<(Vec<Subspace>, bool)> {
    let mut set = LatticeSet::new();
    set.insert(Subspace::zero(n));
    set.insert(Subspace::full(n));
    let mut w = Subspace::zero(n);
    for k in kernels {
        set.insert(k.clone());
        w = linalg::subspace_sum(&w, k)?;
    }
    set.insert(w);

    let mut frontier = 0;
    for _ in 0..depth {
        let before = set.items.len();
        let mut added = false;
        'round: for i in frontier..before {
            for j in 0..before {
                if j >= frontier && j >= i {
                    continue;
                }
                let (a, b) = (&set.items[i], &set.items[j]);
                let s = linalg::subspace_sum(a, b)?;
                if s.dim() == a.dim().max(b.dim()) {
                    // one contains the other
                    continue;
                }
                let t = linalg::subspace_intersect(a, b)?;
                for c in [s, t] {
                    if set.items.len() >= cap {
                        break 'round;
                    }
                    added |= set.insert(c);
                }
            }
        }
        if set.items.len() >= cap {
            return Ok((set.items, false));
        }
        if !added {
            return Ok((set.items, true));
        }
        frontier = before;
    }
    Ok((set.items, false))
}

#[derive(Clone, Debug)]
pub struct FinitenessVerdict {
    pub finite: bool,
    pub certified: bool,
    pub witness: AlphaWitness,
}

/// One-sided test: a negative answer is certified by the witness subspace, a
/// positive one only when the lattice search was exhaustive.
pub fn is_finite_blreg(datum: &BlDatum, tol: f64) -> Result<FinitenessVerdict> {
    let w = alpha_search(datum, &AlphaSearch::default())?;
    let finite = w.alpha <= tol;
    Ok(FinitenessVerdict { finite, certified: !finite || w.exhaustive, witness: w })
}

#[derive(Clone, Debug, Serialize)]
pub struct EquivalenceReport {
    pub wedge: f64,
    pub alpha: f64,
    pub agree: bool,
}

/// Compares transversality of the kernels with finiteness at `p_j = 1/(k-1)`.
pub fn prop21_equivalence_report(kernels: &[Subspace], maps: &[LinearMap], tol: f64) -> Result<EquivalenceReport> {
    let k = kernels.len();
    if k < 2 {
        return Err(Error::InvalidInput("need at least two kernels".into()));
    }
    if maps.len() != k {
        return Err(Error::DimensionMismatch(format!("{k} kernels but {} maps", maps.len())));
    }
    for (j, (kj, m)) in kernels.iter().zip(maps).enumerate() {
        if kernel(m, DEFAULT_TOL).distance(kj) > 1e-6 {
            return Err(Error::InvalidInput(format!("map {j} does not have the given kernel")));
        }
    }
    let p = 1.0 / (k as f64 - 1.0);
    let datum = BlDatum::new(maps.to_vec(), vec![p; k])?;
    let wedge = linalg::wedge_magnitude(kernels)?;
    let alpha = alpha_search(&datum, &AlphaSearch { random_budget: 2, ..AlphaSearch::default() })?.alpha;
    Ok(EquivalenceReport { wedge, alpha, agree: (wedge > tol) == (alpha <= tol) })
}

#[derive(Clone, Debug)]
pub struct BlregOptions {
    /// Midpoint quadrature points per unit length along each axis.
    pub points_per_unit: usize,
    /// Largest number of quadrature points allowed in Q_R.
    pub grid_cap: usize,
    /// Random restarts after the deterministic starts.
    pub restarts: usize,
}

impl Default for BlregOptions {
    fn default() -> Self {
        BlregOptions { points_per_unit: 2, grid_cap: 4_000_000, restarts: 3 }
    }
}

pub fn blreg_lower_bound(datum: &BlDatum, r: f64, iters: usize, seed: u64) -> Result<f64> {
    blreg_lower_bound_with(datum, r, iters, seed, &BlregOptions::default())
}

/// Best ratio found by toggling ascent over indicator step functions on unit
/// lattice cubes, with the left side integrated over Q_R by a midpoint rule.
pub fn blreg_lower_bound_with(datum: &BlDatum, r: f64, iters: usize, seed: u64, opts: &BlregOptions) -> Result<f64> {
    if !(r >= 1.0) {
        return Err(Error::InvalidInput(format!("R = {r} must be at least 1")));
    }
    if opts.points_per_unit == 0 {
        return Err(Error::InvalidInput("points_per_unit must be positive".into()));
    }
    let n = datum.ambient;
    let per_axis = (2.0 * r * opts.points_per_unit as f64).ceil() as usize;
    let total = (per_axis as f64).powi(n as i32);
    if total > opts.grid_cap as f64 {
        return Err(Error::Budget(format!(
            "{per_axis}^{n} quadrature points exceed the cap of {}",
            opts.grid_cap
        )));
    }
    let total = total as usize;
    let h = 2.0 * r / per_axis as f64;
    let cell = h.powi(n as i32);
    let k = datum.len();

    // cube_of[j][x] indexes the lattice cube containing L_j x
    let mut cube_of: Vec<Vec<u32>> = vec![Vec::with_capacity(total); k];
    let mut cube_ids: Vec<HashMap<Vec<i64>, u32>> = vec![HashMap::new(); k];
    let mut x = DVector::zeros(n);
    let mut centre_point = 0usize;
    let mut best_centre = f64::INFINITY;
    for idx in 0..total {
        let mut rem = idx;
        for a in 0..n {
            let i = rem % per_axis;
            rem /= per_axis;
            x[a] = -r + (i as f64 + 0.5) * h;
        }
        let norm = x.amax();
        if norm < best_centre {
            best_centre = norm;
            centre_point = idx;
        }
        for j in 0..k {
            let y = datum.maps[j].apply(&x);
            let key: Vec<i64> = y.iter().map(|v| v.floor() as i64).collect();
            let next = cube_ids[j].len() as u32;
            let id = *cube_ids[j].entry(key).or_insert(next);
            cube_of[j].push(id);
        }
    }
    let ncubes: Vec<usize> = cube_ids.iter().map(|m| m.len()).collect();
    let mut points_in: Vec<Vec<Vec<u32>>> = ncubes.iter().map(|&c| vec![Vec::new(); c]).collect();
    for j in 0..k {
        for (p, &c) in cube_of[j].iter().enumerate() {
            points_in[j][c as usize].push(p as u32);
        }
    }

    let ratio = |count: usize, ones: &[usize]| -> f64 {
        if count == 0 || ones.iter().any(|&o| o == 0) {
            return 0.0;
        }
        let mut den = 1.0;
        for (o, p) in ones.iter().zip(&datum.exponents) {
            den *= (*o as f64).powf(*p);
        }
        cell * count as f64 / den
    };

    let ascend = |on: &mut Vec<Vec<bool>>, budget: usize, rng: &mut rand_chacha::ChaCha8Rng| -> f64 {
        let mut ones: Vec<usize> = on.iter().map(|v| v.iter().filter(|&&b| b).count()).collect();
        let mut count = (0..total)
            .filter(|&p| (0..k).all(|j| on[j][cube_of[j][p] as usize]))
            .count();
        let mut cur = ratio(count, &ones);
        let mut moves: Vec<(usize, usize)> =
            (0..k).flat_map(|j| (0..ncubes[j]).map(move |c| (j, c))).collect();
        let mut used = 0usize;
        loop {
            moves.shuffle(rng);
            let mut improved = false;
            for &(j, c) in &moves {
                if used >= budget {
                    return cur;
                }
                used += 1;
                let touched = points_in[j][c]
                    .iter()
                    .filter(|&&p| (0..k).all(|i| i == j || on[i][cube_of[i][p as usize] as usize]))
                    .count();
                let (new_count, new_ones) = if on[j][c] {
                    (count - touched, ones[j] - 1)
                } else {
                    (count + touched, ones[j] + 1)
                };
                let saved = ones[j];
                ones[j] = new_ones;
                let cand = ratio(new_count, &ones);
                if cand > cur * (1.0 + 1e-12) {
                    on[j][c] = !on[j][c];
                    count = new_count;
                    cur = cand;
                    improved = true;
                } else {
                    ones[j] = saved;
                }
            }
            if !improved {
                return cur;
            }
        }
    };

    let starts = 1 + opts.restarts;
    let per_start = (iters / starts).max(1);
    let mut best = 0.0f64;

    let mut on: Vec<Vec<bool>> = ncubes.iter().map(|&c| vec![false; c]).collect();
    for j in 0..k {
        on[j][cube_of[j][centre_point] as usize] = true;
    }
    let mut rng = stream(seed, &[0]);
    best = best.max(ascend(&mut on, per_start, &mut rng));

    for s in 0..opts.restarts {
        let mut rng = stream(seed, &[1, s as u64]);
        let anchor = rng.gen_range(0..total);
        let density: f64 = rng.gen_range(0.0..0.5);
        let mut on: Vec<Vec<bool>> = ncubes.iter().map(|&c| vec![false; c]).collect();
        for j in 0..k {
            for c in 0..ncubes[j] {
                on[j][c] = rng.gen::<f64>() < density;
            }
            on[j][cube_of[j][anchor] as usize] = true;
        }
        best = best.max(ascend(&mut on, per_start, &mut rng));
    }
    Ok(best)
}

#[derive(Clone, Debug, Serialize)]
pub struct WedgeCheck {
    pub lower_bound: f64,
    pub wedge: f64,
    pub predicted: f64,
    pub ratio: f64,
}

/// Lower bound for orthogonal projections with the given kernels, compared
/// with `wedge^{-1/(k-1)}`.
pub fn quantitative_wedge_check(
    kernels: &[Subspace],
    r: f64,
    iters: usize,
    seed: u64,
    opts: &BlregOptions,
) -> Result<WedgeCheck> {
    let k = kernels.len();
    if k < 2 {
        return Err(Error::InvalidInput("need at least two kernels".into()));
    }
    let wedge = linalg::wedge_magnitude(kernels)?;
    if wedge <= DEFAULT_TOL {
        return Err(Error::Precondition(format!("kernels are not transverse (wedge {wedge:e})")));
    }
    let maps: Vec<LinearMap> = kernels.iter().map(LinearMap::orthogonal_projection_with_kernel).collect();
    let p = 1.0 / (k as f64 - 1.0);
    let datum = BlDatum::new(maps, vec![p; k])?;
    let lower_bound = blreg_lower_bound_with(&datum, r, iters, seed, opts)?;
    let predicted = wedge.powf(-p);
    Ok(WedgeCheck { lower_bound, wedge, predicted, ratio: lower_bound / predicted })
}

/// Checks that the parent maps never see more of a subspace than the child
/// maps they factor through.
pub fn subensemble_monotonicity_check(
    parent: &[LinearMap],
    child: &[LinearMap],
    samples: usize,
    seed: u64,
) -> Result<bool> {
    if parent.len() != child.len() || parent.is_empty() {
        return Err(Error::DimensionMismatch("parent and child lists differ in length".into()));
    }
    let n = parent[0].cols();
    for (j, (p, c)) in parent.iter().zip(child).enumerate() {
        if p.cols() != n || c.cols() != n {
            return Err(Error::DimensionMismatch(format!("map {j} has the wrong domain")));
        }
        let prow = Subspace::column_space(&p.matrix().transpose(), DEFAULT_TOL);
        let crow = Subspace::column_space(&c.matrix().transpose(), DEFAULT_TOL);
        if !prow.is_subspace_of(&crow, 1e-8) {
            return Err(Error::Precondition(format!("parent map {j} does not factor through child map {j}")));
        }
    }
    let mut candidates: Vec<Subspace> = Vec::new();
    let mut gens: Vec<Subspace> = parent.iter().map(|m| kernel(m, DEFAULT_TOL)).collect();
    gens.extend(child.iter().map(|m| kernel(m, DEFAULT_TOL)));
    candidates.extend(candidate_lattice(n, &gens, 2, 128)?.0);
    let mut rng = stream(seed, &[]);
    for _ in 0..samples {
        let d = rng.gen_range(0..=n);
        candidates.push(Subspace::random(n, d, &mut rng));
    }
    for v in &candidates {
        for (p, c) in parent.iter().zip(child) {
            if dim_image(p, v, DEFAULT_TOL)? > dim_image(c, v, DEFAULT_TOL)? {
                return Ok(false);
            }
        }
    }
    Ok(true)
}
