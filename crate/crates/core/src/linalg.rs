//! Subspaces of R^n represented by orthonormal bases, with tolerance-aware
//! rank decisions.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-10;

/// Orthonormal basis of a subspace, stored as the columns of an n x d matrix.
#[derive(Clone, Debug)]
pub struct Subspace {
    basis: DMatrix<f64>,
    tol: f64,
}

impl Subspace {
    pub fn zero(n: usize) -> Self {
        Subspace { basis: DMatrix::zeros(n, 0), tol: DEFAULT_TOL }
    }

    pub fn full(n: usize) -> Self {
        Subspace { basis: DMatrix::identity(n, n), tol: DEFAULT_TOL }
    }

    /// Span of the given vectors, each of length `n`.
    pub fn span(n: usize, vectors: &[Vec<f64>]) -> Result<Self> {
        orthonormalize(n, vectors, DEFAULT_TOL)
    }

    /// Span of coordinate axes `e_i` (zero-based indices).
    pub fn coordinate(n: usize, axes: &[usize]) -> Self {
        let mut b = DMatrix::zeros(n, axes.len());
        for (c, &i) in axes.iter().enumerate() {
            b[(i, c)] = 1.0;
        }
        Subspace { basis: b, tol: DEFAULT_TOL }
    }

    /// Column space of `m`.
    pub fn column_space(m: &DMatrix<f64>, tol: f64) -> Self {
        let n = m.nrows();
        if m.ncols() == 0 || n == 0 {
            return Subspace { basis: DMatrix::zeros(n, 0), tol };
        }
        let svd = m.clone().svd(true, false);
        let u = svd.u.expect("svd computed with u");
        let smax = svd.singular_values.max();
        if !(smax > f64::MIN_POSITIVE) {
            return Subspace { basis: DMatrix::zeros(n, 0), tol };
        }
        let mut cols = Vec::new();
        for (i, &s) in svd.singular_values.iter().enumerate() {
            if s > tol * smax {
                cols.push(u.column(i).into_owned());
            }
        }
        Subspace { basis: from_columns(n, &cols), tol }
    }

    /// Random subspace of dimension `d` drawn from the Gaussian ensemble.
    pub fn random<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Self {
        let m = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        Subspace::column_space(&m, DEFAULT_TOL)
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn tol(&self) -> f64 {
        self.tol
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn vectors(&self) -> Vec<Vec<f64>> {
        self.basis.column_iter().map(|c| c.iter().copied().collect()).collect()
    }

    pub fn projection(&self) -> DMatrix<f64> {
        &self.basis * self.basis.transpose()
    }

    pub fn complement(&self) -> Subspace {
        let n = self.ambient_dim();
        if self.dim() == 0 {
            return Subspace { basis: DMatrix::identity(n, n), tol: self.tol };
        }
        if self.dim() == n {
            return Subspace { basis: DMatrix::zeros(n, 0), tol: self.tol };
        }
        let p = DMatrix::identity(n, n) - self.projection();
        let eig = SymmetricEigen::new(p);
        let mut idx: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] > 0.5).collect();
        idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let cols: Vec<DVector<f64>> = idx.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect();
        Subspace { basis: from_columns(n, &cols), tol: self.tol }
    }

    /// Orthogonal projection of `v` onto the subspace.
    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.basis * (self.basis.transpose() * v)
    }

    pub fn contains(&self, v: &DVector<f64>, tol: f64) -> bool {
        (v - self.project(v)).norm() <= tol * v.norm().max(1.0)
    }

    pub fn is_subspace_of(&self, other: &Subspace, tol: f64) -> bool {
        self.basis.column_iter().all(|c| other.contains(&c.into_owned(), tol))
    }

    /// Operator-norm distance between projections; 1 when dimensions differ.
    pub fn distance(&self, other: &Subspace) -> f64 {
        if self.dim() != other.dim() || self.ambient_dim() != other.ambient_dim() {
            return 1.0;
        }
        if self.dim() == 0 {
            return 0.0;
        }
        let d = self.projection() - other.projection();
        d.singular_values().max()
    }

    pub(crate) fn projection_distance_frobenius(&self, other: &Subspace) -> f64 {
        if self.dim() != other.dim() {
            return f64::INFINITY;
        }
        (self.projection() - other.projection()).norm()
    }

    /// Returns true when the stored vectors are orthonormal to within `tol`.
    pub fn is_orthonormal(&self, tol: f64) -> bool {
        let g = self.basis.transpose() * &self.basis;
        let d = self.dim();
        (0..d).all(|i| (0..d).all(|j| {
            let target = if i == j { 1.0 } else { 0.0 };
            (g[(i, j)] - target).abs() <= tol
        }))
    }
}

/// Linear map R^n -> R^m given by an m x n matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct LinearMap(DMatrix<f64>);

impl LinearMap {
    pub fn new(m: DMatrix<f64>) -> Self {
        LinearMap(m)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        if m == 0 {
            return Err(Error::DimensionMismatch("linear map needs at least one row".into()));
        }
        let n = rows[0].len();
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(Error::DimensionMismatch("ragged or empty rows".into()));
        }
        Ok(LinearMap(DMatrix::from_fn(m, n, |i, j| rows[i][j])))
    }

    pub fn identity(n: usize) -> Self {
        LinearMap(DMatrix::identity(n, n))
    }

    /// Projection onto the coordinates listed in `keep`.
    pub fn coordinate_projection(n: usize, keep: &[usize]) -> Self {
        let mut m = DMatrix::zeros(keep.len(), n);
        for (r, &i) in keep.iter().enumerate() {
            m[(r, i)] = 1.0;
        }
        LinearMap(m)
    }

    /// The map whose rows are an orthonormal basis of the complement of `kernel`.
    pub fn orthogonal_projection_with_kernel(kernel: &Subspace) -> Self {
        let c = kernel.complement();
        LinearMap(c.basis().transpose())
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.0 * x
    }

    pub fn operator_norm(&self) -> f64 {
        self.0.singular_values().max()
    }

    pub fn rank(&self, tol: f64) -> usize {
        let s = self.0.singular_values();
        let smax = s.max();
        if !(smax > f64::MIN_POSITIVE) {
            return 0;
        }
        s.iter().filter(|&&v| v > tol * smax).count()
    }

    pub fn is_surjective(&self, tol: f64) -> bool {
        self.rank(tol) == self.rows()
    }
}

impl TryFrom<Vec<Vec<f64>>> for LinearMap {
    type Error = Error;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        LinearMap::from_rows(&rows)
    }
}

impl From<LinearMap> for Vec<Vec<f64>> {
    fn from(m: LinearMap) -> Self {
        m.0.row_iter().map(|r| r.iter().copied().collect()).collect()
    }
}

fn from_columns(n: usize, cols: &[DVector<f64>]) -> DMatrix<f64> {
    if cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(cols)
    }
}

/// Orthonormal basis of the span of `vectors`, all of length `n`. Directions
/// whose singular value is below `tol` times the largest are discarded.
pub fn orthonormalize(n: usize, vectors: &[Vec<f64>], tol: f64) -> Result<Subspace> {
    if !(tol > 0.0) {
        return Err(Error::InvalidInput("tol must be positive".into()));
    }
    if let Some(v) = vectors.iter().find(|v| v.len() != n) {
        return Err(Error::DimensionMismatch(format!("vector of length {} in R^{}", v.len(), n)));
    }
    let m = DMatrix::from_fn(n, vectors.len(), |i, j| vectors[j][i]);
    Ok(Subspace::column_space(&m, tol))
}

pub fn kernel(l: &LinearMap, tol: f64) -> Subspace {
    let rowspace = Subspace::column_space(&l.matrix().transpose(), tol);
    rowspace.complement()
}

fn check_ambient(a: &Subspace, b: &Subspace) -> Result<()> {
    if a.ambient_dim() != b.ambient_dim() {
        return Err(Error::DimensionMismatch(format!(
            "subspaces of R^{} and R^{}",
            a.ambient_dim(),
            b.ambient_dim()
        )));
    }
    Ok(())
}

pub fn subspace_sum(a: &Subspace, b: &Subspace) -> Result<Subspace> {
    check_ambient(a, b)?;
    let n = a.ambient_dim();
    let mut cols: Vec<DVector<f64>> = a.basis.column_iter().map(|c| c.into_owned()).collect();
    cols.extend(b.basis.column_iter().map(|c| c.into_owned()));
    let tol = a.tol.max(b.tol);
    Ok(Subspace::column_space(&from_columns(n, &cols), tol))
}

pub fn subspace_intersect(a: &Subspace, b: &Subspace) -> Result<Subspace> {
    check_ambient(a, b)?;
    Ok(subspace_sum(&a.complement(), &b.complement())?.complement())
}

/// Volume of the parallelepiped spanned by all basis vectors together.
pub fn wedge_magnitude(subspaces: &[Subspace]) -> Result<f64> {
    if subspaces.is_empty() {
        return Ok(1.0);
    }
    let n = subspaces[0].ambient_dim();
    if let Some(s) = subspaces.iter().find(|s| s.ambient_dim() != n) {
        return Err(Error::DimensionMismatch(format!("R^{} among R^{}", s.ambient_dim(), n)));
    }
    let total: usize = subspaces.iter().map(|s| s.dim()).sum();
    if total > n {
        return Ok(0.0);
    }
    if total == 0 {
        return Ok(1.0);
    }
    let cols: Vec<DVector<f64>> =
        subspaces.iter().flat_map(|s| s.basis.column_iter().map(|c| c.into_owned())).collect();
    let m = DMatrix::from_columns(&cols);
    // product of singular values: the square root of the Gram determinant,
    // without squaring away half the precision near degeneracy
    let sv = m.singular_values();
    Ok(sv.iter().product::<f64>().min(1.0))
}

/// Rank of `l` restricted to `v`.
pub fn dim_image(l: &LinearMap, v: &Subspace, tol: f64) -> Result<usize> {
    if l.cols() != v.ambient_dim() {
        return Err(Error::DimensionMismatch(format!(
            "map on R^{} applied to subspace of R^{}",
            l.cols(),
            v.ambient_dim()
        )));
    }
    if v.dim() == 0 {
        return Ok(0);
    }
    let scale = l.operator_norm();
    if !(scale > f64::MIN_POSITIVE) {
        return Ok(0);
    }
    let lv = l.matrix() * v.basis();
    Ok(lv.singular_values().iter().filter(|&&s| s > tol * scale).count())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complement_of_line_in_plane() {
        let v = Subspace::span(2, &[vec![1.0, 1.0]]).unwrap();
        let c = v.complement();
        assert_eq!(c.dim(), 1);
        let w = c.basis().column(0);
        assert!((w[0] + w[1]).abs() < 1e-14);
    }

    #[test]
    fn zero_matrix_has_empty_column_space() {
        let s = Subspace::column_space(&DMatrix::zeros(3, 2), DEFAULT_TOL);
        assert_eq!(s.dim(), 0);
    }

    #[test]
    fn map_roundtrips_through_rows() {
        let m = LinearMap::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let rows: Vec<Vec<f64>> = m.clone().into();
        assert_eq!(LinearMap::try_from(rows).unwrap(), m);
    }
}
