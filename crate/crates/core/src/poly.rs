//! Polynomial maps `psi: R^d -> R^m` without constant term, and the graph
//! parametrisations `u -> (u, psi(u))` built from them.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Monomial {
    pub powers: Vec<u32>,
    pub coeff: f64,
}

impl Monomial {
    fn eval(&self, u: &[f64]) -> f64 {
        let mut v = self.coeff;
        for (x, &p) in u.iter().zip(&self.powers) {
            if p > 0 {
                v *= x.powi(p as i32);
            }
        }
        v
    }

    fn partial(&self, u: &[f64], axis: usize) -> f64 {
        let p = self.powers[axis];
        if p == 0 {
            return 0.0;
        }
        let mut v = self.coeff * p as f64;
        for (i, (x, &q)) in u.iter().zip(&self.powers).enumerate() {
            let e = if i == axis { q - 1 } else { q };
            if e > 0 {
                v *= x.powi(e as i32);
            }
        }
        v
    }
}

/// Component polynomials keyed in JSON by comma-separated exponent strings,
/// e.g. `{"2,0": 1.0, "0,2": 1.0}` for `u1^2 + u2^2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPoly", into = "RawPoly")]
pub struct PolyMap {
    in_dim: usize,
    components: Vec<Vec<Monomial>>,
}

#[derive(Serialize, Deserialize)]
struct RawPoly {
    in_dim: usize,
    components: Vec<BTreeMap<String, f64>>,
}

impl TryFrom<RawPoly> for PolyMap {
    type Error = Error;
    fn try_from(r: RawPoly) -> Result<Self> {
        let mut comps = Vec::with_capacity(r.components.len());
        for (c, map) in r.components.iter().enumerate() {
            let mut monos = Vec::new();
            for (key, &coeff) in map {
                let powers = parse_key(key, r.in_dim)
                    .map_err(|e| Error::Config(format!("component {c}, monomial \"{key}\": {e}")))?;
                monos.push(Monomial { powers, coeff });
            }
            comps.push(monos);
        }
        PolyMap::new(r.in_dim, comps)
    }
}

impl From<PolyMap> for RawPoly {
    fn from(p: PolyMap) -> Self {
        let components = p
            .components
            .iter()
            .map(|monos| {
                let mut m = BTreeMap::new();
                for mono in monos {
                    let key = mono.powers.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(",");
                    *m.entry(key).or_insert(0.0) += mono.coeff;
                }
                m
            })
            .collect();
        RawPoly { in_dim: p.in_dim, components }
    }
}

fn parse_key(key: &str, d: usize) -> std::result::Result<Vec<u32>, String> {
    let powers: Vec<u32> = key
        .split(',')
        .map(|t| t.trim().parse::<u32>().map_err(|e| e.to_string()))
        .collect::<std::result::Result<_, _>>()?;
    if powers.len() != d {
        return Err(format!("expected {d} exponents, found {}", powers.len()));
    }
    Ok(powers)
}

impl PolyMap {
    pub fn new(in_dim: usize, components: Vec<Vec<Monomial>>) -> Result<Self> {
        for (c, monos) in components.iter().enumerate() {
            for m in monos {
                if m.powers.len() != in_dim {
                    return Err(Error::DimensionMismatch(format!(
                        "component {c} has a monomial in {} variables, expected {in_dim}",
                        m.powers.len()
                    )));
                }
                if m.powers.iter().all(|&p| p == 0) && m.coeff != 0.0 {
                    return Err(Error::InvalidInput(format!("component {c} has a nonzero constant term")));
                }
                if !m.coeff.is_finite() {
                    return Err(Error::InvalidInput(format!("component {c} has a non-finite coefficient")));
                }
            }
        }
        Ok(PolyMap { in_dim, components })
    }

    pub fn zero(in_dim: usize, out_dim: usize) -> Self {
        PolyMap { in_dim, components: vec![Vec::new(); out_dim] }
    }

    /// Builds a map from `(component, powers, coeff)` triples.
    pub fn from_terms(in_dim: usize, out_dim: usize, terms: &[(usize, &[u32], f64)]) -> Result<Self> {
        let mut comps = vec![Vec::new(); out_dim];
        for &(c, powers, coeff) in terms {
            if c >= out_dim {
                return Err(Error::DimensionMismatch(format!("component {c} of {out_dim}")));
            }
            comps[c].push(Monomial { powers: powers.to_vec(), coeff });
        }
        PolyMap::new(in_dim, comps)
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[Vec<Monomial>] {
        &self.components
    }

    pub fn is_linear(&self) -> bool {
        self.components.iter().flatten().all(|m| m.powers.iter().sum::<u32>() <= 1)
    }

    pub fn eval(&self, u: &[f64]) -> Vec<f64> {
        self.components.iter().map(|ms| ms.iter().map(|m| m.eval(u)).sum()).collect()
    }

    /// `out_dim x in_dim` Jacobian.
    pub fn jacobian(&self, u: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.out_dim(), self.in_dim, |c, a| {
            self.components[c].iter().map(|m| m.partial(u, a)).sum()
        })
    }
}

/// The graph map `u -> (u, psi(u))` on the open sup-norm ball of radius
/// `domain_radius`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphParam {
    pub psi: PolyMap,
    pub domain_radius: f64,
}

impl GraphParam {
    pub fn new(psi: PolyMap, domain_radius: f64) -> Result<Self> {
        if !(domain_radius > 0.0 && domain_radius.is_finite()) {
            return Err(Error::InvalidInput(format!("domain radius {domain_radius}")));
        }
        Ok(GraphParam { psi, domain_radius })
    }

    pub fn flat(in_dim: usize, codim: usize, domain_radius: f64) -> Self {
        GraphParam { psi: PolyMap::zero(in_dim, codim), domain_radius }
    }

    pub fn in_dim(&self) -> usize {
        self.psi.in_dim()
    }

    pub fn codim(&self) -> usize {
        self.psi.out_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.in_dim() + self.codim()
    }

    pub fn in_domain(&self, u: &[f64]) -> bool {
        u.iter().all(|x| x.abs() < self.domain_radius)
    }

    pub fn eval(&self, u: &[f64]) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.out_dim());
        out.extend_from_slice(u);
        out.extend(self.psi.eval(u));
        DVector::from_vec(out)
    }

    /// `(d + m) x d` Jacobian `[I; D psi]`.
    pub fn jacobian(&self, u: &[f64]) -> DMatrix<f64> {
        let d = self.in_dim();
        let dpsi = self.psi.jacobian(u);
        DMatrix::from_fn(self.out_dim(), d, |i, j| {
            if i < d {
                if i == j { 1.0 } else { 0.0 }
            } else {
                dpsi[(i - d, j)]
            }
        })
    }
}
