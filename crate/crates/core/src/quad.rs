//! One-dimensional quadrature rules and tensor grids over boxes.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    Midpoint,
    GaussLegendre,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    pub points_per_axis: usize,
    pub rule: Rule,
}

impl QuadratureSpec {
    pub fn gauss(points_per_axis: usize) -> Self {
        QuadratureSpec { points_per_axis, rule: Rule::GaussLegendre }
    }

    pub fn midpoint(points_per_axis: usize) -> Self {
        QuadratureSpec { points_per_axis, rule: Rule::Midpoint }
    }

    pub fn validate(&self) -> Result<()> {
        if self.points_per_axis < 8 {
            return Err(Error::InvalidInput(format!(
                "quadrature needs at least 8 points per axis, got {}",
                self.points_per_axis
            )));
        }
        Ok(())
    }

    pub fn with_points(&self, m: usize) -> Self {
        QuadratureSpec { points_per_axis: m, rule: self.rule }
    }

    /// Nodes and weights on `[a, b]`.
    pub fn nodes(&self, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
        rule_nodes(self.rule, self.points_per_axis, a, b)
    }
}

pub fn rule_nodes(rule: Rule, m: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    match rule {
        Rule::Midpoint => {
            let h = (b - a) / m as f64;
            ((0..m).map(|i| a + (i as f64 + 0.5) * h).collect(), vec![h; m])
        }
        Rule::GaussLegendre => {
            let (x, w) = gauss_legendre(m);
            let c = 0.5 * (a + b);
            let r = 0.5 * (b - a);
            (x.iter().map(|t| c + r * t).collect(), w.iter().map(|v| v * r).collect())
        }
    }
}

/// Gauss-Legendre nodes and weights on [-1, 1] by Newton iteration on the
/// three-term recurrence.
pub fn gauss_legendre(m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; m];
    let mut w = vec![0.0; m];
    let nf = m as f64;
    for i in 0..m.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(m, z);
            dp = d;
            let dz = p / d;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(m, z);
        dp = if d != 0.0 { d } else { dp };
        x[i] = -z;
        x[m - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[m - 1 - i] = wi;
    }
    (x, w)
}

fn legendre(m: usize, z: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = z;
    if m == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=m {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = m as f64 * (z * p1 - p0) / (z * z - 1.0);
    (p1, d)
}

/// Axis-aligned box `[lo_i, hi_i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxRegion {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxRegion {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        BoxRegion { lo, hi }
    }

    pub fn cube(center: &[f64], half: f64) -> Self {
        BoxRegion {
            lo: center.iter().map(|c| c - half).collect(),
            hi: center.iter().map(|c| c + half).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn intersect(&self, other: &BoxRegion) -> BoxRegion {
        BoxRegion {
            lo: self.lo.iter().zip(&other.lo).map(|(a, b)| a.max(*b)).collect(),
            hi: self.hi.iter().zip(&other.hi).map(|(a, b)| a.min(*b)).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.lo.iter().zip(&self.hi).any(|(a, b)| a >= b)
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        u.iter().zip(self.lo.iter().zip(&self.hi)).all(|(x, (a, b))| *x >= *a && *x <= *b)
    }

    pub fn half_widths(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(a, b)| 0.5 * (b - a)).collect()
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| (b - a).max(0.0)).product()
    }
}

/// Tensor-product nodes and weights, with the last axis varying fastest.
pub fn tensor_grid(region: &BoxRegion, counts: &[usize], rule: Rule) -> (Vec<Vec<f64>>, Vec<f64>) {
    let d = region.dim();
    let axes: Vec<(Vec<f64>, Vec<f64>)> =
        (0..d).map(|i| rule_nodes(rule, counts[i], region.lo[i], region.hi[i])).collect();
    let total: usize = counts.iter().product();
    let mut nodes = Vec::with_capacity(total);
    let mut weights = Vec::with_capacity(total);
    let mut idx = vec![0usize; d];
    for _ in 0..total {
        nodes.push((0..d).map(|i| axes[i].0[idx[i]]).collect());
        weights.push((0..d).map(|i| axes[i].1[idx[i]]).product());
        for i in (0..d).rev() {
            idx[i] += 1;
            if idx[i] < counts[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    (nodes, weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_integrates_polynomials_exactly() {
        let (x, w) = gauss_legendre(10);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(18)).sum();
        assert!((s - 2.0 / 19.0).abs() < 1e-14);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn large_rule_is_stable() {
        let (x, w) = gauss_legendre(257);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.cos()).sum();
        assert!((s - 2.0 * 1f64.sin()).abs() < 1e-13);
    }
}
