//! Reference data used by tests, the CLI and the browser demo.

use nalgebra::DMatrix;

use crate::bl::BlDatum;
use crate::linalg::LinearMap;
use crate::manifold::{Ensemble, NestedFamily, Surface};
use crate::poly::{GraphParam, PolyMap};
use crate::Result;

/// Three coordinate-dropping projections of R^3 with p = 1/2.
pub fn loomis_whitney() -> BlDatum {
    let maps = vec![
        LinearMap::coordinate_projection(3, &[1, 2]),
        LinearMap::coordinate_projection(3, &[0, 2]),
        LinearMap::coordinate_projection(3, &[0, 1]),
    ];
    BlDatum::new(maps, vec![0.5; 3]).expect("valid datum")
}

/// Two copies of the projection of R^2 onto e_1 with p = 1/2.
pub fn duplicated_kernel() -> BlDatum {
    let p = LinearMap::coordinate_projection(2, &[0]);
    BlDatum::new(vec![p.clone(), p], vec![0.5, 0.5]).expect("valid datum")
}

pub fn identity_datum(n: usize) -> BlDatum {
    BlDatum::new(vec![LinearMap::identity(n)], vec![1.0]).expect("valid datum")
}

/// Radius of U_l in the catalog chains; shrinks so each link maps its
/// closed domain strictly inside the previous one.
pub fn chain_radius(l: usize) -> f64 {
    0.9f64.powi(l as i32)
}

/// Flat `Sigma_0(u) = (u, 0)` in R^{d0+1} with flat links of the given codimensions.
pub fn linear_chain(d0: usize, codims: &[usize]) -> NestedFamily {
    let sigma0 = Surface::graph(GraphParam::flat(d0, 1, 1.0));
    let mut d = d0;
    let mut chain = Vec::new();
    for (i, &m) in codims.iter().enumerate() {
        d -= m;
        chain.push(GraphParam::flat(d, m, chain_radius(i + 1)));
    }
    NestedFamily::new(sigma0, chain).expect("valid family")
}

/// `psi(u) = |u|^2 + 2 c.u`, so that `(u, psi(u))` shifted by `(c, |c|^2)`
/// is the paraboloid graph over `u + c`.
fn paraboloid_psi(d: usize, center: &[f64]) -> PolyMap {
    let mut terms: Vec<(usize, Vec<u32>, f64)> = Vec::new();
    for i in 0..d {
        let mut p = vec![0u32; d];
        p[i] = 2;
        terms.push((0, p, 1.0));
        if center[i] != 0.0 {
            let mut p = vec![0u32; d];
            p[i] = 1;
            terms.push((0, p, 2.0 * center[i]));
        }
    }
    let refs: Vec<(usize, &[u32], f64)> = terms.iter().map(|(c, p, v)| (*c, p.as_slice(), *v)).collect();
    PolyMap::from_terms(d, 1, &refs).expect("valid polynomial")
}

/// `u -> (u + c, |u + c|^2)` on the sup-ball of the given radius.
pub fn shifted_paraboloid(n: usize, center: &[f64], radius: f64) -> Surface {
    let d = n - 1;
    let graph = GraphParam::new(paraboloid_psi(d, center), radius).expect("positive radius");
    let mut base: Vec<f64> = center.to_vec();
    base.push(center.iter().map(|c| c * c).sum());
    Surface::with_frame(graph, base, DMatrix::identity(n, n)).expect("identity frame")
}

pub fn paraboloid(n: usize) -> Surface {
    shifted_paraboloid(n, &vec![0.0; n - 1], 1.0)
}

/// The paraboloid in R^n with `n - k` links `s -> (s, 0)`, ending at a
/// (k-1)-dimensional slice through the origin.
pub fn paraboloid_chain(n: usize, k: usize) -> NestedFamily {
    let mut chain = Vec::new();
    for l in 1..=(n - k) {
        chain.push(GraphParam::flat(n - 1 - l, 1, chain_radius(l)));
    }
    NestedFamily::new(paraboloid(n), chain).expect("valid family")
}

/// Paraboloid in R^3 with the curved link `s -> (s, kappa s^2)`.
pub fn curved_chain(kappa: f64) -> NestedFamily {
    let psi = PolyMap::from_terms(1, 1, &[(0, &[2], kappa)]).expect("valid polynomial");
    let link = GraphParam::new(psi, chain_radius(1)).expect("positive radius");
    NestedFamily::new(paraboloid(3), vec![link]).expect("valid family")
}

/// The k-linear paraboloid ensemble: patches centred at `points[j]` for
/// `j < k - 1` and the nested chain through the origin, all with q = 2/(k-1).
pub fn paraboloid_ensemble(n: usize, k: usize, points: &[Vec<f64>], patch_radius: f64) -> Result<Ensemble> {
    let mut families = Vec::new();
    for p in points.iter().take(k - 1) {
        families.push(NestedFamily::new(shifted_paraboloid(n, p, patch_radius), Vec::new())?);
    }
    families.push(paraboloid_chain(n, k));
    Ensemble::with_balanced_exponents(families)
}

/// Coordinate plane `{x_j = 0}` in R^3 parametrised by the remaining coordinates.
pub fn coordinate_plane(j: usize, radius: f64) -> Surface {
    let keep: Vec<usize> = (0..3).filter(|&i| i != j).collect();
    let mut frame = DMatrix::zeros(3, 3);
    frame[(keep[0], 0)] = 1.0;
    frame[(keep[1], 1)] = 1.0;
    frame[(j, 2)] = 1.0;
    Surface::with_frame(GraphParam::flat(2, 1, radius), vec![0.0; 3], frame).expect("permutation frame")
}
