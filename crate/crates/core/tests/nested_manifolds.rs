use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use restrict_lab::bl::is_finite_blreg;
use restrict_lab::catalog::*;
use restrict_lab::linalg::{kernel, Subspace};
use restrict_lab::manifold::*;
use restrict_lab::poly::{GraphParam, PolyMap};
use restrict_lab::Error;

/// Flat plane in R^3 with the single curved link `s -> (s, s^2)`.
fn parabola_link() -> NestedFamily {
    let sigma0 = Surface::graph(GraphParam::flat(2, 1, 1.0));
    let psi = PolyMap::from_terms(1, 1, &[(0, &[2], 1.0)]).unwrap();
    NestedFamily::new(sigma0, vec![GraphParam::new(psi, 0.9).unwrap()]).unwrap()
}

/// Paraboloid in R^4 with two curved links, dimensions 3 > 2 > 1.
fn two_link_family() -> NestedFamily {
    let l1 = PolyMap::from_terms(2, 1, &[(0, &[2, 0], 0.3), (0, &[1, 1], 0.2)]).unwrap();
    let l2 = PolyMap::from_terms(1, 1, &[(0, &[2], 0.4), (0, &[1], 0.1)]).unwrap();
    NestedFamily::new(
        paraboloid(4),
        vec![GraphParam::new(l1, 0.9).unwrap(), GraphParam::new(l2, 0.81).unwrap()],
    )
    .unwrap()
}

fn close(a: &DVector<f64>, b: &DVector<f64>, tol: f64) -> bool {
    (a - b).amax() <= tol
}

#[test]
fn normal_frames() {
    let lin = linear_chain(3, &[1, 1]);
    let g = lin.normal_frame(1, &[0.2, -0.3]).unwrap();
    assert_eq!(g, DMatrix::from_column_slice(3, 1, &[0.0, 0.0, 1.0]));
    let fam = parabola_link();
    let g0 = fam.normal_frame(1, &[0.0]).unwrap();
    assert!((g0[(0, 0)]).abs() < 1e-15 && (g0[(1, 0)] - 1.0).abs() < 1e-15);
    let g = fam.normal_frame(1, &[0.5]).unwrap();
    let h = 0.5f64.sqrt();
    assert!((g[(0, 0)] + h).abs() < 1e-14 && (g[(1, 0)] - h).abs() < 1e-14);
    assert!(matches!(fam.normal_frame(1, &[0.95]), Err(Error::OutsideDomain(_))));
}

#[test]
fn phi_reduces_to_the_chain_without_offsets() {
    let fam = two_link_family();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let s = [rng.gen_range(-0.7..0.7)];
        for k in 0..=2 {
            let eta = vec![0.0; fam.offset_dim(k, 2)];
            let x = fam.phi(k, 2, &s, &eta).unwrap();
            assert!(close(&x, &fam.gamma_between(k, 2, &s), 1e-15));
        }
        assert_eq!(fam.phi(2, 2, &s, &[]).unwrap().as_slice(), &s);
    }
}

#[test]
fn phi_split_law() {
    let fam = two_link_family();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let s = [rng.gen_range(-0.6..0.6)];
        let eta: Vec<f64> = (0..2).map(|_| rng.gen_range(-0.05..0.05)).collect();
        let whole = fam.phi(0, 2, &s, &eta).unwrap();
        let mid = fam.phi(1, 2, &s, &eta[1..]).unwrap();
        let split = fam.phi(0, 1, mid.as_slice(), &eta[..1]).unwrap();
        assert!(close(&whole, &split, 1e-12));
    }
}

#[test]
fn phi_rejects_bad_offsets() {
    let fam = two_link_family();
    assert!(matches!(fam.phi(0, 2, &[0.1], &[0.0]), Err(Error::DimensionMismatch(_))));
    assert!(fam.phi(0, 2, &[0.1], &[0.0, 10.0]).is_err());
    assert!(fam.phi(2, 1, &[0.1, 0.0], &[]).is_err());
}

#[test]
fn phi_inverse_round_trips() {
    let fam = two_link_family();
    let (s, eta) = fam.phi_inverse(0, 2, fam.gamma_between(0, 2, &[0.3]).as_slice()).unwrap();
    assert!((s[0] - 0.3).abs() < 1e-10 && eta.iter().all(|e| e.abs() < 1e-10));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let s = [rng.gen_range(-0.6..0.6)];
        let eta: Vec<f64> = (0..2).map(|_| rng.gen_range(-0.05..0.05)).collect();
        let x = fam.phi(0, 2, &s, &eta).unwrap();
        let (s2, eta2) = fam.phi_inverse(0, 2, x.as_slice()).unwrap();
        assert!((s2[0] - s[0]).abs() < 1e-10);
        assert!(eta.iter().zip(&eta2).all(|(a, b)| (a - b).abs() < 1e-10));
        assert!(close(&fam.phi(0, 2, &s2, &eta2).unwrap(), &x, 1e-10));
    }
    assert!(fam.phi_inverse(0, 2, &[50.0, -40.0, 30.0]).is_err());
}

#[test]
fn derivative_matrices_match_finite_differences() {
    let fam = two_link_family();
    let h = 1e-5;
    for s0 in [-0.4, 0.0, 0.25] {
        let d = fam.derivative_matrices(2, &[s0]).unwrap();
        let full = |z: &[f64]| fam.phi(0, 2, &z[..1], &z[1..]).unwrap();
        let z0 = [s0, 0.0, 0.0];
        // columns ordered (s, eta_1, eta_2); compare with [dsigma | B]
        for c in 0..3 {
            let mut zp = z0;
            let mut zm = z0;
            zp[c] += h;
            zm[c] -= h;
            let fd = (full(&zp) - full(&zm)) / (2.0 * h);
            let exact: DVector<f64> = if c == 0 { d.dsigma.column(0).into() } else { d.b.column(c - 1).into() };
            assert!((&fd - &exact).norm() <= 1e-6 * exact.norm().max(1.0), "column {c} at {s0}");
        }
        assert_eq!(d.lambda.ncols(), 3);
    }
}

#[test]
fn derivative_matrices_of_linear_chain_are_constant() {
    let fam = linear_chain(3, &[1, 1]);
    let a = fam.derivative_matrices(2, &[0.0]).unwrap();
    let b = fam.derivative_matrices(2, &[0.5]).unwrap();
    assert_eq!(a.b, b.b);
    assert_eq!(a.b, DMatrix::from_column_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, 1.0, 0.0]));
    let flat = NestedFamily::new(paraboloid(3), vec![]).unwrap();
    let d = flat.derivative_matrices(0, &[0.1, 0.2]).unwrap();
    assert_eq!(d.lambda, DMatrix::identity(2, 2));
}

#[test]
fn neighbourhood_examples() {
    let fam = linear_chain(2, &[1]);
    let mu = [0.01];
    assert!(fam.neighbourhood_membership(&[0.0, 0.0], &mu, 1.0));
    assert!(fam.neighbourhood_membership(&[0.4, 0.0], &mu, 1.0));
    assert!(!fam.neighbourhood_membership(&[0.0, 2.0 * mu[0]], &mu, 1.0));
    assert!(fam.neighbourhood_membership(&[0.0, 0.5 * mu[0]], &mu, 1.0));
    let curved = two_link_family();
    let on = curved.gamma_between(0, 2, &[0.3]);
    assert!(curved.neighbourhood_membership(on.as_slice(), &[1e-6, 1e-6], 1.0));
}

#[test]
fn omega_inclusions_hold() {
    let lin = linear_chain(3, &[1, 1]);
    let rep = lin.verify_omega_inclusions(&[0.01, 0.02], 200, 1).unwrap();
    assert_eq!(rep.violations, 0);
    assert!(rep.lower_checked > 0 && rep.upper_checked > 0);
    let par = paraboloid_chain(4, 2);
    for mu in [[1.0 / 64.0, 1.0 / 32.0], [1.0 / 16.0, 1.0 / 8.0]] {
        let rep = par.verify_omega_inclusions(&mu, 200, 2).unwrap();
        assert_eq!(rep.violations, 0, "{mu:?}: {rep:?}");
    }
    let cap = par.c_cover * par.mu_threshold;
    assert!(matches!(par.verify_omega_inclusions(&[1.0, 2.0 * cap], 10, 1), Err(Error::Precondition(_))));
    assert!(par.verify_omega_inclusions(&[0.1, 0.05], 10, 1).is_err());
}

#[test]
fn ensemble_maps_are_transposed_jacobians() {
    let flat = NestedFamily::new(paraboloid(3), vec![]).unwrap();
    let ens = Ensemble::new(vec![flat.clone(), flat], vec![1.0, 1.0]).unwrap();
    let d = ensemble_datum(&ens).unwrap();
    let expect = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    assert_eq!(d.maps()[0].matrix(), &expect);
    assert_eq!(d.exponents(), &[0.5, 0.5]);

    let c = [0.5, -0.25];
    let patch = NestedFamily::new(shifted_paraboloid(3, &c, 0.3), vec![]).unwrap();
    let ens = Ensemble::new(vec![patch, paraboloid_chain(3, 2)], vec![2.0, 2.0]).unwrap();
    let d = ensemble_datum(&ens).unwrap();
    let expect = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 2.0 * c[0], 0.0, 1.0, 2.0 * c[1]]);
    assert!((d.maps()[0].matrix() - expect).amax() < 1e-15);
}

#[test]
fn deepest_chain_kernel_is_a_coordinate_subspace() {
    for (n, k) in [(3, 2), (4, 2), (4, 3), (5, 3)] {
        let fam = paraboloid_chain(n, k);
        let ens = Ensemble::new(vec![fam.clone(), fam], vec![1.0, 1.0]).unwrap();
        let d = ensemble_datum(&ens).unwrap();
        let ker = kernel(&d.maps()[1], 1e-10);
        let axes: Vec<usize> = (k - 1..n).collect();
        assert!(ker.distance(&Subspace::coordinate(n, &axes)) < 1e-12, "n = {n}, k = {k}");
    }
}

#[test]
fn transverse_paraboloid_ensemble_is_finite() {
    for (n, k, pts) in [
        (3, 2, vec![vec![0.5, 0.0]]),
        (4, 3, vec![vec![0.5, 0.0, 0.0], vec![0.0, 0.5, 0.0]]),
    ] {
        let ens = paraboloid_ensemble(n, k, &pts, 0.3).unwrap();
        let d = ensemble_datum(&ens).unwrap();
        assert!(d.exponents().iter().all(|p| (p - 1.0 / (k as f64 - 1.0)).abs() < 1e-15));
        let wedge = restrict_lab::linalg::wedge_magnitude(&d.kernels()).unwrap();
        assert!(wedge >= 0.1, "wedge {wedge}");
        assert!(is_finite_blreg(&d, 1e-9).unwrap().finite);
    }
}

#[test]
fn ensembles_are_validated() {
    let fam = paraboloid_chain(3, 2);
    assert!(Ensemble::new(vec![fam.clone()], vec![1.0]).is_err());
    assert!(matches!(Ensemble::new(vec![fam.clone(), fam.clone()], vec![1.0, 2.5]), Err(Error::InvalidExponent(_))));
    assert!(Ensemble::new(vec![fam.clone(), paraboloid_chain(4, 2)], vec![1.0, 1.0]).is_err());
}

#[test]
fn family_json_uses_monomial_keys() {
    let json = r#"{
        "sigma0": {"psi": {"in_dim": 2, "components": [{"2,0": 1.0, "0,2": 1.0}]}, "domain_radius": 1.0},
        "chain": [{"psi": {"in_dim": 1, "components": [{"2": 0.5}]}, "domain_radius": 0.9}]
    }"#;
    let fam: NestedFamily = serde_json::from_str(json).unwrap();
    let reference = curved_chain(0.5);
    for s in [-0.5, 0.0, 0.7] {
        assert!(close(&fam.big_sigma(1, &[s]), &reference.big_sigma(1, &[s]), 1e-15));
    }
    let back: NestedFamily = serde_json::from_str(&serde_json::to_string(&fam).unwrap()).unwrap();
    assert!(close(&back.big_sigma(1, &[0.3]), &fam.big_sigma(1, &[0.3]), 0.0));
    let escaping = json.replace("0.9}", "2.0}");
    assert!(serde_json::from_str::<NestedFamily>(&escaping).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn split_and_round_trip_on_random_inputs(s in -0.6f64..0.6, e1 in -0.05f64..0.05, e2 in -0.05f64..0.05) {
        let fam = two_link_family();
        let whole = fam.phi(0, 2, &[s], &[e1, e2]).unwrap();
        let mid = fam.phi(1, 2, &[s], &[e2]).unwrap();
        prop_assert!(close(&whole, &fam.phi(0, 1, mid.as_slice(), &[e1]).unwrap(), 1e-12));
        let (s2, eta2) = fam.phi_inverse(0, 2, whole.as_slice()).unwrap();
        prop_assert!(close(&fam.phi(0, 2, &s2, &eta2).unwrap(), &whole, 1e-10));
    }
}
