use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use restrict_lab::catalog::*;
use restrict_lab::extension::*;
use restrict_lab::manifold::Surface;
use restrict_lab::poly::GraphParam;
use restrict_lab::quad::QuadratureSpec;
use restrict_lab::Error;

fn smooth_density(seed: u64) -> WindowedDensity {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    WindowedDensity {
        window: Window::Bump { center: vec![0.05, -0.1], half_widths: vec![0.5, 0.4] },
        poly: Some(TrigPolynomial::random(2, 2, 4, std::f64::consts::TAU, &mut rng)),
    }
}

fn bump_1d(t: f64) -> f64 {
    if t.abs() >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - t * t)).exp()
    }
}

/// Composite Simpson rule for `int_a^b e^{i xi u} g(u) du`.
fn simpson(a: f64, b: f64, xi: f64, g: impl Fn(f64) -> f64) -> Complex64 {
    let n = 20_000;
    let h = (b - a) / n as f64;
    let mut acc = Complex64::new(0.0, 0.0);
    for i in 0..=n {
        let u = a + i as f64 * h;
        let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += Complex64::from_polar(w * g(u), xi * u);
    }
    acc * (h / 3.0)
}

#[test]
fn zero_frequency_gives_the_integral() {
    let f = smooth_density(1);
    let amp = Amplitude::bump(vec![0.0, 0.0], 0.8);
    let s = paraboloid(3);
    let quad = QuadratureSpec::gauss(48);
    let at0 = extend(&s, &amp, &f, &[0.0; 3], &quad).unwrap().value;
    // the same integral on an unrelated surface, since x = 0 kills the phase
    let flat = Surface::graph(GraphParam::flat(2, 1, 1.0));
    let direct = extend(&flat, &amp, &f, &[0.0; 3], &quad).unwrap().value;
    assert!((at0 - direct).norm() < 1e-14);
    let ev = ExtensionEvaluator::new(&s, &amp, &f, &quad).unwrap();
    assert!(ev.l1() >= at0.norm());
}

#[test]
fn zero_density_gives_zero() {
    let f = FnDensity::new(2, None, |_: &[f64]| Complex64::new(0.0, 0.0));
    let amp = Amplitude::bump(vec![0.0, 0.0], 0.8);
    let v = extend(&paraboloid(3), &amp, &f, &[3.0, -1.0, 2.0], &QuadratureSpec::gauss(32)).unwrap();
    assert_eq!(v.value, Complex64::new(0.0, 0.0));
}

#[test]
fn flat_surface_factorises_into_one_dimensional_integrals() {
    let (c, sg, cut) = ([0.1, -0.2], [0.15, 0.1], 6.0);
    let f = WindowedDensity { window: Window::Gaussian { center: c.to_vec(), sigmas: sg.to_vec(), cutoff: cut }, poly: None };
    let r = 0.9;
    let amp = Amplitude::bump(vec![0.0, 0.0], r);
    let flat = Surface::graph(GraphParam::flat(2, 1, 1.0));
    let ev = ExtensionEvaluator::new(&flat, &amp, &f, &QuadratureSpec::gauss(96)).unwrap();
    for x in [[0.0, 0.0, 0.0], [6.0, -4.0, 3.0], [-12.5, 9.0, 40.0], [20.0, 1.0, 0.0]] {
        let mut oracle = Complex64::new(1.0, 0.0);
        for i in 0..2 {
            let (lo, hi) = ((c[i] - cut * sg[i]).max(-r), (c[i] + cut * sg[i]).min(r));
            oracle *= simpson(lo, hi, x[i], |u| {
                let t = (u - c[i]) / sg[i];
                (-0.5 * t * t).exp() * bump_1d(u / r)
            });
        }
        let v = ev.value(&x).unwrap();
        assert!((v - oracle).norm() <= 1e-8 * oracle.norm().max(1e-3), "x = {x:?}: {v} vs {oracle}");
    }
}

#[test]
fn doubling_the_grid_stays_within_the_error_estimate() {
    let s = paraboloid(3);
    let amp = Amplitude::bump(vec![0.0, 0.0], 0.8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for seed in 0..4 {
        let f = smooth_density(seed);
        let coarse = ExtensionEvaluator::new(&s, &amp, &f, &QuadratureSpec::gauss(40)).unwrap();
        let fine = ExtensionEvaluator::new(&s, &amp, &f, &QuadratureSpec::gauss(80)).unwrap();
        for _ in 0..10 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-12.0..12.0)).collect();
            let a = coarse.eval(&x).unwrap();
            let b = fine.eval(&x).unwrap();
            assert!((a.value - b.value).norm() < 2.0 * a.error, "{x:?}: {} vs {}", (a.value - b.value).norm(), a.error);
        }
    }
}

#[test]
fn unresolved_frequencies_are_refused() {
    let amp = Amplitude::bump(vec![0.0, 0.0], 0.8);
    let ev = ExtensionEvaluator::new(&paraboloid(3), &amp, &smooth_density(2), &QuadratureSpec::gauss(16)).unwrap();
    let big = ev.max_resolved_norm() * 1.5;
    assert!(matches!(ev.eval(&[big, 0.0, 0.0]), Err(Error::UnresolvedOscillation(_))));
    assert!(matches!(ev.eval(&[1.0, 0.0]), Err(Error::DimensionMismatch(_))));
}

#[test]
fn amplitude_must_fit_in_the_domain() {
    let amp = Amplitude::bump(vec![0.5, 0.0], 0.8);
    let r = extend(&paraboloid(3), &amp, &smooth_density(3), &[0.0; 3], &QuadratureSpec::gauss(16));
    assert!(matches!(r, Err(Error::SupportViolation(_))));
}

fn slice_setup() -> (restrict_lab::manifold::NestedFamily, Amplitude, WindowedDensity, f64) {
    let fam = paraboloid_chain(3, 2);
    let mu = 1.0 / 16.0;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f = WindowedDensity {
        window: Window::Gaussian { center: vec![0.05, 0.0], sigmas: vec![0.05, mu / 9.0], cutoff: 8.0 },
        poly: Some(TrigPolynomial::random(2, 2, 5, std::f64::consts::TAU, &mut rng)),
    };
    (fam, Amplitude::plateau(vec![0.0, 0.0], 0.7, 0.3), f, mu)
}

#[test]
fn slice_formula_reproduces_the_direct_extension() {
    let (fam, amp, f, mu) = slice_setup();
    let direct = ExtensionEvaluator::new(fam.surface(), &amp, &f, &QuadratureSpec::gauss(96)).unwrap();
    let quad = SliceQuadrature { s: QuadratureSpec::gauss(96), eta: QuadratureSpec::gauss(256), support_check: 17 };
    let dec = slice_decompose(&fam, 1, &amp, &f, &[mu], &quad).unwrap();
    assert_eq!(dec.level, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-8.0..8.0)).collect();
        let a = direct.value(&x).unwrap();
        let b = dec.eval(&x);
        assert!((a - b).norm() <= 1e-6 * a.norm(), "{x:?}: {a} vs {b}");
    }
}

#[test]
fn slice_formula_refuses_densities_off_the_neighbourhood() {
    let (fam, amp, _, mu) = slice_setup();
    let off = WindowedDensity { window: Window::Bump { center: vec![0.0, 0.3], half_widths: vec![0.1, 0.05] }, poly: None };
    let r = slice_decompose(&fam, 1, &amp, &off, &[mu], &SliceQuadrature::default());
    assert!(matches!(r, Err(Error::SupportViolation(_))));
    let cap = fam.c_cover * fam.mu_threshold;
    let r = slice_decompose(&fam, 1, &amp, &off, &[2.0 * cap], &SliceQuadrature::default());
    assert!(matches!(r, Err(Error::Precondition(_))));
}

fn lc_density(seed: u64) -> WindowedDensity {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    WindowedDensity {
        window: Window::Bump { center: vec![0.0], half_widths: vec![0.3] },
        poly: Some(TrigPolynomial::random(1, 2, 4, std::f64::consts::TAU, &mut rng)),
    }
}

#[test]
fn vanishing_offsets_give_no_truncation_error() {
    let fam = curved_chain(0.5);
    let amp = Amplitude::bump(vec![0.0, 0.0], 0.4);
    let p = local_constancy_profile(&fam, 1, &amp, &lc_density(2), 8.0, &[1e-12], 3, &LocalConstancyOptions::default()).unwrap();
    assert!(p.iter().all(|e| *e < 1e-10), "{p:?}");
}

#[test]
fn flat_chain_has_exact_first_order_expansion() {
    let fam = linear_chain(2, &[1]);
    let amp = Amplitude::bump(vec![0.0, 0.0], 0.4);
    let p = local_constancy_profile(&fam, 1, &amp, &lc_density(3), 8.0, &[1.0 / 16.0], 2, &LocalConstancyOptions::default()).unwrap();
    assert!(p[1] < 1e-12 && p[2] < 1e-12, "{p:?}");
}

#[test]
fn truncation_errors_decay_with_order() {
    let fam = curved_chain(0.5);
    let amp = Amplitude::bump(vec![0.0, 0.0], 0.4);
    for seed in [2, 7] {
        let p = local_constancy_profile(&fam, 1, &amp, &lc_density(seed), 8.0, &[1.0 / 16.0], 3, &LocalConstancyOptions::default())
            .unwrap();
        for w in p.windows(2) {
            assert!(w[1] <= 0.5 * w[0], "{p:?}");
        }
    }
}

#[test]
fn truncation_needs_scales_below_inverse_radius() {
    let fam = curved_chain(0.5);
    let amp = Amplitude::bump(vec![0.0, 0.0], 0.4);
    let r = local_constancy_error(&fam, 1, &amp, &lc_density(2), 8.0, &[0.2], 1, &LocalConstancyOptions::default());
    assert!(matches!(r, Err(Error::Precondition(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn modulus_is_bounded_by_the_l1_norm(seed in 0u64..1000, x0 in -15.0f64..15.0, x1 in -15.0f64..15.0, x2 in -15.0f64..15.0) {
        let amp = Amplitude::bump(vec![0.0, 0.0], 0.8);
        let ev = ExtensionEvaluator::new_single(&paraboloid(3), &amp, &smooth_density(seed), &QuadratureSpec::gauss(48)).unwrap();
        let v = ev.value(&[x0, x1, x2]).unwrap();
        prop_assert!(v.norm() <= ev.l1() * (1.0 + 1e-12));
    }
}
