use proptest::prelude::*;
use restrict_lab::catalog::*;
use restrict_lab::harness::fit_loglog;
use restrict_lab::kakeya::*;
use restrict_lab::linalg::LinearMap;
use restrict_lab::Error;

fn lw_families(lambda: f64, centre: [f64; 3]) -> Vec<SlabFamily> {
    loomis_whitney()
        .maps()
        .iter()
        .map(|m| {
            let v: Vec<f64> = m.apply(&nalgebra::DVector::from_column_slice(&centre)).iter().copied().collect();
            SlabFamily::single(Slab::new(m.clone(), v, lambda).unwrap())
        })
        .collect()
}

#[test]
fn indicator_examples() {
    let s = Slab::new(LinearMap::coordinate_projection(3, &[0, 1]), vec![1.0, -1.0], 0.5).unwrap();
    assert_eq!(slab_indicator(&s, &[1.0, -1.0, 100.0]), 1);
    assert_eq!(slab_indicator(&s, &[1.4, -0.6, 0.0]), 1);
    // open slab: the boundary is outside
    assert_eq!(slab_indicator(&s, &[1.5, -1.0, 0.0]), 0);
    assert_eq!(slab_indicator(&s, &[0.0, 0.0, 0.0]), 0);
    let tilted = Slab::new(LinearMap::from_rows(&[vec![1.0, 1.0]]).unwrap(), vec![0.0], 1.0).unwrap();
    assert_eq!(slab_indicator(&tilted, &[3.0, -3.0]), 1);
    assert_eq!(slab_indicator(&tilted, &[0.6, 0.6]), 0);
}

#[test]
fn slab_validation() {
    let p = LinearMap::coordinate_projection(3, &[0]);
    assert!(matches!(Slab::new(p.clone(), vec![0.0, 0.0], 1.0), Err(Error::DimensionMismatch(_))));
    assert!(Slab::new(p.clone(), vec![0.0], 0.0).is_err());
    let flat = LinearMap::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0]]).unwrap();
    assert!(matches!(Slab::new(flat, vec![0.0, 0.0], 1.0), Err(Error::NotSurjective { .. })));
    let a = Slab::new(p.clone(), vec![0.0], 1.0).unwrap();
    let b = Slab::new(p, vec![0.0], 2.0).unwrap();
    assert!(SlabFamily::new(vec![a.clone(), b], vec![1.0, 1.0]).is_err());
    assert!(SlabFamily::new(vec![a.clone()], vec![-1.0]).is_err());
    assert!(SlabFamily::new(vec![a], vec![1.0, 2.0]).is_err());
}

#[test]
fn zero_coefficients_give_zero() {
    let mut fams = lw_families(1.0, [0.0; 3]);
    fams[1].coefficients_mut()[0] = 0.0;
    let e = multilinear_slab_integral(&fams, &[0.5; 3], 4.0, &Sampler::Grid { points_per_axis: 16 }).unwrap();
    assert_eq!(e.value, 0.0);
}

#[test]
fn loomis_whitney_triple_is_a_cube() {
    for lambda in [0.5, 1.0] {
        let r = 2.0 * lambda;
        let fams = lw_families(lambda, [0.0; 3]);
        // slab faces on cell boundaries, so the midpoint rule is exact
        let g = multilinear_slab_integral(&fams, &[0.5; 3], r, &Sampler::Grid { points_per_axis: 16 }).unwrap();
        assert_eq!(g.value, (2.0 * lambda).powi(3));
        let mc = multilinear_slab_integral(&fams, &[0.5; 3], r, &Sampler::MonteCarlo { samples: 200_000, seed: 3 }).unwrap();
        let rel = (mc.value / (2.0 * lambda).powi(3) - 1.0).abs();
        assert!(rel < 1e-2 && rel <= 5.0 * mc.std_error / (2.0 * lambda).powi(3) + 1e-12, "{mc:?}");
    }
}

#[test]
fn single_slab_volume() {
    let (lambda, r) = (1.0, 4.0);
    let s = Slab::new(LinearMap::coordinate_projection(3, &[0, 1]), vec![0.0, 0.0], lambda).unwrap();
    let e = multilinear_slab_integral(&[SlabFamily::single(s)], &[1.0], r, &Sampler::Grid { points_per_axis: 32 }).unwrap();
    assert!((e.value - (2.0 * lambda).powi(2) * 2.0 * r).abs() < 1e-9);
}

#[test]
fn sampler_budgets() {
    let fams = lw_families(1.0, [0.0; 3]);
    assert!(matches!(
        multilinear_slab_integral(&fams, &[0.5; 3], 2.0, &Sampler::Grid { points_per_axis: 10_000 }),
        Err(Error::Budget(_))
    ));
    assert!(matches!(
        multilinear_slab_integral(&fams, &[0.5; 3], 2.0, &Sampler::MonteCarlo { samples: 0, seed: 1 }),
        Err(Error::Budget(_))
    ));
    assert!(multilinear_slab_integral(&fams, &[0.5; 2], 2.0, &Sampler::Grid { points_per_axis: 4 }).is_err());
    assert!(multilinear_slab_integral(&fams, &[0.5, 0.5, 1.5], 2.0, &Sampler::Grid { points_per_axis: 4 }).is_err());
}

fn sweep_opts(nu: f64, r_list: Vec<f64>) -> SweepOptions {
    SweepOptions {
        nu,
        r_list,
        lambda_list: vec![1.0],
        families_per_point: 2,
        slabs_per_family: 1,
        sampler_samples: 20_000,
        seed: 4,
    }
}

#[test]
fn sweep_rejects_wide_slabs_and_degenerate_data() {
    let mut o = sweep_opts(0.0, vec![4.0]);
    o.lambda_list = vec![4.0];
    assert!(matches!(kakeya_ratio_sweep(&loomis_whitney(), &o), Err(Error::Precondition(_))));
    assert!(matches!(kakeya_ratio_sweep(&duplicated_kernel(), &sweep_opts(0.0, vec![4.0])), Err(Error::Precondition(_))));
}

#[test]
fn unperturbed_loomis_whitney_sweep_is_flat_at_eight() {
    let rs = vec![4.0, 8.0, 16.0];
    let sw = kakeya_ratio_sweep(&loomis_whitney(), &sweep_opts(0.0, rs.clone())).unwrap();
    assert_eq!(sw.nu_realised, 0.0);
    for row in &sw.rows {
        assert!((row.ratio - 8.0).abs() < 0.1, "{row:?}");
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = sw.max_by_r().into_iter().unzip();
    assert_eq!(xs, rs);
    assert!(fit_loglog(&xs, &ys).unwrap().slope.abs() < 0.02);
}

#[test]
fn duplicated_kernel_control_grows_with_r() {
    // one strip per family through a common point: the ratio is 4R/lambda
    let sw = kakeya_ratio_sweep_unchecked(&duplicated_kernel(), &sweep_opts(0.0, vec![8.0, 16.0, 32.0])).unwrap();
    for row in &sw.rows {
        assert!((row.ratio / (4.0 * row.r) - 1.0).abs() < 1e-2, "{row:?}");
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = sw.max_by_r().into_iter().unzip();
    assert!(fit_loglog(&xs, &ys).unwrap().slope >= 0.8, "{ys:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn integral_is_monotone_in_coefficients(c in 0.1f64..2.0, extra in 0.0f64..2.0, shift in -0.5f64..0.5) {
        let p = LinearMap::coordinate_projection(2, &[0]);
        let q = LinearMap::coordinate_projection(2, &[1]);
        let a = Slab::new(p.clone(), vec![0.0], 0.5).unwrap();
        let b = Slab::new(p, vec![shift], 0.5).unwrap();
        let f2 = SlabFamily::single(Slab::new(q, vec![0.0], 0.5).unwrap());
        let g = Sampler::Grid { points_per_axis: 64 };
        let lo = multilinear_slab_integral(&[SlabFamily::new(vec![a.clone(), b.clone()], vec![c, 0.5]).unwrap(), f2.clone()], &[1.0, 1.0], 2.0, &g).unwrap();
        let hi = multilinear_slab_integral(&[SlabFamily::new(vec![a, b], vec![c + extra, 0.5]).unwrap(), f2], &[1.0, 1.0], 2.0, &g).unwrap();
        prop_assert!(hi.value >= lo.value - 1e-12);
    }

    #[test]
    fn grid_integral_scales_with_dilation(t in 0.5f64..3.0, lambda in 0.2f64..0.9) {
        let fams = lw_families(lambda, [0.1, -0.2, 0.05]);
        let g = Sampler::Grid { points_per_axis: 24 };
        let base = multilinear_slab_integral(&fams, &[0.5; 3], 1.0, &g).unwrap().value;
        let big: Vec<SlabFamily> = fams.iter().map(|f| f.dilate(t)).collect();
        let scaled = multilinear_slab_integral(&big, &[0.5; 3], t, &g).unwrap().value;
        prop_assert!((scaled - t.powi(3) * base).abs() <= 1e-9 * scaled.abs().max(1.0));
    }
}
