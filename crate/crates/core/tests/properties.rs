use proptest::prelude::*;

use neumann_bismut::estimators::{HSchedule, TestFn};
use neumann_bismut::geometry::{Disk, HalfSpace, Hemisphere, Manifold};
use neumann_bismut::linalg::Vector;
use neumann_bismut::oracle::{Grid1d, ImageOracle, NeumannOracle, Weight};
use neumann_bismut::pathsim::{simulate_path, SimConfig};
use neumann_bismut::runner::ExperimentConfig;
use neumann_bismut::stein::{check_hsi, flowed_c2, fisher_information, relative_entropy, stein_identity_residual, MeasurePair};
use neumann_bismut::transport::path_invariants;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exponential_schedule_is_normalized(k in -3.0f64..3.0, t in 0.05f64..4.0) {
        let s = HSchedule::exponential(k, t);
        prop_assert!((s.integral(t) + 1.0).abs() < 1e-12);
        prop_assert!(s.require_normalized().is_ok());
        prop_assert!((s.h_tilde(t)).abs() < 1e-12);
    }

    #[test]
    fn tabulated_integral_is_additive(a in -2.0f64..2.0, b in -2.0f64..2.0, c in -2.0f64..2.0, s in 0.0f64..1.0) {
        let h = HSchedule::tabulated(vec![(0.0, a), (0.5, b), (1.0, c)], 1.0).unwrap();
        let total = 0.25 * (a + b) + 0.25 * (b + c);
        prop_assert!((h.integral(1.0) - total).abs() < 1e-12);
        let split = h.integral(s) + h.h_avg(s, 1.0) * (1.0 - s);
        prop_assert!((split - total).abs() < 1e-9);
    }

    #[test]
    fn half_line_square_flows_linearly(x in 0.0f64..3.0, t in 0.01f64..3.0) {
        let o = ImageOracle::new(TestFn::Sq, &HalfSpace::<1>::new());
        prop_assert!((o.value(&Vector::<1>::new(x), t).unwrap() - (x * x + t)).abs() < 1e-10);
    }

    #[test]
    fn image_oracle_preserves_constants(x in 0.0f64..3.0, y in -2.0f64..2.0, t in 0.01f64..2.0, k in 0.0f64..2.0) {
        let o = ImageOracle::new(TestFn::Const(1.5), &HalfSpace::<2>::with_ou(k));
        prop_assert!((o.value(&Vector::<2>::new(x, y), t).unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn grid_conserves_mass(width in 0.2f64..3.0, t in 0.01f64..1.0, w in 0usize..3) {
        let weight = [Weight::Flat, Weight::Sin, Weight::Radial][w];
        let b = if w == 1 { std::f64::consts::FRAC_PI_2 } else { 4.0 };
        let g = Grid1d::new(0.0, b, 200, weight, 1e-3).unwrap();
        let u0: Vec<f64> = g.nodes().iter().map(|x| (-x * x / width).exp()).collect();
        let u = g.evolve(&u0, t).unwrap();
        let (m0, m1) = (g.mass(&u0), g.mass(&u));
        prop_assert!((m1 - m0).abs() < 1e-12 * m0.abs().max(1.0));
    }

    #[test]
    fn reflection_lands_inside(r in 1.0f64..1.3, phi in 0.0f64..6.2831, depth in 0.0f64..0.2) {
        let h = Hemisphere;
        let x = Vector::<2>::new(r * phi.cos(), r * phi.sin());
        prop_assert!(h.boundary_fn(&h.reflect(&x)) >= -1e-12);
        let d = Disk::new(2.0);
        let y = Vector::<2>::new((2.0 + depth) * phi.cos(), (2.0 + depth) * phi.sin());
        let ry = d.reflect(&y);
        prop_assert!((d.boundary_fn(&ry) - depth).abs() < 1e-12);
        let s = HalfSpace::<3>::new();
        let z = Vector::<3>::new(-depth, phi, r);
        prop_assert!((s.boundary_fn(&s.reflect(&z)) - depth).abs() < 1e-15);
    }

    #[test]
    fn hsi_and_log_sobolev_hold(c2 in 0.05f64..20.0, k in 0.2f64..3.0, n in 1usize..4) {
        prop_assume!((c2 - 1.0).abs() > 1e-6);
        let r = check_hsi(&MeasurePair::gaussian(n, k, c2)).unwrap();
        prop_assert!(r.pass);
        prop_assert!(r.h > 0.0 && r.hsi_rhs <= r.lsi_rhs + 1e-15);
    }

    #[test]
    fn entropy_and_fisher_tensorize(c2 in 0.1f64..10.0, k in 0.2f64..3.0, n in 2usize..4) {
        let one = MeasurePair::gaussian(1, k, c2);
        let many = MeasurePair::gaussian(n, k, c2);
        let nf = n as f64;
        prop_assert!((relative_entropy(&many).unwrap() - nf * relative_entropy(&one).unwrap()).abs() < 1e-12 * nf.max(1.0));
        prop_assert!((fisher_information(&many).unwrap() - nf * fisher_information(&one).unwrap()).abs() < 1e-9 * (1.0 + fisher_information(&many).unwrap()));
    }

    #[test]
    fn ou_flow_is_a_semigroup(c2 in 0.1f64..10.0, k in 0.1f64..3.0, s in 0.0f64..2.0, t in 0.0f64..2.0) {
        let a = flowed_c2(flowed_c2(c2, k, s), k, t);
        prop_assert!((a - flowed_c2(c2, k, s + t)).abs() < 1e-12);
    }

    #[test]
    fn config_round_trip(n in 1usize..100_000, seed in any::<u32>(), t in 0.01f64..5.0, x in 0.0f64..3.0, repro in any::<bool>()) {
        let text = format!("model = half_line\nN = {n}\nseed = {seed}\nT = {t}\nx0 = {x}\nformula = grad14\nreproducible = {repro}\n");
        let cfg = ExperimentConfig::from_kv(&text).unwrap();
        prop_assert_eq!(cfg.n, n);
        prop_assert_eq!(cfg.seed, seed as u64);
        prop_assert_eq!(cfg.t, t);
        prop_assert_eq!(cfg.x0.clone(), vec![x]);
        prop_assert_eq!(cfg.reproducible, repro);
        prop_assert!(cfg.validate().is_ok());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn stein_identity_for_random_polynomials(c2 in 0.3f64..4.0, seed in any::<u16>()) {
        let p = MeasurePair::gaussian(1, 1.0, c2);
        prop_assert!(stein_identity_residual(&p, 4, seed as u64).unwrap() < 1e-6);
    }

    #[test]
    fn transport_invariants_on_random_paths(theta in 0.2f64..1.5, seed in any::<u16>()) {
        let m = Hemisphere;
        let p = simulate_path(&m, &Hemisphere::chart_point(theta, 0.3), &SimConfig::new(0.5, 1e-3, seed as u64), 0).unwrap();
        let inv = path_invariants(&p, &m, &[1.0, 10.0, 100.0]).unwrap();
        prop_assert!(inv.envelope_excess < 5e-3);
        prop_assert!(inv.normal_mass_excess < 1e-9);
        prop_assert!(inv.limit_normal_residual < 1e-6);
        prop_assert!(inv.qtilde_inverse_residual < 1e-6);
        prop_assert!(inv.qtilde_bound_excess < 5e-3);
    }
}
