use num_complex::Complex64;
use num_rational::Rational64;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use toda_bubbling::green::{DiskGreen, RegionBound, RegionStat};
use toda_bubbling::harness::RunConfig;
use toda_bubbling::matching::{EstimateSpec, Regime};
use toda_bubbling::system::{diagnostic_grid, CoeffTable, SingularWeights, TodaParams, TodaSolution};
use toda_bubbling::Error;

const GAMMAS: [(i64, i64); 5] = [(-1, 2), (0, 1), (1, 2), (1, 1), (2, 1)];

fn weights() -> impl Strategy<Value = SingularWeights> {
    prop::collection::vec(0..GAMMAS.len(), 1..=3).prop_map(|idx| {
        SingularWeights::from_pairs(&idx.iter().map(|&k| GAMMAS[k]).collect::<Vec<_>>()).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn constructed_solutions_solve_the_system(w in weights(), seed in any::<u64>()) {
        let p = TodaParams::random_admissible(&w, 0.5, &mut ChaCha8Rng::seed_from_u64(seed));
        let sol = TodaSolution::build(&p).unwrap();
        let grid = diagnostic_grid();
        prop_assert!(sol.residual_sup(&grid).unwrap() < 1e-8);
        prop_assert!(sol.verify_ladder(&grid).unwrap() < 1e-8);
        for &(r, t) in &grid {
            let lp = sol.ladder_point(r, t).unwrap();
            for i in 1..=w.n() {
                prop_assert!(lp.upper(i).is_finite());
            }
        }
    }

    #[test]
    fn far_field_slope_is_paired(w in weights(), seed in any::<u64>()) {
        let p = TodaParams::random_admissible(&w, 0.5, &mut ChaCha8Rng::seed_from_u64(seed));
        let sol = TodaSolution::build(&p).unwrap();
        for i in 1..=w.n() {
            let target = -2.0 * (2.0 + w.gamma_f64(i) + w.gamma_f64(w.n() + 1 - i));
            prop_assert!((sol.asymptotic_slope(i, 1e4).unwrap() - target).abs() < 1e-2);
        }
    }

    #[test]
    fn non_resonant_coefficients_are_rejected(w in weights(), slot in 0usize..6, re in 0.1f64..1.0) {
        let n = w.n();
        let slots: Vec<(usize, usize)> = CoeffTable::slots(n).collect();
        let (i, j) = slots[slot % slots.len()];
        let mut c = CoeffTable::zeros(n);
        c.set(i, j, Complex64::new(re, 0.0)).unwrap();
        let result = TodaParams::make(w.clone(), &vec![1.0; n], c);
        if w.resonant(j, i) {
            prop_assert!(result.is_ok());
        } else {
            let rejected = matches!(result, Err(Error::NonResonantCoefficient { .. }));
            prop_assert!(rejected);
        }
    }

    #[test]
    fn estimate_branch_follows_the_threshold(num in -15i64..40, sigma in 0.01f64..0.99) {
        let g = Rational64::new(num, 16);
        let w = SingularWeights::new(vec![g, Rational64::from_integer(0)]).unwrap();
        match EstimateSpec::new(&w, sigma) {
            Ok(spec) => {
                let small = g <= Rational64::new(-3, 4);
                prop_assert_eq!(spec.regime == Regime::SmallGamma, small);
            }
            Err(e) => {
                let invalid = matches!(e, Error::InvalidEstimate(_));
                prop_assert!(invalid);
            }
        }
    }

    #[test]
    fn green_is_symmetric_and_vanishes_on_the_boundary(
        radius in 1.0f64..50.0, a in 0.0f64..0.95, b in 0.0f64..0.95,
        ta in 0.0f64..6.28, tb in 0.0f64..6.28,
    ) {
        let g = DiskGreen::new(radius).unwrap();
        let y = Complex64::from_polar(a * radius, ta);
        let eta = Complex64::from_polar(b * radius, tb);
        prop_assume!((y - eta).norm() > 1e-6 * radius);
        let gy = g.green(y, eta).unwrap();
        let ge = g.green(eta, y).unwrap();
        prop_assert!((gy - ge).abs() <= 1e-10 * gy.abs().max(1.0));
        let edge = Complex64::from_polar(radius * (1.0 - 1e-12), tb);
        prop_assert!(g.green(y, edge).unwrap().abs() < 1e-9);
    }

    #[test]
    fn region_verdict_is_monotone_in_the_constant(
        cs in prop::collection::vec(0.0f64..2.0, 9), c in 0.0f64..2.0, extra in 0.0f64..1.0,
    ) {
        let stats = |k: usize| -> Vec<RegionStat> {
            (0..3)
                .map(|r| RegionStat { name: format!("sigma{}", r + 1), empirical_c: cs[3 * k + r], samples: 1 })
                .collect()
        };
        let bound = RegionBound {
            radius: 10.0,
            regions: stats(0),
            doubled_samples: stats(1),
            doubled_radius: stats(2),
            pass: true,
        };
        if bound.within(c) {
            prop_assert!(bound.within(c + extra));
        }
    }

    #[test]
    fn weights_at_or_below_minus_one_are_config_errors(k in 0usize..3, num in -40i64..=-8) {
        let mut pairs = vec![(0i64, 1i64); 3];
        pairs[k] = (num, 8);
        let text = format!(r#"{{"weights": {}, "lambda_free": [1.0, 1.0, 1.0]}}"#, serde_json::to_string(&pairs).unwrap());
        match RunConfig::parse(&text) {
            Err(Error::ConfigInvalid { path, .. }) => prop_assert_eq!(path, format!("weights[{k}]")),
            other => prop_assert!(false, "unexpected {:?}", other),
        }
    }
}
