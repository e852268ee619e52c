use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use transynth_core::design::{build_design, build_design_rows, RowMajor};
use transynth_core::estimators::{estimate_aipw, fit_synthesis, synthesis_nuisance_spec};
use transynth_core::inference::trapezoid_quantile;
use transynth_core::mestimation::FnBlock;
use transynth_core::nuisance::LogisticBlock;
use transynth_core::simulation::{generate_dataset, Scenario};
use transynth_core::{AipwVariant, Dataset, DesignSpec, EFStack, SolverOptions, SynthesisSpec};

fn dataset(seed: u64, n1: usize, n0: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_dataset(Scenario::Linear, n1, n0, &mut rng).unwrap()
}

fn permuted(d: &Dataset, seed: u64) -> Dataset {
    let mut order: Vec<usize> = (0..d.n()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    d.subset(&order)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mean_sandwich_is_biased_variance_over_n(y in prop::collection::vec(-100.0f64..100.0, 2..40)) {
        let n = y.len();
        let ys = y.clone();
        let stack = EFStack::new(n).with(FnBlock::new("mu", 1, n, move |i, t, out| out[0] = ys[i] - t[0]));
        let sol = stack.solve(&[0.0], &SolverOptions::default()).unwrap();
        let sw = stack.sandwich(sol.theta.as_slice()).unwrap();
        let m = y.iter().sum::<f64>() / n as f64;
        let v = y.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
        prop_assert!((sol.theta[0] - m).abs() < 1e-8);
        let expected = v / n as f64;
        prop_assert!((sw.covariance[(0, 0)] - expected).abs() <= 1e-8 * expected.max(1e-12));
    }

    #[test]
    fn logistic_jacobian_matches_analytic(
        b0 in -1.5f64..1.5,
        b1 in -1.5f64..1.5,
        x in prop::collection::vec(-2.0f64..2.0, 10..30),
    ) {
        let n = x.len();
        let design = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { x[i] });
        let response: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let block = LogisticBlock::new("eta", 0, (0..n).collect(), RowMajor::from_matrix(&design), response);
        let stack = EFStack::new(n).with(block);
        let jac = stack.numerical_jacobian(&[b0, b1]).unwrap();
        let mut analytic = DMatrix::zeros(2, 2);
        for i in 0..n {
            let p = 1.0 / (1.0 + (-(b0 + b1 * x[i])).exp());
            let row = design.row(i).transpose();
            analytic -= p * (1.0 - p) * &row * row.transpose();
        }
        prop_assert!((&jac - &analytic).abs().max() < 1e-6);
    }

    #[test]
    fn design_rows_match_full_design(seed in 0u64..1000, picks in prop::collection::vec(0usize..80, 1..20)) {
        let d = dataset(seed, 40, 80);
        let d = d.subset(&d.external_rows());
        let spec: DesignSpec = "1 + A + V + W + A:V + A:hinge(V,300) + I(V>150)".parse().unwrap();
        let full = build_design(&spec, &d, &[]).unwrap();
        let part = build_design_rows(&spec, &d, &[], &picks).unwrap();
        for (k, &i) in picks.iter().enumerate() {
            prop_assert_eq!(part.row(k), full.row(i));
        }
    }

    #[test]
    fn trapezoid_quantile_is_monotone_on_support(c in -5.0f64..5.0, s in 0.01f64..3.0, u in 0.0f64..1.0, du in 0.0f64..0.2) {
        let q = trapezoid_quantile(c, s, u);
        let q2 = trapezoid_quantile(c, s, (u + du).min(1.0));
        prop_assert!(q2 >= q - 1e-12);
        prop_assert!(q >= c - 3.0 * s - 1e-12 && q <= c + 3.0 * s + 1e-12);
    }
}

#[test]
fn aipw_is_invariant_to_row_order() {
    let d = dataset(41, 500, 500);
    for variant in AipwVariant::ALL {
        let base = estimate_aipw(&d, variant, &variant.default_spec()).unwrap();
        for seed in 0..3 {
            let p = estimate_aipw(&permuted(&d, seed), variant, &variant.default_spec()).unwrap();
            assert!((p.psi() - base.psi()).abs() < 1e-8, "{variant}");
            assert!((p.variance.unwrap() - base.variance.unwrap()).abs() < 1e-8 * base.variance.unwrap());
        }
    }
}

#[test]
fn synthesis_is_invariant_to_row_order() {
    let d = dataset(43, 500, 500);
    for spec in [SynthesisSpec::msm(), SynthesisSpec::cace()] {
        let base = fit_synthesis(&d, &synthesis_nuisance_spec(), &spec).unwrap().evaluate(&[-0.1, 0.2]).unwrap();
        let p = fit_synthesis(&permuted(&d, 7), &synthesis_nuisance_spec(), &spec)
            .unwrap()
            .evaluate(&[-0.1, 0.2])
            .unwrap();
        assert!((p.psi() - base.psi()).abs() < 1e-8);
    }
}

#[test]
fn concat_and_subset_preserve_counts() {
    let d = dataset(47, 300, 200);
    let c = d.counts();
    assert_eq!(c.target, 300);
    assert_eq!(c.external, 200);
    assert_eq!(c.target_below + c.target_positive + c.target_above, c.target);
    let targets = d.subset(&d.target_rows());
    let externals = d.subset(&d.external_rows());
    let back = targets.concat(&externals).unwrap();
    assert_eq!(back.counts(), c);
    assert_eq!(back.column("W").unwrap(), d.column("W").unwrap());
}
