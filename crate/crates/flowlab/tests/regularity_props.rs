//! Property tests for the regularity constants: monotonicity in the moment
//! order, exactness on linear models, and determinism of the scans.

use flowlab::model::ModelSpec;
use flowlab::regularity::{
    condition_report, estimate_lambda_a, growth_params_for, kappa_n, lambda_a_n,
    sigma_bound_from_a, GrowthParams,
};
use proptest::prelude::*;

fn arb_growth() -> impl Strategy<Value = GrowthParams> {
    (0.0..4.0f64, 0.0..2.0f64, 0.0..1.0f64, 0.0..2.0f64, 0.0..2.0f64, 0.5..4.0f64).prop_map(
        |(alpha0, alpha1, alpha2, beta0, beta1, beta2)| GrowthParams {
            alpha0,
            alpha1,
            alpha2,
            beta0,
            beta1,
            beta2,
        },
    )
}

proptest! {
    // beta_2(n) decreases in n, so the moment constant kappa_n never shrinks
    // with the order and fails exactly when beta_2(n) crosses zero.
    #[test]
    fn kappa_is_monotone_in_the_order(g in arb_growth()) {
        let mut prev: Option<f64> = None;
        for n in 2..=8u32 {
            match kappa_n(&g, n) {
                Ok(k) => {
                    prop_assert!(k.beta2_n > 0.0);
                    prop_assert!(k.kappa_n >= 1.0);
                    if let Some(p) = prev {
                        prop_assert!(k.kappa_n >= p - 1e-12);
                    }
                    prev = Some(k.kappa_n);
                }
                Err(_) => {
                    // Once the condition fails it fails for all larger n.
                    prop_assert!(kappa_n(&g, n + 1).is_err());
                    break;
                }
            }
        }
    }

    // lambda_A(n) = lambda_A - d (n-2) rho*^2 / 2: equal to lambda_A at
    // n = 2 and nonincreasing in n.
    #[test]
    fn order_rate_decreases_from_the_base_rate(
        lambda in 0.1..3.0f64,
        d in 1usize..5,
        rho in 0.0..1.0f64,
    ) {
        prop_assert_eq!(lambda_a_n(lambda, 2, d, rho), lambda);
        let mut prev = lambda;
        for n in 3..=6u32 {
            let next = lambda_a_n(lambda, n, d, rho);
            prop_assert!(next <= prev + 1e-12);
            prev = next;
        }
    }

    // The scan recovers the exact rate of a linear drift at any sample size
    // and seed, because the log-norm field is constant.
    #[test]
    fn linear_scan_is_exact(lambda in 0.1..4.0f64, seed in 0u64..1000) {
        let model = ModelSpec::Ou { lambda, sigma: 0.8, d: 2 }.build();
        let scan = estimate_lambda_a(model.as_ref(), 16, seed).unwrap();
        prop_assert!((scan.lambda_a - lambda).abs() < 1e-9);
        prop_assert!(scan.rho_star.abs() < 1e-12); // constant diffusion
    }

    // The diffusion-difference bound grows with the mismatch and rejects a
    // nonpositive ellipticity constant.
    #[test]
    fn sigma_bound_is_monotone_in_the_mismatch(
        a in 0.0..2.0f64,
        b in 0.0..2.0f64,
        upsilon in 0.01..2.0f64,
    ) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let small = sigma_bound_from_a(lo, upsilon).unwrap();
        let large = sigma_bound_from_a(hi, upsilon).unwrap();
        prop_assert!(small <= large + 1e-12);
        prop_assert!(sigma_bound_from_a(lo, 0.0).is_err());
    }
}

#[test]
fn condition_report_is_deterministic_in_the_seed() {
    let model = ModelSpec::LangevinTanh { d: 2, sigma: 0.7, tanh_weight: 1.0 }.build();
    let growth = growth_params_for(model.as_ref());
    let a = condition_report(model.as_ref(), 4, growth, 128, 5).unwrap();
    let b = condition_report(model.as_ref(), 4, growth, 128, 5).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn langevin_report_satisfies_both_conditions() {
    // Drift -(x + w tanh x) has symmetrized Jacobian <= -1 everywhere and
    // linear growth, so both hypotheses hold at every order.
    let model = ModelSpec::LangevinTanh { d: 3, sigma: 0.5, tanh_weight: 2.0 }.build();
    let growth = growth_params_for(model.as_ref());
    for n in [2u32, 4, 6] {
        let report = condition_report(model.as_ref(), n, growth, 256, 1).unwrap();
        assert!(report.lambda_a >= 1.0 - 1e-9, "lambda_a = {}", report.lambda_a);
        assert!(report.t_n_satisfied && report.p_n_satisfied, "order {n}");
        assert!(report.kappa_n.unwrap() >= 1.0);
    }
}

#[test]
fn expanding_gbm_fails_the_spectral_condition() {
    let model = ModelSpec::Gbm { beta: 0.3, alpha: 0.2 }.build();
    let growth = growth_params_for(model.as_ref());
    let report = condition_report(model.as_ref(), 2, growth, 128, 1).unwrap();
    assert!(report.lambda_a < 0.0);
    assert!(!report.t_n_satisfied);
    assert!(!report.p_n_satisfied); // beta2 = -beta < 0
}
