//! Estimators against closed forms: moment estimates for linear pairs,
//! Bismut-Elworthy-Li first and second derivatives, the semigroup difference
//! identity, and the invariant shift, all at seeded desk-scale budgets.

use flowlab::estimators::{
    bel_gradient, bel_hessian, bel_hessian_split, builtin_observable, flow_difference_moments,
    invariant_shift, semigroup_difference, BelStudy, InvariantStudy, PhiSpec, SemigroupStudy,
};
use flowlab::mc::ExecCtx;
use flowlab::model::{ModelPair, ModelSpec};
use flowlab::variance_oracle::{oracle_difference_moment, LinearOracle};

#[test]
fn coupled_moments_match_the_ou_difference_oracle() {
    let a = ModelSpec::Ou { lambda: 1.0, sigma: 1.0, d: 1 }.build();
    let b = ModelSpec::Ou { lambda: 1.5, sigma: 0.7, d: 1 }.build();
    let pair = ModelPair::new(a.as_ref(), b.as_ref()).unwrap();
    let est = flow_difference_moments(
        &pair,
        0.0,
        2.0,
        &[1.0],
        2,
        512,
        2048,
        21,
        ExecCtx::default(),
    )
    .unwrap();
    let exact = oracle_difference_moment(
        &LinearOracle::Ou { lambda: 1.0, sigma: 1.0, d: 1 },
        &LinearOracle::Ou { lambda: 1.5, sigma: 0.7, d: 1 },
        2,
        0.0,
        2.0,
        &[1.0],
    )
    .unwrap();
    assert!(
        (est.value - exact).abs() < 3.0 * est.stderr + 0.01,
        "moment {} vs oracle {exact} (se {})",
        est.value,
        est.stderr
    );
}

#[test]
fn bel_gradient_matches_ou_and_gbm_closed_forms() {
    let ctx = ExecCtx::default();
    let study = BelStudy { steps: 128, paths: 4096, ..BelStudy::default() };
    let f = builtin_observable("coord:0").unwrap();

    let ou = ModelSpec::Ou { lambda: 1.0, sigma: 1.0, d: 1 }.build();
    let est = bel_gradient(ou.as_ref(), f.as_ref(), 0.0, 1.0, &[0.5], &study, ctx).unwrap();
    let exact = (-1.0f64).exp();
    assert!(
        (est.value[0] - exact).abs() < 3.0 * est.stderr[0] + 5e-3,
        "OU gradient {} vs {exact} (se {})",
        est.value[0],
        est.stderr[0]
    );

    let gbm = ModelSpec::Gbm { beta: -0.8, alpha: 0.25 }.build();
    let est = bel_gradient(gbm.as_ref(), f.as_ref(), 0.0, 1.0, &[1.0], &study, ctx).unwrap();
    let exact = (-0.8f64).exp();
    assert!(
        (est.value[0] - exact).abs() < 3.0 * est.stderr[0] + 5e-3,
        "GBM gradient {} vs {exact} (se {})",
        est.value[0],
        est.stderr[0]
    );
}

#[test]
fn bel_hessian_matches_the_quadratic_closed_form() {
    // For OU with f(y) = y^2, grad^2 P_t f = 2 e^{-2 lambda t}.
    let model = ModelSpec::Ou { lambda: 1.0, sigma: 1.0, d: 1 }.build();
    let f = builtin_observable("square:0").unwrap();
    let study = BelStudy { steps: 128, paths: 8192, ..BelStudy::default() };
    let est =
        bel_hessian(model.as_ref(), f.as_ref(), 0.0, 1.0, &[0.5], &study, ExecCtx::default())
            .unwrap();
    let exact = 2.0 * (-2.0f64).exp();
    assert!(
        (est.value[0] - exact).abs() < 3.0 * est.stderr[0] + 0.02,
        "hessian {} vs {exact} (se {})",
        est.value[0],
        est.stderr[0]
    );
}

#[test]
fn split_hessian_agrees_with_the_single_span_estimator() {
    let model = ModelSpec::Ou { lambda: 1.0, sigma: 1.0, d: 1 }.build();
    let f = builtin_observable("square:0").unwrap();
    let study = BelStudy {
        steps: 128,
        paths: 8192,
        phi: PhiSpec::Cosine { epsilon: 0.25 },
        ..BelStudy::default()
    };
    let est = bel_hessian_split(
        model.as_ref(),
        f.as_ref(),
        0.0,
        1.0,
        &[0.5],
        0.5,
        &study,
        ExecCtx::default(),
    )
    .unwrap();
    let exact = 2.0 * (-2.0f64).exp();
    assert!(
        (est.value[0] - exact).abs() < 4.0 * est.stderr[0] + 0.03,
        "split hessian {} vs {exact} (se {})",
        est.value[0],
        est.stderr[0]
    );
}

#[test]
fn constant_observables_have_zero_derivatives() {
    let model = ModelSpec::Ou { lambda: 1.0, sigma: 1.0, d: 1 }.build();
    let f = builtin_observable("const:1").unwrap();
    let study = BelStudy { steps: 64, paths: 2048, ..BelStudy::default() };
    let grad =
        bel_gradient(model.as_ref(), f.as_ref(), 0.0, 1.0, &[0.5], &study, ExecCtx::default())
            .unwrap();
    assert!(
        grad.value[0].abs() < 3.0 * grad.stderr[0] + 1e-6,
        "gradient of a constant {} (se {})",
        grad.value[0],
        grad.stderr[0]
    );
}

#[test]
fn observable_names_are_validated() {
    assert!(builtin_observable("coord:0").is_ok());
    assert!(builtin_observable("norm2").is_ok());
    for bad in ["coord", "coord:x", "powers:2", "", "square:"] {
        match builtin_observable(bad) {
            Err(flowlab::Error::Config { field, .. }) => assert_eq!(field, "observable"),
            Err(other) => panic!("{bad:?} gave the wrong error {other:?}"),
            Ok(_) => panic!("{bad:?} unexpectedly parsed"),
        }
    }
}

#[test]
fn semigroup_identity_balances_for_a_diffusion_perturbation() {
    let a = ModelSpec::Ou { lambda: 1.0, sigma: 1.0, d: 1 }.build();
    let b = ModelSpec::Ou { lambda: 1.0, sigma: 0.5, d: 1 }.build();
    let pair = ModelPair::new(a.as_ref(), b.as_ref()).unwrap();
    let f = builtin_observable("square:0").unwrap();
    let study = SemigroupStudy {
        outer_paths: 128,
        inner_paths: 128,
        steps: 48,
        quad_nodes: 6,
        lhs_paths: 4096,
        ..SemigroupStudy::default()
    };
    let report =
        semigroup_difference(&pair, f.as_ref(), 0.0, 1.0, &[1.0], &study, ExecCtx::default())
            .unwrap();
    // Equal drifts: the whole difference is the diffusion term.
    assert_eq!(report.drift_part, 0.0);
    assert!(
        report.gap.abs() < 4.0 * report.gap_stderr + 5e-3,
        "identity gap {} (se {})",
        report.gap,
        report.gap_stderr
    );
}

#[test]
fn invariant_shift_matches_the_gibbs_difference_for_a_drift_pair() {
    // Unit-noise OU with rates 1 and 1.25: stationary E[y^2] are 0.5 and
    // 0.4, so the shift is 0.1.
    let a = ModelSpec::Ou { lambda: 1.0, sigma: 1.0, d: 1 }.build();
    let b = ModelSpec::Ou { lambda: 1.25, sigma: 1.0, d: 1 }.build();
    let pair = ModelPair::new(a.as_ref(), b.as_ref()).unwrap();
    let f = builtin_observable("square:0").unwrap();
    let study = InvariantStudy {
        outer_samples: 96,
        inner_paths: 96,
        time_nodes: 10,
        steps_per_unit: 16,
        burn_in: 6.0,
        seed: 2,
        ..InvariantStudy::default()
    };
    let report = invariant_shift(&pair, f.as_ref(), &study, ExecCtx::default()).unwrap();
    let target = 0.5 - 0.4;
    assert!(
        (report.value - target).abs() < 3.0 * report.stderr + 0.02,
        "shift {} vs {target} (se {})",
        report.value,
        report.stderr
    );
    assert!(report.lambda_a > 0.0 && report.lambda_a_bar > 0.0);
}

#[test]
fn non_contracting_pairs_are_refused_by_the_invariant_estimator() {
    let a = ModelSpec::Gbm { beta: 0.2, alpha: 0.1 }.build();
    let b = ModelSpec::Gbm { beta: 0.3, alpha: 0.1 }.build();
    let pair = ModelPair::new(a.as_ref(), b.as_ref()).unwrap();
    let f = builtin_observable("square:0").unwrap();
    let err = invariant_shift(&pair, f.as_ref(), &InvariantStudy::default(), ExecCtx::default());
    assert!(matches!(err, Err(flowlab::Error::NotErgodic(_))));
}

#[test]
fn estimates_are_bit_identical_across_thread_counts() {
    let model = ModelSpec::Ou { lambda: 1.0, sigma: 1.0, d: 1 }.build();
    let f = builtin_observable("coord:0").unwrap();
    let study = BelStudy { steps: 64, paths: 512, ..BelStudy::default() };
    let one =
        bel_gradient(model.as_ref(), f.as_ref(), 0.0, 1.0, &[0.5], &study, ExecCtx::fixed(1))
            .unwrap();
    let four =
        bel_gradient(model.as_ref(), f.as_ref(), 0.0, 1.0, &[0.5], &study, ExecCtx::fixed(4))
            .unwrap();
    assert_eq!(one.value[0].to_bits(), four.value[0].to_bits());
    assert_eq!(one.stderr[0].to_bits(), four.stderr[0].to_bits());
}
