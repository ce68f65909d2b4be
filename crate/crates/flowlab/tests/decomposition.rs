//! Cross-module checks of the forward-backward decomposition: exactness of
//! the telescoping identity on nonlinear pairs, vanishing of the two-sided
//! term for equal diffusions, residual convergence, and the variance
//! formula against its closed form.

use flowlab::interpolation::{
    residual_convergence, skorohod_variance_1d, telescoping_decomposition, write_convergence_csv,
    ConvergenceStudy, VarianceStudy,
};
use flowlab::mc::ExecCtx;
use flowlab::model::{ModelPair, ModelSpec};
use flowlab::paths::BrownianGrid;
use flowlab::stats::loglog_slope;
use flowlab::variance_oracle::ou_skorohod_diagonal;

fn build_pair(base: ModelSpec, perturbed: ModelSpec) -> (Box<dyn flowlab::model::Dynamics>, Box<dyn flowlab::model::Dynamics>) {
    (base.build(), perturbed.build())
}

#[test]
fn telescoping_identity_is_exact_for_nonlinear_pairs() {
    let (a, b) = build_pair(
        ModelSpec::LangevinTanh { d: 2, sigma: 0.8, tanh_weight: 1.0 },
        ModelSpec::LangevinTanh { d: 2, sigma: 0.5, tanh_weight: 1.4 },
    );
    let pair = ModelPair::new(a.as_ref(), b.as_ref()).unwrap();
    for p in 0..20u64 {
        let grid = BrownianGrid::sample(41, p, 0.0, 1.5, 192, 2).unwrap();
        let report = telescoping_decomposition(&pair, &grid, &[0.5, -0.5], 16).unwrap();
        assert!(!report.diverged);
        for i in 0..2 {
            let recomposed = report.t_hat[i] + report.s_hat[i] + report.residual[i];
            assert!(
                (report.lhs[i] - recomposed).abs() < 1e-10,
                "path {p}: identity violated by {}",
                (report.lhs[i] - recomposed).abs()
            );
        }
    }
}

#[test]
fn equal_diffusions_make_the_two_sided_term_vanish_identically() {
    // delta sigma = 0 kills every summand of S before any cancellation, so
    // the result is exactly zero, not merely small.
    let (a, b) = build_pair(
        ModelSpec::Ou { lambda: 1.0, sigma: 1.0, d: 2 },
        ModelSpec::Ou { lambda: 1.6, sigma: 1.0, d: 2 },
    );
    let pair = ModelPair::new(a.as_ref(), b.as_ref()).unwrap();
    for p in 0..20u64 {
        let grid = BrownianGrid::sample(43, p, 0.0, 2.0, 256, 2).unwrap();
        let report = telescoping_decomposition(&pair, &grid, &[1.0, -1.0], 8).unwrap();
        assert_eq!(report.s_hat, vec![0.0, 0.0], "path {p}");
    }
}

#[test]
fn residual_shrinks_with_the_block_width_at_a_measurable_rate() {
    let (a, b) = build_pair(
        ModelSpec::Ou { lambda: 1.0, sigma: 1.0, d: 1 },
        ModelSpec::Ou { lambda: 1.0, sigma: 0.5, d: 1 },
    );
    let pair = ModelPair::new(a.as_ref(), b.as_ref()).unwrap();
    let study = ConvergenceStudy {
        h_values: vec![0.25, 0.125, 0.0625, 0.03125],
        fine_factor: 8,
        paths: 256,
        seed: 3,
    };
    let rows = residual_convergence(&pair, &[1.0], 0.0, 2.0, &study, ExecCtx::default()).unwrap();
    assert_eq!(rows.len(), 4);
    for w in rows.windows(2) {
        assert!(
            w[1].mean_residual < w[0].mean_residual + 2.0 * (w[0].stderr + w[1].stderr),
            "residual failed to decrease: {} -> {}",
            w[0].mean_residual,
            w[1].mean_residual
        );
        assert_eq!(w[0].diverged_paths, 0);
    }
    let hs: Vec<f64> = rows.iter().map(|r| r.big_h).collect();
    let means: Vec<f64> = rows.iter().map(|r| r.mean_residual).collect();
    let fit = loglog_slope(&hs, &means);
    assert!(fit.slope >= 0.4, "residual slope {} below 0.4", fit.slope);

    let mut csv = Vec::new();
    write_convergence_csv(&mut csv, &rows).unwrap();
    let text = String::from_utf8(csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("H,mean_residual,stderr,diverged_paths"));
    assert_eq!(lines.count(), 4);
}

#[test]
fn mismatched_ladder_widths_are_rejected_with_the_field_path() {
    let (a, b) = build_pair(
        ModelSpec::Ou { lambda: 1.0, sigma: 1.0, d: 1 },
        ModelSpec::Ou { lambda: 1.0, sigma: 0.5, d: 1 },
    );
    let pair = ModelPair::new(a.as_ref(), b.as_ref()).unwrap();
    let study = ConvergenceStudy {
        h_values: vec![0.25, 0.15],
        fine_factor: 8,
        paths: 8,
        seed: 1,
    };
    let err = residual_convergence(&pair, &[1.0], 0.0, 2.0, &study, ExecCtx::default());
    match err {
        Err(flowlab::Error::Config { field, .. }) => assert_eq!(field, "study.h_values"),
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn skorohod_variance_matches_the_closed_form_diagonal() {
    let (a, b) = build_pair(
        ModelSpec::Ou { lambda: 1.0, sigma: 1.0, d: 1 },
        ModelSpec::Ou { lambda: 1.0, sigma: 0.5, d: 1 },
    );
    let pair = ModelPair::new(a.as_ref(), b.as_ref()).unwrap();
    let study = VarianceStudy { paths: 512, fine_steps: 256, ..VarianceStudy::default() };
    let report = skorohod_variance_1d(&pair, &study, 0.0, 2.0, 1.0, ExecCtx::default()).unwrap();

    let exact = ou_skorohod_diagonal(1.0, 0.5, 1, 0.0, 2.0);
    assert!(
        (report.diagonal_term - exact).abs() < 3.0 * report.diagonal_stderr + 0.01,
        "diagonal {} vs exact {exact} (se {})",
        report.diagonal_term,
        report.diagonal_stderr
    );
    // S is centered and the formula explains the empirical variance.
    assert!(report.mean_s.abs() < 3.0 * report.mean_s_stderr + 1e-3);
    assert!(
        (report.empirical_variance - report.total).abs()
            < 3.0 * (report.mc_stderr + report.total_stderr) + 0.01,
        "empirical {} vs formula {}",
        report.empirical_variance,
        report.total
    );
}

#[test]
fn variance_study_requires_scalar_pairs() {
    let (a, b) = build_pair(
        ModelSpec::Ou { lambda: 1.0, sigma: 1.0, d: 2 },
        ModelSpec::Ou { lambda: 1.0, sigma: 0.5, d: 2 },
    );
    let pair = ModelPair::new(a.as_ref(), b.as_ref()).unwrap();
    let study = VarianceStudy::default();
    assert!(skorohod_variance_1d(&pair, &study, 0.0, 1.0, 1.0, ExecCtx::default()).is_err());
}
