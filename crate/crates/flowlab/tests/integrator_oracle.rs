//! The Euler integrator against exact linear-model solutions driven by the
//! same increments: strong convergence rates, restart reproducibility, and
//! an independent side-ODE check of the joint tangent/Hessian step.

use flowlab::model::ModelSpec;
use flowlab::paths::{
    integrate_flow, integrate_frozen_drift, integrate_hessian, restart_flow, BrownianGrid,
};
use flowlab::stats::loglog_slope;
use flowlab::variance_oracle::LinearOracle;

/// Mean terminal gap between Euler and the exact flow on shared noise, per
/// step size. Levels refine one family of Brownian paths.
fn strong_errors(spec: &ModelSpec, oracle: &LinearOracle, exponents: &[u32]) -> Vec<f64> {
    let model = spec.build();
    let paths = 200usize;
    let t = 1.0;
    let mut errors = vec![0.0f64; exponents.len()];
    for p in 0..paths {
        let base = BrownianGrid::sample(31, p as u64, 0.0, t, 1 << exponents[0], model.noise_dim())
            .unwrap();
        for (e, &expo) in exponents.iter().enumerate() {
            let factor = 1usize << (expo - exponents[0]);
            let grid = if factor == 1 { base.clone() } else { base.refine(factor) };
            let euler = integrate_flow(model.as_ref(), &grid, &[1.0]).unwrap();
            let exact = oracle.oracle_flow(&grid, &[1.0]).unwrap();
            errors[e] += (euler.last()[0] - exact.last()[0]).abs() / paths as f64;
        }
    }
    errors
}

#[test]
fn ou_strong_error_has_first_order_slope() {
    // Additive noise: Euler converges strongly at order 1.
    let exponents = [4u32, 6, 8, 10];
    let errs = strong_errors(
        &ModelSpec::Ou { lambda: 1.0, sigma: 1.0, d: 1 },
        &LinearOracle::Ou { lambda: 1.0, sigma: 1.0, d: 1 },
        &exponents,
    );
    let hs: Vec<f64> = exponents.iter().map(|e| 1.0 / (1u64 << e) as f64).collect();
    for w in errs.windows(2) {
        assert!(w[1] < w[0], "errors not decreasing: {errs:?}");
    }
    let fit = loglog_slope(&hs, &errs);
    assert!(fit.slope >= 0.8, "OU strong slope {} below 0.8 ({errs:?})", fit.slope);
}

#[test]
fn gbm_strong_error_decreases_with_the_step() {
    // Multiplicative noise: no Milstein correction, so the guaranteed order
    // drops to 1/2; require a decreasing error with slope at least 0.4.
    let exponents = [4u32, 6, 8, 10];
    let errs = strong_errors(
        &ModelSpec::Gbm { beta: -1.0, alpha: 0.2 },
        &LinearOracle::Gbm { beta: -1.0, alpha: 0.2 },
        &exponents,
    );
    let hs: Vec<f64> = exponents.iter().map(|e| 1.0 / (1u64 << e) as f64).collect();
    for w in errs.windows(2) {
        assert!(w[1] < w[0], "errors not decreasing: {errs:?}");
    }
    let fit = loglog_slope(&hs, &errs);
    assert!(fit.slope >= 0.4, "GBM strong slope {} below 0.4 ({errs:?})", fit.slope);
}

#[test]
fn euler_tangent_tracks_the_exact_gbm_tangent() {
    let spec = ModelSpec::Gbm { beta: -0.5, alpha: 0.3 };
    let oracle = LinearOracle::Gbm { beta: -0.5, alpha: 0.3 };
    let model = spec.build();
    let grid = BrownianGrid::sample(13, 0, 0.0, 1.0, 1024, 1).unwrap();
    let (_, tangent) = flowlab::paths::integrate_tangent(model.as_ref(), &grid, &[1.0]).unwrap();
    let exact = oracle.oracle_tangent(&grid, grid.steps).unwrap();
    assert!(
        (tangent.last()[0] - exact[0]).abs() < 5e-3,
        "tangent {} vs exact {}",
        tangent.last()[0],
        exact[0]
    );
}

#[test]
fn restart_reproduces_the_tail_bit_for_bit() {
    let model = ModelSpec::LangevinTanh { d: 2, sigma: 0.6, tanh_weight: 1.0 }.build();
    let grid = BrownianGrid::sample(17, 0, 0.0, 2.0, 256, 2).unwrap();
    let flow = integrate_flow(model.as_ref(), &grid, &[0.4, -0.3]).unwrap();
    let k = 100;
    let restarted = restart_flow(model.as_ref(), &grid, k, flow.state(k), false, false).unwrap();
    let tail = restarted.flow;
    assert_eq!(tail.nodes(), grid.steps - k + 1);
    for j in 0..tail.nodes() {
        for i in 0..2 {
            assert_eq!(
                tail.state(j)[i].to_bits(),
                flow.state(k + j)[i].to_bits(),
                "node {j} coordinate {i} differs after restart"
            );
        }
    }
}

#[test]
fn joint_hessian_step_matches_an_independent_side_ode() {
    // Zero noise makes flow/tangent/Hessian a coupled ODE system
    //   x' = b(x), J' = b'(x) J, H' = b''(x) J^2 + b'(x) H
    // for scalar langevin-tanh. Integrate it with classical RK4 at a fine
    // step and require the joint Euler step to land within O(h).
    let w = 1.5f64;
    let b = |x: f64| -(x + w * x.tanh());
    let b1 = |x: f64| {
        let c = x.cosh();
        -(1.0 + w / (c * c))
    };
    let b2 = |x: f64| {
        let c = x.cosh();
        2.0 * w * x.tanh() / (c * c)
    };

    let t = 1.0;
    let x0 = 0.7;
    // RK4 on the joint system.
    let rk_steps = 20_000usize;
    let hh = t / rk_steps as f64;
    let (mut x, mut j, mut hs) = (x0, 1.0, 0.0);
    for _ in 0..rk_steps {
        let f = |s: (f64, f64, f64)| (b(s.0), b1(s.0) * s.1, b2(s.0) * s.1 * s.1 + b1(s.0) * s.2);
        let s0 = (x, j, hs);
        let k1 = f(s0);
        let k2 = f((x + 0.5 * hh * k1.0, j + 0.5 * hh * k1.1, hs + 0.5 * hh * k1.2));
        let k3 = f((x + 0.5 * hh * k2.0, j + 0.5 * hh * k2.1, hs + 0.5 * hh * k2.2));
        let k4 = f((x + hh * k3.0, j + hh * k3.1, hs + hh * k3.2));
        x += hh / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
        j += hh / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        hs += hh / 6.0 * (k1.2 + 2.0 * k2.2 + 2.0 * k3.2 + k4.2);
    }

    let model = ModelSpec::LangevinTanh { d: 1, sigma: 0.0, tanh_weight: w }.build();
    let euler_steps = 2048usize;
    let grid = BrownianGrid::sample(1, 0, 0.0, t, euler_steps, 1).unwrap();
    let (flow, tangent, hessian) = integrate_hessian(model.as_ref(), &grid, &[x0]).unwrap();
    let h_step = t / euler_steps as f64;
    assert!((flow.last()[0] - x).abs() < 5.0 * h_step, "flow {} vs {x}", flow.last()[0]);
    assert!((tangent.last()[0] - j).abs() < 5.0 * h_step, "tangent {} vs {j}", tangent.last()[0]);
    assert!((hessian.last()[0] - hs).abs() < 5.0 * h_step, "hessian {} vs {hs}", hessian.last()[0]);
}

#[test]
fn frozen_drift_error_shrinks_with_the_freeze_width() {
    let model = ModelSpec::LangevinTanh { d: 1, sigma: 0.5, tanh_weight: 1.0 }.build();
    let mut gaps = Vec::new();
    for big_h in [0.25, 0.125, 0.0625] {
        let mut gap = 0.0;
        for p in 0..100u64 {
            let grid = BrownianGrid::sample(23, p, 0.0, 2.0, 512, 1).unwrap();
            let fine = integrate_flow(model.as_ref(), &grid, &[1.0]).unwrap();
            let frozen = integrate_frozen_drift(model.as_ref(), &grid, &[1.0], big_h).unwrap();
            gap += (fine.last()[0] - frozen.last()[0]).abs() / 100.0;
        }
        gaps.push(gap);
    }
    assert!(gaps[1] < gaps[0] && gaps[2] < gaps[1], "{gaps:?}");
}
