//! Semigroup-difference and invariant-measure-shift estimators.
//!
//! Taking expectations in the forward-backward decomposition turns the
//! difference of two Markov semigroups into a time integral along the
//! perturbed flow:
//!
//! ```text
//! P_{s,t}(f)(x) - Pbar_{s,t}(f)(x)
//!   = int_s^t E[ <grad P_{u,t}(f)(Xbar_u), db(Xbar_u)>
//!              + 1/2 Tr( grad^2 P_{u,t}(f)(Xbar_u) da(Xbar_u) ) ] du
//! ```
//!
//! and, for ergodic time-homogeneous pairs, integrating the same identity to
//! infinity connects the invariant measures:
//!
//! ```text
//! (pi - pibar)(f) = int_0^inf E[ <grad P_t(f)(Ybar), db(Ybar)>
//!                  + 1/2 Tr( grad^2 P_t(f)(Ybar) da(Ybar) ) ] dt,
//! ```
//!
//! with Ybar distributed by the perturbed invariant measure. Both sides are
//! estimated by nested Monte Carlo: outer paths sample Xbar (or equilibrium
//! draws Ybar), a trapezoid rule handles the time integral, and the inner
//! semigroup derivatives come from Bismut-Elworthy-Li weights, except at the
//! integral's endpoint where grad P = grad f exactly. The infinite horizon
//! is truncated at T with e^{-lambda_A T} < 0.01, since the integrand decays
//! at the contraction rate lambda_A.

use super::bel::{PhiSpec, WeightEngine};
use super::Observable;
use crate::linalg::mat_vec;
use crate::mc::ExecCtx;
use crate::model::{ModelPair, PairScratch};
use crate::paths::{integrate_flow, BrownianGrid};
use crate::regularity::estimate_lambda_a;
use crate::rng::{derive_stream_id, tag};
use crate::stats::mean_and_stderr;
use crate::{Error, Result};
use serde::Serialize;

const LHS_STREAM: u64 = 1;
const OUTER_STREAM: u64 = 2;
const INNER_STREAM: u64 = 3;
const INVARIANT_INNER: u64 = 4;

/// Nested Monte Carlo budget of the semigroup-difference check.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SemigroupStudy {
    pub outer_paths: usize,
    pub inner_paths: usize,
    /// Fine steps of the outer mesh on [s, t]; inner runs reuse its step.
    pub steps: usize,
    /// Trapezoid intervals of the time integral (divides `steps`).
    pub quad_nodes: usize,
    /// Paths of the direct left-hand-side estimate.
    pub lhs_paths: usize,
    pub phi: PhiSpec,
    pub eig_floor: f64,
    pub seed: u64,
}

impl Default for SemigroupStudy {
    fn default() -> Self {
        SemigroupStudy {
            outer_paths: 256,
            inner_paths: 256,
            steps: 64,
            quad_nodes: 8,
            lhs_paths: 4096,
            phi: PhiSpec::Linear,
            eig_floor: 1e-8,
            seed: 1,
        }
    }
}

/// Both sides of the semigroup interpolation identity with error bars.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SemigroupReport {
    /// Direct common-noise estimate of P f - Pbar f.
    pub lhs: f64,
    pub lhs_stderr: f64,
    /// Nested estimate of the interpolation integral.
    pub rhs: f64,
    pub rhs_stderr: f64,
    /// Drift (gradient-weighted) share of the integral.
    pub drift_part: f64,
    /// Diffusion (Hessian-weighted) share of the integral.
    pub diffusion_part: f64,
    pub gap: f64,
    pub gap_stderr: f64,
    pub outer_paths: usize,
    pub inner_paths: usize,
    pub seed: u64,
}

/// Inner Bismut-Elworthy-Li means of grad P_{u,t}(f)(y) and
/// grad^2 P_{u,t}(f)(y), reusing one weight engine across the inner paths.
/// Returns false when every inner path diverged.
fn inner_derivatives(
    pair: &ModelPair,
    f: &dyn Observable,
    u: f64,
    t: f64,
    y: &[f64],
    steps: usize,
    paths: usize,
    seed: u64,
    stream_prefix: &[u64],
    engine: &mut WeightEngine,
    grad_out: &mut [f64],
    hess_out: &mut [f64],
) -> Result<bool> {
    let model = pair.base;
    let d = pair.dim();
    grad_out.fill(0.0);
    hess_out.fill(0.0);
    let mut grad_f = vec![0.0; d];
    let mut jf = vec![0.0; d];
    let mut kept = 0usize;
    let mut tags = stream_prefix.to_vec();
    tags.push(0);
    for i in 0..paths {
        *tags.last_mut().unwrap() = i as u64;
        let grid =
            BrownianGrid::sample(seed, derive_stream_id(&tags), u, t, steps, pair.noise_dim())?;
        if !engine.pass(model, &grid, 0, steps, y, true)? {
            continue;
        }
        kept += 1;
        let fv = f.value(&engine.state.x);
        f.gradient(&engine.state.x, &mut grad_f);
        mat_vec(engine.state.jac.as_ref().unwrap(), &grad_f, d, d, &mut jf);
        for c in 0..d {
            grad_out[c] += fv * engine.tau[c];
        }
        for i in 0..d {
            for j in 0..d {
                hess_out[i * d + j] += fv * engine.tau2[i * d + j] + jf[i] * engine.tau[j];
            }
        }
    }
    if kept == 0 {
        return Ok(false);
    }
    let w = 1.0 / kept as f64;
    grad_out.iter_mut().for_each(|v| *v *= w);
    hess_out.iter_mut().for_each(|v| *v *= w);
    Ok(true)
}

/// Estimate both sides of the semigroup interpolation identity.
pub fn semigroup_difference(
    pair: &ModelPair,
    f: &dyn Observable,
    s: f64,
    t: f64,
    x: &[f64],
    study: &SemigroupStudy,
    ctx: ExecCtx,
) -> Result<SemigroupReport> {
    if study.quad_nodes == 0 || study.steps % study.quad_nodes != 0 {
        return Err(Error::config(
            "semigroup.quad_nodes",
            format!("{} intervals do not divide {} steps", study.quad_nodes, study.steps),
        ));
    }
    let d = pair.dim();
    let pair = *pair;

    let lhs_samples = ctx.run_paths(study.lhs_paths, |p| -> Result<Option<f64>> {
        let grid = BrownianGrid::sample(
            study.seed,
            derive_stream_id(&[tag::NESTED, LHS_STREAM, p as u64]),
            s,
            t,
            study.steps,
            pair.noise_dim(),
        )?;
        let base = integrate_flow(pair.base, &grid, x)?;
        let pert = integrate_flow(pair.perturbed, &grid, x)?;
        if base.exploded.is_some() || pert.exploded.is_some() {
            return Ok(None);
        }
        Ok(Some(f.value(base.last()) - f.value(pert.last())))
    });
    let mut lhs_values = Vec::with_capacity(study.lhs_paths);
    for v in lhs_samples {
        if let Some(v) = v? {
            lhs_values.push(v);
        }
    }
    if lhs_values.is_empty() {
        return Err(Error::AllDiverged(study.lhs_paths));
    }
    let (lhs, lhs_stderr) = mean_and_stderr(&lhs_values);

    let q = study.quad_nodes;
    let stride = study.steps / q;
    let du = (t - s) / q as f64;
    let outer = ctx.run_paths(study.outer_paths, |jdx| -> Result<Option<(f64, f64, f64)>> {
        let grid = BrownianGrid::sample(
            study.seed,
            derive_stream_id(&[tag::NESTED, OUTER_STREAM, jdx as u64]),
            s,
            t,
            study.steps,
            pair.noise_dim(),
        )?;
        let xbar = integrate_flow(pair.perturbed, &grid, x)?;
        if xbar.exploded.is_some() {
            return Ok(None);
        }
        let mut engine = WeightEngine::new(pair.base, study.phi, study.eig_floor, true)?;
        let mut scratch = PairScratch::new(&pair);
        let mut grad = vec![0.0; d];
        let mut hess = vec![0.0; d * d];
        let mut drift_acc = 0.0;
        let mut diff_acc = 0.0;
        for qi in 0..=q {
            let node = qi * stride;
            let u = grid.node_time(node);
            let y = xbar.state(node);
            scratch.eval(&pair, u, y);
            if qi == q {
                f.gradient(y, &mut grad);
                f.hessian(y, &mut hess);
            } else if !inner_derivatives(
                &pair,
                f,
                u,
                t,
                y,
                study.steps - node,
                study.inner_paths,
                study.seed,
                &[tag::NESTED, INNER_STREAM, jdx as u64, qi as u64],
                &mut engine,
                &mut grad,
                &mut hess,
            )? {
                return Ok(None);
            }
            let w = if qi == 0 || qi == q { 0.5 } else { 1.0 };
            let drift: f64 = (0..d).map(|i| grad[i] * scratch.delta_b[i]).sum();
            let diffusion: f64 =
                0.5 * (0..d * d).map(|i| hess[i] * scratch.delta_a[i]).sum::<f64>();
            drift_acc += w * du * drift;
            diff_acc += w * du * diffusion;
        }
        Ok(Some((drift_acc + diff_acc, drift_acc, diff_acc)))
    });
    let mut rhs_values = Vec::with_capacity(study.outer_paths);
    let mut drift_values = Vec::with_capacity(study.outer_paths);
    let mut diff_values = Vec::with_capacity(study.outer_paths);
    for o in outer {
        if let Some((total, drift, diffusion)) = o? {
            rhs_values.push(total);
            drift_values.push(drift);
            diff_values.push(diffusion);
        }
    }
    if rhs_values.is_empty() {
        return Err(Error::AllDiverged(study.outer_paths));
    }
    let (rhs, rhs_stderr) = mean_and_stderr(&rhs_values);
    let (drift_part, _) = mean_and_stderr(&drift_values);
    let (diffusion_part, _) = mean_and_stderr(&diff_values);
    Ok(SemigroupReport {
        lhs,
        lhs_stderr,
        rhs,
        rhs_stderr,
        drift_part,
        diffusion_part,
        gap: lhs - rhs,
        gap_stderr: lhs_stderr.hypot(rhs_stderr),
        outer_paths: rhs_values.len(),
        inner_paths: study.inner_paths,
        seed: study.seed,
    })
}

/// Layout of the invariant-shift estimate.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct InvariantStudy {
    /// Truncation horizon T; 0 picks 5 / lambda_A automatically.
    pub horizon: f64,
    /// Trapezoid intervals over [0, T].
    pub time_nodes: usize,
    /// Equilibrium draws of Ybar.
    pub outer_samples: usize,
    pub inner_paths: usize,
    /// Mesh density: steps per unit time for burn-in and inner runs.
    pub steps_per_unit: usize,
    /// Burn-in horizon for sampling the perturbed invariant measure.
    pub burn_in: f64,
    /// State-space samples for the contraction-rate scan.
    pub lambda_samples: usize,
    pub phi: PhiSpec,
    pub eig_floor: f64,
    pub seed: u64,
}

impl Default for InvariantStudy {
    fn default() -> Self {
        InvariantStudy {
            horizon: 0.0,
            time_nodes: 10,
            outer_samples: 128,
            inner_paths: 128,
            steps_per_unit: 32,
            burn_in: 8.0,
            lambda_samples: 128,
            phi: PhiSpec::Linear,
            eig_floor: 1e-8,
            seed: 1,
        }
    }
}

/// Estimate of (pi - pibar)(f) with the diagnostics behind the truncation.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct InvariantReport {
    pub value: f64,
    pub stderr: f64,
    pub horizon: f64,
    pub lambda_a: f64,
    pub lambda_a_bar: f64,
    pub outer_samples: usize,
    pub seed: u64,
}

/// Estimate (pi - pibar)(f) for an ergodic time-homogeneous pair. Burn-in
/// runs of the perturbed model (from the origin) sample Ybar; the time
/// integrand is estimated as in [`semigroup_difference`].
pub fn invariant_shift(
    pair: &ModelPair,
    f: &dyn Observable,
    study: &InvariantStudy,
    ctx: ExecCtx,
) -> Result<InvariantReport> {
    let d = pair.dim();
    let lambda_a = estimate_lambda_a(pair.base, study.lambda_samples, study.seed)?.lambda_a;
    let lambda_a_bar =
        estimate_lambda_a(pair.perturbed, study.lambda_samples, study.seed)?.lambda_a;
    let rate = lambda_a.min(lambda_a_bar);
    if rate <= 0.0 {
        return Err(Error::NotErgodic(format!(
            "invariant shift needs contracting pairs, but lambda_A = {lambda_a} and \
             lambda_A_bar = {lambda_a_bar}"
        )));
    }
    let horizon = if study.horizon > 0.0 { study.horizon } else { 5.0 / rate };
    if (-rate * horizon).exp() >= 0.01 {
        return Err(Error::config(
            "invariant.horizon",
            format!(
                "horizon {horizon} leaves e^(-lambda_A T) = {:.4} >= 0.01; the truncated tail is \
                 not negligible",
                (-rate * horizon).exp()
            ),
        ));
    }
    if study.time_nodes == 0 {
        return Err(Error::config("invariant.time_nodes", "need at least one interval"));
    }
    let q = study.time_nodes;
    let dt = horizon / q as f64;
    let burn_steps = (study.burn_in * study.steps_per_unit as f64).ceil().max(1.0) as usize;
    let x0 = vec![0.0; d];
    let pair = *pair;

    let outer = ctx.run_paths(study.outer_samples, |jdx| -> Result<Option<f64>> {
        let burn_grid = BrownianGrid::sample(
            study.seed,
            derive_stream_id(&[tag::EQUILIBRIUM, jdx as u64]),
            0.0,
            study.burn_in,
            burn_steps,
            pair.noise_dim(),
        )?;
        let warm = integrate_flow(pair.perturbed, &burn_grid, &x0)?;
        if warm.exploded.is_some() {
            return Ok(None);
        }
        let y = warm.last().to_vec();
        let mut engine = WeightEngine::new(pair.base, study.phi, study.eig_floor, true)?;
        let mut scratch = PairScratch::new(&pair);
        scratch.eval(&pair, 0.0, &y);
        let mut grad = vec![0.0; d];
        let mut hess = vec![0.0; d * d];
        let mut acc = 0.0;
        for qi in 0..=q {
            let tq = qi as f64 * dt;
            if qi == 0 {
                f.gradient(&y, &mut grad);
                f.hessian(&y, &mut hess);
            } else {
                let steps = ((tq * study.steps_per_unit as f64).round() as usize).max(1);
                if !inner_derivatives(
                    &pair,
                    f,
                    0.0,
                    tq,
                    &y,
                    steps,
                    study.inner_paths,
                    study.seed,
                    &[tag::NESTED, INVARIANT_INNER, jdx as u64, qi as u64],
                    &mut engine,
                    &mut grad,
                    &mut hess,
                )? {
                    return Ok(None);
                }
            }
            let w = if qi == 0 || qi == q { 0.5 } else { 1.0 };
            let drift: f64 = (0..d).map(|i| grad[i] * scratch.delta_b[i]).sum();
            let diffusion: f64 =
                0.5 * (0..d * d).map(|i| hess[i] * scratch.delta_a[i]).sum::<f64>();
            acc += w * dt * (drift + diffusion);
        }
        Ok(Some(acc))
    });
    let mut values = Vec::with_capacity(study.outer_samples);
    for o in outer {
        if let Some(v) = o? {
            values.push(v);
        }
    }
    if values.is_empty() {
        return Err(Error::AllDiverged(study.outer_samples));
    }
    let (value, stderr) = mean_and_stderr(&values);
    Ok(InvariantReport {
        value,
        stderr,
        horizon,
        lambda_a,
        lambda_a_bar,
        outer_samples: values.len(),
        seed: study.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{Coordinate, Square};
    use crate::model::{Gbm1d, ModelPair, Ou};

    fn small_study(seed: u64) -> SemigroupStudy {
        SemigroupStudy {
            outer_paths: 64,
            inner_paths: 64,
            steps: 32,
            quad_nodes: 4,
            lhs_paths: 1024,
            phi: PhiSpec::Linear,
            eig_floor: 1e-8,
            seed,
        }
    }

    #[test]
    fn identical_pair_gives_exact_zero_on_both_sides() {
        let a = Ou { lambda: 1.0, sigma: 1.0, d: 1 };
        let pair = ModelPair::new(&a, &a).unwrap();
        let mut study = small_study(1);
        study.outer_paths = 4;
        study.inner_paths = 4;
        study.lhs_paths = 8;
        let report =
            semigroup_difference(&pair, &Coordinate(0), 0.0, 1.0, &[1.0], &study, ExecCtx::default())
                .unwrap();
        assert_eq!(report.lhs, 0.0);
        assert_eq!(report.rhs, 0.0);
        assert_eq!(report.gap, 0.0);
    }

    #[test]
    fn drift_only_ou_pair_matches_the_linear_means() {
        // lhs = x (e^{-lambda} - e^{-lambdabar}) exactly; rhs must agree.
        let a = Ou { lambda: 1.0, sigma: 1.0, d: 1 };
        let b = Ou { lambda: 1.5, sigma: 1.0, d: 1 };
        let pair = ModelPair::new(&a, &b).unwrap();
        let report = semigroup_difference(
            &pair,
            &Coordinate(0),
            0.0,
            1.0,
            &[1.0],
            &small_study(3),
            ExecCtx::default(),
        )
        .unwrap();
        let exact = (-1.0f64).exp() - (-1.5f64).exp();
        assert!(
            (report.lhs - exact).abs() < 3.0 * report.lhs_stderr + 0.01,
            "lhs {} vs {exact}",
            report.lhs
        );
        assert!(
            (report.rhs - exact).abs() < 3.0 * report.rhs_stderr + 0.02,
            "rhs {} vs {exact} (se {})",
            report.rhs,
            report.rhs_stderr
        );
        assert_eq!(report.diffusion_part, 0.0);
        assert!(report.gap.abs() <= 4.0 * report.gap_stderr + 0.02);
    }

    #[test]
    fn square_observable_sides_agree_within_combined_error() {
        let a = Ou { lambda: 1.0, sigma: 1.0, d: 1 };
        let b = Ou { lambda: 1.5, sigma: 0.5, d: 1 };
        let pair = ModelPair::new(&a, &b).unwrap();
        let report = semigroup_difference(
            &pair,
            &Square(0),
            0.0,
            1.0,
            &[1.0],
            &small_study(5),
            ExecCtx::default(),
        )
        .unwrap();
        assert!(
            report.gap.abs() <= 4.0 * report.gap_stderr + 0.03,
            "gap {} vs stderr {}",
            report.gap,
            report.gap_stderr
        );
        assert!(report.diffusion_part != 0.0);
    }

    #[test]
    fn quadrature_must_divide_the_mesh() {
        let a = Ou { lambda: 1.0, sigma: 1.0, d: 1 };
        let pair = ModelPair::new(&a, &a).unwrap();
        let mut study = small_study(1);
        study.quad_nodes = 5;
        assert!(semigroup_difference(
            &pair,
            &Coordinate(0),
            0.0,
            1.0,
            &[1.0],
            &study,
            ExecCtx::default()
        )
        .is_err());
    }

    #[test]
    fn identical_invariant_measures_have_zero_shift() {
        let a = Ou { lambda: 1.0, sigma: 1.0, d: 1 };
        let pair = ModelPair::new(&a, &a).unwrap();
        let study = InvariantStudy {
            outer_samples: 4,
            inner_paths: 4,
            time_nodes: 3,
            steps_per_unit: 8,
            burn_in: 2.0,
            ..InvariantStudy::default()
        };
        let report = invariant_shift(&pair, &Square(0), &study, ExecCtx::default()).unwrap();
        assert_eq!(report.value, 0.0);
        assert_eq!(report.stderr, 0.0);
    }

    #[test]
    fn ou_rate_perturbation_matches_the_gibbs_moments() {
        // Langevin potentials U = lambda y^2 / 2 with unit noise have
        // invariant variance 1/(2 lambda): the shift of E[y^2] from
        // lambda = 1 to 1.5 is 1/2 - 1/3 = 1/6.
        let a = Ou { lambda: 1.0, sigma: 1.0, d: 1 };
        let b = Ou { lambda: 1.5, sigma: 1.0, d: 1 };
        let pair = ModelPair::new(&a, &b).unwrap();
        let study = InvariantStudy {
            outer_samples: 96,
            inner_paths: 96,
            time_nodes: 10,
            steps_per_unit: 16,
            burn_in: 6.0,
            seed: 7,
            ..InvariantStudy::default()
        };
        let report = invariant_shift(&pair, &Square(0), &study, ExecCtx::default()).unwrap();
        let target = 0.5 - 1.0 / 3.0;
        assert!(
            (report.value - target).abs() < 3.0 * report.stderr + 0.02,
            "value {} vs {target} (se {})",
            report.value,
            report.stderr
        );
        assert!((report.horizon - 5.0).abs() < 1e-9);
        assert!((report.lambda_a - 1.0).abs() < 1e-9);
    }

    #[test]
    fn non_contracting_models_are_rejected() {
        let a = Gbm1d { beta: 0.1, alpha: 0.2 };
        let b = Gbm1d { beta: 0.2, alpha: 0.2 };
        let pair = ModelPair::new(&a, &b).unwrap();
        let err = invariant_shift(&pair, &Square(0), &InvariantStudy::default(), ExecCtx::default())
            .unwrap_err();
        assert!(matches!(err, Error::NotErgodic(_)));
    }
}
