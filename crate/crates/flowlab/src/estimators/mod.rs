//! Monte Carlo moment engine and semigroup-level estimators.
//!
//! The moment engine turns any per-path functional into an L_n estimate
//! E[|.|^n]^{1/n} with a delta-method standard error. On top of it sit the
//! common-noise coupled flow-difference moments, the Bismut-Elworthy-Li
//! gradient and Hessian estimators ([`bel`]), and the nested semigroup
//! difference and invariant-shift estimators ([`semigroup`]).

mod bel;
mod semigroup;

pub use bel::{
    bel_gradient, bel_hessian, bel_hessian_split, BelStudy, MatrixEstimate, PhiSpec,
    VectorEstimate,
};
pub use semigroup::{
    invariant_shift, semigroup_difference, InvariantReport, InvariantStudy, SemigroupReport,
    SemigroupStudy,
};

use crate::linalg::{euclidean_norm, midx};
use crate::mc::{ExecCtx, PathOutcome};
use crate::model::ModelPair;
use crate::paths::{integrate_flow, sample_brownian};
use crate::stats::{root_moment, root_moment_stderr};
use crate::{Error, Result};
use serde::Serialize;

/// A scalar observable with optional derivatives. Estimators state which
/// derivatives they consume; the provided catalog implements all of them.
pub trait Observable: Sync {
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64], out: &mut [f64]);
    /// Row-major d x d second derivative.
    fn hessian(&self, x: &[f64], out: &mut [f64]);
}

/// f(y) = y_i.
pub struct Coordinate(pub usize);

impl Observable for Coordinate {
    fn value(&self, x: &[f64]) -> f64 {
        x[self.0]
    }
    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let _ = x;
        out[self.0] = 1.0;
    }
    fn hessian(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// f(y) = y_i^2.
pub struct Square(pub usize);

impl Observable for Square {
    fn value(&self, x: &[f64]) -> f64 {
        x[self.0] * x[self.0]
    }
    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        out[self.0] = 2.0 * x[self.0];
    }
    fn hessian(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let d = x.len();
        out[midx(self.0, self.0, d)] = 2.0;
    }
}

/// f(y) = |y|^2.
pub struct SquaredNorm;

impl Observable for SquaredNorm {
    fn value(&self, x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }
    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        for (o, v) in out.iter_mut().zip(x) {
            *o = 2.0 * v;
        }
    }
    fn hessian(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let d = x.len();
        for i in 0..d {
            out[midx(i, i, d)] = 2.0;
        }
    }
}

/// f(y) = c.
pub struct Constant(pub f64);

impl Observable for Constant {
    fn value(&self, _x: &[f64]) -> f64 {
        self.0
    }
    fn gradient(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn hessian(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// f(y) = cos(y_i): bounded with bounded derivatives.
pub struct CosineCoord(pub usize);

impl Observable for CosineCoord {
    fn value(&self, x: &[f64]) -> f64 {
        x[self.0].cos()
    }
    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        out[self.0] = -x[self.0].sin();
    }
    fn hessian(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let d = x.len();
        out[midx(self.0, self.0, d)] = -x[self.0].cos();
    }
}

/// Parse an observable name: `coord:i`, `square:i`, `cos:i`, `norm2`,
/// `const:c`. Returns a boxed trait object for CLI plumbing.
pub fn builtin_observable(spec: &str) -> Result<Box<dyn Observable>> {
    let err = || {
        Error::config(
            "observable",
            format!("unknown observable {spec:?}; expected coord:i, square:i, cos:i, norm2, const:c"),
        )
    };
    if spec == "norm2" {
        return Ok(Box::new(SquaredNorm));
    }
    let (kind, arg) = spec.split_once(':').ok_or_else(err)?;
    match kind {
        "coord" => Ok(Box::new(Coordinate(arg.parse().map_err(|_| err())?))),
        "square" => Ok(Box::new(Square(arg.parse().map_err(|_| err())?))),
        "cos" => Ok(Box::new(CosineCoord(arg.parse().map_err(|_| err())?))),
        "const" => Ok(Box::new(Constant(arg.parse().map_err(|_| err())?))),
        _ => Err(err()),
    }
}

/// An L_n norm estimate E[|.|^n]^{1/n} with delta-method error bars.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MomentEstimate {
    pub order: u32,
    /// raw_mean^{1/n}, exactly.
    pub value: f64,
    /// Monte Carlo mean of the n-th powers.
    pub raw_mean: f64,
    /// Delta-method standard error of `value`.
    pub stderr: f64,
    /// Paths that survived (divergent paths are dropped).
    pub samples: usize,
    pub seed: u64,
}

/// Estimate E[|F|^n]^{1/n} over `paths` independent evaluations of the
/// path functional. The functional owns its randomness: it must derive all
/// noise from (its own captured seed, the path index), which is what makes
/// the estimate reproducible and thread-count independent.
pub fn moment_estimate<F>(
    sampler: F,
    n: u32,
    paths: usize,
    master_seed: u64,
    ctx: ExecCtx,
) -> Result<MomentEstimate>
where
    F: Fn(u64) -> Result<PathOutcome<f64>> + Sync + Send,
{
    if n < 1 {
        return Err(Error::config("moment.order", "order must be at least 1"));
    }
    if paths < 2 {
        return Err(Error::config("mc.paths", "need at least two paths"));
    }
    let outcomes = ctx.run_paths(paths, |p| sampler(p as u64));
    let mut powered = Vec::with_capacity(paths);
    let mut diverged = 0usize;
    for outcome in outcomes {
        match outcome? {
            PathOutcome::Ok(v) => powered.push(v.abs().powi(n as i32)),
            PathOutcome::Diverged => diverged += 1,
        }
    }
    if powered.is_empty() {
        return Err(Error::AllDiverged(diverged));
    }
    let m = powered.len() as f64;
    let raw_mean = ctx.reduce_sum(&powered) / m;
    let raw_stderr = if powered.len() == 1 {
        0.0
    } else {
        let centered: Vec<f64> = powered.iter().map(|v| (v - raw_mean) * (v - raw_mean)).collect();
        (ctx.reduce_sum(&centered) / (m - 1.0) / m).sqrt()
    };
    Ok(MomentEstimate {
        order: n,
        value: root_moment(raw_mean, n),
        raw_mean,
        stderr: root_moment_stderr(raw_mean, raw_stderr, n),
        samples: powered.len(),
        seed: master_seed,
    })
}

/// E[|X_{s,t}(x) - Xbar_{s,t}(x)|^n]^{1/n} under the common-noise coupling:
/// both flows are driven by the same Brownian grid per path, so the estimate
/// dominates the Wasserstein-n distance of the time-t laws.
pub fn flow_difference_moments(
    pair: &ModelPair,
    s: f64,
    t: f64,
    x: &[f64],
    n: u32,
    steps: usize,
    paths: usize,
    master_seed: u64,
    ctx: ExecCtx,
) -> Result<MomentEstimate> {
    let pair = *pair;
    let x = x.to_vec();
    moment_estimate(
        move |p| {
            let grid = sample_brownian(master_seed, p, s, t, steps, pair.noise_dim())?;
            let a = integrate_flow(pair.base, &grid, &x)?;
            let b = integrate_flow(pair.perturbed, &grid, &x)?;
            if a.exploded.is_some() || b.exploded.is_some() {
                return Ok(PathOutcome::Diverged);
            }
            let diff: Vec<f64> = a.last().iter().zip(b.last()).map(|(u, v)| u - v).collect();
            Ok(PathOutcome::Ok(euclidean_norm(&diff)))
        },
        n,
        paths,
        master_seed,
        ctx,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Gbm1d, Ou};
    use crate::variance_oracle::LinearOracle;
    use approx::assert_relative_eq;

    #[test]
    fn constant_functional_has_exact_value_and_zero_stderr() {
        let est = moment_estimate(
            |_p| Ok(PathOutcome::Ok(-3.0)),
            2,
            64,
            7,
            ExecCtx::default(),
        )
        .unwrap();
        assert_relative_eq!(est.value, 3.0, epsilon = 1e-12);
        assert_eq!(est.stderr, 0.0);
        assert_eq!(est.samples, 64);
    }

    #[test]
    fn value_is_the_exact_root_of_the_raw_mean() {
        let est = moment_estimate(
            |p| Ok(PathOutcome::Ok(p as f64 * 0.01)),
            3,
            100,
            1,
            ExecCtx::default(),
        )
        .unwrap();
        assert_eq!(est.value, est.raw_mean.powf(1.0 / 3.0));
    }

    #[test]
    fn all_divergent_paths_is_an_error() {
        let err = moment_estimate(
            |_p| Ok(PathOutcome::<f64>::Diverged),
            1,
            8,
            1,
            ExecCtx::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::AllDiverged(8)));
    }

    #[test]
    fn lyapunov_ordering_on_shared_samples() {
        let sampler = |p: u64| Ok(PathOutcome::Ok(((p * 2654435761) % 97) as f64 / 97.0 + 0.1));
        let m1 = moment_estimate(sampler, 1, 512, 3, ExecCtx::default()).unwrap();
        let m2 = moment_estimate(sampler, 2, 512, 3, ExecCtx::default()).unwrap();
        assert!(m1.value <= m2.value + m1.stderr + m2.stderr);
    }

    #[test]
    fn ou_second_moment_approaches_stationary_value() {
        // E|X_t|^2 -> sigma^2/(2 lambda) = 0.5 for lambda = sigma = 1.
        let model = Ou { lambda: 1.0, sigma: 1.0, d: 1 };
        let ctx = ExecCtx::default();
        let est = moment_estimate(
            move |p| {
                let grid = sample_brownian(5, p, 0.0, 8.0, 512, 1)?;
                let path = integrate_flow(&model, &grid, &[0.0])?;
                if path.exploded.is_some() {
                    return Ok(PathOutcome::Diverged);
                }
                Ok(PathOutcome::Ok(path.last()[0].abs()))
            },
            2,
            4096,
            5,
            ctx,
        )
        .unwrap();
        let target = 0.5f64.sqrt();
        assert!(
            (est.value - target).abs() < 3.0 * est.stderr + 0.02,
            "value {} vs {target} (se {})",
            est.value,
            est.stderr
        );
    }

    #[test]
    fn identical_pair_difference_is_zero() {
        let a = Ou { lambda: 1.0, sigma: 1.0, d: 2 };
        let pair = ModelPair::new(&a, &a).unwrap();
        let est =
            flow_difference_moments(&pair, 0.0, 1.0, &[1.0, 2.0], 2, 32, 16, 1, ExecCtx::default())
                .unwrap();
        assert_eq!(est.value, 0.0);
    }

    #[test]
    fn diffusion_only_ou_difference_matches_the_oracle_plateau() {
        // lambda = lambdabar = 1, sigma 1 vs 0.5: stationary second moment of
        // the difference is (delta sigma)^2/(2 lambda) = 0.125.
        let a = Ou { lambda: 1.0, sigma: 1.0, d: 1 };
        let b = Ou { lambda: 1.0, sigma: 0.5, d: 1 };
        let pair = ModelPair::new(&a, &b).unwrap();
        let est =
            flow_difference_moments(&pair, 0.0, 8.0, &[1.0], 2, 1024, 2048, 9, ExecCtx::default())
                .unwrap();
        let target = 0.125f64.sqrt();
        assert!(
            (est.value - target).abs() < 3.0 * est.stderr + 0.01,
            "value {} vs {target}",
            est.value
        );
        let oracle = LinearOracle::Ou { lambda: 1.0, sigma: 1.0, d: 1 };
        let partner = LinearOracle::Ou { lambda: 1.0, sigma: 0.5, d: 1 };
        let exact =
            crate::variance_oracle::oracle_difference_moment(&oracle, &partner, 2, 0.0, 8.0, &[1.0])
                .unwrap();
        assert!((est.value - exact).abs() < 3.0 * est.stderr + 0.01);
    }

    #[test]
    fn gbm_difference_sampler_reports_divergences_not_errors() {
        // An explosive GBM pair: beta > 0 grows but stays finite over short
        // horizons, so this mostly checks the plumbing accepts the model.
        let a = Gbm1d { beta: 0.1, alpha: 0.2 };
        let b = Gbm1d { beta: 0.1, alpha: 0.1 };
        let pair = ModelPair::new(&a, &b).unwrap();
        let est = flow_difference_moments(&pair, 0.0, 1.0, &[1.0], 2, 64, 64, 2, ExecCtx::default())
            .unwrap();
        assert!(est.value > 0.0 && est.value.is_finite());
    }

    #[test]
    fn observable_catalog_derivatives_are_consistent() {
        let obs = builtin_observable("square:1").unwrap();
        let x = [0.5, -2.0, 1.0];
        assert_relative_eq!(obs.value(&x), 4.0);
        let mut g = [0.0; 3];
        obs.gradient(&x, &mut g);
        assert_eq!(g, [0.0, -4.0, 0.0]);
        let mut h = [0.0; 9];
        obs.hessian(&x, &mut h);
        assert_eq!(h[midx(1, 1, 3)], 2.0);
        assert!(builtin_observable("bogus").is_err());
        assert!(builtin_observable("coord:x").is_err());
        let c = builtin_observable("const:2.5").unwrap();
        assert_eq!(c.value(&x), 2.5);
    }

    #[test]
    fn fixed_order_estimates_are_thread_count_invariant() {
        let model = Ou { lambda: 1.0, sigma: 1.0, d: 1 };
        let run = |threads: usize| {
            moment_estimate(
                move |p| {
                    let grid = sample_brownian(11, p, 0.0, 1.0, 64, 1)?;
                    let path = integrate_flow(&model, &grid, &[1.0])?;
                    Ok(PathOutcome::Ok(path.last()[0].abs()))
                },
                2,
                256,
                11,
                ExecCtx::fixed(threads),
            )
            .unwrap()
        };
        let one = run(1);
        let four = run(4);
        assert_eq!(one.value.to_bits(), four.value.to_bits());
        assert_eq!(one.stderr.to_bits(), four.stderr.to_bits());
    }
}
