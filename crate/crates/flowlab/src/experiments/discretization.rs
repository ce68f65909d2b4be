//! Frozen-drift discretization error against its closed-form bound.
//!
//! For a drift whose Jacobian has uniform log-norm at most -lambda, a bounded
//! drift gradient, <x, b(x)> <= -beta ||x||^2, and a constant diffusion of
//! norm sigma, the scheme that freezes the drift argument over intervals of
//! width H satisfies, uniformly in t,
//!
//!   E[ ||X^H_t - X_t||^n ]^{1/n}
//!     <= ||grad b|| ( [||b(0)|| + m_n ||grad b||] H + sigma sqrt(H) ) / lambda
//!
//! where m_n = sup over H and t of E[||X^H_t||^n]^{1/n}. The study measures
//! the left side by common-noise coupling against a fine reference flow,
//! evaluates the right side with m_n replaced by the run's own supremum of
//! moment estimates over its coarse time grid, and fits the error-vs-H
//! log-log slope; theory puts the order between 1/2 (the sqrt(H) noise term,
//! dominant for sigma > 0) and 1.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{config_digest, ExperimentResult, SlopeRecord, Table, VerdictRecord};
use crate::linalg::spectral_norm;
use crate::mc::{ExecCtx, PathOutcome};
use crate::model::{eval_derivatives, Dynamics, ModelSpec};
use crate::paths::{integrate_flow, integrate_frozen_drift, BrownianGrid};
use crate::regularity::{estimate_lambda_a, growth_params_for, kappa_n};
use crate::rng::{substream, tag};
use crate::stats::{loglog_slope, root_moment, root_moment_stderr};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscretizationConfig {
    /// Constant-diffusion contractive model the bound's hypotheses hold for.
    pub model: ModelSpec,
    pub horizon: f64,
    /// Fine reference step; every H must be an integer multiple of it.
    pub fine_h: f64,
    /// Freeze intervals under study.
    pub big_h: Vec<f64>,
    /// Moment order n.
    pub n: u32,
    pub paths: usize,
    pub x0: Vec<f64>,
    pub seed: u64,
    /// Verdict threshold for the fitted error-vs-H slope.
    pub slope_min: f64,
    /// Box samples for the gradient and log-norm scans.
    pub scan_samples: usize,
}

impl Default for DiscretizationConfig {
    fn default() -> Self {
        DiscretizationConfig {
            model: ModelSpec::LangevinTanh { d: 1, sigma: 1.0, tanh_weight: 1.0 },
            horizon: 5.0,
            fine_h: 0.005,
            big_h: vec![0.2, 0.1, 0.05, 0.025],
            n: 2,
            paths: 2048,
            x0: vec![1.0],
            seed: 1,
            slope_min: 0.4,
            scan_samples: 256,
        }
    }
}

/// Sup of the drift-gradient spectral norm over the model's sampling box
/// (midpoint, corners, uniform draws, plus the origin and the start point).
fn sup_grad_b_norm(
    model: &dyn Dynamics,
    x0: &[f64],
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let meta = model.meta();
    let d = model.dim();
    let mut points: Vec<Vec<f64>> = vec![
        vec![0.0; d],
        x0.to_vec(),
        meta.box_lo.iter().zip(&meta.box_hi).map(|(lo, hi)| 0.5 * (lo + hi)).collect(),
    ];
    let mut rng = substream(seed, &[tag::SAMPLE_BOX, 1]);
    use rand::Rng;
    for _ in 0..samples {
        points.push(
            meta.box_lo
                .iter()
                .zip(&meta.box_hi)
                .map(|(lo, hi)| lo + (hi - lo) * rng.gen::<f64>())
                .collect(),
        );
    }
    if d <= 10 {
        for mask in 0..(1usize << d) {
            points.push(
                (0..d)
                    .map(|i| if mask & (1 << i) != 0 { meta.box_hi[i] } else { meta.box_lo[i] })
                    .collect(),
            );
        }
    }
    let mut sup = 0.0f64;
    for x in &points {
        let bundle = eval_derivatives(model, 0.0, x)?;
        sup = sup.max(spectral_norm(&bundle.grad_b, d, d));
    }
    Ok(sup)
}

struct PathSample {
    /// ||X^H_t - X_t||^n at the horizon, one entry per H.
    errors_n: Vec<f64>,
    /// ||state||^n at the moment-scan nodes, reference scheme first, then
    /// one block per H, all flattened.
    moments_n: Vec<f64>,
}

pub fn run_discretization_bound(
    cfg: &DiscretizationConfig,
    ctx: ExecCtx,
) -> Result<ExperimentResult> {
    let started = Instant::now();
    let digest = config_digest(cfg);
    let model = cfg.model.build();
    let d = model.dim();
    let r = model.noise_dim();
    if cfg.x0.len() != d {
        return Err(Error::config("x0", format!("expected {d} entries, got {}", cfg.x0.len())));
    }
    if cfg.big_h.is_empty() {
        return Err(Error::config("mesh.H", "need at least one freeze interval"));
    }
    if cfg.n < 1 {
        return Err(Error::config("moment.n", "moment order must be at least 1"));
    }
    if cfg.paths < 2 {
        return Err(Error::config("mc.paths", "need at least two paths for a standard error"));
    }
    let fine_steps = (cfg.horizon / cfg.fine_h).round() as usize;
    if fine_steps == 0
        || (fine_steps as f64 * cfg.fine_h - cfg.horizon).abs() > 1e-9 * cfg.horizon.abs()
    {
        return Err(Error::config("mesh.h", "horizon is not an integer multiple of fine_h"));
    }
    for (i, &h) in cfg.big_h.iter().enumerate() {
        let ratio = h / cfg.fine_h;
        if ratio.round() < 1.0 || (ratio - ratio.round()).abs() > 1e-9 * ratio {
            return Err(Error::config(
                "mesh.H",
                format!("H[{i}] = {h} is not an integer multiple of fine_h = {}", cfg.fine_h),
            ));
        }
    }

    // Hypothesis checks. Constant diffusion and lambda > 0 are exactly what
    // the bound's right side needs; beta > 0 is the growth hypothesis behind
    // the finiteness of m_n.
    let meta = model.meta();
    if !meta.constant_diffusion {
        return Err(Error::config("model", "the discretization bound needs constant diffusion"));
    }
    let scan = estimate_lambda_a(model.as_ref(), cfg.scan_samples, cfg.seed)?;
    let lambda = scan.lambda_a;
    if lambda <= 0.0 {
        return Err(Error::config(
            "model",
            format!("drift log-norm bound -lambda = {} is not negative", -lambda),
        ));
    }
    let growth = growth_params_for(model.as_ref()).ok_or_else(|| {
        Error::config("model", "no growth parameters known; cannot verify <x,b(x)> <= -beta|x|^2")
    })?;
    if growth.beta2 <= 0.0 {
        return Err(Error::config(
            "model",
            format!("radial drift coefficient beta = {} is not positive", growth.beta2),
        ));
    }
    let grad_norm = sup_grad_b_norm(model.as_ref(), &cfg.x0, cfg.scan_samples, cfg.seed)?;
    let origin = eval_derivatives(model.as_ref(), 0.0, &vec![0.0; d])?;
    let b0_norm = origin.b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let sigma_norm = spectral_norm(&origin.sigma, d, r);

    // Moment-scan nodes: the union of the coarse grids, i.e. multiples of the
    // smallest H, plus the final node.
    let h_min = cfg.big_h.iter().cloned().fold(f64::INFINITY, f64::min);
    let stride_m = (h_min / cfg.fine_h).round() as usize;
    let mut m_nodes: Vec<usize> = (0..=fine_steps / stride_m).map(|k| k * stride_m).collect();
    if *m_nodes.last().unwrap() != fine_steps {
        m_nodes.push(fine_steps);
    }
    let schemes = 1 + cfg.big_h.len();

    let norm_pow = |x: &[f64], n: u32| -> f64 {
        let s: f64 = x.iter().map(|v| v * v).sum();
        s.sqrt().powi(n as i32)
    };

    let model_ref: &dyn Dynamics = model.as_ref();
    let m_nodes_ref = &m_nodes;
    let outcomes = ctx.run_paths(cfg.paths, |p| -> Result<PathOutcome<PathSample>> {
        let grid = BrownianGrid::sample(cfg.seed, p as u64, 0.0, cfg.horizon, fine_steps, r)?;
        let reference = integrate_flow(model_ref, &grid, &cfg.x0)?;
        if !reference.is_finite() {
            return Ok(PathOutcome::Diverged);
        }
        let mut errors_n = Vec::with_capacity(cfg.big_h.len());
        let mut moments_n = Vec::with_capacity(schemes * m_nodes_ref.len());
        for &k in m_nodes_ref {
            moments_n.push(norm_pow(reference.state(k), cfg.n));
        }
        for &h in &cfg.big_h {
            let coarse = integrate_frozen_drift(model_ref, &grid, &cfg.x0, h)?;
            if !coarse.is_finite() {
                return Ok(PathOutcome::Diverged);
            }
            let diff: Vec<f64> =
                coarse.last().iter().zip(reference.last()).map(|(a, b)| a - b).collect();
            errors_n.push(norm_pow(&diff, cfg.n));
            for &k in m_nodes_ref {
                moments_n.push(norm_pow(coarse.state(k), cfg.n));
            }
        }
        Ok(PathOutcome::Ok(PathSample { errors_n, moments_n }))
    });
    let mut samples = Vec::with_capacity(cfg.paths);
    let mut diverged = 0usize;
    for outcome in outcomes {
        match outcome? {
            PathOutcome::Ok(s) => samples.push(s),
            PathOutcome::Diverged => diverged += 1,
        }
    }
    if samples.is_empty() {
        return Err(Error::AllDiverged(diverged));
    }
    let m = samples.len() as f64;

    // Raw-moment mean and stderr in fixed reduction order, one slot at a time.
    let mut column = vec![0.0; samples.len()];
    let mut raw_stats = |extract: &dyn Fn(&PathSample) -> f64| -> (f64, f64) {
        for (slot, s) in column.iter_mut().zip(&samples) {
            *slot = extract(s);
        }
        let mean = ctx.reduce_sum(&column) / m;
        let sq: Vec<f64> = column.iter().map(|v| (v - mean) * (v - mean)).collect();
        let var = ctx.reduce_sum(&sq) / (m - 1.0).max(1.0);
        (mean, (var / m).sqrt())
    };

    // m_n: supremum over schemes and scan nodes of the moment estimates.
    let mut m_hat = 0.0f64;
    let mut m_hat_se = 0.0f64;
    for slot in 0..schemes * m_nodes.len() {
        let (raw, raw_se) = raw_stats(&|s: &PathSample| s.moments_n[slot]);
        let value = root_moment(raw, cfg.n);
        if value > m_hat {
            m_hat = value;
            m_hat_se = root_moment_stderr(raw, raw_se, cfg.n);
        }
    }

    let x0_norm = cfg.x0.iter().map(|v| v * v).sum::<f64>().sqrt();
    let bound_at = |h: f64| -> f64 {
        grad_norm * ((b0_norm + m_hat * grad_norm) * h + sigma_norm * h.sqrt()) / lambda
    };

    let mut error_table = Table::new("error");
    for (i, &h) in cfg.big_h.iter().enumerate() {
        let (raw, raw_se) = raw_stats(&|s: &PathSample| s.errors_n[i]);
        let measured = root_moment(raw, cfg.n);
        let stderr = root_moment_stderr(raw, raw_se, cfg.n);
        error_table.push(h, measured, bound_at(h), stderr);
    }

    let mut moment_table = Table::new("moment-sup");
    let kappa_bound = kappa_n(&growth, cfg.n).map(|k| k.kappa_n * (1.0 + x0_norm));
    if let Ok(kb) = kappa_bound {
        moment_table.push(cfg.n as f64, m_hat, kb, m_hat_se);
    }

    let mut verdicts = Vec::new();
    let worst = error_table
        .rows
        .iter()
        .map(|row| row.measured / row.bound)
        .fold(0.0f64, f64::max);
    verdicts.push(VerdictRecord::new(
        "bound-holds-at-every-H",
        error_table.rows.iter().all(|row| row.measured <= row.bound),
        format!("worst measured/bound ratio {worst:.4} over {} H values", cfg.big_h.len()),
    ));

    // Rows at the integrator floor (exactly zero error) carry no slope
    // information; with fewer than two informative rows the check is vacuous.
    let positive: Vec<(f64, f64)> = error_table
        .rows
        .iter()
        .filter(|row| row.measured > 0.0)
        .map(|row| (row.parameter, row.measured))
        .collect();
    let mut slopes = Vec::new();
    if positive.len() >= 2 {
        let xs: Vec<f64> = positive.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = positive.iter().map(|p| p.1).collect();
        let fit = loglog_slope(&xs, &ys);
        verdicts.push(VerdictRecord::new(
            "error-slope",
            fit.slope >= cfg.slope_min,
            format!("fitted slope {:.3} (se {:.3}) >= {}", fit.slope, fit.slope_stderr, cfg.slope_min),
        ));
        slopes.push(SlopeRecord {
            name: "error-vs-H".into(),
            slope: fit.slope,
            stderr: fit.slope_stderr,
            target: cfg.slope_min,
            tolerance: 0.0,
        });
    } else {
        verdicts.push(VerdictRecord::new(
            "error-slope",
            true,
            "fit skipped: error at the integrator floor".into(),
        ));
    }
    if diverged > 0 {
        verdicts.push(VerdictRecord::new(
            "no-divergence",
            false,
            format!("{diverged} of {} paths diverged", cfg.paths),
        ));
    }

    Ok(ExperimentResult::assemble(
        "discretization-bound",
        digest,
        vec![error_table, moment_table],
        slopes,
        verdicts,
        started,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reduced() -> DiscretizationConfig {
        // 0.0125 divides the horizon and every coarse step in big_h.
        DiscretizationConfig {
            fine_h: 0.0125,
            paths: 256,
            scan_samples: 64,
            ..DiscretizationConfig::default()
        }
    }

    #[test]
    fn bound_holds_and_slope_is_diffusive() {
        let result = run_discretization_bound(&reduced(), ExecCtx::fixed(1)).unwrap();
        assert!(result.passed, "verdicts: {:?}", result.verdicts);
        let error = &result.tables[0];
        for row in &error.rows {
            assert!(row.measured <= row.bound, "H={} {} > {}", row.parameter, row.measured, row.bound);
            assert!(row.measured > 0.0);
        }
        // Between sqrt(H) (diffusion-dominated) and H (drift-freeze
        // dominated) with some curvature allowance above 1.
        let slope = &result.slopes[0];
        assert!(slope.slope >= 0.4 && slope.slope <= 1.5, "slope {}", slope.slope);
    }

    #[test]
    fn deterministic_linear_case_hits_integrator_floor() {
        // sigma = 0 and tanh_weight = 0 make the dynamics linear and
        // deterministic; with H equal to the fine step the frozen-drift
        // scheme IS the reference Euler scheme, so the error vanishes.
        let cfg = DiscretizationConfig {
            model: ModelSpec::LangevinTanh { d: 1, sigma: 0.0, tanh_weight: 0.0 },
            big_h: vec![0.1, 0.01],
            fine_h: 0.01,
            paths: 8,
            scan_samples: 16,
            ..DiscretizationConfig::default()
        };
        let result = run_discretization_bound(&cfg, ExecCtx::fixed(1)).unwrap();
        let rows = &result.tables[0].rows;
        assert!(rows[0].measured > 0.0, "coarse freeze must show O(H) drift error");
        assert_eq!(rows[1].measured, 0.0, "H = fine_h reproduces Euler exactly");
        assert!(result.passed, "verdicts: {:?}", result.verdicts);
    }

    #[test]
    fn moment_sup_row_sits_below_growth_bound() {
        let result = run_discretization_bound(&reduced(), ExecCtx::fixed(1)).unwrap();
        let row = &result.tables[1].rows[0];
        assert!(row.measured > 0.0 && row.measured <= row.bound);
    }

    #[test]
    fn rejects_nonconstant_diffusion() {
        let cfg = DiscretizationConfig {
            model: ModelSpec::Gbm { beta: -1.0, alpha: 0.2 },
            x0: vec![1.0],
            ..reduced()
        };
        let err = run_discretization_bound(&cfg, ExecCtx::fixed(1)).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn rejects_noncommensurate_mesh() {
        let cfg = DiscretizationConfig { big_h: vec![0.015], ..reduced() };
        let err = run_discretization_bound(&cfg, ExecCtx::fixed(1)).unwrap_err();
        match err {
            Error::Config { field, .. } => assert_eq!(field, "mesh.H"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn deterministic_in_seed_and_threads() {
        let a = run_discretization_bound(&reduced(), ExecCtx::fixed(1)).unwrap();
        let b = run_discretization_bound(&reduced(), ExecCtx::fixed(4)).unwrap();
        for (ta, tb) in a.tables.iter().zip(&b.tables) {
            for (ra, rb) in ta.rows.iter().zip(&tb.rows) {
                assert_eq!(ra.measured.to_bits(), rb.measured.to_bits());
                assert_eq!(ra.stderr.to_bits(), rb.stderr.to_bits());
            }
        }
        assert_eq!(a.config_digest, b.config_digest);
    }
}
