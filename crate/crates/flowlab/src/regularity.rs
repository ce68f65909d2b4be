//! Spectral contraction and polynomial-growth diagnostics.
//!
//! The central object is A(t,x) = grad b + (grad b)' + sum_k (grad sigma_k)(grad sigma_k)',
//! whose uniform negative log-norm certifies exponential contraction of the
//! tangent flow: lambda_A = -sup_x lambda_max(A)/2. The n-th moment rate is
//! lambda_A(n) = lambda_A - d (n-2) rho_*^2 / 2 with rho_* the uniform
//! spectral size of grad sigma. Growth parameters (alpha_i, beta_i) feed the
//! moment constant kappa_n; beta_2(n) = beta_2 - (n-1) alpha_2 / 2 must stay
//! positive for the n-th moment bound to hold.
//!
//! All suprema here are empirical certificates over a sampled box plus its
//! corners, not proofs; catalog models have constant or monotone spectra so
//! the scan is exact for them.

use crate::linalg::{frobenius_norm, spectral_norm, sym_part_lambda_max};
use crate::model::{Dynamics, EvalBundle, Order};
use crate::rng::{substream, tag};
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Polynomial growth parameters: ||sigma(x)||_F^2 <= alpha0 + alpha1 ||x|| + alpha2 ||x||^2
/// and <x, b(x)> <= beta0 + beta1 ||x|| - beta2 ||x||^2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthParams {
    pub alpha0: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta0: f64,
    pub beta1: f64,
    pub beta2: f64,
}

/// beta_2(n) and the moment constant kappa_n.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaBreakdown {
    pub beta2_n: f64,
    pub kappa_n: f64,
}

/// kappa_n = 1 + [(gamma1 + (n-2) alpha1) + (gamma0 + (n-2) alpha0)^{1/2}] / (2 beta_2(n)^{1/2})
/// with gamma0 = alpha0 + 2 beta0 and gamma1 = alpha1 + 2 beta1; fails when
/// beta_2(n) <= 0, which is exactly the violated moment condition.
pub fn kappa_n(params: &GrowthParams, n: u32) -> Result<KappaBreakdown> {
    let nf = n as f64;
    let beta2_n = params.beta2 - (nf - 1.0) * params.alpha2 / 2.0;
    if beta2_n <= 0.0 {
        return Err(Error::MomentConditionFails { n, value: beta2_n });
    }
    let gamma0 = params.alpha0 + 2.0 * params.beta0;
    let gamma1 = params.alpha1 + 2.0 * params.beta1;
    let num = (gamma1 + (nf - 2.0) * params.alpha1) + (gamma0 + (nf - 2.0) * params.alpha0).sqrt();
    Ok(KappaBreakdown { beta2_n, kappa_n: 1.0 + num / (2.0 * beta2_n.sqrt()) })
}

/// n-th moment contraction rate.
pub fn lambda_a_n(lambda_a: f64, n: u32, d: usize, rho_star: f64) -> f64 {
    lambda_a - d as f64 * (n as f64 - 2.0) * rho_star * rho_star / 2.0
}

/// A(t,x), built symmetric entry by entry (the (i,j) and (j,i) expressions
/// are identical floating-point operations, so the output equals its own
/// transpose bitwise).
pub fn log_norm_matrix(model: &dyn Dynamics, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    let (d, r) = (model.dim(), model.noise_dim());
    if x.len() != d {
        return Err(Error::DimensionMismatch(format!(
            "state has {} entries, model dim is {d}",
            x.len()
        )));
    }
    let mut bundle = EvalBundle::for_order(d, r, Order::Tangent);
    model.eval(t, x, Order::Tangent, &mut bundle);
    let mut a = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut v = bundle.grad_b[i * d + j] + bundle.grad_b[j * d + i];
            for k in 0..r {
                let gs = bundle.grad_sigma_col(k);
                for m in 0..d {
                    v += gs[i * d + m] * gs[j * d + m];
                }
            }
            a[i * d + j] = v;
        }
    }
    Ok(a)
}

/// Empirical spectral scan over the model's box: uniform samples plus the box
/// corners (corners are skipped above 10 dimensions, where they stop being
/// enumerable). Returns the contraction estimate and the norms feeding chi.
#[derive(Debug, Clone, Serialize)]
pub struct SpectralScan {
    pub lambda_a: f64,
    /// Point attaining the largest lambda_max(A).
    pub argmax: Vec<f64>,
    pub rho_star: f64,
    pub rho_sq: f64,
    pub sup_hess_b: f64,
    pub sup_hess_sigma_sq: f64,
}

pub fn estimate_lambda_a(model: &dyn Dynamics, count: usize, seed: u64) -> Result<SpectralScan> {
    let meta = model.meta();
    let (d, r) = (model.dim(), model.noise_dim());
    let mut rng = substream(seed, &[tag::SAMPLE_BOX]);
    let mut points: Vec<Vec<f64>> = Vec::new();
    points.push(
        meta.box_lo.iter().zip(&meta.box_hi).map(|(lo, hi)| 0.5 * (lo + hi)).collect(),
    );
    for _ in 0..count {
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
    let mut bundle = EvalBundle::for_order(d, r, Order::Hessian);
    let mut best = f64::NEG_INFINITY;
    let mut argmax = points[0].clone();
    let mut rho_star_sq = 0.0f64;
    let mut rho_sq = 0.0f64;
    let mut sup_hess_b = 0.0f64;
    let mut sup_hess_sigma_sq = 0.0f64;
    for x in &points {
        let a = log_norm_matrix(model, 0.0, x)?;
        let top = sym_part_lambda_max(&a, d);
        if top > best {
            best = top;
            argmax = x.clone();
        }
        model.eval(0.0, x, Order::Hessian, &mut bundle);
        let mut spec_sq = 0.0;
        let mut frob_sq = 0.0;
        for k in 0..r {
            let gs = bundle.grad_sigma_col(k);
            let s = spectral_norm(gs, d, d);
            spec_sq += s * s;
            let f = frobenius_norm(gs);
            frob_sq += f * f;
        }
        rho_star_sq = rho_star_sq.max(spec_sq);
        rho_sq = rho_sq.max(frob_sq);
        sup_hess_b = sup_hess_b.max(bundle.hess_b.frobenius_norm());
        let hs_sq: f64 = bundle.hess_sigma.iter().map(|h| h.frobenius_norm().powi(2)).sum();
        sup_hess_sigma_sq = sup_hess_sigma_sq.max(hs_sq);
    }
    Ok(SpectralScan {
        lambda_a: -0.5 * best,
        argmax,
        rho_star: rho_star_sq.sqrt(),
        rho_sq,
        sup_hess_b,
        sup_hess_sigma_sq,
    })
}

/// chi = 1 + sup ||grad^2 b|| + sup ||grad^2 sigma||^2 + rho_*^2, with the
/// unspecified universal constant fixed to 1.
pub fn chi(scan: &SpectralScan) -> f64 {
    1.0 + scan.sup_hess_b + scan.sup_hess_sigma_sq + scan.rho_star * scan.rho_star
}

/// Ando-Hemmen bound ||Delta sigma|| <= ||Delta a|| / sqrt(upsilon) for
/// symmetric square roots of matrices bounded below by upsilon > 0.
pub fn sigma_bound_from_a(a_norm_diff: f64, upsilon: f64) -> Result<f64> {
    if upsilon <= 0.0 {
        return Err(Error::NonPositiveEllipticity(upsilon));
    }
    Ok(a_norm_diff / upsilon.sqrt())
}

/// Flat report of every condition the estimators rely on, for one moment
/// order n.
#[derive(Debug, Clone, Serialize)]
pub struct ConditionReport {
    pub model: String,
    pub n: u32,
    pub lambda_a: f64,
    pub lambda_a_argmax: Vec<f64>,
    pub lambda_a_n: f64,
    pub rho_star: f64,
    pub rho_sq: f64,
    pub chi: f64,
    pub alpha0: Option<f64>,
    pub alpha1: Option<f64>,
    pub alpha2: Option<f64>,
    pub beta0: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub beta2_n: Option<f64>,
    pub kappa_n: Option<f64>,
    /// Spectral condition: lambda_A(n) > 0.
    pub t_n_satisfied: bool,
    /// Growth condition: beta_2(n) > 0 (false when parameters are unknown).
    pub p_n_satisfied: bool,
}

pub fn condition_report(
    model: &dyn Dynamics,
    n: u32,
    growth: Option<GrowthParams>,
    samples: usize,
    seed: u64,
) -> Result<ConditionReport> {
    let scan = estimate_lambda_a(model, samples, seed)?;
    let la_n = lambda_a_n(scan.lambda_a, n, model.dim(), scan.rho_star);
    let kappa = growth.map(|g| kappa_n(&g, n));
    let (beta2_n, kappa_val, p_ok) = match &kappa {
        Some(Ok(k)) => (Some(k.beta2_n), Some(k.kappa_n), true),
        Some(Err(Error::MomentConditionFails { value, .. })) => (Some(*value), None, false),
        Some(Err(_)) | None => (None, None, false),
    };
    Ok(ConditionReport {
        model: model.meta().name,
        n,
        lambda_a: scan.lambda_a,
        lambda_a_argmax: scan.argmax.clone(),
        lambda_a_n: la_n,
        rho_star: scan.rho_star,
        rho_sq: scan.rho_sq,
        chi: chi(&scan),
        alpha0: growth.map(|g| g.alpha0),
        alpha1: growth.map(|g| g.alpha1),
        alpha2: growth.map(|g| g.alpha2),
        beta0: growth.map(|g| g.beta0),
        beta1: growth.map(|g| g.beta1),
        beta2: growth.map(|g| g.beta2),
        beta2_n,
        kappa_n: kappa_val,
        t_n_satisfied: la_n > 0.0,
        p_n_satisfied: p_ok,
    })
}

/// Closed-form growth parameters for the catalog models, keyed by metadata.
/// OU: constant diffusion gives alpha0 = sigma^2 d; <x,b> = -lambda ||x||^2.
/// GBM: alpha2 = alpha^2 and beta2 = -beta (positive only for beta < 0).
/// Langevin-tanh: x tanh(x) >= 0 makes <x,b> <= -||x||^2.
pub fn growth_params_for(model: &dyn Dynamics) -> Option<GrowthParams> {
    let meta = model.meta();
    let get = |key: &str| meta.params.iter().find(|(k, _)| k == key).map(|(_, v)| *v);
    match meta.name.as_str() {
        "ou" => {
            let (lambda, sigma, d) = (get("lambda")?, get("sigma")?, get("d")?);
            Some(GrowthParams {
                alpha0: sigma * sigma * d,
                alpha1: 0.0,
                alpha2: 0.0,
                beta0: 0.0,
                beta1: 0.0,
                beta2: lambda,
            })
        }
        "gbm" => {
            let (beta, alpha) = (get("beta")?, get("alpha")?);
            Some(GrowthParams {
                alpha0: 0.0,
                alpha1: 0.0,
                alpha2: alpha * alpha,
                beta0: 0.0,
                beta1: 0.0,
                beta2: -beta,
            })
        }
        "langevin-tanh" => {
            let (d, sigma) = (get("d")?, get("sigma")?);
            Some(GrowthParams {
                alpha0: sigma * sigma * d,
                alpha1: 0.0,
                alpha2: 0.0,
                beta0: 0.0,
                beta1: 0.0,
                beta2: 1.0,
            })
        }
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Gbm1d, LangevinTanh, Ou};
    use approx::assert_relative_eq;

    #[test]
    fn ou_log_norm_is_minus_two_lambda_identity() {
        let model = Ou { lambda: 1.0, sigma: 1.0, d: 2 };
        let a = log_norm_matrix(&model, 0.0, &[0.3, -0.8]).unwrap();
        assert_eq!(a, vec![-2.0, 0.0, 0.0, -2.0]);
    }

    #[test]
    fn gbm_log_norm_is_scalar_arithmetic() {
        let a = log_norm_matrix(&Gbm1d { beta: 0.1, alpha: 0.2 }, 0.0, &[1.0]).unwrap();
        assert_relative_eq!(a[0], 0.24, max_relative = 1e-14);
        let a = log_norm_matrix(&Gbm1d { beta: -1.0, alpha: 0.2 }, 0.0, &[1.0]).unwrap();
        assert_relative_eq!(a[0], -1.96, max_relative = 1e-14);
    }

    #[test]
    fn langevin_log_norm_at_origin() {
        let a = log_norm_matrix(&LangevinTanh::standard(1), 0.0, &[0.0]).unwrap();
        assert_relative_eq!(a[0], -4.0, max_relative = 1e-14);
    }

    #[test]
    fn ou_lambda_a_is_exact() {
        let scan = estimate_lambda_a(&Ou { lambda: 1.0, sigma: 1.0, d: 2 }, 25, 7).unwrap();
        assert_relative_eq!(scan.lambda_a, 1.0, max_relative = 1e-14);
        assert_eq!(scan.rho_star, 0.0);
    }

    #[test]
    fn gbm_unstable_parameters_fail_the_spectral_condition() {
        let scan = estimate_lambda_a(&Gbm1d { beta: 0.1, alpha: 0.2 }, 25, 7).unwrap();
        assert_relative_eq!(scan.lambda_a, -0.12, max_relative = 1e-12);
        let report =
            condition_report(&Gbm1d { beta: 0.1, alpha: 0.2 }, 2, None, 25, 7).unwrap();
        assert!(!report.t_n_satisfied);
    }

    #[test]
    fn langevin_contraction_is_at_least_one() {
        let scan = estimate_lambda_a(&LangevinTanh::standard(2), 200, 7).unwrap();
        assert!(scan.lambda_a >= 1.0 - 1e-12, "{}", scan.lambda_a);
        // The supremum of lambda_max(A) sits at the largest |x| corners where
        // sech^2 vanishes; on a finite box it stays strictly above 1.
        assert!(scan.lambda_a <= 2.0);
    }

    #[test]
    fn ou_kappa_2_is_frozen() {
        let params = GrowthParams {
            alpha0: 1.0,
            alpha1: 0.0,
            alpha2: 0.0,
            beta0: 0.0,
            beta1: 0.0,
            beta2: 1.0,
        };
        let k = kappa_n(&params, 2).unwrap();
        assert_relative_eq!(k.beta2_n, 1.0, max_relative = 1e-15);
        assert_relative_eq!(k.kappa_n, 1.5, max_relative = 1e-15);
    }

    #[test]
    fn gbm_moment_condition_passes_then_fails() {
        let params = GrowthParams {
            alpha0: 0.0,
            alpha1: 0.0,
            alpha2: 0.04,
            beta0: 0.0,
            beta1: 0.0,
            beta2: 1.0,
        };
        assert_relative_eq!(kappa_n(&params, 2).unwrap().beta2_n, 0.98, max_relative = 1e-14);
        // alpha2 > 2 beta2 / (n-1) flips the sign.
        let bad = GrowthParams { alpha2: 2.1, ..params };
        assert!(matches!(kappa_n(&bad, 2), Err(Error::MomentConditionFails { .. })));
    }

    #[test]
    fn lambda_a_n_is_constant_without_diffusion_gradients() {
        assert_eq!(lambda_a_n(0.9, 2, 3, 0.0), 0.9);
        assert_eq!(lambda_a_n(0.9, 6, 3, 0.0), 0.9);
        assert!(lambda_a_n(0.9, 4, 3, 0.2) < 0.9);
    }

    #[test]
    fn sigma_bound_examples() {
        assert_eq!(sigma_bound_from_a(0.0, 0.25).unwrap(), 0.0);
        assert_relative_eq!(sigma_bound_from_a(0.75, 0.25).unwrap(), 1.5, max_relative = 1e-15);
        assert!(sigma_bound_from_a(1.0, 0.0).is_err());
        // 1d squares 1 vs 0.25 at floor 0.25: bound 1.5 dominates |dsigma| = 0.5.
        assert!(sigma_bound_from_a(0.75, 0.25).unwrap() >= 0.5);
    }

    #[test]
    fn chi_examples() {
        let ou = estimate_lambda_a(&Ou { lambda: 1.0, sigma: 1.0, d: 1 }, 10, 3).unwrap();
        assert_relative_eq!(chi(&ou), 1.0, max_relative = 1e-14);
        let gbm = estimate_lambda_a(&Gbm1d { beta: 0.1, alpha: 0.2 }, 10, 3).unwrap();
        assert_relative_eq!(chi(&gbm), 1.04, max_relative = 1e-12);
    }

    #[test]
    fn report_serializes_flat() {
        let model = Ou { lambda: 1.0, sigma: 1.0, d: 1 };
        let growth = growth_params_for(&model);
        let report = condition_report(&model, 2, growth, 25, 7).unwrap();
        assert!(report.t_n_satisfied && report.p_n_satisfied);
        assert_relative_eq!(report.kappa_n.unwrap(), 1.5, max_relative = 1e-14);
        let json = serde_json::to_value(&report).unwrap();
        assert!(json.as_object().unwrap().contains_key("lambda_a"));
        assert_eq!(json["n"], 2);
    }
}
