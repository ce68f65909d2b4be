//! Forward-backward decomposition of the difference of two flows.
//!
//! For flows X (base) and Xbar (perturbed) driven by the same Brownian path,
//! the difference X_{s,t}(x) - Xbar_{s,t}(x) splits as T + S. On an estimator
//! mesh of width H = stride * h with nodes u_k:
//!
//! ```text
//! T_hat = sum_k [ (grad X_{u_k,t})(ybar_k)' db(ybar_k)
//!               + 1/2 (grad^2 X_{u_k,t})(ybar_k)' da(ybar_k) ] H
//! S_hat = sum_k (grad X_{u_{k+1},t})(ybar_k)' dsigma(ybar_k) (W_{u_{k+1}} - W_{u_k})
//! ```
//!
//! where ybar_k = Xbar_{s,u_k}(x) is evaluated at the left node, the T weights
//! restart at u_k, and the S tangent restarts at the right node u_{k+1}; this
//! right shift is what makes S_hat a discrete Skorohod (two-sided) integral
//! and keeps it exactly centered. The residual lhs - T_hat - S_hat is formed
//! literally, never rearranged.
//!
//! The variance study estimates E S^2 in one dimension through the isometry
//!: a diagonal time integral of E Sigma_u^2 with Sigma_u = (grad X_{u,t})(ybar_u)
//! dsigma(ybar_u), plus a double time integral of Malliavin derivative
//! products; for a constant-sigma base the anticipating correction vanishes
//! and the cross term is pinned to zero.

use crate::linalg::{grad_t_vec, identity};
use crate::mc::ExecCtx;
use crate::model::{Dynamics, ModelPair, Order, PairScratch};
use crate::paths::{
    integrate_flow, sample_brownian, stream_flow, Advance, BrownianGrid, FlowState, StepWorkspace,
};
use crate::stats::{mean_and_stderr, variance_and_stderr};
use crate::{Error, Result};
use serde::Serialize;

/// Fine steps per estimator step for a target estimator width big_h.
pub fn stride_for(grid: &BrownianGrid, big_h: f64) -> Result<usize> {
    let ratio = big_h / grid.h;
    let stride = ratio.round() as usize;
    if stride == 0 || (ratio - stride as f64).abs() > 1e-9 * ratio.abs() {
        return Err(Error::config(
            "mesh.H",
            format!("estimator width {big_h} is not an integer multiple of the step {}", grid.h),
        ));
    }
    check_stride(grid, stride)?;
    Ok(stride)
}

fn check_stride(grid: &BrownianGrid, stride: usize) -> Result<()> {
    if stride == 0 || grid.steps % stride != 0 {
        return Err(Error::config(
            "mesh.H",
            format!("estimator stride {stride} does not divide {} fine steps", grid.steps),
        ));
    }
    Ok(())
}

/// One path's decomposition. The residual is lhs - T_hat - S_hat by
/// definition; `diverged` flags explosion of any involved flow, in which case
/// the vectors are NaN.
#[derive(Debug, Clone, Serialize)]
pub struct DecompositionReport {
    pub lhs: Vec<f64>,
    pub t_hat: Vec<f64>,
    pub s_hat: Vec<f64>,
    pub residual: Vec<f64>,
    pub estimator_steps: usize,
    pub fine_steps: usize,
    pub diverged: bool,
}

fn reset_tangent(state: &mut FlowState, y: &[f64]) {
    state.x.copy_from_slice(y);
    identity(y.len(), state.jac.as_mut().unwrap());
}

fn reset_full(state: &mut FlowState, y: &[f64]) {
    reset_tangent(state, y);
    state.hess.as_mut().unwrap().fill(0.0);
}

struct Parts {
    t_hat: Vec<f64>,
    s_hat: Vec<f64>,
    xbar_t: Vec<f64>,
}

/// Shared engine for T_hat and S_hat: integrates the perturbed path once,
/// then per estimator node runs the base-flow restarts. Fails with
/// Error::Diverged when any flow leaves the explosion cap.
fn decompose_parts(
    pair: &ModelPair,
    grid: &BrownianGrid,
    x: &[f64],
    stride: usize,
    want_t: bool,
    want_s: bool,
) -> Result<Parts> {
    check_stride(grid, stride)?;
    let d = pair.dim();
    let r = pair.noise_dim();
    if x.len() != d || grid.r != r {
        return Err(Error::DimensionMismatch(format!(
            "pair dims (d={d}, r={r}) vs state {} and grid r={}",
            x.len(),
            grid.r
        )));
    }
    let n = grid.steps;
    let nodes = n / stride;
    let big_h = grid.h * stride as f64;

    let xbar = integrate_flow(pair.perturbed, grid, x)?;
    if let Some(node) = xbar.exploded {
        return Err(Error::Diverged { node });
    }

    let mut scratch = PairScratch::new(pair);
    let mut t_hat = vec![0.0; d];
    let mut s_hat = vec![0.0; d];
    let mut contrib = vec![0.0; d];
    let mut weighted = vec![0.0; d];
    let mut dw_block = vec![0.0; r];

    let mut full_state = FlowState::full(x);
    let mut tan_state = FlowState::tangent(x);
    let mut ws_full = StepWorkspace::new(pair.base, Order::Hessian);
    let mut ws_tan = StepWorkspace::new(pair.base, Order::Tangent);

    for k in 0..nodes {
        let left = k * stride;
        let right = left + stride;
        let u = grid.node_time(left);
        let ybar = xbar.state(left);
        scratch.eval(pair, u, ybar);

        if want_t {
            reset_full(&mut full_state, ybar);
            match stream_flow(pair.base, grid, left, n, &mut full_state, &mut ws_full)? {
                Advance::Done => {}
                Advance::Diverged { node } => return Err(Error::Diverged { node }),
            }
            let jac = full_state.jac.as_ref().unwrap();
            grad_t_vec(jac, &scratch.delta_b, d, &mut contrib);
            full_state.hess.as_ref().unwrap().contract_matrix(&scratch.delta_a, &mut weighted);
            for m in 0..d {
                t_hat[m] += big_h * (contrib[m] + 0.5 * weighted[m]);
            }
        }

        if want_s {
            for l in 0..r {
                dw_block[l] = 0.0;
            }
            for j in left..right {
                let dw = grid.increment(j);
                for l in 0..r {
                    dw_block[l] += dw[l];
                }
            }
            // dsigma(ybar_k) applied to the increment block, as a state vector.
            for i in 0..d {
                let mut v = 0.0;
                for l in 0..r {
                    v += scratch.delta_sigma[i * r + l] * dw_block[l];
                }
                contrib[i] = v;
            }
            reset_tangent(&mut tan_state, ybar);
            match stream_flow(pair.base, grid, right, n, &mut tan_state, &mut ws_tan)? {
                Advance::Done => {}
                Advance::Diverged { node } => return Err(Error::Diverged { node }),
            }
            let jac = tan_state.jac.as_ref().unwrap();
            grad_t_vec(jac, &contrib, d, &mut weighted);
            for m in 0..d {
                s_hat[m] += weighted[m];
            }
        }
    }

    Ok(Parts { t_hat, s_hat, xbar_t: xbar.last().to_vec() })
}

/// Tangent/Hessian-weighted quadrature of the coefficient differences.
pub fn t_term(pair: &ModelPair, grid: &BrownianGrid, x: &[f64], stride: usize) -> Result<Vec<f64>> {
    Ok(decompose_parts(pair, grid, x, stride, true, false)?.t_hat)
}

/// Discrete two-sided (Skorohod) fluctuation sum.
pub fn s_term(pair: &ModelPair, grid: &BrownianGrid, x: &[f64], stride: usize) -> Result<Vec<f64>> {
    Ok(decompose_parts(pair, grid, x, stride, false, true)?.s_hat)
}

/// Full per-path decomposition with the literal residual.
pub fn telescoping_decomposition(
    pair: &ModelPair,
    grid: &BrownianGrid,
    x: &[f64],
    stride: usize,
) -> Result<DecompositionReport> {
    let d = pair.dim();
    let nodes = grid.steps / stride.max(1);
    let nan_report = |_: &Error| DecompositionReport {
        lhs: vec![f64::NAN; d],
        t_hat: vec![f64::NAN; d],
        s_hat: vec![f64::NAN; d],
        residual: vec![f64::NAN; d],
        estimator_steps: nodes,
        fine_steps: grid.steps,
        diverged: true,
    };
    let parts = match decompose_parts(pair, grid, x, stride, true, true) {
        Ok(parts) => parts,
        Err(err @ Error::Diverged { .. }) => return Ok(nan_report(&err)),
        Err(err) => return Err(err),
    };
    let mut base_state = FlowState::flow(x);
    let mut ws = StepWorkspace::new(pair.base, Order::Flow);
    match stream_flow(pair.base, grid, 0, grid.steps, &mut base_state, &mut ws)? {
        Advance::Done => {}
        Advance::Diverged { node } => return Ok(nan_report(&Error::Diverged { node })),
    }
    let lhs: Vec<f64> = base_state.x.iter().zip(&parts.xbar_t).map(|(a, b)| a - b).collect();
    let residual: Vec<f64> = (0..d).map(|i| lhs[i] - parts.t_hat[i] - parts.s_hat[i]).collect();
    Ok(DecompositionReport {
        lhs,
        t_hat: parts.t_hat,
        s_hat: parts.s_hat,
        residual,
        estimator_steps: nodes,
        fine_steps: grid.steps,
        diverged: false,
    })
}

/// One row of a residual convergence study.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ConvergenceRow {
    pub big_h: f64,
    pub mean_residual: f64,
    pub stderr: f64,
    pub diverged_paths: usize,
}

/// Mesh study configuration: estimator widths (each dividing the previous
/// one), the fine-mesh refinement h = H / fine_factor, and the sample size.
#[derive(Debug, Clone)]
pub struct ConvergenceStudy {
    pub h_values: Vec<f64>,
    pub fine_factor: usize,
    pub paths: usize,
    pub seed: u64,
}

/// Residual norms across nested estimator meshes. Level 0 samples the grid;
/// finer levels refine it conditionally, so all levels see the same Brownian
/// path and differences across H are pure mesh effects.
pub fn residual_convergence(
    pair: &ModelPair,
    x: &[f64],
    s: f64,
    t: f64,
    study: &ConvergenceStudy,
    ctx: ExecCtx,
) -> Result<Vec<ConvergenceRow>> {
    if study.h_values.is_empty() {
        return Err(Error::config("study.h_values", "need at least one estimator width"));
    }
    let mut factors = Vec::new();
    for w in study.h_values.windows(2) {
        let ratio = w[0] / w[1];
        let f = ratio.round() as usize;
        if f < 2 || (ratio - f as f64).abs() > 1e-9 {
            return Err(Error::config(
                "study.h_values",
                format!("width {} does not refine {} by an integer factor >= 2", w[1], w[0]),
            ));
        }
        factors.push(f);
    }
    let h0 = study.h_values[0] / study.fine_factor as f64;
    let steps0 = ((t - s) / h0).round() as usize;
    if steps0 == 0 || ((t - s) / steps0 as f64 - h0).abs() > 1e-9 * h0 {
        return Err(Error::config(
            "study.h_values",
            format!("horizon {} is not a multiple of the fine step {h0}", t - s),
        ));
    }
    let levels = study.h_values.len();
    let x = x.to_vec();
    let pair = *pair;
    let per_path = ctx.run_paths(study.paths, |p| -> Result<Vec<f64>> {
        let mut grid = sample_brownian(study.seed, p as u64, s, t, steps0, pair.noise_dim())?;
        let mut norms = Vec::with_capacity(levels);
        for level in 0..levels {
            if level > 0 {
                grid = grid.refine(factors[level - 1]);
            }
            let report = telescoping_decomposition(&pair, &grid, &x, study.fine_factor)?;
            if report.diverged {
                norms.push(f64::NAN);
            } else {
                norms.push(report.residual.iter().map(|v| v * v).sum::<f64>().sqrt());
            }
        }
        Ok(norms)
    });
    let mut rows = Vec::with_capacity(levels);
    for level in 0..levels {
        let mut values = Vec::with_capacity(study.paths);
        let mut dropped = 0usize;
        for path in &per_path {
            let norm = path.as_ref().map_err(clone_error)?[level];
            if norm.is_finite() {
                values.push(norm);
            } else {
                dropped += 1;
            }
        }
        if values.is_empty() {
            return Err(Error::AllDiverged(study.paths));
        }
        let (mean, stderr) = mean_and_stderr(&values);
        rows.push(ConvergenceRow {
            big_h: study.h_values[level],
            mean_residual: mean,
            stderr,
            diverged_paths: dropped,
        });
    }
    Ok(rows)
}

fn clone_error(err: &Error) -> Error {
    Error::config("study", err.to_string())
}

/// CSV rows (H, mean residual norm, stderr).
pub fn write_convergence_csv<W: std::io::Write>(
    out: &mut W,
    rows: &[ConvergenceRow],
) -> Result<()> {
    writeln!(out, "H,mean_residual,stderr,diverged_paths")?;
    for row in rows {
        writeln!(out, "{},{},{},{}", row.big_h, row.mean_residual, row.stderr, row.diverged_paths)?;
    }
    Ok(())
}

/// Skorohod variance decomposition for one-dimensional pairs.
#[derive(Debug, Clone, Serialize)]
pub struct VarianceReport {
    pub diagonal_term: f64,
    pub diagonal_stderr: f64,
    pub cross_term: f64,
    pub cross_stderr: f64,
    pub total: f64,
    pub total_stderr: f64,
    pub empirical_variance: f64,
    /// Standard error of the empirical variance.
    pub mc_stderr: f64,
    pub mean_s: f64,
    pub mean_s_stderr: f64,
    pub paths: usize,
}

/// Monte Carlo layout of the variance study.
#[derive(Debug, Clone, Copy)]
pub struct VarianceStudy {
    pub paths: usize,
    pub fine_steps: usize,
    /// Estimator stride for the empirical S_hat.
    pub stride: usize,
    /// Trapezoid intervals of the diagonal time integral (divides fine_steps).
    pub quad_nodes: usize,
    /// Trapezoid intervals per axis of the cross-term double integral.
    pub cross_nodes: usize,
    pub seed: u64,
}

impl Default for VarianceStudy {
    fn default() -> Self {
        VarianceStudy { paths: 1024, fine_steps: 512, stride: 4, quad_nodes: 64, cross_nodes: 16, seed: 1 }
    }
}

/// sigma and its spatial derivative of a scalar model at one point.
fn scalar_sigma(model: &dyn Dynamics, t: f64, y: f64, bundle: &mut crate::model::EvalBundle) -> (f64, f64) {
    model.eval(t, &[y], Order::Tangent, bundle);
    (bundle.sigma[0], bundle.grad_sigma[0])
}

pub fn skorohod_variance_1d(
    pair: &ModelPair,
    study: &VarianceStudy,
    s: f64,
    t: f64,
    x: f64,
    ctx: ExecCtx,
) -> Result<VarianceReport> {
    if pair.dim() != 1 || pair.noise_dim() != 1 {
        return Err(Error::DimensionMismatch(
            "skorohod variance study requires d = r = 1".into(),
        ));
    }
    if study.fine_steps % study.quad_nodes != 0 {
        return Err(Error::config(
            "variance.quad_nodes",
            format!("{} does not divide {} fine steps", study.quad_nodes, study.fine_steps),
        ));
    }
    if study.fine_steps % study.cross_nodes != 0 {
        return Err(Error::config(
            "variance.cross_nodes",
            format!("{} does not divide {} fine steps", study.cross_nodes, study.fine_steps),
        ));
    }
    if study.fine_steps % study.stride != 0 {
        return Err(Error::config(
            "variance.stride",
            format!("{} does not divide {} fine steps", study.stride, study.fine_steps),
        ));
    }
    let anticipating = !pair.base.meta().constant_diffusion;
    let pair = *pair;
    let per_path = ctx.run_paths(study.paths, move |p| -> Result<(f64, f64, f64)> {
        let grid = sample_brownian(study.seed, p as u64, s, t, study.fine_steps, 1)?;
        let n = grid.steps;
        let xbar = integrate_flow(pair.perturbed, &grid, &[x])?;
        if xbar.exploded.is_some() {
            return Ok((f64::NAN, f64::NAN, f64::NAN));
        }

        let s_hat = s_term(&pair, &grid, &[x], study.stride).map_or(f64::NAN, |v| v[0]);

        let mut scratch = PairScratch::new(&pair);
        let mut tan_state = FlowState::tangent(&[x]);
        let mut ws_tan = StepWorkspace::new(pair.base, Order::Tangent);

        // Diagonal: trapezoid over u of E Sigma_u^2.
        let q = study.quad_nodes;
        let qstride = n / q;
        let du = (t - s) / q as f64;
        let mut diagonal = 0.0;
        for qi in 0..=q {
            let node = qi * qstride;
            let u = grid.node_time(node);
            let ybar = xbar.state(node);
            scratch.eval(&pair, u, ybar);
            reset_tangent(&mut tan_state, ybar);
            match stream_flow(pair.base, &grid, node, n, &mut tan_state, &mut ws_tan)? {
                Advance::Done => {}
                Advance::Diverged { .. } => return Ok((f64::NAN, f64::NAN, f64::NAN)),
            }
            let sigma_u = tan_state.jac.as_ref().unwrap()[0] * scratch.delta_sigma[0];
            let w = if qi == 0 || qi == q { 0.5 } else { 1.0 };
            diagonal += w * du * sigma_u * sigma_u;
        }

        // Cross term: trapezoid grid over (u, v), u <= v, doubling the
        // off-diagonal cells by symmetry of the inner-product integrand.
        let mut cross = 0.0;
        if anticipating {
            let c = study.cross_nodes;
            let cstride = n / c;
            let dv = (t - s) / c as f64;
            let mut base_bundle =
                crate::model::EvalBundle::for_order(1, 1, Order::Tangent);
            let mut pert_bundle =
                crate::model::EvalBundle::for_order(1, 1, Order::Tangent);
            let mut full_state = FlowState::full(&[x]);
            let mut ws_full = StepWorkspace::new(pair.base, Order::Hessian);
            for i in 0..=c {
                let ui = i * cstride;
                let u = grid.node_time(ui);
                let ybar_u = xbar.state(ui)[0];
                let (sigbar_u, _) = scalar_sigma(pair.perturbed, u, ybar_u, &mut pert_bundle);
                let (sig_u, _) = scalar_sigma(pair.base, u, ybar_u, &mut base_bundle);
                let zeta_u = {
                    scratch.eval(&pair, u, &[ybar_u]);
                    scratch.delta_sigma[0]
                };
                let _ = sig_u;
                for j in i..=c {
                    let vj = j * cstride;
                    let v = grid.node_time(vj);
                    let ybar_v = xbar.state(vj)[0];

                    // D_u Sigma_v: the past perturbation enters through
                    // Ybar_v, with sensitivity Jbar(u,v) sigma_bar(Ybar_u).
                    reset_tangent(&mut tan_state, &[ybar_u]);
                    if !stream_flow(pair.perturbed, &grid, ui, vj, &mut tan_state, &mut ws_tan)?
                        .is_done()
                    {
                        return Ok((f64::NAN, f64::NAN, f64::NAN));
                    }
                    let jbar_uv = tan_state.jac.as_ref().unwrap()[0];
                    reset_full(&mut full_state, &[ybar_v]);
                    if !stream_flow(pair.base, &grid, vj, n, &mut full_state, &mut ws_full)?
                        .is_done()
                    {
                        return Ok((f64::NAN, f64::NAN, f64::NAN));
                    }
                    let j_vt = full_state.jac.as_ref().unwrap()[0];
                    let h_vt = full_state.hess.as_ref().unwrap().data()[0];
                    scratch.eval(&pair, v, &[ybar_v]);
                    let zeta_v = scratch.delta_sigma[0];
                    let (_, sp_base_v) = scalar_sigma(pair.base, v, ybar_v, &mut base_bundle);
                    let (_, sp_pert_v) = scalar_sigma(pair.perturbed, v, ybar_v, &mut pert_bundle);
                    let zeta_prime_v = sp_base_v - sp_pert_v;
                    let a = sigbar_u * jbar_uv * (h_vt * zeta_v + j_vt * zeta_prime_v);

                    // D_v Sigma_u: the future perturbation enters through the
                    // base flow restart X_{u,.}(Ybar_u) at its v-state z.
                    reset_tangent(&mut tan_state, &[ybar_u]);
                    if !stream_flow(pair.base, &grid, ui, vj, &mut tan_state, &mut ws_tan)?
                        .is_done()
                    {
                        return Ok((f64::NAN, f64::NAN, f64::NAN));
                    }
                    let j_uv = tan_state.jac.as_ref().unwrap()[0];
                    let z = tan_state.x[0];
                    reset_full(&mut full_state, &[z]);
                    if !stream_flow(pair.base, &grid, vj, n, &mut full_state, &mut ws_full)?
                        .is_done()
                    {
                        return Ok((f64::NAN, f64::NAN, f64::NAN));
                    }
                    let j2 = full_state.jac.as_ref().unwrap()[0];
                    let h2 = full_state.hess.as_ref().unwrap().data()[0];
                    let (sig_z, sigp_z) = scalar_sigma(pair.base, v, z, &mut base_bundle);
                    let b = j_uv * zeta_u * (sig_z * h2 + sigp_z * j2);

                    let wi = if i == 0 || i == c { 0.5 } else { 1.0 };
                    let wj = if j == 0 || j == c { 0.5 } else { 1.0 };
                    let sym = if i == j { 1.0 } else { 2.0 };
                    cross += sym * wi * wj * dv * dv * a * b;
                }
            }
        }
        Ok((s_hat, diagonal, cross))
    });

    let mut s_values = Vec::with_capacity(study.paths);
    let mut d_values = Vec::with_capacity(study.paths);
    let mut c_values = Vec::with_capacity(study.paths);
    let mut t_values = Vec::with_capacity(study.paths);
    for outcome in &per_path {
        let (sh, dg, cr) = *outcome.as_ref().map_err(clone_error)?;
        if sh.is_finite() && dg.is_finite() && cr.is_finite() {
            s_values.push(sh);
            d_values.push(dg);
            c_values.push(cr);
            t_values.push(dg + cr);
        }
    }
    if s_values.is_empty() {
        return Err(Error::AllDiverged(study.paths));
    }
    let (diag, diag_se) = mean_and_stderr(&d_values);
    let (cross, cross_se) = mean_and_stderr(&c_values);
    let (total, total_se) = mean_and_stderr(&t_values);
    let (emp_var, emp_se) = variance_and_stderr(&s_values);
    let (mean_s, mean_s_se) = mean_and_stderr(&s_values);
    Ok(VarianceReport {
        diagonal_term: diag,
        diagonal_stderr: diag_se,
        cross_term: cross,
        cross_stderr: cross_se,
        total,
        total_stderr: total_se,
        empirical_variance: emp_var,
        mc_stderr: emp_se,
        mean_s,
        mean_s_stderr: mean_s_se,
        paths: s_values.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Ou;
    use approx::assert_relative_eq;

    fn grid(seed: u64, stream: u64, t: f64, steps: usize) -> BrownianGrid {
        sample_brownian(seed, stream, 0.0, t, steps, 1).unwrap()
    }

    #[test]
    fn identical_pair_decomposes_to_exact_zeros() {
        let a = Ou { lambda: 1.0, sigma: 1.0, d: 1 };
        let pair = ModelPair::new(&a, &a).unwrap();
        let g = grid(3, 0, 1.0, 64);
        let report = telescoping_decomposition(&pair, &g, &[1.0], 8).unwrap();
        assert_eq!(report.lhs, vec![0.0]);
        assert_eq!(report.t_hat, vec![0.0]);
        assert_eq!(report.s_hat, vec![0.0]);
        assert_eq!(report.residual, vec![0.0]);
        assert!(!report.diverged);
    }

    #[test]
    fn shared_diffusion_gives_bitwise_zero_s() {
        let a = Ou { lambda: 1.0, sigma: 1.0, d: 1 };
        let b = Ou { lambda: 2.0, sigma: 1.0, d: 1 };
        let pair = ModelPair::new(&a, &b).unwrap();
        let g = grid(4, 1, 1.0, 64);
        assert_eq!(s_term(&pair, &g, &[1.0], 8).unwrap(), vec![0.0]);
    }

    #[test]
    fn linear_base_kills_the_hessian_half_of_t() {
        // db = 0 and the base flow is linear, so both T contributions vanish.
        let a = Ou { lambda: 1.0, sigma: 1.0, d: 1 };
        let b = Ou { lambda: 1.0, sigma: 0.5, d: 1 };
        let pair = ModelPair::new(&a, &b).unwrap();
        let g = grid(5, 2, 1.0, 64);
        assert_eq!(t_term(&pair, &g, &[1.0], 8).unwrap(), vec![0.0]);
    }

    #[test]
    fn t_term_matches_the_explicit_ou_quadrature() {
        // lambda 1 vs 2, shared sigma: db(y) = y and the restart tangent of
        // the base OU flow is the deterministic Euler product.
        let a = Ou { lambda: 1.0, sigma: 1.0, d: 1 };
        let b = Ou { lambda: 2.0, sigma: 1.0, d: 1 };
        let pair = ModelPair::new(&a, &b).unwrap();
        let g = grid(6, 3, 1.0, 256);
        let stride = 8;
        let computed = t_term(&pair, &g, &[1.0], stride).unwrap()[0];
        let xbar = integrate_flow(&b, &g, &[1.0]).unwrap();
        let mut expect = 0.0;
        let nodes = g.steps / stride;
        for k in 0..nodes {
            let left = k * stride;
            let mut j = 1.0;
            for _ in left..g.steps {
                j *= 1.0 - g.h;
            }
            expect += g.h * stride as f64 * j * xbar.state(left)[0];
        }
        assert_relative_eq!(computed, expect, max_relative = 1e-12);
    }

    #[test]
    fn s_term_with_deterministic_base_is_an_ito_sum() {
        // sigma = 0 base: restart tangents are deterministic and
        // dsigma = -sigmabar, so S_hat is an explicit weighted increment sum.
        let a = Ou { lambda: 1.0, sigma: 0.0, d: 1 };
        let b = Ou { lambda: 1.0, sigma: 1.0, d: 1 };
        let pair = ModelPair::new(&a, &b).unwrap();
        let g = grid(7, 4, 1.0, 256);
        let stride = 8;
        let computed = s_term(&pair, &g, &[1.0], stride).unwrap()[0];
        let nodes = g.steps / stride;
        let mut expect = 0.0;
        for k in 0..nodes {
            let right = (k + 1) * stride;
            let mut j = 1.0;
            for _ in right..g.steps {
                j *= 1.0 - g.h;
            }
            let mut dw = 0.0;
            for i in k * stride..right {
                dw += g.increment(i)[0];
            }
            expect += j * (-1.0) * dw;
        }
        assert_relative_eq!(computed, expect, max_relative = 1e-12);
    }

    #[test]
    fn residual_is_the_literal_difference() {
        let a = Ou { lambda: 1.0, sigma: 1.0, d: 2 };
        let b = Ou { lambda: 1.5, sigma: 0.5, d: 2 };
        let pair = ModelPair::new(&a, &b).unwrap();
        let g = sample_brownian(8, 5, 0.0, 1.0, 128, 2).unwrap();
        let report = telescoping_decomposition(&pair, &g, &[1.0, -0.5], 8).unwrap();
        for i in 0..2 {
            assert_eq!(report.residual[i], report.lhs[i] - report.t_hat[i] - report.s_hat[i]);
        }
    }

    #[test]
    fn stride_must_divide_the_grid() {
        let a = Ou { lambda: 1.0, sigma: 1.0, d: 1 };
        let pair = ModelPair::new(&a, &a).unwrap();
        let g = grid(9, 6, 1.0, 64);
        assert!(t_term(&pair, &g, &[1.0], 7).is_err());
        assert_eq!(stride_for(&g, 8.0 * g.h).unwrap(), 8);
        assert!(stride_for(&g, 0.1).is_err());
    }

    #[test]
    fn constant_sigma_variance_pins_cross_to_zero() {
        let a = Ou { lambda: 1.0, sigma: 1.0, d: 1 };
        let b = Ou { lambda: 1.0, sigma: 0.5, d: 1 };
        let pair = ModelPair::new(&a, &b).unwrap();
        let study = VarianceStudy {
            paths: 256,
            fine_steps: 256,
            stride: 4,
            quad_nodes: 32,
            cross_nodes: 8,
            seed: 11,
        };
        let report =
            skorohod_variance_1d(&pair, &study, 0.0, 2.0, 1.0, ExecCtx::default()).unwrap();
        assert_eq!(report.cross_term, 0.0);
        assert_eq!(report.cross_stderr, 0.0);
        // Centering and the isometry against the closed form 0.122711.
        assert!(report.mean_s.abs() <= 3.0 * report.mean_s_stderr);
        let target = crate::variance_oracle::ou_skorohod_diagonal(1.0, 0.5, 1, 0.0, 2.0);
        assert!(
            (report.diagonal_term - target).abs() <= 3.0 * report.diagonal_stderr.max(1e-4),
            "diagonal {} vs {target}",
            report.diagonal_term
        );
        assert!(
            (report.empirical_variance - report.total).abs()
                <= 3.0 * report.mc_stderr.hypot(report.total_stderr),
            "variance {} vs total {}",
            report.empirical_variance,
            report.total
        );
    }

    #[test]
    fn convergence_rows_shrink_for_the_ou_pair() {
        let a = Ou { lambda: 1.0, sigma: 1.0, d: 1 };
        let b = Ou { lambda: 1.0, sigma: 0.5, d: 1 };
        let pair = ModelPair::new(&a, &b).unwrap();
        let study = ConvergenceStudy {
            h_values: vec![0.25, 0.125, 0.0625],
            fine_factor: 8,
            paths: 64,
            seed: 21,
        };
        let rows = residual_convergence(&pair, &[1.0], 0.0, 2.0, &study, ExecCtx::default()).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows[2].mean_residual < rows[0].mean_residual);
        let mut csv = Vec::new();
        write_convergence_csv(&mut csv, &rows).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("H,mean_residual,stderr"));
        assert_eq!(text.lines().count(), 4);
    }
}
