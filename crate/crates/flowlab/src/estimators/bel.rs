//! Bismut-Elworthy-Li gradient and Hessian estimators.
//!
//! Under ellipticity a(x) = sigma sigma' >= upsilon I, semigroup derivatives
//! of measurable observables are expectations of the observable times a
//! stochastic weight built along the path:
//!
//! ```text
//! grad P_{s,t}(f)(x)   = E[ f(X_t) tau ],
//! tau                  = int_s^t dw(u) grad X_{s,u} a(X_u)^{-1/2} dW_u,
//! grad^2 P_{s,t}(f)(x) = E[ f(X_t) tau2 + grad X_{s,t} grad f(X_t) tau' ],
//! tau2                 = int_s^t dw(u) [ grad^2 X_{s,u} a^{-1/2}
//!                        + (grad X (x) grad X) nabla_bar a^{-1/2} ] dW_u
//! ```
//!
//! with dw(u) = phi'((u-s)/(t-s)) / (t-s) for a nondecreasing profile phi
//! with phi(0) = 0, phi(1) = 1, and nabla_bar a^{-1/2} the state derivative
//! of the inverse diffusion square root. A split form restarts the
//! first-order weight at an interior time u:
//!
//! ```text
//! grad^2 P_{s,t}(f)(x) = E[ f(X_t) ( tau2_{s,u}
//!                        + grad X_{s,u} tau_{u,t}(X_u) tau_{s,u}' ) ].
//! ```
//!
//! The weight integrals are discretized with the left-point rule on the
//! path's own fine mesh. For constant diffusion the nabla_bar term is
//! exactly zero and a^{-1/2} is computed once per call.

use crate::linalg::{identity, mat_vec, midx, Tensor3};
use crate::mc::ExecCtx;
use crate::model::{Dynamics, EvalBundle, Order};
use crate::paths::{sample_brownian, stream_flow, Advance, BrownianGrid, FlowState, StepWorkspace};
use crate::stats::mean_and_stderr;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

use super::Observable;

/// Weight profile phi on [0,1]; nondecreasing with phi(0)=0, phi(1)=1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PhiSpec {
    /// phi(v) = v: constant-rate weight.
    #[default]
    Linear,
    /// phi vanishing on [0, 1-epsilon] and lifting to 1 along a raised
    /// cosine; concentrates the weight near the horizon.
    Cosine { epsilon: f64 },
}

impl PhiSpec {
    pub fn validate(self) -> Result<()> {
        if let PhiSpec::Cosine { epsilon } = self {
            if !(epsilon > 0.0 && epsilon <= 1.0) {
                return Err(Error::config(
                    "bel.phi.epsilon",
                    format!("epsilon must lie in (0, 1], got {epsilon}"),
                ));
            }
        }
        Ok(())
    }

    /// Derivative of the profile at v in [0,1].
    pub fn phi_prime(self, v: f64) -> f64 {
        match self {
            PhiSpec::Linear => 1.0,
            PhiSpec::Cosine { epsilon } => {
                if v < 1.0 - epsilon {
                    0.0
                } else {
                    let theta = (1.0 + (1.0 - v) / epsilon) * FRAC_PI_2;
                    FRAC_PI_2 / epsilon * theta.sin()
                }
            }
        }
    }
}

/// Monte Carlo layout of a Bismut-Elworthy-Li run.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BelStudy {
    pub phi: PhiSpec,
    /// Fine mesh steps on [s, t].
    pub steps: usize,
    pub paths: usize,
    /// Smallest admissible eigenvalue of a(x); below it the run fails.
    pub eig_floor: f64,
    pub seed: u64,
}

impl Default for BelStudy {
    fn default() -> Self {
        BelStudy { phi: PhiSpec::Linear, steps: 256, paths: 4096, eig_floor: 1e-8, seed: 1 }
    }
}

/// Componentwise Monte Carlo estimate of a vector quantity.
#[derive(Debug, Clone, Serialize)]
pub struct VectorEstimate {
    pub value: Vec<f64>,
    pub stderr: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
}

/// Componentwise Monte Carlo estimate of a d x d matrix (row-major).
#[derive(Debug, Clone, Serialize)]
pub struct MatrixEstimate {
    pub d: usize,
    pub value: Vec<f64>,
    pub stderr: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
}

/// Inverse square root of a, plus (when `out` is given) the tensor
/// nabla_bar[(i,j),k] = d_i (a^{-1/2})_{j,k} obtained from the
/// eigendecomposition: d_i a^{1/2} solves the Sylvester identity
/// (d a^{1/2}) a^{1/2} + a^{1/2} (d a^{1/2}) = d_i a, which diagonalizes to
/// division by eigenvalue-sqrt sums.
fn inv_sqrt_with_derivative(
    bundle: &EvalBundle,
    a: &[f64],
    floor: f64,
    ainv: &mut [f64],
    out: Option<&mut Tensor3>,
) -> Result<()> {
    let d = bundle.d;
    if d == 1 {
        if a[0] < floor {
            return Err(Error::SingularDiffusion { eig: a[0], floor });
        }
        ainv[0] = 1.0 / a[0].sqrt();
        if let Some(out) = out {
            // d(a^{-1/2}) = -(sigma sigma') / |sigma|^3 in one dimension.
            let sigma = bundle.sigma[0];
            let dsigma = bundle.grad_sigma[0];
            out.set(0, 0, 0, -(sigma * dsigma) / (a[0] * sigma.abs()));
        }
        return Ok(());
    }

    let mat = nalgebra::DMatrix::from_row_slice(d, d, a);
    let eig = mat.symmetric_eigen();
    for &lam in eig.eigenvalues.iter() {
        if lam < floor {
            return Err(Error::SingularDiffusion { eig: lam, floor });
        }
    }
    let q = &eig.eigenvectors;
    let sqrt_l: Vec<f64> = eig.eigenvalues.iter().map(|l| l.sqrt()).collect();
    ainv.fill(0.0);
    for (p, sl) in sqrt_l.iter().enumerate() {
        let col = q.column(p);
        for i in 0..d {
            for j in 0..d {
                ainv[midx(i, j, d)] += col[i] * col[j] / sl;
            }
        }
    }
    let Some(out) = out else { return Ok(()) };

    let r = bundle.r;
    let ainv_m = nalgebra::DMatrix::from_row_slice(d, d, ainv);
    for i in 0..d {
        // d_i a = (d_i sigma) sigma' + sigma (d_i sigma)'.
        let mut da = nalgebra::DMatrix::zeros(d, d);
        for j in 0..d {
            for l in 0..d {
                let mut v = 0.0;
                for k in 0..r {
                    let ds = bundle.grad_sigma_col(k);
                    v += ds[midx(i, j, d)] * bundle.sigma[l * r + k]
                        + bundle.sigma[j * r + k] * ds[midx(i, l, d)];
                }
                da[(j, l)] = v;
            }
        }
        let b = q.transpose() * &da * q;
        let mut c = nalgebra::DMatrix::zeros(d, d);
        for p in 0..d {
            for s in 0..d {
                c[(p, s)] = b[(p, s)] / (sqrt_l[p] + sqrt_l[s]);
            }
        }
        let da_sqrt = q * c * q.transpose();
        let deriv = -(&ainv_m * da_sqrt * &ainv_m);
        for j in 0..d {
            for k in 0..d {
                out.set(i, j, k, deriv[(j, k)]);
            }
        }
    }
    Ok(())
}

/// One worker's buffers and in-flight state for weight passes.
pub(crate) struct WeightEngine {
    phi: PhiSpec,
    floor: f64,
    d: usize,
    want_tau2: bool,
    constant_diffusion: bool,
    pub state: FlowState,
    ws: StepWorkspace,
    eval: EvalBundle,
    a: Vec<f64>,
    ainv: Vec<f64>,
    ainv_cached: bool,
    y: Vec<f64>,
    jy: Vec<f64>,
    pub tau: Vec<f64>,
    pub tau2: Vec<f64>,
    term: Vec<f64>,
    nabla_bar: Tensor3,
    outer: Tensor3,
    outer_scratch: Tensor3,
}

impl WeightEngine {
    pub(crate) fn new(
        model: &dyn Dynamics,
        phi: PhiSpec,
        floor: f64,
        want_tau2: bool,
    ) -> Result<Self> {
        phi.validate()?;
        let d = model.dim();
        if model.noise_dim() != d {
            return Err(Error::DimensionMismatch(format!(
                "the weight a^(-1/2) dW needs square diffusion, got d={d}, r={}",
                model.noise_dim()
            )));
        }
        let constant_diffusion = model.meta().constant_diffusion;
        let order = if want_tau2 { Order::Hessian } else { Order::Tangent };
        let eval_order = if constant_diffusion { Order::Flow } else { Order::Tangent };
        let zeros = vec![0.0; d];
        Ok(WeightEngine {
            phi,
            floor,
            d,
            want_tau2,
            constant_diffusion,
            state: if want_tau2 { FlowState::full(&zeros) } else { FlowState::tangent(&zeros) },
            ws: StepWorkspace::new(model, order),
            eval: EvalBundle::for_order(d, d, eval_order),
            a: vec![0.0; d * d],
            ainv: vec![0.0; d * d],
            ainv_cached: false,
            y: vec![0.0; d],
            jy: vec![0.0; d],
            tau: vec![0.0; d],
            tau2: if want_tau2 { vec![0.0; d * d] } else { Vec::new() },
            term: if want_tau2 { vec![0.0; d * d] } else { Vec::new() },
            nabla_bar: Tensor3::zeros(if want_tau2 { d } else { 0 }),
            outer: Tensor3::zeros(if want_tau2 { d } else { 0 }),
            outer_scratch: Tensor3::zeros(if want_tau2 { d } else { 0 }),
        })
    }

    /// Stream the flow over grid nodes [from, to), accumulating the weight
    /// integrals with the profile rescaled to that window. Resets the state
    /// to x (J = I, H = 0) and the accumulators first. Returns false when
    /// the flow diverges.
    pub(crate) fn pass(
        &mut self,
        model: &dyn Dynamics,
        grid: &BrownianGrid,
        from: usize,
        to: usize,
        x: &[f64],
        accumulate_tau2: bool,
    ) -> Result<bool> {
        debug_assert!(!accumulate_tau2 || self.want_tau2);
        let d = self.d;
        self.state.x.copy_from_slice(x);
        identity(d, self.state.jac.as_mut().unwrap());
        if let Some(h) = self.state.hess.as_mut() {
            h.fill(0.0);
        }
        self.tau.fill(0.0);
        if accumulate_tau2 {
            self.tau2.fill(0.0);
        }
        let t_from = grid.node_time(from);
        let span = grid.node_time(to) - t_from;
        let eval_order = if self.constant_diffusion { Order::Flow } else { Order::Tangent };
        for k in from..to {
            let u = grid.node_time(k);
            let rate = self.phi.phi_prime((u - t_from) / span) / span;
            if rate != 0.0 {
                if !self.constant_diffusion || !self.ainv_cached {
                    model.eval(u, &self.state.x, eval_order, &mut self.eval);
                    self.eval.diffusion_square(&mut self.a);
                    let nb = if accumulate_tau2 && !self.constant_diffusion {
                        Some(&mut self.nabla_bar)
                    } else {
                        None
                    };
                    inv_sqrt_with_derivative(&self.eval, &self.a, self.floor, &mut self.ainv, nb)?;
                    self.ainv_cached = self.constant_diffusion;
                }
                let dw = grid.increment(k);
                mat_vec(&self.ainv, dw, d, d, &mut self.y);
                let jac = self.state.jac.as_ref().unwrap();
                mat_vec(jac, &self.y, d, d, &mut self.jy);
                for i in 0..d {
                    self.tau[i] += rate * self.jy[i];
                }
                if accumulate_tau2 {
                    let hess = self.state.hess.as_ref().unwrap();
                    hess.contract_component(&self.y, &mut self.term);
                    for i in 0..d * d {
                        self.tau2[i] += rate * self.term[i];
                    }
                    if !self.constant_diffusion {
                        crate::linalg::outer_apply(
                            jac,
                            &self.nabla_bar,
                            &mut self.outer_scratch,
                            &mut self.outer,
                        );
                        self.outer.contract_component(dw, &mut self.term);
                        for i in 0..d * d {
                            self.tau2[i] += rate * self.term[i];
                        }
                    }
                }
            }
            match stream_flow(model, grid, k, k + 1, &mut self.state, &mut self.ws)? {
                Advance::Done => {}
                Advance::Diverged { .. } => return Ok(false),
            }
        }
        Ok(true)
    }
}

fn aggregate(
    samples: Vec<Result<Option<Vec<f64>>>>,
    len: usize,
    total: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let mut kept: Vec<Vec<f64>> = Vec::with_capacity(samples.len());
    for s in samples {
        if let Some(v) = s? {
            kept.push(v);
        }
    }
    if kept.is_empty() {
        return Err(Error::AllDiverged(total));
    }
    let _ = seed;
    let mut value = vec![0.0; len];
    let mut stderr = vec![0.0; len];
    let mut column = vec![0.0; kept.len()];
    for c in 0..len {
        for (row, v) in kept.iter().enumerate() {
            column[row] = v[c];
        }
        let (m, se) = mean_and_stderr(&column);
        value[c] = m;
        stderr[c] = se;
    }
    Ok((value, stderr, kept.len()))
}

/// Estimate grad P_{s,t}(f)(x); f need only be measurable.
pub fn bel_gradient(
    model: &dyn Dynamics,
    f: &dyn Observable,
    s: f64,
    t: f64,
    x: &[f64],
    study: &BelStudy,
    ctx: ExecCtx,
) -> Result<VectorEstimate> {
    let d = model.dim();
    let n = study.steps;
    let samples = ctx.run_paths(study.paths, |p| -> Result<Option<Vec<f64>>> {
        let grid = sample_brownian(study.seed, p as u64, s, t, n, model.noise_dim())?;
        let mut engine = WeightEngine::new(model, study.phi, study.eig_floor, false)?;
        if !engine.pass(model, &grid, 0, n, x, false)? {
            return Ok(None);
        }
        let fv = f.value(&engine.state.x);
        Ok(Some(engine.tau.iter().map(|tau| fv * tau).collect()))
    });
    let (value, stderr, kept) = aggregate(samples, d, study.paths, study.seed)?;
    Ok(VectorEstimate { value, stderr, samples: kept, seed: study.seed })
}

/// Estimate grad^2 P_{s,t}(f)(x) with the gradient-weight form; f must
/// supply its gradient.
pub fn bel_hessian(
    model: &dyn Dynamics,
    f: &dyn Observable,
    s: f64,
    t: f64,
    x: &[f64],
    study: &BelStudy,
    ctx: ExecCtx,
) -> Result<MatrixEstimate> {
    let d = model.dim();
    let n = study.steps;
    let samples = ctx.run_paths(study.paths, |p| -> Result<Option<Vec<f64>>> {
        let grid = sample_brownian(study.seed, p as u64, s, t, n, model.noise_dim())?;
        let mut engine = WeightEngine::new(model, study.phi, study.eig_floor, true)?;
        if !engine.pass(model, &grid, 0, n, x, true)? {
            return Ok(None);
        }
        let fv = f.value(&engine.state.x);
        let mut grad_f = vec![0.0; d];
        f.gradient(&engine.state.x, &mut grad_f);
        let mut v = vec![0.0; d];
        mat_vec(engine.state.jac.as_ref().unwrap(), &grad_f, d, d, &mut v);
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                out[midx(i, j, d)] = fv * engine.tau2[midx(i, j, d)] + v[i] * engine.tau[j];
            }
        }
        Ok(Some(out))
    });
    let (value, stderr, kept) = aggregate(samples, d * d, study.paths, study.seed)?;
    Ok(MatrixEstimate { d, value, stderr, samples: kept, seed: study.seed })
}

/// Estimate grad^2 P_{s,t}(f)(x) with the split form restarting the
/// first-order weight at the interior time u; f need only be measurable.
pub fn bel_hessian_split(
    model: &dyn Dynamics,
    f: &dyn Observable,
    s: f64,
    t: f64,
    x: &[f64],
    u: f64,
    study: &BelStudy,
    ctx: ExecCtx,
) -> Result<MatrixEstimate> {
    let d = model.dim();
    let n = study.steps;
    let h = (t - s) / n as f64;
    let ku = ((u - s) / h).round() as usize;
    if ku == 0 || ku >= n || ((s + ku as f64 * h) - u).abs() > 1e-9 * (t - s) {
        return Err(Error::config(
            "bel.split",
            format!("split time {u} must be an interior node of the {n}-step mesh on [{s}, {t}]"),
        ));
    }
    let samples = ctx.run_paths(study.paths, |p| -> Result<Option<Vec<f64>>> {
        let grid = sample_brownian(study.seed, p as u64, s, t, n, model.noise_dim())?;
        let mut engine = WeightEngine::new(model, study.phi, study.eig_floor, true)?;
        if !engine.pass(model, &grid, 0, ku, x, true)? {
            return Ok(None);
        }
        let tau_su = engine.tau.clone();
        let tau2_su = engine.tau2.clone();
        let j_su = engine.state.jac.as_ref().unwrap().clone();
        let x_u = engine.state.x.clone();
        if !engine.pass(model, &grid, ku, n, &x_u, false)? {
            return Ok(None);
        }
        let fv = f.value(&engine.state.x);
        let mut v = vec![0.0; d];
        mat_vec(&j_su, &engine.tau, d, d, &mut v);
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                out[midx(i, j, d)] = fv * (tau2_su[midx(i, j, d)] + v[i] * tau_su[j]);
            }
        }
        Ok(Some(out))
    });
    let (value, stderr, kept) = aggregate(samples, d * d, study.paths, study.seed)?;
    Ok(MatrixEstimate { d, value, stderr, samples: kept, seed: study.seed })
}
