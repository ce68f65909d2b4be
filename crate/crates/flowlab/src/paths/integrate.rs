//! Euler-Maruyama integration of the flow and its first two variations.
//!
//! One shared step kernel advances the state
//!   X_{k+1} = X_k + b h + sigma DW,
//! the tangent J_{k+1} = J_k G with G = I + grad b h + sum_k grad sigma_k DW^k
//! (J starts at the identity), and the Hessian
//!   H_{k+1} = H G + (J (x) J)(grad^2 b h + sum_k grad^2 sigma_k DW^k)
//! where (J (x) J) is the tensor outer action and H starts at zero. The
//! Hessian update uses the pre-step J, then J updates, then the state, so all
//! coefficients are evaluated at the step's left endpoint.

use super::{BrownianGrid, FlowPath, HessianPath, TangentPath};
use crate::linalg::{identity, mat_mul, Tensor3};
use crate::model::{Dynamics, EvalBundle, Order};
use crate::{Error, Result};

/// States above this norm flag the path as diverged instead of running to NaN.
pub const DEFAULT_EXPLOSION_CAP: f64 = 1e8;

/// Outcome of an in-place advance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[must_use]
pub enum Advance {
    Done,
    Diverged { node: usize },
}

impl Advance {
    pub fn is_done(self) -> bool {
        self == Advance::Done
    }
}

/// Scratch buffers for one integration worker; reuse across paths.
pub struct StepWorkspace {
    bundle: EvalBundle,
    g: Vec<f64>,
    jtmp: Vec<f64>,
    src: Tensor3,
    t1: Tensor3,
    t2: Tensor3,
    outer_scratch: Tensor3,
}

impl StepWorkspace {
    pub fn new(model: &dyn Dynamics, order: Order) -> Self {
        let d = model.dim();
        let grads = order.needs_gradients();
        let hess = order.needs_hessians();
        StepWorkspace {
            bundle: EvalBundle::for_order(d, model.noise_dim(), order),
            g: if grads { vec![0.0; d * d] } else { Vec::new() },
            jtmp: if grads { vec![0.0; d * d] } else { Vec::new() },
            src: Tensor3::zeros(if hess { d } else { 0 }),
            t1: Tensor3::zeros(if hess { d } else { 0 }),
            t2: Tensor3::zeros(if hess { d } else { 0 }),
            outer_scratch: Tensor3::zeros(if hess { d } else { 0 }),
        }
    }
}

/// Flow state advanced in place by [`stream_flow`]; carries whichever
/// variations the caller needs.
#[derive(Debug, Clone)]
pub struct FlowState {
    pub x: Vec<f64>,
    pub jac: Option<Vec<f64>>,
    pub hess: Option<Tensor3>,
}

impl FlowState {
    pub fn flow(x: &[f64]) -> Self {
        FlowState { x: x.to_vec(), jac: None, hess: None }
    }

    /// Fresh tangent start: J = I.
    pub fn tangent(x: &[f64]) -> Self {
        let d = x.len();
        let mut j = vec![0.0; d * d];
        identity(d, &mut j);
        FlowState { x: x.to_vec(), jac: Some(j), hess: None }
    }

    /// Fresh second-order start: J = I, H = 0.
    pub fn full(x: &[f64]) -> Self {
        let d = x.len();
        let mut state = FlowState::tangent(x);
        state.hess = Some(Tensor3::zeros(d));
        state
    }

    fn order(&self) -> Order {
        if self.hess.is_some() {
            Order::Hessian
        } else if self.jac.is_some() {
            Order::Tangent
        } else {
            Order::Flow
        }
    }
}

/// One Euler step at time t with increment dw. Returns false when the new
/// state leaves the explosion cap or stops being finite.
fn step_once(
    model: &dyn Dynamics,
    t: f64,
    h: f64,
    dw: &[f64],
    x: &mut [f64],
    jac: Option<&mut [f64]>,
    hess: Option<&mut Tensor3>,
    ws: &mut StepWorkspace,
    cap: f64,
) -> bool {
    let d = model.dim();
    let r = model.noise_dim();
    let order = if hess.is_some() {
        Order::Hessian
    } else if jac.is_some() {
        Order::Tangent
    } else {
        Order::Flow
    };
    model.eval(t, x, order, &mut ws.bundle);

    if order.needs_gradients() {
        identity(d, &mut ws.g);
        for i in 0..d * d {
            ws.g[i] += h * ws.bundle.grad_b[i];
        }
        for k in 0..r {
            let gk = ws.bundle.grad_sigma_col(k);
            let w = dw[k];
            for i in 0..d * d {
                ws.g[i] += w * gk[i];
            }
        }
    }

    if let Some(hess) = hess {
        // Source tensor of the second variation, evaluated pre-step.
        {
            let src = ws.src.data_mut();
            let hb = ws.bundle.hess_b.data();
            for i in 0..src.len() {
                src[i] = h * hb[i];
            }
            for k in 0..r {
                let hs = ws.bundle.hess_sigma[k].data();
                let w = dw[k];
                for i in 0..src.len() {
                    src[i] += w * hs[i];
                }
            }
        }
        let j = jac.as_deref().expect("hessian stepping requires a tangent");
        crate::linalg::outer_apply(j, &ws.src, &mut ws.outer_scratch, &mut ws.t1);
        crate::linalg::tensor_mat_right(hess, &ws.g, &mut ws.t2);
        let out = hess.data_mut();
        let (a, b) = (ws.t1.data(), ws.t2.data());
        for i in 0..out.len() {
            out[i] = a[i] + b[i];
        }
    }

    if let Some(jac) = jac {
        mat_mul(jac, &ws.g, d, &mut ws.jtmp);
        jac.copy_from_slice(&ws.jtmp);
    }

    let mut ok = true;
    for i in 0..d {
        let mut v = x[i] + h * ws.bundle.b[i];
        for k in 0..r {
            v += ws.bundle.sigma[i * r + k] * dw[k];
        }
        x[i] = v;
        ok &= v.is_finite() && v.abs() <= cap;
    }
    ok
}

/// Advance a [`FlowState`] in place across grid nodes [from, to) using the
/// grid's increments; the endpoint-only counterpart of the recording
/// integrators, used by restart-heavy estimators.
pub fn stream_flow(
    model: &dyn Dynamics,
    grid: &BrownianGrid,
    from: usize,
    to: usize,
    state: &mut FlowState,
    ws: &mut StepWorkspace,
) -> Result<Advance> {
    check_dims(model, grid, &state.x)?;
    if to > grid.steps || from > to {
        return Err(Error::IndexOutOfRange { index: to.max(from), steps: grid.steps });
    }
    let _ = state.order();
    for k in from..to {
        let ok = step_once(
            model,
            grid.node_time(k),
            grid.h,
            grid.increment(k),
            &mut state.x,
            state.jac.as_deref_mut(),
            state.hess.as_mut(),
            ws,
            DEFAULT_EXPLOSION_CAP,
        );
        if !ok {
            return Ok(Advance::Diverged { node: k + 1 });
        }
    }
    Ok(Advance::Done)
}

fn check_dims(model: &dyn Dynamics, grid: &BrownianGrid, x: &[f64]) -> Result<()> {
    if x.len() != model.dim() || grid.r != model.noise_dim() {
        return Err(Error::DimensionMismatch(format!(
            "model dims (d={}, r={}) vs state {} and grid r={}",
            model.dim(),
            model.noise_dim(),
            x.len(),
            grid.r
        )));
    }
    Ok(())
}

fn record_from(
    model: &dyn Dynamics,
    grid: &BrownianGrid,
    from: usize,
    x0: &[f64],
    order: Order,
) -> Result<(FlowPath, Option<TangentPath>, Option<HessianPath>)> {
    check_dims(model, grid, x0)?;
    if from > grid.steps {
        return Err(Error::IndexOutOfRange { index: from, steps: grid.steps });
    }
    let d = model.dim();
    let nodes = grid.steps - from + 1;
    let mut ws = StepWorkspace::new(model, order);
    let mut state = match order {
        Order::Flow => FlowState::flow(x0),
        Order::Tangent => FlowState::tangent(x0),
        Order::Hessian => FlowState::full(x0),
    };
    let mut flow = FlowPath::with_capacity(grid.node_time(from), grid.h, d, nodes);
    let mut tangent =
        order.needs_gradients().then(|| TangentPath::with_capacity(d, nodes));
    let mut hessian =
        order.needs_hessians().then(|| HessianPath::with_capacity(d, nodes));
    let record =
        |flow: &mut FlowPath, tg: &mut Option<TangentPath>, hs: &mut Option<HessianPath>, s: &FlowState| {
            flow.push(&s.x);
            if let Some(tg) = tg {
                tg.push(s.jac.as_ref().unwrap());
            }
            if let Some(hs) = hs {
                hs.push(s.hess.as_ref().unwrap().data());
            }
        };
    record(&mut flow, &mut tangent, &mut hessian, &state);
    for k in from..grid.steps {
        let ok = step_once(
            model,
            grid.node_time(k),
            grid.h,
            grid.increment(k),
            &mut state.x,
            state.jac.as_deref_mut(),
            state.hess.as_mut(),
            &mut ws,
            DEFAULT_EXPLOSION_CAP,
        );
        if !ok {
            flow.exploded = Some(k + 1);
            break;
        }
        record(&mut flow, &mut tangent, &mut hessian, &state);
    }
    Ok((flow, tangent, hessian))
}

pub fn integrate_flow(model: &dyn Dynamics, grid: &BrownianGrid, x: &[f64]) -> Result<FlowPath> {
    Ok(record_from(model, grid, 0, x, Order::Flow)?.0)
}

pub fn integrate_tangent(
    model: &dyn Dynamics,
    grid: &BrownianGrid,
    x: &[f64],
) -> Result<(FlowPath, TangentPath)> {
    let (flow, tangent, _) = record_from(model, grid, 0, x, Order::Tangent)?;
    Ok((flow, tangent.unwrap()))
}

pub fn integrate_hessian(
    model: &dyn Dynamics,
    grid: &BrownianGrid,
    x: &[f64],
) -> Result<(FlowPath, TangentPath, HessianPath)> {
    let (flow, tangent, hessian) = record_from(model, grid, 0, x, Order::Hessian)?;
    Ok((flow, tangent.unwrap(), hessian.unwrap()))
}

/// Recorded restart from node k with state y, reusing increments[k..]: with
/// y equal to a previous run's node-k state, the tail is reproduced
/// bit-for-bit. Fresh variations start at J = I, H = 0.
pub struct RestartPaths {
    pub flow: FlowPath,
    pub tangent: Option<TangentPath>,
    pub hessian: Option<HessianPath>,
}

pub fn restart_flow(
    model: &dyn Dynamics,
    grid: &BrownianGrid,
    from_index: usize,
    y: &[f64],
    want_tangent: bool,
    want_hessian: bool,
) -> Result<RestartPaths> {
    let order = if want_hessian {
        Order::Hessian
    } else if want_tangent {
        Order::Tangent
    } else {
        Order::Flow
    };
    let (flow, tangent, hessian) = record_from(model, grid, from_index, y, order)?;
    Ok(RestartPaths { flow, tangent, hessian })
}

/// Coarse Euler scheme coupled to the fine grid: the drift argument is frozen
/// at the scheme's own state at the last node whose time is a multiple of
/// big_h, while increments are shared with the reference flow. With big_h = h
/// and constant sigma this reproduces integrate_flow exactly.
pub fn integrate_frozen_drift(
    model: &dyn Dynamics,
    grid: &BrownianGrid,
    x: &[f64],
    big_h: f64,
) -> Result<FlowPath> {
    check_dims(model, grid, x)?;
    let ratio = big_h / grid.h;
    let m = ratio.round() as usize;
    if m == 0 || (ratio - m as f64).abs() > 1e-9 * ratio.abs() {
        return Err(Error::FreezeNotMultiple { big_h, h: grid.h });
    }
    let d = model.dim();
    let r = model.noise_dim();
    let mut ws = StepWorkspace::new(model, Order::Flow);
    let mut state = x.to_vec();
    let mut frozen = x.to_vec();
    let mut frozen_time = grid.t0;
    let mut path = FlowPath::with_capacity(grid.t0, grid.h, d, grid.steps + 1);
    path.push(&state);
    for k in 0..grid.steps {
        if k % m == 0 {
            frozen.copy_from_slice(&state);
            frozen_time = grid.node_time(k);
        }
        model.eval(frozen_time, &frozen, Order::Flow, &mut ws.bundle);
        let dw = grid.increment(k);
        let mut ok = true;
        for i in 0..d {
            let mut v = state[i] + grid.h * ws.bundle.b[i];
            for l in 0..r {
                v += ws.bundle.sigma[i * r + l] * dw[l];
            }
            state[i] = v;
            ok &= v.is_finite() && v.abs() <= DEFAULT_EXPLOSION_CAP;
        }
        if !ok {
            path.exploded = Some(k + 1);
            break;
        }
        path.push(&state);
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Gbm1d, LangevinTanh, Ou};
    use approx::assert_relative_eq;

    #[test]
    fn zero_coefficients_give_a_constant_path() {
        let model = Ou { lambda: 0.0, sigma: 0.0, d: 2 };
        let grid = BrownianGrid::sample(1, 0, 0.0, 1.0, 8, 2).unwrap();
        let path = integrate_flow(&model, &grid, &[1.0, -1.0]).unwrap();
        for k in 0..=8 {
            assert_eq!(path.state(k), &[1.0, -1.0]);
        }
    }

    #[test]
    fn pure_noise_path_is_the_running_brownian_sum() {
        let model = Ou { lambda: 0.0, sigma: 1.0, d: 1 };
        let grid = BrownianGrid::sample(2, 5, 0.0, 1.0, 16, 1).unwrap();
        let path = integrate_flow(&model, &grid, &[0.5]).unwrap();
        let mut expect = 0.5;
        assert_eq!(path.state(0)[0], expect);
        for k in 0..16 {
            expect += grid.increment(k)[0];
            assert_eq!(path.state(k + 1)[0], expect);
        }
    }

    #[test]
    fn constant_coefficients_keep_the_tangent_at_identity() {
        let model = Ou { lambda: 0.0, sigma: 0.7, d: 2 };
        let grid = BrownianGrid::sample(3, 1, 0.0, 1.0, 8, 2).unwrap();
        let (_, tangent) = integrate_tangent(&model, &grid, &[0.0, 0.0]).unwrap();
        for k in 0..=8 {
            assert_eq!(tangent.matrix(k), &[1.0, 0.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn ou_tangent_is_the_deterministic_euler_power() {
        let model = Ou { lambda: 1.0, sigma: 1.0, d: 1 };
        let grid = BrownianGrid::sample(4, 2, 0.0, 1.0, 32, 1).unwrap();
        let (_, tangent) = integrate_tangent(&model, &grid, &[1.0]).unwrap();
        let h = grid.h;
        for k in 0..=32 {
            assert_relative_eq!(tangent.matrix(k)[0], (1.0 - h).powi(k as i32), max_relative = 1e-12);
        }
    }

    #[test]
    fn gbm_tangent_times_start_equals_state() {
        let model = Gbm1d { beta: -1.0, alpha: 0.2 };
        let grid = BrownianGrid::sample(5, 3, 0.0, 1.0, 64, 1).unwrap();
        let x = 1.7;
        let (flow, tangent) = integrate_tangent(&model, &grid, &[x]).unwrap();
        for k in 0..=64 {
            assert_relative_eq!(tangent.matrix(k)[0] * x, flow.state(k)[0], max_relative = 1e-12);
        }
    }

    #[test]
    fn linear_models_have_identically_zero_hessian() {
        let model = Ou { lambda: 1.0, sigma: 0.5, d: 2 };
        let grid = BrownianGrid::sample(6, 0, 0.0, 1.0, 16, 2).unwrap();
        let (_, _, hessian) = integrate_hessian(&model, &grid, &[1.0, 2.0]).unwrap();
        for k in 0..=16 {
            assert!(hessian.tensor(k).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn hessian_stays_symmetric_in_first_two_indices() {
        let model = LangevinTanh::standard(2);
        let grid = BrownianGrid::sample(7, 0, 0.0, 1.0, 32, 2).unwrap();
        let (_, _, hessian) = integrate_hessian(&model, &grid, &[0.5, -0.3]).unwrap();
        let d = 2;
        for k in 0..=32 {
            let t = hessian.tensor(k);
            for i in 0..d {
                for j in 0..d {
                    for m in 0..d {
                        let a = t[(i * d + j) * d + m];
                        let b = t[(j * d + i) * d + m];
                        assert_eq!(a, b);
                    }
                }
            }
        }
    }

    #[test]
    fn restart_reproduces_the_tail_bitwise() {
        let model = LangevinTanh::standard(2);
        let grid = BrownianGrid::sample(8, 1, 0.0, 2.0, 64, 2).unwrap();
        let base = integrate_flow(&model, &grid, &[0.4, 0.9]).unwrap();
        let k = 20;
        let restarted = restart_flow(&model, &grid, k, base.state(k), false, false).unwrap();
        for j in 0..restarted.flow.nodes() {
            assert_eq!(restarted.flow.state(j), base.state(k + j));
        }
    }

    #[test]
    fn restart_at_zero_matches_integrate_flow() {
        let model = Ou { lambda: 1.0, sigma: 1.0, d: 1 };
        let grid = BrownianGrid::sample(9, 2, 0.0, 1.0, 16, 1).unwrap();
        let a = integrate_flow(&model, &grid, &[1.0]).unwrap();
        let b = restart_flow(&model, &grid, 0, &[1.0], false, false).unwrap();
        assert_eq!(a, b.flow);
    }

    #[test]
    fn streaming_advance_matches_recorded_states() {
        let model = LangevinTanh::standard(2);
        let grid = BrownianGrid::sample(10, 4, 0.0, 1.0, 32, 2).unwrap();
        let (flow, tangent, hessian) = integrate_hessian(&model, &grid, &[0.3, -0.2]).unwrap();
        let mut state = FlowState::full(&[0.3, -0.2]);
        let mut ws = StepWorkspace::new(&model, Order::Hessian);
        let adv = stream_flow(&model, &grid, 0, 32, &mut state, &mut ws).unwrap();
        assert!(adv.is_done());
        assert_eq!(state.x.as_slice(), flow.last());
        assert_eq!(state.jac.as_deref().unwrap(), tangent.last());
        assert_eq!(state.hess.as_ref().unwrap().data(), hessian.last());
    }

    #[test]
    fn exploding_model_is_flagged_not_nan() {
        // Strongly unstable drift: dX = 40 X dt with a large start explodes
        // past the cap quickly.
        let model = Gbm1d { beta: 40.0, alpha: 0.0 };
        let grid = BrownianGrid::sample(11, 0, 0.0, 10.0, 400, 1).unwrap();
        let path = integrate_flow(&model, &grid, &[1e7]).unwrap();
        assert!(path.exploded.is_some());
        assert!(!path.is_finite());
        assert!(path.state(path.nodes() - 1).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn frozen_drift_with_unit_ratio_matches_plain_euler() {
        let model = LangevinTanh::standard(1);
        let grid = BrownianGrid::sample(12, 0, 0.0, 1.0, 32, 1).unwrap();
        let plain = integrate_flow(&model, &grid, &[0.7]).unwrap();
        let frozen = integrate_frozen_drift(&model, &grid, &[0.7], grid.h).unwrap();
        assert_eq!(plain, frozen);
    }

    #[test]
    fn frozen_drift_requires_a_multiple_of_the_step() {
        let model = LangevinTanh::standard(1);
        let grid = BrownianGrid::sample(12, 0, 0.0, 1.0, 32, 1).unwrap();
        let err = integrate_frozen_drift(&model, &grid, &[0.7], 0.07).unwrap_err();
        assert!(matches!(err, Error::FreezeNotMultiple { .. }));
    }

    #[test]
    fn zero_drift_frozen_scheme_is_the_noise_path() {
        let model = Ou { lambda: 0.0, sigma: 1.0, d: 1 };
        let grid = BrownianGrid::sample(13, 0, 0.0, 1.0, 16, 1).unwrap();
        let frozen = integrate_frozen_drift(&model, &grid, &[0.0], 0.25).unwrap();
        let plain = integrate_flow(&model, &grid, &[0.0]).unwrap();
        assert_eq!(frozen, plain);
    }
}
