//! Diffusion models (b, sigma) with analytic derivatives.
//!
//! Conventions, used verbatim by the integrators: the state dimension is d
//! and the noise dimension r; diffusion matrices are d x r row-major with one
//! column per noise component; gradients store the differentiation index
//! first, grad[i*d + j] = d h^j / d x_i; Hessians are (2,1)-tensors with
//! entry ((i,j),m) = d_i d_j h^m, symmetric in (i,j). Analytic derivatives
//! are required; finite differences only validate them.

mod catalog;

pub use catalog::{Gbm1d, LangevinTanh, MeanFieldParticles, ModelSpec, Ou, CATALOG_NAMES};

use crate::linalg::Tensor3;
use crate::rng::{substream, tag};
use crate::{Error, Result};
use rand::Rng;
use serde::Serialize;

/// How much of the coefficient jet an integrator step needs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Order {
    /// b and sigma only.
    Flow,
    /// Adds grad b and grad sigma_k.
    Tangent,
    /// Adds the (2,1)-Hessians of b and sigma_k.
    Hessian,
}

impl Order {
    pub fn needs_gradients(self) -> bool {
        self >= Order::Tangent
    }

    pub fn needs_hessians(self) -> bool {
        self >= Order::Hessian
    }
}

/// Reusable output buffers for one coefficient evaluation. Buffers for
/// derivative levels above the requested order stay empty, so a flow-only
/// bundle of a large particle system never allocates d^2 entries.
#[derive(Debug, Clone)]
pub struct EvalBundle {
    pub d: usize,
    pub r: usize,
    /// Drift, length d.
    pub b: Vec<f64>,
    /// Diffusion, d x r row-major.
    pub sigma: Vec<f64>,
    /// grad b, d x d, differentiation index first.
    pub grad_b: Vec<f64>,
    /// grad sigma_k for every noise column, r consecutive d x d blocks.
    pub grad_sigma: Vec<f64>,
    pub hess_b: Tensor3,
    pub hess_sigma: Vec<Tensor3>,
}

impl EvalBundle {
    pub fn for_order(d: usize, r: usize, order: Order) -> Self {
        let grads = order.needs_gradients();
        let hess = order.needs_hessians();
        EvalBundle {
            d,
            r,
            b: vec![0.0; d],
            sigma: vec![0.0; d * r],
            grad_b: if grads { vec![0.0; d * d] } else { Vec::new() },
            grad_sigma: if grads { vec![0.0; r * d * d] } else { Vec::new() },
            hess_b: if hess { Tensor3::zeros(d) } else { Tensor3::zeros(0) },
            hess_sigma: if hess { vec![Tensor3::zeros(d); r] } else { Vec::new() },
        }
    }

    /// grad of diffusion column k as a d x d slice.
    #[inline]
    pub fn grad_sigma_col(&self, k: usize) -> &[f64] {
        let dd = self.d * self.d;
        &self.grad_sigma[k * dd..(k + 1) * dd]
    }

    #[inline]
    pub fn grad_sigma_col_mut(&mut self, k: usize) -> &mut [f64] {
        let dd = self.d * self.d;
        &mut self.grad_sigma[k * dd..(k + 1) * dd]
    }

    /// a = sigma sigma' (d x d), written into `out`.
    pub fn diffusion_square(&self, out: &mut [f64]) {
        let (d, r) = (self.d, self.r);
        for i in 0..d {
            for j in 0..d {
                let mut acc = 0.0;
                for k in 0..r {
                    acc += self.sigma[i * r + k] * self.sigma[j * r + k];
                }
                out[i * d + j] = acc;
            }
        }
    }

    fn is_finite(&self, order: Order) -> bool {
        let mut ok = self.b.iter().all(|v| v.is_finite()) && self.sigma.iter().all(|v| v.is_finite());
        if order.needs_gradients() {
            ok = ok
                && self.grad_b.iter().all(|v| v.is_finite())
                && self.grad_sigma.iter().all(|v| v.is_finite());
        }
        if order.needs_hessians() {
            ok = ok
                && self.hess_b.data().iter().all(|v| v.is_finite())
                && self.hess_sigma.iter().all(|t| t.data().iter().all(|v| v.is_finite()));
        }
        ok
    }
}

/// Descriptive metadata: closed-form parameters for oracles, the sampling box
/// for derivative validation and spectral scans, and structure flags.
#[derive(Debug, Clone, Serialize)]
pub struct ModelMeta {
    pub name: String,
    pub constant_diffusion: bool,
    pub params: Vec<(String, f64)>,
    pub box_lo: Vec<f64>,
    pub box_hi: Vec<f64>,
}

/// A diffusion model dX = b(t, X) dt + sigma(t, X) dW with analytic
/// derivatives up to second order. Evaluation must fill every buffer the
/// requested order covers and must be pure, so bundles can be reused across
/// concurrent path workers.
pub trait Dynamics: Sync {
    fn dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    fn meta(&self) -> ModelMeta;
    fn eval(&self, t: f64, x: &[f64], order: Order, out: &mut EvalBundle);
}

/// Allocating convenience evaluation of the full jet, with a finiteness check.
pub fn eval_derivatives(model: &dyn Dynamics, t: f64, x: &[f64]) -> Result<EvalBundle> {
    if x.len() != model.dim() {
        return Err(Error::DimensionMismatch(format!(
            "state has {} entries, model dim is {}",
            x.len(),
            model.dim()
        )));
    }
    let mut out = EvalBundle::for_order(model.dim(), model.noise_dim(), Order::Hessian);
    model.eval(t, x, Order::Hessian, &mut out);
    if !out.is_finite(Order::Hessian) {
        return Err(Error::NonFiniteModel { t, x: x.to_vec() });
    }
    Ok(out)
}

/// Two models on the same state/noise space, compared under common noise.
#[derive(Clone, Copy)]
pub struct ModelPair<'a> {
    pub base: &'a dyn Dynamics,
    pub perturbed: &'a dyn Dynamics,
}

impl<'a> ModelPair<'a> {
    pub fn new(base: &'a dyn Dynamics, perturbed: &'a dyn Dynamics) -> Result<Self> {
        if base.dim() != perturbed.dim() || base.noise_dim() != perturbed.noise_dim() {
            return Err(Error::DimensionMismatch(format!(
                "pair dims ({}, {}) vs ({}, {})",
                base.dim(),
                base.noise_dim(),
                perturbed.dim(),
                perturbed.noise_dim()
            )));
        }
        Ok(ModelPair { base, perturbed })
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn noise_dim(&self) -> usize {
        self.base.noise_dim()
    }
}

/// Coefficient differences of a pair at one point: Delta b = b - bbar,
/// Delta sigma = sigma - sigmabar, and Delta a = sigma sigma' - sigmabar sigmabar'
/// formed from the two squares, never from (Delta sigma)^2.
#[derive(Debug, Clone)]
pub struct DeltaEval {
    pub delta_b: Vec<f64>,
    pub delta_sigma: Vec<f64>,
    pub delta_a: Vec<f64>,
}

/// Scratch for repeated in-loop difference evaluations.
pub struct PairScratch {
    base: EvalBundle,
    perturbed: EvalBundle,
    a: Vec<f64>,
    abar: Vec<f64>,
    pub delta_b: Vec<f64>,
    pub delta_sigma: Vec<f64>,
    pub delta_a: Vec<f64>,
}

impl PairScratch {
    pub fn new(pair: &ModelPair) -> Self {
        let (d, r) = (pair.dim(), pair.noise_dim());
        PairScratch {
            base: EvalBundle::for_order(d, r, Order::Flow),
            perturbed: EvalBundle::for_order(d, r, Order::Flow),
            a: vec![0.0; d * d],
            abar: vec![0.0; d * d],
            delta_b: vec![0.0; d],
            delta_sigma: vec![0.0; d * r],
            delta_a: vec![0.0; d * d],
        }
    }

    pub fn eval(&mut self, pair: &ModelPair, t: f64, x: &[f64]) {
        pair.base.eval(t, x, Order::Flow, &mut self.base);
        pair.perturbed.eval(t, x, Order::Flow, &mut self.perturbed);
        for i in 0..self.delta_b.len() {
            self.delta_b[i] = self.base.b[i] - self.perturbed.b[i];
        }
        for i in 0..self.delta_sigma.len() {
            self.delta_sigma[i] = self.base.sigma[i] - self.perturbed.sigma[i];
        }
        self.base.diffusion_square(&mut self.a);
        self.perturbed.diffusion_square(&mut self.abar);
        for i in 0..self.delta_a.len() {
            self.delta_a[i] = self.a[i] - self.abar[i];
        }
    }
}

pub fn delta_eval(pair: &ModelPair, t: f64, x: &[f64]) -> Result<DeltaEval> {
    if x.len() != pair.dim() {
        return Err(Error::DimensionMismatch(format!(
            "state has {} entries, pair dim is {}",
            x.len(),
            pair.dim()
        )));
    }
    let mut scratch = PairScratch::new(pair);
    scratch.eval(pair, t, x);
    Ok(DeltaEval {
        delta_b: scratch.delta_b,
        delta_sigma: scratch.delta_sigma,
        delta_a: scratch.delta_a,
    })
}

/// Worst-case relative mismatch between analytic derivatives and central
/// finite differences, one figure per derivative level. Hessians are
/// differenced from the analytic gradients to keep the subtraction noise at
/// O(eps^2) instead of O(eps^{-2}) rounding.
#[derive(Debug, Clone, Serialize)]
pub struct FdReport {
    pub max_rel_grad_b: f64,
    pub max_rel_grad_sigma: f64,
    pub max_rel_hess_b: f64,
    pub max_rel_hess_sigma: f64,
    pub samples: usize,
}

impl FdReport {
    pub fn max_error(&self) -> f64 {
        self.max_rel_grad_b
            .max(self.max_rel_grad_sigma)
            .max(self.max_rel_hess_b)
            .max(self.max_rel_hess_sigma)
    }
}

pub fn finite_difference_check(
    model: &dyn Dynamics,
    samples: &[(f64, Vec<f64>)],
    eps: f64,
) -> FdReport {
    let (d, r) = (model.dim(), model.noise_dim());
    let mut report = FdReport {
        max_rel_grad_b: 0.0,
        max_rel_grad_sigma: 0.0,
        max_rel_hess_b: 0.0,
        max_rel_hess_sigma: 0.0,
        samples: samples.len(),
    };
    let mut at = EvalBundle::for_order(d, r, Order::Hessian);
    let mut plus = EvalBundle::for_order(d, r, Order::Tangent);
    let mut minus = EvalBundle::for_order(d, r, Order::Tangent);
    let mut shifted = vec![0.0; d];
    for (t, x) in samples {
        model.eval(*t, x, Order::Hessian, &mut at);
        let scale_grad_b = rel_scale(&at.grad_b);
        let scale_grad_sigma = rel_scale(&at.grad_sigma);
        let scale_hess_b = rel_scale(at.hess_b.data());
        let scale_hess_sigma =
            at.hess_sigma.iter().map(|h| rel_scale(h.data())).fold(1.0f64, f64::max);
        for i in 0..d {
            shifted.copy_from_slice(x);
            shifted[i] = x[i] + eps;
            model.eval(*t, &shifted, Order::Tangent, &mut plus);
            shifted[i] = x[i] - eps;
            model.eval(*t, &shifted, Order::Tangent, &mut minus);
            for j in 0..d {
                let fd = (plus.b[j] - minus.b[j]) / (2.0 * eps);
                let err = (at.grad_b[i * d + j] - fd).abs() / scale_grad_b;
                report.max_rel_grad_b = report.max_rel_grad_b.max(err);
                for k in 0..r {
                    let fd = (plus.sigma[j * r + k] - minus.sigma[j * r + k]) / (2.0 * eps);
                    let err = (at.grad_sigma_col(k)[i * d + j] - fd).abs() / scale_grad_sigma;
                    report.max_rel_grad_sigma = report.max_rel_grad_sigma.max(err);
                }
                for m in 0..d {
                    let fd = (plus.grad_b[j * d + m] - minus.grad_b[j * d + m]) / (2.0 * eps);
                    let err = (at.hess_b.get(i, j, m) - fd).abs() / scale_hess_b;
                    report.max_rel_hess_b = report.max_rel_hess_b.max(err);
                    for k in 0..r {
                        let fd = (plus.grad_sigma_col(k)[j * d + m]
                            - minus.grad_sigma_col(k)[j * d + m])
                            / (2.0 * eps);
                        let err = (at.hess_sigma[k].get(i, j, m) - fd).abs() / scale_hess_sigma;
                        report.max_rel_hess_sigma = report.max_rel_hess_sigma.max(err);
                    }
                }
            }
        }
    }
    report
}

fn rel_scale(values: &[f64]) -> f64 {
    values.iter().fold(1.0f64, |acc, v| acc.max(v.abs()))
}

/// Run the finite-difference check on points drawn uniformly from the model's
/// declared sampling box.
pub fn finite_difference_check_box(model: &dyn Dynamics, n_samples: usize, seed: u64) -> FdReport {
    let meta = model.meta();
    let mut rng = substream(seed, &[tag::SAMPLE_BOX]);
    let samples: Vec<(f64, Vec<f64>)> = (0..n_samples)
        .map(|_| {
            let t: f64 = rng.gen::<f64>();
            let x: Vec<f64> = meta
                .box_lo
                .iter()
                .zip(&meta.box_hi)
                .map(|(lo, hi)| lo + (hi - lo) * rng.gen::<f64>())
                .collect();
            (t, x)
        })
        .collect();
    finite_difference_check(model, &samples, 1e-5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn ou_jet_at_a_point() {
        let model = Ou { lambda: 1.0, sigma: 1.0, d: 1 };
        let bundle = eval_derivatives(&model, 0.0, &[2.0]).unwrap();
        assert_eq!(bundle.b, vec![-2.0]);
        assert_eq!(bundle.grad_b, vec![-1.0]);
        assert_eq!(bundle.sigma, vec![1.0]);
        assert_eq!(bundle.grad_sigma, vec![0.0]);
        assert_eq!(bundle.hess_b.data(), &[0.0]);
    }

    #[test]
    fn gbm_jet_at_a_point() {
        let model = Gbm1d { beta: 0.1, alpha: 0.2 };
        let bundle = eval_derivatives(&model, 0.0, &[3.0]).unwrap();
        assert_relative_eq!(bundle.b[0], 0.3, max_relative = 1e-15);
        assert_relative_eq!(bundle.grad_b[0], 0.1, max_relative = 1e-15);
        assert_relative_eq!(bundle.sigma[0], 0.6, max_relative = 1e-15);
        assert_relative_eq!(bundle.grad_sigma[0], 0.2, max_relative = 1e-15);
        assert_eq!(bundle.hess_b.data(), &[0.0]);
        assert_eq!(bundle.hess_sigma[0].data(), &[0.0]);
    }

    #[test]
    fn langevin_gradient_at_origin_is_minus_two_identity() {
        let model = LangevinTanh::standard(2);
        let bundle = eval_derivatives(&model, 0.0, &[0.0, 0.0]).unwrap();
        assert_eq!(bundle.b, vec![0.0, 0.0]);
        assert_eq!(bundle.grad_b, vec![-2.0, 0.0, 0.0, -2.0]);
        assert!(bundle.hess_b.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identical_pair_has_exactly_zero_deltas() {
        let a = Ou { lambda: 1.0, sigma: 1.0, d: 2 };
        let pair = ModelPair::new(&a, &a).unwrap();
        let delta = delta_eval(&pair, 0.0, &[0.3, -0.7]).unwrap();
        assert!(delta.delta_b.iter().all(|v| *v == 0.0));
        assert!(delta.delta_sigma.iter().all(|v| *v == 0.0));
        assert!(delta.delta_a.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn delta_a_uses_the_difference_of_squares() {
        let a = Ou { lambda: 1.0, sigma: 1.0, d: 1 };
        let b = Ou { lambda: 1.0, sigma: 0.5, d: 1 };
        let pair = ModelPair::new(&a, &b).unwrap();
        let delta = delta_eval(&pair, 0.0, &[1.0]).unwrap();
        assert_relative_eq!(delta.delta_sigma[0], 0.5, max_relative = 1e-15);
        assert_relative_eq!(delta.delta_a[0], 0.75, max_relative = 1e-15);
    }

    #[test]
    fn drift_rate_delta_is_linear() {
        let a = Ou { lambda: 1.0, sigma: 1.0, d: 1 };
        let b = Ou { lambda: 2.0, sigma: 1.0, d: 1 };
        let pair = ModelPair::new(&a, &b).unwrap();
        let delta = delta_eval(&pair, 0.0, &[3.0]).unwrap();
        assert_relative_eq!(delta.delta_b[0], 3.0, max_relative = 1e-15);
    }

    #[test]
    fn catalog_passes_finite_difference_validation() {
        let models: Vec<Box<dyn Dynamics>> = vec![
            Box::new(Ou { lambda: 1.3, sigma: 0.8, d: 3 }),
            Box::new(Gbm1d { beta: 0.1, alpha: 0.2 }),
            Box::new(LangevinTanh::standard(2)),
            Box::new(MeanFieldParticles { n: 4, theta: 0.5, gamma: 0.8, sigma: 0.5 }),
        ];
        for model in &models {
            let report = finite_difference_check_box(model.as_ref(), 100, 42);
            assert!(
                report.max_error() < 1e-5,
                "{}: fd mismatch {:?}",
                model.meta().name,
                report
            );
        }
    }

    #[test]
    fn langevin_fd_example_point() {
        let model = LangevinTanh::standard(2);
        let report = finite_difference_check(&model, &[(0.0, vec![0.5, -0.3])], 1e-5);
        assert!(report.max_error() <= 1e-6, "{report:?}");
    }

    #[test]
    fn diffusion_square_is_positive_semidefinite_on_box() {
        let model = LangevinTanh { d: 2, sigma: 0.7, tanh_weight: 1.0 };
        let mut bundle = EvalBundle::for_order(2, 2, Order::Flow);
        let mut a = vec![0.0; 4];
        for x0 in [-2.0, 0.0, 2.0] {
            for x1 in [-2.0, 0.0, 2.0] {
                model.eval(0.0, &[x0, x1], Order::Flow, &mut bundle);
                bundle.diffusion_square(&mut a);
                // 2x2 symmetric psd: trace and determinant nonnegative.
                assert!(a[0] + a[3] >= 0.0);
                assert!(a[0] * a[3] - a[1] * a[2] >= -1e-15);
            }
        }
    }
}
