//! Built-in model catalog.
//!
//! Each model carries its closed-form parameters in its metadata and a
//! sampling box on which derivative validation and spectral scans run.

use serde::{Deserialize, Serialize};

use super::{Dynamics, EvalBundle, ModelMeta, Order};

/// Stable catalog listing order used by the CLI.
pub const CATALOG_NAMES: [&str; 4] = ["ou", "gbm", "langevin-tanh", "frozen-drift"];

/// Serializable selector for a catalog model, the form configuration files
/// use to name a dynamics and its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelSpec {
    Ou { lambda: f64, sigma: f64, d: usize },
    Gbm { beta: f64, alpha: f64 },
    LangevinTanh { d: usize, sigma: f64, tanh_weight: f64 },
    MeanField { n: usize, theta: f64, gamma: f64, sigma: f64 },
}

impl ModelSpec {
    pub fn build(&self) -> Box<dyn Dynamics> {
        match *self {
            ModelSpec::Ou { lambda, sigma, d } => Box::new(Ou { lambda, sigma, d }),
            ModelSpec::Gbm { beta, alpha } => Box::new(Gbm1d { beta, alpha }),
            ModelSpec::LangevinTanh { d, sigma, tanh_weight } => {
                Box::new(LangevinTanh { d, sigma, tanh_weight })
            }
            ModelSpec::MeanField { n, theta, gamma, sigma } => {
                Box::new(MeanFieldParticles { n, theta, gamma, sigma })
            }
        }
    }

    pub fn dim(&self) -> usize {
        match *self {
            ModelSpec::Ou { d, .. } | ModelSpec::LangevinTanh { d, .. } => d,
            ModelSpec::Gbm { .. } => 1,
            ModelSpec::MeanField { n, .. } => n,
        }
    }
}

/// Ornstein-Uhlenbeck: dX = -lambda X dt + sigma dW, diffusion sigma * I,
/// r = d.
#[derive(Debug, Clone, Copy)]
pub struct Ou {
    pub lambda: f64,
    pub sigma: f64,
    pub d: usize,
}

impl Dynamics for Ou {
    fn dim(&self) -> usize {
        self.d
    }

    fn noise_dim(&self) -> usize {
        self.d
    }

    fn meta(&self) -> ModelMeta {
        ModelMeta {
            name: "ou".into(),
            constant_diffusion: true,
            params: vec![
                ("lambda".into(), self.lambda),
                ("sigma".into(), self.sigma),
                ("d".into(), self.d as f64),
            ],
            box_lo: vec![-2.0; self.d],
            box_hi: vec![2.0; self.d],
        }
    }

    fn eval(&self, _t: f64, x: &[f64], order: Order, out: &mut EvalBundle) {
        let d = self.d;
        for i in 0..d {
            out.b[i] = -self.lambda * x[i];
        }
        out.sigma.fill(0.0);
        for i in 0..d {
            out.sigma[i * d + i] = self.sigma;
        }
        if order.needs_gradients() {
            out.grad_b.fill(0.0);
            for i in 0..d {
                out.grad_b[i * d + i] = -self.lambda;
            }
            out.grad_sigma.fill(0.0);
        }
        if order.needs_hessians() {
            out.hess_b.fill(0.0);
            for h in &mut out.hess_sigma {
                h.fill(0.0);
            }
        }
    }
}

/// Scalar geometric Brownian motion: dX = beta X dt + alpha X dW.
#[derive(Debug, Clone, Copy)]
pub struct Gbm1d {
    pub beta: f64,
    pub alpha: f64,
}

impl Dynamics for Gbm1d {
    fn dim(&self) -> usize {
        1
    }

    fn noise_dim(&self) -> usize {
        1
    }

    fn meta(&self) -> ModelMeta {
        ModelMeta {
            name: "gbm".into(),
            constant_diffusion: false,
            params: vec![("beta".into(), self.beta), ("alpha".into(), self.alpha)],
            box_lo: vec![0.2],
            box_hi: vec![3.0],
        }
    }

    fn eval(&self, _t: f64, x: &[f64], order: Order, out: &mut EvalBundle) {
        out.b[0] = self.beta * x[0];
        out.sigma[0] = self.alpha * x[0];
        if order.needs_gradients() {
            out.grad_b[0] = self.beta;
            out.grad_sigma[0] = self.alpha;
        }
        if order.needs_hessians() {
            out.hess_b.fill(0.0);
            out.hess_sigma[0].fill(0.0);
        }
    }
}

/// Overdamped Langevin diffusion for the separable convex potential
/// U(x) = ||x||^2/2 + w * sum_i ln cosh(x_i):
/// dX = -(X + w tanh(X)) dt + sigma dW, componentwise tanh, diffusion
/// sigma * I. The drift Jacobian is -diag(1 + w sech^2(x_i)), so its log-norm
/// is at most -1 uniformly, and the only nonzero Hessian entries are
/// ((i,i),i) = 2 w sech^2(x_i) tanh(x_i).
///
/// The weight exposes the drift family b + delta tanh used by the expansion
/// experiments: weight 1 - delta is the base drift perturbed by delta tanh.
#[derive(Debug, Clone, Copy)]
pub struct LangevinTanh {
    pub d: usize,
    pub sigma: f64,
    pub tanh_weight: f64,
}

impl LangevinTanh {
    pub fn standard(d: usize) -> Self {
        LangevinTanh { d, sigma: 1.0, tanh_weight: 1.0 }
    }
}

impl Dynamics for LangevinTanh {
    fn dim(&self) -> usize {
        self.d
    }

    fn noise_dim(&self) -> usize {
        self.d
    }

    fn meta(&self) -> ModelMeta {
        ModelMeta {
            name: "langevin-tanh".into(),
            constant_diffusion: true,
            params: vec![
                ("d".into(), self.d as f64),
                ("sigma".into(), self.sigma),
                ("tanh_weight".into(), self.tanh_weight),
            ],
            box_lo: vec![-2.0; self.d],
            box_hi: vec![2.0; self.d],
        }
    }

    fn eval(&self, _t: f64, x: &[f64], order: Order, out: &mut EvalBundle) {
        let d = self.d;
        let w = self.tanh_weight;
        for i in 0..d {
            out.b[i] = -(x[i] + w * x[i].tanh());
        }
        out.sigma.fill(0.0);
        for i in 0..d {
            out.sigma[i * d + i] = self.sigma;
        }
        if order.needs_gradients() {
            out.grad_b.fill(0.0);
            for i in 0..d {
                let sech2 = 1.0 / x[i].cosh().powi(2);
                out.grad_b[i * d + i] = -(1.0 + w * sech2);
            }
            out.grad_sigma.fill(0.0);
        }
        if order.needs_hessians() {
            out.hess_b.fill(0.0);
            for i in 0..d {
                let c = x[i].cosh();
                let sech2 = 1.0 / (c * c);
                out.hess_b.set(i, i, i, 2.0 * w * sech2 * x[i].tanh());
            }
            for h in &mut out.hess_sigma {
                h.fill(0.0);
            }
        }
    }
}

/// Interacting particle system in R^n with empirical-mean coupling:
/// dX^i = [-X^i + theta (m - X^i) + gamma tanh(m)] dt + sigma dW^i with
/// m = (1/n) sum_j X^j. The drift is linear in each particle given the mean;
/// the tanh term makes the mean-field limit drift nonlinear, so the finite-n
/// bias is visible.
#[derive(Debug, Clone, Copy)]
pub struct MeanFieldParticles {
    pub n: usize,
    pub theta: f64,
    pub gamma: f64,
    pub sigma: f64,
}

impl MeanFieldParticles {
    /// Drift of the McKean-Vlasov limit mean: m' = -m + gamma tanh(m).
    pub fn limit_mean_drift(&self, m: f64) -> f64 {
        -m + self.gamma * m.tanh()
    }
}

impl Dynamics for MeanFieldParticles {
    fn dim(&self) -> usize {
        self.n
    }

    fn noise_dim(&self) -> usize {
        self.n
    }

    fn meta(&self) -> ModelMeta {
        ModelMeta {
            name: "mean-field".into(),
            constant_diffusion: true,
            params: vec![
                ("n".into(), self.n as f64),
                ("theta".into(), self.theta),
                ("gamma".into(), self.gamma),
                ("sigma".into(), self.sigma),
            ],
            box_lo: vec![-1.5; self.n],
            box_hi: vec![1.5; self.n],
        }
    }

    fn eval(&self, _t: f64, x: &[f64], order: Order, out: &mut EvalBundle) {
        let n = self.n;
        let nf = n as f64;
        let m = x.iter().sum::<f64>() / nf;
        let pull = self.theta;
        let attract = self.gamma * m.tanh();
        for i in 0..n {
            out.b[i] = -x[i] + pull * (m - x[i]) + attract;
        }
        out.sigma.fill(0.0);
        for i in 0..n {
            out.sigma[i * n + i] = self.sigma;
        }
        if order.needs_gradients() {
            let c = m.cosh();
            let mean_sens = (pull + self.gamma / (c * c)) / nf;
            for j in 0..n {
                for i in 0..n {
                    let diag = if i == j { -1.0 - pull } else { 0.0 };
                    out.grad_b[j * n + i] = diag + mean_sens;
                }
            }
            out.grad_sigma.fill(0.0);
        }
        if order.needs_hessians() {
            let c = m.cosh();
            let dd_tanh = -2.0 * m.tanh() / (c * c);
            let v = self.gamma * dd_tanh / (nf * nf);
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        out.hess_b.set(i, j, k, v);
                    }
                }
            }
            for h in &mut out.hess_sigma {
                h.fill(0.0);
            }
        }
    }
}
