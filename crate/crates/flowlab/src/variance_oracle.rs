//! Exact linear-model oracles used to validate the numerical pipeline.
//!
//! Everything here is evaluated from the explicit solutions of linear models:
//! the Ornstein-Uhlenbeck flow e^{-lambda(t-s)}x + Sigma int e^{-lambda(t-u)} dW_u
//! and scalar geometric Brownian motion x exp((beta - alpha^2/2)(t-s) + alpha(W_t-W_s)).
//! None of it calls the Euler integrators, so oracle and pipeline are free to
//! disagree; tests treat any disagreement as a pipeline bug.

use crate::paths::{BrownianGrid, FlowPath};
use crate::{Error, Result};
use statrs::function::erf::erf;
use statrs::function::gamma::gamma;

/// Linear model with closed-form flow, tangent and moment formulas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LinearOracle {
    /// dX = -lambda X dt + sigma dW in R^d with diffusion sigma * I (r = d).
    Ou { lambda: f64, sigma: f64, d: usize },
    /// Scalar dX = beta X dt + alpha X dW.
    Gbm { beta: f64, alpha: f64 },
}

impl LinearOracle {
    pub fn dim(&self) -> usize {
        match self {
            LinearOracle::Ou { d, .. } => *d,
            LinearOracle::Gbm { .. } => 1,
        }
    }

    pub fn noise_dim(&self) -> usize {
        self.dim()
    }

    /// Exact-in-distribution flow on the grid nodes, driven by the grid's
    /// increments. OU uses per-step factors e^{-lambda h} with the
    /// variance-matching noise weight, GBM exponentiates the running Brownian
    /// sum, so neither carries Euler bias.
    pub fn oracle_flow(&self, grid: &BrownianGrid, x: &[f64]) -> Result<FlowPath> {
        let d = self.dim();
        if x.len() != d || grid.r != self.noise_dim() {
            return Err(Error::DimensionMismatch(format!(
                "oracle dims (d={d}, r={}) vs state {} and grid r={}",
                self.noise_dim(),
                x.len(),
                grid.r
            )));
        }
        let mut path = FlowPath::with_capacity(grid.t0, grid.h, d, grid.steps + 1);
        match *self {
            LinearOracle::Ou { lambda, sigma, .. } => {
                let decay = (-lambda * grid.h).exp();
                let weight = sigma * ou_step_weight(lambda, grid.h);
                let mut state = x.to_vec();
                path.push(&state);
                for k in 0..grid.steps {
                    let dw = grid.increment(k);
                    for i in 0..d {
                        state[i] = decay * state[i] + weight * dw[i];
                    }
                    path.push(&state);
                }
            }
            LinearOracle::Gbm { beta, alpha } => {
                let w = grid.cumulative(0);
                for (k, wk) in w.iter().enumerate() {
                    let t = k as f64 * grid.h;
                    let v = x[0] * ((beta - 0.5 * alpha * alpha) * t + alpha * wk).exp();
                    path.push(&[v]);
                }
            }
        }
        Ok(path)
    }

    /// Tangent matrix grad X at node k (row-major d x d). For OU this is the
    /// deterministic e^{-lambda t_k} I; for GBM it is X_k / x scaled by the
    /// exact flow, which is independent of x.
    pub fn oracle_tangent(&self, grid: &BrownianGrid, k: usize) -> Result<Vec<f64>> {
        if k > grid.steps {
            return Err(Error::IndexOutOfRange { index: k, steps: grid.steps });
        }
        let t = k as f64 * grid.h;
        match *self {
            LinearOracle::Ou { lambda, d, .. } => {
                let mut m = vec![0.0; d * d];
                let decay = (-lambda * t).exp();
                for i in 0..d {
                    m[i * d + i] = decay;
                }
                Ok(m)
            }
            LinearOracle::Gbm { beta, alpha } => {
                let w = grid.cumulative(0)[k];
                Ok(vec![((beta - 0.5 * alpha * alpha) * t + alpha * w).exp()])
            }
        }
    }

    /// E||X_t||^n^{1/n} started from x at time 0.
    pub fn flow_moment(&self, n: u32, t: f64, x: &[f64]) -> Result<f64> {
        match *self {
            LinearOracle::Ou { lambda, sigma, d } => {
                if x.len() != d {
                    return Err(Error::DimensionMismatch(format!(
                        "state has {} entries, oracle dim is {d}",
                        x.len()
                    )));
                }
                let decay = (-lambda * t).exp();
                let mu: Vec<f64> = x.iter().map(|xi| decay * xi).collect();
                let v = sigma * sigma * exp_decay_integral(2.0 * lambda, t);
                Ok(gaussian_norm_moment(&mu, v, n)?.powf(1.0 / n as f64))
            }
            LinearOracle::Gbm { beta, alpha } => {
                // E|X_t|^n = |x|^n exp(n(beta - alpha^2/2)t + n^2 alpha^2 t/2).
                let nf = n as f64;
                Ok(x[0].abs() * ((beta - 0.5 * alpha * alpha) * t + 0.5 * nf * alpha * alpha * t).exp())
            }
        }
    }

    /// Frobenius-norm tangent moment E||grad X_t||_F^n^{1/n}.
    pub fn tangent_moment(&self, n: u32, t: f64) -> Result<f64> {
        match *self {
            LinearOracle::Ou { lambda, d, .. } => Ok((d as f64).sqrt() * (-lambda * t).exp()),
            LinearOracle::Gbm { beta, alpha } => {
                let nf = n as f64;
                Ok(((beta - 0.5 * alpha * alpha) * t + 0.5 * nf * alpha * alpha * t).exp())
            }
        }
    }
}

/// Exact variance-matching weight for one OU Euler-exponential step: the
/// per-step noise multiplier zeta(h) = sqrt((1 - e^{-2 lambda h})/(2 lambda h)).
pub fn ou_step_weight(lambda: f64, h: f64) -> f64 {
    (exp_decay_integral(2.0 * lambda, h) / h).sqrt()
}

/// int_0^t e^{-a u} du = (1 - e^{-a t})/a, stable for small a.
fn exp_decay_integral(a: f64, t: f64) -> f64 {
    if a == 0.0 {
        t
    } else {
        -f64::exp_m1(-a * t) / a
    }
}

/// E||X_t - Xbar_t||^n^{1/n} for two OU flows driven by the same Brownian
/// path from the same start x. The coupled difference is Gaussian with
/// i.i.d. coordinates: mean (e^{-lambda t} - e^{-lambdabar t}) x_i and variance
/// V(t) = Sigma^2 I_2(lambda) + Sigmabar^2 I_2(lambdabar) - 2 Sigma Sigmabar I_2((lambda+lambdabar)/..)
/// from the Ito isometry of the difference kernel.
pub fn oracle_difference_moment(
    a: &LinearOracle,
    b: &LinearOracle,
    n: u32,
    s: f64,
    t: f64,
    x: &[f64],
) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let (la, sa, da) = match *a {
        LinearOracle::Ou { lambda, sigma, d } => (lambda, sigma, d),
        _ => return Err(Error::UnsupportedOracle("difference moments need OU pairs".into())),
    };
    let (lb, sb, db) = match *b {
        LinearOracle::Ou { lambda, sigma, d } => (lambda, sigma, d),
        _ => return Err(Error::UnsupportedOracle("difference moments need OU pairs".into())),
    };
    if da != db || x.len() != da {
        return Err(Error::DimensionMismatch(format!(
            "oracle dims {da} vs {db}, state {}",
            x.len()
        )));
    }
    if n == 0 {
        return Err(Error::UnsupportedOracle("moment order must be positive".into()));
    }
    let dt = t - s;
    let mean_factor = (-la * dt).exp() - (-lb * dt).exp();
    let mu: Vec<f64> = x.iter().map(|xi| mean_factor * xi).collect();
    // Per-coordinate variance of int_s^t (Sigma e^{-la(t-u)} - Sigmabar e^{-lb(t-u)}) dW_u.
    let v = sa * sa * exp_decay_integral(2.0 * la, dt) + sb * sb * exp_decay_integral(2.0 * lb, dt)
        - 2.0 * sa * sb * exp_decay_integral(la + lb, dt);
    Ok(gaussian_norm_moment(&mu, v.max(0.0), n)?.powf(1.0 / n as f64))
}

/// Time-integrated variance of the fluctuation term for a constant-diffusion
/// OU pair sharing lambda: Var(S) = DeltaSigma^2 d (1 - e^{-2 lambda (t-s)})/(2 lambda),
/// the squared Frobenius norm of the deterministic tangent-weighted kernel.
pub fn ou_skorohod_diagonal(lambda: f64, delta_sigma: f64, d: usize, s: f64, t: f64) -> f64 {
    delta_sigma * delta_sigma * d as f64 * exp_decay_integral(2.0 * lambda, t - s)
}

/// Raw moment E||Z||^n for Z ~ N(mu, v I). Supports: degenerate v = 0; any n
/// in one dimension (half-normal integrals via erf); centered chi moments in
/// any dimension; and the noncentral n = 2, 4 cases used by the moment tests.
pub fn gaussian_norm_moment(mu: &[f64], v: f64, n: u32) -> Result<f64> {
    let d = mu.len();
    let nf = n as f64;
    let mu_sq: f64 = mu.iter().map(|m| m * m).sum();
    if v <= 0.0 {
        return Ok(mu_sq.sqrt().powf(nf));
    }
    if d == 1 {
        return Ok(half_normal_moment(mu[0], v, n) + half_normal_moment(-mu[0], v, n));
    }
    if mu_sq == 0.0 {
        // ||Z|| = sqrt(v) chi_d and E chi_d^n = 2^{n/2} Gamma((d+n)/2)/Gamma(d/2).
        let df = d as f64;
        return Ok(v.powf(nf / 2.0) * (2.0f64).powf(nf / 2.0) * gamma((df + nf) / 2.0)
            / gamma(df / 2.0));
    }
    match n {
        2 => Ok(mu_sq + d as f64 * v),
        4 => {
            let m2 = mu_sq + d as f64 * v;
            Ok(m2 * m2 + 4.0 * v * mu_sq + 2.0 * d as f64 * v * v)
        }
        _ => Err(Error::UnsupportedOracle(format!(
            "noncentral norm moment of order {n} in dimension {d}"
        ))),
    }
}

/// I_n = int_0^inf z^n phi_{mu,v}(z) dz through the integration-by-parts
/// recursion I_n = mu I_{n-1} + v (n-1) I_{n-2}; E|Z|^n = I_n(mu) + I_n(-mu).
fn half_normal_moment(mu: f64, v: f64, n: u32) -> f64 {
    let sd = v.sqrt();
    let phi0 = (-mu * mu / (2.0 * v)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt());
    let mut prev = 0.5 * (1.0 + erf(mu / (sd * std::f64::consts::SQRT_2)));
    if n == 0 {
        return prev;
    }
    let mut cur = mu * prev + v * phi0;
    for m in 2..=n {
        let next = mu * cur + v * (m as f64 - 1.0) * prev;
        prev = cur;
        cur = next;
    }
    cur
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::BrownianGrid;
    use approx::assert_relative_eq;

    #[test]
    fn ou_with_zero_rate_and_noise_is_constant() {
        let oracle = LinearOracle::Ou { lambda: 0.0, sigma: 0.0, d: 2 };
        let grid = BrownianGrid::sample(5, 0, 0.0, 1.0, 8, 2).unwrap();
        let path = oracle.oracle_flow(&grid, &[1.0, -2.0]).unwrap();
        for k in 0..=8 {
            assert_eq!(path.state(k), &[1.0, -2.0]);
        }
    }

    #[test]
    fn ou_single_step_matches_transition_formula() {
        let (lambda, sigma, h) = (1.3, 0.7, 0.25);
        let oracle = LinearOracle::Ou { lambda, sigma, d: 1 };
        let grid = BrownianGrid::sample(17, 1, 0.0, h, 1, 1).unwrap();
        let path = oracle.oracle_flow(&grid, &[2.0]).unwrap();
        let dw = grid.increment(0)[0];
        let zeta = ((1.0 - (-2.0 * lambda * h).exp()) / (2.0 * lambda * h)).sqrt();
        assert_relative_eq!(path.state(1)[0], (-lambda * h).exp() * 2.0 + sigma * zeta * dw, max_relative = 1e-14);
    }

    #[test]
    fn gbm_without_noise_is_a_plain_exponential() {
        let oracle = LinearOracle::Gbm { beta: 0.4, alpha: 0.0 };
        let grid = BrownianGrid::sample(3, 0, 0.0, 2.0, 16, 1).unwrap();
        let path = oracle.oracle_flow(&grid, &[1.5]).unwrap();
        for k in 0..=16 {
            assert_relative_eq!(path.state(k)[0], 1.5 * (0.4 * grid.node_time(k)).exp(), max_relative = 1e-12);
        }
    }

    #[test]
    fn identical_oracles_have_zero_difference() {
        let a = LinearOracle::Ou { lambda: 1.0, sigma: 1.0, d: 1 };
        assert_eq!(oracle_difference_moment(&a, &a, 2, 0.0, 3.0, &[1.0]).unwrap(), 0.0);
    }

    #[test]
    fn diffusion_only_difference_plateaus_at_ito_isometry_level() {
        let a = LinearOracle::Ou { lambda: 1.0, sigma: 1.0, d: 1 };
        let b = LinearOracle::Ou { lambda: 1.0, sigma: 0.5, d: 1 };
        let value = oracle_difference_moment(&a, &b, 2, 0.0, 60.0, &[1.0]).unwrap();
        assert_relative_eq!(value, 0.5 / (2.0f64).sqrt(), max_relative = 1e-10);
    }

    #[test]
    fn drift_only_noiseless_difference_is_deterministic() {
        let a = LinearOracle::Ou { lambda: 1.0, sigma: 0.0, d: 1 };
        let b = LinearOracle::Ou { lambda: 1.5, sigma: 0.0, d: 1 };
        let t: f64 = 2.0;
        let value = oracle_difference_moment(&a, &b, 3, 0.0, t, &[-2.0]).unwrap();
        assert_relative_eq!(value, 2.0 * ((-t).exp() - (-1.5 * t).exp()).abs(), max_relative = 1e-12);
    }

    #[test]
    fn coupled_difference_norm_values_are_frozen() {
        // lambda = 1 vs 1.5 at shared unit diffusion, x = 1: the L2 difference
        // plateaus instead of growing.
        let a = LinearOracle::Ou { lambda: 1.0, sigma: 1.0, d: 1 };
        let b = LinearOracle::Ou { lambda: 1.5, sigma: 1.0, d: 1 };
        let at = |t: f64| oracle_difference_moment(&a, &b, 2, 0.0, t, &[1.0]).unwrap();
        assert_relative_eq!(at(2.0), 0.189890, max_relative = 1e-4);
        assert_relative_eq!(at(16.0), 0.182574, max_relative = 1e-4);
        let values = [at(2.0), at(4.0), at(8.0), at(16.0)];
        let max = values.iter().cloned().fold(f64::MIN, f64::max);
        let min = values.iter().cloned().fold(f64::MAX, f64::min);
        assert!(max / min < 1.05, "no growth across horizons: {values:?}");
    }

    #[test]
    fn skorohod_diagonal_value_is_frozen() {
        let value = ou_skorohod_diagonal(1.0, 0.5, 1, 0.0, 2.0);
        assert_relative_eq!(value, 0.25 * (1.0 - (-4.0f64).exp()) / 2.0, max_relative = 1e-14);
        assert_relative_eq!(value, 0.122711, max_relative = 1e-4);
    }

    #[test]
    fn gaussian_norm_moments_match_known_cases() {
        // Centered 1d: E|Z|^2 = v, E|Z| = sqrt(2v/pi).
        assert_relative_eq!(gaussian_norm_moment(&[0.0], 2.0, 2).unwrap(), 2.0, max_relative = 1e-12);
        assert_relative_eq!(
            gaussian_norm_moment(&[0.0], 2.0, 1).unwrap(),
            (2.0 * 2.0 / std::f64::consts::PI).sqrt(),
            max_relative = 1e-12
        );
        // Noncentral 1d even moments against the Hermite recursion by hand:
        // E Z^4 with mu=1, v=1 is mu^4 + 6 mu^2 v + 3 v^2 = 10.
        assert_relative_eq!(gaussian_norm_moment(&[1.0], 1.0, 4).unwrap(), 10.0, max_relative = 1e-12);
        // Centered d=3 chi moments: E||Z||^2 = 3v.
        assert_relative_eq!(gaussian_norm_moment(&[0.0, 0.0, 0.0], 0.5, 2).unwrap(), 1.5, max_relative = 1e-12);
        // Noncentral d=2, n=2: ||mu||^2 + 2v.
        assert_relative_eq!(gaussian_norm_moment(&[1.0, 2.0], 0.3, 2).unwrap(), 5.6, max_relative = 1e-12);
        // n=4 noncentral d=2 against a direct expansion.
        let (musq, v, d): (f64, f64, f64) = (5.0, 0.3, 2.0);
        let expect = (musq + d * v).powi(2) + 4.0 * v * musq + 2.0 * d * v * v;
        assert_relative_eq!(gaussian_norm_moment(&[1.0, 2.0], 0.3, 4).unwrap(), expect, max_relative = 1e-12);
    }

    #[test]
    fn gbm_tangent_moment_matches_lognormal_formula() {
        let oracle = LinearOracle::Gbm { beta: -1.0, alpha: 0.2 };
        let value = oracle.tangent_moment(2, 1.0).unwrap();
        assert_relative_eq!(value, (-0.98f64).exp(), max_relative = 1e-12);
    }
}
