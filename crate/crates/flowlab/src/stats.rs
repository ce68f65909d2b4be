//! Sample statistics, the delta method for root-moment transforms, and
//! log-log slope fits used by the convergence studies.

/// Two-sided 95% normal quantile; the confidence convention for the suite.
pub const Z95: f64 = 1.959964;

/// Sample mean and the standard error of the mean.
pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let m = xs.len();
    assert!(m >= 1, "mean of empty sample");
    let mean = xs.iter().sum::<f64>() / m as f64;
    if m == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (m as f64 - 1.0);
    (mean, (var / m as f64).sqrt())
}

/// Unbiased sample variance together with its own standard error,
/// se(s^2)^2 = (m4 - s^4 (M-3)/(M-1)) / M with m4 the fourth central moment.
pub fn variance_and_stderr(xs: &[f64]) -> (f64, f64) {
    let m = xs.len() as f64;
    assert!(xs.len() >= 2, "variance needs at least two samples");
    let mean = xs.iter().sum::<f64>() / m;
    let mut m2 = 0.0;
    let mut m4 = 0.0;
    for x in xs {
        let c = x - mean;
        m2 += c * c;
        m4 += c * c * c * c;
    }
    let var = m2 / (m - 1.0);
    m4 /= m;
    let se2 = (m4 - var * var * (m - 3.0) / (m - 1.0)) / m;
    (var, se2.max(0.0).sqrt())
}

/// E[|.|^n]^{1/n} from the raw mean of n-th powers.
pub fn root_moment(raw_mean: f64, n: u32) -> f64 {
    debug_assert!(raw_mean >= 0.0);
    raw_mean.powf(1.0 / n as f64)
}

/// Delta-method standard error of raw_mean^{1/n} given se(raw_mean).
pub fn root_moment_stderr(raw_mean: f64, raw_stderr: f64, n: u32) -> f64 {
    if raw_mean <= 0.0 {
        // The transform is not differentiable at zero; fall back to the raw
        // half-width mapped through the root, a conservative envelope.
        return root_moment(raw_stderr.max(0.0), n);
    }
    raw_stderr * raw_mean.powf(1.0 / n as f64 - 1.0) / n as f64
}

/// Ordinary least squares fit y = intercept + slope x.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
}

pub fn fit_line(xs: &[f64], ys: &[f64]) -> SlopeFit {
    assert_eq!(xs.len(), ys.len());
    let m = xs.len() as f64;
    assert!(xs.len() >= 2, "slope fit needs at least two points");
    let xbar = xs.iter().sum::<f64>() / m;
    let ybar = ys.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - xbar) * (x - xbar)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - xbar) * (y - ybar)).sum();
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let dof = (m - 2.0).max(1.0);
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    SlopeFit { slope, intercept, slope_stderr: (ss_res / dof / sxx).sqrt() }
}

/// Least-squares slope of log y against log x; inputs must be positive.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> SlopeFit {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    fit_line(&lx, &ly)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn mean_stderr_of_known_sample() {
        let (m, se) = mean_and_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert_relative_eq!(m, 2.5);
        // var = 5/3, se = sqrt(5/12)
        assert_relative_eq!(se, (5.0f64 / 12.0).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn variance_stderr_positive_for_spread_sample() {
        let xs: Vec<f64> = (0..100).map(|i| (i % 7) as f64).collect();
        let (var, se) = variance_and_stderr(&xs);
        assert!(var > 0.0 && se > 0.0);
    }

    #[test]
    fn root_moment_and_delta_method() {
        assert_relative_eq!(root_moment(0.25, 2), 0.5);
        // d/dm m^{1/2} = 1/(2 sqrt(m)): se 0.01 at m=0.25 -> 0.01
        assert_relative_eq!(root_moment_stderr(0.25, 0.01, 2), 0.01, epsilon = 1e-12);
    }

    #[test]
    fn exact_line_has_zero_residual_slope_error() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 - 2.0 * x).collect();
        let fit = fit_line(&xs, &ys);
        assert_relative_eq!(fit.slope, -2.0, epsilon = 1e-12);
        assert_relative_eq!(fit.intercept, 3.0, epsilon = 1e-12);
        assert!(fit.slope_stderr < 1e-10);
    }

    #[test]
    fn loglog_recovers_power_law() {
        let xs = [0.5f64, 0.25, 0.125, 0.0625];
        let ys: Vec<f64> = xs.iter().map(|x| 7.0 * x.powf(1.5)).collect();
        let fit = loglog_slope(&xs, &ys);
        assert_relative_eq!(fit.slope, 1.5, epsilon = 1e-10);
    }
}
