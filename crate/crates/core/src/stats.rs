//! Distribution helpers: Student-t quantiles and densities, including the
//! noncentral t density used by the studentized likelihood ratio.

use quadrature::double_exponential;
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use statrs::function::gamma::ln_gamma;

use crate::error::{AttrError, Result};

/// `p`-quantile of Student's t with `df` degrees of freedom.
pub fn t_quantile(p: f64, df: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&p) || p == 0.0 {
        return Err(AttrError::InvalidArgument(format!("quantile level {p} not in (0,1)")));
    }
    if !(df > 0.0) {
        return Err(AttrError::InvalidArgument(format!("degrees of freedom {df} must be positive")));
    }
    // statrs loses accuracy for huge df; the normal limit is exact to 1e-9 there.
    if df > 1e7 {
        return Ok(normal_quantile(p));
    }
    let dist = StudentsT::new(0.0, 1.0, df)
        .map_err(|e| AttrError::InvalidArgument(format!("t distribution: {e}")))?;
    Ok(dist.inverse_cdf(p))
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Log density of the central t distribution.
pub fn t_log_density(t: f64, df: f64) -> f64 {
    ln_gamma((df + 1.0) / 2.0)
        - ln_gamma(df / 2.0)
        - 0.5 * (df * std::f64::consts::PI).ln()
        - (df + 1.0) / 2.0 * (t * t / df).ln_1p()
}

/// Log density of the noncentral t distribution with `df` degrees of freedom
/// and noncentrality `ncp`, evaluated at `t`.
///
/// Uses the mixture representation `T = (Z + ncp) / S`, `S = sqrt(V / df)`,
/// `V ~ chi2(df)`, so that
/// `f(t) = \int_0^\infty s phi(t s - ncp) f_S(s) ds`.
/// The log-integrand is strictly concave in `s`, so it is integrated around its
/// mode after subtracting the peak value, which keeps the quadrature in range
/// for large noncentralities.
pub fn nct_log_density(t: f64, df: f64, ncp: f64) -> f64 {
    let log_const = std::f64::consts::LN_2 + 0.5 * df * (0.5 * df).ln()
        - ln_gamma(0.5 * df)
        - 0.5 * (2.0 * std::f64::consts::PI).ln();
    let log_kernel = |s: f64| {
        let z = t * s - ncp;
        df * s.ln() - 0.5 * z * z - 0.5 * df * s * s
    };

    let a = t * t + df;
    let mode = (t * ncp + (t * t * ncp * ncp + 4.0 * df * a).sqrt()) / (2.0 * a);
    let peak = log_kernel(mode);
    // The second derivative is bounded above by -(t^2 + df), so beyond this
    // half-width the integrand has dropped by at least exp(-60).
    let half_width = (120.0 / a).sqrt();
    let lo = (mode - half_width).max(0.0);
    let hi = mode + half_width;

    let integrand = |s: f64| {
        if s <= 0.0 {
            0.0
        } else {
            (log_kernel(s) - peak).exp()
        }
    };
    // Split at the mode so both halves are smooth and monotone.
    let left = double_exponential::integrate(integrand, lo, mode, 1e-13).integral;
    let right = double_exponential::integrate(integrand, mode, hi, 1e-13).integral;
    log_const + peak + (left + right).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn t_quantiles_match_tables() {
        assert_relative_eq!(t_quantile(0.975, 1.0).unwrap(), 12.7062, max_relative = 1e-4);
        assert_relative_eq!(t_quantile(0.95, 5.0).unwrap(), 2.01505, max_relative = 1e-5);
        assert_relative_eq!(t_quantile(0.975, 99.0).unwrap(), 1.98422, max_relative = 1e-5);
        assert_relative_eq!(t_quantile(0.975, 1e9).unwrap(), 1.959964, max_relative = 1e-6);
    }

    #[test]
    fn t_quantile_rejects_bad_levels() {
        assert!(t_quantile(0.0, 3.0).is_err());
        assert!(t_quantile(1.0, 3.0).is_err());
        assert!(t_quantile(0.5, 0.0).is_err());
    }

    #[test]
    fn zero_noncentrality_reduces_to_central_t() {
        for &df in &[1.0, 2.5, 5.0, 30.0, 200.0, 5000.0] {
            for &t in &[-4.0, -1.0, 0.0, 0.3, 2.0, 7.5] {
                let nct = nct_log_density(t, df, 0.0);
                let central = t_log_density(t, df);
                assert!((nct - central).abs() < 1e-10, "df={df} t={t}: {nct} vs {central}");
            }
        }
    }

    #[test]
    fn density_is_symmetric_under_joint_reflection() {
        let a = nct_log_density(1.7, 12.0, 2.3);
        let b = nct_log_density(-1.7, 12.0, -2.3);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn central_density_integrates_to_one() {
        let f = |t: f64| t_log_density(t, 4.0).exp();
        let total = 2.0 * double_exponential::integrate(f, 0.0, 400.0, 1e-12).integral;
        assert!((total - 1.0).abs() < 1e-4, "{total}");
    }
}
