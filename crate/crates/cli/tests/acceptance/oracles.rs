//! Independent reference computations used by the acceptance checks.

use ndarray::{Array1, Array2};
use statrs::function::gamma::ln_gamma;

/// Noncentral-t density by composite Simpson over the chi-square variable:
/// f(t) = ∫ f_V(v) sqrt(v/ν) φ(t sqrt(v/ν) − δ) dv, integrated in log v.
pub fn nct_density(t: f64, df: f64, ncp: f64) -> f64 {
    let log_chi2 = |v: f64| (0.5 * df - 1.0) * v.ln() - 0.5 * v - 0.5 * df * 2f64.ln() - ln_gamma(0.5 * df);
    let integrand = |u: f64| {
        let v = u.exp();
        let s = (v / df).sqrt();
        let z = t * s - ncp;
        (log_chi2(v) + u + s.ln() - 0.5 * z * z - 0.5 * (2.0 * std::f64::consts::PI).ln()).exp()
    };
    let (a, b) = (-40.0, (df + 60.0 * (2.0 * df).sqrt() + 400.0).ln());
    let n = 40_000;
    let h = (b - a) / n as f64;
    let mut sum = integrand(a) + integrand(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * integrand(a + i as f64 * h);
    }
    sum * h / 3.0
}

/// Central t density from its closed form.
pub fn t_density(t: f64, df: f64) -> f64 {
    (ln_gamma(0.5 * (df + 1.0)) - ln_gamma(0.5 * df) - 0.5 * (df * std::f64::consts::PI).ln()
        - 0.5 * (df + 1.0) * (1.0 + t * t / df).ln())
    .exp()
}

/// Entry order of features along a coordinate-descent lasso path swept
/// over a fine geometric grid of penalties.
pub fn lasso_path_entry_order(x: &Array2<f64>, y: &Array1<f64>) -> Vec<usize> {
    let d = x.ncols();
    let col_sq: Vec<f64> = x.columns().into_iter().map(|c| c.dot(&c)).collect();
    let lambda_max = x.t().dot(y).iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut beta = vec![0.0; d];
    let mut residual = y.clone();
    let mut order = Vec::new();
    let steps = 4000;
    for s in 1..=steps {
        let lambda = lambda_max * (1e-4f64).powf(s as f64 / steps as f64);
        for _ in 0..10_000 {
            let mut max_change = 0.0f64;
            for j in 0..d {
                let col = x.column(j);
                let rho = col.dot(&residual) + col_sq[j] * beta[j];
                let new = rho.signum() * (rho.abs() - lambda).max(0.0) / col_sq[j];
                let delta = new - beta[j];
                if delta != 0.0 {
                    residual.scaled_add(-delta, &col);
                    beta[j] = new;
                    max_change = max_change.max(delta.abs());
                }
            }
            if max_change < 1e-13 {
                break;
            }
        }
        for j in 0..d {
            if beta[j] != 0.0 && !order.contains(&j) {
                order.push(j);
            }
        }
    }
    order
}
