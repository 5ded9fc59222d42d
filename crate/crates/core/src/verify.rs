//! Sequential verification of a ranking: Welch tests between consecutive
//! ranked attributions, stopping at the first non-rejection.

use serde::{Deserialize, Serialize};

use crate::error::{AttrError, Result};
use crate::estimate::MeanVarEstimate;
use crate::kernelshap::CovarianceMatrix;
use crate::stats::t_quantile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankingMode {
    #[default]
    Signed,
    Absolute,
}

/// `Reproducibility` inflates the standard error by √2 (and planned sample
/// sizes by 2) so that an independent rerun reproduces the ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestMode {
    #[default]
    Inference,
    Reproducibility,
}

impl TestMode {
    pub fn se_factor(self) -> f64 {
        match self {
            TestMode::Inference => 1.0,
            TestMode::Reproducibility => std::f64::consts::SQRT_2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Uncertainty {
    /// Independent per-feature sample means.
    PerFeature(Vec<MeanVarEstimate>),
    /// Joint covariance of the estimates, all fit on the same `n` samples.
    Covariance { matrix: CovarianceMatrix, n: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributionSet {
    estimates: Vec<f64>,
    uncertainty: Uncertainty,
    ranking_mode: RankingMode,
}

impl AttributionSet {
    pub fn from_sampling(per_feature: Vec<MeanVarEstimate>, ranking_mode: RankingMode) -> Result<Self> {
        if per_feature.len() < 2 {
            return Err(AttrError::InvalidArgument("need at least two features".into()));
        }
        if let Some(j) = per_feature.iter().position(|e| e.n < 2) {
            return Err(AttrError::DegenerateVariance(format!("feature {j} has fewer than two samples")));
        }
        Ok(Self {
            estimates: per_feature.iter().map(|e| e.mean).collect(),
            uncertainty: Uncertainty::PerFeature(per_feature),
            ranking_mode,
        })
    }

    pub fn from_covariance(
        estimates: Vec<f64>,
        matrix: CovarianceMatrix,
        n: u64,
        ranking_mode: RankingMode,
    ) -> Result<Self> {
        if estimates.len() < 2 {
            return Err(AttrError::InvalidArgument("need at least two features".into()));
        }
        if matrix.dim() != estimates.len() {
            return Err(AttrError::DimensionMismatch { expected: estimates.len(), got: matrix.dim() });
        }
        if n < 2 {
            return Err(AttrError::DegenerateVariance("covariance needs at least two samples".into()));
        }
        Ok(Self { estimates, uncertainty: Uncertainty::Covariance { matrix, n }, ranking_mode })
    }

    pub fn n_features(&self) -> usize {
        self.estimates.len()
    }

    pub fn estimates(&self) -> &[f64] {
        &self.estimates
    }

    pub fn uncertainty(&self) -> &Uncertainty {
        &self.uncertainty
    }

    pub fn ranking_mode(&self) -> RankingMode {
        self.ranking_mode
    }

    /// The quantity features are ranked by.
    pub fn ranked_value(&self, j: usize) -> f64 {
        match self.ranking_mode {
            RankingMode::Signed => self.estimates[j],
            RankingMode::Absolute => self.estimates[j].abs(),
        }
    }

    /// Variance of the estimate itself (not of a single draw).
    pub fn estimate_variance(&self, j: usize) -> f64 {
        match &self.uncertainty {
            Uncertainty::PerFeature(e) => e[j].variance_of_mean().unwrap_or(0.0),
            Uncertainty::Covariance { matrix, .. } => matrix.variance(j),
        }
    }

    pub fn sample_count(&self, j: usize) -> u64 {
        match &self.uncertainty {
            Uncertainty::PerFeature(e) => e[j].n,
            Uncertainty::Covariance { n, .. } => *n,
        }
    }

    /// Feature indices sorted by ranked value, descending; ties by index.
    pub fn order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.n_features()).collect();
        order.sort_by(|&a, &b| self.ranked_value(b).total_cmp(&self.ranked_value(a)).then(a.cmp(&b)));
        order
    }

    /// Inputs to the Welch test between features `a` (ranked above) and `b`.
    pub fn welch_inputs(&self, a: usize, b: usize) -> (SideEstimate, SideEstimate, f64, DfRule) {
        let side = |j| SideEstimate {
            mean: self.ranked_value(j),
            var_of_mean: self.estimate_variance(j),
            n: self.sample_count(j),
        };
        match &self.uncertainty {
            Uncertainty::PerFeature(_) => (side(a), side(b), 0.0, DfRule::Satterthwaite),
            Uncertainty::Covariance { matrix, .. } => {
                let sign = match self.ranking_mode {
                    RankingMode::Signed => 1.0,
                    RankingMode::Absolute => sign_of(self.estimates[a]) * sign_of(self.estimates[b]),
                };
                (side(a), side(b), sign * matrix.get(a, b), DfRule::SharedSample)
            }
        }
    }
}

fn sign_of(v: f64) -> f64 {
    if v < 0.0 {
        -1.0
    } else {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SideEstimate {
    pub mean: f64,
    pub var_of_mean: f64,
    pub n: u64,
}

impl SideEstimate {
    pub fn from_estimate(e: &MeanVarEstimate) -> Result<Self> {
        let var_of_mean = e
            .variance_of_mean()
            .ok_or_else(|| AttrError::DegenerateVariance("fewer than two samples".into()))?;
        Ok(Self { mean: e.mean, var_of_mean, n: e.n })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DfRule {
    /// Welch–Satterthwaite from variances of the means.
    Satterthwaite,
    /// Both estimates come from the same `n` samples: `n - 1`.
    SharedSample,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WelchOutcome {
    pub statistic: f64,
    pub df: f64,
    /// Standard error was zero with a nonzero gap; the statistic is infinite.
    pub degenerate: bool,
}

pub fn welch_statistic(
    a: SideEstimate,
    b: SideEstimate,
    cov: f64,
    df_rule: DfRule,
    mode: TestMode,
) -> Result<WelchOutcome> {
    for s in [&a, &b] {
        if !s.mean.is_finite() || !s.var_of_mean.is_finite() || s.var_of_mean < 0.0 {
            return Err(AttrError::DegenerateVariance(format!(
                "non-finite estimate or variance ({}, {})",
                s.mean, s.var_of_mean
            )));
        }
        if s.n < 2 {
            return Err(AttrError::DegenerateVariance("fewer than two samples".into()));
        }
    }
    let (va, vb) = (a.var_of_mean, b.var_of_mean);
    let mut var = va + vb - 2.0 * cov;
    if var < 0.0 {
        if var < -1e-12 * (va + vb) {
            return Err(AttrError::DegenerateVariance(format!("negative variance of the gap: {var}")));
        }
        var = 0.0;
    }
    let df = match df_rule {
        DfRule::SharedSample => (a.n.min(b.n) - 1) as f64,
        DfRule::Satterthwaite => {
            let denom = va * va / (a.n - 1) as f64 + vb * vb / (b.n - 1) as f64;
            if denom > 0.0 {
                (va + vb).powi(2) / denom
            } else {
                (a.n + b.n - 2) as f64
            }
        }
    };
    let gap = a.mean - b.mean;
    let s = var.sqrt() * mode.se_factor();
    if s == 0.0 {
        let statistic = if gap == 0.0 { 0.0 } else { gap.signum() * f64::INFINITY };
        return Ok(WelchOutcome { statistic, df, degenerate: gap != 0.0 });
    }
    Ok(WelchOutcome { statistic: gap / s, df, degenerate: false })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    /// 1-based rank position: compares the k-th and (k+1)-th ranked features.
    pub k: usize,
    pub feature_above: usize,
    pub feature_below: usize,
    pub statistic: f64,
    pub df: f64,
    pub threshold: f64,
    pub rejected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifiedRanking {
    #[serde(rename = "K")]
    pub k: usize,
    pub order: Vec<usize>,
    pub steps: Vec<TestOutcome>,
}

impl VerifiedRanking {
    /// The first step that failed to reject, if any.
    pub fn first_failure(&self) -> Option<&TestOutcome> {
        self.steps.iter().find(|s| !s.rejected)
    }
}

/// One-sided test of `H0: phi_a <= phi_b` at level `alpha / 2`.
pub fn welch_test(
    k: usize,
    (feature_above, feature_below): (usize, usize),
    outcome: WelchOutcome,
    alpha: f64,
) -> Result<TestOutcome> {
    let threshold = t_quantile(1.0 - alpha / 2.0, outcome.df)?;
    Ok(TestOutcome {
        k,
        feature_above,
        feature_below,
        statistic: outcome.statistic,
        df: outcome.df,
        threshold,
        rejected: outcome.statistic >= threshold,
    })
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(AttrError::InvalidArgument(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// Runs consecutive tests `1..=order.len()-1` produced by `test`, stopping
/// at the first non-rejection.
pub fn sequential_tests<F>(order: Vec<usize>, mut test: F) -> Result<VerifiedRanking>
where
    F: FnMut(usize, usize, usize) -> Result<TestOutcome>,
{
    let mut steps = Vec::new();
    for k in 1..order.len() {
        let step = test(k, order[k - 1], order[k])?;
        let rejected = step.rejected;
        steps.push(step);
        if !rejected {
            break;
        }
    }
    let k = steps.iter().take_while(|s| s.rejected).count();
    Ok(VerifiedRanking { k, order, steps })
}

pub fn verify_ranks(attrs: &AttributionSet, alpha: f64, mode: TestMode) -> Result<VerifiedRanking> {
    check_alpha(alpha)?;
    sequential_tests(attrs.order(), |k, a, b| {
        let (sa, sb, cov, rule) = attrs.welch_inputs(a, b);
        welch_test(k, (a, b), welch_statistic(sa, sb, cov, rule, mode)?, alpha)
    })
}
