//! Adaptive top-K Shapley Sampling: retest the highest failing rank with
//! freshly drawn, larger samples until the top K are verified or the
//! per-feature cap binds.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AttrError, Result};
use crate::estimate::MeanVarEstimate;
use crate::rng;
use crate::sampling::shapley_sampling;
use crate::stats::t_quantile;
use crate::value::ValueFunction;
use crate::verify::{verify_ranks, AttributionSet, RankingMode, TestMode, VerifiedRanking};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AllocationScheme {
    Equal,
    #[default]
    VarianceProportional,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingBudget {
    pub n0: usize,
    pub max_n: usize,
    pub buffer_c: f64,
    pub scheme: AllocationScheme,
    pub mode: TestMode,
}

impl Default for SamplingBudget {
    fn default() -> Self {
        Self { n0: 100, max_n: 10_000, buffer_c: 1.1, scheme: AllocationScheme::default(), mode: TestMode::default() }
    }
}

impl SamplingBudget {
    pub fn validate(&self) -> Result<()> {
        if self.n0 < 2 || self.n0 > self.max_n {
            return Err(AttrError::InvalidBudget(format!(
                "need 2 <= n0 <= max_n, got n0 = {}, max_n = {}",
                self.n0, self.max_n
            )));
        }
        if !(1.0..=2.0).contains(&self.buffer_c) {
            return Err(AttrError::InvalidBudget(format!("buffer must lie in [1, 2], got {}", self.buffer_c)));
        }
        Ok(())
    }
}

/// Rounds up, ignoring floating-point excess of a few ulps over an integer.
fn ceil_count(x: f64) -> u64 {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.abs().max(1.0) {
        r as u64
    } else {
        x.ceil() as u64
    }
}

/// Sample sizes for features `a` and `b` given an explicit critical value.
/// `var_a`, `var_b` are per-draw variances.
pub fn plan_sample_sizes_with_critical(
    delta: f64,
    var_a: f64,
    var_b: f64,
    critical: f64,
    scheme: AllocationScheme,
    mode: TestMode,
) -> Result<(u64, u64)> {
    if !(delta > 0.0) {
        return Err(AttrError::NonPositiveGap(delta));
    }
    if !(var_a >= 0.0 && var_b >= 0.0 && var_a.is_finite() && var_b.is_finite()) {
        return Err(AttrError::InvalidArgument(format!("variances must be finite and non-negative: {var_a}, {var_b}")));
    }
    let factor = (critical / delta).powi(2);
    let (a, b) = match scheme {
        AllocationScheme::Equal => {
            let n = factor * (var_a + var_b);
            (n, n)
        }
        AllocationScheme::VarianceProportional => (2.0 * factor * var_a, 2.0 * factor * var_b),
    };
    let scale = match mode {
        TestMode::Inference => 1.0,
        TestMode::Reproducibility => 2.0,
    };
    Ok((ceil_count(scale * a), ceil_count(scale * b)))
}

/// Sample sizes at the critical value `t_{1-alpha/2, df}`.
pub fn plan_sample_sizes(
    delta: f64,
    var_a: f64,
    var_b: f64,
    df: f64,
    alpha: f64,
    scheme: AllocationScheme,
    mode: TestMode,
) -> Result<(u64, u64)> {
    let critical = t_quantile(1.0 - alpha / 2.0, df)?;
    plan_sample_sizes_with_critical(delta, var_a, var_b, critical, scheme, mode)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StableAttribution {
    pub attrs: AttributionSet,
    pub ranking: VerifiedRanking,
    /// Every draw made, including samples discarded on resampling.
    pub total_permutations: u64,
    /// Draws behind each returned estimate.
    pub per_feature_permutations: Vec<u64>,
    /// How often each feature's sample was discarded and redrawn.
    pub redraws: Vec<u64>,
    pub converged: bool,
}

impl StableAttribution {
    pub fn top_k(&self, k: usize) -> &[usize] {
        &self.ranking.order[..k.min(self.ranking.order.len())]
    }
}

pub(crate) fn check_k(k: usize, d: usize) -> Result<()> {
    if k == 0 || k >= d {
        return Err(AttrError::InvalidArgument(format!("K must lie in 1..={}, got {k}", d - 1)));
    }
    Ok(())
}

/// Stream for feature `j` at redraw `epoch`.
fn feature_stream(seed: u64, j: usize, epoch: u64) -> rng::EngineRng {
    rng::stream(seed, &[j as u64, epoch])
}

pub fn rankshap(
    vf: &ValueFunction<'_>,
    k: usize,
    alpha: f64,
    budget: &SamplingBudget,
    ranking_mode: RankingMode,
    seed: u64,
) -> Result<StableAttribution> {
    let d = vf.n_features();
    check_k(k, d)?;
    budget.validate()?;
    let mut per: Vec<MeanVarEstimate> = (0..d)
        .into_par_iter()
        .map(|j| shapley_sampling(vf, j, budget.n0, &mut feature_stream(seed, j, 0)))
        .collect::<Result<_>>()?;
    let mut redraws = vec![0u64; d];
    let mut total = (budget.n0 * d) as u64;
    let max_n = budget.max_n as u64;
    loop {
        let attrs = AttributionSet::from_sampling(per.clone(), ranking_mode)?;
        let ranking = verify_ranks(&attrs, alpha, budget.mode)?;
        let finish = |converged, ranking, attrs| StableAttribution {
            attrs,
            ranking,
            total_permutations: total,
            per_feature_permutations: per.iter().map(|e| e.n).collect(),
            redraws: redraws.clone(),
            converged,
        };
        if ranking.k >= k {
            return Ok(finish(true, ranking, attrs));
        }
        let fail = *ranking.first_failure().expect("a failing step exists below K");
        let (a, b) = (fail.feature_above, fail.feature_below);
        let (na, nb) = (per[a].n, per[b].n);
        let gap = attrs.ranked_value(a) - attrs.ranked_value(b);
        let var = |j: usize| per[j].variance().unwrap_or(0.0);
        let (plan_a, plan_b) = if gap > 0.0 {
            let planned = plan_sample_sizes(gap, var(a), var(b), fail.df, alpha, budget.scheme, budget.mode)?;
            let buffered = |n: u64| (budget.buffer_c * n as f64).ceil() as u64;
            (buffered(planned.0), buffered(planned.1))
        } else {
            (max_n, max_n)
        };
        let mut new_a = plan_a.max(na).min(max_n);
        let mut new_b = plan_b.max(nb).min(max_n);
        if new_a == na && new_b == nb {
            if na >= max_n && nb >= max_n {
                return Ok(finish(false, ranking, attrs));
            }
            new_a = (2 * na).min(max_n);
            new_b = (2 * nb).min(max_n);
        }
        let redrawn: Vec<(usize, MeanVarEstimate)> = [(a, new_a), (b, new_b)]
            .into_par_iter()
            .map(|(j, n)| {
                let epoch = redraws[j] + 1;
                Ok((j, shapley_sampling(vf, j, n as usize, &mut feature_stream(seed, j, epoch))?))
            })
            .collect::<Result<_>>()?;
        for (j, e) in redrawn {
            redraws[j] += 1;
            total += e.n;
            per[j] = e;
        }
    }
}
