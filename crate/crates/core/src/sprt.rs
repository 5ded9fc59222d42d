//! Sequential top-K verification with the studentized SPRT: keep adding
//! samples to the existing ones and test after every batch.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AttrError, Result};
use crate::estimate::MeanVarEstimate;
use crate::kernelshap::{self, bootstrap_covariance, evaluate_coalitions, kernelshap_fit, CoalitionSample};
use crate::rankshap::{check_k, StableAttribution};
use crate::rng;
use crate::stats::{nct_log_density, t_log_density};
use crate::value::ValueFunction;
use crate::verify::{welch_statistic, AttributionSet, RankingMode, TestMode, TestOutcome, VerifiedRanking};

/// Beyond this |T| the densities underflow; the ratio is taken as 0 or +∞.
const MAX_ABS_STATISTIC: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SprtBoundaries {
    pub lower: f64,
    pub upper: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl SprtBoundaries {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && beta > 0.0 && alpha + beta < 1.0) {
            return Err(AttrError::InvalidArgument(format!(
                "need alpha, beta > 0 with alpha + beta < 1, got {alpha}, {beta}"
            )));
        }
        Ok(Self { lower: beta / (1.0 - alpha), upper: (1.0 - beta) / alpha, alpha, beta })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Continue,
    RejectNull,
    AcceptNull,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SprtState {
    /// Decision per rank position `1..=K`.
    pub decisions: Vec<Decision>,
    pub samples: u64,
    pub last_ratios: Vec<f64>,
}

impl SprtState {
    pub fn new(k: usize) -> Self {
        Self { decisions: vec![Decision::Continue; k], samples: 0, last_ratios: vec![f64::NAN; k] }
    }

    pub fn all_rejected(&self) -> bool {
        self.decisions.iter().all(|&d| d == Decision::RejectNull)
    }

    pub fn any_accepted(&self) -> bool {
        self.decisions.contains(&Decision::AcceptNull)
    }
}

/// Noncentral-t density at `T` with noncentrality `T`, over the central-t
/// density at `T`. Negative statistics are evidence for the null: the ratio
/// is reflected as `1 / ratio(|T|)`.
pub fn sprt_likelihood_ratio(t: f64, df: f64) -> Result<f64> {
    if !(df >= 1.0) {
        return Err(AttrError::InvalidArgument(format!("degrees of freedom must be at least 1, got {df}")));
    }
    if t.is_nan() {
        return Err(AttrError::InvalidArgument("statistic is NaN".into()));
    }
    if t == 0.0 {
        return Ok(1.0);
    }
    if t.abs() > MAX_ABS_STATISTIC {
        return Ok(if t > 0.0 { f64::INFINITY } else { 0.0 });
    }
    let a = t.abs();
    let log_ratio = nct_log_density(a, df, a) - t_log_density(a, df);
    Ok(if t > 0.0 { log_ratio.exp() } else { (-log_ratio).exp() })
}

pub fn sprt_step(state: &mut SprtState, ratios: &[f64], bounds: &SprtBoundaries) -> Result<()> {
    if ratios.len() != state.decisions.len() {
        return Err(AttrError::DimensionMismatch { expected: state.decisions.len(), got: ratios.len() });
    }
    for (i, &r) in ratios.iter().enumerate() {
        if r.is_nan() || r < 0.0 {
            return Err(AttrError::InvalidArgument(format!("invalid likelihood ratio {r}")));
        }
        state.last_ratios[i] = r;
        if state.decisions[i] != Decision::Continue {
            continue;
        }
        if r >= bounds.upper {
            state.decisions[i] = Decision::RejectNull;
        } else if r <= bounds.lower {
            state.decisions[i] = Decision::AcceptNull;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Estimator {
    KernelShap { bootstrap: usize },
    ShapleySampling,
}

impl Default for Estimator {
    fn default() -> Self {
        Estimator::KernelShap { bootstrap: kernelshap::DEFAULT_BOOTSTRAP }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SprtConfig {
    pub alpha: f64,
    pub beta: f64,
    pub batch: usize,
    pub max_total: u64,
    pub estimator: Estimator,
    pub mode: TestMode,
}

impl Default for SprtConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.2,
            batch: 500,
            max_total: 50_000,
            estimator: Estimator::default(),
            mode: TestMode::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SprtOutcome {
    pub attribution: StableAttribution,
    pub state: SprtState,
    pub batches: usize,
}

/// Rank-position outcomes of one look: statistic is the likelihood ratio
/// and the threshold the upper boundary.
fn look(attrs: &AttributionSet, k: usize, mode: TestMode, bounds: &SprtBoundaries) -> Result<Vec<TestOutcome>> {
    let order = attrs.order();
    (1..=k)
        .map(|rank| {
            let (a, b) = (order[rank - 1], order[rank]);
            let (sa, sb, cov, rule) = attrs.welch_inputs(a, b);
            let w = welch_statistic(sa, sb, cov, rule, mode)?;
            let df = w.df.max(1.0);
            let ratio = sprt_likelihood_ratio(w.statistic, df)?;
            Ok(TestOutcome {
                k: rank,
                feature_above: a,
                feature_below: b,
                statistic: ratio,
                df,
                threshold: bounds.upper,
                rejected: ratio >= bounds.upper,
            })
        })
        .collect()
}

pub fn sprt_shap(
    vf: &ValueFunction<'_>,
    k: usize,
    config: &SprtConfig,
    ranking_mode: RankingMode,
    seed: u64,
) -> Result<SprtOutcome> {
    let d = vf.n_features();
    check_k(k, d)?;
    let bounds = SprtBoundaries::new(config.alpha, config.beta)?;
    if config.batch == 0 {
        return Err(AttrError::InvalidBudget("batch size must be positive".into()));
    }
    let mut state = SprtState::new(k);
    // Outcome that latched each rank's decision.
    let mut latched: Vec<Option<TestOutcome>> = vec![None; k];
    let mut batches = 0;

    let mut coalitions: Vec<CoalitionSample> = Vec::new();
    let mut per: Vec<MeanVarEstimate> = vec![MeanVarEstimate::default(); d];
    let (v_empty, v_full) = match config.estimator {
        Estimator::KernelShap { .. } => {
            if config.batch < d + 2 {
                return Err(AttrError::InvalidBudget(format!("batch must be at least d + 2 = {}", d + 2)));
            }
            (vf.empty_value()?, vf.full_value()?)
        }
        Estimator::ShapleySampling => {
            if config.batch < 2 {
                return Err(AttrError::InvalidBudget("batch must be at least 2".into()));
            }
            (0.0, 0.0)
        }
    };

    loop {
        let batch_index = batches as u64;
        let attrs = match config.estimator {
            Estimator::KernelShap { bootstrap } => {
                let mut r = rng::stream(seed, &[batch_index, 0]);
                let masks = kernelshap::sample_coalitions(d, config.batch, &mut r)?;
                coalitions.extend(evaluate_coalitions(vf, &masks, &mut r)?);
                state.samples = coalitions.len() as u64;
                let phi = kernelshap_fit(&coalitions, v_empty, v_full)?;
                let boot =
                    bootstrap_covariance(&coalitions, v_empty, v_full, bootstrap, &mut rng::stream(seed, &[batch_index, 1]))?;
                AttributionSet::from_covariance(phi, boot.covariance, state.samples, ranking_mode)?
            }
            Estimator::ShapleySampling => {
                let fresh: Vec<MeanVarEstimate> = (0..d)
                    .into_par_iter()
                    .map(|j| {
                        let mut r = rng::stream(seed, &[batch_index, j as u64]);
                        let draws = vf.contributions(j, config.batch, &mut r)?;
                        Ok(MeanVarEstimate::from_samples(draws))
                    })
                    .collect::<Result<_>>()?;
                for (p, f) in per.iter_mut().zip(&fresh) {
                    *p = p.merge(f);
                }
                state.samples = per.iter().map(|e| e.n).sum();
                AttributionSet::from_sampling(per.clone(), ranking_mode)?
            }
        };
        batches += 1;

        let outcomes = look(&attrs, k, config.mode, &bounds)?;
        let ratios: Vec<f64> = outcomes.iter().map(|o| o.statistic).collect();
        sprt_step(&mut state, &ratios, &bounds)?;
        for (i, o) in outcomes.iter().enumerate() {
            if latched[i].is_none() && state.decisions[i] != Decision::Continue {
                latched[i] = Some(*o);
            }
        }

        let converged = state.all_rejected();
        let exhausted = state.samples >= config.max_total;
        if converged || state.any_accepted() || exhausted {
            let leading = state.decisions.iter().take_while(|&&d| d == Decision::RejectNull).count();
            let mut steps: Vec<TestOutcome> = latched[..leading].iter().map(|o| o.expect("latched")).collect();
            if leading < k {
                let mut current = outcomes[leading];
                current.rejected = false;
                steps.push(current);
            }
            let ranking = VerifiedRanking { k: leading, order: attrs.order(), steps };
            let per_feature_permutations = (0..d).map(|j| attrs.sample_count(j)).collect();
            let attribution = StableAttribution {
                attrs,
                ranking,
                total_permutations: state.samples,
                per_feature_permutations,
                redraws: vec![0; d],
                converged,
            };
            return Ok(SprtOutcome { attribution, state, batches });
        }
    }
}
