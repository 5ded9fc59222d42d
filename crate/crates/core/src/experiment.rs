//! Monte Carlo error-rate experiments: repeat a procedure on each input with
//! derived seeds and compare the certified ranking with the true one.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TabularDataset;
use crate::error::{AttrError, Result};
use crate::global::{verify_global_ranks, GlobalScores, Window};
use crate::kernelshap::{self, bootstrap_covariance, evaluate_coalitions, kernelshap_fit, sample_coalitions};
use crate::lime::{lars_select, lime_perturb, slime_select, SlimeConfig};
use crate::model::Model;
use crate::rankshap::{rankshap, SamplingBudget};
use crate::rng;
use crate::sampling::{exact_shapley, shapley_sampling_all, EXACT_MAX_FEATURES};
use crate::sprt::{sprt_shap, Estimator, SprtConfig};
use crate::value::{Imputation, ValueFunction};
use crate::verify::{verify_ranks, AttributionSet, RankingMode, TestMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Procedure {
    Retro,
    Rankshap,
    Sprt,
    Slime,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    #[default]
    Sampling,
    Kernelshap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub procedure: Procedure,
    pub backend: Backend,
    /// Requested ranks; ignored by the retrospective procedures.
    pub ks: Vec<usize>,
    pub alphas: Vec<f64>,
    pub mode: TestMode,
    pub ranking: RankingMode,
    /// Retrospective budget: permutations per feature (sampling) or
    /// coalitions (KernelSHAP; `None` means `2d + 2048`).
    pub retro_n: Option<usize>,
    pub bootstrap: usize,
    pub budget: SamplingBudget,
    pub sprt: SprtConfig,
    pub slime: SlimeConfig,
    /// Inputs drawn per repetition in the global procedure.
    pub global_n: usize,
    /// Imputation rows per value-function evaluation.
    pub m: usize,
    pub reps: usize,
    /// Row indices of the explicands; empty means every row.
    pub inputs: Vec<usize>,
    pub seed: u64,
    /// Inputs whose converged fraction falls below this are flagged NA.
    pub na_threshold: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            procedure: Procedure::Retro,
            backend: Backend::default(),
            ks: vec![2],
            alphas: vec![0.1],
            mode: TestMode::Inference,
            ranking: RankingMode::Signed,
            retro_n: None,
            bootstrap: kernelshap::DEFAULT_BOOTSTRAP,
            budget: SamplingBudget::default(),
            sprt: SprtConfig::default(),
            slime: SlimeConfig::default(),
            global_n: 100,
            m: 10,
            reps: 100,
            inputs: Vec::new(),
            seed: 0,
            na_threshold: 0.75,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.reps == 0 {
            return Err(AttrError::InvalidArgument("need at least one repetition".into()));
        }
        if self.alphas.is_empty() || self.alphas.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
            return Err(AttrError::InvalidArgument("alphas must be non-empty and lie in (0, 1)".into()));
        }
        let fixed_k = !matches!(self.procedure, Procedure::Retro | Procedure::Global);
        if fixed_k {
            let max_k = if self.procedure == Procedure::Slime { d } else { d - 1 };
            if self.ks.is_empty() || self.ks.iter().any(|&k| k == 0 || k > max_k) {
                return Err(AttrError::InvalidArgument(format!("every K must lie in 1..={max_k}")));
            }
        }
        if !(0.0..=1.0).contains(&self.na_threshold) {
            return Err(AttrError::InvalidArgument("NA threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// True attribution values of an input and how they were obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub values: Vec<f64>,
    pub order: Vec<usize>,
    /// Derived from a high-budget reference run rather than exactly.
    pub approximate: bool,
}

impl GroundTruth {
    fn from_values(values: Vec<f64>, approximate: bool) -> Self {
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
        Self { values, order, approximate }
    }
}

/// Whether claiming `order[..k]` as the top `k` in sequence is wrong: each
/// claimed feature must be strictly above every feature not yet claimed.
pub fn ranking_error(order: &[usize], k: usize, truth: &[f64]) -> bool {
    let mut claimed = vec![false; truth.len()];
    for &f in &order[..k] {
        claimed[f] = true;
        let rest = (0..truth.len()).filter(|&j| !claimed[j]).map(|j| truth[j]).fold(f64::NEG_INFINITY, f64::max);
        if !(truth[f] > rest) {
            return true;
        }
    }
    false
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepOutcome {
    pub converged: bool,
    /// Number of certified ranks (retrospective) or requested K.
    pub certified: usize,
    /// `None` for non-converged runs.
    pub error: Option<bool>,
    pub total_samples: u64,
    pub per_feature: Vec<u64>,
    /// Converged runs: every feature ranked below K+1 kept the initial count.
    pub tail_at_n0: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSummary {
    pub input: usize,
    pub alpha: f64,
    pub k: Option<usize>,
    pub reps: usize,
    pub converged: usize,
    pub errors: usize,
    pub fwer: Option<f64>,
    pub na: bool,
    pub mean_certified: f64,
    pub mean_total_samples: f64,
    pub mean_per_feature: Vec<f64>,
    /// Fraction of converged runs whose tail features kept the initial count.
    pub tail_at_n0_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub alpha: f64,
    pub k: Option<usize>,
    pub inputs: usize,
    pub na_inputs: usize,
    pub converged: usize,
    pub errors: usize,
    /// Errors over converged runs of non-NA inputs.
    pub fwer: Option<f64>,
    pub max_input_fwer: Option<f64>,
    /// `alpha + 3 sqrt(alpha (1 - alpha) / R)`.
    pub binomial_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub n_features: usize,
    pub truths: Vec<GroundTruth>,
    pub inputs: Vec<InputSummary>,
    pub cells: Vec<CellSummary>,
}

fn summarize_input(input: usize, alpha: f64, k: Option<usize>, runs: &[RepOutcome], na_threshold: f64) -> InputSummary {
    let reps = runs.len();
    let converged: Vec<&RepOutcome> = runs.iter().filter(|r| r.converged).collect();
    let errors = converged.iter().filter(|r| r.error == Some(true)).count();
    let d = runs.first().map_or(0, |r| r.per_feature.len());
    let mean = |f: &dyn Fn(&RepOutcome) -> f64| runs.iter().map(f).sum::<f64>() / reps.max(1) as f64;
    let tails: Vec<bool> = converged.iter().filter_map(|r| r.tail_at_n0).collect();
    InputSummary {
        input,
        alpha,
        k,
        reps,
        converged: converged.len(),
        errors,
        fwer: (!converged.is_empty()).then(|| errors as f64 / converged.len() as f64),
        na: (converged.len() as f64) < na_threshold * reps as f64,
        mean_certified: mean(&|r| r.certified as f64),
        mean_total_samples: mean(&|r| r.total_samples as f64),
        mean_per_feature: (0..d).map(|j| mean(&|r| r.per_feature[j] as f64)).collect(),
        tail_at_n0_rate: (!tails.is_empty()).then(|| tails.iter().filter(|&&t| t).count() as f64 / tails.len() as f64),
    }
}

fn summarize_cell(alpha: f64, k: Option<usize>, inputs: &[&InputSummary], reps: usize) -> CellSummary {
    let kept: Vec<&&InputSummary> = inputs.iter().filter(|s| !s.na).collect();
    let converged = kept.iter().map(|s| s.converged).sum::<usize>();
    let errors = kept.iter().map(|s| s.errors).sum::<usize>();
    CellSummary {
        alpha,
        k,
        inputs: inputs.len(),
        na_inputs: inputs.len() - kept.len(),
        converged,
        errors,
        fwer: (converged > 0).then(|| errors as f64 / converged as f64),
        max_input_fwer: kept.iter().filter_map(|s| s.fwer).reduce(f64::max),
        binomial_bound: alpha + 3.0 * (alpha * (1.0 - alpha) / reps as f64).sqrt(),
    }
}

fn truth_for(
    model: &dyn Model,
    background: &TabularDataset,
    x: ndarray::ArrayView1<'_, f64>,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<GroundTruth> {
    let d = model.n_features();
    if config.procedure == Procedure::Slime {
        let n = (10 * config.slime.max_n).min(200_000);
        let pool = lime_perturb(model, x, background, n, &mut rng::stream(seed, &[0x7ef]))?;
        let order = lars_select(&pool, d)?;
        let mut values = vec![0.0; d];
        for (pos, &j) in order.iter().enumerate() {
            values[j] = (d - pos) as f64;
        }
        return Ok(GroundTruth { values, order, approximate: true });
    }
    let (phi, approximate) = if d <= EXACT_MAX_FEATURES {
        (exact_shapley(model, x, background)?, false)
    } else {
        let vf = ValueFunction::new(model, x, background, Imputation::Sampled { m: config.m })?;
        let est = shapley_sampling_all(&vf, 10 * config.budget.max_n, seed, u64::MAX)?;
        (est.iter().map(|e| e.mean).collect(), true)
    };
    let values = match config.ranking {
        RankingMode::Signed => phi,
        RankingMode::Absolute => phi.iter().map(|v| v.abs()).collect(),
    };
    Ok(GroundTruth::from_values(values, approximate))
}

/// Runs `config` on `model`, explaining rows of `inputs` against `background`.
pub fn run_experiment(
    model: &dyn Model,
    background: &TabularDataset,
    inputs: &TabularDataset,
    config: &ExperimentConfig,
) -> Result<ExperimentReport> {
    let d = model.n_features();
    config.validate(d)?;
    if background.n_features() != d || inputs.n_features() != d {
        return Err(AttrError::DimensionMismatch { expected: d, got: inputs.n_features() });
    }
    if config.procedure == Procedure::Global {
        return run_global(model, background, inputs, config);
    }
    let rows: Vec<usize> = if config.inputs.is_empty() { (0..inputs.n_rows()).collect() } else { config.inputs.clone() };
    if let Some(&bad) = rows.iter().find(|&&r| r >= inputs.n_rows()) {
        return Err(AttrError::InvalidArgument(format!("input row {bad} out of range")));
    }
    let truths: Vec<GroundTruth> = rows
        .iter()
        .map(|&r| truth_for(model, background, inputs.row(r), config, rng::derive_seed(config.seed, &[0x7_0000, r as u64])))
        .collect::<Result<_>>()?;

    let cells: Vec<(f64, Option<usize>)> = match config.procedure {
        Procedure::Retro => config.alphas.iter().map(|&a| (a, None)).collect(),
        _ => config.alphas.iter().flat_map(|&a| config.ks.iter().map(move |&k| (a, Some(k)))).collect(),
    };

    // One task per (input, repetition); each task covers every cell.
    let tasks: Vec<(usize, usize)> = (0..rows.len()).flat_map(|i| (0..config.reps).map(move |r| (i, r))).collect();
    let results: Vec<Vec<RepOutcome>> = tasks
        .par_iter()
        .map(|&(i, rep)| {
            let x = inputs.row(rows[i]);
            let vf = ValueFunction::new(model, x, background, Imputation::Sampled { m: config.m })?;
            let seed = rng::derive_seed(config.seed, &[rows[i] as u64, rep as u64]);
            run_rep(&vf, config, &cells, &truths[i], seed)
        })
        .collect::<Result<_>>()?;

    let mut input_summaries = Vec::new();
    for (c, &(alpha, k)) in cells.iter().enumerate() {
        for (i, &row) in rows.iter().enumerate() {
            let runs: Vec<RepOutcome> = (0..config.reps).map(|r| results[i * config.reps + r][c].clone()).collect();
            input_summaries.push(summarize_input(row, alpha, k, &runs, config.na_threshold));
        }
    }
    let cell_summaries = cells
        .iter()
        .map(|&(alpha, k)| {
            let members: Vec<&InputSummary> = input_summaries.iter().filter(|s| s.alpha == alpha && s.k == k).collect();
            summarize_cell(alpha, k, &members, config.reps)
        })
        .collect();
    Ok(ExperimentReport { config: config.clone(), n_features: d, truths, inputs: input_summaries, cells: cell_summaries })
}

fn run_rep(
    vf: &ValueFunction<'_>,
    config: &ExperimentConfig,
    cells: &[(f64, Option<usize>)],
    truth: &GroundTruth,
    seed: u64,
) -> Result<Vec<RepOutcome>> {
    let d = vf.n_features();
    match config.procedure {
        Procedure::Retro => {
            let (attrs, total, per_feature) = retro_attributions(vf, config, seed)?;
            cells
                .iter()
                .map(|&(alpha, _)| {
                    let ranking = verify_ranks(&attrs, alpha, config.mode)?;
                    Ok(RepOutcome {
                        converged: true,
                        certified: ranking.k,
                        error: Some(ranking_error(&ranking.order, ranking.k, &truth.values)),
                        total_samples: total,
                        per_feature: per_feature.clone(),
                        tail_at_n0: None,
                    })
                })
                .collect()
        }
        Procedure::Rankshap | Procedure::Sprt => cells
            .iter()
            .enumerate()
            .map(|(c, &(alpha, k))| {
                let k = k.expect("fixed-K procedure");
                let cell_seed = rng::derive_seed(seed, &[c as u64]);
                let out = if config.procedure == Procedure::Rankshap {
                    rankshap(vf, k, alpha, &config.budget, config.ranking, cell_seed)?
                } else {
                    let estimator = match config.backend {
                        Backend::Sampling => Estimator::ShapleySampling,
                        Backend::Kernelshap => Estimator::KernelShap { bootstrap: config.bootstrap },
                    };
                    let sprt = SprtConfig { alpha, estimator, mode: config.mode, ..config.sprt };
                    sprt_shap(vf, k, &sprt, config.ranking, cell_seed)?.attribution
                };
                let order = &out.ranking.order;
                let tail = out
                    .converged
                    .then(|| order[(k + 1).min(d)..].iter().all(|&j| out.per_feature_permutations[j] == config.budget.n0 as u64));
                Ok(RepOutcome {
                    converged: out.converged,
                    certified: k,
                    error: out.converged.then(|| ranking_error(order, k, &truth.values)),
                    total_samples: out.total_permutations,
                    per_feature: out.per_feature_permutations.clone(),
                    tail_at_n0: if config.procedure == Procedure::Rankshap { tail } else { None },
                })
            })
            .collect(),
        Procedure::Slime => cells
            .iter()
            .enumerate()
            .map(|(c, &(alpha, k))| {
                let k = k.expect("fixed-K procedure");
                let slime = SlimeConfig { alpha, ..config.slime };
                let trace =
                    slime_select(vf.model(), vf.x(), vf.background(), k, &slime, rng::derive_seed(seed, &[c as u64]))?;
                let error = trace.converged.then(|| trace.ordered_features[..] != truth.order[..k]);
                Ok(RepOutcome {
                    converged: trace.converged,
                    certified: k,
                    error,
                    total_samples: trace.pool_size as u64,
                    per_feature: vec![trace.pool_size as u64; d],
                    tail_at_n0: None,
                })
            })
            .collect(),
        Procedure::Global => unreachable!("handled by run_global"),
    }
}

/// One retrospective estimate: Shapley Sampling with independent features,
/// or KernelSHAP with bootstrap covariance.
pub fn retro_attributions(
    vf: &ValueFunction<'_>,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<(AttributionSet, u64, Vec<u64>)> {
    let d = vf.n_features();
    match config.backend {
        Backend::Sampling => {
            let n = config.retro_n.unwrap_or(2048);
            let per = shapley_sampling_all(vf, n, seed, 0)?;
            Ok((AttributionSet::from_sampling(per, config.ranking)?, (n * d) as u64, vec![n as u64; d]))
        }
        Backend::Kernelshap => {
            let n = config.retro_n.unwrap_or_else(|| kernelshap::default_budget(d));
            let mut r = rng::stream(seed, &[0xc0a1]);
            let masks = sample_coalitions(d, n, &mut r)?;
            let samples = evaluate_coalitions(vf, &masks, &mut r)?;
            let (v_empty, v_full) = (vf.empty_value()?, vf.full_value()?);
            let phi = kernelshap_fit(&samples, v_empty, v_full)?;
            let boot = bootstrap_covariance(&samples, v_empty, v_full, config.bootstrap, &mut rng::stream(seed, &[0xb007]))?;
            let attrs = AttributionSet::from_covariance(phi, boot.covariance, n as u64, config.ranking)?;
            Ok((attrs, n as u64, vec![n as u64; d]))
        }
    }
}

/// Paired retrospective verification of global scores: each repetition
/// draws `global_n` inputs with replacement from the population `inputs`,
/// using exact local Shapley values.
fn run_global(
    model: &dyn Model,
    background: &TabularDataset,
    inputs: &TabularDataset,
    config: &ExperimentConfig,
) -> Result<ExperimentReport> {
    let d = model.n_features();
    if d > EXACT_MAX_FEATURES {
        return Err(AttrError::TooManyFeatures { got: d, limit: EXACT_MAX_FEATURES });
    }
    if config.global_n < 2 {
        return Err(AttrError::InvalidBudget("global experiments need at least two inputs per repetition".into()));
    }
    let local: Vec<Vec<f64>> = (0..inputs.n_rows())
        .into_par_iter()
        .map(|i| {
            let phi = exact_shapley(model, inputs.row(i), background)?;
            Ok(match config.ranking {
                RankingMode::Signed => phi,
                RankingMode::Absolute => phi.into_iter().map(f64::abs).collect(),
            })
        })
        .collect::<Result<_>>()?;
    let n_pop = local.len();
    let theta: Vec<f64> = (0..d).map(|j| local.iter().map(|r| r[j]).sum::<f64>() / n_pop as f64).collect();
    let truth = GroundTruth::from_values(theta, false);
    let results: Vec<Vec<RepOutcome>> = (0..config.reps)
        .into_par_iter()
        .map(|rep| {
            let mut r = rng::stream(config.seed, &[0x910b, rep as u64]);
            let n = config.global_n;
            let mut psi = ndarray::Array2::<f64>::zeros((n, d));
            for mut row in psi.rows_mut() {
                let src = &local[rand::Rng::random_range(&mut r, 0..n_pop)];
                row.iter_mut().zip(src).for_each(|(a, b)| *a = *b);
            }
            let scores = GlobalScores::from_windows(psi.view(), vec![Window { start: 0, len: n }; d])?;
            config
                .alphas
                .iter()
                .map(|&alpha| {
                    let ranking = verify_global_ranks(&scores, psi.view(), alpha, config.mode)?;
                    Ok(RepOutcome {
                        converged: true,
                        certified: ranking.k,
                        error: Some(ranking_error(&ranking.order, ranking.k, &truth.values)),
                        total_samples: n as u64,
                        per_feature: vec![n as u64; d],
                        tail_at_n0: None,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut input_summaries = Vec::new();
    let mut cells = Vec::new();
    for (c, &alpha) in config.alphas.iter().enumerate() {
        let runs: Vec<RepOutcome> = results.iter().map(|r| r[c].clone()).collect();
        let s = summarize_input(0, alpha, None, &runs, config.na_threshold);
        cells.push(summarize_cell(alpha, None, &[&s], config.reps));
        input_summaries.push(s);
    }
    Ok(ExperimentReport { config: config.clone(), n_features: d, truths: vec![truth], inputs: input_summaries, cells })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_owned(), |v| format!("{v:.3}"))
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Human-readable summary table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "procedure: {:?}  reps: {}  d: {}", self.config.procedure, self.config.reps, self.n_features);
        let _ = writeln!(out, "{:>6} {:>4} {:>7} {:>9} {:>7} {:>8} {:>8} {:>8}", "alpha", "K", "inputs", "NA", "runs", "errors", "FWER", "max");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{:>6} {:>4} {:>7} {:>9} {:>7} {:>8} {:>8} {:>8}",
                c.alpha,
                c.k.map_or_else(|| "-".to_owned(), |k| k.to_string()),
                c.inputs,
                c.na_inputs,
                c.converged,
                c.errors,
                fmt_opt(c.fwer),
                fmt_opt(c.max_input_fwer),
            );
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "{:>6} {:>4} {:>6} {:>9} {:>8} {:>8} {:>10} {:>12}", "alpha", "K", "input", "converged", "errors", "FWER", "certified", "samples");
        for s in &self.inputs {
            let _ = writeln!(
                out,
                "{:>6} {:>4} {:>6} {:>9} {:>8} {:>8} {:>10.2} {:>12.1}{}",
                s.alpha,
                s.k.map_or_else(|| "-".to_owned(), |k| k.to_string()),
                s.input,
                format!("{}/{}", s.converged, s.reps),
                s.errors,
                fmt_opt(s.fwer),
                s.mean_certified,
                s.mean_total_samples,
                if s.na { "  NA" } else { "" },
            );
        }
        out
    }

    /// `alpha,k,input,feature,mean_samples` rows for plotting sample
    /// allocation per feature.
    pub fn counts_csv(&self) -> String {
        let mut out = String::from("alpha,k,input,feature,mean_samples\n");
        for s in &self.inputs {
            for (j, m) in s.mean_per_feature.iter().enumerate() {
                let k = s.k.map_or_else(String::new, |k| k.to_string());
                let _ = writeln!(out, "{},{},{},{},{}", s.alpha, k, s.input, j, m);
            }
        }
        out
    }

    /// `alpha,k,input,converged,reps,errors,fwer` rows.
    pub fn fwer_csv(&self) -> String {
        let mut out = String::from("alpha,k,input,converged,reps,errors,fwer,na\n");
        for s in &self.inputs {
            let k = s.k.map_or_else(String::new, |k| k.to_string());
            let fwer = s.fwer.map_or_else(String::new, |f| f.to_string());
            let _ = writeln!(out, "{},{},{},{},{},{},{},{}", s.alpha, k, s.input, s.converged, s.reps, s.errors, fwer, s.na);
        }
        out
    }

    /// True when every cell has at least one converged, non-NA run.
    pub fn any_converged(&self) -> bool {
        self.cells.iter().all(|c| c.converged > 0)
    }
}
