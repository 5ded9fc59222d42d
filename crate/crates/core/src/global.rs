//! Global importance: local attributions averaged over inputs, verified with
//! paired tests, plus adaptive top-K procedures that draw more inputs.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Mutex;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TabularDataset;
use crate::error::{AttrError, Result};
use crate::estimate::MeanVarEstimate;
use crate::model::Model;
use crate::rankshap::{check_k, plan_sample_sizes, SamplingBudget};
use crate::rng;
use crate::sampling::{abs_contribution_sampling, exact_shapley, shapley_sampling};
use crate::sprt::{sprt_likelihood_ratio, sprt_step, Decision, SprtBoundaries, SprtState};
use crate::value::{Imputation, ValueFunction};
use crate::verify::{
    sequential_tests, welch_statistic, welch_test, DfRule, SideEstimate, TestMode, TestOutcome, VerifiedRanking,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributionSource {
    Exact,
    #[default]
    Estimated,
}

/// Local attributions `psi[i, j]` of feature `j` at input `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalAttributionMatrix {
    input_ids: Vec<String>,
    psi: Array2<f64>,
    source: AttributionSource,
}

impl LocalAttributionMatrix {
    pub fn new(input_ids: Vec<String>, psi: Array2<f64>, source: AttributionSource) -> Result<Self> {
        if input_ids.len() != psi.nrows() {
            return Err(AttrError::DimensionMismatch { expected: psi.nrows(), got: input_ids.len() });
        }
        if psi.ncols() == 0 || psi.nrows() == 0 {
            return Err(AttrError::InvalidArgument("attribution matrix is empty".into()));
        }
        if psi.iter().any(|v| !v.is_finite()) {
            return Err(AttrError::InvalidArgument("attribution matrix has non-finite entries".into()));
        }
        Ok(Self { input_ids, psi, source })
    }

    /// Rows numbered `0..n`.
    pub fn from_array(psi: Array2<f64>, source: AttributionSource) -> Result<Self> {
        let ids = (0..psi.nrows()).map(|i| i.to_string()).collect();
        Self::new(ids, psi, source)
    }

    pub fn n_inputs(&self) -> usize {
        self.psi.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.psi.ncols()
    }

    pub fn psi(&self) -> ArrayView2<'_, f64> {
        self.psi.view()
    }

    pub fn input_ids(&self) -> &[String] {
        &self.input_ids
    }

    pub fn source(&self) -> AttributionSource {
        self.source
    }

    /// Elementwise absolute values, the estimand of global absolute importance.
    pub fn abs(&self) -> Self {
        Self { input_ids: self.input_ids.clone(), psi: self.psi.mapv(f64::abs), source: self.source }
    }

    pub fn from_csv_path(path: impl AsRef<Path>, source: AttributionSource) -> Result<Self> {
        Self::from_csv_reader(std::fs::File::open(path)?, source)
    }

    pub fn from_csv_reader<R: Read>(reader: R, source: AttributionSource) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
        let header: Vec<String> =
            rdr.headers().map_err(|e| parse_error(1, 1, e.to_string()))?.iter().map(str::to_owned).collect();
        if header.first().map(String::as_str) != Some("input_id") || header.len() < 2 {
            return Err(parse_error(1, 1, "header must start with input_id followed by feature columns".into()));
        }
        let d = header.len() - 1;
        let mut ids = Vec::new();
        let mut flat = Vec::new();
        for (i, record) in rdr.records().enumerate() {
            let line = i + 2;
            let record = record.map_err(|e| parse_error(line, 1, e.to_string()))?;
            if record.len() != d + 1 {
                return Err(parse_error(
                    line,
                    record.len().min(d + 1) + 1,
                    format!("row {} has {} fields, expected {}", i + 1, record.len(), d + 1),
                ));
            }
            ids.push(record[0].to_owned());
            for (c, field) in record.iter().enumerate().skip(1) {
                let v: f64 = field.trim().parse().map_err(|_| {
                    parse_error(line, c + 1, format!("row {}: cannot parse {field:?} as a number", i + 1))
                })?;
                flat.push(v);
            }
        }
        let psi = Array2::from_shape_vec((ids.len(), d), flat).map_err(|e| AttrError::InvalidArgument(e.to_string()))?;
        Self::new(ids, psi, source)
    }

    /// Writes the shortest decimal form of every value, so reading the file
    /// back reproduces the matrix bit for bit.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["input_id".to_owned()];
        header.extend((0..self.n_features()).map(|j| format!("feature_{j}")));
        w.write_record(&header).map_err(csv_io)?;
        for (id, row) in self.input_ids.iter().zip(self.psi.rows()) {
            let mut rec = vec![id.clone()];
            rec.extend(row.iter().map(|v| format!("{v}")));
            w.write_record(&rec).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

fn parse_error(line: usize, column: usize, message: String) -> AttrError {
    AttrError::Parse { line, column, message }
}

fn csv_io(e: csv::Error) -> AttrError {
    AttrError::Io(std::io::Error::other(e))
}

/// A contiguous run of input indices used for one feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: usize,
    pub len: usize,
}

impl Window {
    fn end(&self) -> usize {
        self.start + self.len
    }

    fn overlap(&self, other: &Window) -> Window {
        let start = self.start.max(other.start);
        let end = self.end().min(other.end());
        Window { start, len: end.saturating_sub(start) }
    }
}

/// Per-feature means over each feature's input window.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GlobalScores {
    pub theta: Vec<f64>,
    pub windows: Vec<Window>,
    per_feature: Vec<MeanVarEstimate>,
}

impl GlobalScores {
    pub fn from_windows(psi: ArrayView2<'_, f64>, windows: Vec<Window>) -> Result<Self> {
        if windows.len() != psi.ncols() {
            return Err(AttrError::DimensionMismatch { expected: psi.ncols(), got: windows.len() });
        }
        let mut per_feature = Vec::with_capacity(windows.len());
        for (j, w) in windows.iter().enumerate() {
            if w.len == 0 || w.end() > psi.nrows() {
                return Err(AttrError::InvalidArgument(format!("window of feature {j} is empty or out of range")));
            }
            per_feature.push(MeanVarEstimate::from_samples(psi.column(j).slice(ndarray::s![w.start..w.end()]).iter().copied()));
        }
        Ok(Self { theta: per_feature.iter().map(|e| e.mean).collect(), windows, per_feature })
    }

    pub fn counts(&self) -> Vec<usize> {
        self.windows.iter().map(|w| w.len).collect()
    }

    pub fn per_feature(&self) -> &[MeanVarEstimate] {
        &self.per_feature
    }

    /// `Cov(theta_a, theta_b)` from the inputs both windows share:
    /// `O / (n_a n_b) * Cov(psi_a, psi_b)` over the `O` shared inputs.
    pub fn covariance(&self, psi: ArrayView2<'_, f64>, a: usize, b: usize) -> f64 {
        let (wa, wb) = (self.windows[a], self.windows[b]);
        let o = wa.overlap(&wb);
        if o.len < 2 {
            return 0.0;
        }
        let rows = o.start..o.end();
        let ca = psi.column(a);
        let cb = psi.column(b);
        let ma = rows.clone().map(|i| ca[i]).sum::<f64>() / o.len as f64;
        let mb = rows.clone().map(|i| cb[i]).sum::<f64>() / o.len as f64;
        let cov = rows.map(|i| (ca[i] - ma) * (cb[i] - mb)).sum::<f64>() / (o.len - 1) as f64;
        o.len as f64 / (wa.len as f64 * wb.len as f64) * cov
    }

    /// Welch inputs for a paired comparison of features `a` and `b`.
    pub fn pair_inputs(&self, psi: ArrayView2<'_, f64>, a: usize, b: usize) -> Result<(SideEstimate, SideEstimate, f64, DfRule)> {
        let sa = SideEstimate::from_estimate(&self.per_feature[a])?;
        let sb = SideEstimate::from_estimate(&self.per_feature[b])?;
        let shared = self.windows[a].overlap(&self.windows[b]).len > 0;
        let rule = if shared { DfRule::SharedSample } else { DfRule::Satterthwaite };
        Ok((sa, sb, self.covariance(psi, a, b), rule))
    }

    /// Features by descending score; ties by index.
    pub fn order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.theta.len()).collect();
        order.sort_by(|&a, &b| self.theta[b].total_cmp(&self.theta[a]).then(a.cmp(&b)));
        order
    }
}

/// Column means over all inputs.
pub fn global_scores(psi: &LocalAttributionMatrix) -> Result<GlobalScores> {
    let n = psi.n_inputs();
    GlobalScores::from_windows(psi.psi(), vec![Window { start: 0, len: n }; psi.n_features()])
}

pub fn verify_global_ranks(
    scores: &GlobalScores,
    psi: ArrayView2<'_, f64>,
    alpha: f64,
    mode: TestMode,
) -> Result<VerifiedRanking> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(AttrError::InvalidArgument(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    sequential_tests(scores.order(), |k, a, b| {
        let (sa, sb, cov, rule) = scores.pair_inputs(psi, a, b)?;
        welch_test(k, (a, b), welch_statistic(sa, sb, cov, rule, mode)?, alpha)
    })
}

/// A stream of inputs whose local attributions are computed on demand.
/// Input `i` must always yield the same attribution vector.
pub trait LocalAttributionSource: Sync {
    fn n_features(&self) -> usize;

    /// Number of inputs available, if finite.
    fn len(&self) -> Option<usize> {
        None
    }

    fn attribution(&self, index: usize) -> Result<Vec<f64>>;
}

/// Rows of a precomputed matrix, in order.
pub struct MatrixSource<'a>(pub &'a LocalAttributionMatrix);

impl LocalAttributionSource for MatrixSource<'_> {
    fn n_features(&self) -> usize {
        self.0.n_features()
    }

    fn len(&self) -> Option<usize> {
        Some(self.0.n_inputs())
    }

    fn attribution(&self, index: usize) -> Result<Vec<f64>> {
        if index >= self.0.n_inputs() {
            return Err(AttrError::InvalidBudget(format!("attribution file has only {} inputs", self.0.n_inputs())));
        }
        Ok(self.0.psi.row(index).to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LocalEstimand {
    /// Exact Shapley values (small `d`).
    ExactShapley,
    /// Shapley Sampling with `n` permutations per feature.
    SampledShapley { n: usize, m: usize },
    /// Unbiased permutation average of absolute contributions.
    AbsContribution { n: usize, m: usize },
}

/// Inputs drawn uniformly with replacement from a dataset; local
/// attributions computed against a background set.
pub struct ModelSource<'a> {
    pub model: &'a dyn Model,
    pub inputs: &'a TabularDataset,
    pub background: &'a TabularDataset,
    pub estimand: LocalEstimand,
    pub seed: u64,
}

impl ModelSource<'_> {
    pub fn input_row(&self, index: usize) -> usize {
        rng::stream(self.seed, &[0x1a7, index as u64]).random_range(0..self.inputs.n_rows())
    }

    /// Attributions of one dataset row (exact estimand only is deterministic
    /// per row; sampled estimands also depend on `index`).
    fn attribute(&self, row: usize, index: usize) -> Result<Vec<f64>> {
        let x = self.inputs.row(row);
        match self.estimand {
            LocalEstimand::ExactShapley => exact_shapley(self.model, x, self.background),
            LocalEstimand::SampledShapley { n, m } | LocalEstimand::AbsContribution { n, m } => {
                let vf = ValueFunction::new(self.model, x, self.background, Imputation::Sampled { m })?;
                (0..self.model.n_features())
                    .map(|j| {
                        let mut r = rng::stream(self.seed, &[0x10c, index as u64, j as u64]);
                        let e = match self.estimand {
                            LocalEstimand::AbsContribution { .. } => abs_contribution_sampling(&vf, j, n, &mut r)?,
                            _ => shapley_sampling(&vf, j, n, &mut r)?,
                        };
                        Ok(e.mean)
                    })
                    .collect()
            }
        }
    }
}

impl LocalAttributionSource for ModelSource<'_> {
    fn n_features(&self) -> usize {
        self.model.n_features()
    }

    fn attribution(&self, index: usize) -> Result<Vec<f64>> {
        self.attribute(self.input_row(index), index)
    }
}

/// Growing cache of streamed attributions.
struct Stream<'a> {
    source: &'a dyn LocalAttributionSource,
    rows: Mutex<Vec<Vec<f64>>>,
}

impl<'a> Stream<'a> {
    fn new(source: &'a dyn LocalAttributionSource) -> Self {
        Self { source, rows: Mutex::new(Vec::new()) }
    }

    fn ensure(&self, n: usize) -> Result<()> {
        let have = self.rows.lock().expect("poisoned").len();
        if n <= have {
            return Ok(());
        }
        if let Some(limit) = self.source.len() {
            if n > limit {
                return Err(AttrError::InvalidBudget(format!("need {n} inputs but only {limit} are available")));
            }
        }
        let fresh: Vec<Vec<f64>> = (have..n).into_par_iter().map(|i| self.source.attribution(i)).collect::<Result<_>>()?;
        let d = self.source.n_features();
        if let Some(bad) = fresh.iter().find(|r| r.len() != d) {
            return Err(AttrError::DimensionMismatch { expected: d, got: bad.len() });
        }
        self.rows.lock().expect("poisoned").extend(fresh);
        Ok(())
    }

    fn matrix(&self) -> Array2<f64> {
        let rows = self.rows.lock().expect("poisoned");
        let d = self.source.n_features();
        Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j])
    }

    fn len(&self) -> usize {
        self.rows.lock().expect("poisoned").len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum GlobalStrategy {
    /// Retest the failing pair on fresh inputs, sized by the sample-size plan.
    Resample { budget: SamplingBudget },
    /// Add batches of inputs for every feature and run SPRTs per rank.
    Sprt { beta: f64, batch: usize, max_total: usize, mode: TestMode },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GlobalAttribution {
    pub scores: GlobalScores,
    pub ranking: VerifiedRanking,
    /// Distinct inputs whose attributions were computed.
    pub inputs_used: usize,
    pub per_feature_inputs: Vec<usize>,
    pub converged: bool,
    /// Per-rank SPRT decisions (SPRT strategy only).
    pub decisions: Option<Vec<Decision>>,
}

pub fn global_topk(
    source: &dyn LocalAttributionSource,
    k: usize,
    alpha: f64,
    strategy: &GlobalStrategy,
) -> Result<GlobalAttribution> {
    let d = source.n_features();
    check_k(k, d)?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(AttrError::InvalidArgument(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let stream = Stream::new(source);
    match *strategy {
        GlobalStrategy::Resample { budget } => global_resample(&stream, k, alpha, &budget),
        GlobalStrategy::Sprt { beta, batch, max_total, mode } => {
            global_sprt(&stream, k, alpha, beta, batch, max_total, mode)
        }
    }
}

fn global_resample(stream: &Stream<'_>, k: usize, alpha: f64, budget: &SamplingBudget) -> Result<GlobalAttribution> {
    budget.validate()?;
    let d = stream.source.n_features();
    let mut windows = vec![Window { start: 0, len: budget.n0 }; d];
    let mut next_unused = budget.n0;
    stream.ensure(next_unused)?;
    let max_n = budget.max_n;
    loop {
        let psi = stream.matrix();
        let scores = GlobalScores::from_windows(psi.view(), windows.clone())?;
        let ranking = verify_global_ranks(&scores, psi.view(), alpha, budget.mode)?;
        let finish = |converged, scores: GlobalScores, ranking| GlobalAttribution {
            per_feature_inputs: scores.counts(),
            scores,
            ranking,
            inputs_used: stream.len(),
            converged,
            decisions: None,
        };
        if ranking.k >= k {
            return Ok(finish(true, scores, ranking));
        }
        let fail = *ranking.first_failure().expect("a failing step exists below K");
        let (a, b) = (fail.feature_above, fail.feature_below);
        let (na, nb) = (windows[a].len, windows[b].len);
        let gap = scores.theta[a] - scores.theta[b];
        let var = |j: usize| scores.per_feature()[j].variance().unwrap_or(0.0);
        let (plan_a, plan_b) = if gap > 0.0 {
            let (pa, pb) = plan_sample_sizes(gap, var(a), var(b), fail.df, alpha, budget.scheme, budget.mode)?;
            let buffered = |n: u64| (budget.buffer_c * n as f64).ceil() as usize;
            (buffered(pa), buffered(pb))
        } else {
            (max_n, max_n)
        };
        let mut new_a = plan_a.max(na).min(max_n);
        let mut new_b = plan_b.max(nb).min(max_n);
        if new_a == na && new_b == nb {
            if na >= max_n && nb >= max_n {
                return Ok(finish(false, scores, ranking));
            }
            new_a = (2 * na).min(max_n);
            new_b = (2 * nb).min(max_n);
        }
        let start = next_unused;
        next_unused += new_a.max(new_b);
        stream.ensure(next_unused)?;
        windows[a] = Window { start, len: new_a };
        windows[b] = Window { start, len: new_b };
    }
}

fn global_sprt(
    stream: &Stream<'_>,
    k: usize,
    alpha: f64,
    beta: f64,
    batch: usize,
    max_total: usize,
    mode: TestMode,
) -> Result<GlobalAttribution> {
    let bounds = SprtBoundaries::new(alpha, beta)?;
    if batch < 2 {
        return Err(AttrError::InvalidBudget("batch must be at least 2 inputs".into()));
    }
    let d = stream.source.n_features();
    let mut state = SprtState::new(k);
    let mut latched: Vec<Option<TestOutcome>> = vec![None; k];
    let mut n = 0;
    loop {
        n += batch;
        stream.ensure(n)?;
        state.samples = n as u64;
        let psi = stream.matrix();
        let scores = GlobalScores::from_windows(psi.view(), vec![Window { start: 0, len: n }; d])?;
        let order = scores.order();
        let outcomes: Vec<TestOutcome> = (1..=k)
            .map(|rank| {
                let (a, b) = (order[rank - 1], order[rank]);
                let (sa, sb, cov, rule) = scores.pair_inputs(psi.view(), a, b)?;
                let w = welch_statistic(sa, sb, cov, rule, mode)?;
                let ratio = sprt_likelihood_ratio(w.statistic, w.df.max(1.0))?;
                Ok(TestOutcome {
                    k: rank,
                    feature_above: a,
                    feature_below: b,
                    statistic: ratio,
                    df: w.df.max(1.0),
                    threshold: bounds.upper,
                    rejected: ratio >= bounds.upper,
                })
            })
            .collect::<Result<_>>()?;
        let ratios: Vec<f64> = outcomes.iter().map(|o| o.statistic).collect();
        sprt_step(&mut state, &ratios, &bounds)?;
        for (i, o) in outcomes.iter().enumerate() {
            if latched[i].is_none() && state.decisions[i] != Decision::Continue {
                latched[i] = Some(*o);
            }
        }
        let converged = state.all_rejected();
        if converged || state.any_accepted() || n + batch > max_total {
            let leading = state.decisions.iter().take_while(|&&d| d == Decision::RejectNull).count();
            let mut steps: Vec<TestOutcome> = latched[..leading].iter().map(|o| o.expect("latched")).collect();
            if leading < k {
                let mut current = outcomes[leading];
                current.rejected = false;
                steps.push(current);
            }
            return Ok(GlobalAttribution {
                per_feature_inputs: scores.counts(),
                ranking: VerifiedRanking { k: leading, order, steps },
                scores,
                inputs_used: n,
                converged,
                decisions: Some(state.decisions),
            });
        }
    }
}

/// Shapley-Sampling estimate of the permutation average of
/// `|v(S ∪ {j}) − v(S)|`, an unbiased target for global absolute importance.
pub fn unbiased_abs_contribution<R: Rng + ?Sized>(
    vf: &ValueFunction<'_>,
    j: usize,
    n: usize,
    rng: &mut R,
) -> Result<MeanVarEstimate> {
    abs_contribution_sampling(vf, j, n, rng)
}
