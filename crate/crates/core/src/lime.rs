//! LIME perturbations, LARS feature selection, and S-LIME: each LARS entry
//! is tested against the runner-up, growing the sample pool until every one
//! of the first K entries is significant.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::TabularDataset;
use crate::error::{AttrError, Result};
use crate::model::{eval_model, Model};
use crate::rng;
use crate::stats::t_quantile;
use crate::value::CoalitionMask;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimeSample {
    pub mask: CoalitionMask,
    pub weight: f64,
    pub label: f64,
}

/// Proximity kernel width `0.75 √d`.
pub fn kernel_width(d: usize) -> f64 {
    0.75 * (d as f64).sqrt()
}

/// Proximity weight of a mask with `on` of `d` features kept.
pub fn proximity_weight(d: usize, on: usize) -> f64 {
    let dist = (d - on) as f64 / d as f64;
    (-(dist * dist) / kernel_width(d).powi(2)).exp()
}

/// `n` perturbations of `x`: each feature kept with probability 1/2, the
/// rest taken from one random background row.
pub fn lime_perturb<R: Rng + ?Sized>(
    model: &dyn Model,
    x: ArrayView1<'_, f64>,
    background: &TabularDataset,
    n: usize,
    rng: &mut R,
) -> Result<Vec<LimeSample>> {
    let d = x.len();
    if background.n_features() != d {
        return Err(AttrError::DimensionMismatch { expected: d, got: background.n_features() });
    }
    if d > crate::data::MAX_FEATURES {
        return Err(AttrError::TooManyFeatures { got: d, limit: crate::data::MAX_FEATURES });
    }
    let mut masks = Vec::with_capacity(n);
    let mut points = Array2::<f64>::zeros((n, d));
    for i in 0..n {
        let mask = CoalitionMask::from_bits(d, rng.random::<u64>() & low_bits(d));
        let bg = background.row(rng.random_range(0..background.n_rows()));
        for j in 0..d {
            points[[i, j]] = if mask.contains(j) { x[j] } else { bg[j] };
        }
        masks.push(mask);
    }
    let mut labels = Vec::with_capacity(n);
    for chunk in points.axis_chunks_iter(Axis(0), 8192) {
        labels.extend(eval_model(model, chunk)?);
    }
    Ok(masks
        .into_iter()
        .zip(labels)
        .map(|(mask, label)| LimeSample { mask, weight: proximity_weight(d, mask.size()), label })
        .collect())
}

fn low_bits(d: usize) -> u64 {
    if d == 64 {
        u64::MAX
    } else {
        (1u64 << d) - 1
    }
}

/// Kernel-weighted, centered design with unit-norm columns, and the matching
/// weighted, centered target. Constant columns stay zero.
pub fn weighted_design(samples: &[LimeSample]) -> Result<(Array2<f64>, Array1<f64>)> {
    let n = samples.len();
    if n < 2 {
        return Err(AttrError::InvalidBudget("need at least two LIME samples".into()));
    }
    let d = samples[0].mask.dim();
    let wsum: f64 = samples.iter().map(|s| s.weight).sum();
    let mut zbar = vec![0.0; d];
    let mut ybar = 0.0;
    for s in samples {
        for j in s.mask.members() {
            zbar[j] += s.weight;
        }
        ybar += s.weight * s.label;
    }
    zbar.iter_mut().for_each(|z| *z /= wsum);
    ybar /= wsum;
    let mut x = Array2::<f64>::zeros((n, d));
    let mut y = Array1::<f64>::zeros(n);
    for (i, s) in samples.iter().enumerate() {
        let sw = s.weight.sqrt();
        for j in 0..d {
            let z = if s.mask.contains(j) { 1.0 } else { 0.0 };
            x[[i, j]] = sw * (z - zbar[j]);
        }
        y[i] = sw * (s.label - ybar);
    }
    for mut col in x.columns_mut() {
        let norm = col.dot(&col).sqrt();
        if norm > 1e-12 * (n as f64).sqrt() {
            col.mapv_inplace(|v| v / norm);
        } else {
            col.fill(0.0);
        }
    }
    Ok((x, y))
}

/// Least angle regression with the lasso modification, so features enter
/// in the order of the lasso path.
#[derive(Debug, Clone)]
pub struct Lars {
    x: Array2<f64>,
    residual: Array1<f64>,
    beta: Vec<f64>,
    active: Vec<usize>,
    signs: Vec<f64>,
    usable: Vec<bool>,
    pending: Option<usize>,
    entered: Vec<usize>,
}

impl Lars {
    pub fn new(x: Array2<f64>, y: Array1<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(AttrError::DimensionMismatch { expected: x.nrows(), got: y.len() });
        }
        let d = x.ncols();
        let usable = x.columns().into_iter().map(|c| c.iter().any(|&v| v != 0.0)).collect();
        Ok(Self {
            x,
            residual: y,
            beta: vec![0.0; d],
            active: Vec::new(),
            signs: vec![0.0; d],
            usable,
            pending: None,
            entered: Vec::new(),
        })
    }

    pub fn design(&self) -> ArrayView2<'_, f64> {
        self.x.view()
    }

    pub fn residual(&self) -> ArrayView1<'_, f64> {
        self.residual.view()
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.beta
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    /// Features in order of first entry.
    pub fn entered(&self) -> &[usize] {
        &self.entered
    }

    pub fn correlations(&self) -> Array1<f64> {
        self.x.t().dot(&self.residual)
    }

    fn inactive(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.x.ncols()).filter(move |&j| self.usable[j] && !self.active.contains(&j))
    }

    fn scale(&self) -> f64 {
        self.residual.dot(&self.residual).sqrt().max(f64::MIN_POSITIVE)
    }

    /// The feature that enters next, without advancing.
    pub fn peek(&mut self) -> Result<usize> {
        if let Some(j) = self.pending {
            return Ok(j);
        }
        let c = self.correlations();
        let best = self
            .inactive()
            .map(|j| (j, c[j].abs()))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .ok_or_else(|| AttrError::InvalidArgument("no inactive feature left".into()))?;
        if best.1 <= 1e-12 * self.scale() {
            return Err(AttrError::DegenerateDesign);
        }
        self.pending = Some(best.0);
        Ok(best.0)
    }

    /// Adds the next feature and moves the fit to the following entry
    /// breakpoint (or to the least-squares fit once no feature can enter).
    pub fn next_feature(&mut self) -> Result<usize> {
        let j = self.peek()?;
        self.pending = None;
        let c = self.correlations();
        self.signs[j] = c[j].signum();
        self.active.push(j);
        if !self.entered.contains(&j) {
            self.entered.push(j);
        }
        self.advance()?;
        Ok(j)
    }

    fn advance(&mut self) -> Result<()> {
        loop {
            let c = self.correlations();
            let big_c = self.active.iter().map(|&j| c[j].abs()).fold(0.0, f64::max);
            let m = self.active.len();
            let gram = DMatrix::from_fn(m, m, |p, q| {
                let (a, b) = (self.active[p], self.active[q]);
                self.signs[a] * self.signs[b] * self.x.column(a).dot(&self.x.column(b))
            });
            let chol = gram.cholesky().ok_or(AttrError::DegenerateDesign)?;
            let ginv_one = chol.solve(&DVector::from_element(m, 1.0));
            let total = ginv_one.sum();
            if !(total > 0.0) {
                return Err(AttrError::DegenerateDesign);
            }
            let big_a = 1.0 / total.sqrt();
            let w: Vec<f64> = ginv_one.iter().map(|v| v * big_a).collect();
            let mut u = Array1::<f64>::zeros(self.x.nrows());
            for (p, &j) in self.active.iter().enumerate() {
                u.scaled_add(self.signs[j] * w[p], &self.x.column(j));
            }
            let a = self.x.t().dot(&u);

            let eps = 1e-12 * big_c.max(1e-300);
            let mut enter: Option<(f64, usize)> = None;
            for j in self.inactive() {
                for g in [(big_c - c[j]) / (big_a - a[j]), (big_c + c[j]) / (big_a + a[j])] {
                    if g > eps / big_a && g.is_finite() && enter.is_none_or(|(best, _)| g < best) {
                        enter = Some((g, j));
                    }
                }
            }
            let mut drop: Option<(f64, usize)> = None;
            for (p, &j) in self.active.iter().enumerate() {
                let dj = self.signs[j] * w[p];
                let g = -self.beta[j] / dj;
                if g > 1e-14 && drop.is_none_or(|(best, _)| g < best) {
                    drop = Some((g, p));
                }
            }
            let full = big_c / big_a;
            let gamma_enter = enter.map_or(full, |(g, _)| g.min(full));

            if let Some((g, p)) = drop.filter(|&(g, _)| g < gamma_enter) {
                self.step(g, &w, &u);
                let j = self.active.remove(p);
                self.beta[j] = 0.0;
                if self.active.is_empty() {
                    return Ok(());
                }
                continue;
            }
            self.step(gamma_enter, &w, &u);
            if let Some((g, j)) = enter {
                if g <= full {
                    self.pending = Some(j);
                }
            }
            return Ok(());
        }
    }

    fn step(&mut self, gamma: f64, w: &[f64], u: &Array1<f64>) {
        for (p, &j) in self.active.iter().enumerate() {
            self.beta[j] += gamma * self.signs[j] * w[p];
        }
        self.residual.scaled_add(-gamma, u);
    }
}

/// Plain LARS selection of `k` features (K-LASSO).
pub fn lars_select(samples: &[LimeSample], k: usize) -> Result<Vec<usize>> {
    let (x, y) = weighted_design(samples)?;
    let mut lars = Lars::new(x, y)?;
    while lars.entered().len() < k {
        lars.next_feature()?;
    }
    Ok(lars.entered()[..k].to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlimeConfig {
    pub alpha: f64,
    pub n0: usize,
    pub max_n: usize,
    pub tol: f64,
}

impl Default for SlimeConfig {
    fn default() -> Self {
        Self { alpha: 0.05, n0: 1000, max_n: 100_000, tol: 1e-4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionStep {
    pub k: usize,
    pub winner: usize,
    pub runner_up: Option<usize>,
    /// Gap between the two absolute correlations with the residual.
    pub gap: f64,
    pub statistic: f64,
    pub threshold: f64,
    pub n: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub ordered_features: Vec<usize>,
    /// Tests of the final pass over the pool.
    pub steps: Vec<SelectionStep>,
    pub pool_size: usize,
    /// Pool sizes tried, in order.
    pub pool_history: Vec<usize>,
    pub converged: bool,
}

/// Winner-vs-runner-up test at the current LARS residual.
fn test_step(lars: &Lars, k: usize, winner: usize, level: f64, tol: f64) -> Result<SelectionStep> {
    let n = lars.design().nrows();
    let c = lars.correlations();
    let runner_up = lars
        .inactive()
        .filter(|&j| j != winner)
        .max_by(|&a, &b| c[a].abs().total_cmp(&c[b].abs()).then(b.cmp(&a)));
    let Some(r) = runner_up else {
        return Ok(SelectionStep { k, winner, runner_up: None, gap: f64::INFINITY, statistic: f64::INFINITY, threshold: 0.0, n, passed: true });
    };
    let (s1, s2) = (c[winner].signum(), c[r].signum());
    let x = lars.design();
    let res = lars.residual();
    let terms = (0..n).map(|i| (s1 * x[[i, winner]] - s2 * x[[i, r]]) * res[i]);
    let est = crate::estimate::MeanVarEstimate::from_samples(terms);
    let sd = est.variance().unwrap_or(0.0).sqrt();
    let statistic = if sd > 0.0 {
        est.mean / (sd / (n as f64).sqrt())
    } else if est.mean > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    let threshold = t_quantile(1.0 - level, (n - 1) as f64)?;
    let norm = res.dot(&res).sqrt();
    let gap = if norm > 0.0 { (c[winner].abs() - c[r].abs()) / norm } else { 0.0 };
    let passed = statistic >= threshold || gap <= tol;
    Ok(SelectionStep { k, winner, runner_up: Some(r), gap, statistic, threshold, n, passed })
}

/// One S-LIME pass over a fixed pool.
fn slime_pass(samples: &[LimeSample], k: usize, level: f64, tol: f64) -> Result<(Vec<usize>, Vec<SelectionStep>)> {
    let (x, y) = weighted_design(samples)?;
    let mut lars = Lars::new(x, y)?;
    let mut selected = Vec::new();
    let mut steps = Vec::new();
    while selected.len() < k {
        let winner = lars.peek()?;
        if selected.contains(&winner) {
            lars.next_feature()?;
            continue;
        }
        let step = test_step(&lars, selected.len() + 1, winner, level, tol)?;
        steps.push(step);
        if !step.passed {
            break;
        }
        selected.push(winner);
        if selected.len() < k {
            lars.next_feature()?;
        }
    }
    Ok((selected, steps))
}

pub fn slime_select(
    model: &dyn Model,
    x: ArrayView1<'_, f64>,
    background: &TabularDataset,
    k: usize,
    config: &SlimeConfig,
    seed: u64,
) -> Result<SelectionTrace> {
    let d = x.len();
    if k == 0 || k > d {
        return Err(AttrError::InvalidArgument(format!("K must lie in 1..={d}, got {k}")));
    }
    if !(config.alpha > 0.0 && config.alpha < 1.0) {
        return Err(AttrError::InvalidArgument(format!("alpha must lie in (0, 1), got {}", config.alpha)));
    }
    if config.n0 < 2 || config.n0 > config.max_n {
        return Err(AttrError::InvalidBudget(format!("need 2 <= n0 <= max_n, got {} and {}", config.n0, config.max_n)));
    }
    if !(config.tol >= 0.0) {
        return Err(AttrError::InvalidArgument(format!("tolerance must be non-negative, got {}", config.tol)));
    }
    let level = config.alpha / (2.0 * k as f64);
    let mut rng = rng::stream(seed, &[0x51_1e]);
    let mut pool = lime_perturb(model, x, background, config.n0, &mut rng)?;
    let mut history = vec![pool.len()];
    loop {
        let (selected, steps) = slime_pass(&pool, k, level, config.tol)?;
        let converged = selected.len() == k;
        if converged || pool.len() >= config.max_n {
            return Ok(SelectionTrace {
                ordered_features: selected,
                steps,
                pool_size: pool.len(),
                pool_history: history,
                converged,
            });
        }
        let target = (2 * pool.len()).min(config.max_n);
        pool.extend(lime_perturb(model, x, background, target - pool.len(), &mut rng)?);
        history.push(pool.len());
    }
}
