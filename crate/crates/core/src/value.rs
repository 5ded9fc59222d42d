//! Coalition masks and the marginal-imputation value function
//! `v(S) = E_r[f(x_S, r_{not S})]`, with `r` drawn from a background dataset.

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{TabularDataset, MAX_FEATURES};
use crate::error::{AttrError, Result};
use crate::model::{eval_model, Model};

/// A subset of `[d]` stored as a bitmask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CoalitionMask {
    bits: u64,
    d: u8,
}

impl CoalitionMask {
    pub fn empty(d: usize) -> Self {
        assert!(d <= MAX_FEATURES, "at most {MAX_FEATURES} features");
        Self { bits: 0, d: d as u8 }
    }

    pub fn full(d: usize) -> Self {
        let mut m = Self::empty(d);
        m.bits = if d == 64 { u64::MAX } else { (1u64 << d) - 1 };
        m
    }

    pub fn from_bits(d: usize, bits: u64) -> Self {
        let full = Self::full(d);
        Self { bits: bits & full.bits, d: d as u8 }
    }

    pub fn from_members(d: usize, members: &[usize]) -> Self {
        let mut m = Self::empty(d);
        for &j in members {
            m.insert(j);
        }
        m
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        let mut m = Self::empty(bits.len());
        for (j, &b) in bits.iter().enumerate() {
            if b {
                m.insert(j);
            }
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.d as usize
    }

    pub fn bits(&self) -> u64 {
        self.bits
    }

    pub fn contains(&self, j: usize) -> bool {
        self.bits >> j & 1 == 1
    }

    pub fn insert(&mut self, j: usize) {
        assert!(j < self.dim());
        self.bits |= 1 << j;
    }

    pub fn remove(&mut self, j: usize) {
        self.bits &= !(1 << j);
    }

    pub fn with(mut self, j: usize) -> Self {
        self.insert(j);
        self
    }

    pub fn size(&self) -> usize {
        self.bits.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.bits == 0
    }

    pub fn is_full(&self) -> bool {
        self.size() == self.dim()
    }

    /// Members in increasing order.
    pub fn members(&self) -> impl Iterator<Item = usize> + '_ {
        let mut rest = self.bits;
        std::iter::from_fn(move || {
            (rest != 0).then(|| {
                let j = rest.trailing_zeros() as usize;
                rest &= rest - 1;
                j
            })
        })
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.dim()).map(|j| self.contains(j)).collect()
    }
}

/// How features outside the coalition are filled in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Imputation {
    /// `m` background rows drawn uniformly with replacement per evaluation.
    Sampled { m: usize },
    /// Every background row once; deterministic.
    Exhaustive,
}

impl Default for Imputation {
    fn default() -> Self {
        Imputation::Sampled { m: 10 }
    }
}

/// Rows per model call when batching many evaluations.
const BATCH_ROWS: usize = 8192;

/// The value function of one explicand.
pub struct ValueFunction<'a> {
    model: &'a dyn Model,
    x: Array1<f64>,
    background: &'a TabularDataset,
    imputation: Imputation,
}

impl<'a> ValueFunction<'a> {
    pub fn new(
        model: &'a dyn Model,
        x: ArrayView1<'_, f64>,
        background: &'a TabularDataset,
        imputation: Imputation,
    ) -> Result<Self> {
        let d = model.n_features();
        if x.len() != d {
            return Err(AttrError::DimensionMismatch { expected: d, got: x.len() });
        }
        if background.n_features() != d {
            return Err(AttrError::DimensionMismatch { expected: d, got: background.n_features() });
        }
        if d > MAX_FEATURES {
            return Err(AttrError::TooManyFeatures { got: d, limit: MAX_FEATURES });
        }
        if let Imputation::Sampled { m: 0 } = imputation {
            return Err(AttrError::InvalidBudget("need at least one imputation sample".into()));
        }
        Ok(Self { model, x: x.to_owned(), background, imputation })
    }

    pub fn n_features(&self) -> usize {
        self.x.len()
    }

    pub fn model(&self) -> &dyn Model {
        self.model
    }

    pub fn x(&self) -> ArrayView1<'_, f64> {
        self.x.view()
    }

    pub fn background(&self) -> &TabularDataset {
        self.background
    }

    pub fn imputation(&self) -> Imputation {
        self.imputation
    }

    /// Rows averaged per evaluation.
    pub fn rows_per_value(&self) -> usize {
        match self.imputation {
            Imputation::Sampled { m } => m,
            Imputation::Exhaustive => self.background.n_rows(),
        }
    }

    fn draw_rows<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut Vec<usize>) {
        out.clear();
        match self.imputation {
            Imputation::Sampled { m } => {
                let n = self.background.n_rows();
                out.extend((0..m).map(|_| rng.random_range(0..n)));
            }
            Imputation::Exhaustive => out.extend(0..self.background.n_rows()),
        }
    }

    fn fill_row(&self, dst: &mut [f64], mask: CoalitionMask, bg_row: usize) {
        let bg = self.background.row(bg_row);
        for (j, v) in dst.iter_mut().enumerate() {
            *v = if mask.contains(j) { self.x[j] } else { bg[j] };
        }
    }

    /// `f(x)`, the value of the grand coalition.
    pub fn full_value(&self) -> Result<f64> {
        let batch = self.x.view().insert_axis(ndarray::Axis(0));
        Ok(eval_model(self.model, batch)?[0])
    }

    /// `v(∅)` averaged over every background row.
    pub fn empty_value(&self) -> Result<f64> {
        let values = self.background.values();
        let mut sum = 0.0;
        for start in (0..values.nrows()).step_by(BATCH_ROWS) {
            let end = (start + BATCH_ROWS).min(values.nrows());
            sum += eval_model(self.model, values.slice(ndarray::s![start..end, ..]))?.iter().sum::<f64>();
        }
        Ok(sum / values.nrows() as f64)
    }

    pub fn value<R: Rng + ?Sized>(&self, mask: CoalitionMask, rng: &mut R) -> Result<f64> {
        Ok(self.values(&[mask], rng)?[0])
    }

    /// Evaluates `v` on each mask, drawing fresh imputation rows per mask.
    pub fn values<R: Rng + ?Sized>(&self, masks: &[CoalitionMask], rng: &mut R) -> Result<Vec<f64>> {
        let d = self.n_features();
        let per = self.rows_per_value();
        let mut out = Vec::with_capacity(masks.len());
        let mut rows = Vec::with_capacity(per);
        let chunk = (BATCH_ROWS / per).max(1);
        for group in masks.chunks(chunk) {
            let mut batch = Array2::<f64>::zeros((group.len() * per, d));
            let mut full_slots = Vec::new();
            for (g, &mask) in group.iter().enumerate() {
                if mask.dim() != d {
                    return Err(AttrError::DimensionMismatch { expected: d, got: mask.dim() });
                }
                if mask.is_full() {
                    full_slots.push(g);
                }
                self.draw_rows(rng, &mut rows);
                for (r, &bg) in rows.iter().enumerate() {
                    let mut row = batch.row_mut(g * per + r);
                    self.fill_row(row.as_slice_mut().expect("standard layout"), mask, bg);
                }
            }
            let y = eval_model(self.model, batch.view())?;
            out.extend(y.chunks(per).map(|c| c.iter().sum::<f64>() / per as f64));
            if !full_slots.is_empty() {
                // no imputation happens for the grand coalition: use f(x) itself
                let fx = self.full_value()?;
                let base = out.len() - group.len();
                for g in full_slots {
                    out[base + g] = fx;
                }
            }
        }
        Ok(out)
    }

    /// `count` independent draws of `v(S ∪ {j}) − v(S)`, where `S` is the set
    /// of features preceding `j` in a uniform random permutation. Both
    /// evaluations of a draw share the same imputation rows.
    pub fn contributions<R: Rng + ?Sized>(&self, j: usize, count: usize, rng: &mut R) -> Result<Vec<f64>> {
        let d = self.n_features();
        if j >= d {
            return Err(AttrError::InvalidArgument(format!("feature {j} out of range for d = {d}")));
        }
        let per = self.rows_per_value();
        let chunk = (BATCH_ROWS / (2 * per)).max(1);
        let mut perm: Vec<usize> = (0..d).collect();
        let mut rows = Vec::with_capacity(per);
        let mut out = Vec::with_capacity(count);
        let mut remaining = count;
        while remaining > 0 {
            let draws = remaining.min(chunk);
            let mut batch = Array2::<f64>::zeros((draws * 2 * per, d));
            for t in 0..draws {
                perm.shuffle(rng);
                let mut without = CoalitionMask::empty(d);
                for &k in perm.iter().take_while(|&&k| k != j) {
                    without.insert(k);
                }
                let with = without.with(j);
                self.draw_rows(rng, &mut rows);
                let base = t * 2 * per;
                for (r, &bg) in rows.iter().enumerate() {
                    self.fill_row(batch.row_mut(base + r).as_slice_mut().expect("layout"), with, bg);
                    self.fill_row(batch.row_mut(base + per + r).as_slice_mut().expect("layout"), without, bg);
                }
            }
            let y = eval_model(self.model, batch.view())?;
            out.extend(y.chunks(2 * per).map(|c| {
                let (a, b) = c.split_at(per);
                a.iter().zip(b).map(|(p, q)| p - q).sum::<f64>() / per as f64
            }));
            remaining -= draws;
        }
        Ok(out)
    }
}

/// `v(S)` for one coalition with `m` sampled imputation rows.
pub fn value_function_marginal<R: Rng + ?Sized>(
    model: &dyn Model,
    x: ArrayView1<'_, f64>,
    mask: CoalitionMask,
    background: &TabularDataset,
    m: usize,
    rng: &mut R,
) -> Result<f64> {
    ValueFunction::new(model, x, background, Imputation::Sampled { m })?.value(mask, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LinearModel;
    use crate::rng;
    use ndarray::array;

    fn background() -> TabularDataset {
        TabularDataset::from_array(array![[0.0, 1.0, 2.0], [2.0, -1.0, 4.0], [1.0, 3.0, 0.0], [5.0, 0.0, 1.0]])
            .unwrap()
    }

    #[test]
    fn mask_basics() {
        let m = CoalitionMask::from_members(5, &[4, 0, 2]);
        assert_eq!(m.members().collect::<Vec<_>>(), vec![0, 2, 4]);
        assert_eq!(m.size(), 3);
        assert!(CoalitionMask::full(5).is_full());
        assert_eq!(CoalitionMask::full(64).size(), 64);
        assert_eq!(CoalitionMask::from_bools(&m.to_bools()), m);
    }

    #[test]
    fn full_coalition_is_exact() {
        let model = LinearModel::new(vec![0.1, 0.2, 0.7], 0.3);
        let bg = background();
        let x = array![0.3, 0.6, 0.9];
        let fx = eval_model(&model, x.view().insert_axis(ndarray::Axis(0))).unwrap()[0];
        for m in [1, 3, 17] {
            let v = value_function_marginal(&model, x.view(), CoalitionMask::full(3), &bg, m, &mut rng::stream(1, &[])).unwrap();
            assert_eq!(v, fx);
        }
    }

    #[test]
    fn exhaustive_empty_coalition_is_background_mean() {
        let model = LinearModel::new(vec![1.0, 2.0, -1.0], 0.5);
        let bg = background();
        let vf = ValueFunction::new(&model, array![9.0, 9.0, 9.0].view(), &bg, Imputation::Exhaustive).unwrap();
        let v = vf.value(CoalitionMask::empty(3), &mut rng::stream(0, &[])).unwrap();
        let mean = eval_model(&model, bg.values().view()).unwrap().iter().sum::<f64>() / 4.0;
        assert!((v - mean).abs() < 1e-12);
    }

    #[test]
    fn seeded_evaluation_is_bit_reproducible() {
        let model = LinearModel::new(vec![1.0, 2.0, -1.0], 0.5);
        let bg = background();
        let vf = ValueFunction::new(&model, array![1.0, 2.0, 3.0].view(), &bg, Imputation::Sampled { m: 10 }).unwrap();
        let masks = [CoalitionMask::from_members(3, &[1]), CoalitionMask::empty(3)];
        let a = vf.values(&masks, &mut rng::stream(5, &[1])).unwrap();
        let b = vf.values(&masks, &mut rng::stream(5, &[1])).unwrap();
        assert_eq!(a, b);
        let c1 = vf.contributions(2, 50, &mut rng::stream(5, &[2])).unwrap();
        let c2 = vf.contributions(2, 50, &mut rng::stream(5, &[2])).unwrap();
        assert_eq!(c1, c2);
    }

    #[test]
    fn linear_value_matches_closed_form_in_expectation() {
        let w = [1.5, -2.0, 0.5];
        let model = LinearModel::new(w.to_vec(), 0.25);
        let bg = background();
        let mu = bg.column_means();
        let x = array![3.0, 1.0, -2.0];
        let vf = ValueFunction::new(&model, x.view(), &bg, Imputation::Sampled { m: 1 }).unwrap();
        let mut r = rng::stream(99, &[]);
        for bits in 0..8u64 {
            let mask = CoalitionMask::from_bits(3, bits);
            let expected: f64 = (0..3).map(|j| w[j] * if mask.contains(j) { x[j] } else { mu[j] }).sum::<f64>() + 0.25;
            if bits == 7 {
                assert_eq!(vf.value(mask, &mut r).unwrap(), expected);
                continue;
            }
            // 10^4 single-row evaluations: mean within 3 standard errors
            let draws = vf.values(&vec![mask; 10_000], &mut r).unwrap();
            let est = crate::estimate::MeanVarEstimate::from_samples(draws);
            let se = est.std_error().unwrap();
            assert!((est.mean - expected).abs() <= 3.0 * se + 1e-12, "mask {bits}: {} vs {expected} (se {se})", est.mean);
        }
    }
}
