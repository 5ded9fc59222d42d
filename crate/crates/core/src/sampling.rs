//! Permutation-sampling Shapley estimates and the exact subset-form oracle.

use ndarray::ArrayView1;
use rand::Rng;
use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;

use crate::data::TabularDataset;
use crate::error::{AttrError, Result};
use crate::estimate::MeanVarEstimate;
use crate::model::Model;
use crate::rng;
use crate::value::{CoalitionMask, Imputation, ValueFunction};

/// Largest `d` for which the `2^d` enumeration is attempted.
pub const EXACT_MAX_FEATURES: usize = 12;

/// One draw of `v(S ∪ {j}) − v(S)` for a random permutation.
pub fn marginal_contribution<R: Rng + ?Sized>(vf: &ValueFunction<'_>, j: usize, rng: &mut R) -> Result<f64> {
    Ok(vf.contributions(j, 1, rng)?[0])
}

/// Mean and variance of `n` i.i.d. marginal contributions of feature `j`.
pub fn shapley_sampling<R: Rng + ?Sized>(
    vf: &ValueFunction<'_>,
    j: usize,
    n: usize,
    rng: &mut R,
) -> Result<MeanVarEstimate> {
    if n < 2 {
        return Err(AttrError::InvalidBudget(format!("need at least 2 permutations, got {n}")));
    }
    Ok(MeanVarEstimate::from_samples(vf.contributions(j, n, rng)?))
}

/// Estimates of `|v(S ∪ {j}) − v(S)|` averaged over permutations, the
/// unbiased target for absolute importance.
pub fn abs_contribution_sampling<R: Rng + ?Sized>(
    vf: &ValueFunction<'_>,
    j: usize,
    n: usize,
    rng: &mut R,
) -> Result<MeanVarEstimate> {
    if n < 2 {
        return Err(AttrError::InvalidBudget(format!("need at least 2 permutations, got {n}")));
    }
    Ok(MeanVarEstimate::from_samples(vf.contributions(j, n, rng)?.into_iter().map(f64::abs)))
}

/// Samples every feature on its own stream `(seed, [feature, epoch])`.
pub fn shapley_sampling_all(
    vf: &ValueFunction<'_>,
    n: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<MeanVarEstimate>> {
    (0..vf.n_features())
        .into_par_iter()
        .map(|j| shapley_sampling(vf, j, n, &mut rng::stream(seed, &[j as u64, epoch])))
        .collect()
}

/// `ln C(n, k)`.
fn ln_binomial(n: usize, k: usize) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// Subset weights `1 / (d C(d-1, s))` indexed by coalition size `s`.
fn subset_weights(d: usize) -> Vec<f64> {
    (0..d).map(|s| (-ln_binomial(d - 1, s) - (d as f64).ln()).exp()).collect()
}

/// Values of every coalition of a `d`-player game, indexed by bitmask.
pub fn all_coalition_values<F>(d: usize, mut v: F) -> Result<Vec<f64>>
where
    F: FnMut(CoalitionMask) -> Result<f64>,
{
    if d > EXACT_MAX_FEATURES {
        return Err(AttrError::TooManyFeatures { got: d, limit: EXACT_MAX_FEATURES });
    }
    (0..1u64 << d).map(|bits| v(CoalitionMask::from_bits(d, bits))).collect()
}

fn subset_sum(d: usize, values: &[f64], term: impl Fn(f64) -> f64) -> Result<Vec<f64>> {
    if d > EXACT_MAX_FEATURES {
        return Err(AttrError::TooManyFeatures { got: d, limit: EXACT_MAX_FEATURES });
    }
    if values.len() != 1 << d {
        return Err(AttrError::DimensionMismatch { expected: 1 << d, got: values.len() });
    }
    let weights = subset_weights(d);
    Ok((0..d)
        .map(|j| {
            let bit = 1usize << j;
            (0..values.len())
                .filter(|s| s & bit == 0)
                .map(|s| weights[s.count_ones() as usize] * term(values[s | bit] - values[s]))
                .sum()
        })
        .collect())
}

/// Exact Shapley values of a game given all `2^d` coalition values.
pub fn shapley_from_values(d: usize, values: &[f64]) -> Result<Vec<f64>> {
    subset_sum(d, values, |delta| delta)
}

/// Exact permutation average of `|v(S ∪ {j}) − v(S)|`.
pub fn abs_contribution_from_values(d: usize, values: &[f64]) -> Result<Vec<f64>> {
    subset_sum(d, values, f64::abs)
}

/// All `2^d` coalition values under exhaustive imputation.
pub fn exact_coalition_values(
    model: &dyn Model,
    x: ArrayView1<'_, f64>,
    background: &TabularDataset,
) -> Result<Vec<f64>> {
    let vf = ValueFunction::new(model, x, background, Imputation::Exhaustive)?;
    let d = vf.n_features();
    if d > EXACT_MAX_FEATURES {
        return Err(AttrError::TooManyFeatures { got: d, limit: EXACT_MAX_FEATURES });
    }
    let masks: Vec<_> = (0..1u64 << d).map(|b| CoalitionMask::from_bits(d, b)).collect();
    // exhaustive imputation never touches the rng
    let chunks: Vec<Vec<f64>> = masks
        .par_chunks(256)
        .map(|chunk| vf.values(chunk, &mut rng::stream(0, &[])))
        .collect::<Result<_>>()?;
    Ok(chunks.concat())
}

/// Exact Shapley values of `x` with the whole background as the imputation
/// distribution.
pub fn exact_shapley(model: &dyn Model, x: ArrayView1<'_, f64>, background: &TabularDataset) -> Result<Vec<f64>> {
    let values = exact_coalition_values(model, x, background)?;
    shapley_from_values(model.n_features(), &values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FnModel, LinearModel};
    use ndarray::{array, Array2};

    fn bg3() -> TabularDataset {
        TabularDataset::from_array(array![[0.0, 1.0, 2.0], [2.0, -1.0, 4.0], [1.0, 3.0, 0.0], [5.0, 0.0, 1.0]])
            .unwrap()
    }

    #[test]
    fn constant_model_contributes_nothing() {
        let model = FnModel::new(3, |_| 4.2);
        let bg = bg3();
        let vf = ValueFunction::new(&model, array![1.0, 1.0, 1.0].view(), &bg, Imputation::Sampled { m: 10 }).unwrap();
        let est = shapley_sampling(&vf, 1, 100, &mut rng::stream(1, &[])).unwrap();
        assert_eq!(est.mean, 0.0);
        assert_eq!(est.variance(), Some(0.0));
    }

    #[test]
    fn additive_model_exhaustive_is_exact() {
        let w = [2.0, -1.0, 0.5];
        let model = LinearModel::new(w.to_vec(), 1.0);
        let bg = bg3();
        let x = array![3.0, 3.0, 3.0];
        let vf = ValueFunction::new(&model, x.view(), &bg, Imputation::Exhaustive).unwrap();
        let mu = bg.column_means();
        for j in 0..3 {
            let expected = w[j] * (x[j] - mu[j]);
            for _ in 0..5 {
                let c = marginal_contribution(&vf, j, &mut rng::stream(j as u64, &[])).unwrap();
                assert!((c - expected).abs() < 1e-12);
            }
            let est = shapley_sampling(&vf, j, 20, &mut rng::stream(3, &[j as u64])).unwrap();
            assert!((est.mean - expected).abs() < 1e-12);
            assert!(est.variance().unwrap() < 1e-20);
        }
        let exact = exact_shapley(&model, x.view(), &bg).unwrap();
        for j in 0..3 {
            assert!((exact[j] - w[j] * (x[j] - mu[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn xor_like_two_player_branches() {
        // f = x0 * x1 at x = (1, 1) against the single background row (0, -1):
        // feature 0 first: f(1, -1) - f(0, -1) = -1; feature 1 first: f(1, 1) - f(0, 1) = 1.
        let model = FnModel::new(2, |r| r[0] * r[1]);
        let bg = TabularDataset::from_array(array![[0.0, -1.0]]).unwrap();
        let vf = ValueFunction::new(&model, array![1.0, 1.0].view(), &bg, Imputation::Sampled { m: 3 }).unwrap();
        let draws = vf.contributions(0, 400, &mut rng::stream(8, &[])).unwrap();
        assert!(draws.iter().all(|&c| c == 1.0 || c == -1.0));
        let ups = draws.iter().filter(|&&c| c > 0.0).count();
        // binomial(400, 1/2): 3 sd = 30
        assert!((ups as i64 - 200).abs() < 30, "{ups}");
        let exact = exact_shapley(&model, array![1.0, 1.0].view(), &bg).unwrap();
        assert!(exact[0].abs() < 1e-15);
    }

    #[test]
    fn efficiency_and_symmetry() {
        let model = FnModel::new(4, |r| r[0] * r[1] + (r[2] + r[3]).sin() + r[0].powi(2));
        let bg = TabularDataset::from_array(Array2::from_shape_fn((7, 4), |(i, j)| ((i * 3 + j * 5) % 7) as f64 / 3.0))
            .unwrap();
        let x = array![1.0, -0.5, 2.0, 0.3];
        let values = exact_coalition_values(&model, x.view(), &bg).unwrap();
        let phi = shapley_from_values(4, &values).unwrap();
        let total: f64 = phi.iter().sum();
        assert!((total - (values[15] - values[0])).abs() < 1e-9);

        let sym = FnModel::new(3, |r| r[0] * r[1] * r[2] + r.sum());
        let bg = TabularDataset::from_array(array![[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]).unwrap();
        let phi = exact_shapley(&sym, array![2.0, 2.0, 2.0].view(), &bg).unwrap();
        assert!((phi[0] - phi[1]).abs() < 1e-12 && (phi[1] - phi[2]).abs() < 1e-12);
    }

    #[test]
    fn invalid_budget_and_size() {
        let model = LinearModel::new(vec![1.0, 1.0, 1.0], 0.0);
        let bg = bg3();
        let vf = ValueFunction::new(&model, array![1.0, 1.0, 1.0].view(), &bg, Imputation::Sampled { m: 1 }).unwrap();
        assert!(matches!(shapley_sampling(&vf, 0, 1, &mut rng::stream(0, &[])), Err(AttrError::InvalidBudget(_))));
        let wide = LinearModel::new(vec![1.0; 13], 0.0);
        let bg13 = TabularDataset::from_array(Array2::zeros((2, 13))).unwrap();
        assert!(matches!(
            exact_shapley(&wide, Array2::<f64>::zeros((1, 13)).row(0), &bg13),
            Err(AttrError::TooManyFeatures { got: 13, .. })
        ));
    }

    #[test]
    fn abs_contributions_dominate() {
        let model = FnModel::new(2, |r| r[0] * r[1]);
        let bg = TabularDataset::from_array(array![[0.0, -1.0]]).unwrap();
        let values = exact_coalition_values(&model, array![1.0, 1.0].view(), &bg).unwrap();
        let xi = abs_contribution_from_values(2, &values).unwrap();
        let phi = shapley_from_values(2, &values).unwrap();
        assert!((xi[0] - 1.0).abs() < 1e-15 && phi[0].abs() < 1e-15);
    }
}
