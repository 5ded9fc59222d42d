//! KernelSHAP: all `d` Shapley values from one set of coalition samples,
//! fit by least squares under the efficiency constraint, with bootstrap
//! covariance over the cached coalition values.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{AttrError, Result};
use crate::rng;
use crate::value::{CoalitionMask, ValueFunction};

/// Default coalition budget `2d + 2048`.
pub fn default_budget(d: usize) -> usize {
    2 * d + 2048
}

pub const DEFAULT_BOOTSTRAP: usize = 250;

/// A coalition, its (estimated) value, and its regression weight.
///
/// Coalitions drawn from the Shapley kernel distribution carry weight 1;
/// enumerated designs carry the exact kernel weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoalitionSample {
    pub mask: CoalitionMask,
    pub value: f64,
    pub kernel_weight: f64,
}

/// Symmetric d×d covariance of attribution estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrix {
    entries: Array2<f64>,
}

impl CovarianceMatrix {
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        let (r, c) = entries.dim();
        if r != c {
            return Err(AttrError::DimensionMismatch { expected: r, got: c });
        }
        for i in 0..r {
            if !(entries[[i, i]] >= 0.0) {
                return Err(AttrError::DegenerateVariance(format!("negative variance on diagonal {i}")));
            }
            for j in 0..i {
                let (a, b) = (entries[[i, j]], entries[[j, i]]);
                if (a - b).abs() > 1e-10 * (1.0 + a.abs().max(b.abs())) {
                    return Err(AttrError::InvalidArgument("covariance matrix is not symmetric".into()));
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn zeros(d: usize) -> Self {
        Self { entries: Array2::zeros((d, d)) }
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[[i, j]]
    }

    pub fn variance(&self, i: usize) -> f64 {
        self.entries[[i, i]]
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    /// Empirical covariance (divisor `len - 1`) of equally long vectors.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let b = rows.len();
        if b < 2 {
            return Err(AttrError::InvalidBudget("need at least two rows for a covariance".into()));
        }
        let d = rows[0].len();
        let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / b as f64).collect();
        let mut entries = Array2::zeros((d, d));
        for r in rows {
            for i in 0..d {
                let di = r[i] - mean[i];
                for j in 0..=i {
                    entries[[i, j]] += di * (r[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in 0..=i {
                let v = entries[[i, j]] / (b - 1) as f64;
                entries[[i, j]] = v;
                entries[[j, i]] = v;
            }
        }
        Ok(Self { entries })
    }
}

impl Serialize for CovarianceMatrix {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = self.entries.outer_iter().map(|r| r.to_vec()).collect();
        rows.serialize(serializer)
    }
}

/// Probability of each coalition size `1..d-1` under the Shapley kernel,
/// proportional to `(d-1) / (s (d-s))`. Index 0 corresponds to size 1.
pub fn kernel_size_distribution(d: usize) -> Vec<f64> {
    let raw: Vec<f64> = (1..d).map(|s| (d - 1) as f64 / (s * (d - s)) as f64).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|p| p / total).collect()
}

/// Exact Shapley kernel weight `(d-1) / (C(d,s) s (d-s))` of one coalition.
pub fn kernel_weight(d: usize, size: usize) -> f64 {
    let ln_choose = ln_gamma(d as f64 + 1.0) - ln_gamma(size as f64 + 1.0) - ln_gamma((d - size) as f64 + 1.0);
    (d - 1) as f64 / (size * (d - size)) as f64 * (-ln_choose).exp()
}

/// Draws `n` coalitions: size from the kernel size law, members uniform.
pub fn sample_coalitions<R: Rng + ?Sized>(d: usize, n: usize, rng: &mut R) -> Result<Vec<CoalitionMask>> {
    if d < 2 {
        return Err(AttrError::InvalidArgument("need at least two features".into()));
    }
    if n < d + 2 {
        return Err(AttrError::InvalidBudget(format!("need at least d + 2 = {} coalitions, got {n}", d + 2)));
    }
    Ok(draw_coalitions(d, n, rng))
}

/// Unchecked draw, used for incremental batches.
pub(crate) fn draw_coalitions<R: Rng + ?Sized>(d: usize, n: usize, rng: &mut R) -> Vec<CoalitionMask> {
    let probs = kernel_size_distribution(d);
    let cumulative: Vec<f64> = probs
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .collect();
    (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            let size = 1 + cumulative.iter().position(|&c| u < c).unwrap_or(d - 2);
            let members: Vec<usize> = index::sample(rng, d, size).into_vec();
            CoalitionMask::from_members(d, &members)
        })
        .collect()
}

/// Evaluates sampled coalitions with unit regression weight.
pub fn evaluate_coalitions<R: Rng + ?Sized>(
    vf: &ValueFunction<'_>,
    masks: &[CoalitionMask],
    rng: &mut R,
) -> Result<Vec<CoalitionSample>> {
    let values = vf.values(masks, rng)?;
    Ok(masks.iter().zip(values).map(|(&mask, value)| CoalitionSample { mask, value, kernel_weight: 1.0 }).collect())
}

/// Every proper non-empty coalition with its exact kernel weight, given the
/// table of all `2^d` coalition values.
pub fn enumerate_coalitions(d: usize, values: &[f64]) -> Result<Vec<CoalitionSample>> {
    if values.len() != 1 << d {
        return Err(AttrError::DimensionMismatch { expected: 1 << d, got: values.len() });
    }
    Ok((1..(1u64 << d) - 1)
        .map(|bits| {
            let mask = CoalitionMask::from_bits(d, bits);
            CoalitionSample { mask, value: values[bits as usize], kernel_weight: kernel_weight(d, mask.size()) }
        })
        .collect())
}

/// Samples grouped by distinct mask, so that refits on resampled weights
/// cost O(n + distinct · d²).
struct Design {
    d: usize,
    masks: Vec<CoalitionMask>,
    group: Vec<usize>,
    targets: Vec<f64>,
    weights: Vec<f64>,
    delta: f64,
}

impl Design {
    fn new(samples: &[CoalitionSample], v_empty: f64, v_full: f64) -> Result<Self> {
        let d = samples.first().map(|s| s.mask.dim()).ok_or(AttrError::SingularDesign)?;
        let mut index: HashMap<u64, usize> = HashMap::new();
        let mut masks = Vec::new();
        let mut group = Vec::with_capacity(samples.len());
        for s in samples {
            if s.mask.dim() != d {
                return Err(AttrError::DimensionMismatch { expected: d, got: s.mask.dim() });
            }
            if s.mask.is_empty() || s.mask.is_full() {
                return Err(AttrError::InvalidArgument("empty and full coalitions have no kernel weight".into()));
            }
            if !(s.kernel_weight > 0.0) || !s.value.is_finite() {
                return Err(AttrError::InvalidArgument("coalition weights must be positive and values finite".into()));
            }
            let g = *index.entry(s.mask.bits()).or_insert_with(|| {
                masks.push(s.mask);
                masks.len() - 1
            });
            group.push(g);
        }
        Ok(Self {
            d,
            masks,
            group,
            targets: samples.iter().map(|s| s.value - v_empty).collect(),
            weights: samples.iter().map(|s| s.kernel_weight).collect(),
            delta: v_full - v_empty,
        })
    }

    /// Fit with each sample's weight multiplied by `counts[i]` (bootstrap
    /// multiplicities), or by one when `counts` is `None`.
    fn fit(&self, counts: Option<&[u32]>) -> Result<Vec<f64>> {
        let d = self.d;
        let groups = self.masks.len();
        let mut gw = vec![0.0; groups];
        let mut gy = vec![0.0; groups];
        for (i, &g) in self.group.iter().enumerate() {
            let c = counts.map_or(1.0, |c| c[i] as f64);
            if c == 0.0 {
                continue;
            }
            let w = c * self.weights[i];
            gw[g] += w;
            gy[g] += w * self.targets[i];
        }
        // Full normal-equation statistics over the binary design.
        let mut a = DMatrix::<f64>::zeros(d, d);
        let mut by = DVector::<f64>::zeros(d);
        let mut members = Vec::with_capacity(d);
        for (g, mask) in self.masks.iter().enumerate() {
            if gw[g] == 0.0 {
                continue;
            }
            members.clear();
            members.extend(mask.members());
            for (p, &i) in members.iter().enumerate() {
                by[i] += gy[g];
                for &j in &members[..=p] {
                    a[(i, j)] += gw[g];
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                a[(j, i)] = a[(i, j)];
            }
        }

        // Eliminate the last coefficient with the efficiency constraint.
        let last = d - 1;
        let delta = self.delta;
        let reduced = DMatrix::from_fn(last, last, |j, k| a[(j, k)] - a[(j, last)] - a[(last, k)] + a[(last, last)]);
        let rhs = DVector::from_fn(last, |j, _| by[j] - by[last] - delta * (a[(j, last)] - a[(last, last)]));
        let scale = (0..last).map(|j| reduced[(j, j)]).fold(0.0, f64::max);
        if !(scale > 0.0) {
            return Err(AttrError::SingularDesign);
        }
        let chol = reduced.cholesky().ok_or(AttrError::SingularDesign)?;
        let l = chol.l_dirty();
        let min_pivot = (0..last).map(|j| l[(j, j)] * l[(j, j)]).fold(f64::INFINITY, f64::min);
        if min_pivot < 1e-12 * scale {
            return Err(AttrError::SingularDesign);
        }
        let beta = chol.solve(&rhs);
        let mut phi: Vec<f64> = beta.iter().copied().collect();
        let partial: f64 = phi.iter().sum();
        phi.push(delta - partial);
        Ok(phi)
    }
}

/// Constrained least-squares Shapley estimate; `sum(phi) == v_full - v_empty`.
pub fn kernelshap_fit(samples: &[CoalitionSample], v_empty: f64, v_full: f64) -> Result<Vec<f64>> {
    Design::new(samples, v_empty, v_full)?.fit(None)
}

#[derive(Debug, Clone)]
pub struct BootstrapCovariance {
    pub covariance: CovarianceMatrix,
    /// Resamples discarded for a singular design and redrawn.
    pub skipped: usize,
}

/// Covariance of KernelSHAP refits over `b` resamples (with replacement) of
/// the cached coalition samples. A singular resample is redrawn; a slot that
/// fails `b` consecutive times aborts with `SingularDesign`.
pub fn bootstrap_covariance<R: Rng + ?Sized>(
    samples: &[CoalitionSample],
    v_empty: f64,
    v_full: f64,
    b: usize,
    rng: &mut R,
) -> Result<BootstrapCovariance> {
    if b < 2 {
        return Err(AttrError::InvalidBudget(format!("need at least 2 bootstrap resamples, got {b}")));
    }
    let design = Design::new(samples, v_empty, v_full)?;
    let n = samples.len();
    let seed: u64 = rng.random();
    let fits: Vec<(Vec<f64>, usize)> = (0..b)
        .into_par_iter()
        .map(|slot| {
            let mut counts = vec![0u32; n];
            for attempt in 0..b {
                counts.iter_mut().for_each(|c| *c = 0);
                let mut r = rng::stream(seed, &[slot as u64, attempt as u64]);
                for _ in 0..n {
                    counts[r.random_range(0..n)] += 1;
                }
                match design.fit(Some(&counts)) {
                    Ok(phi) => return Ok((phi, attempt)),
                    Err(AttrError::SingularDesign) => continue,
                    Err(e) => return Err(e),
                }
            }
            Err(AttrError::SingularDesign)
        })
        .collect::<Result<_>>()?;
    let skipped = fits.iter().map(|(_, s)| s).sum();
    let rows: Vec<Vec<f64>> = fits.into_iter().map(|(phi, _)| phi).collect();
    Ok(BootstrapCovariance { covariance: CovarianceMatrix::from_rows(&rows)?, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::shapley_from_values;

    fn additive_game(c: &[f64]) -> impl Fn(CoalitionMask) -> f64 + '_ {
        move |m| m.members().map(|j| c[j]).sum()
    }

    #[test]
    fn size_law() {
        let p3 = kernel_size_distribution(3);
        assert!((p3[0] - 0.5).abs() < 1e-15 && (p3[1] - 0.5).abs() < 1e-15);
        let p4 = kernel_size_distribution(4);
        assert!((p4[1] / p4[0] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn size_histogram_within_multinomial_bands() {
        let d = 6;
        let n = 20_000;
        let masks = sample_coalitions(d, n, &mut rng::stream(4, &[])).unwrap();
        let probs = kernel_size_distribution(d);
        let mut hist = vec![0usize; d - 1];
        for m in &masks {
            assert!(!m.is_empty() && !m.is_full());
            hist[m.size() - 1] += 1;
        }
        for (s, &count) in hist.iter().enumerate() {
            let mean = n as f64 * probs[s];
            let sd = (n as f64 * probs[s] * (1.0 - probs[s])).sqrt();
            assert!((count as f64 - mean).abs() < 3.0 * sd, "size {}: {count} vs {mean}", s + 1);
        }
    }

    #[test]
    fn rejects_small_budget() {
        assert!(matches!(sample_coalitions(5, 6, &mut rng::stream(0, &[])), Err(AttrError::InvalidBudget(_))));
    }

    #[test]
    fn additive_game_is_recovered_exactly() {
        let c = [1.5, -2.0, 0.25, 3.0, 0.0];
        let v = additive_game(&c);
        let masks = sample_coalitions(5, 40, &mut rng::stream(9, &[])).unwrap();
        let samples: Vec<_> = masks.iter().map(|&m| CoalitionSample { mask: m, value: v(m), kernel_weight: 1.0 }).collect();
        let phi = kernelshap_fit(&samples, 0.0, c.iter().sum()).unwrap();
        for j in 0..5 {
            assert!((phi[j] - c[j]).abs() < 1e-9, "{phi:?}");
        }
        let boot = bootstrap_covariance(&samples, 0.0, c.iter().sum(), 50, &mut rng::stream(1, &[])).unwrap();
        assert!(boot.covariance.entries().iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn constant_game_gives_zero() {
        let masks = sample_coalitions(4, 30, &mut rng::stream(2, &[])).unwrap();
        let samples: Vec<_> = masks.iter().map(|&m| CoalitionSample { mask: m, value: 7.0, kernel_weight: 1.0 }).collect();
        let phi = kernelshap_fit(&samples, 7.0, 7.0).unwrap();
        assert!(phi.iter().all(|p| p.abs() < 1e-12));
    }

    #[test]
    fn full_enumeration_equals_exact_shapley() {
        let d = 5;
        let values: Vec<f64> = (0..1u64 << d)
            .map(|b| {
                let m = CoalitionMask::from_bits(d, b);
                let s = m.size() as f64;
                s.powi(2) * 0.3 + if m.contains(1) && m.contains(3) { 2.0 } else { 0.0 } + (b as f64).sin()
            })
            .collect();
        let samples = enumerate_coalitions(d, &values).unwrap();
        let phi = kernelshap_fit(&samples, values[0], values[(1 << d) - 1]).unwrap();
        let exact = shapley_from_values(d, &values).unwrap();
        for j in 0..d {
            assert!((phi[j] - exact[j]).abs() < 1e-8, "{phi:?} vs {exact:?}");
        }
    }

    #[test]
    fn singular_design_is_reported() {
        let d = 4;
        let m = CoalitionMask::from_members(d, &[0]);
        let samples = vec![CoalitionSample { mask: m, value: 1.0, kernel_weight: 1.0 }; 10];
        assert!(matches!(kernelshap_fit(&samples, 0.0, 1.0), Err(AttrError::SingularDesign)));
    }

    #[test]
    fn weight_formula() {
        // d = 4, s = 1: 3 / (4 * 1 * 3) = 0.25; s = 2: 3 / (6 * 2 * 2) = 0.125
        assert!((kernel_weight(4, 1) - 0.25).abs() < 1e-13);
        assert!((kernel_weight(4, 2) - 0.125).abs() < 1e-13);
    }
}
