//! Synthetic models and datasets with known attributions, shared by tests,
//! benchmarks, and the `synth` command.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rayon::prelude::*;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::data::TabularDataset;
use crate::error::Result;
use crate::model::{DenseLayer, FnModel, LinearModel, MlpModel, ModelHandle, OutputKind};
use crate::rng;
use crate::sampling::exact_shapley;

/// A model, the background it is explained against, and explicands.
#[derive(Clone)]
pub struct Fixture {
    pub name: &'static str,
    pub model: ModelHandle,
    /// Plain-text weights, when the model has a file representation.
    pub model_text: Option<String>,
    pub background: TabularDataset,
    pub inputs: TabularDataset,
}

impl Fixture {
    pub fn n_features(&self) -> usize {
        self.background.n_features()
    }

    pub fn input(&self, i: usize) -> ArrayView1<'_, f64> {
        self.inputs.row(i)
    }

    pub fn exact_shapley(&self, i: usize) -> Result<Vec<f64>> {
        exact_shapley(self.model.as_ref(), self.input(i), &self.background)
    }
}

pub const NAMES: &[&str] = &["linear8", "mlp12", "planted6", "mixture6", "null3"];

pub fn by_name(name: &str) -> Option<Fixture> {
    match name {
        "linear8" => Some(linear8()),
        "mlp12" => Some(mlp12()),
        "planted6" => Some(planted6()),
        "mixture6" => Some(mixture6()),
        "null3" => Some(null3()),
        _ => None,
    }
}

pub fn gaussian_dataset(n: usize, d: usize, seed: u64) -> TabularDataset {
    let mut r = rng::stream(seed, &[0xda7a]);
    TabularDataset::from_array(Array2::from_shape_fn((n, d), |_| StandardNormal.sample(&mut r)))
        .expect("finite gaussian draws")
}

/// Linear model with explicands placed so that `w_j (x_j - mu_j)` equals a
/// chosen target vector per input.
pub fn linear_with_targets(name: &'static str, weights: Vec<f64>, targets: &[Vec<f64>], n_bg: usize, seed: u64) -> Fixture {
    let d = weights.len();
    let background = gaussian_dataset(n_bg, d, seed);
    let mu = background.column_means().clone();
    let inputs = Array2::from_shape_fn((targets.len(), d), |(i, j)| mu[j] + targets[i][j] / weights[j]);
    let model = LinearModel::new(weights, 0.0);
    Fixture {
        name,
        model_text: Some(model.to_text()),
        model: Arc::new(model),
        background,
        inputs: TabularDataset::from_array(inputs).expect("finite inputs"),
    }
}

/// d = 8 linear regression with five explicands whose Shapley values mix
/// wide and narrow gaps.
pub fn linear8() -> Fixture {
    let weights = vec![2.0, -1.5, 1.2, 1.0, -0.8, 0.6, 0.5, 0.4];
    let targets = vec![
        vec![1.00, 0.90, 0.85, 0.60, 0.55, 0.30, 0.10, 0.05],
        vec![0.40, 1.20, -0.30, 0.38, 0.80, 0.10, 0.75, -0.60],
        vec![-0.50, 0.25, 0.50, 0.52, 0.20, 0.90, -0.10, 0.00],
        vec![0.70, -0.20, 0.66, 0.10, 0.05, 0.40, 0.30, 0.62],
        vec![0.30, 0.28, 0.26, 1.10, -0.40, 0.90, 0.24, 0.50],
    ];
    linear_with_targets("linear8", weights, &targets, 200, 8)
}

/// Two equal leading attributions: a null configuration for rank 1.
pub fn null3() -> Fixture {
    linear_with_targets("null3", vec![1.0, -1.0, 0.5], &[vec![1.0, 1.0, 0.2]], 200, 3)
}

/// LIME fixture: regression on binary keep/replace masks has coefficients
/// `w_j (x_j - mu_j)`, here (0.5, 4, 0, 2, 1, 0.25) for the first input.
pub fn planted6() -> Fixture {
    let weights = vec![0.5, 4.0, 1.0, 2.0, 1.0, 0.25];
    let targets = vec![vec![0.5, 4.0, 0.0, 2.0, 1.0, 0.25], vec![2.5, 0.5, 3.0, 0.25, 1.5, 0.0]];
    linear_with_targets("planted6", weights, &targets, 300, 6)
}

fn random_layer<R: Rng + ?Sized>(n_in: usize, n_out: usize, scale: f64, rng: &mut R) -> DenseLayer {
    let normal = Normal::new(0.0, scale / (n_in as f64).sqrt()).expect("positive scale");
    DenseLayer {
        weights: Array2::from_shape_fn((n_out, n_in), |_| normal.sample(rng)),
        bias: Array1::from_shape_fn(n_out, |_| 0.1 * normal.sample(rng)),
    }
}

/// d = 12 binary classifier (one ReLU layer, sigmoid output) over features
/// of unequal spread; explicands picked for separated top-5 attributions.
pub fn mlp12() -> Fixture {
    let d = 12;
    let mut r = rng::stream(12, &[0x3f]);
    let scales: Vec<f64> = (0..d).map(|j| 2.0 - 0.12 * j as f64).collect();
    let draw = |n: usize, r: &mut rng::EngineRng| {
        Array2::from_shape_fn((n, d), |(_, j)| {
            let z: f64 = StandardNormal.sample(r);
            scales[j] * z
        })
    };
    let background = TabularDataset::from_array(draw(100, &mut r)).expect("finite");
    let candidates = TabularDataset::from_array(draw(16, &mut r)).expect("finite");
    let model = MlpModel::new(
        vec![random_layer(d, 16, 2.0, &mut r), random_layer(16, 1, 2.0, &mut r)],
        OutputKind::Probability,
        0,
    )
    .expect("consistent layers");
    let mut scored: Vec<(f64, usize)> = (0..candidates.n_rows())
        .into_par_iter()
        .map(|i| {
            let mut phi = exact_shapley(&model, candidates.row(i), &background).expect("d <= 12");
            phi.sort_by(|a, b| b.total_cmp(a));
            let gap = phi.windows(2).take(4).map(|w| w[0] - w[1]).fold(f64::INFINITY, f64::min);
            (gap / phi[0].abs().max(1e-12), i)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut keep: Vec<usize> = scored.iter().take(5).map(|s| s.1).collect();
    keep.sort_unstable();
    Fixture {
        name: "mlp12",
        model_text: Some(model.to_text()),
        model: Arc::new(model),
        background,
        inputs: candidates.select_rows(&keep).expect("valid rows"),
    }
}

/// d = 6 regression network on a two-component Gaussian mixture; the
/// inputs are the whole population for global importance.
pub fn mixture6() -> Fixture {
    let d = 6;
    let mut r = rng::stream(6, &[0x31]);
    let centers = [[1.5, 0.0, -1.0, 0.5, 0.0, 0.0], [-1.0, 1.0, 1.0, -0.5, 0.0, 0.0]];
    let spreads = [1.0, 0.8, 0.6, 0.5, 0.4, 0.3];
    let mut inputs = Array2::<f64>::zeros((400, d));
    for mut row in inputs.rows_mut() {
        let c = &centers[r.random_range(0..2)];
        for j in 0..d {
            let z: f64 = StandardNormal.sample(&mut r);
            row[j] = c[j] + spreads[j] * z;
        }
    }
    let population = TabularDataset::from_array(inputs).expect("finite");
    let bg_rows: Vec<usize> = (0..60).map(|_| r.random_range(0..400)).collect();
    let background = population.select_rows(&bg_rows).expect("valid rows");
    let model = MlpModel::new(
        vec![
            DenseLayer {
                weights: ndarray::array![
                    [1.5, 0.5, 0.0, 0.3, 0.0, 0.1],
                    [-1.0, 1.2, 0.4, 0.0, 0.2, 0.0],
                    [0.0, -0.6, 1.0, 0.8, 0.0, 0.3],
                    [0.5, 0.0, -0.5, 0.0, 0.6, 0.0]
                ],
                bias: ndarray::array![0.1, 0.0, -0.2, 0.3],
            },
            DenseLayer { weights: ndarray::array![[2.0, 1.5, 1.0, 0.8]], bias: ndarray::array![0.0] },
        ],
        OutputKind::Regression,
        0,
    )
    .expect("consistent layers");
    Fixture { name: "mixture6", model_text: Some(model.to_text()), model: Arc::new(model), background, inputs: population }
}

/// `f(x) = x0 * x1` at `x = (1, 1)` against the single background row
/// `(0, -1)`: feature 0 contributes -1 or +1 with equal probability.
pub fn rademacher() -> Fixture {
    let model = FnModel::new(2, |x: ArrayView1<'_, f64>| x[0] * x[1]);
    Fixture {
        name: "rademacher",
        model: Arc::new(model),
        model_text: None,
        background: TabularDataset::from_array(ndarray::array![[0.0, -1.0]]).expect("finite"),
        inputs: TabularDataset::from_array(ndarray::array![[1.0, 1.0]]).expect("finite"),
    }
}
