use std::path::PathBuf;

use attrank::bridge::BridgeModel;
use attrank::data::TabularDataset;
use attrank::error::AttrError;
use attrank::model::{eval_model, LinearModel, Model};
use attrank::rankshap::{rankshap, SamplingBudget};
use attrank::rng;
use attrank::value::{Imputation, ValueFunction};
use attrank::verify::RankingMode;
use ndarray::{array, Array1, Array2};
use rand_distr::{Distribution, StandardNormal};

fn script() -> String {
    let p: PathBuf = [env!("CARGO_MANIFEST_DIR"), "tests", "fixtures", "linear_bridge.py"].iter().collect();
    p.display().to_string()
}

fn bridge(args: &str, d: usize) -> Result<BridgeModel, AttrError> {
    BridgeModel::spawn(&format!("python3 {} {args}", script()), d)
}

#[test]
fn handshake_and_predict() {
    let m = bridge("0.5 1 2 3", 3).unwrap();
    let y = m.predict(array![[1.0, 1.0, 1.0], [0.0, 0.0, 2.0]].view()).unwrap();
    assert_eq!(y, vec![6.5, 6.5]);
}

#[test]
fn handshake_rejects_wrong_dimension() {
    assert!(matches!(bridge("0 1 2 3 --claim-d 4", 3), Err(AttrError::BridgeHandshake(_))));
    assert!(matches!(BridgeModel::spawn("exit 0", 3), Err(AttrError::BridgeHandshake(_))));
}

#[test]
fn server_errors_become_evaluation_failures() {
    let m = bridge("0 1 2 --fail-predict", 2).unwrap();
    match m.predict(array![[1.0, 2.0]].view()) {
        Err(AttrError::EvaluationFailure(msg)) => assert!(msg.contains("exploded")),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn large_batches_keep_order() {
    let m = bridge("0 1 0", 2).unwrap();
    let x = Array2::from_shape_fn((10_000, 2), |(i, j)| if j == 0 { i as f64 } else { 0.0 });
    let y = eval_model(&m, x.view()).unwrap();
    assert_eq!(y.len(), 10_000);
    assert!(y.iter().enumerate().all(|(i, &v)| v == i as f64));
}

#[test]
fn bridged_and_native_models_agree() {
    let w = [1.25, -0.5, 3.0, 0.75];
    let native = LinearModel::new(w.to_vec(), 0.1);
    let args = format!("0.1 {}", w.map(|v| v.to_string()).join(" "));
    let remote = bridge(&args, 4).unwrap();
    let mut r = rng::stream(12, &[]);
    let bg = TabularDataset::from_array(Array2::from_shape_fn((100, 4), |_| StandardNormal.sample(&mut r))).unwrap();
    let x = Array1::from_elem(4, 1.0) + bg.column_means();
    let budget = SamplingBudget::default();
    let run = |m: &dyn Model| {
        let vf = ValueFunction::new(m, x.view(), &bg, Imputation::Sampled { m: 10 }).unwrap();
        rankshap(&vf, 2, 0.1, &budget, RankingMode::Signed, 77).unwrap()
    };
    let a = run(&native);
    let b = run(&remote);
    assert_eq!(a.ranking.order, b.ranking.order);
    for (p, q) in a.attrs.estimates().iter().zip(b.attrs.estimates()) {
        assert!((p - q).abs() < 1e-9, "{p} vs {q}");
    }
}
