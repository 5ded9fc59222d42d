//! Black-box model evaluation.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{AttrError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputKind {
    Regression,
    Probability,
}

/// A deterministic function from an m×d batch to m reals.
///
/// Implementations must be callable from several threads at once; a model
/// that cannot be (the stdio bridge) serializes internally.
pub trait Model: Send + Sync {
    fn n_features(&self) -> usize;

    fn output_kind(&self) -> OutputKind {
        OutputKind::Regression
    }

    /// Raw batch evaluation. Callers go through [`eval_model`], which checks
    /// shapes on both sides.
    fn predict(&self, batch: ArrayView2<'_, f64>) -> Result<Vec<f64>>;
}

pub type ModelHandle = Arc<dyn Model>;

pub fn eval_model(model: &dyn Model, batch: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    let d = model.n_features();
    if batch.ncols() != d {
        return Err(AttrError::DimensionMismatch { expected: d, got: batch.ncols() });
    }
    if batch.nrows() == 0 {
        return Ok(Vec::new());
    }
    let out = model.predict(batch)?;
    if out.len() != batch.nrows() {
        return Err(AttrError::EvaluationFailure(format!(
            "model returned {} outputs for {} rows",
            out.len(),
            batch.nrows()
        )));
    }
    Ok(out)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `f(x) = w.x + b`, or `sigmoid(w.x + b)` for probability output.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub weights: Array1<f64>,
    pub bias: f64,
    pub kind: OutputKind,
}

impl LinearModel {
    pub fn new(weights: Vec<f64>, bias: f64) -> Self {
        Self { weights: Array1::from(weights), bias, kind: OutputKind::Regression }
    }

    pub fn logistic(weights: Vec<f64>, bias: f64) -> Self {
        Self { kind: OutputKind::Probability, ..Self::new(weights, bias) }
    }
}

impl Model for LinearModel {
    fn n_features(&self) -> usize {
        self.weights.len()
    }

    fn output_kind(&self) -> OutputKind {
        self.kind
    }

    fn predict(&self, batch: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        let z = batch.dot(&self.weights);
        Ok(match self.kind {
            OutputKind::Regression => z.iter().map(|v| v + self.bias).collect(),
            OutputKind::Probability => z.iter().map(|v| sigmoid(v + self.bias)).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// out × in
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Feed-forward network with ReLU hidden layers.
///
/// A single output unit is returned as-is (regression) or through a sigmoid
/// (probability). With several output units the network is read as a
/// classifier and `class` selects which softmax probability (or raw output in
/// regression mode) is explained.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub layers: Vec<DenseLayer>,
    pub kind: OutputKind,
    pub class: usize,
}

impl MlpModel {
    pub fn new(layers: Vec<DenseLayer>, kind: OutputKind, class: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(AttrError::InvalidArgument("network has no layers".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].weights.nrows() != pair[1].weights.ncols() {
                return Err(AttrError::InvalidArgument("layer shapes do not chain".into()));
            }
        }
        for layer in &layers {
            if layer.bias.len() != layer.weights.nrows() {
                return Err(AttrError::InvalidArgument("bias length differs from layer width".into()));
            }
        }
        let n_out = layers.last().map(|l| l.weights.nrows()).unwrap_or(0);
        if class >= n_out {
            return Err(AttrError::InvalidArgument(format!("class {class} but {n_out} outputs")));
        }
        Ok(Self { layers, kind, class })
    }
}

impl Model for MlpModel {
    fn n_features(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    fn output_kind(&self) -> OutputKind {
        self.kind
    }

    fn predict(&self, batch: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        let last = self.layers.len() - 1;
        let mut h: Array2<f64> = batch.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.dot(&layer.weights.t()) + &layer.bias;
            if i < last {
                h.mapv_inplace(|v| v.max(0.0));
            }
        }
        let n_out = h.ncols();
        let out = h
            .rows()
            .into_iter()
            .map(|row| match (self.kind, n_out) {
                (OutputKind::Regression, _) => row[self.class],
                (OutputKind::Probability, 1) => sigmoid(row[0]),
                (OutputKind::Probability, _) => {
                    let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    (row[self.class] - max).exp() / denom
                }
            })
            .collect();
        Ok(out)
    }
}

/// Wraps a per-row closure as a model. Mostly for fixtures.
pub struct FnModel<F> {
    d: usize,
    f: F,
}

impl<F> FnModel<F>
where
    F: Fn(ArrayView1<'_, f64>) -> f64 + Send + Sync,
{
    pub fn new(d: usize, f: F) -> Self {
        Self { d, f }
    }
}

impl<F> Model for FnModel<F>
where
    F: Fn(ArrayView1<'_, f64>) -> f64 + Send + Sync,
{
    fn n_features(&self) -> usize {
        self.d
    }

    fn predict(&self, batch: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        Ok(batch.rows().into_iter().map(|r| (self.f)(r)).collect())
    }
}

fn kind_name(kind: OutputKind) -> &'static str {
    match kind {
        OutputKind::Regression => "regression",
        OutputKind::Probability => "probability",
    }
}

fn join(values: impl IntoIterator<Item = f64>) -> String {
    values.into_iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(" ")
}

impl LinearModel {
    /// The plain-text weights format read by [`parse_model`].
    pub fn to_text(&self) -> String {
        format!("linear {}\n{} {}\n", kind_name(self.kind), join(self.weights.iter().copied()), self.bias)
    }
}

impl MlpModel {
    pub fn to_text(&self) -> String {
        let mut out = format!("mlp {} class={}\n", kind_name(self.kind), self.class);
        let mut dims = vec![self.layers[0].weights.ncols()];
        dims.extend(self.layers.iter().map(|l| l.weights.nrows()));
        out += &dims.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
        out.push('\n');
        for layer in &self.layers {
            for row in layer.weights.rows() {
                out += &join(row.iter().copied());
                out.push('\n');
            }
            out += &join(layer.bias.iter().copied());
            out.push('\n');
        }
        out
    }
}

struct Token<'a> {
    text: &'a str,
    line: usize,
    column: usize,
}

fn tokens(line_no: usize, line: &str) -> impl Iterator<Item = Token<'_>> {
    let base = line.as_ptr() as usize;
    line.split_whitespace().map(move |t| Token { text: t, line: line_no, column: t.as_ptr() as usize - base + 1 })
}

fn parse_real(tok: &Token<'_>) -> Result<f64> {
    tok.text.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| AttrError::Parse {
        line: tok.line,
        column: tok.column,
        message: format!("expected a real number, found {:?}", tok.text),
    })
}

fn parse_error(line: usize, column: usize, message: impl Into<String>) -> AttrError {
    AttrError::Parse { line, column, message: message.into() }
}

/// Parses the plain-text weights format.
///
/// ```text
/// linear [regression|probability]
/// w_1 ... w_d b
/// ```
///
/// ```text
/// mlp [regression|probability] [class=<k>]
/// d_0 d_1 ... d_L
/// W_1 (d_1 × d_0, row-major) b_1 (d_1) ... W_L b_L
/// ```
pub fn parse_model(text: &str) -> Result<ModelHandle> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l)).filter(|(_, l)| !l.trim().is_empty());
    let (header_line, header) = lines.next().ok_or_else(|| parse_error(1, 1, "empty model file"))?;
    let mut head = tokens(header_line, header);
    let kind_tok = head.next().expect("non-empty line");
    let mut kind = OutputKind::Regression;
    let mut class = None;
    for tok in head {
        match tok.text {
            "regression" => kind = OutputKind::Regression,
            "probability" => kind = OutputKind::Probability,
            t if t.starts_with("class=") => {
                class = Some(t["class=".len()..].parse::<usize>().map_err(|_| {
                    parse_error(tok.line, tok.column, format!("bad class selector {t:?}"))
                })?)
            }
            t => return Err(parse_error(tok.line, tok.column, format!("unknown header option {t:?}"))),
        }
    }

    match kind_tok.text {
        "linear" => {
            let reals = lines
                .flat_map(|(n, l)| tokens(n, l))
                .map(|t| parse_real(&t))
                .collect::<Result<Vec<_>>>()?;
            if reals.len() < 3 {
                return Err(parse_error(header_line, 1, "linear model needs at least two weights and a bias"));
            }
            let (w, b) = reals.split_at(reals.len() - 1);
            Ok(Arc::new(LinearModel { weights: Array1::from(w.to_vec()), bias: b[0], kind }))
        }
        "mlp" => {
            let (dims_line, dims_text) =
                lines.next().ok_or_else(|| parse_error(header_line + 1, 1, "missing layer dimensions"))?;
            let dims = tokens(dims_line, dims_text)
                .map(|t| {
                    t.text
                        .parse::<usize>()
                        .ok()
                        .filter(|&v| v > 0)
                        .ok_or_else(|| parse_error(t.line, t.column, format!("bad layer width {:?}", t.text)))
                })
                .collect::<Result<Vec<_>>>()?;
            if dims.len() < 2 {
                return Err(parse_error(dims_line, 1, "need at least input and output widths"));
            }
            let toks: Vec<Token<'_>> = lines.flat_map(|(n, l)| tokens(n, l)).collect();
            let mut it = toks.iter();
            let mut layers = Vec::with_capacity(dims.len() - 1);
            for w in dims.windows(2) {
                let (n_in, n_out) = (w[0], w[1]);
                let mut take = |count: usize| -> Result<Vec<f64>> {
                    (0..count)
                        .map(|_| {
                            it.next()
                                .ok_or_else(|| parse_error(dims_line, 1, "weight list ends early"))
                                .and_then(parse_real)
                        })
                        .collect()
                };
                let weights = Array2::from_shape_vec((n_out, n_in), take(n_out * n_in)?).expect("sized");
                let bias = Array1::from(take(n_out)?);
                layers.push(DenseLayer { weights, bias });
            }
            if let Some(extra) = it.next() {
                return Err(parse_error(extra.line, extra.column, "trailing values after last layer"));
            }
            let n_out = *dims.last().expect("len >= 2");
            let class = class.unwrap_or(if n_out > 1 { 1 } else { 0 });
            Ok(Arc::new(MlpModel::new(layers, kind, class)?))
        }
        other => Err(parse_error(kind_tok.line, kind_tok.column, format!("unknown model type {other:?}"))),
    }
}

pub fn load_model_file(path: impl AsRef<Path>) -> Result<ModelHandle> {
    parse_model(&std::fs::read_to_string(path)?)
}
