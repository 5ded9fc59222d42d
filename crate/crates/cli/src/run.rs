use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use attrank::bridge::BridgeModel;
use attrank::experiment::{retro_attributions, run_experiment, ExperimentConfig, Procedure};
use attrank::fixtures::{self, Fixture};
use attrank::global::{
    global_scores, global_topk, verify_global_ranks, AttributionSource, GlobalStrategy, LocalAttributionMatrix,
    LocalAttributionSource, LocalEstimand, MatrixSource, ModelSource,
};
use attrank::lime::{slime_select, SlimeConfig, SelectionTrace};
use attrank::model::load_model_file;
use attrank::rankshap::rankshap;
use attrank::sprt::{sprt_shap, Estimator, SprtConfig};
use attrank::verify::verify_ranks;
use attrank::{
    AttributionSet, Imputation, ModelHandle, SamplingBudget, TabularDataset, ValueFunction, VerifiedRanking,
};
use serde_json::{json, Value};

use crate::args::{EstimandArg, EstimatorArg, Opts, StrategyArg, SynthOpts};

/// Exit status when a procedure ran out of budget without verifying.
pub const EXIT_BUDGET: u8 = 2;

pub struct Problem {
    pub model: ModelHandle,
    pub background: TabularDataset,
    pub inputs: TabularDataset,
}

pub fn load(opts: &Opts) -> Result<Problem> {
    if let Some(name) = &opts.fixture {
        let f = fixtures::by_name(name).with_context(|| format!("unknown fixture {name:?}"))?;
        return Ok(Problem { model: f.model, background: f.background, inputs: f.inputs });
    }
    let path = opts.dataset.as_ref().context("--dataset (or --fixture) is required")?;
    let inputs = TabularDataset::from_csv_path(path, opts.has_label)
        .with_context(|| format!("reading {}", path.display()))?;
    let background = match &opts.background {
        Some(p) => TabularDataset::from_csv_path(p, opts.has_label).with_context(|| format!("reading {}", p.display()))?,
        None => inputs.clone(),
    };
    let d = inputs.n_features();
    let model: ModelHandle = match (&opts.model, &opts.bridge_cmd) {
        (Some(p), _) => load_model_file(p).with_context(|| format!("loading model {}", p.display()))?,
        (None, Some(cmd)) => Arc::new(BridgeModel::spawn(cmd, d)?),
        (None, None) => bail!("--model or --bridge-cmd is required"),
    };
    if model.n_features() != d || background.n_features() != d {
        bail!(
            "model expects {} features; dataset has {d}, background has {}",
            model.n_features(),
            background.n_features()
        );
    }
    Ok(Problem { model, background, inputs })
}

/// A finished run: JSON report, text table, extra CSV series.
pub struct Output {
    pub json: String,
    pub table: String,
    pub series: Vec<(&'static str, String)>,
    pub converged: bool,
}

impl Output {
    fn new(json: Value, table: String, converged: bool) -> Self {
        Self { json: serde_json::to_string_pretty(&json).expect("json"), table, series: Vec::new(), converged }
    }
}

pub fn emit(opts_out: Option<&Path>, out: &Output) -> Result<u8> {
    match opts_out {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            fs::write(dir.join("report.json"), format!("{}\n", out.json))?;
            fs::write(dir.join("table.txt"), &out.table)?;
            for (name, body) in &out.series {
                fs::write(dir.join(name), body)?;
            }
            print!("{}", out.table);
        }
        None => {
            eprint!("{}", out.table);
            println!("{}", out.json);
        }
    }
    Ok(if out.converged { 0 } else { EXIT_BUDGET })
}

pub fn experiment_config(opts: &Opts, procedure: Procedure) -> ExperimentConfig {
    let mode = opts.mode.into();
    let backend = opts.estimator.into();
    let defaults = ExperimentConfig::default();
    ExperimentConfig {
        procedure,
        backend,
        ks: opts.k.clone(),
        alphas: opts.alpha.clone(),
        mode,
        ranking: opts.ranking(),
        retro_n: opts.n,
        bootstrap: opts.bootstrap,
        budget: SamplingBudget {
            n0: opts.n0.unwrap_or(100),
            max_n: opts.max_n.unwrap_or(10_000),
            buffer_c: opts.buffer,
            mode,
            ..Default::default()
        },
        sprt: SprtConfig {
            alpha: opts.first_alpha(),
            beta: opts.beta,
            batch: opts.batch,
            max_total: opts.max_total,
            estimator: estimator(opts),
            mode,
        },
        slime: SlimeConfig {
            alpha: opts.first_alpha(),
            n0: opts.n0.unwrap_or(defaults.slime.n0),
            max_n: opts.max_n.unwrap_or(defaults.slime.max_n),
            tol: opts.tol,
        },
        global_n: opts.global_n,
        m: opts.m,
        reps: opts.reps,
        inputs: opts.inputs.clone(),
        seed: opts.seed,
        na_threshold: opts.na_threshold,
    }
}

fn estimator(opts: &Opts) -> Estimator {
    match opts.estimator {
        EstimatorArg::Sampling => Estimator::ShapleySampling,
        EstimatorArg::Kernelshap => Estimator::KernelShap { bootstrap: opts.bootstrap },
    }
}

fn explicand<'a>(p: &'a Problem, opts: &Opts) -> Result<ValueFunction<'a>> {
    if opts.input >= p.inputs.n_rows() {
        bail!("--input {} out of range: dataset has {} rows", opts.input, p.inputs.n_rows());
    }
    Ok(ValueFunction::new(p.model.as_ref(), p.inputs.row(opts.input), &p.background, Imputation::Sampled { m: opts.m })?)
}

/// One row per rank: feature, estimate, standard error, samples.
fn attribution_table(names: &[String], attrs: &AttributionSet, ranking: &VerifiedRanking) -> String {
    let mut t = String::new();
    let _ = writeln!(t, "verified ranks: {}", ranking.k);
    let _ = writeln!(t, "{:>4}  {:<16} {:>12} {:>10} {:>8}", "rank", "feature", "estimate", "se", "samples");
    for (r, &j) in ranking.order.iter().enumerate() {
        let mark = if r < ranking.k { "*" } else { " " };
        let _ = writeln!(
            t,
            "{:>3}{mark}  {:<16} {:>12.6} {:>10.6} {:>8}",
            r + 1,
            names[j],
            attrs.estimates()[j],
            attrs.estimate_variance(j).sqrt(),
            attrs.sample_count(j)
        );
    }
    t
}

fn attribution_csv(names: &[String], attrs: &AttributionSet, ranking: &VerifiedRanking) -> String {
    let mut s = String::from("rank,feature,estimate,se,samples\n");
    for (r, &j) in ranking.order.iter().enumerate() {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r + 1,
            names[j],
            attrs.estimates()[j],
            attrs.estimate_variance(j).sqrt(),
            attrs.sample_count(j)
        );
    }
    s
}

fn steps_csv(ranking: &VerifiedRanking) -> String {
    let mut s = String::from("k,feature_above,feature_below,statistic,df,threshold,rejected\n");
    for st in &ranking.steps {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            st.k, st.feature_above, st.feature_below, st.statistic, st.df, st.threshold, st.rejected
        );
    }
    s
}

fn ranked_output(names: &[String], attrs: &AttributionSet, ranking: &VerifiedRanking, json: Value, converged: bool) -> Output {
    let mut out = Output::new(json, attribution_table(names, attrs, ranking), converged);
    out.series.push(("attributions.csv", attribution_csv(names, attrs, ranking)));
    out.series.push(("tests.csv", steps_csv(ranking)));
    out
}

pub fn retro(opts: &Opts) -> Result<Output> {
    let p = load(opts)?;
    let vf = explicand(&p, opts)?;
    let config = experiment_config(opts, Procedure::Retro);
    let (attrs, total, per_feature) = retro_attributions(&vf, &config, opts.seed)?;
    let ranking = verify_ranks(&attrs, opts.first_alpha(), config.mode)?;
    let json = json!({
        "procedure": "retro",
        "input": opts.input,
        "features": p.inputs.feature_names(),
        "estimator": config.backend,
        "alpha": opts.first_alpha(),
        "attributions": attrs,
        "ranking": ranking,
        "total_samples": total,
        "per_feature_samples": per_feature,
    });
    Ok(ranked_output(p.inputs.feature_names(), &attrs, &ranking, json, true))
}

pub fn rankshap_cmd(opts: &Opts) -> Result<Output> {
    let p = load(opts)?;
    let vf = explicand(&p, opts)?;
    let config = experiment_config(opts, Procedure::Rankshap);
    let out = rankshap(&vf, opts.first_k(), opts.first_alpha(), &config.budget, config.ranking, opts.seed)?;
    let json = json!({
        "procedure": "rankshap",
        "input": opts.input,
        "features": p.inputs.feature_names(),
        "K": opts.first_k(),
        "alpha": opts.first_alpha(),
        "budget": config.budget,
        "result": out,
    });
    Ok(ranked_output(p.inputs.feature_names(), &out.attrs, &out.ranking, json, out.converged))
}

pub fn sprt_cmd(opts: &Opts) -> Result<Output> {
    let p = load(opts)?;
    let vf = explicand(&p, opts)?;
    let config = experiment_config(opts, Procedure::Sprt);
    let out = sprt_shap(&vf, opts.first_k(), &config.sprt, config.ranking, opts.seed)?;
    let json = json!({
        "procedure": "sprt",
        "input": opts.input,
        "features": p.inputs.feature_names(),
        "K": opts.first_k(),
        "config": config.sprt,
        "result": out,
    });
    let a = &out.attribution;
    Ok(ranked_output(p.inputs.feature_names(), &a.attrs, &a.ranking, json, a.converged))
}

fn selection_table(names: &[String], trace: &SelectionTrace) -> String {
    let mut t = String::new();
    let _ = writeln!(t, "pool size: {}  converged: {}", trace.pool_size, trace.converged);
    let _ = writeln!(t, "{:>4}  {:<16} {:>10} {:>10} {:>8}", "k", "feature", "statistic", "threshold", "passed");
    for s in &trace.steps {
        let _ = writeln!(t, "{:>4}  {:<16} {:>10.4} {:>10.4} {:>8}", s.k, names[s.winner], s.statistic, s.threshold, s.passed);
    }
    t
}

pub fn slime_cmd(opts: &Opts) -> Result<Output> {
    let p = load(opts)?;
    if opts.input >= p.inputs.n_rows() {
        bail!("--input {} out of range: dataset has {} rows", opts.input, p.inputs.n_rows());
    }
    let config = experiment_config(opts, Procedure::Slime);
    let trace = slime_select(p.model.as_ref(), p.inputs.row(opts.input), &p.background, opts.first_k(), &config.slime, opts.seed)?;
    let names = p.inputs.feature_names();
    let mut series = String::from("k,winner,runner_up,gap,statistic,threshold,n,passed\n");
    for s in &trace.steps {
        let runner = s.runner_up.map_or_else(String::new, |r| r.to_string());
        let _ = writeln!(series, "{},{},{runner},{},{},{},{},{}", s.k, s.winner, s.gap, s.statistic, s.threshold, s.n, s.passed);
    }
    let json = json!({
        "procedure": "slime",
        "input": opts.input,
        "features": names,
        "K": opts.first_k(),
        "config": config.slime,
        "result": trace,
    });
    let mut out = Output::new(json, selection_table(names, &trace), trace.converged);
    out.series.push(("steps.csv", series));
    Ok(out)
}

/// Absolute values of another source's attributions.
struct AbsSource<'a>(&'a dyn LocalAttributionSource);

impl LocalAttributionSource for AbsSource<'_> {
    fn n_features(&self) -> usize {
        self.0.n_features()
    }

    fn len(&self) -> Option<usize> {
        self.0.len()
    }

    fn attribution(&self, index: usize) -> attrank::Result<Vec<f64>> {
        Ok(self.0.attribution(index)?.into_iter().map(f64::abs).collect())
    }
}

fn global_table(names: &[String], theta: &[f64], counts: &[usize], ranking: &VerifiedRanking) -> String {
    let mut t = String::new();
    let _ = writeln!(t, "verified ranks: {}", ranking.k);
    let _ = writeln!(t, "{:>4}  {:<16} {:>12} {:>8}", "rank", "feature", "theta", "inputs");
    for (r, &j) in ranking.order.iter().enumerate() {
        let mark = if r < ranking.k { "*" } else { " " };
        let _ = writeln!(t, "{:>3}{mark}  {:<16} {:>12.6} {:>8}", r + 1, names[j], theta[j], counts[j]);
    }
    t
}

pub fn global_cmd(opts: &Opts) -> Result<Output> {
    let mode = opts.mode.into();
    let alpha = opts.first_alpha();
    // the matrix is either read from disk or materialized from the model
    let (matrix, problem) = match &opts.psi {
        Some(path) => {
            let m = LocalAttributionMatrix::from_csv_path(path, AttributionSource::Estimated)
                .with_context(|| format!("reading {}", path.display()))?;
            (Some(m), None)
        }
        None => (None, Some(load(opts)?)),
    };
    let names: Vec<String> = match (&matrix, &problem) {
        (Some(m), _) => (0..m.n_features()).map(|j| format!("feature_{j}")).collect(),
        (None, Some(p)) => p.inputs.feature_names().to_vec(),
        _ => unreachable!(),
    };
    let model_source = problem.as_ref().map(|p| ModelSource {
        model: p.model.as_ref(),
        inputs: &p.inputs,
        background: &p.background,
        estimand: match opts.estimand {
            EstimandArg::Exact => LocalEstimand::ExactShapley,
            EstimandArg::Sampled => LocalEstimand::SampledShapley { n: opts.n.unwrap_or(1000), m: opts.m },
            EstimandArg::Abs => LocalEstimand::AbsContribution { n: opts.n.unwrap_or(1000), m: opts.m },
        },
        seed: opts.seed,
    });
    let matrix_source = matrix.as_ref().map(MatrixSource);
    let base: &dyn LocalAttributionSource = match (&matrix_source, &model_source) {
        (Some(s), _) => s,
        (None, Some(s)) => s,
        _ => unreachable!(),
    };
    let abs_source = AbsSource(base);
    // the abs estimand is already nonnegative
    let source: &dyn LocalAttributionSource =
        if opts.abs && opts.estimand != EstimandArg::Abs { &abs_source } else { base };

    let strategy = match opts.strategy {
        StrategyArg::Retro => None,
        StrategyArg::Resample => {
            let config = experiment_config(opts, Procedure::Global);
            Some(GlobalStrategy::Resample { budget: config.budget })
        }
        StrategyArg::Sprt => Some(GlobalStrategy::Sprt {
            beta: opts.beta,
            batch: opts.batch,
            max_total: opts.max_total as usize,
            mode,
        }),
    };
    match strategy {
        None => {
            let n = source.len().unwrap_or(opts.global_n);
            let rows: Vec<Vec<f64>> = (0..n).map(|i| source.attribution(i)).collect::<attrank::Result<_>>()?;
            let d = source.n_features();
            let psi = ndarray_from_rows(&rows, d);
            let local = LocalAttributionMatrix::from_array(psi, AttributionSource::Estimated)?;
            let scores = global_scores(&local)?;
            let ranking = verify_global_ranks(&scores, local.psi(), alpha, mode)?;
            let json = json!({
                "procedure": "global",
                "strategy": "retro",
                "features": names,
                "alpha": alpha,
                "inputs": n,
                "theta": scores.theta,
                "ranking": ranking,
            });
            let table = global_table(&names, &scores.theta, &scores.counts(), &ranking);
            let mut out = Output::new(json, table, true);
            let mut csv = Vec::new();
            local.write_csv(&mut csv)?;
            out.series.push(("local_attributions.csv", String::from_utf8(csv).expect("utf-8")));
            Ok(out)
        }
        Some(strategy) => {
            let result = global_topk(source, opts.first_k(), alpha, &strategy)?;
            let json = json!({
                "procedure": "global",
                "strategy": strategy,
                "features": names,
                "K": opts.first_k(),
                "alpha": alpha,
                "result": result,
            });
            let table = global_table(&names, &result.scores.theta, &result.per_feature_inputs, &result.ranking);
            Ok(Output::new(json, table, result.converged))
        }
    }
}

fn ndarray_from_rows(rows: &[Vec<f64>], d: usize) -> ndarray::Array2<f64> {
    ndarray::Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j])
}

pub fn experiment_cmd(opts: &Opts) -> Result<Output> {
    let p = load(opts)?;
    let config = experiment_config(opts, opts.procedure.into());
    let report = run_experiment(p.model.as_ref(), &p.background, &p.inputs, &config)?;
    Ok(Output {
        json: report.to_json(),
        table: report.table(),
        series: vec![("counts.csv", report.counts_csv()), ("fwer.csv", report.fwer_csv())],
        converged: report.any_converged(),
    })
}

pub fn synth(opts: &SynthOpts) -> Result<u8> {
    let f: Fixture = fixtures::by_name(&opts.fixture).with_context(|| format!("unknown fixture {:?}", opts.fixture))?;
    let text = f.model_text.as_ref().with_context(|| format!("fixture {} has no model file form", f.name))?;
    fs::create_dir_all(&opts.out).with_context(|| format!("creating {}", opts.out.display()))?;
    write_dataset(&opts.out.join("background.csv"), &f.background)?;
    write_dataset(&opts.out.join("inputs.csv"), &f.inputs)?;
    fs::write(opts.out.join("model.txt"), text)?;
    println!("wrote {} (d = {}) to {}", f.name, f.n_features(), opts.out.display());
    Ok(0)
}

fn write_dataset(path: &Path, ds: &TabularDataset) -> Result<()> {
    let mut s = ds.feature_names().join(",");
    s.push('\n');
    for row in ds.values().rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}
