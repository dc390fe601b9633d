//! Implementations of the subcommands.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{FitConfig, Method, TruthConfig};
use super::data::{csv_string, dataset_csv, read_csv, to_dataset, Table};
use super::report::{predict_rows, run_fit, FitReport, FIT_REPORT_FORMAT};
use super::svg;
use super::{BenchArgs, BenchMethod, CompareArgs, FitArgs, InspectArgs, PredictArgs, SimulateArgs};
use crate::bench::{
    grating_recovery_scenario, grating_scenario, poisson_scenario, recovery_experiment, simulate as simulate_truth, ExperimentOptions,
    FitMethod, RecoveryReport, Scenario,
};
use crate::dsl::{format, parse, validate, ModelAst};
use crate::error::{GumError, Result};
use crate::kernels::KernelSpec;
use crate::model::graph::{constraint_table, Offset};
use crate::model::{Dataset, FunctionDecl};

pub const COMPARE_FORMAT: &str = "gum-compare/1";
pub const INSPECT_FORMAT: &str = "gum-inspect/1";

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// Writes to `path`, or to standard output when absent.
fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => Ok(fs::write(p, text)?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn read_report(path: &Path) -> Result<FitReport> {
    let text = fs::read_to_string(path)?;
    let report: FitReport = serde_json::from_str(&text)?;
    if report.format != FIT_REPORT_FORMAT {
        return Err(GumError::InvalidInput(format!(
            "{}: unsupported report format `{}`",
            path.display(),
            report.format
        )));
    }
    Ok(report)
}

pub fn fit(args: &FitArgs) -> Result<()> {
    let cfg = FitConfig::load(&args.config, &args.overrides())?;
    let table = read_csv(&args.data)?;
    let data = to_dataset(&table, &cfg.response, cfg.group.as_deref())?;
    let report = run_fit(&cfg, &data)?;
    if !report.converged {
        log::warn!("the final fit did not converge");
    }
    emit(args.out.as_deref(), &to_json(&report)?)
}

/// Observation index of every query row: one per row, or numbered groups.
fn query_groups(table: &Table, group: Option<&str>) -> Result<(Vec<usize>, usize)> {
    let n = table.n_rows();
    let Some(g) = group else {
        return Ok(((0..n).collect(), n));
    };
    let keys = table.column(g)?;
    let mut index: HashMap<u64, usize> = HashMap::new();
    let row_obs: Vec<usize> = keys
        .iter()
        .map(|k| {
            let next = index.len();
            *index.entry(k.to_bits()).or_insert(next)
        })
        .collect();
    Ok((row_obs, index.len()))
}

pub fn predict(args: &PredictArgs) -> Result<()> {
    let report = read_report(&args.report)?;
    let graph = report.graph()?;
    let obs = report.observation_model()?;
    let mut table = read_csv(&args.data)?;
    let n = table.n_rows();
    if table.names.is_empty() {
        // An empty file is a query with no rows.
        table.names = graph.variables();
        table.names.extend(report.config.group.clone());
        table.columns = vec![Vec::new(); table.names.len()];
    }
    for v in graph.variables() {
        if let Some(row) = table.column(&v)?.iter().position(|x| !x.is_finite()) {
            return Err(GumError::NonFiniteValue { column: v, row });
        }
    }
    let (row_obs, n_obs) = query_groups(&table, report.config.group.as_deref())?;
    let columns = |name: &str| table.column(name).map(<[f64]>::to_vec);
    let pred = predict_rows(&report, &graph, &columns, n, &row_obs, n_obs)?;
    let mut header = Vec::new();
    for (name, _, _) in &pred.functions {
        header.push(format!("{name}_mean"));
        header.push(format!("{name}_sd"));
    }
    header.push("predictor_mean".into());
    header.push("response_mean".into());
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|r| {
            let mut row = Vec::with_capacity(header.len());
            for (_, m, s) in &pred.functions {
                row.push(m[r]);
                row.push(s[r]);
            }
            let rho = pred.predictor[row_obs[r]];
            row.push(rho);
            row.push(obs.inv_link(rho));
            row
        })
        .collect();
    emit(args.out.as_deref(), &csv_string(&header, &rows))
}

/// Dataset drawn from a built-in scenario.
pub fn scenario_data(name: &str, n: usize, seed: u64, gratings: usize) -> Result<Dataset> {
    match name {
        "synthetic-poisson" => simulate_truth(&poisson_scenario(seed).truth, n),
        "grating" => Ok(grating_scenario(n, gratings, seed)?.1),
        other => Err(unknown_scenario(other)),
    }
}

fn unknown_scenario(name: &str) -> GumError {
    GumError::InvalidInput(format!("unknown scenario `{name}` (expected synthetic-poisson or grating)"))
}

pub fn simulate(args: &SimulateArgs) -> Result<()> {
    if args.n == 0 {
        return Err(GumError::InvalidInput("--n must be at least 1".into()));
    }
    let data = match (&args.truth, &args.scenario) {
        (Some(path), _) => {
            let mut overrides = args.set.clone();
            if let Some(s) = args.seed {
                overrides.push(format!("seed={s}"));
            }
            let spec = TruthConfig::load(path, &overrides)?.to_spec()?;
            simulate_truth(&spec, args.n)?
        }
        (None, Some(name)) => scenario_data(name, args.n, args.seed.unwrap_or(0), args.gratings)?,
        (None, None) => return Err(GumError::InvalidInput("either --truth or --scenario is required".into())),
    };
    emit(args.out.as_deref(), &dataset_csv(&data))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareSide {
    pub formula: String,
    pub method: Method,
    pub n_hyper: usize,
    pub log_marginal: f64,
    pub aic: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub format: String,
    pub data_fingerprint: String,
    pub a: CompareSide,
    pub b: CompareSide,
    /// AIC(a) − AIC(b); negative favors a.
    pub delta_aic: f64,
    /// `a`, `b` or `tie`.
    pub favored: String,
}

/// AIC comparison of two reports fitted to the same data.
pub fn comparison(a: &FitReport, b: &FitReport) -> Result<Comparison> {
    if a.data.fingerprint != b.data.fingerprint {
        return Err(GumError::InvalidInput(format!(
            "reports were fitted to different data ({} vs {})",
            a.data.fingerprint, b.data.fingerprint
        )));
    }
    let side = |r: &FitReport| CompareSide {
        formula: r.formula.clone(),
        method: r.method,
        n_hyper: r.n_hyper,
        log_marginal: r.log_marginal,
        aic: r.aic,
    };
    let delta = a.aic - b.aic;
    let favored = if delta < 0.0 {
        "a"
    } else if delta > 0.0 {
        "b"
    } else {
        "tie"
    };
    Ok(Comparison {
        format: COMPARE_FORMAT.into(),
        data_fingerprint: a.data.fingerprint.clone(),
        a: side(a),
        b: side(b),
        delta_aic: delta,
        favored: favored.into(),
    })
}

pub fn compare(args: &CompareArgs) -> Result<()> {
    let c = comparison(&read_report(&args.a)?, &read_report(&args.b)?)?;
    emit(args.out.as_deref(), &to_json(&c)?)
}

fn bench_scenario(name: &str, seed: u64) -> Result<Scenario> {
    match name {
        "synthetic-poisson" => Ok(poisson_scenario(seed)),
        "grating" => Ok(grating_recovery_scenario(8, seed)),
        other => Err(unknown_scenario(other)),
    }
}

fn curves_svg(report: &RecoveryReport) -> String {
    let n = report.n_list.iter().copied().max().unwrap_or(0);
    let panels: Vec<svg::Panel> = report
        .runs
        .iter()
        .find(|r| r.n == n && r.curves.is_some())
        .and_then(|r| r.curves.as_ref())
        .map(|curves| {
            curves
                .iter()
                .map(|c| {
                    svg::band_panel(
                        &format!("{} ({}, N = {n})", c.function, report.method.name()),
                        &c.x,
                        &c.mean,
                        &c.sd,
                        Some(&c.truth),
                    )
                })
                .collect()
        })
        .unwrap_or_default();
    svg::panels(&panels)
}

/// Per sample size, mean predictor RMSE of Laplace and variational fits.
fn rmse_comparison(laplace: &RecoveryReport, vi: &RecoveryReport) -> String {
    let header: Vec<String> = ["n", "laplace_rmse", "laplace_sem", "vi_rmse", "vi_sem"].map(String::from).into();
    let rows: Vec<Vec<f64>> = laplace
        .summary
        .iter()
        .zip(&vi.summary)
        .map(|(l, v)| {
            vec![
                l.n as f64,
                l.predictor_rmse.mean,
                l.predictor_rmse.sem,
                v.predictor_rmse.mean,
                v.predictor_rmse.sem,
            ]
        })
        .collect();
    csv_string(&header, &rows)
}

pub fn bench(args: &BenchArgs) -> Result<()> {
    let scenario = bench_scenario(&args.scenario, args.seed)?;
    if args.n.is_empty() || args.n.contains(&0) || args.reps == 0 {
        return Err(GumError::InvalidInput("sample sizes and --reps must be positive".into()));
    }
    let mut opts = ExperimentOptions::default();
    if let Some(m) = args.inducing {
        opts.inducing = m;
    }
    if let Some(e) = args.epochs {
        opts.vi.epochs = e;
    }
    let methods = match args.method {
        BenchMethod::Laplace => vec![FitMethod::Laplace],
        BenchMethod::Vi | BenchMethod::Both => vec![FitMethod::Laplace, FitMethod::Vi],
    };
    fs::create_dir_all(&args.out_dir)?;
    let mut reports = Vec::new();
    for method in methods {
        let report = recovery_experiment(&scenario, &args.n, args.reps, method, &opts)?;
        let stem = format!("{}_{}", scenario.name, method.name());
        let dir = &args.out_dir;
        fs::write(dir.join(format!("{stem}.json")), to_json(&report)?)?;
        fs::write(dir.join(format!("{stem}_err.csv")), report.error_csv())?;
        fs::write(dir.join(format!("{stem}_curves.csv")), report.curves_csv())?;
        fs::write(dir.join(format!("{stem}_timings.csv")), report.timings_csv())?;
        fs::write(dir.join(format!("{stem}_curves.svg")), curves_svg(&report))?;
        for s in &report.summary {
            eprintln!(
                "{stem} N={}: {} fits, {} failed, predictor RMSE {:.4}, {:.3} s per fit",
                s.n, s.completed, s.failed, s.predictor_rmse.mean, s.mean_seconds
            );
        }
        reports.push(report);
    }
    if let [l, v] = reports.as_slice() {
        fs::write(
            args.out_dir.join(format!("{}_rmse_comparison.csv", scenario.name)),
            rmse_comparison(l, v),
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InspectFunction {
    pub name: String,
    pub declaration: FunctionDecl,
    pub constraint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InspectFactor {
    pub offset: Offset,
    pub terms: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Inspection {
    pub format: String,
    pub formula: String,
    pub ast: ModelAst,
    pub variables: Vec<String>,
    pub functions: Vec<InspectFunction>,
    pub constraints: std::collections::BTreeMap<String, String>,
    pub blocks: Vec<Vec<InspectFactor>>,
    pub intercept: bool,
    pub warnings: Vec<String>,
}

/// Validated structure of a formula. Functions without a declaration get a
/// squared-exponential prior with unit variance and lengthscale.
pub fn inspection(formula: &str, declared: &[FunctionDecl], intercept: bool) -> Result<Inspection> {
    let ast = parse(formula)?;
    let mut decls = declared.to_vec();
    for name in ast.function_names() {
        if !decls.iter().any(|d| d.name == name) {
            decls.push(FunctionDecl::gp(&name, KernelSpec::squared_exp(1.0, 1.0)));
        }
    }
    let mut graph = validate(&ast, &decls).map_err(GumError::Validation)?;
    graph.intercept = intercept;
    let blocks = graph
        .blocks
        .iter()
        .map(|b| {
            b.factors
                .iter()
                .map(|f| InspectFactor {
                    offset: f.offset,
                    terms: f
                        .terms
                        .iter()
                        .map(|t| format!("{}({})", graph.functions[t.func].name(), t.vars.join(",")))
                        .collect(),
                })
                .collect()
        })
        .collect();
    Ok(Inspection {
        format: INSPECT_FORMAT.into(),
        formula: format(&graph.ast),
        variables: graph.variables(),
        functions: graph
            .functions
            .iter()
            .map(|f| InspectFunction {
                name: f.name().to_string(),
                declaration: f.decl.clone(),
                constraint: f.constraint.name().to_string(),
            })
            .collect(),
        constraints: constraint_table(&graph),
        blocks,
        intercept: graph.intercept,
        warnings: graph.warnings.iter().map(ToString::to_string).collect(),
        ast: graph.ast,
    })
}

pub fn inspect(args: &InspectArgs) -> Result<()> {
    let result = match (&args.config, &args.formula) {
        (Some(path), _) => {
            let cfg = FitConfig::load(path, &args.set)?;
            inspection(&cfg.formula, &cfg.decls()?, cfg.intercept)?
        }
        (None, Some(f)) => inspection(f, &[], true)?,
        (None, None) => return Err(GumError::InvalidInput("either --config or --formula is required".into())),
    };
    emit(None, &to_json(&result)?)
}
