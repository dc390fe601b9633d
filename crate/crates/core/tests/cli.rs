use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gum::cli::commands::comparison;
use gum::cli::config::{apply_overrides, FitConfig};
use gum::cli::data::{parse_csv, read_csv, to_dataset};
use gum::cli::report::{run_fit, FitReport};
use gum::hyper::aic;
use tempfile::TempDir;

fn gum(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gum")).args(args).output().expect("run gum")
}

fn config(name: &str) -> String {
    format!("{}/../../configs/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn path(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Simulated Poisson data and a Laplace fit of it, in a fresh directory.
fn poisson_fit(n: usize) -> (TempDir, PathBuf, PathBuf) {
    let dir = TempDir::new().unwrap();
    let data = path(&dir, "data.csv");
    let report = path(&dir, "report.json");
    let n = n.to_string();
    ok(&gum(&["simulate", "--truth", &config("poisson_truth.toml"), "--n", &n, "--out", s(&data)]));
    ok(&gum(&["fit", "--config", &config("poisson.toml"), "--data", s(&data), "--out", s(&report)]));
    (dir, data, report)
}

fn load(p: &Path) -> FitReport {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn column(csv: &str, name: &str) -> Vec<f64> {
    parse_csv(csv).unwrap().column(name).unwrap().to_vec()
}

#[test]
fn simulate_writes_header_and_rows_deterministically() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (path(&dir, "a.csv"), path(&dir, "b.csv"));
    for p in [&a, &b] {
        ok(&gum(&["simulate", "--scenario", "synthetic-poisson", "--N", "40", "--seed", "2", "--out", s(p)]));
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    assert_eq!(text.lines().next(), Some("x1,x2,x3,y"));
    assert_eq!(text.lines().count(), 41);
}

#[test]
fn simulate_rejects_bad_truth() {
    let dir = TempDir::new().unwrap();
    let bad = path(&dir, "truth.toml");
    fs::write(&bad, "formula = \"f(x)\"\nfamily = \"poisson\"\n[truths]\nf = \"tan\"\n[inputs.x]\ndist = \"uniform\"\nlo = 0\nhi = 1\n").unwrap();
    let out = gum(&["simulate", "--truth", s(&bad), "--n", "10"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tan"));
}

#[test]
fn fit_reruns_are_byte_identical() {
    let (dir, data, report) = poisson_fit(200);
    let again = path(&dir, "again.json");
    ok(&gum(&["--threads", "1", "fit", "--config", &config("poisson.toml"), "--data", s(&data), "--out", s(&again)]));
    assert_eq!(fs::read(&report).unwrap(), fs::read(&again).unwrap());
    let r = load(&report);
    assert!(r.converged);
    assert_eq!(r.n_hyper, 6);
    assert_eq!(r.aic, aic(6, r.log_marginal));
    assert_eq!(r.data.n_obs, 200);
    assert_eq!(r.config.formula, "f1(x1)*f2(x2) + f3(x3)");
}

#[test]
fn malformed_formula_reports_byte_offset() {
    let (_dir, data, _) = poisson_fit(50);
    let out = gum(&["fit", "--config", &config("poisson.toml"), "--data", s(&data), "--set", "formula=\"f1(x1)*(f3(x3)\""]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("byte 14"), "{err}");
    let out = gum(&["inspect", "--formula", "f1(x1) + + f2(x2)"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("byte 9"));
}

#[test]
fn periodic_function_repeats_with_period_pi() {
    let (dir, _, report) = poisson_fit(300);
    let r = load(&report);
    let f2 = r.functions.iter().find(|f| f.name == "f2").unwrap();
    let query = path(&dir, "query.csv");
    let mut text = String::from("x1,x2,x3\n");
    for x in &f2.grid {
        text.push_str(&format!("1,{},1\n", x + std::f64::consts::PI));
    }
    fs::write(&query, text).unwrap();
    let out = gum(&["predict", "--report", s(&report), "--data", s(&query)]);
    ok(&out);
    let shifted = column(&String::from_utf8(out.stdout).unwrap(), "f2_mean");
    let scale = f2.mean.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (a, b) in shifted.iter().zip(&f2.mean) {
        assert!((a - b).abs() < 1e-6 * scale, "{a} vs {b}");
    }
}

#[test]
fn predict_on_training_rows_reproduces_fitted() {
    let (dir, data, report) = poisson_fit(150);
    let out = path(&dir, "pred.csv");
    ok(&gum(&["predict", "--report", s(&report), "--data", s(&data), "--out", s(&out)]));
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(
        text.lines().next(),
        Some("f1_mean,f1_sd,f2_mean,f2_sd,f3_mean,f3_sd,predictor_mean,response_mean")
    );
    let rho = column(&text, "predictor_mean");
    let mu = column(&text, "response_mean");
    assert_eq!(rho, load(&report).fitted);
    for (r, m) in rho.iter().zip(&mu) {
        assert!((r.exp() - m).abs() <= 1e-12 * m.max(1.0));
    }
}

#[test]
fn grouped_predict_reproduces_fitted() {
    let dir = TempDir::new().unwrap();
    let (data, report, pred) = (path(&dir, "g.csv"), path(&dir, "gum.json"), path(&dir, "p.csv"));
    ok(&gum(&["simulate", "--scenario", "grating", "--n", "120", "--seed", "4", "--out", s(&data)]));
    ok(&gum(&["fit", "--config", &config("grating_gum.toml"), "--data", s(&data), "--out", s(&report)]));
    ok(&gum(&["predict", "--report", s(&report), "--data", s(&data), "--out", s(&pred)]));
    let rho = column(&fs::read_to_string(&pred).unwrap(), "predictor_mean");
    let fitted = load(&report).fitted;
    assert_eq!(rho.len(), 120 * 8);
    for (row, r) in rho.iter().enumerate() {
        assert_eq!(*r, fitted[row / 8]);
    }
}

#[test]
fn empty_query_gives_empty_output() {
    let (dir, _, report) = poisson_fit(50);
    for contents in ["", "x1,x2,x3\n"] {
        let query = path(&dir, "empty.csv");
        fs::write(&query, contents).unwrap();
        let out = gum(&["predict", "--report", s(&report), "--data", s(&query)]);
        ok(&out);
        let text = String::from_utf8(out.stdout).unwrap();
        assert_eq!(text.lines().count(), 1, "{text}");
    }
}

#[test]
fn predict_with_missing_column_is_a_user_error() {
    let (dir, _, report) = poisson_fit(50);
    let query = path(&dir, "q.csv");
    fs::write(&query, "x1,x3\n0.5,0.5\n").unwrap();
    let out = gum(&["predict", "--report", s(&report), "--data", s(&query)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("x2"));
}

#[test]
fn far_query_reverts_to_prior_sd() {
    let (dir, _, report) = poisson_fit(200);
    let query = path(&dir, "far.csv");
    fs::write(&query, "x1,x2,x3\n50,1,-40\n").unwrap();
    let out = gum(&["predict", "--report", s(&report), "--data", s(&query)]);
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    for f in ["f1", "f3"] {
        let sd = column(&text, &format!("{f}_sd"))[0];
        let mean = column(&text, &format!("{f}_mean"))[0];
        assert!((sd - 1.0).abs() < 1e-6, "{f} sd {sd}");
        assert!(mean.abs() < 1e-6, "{f} mean {mean}");
    }
}

#[test]
fn compare_arithmetic() {
    let (_dir, data, _) = poisson_fit(60);
    let cfg = FitConfig::load(Path::new(&config("poisson.toml")), &[]).unwrap();
    let table = read_csv(&data).unwrap();
    let base = run_fit(&cfg, &to_dataset(&table, "y", None).unwrap()).unwrap();
    let with = |p: usize, logl: f64| FitReport {
        n_hyper: p,
        log_marginal: logl,
        aic: aic(p, logl),
        ..base.clone()
    };
    let c = comparison(&with(3, -120.0), &with(3, -125.0)).unwrap();
    assert_eq!(c.delta_aic, -10.0);
    assert_eq!(c.favored, "a");
    let c = comparison(&with(3, -125.0), &with(3, -120.0)).unwrap();
    assert_eq!((c.delta_aic, c.favored.as_str()), (10.0, "b"));
    let mut other = base.clone();
    other.data.fingerprint = "0".repeat(64);
    assert!(comparison(&base, &other).unwrap_err().is_user_error());
}

#[test]
fn identical_reports_tie() {
    let (_dir, _, report) = poisson_fit(60);
    let out = gum(&["compare", s(&report), s(&report)]);
    ok(&out);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["delta_aic"], 0.0);
    assert_eq!(v["favored"], "tie");
}

#[test]
fn compare_rejects_different_data() {
    let (_d1, _, a) = poisson_fit(60);
    let (_d2, _, b) = poisson_fit(61);
    let out = gum(&["compare", s(&a), s(&b)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn grating_compare_favors_the_cosine_model() {
    let dir = TempDir::new().unwrap();
    let data = path(&dir, "g.csv");
    let (a, b) = (path(&dir, "gum.json"), path(&dir, "glm.json"));
    ok(&gum(&["simulate", "--scenario", "grating", "--n", "480", "--seed", "1", "--out", s(&data)]));
    ok(&gum(&["fit", "--config", &config("grating_gum.toml"), "--data", s(&data), "--out", s(&a)]));
    ok(&gum(&["fit", "--config", &config("grating_glm.toml"), "--data", s(&data), "--out", s(&b)]));
    let out = gum(&["compare", s(&a), s(&b)]);
    ok(&out);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["delta_aic"].as_f64().unwrap() > 0.0);
    assert_eq!(v["favored"], "b");
}

#[test]
fn bench_single_rep_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (path(&dir, "a"), path(&dir, "b"));
    for d in [&a, &b] {
        let out = gum(&[
            "bench", "--scenario", "synthetic-poisson", "--N", "50,100", "--reps", "1", "--seed", "7", "--method", "vi",
            "--epochs", "10", "--out-dir", s(d),
        ]);
        ok(&out);
    }
    for f in [
        "synthetic-poisson_laplace.json",
        "synthetic-poisson_vi.json",
        "synthetic-poisson_vi_err.csv",
        "synthetic-poisson_vi_curves.csv",
        "synthetic-poisson_vi_curves.svg",
        "synthetic-poisson_rmse_comparison.csv",
    ] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let rmse = fs::read_to_string(a.join("synthetic-poisson_rmse_comparison.csv")).unwrap();
    assert_eq!(rmse.lines().count(), 3);
}

#[test]
fn bench_unknown_scenario_is_a_user_error() {
    let dir = TempDir::new().unwrap();
    let out = gum(&["bench", "--scenario", "mnist", "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn inspect_shows_assigned_constraints() {
    let out = gum(&["inspect", "--formula", "f1(x1)*f2(x2) + f3(x3)"]);
    ok(&out);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["formula"], "f1(x1)*f2(x2) + f3(x3)");
    assert_eq!(v["blocks"].as_array().unwrap().len(), 2);
    assert_eq!(v["blocks"][0][0]["offset"], "free");
    for f in ["f1", "f2", "f3"] {
        assert!(v["constraints"][f].is_string());
    }
    let out = gum(&["inspect", "--config", &config("grating_glm.toml")]);
    ok(&out);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["constraints"]["w"], "mean_one");
}

#[test]
fn overrides_and_flags() {
    let mut t: toml::Table = "formula = \"f(x)\"\nfamily = \"poisson\"\n".parse().unwrap();
    apply_overrides(
        &mut t,
        &["functions.f.type=squared_exp".into(), "functions.f.lengthscale=0.5".into(), "seed=9".into()],
    )
    .unwrap();
    let cfg = FitConfig::from_table(t).unwrap();
    assert_eq!(cfg.functions["f"].lengthscale, Some(0.5));
    assert_eq!((cfg.seed, cfg.vi.seed, cfg.cv.seed), (9, 9, 9));
    let mut t: toml::Table = "formula = \"f(x)\"\nfamily = \"poisson\"\nbogus = 1\n".parse().unwrap();
    apply_overrides(&mut t, &[]).unwrap();
    assert!(FitConfig::from_table(t).is_err());
    let mut t = toml::Table::new();
    assert!(apply_overrides(&mut t, &["noequals".into()]).is_err());
}

#[test]
fn unreadable_inputs_are_user_errors() {
    let out = gum(&["fit", "--config", "/nonexistent.toml", "--data", "/nonexistent.csv"]);
    assert_eq!(out.status.code(), Some(2));
    let out = gum(&["fit"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn numeric_failures_exit_three() {
    use gum::cli::{exit_code, EXIT_NUMERIC, EXIT_USER};
    use gum::GumError;
    assert_eq!(exit_code(&GumError::NonFiniteElbo), EXIT_NUMERIC);
    assert_eq!(exit_code(&GumError::SingularNewtonSystem), EXIT_NUMERIC);
    assert_eq!(exit_code(&GumError::MissingVariable("x".into())), EXIT_USER);
}

#[test]
fn variational_fit_and_learned_hyperparameters() {
    let (dir, data, _) = poisson_fit(120);
    let vi = path(&dir, "vi.json");
    ok(&gum(&[
        "fit", "--config", &config("poisson.toml"), "--data", s(&data), "--method", "vi", "--inducing", "12", "--set",
        "vi.epochs=60", "--out", s(&vi),
    ]));
    let r = load(&vi);
    assert_eq!(r.objective, "elbo");
    assert_eq!(r.config.inducing.points, 12);
    assert!(r.log_marginal.is_finite());
    assert!(r.max_constraint_residual < 1e-8);
    let em = path(&dir, "em.json");
    ok(&gum(&["fit", "--config", &config("poisson.toml"), "--data", s(&data), "--hyper", "em", "--out", s(&em)]));
    let r = load(&em);
    assert!(!r.hyper_trace.is_empty());
    assert_ne!(r.hyperparameters[0].value, 1.0);
}
