use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qbsde::cli::{ComparisonSummary, Summary};
use serde_json::Value;
use tempfile::TempDir;

fn qbsde(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qbsde")).args(args).env("QBSDE_WORKERS", "1").output().expect("binary runs")
}

fn config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn grid(steps: usize, paths: usize) -> String {
    format!("[grid]\nT = 1.0\nn_steps = {steps}\nn_paths = {paths}\nseed = 42\n")
}

fn zero_config() -> String {
    format!(
        "[generator]\nfamily = \"affine_quadratic\"\n\n[terminal]\nfamily = \"constant\"\nscale = 0.0\n\n{}",
        grid(8, 500)
    )
}

fn constant_config(level: f64) -> String {
    format!(
        "[generator]\nfamily = \"affine_quadratic\"\ngamma_q = 1.0\n\n[terminal]\nfamily = \"constant\"\nscale = {level}\n\n{}",
        grid(8, 500)
    )
}

fn quadratic_config(scale: f64, steps: usize, paths: usize) -> String {
    format!(
        "[generator]\nfamily = \"affine_quadratic\"\ngamma_q = 1.0\n\n[terminal]\nfamily = \"tanh\"\nscale = {scale}\n\n{}\n[solver]\ntol = 1e-13\n",
        grid(steps, paths)
    )
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_summary(dir: &Path) -> Summary {
    serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn zero_generator_solves_to_zero() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "zero.toml", &zero_config());
    let out = tmp.path().join("out");
    let o = qbsde(&["solve", "-c", path_str(&cfg), "-o", path_str(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s = read_summary(&out);
    assert_eq!(s.y0, 0.0);
    assert_eq!(s.y0_se, 0.0);
    assert_eq!(s.grid.n_steps, 8);
    let r = s.reference.expect("zero generator has a reference");
    assert_eq!((r.y0, r.abs_error, r.rel_error), (0.0, 0.0, None));
    let csv = std::fs::read_to_string(out.join("fields.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("path_id,time_index,y,z,zeta"));
    assert_eq!(lines.count(), 16 * 9);
}

#[test]
fn missing_horizon_exits_with_config_code() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "bad.toml", &zero_config().replace("T = 1.0\n", ""));
    let o = qbsde(&["solve", "-c", path_str(&cfg), "-o", path_str(tmp.path())]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("`T`"));
    assert!(!tmp.path().join("summary.json").exists());
}

#[test]
fn usage_errors_exit_with_config_code() {
    assert_eq!(code(&qbsde(&["solve"])), 3);
    assert_eq!(code(&qbsde(&["frobnicate"])), 3);
    assert_eq!(code(&qbsde(&["--help"])), 0);
}

#[test]
fn missing_file_is_a_config_error() {
    let o = qbsde(&["solve", "-c", "/nonexistent/run.toml"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn worker_count_must_be_positive() {
    let o = Command::new(env!("CARGO_BIN_EXE_qbsde"))
        .args(["selftest", "--only", "99"])
        .env("QBSDE_WORKERS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("QBSDE_WORKERS"));
}

#[test]
fn quadratic_config_matches_the_reference_it_reports() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "q.toml", &quadratic_config(0.001, 64, 50_000));
    let o = qbsde(&["solve", "-c", path_str(&cfg), "-o", path_str(tmp.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s = read_summary(tmp.path());
    let r = s.reference.expect("Cole-Hopf reference");
    assert_eq!(serde_json::to_value(r.kind).unwrap(), "cole_hopf");
    let rel = r.rel_error.unwrap();
    assert!(rel <= 0.01, "rel error {rel}");
    assert_eq!(r.abs_error, (s.y0 - r.y0).abs());
    assert_eq!(s.pieces, 1);
    assert!(s.certificate.pass);
}

#[test]
fn summary_json_has_the_documented_keys() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "q.toml", &quadratic_config(0.001, 8, 1000));
    assert_eq!(code(&qbsde(&["solve", "-c", path_str(&cfg), "-o", path_str(tmp.path())])), 0);
    let v: Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("summary.json")).unwrap()).unwrap();
    let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    let mut want = vec![
        "certificate",
        "grid",
        "min_ess_fraction",
        "norms",
        "pieces",
        "reference",
        "residual",
        "stages",
        "total_iterations",
        "y0",
        "y0_se",
    ];
    want.sort_unstable();
    assert_eq!(keys, want);
    for k in ["y_sup", "z_h2", "n_bmo", "zm_n_bmo", "triple_sq"] {
        assert!(v["norms"][k].is_number(), "norms.{k}");
    }
    for k in ["estimate", "bound", "pass"] {
        assert!(v["certificate"].get(k).is_some(), "certificate.{k}");
    }
    assert!(v["stages"][0]["distances"].is_array());
}

#[test]
fn dat_output_is_written_on_request() {
    let tmp = TempDir::new().unwrap();
    let body = format!("{}\n[output]\nformats = [\"dat\"]\ncsv_paths = 2\n", zero_config());
    let cfg = config(tmp.path(), "z.toml", &body);
    assert_eq!(code(&qbsde(&["solve", "-c", path_str(&cfg), "-o", path_str(tmp.path())])), 0);
    assert!(!tmp.path().join("summary.json").exists());
    assert!(!tmp.path().join("fields.csv").exists());
    let dat = std::fs::read_to_string(tmp.path().join("fields.dat")).unwrap();
    assert!(dat.starts_with('#'));
    assert_eq!(dat.split("\n\n").filter(|b| !b.trim().is_empty()).count(), 2);
}

#[test]
fn identical_configs_compare_equal() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "a.toml", &quadratic_config(0.02, 8, 1000));
    let o = qbsde(&["compare", "-a", path_str(&cfg), "-b", path_str(&cfg), "-o", path_str(tmp.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let c: ComparisonSummary =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("comparison.json")).unwrap()).unwrap();
    assert_eq!(c.report.min_gap, 0.0);
    assert_eq!(c.report.ordered_fraction, 1.0);
}

#[test]
fn ordered_constants_compare_with_a_positive_gap() {
    let tmp = TempDir::new().unwrap();
    let a = config(tmp.path(), "a.toml", &constant_config(0.1));
    let b = config(tmp.path(), "b.toml", &constant_config(0.05));
    let o = qbsde(&["compare", "-a", path_str(&a), "-b", path_str(&b), "-o", path_str(tmp.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let c: ComparisonSummary =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("comparison.json")).unwrap()).unwrap();
    assert!((c.report.min_gap - 0.05).abs() < 1e-12, "{}", c.report.min_gap);
}

#[test]
fn swapped_dominance_exits_five() {
    let tmp = TempDir::new().unwrap();
    let a = config(tmp.path(), "a.toml", &constant_config(0.05));
    let b = config(tmp.path(), "b.toml", &constant_config(0.1));
    let o = qbsde(&["compare", "-a", path_str(&a), "-b", path_str(&b), "-o", path_str(tmp.path())]);
    assert_eq!(code(&o), 5);
    assert!(String::from_utf8_lossy(&o.stderr).contains("xi_A < xi_B"));
}

#[test]
fn compare_requires_a_shared_grid() {
    let tmp = TempDir::new().unwrap();
    let a = config(tmp.path(), "a.toml", &constant_config(0.1));
    let b = config(tmp.path(), "b.toml", &constant_config(0.05).replace("seed = 42", "seed = 43"));
    let o = qbsde(&["compare", "-a", path_str(&a), "-b", path_str(&b), "-o", path_str(tmp.path())]);
    assert_eq!(code(&o), 3);
}

fn read_levels(dir: &Path) -> Vec<Vec<f64>> {
    let csv = std::fs::read_to_string(dir.join("convergence.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("level,n_steps,n_paths,y0,y0_se,oracle_y0,oracle_se,error,noise,runtime_s"));
    lines.map(|l| l.split(',').map(|x| x.parse().unwrap()).collect()).collect()
}

#[test]
fn step_sweep_errors_do_not_grow() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "q.toml", &quadratic_config(0.001, 8, 20_000));
    let o = qbsde(&["convergence", "-c", path_str(&cfg), "--steps", "8,16,32,64", "-o", path_str(tmp.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let rows = read_levels(tmp.path());
    assert_eq!(rows.iter().map(|r| r[1] as usize).collect::<Vec<_>>(), [8, 16, 32, 64]);
    for w in rows.windows(2) {
        assert!(w[1][7] <= w[0][7] + 2.0 * w[1][8].max(w[0][8]), "{w:?}");
    }
}

#[test]
fn path_sweep_standard_error_follows_the_square_root_law() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "q.toml", &quadratic_config(0.001, 8, 1000));
    let o = qbsde(&["convergence", "-c", path_str(&cfg), "--paths", "1000,10000,100000", "-o", path_str(tmp.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let rows = read_levels(tmp.path());
    for w in rows.windows(2) {
        let ratio = w[0][4] / w[1][4];
        assert!((2.0..5.0).contains(&ratio), "SE ratio {ratio}");
    }
}

#[test]
fn single_level_sweep_also_writes_solve_outputs() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "q.toml", &quadratic_config(0.001, 8, 2000));
    let sweep = tmp.path().join("sweep");
    let solo = tmp.path().join("solo");
    let o = qbsde(&["convergence", "-c", path_str(&cfg), "--steps", "8", "-o", path_str(&sweep)]);
    assert_eq!(code(&o), 0);
    assert_eq!(code(&qbsde(&["solve", "-c", path_str(&cfg), "-o", path_str(&solo)])), 0);
    for f in ["summary.json", "fields.csv"] {
        assert_eq!(std::fs::read(sweep.join(f)).unwrap(), std::fs::read(solo.join(f)).unwrap(), "{f}");
    }
    assert_eq!(read_levels(&sweep).len(), 1);
}

#[test]
fn sweep_levels_must_increase() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "q.toml", &quadratic_config(0.001, 8, 1000));
    let o = qbsde(&["convergence", "-c", path_str(&cfg), "--steps", "16,8", "-o", path_str(tmp.path())]);
    assert_eq!(code(&o), 3);
}

#[test]
fn sweep_without_reference_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let body = quadratic_config(0.001, 8, 1000).replace("gamma_q = 1.0", "gamma_q = 1.0\nc = 0.2");
    let cfg = config(tmp.path(), "q.toml", &body);
    let o = qbsde(&["convergence", "-c", path_str(&cfg), "--steps", "8,16", "-o", path_str(tmp.path())]);
    assert_eq!(code(&o), 3);
}

#[test]
fn repeated_solves_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "q.toml", &quadratic_config(0.05, 16, 2000));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&qbsde(&["solve", "-c", path_str(&cfg), "-o", path_str(&a)])), 0);
    let o = Command::new(env!("CARGO_BIN_EXE_qbsde"))
        .args(["solve", "-c", path_str(&cfg), "-o", path_str(&b)])
        .env("QBSDE_WORKERS", "3")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    for f in ["summary.json", "fields.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}
