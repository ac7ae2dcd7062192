use std::path::Path;
use std::process::{Command, Output};

fn bfmht(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bfmht"))
        .args(args)
        .env_remove("BFMHT_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = bfmht(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

fn read_pairs(path: &str) -> Vec<(f64, f64)> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let v: Vec<f64> = l.split(',').map(|s| s.parse().unwrap()).collect();
            (v[v.len() - 2], v[v.len() - 1])
        })
        .collect()
}

fn write_coeffs(path: &str, m: usize) {
    let mut s = String::from("re,im\n");
    for k in 0..m {
        s.push_str(&format!("{},{}\n", (k as f64 * 0.7).sin(), (k as f64 * 1.3).cos()));
    }
    std::fs::write(path, s).unwrap();
}

#[test]
fn factorize_apply_matches_direct() {
    let dir = tempfile::tempdir().unwrap();
    let f = p(dir.path(), "f.bfc");
    ok(&["factorize", "--grid", "32", "--m-ratio", "8", "--eps", "1e-6", "--out", &f]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(format!("{f}.json")).unwrap()).unwrap();
    assert_eq!(report["memory_report"]["rows"], 1024);
    assert_eq!(report["memory_report"]["cols"], 128);

    let c = p(dir.path(), "c.csv");
    write_coeffs(&c, 128);
    let y = p(dir.path(), "y.csv");
    ok(&["apply", "--factor", &f, "--coeffs", &c, "--out", &y]);
    let d = p(dir.path(), "d.csv");
    ok(&["--seed", "3", "direct", "--grid", "32", "--m-ratio", "8", "--coeffs", &c, "--rows", "100", "--out", &d]);

    let applied = read_pairs(&y);
    let text = std::fs::read_to_string(&d).unwrap();
    let (mut err, mut nrm) = (0.0, 0.0);
    for line in text.lines().skip(1) {
        let v: Vec<f64> = line.split(',').map(|s| s.parse().unwrap()).collect();
        let (re, im) = applied[v[0] as usize];
        err += (re - v[1]).powi(2) + (im - v[2]).powi(2);
        nrm += v[1] * v[1] + v[2] * v[2];
    }
    assert!((err / nrm).sqrt() <= 1e-5);

    let y1 = p(dir.path(), "y1.csv");
    ok(&["--threads", "1", "apply", "--factor", &f, "--coeffs", &c, "--out", &y1]);
    assert_eq!(std::fs::read(&y).unwrap(), std::fs::read(&y1).unwrap());
}

#[test]
fn invert_recovers_coefficients() {
    let dir = tempfile::tempdir().unwrap();
    let f = p(dir.path(), "f.bfc");
    ok(&["factorize", "--grid", "16", "--m", "40", "--eps", "1e-8", "--out", &f]);
    let c = p(dir.path(), "c.csv");
    write_coeffs(&c, 40);
    let y = p(dir.path(), "y.csv");
    ok(&["apply", "--factor", &f, "--coeffs", &c, "--out", &y]);
    let back = p(dir.path(), "back.csv");
    ok(&["invert", "--factor", &f, "--values", &y, "--tol", "1e-12", "--out", &back]);
    let (want, got) = (read_pairs(&c), read_pairs(&back));
    for (a, b) in want.iter().zip(&got) {
        assert!((a.0 - b.0).abs() < 1e-6 && (a.1 - b.1).abs() < 1e-6);
    }
    assert!(Path::new(&format!("{back}.json")).exists());
}

#[test]
fn grf_samples_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let f = p(dir.path(), "f.bfc");
    ok(&["factorize", "--grid", "16", "--m", "30", "--eps", "1e-8", "--out", &f]);
    let run = |name: &str, seed: &str| {
        let out = p(dir.path(), name);
        ok(&["--seed", seed, "grf-sample", "--factor", &f, "--density", "matern:nu=1,ell=0.5,var=1", "--samples", "4", "--out", &out]);
        std::fs::read_to_string(out).unwrap()
    };
    let a = run("a.csv", "5");
    assert_eq!(a, run("b.csv", "5"));
    assert_ne!(a, run("c.csv", "6"));
    assert_eq!(a.lines().count(), 4);
    assert_eq!(a.lines().next().unwrap().split(',').count(), 256);
}

#[test]
fn rank_study_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path(), "rank.csv");
    ok(&["rank-study", "--kernel", "disk", "--b", "1,5", "--eps", "1e-3", "--resolution", "64", "--out", &out]);
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("kernel,a,b,R,eps"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.ends_with(",true")));
}

#[test]
fn bench_reports_slope() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path(), "sweep.csv");
    let o = ok(&["bench", "--sizes", "256,1024,4096", "--m-ratio", "25", "--eps", "1e-3", "--out", &out]);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("slope "));
    let side: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(format!("{out}.json")).unwrap()).unwrap();
    assert!(side["slope"].as_f64().unwrap().is_finite());
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 4);
}

#[test]
fn eigenmaps_on_small_sphere() {
    let dir = tempfile::tempdir().unwrap();
    let prefix = p(dir.path(), "sphere");
    ok(&["--seed", "1", "eigenmaps", "--sphere", "600", "--m", "24", "--band-size", "12", "--eps", "1e-3", "--out", &prefix]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(format!("{prefix}.json")).unwrap()).unwrap();
    assert!(report["orthonormality_error"].as_f64().unwrap() < 1e-8);
    assert!(Path::new(&format!("{prefix}.bfc")).exists());
    assert!(Path::new(&format!("{prefix}.eig")).exists());
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let f = p(dir.path(), "f.bfc");
    assert_eq!(bfmht(&["factorize", "--grid", "8", "--eps", "2", "--out", &f]).status.code(), Some(2));
    assert_eq!(bfmht(&["factorize", "--out", &f]).status.code(), Some(2));
    assert_eq!(bfmht(&["apply", "--factor", "missing.bfc", "--coeffs", "x", "--out", &f]).status.code(), Some(2));
    assert_eq!(bfmht(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(bfmht(&["rank-study", "--kernel", "square", "--b", "1"]).status.code(), Some(2));
}

#[test]
fn compute_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let f = p(dir.path(), "bad.bfc");
    std::fs::write(&f, b"not a factor").unwrap();
    let c = p(dir.path(), "c.csv");
    write_coeffs(&c, 4);
    let out = bfmht(&["apply", "--factor", &f, "--coeffs", &c, "--out", &p(dir.path(), "y.csv")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("butterfly"));
}
