use std::fmt::Write as _;
use std::path::Path;
use std::process::{Command, Output};

fn tsrr(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsrr"))
        .args(args)
        .current_dir(dir)
        .env_remove("TSRR_THREADS")
        .output()
        .expect("spawn tsrr")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small linear-congruential stream so the fixture needs no RNG crate.
struct Lcg(u64);

impl Lcg {
    fn uniform(&mut self) -> f64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((self.0 >> 11) as f64 / (1u64 << 53) as f64) - 0.5
    }
}

/// `n` rows of `y, d, x1, x2, z1..z4`. With `relevant = false` the
/// treatment ignores the instruments entirely and is constant, so the
/// fitted instrument is orthogonal to it after partialling.
fn write_fixture(path: &Path, n: usize, relevant: bool) {
    let mut rng = Lcg(7);
    let mut s = String::from("y,d,x1,x2,z1,z2,z3,z4\n");
    for _ in 0..n {
        let x: Vec<f64> = (0..2).map(|_| rng.uniform()).collect();
        let z: Vec<f64> = (0..4).map(|_| rng.uniform()).collect();
        let v = rng.uniform();
        let d = if relevant { z[0] + 0.5 * z[1] + x[0] + 0.3 * v } else { 0.0 };
        let y = 1.5 * d + x[1] + 0.5 * v + 0.3 * rng.uniform();
        write!(s, "{y},{d},{},{}", x[0], x[1]).unwrap();
        for zj in z {
            write!(s, ",{zj}").unwrap();
        }
        s.push('\n');
    }
    std::fs::write(path, s).unwrap();
}

#[test]
fn estimate_writes_result_document() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(&dir.path().join("data.csv"), 400, true);
    let out = tsrr(
        &["estimate", "--data", "data.csv", "--y", "y", "--d", "d", "--x", "x1,x2", "--z", "z1,z2,z3,z4", "--seed", "3"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("alpha_hat"));

    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("estimate.json")).unwrap()).unwrap();
    for key in ["schema_version", "manifest", "alpha_hat", "sigma_alpha2", "ci_low", "ci_high", "wald", "p_value", "n1", "n2", "eta_used"] {
        assert!(doc.get(key).is_some(), "missing {key}");
    }
    let alpha = doc["alpha_hat"].as_f64().unwrap();
    assert!((alpha - 1.5).abs() < 0.5, "alpha_hat {alpha}");
    assert!(doc["ci_low"].as_f64().unwrap() < doc["ci_high"].as_f64().unwrap());
}

#[test]
fn estimate_rjive_runs() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(&dir.path().join("data.csv"), 300, true);
    let out = tsrr(
        &["estimate", "--data", "data.csv", "--y", "y", "--d", "d", "--x", "x1,x2", "--z", "z1,z2,z3,z4", "--estimator", "rjive", "--out", "r.json"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(doc["estimator"], "rjive");
}

#[test]
fn missing_column_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(&dir.path().join("data.csv"), 50, true);
    let out = tsrr(&["estimate", "--data", "data.csv", "--y", "y", "--d", "d", "--z", "z1,nope"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("nope"), "{}", stderr(&out));
}

#[test]
fn irrelevant_instruments_are_weak_identification() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(&dir.path().join("data.csv"), 200, false);
    let out = tsrr(&["estimate", "--data", "data.csv", "--y", "y", "--d", "d", "--x", "x1,x2", "--z", "z1,z2,z3,z4"], dir.path());
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
    assert!(stderr(&out).contains("weak identification"), "{}", stderr(&out));
}

#[test]
fn unknown_panel_is_an_argument_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = tsrr(&["replicate", "--panel", "sparse-Z"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_threads_is_an_argument_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = tsrr(&["replicate", "--panel", "sparse-A", "--reps", "2", "--threads", "0"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

fn without_time(csv: &str) -> Vec<String> {
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let keep: Vec<usize> = (0..header.len()).filter(|&i| !header[i].contains("time") && !header[i].contains("elapsed")).collect();
    csv.lines()
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            keep.iter().map(|&i| f[i]).collect::<Vec<_>>().join(",")
        })
        .collect()
}

#[test]
fn replicate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |out: &str| {
        let o = tsrr(&["replicate", "--panel", "sparse-A", "--reps", "12", "--seed", "1", "--threads", "2", "--out", out], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).contains("TSRR"));
    };
    run("a");
    run("b");
    let read = |p: &str| std::fs::read_to_string(dir.path().join(p)).unwrap();

    let panel = read("a/panel.csv");
    assert_eq!(panel.lines().count(), 3, "header plus one row per estimator");
    assert_eq!(without_time(&panel), without_time(&read("b/panel.csv")));
    assert_eq!(without_time(&read("a/records.csv")), without_time(&read("b/records.csv")));
    assert_eq!(read("a/records.csv").lines().count(), 1 + 2 * 12);

    let prov: serde_json::Value = serde_json::from_str(&read("a/provenance.json")).unwrap();
    assert_eq!(prov["manifest"]["seed"], 1);
    assert_eq!(prov["config"]["n_reps"], 12);
    assert!(prov["config_toml"].as_str().unwrap().contains("n_reps = 12"));
}

#[test]
fn simulate_writes_dataset_and_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "n = 120\np_x = 6\np_z1 = 10\ncorr = \"AR1\"\nrho = 0.5\ngamma_x_pattern = \"nonsparse_dense\"\n\
gamma_z_pattern = \"all_weak\"\nm = 0.5\ndensity_x = 0.5\ndensity_z = 0.5\nmu_x2 = 60\nmu_z2 = 60\nsigma_ev = 0.6\n\
alpha_true = 1.0\nc_x = 0.1\nc_z = 0.1\nsplit_fraction = 0.5\nn_reps = 3\nseed = 9\n";
    std::fs::write(dir.path().join("small.toml"), cfg).unwrap();
    let out = tsrr(&["simulate", "--config", "small.toml", "--rep", "1", "--data-out", "d.csv"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("simulate.json")).unwrap()).unwrap();
    assert_eq!(doc["results"].as_array().unwrap().len(), 2);
    let data = std::fs::read_to_string(dir.path().join("d.csv")).unwrap();
    assert_eq!(data.lines().count(), 121);
}
