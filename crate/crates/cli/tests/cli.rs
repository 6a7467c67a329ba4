use std::f64::consts::{E, PI};
use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn floquet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_floquet"))
        .args(args)
        .env_remove("FLOQUET_THREADS")
        .output()
        .expect("binary runs")
}

fn model(name: &str) -> String {
    let p: PathBuf = [env!("CARGO_MANIFEST_DIR"), "models", name].iter().collect();
    p.to_string_lossy().into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

/// Column `name` of a CSV report, parsed as floats.
fn csv_column(text: &str, name: &str) -> Vec<f64> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().expect("header").split(',').collect();
    let idx = header.iter().position(|h| *h == name).expect("column present");
    lines.map(|l| l.split(',').nth(idx).unwrap().parse().unwrap()).collect()
}

#[test]
fn spectrum_finds_e_for_the_scalar_model() {
    let o = floquet(&["spectrum", &model("scalar.toml"), "--num", "5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let moduli = csv_column(&stdout(&o), "modulus");
    assert!((moduli[0] - E).abs() / E < 1e-10, "{}", moduli[0]);
    assert!(moduli.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn json_output_has_the_envelope_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s.json");
    let o = floquet(&[
        "spectrum",
        &model("scalar.toml"),
        "--no-correct",
        "--format",
        "json",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(o.stdout.is_empty());
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["command"], "spectrum");
    let records = v["records"].as_array().unwrap();
    assert!(!records.is_empty());
    assert_eq!(records[0]["stage"], "collocation");
    let m = records[0]["modulus"].as_f64().unwrap();
    assert!((m - E).abs() / E < 1e-5);

    // the CSV rendering of the same run carries the same bits
    let o = floquet(&["spectrum", &model("scalar.toml"), "--no-correct"]);
    let csv = csv_column(&stdout(&o), "modulus");
    assert_eq!(csv[0].to_bits(), m.to_bits());
}

#[test]
fn parameter_overrides_change_the_answer() {
    // K = -1/(e pi) is where the dominant multiplier has modulus 1/e
    let k = format!("K={}", -1.0 / (E * PI));
    let o = floquet(&["spectrum", &model("scalar.toml"), "--set", &k, "--num", "4"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let moduli = csv_column(&stdout(&o), "modulus");
    assert!((moduli[0] - (-1.0f64).exp()).abs() < 1e-4, "{}", moduli[0]);
}

#[test]
fn invalid_models_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "dim = 1\nperiod = 1\ndelays = [1]\nA0 = [[\"sin(t\"]]\n").unwrap();
    let o = floquet(&["spectrum", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("A0[0][0]"));

    let o = floquet(&["spectrum", &model("scalar.toml"), "--set", "Q=1"]);
    assert_eq!(code(&o), 2);

    let missing = dir.path().join("nope.toml");
    let o = floquet(&["check", missing.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn check_warns_about_misaligned_discontinuities() {
    let o = floquet(&["check", &model("misaligned.toml")]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("t = 0.5 is not on the grid"), "{text}");
    assert!(text.contains("higher N is recommended"), "{text}");

    let o = floquet(&["check", &model("misaligned.toml"), "--grid", "0.05"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(!text.contains("warning"), "{text}");

    let o = floquet(&["check", &model("scalar.toml")]);
    assert!(!stdout(&o).contains("warning"));
}

#[test]
fn verify_agrees_with_the_oracle() {
    let o = floquet(&["verify", &model("scalar.toml"), "--mesh", "160", "--substeps", "8", "--tol", "1e-6"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let dev = csv_column(&stdout(&o), "deviation");
    assert_eq!(dev.len(), 3);

    // an impossible tolerance is a numerical failure
    let o = floquet(&["verify", &model("scalar.toml"), "--tol", "1e-300"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn converge_sweeps_the_degree() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("lambert.toml");
    std::fs::write(&m, "[builtin]\nname = \"scalar_lambert\"\n").unwrap();
    let o = floquet(&["converge", m.to_str().unwrap(), "--sweep", "M=6:14:4"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let err = csv_column(&stdout(&o), "rel_error");
    assert_eq!(err.len(), 3);
    assert!(err[0] > err[1] && err[1] > err[2], "{err:?}");

    let o = floquet(&["converge", m.to_str().unwrap(), "--sweep", "delta=0.01:0.0025:log"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let err = csv_column(&stdout(&o), "rel_error");
    assert_eq!(err.len(), 3);
    let ratio = err[0] / err[1];
    assert!((12.0..20.0).contains(&ratio), "{err:?}");

    let o = floquet(&["converge", m.to_str().unwrap(), "--sweep", "X=1:2"]);
    assert_ne!(code(&o), 0);
}

#[test]
fn gradient_matches_the_closed_form() {
    let o = floquet(&["gradient", &model("scalar.toml"), "--delta", "2e-4", "--fd-check", "--format", "json"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let rec = &v["records"][0];
    assert_eq!(rec["param"], "K");
    let re = rec["dmu_re"].as_f64().unwrap();
    let im = rec["dmu_im"].as_f64().unwrap();
    assert!((re - PI / 2.0).abs() < 1e-8 && im.abs() < 1e-8, "{re} {im}");
    assert!(rec["fd_deviation"].as_f64().unwrap() < 1e-6);
}

#[test]
fn threads_flag_is_accepted() {
    let o = floquet(&["--threads", "1", "spectrum", &model("trivial.toml"), "--no-correct"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn optimize_decreases_the_spectral_radius() {
    let o = floquet(&["optimize", &model("mathieu_pd.toml"), "--M", "10", "--max-iter", "4"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rho = csv_column(&stdout(&o), "rho");
    assert!(rho.len() >= 2);
    assert!(rho.windows(2).all(|w| w[1] < w[0]), "{rho:?}");
    assert!(String::from_utf8_lossy(&o.stderr).contains("final k_p="));

    let o = floquet(&["optimize", &model("trivial.toml")]);
    assert_eq!(code(&o), 2);
}
