use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn fprior(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fprior"))
        .args(args)
        .arg("--out")
        .arg(out)
        .current_dir(fixtures())
        .output()
        .expect("binary runs")
}

fn run(cmd: &str, config: &str, out: &Path) -> Output {
    fprior(&[cmd, "--config", config, "--canonical"], out)
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn assert_ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstderr: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn every_command_writes_result_record_and_config() {
    let cases = [
        ("anticipate", "anticipate.json"),
        ("engineer", "engineer_mock.json"),
        ("tilt", "tilt.json"),
        ("posterior", "posterior.json"),
        ("calibrate", "calibrate.json"),
        ("bfr", "bfr.json"),
        ("plm", "plm.json"),
        ("gp", "gp.json"),
    ];
    let dir = tempfile::tempdir().unwrap();
    for (cmd, cfg) in cases {
        let out = dir.path().join(cmd);
        let o = run(cmd, cfg, &out);
        assert_ok(&o);
        let record = json(&out.join("run_record.json"));
        assert_eq!(record["command"], cmd);
        assert_eq!(record["status"], "ok");
        assert_eq!(record["exit_code"], 0);
        assert!(record.get("timestamps").is_none());
        for name in record["outputs"].as_object().unwrap().keys() {
            assert!(out.join(name).exists(), "{cmd}: {name} listed but missing");
        }
        assert!(out.join("result.json").exists());
        assert_eq!(
            std::fs::read(out.join("config.json")).unwrap(),
            std::fs::read(fixtures().join(cfg)).unwrap()
        );
    }
}

#[test]
fn canonical_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for (cmd, cfg) in [
        ("engineer", "engineer_scripted.json"),
        ("calibrate", "calibrate_conflict.json"),
        ("plm", "plm.json"),
    ] {
        let a = dir.path().join(format!("{cmd}-a"));
        let b = dir.path().join(format!("{cmd}-b"));
        assert_ok(&run(cmd, cfg, &a));
        assert_ok(&run(cmd, cfg, &b));
        for f in ["result.json", "run_record.json"] {
            assert_eq!(
                std::fs::read(a.join(f)).unwrap(),
                std::fs::read(b.join(f)).unwrap(),
                "{cmd}/{f}"
            );
        }
    }
}

#[test]
fn timestamps_present_without_canonical_flag() {
    let dir = tempfile::tempdir().unwrap();
    let o = fprior(&["tilt", "--config", "tilt.json"], dir.path());
    assert_ok(&o);
    let record = json(&dir.path().join("run_record.json"));
    assert!(record["timestamps"]["started"].is_string());
    assert!(record["timestamps"]["finished"].is_string());
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_ok(&run("anticipate", "anticipate.json", &a));
    assert_ok(&fprior(&["anticipate", "--config", "anticipate.json", "--seed", "12", "--canonical"], &b));
    assert_eq!(json(&a.join("run_record.json"))["seeds"][0], 11);
    assert_eq!(json(&b.join("run_record.json"))["seeds"][0], 12);
    assert_ne!(
        json(&a.join("result.json"))["sample_digest"],
        json(&b.join("result.json"))["sample_digest"]
    );
}

#[test]
fn lambda_recorded_only_for_trust_commands() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("t");
    let p = dir.path().join("p");
    let g = dir.path().join("g");
    assert_ok(&run("tilt", "tilt.json", &t));
    assert_ok(&run("posterior", "posterior.json", &p));
    assert_ok(&run("plm", "plm.json", &g));
    let rt = json(&t.join("run_record.json"));
    assert_eq!(rt["lambda"].as_f64(), Some(0.5));
    assert_eq!(rt["lambda_provenance"], "fixed");
    let rp = json(&p.join("run_record.json"));
    assert_eq!(rp["lambda"].as_f64(), Some(0.25));
    assert_eq!(rp["lambda_provenance"], "ess");
    assert!(json(&g.join("run_record.json"))["lambda"].is_null());
}

#[test]
fn tilt_result_matches_conjugate_update() {
    let dir = tempfile::tempdir().unwrap();
    assert_ok(&run("tilt", "tilt.json", dir.path()));
    let r = json(&dir.path().join("result.json"));
    let synthetic = std::fs::read_to_string(fixtures().join("bernoulli_synthetic.csv")).unwrap();
    let ones = synthetic.lines().skip(1).filter(|l| l.starts_with('1')).count() as f64;
    let n = synthetic.lines().skip(1).count() as f64;
    let prior = &r["foundation_prior"]["representation"]["prior"];
    assert_eq!(prior["family"], "beta");
    assert!((prior["a"].as_f64().unwrap() - (1.0 + 0.5 * ones)).abs() < 1e-12);
    assert!((prior["b"].as_f64().unwrap() - (1.0 + 0.5 * (n - ones))).abs() < 1e-12);
    let density = std::fs::read_to_string(dir.path().join("density.csv")).unwrap();
    assert_eq!(density.lines().count(), 51);
}

#[test]
fn engineer_outputs_consistent_accepted_dataset() {
    let dir = tempfile::tempdir().unwrap();
    assert_ok(&run("engineer", "engineer_mock.json", dir.path()));
    let r = json(&dir.path().join("result.json"));
    assert_eq!(r["stop_reason"], "threshold");
    let steps = r["steps"].as_array().unwrap();
    let min = steps.iter().map(|s| s["kappa"].as_f64().unwrap()).fold(f64::INFINITY, f64::min);
    assert_eq!(r["kappa_star"].as_f64().unwrap(), min);
    let csv = std::fs::read(dir.path().join("d_star.csv")).unwrap();
    assert!(!csv.is_empty());
    let record = json(&dir.path().join("run_record.json"));
    assert_eq!(record["prompts"][0][0].as_f64(), Some(1.5));
    assert_eq!(record["prompts"][1], r["q_star"]);
    assert!(record["generator"].as_str().unwrap().starts_with("mock"));
}

#[test]
fn scripted_generator_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    assert_ok(&run("engineer", "engineer_scripted.json", dir.path()));
    let r = json(&dir.path().join("result.json"));
    assert_eq!(r["stop_reason"], "max_iterations");
    assert_eq!(r["steps"].as_array().unwrap().len(), 4);
    let csv = std::fs::read_to_string(dir.path().join("d_star.csv")).unwrap();
    assert_eq!(csv.lines().count(), 51);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",synthetic")));
}

#[test]
fn failing_generator_exits_3_with_diagnostics_and_partial_trace() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("engineer", "engineer_failing.json", dir.path());
    assert_eq!(o.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("refusing request as instructed"), "{stderr}");
    let record = json(&dir.path().join("run_record.json"));
    assert_eq!(record["status"], "error");
    assert_eq!(record["exit_code"], 3);
    assert!(dir.path().join("partial_result.json").exists());
    assert!(!dir.path().join("result.json").exists());
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn scripted_config(flag: &str) -> String {
    let script = fixtures().join("echo_generator.py");
    std::fs::read_to_string(fixtures().join("engineer_scripted.json"))
        .unwrap()
        .replace("python3 echo_generator.py", &format!("python3 {} {flag}", script.display()))
}

#[test]
fn malformed_and_short_replies_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    for flag in ["--short", "--junk"] {
        let cfg = write_config(dir.path(), "c.json", &scripted_config(flag));
        let o = fprior(&["engineer", "--config", cfg.to_str().unwrap()], &dir.path().join(flag));
        assert_eq!(o.status.code(), Some(3), "{flag}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn lambda_max_above_one_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("calibrate", "calibrate_bad_max.json", dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("exceeds 1"));
}

#[test]
fn calibration_trusts_matched_data_more_than_conflicting() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_ok(&run("calibrate", "calibrate.json", &a));
    assert_ok(&run("calibrate", "calibrate_conflict.json", &b));
    let la = json(&a.join("result.json"))["calibration"]["lambda_star"].as_f64().unwrap();
    let lb = json(&b.join("result.json"))["calibration"]["lambda_star"].as_f64().unwrap();
    assert!(la > 0.5 && lb < 0.05, "matched {la}, conflicting {lb}");
    assert_eq!(json(&a.join("run_record.json"))["lambda_provenance"], "calibrated");
    let trace = std::fs::read_to_string(a.join("gradient_trace.csv")).unwrap();
    assert!(trace.starts_with("lambda,gradient\n"));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = fprior(&["tilt", "--config", "no-such-file.json"], &dir.path().join("m"));
    assert_eq!(missing.status.code(), Some(2));
    let unknown = write_config(dir.path(), "u.json", r#"{"sed": 1}"#);
    let o = fprior(&["tilt", "--config", unknown.to_str().unwrap()], &dir.path().join("u"));
    assert_eq!(o.status.code(), Some(2));
    let no_section = write_config(dir.path(), "n.json", r#"{"seed": 1}"#);
    let o = fprior(&["plm", "--config", no_section.to_str().unwrap()], &dir.path().join("n"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("plm"));
}

#[test]
fn provenance_violations_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let real_as_synthetic = std::fs::read_to_string(fixtures().join("tilt.json"))
        .unwrap()
        .replace("bernoulli_synthetic.csv", &fixtures().join("bernoulli_real.csv").display().to_string());
    let cfg = write_config(dir.path(), "r.json", &real_as_synthetic);
    let o = fprior(&["tilt", "--config", cfg.to_str().unwrap()], &dir.path().join("r"));
    assert_eq!(o.status.code(), Some(4));

    std::fs::write(dir.path().join("mixed.csv"), "outcome,provenance\n1,synthetic\n0,real\n").unwrap();
    let mixed = std::fs::read_to_string(fixtures().join("tilt.json"))
        .unwrap()
        .replace("bernoulli_synthetic.csv", "mixed.csv");
    let cfg = write_config(dir.path(), "m.json", &mixed);
    let o = fprior(&["tilt", "--config", cfg.to_str().unwrap()], &dir.path().join("m"));
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("mixed provenance"));
}

#[test]
fn unsupported_pair_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("s.csv"),
        "outcome,c1,c2,c3,c4,provenance\n1,0.1,0.2,0.3,0.4,synthetic\n",
    )
    .unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        r#"{
          "prior": {"family": "dirichlet", "concentration": [1.0, 1.0]},
          "likelihood": {"family": "multinomial_logit", "num_alternatives": 2, "num_covariates": 2},
          "lambda": {"mode": "fixed", "value": 1.0},
          "data": {"synthetic": "s.csv"}
        }"#,
    );
    let o = fprior(&["calibrate", "--config", cfg.to_str().unwrap()], &dir.path().join("o"));
    assert_eq!(o.status.code(), Some(2), "fixed λ is rejected by calibrate");
    let o = fprior(&["tilt", "--config", cfg.to_str().unwrap()], &dir.path().join("o"));
    assert_eq!(o.status.code(), Some(5), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn tilt_with_zero_lambda_returns_prior() {
    let dir = tempfile::tempdir().unwrap();
    let body = std::fs::read_to_string(fixtures().join("tilt.json"))
        .unwrap()
        .replace("\"value\": 0.5", "\"value\": 0.0")
        .replace("bernoulli_synthetic.csv", &fixtures().join("bernoulli_synthetic.csv").display().to_string());
    let cfg = write_config(dir.path(), "c.json", &body);
    assert_ok(&fprior(&["tilt", "--config", cfg.to_str().unwrap()], &dir.path().join("o")));
    let prior = &json(&dir.path().join("o/result.json"))["foundation_prior"]["representation"]["prior"];
    assert_eq!(prior["a"].as_f64(), Some(1.0));
    assert_eq!(prior["b"].as_f64(), Some(1.0));
}

#[test]
fn single_step_engineer_trace() {
    let dir = tempfile::tempdir().unwrap();
    let body = std::fs::read_to_string(fixtures().join("engineer_mock.json"))
        .unwrap()
        .replace("\"t_max\": 60", "\"t_max\": 1")
        .replace("\"tau\": 1e-6", "\"tau\": -1.0");
    let cfg = write_config(dir.path(), "c.json", &body);
    assert_ok(&fprior(&["engineer", "--config", cfg.to_str().unwrap()], &dir.path().join("o")));
    let r = json(&dir.path().join("o/result.json"));
    assert_eq!(r["steps"].as_array().unwrap().len(), 1);
    assert_eq!(r["stop_reason"], "max_iterations");
}

#[test]
fn run_record_digest_matches_config_file() {
    let dir = tempfile::tempdir().unwrap();
    assert_ok(&run("gp", "gp.json", dir.path()));
    let record = json(&dir.path().join("run_record.json"));
    let out = Command::new("sha256sum")
        .arg(fixtures().join("gp.json"))
        .output()
        .expect("sha256sum available");
    let expected = String::from_utf8(out.stdout).unwrap();
    assert_eq!(record["config_digest"].as_str().unwrap(), expected.split_whitespace().next().unwrap());
}

#[test]
fn bfr_true_basis_fixture_recovers_half_half() {
    let dir = tempfile::tempdir().unwrap();
    assert_ok(&run("bfr", "bfr.json", dir.path()));
    let w = &json(&dir.path().join("result.json"))["weights"]["w"];
    for k in 0..2 {
        assert!((w[k].as_f64().unwrap() - 0.5).abs() < 0.05, "{w}");
    }
}

#[test]
fn bfr_extra_basis_and_shares() {
    let dir = tempfile::tempdir().unwrap();
    let body = std::fs::read_to_string(fixtures().join("bfr.json"))
        .unwrap()
        .replace("]]}", "]], \"extra_basis\": [[2.0, 0.0]], \"use_shares\": true}")
        .replace("choices.csv", &fixtures().join("choices.csv").display().to_string());
    let cfg = write_config(dir.path(), "c.json", &body);
    assert_ok(&fprior(&["bfr", "--config", cfg.to_str().unwrap()], &dir.path().join("o")));
    let r = json(&dir.path().join("o/result.json"));
    assert_eq!(r["basis"]["betas"].as_array().unwrap().len(), 3);
    let w: f64 = r["weights"]["w"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
    assert!((w - 1.0).abs() < 1e-10);
}

#[test]
fn bfr_recovers_mixture_weights() {
    let dir = tempfile::tempdir().unwrap();
    assert_ok(&run("bfr", "bfr_first_stage.json", dir.path()));
    let r = json(&dir.path().join("result.json"));
    let w: Vec<f64> = r["weights"]["w"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert_eq!(w.len(), 2);
    assert!((w[0] - 0.5).abs() < 0.1 && (w[1] - 0.5).abs() < 0.1, "{w:?}");
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-10);
}

#[test]
fn gp_predictions_interpolate_real_points() {
    let dir = tempfile::tempdir().unwrap();
    assert_ok(&run("gp", "gp.json", dir.path()));
    let r = json(&dir.path().join("result.json"));
    let prior_var = r["prior"]["variance"].as_array().unwrap();
    let post_var = r["posterior"]["variance"].as_array().unwrap();
    for (a, b) in prior_var.iter().zip(post_var) {
        assert!(b.as_f64().unwrap() <= a.as_f64().unwrap());
    }
    let table = std::fs::read_to_string(dir.path().join("predictions.csv")).unwrap();
    assert_eq!(table.lines().count(), 10);
}

#[test]
fn plm_estimate_is_near_truth() {
    let dir = tempfile::tempdir().unwrap();
    assert_ok(&run("plm", "plm.json", dir.path()));
    let fit = &json(&dir.path().join("result.json"))["fit"];
    let theta = fit["theta_hat"].as_f64().unwrap();
    let se = fit["theta_se"].as_f64().unwrap();
    assert!((theta - 1.5).abs() < 4.0 * se, "{theta} ± {se}");
}
