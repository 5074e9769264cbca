use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gmmq::envs::{EnvName, EnvSpec, EnvState};
use gmmq::model_io;
use gmmq::policy_iter::{moving_average, q_eval};

const HEADER: &str =
    "env,k,metric,seed,trial,steps_to_goal,steps_to_goal_ma10,final_loss,wall_time_ms";

fn gmmq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gmmq"))
        .args(args)
        .env_remove("GMMQ_OUT")
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let out = dir.join("out");
    let text = format!(
        r#"{{
  "env": "pendulum",
  "trials": 3,
  "rollout": {{"episodes": 3, "steps_per_episode": 15}},
  "armijo": {{"j_steps": 4}},
  "eval": {{"step_cap": 60}},
  "n_seeds": 2,
  "output_dir": "{}"{extra}
}}"#,
        out.display()
    );
    let path = dir.join("config.json");
    fs::write(&path, text).unwrap();
    path
}

fn read_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path)
        .unwrap()
        .records()
        .map(Result::unwrap)
        .collect()
}

#[test]
fn missing_config_exits_2() {
    let out = gmmq(&["run", "/definitely/not/here.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_config_reports_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, "{\n  \"env\": \"pendulum\",\n  \"k\": \"five\"\n}").unwrap();
    let out = gmmq(&["run", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn run_writes_rows_config_and_models() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let out = gmmq(&["run", cfg.to_str().unwrap()]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let outdir = dir.path().join("out");

    let text = fs::read_to_string(outdir.join("results.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), HEADER);
    let rows = read_rows(&outdir.join("results.csv"));
    assert_eq!(rows.len(), 3 * 2);
    let keys: Vec<(String, String)> = rows
        .iter()
        .map(|r| (r[3].to_string(), r[4].to_string()))
        .collect();
    let expected: Vec<(String, String)> = ["0", "1"]
        .iter()
        .flat_map(|s| (1..=3).map(move |t| (s.to_string(), t.to_string())))
        .collect();
    assert_eq!(keys, expected);

    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(outdir.join("config_resolved.json")).unwrap())
            .unwrap();
    assert_eq!(resolved["pi"]["armijo"]["sigma"], 1e-4);
    assert_eq!(resolved["pi"]["discount"], 0.9);
    assert_eq!(resolved["pi"]["armijo"]["j_steps"], 4);
    assert_eq!(resolved["n_seeds"], 2);
    assert_eq!(resolved["record_timing"], true);

    let logs: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(outdir.join("results.json")).unwrap()).unwrap();
    assert_eq!(logs.as_array().unwrap().len(), 2);
    for seed in 0..2 {
        assert!(outdir
            .join(format!("models/pendulum_k5_seed{seed}.json"))
            .exists());
    }
}

#[test]
fn output_env_var_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let other = dir.path().join("elsewhere");
    let out = Command::new(env!("CARGO_BIN_EXE_gmmq"))
        .args(["run", cfg.to_str().unwrap()])
        .env("GMMQ_OUT", &other)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(other.join("results.csv").exists());
    assert!(!dir.path().join("out").exists());
}

#[test]
fn results_are_reproducible_without_timings() {
    let dir = tempfile::tempdir().unwrap();
    let extra = r#", "record_timing": false, "sweep": [3, 4], "emit": {"json": false}"#;
    let cfg = small_config(dir.path(), extra);
    let run = || {
        let out = gmmq(&["run", cfg.to_str().unwrap()]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        fs::read(dir.path().join("out/results.csv")).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert_eq!(
        read_rows(&dir.path().join("out/results.csv")).len(),
        2 * 2 * 3
    );
    assert!(!dir.path().join("out/results.json").exists());
}

#[test]
fn gradcheck_passes_and_its_negative_control_fails() {
    let ok = gmmq(&["gradcheck", "--trials", "10"]);
    assert!(ok.status.success());
    let text = String::from_utf8_lossy(&ok.stdout);
    assert_eq!(
        text.lines().filter(|l| l.ends_with("PASS")).count(),
        12,
        "{text}"
    );
    let bad = gmmq(&["gradcheck", "--trials", "5", "--corrupt-sign"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn eval_respects_the_cap_and_matches_the_saved_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    assert!(gmmq(&["run", cfg.to_str().unwrap()]).status.success());
    let model_path = dir.path().join("out/models/pendulum_k5_seed0.json");
    let args = [
        "eval",
        model_path.to_str().unwrap(),
        "--env",
        "pendulum",
        "--episodes",
        "2",
        "--step-cap",
        "25",
    ];
    let first = gmmq(&args);
    assert!(first.status.success());
    let steps: Vec<usize> = String::from_utf8_lossy(&first.stdout)
        .lines()
        .map(|l| l.parse().unwrap())
        .collect();
    assert_eq!(steps.len(), 2);
    assert!(steps.iter().all(|&s| s <= 25));
    // resting starts make the episodes deterministic
    assert_eq!(first.stdout, gmmq(&args).stdout);

    let model = model_io::load(&model_path).unwrap();
    let again = model_io::from_json(&model_io::to_json(&model)).unwrap();
    let env = EnvSpec::preset(EnvName::Pendulum);
    let s = EnvState::new(vec![0.4, -1.3]);
    for a in 0..env.n_actions() {
        let (x, y) = (
            q_eval(&model, &env, &s, a).unwrap(),
            q_eval(&again, &env, &s, a).unwrap(),
        );
        assert!((x - y).abs() <= 1e-15);
    }

    let wrong = gmmq(&["eval", model_path.to_str().unwrap(), "--env", "acrobot"]);
    assert_eq!(wrong.status.code(), Some(2));
}

#[test]
fn oracle_prints_a_json_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    assert!(gmmq(&["run", cfg.to_str().unwrap()]).status.success());
    let model_path = dir.path().join("out/models/pendulum_k5_seed0.json");
    let out = gmmq(&[
        "oracle",
        "--model",
        model_path.to_str().unwrap(),
        "--resolution",
        "5",
    ]);
    assert!(matches!(out.status.code(), Some(0 | 1)));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["contraction", "picard", "fixed_point", "slln"] {
        assert_eq!(v[key]["passed"], true, "{key}: {v}");
    }
    let agreement = v["pendulum_agreement"]["agreement"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&agreement));
    assert_eq!(v["passed"], v["pendulum_agreement"]["passed"]);
}

// The plotting side smooths the same column; both must agree on this fixture.
#[test]
fn fixture_smoothing_matches_moving_average() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/results_fixture.csv");
    let text = fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), HEADER);
    let rows = read_rows(&path);
    type Group = ((String, String), Vec<(f64, f64)>);
    let mut groups: Vec<Group> = Vec::new();
    for r in &rows {
        let key = (r[1].to_string(), r[3].to_string());
        let val = (r[5].parse().unwrap(), r[6].parse().unwrap());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(val),
            None => groups.push((key, vec![val])),
        }
    }
    assert_eq!(groups.len(), 4);
    for (_, series) in groups {
        let steps: Vec<f64> = series.iter().map(|s| s.0).collect();
        for (got, (_, want)) in moving_average(&steps, 10).iter().zip(&series) {
            assert!((got - want).abs() <= 1e-12);
        }
    }
}
