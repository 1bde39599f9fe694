//! End-to-end checks of the installed binary: file emissions, exit codes,
//! and byte-level determinism across reruns.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_mtcop");

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("MTCOP_OUT")
        .output()
        .expect("binary runs")
}

fn tiny_config() -> &'static str {
    "[tasks]\n\
     cops = tsp, kp\n\
     tsp.scales = 4\n\
     kp.scales = 5\n\
     \n\
     [schedule]\n\
     kind = round-robin\n\
     seed = 5\n\
     \n\
     [model]\n\
     hidden = 4\n\
     depth = 1\n\
     \n\
     [optimizer]\n\
     kind = gd\n\
     lr = 0.01\n\
     batch_size = 2\n\
     rollouts = 2\n\
     \n\
     [budget]\n\
     steps = 2\n\
     weights = uniform\n\
     \n\
     [eval]\n\
     instances = 4\n\
     seed = 9\n"
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn train_emits_one_matrix_per_window_and_reruns_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("exp.ini");
    fs::write(&config, tiny_config()).unwrap();

    for out in ["a", "b"] {
        let res = run_in(tmp.path(), &["train", "exp.ini", "--out", out]);
        assert!(res.status.success(), "{}", stderr(&res));
    }
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");

    // Two tasks, uniform weights, budget 2, default freq = task count:
    // exactly one closed window.
    for name in ["checkpoint.json", "metrics.jsonl", "W.csv", "report.json", "M_0001.csv"] {
        assert!(a.join(name).exists(), "missing {name}");
    }
    let m_files: Vec<_> = fs::read_dir(&a)
        .unwrap()
        .filter_map(|e| e.unwrap().file_name().into_string().ok())
        .filter(|n| n.starts_with("M_"))
        .collect();
    assert_eq!(m_files.len(), 1);

    for name in ["metrics.jsonl", "W.csv", "M_0001.csv", "checkpoint.json", "report.json"] {
        let left = fs::read(a.join(name)).unwrap();
        let right = fs::read(b.join(name)).unwrap();
        assert_eq!(left, right, "{name} differs between identical runs");
    }
}

#[test]
fn missing_schedule_section_exits_two_and_names_it() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("exp.ini");
    fs::write(&config, "[tasks]\ncops = tsp\ntsp.scales = 4\n\n[budget]\nsteps = 2\n").unwrap();
    let res = run_in(tmp.path(), &["train", "exp.ini", "--out", "o"]);
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr(&res).contains("[schedule]"), "{}", stderr(&res));
}

#[test]
fn eval_against_own_baseline_zeroes_gains() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("exp.ini"), tiny_config()).unwrap();
    let res = run_in(tmp.path(), &["train", "exp.ini", "--out", "run"]);
    assert!(res.status.success(), "{}", stderr(&res));

    let res = run_in(
        tmp.path(),
        &[
            "eval",
            "run/checkpoint.json",
            "exp.ini",
            "--n",
            "4",
            "--baseline",
            "run/report.json",
            "--out",
            "evald",
        ],
    );
    assert!(res.status.success(), "{}", stderr(&res));
    let table = fs::read_to_string(tmp.path().join("evald/gaps.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next().unwrap(), "task,gap_pct,gain_vs_baseline");
    let mut gap_sum = 0.0;
    let mut total_row = None;
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells.len(), 3);
        assert_eq!(cells[2].parse::<f64>().unwrap(), 0.0, "gain nonzero: {line}");
        if cells[0] == "total" {
            total_row = Some(cells[1].parse::<f64>().unwrap());
        } else {
            gap_sum += cells[1].parse::<f64>().unwrap();
        }
    }
    // Totals match the column sum at the emitted precision.
    assert!((total_row.unwrap() - gap_sum).abs() < 1e-5);
}

#[test]
fn eval_task_set_mismatch_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("exp.ini"), tiny_config()).unwrap();
    let res = run_in(tmp.path(), &["train", "exp.ini", "--out", "run"]);
    assert!(res.status.success(), "{}", stderr(&res));

    let other = tiny_config().replace("tsp.scales = 4", "tsp.scales = 5");
    fs::write(tmp.path().join("other.ini"), other).unwrap();
    let res = run_in(
        tmp.path(),
        &["eval", "run/checkpoint.json", "other.ini", "--out", "e"],
    );
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr(&res).contains("task set"), "{}", stderr(&res));
}

#[test]
fn decomp_check_passes_on_quadratics() {
    let tmp = tempfile::tempdir().unwrap();
    let res = run_in(
        tmp.path(),
        &["decomp-check", "--mode", "quadratic", "--windows", "4"],
    );
    assert!(res.status.success(), "{}", stderr(&res));
    assert!(stdout(&res).contains("pass"), "{}", stdout(&res));

    let res = run_in(
        tmp.path(),
        &[
            "decomp-check",
            "--mode",
            "quadratic",
            "--optimizer",
            "adam",
            "--windows",
            "3",
        ],
    );
    assert!(res.status.success(), "{}", stderr(&res));
}

#[test]
fn bandit_sim_single_arm_has_zero_regret_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let args = [
        "bandit-sim",
        "--alg",
        "ts",
        "--env",
        "bernoulli:0.7",
        "--horizon",
        "50",
        "--seeds",
        "3",
        "--out",
        "sim",
    ];
    let res = run_in(tmp.path(), &args);
    assert!(res.status.success(), "{}", stderr(&res));
    let first = fs::read_to_string(tmp.path().join("sim/regret.csv")).unwrap();
    for line in first.lines().skip(1) {
        for cell in line.split(',').skip(1) {
            assert_eq!(cell.parse::<f64>().unwrap(), 0.0, "nonzero regret: {line}");
        }
    }
    assert!(first.lines().last().unwrap().starts_with("final,"));

    let res = run_in(tmp.path(), &args);
    assert!(res.status.success());
    let second = fs::read_to_string(tmp.path().join("sim/regret.csv")).unwrap();
    assert_eq!(first, second);
}

#[test]
fn report_on_a_single_run_reproduces_it() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("exp.ini"), tiny_config()).unwrap();
    let res = run_in(tmp.path(), &["train", "exp.ini", "--out", "run"]);
    assert!(res.status.success(), "{}", stderr(&res));

    let res = run_in(tmp.path(), &["report", "run", "--out", "agg"]);
    assert!(res.status.success(), "{}", stderr(&res));
    let agg = tmp.path().join("agg");

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("run/report.json")).unwrap())
            .unwrap();
    let gaps: Vec<f64> = report["eval"]["gap"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();

    let comparison = fs::read_to_string(agg.join("comparison.csv")).unwrap();
    let lines: Vec<&str> = comparison.lines().collect();
    assert_eq!(lines[0], "task,round-robin");
    assert_eq!(lines[1], format!("tsp-4,{:.6}", gaps[0]));
    assert_eq!(lines[2], format!("kp-5,{:.6}", gaps[1]));
    assert!(lines[4].starts_with("gain,"));

    // Aggregated W of a single run equals that run's W.
    assert_eq!(
        fs::read_to_string(agg.join("W.csv")).unwrap(),
        fs::read_to_string(tmp.path().join("run/W.csv")).unwrap()
    );
    let w = fs::read_to_string(agg.join("W.csv")).unwrap();
    assert!(w.starts_with("task,tsp-4,kp-5"));

    let summary = fs::read_to_string(agg.join("summary.txt")).unwrap();
    assert!(summary.contains("mean |W|"), "{summary}");

    let long = fs::read_to_string(agg.join("influence_long.csv")).unwrap();
    // one window, 2x2 matrix
    assert_eq!(long.lines().count(), 1 + 4);
}

#[test]
fn default_out_dir_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let target = tmp.path().join("from-env");
    let res = Command::new(BIN)
        .args([
            "bandit-sim",
            "--alg",
            "round-robin",
            "--env",
            "bernoulli:0.5,0.5",
            "--horizon",
            "10",
            "--seeds",
            "2",
        ])
        .current_dir(tmp.path())
        .env("MTCOP_OUT", &target)
        .output()
        .unwrap();
    assert!(res.status.success(), "{}", stderr(&res));
    assert!(target.join("regret.csv").exists());
}
