use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use stackelberg::{ConstantGame, GameSpec, TimeGrid};

fn stackelberg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stackelberg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn write_spec(dir: &Path, spec: &GameSpec) -> String {
    let path = dir.join("spec.json");
    std::fs::write(&path, spec.to_json()).unwrap();
    path.display().to_string()
}

/// Production example with the state noise switched on.
fn noisy_example(dir: &Path) -> String {
    let out = dir.join("example");
    let run = stackelberg(&["example", "--N", "16", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&run), 0);
    let mut doc = read_json(&out.join("spec.json"));
    doc["matrices"]["sigma"]["constant"] = serde_json::json!([[0.3]]);
    doc["T"] = serde_json::json!(0.5);
    let path = dir.join("noisy.json");
    std::fs::write(&path, doc.to_string()).unwrap();
    path.display().to_string()
}

#[test]
fn homogeneous_game_solves_to_zero() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ConstantGame::homogeneous(1, 1, 1)
        .into_spec(TimeGrid::new(1.0, 10).unwrap())
        .unwrap();
    let spec_path = write_spec(dir.path(), &spec);
    let out = dir.path().join("out");
    let run = stackelberg(&[
        "solve",
        "--spec",
        &spec_path,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let summary = read_json(&out.join("summary.json"));
    assert_eq!(summary["value"].as_f64(), Some(0.0));
    for file in ["P.csv", "P1.csv", "Phat.csv", "gains.csv", "config.json"] {
        assert!(out.join(file).exists(), "{file}");
    }
}

#[test]
fn solved_spec_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ConstantGame::homogeneous(2, 1, 1)
        .into_spec(TimeGrid::new(0.5, 8).unwrap())
        .unwrap();
    let spec_path = write_spec(dir.path(), &spec);
    let out = dir.path().join("out");
    assert_eq!(
        code(&stackelberg(&[
            "solve",
            "--spec",
            &spec_path,
            "--out",
            out.to_str().unwrap()
        ])),
        0
    );
    let echoed =
        GameSpec::from_json(&std::fs::read_to_string(out.join("spec.json")).unwrap()).unwrap();
    assert_eq!(echoed.to_json(), spec.to_json());
}

#[test]
fn grid_flag_overrides_the_spec() {
    let dir = tempfile::tempdir().unwrap();
    let spec_path = noisy_example(dir.path());
    let out = dir.path().join("out");
    let run = stackelberg(&[
        "solve",
        "--spec",
        &spec_path,
        "--grid-n",
        "24",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 0);
    let rows = std::fs::read_to_string(out.join("P.csv"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(rows, 26);
    assert_eq!(read_json(&out.join("config.json"))["config"]["grid_n"], 24);
}

#[test]
fn example_reproduces_the_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let run = stackelberg(&["example", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&run), 0);
    let mut reader = csv::Reader::from_path(out.join("bode.csv")).unwrap();
    let first = reader.records().next().unwrap().unwrap();
    let p0: f64 = first[1].parse().unwrap();
    let exact = 1.5 * 4f64.exp() - 0.5;
    assert!(((p0 - exact) / exact).abs() < 1e-8);
    let summary = read_json(&out.join("summary.json"));
    assert_eq!(summary["PT"].as_f64(), Some(1.0));
    assert!(out.join("strategies.csv").exists());
}

#[test]
fn verify_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let spec_path = noisy_example(dir.path());
    let run_into = |name: &str| {
        let out = dir.path().join(name);
        let run = stackelberg(&[
            "verify",
            "--spec",
            &spec_path,
            "--out",
            out.to_str().unwrap(),
            "--paths",
            "300",
            "--directions",
            "2",
            "--seed",
            "5",
        ]);
        assert!(
            matches!(code(&run), 0 | 3),
            "{}",
            String::from_utf8_lossy(&run.stderr)
        );
        (
            std::fs::read(out.join("verify.json")).unwrap(),
            std::fs::read(out.join("perturbation.csv")).unwrap(),
        )
    };
    let (a, csv) = run_into("a");
    assert_eq!((a.clone(), csv), run_into("b"));
    let report: Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(report["oracle"]["applicable"], false);
    assert_eq!(report["perturbation"]["null_test_exact"], true);
}

#[test]
fn simulate_writes_per_path_costs() {
    let dir = tempfile::tempdir().unwrap();
    let spec_path = noisy_example(dir.path());
    let out = dir.path().join("out");
    let run = stackelberg(&[
        "simulate",
        "--spec",
        &spec_path,
        "--out",
        out.to_str().unwrap(),
        "--paths",
        "50",
        "--per-path",
    ]);
    assert_eq!(code(&run), 0);
    let summary = read_json(&out.join("simulation.json"));
    assert_eq!(summary["paths"], 50);
    let rows = std::fs::read_to_string(out.join("paths.csv"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(rows, 51);
}

#[test]
fn dump_blocks_prints_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let spec_path = noisy_example(dir.path());
    let out = dir.path().join("out");
    let run = stackelberg(&[
        "dump-blocks",
        "--spec",
        &spec_path,
        "--out",
        out.to_str().unwrap(),
        "--stage",
        "hat",
        "--node",
        "3",
    ]);
    assert_eq!(code(&run), 0);
    let doc: Value = serde_json::from_slice(&run.stdout).unwrap();
    assert_eq!(doc["node"], 3);
    assert!(doc["blocks"].as_object().is_some_and(|b| !b.is_empty()));

    let far = stackelberg(&[
        "dump-blocks",
        "--spec",
        &spec_path,
        "--out",
        out.to_str().unwrap(),
        "--stage",
        "hat",
        "--node",
        "99",
    ]);
    assert_eq!(code(&far), 1);
}

#[test]
fn malformed_input_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ \"n\": 1, ").unwrap();
    let out = dir.path().join("out");
    assert_eq!(
        code(&stackelberg(&[
            "solve",
            "--spec",
            bad.to_str().unwrap(),
            "--out",
            out.to_str().unwrap()
        ])),
        1
    );
    assert_eq!(
        code(&stackelberg(&["solve", "--spec", "/nonexistent.json"])),
        1
    );
    assert_eq!(code(&stackelberg(&["solve", "--bogus"])), 1);
    assert_eq!(code(&stackelberg(&["--help"])), 0);
}

#[test]
fn failed_validation_writes_its_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = ConstantGame::homogeneous(1, 1, 1)
        .into_spec(TimeGrid::new(1.0, 10).unwrap())
        .unwrap();
    spec.alpha = -1.0;
    let spec_path = write_spec(dir.path(), &spec);
    let out = dir.path().join("out");
    let run = stackelberg(&[
        "solve",
        "--spec",
        &spec_path,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 1);
    assert!(out.join("validation.json").exists());
}
