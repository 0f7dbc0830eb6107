use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn driftfollow(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_driftfollow"))
        .args(args)
        .current_dir(dir)
        .env_remove("DRIFTFOLLOW_SEED")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = "hidden_size = 6\nepochs = 1\nbatch_size = 8\nimportance_cap = 300\n";

#[test]
fn generate_counts_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let o = driftfollow(dir.path(), &["generate", "--count", "300", "--seed", "7", "--out", "events.jsonl"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("events.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 300);
    for regime in ["low-", "mid-", "high-"] {
        assert_eq!(text.lines().filter(|l| l.contains(&format!("\"{regime}"))).count(), 100);
    }
    assert!(dir.path().join("events.manifest.json").exists());
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("mean FV speed"), "{stdout}");

    driftfollow(dir.path(), &["generate", "--count", "300", "--seed", "7", "--out", "again.jsonl"]);
    assert_eq!(fs::read(dir.path().join("again.jsonl")).unwrap(), text.as_bytes());
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let run = |env: Option<&str>, out: &str| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_driftfollow"));
        c.args(["generate", "--count", "6", "--out", out]).current_dir(dir.path());
        match env {
            Some(v) => c.env("DRIFTFOLLOW_SEED", v),
            None => c.env_remove("DRIFTFOLLOW_SEED"),
        };
        assert!(c.status().unwrap().success());
        fs::read(dir.path().join(out)).unwrap()
    };
    let env7 = run(Some("7"), "a.jsonl");
    let default = run(None, "b.jsonl");
    driftfollow(dir.path(), &["generate", "--count", "6", "--seed", "7", "--out", "c.jsonl"]);
    assert_eq!(env7, fs::read(dir.path().join("c.jsonl")).unwrap());
    driftfollow(dir.path(), &["generate", "--count", "6", "--seed", "42", "--out", "d.jsonl"]);
    assert_eq!(default, fs::read(dir.path().join("d.jsonl")).unwrap());
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = driftfollow(dir.path(), &["generate", "--count", "0"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--count"), "{}", stderr(&o));
    assert_eq!(code(&driftfollow(dir.path(), &["generate", "--bogus"])), 2);
    assert_eq!(code(&driftfollow(dir.path(), &["generate", "--regimes", "warp"])), 2);

    fs::write(dir.path().join("empty.jsonl"), "").unwrap();
    let o = driftfollow(dir.path(), &["split", "--in", "empty.jsonl"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("need ≥ 9 events"), "{}", stderr(&o));
}

#[test]
fn help_documents_every_flag_and_default() {
    let dir = tempfile::tempdir().unwrap();
    let expect: &[(&str, &[&str])] = &[
        ("generate", &["--count", "[default: 300]", "--regimes", "--dt", "[default: 0.1]", "--seed", "--out"]),
        ("split", &["--in", "--seed", "--out-dir", "[default: tasks]"]),
        ("train", &["--tasks-dir", "--method", "[default: all]", "--config", "--seed", "--epochs", "--lambda", "--out-dir"]),
        ("evaluate", &["--tasks-dir", "--checkpoints-dir", "--seed", "--out-dir", "[default: report]"]),
        ("report", &["--tasks-dir", "--checkpoints-dir", "--out-dir"]),
        ("repro", &["--seed", "--count", "[default: 600]", "--config", "--out-dir", "[default: repro]"]),
    ];
    for (sub, flags) in expect {
        let o = driftfollow(dir.path(), &[sub, "--help"]);
        assert_eq!(code(&o), 0);
        let help = String::from_utf8_lossy(&o.stdout);
        for f in flags.iter().chain(&["--jobs"]) {
            assert!(help.contains(f), "{sub} --help lacks {f}:\n{help}");
        }
    }
}

#[test]
fn parse_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.jsonl"), "{\"event_id\": \"x\"\n").unwrap();
    let o = driftfollow(dir.path(), &["split", "--in", "bad.jsonl"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("bad.jsonl:1:"), "{}", stderr(&o));
    assert_eq!(code(&driftfollow(dir.path(), &["split", "--in", "missing.jsonl"])), 3);
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("small.cfg"), SMALL).unwrap();
    assert_eq!(code(&driftfollow(d, &["generate", "--count", "30", "--seed", "3"])), 0);

    let o = driftfollow(d, &["split", "--in", "events.jsonl", "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("tasks/manifest.json")).unwrap()).unwrap();
    let events = driftfollow::data::load_events(&d.join("events.jsonl")).unwrap();
    let (_, bounds) = driftfollow::data::split_tasks(&events, 3).unwrap();
    assert_eq!(manifest["boundaries"]["lower"].as_f64().unwrap(), bounds.lower);
    assert_eq!(manifest["boundaries"]["upper"].as_f64().unwrap(), bounds.upper);

    // no checkpoints yet
    assert_eq!(code(&driftfollow(d, &["evaluate"])), 5);

    let o = driftfollow(d, &["--jobs", "1", "train", "--method", "ewc", "--config", "small.cfg"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for k in 1..=3 {
        assert!(d.join(format!("checkpoints/ewc_stage{k}.dfw")).exists());
    }
    let first = fs::read(d.join("checkpoints/ewc_stage3.dfw")).unwrap();
    let echoed = fs::read_to_string(d.join("checkpoints/run_config.txt")).unwrap();
    assert!(echoed.contains("hidden_size = 6") && echoed.contains("lambda = 100") && echoed.contains("seed = 42"));
    assert!(d.join("checkpoints/ewc_history.csv").exists());

    // rerun with two workers: identical bytes
    let o = driftfollow(d, &["--jobs", "2", "train", "--method", "ewc", "--config", "small.cfg"]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(d.join("checkpoints/ewc_stage3.dfw")).unwrap(), first);

    // flags override the config file
    driftfollow(d, &["train", "--method", "mas", "--config", "small.cfg", "--epochs", "2", "--out-dir", "mas"]);
    let echoed = fs::read_to_string(d.join("mas/run_config.txt")).unwrap();
    assert!(echoed.contains("epochs = 2") && echoed.contains("lambda = 1000\n"), "{echoed}");

    let o = driftfollow(d, &["train", "--method", "joint,baseline,mas", "--config", "small.cfg"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(d.join("checkpoints/joint_stage3.dfw").exists());
    assert!(!d.join("checkpoints/joint_stage1.dfw").exists());

    let o = driftfollow(d, &["report"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = fs::read_to_string(d.join("report/report.md")).unwrap();
    for label in ["LSTM", "CL-Baseline", "CL-EWC", "CL-MAS"] {
        assert!(report.contains(&format!("| {label} | 1 |")), "{label} missing");
    }
    assert!(report.contains("Forgetting"));
    let csv = fs::read(d.join("report/stage_matrix.csv")).unwrap();
    let matrix = driftfollow::eval::StageMatrix::from_csv(std::str::from_utf8(&csv).unwrap()).unwrap();
    assert_eq!(matrix.len(), 3 * 6 + 3);
    for k in 1..=3 {
        let traj = fs::read_to_string(d.join(format!("report/traj_task{k}.csv"))).unwrap();
        assert!(traj.starts_with("method,t,"));
    }

    // regeneration is byte-identical
    driftfollow(d, &["evaluate", "--out-dir", "report2"]);
    assert_eq!(fs::read(d.join("report2/stage_matrix.csv")).unwrap(), csv);
    assert_eq!(fs::read_to_string(d.join("report2/report.md")).unwrap(), report);

    fs::remove_file(d.join("tasks/task2.jsonl")).unwrap();
    let o = driftfollow(d, &["evaluate"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("task2.jsonl"), "{}", stderr(&o));
}

#[test]
fn small_repro_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("small.cfg"), SMALL).unwrap();
    let o = driftfollow(d, &["--jobs", "1", "repro", "--count", "30", "--config", "small.cfg", "--out-dir", "out"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = fs::read_to_string(d.join("out/report.md")).unwrap();
    assert!(report.contains("CL-MAS") && report.contains("Forgetting"));
    assert_eq!(fs::read_dir(d.join("out/checkpoints")).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "dfw")).count(), 10);
}
